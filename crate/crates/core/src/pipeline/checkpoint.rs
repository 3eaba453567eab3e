//! Self-verifying JSON checkpoints.
//!
//! The file holds a body and the SHA-256 of its canonical JSON encoding;
//! any edit to the body makes loading fail. The same digest identifies the
//! checkpoint in run manifests.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{BasnError, Result};
use crate::itc::{ItcNetwork, ItcState};
use crate::mfd::{MfdNetwork, MfdState};
use crate::models::{Classifier, ClassifierSpec, Decoder, DecoderHead, UNetSpec};
use crate::nn::ParamStore;
use crate::rng::StageRng;
use crate::scalar::Scalar;
use crate::training::MetricLog;

pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    Classifier,
    Itc,
    Mfd,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamRecord {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointBody {
    pub format_version: u32,
    pub kind: ModelKind,
    /// Training stage that produced the weights.
    pub stage: String,
    pub state: serde_json::Value,
    pub architecture: serde_json::Value,
    /// Training configuration of `stage`.
    pub config: serde_json::Value,
    pub metrics: MetricLog,
    pub params: BTreeMap<String, Vec<ParamRecord>>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CheckpointFile {
    digest: String,
    body: CheckpointBody,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    body: CheckpointBody,
    digest: String,
}

fn body_digest(body: &CheckpointBody) -> Result<String> {
    Ok(hex::encode(Sha256::digest(serde_json::to_vec(body)?)))
}

fn export<T: Scalar>(store: &ParamStore<T>) -> Vec<ParamRecord> {
    store
        .export_values()
        .into_iter()
        .map(|(name, shape, values)| ParamRecord { name, shape, values })
        .collect()
}

fn to_json(v: &impl Serialize) -> Result<serde_json::Value> {
    Ok(serde_json::to_value(v)?)
}

impl Checkpoint {
    fn build(
        kind: ModelKind,
        stage: &str,
        state: serde_json::Value,
        architecture: serde_json::Value,
        config: &impl Serialize,
        metrics: &MetricLog,
        params: BTreeMap<String, Vec<ParamRecord>>,
    ) -> Result<Self> {
        if params.values().flatten().flat_map(|p| &p.values).any(|v| !v.is_finite()) {
            return Err(BasnError::InvalidArgument(format!(
                "refusing to checkpoint non-finite weights from {stage}"
            )));
        }
        let body = CheckpointBody {
            format_version: CHECKPOINT_FORMAT_VERSION,
            kind,
            stage: stage.to_string(),
            state,
            architecture,
            config: to_json(config)?,
            metrics: metrics.clone(),
            params,
        };
        let digest = body_digest(&body)?;
        Ok(Self { body, digest })
    }

    pub fn from_itc<T: Scalar>(net: &ItcNetwork<T>, stage: &str, config: &impl Serialize, metrics: &MetricLog) -> Result<Self> {
        let params = BTreeMap::from([
            ("encoder".to_string(), export(&net.encoder.store)),
            ("decoder".to_string(), export(&net.decoder.store)),
        ]);
        Self::build(ModelKind::Itc, stage, to_json(&net.state)?, to_json(&net.spec())?, config, metrics, params)
    }

    pub fn from_mfd<T: Scalar>(net: &MfdNetwork<T>, stage: &str, config: &impl Serialize, metrics: &MetricLog) -> Result<Self> {
        let params = BTreeMap::from([
            ("encoder".to_string(), export(&net.encoder.store)),
            ("decoder".to_string(), export(&net.decoder.store)),
        ]);
        Self::build(ModelKind::Mfd, stage, to_json(&net.state)?, to_json(&net.spec())?, config, metrics, params)
    }

    pub fn from_classifier<T: Scalar>(c: &Classifier<T>, stage: &str, config: &impl Serialize, metrics: &MetricLog) -> Result<Self> {
        let params = BTreeMap::from([("classifier".to_string(), export(&c.store))]);
        Self::build(ModelKind::Classifier, stage, serde_json::Value::Null, to_json(&c.spec())?, config, metrics, params)
    }

    pub fn body(&self) -> &CheckpointBody {
        &self.body
    }

    pub fn digest(&self) -> &str {
        &self.digest
    }

    pub fn metrics(&self) -> &MetricLog {
        &self.body.metrics
    }

    fn err(&self, reason: impl Into<String>) -> BasnError {
        BasnError::Checkpoint {
            path: PathBuf::from(&self.body.stage),
            reason: reason.into(),
        }
    }

    fn expect_kind(&self, kind: ModelKind) -> Result<()> {
        if self.body.kind != kind {
            return Err(self.err(format!("holds a {:?} model, expected {kind:?}", self.body.kind)));
        }
        Ok(())
    }

    fn field<V: DeserializeOwned>(&self, v: &serde_json::Value, what: &str) -> Result<V> {
        serde_json::from_value(v.clone()).map_err(|e| self.err(format!("bad {what}: {e}")))
    }

    fn load_block<T: Scalar>(&self, block: &str, store: &mut ParamStore<T>) -> Result<()> {
        let recs = self
            .body
            .params
            .get(block)
            .ok_or_else(|| self.err(format!("missing parameter block {block}")))?;
        let triples: Vec<_> = recs
            .iter()
            .map(|r| (r.name.clone(), r.shape.clone(), r.values.clone()))
            .collect();
        store
            .load_values(&triples)
            .map_err(|e| self.err(format!("block {block}: {e}")))
    }

    pub fn to_itc<T: Scalar>(&self) -> Result<ItcNetwork<T>> {
        self.expect_kind(ModelKind::Itc)?;
        let spec: UNetSpec = self.field(&self.body.architecture, "architecture")?;
        let mut net = ItcNetwork::new(spec, 0);
        net.state = self.field::<ItcState>(&self.body.state, "state")?;
        self.load_block("encoder", &mut net.encoder.store)?;
        self.load_block("decoder", &mut net.decoder.store)?;
        Ok(net)
    }

    pub fn to_mfd<T: Scalar>(&self) -> Result<MfdNetwork<T>> {
        self.expect_kind(ModelKind::Mfd)?;
        let spec: UNetSpec = self.field(&self.body.architecture, "architecture")?;
        let mut net = MfdNetwork::new(spec, 0);
        net.state = self.field::<MfdState>(&self.body.state, "state")?;
        if net.state.has_attention_head() {
            net.decoder = Decoder::new(spec, DecoderHead::Attention, &mut rand::SeedableRng::seed_from_u64(0));
        }
        self.load_block("encoder", &mut net.encoder.store)?;
        self.load_block("decoder", &mut net.decoder.store)?;
        Ok(net)
    }

    pub fn to_classifier<T: Scalar>(&self) -> Result<Classifier<T>> {
        self.expect_kind(ModelKind::Classifier)?;
        let spec: ClassifierSpec = self.field(&self.body.architecture, "architecture")?;
        let mut c = Classifier::new(spec, &mut <StageRng as rand::SeedableRng>::seed_from_u64(0));
        self.load_block("classifier", &mut c.store)?;
        Ok(c)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = CheckpointFile {
            digest: self.digest.clone(),
            body: self.body.clone(),
        };
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir)?;
        }
        std::fs::write(path, serde_json::to_vec(&file)?)?;
        Ok(())
    }

    /// Reads and verifies a checkpoint; edited or truncated files fail.
    pub fn load(path: &Path) -> Result<Self> {
        let fail = |reason: String| BasnError::Checkpoint {
            path: path.to_path_buf(),
            reason,
        };
        let bytes = std::fs::read(path).map_err(|e| fail(e.to_string()))?;
        let file: CheckpointFile = serde_json::from_slice(&bytes).map_err(|e| fail(format!("unreadable: {e}")))?;
        if file.body.format_version != CHECKPOINT_FORMAT_VERSION {
            return Err(fail(format!(
                "format version {} is not supported (expected {CHECKPOINT_FORMAT_VERSION})",
                file.body.format_version
            )));
        }
        let digest = body_digest(&file.body)?;
        if digest != file.digest {
            return Err(fail("digest mismatch: file was modified after it was written".into()));
        }
        Ok(Self {
            body: file.body,
            digest,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec() -> UNetSpec {
        UNetSpec {
            in_channels: 3,
            base_channels: 2,
            depth: 2,
        }
    }

    #[test]
    fn itc_round_trip_preserves_weights_and_digest() {
        let net = ItcNetwork::<f32>::new(spec(), 4);
        let ck = Checkpoint::from_itc(&net, "itc", &1u8, &MetricLog::new("itc")).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("itc.json");
        ck.save(&p).unwrap();
        let back = Checkpoint::load(&p).unwrap();
        assert_eq!(back.digest(), ck.digest());
        assert_eq!(back.to_itc::<f32>().unwrap(), net);
        assert!(back.to_mfd::<f32>().is_err());
    }

    #[test]
    fn mfd_attention_head_restored() {
        let mut net = MfdNetwork::<f64>::new(spec(), 4);
        net.state = MfdState::Phase1Trained;
        net.reset_decoder_for_attention(9).unwrap();
        let ck = Checkpoint::from_mfd(&net, "mfd-phase2", &(), &MetricLog::new("x")).unwrap();
        assert_eq!(ck.to_mfd::<f64>().unwrap(), net);
    }

    #[test]
    fn tampering_is_detected() {
        let net = ItcNetwork::<f32>::new(spec(), 4);
        let ck = Checkpoint::from_itc(&net, "itc", &(), &MetricLog::new("itc")).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("itc.json");
        ck.save(&p).unwrap();
        let text = std::fs::read_to_string(&p).unwrap();
        let edited = text.replacen("\"stage\":\"itc\"", "\"stage\":\"itx\"", 1);
        assert_ne!(edited, text);
        std::fs::write(&p, edited).unwrap();
        let err = Checkpoint::load(&p).unwrap_err().to_string();
        assert!(err.contains("digest mismatch"), "{err}");
    }
}
