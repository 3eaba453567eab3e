//! Model loading, codec knob resolution and the embed/extract commands.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::codec::{
    attention_capacity, bits_to_bytes, build_plan, bser, bytes_to_bits, embed, extract_with_plan, received_bits,
    CapacityMap, CodecConfig, EmbeddingPlan, PayloadFrame, PlanConfig,
};
use crate::error::{invalid, BasnError, Result};
use crate::extractor::FeatureExtractor;
use crate::fusion::FusionStrategy;
use crate::image::{is_lossy_format, ImageTensor};
use crate::itc::ItcNetwork;
use crate::mfd::MfdNetwork;
use crate::rng::derive_seed;

use super::config::RunConfig;
use super::strategy::StrategyName;
use super::train::{require_checkpoint, Stage};
use super::P;

pub const MANIFEST_SCHEMA_VERSION: u32 = 1;

/// Which trained attention models to use.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ModelSet {
    /// Finetuned checkpoints where present, base ones otherwise.
    #[default]
    Auto,
    /// Before finetuning: `itc` and `mfd-phase2`.
    Base,
    /// `finetune-itc` and `finetune-mfd`.
    Finetuned,
}

pub struct AttentionModels {
    pub itc: ItcNetwork<P>,
    pub mfd: MfdNetwork<P>,
    pub itc_stage: Stage,
    pub mfd_stage: Stage,
    pub itc_digest: String,
    pub mfd_digest: String,
}

pub fn load_attention_models(cfg: &RunConfig, set: ModelSet) -> Result<AttentionModels> {
    let pick = |ft: Stage, base: Stage| match set {
        ModelSet::Base => base,
        ModelSet::Finetuned => ft,
        ModelSet::Auto if ft.checkpoint_path(cfg).exists() => ft,
        ModelSet::Auto => base,
    };
    let itc_stage = pick(Stage::FinetuneItc, Stage::Itc);
    let mfd_stage = pick(Stage::FinetuneMfd, Stage::MfdPhase2);
    let itc_ck = require_checkpoint(cfg, itc_stage, "attention")?;
    let mfd_ck = require_checkpoint(cfg, mfd_stage, "attention")?;
    Ok(AttentionModels {
        itc: itc_ck.to_itc()?,
        mfd: mfd_ck.to_mfd()?,
        itc_stage,
        mfd_stage,
        itc_digest: itc_ck.digest().to_string(),
        mfd_digest: mfd_ck.digest().to_string(),
    })
}

pub fn load_extractor(cfg: &RunConfig) -> Result<FeatureExtractor<P>> {
    Ok(FeatureExtractor::new(
        require_checkpoint(cfg, Stage::Classifier, "feature analysis")?.to_classifier()?,
    ))
}

/// Command-line values that take precedence over config and manifest.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct CodecOverrides {
    /// Full strategy name, or just `Min` / `Mean`.
    pub strategy: Option<String>,
    pub lsm_k: Option<u8>,
    pub ps_seed: Option<u64>,
    pub ps_limit_bpp: Option<f64>,
}

impl CodecOverrides {
    fn apply(&self, base: StrategyName, mut ps_seed: Option<u64>) -> Result<(StrategyName, Option<u64>)> {
        let mut name = base;
        if let Some(s) = &self.strategy {
            name = match s.to_ascii_lowercase().as_str() {
                "min" => StrategyName { fusion: FusionStrategy::Min, ..name },
                "mean" => StrategyName { fusion: FusionStrategy::Mean, ..name },
                _ => StrategyName::parse(s)?,
            };
        }
        if let Some(k) = self.lsm_k {
            name.lsm_k = k;
        }
        if let Some(l) = self.ps_limit_bpp {
            name.ps_limit_bpp = Some(l);
        }
        if self.ps_seed.is_some() {
            ps_seed = self.ps_seed;
        }
        Ok((name, ps_seed))
    }
}

/// Resolved knobs: strategy name plus the codec settings it implies.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ResolvedCodec {
    pub name: StrategyName,
    pub codec: CodecConfig,
}

fn resolve(name: StrategyName, ps_seed: Option<u64>, b_max: u8, root_seed: u64) -> Result<ResolvedCodec> {
    let ps_seed = match (name.ps_limit_bpp, ps_seed) {
        (Some(_), None) => Some(derive_seed(root_seed, "ps")),
        (_, s) => s,
    };
    let codec = CodecConfig {
        strategy: name.fusion,
        plan: PlanConfig {
            lsm_k: name.lsm_k,
            ps_seed,
            ps_limit_bpp: name.ps_limit_bpp,
        },
        b_max,
    };
    codec.plan.validate(b_max)?;
    Ok(ResolvedCodec { name, codec })
}

/// Config defaults with overrides applied.
pub fn resolve_codec(cfg: &RunConfig, strategy: &str, ov: &CodecOverrides) -> Result<ResolvedCodec> {
    let (name, seed) = ov.apply(StrategyName::parse(strategy)?, cfg.codec.ps_seed)?;
    resolve(name, seed, cfg.codec.b_max, cfg.seed)
}

/// Everything the receiver needs besides the models and the image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StegoManifest {
    pub schema_version: u32,
    pub strategy: String,
    pub lsm_k: u8,
    pub b_max: u8,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ps_seed: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ps_limit_bpp: Option<f64>,
    pub itc_stage: String,
    pub itc_checkpoint: String,
    pub mfd_stage: String,
    pub mfd_checkpoint: String,
    pub width: usize,
    pub height: usize,
    pub payload_bits: usize,
    pub embedded_bits: usize,
    pub capacity_bits: usize,
    /// Payload bits per pixel.
    pub payload_bpp: f64,
    pub capacity_bpp: f64,
    pub stego_sha256: String,
    /// Sidecar with the sender's capacity map, for oracle-plan extraction.
    pub capacity_map: String,
}

impl StegoManifest {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let m: Self = toml::from_str(&text).map_err(|e| BasnError::Config(format!("{}: {e}", path.display())))?;
        if m.schema_version != MANIFEST_SCHEMA_VERSION {
            return Err(BasnError::Config(format!(
                "manifest schema {} is not supported",
                m.schema_version
            )));
        }
        Ok(m)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = toml::to_string_pretty(self).map_err(|e| BasnError::Config(e.to_string()))?;
        std::fs::write(path, text)?;
        Ok(())
    }
}

/// `dir/stem.<suffix>` next to `path`.
pub fn sidecar(path: &Path, suffix: &str) -> PathBuf {
    let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("stego");
    path.with_file_name(format!("{stem}.{suffix}"))
}

pub fn manifest_path(stego: &Path) -> PathBuf {
    sidecar(stego, "manifest.toml")
}

pub fn image_sha256(img: &ImageTensor) -> String {
    hex::encode(Sha256::digest(img.bytes()))
}

pub fn plan_for(img: &ImageTensor, models: &AttentionModels, codec: &CodecConfig) -> Result<(CapacityMap, EmbeddingPlan)> {
    let cap = attention_capacity(img, &models.itc, &models.mfd, codec)?;
    let plan = build_plan(&cap, codec.plan)?;
    Ok((cap, plan))
}

#[derive(Debug, Clone)]
pub struct EmbedRequest {
    pub cover: PathBuf,
    pub payload: PathBuf,
    pub output: PathBuf,
    pub overrides: CodecOverrides,
    pub models: ModelSet,
}

#[derive(Debug, Clone)]
pub struct EmbedReport {
    pub manifest: StegoManifest,
    pub manifest_path: PathBuf,
    pub capacity_path: PathBuf,
}

pub fn cmd_embed(cfg: &RunConfig, req: &EmbedRequest) -> Result<EmbedReport> {
    if is_lossy_format(&req.output)
        || !req.output.extension().is_some_and(|e| e.eq_ignore_ascii_case("png"))
    {
        return Err(invalid(format!(
            "stego output {} must be a .png; lossy containers destroy the payload",
            req.output.display()
        )));
    }
    let rc = resolve_codec(cfg, &cfg.codec.strategy, &req.overrides)?;
    let models = load_attention_models(cfg, req.models)?;
    let cover = ImageTensor::load(&req.cover)?;
    let payload = std::fs::read(&req.payload)?;
    let frame = PayloadFrame::from_bytes(&payload);
    let (cap, plan) = plan_for(&cover, &models, &rc.codec)?;
    let stego = embed(&cover, &plan, &frame)?;
    stego.save_png(&req.output)?;
    let capacity_path = sidecar(&req.output, "capacity.png");
    cap.to_image()?.save_png(&capacity_path)?;
    let pixels = (cover.height() * cover.width()) as f64;
    let manifest = StegoManifest {
        schema_version: MANIFEST_SCHEMA_VERSION,
        strategy: rc.name.to_string(),
        lsm_k: rc.codec.plan.lsm_k,
        b_max: rc.codec.b_max,
        ps_seed: rc.codec.plan.ps_seed,
        ps_limit_bpp: rc.codec.plan.ps_limit_bpp,
        itc_stage: models.itc_stage.to_string(),
        itc_checkpoint: models.itc_digest.clone(),
        mfd_stage: models.mfd_stage.to_string(),
        mfd_checkpoint: models.mfd_digest.clone(),
        width: cover.width(),
        height: cover.height(),
        payload_bits: frame.body().len(),
        embedded_bits: frame.encoded_len(),
        capacity_bits: plan.len(),
        payload_bpp: frame.body().len() as f64 / pixels,
        capacity_bpp: plan.bpp(),
        stego_sha256: image_sha256(&stego),
        capacity_map: capacity_path
            .file_name()
            .and_then(|n| n.to_str())
            .unwrap_or_default()
            .to_string(),
    };
    let manifest_path = manifest_path(&req.output);
    manifest.save(&manifest_path)?;
    Ok(EmbedReport {
        manifest,
        manifest_path,
        capacity_path,
    })
}

#[derive(Debug, Clone, Default)]
pub struct ExtractRequest {
    pub stego: PathBuf,
    pub output: Option<PathBuf>,
    /// Payload the sender used, for bit-error measurement.
    pub reference: Option<PathBuf>,
    pub overrides: CodecOverrides,
    /// Use the sender's capacity sidecar instead of recomputing attention.
    pub oracle_plan: bool,
    pub models: ModelSet,
}

#[derive(Debug, Clone, Default)]
pub struct ExtractReport {
    /// Decoded payload, absent when the frame could not be decoded.
    pub payload: Option<Vec<u8>>,
    pub decode_error: Option<String>,
    pub bser: Option<f64>,
    pub warnings: Vec<String>,
    pub strategy: String,
}

pub fn cmd_extract(cfg: &RunConfig, req: &ExtractRequest) -> Result<ExtractReport> {
    let stego = ImageTensor::load(&req.stego)?;
    let mpath = manifest_path(&req.stego);
    let manifest = if mpath.exists() { Some(StegoManifest::load(&mpath)?) } else { None };
    let mut warnings = Vec::new();
    let rc = match &manifest {
        Some(m) => {
            let (name, seed) = req.overrides.apply(StrategyName::parse(&m.strategy)?, m.ps_seed)?;
            resolve(name, seed, m.b_max, cfg.seed)?
        }
        None => resolve_codec(cfg, &cfg.codec.strategy, &req.overrides)?,
    };
    let plan = if req.oracle_plan {
        let cpath = match &manifest {
            Some(m) => req.stego.with_file_name(&m.capacity_map),
            None => sidecar(&req.stego, "capacity.png"),
        };
        if !cpath.exists() {
            return Err(BasnError::Precondition(format!(
                "oracle plan needs the capacity map {}",
                cpath.display()
            )));
        }
        let cap = CapacityMap::from_image(&ImageTensor::load(&cpath)?, stego.channels(), rc.codec.b_max)?;
        build_plan(&cap, rc.codec.plan)?
    } else {
        let models = load_attention_models(cfg, req.models)?;
        if let Some(m) = &manifest {
            for (what, want, have) in [
                ("texture", &m.itc_checkpoint, &models.itc_digest),
                ("distortion", &m.mfd_checkpoint, &models.mfd_digest),
            ] {
                if want != have {
                    let w = format!(
                        "{what} model checkpoint {} differs from the one used to embed ({}); extraction will likely fail",
                        &have[..12.min(have.len())],
                        &want[..12.min(want.len())]
                    );
                    log::warn!("{w}");
                    warnings.push(w);
                }
            }
        }
        plan_for(&stego, &models, &rc.codec)?.1
    };
    let mut report = ExtractReport {
        strategy: rc.name.to_string(),
        warnings,
        ..Default::default()
    };
    match extract_with_plan(&stego, &plan) {
        Ok(frame) => {
            let bytes = bits_to_bytes(frame.body());
            if let Some(out) = &req.output {
                std::fs::write(out, &bytes)?;
            }
            report.payload = Some(bytes);
        }
        Err(e) if req.reference.is_some() => report.decode_error = Some(e.to_string()),
        Err(e) => return Err(e),
    }
    if let Some(r) = &req.reference {
        let sent = bytes_to_bits(&std::fs::read(r)?);
        let got = received_bits(&stego, &plan, sent.len())?;
        report.bser = Some(bser(&sent, &got)?);
    }
    Ok(report)
}
