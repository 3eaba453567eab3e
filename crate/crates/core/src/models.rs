//! Network architectures: a skip-connected convolutional encoder/decoder
//! used by both attention models, and the small classifier whose frozen
//! trunk serves as the task feature extractor.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{invalid, Result};
use crate::nn::{Binding, Conv2d, Linear, ParamStore};
use crate::rng::StageRng;
use crate::scalar::Scalar;

/// Attention heads squash into `(HEAD_MARGIN, 1 - HEAD_MARGIN)` so the open
/// unit interval holds even where a float sigmoid saturates.
pub const HEAD_MARGIN: f64 = 1e-6;

/// Initial attention level of a fresh attention head.
pub const ATTENTION_INIT: f64 = 0.5;
/// Initial weight scale of the attention head relative to He init. Large
/// initial logits let the first optimizer steps saturate the sigmoid,
/// where the gradient vanishes and training cannot recover.
const ATTENTION_HEAD_SCALE: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct UNetSpec {
    pub in_channels: usize,
    pub base_channels: usize,
    /// Number of stride-2 stages.
    pub depth: usize,
}

impl UNetSpec {
    pub fn channels(&self) -> Vec<usize> {
        (0..=self.depth)
            .map(|i| self.base_channels << i.min(3))
            .collect()
    }

    pub fn stride(&self) -> usize {
        1 << self.depth
    }

    /// Spatial sizes must be at least 32 and divisible by the total stride.
    pub fn check_input(&self, channels: usize, height: usize, width: usize) -> Result<()> {
        if channels != self.in_channels {
            return Err(invalid(format!(
                "network expects {} channels, got {channels}",
                self.in_channels
            )));
        }
        let s = self.stride();
        if height < 32 || width < 32 || !height.is_multiple_of(s) || !width.is_multiple_of(s) {
            return Err(invalid(format!(
                "{height}x{width} input must be at least 32x32 and divisible by {s}"
            )));
        }
        Ok(())
    }
}

/// Stem plus stride-2 stages; returns one feature map per resolution.
#[derive(Debug, Clone, PartialEq)]
pub struct Encoder<T> {
    pub store: ParamStore<T>,
    spec: UNetSpec,
    stem: Conv2d,
    downs: Vec<Conv2d>,
}

impl<T: Scalar> Encoder<T> {
    pub fn new(spec: UNetSpec, rng: &mut StageRng) -> Self {
        let ch = spec.channels();
        let mut store = ParamStore::new();
        let stem = Conv2d::new(&mut store, "enc.stem", spec.in_channels, ch[0], 3, 1, rng);
        let downs = (0..spec.depth)
            .map(|i| Conv2d::new(&mut store, &format!("enc.down{i}"), ch[i], ch[i + 1], 3, 2, rng))
            .collect();
        Self {
            store,
            spec,
            stem,
            downs,
        }
    }

    pub fn spec(&self) -> UNetSpec {
        self.spec
    }

    pub fn forward(&self, g: &mut Graph<T>, bind: &Binding, x: Var) -> Vec<Var> {
        let mut feats = Vec::with_capacity(self.spec.depth + 1);
        let mut h = self.stem.forward_act(g, bind, x);
        feats.push(h);
        for d in &self.downs {
            h = d.forward_act(g, bind, h);
            feats.push(h);
        }
        feats
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecoderHead {
    /// Single-channel attention squashed into the open unit interval.
    Attention,
    /// Image reconstruction with the given channel count, sigmoid output.
    Image(usize),
}

/// Mirrored upsampling path with skip connections from every encoder stage.
#[derive(Debug, Clone, PartialEq)]
pub struct Decoder<T> {
    pub store: ParamStore<T>,
    head_kind: DecoderHead,
    ups: Vec<Conv2d>,
    head: Conv2d,
}

impl<T: Scalar> Decoder<T> {
    pub fn new(spec: UNetSpec, head_kind: DecoderHead, rng: &mut StageRng) -> Self {
        let ch = spec.channels();
        let mut store = ParamStore::new();
        let ups = (0..spec.depth)
            .map(|i| {
                Conv2d::new(&mut store, &format!("dec.up{i}"), ch[i + 1] + ch[i], ch[i], 3, 1, rng)
            })
            .collect();
        let out = match head_kind {
            DecoderHead::Attention => 1,
            DecoderHead::Image(c) => c,
        };
        let head = Conv2d::new(&mut store, "dec.head", ch[0], out, 1, 1, rng);
        let mut d = Self {
            store,
            head_kind,
            ups,
            head,
        };
        if head_kind == DecoderHead::Attention {
            d.head.scale_weights(&mut d.store, ATTENTION_HEAD_SCALE);
            d.set_initial_attention(ATTENTION_INIT);
        }
        d
    }

    /// Sets the head bias so a fresh network outputs roughly `level`
    /// everywhere. Only meaningful before training.
    pub fn set_initial_attention(&mut self, level: f64) {
        let level = level.clamp(1e-3, 1.0 - 1e-3);
        self.head.fill_bias(&mut self.store, (level / (1.0 - level)).ln());
    }

    pub fn head_kind(&self) -> DecoderHead {
        self.head_kind
    }

    pub fn forward(&self, g: &mut Graph<T>, bind: &Binding, feats: &[Var]) -> Var {
        let depth = self.ups.len();
        let mut h = feats[depth];
        for i in (0..depth).rev() {
            let up = g.upsample2x(h);
            let cat = g.concat_channels(up, feats[i]);
            h = self.ups[i].forward_act(g, bind, cat);
        }
        let logits = self.head.forward(g, bind, h);
        let s = g.sigmoid(logits);
        match self.head_kind {
            DecoderHead::Image(_) => s,
            DecoderHead::Attention => {
                let m = T::lit(HEAD_MARGIN);
                let scaled = g.scale(s, T::one() - m - m);
                g.add_scalar(scaled, m)
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassifierSpec {
    pub in_channels: usize,
    pub base_channels: usize,
    pub classes: usize,
}

/// Three stride-2 convolutions, global average pooling and a linear head.
#[derive(Debug, Clone, PartialEq)]
pub struct Classifier<T> {
    pub store: ParamStore<T>,
    spec: ClassifierSpec,
    convs: Vec<Conv2d>,
    fc: Linear,
}

impl<T: Scalar> Classifier<T> {
    pub fn new(spec: ClassifierSpec, rng: &mut StageRng) -> Self {
        let mut store = ParamStore::new();
        let b = spec.base_channels;
        let widths = [spec.in_channels, b, 2 * b, 4 * b];
        let convs = (0..3)
            .map(|i| Conv2d::new(&mut store, &format!("cls.conv{i}"), widths[i], widths[i + 1], 3, 2, rng))
            .collect();
        let fc = Linear::new(&mut store, "cls.fc", 4 * b, spec.classes, rng);
        Self {
            store,
            spec,
            convs,
            fc,
        }
    }

    pub fn spec(&self) -> ClassifierSpec {
        self.spec
    }

    /// Output of the last convolutional stage, `[N, 4b, H/8, W/8]`.
    pub fn trunk(&self, g: &mut Graph<T>, bind: &Binding, x: Var) -> Var {
        let mut h = x;
        for c in &self.convs {
            h = c.forward_act(g, bind, h);
        }
        h
    }

    pub fn logits_from_trunk(&self, g: &mut Graph<T>, bind: &Binding, trunk: Var) -> Var {
        let pooled = g.global_avg_pool(trunk);
        self.fc.forward(g, bind, pooled)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;
    use rand::SeedableRng;

    #[test]
    fn unet_preserves_spatial_size() {
        let spec = UNetSpec {
            in_channels: 3,
            base_channels: 4,
            depth: 4,
        };
        let mut rng = StageRng::seed_from_u64(0);
        let enc = Encoder::<f32>::new(spec, &mut rng);
        let dec = Decoder::<f32>::new(spec, DecoderHead::Attention, &mut rng);
        let mut g = Graph::new();
        let x = g.constant(Tensor::full(&[2, 3, 32, 48], 0.5));
        let eb = enc.store.bind(&mut g, false);
        let db = dec.store.bind(&mut g, false);
        let f = enc.forward(&mut g, &eb, x);
        let y = dec.forward(&mut g, &db, &f);
        assert_eq!(g.shape(y), &[2, 1, 32, 48]);
        assert!(g.value(y).data().iter().all(|&v| v > 0.0 && v < 1.0));
        assert!(spec.check_input(3, 40, 48).is_err());
        assert!(spec.check_input(3, 16, 16).is_err());
        assert!(spec.check_input(1, 32, 32).is_err());
    }
}
