//! Minimising-feature-distortion attention model.
//!
//! Trained in two phases. Phase 1 fits the encoder/decoder as an image
//! autoencoder. Phase 2 keeps the encoder, resets the decoder to an attention
//! head and trains it so that simulated embedding under the predicted
//! attention leaves the frozen task features unchanged, while the attention
//! stays self-consistent when recomputed from the embedded image.

use rand::distributions::{Distribution, Uniform};
use rand::SeedableRng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{invalid, BasnError, Result};
use crate::extractor::FeatureExtractor;
use crate::fusion::{fuse_node, FusionStrategy};
use crate::image::{AttentionMap, FloatImage};
use crate::itc::area_penalty_node;
use crate::models::{Decoder, DecoderHead, Encoder, UNetSpec};
use crate::nn::{Binding, OptimizerConfig};
use crate::penalty::PenaltyKind;
use crate::rng::{derive_seed, StageRng};
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::training::{diverged, epoch_batches, sequential_batches, Dataset, MetricLog};

/// Default amplitude of the simulated embedding noise, in unit intensity.
pub const DEFAULT_NOISE_AMPLITUDE: f64 = 8.0 / 255.0;

/// Serialised as the phase number, `1` or `2`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub enum MfdPhase {
    Autoencoder,
    Attention,
}

impl TryFrom<u8> for MfdPhase {
    type Error = String;

    fn try_from(v: u8) -> std::result::Result<Self, String> {
        match v {
            1 => Ok(MfdPhase::Autoencoder),
            2 => Ok(MfdPhase::Attention),
            _ => Err(format!("phase must be 1 or 2, got {v}")),
        }
    }
}

impl From<MfdPhase> for u8 {
    fn from(p: MfdPhase) -> u8 {
        match p {
            MfdPhase::Autoencoder => 1,
            MfdPhase::Attention => 2,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MfdTrainConfig {
    pub phase: MfdPhase,
    pub optimizer: OptimizerConfig,
    pub batch_size: usize,
    pub epochs: usize,
    pub noise_amplitude: f64,
}

impl MfdTrainConfig {
    pub fn phase1() -> Self {
        Self {
            phase: MfdPhase::Autoencoder,
            optimizer: OptimizerConfig::Nesterov {
                learning_rate: 1e-5,
                momentum: 0.9,
            },
            batch_size: 32,
            epochs: 30,
            noise_amplitude: DEFAULT_NOISE_AMPLITUDE,
        }
    }

    pub fn phase2() -> Self {
        Self {
            phase: MfdPhase::Attention,
            optimizer: OptimizerConfig::Adam {
                learning_rate: 0.01,
            },
            ..Self::phase1()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.noise_amplitude) {
            return Err(invalid(format!(
                "noise amplitude {} outside [0, 1]",
                self.noise_amplitude
            )));
        }
        if self.batch_size == 0 {
            return Err(invalid("batch size must be positive"));
        }
        self.optimizer.validate()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MfdState {
    Phase1Init,
    Phase1Trained,
    /// Encoder carried over, decoder freshly reset to an attention head.
    Phase2Init,
    Phase2Trained,
    Finetuned,
}

impl MfdState {
    pub fn has_attention_head(self) -> bool {
        !matches!(self, MfdState::Phase1Init | MfdState::Phase1Trained)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MfdNetwork<T> {
    pub encoder: Encoder<T>,
    pub decoder: Decoder<T>,
    pub state: MfdState,
}

pub struct MfdBinding {
    pub encoder: Binding,
    pub decoder: Binding,
}

impl<T: Scalar> MfdNetwork<T> {
    /// Fresh phase-1 autoencoder.
    pub fn new(spec: UNetSpec, seed: u64) -> Self {
        let mut rng = StageRng::seed_from_u64(seed);
        Self {
            encoder: Encoder::new(spec, &mut rng),
            decoder: Decoder::new(spec, DecoderHead::Image(spec.in_channels), &mut rng),
            state: MfdState::Phase1Init,
        }
    }

    pub fn spec(&self) -> UNetSpec {
        self.encoder.spec()
    }

    /// Keeps the encoder and swaps in a freshly initialised attention decoder.
    pub fn reset_decoder_for_attention(&mut self, seed: u64) -> Result<()> {
        if self.state != MfdState::Phase1Trained {
            return Err(BasnError::Precondition(format!(
                "decoder reset needs a trained phase-1 network, state is {:?}",
                self.state
            )));
        }
        let mut rng = StageRng::seed_from_u64(seed);
        self.decoder = Decoder::new(self.spec(), DecoderHead::Attention, &mut rng);
        self.state = MfdState::Phase2Init;
        Ok(())
    }

    pub fn bind(&self, g: &mut Graph<T>, trainable: bool) -> MfdBinding {
        MfdBinding {
            encoder: self.encoder.store.bind(g, trainable),
            decoder: self.decoder.store.bind(g, trainable),
        }
    }

    pub fn forward_node(&self, g: &mut Graph<T>, bind: &MfdBinding, x: Var) -> Var {
        let feats = self.encoder.forward(g, &bind.encoder, x);
        self.decoder.forward(g, &bind.decoder, &feats)
    }

    fn run(&self, img: &FloatImage<T>) -> Result<Tensor<T>> {
        self.spec()
            .check_input(img.channels(), img.height(), img.width())?;
        let mut g = Graph::new();
        let bind = self.bind(&mut g, false);
        let x = g.constant(img.to_tensor());
        let y = self.forward_node(&mut g, &bind, x);
        Ok(g.value(y).clone())
    }

    /// Attention map; only available once the decoder carries an attention head.
    pub fn forward(&self, img: &FloatImage<T>) -> Result<AttentionMap<T>> {
        if !self.state.has_attention_head() {
            return Err(BasnError::Precondition(
                "network is still a phase-1 autoencoder".into(),
            ));
        }
        AttentionMap::from_tensor(&self.run(img)?)
    }

    /// Phase-1 image reconstruction.
    pub fn reconstruct(&self, img: &FloatImage<T>) -> Result<FloatImage<T>> {
        if self.state.has_attention_head() {
            return Err(BasnError::Precondition(
                "network no longer carries a reconstruction head".into(),
            ));
        }
        FloatImage::from_tensor(&self.run(img)?)
    }

    pub fn is_finite(&self) -> bool {
        self.encoder.store.is_finite() && self.decoder.store.is_finite()
    }

    pub fn digest(&self) -> String {
        format!("{}{}", self.encoder.store.digest(), self.decoder.store.digest())
    }
}

/// Uniform noise in `[-amplitude, amplitude]` with the image's `[1, C, H, W]` shape.
pub fn embed_noise<T: Scalar>(channels: usize, height: usize, width: usize, amplitude: f64, seed: u64) -> Tensor<T> {
    let mut rng = StageRng::seed_from_u64(seed);
    if amplitude == 0.0 {
        return Tensor::zeros(&[1, channels, height, width]);
    }
    let u = Uniform::new_inclusive(-amplitude, amplitude);
    Tensor::from_fn(&[1, channels, height, width], |_| T::lit(u.sample(&mut rng)))
}

/// Noise seed of one image at one epoch; independent of batch composition.
pub fn noise_seed(stage_seed: u64, epoch: usize, index: usize) -> u64 {
    derive_seed(stage_seed, &format!("noise/{epoch}/{index}"))
}

fn batch_noise<T: Scalar>(data: &Dataset<T>, batch: &[usize], amplitude: f64, stage_seed: u64, epoch: usize) -> Tensor<T> {
    let (c, h, w) = data.dims();
    let items: Vec<Tensor<T>> = batch
        .iter()
        .map(|&i| embed_noise(c, h, w, amplitude, noise_seed(stage_seed, epoch, i)))
        .collect();
    Tensor::stack(&items).expect("equal noise shapes")
}

/// `clip(C + A * U, 0, 1)` inside a graph; `noise` is the constant `U`.
pub fn simulate_embed_node<T: Scalar>(g: &mut Graph<T>, cover: Var, attention: Var, noise: Var) -> Var {
    let channels = g.shape(cover)[1];
    let a = g.broadcast_channels(attention, channels);
    let d = g.mul(a, noise);
    let s = g.add(cover, d);
    g.clamp01(s)
}

/// `S = clip(C + A * U, 0, 1)` with seeded uniform `U` in `[-amplitude, amplitude]`.
pub fn simulate_embed<T: Scalar>(
    cover: &FloatImage<T>,
    attention: &AttentionMap<T>,
    noise_amplitude: f64,
    seed: u64,
) -> Result<FloatImage<T>> {
    if attention.height() != cover.height() || attention.width() != cover.width() {
        return Err(invalid(format!(
            "attention {}x{} does not match image {}x{}",
            attention.height(),
            attention.width(),
            cover.height(),
            cover.width()
        )));
    }
    if !(0.0..=1.0).contains(&noise_amplitude) {
        return Err(invalid(format!("noise amplitude {noise_amplitude} outside [0, 1]")));
    }
    let u = embed_noise::<T>(cover.channels(), cover.height(), cover.width(), noise_amplitude, seed);
    let plane = cover.height() * cover.width();
    let a = attention.values();
    let data = cover
        .data()
        .iter()
        .zip(u.data())
        .enumerate()
        .map(|(i, (&c, &n))| (c + a[i % plane] * n).max(T::zero()).min(T::one()))
        .collect();
    FloatImage::new(cover.channels(), cover.height(), cover.width(), data)
}

#[derive(Debug, Clone, Copy)]
pub struct MfdLossNodes {
    pub total: Var,
    pub fmrl: Var,
    pub cerl: Var,
    pub atrl: Var,
    pub atap: Var,
}

fn mean_abs_diff<T: Scalar>(g: &mut Graph<T>, a: Var, b: Var) -> Var {
    let d = g.sub(a, b);
    let d = g.abs(d);
    g.mean_all(d)
}

fn mean_sq_diff<T: Scalar>(g: &mut Graph<T>, a: Var, b: Var) -> Var {
    let d = g.sub(a, b);
    let d = g.square(d);
    g.mean_all(d)
}

/// Feature MSE + image L1 + attention L1 + area penalty of the cover attention.
pub fn mfd_loss_node<T: Scalar>(
    g: &mut Graph<T>,
    cover: Var,
    stego: Var,
    a_c: Var,
    a_s: Var,
    f_c: Var,
    f_s: Var,
) -> MfdLossNodes {
    let fmrl = mean_sq_diff(g, f_c, f_s);
    let cerl = mean_abs_diff(g, cover, stego);
    let atrl = mean_abs_diff(g, a_c, a_s);
    let atap = area_penalty_node(g, a_c, PenaltyKind::Mfd);
    let t = g.add(fmrl, cerl);
    let t = g.add(t, atrl);
    let total = g.add(t, atap);
    MfdLossNodes {
        total,
        fmrl,
        cerl,
        atrl,
        atap,
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MfdLoss<T> {
    pub total: T,
    pub fmrl: T,
    pub cerl: T,
    pub atrl: T,
    pub atap: T,
}

/// Gradients of the total loss with respect to its image and attention inputs.
#[derive(Debug, Clone, PartialEq)]
pub struct MfdLossGrads<T> {
    pub stego: Vec<T>,
    pub a_c: Vec<T>,
    pub a_s: Vec<T>,
    pub f_s: Vec<T>,
}

pub fn mfd_loss<T: Scalar>(
    cover: &FloatImage<T>,
    stego: &FloatImage<T>,
    a_c: &AttentionMap<T>,
    a_s: &AttentionMap<T>,
    f_c: &Tensor<T>,
    f_s: &Tensor<T>,
) -> Result<MfdLoss<T>> {
    Ok(mfd_loss_with_grad(cover, stego, a_c, a_s, f_c, f_s)?.0)
}

pub fn mfd_loss_with_grad<T: Scalar>(
    cover: &FloatImage<T>,
    stego: &FloatImage<T>,
    a_c: &AttentionMap<T>,
    a_s: &AttentionMap<T>,
    f_c: &Tensor<T>,
    f_s: &Tensor<T>,
) -> Result<(MfdLoss<T>, MfdLossGrads<T>)> {
    if !cover.same_shape(stego) {
        return Err(invalid("cover and stego shapes differ"));
    }
    let dims = |a: &AttentionMap<T>| (a.height(), a.width());
    if dims(a_c) != dims(a_s) || dims(a_c) != (cover.height(), cover.width()) {
        return Err(invalid("attention maps do not match the image"));
    }
    if f_c.shape() != f_s.shape() || f_c.is_empty() {
        return Err(invalid(format!(
            "feature shapes {:?} and {:?} differ",
            f_c.shape(),
            f_s.shape()
        )));
    }
    let mut g = Graph::new();
    let c = g.constant(cover.to_tensor());
    let s = g.variable(stego.to_tensor());
    let ac = g.variable(a_c.to_tensor());
    let as_ = g.variable(a_s.to_tensor());
    let fc = g.constant(f_c.clone());
    let fs = g.variable(f_s.clone());
    let n = mfd_loss_node(&mut g, c, s, ac, as_, fc, fs);
    let grads = g.backward(n.total);
    let take = |v: Var| grads.get(v).map(|t| t.data().to_vec()).unwrap_or_default();
    let out = MfdLoss {
        total: g.scalar_value(n.total),
        fmrl: g.scalar_value(n.fmrl),
        cerl: g.scalar_value(n.cerl),
        atrl: g.scalar_value(n.atrl),
        atap: g.scalar_value(n.atap),
    };
    Ok((
        out,
        MfdLossGrads {
            stego: take(s),
            a_c: take(ac),
            a_s: take(as_),
            f_s: take(fs),
        },
    ))
}

/// Optional second attention source fused with the network's own attention
/// before simulated embedding. Its nodes are constants.
#[derive(Debug, Clone, Copy)]
pub struct EmbedPartner {
    pub attention: Var,
    pub strategy: FusionStrategy,
}

/// The shared-weight training graph: `A_c = f(C)`, `S = embed(C, A_e)`,
/// `A_s = f(S)`, where `A_e` is `A_c` or its fusion with a partner.
pub fn mfd_training_graph<T: Scalar>(
    g: &mut Graph<T>,
    net: &MfdNetwork<T>,
    bind: &MfdBinding,
    extractor: &FeatureExtractor<T>,
    ext_bind: &Binding,
    cover: Var,
    noise: Var,
    partner: Option<EmbedPartner>,
) -> (MfdLossNodes, Var) {
    let a_c = net.forward_node(g, bind, cover);
    let a_e = match partner {
        Some(p) => fuse_node(g, p.attention, a_c, p.strategy),
        None => a_c,
    };
    let stego = simulate_embed_node(g, cover, a_e, noise);
    let a_s = net.forward_node(g, bind, stego);
    let f_c = extractor.features_node(g, ext_bind, cover);
    let f_s = extractor.features_node(g, ext_bind, stego);
    (mfd_loss_node(g, cover, stego, a_c, a_s, f_c, f_s), a_c)
}

/// Per-term means over a dataset.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MfdEvaluation {
    pub loss: f64,
    pub fmrl: f64,
    pub cerl: f64,
    pub atrl: f64,
    pub atap: f64,
    pub mean_attention: f64,
}

impl MfdEvaluation {
    pub fn to_metrics(&self) -> Vec<(&'static str, f64)> {
        vec![
            ("loss", self.loss),
            ("fmrl", self.fmrl),
            ("cerl", self.cerl),
            ("atrl", self.atrl),
            ("atap", self.atap),
            ("mean_attention", self.mean_attention),
        ]
    }
}

/// Evaluation uses one fixed noise draw per image so epochs are comparable.
/// `partner` supplies one constant attention map per image.
pub fn evaluate_mfd<T: Scalar>(
    net: &MfdNetwork<T>,
    extractor: &FeatureExtractor<T>,
    data: &Dataset<T>,
    cfg: &MfdTrainConfig,
    eval_seed: u64,
    partner: Option<(&[AttentionMap<T>], FusionStrategy)>,
) -> MfdEvaluation {
    let mut acc = [0.0f64; 6];
    let n = data.len() as f64;
    for batch in sequential_batches(data.len(), cfg.batch_size) {
        let w = batch.len() as f64 / n;
        let mut g = Graph::new();
        let bind = net.bind(&mut g, false);
        let eb = extractor.bind(&mut g);
        let c = g.constant(data.batch(&batch));
        let u = g.constant(batch_noise(data, &batch, cfg.noise_amplitude, eval_seed, 0));
        let p = partner.map(|(maps, strategy)| EmbedPartner {
            attention: g.constant(stack_maps(maps, &batch)),
            strategy,
        });
        let (nodes, a_c) = mfd_training_graph(&mut g, net, &bind, extractor, &eb, c, u, p);
        let vals = [nodes.total, nodes.fmrl, nodes.cerl, nodes.atrl, nodes.atap];
        for (k, v) in vals.iter().enumerate() {
            acc[k] += w * g.scalar_value(*v).as_f64();
        }
        acc[5] += w * g.value(a_c).mean().as_f64();
    }
    MfdEvaluation {
        loss: acc[0],
        fmrl: acc[1],
        cerl: acc[2],
        atrl: acc[3],
        atap: acc[4],
        mean_attention: acc[5],
    }
}

pub(crate) fn stack_maps<T: Scalar>(maps: &[AttentionMap<T>], batch: &[usize]) -> Tensor<T> {
    let items: Vec<Tensor<T>> = batch.iter().map(|&i| maps[i].to_tensor()).collect();
    Tensor::stack(&items).expect("equal attention shapes")
}

/// Mean absolute reconstruction error of the phase-1 autoencoder.
pub fn reconstruction_mae<T: Scalar>(net: &MfdNetwork<T>, data: &Dataset<T>, batch_size: usize) -> f64 {
    let mut total = 0.0;
    for batch in sequential_batches(data.len(), batch_size) {
        let mut g = Graph::new();
        let bind = net.bind(&mut g, false);
        let c = g.constant(data.batch(&batch));
        let y = net.forward_node(&mut g, &bind, c);
        let l = mean_abs_diff(&mut g, c, y);
        total += g.scalar_value(l).as_f64() * batch.len() as f64;
    }
    total / data.len() as f64
}

fn check_data<T: Scalar>(net: &MfdNetwork<T>, data: &Dataset<T>) -> Result<()> {
    let (c, h, w) = data.dims();
    net.spec().check_input(c, h, w)
}

/// Autoencoder initialisation with an L1 reconstruction objective.
pub fn train_mfd_phase1<T: Scalar>(
    net: &mut MfdNetwork<T>,
    data: &Dataset<T>,
    cfg: &MfdTrainConfig,
    rng: &mut StageRng,
) -> Result<MetricLog> {
    cfg.validate()?;
    if cfg.phase != MfdPhase::Autoencoder {
        return Err(invalid("phase-1 training needs a phase-1 config"));
    }
    if net.state.has_attention_head() {
        return Err(BasnError::Precondition(format!(
            "phase-1 training needs an autoencoder, state is {:?}",
            net.state
        )));
    }
    check_data(net, data)?;
    let mut log = MetricLog::new("mfd-phase1");
    log.push(0, vec![("recon_mae", reconstruction_mae(net, data, cfg.batch_size))]);
    let mut enc_opt = cfg.optimizer.build(&net.encoder.store);
    let mut dec_opt = cfg.optimizer.build(&net.decoder.store);
    for epoch in 1..=cfg.epochs {
        let snapshot = net.clone();
        for batch in epoch_batches(data.len(), cfg.batch_size, rng) {
            let mut g = Graph::new();
            let bind = net.bind(&mut g, true);
            let c = g.constant(data.batch(&batch));
            let y = net.forward_node(&mut g, &bind, c);
            let l = mean_abs_diff(&mut g, c, y);
            if !g.scalar_value(l).is_finite() {
                *net = snapshot;
                return Err(diverged("mfd-phase1", epoch));
            }
            let grads = g.backward(l);
            let ge = net.encoder.store.collect_grads(&bind.encoder, &grads);
            let gd = net.decoder.store.collect_grads(&bind.decoder, &grads);
            enc_opt.step(&mut net.encoder.store, &ge);
            dec_opt.step(&mut net.decoder.store, &gd);
        }
        if !net.is_finite() {
            *net = snapshot;
            return Err(diverged("mfd-phase1", epoch));
        }
        log.push(epoch, vec![("recon_mae", reconstruction_mae(net, data, cfg.batch_size))]);
    }
    net.state = MfdState::Phase1Trained;
    Ok(log)
}

/// Shared loop of attention training and its finetune variant.
pub(crate) fn run_mfd_attention_training<T: Scalar>(
    stage: &str,
    net: &mut MfdNetwork<T>,
    extractor: &FeatureExtractor<T>,
    data: &Dataset<T>,
    cfg: &MfdTrainConfig,
    stage_seed: u64,
    partner: Option<(&[AttentionMap<T>], FusionStrategy)>,
) -> Result<MetricLog> {
    cfg.validate()?;
    if cfg.phase != MfdPhase::Attention {
        return Err(invalid("attention training needs a phase-2 config"));
    }
    check_data(net, data)?;
    if let Some((maps, _)) = partner {
        if maps.len() != data.len() {
            return Err(invalid("one partner attention map per image required"));
        }
    }
    let eval_seed = derive_seed(stage_seed, "eval");
    let mut rng = StageRng::seed_from_u64(derive_seed(stage_seed, "batches"));
    let mut log = MetricLog::new(stage);
    log.push(0, evaluate_mfd(net, extractor, data, cfg, eval_seed, partner).to_metrics());
    let mut enc_opt = cfg.optimizer.build(&net.encoder.store);
    let mut dec_opt = cfg.optimizer.build(&net.decoder.store);
    for epoch in 1..=cfg.epochs {
        let snapshot = net.clone();
        for batch in epoch_batches(data.len(), cfg.batch_size, &mut rng) {
            let mut g = Graph::new();
            let bind = net.bind(&mut g, true);
            let eb = extractor.bind(&mut g);
            let c = g.constant(data.batch(&batch));
            let u = g.constant(batch_noise(data, &batch, cfg.noise_amplitude, stage_seed, epoch));
            let p = partner.map(|(maps, strategy)| EmbedPartner {
                attention: g.constant(stack_maps(maps, &batch)),
                strategy,
            });
            let (nodes, _) = mfd_training_graph(&mut g, net, &bind, extractor, &eb, c, u, p);
            if !g.scalar_value(nodes.total).is_finite() {
                *net = snapshot;
                return Err(diverged(stage, epoch));
            }
            let grads = g.backward(nodes.total);
            let ge = net.encoder.store.collect_grads(&bind.encoder, &grads);
            let gd = net.decoder.store.collect_grads(&bind.decoder, &grads);
            enc_opt.step(&mut net.encoder.store, &ge);
            dec_opt.step(&mut net.decoder.store, &gd);
        }
        if !net.is_finite() {
            *net = snapshot;
            return Err(diverged(stage, epoch));
        }
        log.push(epoch, evaluate_mfd(net, extractor, data, cfg, eval_seed, partner).to_metrics());
    }
    Ok(log)
}

/// Attention-generation phase. The extractor is only ever read.
pub fn train_mfd_phase2<T: Scalar>(
    net: &mut MfdNetwork<T>,
    extractor: &FeatureExtractor<T>,
    data: &Dataset<T>,
    cfg: &MfdTrainConfig,
    stage_seed: u64,
) -> Result<MetricLog> {
    if !matches!(net.state, MfdState::Phase2Init | MfdState::Phase2Trained) {
        return Err(BasnError::Precondition(format!(
            "phase-2 training needs a reset phase-1 network, state is {:?}",
            net.state
        )));
    }
    let log = run_mfd_attention_training("mfd-phase2", net, extractor, data, cfg, stage_seed, None)?;
    net.state = MfdState::Phase2Trained;
    Ok(log)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(c: usize, h: usize, w: usize) -> FloatImage<f64> {
        let n = c * h * w;
        FloatImage::new(c, h, w, (0..n).map(|i| (i % 251) as f64 / 251.0).collect()).unwrap()
    }

    #[test]
    fn simulate_embed_identities() {
        let c = ramp(3, 16, 16);
        let zero = AttentionMap::filled(16, 16, 0.0).unwrap();
        let one = AttentionMap::filled(16, 16, 1.0).unwrap();
        assert_eq!(simulate_embed(&c, &zero, 0.5, 3).unwrap(), c);
        assert_eq!(simulate_embed(&c, &one, 0.0, 3).unwrap(), c);
        let a = simulate_embed(&c, &one, 0.1, 9).unwrap();
        assert_eq!(a, simulate_embed(&c, &one, 0.1, 9).unwrap());
        assert_ne!(a, simulate_embed(&c, &one, 0.1, 10).unwrap());
        let bad = AttentionMap::filled(8, 16, 1.0).unwrap();
        assert!(simulate_embed(&c, &bad, 0.1, 9).is_err());
    }

    #[test]
    fn graph_embed_matches_direct_version() {
        let c = ramp(3, 8, 8);
        let a = AttentionMap::new(8, 8, (0..64).map(|i| i as f64 / 63.0).collect()).unwrap();
        let direct = simulate_embed(&c, &a, 0.2, 4).unwrap();
        let mut g = Graph::new();
        let cv = g.constant(c.to_tensor());
        let av = g.constant(a.to_tensor());
        let u = g.constant(embed_noise(3, 8, 8, 0.2, 4));
        let s = simulate_embed_node(&mut g, cv, av, u);
        assert_eq!(g.value(s).data(), direct.data());
    }

    #[test]
    fn loss_terms_on_simple_inputs() {
        let c = ramp(3, 8, 8);
        let a = AttentionMap::filled(8, 8, 0.3).unwrap();
        let f = Tensor::full(&[1, 4, 2, 2], 0.7);
        let l = mfd_loss(&c, &c, &a, &a, &f, &f).unwrap();
        assert_eq!((l.fmrl, l.cerl, l.atrl), (0.0, 0.0, 0.0));
        assert!((l.total - crate::penalty::mfd_area_penalty(0.3)).abs() < 1e-12);
        let shifted = f.map(|v| v + 0.1);
        let l = mfd_loss(&c, &c, &a, &a, &f, &shifted).unwrap();
        assert!((l.fmrl - 0.01).abs() < 1e-12);
        assert!(mfd_loss(&c, &c, &a, &a, &f, &Tensor::full(&[1, 4, 2, 1], 0.0)).is_err());
    }

    #[test]
    fn decoder_reset_requires_phase1_and_keeps_encoder() {
        let spec = UNetSpec {
            in_channels: 3,
            base_channels: 4,
            depth: 4,
        };
        let mut net = MfdNetwork::<f32>::new(spec, 1);
        assert!(net.reset_decoder_for_attention(2).is_err());
        net.state = MfdState::Phase1Trained;
        let enc = net.encoder.clone();
        let img: FloatImage<f32> = FloatImage::filled(3, 32, 32, 0.4);
        assert!(net.forward(&img).is_err());
        assert_eq!(net.reconstruct(&img).unwrap().channels(), 3);
        net.reset_decoder_for_attention(2).unwrap();
        assert_eq!(net.encoder, enc);
        assert_eq!(net.state, MfdState::Phase2Init);
        let a = net.forward(&img).unwrap();
        assert_eq!((a.height(), a.width()), (32, 32));
    }

    #[test]
    fn phase_configs_validate() {
        assert!(MfdTrainConfig::phase1().validate().is_ok());
        let mut c = MfdTrainConfig::phase2();
        c.noise_amplitude = 1.5;
        assert!(c.validate().is_err());
    }
}
