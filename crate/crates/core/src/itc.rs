//! Image texture complexity attention model.
//!
//! The network predicts where an image tolerates modification without
//! visible change. It is trained to minimise the local texture of the blend
//! `A * C_theta + (1 - A) * C`, where `C_theta` is the median-smoothed cover,
//! against a soft penalty on the attention area.

use rand::SeedableRng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{invalid, BasnError, Result};
use crate::image::{AttentionMap, FloatImage, TextureFreeImage};
use crate::models::{Decoder, DecoderHead, Encoder, UNetSpec};
use crate::nn::{Binding, OptimizerConfig};
use crate::penalty::PenaltyKind;
use crate::rng::StageRng;
use crate::scalar::Scalar;
use crate::texture::{check_kernel, median_smooth, texture_loss_node, DEFAULT_KERNEL};
use crate::training::{diverged, epoch_batches, sequential_batches, stack_images, Dataset, MetricLog};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ItcTrainConfig {
    /// Weight of the texture term; the area penalty gets `1 - lambda`.
    pub lambda: f64,
    /// Target area fraction. Recorded for reference; the soft penalty
    /// replaces the hard bound during training.
    pub theta: f64,
    pub kernel: usize,
    pub optimizer: OptimizerConfig,
    pub batch_size: usize,
    pub epochs: usize,
}

impl Default for ItcTrainConfig {
    fn default() -> Self {
        Self {
            lambda: 0.5,
            theta: 0.2,
            kernel: DEFAULT_KERNEL,
            optimizer: OptimizerConfig::Adam {
                learning_rate: 0.01,
            },
            batch_size: 32,
            epochs: 20,
        }
    }
}

impl ItcTrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(invalid(format!("lambda {} outside [0, 1]", self.lambda)));
        }
        if !(self.theta > 0.0 && self.theta < 1.0) {
            return Err(invalid(format!("theta {} outside (0, 1)", self.theta)));
        }
        if self.kernel.is_multiple_of(2) {
            return Err(invalid(format!("kernel {} must be odd", self.kernel)));
        }
        if self.batch_size == 0 {
            return Err(invalid("batch size must be positive"));
        }
        self.optimizer.validate()
    }
}

/// Starting attention of a fresh texture model: low, since most of a
/// typical cover is smooth.
pub const ITC_ATTENTION_INIT: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ItcState {
    Untrained,
    Trained,
    Finetuned,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ItcNetwork<T> {
    pub encoder: Encoder<T>,
    pub decoder: Decoder<T>,
    pub state: ItcState,
}

pub struct ItcBinding {
    pub encoder: Binding,
    pub decoder: Binding,
}

impl<T: Scalar> ItcNetwork<T> {
    pub fn new(spec: UNetSpec, seed: u64) -> Self {
        let mut rng = StageRng::seed_from_u64(seed);
        Self {
            encoder: Encoder::new(spec, &mut rng),
            decoder: {
                let mut d = Decoder::new(spec, DecoderHead::Attention, &mut rng);
                d.set_initial_attention(ITC_ATTENTION_INIT);
                d
            },
            state: ItcState::Untrained,
        }
    }

    pub fn spec(&self) -> UNetSpec {
        self.encoder.spec()
    }

    pub fn bind(&self, g: &mut Graph<T>, trainable: bool) -> ItcBinding {
        ItcBinding {
            encoder: self.encoder.store.bind(g, trainable),
            decoder: self.decoder.store.bind(g, trainable),
        }
    }

    /// `[N, C, H, W]` -> `[N, 1, H, W]` attention node.
    pub fn forward_node(&self, g: &mut Graph<T>, bind: &ItcBinding, x: Var) -> Var {
        let feats = self.encoder.forward(g, &bind.encoder, x);
        self.decoder.forward(g, &bind.decoder, &feats)
    }

    /// Inference-mode attention for one image.
    pub fn forward(&self, img: &FloatImage<T>) -> Result<AttentionMap<T>> {
        self.spec()
            .check_input(img.channels(), img.height(), img.width())?;
        let mut g = Graph::new();
        let bind = self.bind(&mut g, false);
        let x = g.constant(img.to_tensor());
        let a = self.forward_node(&mut g, &bind, x);
        AttentionMap::from_tensor(g.value(a))
    }

    pub fn is_finite(&self) -> bool {
        self.encoder.store.is_finite() && self.decoder.store.is_finite()
    }

    pub fn digest(&self) -> String {
        format!("{}{}", self.encoder.store.digest(), self.decoder.store.digest())
    }
}

pub fn area_penalty_node<T: Scalar>(g: &mut Graph<T>, attention: Var, kind: PenaltyKind) -> Var {
    let means = g.mean_per_sample(attention);
    let p = g.penalty(means, kind);
    g.mean_all(p)
}

/// Graph nodes of the texture-model loss.
#[derive(Debug, Clone, Copy)]
pub struct ItcLossNodes {
    pub total: Var,
    pub var_loss: Var,
    pub penalty: Var,
}

/// `lambda * E(VarPool(C + A (C_theta - C))) + (1 - lambda) * mean_n E(A_n)^(3 - 2 E(A_n))`.
pub fn itc_loss_node<T: Scalar>(
    g: &mut Graph<T>,
    cover: Var,
    target: Var,
    attention: Var,
    cfg: &ItcTrainConfig,
) -> ItcLossNodes {
    let channels = g.shape(cover)[1];
    let a = g.broadcast_channels(attention, channels);
    let diff = g.sub(target, cover);
    let shift = g.mul(a, diff);
    let blended = g.add(cover, shift);
    let var_loss = texture_loss_node(g, blended, cfg.kernel);
    let penalty = area_penalty_node(g, attention, PenaltyKind::Itc);
    let lambda = T::lit(cfg.lambda);
    let wv = g.scale(var_loss, lambda);
    let wp = g.scale(penalty, T::one() - lambda);
    let total = g.add(wv, wp);
    ItcLossNodes {
        total,
        var_loss,
        penalty,
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ItcLoss<T> {
    pub total: T,
    pub var_loss: T,
    pub area_penalty: T,
}

fn check_pair<T: Scalar>(cover: &FloatImage<T>, attention: &AttentionMap<T>) -> Result<()> {
    if attention.height() != cover.height() || attention.width() != cover.width() {
        return Err(BasnError::ShapeMismatch(format!(
            "attention {}x{} vs image {}x{}",
            attention.height(),
            attention.width(),
            cover.height(),
            cover.width()
        )));
    }
    Ok(())
}

/// Loss of one cover/attention pair, with `C_theta` from median smoothing.
pub fn itc_loss<T: Scalar>(
    cover: &FloatImage<T>,
    attention: &AttentionMap<T>,
    cfg: &ItcTrainConfig,
) -> Result<ItcLoss<T>> {
    Ok(itc_loss_with_grad(cover, attention, cfg)?.0)
}

/// Loss plus its gradient with respect to the attention map.
pub fn itc_loss_with_grad<T: Scalar>(
    cover: &FloatImage<T>,
    attention: &AttentionMap<T>,
    cfg: &ItcTrainConfig,
) -> Result<(ItcLoss<T>, Vec<T>)> {
    check_pair(cover, attention)?;
    check_kernel(cfg.kernel, cover.height(), cover.width())?;
    let target = median_smooth(cover, cfg.kernel)?;
    let mut g = Graph::new();
    let c = g.constant(cover.to_tensor());
    let t = g.constant(target.image().to_tensor());
    let a = g.variable(attention.to_tensor());
    let nodes = itc_loss_node(&mut g, c, t, a, cfg);
    let grads = g.backward(nodes.total);
    let grad = grads.get(a).map(|t| t.data().to_vec()).unwrap_or_default();
    Ok((
        ItcLoss {
            total: g.scalar_value(nodes.total),
            var_loss: g.scalar_value(nodes.var_loss),
            area_penalty: g.scalar_value(nodes.penalty),
        },
        grad,
    ))
}

/// Median-smoothed targets, computed once per image and never differentiated.
pub fn texture_targets<T: Scalar>(data: &Dataset<T>, kernel: usize) -> Result<Vec<FloatImage<T>>> {
    data.images()
        .iter()
        .map(|img| median_smooth(img, kernel).map(|t: TextureFreeImage<T>| t.0))
        .collect()
}

/// Whole-dataset inference statistics of the texture model.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ItcEvaluation {
    pub loss: f64,
    pub var_loss: f64,
    pub cover_var_loss: f64,
    pub area_penalty: f64,
    pub mean_attention: f64,
}

impl ItcEvaluation {
    /// `1 - VarLoss(weighted) / VarLoss(cover)`.
    pub fn texture_reduction(&self) -> f64 {
        if self.cover_var_loss > 0.0 {
            1.0 - self.var_loss / self.cover_var_loss
        } else {
            0.0
        }
    }

    pub fn to_metrics(&self) -> Vec<(&'static str, f64)> {
        vec![
            ("loss", self.loss),
            ("var_loss", self.var_loss),
            ("cover_var_loss", self.cover_var_loss),
            ("area_penalty", self.area_penalty),
            ("mean_attention", self.mean_attention),
            ("texture_reduction", self.texture_reduction()),
        ]
    }
}

pub fn evaluate_itc<T: Scalar>(
    net: &ItcNetwork<T>,
    data: &Dataset<T>,
    targets: &[FloatImage<T>],
    cfg: &ItcTrainConfig,
) -> ItcEvaluation {
    let mut acc = [0.0f64; 5];
    let n = data.len() as f64;
    for batch in sequential_batches(data.len(), cfg.batch_size) {
        let w = batch.len() as f64 / n;
        let mut g = Graph::new();
        let bind = net.bind(&mut g, false);
        let c = g.constant(data.batch(&batch));
        let t = g.constant(stack_images(batch.iter().map(|&i| &targets[i])));
        let a = net.forward_node(&mut g, &bind, c);
        let nodes = itc_loss_node(&mut g, c, t, a, cfg);
        let cover_var = texture_loss_node(&mut g, c, cfg.kernel);
        acc[0] += w * g.scalar_value(nodes.total).as_f64();
        acc[1] += w * g.scalar_value(nodes.var_loss).as_f64();
        acc[2] += w * g.scalar_value(cover_var).as_f64();
        acc[3] += w * g.scalar_value(nodes.penalty).as_f64();
        acc[4] += w * g.value(a).mean().as_f64();
    }
    ItcEvaluation {
        loss: acc[0],
        var_loss: acc[1],
        cover_var_loss: acc[2],
        area_penalty: acc[3],
        mean_attention: acc[4],
    }
}

/// Trains in place. Epoch 0 of the returned log is the pre-training state.
/// On a non-finite loss the parameters are restored to the last completed
/// epoch and a divergence error is returned.
pub fn train_itc<T: Scalar>(
    net: &mut ItcNetwork<T>,
    data: &Dataset<T>,
    cfg: &ItcTrainConfig,
    rng: &mut StageRng,
) -> Result<MetricLog> {
    cfg.validate()?;
    let (c, h, w) = data.dims();
    net.spec().check_input(c, h, w)?;
    let targets = texture_targets(data, cfg.kernel)?;
    let mut log = MetricLog::new("itc");
    log.push(0, evaluate_itc(net, data, &targets, cfg).to_metrics());
    let mut enc_opt = cfg.optimizer.build(&net.encoder.store);
    let mut dec_opt = cfg.optimizer.build(&net.decoder.store);
    for epoch in 1..=cfg.epochs {
        let snapshot = net.clone();
        for batch in epoch_batches(data.len(), cfg.batch_size, rng) {
            let mut g = Graph::new();
            let bind = net.bind(&mut g, true);
            let cv = g.constant(data.batch(&batch));
            let tv = g.constant(stack_images(batch.iter().map(|&i| &targets[i])));
            let a = net.forward_node(&mut g, &bind, cv);
            let nodes = itc_loss_node(&mut g, cv, tv, a, cfg);
            if !g.scalar_value(nodes.total).is_finite() {
                *net = snapshot;
                return Err(diverged("itc", epoch));
            }
            let grads = g.backward(nodes.total);
            let ge = net.encoder.store.collect_grads(&bind.encoder, &grads);
            let gd = net.decoder.store.collect_grads(&bind.decoder, &grads);
            enc_opt.step(&mut net.encoder.store, &ge);
            dec_opt.step(&mut net.decoder.store, &gd);
        }
        if !net.is_finite() {
            *net = snapshot;
            return Err(diverged("itc", epoch));
        }
        log.push(epoch, evaluate_itc(net, data, &targets, cfg).to_metrics());
    }
    if net.state == ItcState::Untrained {
        net.state = ItcState::Trained;
    }
    Ok(log)
}
