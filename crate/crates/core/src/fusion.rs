//! Attention fusion and the two finetune phases that make the fused
//! attention recoverable from embedded images.

use rand::SeedableRng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{invalid, BasnError, Result};
use crate::extractor::FeatureExtractor;
use crate::image::{AttentionMap, FloatImage};
use crate::itc::{itc_loss_node, texture_targets, ItcNetwork, ItcState, ItcTrainConfig};
use crate::mfd::{
    embed_noise, noise_seed, run_mfd_attention_training, simulate_embed_node, stack_maps, MfdNetwork, MfdPhase,
    MfdState, MfdTrainConfig,
};
use crate::nn::OptimizerConfig;
use crate::rng::{derive_seed, StageRng};
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::texture::texture_loss_node;
use crate::training::{diverged, epoch_batches, sequential_batches, stack_images, Dataset, MetricLog};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FusionStrategy {
    /// Elementwise minimum; favours security.
    Min,
    /// Elementwise arithmetic mean; favours payload.
    Mean,
}

impl FusionStrategy {
    pub fn name(self) -> &'static str {
        match self {
            FusionStrategy::Min => "Min",
            FusionStrategy::Mean => "Mean",
        }
    }

    pub fn apply<T: Scalar>(self, a: T, b: T) -> T {
        match self {
            FusionStrategy::Min => a.min(b),
            FusionStrategy::Mean => (a + b) * T::lit(0.5),
        }
    }
}

pub fn fuse<T: Scalar>(a_itc: &AttentionMap<T>, a_mfd: &AttentionMap<T>, strategy: FusionStrategy) -> Result<AttentionMap<T>> {
    if (a_itc.height(), a_itc.width()) != (a_mfd.height(), a_mfd.width()) {
        return Err(invalid(format!(
            "cannot fuse {}x{} with {}x{}",
            a_itc.height(),
            a_itc.width(),
            a_mfd.height(),
            a_mfd.width()
        )));
    }
    let v = a_itc
        .values()
        .iter()
        .zip(a_mfd.values())
        .map(|(&a, &b)| strategy.apply(a, b))
        .collect();
    AttentionMap::new(a_itc.height(), a_itc.width(), v)
}

/// Differentiable fusion; min is written as `(a + b - |a - b|) / 2`.
pub fn fuse_node<T: Scalar>(g: &mut Graph<T>, a: Var, b: Var, strategy: FusionStrategy) -> Var {
    let sum = g.add(a, b);
    let s = match strategy {
        FusionStrategy::Mean => sum,
        FusionStrategy::Min => {
            let d = g.sub(a, b);
            let d = g.abs(d);
            g.sub(sum, d)
        }
    };
    g.scale(s, T::lit(0.5))
}

/// Settings shared by both finetune phases. Absent optimizers fall back to
/// the model's own training settings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FinetuneConfig {
    pub strategy: FusionStrategy,
    pub phase1_epochs: usize,
    pub phase2_epochs: usize,
    /// Weight of the attention reconstruction term in phase 1.
    pub attention_weight: f64,
    pub itc_optimizer: Option<OptimizerConfig>,
    pub mfd_optimizer: Option<OptimizerConfig>,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        Self {
            strategy: FusionStrategy::Min,
            phase1_epochs: 10,
            phase2_epochs: 10,
            attention_weight: 1.0,
            itc_optimizer: None,
            mfd_optimizer: None,
        }
    }
}

impl FinetuneConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.attention_weight.is_finite() && self.attention_weight >= 0.0) {
            return Err(invalid("attention weight must be non-negative"));
        }
        for o in [self.itc_optimizer, self.mfd_optimizer].into_iter().flatten() {
            o.validate()?;
        }
        Ok(())
    }
}

fn require_itc(itc_state: ItcState, allowed: &[ItcState], what: &str) -> Result<()> {
    if !allowed.contains(&itc_state) {
        return Err(BasnError::Precondition(format!(
            "{what} needs a trained texture model, state is {itc_state:?}"
        )));
    }
    Ok(())
}

fn require_mfd(state: MfdState) -> Result<()> {
    if !matches!(state, MfdState::Phase2Trained | MfdState::Finetuned) {
        return Err(BasnError::Precondition(format!(
            "finetune needs a phase-2 trained distortion model, state is {state:?}"
        )));
    }
    Ok(())
}

/// Inference attention for every dataset image.
pub fn itc_maps<T: Scalar>(net: &ItcNetwork<T>, data: &Dataset<T>) -> Result<Vec<AttentionMap<T>>> {
    data.images().iter().map(|i| net.forward(i)).collect()
}

pub fn mfd_maps<T: Scalar>(net: &MfdNetwork<T>, data: &Dataset<T>) -> Result<Vec<AttentionMap<T>>> {
    data.images().iter().map(|i| net.forward(i)).collect()
}

/// Fused attention of one image from both networks.
pub fn fused_attention<T: Scalar>(
    itc: &ItcNetwork<T>,
    mfd: &MfdNetwork<T>,
    img: &FloatImage<T>,
    strategy: FusionStrategy,
) -> Result<AttentionMap<T>> {
    fuse(&itc.forward(img)?, &mfd.forward(img)?, strategy)
}

struct ItcFinetunePieces {
    texture: crate::itc::ItcLossNodes,
    atrl: Var,
    total: Var,
    a_c: Var,
    cover_var: Var,
}

#[allow(clippy::too_many_arguments)]
fn itc_finetune_graph<T: Scalar>(
    g: &mut Graph<T>,
    itc: &ItcNetwork<T>,
    bind: &crate::itc::ItcBinding,
    cover: Var,
    target: Var,
    partner: Var,
    noise: Var,
    itc_cfg: &ItcTrainConfig,
    ft: &FinetuneConfig,
) -> ItcFinetunePieces {
    let a_c = itc.forward_node(g, bind, cover);
    let fused = fuse_node(g, a_c, partner, ft.strategy);
    let stego = simulate_embed_node(g, cover, fused, noise);
    let a_s = itc.forward_node(g, bind, stego);
    let texture = itc_loss_node(g, cover, target, a_c, itc_cfg);
    let d = g.sub(a_c, a_s);
    let d = g.abs(d);
    let atrl = g.mean_all(d);
    let weighted = g.scale(atrl, T::lit(ft.attention_weight));
    let total = g.add(texture.total, weighted);
    let cover_var = texture_loss_node(g, cover, itc_cfg.kernel);
    ItcFinetunePieces {
        texture,
        atrl,
        total,
        a_c,
        cover_var,
    }
}

fn finetune_noise<T: Scalar>(data: &Dataset<T>, batch: &[usize], amplitude: f64, seed: u64, epoch: usize) -> Tensor<T> {
    let (c, h, w) = data.dims();
    let items: Vec<Tensor<T>> = batch
        .iter()
        .map(|&i| embed_noise(c, h, w, amplitude, noise_seed(seed, epoch, i)))
        .collect();
    Tensor::stack(&items).expect("equal noise shapes")
}

/// Phase-1 finetune statistics.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ItcFinetuneEvaluation {
    pub loss: f64,
    pub var_loss: f64,
    pub cover_var_loss: f64,
    pub area_penalty: f64,
    pub atrl: f64,
    pub mean_attention: f64,
}

impl ItcFinetuneEvaluation {
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
            ("atrl", self.atrl),
            ("mean_attention", self.mean_attention),
            ("texture_reduction", self.texture_reduction()),
        ]
    }
}

/// Evaluates the texture model inside the finetune graph; `mfd_attention`
/// holds the frozen partner map of every image.
pub fn evaluate_itc_finetune<T: Scalar>(
    itc: &ItcNetwork<T>,
    mfd_attention: &[AttentionMap<T>],
    data: &Dataset<T>,
    itc_cfg: &ItcTrainConfig,
    ft: &FinetuneConfig,
    noise_amplitude: f64,
    eval_seed: u64,
) -> Result<ItcFinetuneEvaluation> {
    if mfd_attention.len() != data.len() {
        return Err(invalid("one partner attention map per image required"));
    }
    let targets = texture_targets(data, itc_cfg.kernel)?;
    Ok(eval_itc_ft(itc, mfd_attention, data, &targets, itc_cfg, ft, noise_amplitude, eval_seed))
}

#[allow(clippy::too_many_arguments)]
fn eval_itc_ft<T: Scalar>(
    itc: &ItcNetwork<T>,
    maps: &[AttentionMap<T>],
    data: &Dataset<T>,
    targets: &[FloatImage<T>],
    itc_cfg: &ItcTrainConfig,
    ft: &FinetuneConfig,
    amplitude: f64,
    eval_seed: u64,
) -> ItcFinetuneEvaluation {
    let mut acc = [0.0f64; 6];
    let n = data.len() as f64;
    for batch in sequential_batches(data.len(), itc_cfg.batch_size) {
        let w = batch.len() as f64 / n;
        let mut g = Graph::new();
        let bind = itc.bind(&mut g, false);
        let c = g.constant(data.batch(&batch));
        let t = g.constant(stack_images(batch.iter().map(|&i| &targets[i])));
        let p = g.constant(stack_maps(maps, &batch));
        let u = g.constant(finetune_noise(data, &batch, amplitude, eval_seed, 0));
        let pc = itc_finetune_graph(&mut g, itc, &bind, c, t, p, u, itc_cfg, ft);
        let vals = [
            pc.total,
            pc.texture.var_loss,
            pc.cover_var,
            pc.texture.penalty,
            pc.atrl,
        ];
        for (k, v) in vals.iter().enumerate() {
            acc[k] += w * g.scalar_value(*v).as_f64();
        }
        acc[5] += w * g.value(pc.a_c).mean().as_f64();
    }
    ItcFinetuneEvaluation {
        loss: acc[0],
        var_loss: acc[1],
        cover_var_loss: acc[2],
        area_penalty: acc[3],
        atrl: acc[4],
        mean_attention: acc[5],
    }
}

/// Finetunes the texture model against embedding-simulated images produced
/// with the fused attention. The distortion model is only read.
#[allow(clippy::too_many_arguments)]
pub fn finetune_phase1<T: Scalar>(
    itc: &mut ItcNetwork<T>,
    mfd: &MfdNetwork<T>,
    data: &Dataset<T>,
    itc_cfg: &ItcTrainConfig,
    ft: &FinetuneConfig,
    noise_amplitude: f64,
    stage_seed: u64,
) -> Result<MetricLog> {
    itc_cfg.validate()?;
    ft.validate()?;
    require_itc(itc.state, &[ItcState::Trained, ItcState::Finetuned], "finetune phase 1")?;
    require_mfd(mfd.state)?;
    if !(0.0..=1.0).contains(&noise_amplitude) {
        return Err(invalid(format!("noise amplitude {noise_amplitude} outside [0, 1]")));
    }
    let (c, h, w) = data.dims();
    itc.spec().check_input(c, h, w)?;
    let maps = mfd_maps(mfd, data)?;
    let targets = texture_targets(data, itc_cfg.kernel)?;
    let eval_seed = derive_seed(stage_seed, "eval");
    let mut rng = StageRng::seed_from_u64(derive_seed(stage_seed, "batches"));
    let mut log = MetricLog::new("finetune-itc");
    let eval = |itc: &ItcNetwork<T>| eval_itc_ft(itc, &maps, data, &targets, itc_cfg, ft, noise_amplitude, eval_seed);
    log.push(0, eval(itc).to_metrics());
    let opt_cfg = ft.itc_optimizer.unwrap_or(itc_cfg.optimizer);
    let mut enc_opt = opt_cfg.build(&itc.encoder.store);
    let mut dec_opt = opt_cfg.build(&itc.decoder.store);
    for epoch in 1..=ft.phase1_epochs {
        let snapshot = itc.clone();
        for batch in epoch_batches(data.len(), itc_cfg.batch_size, &mut rng) {
            let mut g = Graph::new();
            let bind = itc.bind(&mut g, true);
            let cv = g.constant(data.batch(&batch));
            let tv = g.constant(stack_images(batch.iter().map(|&i| &targets[i])));
            let pv = g.constant(stack_maps(&maps, &batch));
            let uv = g.constant(finetune_noise(data, &batch, noise_amplitude, stage_seed, epoch));
            let pc = itc_finetune_graph(&mut g, itc, &bind, cv, tv, pv, uv, itc_cfg, ft);
            if !g.scalar_value(pc.total).is_finite() {
                *itc = snapshot;
                return Err(diverged("finetune-itc", epoch));
            }
            let grads = g.backward(pc.total);
            let ge = itc.encoder.store.collect_grads(&bind.encoder, &grads);
            let gd = itc.decoder.store.collect_grads(&bind.decoder, &grads);
            enc_opt.step(&mut itc.encoder.store, &ge);
            dec_opt.step(&mut itc.decoder.store, &gd);
        }
        if !itc.is_finite() {
            *itc = snapshot;
            return Err(diverged("finetune-itc", epoch));
        }
        log.push(epoch, eval(itc).to_metrics());
    }
    itc.state = ItcState::Finetuned;
    Ok(log)
}

/// Retrains the distortion model with its own loss, embedding under the
/// fused attention of the frozen, finetuned texture model.
pub fn finetune_phase2<T: Scalar>(
    itc: &ItcNetwork<T>,
    mfd: &mut MfdNetwork<T>,
    extractor: &FeatureExtractor<T>,
    data: &Dataset<T>,
    mfd_cfg: &MfdTrainConfig,
    ft: &FinetuneConfig,
    stage_seed: u64,
) -> Result<MetricLog> {
    ft.validate()?;
    require_itc(itc.state, &[ItcState::Finetuned], "finetune phase 2")?;
    require_mfd(mfd.state)?;
    let (c, h, w) = data.dims();
    itc.spec().check_input(c, h, w)?;
    let maps = itc_maps(itc, data)?;
    let cfg = MfdTrainConfig {
        phase: MfdPhase::Attention,
        optimizer: ft.mfd_optimizer.unwrap_or(mfd_cfg.optimizer),
        epochs: ft.phase2_epochs,
        ..*mfd_cfg
    };
    let log = run_mfd_attention_training("finetune-mfd", mfd, extractor, data, &cfg, stage_seed, Some((&maps, ft.strategy)))?;
    mfd.state = MfdState::Finetuned;
    Ok(log)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn map(v: &[f64]) -> AttentionMap<f64> {
        AttentionMap::new(1, v.len(), v.to_vec()).unwrap()
    }

    #[test]
    fn fuse_pointwise_examples() {
        let a = map(&[0.2, 0.9, 0.0]);
        let b = map(&[0.8, 0.1, 1.0]);
        assert_eq!(fuse(&a, &b, FusionStrategy::Min).unwrap().values(), &[0.2, 0.1, 0.0]);
        assert_eq!(fuse(&a, &b, FusionStrategy::Mean).unwrap().values(), &[0.5, 0.5, 0.5]);
        assert_eq!(fuse(&a, &a, FusionStrategy::Min).unwrap(), a);
        assert!(fuse(&a, &map(&[0.1]), FusionStrategy::Min).is_err());
    }

    #[test]
    fn graph_fusion_matches_pointwise() {
        let a = map(&[0.2, 0.9, 0.4, 0.7]);
        let b = map(&[0.8, 0.1, 0.4, 0.3]);
        for s in [FusionStrategy::Min, FusionStrategy::Mean] {
            let mut g = Graph::new();
            let av = g.constant(a.to_tensor());
            let bv = g.constant(b.to_tensor());
            let f = fuse_node(&mut g, av, bv, s);
            let direct = fuse(&a, &b, s).unwrap();
            for (x, y) in g.value(f).data().iter().zip(direct.values()) {
                assert!((x - y).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn finetune_rejects_untrained_models() {
        let spec = crate::models::UNetSpec {
            in_channels: 3,
            base_channels: 4,
            depth: 4,
        };
        let mut itc = ItcNetwork::<f32>::new(spec, 1);
        let mfd = MfdNetwork::<f32>::new(spec, 2);
        let data = Dataset::new(vec![FloatImage::filled(3, 32, 32, 0.5f32)]).unwrap();
        let r = finetune_phase1(&mut itc, &mfd, &data, &ItcTrainConfig::default(), &FinetuneConfig::default(), 0.03, 1);
        assert!(matches!(r, Err(BasnError::Precondition(_))));
        itc.state = ItcState::Trained;
        let r = finetune_phase1(&mut itc, &mfd, &data, &ItcTrainConfig::default(), &FinetuneConfig::default(), 0.03, 1);
        assert!(matches!(r, Err(BasnError::Precondition(_))));
    }
}
