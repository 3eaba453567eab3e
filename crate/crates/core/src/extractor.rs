//! Frozen task network whose features the distortion model must preserve.
//!
//! At this scale the task network is the small classifier from
//! [`crate::models`], pretrained on the synthetic corpus labels. Only its
//! convolutional trunk is used as the feature tap.

use rand::SeedableRng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{invalid, BasnError, Result};
use crate::image::FloatImage;
use crate::models::{Classifier, ClassifierSpec};
use crate::nn::{Binding, OptimizerConfig};
use crate::rng::StageRng;
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::training::{diverged, epoch_batches, sequential_batches, Dataset, MetricLog};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassifierTrainConfig {
    pub optimizer: OptimizerConfig,
    pub batch_size: usize,
    pub epochs: usize,
}

impl Default for ClassifierTrainConfig {
    fn default() -> Self {
        Self {
            optimizer: OptimizerConfig::Adam {
                learning_rate: 0.005,
            },
            batch_size: 16,
            epochs: 10,
        }
    }
}

impl ClassifierTrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(invalid("batch size must be positive"));
        }
        self.optimizer.validate()
    }
}

pub fn new_classifier<T: Scalar>(spec: ClassifierSpec, seed: u64) -> Classifier<T> {
    Classifier::new(spec, &mut StageRng::seed_from_u64(seed))
}

fn check_labels<T: Scalar>(c: &Classifier<T>, data: &Dataset<T>, labels: &[usize]) -> Result<()> {
    if labels.len() != data.len() {
        return Err(BasnError::ShapeMismatch(format!(
            "{} labels for {} images",
            labels.len(),
            data.len()
        )));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= c.spec().classes) {
        return Err(invalid(format!("label {bad} out of range")));
    }
    if data.dims().0 != c.spec().in_channels {
        return Err(invalid("classifier channel count does not match data"));
    }
    Ok(())
}

fn argmax<T: Scalar>(row: &[T]) -> usize {
    let mut best = 0;
    for (i, v) in row.iter().enumerate() {
        if *v > row[best] {
            best = i;
        }
    }
    best
}

/// `(mean cross-entropy, accuracy)` over the dataset.
pub fn evaluate_classifier<T: Scalar>(c: &Classifier<T>, data: &Dataset<T>, labels: &[usize], batch_size: usize) -> (f64, f64) {
    let (mut loss, mut correct) = (0.0, 0usize);
    let k = c.spec().classes;
    for batch in sequential_batches(data.len(), batch_size) {
        let mut g = Graph::new();
        let bind = c.store.bind(&mut g, false);
        let x = g.constant(data.batch(&batch));
        let trunk = c.trunk(&mut g, &bind, x);
        let logits = c.logits_from_trunk(&mut g, &bind, trunk);
        let ys: Vec<usize> = batch.iter().map(|&i| labels[i]).collect();
        let l = g.softmax_cross_entropy(logits, &ys);
        loss += g.scalar_value(l).as_f64() * batch.len() as f64;
        for (row, &y) in g.value(logits).data().chunks(k).zip(&ys) {
            correct += (argmax(row) == y) as usize;
        }
    }
    (loss / data.len() as f64, correct as f64 / data.len() as f64)
}

/// Supervised pretraining; epoch 0 of the log is the untrained state.
pub fn train_classifier<T: Scalar>(
    c: &mut Classifier<T>,
    data: &Dataset<T>,
    labels: &[usize],
    cfg: &ClassifierTrainConfig,
    rng: &mut StageRng,
) -> Result<MetricLog> {
    cfg.validate()?;
    check_labels(c, data, labels)?;
    let mut log = MetricLog::new("classifier");
    let record = |c: &Classifier<T>, log: &mut MetricLog, epoch| {
        let (l, acc) = evaluate_classifier(c, data, labels, cfg.batch_size);
        log.push(epoch, vec![("loss", l), ("accuracy", acc)]);
    };
    record(c, &mut log, 0);
    let mut opt = cfg.optimizer.build(&c.store);
    for epoch in 1..=cfg.epochs {
        let snapshot = c.clone();
        for batch in epoch_batches(data.len(), cfg.batch_size, rng) {
            let mut g = Graph::new();
            let bind = c.store.bind(&mut g, true);
            let x = g.constant(data.batch(&batch));
            let trunk = c.trunk(&mut g, &bind, x);
            let logits = c.logits_from_trunk(&mut g, &bind, trunk);
            let ys: Vec<usize> = batch.iter().map(|&i| labels[i]).collect();
            let l = g.softmax_cross_entropy(logits, &ys);
            if !g.scalar_value(l).is_finite() {
                *c = snapshot;
                return Err(diverged("classifier", epoch));
            }
            let grads = g.backward(l);
            let gs = c.store.collect_grads(&bind, &grads);
            opt.step(&mut c.store, &gs);
        }
        record(c, &mut log, epoch);
    }
    Ok(log)
}

/// Inference-only view of a classifier trunk.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureExtractor<T> {
    classifier: Classifier<T>,
}

impl<T: Scalar> FeatureExtractor<T> {
    pub fn new(classifier: Classifier<T>) -> Self {
        Self { classifier }
    }

    pub fn classifier(&self) -> &Classifier<T> {
        &self.classifier
    }

    /// Parameters always enter the graph as constants.
    pub fn bind(&self, g: &mut Graph<T>) -> Binding {
        self.classifier.store.bind(g, false)
    }

    pub fn features_node(&self, g: &mut Graph<T>, bind: &Binding, x: Var) -> Var {
        self.classifier.trunk(g, bind, x)
    }

    /// Trunk features of one image, `[1, F, H/8, W/8]`.
    pub fn features(&self, img: &FloatImage<T>) -> Result<Tensor<T>> {
        let spec = self.classifier.spec();
        if img.channels() != spec.in_channels || !img.height().is_multiple_of(8) || !img.width().is_multiple_of(8) {
            return Err(invalid(format!(
                "extractor needs {} channels and sides divisible by 8",
                spec.in_channels
            )));
        }
        let mut g = Graph::new();
        let bind = self.bind(&mut g);
        let x = g.constant(img.to_tensor());
        let f = self.features_node(&mut g, &bind, x);
        Ok(g.value(f).clone())
    }

    /// Softmax class probabilities of one image.
    pub fn probabilities(&self, img: &FloatImage<T>) -> Result<Vec<f64>> {
        let f = self.features(img)?;
        let mut g = Graph::new();
        let bind = self.bind(&mut g);
        let fv = g.constant(f);
        let logits = self.classifier.logits_from_trunk(&mut g, &bind, fv);
        let z: Vec<f64> = g.value(logits).data().iter().map(|v| v.as_f64()).collect();
        let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
        let s: f64 = e.iter().sum();
        Ok(e.into_iter().map(|v| v / s).collect())
    }

    /// Predicted class of one image.
    pub fn classify(&self, img: &FloatImage<T>) -> Result<usize> {
        Ok(argmax(&self.probabilities(img)?))
    }

    pub fn digest(&self) -> String {
        self.classifier.store.digest()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthetic::{textured_corpus, NUM_CLASSES};

    #[test]
    fn pretraining_beats_chance_and_extractor_is_deterministic() {
        let corpus = textured_corpus(32, 32, 3).unwrap();
        let labels: Vec<usize> = corpus.iter().map(|s| s.label).collect();
        let data = Dataset::new(corpus.iter().map(|s| s.image.to_float::<f32>()).collect()).unwrap();
        let spec = ClassifierSpec {
            in_channels: 3,
            base_channels: 8,
            classes: NUM_CLASSES,
        };
        let mut c = new_classifier::<f32>(spec, 5);
        let cfg = ClassifierTrainConfig {
            epochs: 25,
            batch_size: 8,
            ..Default::default()
        };
        let log = train_classifier(&mut c, &data, &labels, &cfg, &mut StageRng::seed_from_u64(2)).unwrap();
        assert!(log.last("loss").unwrap() < log.first("loss").unwrap());
        assert!(log.last("accuracy").unwrap() > 0.5, "{}", log.to_tsv());
        let ext = FeatureExtractor::new(c);
        let img = data.get(0);
        assert_eq!(ext.features(img).unwrap(), ext.features(img).unwrap());
        assert_eq!(ext.features(img).unwrap().shape(), &[1, 32, 4, 4]);
        assert!(train_classifier(&mut new_classifier::<f32>(spec, 1), &data, &labels[1..], &cfg, &mut StageRng::seed_from_u64(2)).is_err());
    }
}
