//! Steganalysis detectors, ROC/AUC, and task-feature distortion measures.
//!
//! The three classical LSB detectors (pairs-of-values chi-square, RS and
//! sample pairs) each map an 8-bit image to a suspicion score in `[0, 1]`;
//! their mean is the fused score.

use serde::{Deserialize, Serialize};
use statrs::distribution::{ChiSquared, ContinuousCDF};

use crate::error::{invalid, BasnError, Result};
use crate::extractor::FeatureExtractor;
use crate::image::ImageTensor;
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Detector {
    ChiSquare,
    Rs,
    SamplePairs,
    FusedMean,
}

impl Detector {
    pub const ALL: [Detector; 4] = [
        Detector::ChiSquare,
        Detector::Rs,
        Detector::SamplePairs,
        Detector::FusedMean,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Detector::ChiSquare => "chi_square",
            Detector::Rs => "rs",
            Detector::SamplePairs => "sample_pairs",
            Detector::FusedMean => "fused_mean",
        }
    }
}

/// Suspicion score; `degenerate` marks inputs the detector cannot judge
/// (score 0 by convention).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Score {
    pub value: f64,
    pub degenerate: bool,
}

impl Score {
    fn of(v: f64) -> Self {
        let value = if v.is_finite() { v.clamp(0.0, 1.0) } else { 0.0 };
        Self {
            value,
            degenerate: false,
        }
    }

    fn degenerate() -> Self {
        Self {
            value: 0.0,
            degenerate: true,
        }
    }
}

/// Pair bins with fewer expected samples than this are skipped.
const CHI_MIN_EXPECTED: f64 = 4.0;

/// Westfeld-Pfitzmann pairs-of-values attack over the pooled channel
/// histograms. The score is the chi-square upper tail probability, which is
/// near 1 when every (2k, 2k+1) pair is equalised by LSB replacement.
pub fn chi_square_attack(img: &ImageTensor) -> Score {
    if is_constant(img) {
        return Score::degenerate();
    }
    let mut stat = 0.0;
    let mut pairs = 0usize;
    for ch in 0..img.channels() {
        let mut hist = [0u64; 256];
        for p in img.bytes().iter().skip(ch).step_by(img.channels()) {
            hist[*p as usize] += 1;
        }
        for k in 0..128 {
            let expected = (hist[2 * k] + hist[2 * k + 1]) as f64 / 2.0;
            if expected >= CHI_MIN_EXPECTED {
                let d = hist[2 * k] as f64 - expected;
                stat += d * d / expected;
                pairs += 1;
            }
        }
    }
    if pairs < 2 {
        return Score::degenerate();
    }
    let dist = ChiSquared::new((pairs - 1) as f64).expect("positive degrees of freedom");
    Score::of(1.0 - dist.cdf(stat))
}

fn check_groupable(img: &ImageTensor) -> Result<()> {
    if img.width() < 4 || img.height() < 2 {
        return Err(invalid(format!(
            "{}x{} image too small for pixel groups",
            img.height(),
            img.width()
        )));
    }
    Ok(())
}

fn is_constant(img: &ImageTensor) -> bool {
    let b = img.bytes();
    b.iter().all(|&v| v == b[0])
}

fn flip_pos(x: i32) -> i32 {
    x ^ 1
}

fn flip_neg(x: i32) -> i32 {
    ((x + 1) ^ 1) - 1
}

fn smoothness(g: &[i32; 4]) -> i32 {
    (g[1] - g[0]).abs() + (g[2] - g[1]).abs() + (g[3] - g[2]).abs()
}

const RS_MASK: [bool; 4] = [false, true, true, false];

/// `(R_M, S_M, R_-M, S_-M)` as fractions of all groups.
fn rs_counts(img: &ImageTensor, invert_lsb: bool) -> [f64; 4] {
    let (h, w, c) = (img.height(), img.width(), img.channels());
    let mut counts = [0u64; 4];
    let mut groups = 0u64;
    let px = |r: usize, col: usize, ch: usize| {
        let v = img.get(r, col, ch) as i32;
        if invert_lsb {
            v ^ 1
        } else {
            v
        }
    };
    for ch in 0..c {
        for r in 0..h {
            for g0 in (0..w - 3).step_by(4) {
                let g = [px(r, g0, ch), px(r, g0 + 1, ch), px(r, g0 + 2, ch), px(r, g0 + 3, ch)];
                let f0 = smoothness(&g);
                for (k, flip) in [flip_pos as fn(i32) -> i32, flip_neg].iter().enumerate() {
                    let mut m = g;
                    for i in 0..4 {
                        if RS_MASK[i] {
                            m[i] = flip(m[i]);
                        }
                    }
                    let f1 = smoothness(&m);
                    if f1 > f0 {
                        counts[2 * k] += 1;
                    } else if f1 < f0 {
                        counts[2 * k + 1] += 1;
                    }
                }
                groups += 1;
            }
        }
    }
    counts.map(|v| v as f64 / groups as f64)
}

/// Fridrich's RS estimate of the fraction of pixels carrying message bits.
pub fn rs_analysis(img: &ImageTensor) -> Result<Score> {
    check_groupable(img)?;
    if is_constant(img) {
        return Ok(Score::degenerate());
    }
    let [rm, sm, rnm, snm] = rs_counts(img, false);
    let [rm1, sm1, rnm1, snm1] = rs_counts(img, true);
    let d0 = rm - sm;
    let d1 = rm1 - sm1;
    let dn0 = rnm - snm;
    let dn1 = rnm1 - snm1;
    let a = 2.0 * (d1 + d0);
    let b = dn0 - dn1 - d1 - 3.0 * d0;
    let c = d0 - dn0;
    let Some(x) = smaller_root(a, b, c) else {
        return Ok(Score::of(0.0));
    };
    Ok(Score::of(x / (x - 0.5)))
}

/// Root of `a x^2 + b x + c` with the smaller magnitude.
fn smaller_root(a: f64, b: f64, c: f64) -> Option<f64> {
    if a.abs() < 1e-12 {
        return if b.abs() < 1e-12 { None } else { Some(-c / b) };
    }
    let disc = b * b - 4.0 * a * c;
    if disc < 0.0 {
        return Some(-b / (2.0 * a));
    }
    let s = disc.sqrt();
    let r1 = (-b + s) / (2.0 * a);
    let r2 = (-b - s) / (2.0 * a);
    Some(if r1.abs() <= r2.abs() { r1 } else { r2 })
}

/// Dumitrescu-Wu-Wang sample pair estimate over horizontal and vertical
/// neighbour pairs.
pub fn sample_pair_analysis(img: &ImageTensor) -> Result<Score> {
    check_groupable(img)?;
    if is_constant(img) {
        return Ok(Score::degenerate());
    }
    let (h, w, c) = (img.height(), img.width(), img.channels());
    let (mut x, mut y, mut z, mut wv, mut p) = (0u64, 0u64, 0u64, 0u64, 0u64);
    let mut visit = |u: i32, v: i32| {
        p += 1;
        if (v % 2 == 0 && u < v) || (v % 2 == 1 && u > v) {
            x += 1;
        }
        if (v % 2 == 0 && u > v) || (v % 2 == 1 && u < v) {
            y += 1;
        }
        if u == v {
            z += 1;
        } else if u >> 1 == v >> 1 {
            wv += 1;
        }
    };
    for ch in 0..c {
        for r in 0..h {
            for col in 0..w {
                let u = img.get(r, col, ch) as i32;
                if col + 1 < w {
                    visit(u, img.get(r, col + 1, ch) as i32);
                }
                if r + 1 < h {
                    visit(u, img.get(r + 1, col, ch) as i32);
                }
            }
        }
    }
    let a = 0.5 * (wv + z) as f64;
    let b = 2.0 * x as f64 - p as f64;
    let cc = y as f64 - x as f64;
    if a.abs() < 1e-12 {
        return Ok(Score::of(if b.abs() < 1e-12 { 0.0 } else { -cc / b }));
    }
    // near full embedding the roots merge and noise can push the
    // discriminant below zero; the vertex is then the estimate
    let disc = (b * b - 4.0 * a * cc).max(0.0);
    let s = disc.sqrt();
    let r = ((-b + s) / (2.0 * a)).min((-b - s) / (2.0 * a));
    Ok(Score::of(r))
}

/// All four scores of one image, in [`Detector::ALL`] order.
pub fn detector_scores(img: &ImageTensor) -> Result<[Score; 4]> {
    let chi = chi_square_attack(img);
    let rs = rs_analysis(img)?;
    let spa = sample_pair_analysis(img)?;
    let fused = Score {
        value: (chi.value + rs.value + spa.value) / 3.0,
        degenerate: chi.degenerate && rs.degenerate && spa.degenerate,
    };
    Ok([chi, rs, spa, fused])
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RocPoint {
    pub threshold: f64,
    pub fpr: f64,
    pub tpr: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RocCurve {
    pub points: Vec<RocPoint>,
    pub auc: f64,
}

pub const ROC_STEPS: usize = 100;

/// Thresholds `0.00, 0.01, ..., 1.00`; an image is flagged when its score is
/// at least the threshold. The AUC integrates the swept points plus the
/// `(0, 0)` corner by the trapezoid rule.
pub fn roc_and_auc(scores: &[f64], is_stego: &[bool]) -> Result<RocCurve> {
    if scores.len() != is_stego.len() {
        return Err(BasnError::ShapeMismatch(format!(
            "{} scores for {} labels",
            scores.len(),
            is_stego.len()
        )));
    }
    let pos = is_stego.iter().filter(|&&s| s).count();
    let neg = is_stego.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(invalid("ROC needs both clean and stego samples"));
    }
    if let Some(s) = scores.iter().find(|s| !s.is_finite()) {
        return Err(invalid(format!("non-finite score {s}")));
    }
    let points: Vec<RocPoint> = (0..=ROC_STEPS)
        .map(|i| {
            let t = i as f64 / ROC_STEPS as f64;
            // guard against 0.07 * 100 style representation error
            let t_cmp = t - 1e-12;
            let (mut tp, mut fp) = (0usize, 0usize);
            for (&s, &stego) in scores.iter().zip(is_stego) {
                if s >= t_cmp {
                    if stego {
                        tp += 1;
                    } else {
                        fp += 1;
                    }
                }
            }
            RocPoint {
                threshold: t,
                fpr: fp as f64 / neg as f64,
                tpr: tp as f64 / pos as f64,
            }
        })
        .collect();
    let mut auc = 0.0;
    let mut prev = (0.0, 0.0);
    for p in points.iter().rev() {
        auc += (p.fpr - prev.0) * (p.tpr + prev.1) / 2.0;
        prev = (p.fpr, p.tpr);
    }
    // the last swept point always sits at (1, 1), since every score is >= 0
    Ok(RocCurve { points, auc })
}

/// `100 * ||f(C) - f(S)|| / ||f(C)||`, denominator always the cover.
pub fn feature_distortion_rate<T: Scalar>(cover: &ImageTensor, stego: &ImageTensor, extractor: &FeatureExtractor<T>) -> Result<f64> {
    let fc = extractor.features(&cover.to_float())?;
    let fs = extractor.features(&stego.to_float())?;
    if fc.shape() != fs.shape() {
        return Err(BasnError::ShapeMismatch("feature shapes differ".into()));
    }
    let norm_c: f64 = fc.data().iter().map(|v| v.as_f64().powi(2)).sum::<f64>().sqrt();
    if norm_c == 0.0 {
        return Err(BasnError::UndefinedRate);
    }
    let diff: f64 = fc
        .data()
        .iter()
        .zip(fs.data())
        .map(|(a, b)| (a.as_f64() - b.as_f64()).powi(2))
        .sum::<f64>()
        .sqrt();
    Ok(100.0 * diff / norm_c)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Agreement {
    pub cover_label: usize,
    pub stego_label: usize,
    pub cover_confidence: f64,
    pub stego_confidence: f64,
}

impl Agreement {
    pub fn agrees(&self) -> bool {
        self.cover_label == self.stego_label
    }
}

/// Top-1 label and confidence of the task classifier on cover and stego.
pub fn classification_agreement<T: Scalar>(cover: &ImageTensor, stego: &ImageTensor, classifier: &FeatureExtractor<T>) -> Result<Agreement> {
    let top = |img: &ImageTensor| -> Result<(usize, f64)> {
        let p = classifier.probabilities(&img.to_float())?;
        let (i, v) = p
            .iter()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |acc, (i, &v)| if v > acc.1 { (i, v) } else { acc });
        Ok((i, v))
    };
    let (cl, cc) = top(cover)?;
    let (sl, sc) = top(stego)?;
    Ok(Agreement {
        cover_label: cl,
        stego_label: sl,
        cover_confidence: cc,
        stego_confidence: sc,
    })
}

/// Replaces the LSB of a `fraction` of bytes, chosen with the given seed,
/// by uniform random bits.
pub fn lsb_replace(img: &ImageTensor, fraction: f64, seed: u64) -> ImageTensor {
    use rand::{Rng, SeedableRng};
    let mut rng = crate::rng::StageRng::seed_from_u64(seed);
    let mut out = img.clone();
    for b in out.bytes_mut() {
        if rng.gen_bool(fraction.clamp(0.0, 1.0)) {
            *b = (*b & !1) | rng.gen_range(0..=1u8);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_image_is_degenerate() {
        let img = ImageTensor::filled(16, 16, 3, 77).unwrap();
        assert!(chi_square_attack(&img).degenerate);
        assert!(rs_analysis(&img).unwrap().degenerate);
        assert!(sample_pair_analysis(&img).unwrap().degenerate);
        let tiny = ImageTensor::filled(8, 8, 1, 1).unwrap();
        assert!(rs_analysis(&tiny).is_ok());
    }

    #[test]
    fn roc_examples() {
        let labels: Vec<bool> = (0..20).map(|i| i < 10).collect();
        let flat = roc_and_auc(&[0.4; 20], &labels).unwrap();
        assert!((flat.auc - 0.5).abs() < 1e-12);
        let sep: Vec<f64> = labels.iter().map(|&s| if s { 0.9 } else { 0.1 }).collect();
        assert!((roc_and_auc(&sep, &labels).unwrap().auc - 1.0).abs() < 1e-12);
        let mut swapped = sep.clone();
        swapped.swap(0, 19);
        // nine stego/clean pairs ordered, one pair inverted: 81 + 9/2 + 9/2 of 100
        assert!((roc_and_auc(&swapped, &labels).unwrap().auc - 0.90).abs() < 1e-12);
        assert!(roc_and_auc(&[0.1, 0.2], &[true, true]).is_err());
    }

    #[test]
    fn roc_is_monotone() {
        let scores: Vec<f64> = (0..40).map(|i| ((i * 37) % 41) as f64 / 41.0).collect();
        let labels: Vec<bool> = (0..40).map(|i| i % 3 == 0).collect();
        let roc = roc_and_auc(&scores, &labels).unwrap();
        assert_eq!(roc.points.len(), 101);
        for w in roc.points.windows(2) {
            assert!(w[1].fpr <= w[0].fpr && w[1].tpr <= w[0].tpr);
        }
        assert!((0.0..=1.0).contains(&roc.auc));
    }

    #[test]
    fn smaller_root_picks_small_magnitude() {
        let r = smaller_root(1.0, -3.0, 2.0).unwrap();
        assert!((r - 1.0).abs() < 1e-12);
    }
}
