//! Per-strategy BSER and capacity, detector ROC/AUC and feature distortion.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::RngCore;

use crate::analysis::{
    classification_agreement, detector_scores, feature_distortion_rate, lsb_replace, roc_and_auc, Detector, RocCurve,
};
use crate::codec::{bser, bytes_to_bits, embed, received_bits, PayloadFrame};
use crate::error::{invalid, BasnError, Result};
use crate::extractor::FeatureExtractor;
use crate::image::ImageTensor;
use crate::rng::{derive_seed, stage_rng};
use crate::synthetic::photo_like_corpus;

use super::config::RunConfig;
use super::data::load_corpus;
use super::plot::render_roc;
use super::stego::{load_attention_models, load_extractor, plan_for, resolve_codec, AttentionModels, CodecOverrides, ModelSet};
use super::train::Stage;

#[derive(Debug, Clone, Default)]
pub struct EvaluateRequest {
    /// Folder of lossless covers; the held-out split when absent.
    pub covers: Option<PathBuf>,
    /// Replaces the configured strategy list.
    pub strategies: Option<Vec<String>>,
    pub overrides: CodecOverrides,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StrategyRow {
    /// `base` (before finetuning) or `finetuned`.
    pub models: String,
    pub strategy: String,
    pub images: usize,
    /// Covers whose plan could not hold even the frame header.
    pub skipped: usize,
    pub bser_pct: f64,
    pub header_failures: usize,
    pub payload_bpp: f64,
    pub capacity_bpp: f64,
    pub feature_distortion_pct: Option<f64>,
    pub agreement_rate: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DetectorRow {
    pub scenario: String,
    pub detector: Detector,
    pub auc: f64,
    pub clean: usize,
    pub stego: usize,
    pub degenerate: usize,
}

#[derive(Debug, Clone, Default)]
pub struct EvaluateReport {
    pub strategies: Vec<StrategyRow>,
    pub detectors: Vec<DetectorRow>,
    pub curves: Vec<(String, Detector, RocCurve)>,
    pub report_dir: PathBuf,
}

impl EvaluateReport {
    pub fn strategy(&self, models: &str, strategy: &str) -> Option<&StrategyRow> {
        self.strategies
            .iter()
            .find(|r| r.models == models && r.strategy == strategy)
    }

    pub fn auc(&self, scenario: &str, detector: Detector) -> Option<f64> {
        self.detectors
            .iter()
            .find(|r| r.scenario == scenario && r.detector == detector)
            .map(|r| r.auc)
    }
}

pub const SCENARIO_LSB_FULL: &str = "lsb-full";
pub const SCENARIO_NULL: &str = "null";

fn load_covers(cfg: &RunConfig, req: &EvaluateRequest) -> Result<Vec<ImageTensor>> {
    let covers = match &req.covers {
        Some(dir) => {
            let mut files: Vec<_> = std::fs::read_dir(dir)?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|p| p.extension().is_some_and(|e| e.eq_ignore_ascii_case("png")))
                .collect();
            files.sort();
            files.iter().map(|f| ImageTensor::load(f)).collect::<Result<Vec<_>>>()?
        }
        None => load_corpus(cfg)?.holdout,
    };
    if covers.len() < 2 {
        return Err(invalid(format!(
            "evaluation needs at least two cover images, got {}",
            covers.len()
        )));
    }
    Ok(covers)
}

/// Covers with full-capacity random payloads embedded under `strategy`.
struct Embedded {
    row: StrategyRow,
    pairs: Vec<(usize, ImageTensor)>,
}

fn run_strategy(
    cfg: &RunConfig,
    covers: &[ImageTensor],
    models: &AttentionModels,
    extractor: Option<&FeatureExtractor<super::P>>,
    label: &str,
    strategy: &str,
    ov: &CodecOverrides,
) -> Result<Embedded> {
    let rc = resolve_codec(cfg, strategy, ov)?;
    let name = rc.name.to_string();
    let mut row = StrategyRow {
        models: label.to_string(),
        strategy: name.clone(),
        images: 0,
        skipped: 0,
        bser_pct: 0.0,
        header_failures: 0,
        payload_bpp: 0.0,
        capacity_bpp: 0.0,
        feature_distortion_pct: None,
        agreement_rate: None,
    };
    let (mut fdr, mut agree, mut fdr_n) = (0.0, 0usize, 0usize);
    let mut pairs = Vec::new();
    for (i, cover) in covers.iter().enumerate() {
        let (_, plan) = plan_for(cover, models, &rc.codec)?;
        let bytes = plan.payload_capacity() / 8;
        if bytes == 0 {
            row.skipped += 1;
            continue;
        }
        let mut payload = vec![0u8; bytes];
        stage_rng(cfg.seed, &format!("eval/payload/{name}/{i}")).fill_bytes(&mut payload);
        let stego = embed(cover, &plan, &PayloadFrame::from_bytes(&payload))?;
        let sent = bytes_to_bits(&payload);
        let (_, rplan) = plan_for(&stego, models, &rc.codec)?;
        let header_ok = crate::codec::extract_with_plan(&stego, &rplan).is_ok();
        row.header_failures += (!header_ok) as usize;
        row.bser_pct += bser(&sent, &received_bits(&stego, &rplan, sent.len())?)?;
        let pixels = (cover.height() * cover.width()) as f64;
        row.payload_bpp += sent.len() as f64 / pixels;
        row.capacity_bpp += plan.bpp();
        if let Some(ext) = extractor {
            match feature_distortion_rate(cover, &stego, ext) {
                Ok(r) => {
                    fdr += r;
                    fdr_n += 1;
                }
                Err(BasnError::UndefinedRate) => {}
                Err(e) => return Err(e),
            }
            agree += classification_agreement(cover, &stego, ext)?.agrees() as usize;
        }
        row.images += 1;
        pairs.push((i, stego));
    }
    if row.images > 0 {
        let n = row.images as f64;
        row.bser_pct /= n;
        row.payload_bpp /= n;
        row.capacity_bpp /= n;
        if extractor.is_some() {
            row.feature_distortion_pct = (fdr_n > 0).then(|| fdr / fdr_n as f64);
            row.agreement_rate = Some(agree as f64 / n);
        }
    }
    Ok(Embedded { row, pairs })
}

fn detector_rows(
    scenario: &str,
    clean: &[ImageTensor],
    stego: &[ImageTensor],
    report: &mut EvaluateReport,
) -> Result<()> {
    let mut scores: Vec<[crate::analysis::Score; 4]> = Vec::new();
    for img in clean.iter().chain(stego) {
        scores.push(detector_scores(img)?);
    }
    let labels: Vec<bool> = (0..scores.len()).map(|i| i >= clean.len()).collect();
    for (k, det) in Detector::ALL.into_iter().enumerate() {
        let vals: Vec<f64> = scores.iter().map(|s| s[k].value).collect();
        let curve = roc_and_auc(&vals, &labels)?;
        report.detectors.push(DetectorRow {
            scenario: scenario.to_string(),
            detector: det,
            auc: curve.auc,
            clean: clean.len(),
            stego: stego.len(),
            degenerate: scores.iter().filter(|s| s[k].degenerate).count(),
        });
        report.curves.push((scenario.to_string(), det, curve));
    }
    Ok(())
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.6}")).unwrap_or_else(|| "NA".into())
}

fn write_reports(report: &EvaluateReport, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let mut t = String::from(
        "models\tstrategy\timages\tskipped\tbser_pct\theader_failures\tpayload_bpp\tcapacity_bpp\tfeature_distortion_pct\tagreement_rate\n",
    );
    for r in &report.strategies {
        writeln!(
            t,
            "{}\t{}\t{}\t{}\t{:.6}\t{}\t{:.6}\t{:.6}\t{}\t{}",
            r.models,
            r.strategy,
            r.images,
            r.skipped,
            r.bser_pct,
            r.header_failures,
            r.payload_bpp,
            r.capacity_bpp,
            opt(r.feature_distortion_pct),
            opt(r.agreement_rate)
        )
        .unwrap();
    }
    std::fs::write(dir.join("strategies.tsv"), t)?;
    let mut d = String::from("scenario\tdetector\tauc\tclean\tstego\tdegenerate\n");
    for r in &report.detectors {
        writeln!(
            d,
            "{}\t{}\t{:.6}\t{}\t{}\t{}",
            r.scenario,
            r.detector.name(),
            r.auc,
            r.clean,
            r.stego,
            r.degenerate
        )
        .unwrap();
    }
    std::fs::write(dir.join("detectors.tsv"), d)?;
    let mut c = String::from("scenario\tdetector\tthreshold\tfpr\ttpr\n");
    for (s, det, curve) in &report.curves {
        for p in &curve.points {
            writeln!(c, "{s}\t{}\t{:.2}\t{:.6}\t{:.6}", det.name(), p.threshold, p.fpr, p.tpr).unwrap();
        }
    }
    std::fs::write(dir.join("roc.tsv"), c)?;
    let mut scenarios: Vec<&str> = Vec::new();
    for (s, _, _) in &report.curves {
        if !scenarios.contains(&s.as_str()) {
            scenarios.push(s);
        }
    }
    let panels: Vec<Vec<&RocCurve>> = scenarios
        .iter()
        .map(|s| {
            report
                .curves
                .iter()
                .filter(|(x, _, _)| x == s)
                .map(|(_, _, c)| c)
                .collect()
        })
        .collect();
    render_roc(&panels, &dir.join("roc.png"))
}

/// Writes `strategies.tsv`, `detectors.tsv`, `roc.tsv` and `roc.png` under
/// the report directory. When both base and finetuned checkpoints exist
/// every strategy is measured under each.
pub fn cmd_evaluate(cfg: &RunConfig, req: &EvaluateRequest) -> Result<EvaluateReport> {
    cfg.validate()?;
    let covers = load_covers(cfg, req)?;
    let strategies = req
        .strategies
        .clone()
        .unwrap_or_else(|| cfg.evaluate.strategies.clone());
    if strategies.is_empty() {
        return Err(invalid("no strategies to evaluate"));
    }
    for s in &strategies {
        resolve_codec(cfg, s, &req.overrides)?;
    }
    let extractor = if Stage::Classifier.checkpoint_path(cfg).exists() {
        Some(load_extractor(cfg)?)
    } else {
        None
    };
    let finetuned = Stage::FinetuneItc.checkpoint_path(cfg).exists() && Stage::FinetuneMfd.checkpoint_path(cfg).exists();
    let base = Stage::Itc.checkpoint_path(cfg).exists() && Stage::MfdPhase2.checkpoint_path(cfg).exists();
    let mut sets = Vec::new();
    if base {
        sets.push(("base", ModelSet::Base));
    }
    if finetuned {
        sets.push(("finetuned", ModelSet::Finetuned));
    }
    if sets.is_empty() {
        // surfaces the precondition error naming the missing stage
        load_attention_models(cfg, ModelSet::Auto)?;
    }
    let mut report = EvaluateReport {
        report_dir: cfg.report_dir(),
        ..Default::default()
    };
    let last = sets.len().saturating_sub(1);
    for (si, (label, set)) in sets.into_iter().enumerate() {
        let models = load_attention_models(cfg, set)?;
        for s in &strategies {
            let e = run_strategy(cfg, &covers, &models, extractor.as_ref(), label, s, &req.overrides)?;
            if si == last && !e.pairs.is_empty() {
                let clean: Vec<ImageTensor> = e.pairs.iter().map(|(i, _)| covers[*i].clone()).collect();
                let stego: Vec<ImageTensor> = e.pairs.into_iter().map(|(_, s)| s).collect();
                detector_rows(&format!("basn:{}", e.row.strategy), &clean, &stego, &mut report)?;
            }
            report.strategies.push(e.row);
        }
    }
    let size = covers[0].height();
    let photos = photo_like_corpus(cfg.evaluate.detector_images, size, derive_seed(cfg.seed, "eval/photo"))?;
    let replaced: Vec<ImageTensor> = photos
        .iter()
        .enumerate()
        .map(|(i, p)| lsb_replace(p, 1.0, derive_seed(cfg.seed, &format!("eval/lsb/{i}"))))
        .collect();
    detector_rows(SCENARIO_LSB_FULL, &photos, &replaced, &mut report)?;
    let mut null = photo_like_corpus(2 * cfg.evaluate.null_images, size, derive_seed(cfg.seed, "eval/null"))?;
    let second = null.split_off(cfg.evaluate.null_images);
    detector_rows(SCENARIO_NULL, &null, &second, &mut report)?;
    write_reports(&report, &cfg.report_dir())?;
    Ok(report)
}
