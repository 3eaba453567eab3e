use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

use crate::error::{invalid, BasnError, Result};
use crate::extractor::{new_classifier, train_classifier, FeatureExtractor};
use crate::fusion::{finetune_phase1, finetune_phase2};
use crate::itc::{train_itc, ItcNetwork};
use crate::mfd::{train_mfd_phase1, train_mfd_phase2, MfdNetwork};
use crate::rng::{derive_seed, stage_rng};
use crate::training::MetricLog;

use super::checkpoint::Checkpoint;
use super::config::RunConfig;
use super::data::load_corpus;
use super::P;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Stage {
    Classifier,
    Itc,
    MfdPhase1,
    MfdPhase2,
    FinetuneItc,
    FinetuneMfd,
}

impl Stage {
    pub const ALL: [Stage; 6] = [
        Stage::Classifier,
        Stage::Itc,
        Stage::MfdPhase1,
        Stage::MfdPhase2,
        Stage::FinetuneItc,
        Stage::FinetuneMfd,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Classifier => "classifier",
            Stage::Itc => "itc",
            Stage::MfdPhase1 => "mfd-phase1",
            Stage::MfdPhase2 => "mfd-phase2",
            Stage::FinetuneItc => "finetune-itc",
            Stage::FinetuneMfd => "finetune-mfd",
        }
    }

    /// Checkpoints this stage reads.
    pub fn prerequisites(self) -> &'static [Stage] {
        match self {
            Stage::Classifier | Stage::Itc | Stage::MfdPhase1 => &[],
            Stage::MfdPhase2 => &[Stage::MfdPhase1, Stage::Classifier],
            Stage::FinetuneItc => &[Stage::Itc, Stage::MfdPhase2],
            Stage::FinetuneMfd => &[Stage::FinetuneItc, Stage::MfdPhase2, Stage::Classifier],
        }
    }

    pub fn checkpoint_path(self, cfg: &RunConfig) -> PathBuf {
        cfg.checkpoint_dir().join(format!("{}.json", self.name()))
    }

    pub fn log_path(self, cfg: &RunConfig) -> PathBuf {
        cfg.log_dir().join(format!("{}.tsv", self.name()))
    }

    /// `all`, `itc-only`, or a comma-separated list of stage names.
    pub fn parse_selection(s: &str) -> Result<Vec<Stage>> {
        let mut out = match s.trim() {
            "all" => Stage::ALL.to_vec(),
            "itc-only" => vec![Stage::Itc],
            list => list
                .split(',')
                .map(|p| p.trim().parse())
                .collect::<Result<Vec<Stage>>>()?,
        };
        out.sort();
        out.dedup();
        Ok(out)
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Stage {
    type Err = BasnError;

    fn from_str(s: &str) -> Result<Self> {
        Stage::ALL
            .into_iter()
            .find(|st| st.name() == s)
            .ok_or_else(|| {
                let names: Vec<_> = Stage::ALL.iter().map(|s| s.name()).collect();
                invalid(format!("unknown stage {s:?}; expected one of {}", names.join(", ")))
            })
    }
}

/// Loads the checkpoint `needed` on behalf of `stage`.
pub fn require_checkpoint(cfg: &RunConfig, needed: Stage, stage: &str) -> Result<Checkpoint> {
    let path = needed.checkpoint_path(cfg);
    if !path.exists() {
        return Err(BasnError::Precondition(format!(
            "{stage} needs the {needed} checkpoint at {}; run the {needed} stage first",
            path.display()
        )));
    }
    Checkpoint::load(&path)
}

#[derive(Debug, Clone)]
pub struct StageOutcome {
    pub stage: Stage,
    pub checkpoint: PathBuf,
    pub digest: String,
    pub log: MetricLog,
}

#[derive(Debug, Clone, Default)]
pub struct TrainReport {
    pub outcomes: Vec<StageOutcome>,
}

impl TrainReport {
    pub fn log(&self, stage: Stage) -> Option<&MetricLog> {
        self.outcomes.iter().find(|o| o.stage == stage).map(|o| &o.log)
    }
}

/// Runs the selected stages in pipeline order, persisting each checkpoint
/// and metric log as soon as the stage finishes. Stages that need earlier
/// results read them from disk.
pub fn cmd_train(cfg: &RunConfig, stages: &[Stage]) -> Result<TrainReport> {
    cfg.validate()?;
    if stages.is_empty() {
        return Err(invalid("no stages selected"));
    }
    let mut stages = stages.to_vec();
    stages.sort();
    stages.dedup();
    for &s in &stages {
        for &p in s.prerequisites() {
            if !stages.contains(&p) && !p.checkpoint_path(cfg).exists() {
                return Err(BasnError::Precondition(format!(
                    "{s} needs the {p} checkpoint at {}; run the {p} stage first",
                    p.checkpoint_path(cfg).display()
                )));
            }
        }
    }
    std::fs::create_dir_all(cfg.checkpoint_dir())?;
    std::fs::create_dir_all(cfg.log_dir())?;
    cfg.save(&cfg.output_dir.join("config.toml"))?;
    let corpus = load_corpus(cfg)?;
    let data = corpus.train_dataset()?;
    let mut report = TrainReport::default();
    for stage in stages {
        log::info!("training stage {stage}");
        let seed = derive_seed(cfg.seed, &format!("train/{stage}"));
        let init = derive_seed(cfg.seed, &format!("init/{stage}"));
        let req = |needed: Stage| require_checkpoint(cfg, needed, stage.name());
        let ck = match stage {
            Stage::Classifier => {
                let mut c = new_classifier::<P>(cfg.network.classifier, init);
                let log = train_classifier(&mut c, &data, corpus.labels()?, &cfg.classifier, &mut stage_rng(seed, ""))?;
                Checkpoint::from_classifier(&c, stage.name(), &cfg.classifier, &log)?
            }
            Stage::Itc => {
                let mut net = ItcNetwork::<P>::new(cfg.network.unet, init);
                let log = train_itc(&mut net, &data, &cfg.itc, &mut stage_rng(seed, ""))?;
                Checkpoint::from_itc(&net, stage.name(), &cfg.itc, &log)?
            }
            Stage::MfdPhase1 => {
                let mut net = MfdNetwork::<P>::new(cfg.network.unet, init);
                let log = train_mfd_phase1(&mut net, &data, &cfg.mfd_phase1, &mut stage_rng(seed, ""))?;
                Checkpoint::from_mfd(&net, stage.name(), &cfg.mfd_phase1, &log)?
            }
            Stage::MfdPhase2 => {
                let mut net = req(Stage::MfdPhase1)?.to_mfd::<P>()?;
                let ext = FeatureExtractor::new(req(Stage::Classifier)?.to_classifier::<P>()?);
                net.reset_decoder_for_attention(init)?;
                let log = train_mfd_phase2(&mut net, &ext, &data, &cfg.mfd_phase2, seed)?;
                Checkpoint::from_mfd(&net, stage.name(), &cfg.mfd_phase2, &log)?
            }
            Stage::FinetuneItc => {
                let mut itc = req(Stage::Itc)?.to_itc::<P>()?;
                let mfd = req(Stage::MfdPhase2)?.to_mfd::<P>()?;
                let amp = cfg.mfd_phase2.noise_amplitude;
                let log = finetune_phase1(&mut itc, &mfd, &data, &cfg.itc, &cfg.finetune, amp, seed)?;
                Checkpoint::from_itc(&itc, stage.name(), &cfg.finetune, &log)?
            }
            Stage::FinetuneMfd => {
                let itc = req(Stage::FinetuneItc)?.to_itc::<P>()?;
                let mut mfd = req(Stage::MfdPhase2)?.to_mfd::<P>()?;
                let ext = FeatureExtractor::new(req(Stage::Classifier)?.to_classifier::<P>()?);
                let log = finetune_phase2(&itc, &mut mfd, &ext, &data, &cfg.mfd_phase2, &cfg.finetune, seed)?;
                Checkpoint::from_mfd(&mfd, stage.name(), &cfg.finetune, &log)?
            }
        };
        let path = stage.checkpoint_path(cfg);
        ck.save(&path)?;
        std::fs::write(stage.log_path(cfg), ck.metrics().to_tsv())?;
        report.outcomes.push(StageOutcome {
            stage,
            checkpoint: path,
            digest: ck.digest().to_string(),
            log: ck.metrics().clone(),
        });
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stage_selection_grammar() {
        assert_eq!(Stage::parse_selection("all").unwrap(), Stage::ALL.to_vec());
        assert_eq!(Stage::parse_selection("itc-only").unwrap(), vec![Stage::Itc]);
        assert_eq!(
            Stage::parse_selection("mfd-phase2, mfd-phase1,mfd-phase1").unwrap(),
            vec![Stage::MfdPhase1, Stage::MfdPhase2]
        );
        assert!(Stage::parse_selection("itc,bogus").is_err());
    }
}
