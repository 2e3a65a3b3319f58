//! Synthetic end-to-end runs: generate, train, localize, evaluate; and the
//! four-variant ablation on top of it.

use std::fmt::Write as _;

use crate::data::{synth_generate, Dataset, SynthConfig};
use crate::error::{Error, Result};
use crate::evaluator::{map_over_thresholds, EvalReport};
use crate::localizer::{localize_dataset, Detection, LocalizeConfig};
use crate::loss::LossBreakdown;
use crate::model::Network;
use crate::trainer::{dataset_objective, initialize, train, TrainConfig, TrainOutcome, Variant};

/// Localizes every video and scores the detections against the dataset's
/// own ground truth.
pub fn evaluate(ds: &Dataset, net: &Network, loc: &LocalizeConfig, grid: &[f64]) -> Result<(Vec<Detection>, EvalReport)> {
    let dets: Vec<Detection> = localize_dataset(ds, net, loc)?.into_iter().flatten().collect();
    let report = map_over_thresholds(&dets, &ds.ground_truth(), ds.num_classes, grid)?;
    Ok((dets, report))
}

/// One synthetic experiment.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub synth: SynthConfig,
    pub train: TrainConfig,
    pub localize: LocalizeConfig,
    pub grid: Vec<f64>,
    /// Videos generated beyond `synth.num_videos` and held out for
    /// evaluation; with 0 the training videos are evaluated.
    pub holdout: usize,
}

impl ExperimentConfig {
    /// The easy desk-scale benchmark: 50 videos, 5 classes, D=E=32, noise
    /// 0.1, 2k iterations of batch 8.
    pub fn desk(seed: u64) -> Self {
        let synth = SynthConfig {
            seed,
            ..SynthConfig::default()
        };
        let train = TrainConfig {
            seed,
            lr: DESK_LR,
            ..TrainConfig::default()
        };
        let localize = LocalizeConfig {
            topk_ratio: train.topk_ratio,
            ..LocalizeConfig::default()
        };
        Self {
            synth,
            train,
            localize,
            grid: (1..=9).map(|i| i as f64 / 10.0).collect(),
            holdout: 0,
        }
    }
}

/// Adam step size of the desk-scale benchmark.
pub const DESK_LR: f64 = 1e-3;

#[derive(Debug, Clone)]
pub struct ExperimentResult {
    /// Whole-dataset objective at initialisation and after training.
    pub initial_loss: LossBreakdown,
    pub final_loss: LossBreakdown,
    pub untrained: EvalReport,
    pub trained: EvalReport,
    pub outcome: TrainOutcome,
    pub detections: Vec<Detection>,
}

/// Splits a generated dataset into the training part and the evaluation
/// part described by `cfg`.
pub fn experiment_data(cfg: &ExperimentConfig) -> Result<(Dataset, Dataset)> {
    let synth = SynthConfig {
        num_videos: cfg.synth.num_videos + cfg.holdout,
        ..cfg.synth.clone()
    };
    let ds = synth_generate(&synth)?;
    if cfg.holdout == 0 {
        return Ok((ds.clone(), ds));
    }
    Ok(ds.split_at(cfg.synth.num_videos))
}

pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentResult> {
    let (train_ds, eval_ds) = experiment_data(cfg)?;
    let (net0, bank0) = initialize(train_ds.feature_dim, train_ds.num_classes, &cfg.train);
    let initial_loss = dataset_objective(&train_ds, &net0, &bank0, &cfg.train)?;
    let (_, untrained) = evaluate(&eval_ds, &net0, &cfg.localize, &cfg.grid)?;
    let outcome = train(&train_ds, &cfg.train)?;
    let final_loss = dataset_objective(&train_ds, &outcome.network, &outcome.bank, &cfg.train)?;
    let (detections, trained) = evaluate(&eval_ds, &outcome.network, &cfg.localize, &cfg.grid)?;
    Ok(ExperimentResult {
        initial_loss,
        final_loss,
        untrained,
        trained,
        outcome,
        detections,
    })
}

/// Average-mAP of every variant for every seed.
#[derive(Debug, Clone, PartialEq)]
pub struct AblationReport {
    pub seeds: Vec<u64>,
    /// `(variant, per-seed average mAP, per-seed mAP at 0.5)`.
    pub rows: Vec<(Variant, Vec<f64>, Vec<f64>)>,
}

impl AblationReport {
    pub fn mean_average_map(&self, v: Variant) -> Option<f64> {
        self.rows
            .iter()
            .find(|r| r.0 == v)
            .map(|r| r.1.iter().sum::<f64>() / r.1.len() as f64)
    }

    pub fn to_text(&self) -> String {
        let mut s = format!("{:<10}", "variant");
        for seed in &self.seeds {
            let _ = write!(s, "  {:>9}", format!("seed {seed}"));
        }
        let _ = writeln!(s, "  {:>8}  {:>8}", "avg mAP", "mAP@0.5");
        for (v, avg, at5) in &self.rows {
            let _ = write!(s, "{:<10}", v.name());
            for a in avg {
                let _ = write!(s, "  {a:>9.4}");
            }
            let m = avg.iter().sum::<f64>() / avg.len() as f64;
            let m5 = at5.iter().sum::<f64>() / at5.len() as f64;
            let _ = writeln!(s, "  {m:>8.4}  {m5:>8.4}");
        }
        s.push_str("# BEGIN ABLATION\nvariant\tseed\taverage_map\tmap_0.5\n");
        for (v, avg, at5) in &self.rows {
            for ((seed, a), b) in self.seeds.iter().zip(avg).zip(at5) {
                let _ = writeln!(s, "{}\t{seed}\t{a:.6}\t{b:.6}", v.name());
            }
        }
        s.push_str("# END ABLATION\n");
        s
    }
}

/// Trains every variant on every seed. The base configuration's `gamma`
/// is the weight the new-triplet variants use; seeds replace both the
/// dataset and the training seed.
pub fn ablate(base: &ExperimentConfig, variants: &[Variant], seeds: &[u64]) -> Result<AblationReport> {
    if seeds.is_empty() || variants.is_empty() {
        return Err(Error::invalid("ablation needs at least one seed and one variant"));
    }
    let mut rows = Vec::new();
    for &v in variants {
        let mut avg = Vec::new();
        let mut at5 = Vec::new();
        for &seed in seeds {
            let mut cfg = base.clone();
            cfg.synth.seed = seed;
            cfg.train.seed = seed;
            v.apply(&mut cfg.train, base.train.gamma);
            let (train_ds, eval_ds) = experiment_data(&cfg)?;
            let out = train(&train_ds, &cfg.train)?;
            let (_, report) = evaluate(&eval_ds, &out.network, &cfg.localize, &cfg.grid)?;
            log::info!("{} seed {seed}: average mAP {:.4}", v.name(), report.average);
            avg.push(report.average);
            at5.push(report.map_at(0.5).unwrap_or(f64::NAN));
        }
        rows.push((v, avg, at5));
    }
    Ok(AblationReport {
        seeds: seeds.to_vec(),
        rows,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(seed: u64) -> ExperimentConfig {
        let mut cfg = ExperimentConfig::desk(seed);
        cfg.synth = SynthConfig {
            num_classes: 3,
            feature_dim: 8,
            num_videos: 6,
            min_len: 16,
            max_len: 20,
            min_segment_len: 3,
            max_segment_len: 5,
            seed,
            ..SynthConfig::default()
        };
        cfg.train.embed_dim = Some(8);
        cfg.train.iterations = 3;
        cfg.train.batch_size = 2;
        cfg
    }

    #[test]
    fn experiment_runs_and_is_deterministic() {
        let a = run_experiment(&small(1)).unwrap();
        let b = run_experiment(&small(1)).unwrap();
        assert_eq!(a.trained, b.trained);
        assert_eq!(a.detections, b.detections);
        assert_eq!(a.outcome.log.to_text(), b.outcome.log.to_text());
        assert!(a.initial_loss.total.is_finite() && a.final_loss.total.is_finite());
    }

    #[test]
    fn holdout_split() {
        let mut cfg = small(2);
        cfg.holdout = 3;
        let (tr, ev) = experiment_data(&cfg).unwrap();
        assert_eq!((tr.len(), ev.len()), (6, 3));
    }

    #[test]
    fn ablation_report_lists_every_variant() {
        let r = ablate(&small(3), &Variant::ALL, &[3, 4]).unwrap();
        assert_eq!(r.rows.len(), 4);
        let text = r.to_text();
        for v in Variant::ALL {
            assert!(text.contains(v.name()));
            assert!(r.mean_average_map(v).unwrap().is_finite());
        }
        assert!(ablate(&small(3), &Variant::ALL, &[]).is_err());
    }
}
