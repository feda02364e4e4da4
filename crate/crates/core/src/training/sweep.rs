//! Compression-ratio sweep: the same pretraining run repeated for each
//! ratio, with validation-loss curves per image-token count.

use std::io::Write;

use serde::{Deserialize, Serialize};

use super::{synthetic_captions, train_stage, Stage, StageData, TrainConfig};
use crate::config::{CompressionKind, CompressionStrategy, SUPPORTED_RATIOS};
use crate::error::{Error, Result};
use crate::model::Model;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepConfig {
    pub kind: CompressionKind,
    pub ratios: Vec<usize>,
    pub train: TrainConfig,
    pub n_train: usize,
    pub n_val: usize,
    pub data_seed: u64,
}

impl Default for SweepConfig {
    fn default() -> Self {
        SweepConfig {
            kind: CompressionKind::Reshape,
            ratios: SUPPORTED_RATIOS.to_vec(),
            train: TrainConfig {
                steps: 200,
                eval_every: 20,
                ..TrainConfig::default()
            },
            n_train: 64,
            n_val: 16,
            data_seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Curve {
    pub ratio: usize,
    pub image_tokens: usize,
    /// `(step, validation loss)`.
    pub points: Vec<(usize, f64)>,
    pub initial_train_loss: f64,
    pub final_train_loss: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub kind: CompressionKind,
    pub seed: u64,
    pub curves: Vec<Curve>,
}

/// Trains one projector per ratio from `base`'s vision and LM weights.
///
/// Every run shares the data, the seed and all non-projector weights; only
/// the compression ratio (and hence the projector shape) differs.
pub fn ratio_sweep(base: &Model<f32>, cfg: &SweepConfig) -> Result<SweepReport> {
    let seq = base.config.vision.seq_len();
    if cfg.ratios.is_empty() {
        return Err(Error::Config("sweep needs at least one ratio".into()));
    }
    for &r in &cfg.ratios {
        CompressionStrategy::new(cfg.kind, r).validate(seq)?;
    }
    if cfg.train.stage != Stage::Pretrain {
        return Err(Error::Config("the ratio sweep runs the pretrain stage".into()));
    }
    // The vision encoder is shared and frozen, so embeddings are computed once.
    let train = synthetic_captions(base, cfg.n_train, cfg.data_seed)?;
    let val = synthetic_captions(base, cfg.n_val, cfg.data_seed.wrapping_add(1))?;
    let (train, val) = (StageData::Caption(train), StageData::Caption(val));

    let mut curves = Vec::with_capacity(cfg.ratios.len());
    for &r in &cfg.ratios {
        let mut model = base
            .clone()
            .with_strategy(CompressionStrategy::new(cfg.kind, r), cfg.train.seed)?;
        log::info!("sweep: ratio {r} ({} image tokens)", model.image_tokens());
        let report = train_stage(&mut model, &cfg.train, &train, Some(&val))?;
        curves.push(Curve {
            ratio: r,
            image_tokens: seq / r,
            points: report
                .metrics
                .iter()
                .filter_map(|m| m.val_loss.map(|v| (m.step, v)))
                .collect(),
            initial_train_loss: report.initial_loss,
            final_train_loss: report.final_loss,
        });
    }
    Ok(SweepReport {
        kind: cfg.kind,
        seed: cfg.train.seed,
        curves,
    })
}

impl SweepReport {
    /// One row per evaluation step, one column per image-token count.
    pub fn write_csv(&self, mut out: impl Write) -> std::io::Result<()> {
        write!(out, "step")?;
        for c in &self.curves {
            write!(out, ",{}", c.image_tokens)?;
        }
        writeln!(out)?;
        let steps: Vec<usize> = self.curves.first().map(|c| c.points.iter().map(|p| p.0).collect()).unwrap_or_default();
        for (i, step) in steps.iter().enumerate() {
            write!(out, "{step}")?;
            for c in &self.curves {
                match c.points.get(i) {
                    Some(&(_, v)) => write!(out, ",{v}")?,
                    None => write!(out, ",")?,
                }
            }
            writeln!(out)?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::ModelConfig;

    #[test]
    fn bad_ratio_is_rejected_before_training() {
        let base = Model::init(ModelConfig::tiny(), 0).unwrap();
        let cfg = SweepConfig {
            ratios: vec![1, 5],
            ..Default::default()
        };
        assert!(matches!(ratio_sweep(&base, &cfg), Err(Error::Config(_))));
    }

    #[test]
    fn csv_has_token_count_columns() {
        let report = SweepReport {
            kind: CompressionKind::Reshape,
            seed: 0,
            curves: [1, 3, 9, 81]
                .iter()
                .map(|&r| Curve {
                    ratio: r,
                    image_tokens: 729 / r,
                    points: vec![(0, 5.5), (10, 4.0)],
                    initial_train_loss: 5.5,
                    final_train_loss: 4.0,
                })
                .collect(),
        };
        let mut buf = Vec::new();
        report.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().next().unwrap(), "step,729,243,81,9");
        assert_eq!(text.lines().count(), 3);
    }
}
