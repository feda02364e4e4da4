//! Time-to-first-token and decode-speed measurement.
//!
//! A run is one call to [`Model::generate`] decoding a fixed number of
//! tokens with EOS ignored. TTFT is the time from entering `generate` to
//! the first token; decode speed is `(n − 1) / (t_n − t_1)`, so prefill is
//! excluded. Model loading and image decoding happen before the clock
//! starts.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::{CompressionKind, CompressionStrategy};
use crate::error::{Error, Result};
use crate::model::{GenerationParams, Model};
use crate::vision::synthetic::CAPTION_PROMPT;
use crate::vision::Image;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchConfig {
    /// Measured runs per configuration (at least 3).
    pub runs: usize,
    /// Discarded runs before measuring.
    pub warmup: usize,
    /// Tokens decoded per run (at least 2).
    pub decode_tokens: usize,
    pub prompt: String,
}

impl Default for BenchConfig {
    fn default() -> Self {
        BenchConfig {
            runs: 5,
            warmup: 2,
            decode_tokens: 128,
            prompt: CAPTION_PROMPT.into(),
        }
    }
}

impl BenchConfig {
    pub fn validate(&self) -> Result<()> {
        if self.runs < 3 {
            return Err(Error::Config(format!("runs must be at least 3, got {}", self.runs)));
        }
        if self.decode_tokens < 2 {
            return Err(Error::Config(format!(
                "decode_tokens must be at least 2, got {}",
                self.decode_tokens
            )));
        }
        Ok(())
    }
}

/// Median and 10th/90th percentiles (linear interpolation between order
/// statistics).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Stats {
    pub median: f64,
    pub p10: f64,
    pub p90: f64,
}

impl Stats {
    /// `None` for an empty sample.
    pub fn from_samples(samples: &[f64]) -> Option<Stats> {
        if samples.is_empty() {
            return None;
        }
        let mut s = samples.to_vec();
        s.sort_by(f64::total_cmp);
        Some(Stats {
            median: percentile(&s, 0.5),
            p10: percentile(&s, 0.1),
            p90: percentile(&s, 0.9),
        })
    }
}

fn percentile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let (lo, hi) = (pos.floor() as usize, pos.ceil() as usize);
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

/// What was measured.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConfigId {
    pub strategy: CompressionKind,
    pub ratio: usize,
    pub image_tokens: usize,
    pub d_vision: usize,
    pub d_lm: usize,
    pub n_layers: usize,
}

impl ConfigId {
    pub fn of(model: &Model<f32>) -> Self {
        let c = &model.config;
        ConfigId {
            strategy: c.strategy.kind,
            ratio: c.strategy.ratio,
            image_tokens: model.image_tokens(),
            d_vision: c.vision.d_vision,
            d_lm: c.lm.d_lm,
            n_layers: c.lm.n_layers,
        }
    }

    /// Short column label, e.g. `reshape-r9 (81 tok)`.
    pub fn label(&self) -> String {
        format!("{}-r{} ({} tok)", self.strategy, self.ratio, self.image_tokens)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkReport {
    pub config: ConfigId,
    pub runs: usize,
    pub warmup: usize,
    pub ttft_ms: Stats,
    pub decode_tps: Stats,
    pub ttft_samples_ms: Vec<f64>,
    pub decode_samples_tps: Vec<f64>,
    /// Runs that failed and were excluded.
    pub invalid_runs: usize,
    pub host: String,
}

impl BenchmarkReport {
    /// Summarizes raw samples. Identical inputs give identical reports.
    pub fn from_samples(
        config: ConfigId,
        warmup: usize,
        host: String,
        ttft_samples_ms: Vec<f64>,
        decode_samples_tps: Vec<f64>,
        invalid_runs: usize,
    ) -> Result<Self> {
        let (Some(ttft_ms), Some(decode_tps)) = (
            Stats::from_samples(&ttft_samples_ms),
            Stats::from_samples(&decode_samples_tps),
        ) else {
            return Err(Error::Contract(format!("no valid runs for {}", config.label())));
        };
        Ok(BenchmarkReport {
            config,
            runs: ttft_samples_ms.len(),
            warmup,
            ttft_ms,
            decode_tps,
            ttft_samples_ms,
            decode_samples_tps,
            invalid_runs,
            host,
        })
    }
}

/// `os/arch, N cpus`.
pub fn host_descriptor() -> String {
    let cpus = std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1);
    format!("{}/{}, {cpus} cpus", std::env::consts::OS, std::env::consts::ARCH)
}

/// One generation's TTFT (milliseconds) and decode speed (tokens/s).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RunSample {
    pub ttft_ms: f64,
    pub decode_tps: f64,
}

/// Seconds from calling `generate` to the first token.
pub fn measure_ttft(model: &Model<f32>, image: &Image, prompt: &str) -> Result<f64> {
    let params = GenerationParams {
        max_new: 1,
        ..Default::default()
    };
    Ok(model.generate(image, prompt, &params)?.ttft.as_secs_f64())
}

/// Tokens per second over `n_tokens` decoded tokens, prefill excluded.
pub fn measure_decode_speed(model: &Model<f32>, image: &Image, prompt: &str, n_tokens: usize) -> Result<f64> {
    Ok(measure_run(model, image, prompt, n_tokens)?.decode_tps)
}

/// A single fixed-length generation.
pub fn measure_run(model: &Model<f32>, image: &Image, prompt: &str, n_tokens: usize) -> Result<RunSample> {
    if n_tokens < 2 {
        return Err(Error::Contract(format!("decode speed needs at least 2 tokens, got {n_tokens}")));
    }
    let params = GenerationParams {
        max_new: n_tokens,
        stop_at_eos: false,
        ..Default::default()
    };
    let out = model.generate(image, prompt, &params)?;
    let tps = out
        .decode_tps()
        .ok_or_else(|| Error::Contract(format!("run produced {} tokens, need at least 2", out.tokens.len())))?;
    Ok(RunSample {
        ttft_ms: out.ttft.as_secs_f64() * 1e3,
        decode_tps: tps,
    })
}

/// Warmup then measured runs on one loaded model. Failed runs are counted
/// and excluded.
pub fn bench_model(model: &Model<f32>, image: &Image, cfg: &BenchConfig) -> Result<BenchmarkReport> {
    cfg.validate()?;
    for _ in 0..cfg.warmup {
        measure_run(model, image, &cfg.prompt, cfg.decode_tokens)?;
    }
    let (mut ttft, mut tps, mut invalid) = (Vec::new(), Vec::new(), 0);
    for _ in 0..cfg.runs {
        match measure_run(model, image, &cfg.prompt, cfg.decode_tokens) {
            Ok(s) => {
                ttft.push(s.ttft_ms);
                tps.push(s.decode_tps);
            }
            Err(e) => {
                log::warn!("invalid run: {e}");
                invalid += 1;
            }
        }
    }
    BenchmarkReport::from_samples(ConfigId::of(model), cfg.warmup, host_descriptor(), ttft, tps, invalid)
}

/// Result of [`run_matrix`]: reports for configurations that ran, and an
/// error message for each that did not.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MatrixReport {
    pub reports: Vec<BenchmarkReport>,
    pub failures: Vec<(String, String)>,
}

/// Benchmarks each strategy in turn. `load` builds the model and is never
/// timed; a failure in one configuration does not stop the others.
pub fn run_matrix<F>(strategies: &[CompressionStrategy], image: &Image, cfg: &BenchConfig, mut load: F) -> Result<MatrixReport>
where
    F: FnMut(CompressionStrategy) -> Result<Model<f32>>,
{
    cfg.validate()?;
    let mut out = MatrixReport::default();
    for &s in strategies {
        let label = format!("{}-r{}", s.kind, s.ratio);
        let result = load(s).and_then(|model| bench_model(&model, image, cfg));
        match result {
            Ok(r) => {
                log::info!(
                    "{}: ttft {:.2} ms, decode {:.1} tok/s",
                    r.config.label(),
                    r.ttft_ms.median,
                    r.decode_tps.median
                );
                out.reports.push(r);
            }
            Err(e) => {
                log::warn!("{label} failed: {e}");
                out.failures.push((label, e.to_string()));
            }
        }
    }
    Ok(out)
}

impl MatrixReport {
    pub fn write_json(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    /// `config,metric,median,p10,p90,runs`, two rows per configuration.
    pub fn write_csv(&self, mut out: impl Write) -> std::io::Result<()> {
        writeln!(out, "config,metric,median,p10,p90,runs")?;
        for r in &self.reports {
            let id = format!("{}-r{}", r.config.strategy, r.config.ratio);
            for (metric, s) in [("ttft_ms", r.ttft_ms), ("decode_tps", r.decode_tps)] {
                writeln!(out, "{id},{metric},{},{},{},{}", s.median, s.p10, s.p90, r.runs)?;
            }
        }
        Ok(())
    }

    /// Metric rows × configuration columns, medians with p10–p90.
    pub fn table(&self) -> String {
        let mut cols = vec!["metric".to_string()];
        cols.extend(self.reports.iter().map(|r| r.config.label()));
        let rows = [
            ("TTFT (ms)", self.reports.iter().map(|r| r.ttft_ms).collect::<Vec<_>>()),
            ("decode (tok/s)", self.reports.iter().map(|r| r.decode_tps).collect()),
        ];
        let mut lines = vec![cols];
        for (name, stats) in rows {
            let mut line = vec![name.to_string()];
            line.extend(stats.iter().map(|s| format!("{:.2} [{:.2}–{:.2}]", s.median, s.p10, s.p90)));
            lines.push(line);
        }
        let widths: Vec<usize> = (0..lines[0].len())
            .map(|c| lines.iter().map(|l| l[c].chars().count()).max().unwrap_or(0))
            .collect();
        let mut s = String::new();
        for line in &lines {
            let cells: Vec<String> = line.iter().zip(&widths).map(|(c, &w)| format!("{c:<w$}")).collect();
            s.push_str(cells.join("  ").trim_end());
            s.push('\n');
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::ModelConfig;
    use std::time::{Duration, Instant};

    fn tiny(ratio: usize) -> Model<f32> {
        let cfg = ModelConfig::tiny().with_strategy(CompressionStrategy::new(CompressionKind::Reshape, ratio));
        Model::init(cfg, 0).unwrap()
    }

    fn quick() -> BenchConfig {
        BenchConfig {
            runs: 3,
            warmup: 1,
            decode_tokens: 4,
            ..Default::default()
        }
    }

    #[test]
    fn stats_bracket_the_median() {
        let s = Stats::from_samples(&[5.0, 1.0, 3.0, 2.0, 4.0]).unwrap();
        assert_eq!(s.median, 3.0);
        assert!((s.p10 - 1.4).abs() < 1e-12 && (s.p90 - 4.6).abs() < 1e-12);
        assert!(Stats::from_samples(&[]).is_none());
    }

    #[test]
    fn identical_samples_give_identical_json() {
        let id = ConfigId::of(&tiny(9));
        let mk = || {
            BenchmarkReport::from_samples(id.clone(), 2, "h".into(), vec![3.0, 1.0, 2.0], vec![10.0, 12.0, 11.0], 0)
                .unwrap()
        };
        assert_eq!(serde_json::to_string(&mk()).unwrap(), serde_json::to_string(&mk()).unwrap());
    }

    #[test]
    fn config_is_validated() {
        assert!(BenchConfig { runs: 2, ..quick() }.validate().is_err());
        assert!(BenchConfig { decode_tokens: 1, ..quick() }.validate().is_err());
        let m = tiny(9);
        let img = Image::filled(27, 27, [0, 0, 0]);
        assert!(measure_decode_speed(&m, &img, "p", 1).is_err());
    }

    #[test]
    fn loader_time_is_not_counted() {
        let img = Image::filled(27, 27, [200, 10, 10]);
        let delay = Duration::from_millis(400);
        let t = Instant::now();
        let report = run_matrix(&[CompressionStrategy::new(CompressionKind::Reshape, 9)], &img, &quick(), |s| {
            std::thread::sleep(delay);
            Model::init(ModelConfig::tiny().with_strategy(s), 0)
        })
        .unwrap();
        assert!(t.elapsed() >= delay);
        let r = &report.reports[0];
        assert!(r.ttft_samples_ms.iter().all(|&ms| ms < delay.as_secs_f64() * 1e3));
    }

    #[test]
    fn failing_config_is_isolated() {
        let img = Image::filled(27, 27, [0, 0, 200]);
        let strategies = [1, 9].map(|r| CompressionStrategy::new(CompressionKind::Reshape, r));
        let report = run_matrix(&strategies, &img, &quick(), |s| {
            if s.ratio == 1 {
                Err(Error::Input("no such checkpoint".into()))
            } else {
                Ok(tiny(s.ratio))
            }
        })
        .unwrap();
        assert_eq!(report.reports.len(), 1);
        assert_eq!(report.failures.len(), 1);
        assert_eq!(report.failures[0].0, "reshape-r1");
    }

    #[test]
    fn csv_and_table_layout() {
        let img = Image::filled(27, 27, [0, 200, 0]);
        let strategies = [1, 9].map(|r| CompressionStrategy::new(CompressionKind::Reshape, r));
        let report = run_matrix(&strategies, &img, &quick(), |s| Ok(tiny(s.ratio))).unwrap();
        assert_eq!(report.reports[0].host, report.reports[1].host);
        let mut buf = Vec::new();
        report.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "config,metric,median,p10,p90,runs");
        assert_eq!(lines.len(), 5);
        assert!(lines[1].starts_with("reshape-r1,ttft_ms,"));
        let table = report.table();
        assert!(table.contains("reshape-r9 (81 tok)"));
        assert_eq!(table.lines().count(), 3);
    }
}
