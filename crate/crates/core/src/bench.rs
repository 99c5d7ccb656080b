//! Timing harness for the reduction-operator family.
//!
//! Every operator runs on the same random tensor and is first checked against
//! the dense brute-force oracle; only operators that pass are timed. Timing
//! is sequential: `WARMUP` discarded runs, then `reps` measured runs on the
//! monotonic clock.

use std::path::Path;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ingest::random_sparse;
use crate::oracle::reduce_oracle;
use crate::reduce::{reduce, ReductionKind, ReductionTag};
use crate::voxgrid::GridGeometry;

pub const WARMUP: usize = 2;
pub const MIN_REPS: usize = 5;
/// Largest accepted deviation from the dense oracle.
pub const ORACLE_TOLERANCE: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq)]
pub struct BenchConfig {
    pub extents: [usize; 3],
    /// Fraction of active cells, in `(0, 1]`.
    pub sparsity: f64,
    pub channels: usize,
    pub reps: usize,
    pub seed: u64,
    /// Test hook: shifts this operator's output before the oracle check.
    pub fault: Option<ReductionTag>,
}

impl Default for BenchConfig {
    fn default() -> Self {
        BenchConfig {
            extents: [32, 32, 16],
            sparsity: 0.2,
            channels: 4,
            reps: MIN_REPS,
            seed: 0,
            fault: None,
        }
    }
}

impl BenchConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.sparsity > 0.0 && self.sparsity <= 1.0) {
            return Err(Error::Usage(format!("sparsity {} must be in (0, 1]", self.sparsity)));
        }
        if self.reps < MIN_REPS {
            return Err(Error::Usage(format!("reps {} must be at least {MIN_REPS}", self.reps)));
        }
        if self.channels == 0 {
            return Err(Error::Usage("channels must be positive".into()));
        }
        GridGeometry::from_extents(self.extents).map(|_| ())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub operator: String,
    pub nx: usize,
    pub ny: usize,
    pub nz: usize,
    pub active_voxels: usize,
    pub sparsity_pct: f64,
    /// Absent when the operator failed its oracle check.
    pub mean_ms: Option<f64>,
    pub std_ms: Option<f64>,
    pub oracle_max_abs_dev: f64,
}

impl BenchRow {
    pub fn oracle_ok(&self) -> bool {
        self.oracle_max_abs_dev <= ORACLE_TOLERANCE
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchReport {
    pub rows: Vec<BenchRow>,
}

impl BenchReport {
    pub fn failed_operators(&self) -> Vec<&str> {
        self.rows.iter().filter(|r| !r.oracle_ok()).map(|r| r.operator.as_str()).collect()
    }

    pub fn row(&self, tag: ReductionTag) -> Option<&BenchRow> {
        self.rows.iter().find(|r| r.operator == tag.name())
    }

    /// Mean time of `tag` divided by mean time of mean pooling.
    pub fn overhead_vs_mean_pool(&self, tag: ReductionTag) -> Option<f64> {
        let base = self.row(ReductionTag::MeanPool)?.mean_ms?;
        Some(self.row(tag)?.mean_ms? / base)
    }

    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        for r in &self.rows {
            w.serialize(r).map_err(|e| Error::Format(e.to_string()))?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Format(e.to_string()))?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut r = csv::Reader::from_reader(text.as_bytes());
        let rows = r
            .deserialize()
            .collect::<std::result::Result<Vec<BenchRow>, _>>()
            .map_err(|e| Error::Format(e.to_string()))?;
        Ok(BenchReport { rows })
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_csv()?).map_err(|e| Error::io(path, e))
    }
}

fn mean_std(samples: &[f64]) -> (f64, f64) {
    let n = samples.len() as f64;
    let mean = samples.iter().sum::<f64>() / n;
    let var = samples.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / (n - 1.0).max(1.0);
    (mean, var.sqrt())
}

pub fn run_bench(cfg: &BenchConfig) -> Result<BenchReport> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let g = GridGeometry::from_extents(cfg.extents)?;
    let t = random_sparse(g, cfg.channels, cfg.sparsity, &mut rng)?;
    let sparsity_pct = 100.0 * t.len() as f64 / g.cell_count() as f64;
    let mut rows = Vec::with_capacity(ReductionTag::ALL.len());
    for tag in ReductionTag::ALL {
        let kind = ReductionKind::init(tag, cfg.channels, cfg.extents[2], &mut rng)?;
        let mut out = reduce(&t, &kind)?.map;
        if cfg.fault == Some(tag) {
            out.values_mut().iter_mut().for_each(|v| *v += 1e-6);
        }
        let dev = out.max_abs_diff(&reduce_oracle(&t, &kind)?);
        let mut row = BenchRow {
            operator: tag.name().to_string(),
            nx: cfg.extents[0],
            ny: cfg.extents[1],
            nz: cfg.extents[2],
            active_voxels: t.len(),
            sparsity_pct,
            mean_ms: None,
            std_ms: None,
            oracle_max_abs_dev: dev,
        };
        if row.oracle_ok() {
            for _ in 0..WARMUP {
                std::hint::black_box(reduce(&t, &kind)?);
            }
            let mut samples = Vec::with_capacity(cfg.reps);
            for _ in 0..cfg.reps {
                let start = Instant::now();
                std::hint::black_box(reduce(&t, &kind)?);
                samples.push(start.elapsed().as_secs_f64() * 1e3);
            }
            let (m, s) = mean_std(&samples);
            row.mean_ms = Some(m);
            row.std_ms = Some(s);
        } else {
            log::error!("{}: oracle deviation {dev:e} exceeds {ORACLE_TOLERANCE:e}; not timed", tag.name());
        }
        rows.push(row);
    }
    Ok(BenchReport { rows })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn seven_rows_and_csv_round_trip() {
        let cfg = BenchConfig {
            extents: [8, 8, 4],
            ..Default::default()
        };
        let r = run_bench(&cfg).unwrap();
        assert_eq!(r.rows.len(), 7);
        assert!(r.failed_operators().is_empty());
        assert!(r.rows.iter().all(|row| row.mean_ms.unwrap() > 0.0));
        assert_eq!(BenchReport::from_csv(&r.to_csv().unwrap()).unwrap(), r);
    }

    #[test]
    fn fault_is_gated() {
        let cfg = BenchConfig {
            extents: [6, 6, 4],
            fault: Some(ReductionTag::SdrSigmoid),
            ..Default::default()
        };
        let r = run_bench(&cfg).unwrap();
        assert_eq!(r.failed_operators(), vec!["sdr_sigmoid"]);
        assert!(r.row(ReductionTag::SdrSigmoid).unwrap().mean_ms.is_none());
    }

    #[test]
    fn rejects_bad_config() {
        for cfg in [
            BenchConfig { sparsity: 0.0, ..Default::default() },
            BenchConfig { reps: 4, ..Default::default() },
        ] {
            assert!(matches!(run_bench(&cfg), Err(Error::Usage(_))));
        }
    }
}
