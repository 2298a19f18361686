use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::seqdata::SequenceDataset;

use super::train::{train, BatchSpec, TrainConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub base: TrainConfig,
    pub batches: Vec<BatchSpec>,
    pub learning_rates: Vec<f64>,
    /// One run per seed; each cell reports mean and sample std over seeds.
    pub seeds: Vec<u64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    /// Sample standard deviation (`n - 1` denominator), 0 for one run.
    pub std: f64,
    pub n: usize,
}

impl MeanStd {
    pub fn of(xs: &[f64]) -> Self {
        let n = xs.len();
        if n == 0 {
            return MeanStd {
                mean: f64::NAN,
                std: f64::NAN,
                n,
            };
        }
        let mean = xs.iter().sum::<f64>() / n as f64;
        let std = if n > 1 {
            (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
        } else {
            0.0
        };
        MeanStd { mean, std, n }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridCell {
    pub batch: BatchSpec,
    pub learning_rate: f64,
    pub ndcg: MeanStd,
    pub hit: MeanStd,
    /// Final NDCG of every seed, in seed order.
    pub ndcg_runs: Vec<f64>,
    /// First failure, if any run failed; failed runs are left out of the stats.
    pub error: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridReport {
    pub cells: Vec<GridCell>,
    pub batches: Vec<BatchSpec>,
    pub learning_rates: Vec<f64>,
}

fn batch_label(b: BatchSpec) -> String {
    match b {
        BatchSpec::Size(s) => format!("B={s}"),
        BatchSpec::Rate(q) => format!("q={q}"),
    }
}

impl GridReport {
    pub fn cell(&self, bi: usize, li: usize) -> &GridCell {
        &self.cells[bi * self.learning_rates.len() + li]
    }

    /// Batch-by-learning-rate matrix of final NDCG@K, `mean ± std`.
    pub fn to_text(&self) -> String {
        let mut s = String::from("batch\\lr");
        for lr in &self.learning_rates {
            let _ = write!(s, "\t{lr}");
        }
        s.push('\n');
        for (bi, &b) in self.batches.iter().enumerate() {
            s.push_str(&batch_label(b));
            for li in 0..self.learning_rates.len() {
                let c = self.cell(bi, li);
                if c.ndcg.n == 0 {
                    s.push_str("\tfailed");
                } else {
                    let _ = write!(s, "\t{:.2} ± {:.2}", c.ndcg.mean, c.ndcg.std);
                }
            }
            s.push('\n');
        }
        s
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("batch,lr,ndcg_mean,ndcg_std,hit_mean,hit_std,runs,error\n");
        for c in &self.cells {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{},{}",
                batch_label(c.batch),
                c.learning_rate,
                c.ndcg.mean,
                c.ndcg.std,
                c.hit.mean,
                c.hit.std,
                c.ndcg.n,
                c.error.as_deref().unwrap_or("").replace(',', ";")
            );
        }
        s
    }
}

/// Trains every (batch, learning rate, seed) combination. A failing run is
/// recorded in its cell and the grid continues.
pub fn run_experiment_grid(spec: &GridSpec, dataset: &SequenceDataset) -> GridReport {
    let mut cells = Vec::new();
    for &batch in &spec.batches {
        for &lr in &spec.learning_rates {
            let (mut ndcg, mut hit) = (Vec::new(), Vec::new());
            let mut error = None;
            for &seed in &spec.seeds {
                let mut cfg = spec.base.clone();
                cfg.batch = batch;
                cfg.learning_rate = lr;
                cfg.seed = seed;
                match train(&cfg, dataset) {
                    Ok(out) => match out.report.final_metrics() {
                        Some(m) => {
                            ndcg.push(m.ndcg);
                            hit.push(m.hit);
                        }
                        None => {
                            error.get_or_insert_with(|| format!("seed {seed}: no evaluation"));
                        }
                    },
                    Err(e) => {
                        error.get_or_insert_with(|| format!("seed {seed}: {e}"));
                    }
                }
            }
            cells.push(GridCell {
                batch,
                learning_rate: lr,
                ndcg: MeanStd::of(&ndcg),
                hit: MeanStd::of(&hit),
                ndcg_runs: ndcg,
                error,
            });
        }
    }
    GridReport {
        cells,
        batches: spec.batches.clone(),
        learning_rates: spec.learning_rates.clone(),
    }
}
