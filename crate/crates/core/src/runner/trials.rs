use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use super::config::{load_data, DataSplits, RunConfig};
use super::train::{train_run, TrialStatus};
use crate::datasets::Split;
use crate::diagnostics::DiagnosticsRecord;
use crate::error::{Error, Result};
use crate::heads::HeadSpec;

pub const SUMMARY_CSV: &str = "summary.csv";
pub const COMPARISON_CSV: &str = "comparison.csv";
pub const RATIOS_CSV: &str = "ratios.csv";

/// Middle value for odd counts, mean of the two middle values for even counts.
pub fn median(values: &[f64]) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::Domain("median of no values".into()));
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let m = v.len() / 2;
    Ok(if v.len() % 2 == 1 {
        v[m]
    } else {
        (v[m - 1] + v[m]) / 2.0
    })
}

/// Outcome of one trial. `min_error`, `convergence_epoch` and `final_error`
/// refer to the test split and are `None` if the trial halted before its
/// first evaluation.
#[derive(Clone, Debug)]
pub struct TrialResult {
    pub trial: usize,
    pub seed: u64,
    pub status: TrialStatus,
    pub min_error: Option<f64>,
    pub convergence_epoch: Option<usize>,
    pub final_error: Option<f64>,
    pub record: DiagnosticsRecord,
}

impl TrialResult {
    fn new(trial: usize, seed: u64, status: TrialStatus, record: DiagnosticsRecord) -> Self {
        let curve = record.error_curve(Split::Test);
        let min_error = curve.iter().map(|&(_, e)| e).min_by(f64::total_cmp);
        Self {
            trial,
            seed,
            status,
            min_error,
            convergence_epoch: record.convergence_epoch().ok(),
            final_error: curve.last().map(|&(_, e)| e),
            record,
        }
    }
}

/// Per-trial results and medians over the completed trials.
#[derive(Clone, Debug)]
pub struct TrialSummary {
    pub head: HeadSpec,
    pub lr: f64,
    pub trials: Vec<TrialResult>,
    pub median_min_error: f64,
    pub median_convergence_epoch: f64,
    pub median_final_error: f64,
    /// Median test error per epoch (index 0 is epoch 1) over completed trials.
    pub median_test_curve: Vec<f64>,
    pub warnings: Vec<String>,
}

impl TrialSummary {
    pub fn completed(&self) -> impl Iterator<Item = &TrialResult> {
        self.trials.iter().filter(|t| t.status.is_completed())
    }

    fn from_trials(cfg: &RunConfig, trials: Vec<TrialResult>) -> Result<Self> {
        let mut warnings = Vec::new();
        for t in trials.iter().filter(|t| !t.status.is_completed()) {
            warnings.push(format!("trial {} (seed {}) {}", t.trial, t.seed, t.status));
        }
        let done: Vec<&TrialResult> = trials.iter().filter(|t| t.status.is_completed()).collect();
        let med = |f: &dyn Fn(&TrialResult) -> f64| -> f64 {
            let vals: Vec<f64> = done.iter().map(|t| f(t)).collect();
            median(&vals).unwrap_or(f64::NAN)
        };
        let median_min_error = med(&|t| t.min_error.unwrap_or(f64::NAN));
        let median_convergence_epoch = med(&|t| t.convergence_epoch.map_or(f64::NAN, |e| e as f64));
        let median_final_error = med(&|t| t.final_error.unwrap_or(f64::NAN));
        let median_test_curve = (1..=cfg.optim.epochs)
            .map(|epoch| {
                let vals: Vec<f64> = done
                    .iter()
                    .filter_map(|t| {
                        t.record
                            .error_curve(Split::Test)
                            .iter()
                            .find(|p| p.0 == epoch)
                            .map(|p| p.1)
                    })
                    .collect();
                median(&vals).unwrap_or(f64::NAN)
            })
            .collect();
        if done.is_empty() {
            warnings.push("no trial completed; medians are NaN".into());
        } else if done.len() < trials.len() {
            warnings.push(format!("medians over {} of {} trials", done.len(), trials.len()));
        }
        Ok(Self {
            head: cfg.head,
            lr: cfg.optim.lr,
            trials,
            median_min_error,
            median_convergence_epoch,
            median_final_error,
            median_test_curve,
            warnings,
        })
    }

    /// `head,trial,min_error,convergence_epoch,status` rows (without header).
    fn summary_rows(&self, out: &mut String) {
        for t in &self.trials {
            let _ = writeln!(
                out,
                "{},{},{},{},{}",
                self.head.kind,
                t.trial,
                t.min_error.map_or("NaN".into(), |e| format!("{e:.16e}")),
                t.convergence_epoch.map_or("NaN".into(), |e| e.to_string()),
                t.status
            );
        }
    }

    pub fn summary_csv(&self) -> String {
        let mut out = String::from("head,trial,min_error,convergence_epoch,status\n");
        self.summary_rows(&mut out);
        out
    }
}

/// Runs `cfg.run.trials` trials with seeds `seed, seed + 1, …` on already loaded data.
pub fn run_trials_on(cfg: &RunConfig, data: &DataSplits) -> Result<TrialSummary> {
    cfg.validate()?;
    let mut trials = Vec::with_capacity(cfg.run.trials);
    for i in 0..cfg.run.trials {
        let seed = cfg.run.seed.wrapping_add(i as u64);
        let out = train_run(cfg, data, seed)?;
        trials.push(TrialResult::new(i, seed, out.status, out.record));
    }
    TrialSummary::from_trials(cfg, trials)
}

pub fn run_trials(cfg: &RunConfig) -> Result<TrialSummary> {
    run_trials_on(cfg, &load_data(&cfg.dataset)?)
}

/// Writes each trial's diagnostics into `dir/trial_<i>/` and `summary.csv` into `dir`.
pub fn write_trials(summary: &TrialSummary, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    for t in &summary.trials {
        t.record.emit_csv(dir.join(format!("trial_{}", t.trial)))?;
    }
    fs::write(dir.join(SUMMARY_CSV), summary.summary_csv())?;
    Ok(())
}

/// Per-head summaries of a paired comparison, in the order the heads were given.
#[derive(Clone, Debug)]
pub struct Comparison {
    pub rows: Vec<TrialSummary>,
}

impl Comparison {
    pub fn summary_csv(&self) -> String {
        let mut out = String::from("head,trial,min_error,convergence_epoch,status\n");
        for row in &self.rows {
            row.summary_rows(&mut out);
        }
        out
    }

    pub fn comparison_csv(&self) -> String {
        let mut out =
            String::from("head,lr,completed_trials,median_min_error,median_convergence_epoch,median_final_error\n");
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{},{:.16e},{},{:.16e},{:.16e},{:.16e}",
                r.head.kind,
                r.lr,
                r.completed().count(),
                r.median_min_error,
                r.median_convergence_epoch,
                r.median_final_error
            );
        }
        out
    }

    /// Pairwise ratios of median convergence epochs, `head_a / head_b`.
    pub fn ratios(&self) -> Vec<(usize, usize, f64)> {
        let mut out = Vec::new();
        for (a, ra) in self.rows.iter().enumerate() {
            for (b, rb) in self.rows.iter().enumerate() {
                if a != b {
                    out.push((a, b, ra.median_convergence_epoch / rb.median_convergence_epoch));
                }
            }
        }
        out
    }

    pub fn ratios_csv(&self) -> String {
        let mut out = String::from("head_a,head_b,convergence_ratio\n");
        for (a, b, r) in self.ratios() {
            let _ = writeln!(out, "{},{},{r:.16e}", self.rows[a].head.kind, self.rows[b].head.kind);
        }
        out
    }

    /// Writes `summary.csv`, `comparison.csv`, `ratios.csv` and per-trial
    /// diagnostics under `dir/<index>_<head>/trial_<i>/`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        for (i, row) in self.rows.iter().enumerate() {
            let sub = dir.join(format!("{i}_{}", row.head.kind));
            for t in &row.trials {
                t.record.emit_csv(sub.join(format!("trial_{}", t.trial)))?;
            }
        }
        fs::write(dir.join(SUMMARY_CSV), self.summary_csv())?;
        fs::write(dir.join(COMPARISON_CSV), self.comparison_csv())?;
        fs::write(dir.join(RATIOS_CSV), self.ratios_csv())?;
        Ok(())
    }
}

/// Runs the same trials (data, seeds, batch order) for every head. Each head
/// trains with its own learning rate from `optim.lr_by_head` when present.
pub fn compare_heads_on(cfg: &RunConfig, heads: &[HeadSpec], data: &DataSplits) -> Result<Comparison> {
    if heads.len() < 2 {
        return Err(Error::Config("a comparison needs at least two heads".into()));
    }
    let rows = heads
        .iter()
        .map(|&h| run_trials_on(&cfg.with_head(h), data))
        .collect::<Result<Vec<_>>>()?;
    Ok(Comparison { rows })
}

pub fn compare_heads(cfg: &RunConfig, heads: &[HeadSpec]) -> Result<Comparison> {
    compare_heads_on(cfg, heads, &load_data(&cfg.dataset)?)
}
