use std::fmt;

use serde::{Deserialize, Serialize};

use super::config::{DataSplits, RunConfig};
use super::sgd::Sgd;
use crate::datasets::{batch_iter, Dataset, Split};
use crate::diagnostics::{DiagnosticsRecord, RmsAccumulator};
use crate::error::{Error, Result};
use crate::heads::{encode_batch, head_delta_counted, predict};
use crate::layers::{Mode, Network};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "lowercase")]
pub enum TrialStatus {
    Completed,
    /// Mean absolute output delta exceeded the ceiling (or became non-finite)
    /// on global step `step` during `epoch`.
    Diverged {
        epoch: usize,
        step: usize,
        mean_abs_delta: f64,
    },
}

impl TrialStatus {
    pub fn is_completed(&self) -> bool {
        matches!(self, TrialStatus::Completed)
    }
}

impl fmt::Display for TrialStatus {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TrialStatus::Completed => f.write_str("completed"),
            TrialStatus::Diverged { epoch, step, .. } => write!(f, "diverged@epoch{epoch}/step{step}"),
        }
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub net: Network,
    pub record: DiagnosticsRecord,
    pub status: TrialStatus,
}

/// Builds the configured network for `sample_shape` inputs and initializes it from `seed`.
pub fn build_network(cfg: &RunConfig, sample_shape: &[usize], num_classes: usize, seed: u64) -> Result<Network> {
    let mut net = Network::new(sample_shape, &cfg.model.layers)?;
    if net.output_shape() != [num_classes] {
        return Err(Error::Config(format!(
            "network output shape {:?} does not match {num_classes} classes",
            net.output_shape()
        )));
    }
    net.init_parameters(cfg.model.init, seed);
    Ok(net)
}

/// Misclassification rate of eval-mode predictions over the first `limit` rows.
pub fn error_rate(net: &Network, ds: &Dataset, eval_batch: usize, limit: Option<usize>) -> Result<f64> {
    let n = limit.map_or(ds.len(), |l| l.min(ds.len()));
    if n == 0 {
        return Err(Error::Domain("error rate of an empty dataset".into()));
    }
    let mut wrong = 0usize;
    let indices: Vec<usize> = (0..n).collect();
    for chunk in indices.chunks(eval_batch.max(1)) {
        let (x, labels) = ds.gather(chunk);
        let logits = net.infer(&x)?;
        wrong += predict(&logits).iter().zip(&labels).filter(|(p, l)| p != l).count();
    }
    Ok(wrong as f64 / n as f64)
}

/// One full training run. Per batch: forward, head delta, backward, SGD step.
/// Per epoch: train/test error and per-layer RMS of the gradients seen that epoch.
///
/// The head delta is per example; the network receives it divided by the
/// batch size, so SGD follows the batch-mean objective.
pub fn train_run(cfg: &RunConfig, data: &DataSplits, trial_seed: u64) -> Result<TrainOutcome> {
    cfg.validate()?;
    let classes = data.num_classes();
    let mut net = build_network(cfg, &data.sample_shape(), classes, trial_seed)?;
    let kinds: Vec<&str> = net.layers().iter().map(|l| l.kind_name()).collect();
    let mut opt = Sgd::new(cfg.optim.lr, cfg.optim.momentum);
    let mut record = DiagnosticsRecord::new();
    let diag = &cfg.diagnostics;
    let mut status = TrialStatus::Completed;
    let mut step = 0usize;

    'epochs: for epoch in 1..=cfg.optim.epochs {
        let batches = batch_iter(data.train.len(), cfg.optim.batch_size, trial_seed, epoch as u64, true)?;
        let mut rms = RmsAccumulator::new(net.layers().len());
        for (b, indices) in batches.iter().enumerate() {
            let (x, labels) = data.train.gather(indices);
            let targets = encode_batch(&labels, classes, &cfg.head)?;
            let logits = net.forward(&x, Mode::Train)?;
            let first = b == 0;
            if diag.norm_term_all_steps || (first && (epoch - 1) % diag.norm_term_every == 0) {
                record.record_norm_term(step, &logits)?;
            }
            let (delta, clamps) = head_delta_counted(&logits, &targets, &cfg.head)?;
            record.clamp_count += clamps as u64;
            if first && diag.hist_epochs.contains(&epoch) {
                record.record_delta_histogram(epoch, &delta, diag.hist_lo, diag.hist_hi, diag.hist_bins)?;
            }
            let mean_abs = delta.data().iter().map(|d| d.abs()).sum::<f64>() / delta.len() as f64;
            if !(mean_abs <= cfg.optim.divergence_ceiling) {
                status = TrialStatus::Diverged {
                    epoch,
                    step,
                    mean_abs_delta: mean_abs,
                };
                break 'epochs;
            }
            let grads = net.backward(&delta.scale(1.0 / indices.len() as f64))?;
            rms.add(&grads)?;
            opt.step(&mut net, &grads)?;
            step += 1;
        }
        net.clear_cache();
        record.record_rms_values(epoch, &kinds, &rms.finish()?)?;
        let train_err = error_rate(&net, &data.train, diag.eval_batch, diag.train_eval_limit)?;
        let test_err = error_rate(&net, &data.test, diag.eval_batch, None)?;
        record.record_epoch_error(epoch, Split::Train, train_err)?;
        record.record_epoch_error(epoch, Split::Test, test_err)?;
    }
    net.clear_cache();
    Ok(TrainOutcome { net, record, status })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::runner::config::load_data;

    fn blobs_cfg(head: &str, lr: f64, epochs: usize) -> RunConfig {
        RunConfig::from_json(&format!(
            r#"{{
            "dataset": {{"source": "blobs", "classes": 4, "dim": 6, "spread": 0.05,
                        "train_per_class": 40, "test_per_class": 20, "seed": 3}},
            "model": {{"layers": [{{"kind": "dense", "inputs": 6, "outputs": 4}}], "init": {{"scheme": "xavier"}}}},
            "head": {{"kind": "{head}"}},
            "optim": {{"lr": {lr}, "batch_size": 10, "epochs": {epochs}}},
            "run": {{"seed": 5, "trials": 1}}
        }}"#
        ))
        .unwrap()
    }

    #[test]
    fn records_every_epoch_and_is_deterministic() {
        let cfg = blobs_cfg("softmax_ce", 0.5, 3);
        let data = load_data(&cfg.dataset).unwrap();
        let a = train_run(&cfg, &data, 9).unwrap();
        let b = train_run(&cfg, &data, 9).unwrap();
        assert_eq!(a.record, b.record);
        assert_eq!(a.record.error_curve(Split::Test).len(), 3);
        assert_eq!(a.record.rms.len(), 3);
        assert_eq!(a.record.norm_terms.len(), 3);
        assert_eq!(a.record.histograms.len(), 1);
        assert!(a.status.is_completed());
    }

    #[test]
    fn divergence_is_recorded() {
        let mut cfg = blobs_cfg("exp_gb", 50.0, 3);
        cfg.optim.divergence_ceiling = 20.0;
        let data = load_data(&cfg.dataset).unwrap();
        let out = train_run(&cfg, &data, 1).unwrap();
        assert!(matches!(out.status, TrialStatus::Diverged { .. }), "{:?}", out.status);
    }

    #[test]
    fn mismatched_output_width_is_a_config_error() {
        let mut cfg = blobs_cfg("linear_mse", 0.1, 1);
        cfg.model.layers = vec![crate::layers::LayerSpec::dense(6, 3)];
        let data = load_data(&cfg.dataset).unwrap();
        assert!(matches!(train_run(&cfg, &data, 0), Err(Error::Config(_))));
    }
}
