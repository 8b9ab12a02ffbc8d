//! Training instrumentation: error curves, output-delta histograms, per-layer
//! RMS gradient traces and the softmax normalization-term trace.
//!
//! Everything is written as CSV with floats printed to 17 significant digits,
//! so a record read back from disk reproduces the same bytes when re-emitted.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::datasets::Split;
use crate::error::{Error, Result};
use crate::heads::normalization_term;
use crate::layers::GradientSet;
use crate::tensor::Tensor;

pub const DEFAULT_HIST_LO: f64 = -8.0;
pub const DEFAULT_HIST_HI: f64 = 12.0;
pub const DEFAULT_HIST_BINS: usize = 100;

pub const ERRORS_CSV: &str = "errors.csv";
pub const RMS_CSV: &str = "rms.csv";
pub const HIST_CSV: &str = "hist.csv";
pub const NORMTERM_CSV: &str = "normterm.csv";

const ERRORS_HEADER: &str = "epoch,split,error_rate";
const RMS_HEADER: &str = "epoch,layer_index,layer_kind,rms_delta,rms_param_grad";
const HIST_HEADER: &str = "checkpoint,bin_lo,bin_hi,count";
const NORMTERM_HEADER: &str = "step,log_s,s,saturated";

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochError {
    pub epoch: usize,
    pub split: Split,
    pub error_rate: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RmsEntry {
    pub epoch: usize,
    pub layer_index: usize,
    pub layer_kind: String,
    /// RMS of the delta with respect to the layer's input.
    pub rms_delta: f64,
    /// RMS over all of the layer's parameter gradients; 0 for parameter-free layers.
    pub rms_param_grad: f64,
}

/// Counts over `num_bins` uniform bins on `[lo, hi]`, plus an underflow bin
/// (`< lo`) at index 0 and an overflow bin (`> hi`, or NaN) at the end.
#[derive(Clone, Debug, PartialEq)]
pub struct Histogram {
    pub checkpoint: usize,
    pub lo: f64,
    pub hi: f64,
    pub counts: Vec<u64>,
}

impl Histogram {
    pub fn new(checkpoint: usize, lo: f64, hi: f64, num_bins: usize) -> Result<Self> {
        if !(lo < hi) || !lo.is_finite() || !hi.is_finite() {
            return Err(Error::Domain(format!(
                "histogram range [{lo}, {hi}] is empty or unbounded"
            )));
        }
        if num_bins == 0 {
            return Err(Error::Domain("histogram needs at least one bin".into()));
        }
        Ok(Self {
            checkpoint,
            lo,
            hi,
            counts: vec![0; num_bins + 2],
        })
    }

    pub fn num_bins(&self) -> usize {
        self.counts.len() - 2
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn underflow(&self) -> u64 {
        self.counts[0]
    }

    pub fn overflow(&self) -> u64 {
        self.counts[self.counts.len() - 1]
    }

    /// Index into `counts` for a value; the upper edge `hi` belongs to the last regular bin.
    pub fn bin_index(&self, v: f64) -> usize {
        let n = self.num_bins();
        if v < self.lo {
            0
        } else if v <= self.hi {
            let k = ((v - self.lo) / (self.hi - self.lo) * n as f64).floor() as usize;
            1 + k.min(n - 1)
        } else {
            n + 1
        }
    }

    pub fn add(&mut self, values: &[f64]) {
        for &v in values {
            let i = self.bin_index(v);
            self.counts[i] += 1;
        }
    }

    /// `(bin_lo, bin_hi)` for every entry of `counts`.
    pub fn edges(&self) -> Vec<(f64, f64)> {
        let n = self.num_bins();
        let width = (self.hi - self.lo) / n as f64;
        let edge = |k: usize| if k == n { self.hi } else { self.lo + k as f64 * width };
        let mut out = Vec::with_capacity(n + 2);
        out.push((f64::NEG_INFINITY, self.lo));
        out.extend((0..n).map(|k| (edge(k), edge(k + 1))));
        out.push((self.hi, f64::INFINITY));
        out
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NormTermEntry {
    pub step: usize,
    /// Batch mean of `log s`.
    pub log_s: f64,
    /// Batch mean of `s`.
    pub s: f64,
    pub saturated: bool,
    /// Largest logit in the batch; kept in memory only.
    pub max_logit: Option<f64>,
}

/// All diagnostics of one training run.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct DiagnosticsRecord {
    pub errors: Vec<EpochError>,
    pub rms: Vec<RmsEntry>,
    pub histograms: Vec<Histogram>,
    pub norm_terms: Vec<NormTermEntry>,
    /// Exponential-head logits clipped before `exp`.
    pub clamp_count: u64,
}

/// Epoch of the lowest error; the earliest one on ties.
pub fn convergence_epoch(curve: &[(usize, f64)]) -> Result<usize> {
    let mut best: Option<(usize, f64)> = None;
    for &(epoch, rate) in curve {
        match best {
            Some((e, r)) if rate > r || (rate == r && epoch >= e) => {}
            _ => best = Some((epoch, rate)),
        }
    }
    best.map(|(e, _)| e)
        .ok_or_else(|| Error::Domain("convergence epoch of an empty curve".into()))
}

fn fmt_f64(v: f64) -> String {
    format!("{v:.16e}")
}

impl DiagnosticsRecord {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn record_epoch_error(&mut self, epoch: usize, split: Split, error_rate: f64) -> Result<()> {
        if !(0.0..=1.0).contains(&error_rate) {
            return Err(Error::Recording(format!("error rate {error_rate} outside [0, 1]")));
        }
        if let Some(last) = self.errors.iter().rev().find(|e| e.split == split) {
            if epoch <= last.epoch {
                return Err(Error::Recording(format!(
                    "epoch {epoch} does not follow epoch {} for the {split:?} split",
                    last.epoch
                )));
            }
        }
        self.errors.push(EpochError {
            epoch,
            split,
            error_rate,
        });
        Ok(())
    }

    /// `(epoch, error_rate)` pairs of one split, in epoch order.
    pub fn error_curve(&self, split: Split) -> Vec<(usize, f64)> {
        self.errors
            .iter()
            .filter(|e| e.split == split)
            .map(|e| (e.epoch, e.error_rate))
            .collect()
    }

    /// Convergence epoch of the test curve.
    pub fn convergence_epoch(&self) -> Result<usize> {
        convergence_epoch(&self.error_curve(Split::Test))
    }

    pub fn record_delta_histogram(
        &mut self,
        checkpoint: usize,
        deltas: &Tensor,
        range_lo: f64,
        range_hi: f64,
        num_bins: usize,
    ) -> Result<()> {
        let mut hist = Histogram::new(checkpoint, range_lo, range_hi, num_bins)?;
        hist.add(deltas.data());
        self.histograms.push(hist);
        Ok(())
    }

    /// Records one RMS pair per layer from a single gradient set.
    pub fn record_rms_gradients(&mut self, epoch: usize, layer_kinds: &[&str], grads: &GradientSet) -> Result<()> {
        let mut acc = RmsAccumulator::new(grads.input_deltas.len());
        acc.add(grads)?;
        self.record_rms_values(epoch, layer_kinds, &acc.finish()?)
    }

    /// Records precomputed `(rms_delta, rms_param_grad)` pairs, one per layer.
    pub fn record_rms_values(&mut self, epoch: usize, layer_kinds: &[&str], values: &[(f64, f64)]) -> Result<()> {
        if layer_kinds.len() != values.len() {
            return Err(Error::Recording(format!(
                "{} layer kinds for {} RMS values",
                layer_kinds.len(),
                values.len()
            )));
        }
        if let Some(first) = self.rms.first() {
            let layers = self.rms.iter().filter(|r| r.epoch == first.epoch).count();
            if layers != values.len() {
                return Err(Error::Recording(format!(
                    "layer count changed from {layers} to {}",
                    values.len()
                )));
            }
        }
        if let Some(last) = self.rms.last() {
            if epoch <= last.epoch {
                return Err(Error::Recording(format!(
                    "RMS epoch {epoch} does not follow {}",
                    last.epoch
                )));
            }
        }
        for (i, (&(rms_delta, rms_param_grad), kind)) in values.iter().zip(layer_kinds).enumerate() {
            self.rms.push(RmsEntry {
                epoch,
                layer_index: i,
                layer_kind: kind.to_string(),
                rms_delta,
                rms_param_grad,
            });
        }
        Ok(())
    }

    /// Per-epoch `rms_delta` of one layer.
    pub fn rms_trace(&self, layer_index: usize) -> Vec<(usize, f64)> {
        self.rms
            .iter()
            .filter(|r| r.layer_index == layer_index)
            .map(|r| (r.epoch, r.rms_delta))
            .collect()
    }

    /// Batch means of `s` and `log s` for a batch of logits. Overflow of `s` is
    /// flagged, never an error.
    pub fn record_norm_term(&mut self, step: usize, logits: &Tensor) -> Result<()> {
        if logits.is_empty() {
            return Err(Error::Domain("norm term of an empty batch".into()));
        }
        let width = logits.shape().last().copied().unwrap_or(1);
        let rows = logits.len() / width;
        let (mut s, mut log_s, mut saturated) = (0.0, 0.0, false);
        for row in logits.data().chunks_exact(width) {
            let term = normalization_term(row);
            s += term.s;
            log_s += term.log_s;
            saturated |= term.saturated;
        }
        let s = s / rows as f64;
        self.norm_terms.push(NormTermEntry {
            step,
            log_s: log_s / rows as f64,
            s,
            saturated: saturated || s.is_infinite(),
            max_logit: Some(logits.data().iter().copied().fold(f64::NEG_INFINITY, f64::max)),
        });
        Ok(())
    }

    pub fn errors_csv(&self) -> String {
        let mut out = format!("{ERRORS_HEADER}\n");
        let split_name = |s: Split| match s {
            Split::Train => "train",
            Split::Test => "test",
        };
        // Grouped by epoch, train before test, independent of recording order.
        let mut rows: Vec<&EpochError> = self.errors.iter().collect();
        rows.sort_by_key(|e| (e.epoch, e.split == Split::Test));
        for e in rows {
            let _ = writeln!(out, "{},{},{}", e.epoch, split_name(e.split), fmt_f64(e.error_rate));
        }
        out
    }

    pub fn rms_csv(&self) -> String {
        let mut out = format!("{RMS_HEADER}\n");
        for r in &self.rms {
            let _ = writeln!(
                out,
                "{},{},{},{},{}",
                r.epoch,
                r.layer_index,
                r.layer_kind,
                fmt_f64(r.rms_delta),
                fmt_f64(r.rms_param_grad)
            );
        }
        out
    }

    pub fn hist_csv(&self) -> String {
        let mut out = format!("{HIST_HEADER}\n");
        for h in &self.histograms {
            for ((lo, hi), count) in h.edges().into_iter().zip(&h.counts) {
                let _ = writeln!(out, "{},{},{},{}", h.checkpoint, fmt_f64(lo), fmt_f64(hi), count);
            }
        }
        out
    }

    pub fn normterm_csv(&self) -> String {
        let mut out = format!("{NORMTERM_HEADER}\n");
        for n in &self.norm_terms {
            let _ = writeln!(out, "{},{},{},{}", n.step, fmt_f64(n.log_s), fmt_f64(n.s), n.saturated);
        }
        out
    }

    /// Writes the four CSV files into `dir`, replacing existing ones.
    pub fn emit_csv(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir)?;
        fs::write(dir.join(ERRORS_CSV), self.errors_csv())?;
        fs::write(dir.join(RMS_CSV), self.rms_csv())?;
        fs::write(dir.join(HIST_CSV), self.hist_csv())?;
        fs::write(dir.join(NORMTERM_CSV), self.normterm_csv())?;
        Ok(())
    }

    /// Reads a record previously written by [`emit_csv`](Self::emit_csv).
    /// `clamp_count` and batch max logits are not part of the CSV set.
    pub fn load_csv(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let mut rec = DiagnosticsRecord::new();

        for fields in csv_rows(&dir.join(ERRORS_CSV), ERRORS_HEADER, 3)? {
            let split = match fields[1].as_str() {
                "train" => Split::Train,
                "test" => Split::Test,
                other => return Err(Error::Recording(format!("unknown split {other:?}"))),
            };
            rec.errors.push(EpochError {
                epoch: parse(&fields[0])?,
                split,
                error_rate: parse(&fields[2])?,
            });
        }

        for fields in csv_rows(&dir.join(RMS_CSV), RMS_HEADER, 5)? {
            rec.rms.push(RmsEntry {
                epoch: parse(&fields[0])?,
                layer_index: parse(&fields[1])?,
                layer_kind: fields[2].clone(),
                rms_delta: parse(&fields[3])?,
                rms_param_grad: parse(&fields[4])?,
            });
        }

        for fields in csv_rows(&dir.join(HIST_CSV), HIST_HEADER, 4)? {
            let checkpoint: usize = parse(&fields[0])?;
            let lo: f64 = parse(&fields[1])?;
            let hi: f64 = parse(&fields[2])?;
            let count: u64 = parse(&fields[3])?;
            if lo == f64::NEG_INFINITY {
                rec.histograms.push(Histogram {
                    checkpoint,
                    lo: hi,
                    hi: f64::NAN,
                    counts: vec![count],
                });
            } else {
                let h = rec
                    .histograms
                    .last_mut()
                    .ok_or_else(|| Error::Recording("histogram rows before an underflow bin".into()))?;
                if hi == f64::INFINITY {
                    h.hi = lo;
                }
                h.counts.push(count);
            }
        }

        for fields in csv_rows(&dir.join(NORMTERM_CSV), NORMTERM_HEADER, 4)? {
            rec.norm_terms.push(NormTermEntry {
                step: parse(&fields[0])?,
                log_s: parse(&fields[1])?,
                s: parse(&fields[2])?,
                saturated: parse(&fields[3])?,
                max_logit: None,
            });
        }
        Ok(rec)
    }
}

fn parse<T: std::str::FromStr>(field: &str) -> Result<T> {
    field
        .parse()
        .map_err(|_| Error::Recording(format!("cannot parse CSV field {field:?}")))
}

fn csv_rows(path: &Path, header: &str, width: usize) -> Result<Vec<Vec<String>>> {
    let text = fs::read_to_string(path)?;
    let mut lines = text.lines();
    if lines.next() != Some(header) {
        return Err(Error::Recording(format!("{} lacks header {header:?}", path.display())));
    }
    lines
        .map(|line| {
            let fields: Vec<String> = line.split(',').map(str::to_owned).collect();
            if fields.len() == width {
                Ok(fields)
            } else {
                Err(Error::Recording(format!(
                    "malformed row {line:?} in {}",
                    path.display()
                )))
            }
        })
        .collect()
}

/// Accumulates per-layer sums of squares over many gradient sets (e.g. all
/// batches of an epoch) and reports the RMS over every recorded component.
#[derive(Clone, Debug)]
pub struct RmsAccumulator {
    delta_sq: Vec<f64>,
    delta_n: Vec<usize>,
    param_sq: Vec<f64>,
    param_n: Vec<usize>,
}

impl RmsAccumulator {
    pub fn new(num_layers: usize) -> Self {
        Self {
            delta_sq: vec![0.0; num_layers],
            delta_n: vec![0; num_layers],
            param_sq: vec![0.0; num_layers],
            param_n: vec![0; num_layers],
        }
    }

    pub fn num_layers(&self) -> usize {
        self.delta_sq.len()
    }

    pub fn is_empty(&self) -> bool {
        self.delta_n.iter().all(|&n| n == 0)
    }

    pub fn add(&mut self, grads: &GradientSet) -> Result<()> {
        if grads.input_deltas.len() != self.num_layers() || grads.params.len() != self.num_layers() {
            return Err(Error::Recording(format!(
                "gradient set has {} layers, expected {}",
                grads.input_deltas.len(),
                self.num_layers()
            )));
        }
        for (i, delta) in grads.input_deltas.iter().enumerate() {
            self.delta_sq[i] += delta.data().iter().map(|v| v * v).sum::<f64>();
            self.delta_n[i] += delta.len();
            for g in &grads.params[i] {
                self.param_sq[i] += g.data().iter().map(|v| v * v).sum::<f64>();
                self.param_n[i] += g.len();
            }
        }
        Ok(())
    }

    /// `(rms_delta, rms_param_grad)` per layer.
    pub fn finish(&self) -> Result<Vec<(f64, f64)>> {
        if self.is_empty() {
            return Err(Error::Recording("no gradients accumulated".into()));
        }
        let rms = |sq: f64, n: usize| if n == 0 { 0.0 } else { (sq / n as f64).sqrt() };
        Ok((0..self.num_layers())
            .map(|i| {
                (
                    rms(self.delta_sq[i], self.delta_n[i]),
                    rms(self.param_sq[i], self.param_n[i]),
                )
            })
            .collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn convergence_epoch_examples() {
        let curve: Vec<(usize, f64)> = [5.0, 3.0, 2.0, 2.5, 2.0]
            .iter()
            .enumerate()
            .map(|(i, &v)| (i + 1, v))
            .collect();
        assert_eq!(convergence_epoch(&curve).unwrap(), 3);
        assert_eq!(convergence_epoch(&[(1, 0.5), (2, 0.4), (3, 0.3)]).unwrap(), 3);
        assert_eq!(convergence_epoch(&[(1, 0.2), (2, 0.2), (3, 0.2)]).unwrap(), 1);
        assert!(convergence_epoch(&[]).is_err());
    }

    #[test]
    fn epoch_errors_validated() {
        let mut rec = DiagnosticsRecord::new();
        rec.record_epoch_error(1, Split::Train, 0.0).unwrap();
        rec.record_epoch_error(1, Split::Test, 0.5).unwrap();
        assert!(rec.record_epoch_error(1, Split::Test, 0.4).is_err());
        assert!(rec.record_epoch_error(2, Split::Test, 1.5).is_err());
        assert!(rec.record_epoch_error(2, Split::Test, -0.1).is_err());
        rec.record_epoch_error(2, Split::Test, 0.4).unwrap();
        assert_eq!(rec.error_curve(Split::Test), vec![(1, 0.5), (2, 0.4)]);
    }

    #[test]
    fn convergence_ignores_split_recording_order() {
        let mut a = DiagnosticsRecord::new();
        let mut b = DiagnosticsRecord::new();
        for epoch in 1..=3 {
            let test = [0.3, 0.1, 0.2][epoch - 1];
            a.record_epoch_error(epoch, Split::Train, 0.05).unwrap();
            a.record_epoch_error(epoch, Split::Test, test).unwrap();
            b.record_epoch_error(epoch, Split::Test, test).unwrap();
            b.record_epoch_error(epoch, Split::Train, 0.05).unwrap();
        }
        assert_eq!(a.convergence_epoch().unwrap(), 2);
        assert_eq!(b.convergence_epoch().unwrap(), 2);
        assert_eq!(a.errors_csv(), b.errors_csv());
    }

    #[test]
    fn histogram_bins() {
        let mut rec = DiagnosticsRecord::new();
        rec.record_delta_histogram(0, &Tensor::zeros(&[3, 4]), -1.0, 1.0, 4)
            .unwrap();
        let h = &rec.histograms[0];
        assert_eq!(h.total(), 12);
        assert_eq!(h.counts, vec![0, 0, 0, 12, 0, 0]);

        let t = Tensor::vector(vec![-2.0, -1.0, 0.99, 1.0, 1.01, f64::NAN]);
        let mut h = Histogram::new(1, -1.0, 1.0, 2).unwrap();
        h.add(t.data());
        assert_eq!(h.counts, vec![1, 1, 2, 2]);
        assert!(Histogram::new(0, 1.0, 1.0, 3).is_err());
        assert!(Histogram::new(0, 0.0, 1.0, 0).is_err());
    }

    #[test]
    fn histogram_edges_tile_the_range() {
        let h = Histogram::new(0, DEFAULT_HIST_LO, DEFAULT_HIST_HI, DEFAULT_HIST_BINS).unwrap();
        let edges = h.edges();
        assert_eq!(edges.len(), 102);
        assert_eq!(edges[1].0, -8.0);
        assert_eq!(edges[100].1, 12.0);
        for w in edges.windows(2) {
            assert_eq!(w[0].1, w[1].0);
        }
    }

    #[test]
    fn norm_term_of_zero_logits() {
        let mut rec = DiagnosticsRecord::new();
        rec.record_norm_term(0, &Tensor::zeros(&[4, 10])).unwrap();
        let n = rec.norm_terms[0];
        assert!((n.s - 10.0).abs() < 1e-12);
        assert!((n.log_s - 10f64.ln()).abs() < 1e-12);
        assert!(!n.saturated);
        rec.record_norm_term(1, &Tensor::full(&[1, 3], 800.0)).unwrap();
        assert!(rec.norm_terms[1].saturated);
    }

    #[test]
    fn rms_layer_count_fixed() {
        let mut rec = DiagnosticsRecord::new();
        rec.record_rms_values(1, &["dense", "activation"], &[(1.0, 2.0), (0.5, 0.0)])
            .unwrap();
        assert!(rec.record_rms_values(2, &["dense"], &[(1.0, 2.0)]).is_err());
        assert!(rec
            .record_rms_values(1, &["dense", "activation"], &[(1.0, 2.0), (0.5, 0.0)])
            .is_err());
        rec.record_rms_values(2, &["dense", "activation"], &[(3.0, 2.0), (0.5, 0.0)])
            .unwrap();
        assert_eq!(rec.rms_trace(0), vec![(1, 1.0), (2, 3.0)]);
    }

    #[test]
    fn accumulator_pools_components() {
        let grads = |v: f64| GradientSet {
            params: vec![vec![Tensor::full(&[2], v)]],
            input_deltas: vec![Tensor::full(&[1, 2], v)],
        };
        let mut acc = RmsAccumulator::new(1);
        assert!(acc.finish().is_err());
        acc.add(&grads(1.0)).unwrap();
        acc.add(&grads(7.0)).unwrap();
        let out = acc.finish().unwrap();
        assert!((out[0].0 - 5.0).abs() < 1e-12);
        assert!((out[0].1 - 5.0).abs() < 1e-12);
    }

    #[test]
    fn empty_record_writes_headers_only() {
        let dir = tempfile::tempdir().unwrap();
        DiagnosticsRecord::new().emit_csv(dir.path()).unwrap();
        assert_eq!(
            fs::read_to_string(dir.path().join(ERRORS_CSV)).unwrap(),
            "epoch,split,error_rate\n"
        );
        assert_eq!(
            fs::read_to_string(dir.path().join(NORMTERM_CSV)).unwrap(),
            "step,log_s,s,saturated\n"
        );
    }
}
