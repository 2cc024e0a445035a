//! Metric CSVs, the exploration-phase detector and plot-data export.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::trainer::MetricsRow;

pub const HASH_PREFIX: &str = "# config_hash=";
pub const EXPLORATION_WINDOW: usize = 100;

/// Half the cross-entropy of random guessing between two classes.
pub fn exploration_threshold() -> f64 {
    0.5 * std::f64::consts::LN_2
}

/// First step whose trailing 100-step mean loss is below `0.5 ln 2`.
pub fn detect_exploration_phase(losses: &[f64]) -> Option<usize> {
    detect_exploration_phase_with(losses, EXPLORATION_WINDOW, exploration_threshold())
}

/// Index of the last step of the first full `window` whose mean is below
/// `threshold`.
pub fn detect_exploration_phase_with(losses: &[f64], window: usize, threshold: f64) -> Option<usize> {
    if window == 0 || losses.len() < window {
        return None;
    }
    // Compare sums against window * threshold so scaling both is exact.
    let bound = threshold * window as f64;
    let mut sum: f64 = losses[..window].iter().sum();
    if sum < bound {
        return Some(window - 1);
    }
    for t in window..losses.len() {
        sum += losses[t] - losses[t - window];
        if sum < bound {
            return Some(t);
        }
    }
    None
}

fn create_with_hash(path: &Path, hash: &str) -> Result<BufWriter<File>> {
    let mut w = BufWriter::new(File::create(path)?);
    writeln!(w, "{HASH_PREFIX}{hash}")?;
    Ok(w)
}

/// Writes serializable rows as CSV under a `# config_hash=` line.
pub fn write_csv<T: Serialize>(path: &Path, hash: &str, rows: &[T]) -> Result<()> {
    let w = create_with_hash(path, hash)?;
    let mut csv = csv::Writer::from_writer(w);
    for r in rows {
        csv.serialize(r)?;
    }
    csv.flush()?;
    Ok(())
}

/// Reads a file written by [`write_csv`], returning its config hash.
pub fn read_csv<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<(Option<String>, Vec<T>)> {
    let mut first = String::new();
    BufReader::new(File::open(path)?).read_line(&mut first)?;
    let hash = first.trim_end().strip_prefix(HASH_PREFIX).map(str::to_string);
    let mut rd = csv::ReaderBuilder::new().comment(Some(b'#')).from_path(path)?;
    let rows = rd.deserialize().collect::<Result<Vec<T>, _>>()?;
    Ok((hash, rows))
}

pub fn write_metrics_csv(path: &Path, hash: &str, rows: &[MetricsRow]) -> Result<()> {
    write_csv(path, hash, rows)
}

pub fn read_metrics_csv(path: &Path) -> Result<(Option<String>, Vec<MetricsRow>)> {
    read_csv(path)
}

/// Wall-clock time per step; kept apart from metrics, which are
/// deterministic.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TimingRow {
    pub step: u64,
    pub elapsed_seconds: f64,
}

/// Per-bin accuracies of one repetition.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BinRow {
    pub bin_start: f64,
    pub bin_end: f64,
    pub rows: usize,
    pub context_acc: Option<f64>,
    pub context_loss: Option<f64>,
    pub baseline_acc: Option<f64>,
    pub baseline_loss: Option<f64>,
}

/// One tagged peak at one sweep point.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MemoryProbeSample {
    /// `keys`, `logits`, `retrieved` or `params`.
    pub label: String,
    pub bytes: usize,
    /// Process resident set size, when the platform reports it.
    pub rss_bytes: Option<usize>,
    pub records: usize,
    pub batch_size: usize,
    pub kappa: usize,
    pub key_dim: usize,
    pub feature_dim: usize,
    /// Value of the swept hyperparameter.
    pub value: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PlotKind {
    AccuracyVsTime,
    LossVsStep,
    EntropyVsStep,
    MemoryVsHparam,
}

impl PlotKind {
    pub const ALL: [PlotKind; 4] = [
        PlotKind::AccuracyVsTime,
        PlotKind::LossVsStep,
        PlotKind::EntropyVsStep,
        PlotKind::MemoryVsHparam,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            PlotKind::AccuracyVsTime => "accuracy_vs_time",
            PlotKind::LossVsStep => "loss_vs_step",
            PlotKind::EntropyVsStep => "entropy_vs_step",
            PlotKind::MemoryVsHparam => "memory_vs_hparam",
        }
    }

    pub fn file_name(self) -> String {
        format!("{}.csv", self.as_str())
    }
}

impl FromStr for PlotKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        PlotKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| Error::config("kind", format!("unknown plot kind `{s}`")))
    }
}

/// Repetition directories `rep0, rep1, ...` of a run, in order.
pub fn rep_dirs(run_dir: &Path) -> Result<Vec<PathBuf>> {
    let mut reps = Vec::new();
    for entry in std::fs::read_dir(run_dir)? {
        let entry = entry?;
        let name = entry.file_name();
        if let Some(n) = name.to_str().and_then(|s| s.strip_prefix("rep")).and_then(|s| s.parse::<usize>().ok()) {
            if entry.path().is_dir() {
                reps.push((n, entry.path()));
            }
        }
    }
    reps.sort();
    Ok(reps.into_iter().map(|(_, p)| p).collect())
}

fn one_hash(hashes: impl IntoIterator<Item = Option<String>>) -> Result<String> {
    let mut seen: Option<String> = None;
    for h in hashes {
        let h = h.ok_or_else(|| Error::invalid("metrics file lacks a config hash"))?;
        match &seen {
            Some(s) if *s != h => {
                return Err(Error::invalid(format!("outputs from different configs mixed: {s} vs {h}")));
            }
            _ => seen = Some(h),
        }
    }
    seen.ok_or_else(|| Error::invalid("no metrics found"))
}

/// Mean and standard error (sample deviation over `sqrt(n)`; 0 for `n = 1`).
pub fn mean_stderr(xs: &[f64]) -> Option<(f64, f64)> {
    if xs.is_empty() {
        return None;
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return Some((mean, 0.0));
    }
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0);
    Some((mean, (var / n).sqrt()))
}

#[derive(Serialize)]
struct AccuracyPoint {
    bin_center: f64,
    context_acc: Option<f64>,
    context_stderr: Option<f64>,
    baseline_acc: Option<f64>,
    baseline_stderr: Option<f64>,
}

#[derive(Serialize)]
struct LossPoint {
    step: u64,
    loss: f64,
    selection_loss: Option<f64>,
    entropy: f64,
}

#[derive(Serialize)]
struct EntropyPoint {
    step: u64,
    entropy: f64,
}

#[derive(Serialize)]
struct MemoryPoint {
    label: String,
    value: usize,
    bytes: usize,
    rss_bytes: Option<usize>,
}

pub const MEMORY_FILE: &str = "memory.csv";

/// Aggregates per-bin rows across repetitions into mean and stderr.
pub fn aggregate_bins(per_rep: &[Vec<BinRow>]) -> Result<Vec<(f64, Option<(f64, f64)>, Option<(f64, f64)>)>> {
    let Some(first) = per_rep.first() else {
        return Ok(Vec::new());
    };
    let mut out = Vec::with_capacity(first.len());
    for (i, b) in first.iter().enumerate() {
        let mut ctx = Vec::new();
        let mut base = Vec::new();
        for rep in per_rep {
            let r = rep.get(i).ok_or_else(|| Error::invalid("repetitions disagree on bins"))?;
            ctx.extend(r.context_acc);
            base.extend(r.baseline_acc);
        }
        out.push((0.5 * (b.bin_start + b.bin_end), mean_stderr(&ctx), mean_stderr(&base)));
    }
    Ok(out)
}

/// Writes `<run_dir>/<kind>.csv` from the run's recorded metrics. Nothing
/// is written when the metrics are missing or empty.
pub fn export_plot_data(run_dir: &Path, kind: PlotKind) -> Result<PathBuf> {
    let out = run_dir.join(kind.file_name());
    match kind {
        PlotKind::AccuracyVsTime => {
            let mut hashes = Vec::new();
            let mut per_rep = Vec::new();
            for rep in rep_dirs(run_dir)? {
                let path = rep.join("bins.csv");
                if path.exists() {
                    let (h, rows): (_, Vec<BinRow>) = read_csv(&path)?;
                    hashes.push(h);
                    per_rep.push(rows);
                }
            }
            if per_rep.iter().all(|r| r.is_empty()) {
                return Err(Error::invalid(format!("no binned accuracies under {}", run_dir.display())));
            }
            let hash = one_hash(hashes)?;
            let points: Vec<AccuracyPoint> = aggregate_bins(&per_rep)?
                .into_iter()
                .map(|(c, ctx, base)| AccuracyPoint {
                    bin_center: c,
                    context_acc: ctx.map(|v| v.0),
                    context_stderr: ctx.map(|v| v.1),
                    baseline_acc: base.map(|v| v.0),
                    baseline_stderr: base.map(|v| v.1),
                })
                .collect();
            write_csv(&out, &hash, &points)?;
        }
        PlotKind::LossVsStep | PlotKind::EntropyVsStep => {
            let mut hashes = Vec::new();
            let mut per_rep = Vec::new();
            for rep in rep_dirs(run_dir)? {
                let path = rep.join("metrics.csv");
                if path.exists() {
                    let (h, rows) = read_metrics_csv(&path)?;
                    hashes.push(h);
                    per_rep.push(rows);
                }
            }
            let steps = per_rep.iter().map(Vec::len).min().unwrap_or(0);
            if steps == 0 {
                return Err(Error::invalid(format!("no metrics under {}", run_dir.display())));
            }
            let hash = one_hash(hashes)?;
            let n = per_rep.len() as f64;
            let mean = |f: &dyn Fn(&MetricsRow) -> f64, i: usize| per_rep.iter().map(|r| f(&r[i])).sum::<f64>() / n;
            if kind == PlotKind::LossVsStep {
                let points: Vec<LossPoint> = (0..steps)
                    .map(|i| {
                        let sel: Option<Vec<f64>> = per_rep.iter().map(|r| r[i].selection_loss).collect();
                        LossPoint {
                            step: per_rep[0][i].step,
                            loss: mean(&|m| m.loss_greedy, i),
                            selection_loss: sel.map(|s| s.iter().sum::<f64>() / n),
                            entropy: mean(&|m| m.selection_entropy, i),
                        }
                    })
                    .collect();
                write_csv(&out, &hash, &points)?;
            } else {
                let points: Vec<EntropyPoint> = (0..steps)
                    .map(|i| EntropyPoint {
                        step: per_rep[0][i].step,
                        entropy: mean(&|m| m.selection_entropy, i),
                    })
                    .collect();
                write_csv(&out, &hash, &points)?;
            }
        }
        PlotKind::MemoryVsHparam => {
            let path = run_dir.join(MEMORY_FILE);
            if !path.exists() {
                return Err(Error::invalid(format!("no {MEMORY_FILE} under {}", run_dir.display())));
            }
            let (h, samples): (_, Vec<MemoryProbeSample>) = read_csv(&path)?;
            if samples.is_empty() {
                return Err(Error::invalid("memory samples are empty"));
            }
            let hash = one_hash([h])?;
            let points: Vec<MemoryPoint> = samples
                .into_iter()
                .map(|s| MemoryPoint {
                    label: s.label,
                    value: s.value,
                    bytes: s.bytes,
                    rss_bytes: s.rss_bytes,
                })
                .collect();
            write_csv(&out, &hash, &points)?;
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(step: u64, loss: f64) -> MetricsRow {
        MetricsRow {
            step,
            loss_sampled: loss,
            loss_greedy: loss,
            accuracy: 0.5,
            selection_entropy: 1.0 / (step as f64 + 1.0),
            selection_loss: (step % 2 == 0).then_some(0.25),
            temperature: 1.0,
            lr_scale: 1.0,
            retrieval_lr_scale: 10.0,
            grad_norm: 0.1,
            skipped_rows: 0,
            peak_logits_bytes: 64,
            peak_retrieved_bytes: 32,
        }
    }

    #[test]
    fn constant_chance_loss_is_never_detected() {
        assert_eq!(detect_exploration_phase(&vec![std::f64::consts::LN_2; 2000]), None);
        assert_eq!(detect_exploration_phase(&[]), None);
    }

    #[test]
    fn step_change_is_detected_after_the_window_lag() {
        let mut s = vec![std::f64::consts::LN_2; 500];
        s.extend(vec![0.1; 1000]);
        // Need n > 100 (ln2 - 0.5 ln2) / (ln2 - 0.1) low entries in the window.
        let ln2 = std::f64::consts::LN_2;
        let n = (100.0 * (0.5 * ln2) / (ln2 - 0.1)).floor() as usize + 1;
        assert_eq!(detect_exploration_phase(&s), Some(500 + n - 1));
    }

    #[test]
    fn metrics_csv_round_trips_with_hash() {
        let rows: Vec<MetricsRow> = (0..5).map(|s| row(s, 0.3 + s as f64 * 1e-3)).collect();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.csv");
        write_metrics_csv(&p, "cafe", &rows).unwrap();
        let text = std::fs::read_to_string(&p).unwrap();
        assert!(text.starts_with("# config_hash=cafe\nstep,loss_sampled,"));
        let (h, back) = read_metrics_csv(&p).unwrap();
        assert_eq!(h.as_deref(), Some("cafe"));
        assert_eq!(back, rows);
    }

    #[test]
    fn plot_export_schemas_and_errors() {
        let dir = tempfile::tempdir().unwrap();
        let rep = dir.path().join("rep0");
        std::fs::create_dir(&rep).unwrap();
        assert!(export_plot_data(dir.path(), PlotKind::LossVsStep).is_err());
        assert!(!dir.path().join("loss_vs_step.csv").exists());
        write_metrics_csv(&rep.join("metrics.csv"), "h1", &[]).unwrap();
        assert!(export_plot_data(dir.path(), PlotKind::LossVsStep).is_err());
        assert!(!dir.path().join("loss_vs_step.csv").exists());

        write_metrics_csv(&rep.join("metrics.csv"), "h1", &[row(0, 0.7), row(1, 0.6)]).unwrap();
        let p = export_plot_data(dir.path(), PlotKind::LossVsStep).unwrap();
        let text = std::fs::read_to_string(p).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next(), Some("# config_hash=h1"));
        assert_eq!(lines.next(), Some("step,loss,selection_loss,entropy"));
        assert_eq!(lines.next(), Some("0,0.7,0.25,1.0"));
        assert_eq!(lines.next(), Some("1,0.6,,0.5"));

        let bins = vec![BinRow {
            bin_start: 0.0,
            bin_end: 0.5,
            rows: 10,
            context_acc: Some(0.9),
            context_loss: Some(0.2),
            baseline_acc: Some(0.8),
            baseline_loss: Some(0.3),
        }];
        write_csv(&rep.join("bins.csv"), "h1", &bins).unwrap();
        let p = export_plot_data(dir.path(), PlotKind::AccuracyVsTime).unwrap();
        let text = std::fs::read_to_string(p).unwrap();
        assert_eq!(text.lines().nth(1), Some("bin_center,context_acc,context_stderr,baseline_acc,baseline_stderr"));
        assert_eq!(text.lines().nth(2), Some("0.25,0.9,0.0,0.8,0.0"));

        let rep1 = dir.path().join("rep1");
        std::fs::create_dir(&rep1).unwrap();
        write_metrics_csv(&rep1.join("metrics.csv"), "h2", &[row(0, 0.7)]).unwrap();
        let err = export_plot_data(dir.path(), PlotKind::EntropyVsStep).unwrap_err();
        assert!(err.to_string().contains("different configs"), "{err}");

        assert!("bogus".parse::<PlotKind>().unwrap_err().is_config_error());
        assert_eq!("memory_vs_hparam".parse::<PlotKind>().unwrap(), PlotKind::MemoryVsHparam);
    }

    #[test]
    fn stderr_of_known_sample() {
        let (m, s) = mean_stderr(&[1.0, 2.0, 3.0]).unwrap();
        assert_eq!(m, 2.0);
        assert!((s - (1.0f64 / 3.0).sqrt()).abs() < 1e-12);
        assert_eq!(mean_stderr(&[4.0]), Some((4.0, 0.0)));
        assert_eq!(mean_stderr(&[]), None);
    }
}
