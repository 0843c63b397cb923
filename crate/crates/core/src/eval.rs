//! Experiment harness: ROC sweeps, flag breakdowns and the
//! predicted-connection duration histogram over labeled traces.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::io::Write;
use std::net::Ipv4Addr;
use std::str::FromStr;

use serde::Serialize;

use crate::pipeline::{self, PipelineConfig, PipelineOutput};
use crate::scandet::{AlarmKind, ConfigError, DetectorConfig};
use crate::synth::LabeledTrace;

pub const DEFAULT_LADDER: [usize; 8] = [5, 10, 20, 50, 100, 200, 500, 1000];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize)]
pub enum Mode {
    #[serde(rename = "baseline")]
    Baseline,
    #[serde(rename = "predicted")]
    Predicted,
    #[serde(rename = "predicted+ppr")]
    PredictedPpr,
}

impl Mode {
    pub const ALL: [Mode; 3] = [Mode::Baseline, Mode::Predicted, Mode::PredictedPpr];

    pub fn name(self) -> &'static str {
        match self {
            Mode::Baseline => "baseline",
            Mode::Predicted => "predicted",
            Mode::PredictedPpr => "predicted+ppr",
        }
    }

    pub fn apply(self, cfg: DetectorConfig) -> DetectorConfig {
        match self {
            Mode::Baseline => cfg.with_suppression(false, false),
            Mode::Predicted => cfg.with_suppression(true, false),
            Mode::PredictedPpr => cfg.with_suppression(true, true),
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Mode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Mode::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| format!("unknown mode {s:?}"))
    }
}

/// `base` with a single report threshold that also shuts the source down.
pub fn at_threshold(base: &DetectorConfig, threshold: usize) -> DetectorConfig {
    DetectorConfig {
        report_thresholds: vec![threshold],
        shutdown_threshold: threshold,
        ..base.clone()
    }
}

/// Runs the full pipeline over the trace with the mode's suppression
/// switches applied to `cfg.detector`.
pub fn run_experiment(trace: &LabeledTrace, cfg: &PipelineConfig, mode: Mode) -> Result<PipelineOutput, ConfigError> {
    let mut cfg = cfg.clone();
    cfg.detector = mode.apply(cfg.detector);
    pipeline::run(&trace.packets, cfg)
}

/// Sources with at least one AddressScan.
pub fn flagged_sources(
    trace: &LabeledTrace,
    cfg: &PipelineConfig,
    mode: Mode,
) -> Result<BTreeSet<Ipv4Addr>, ConfigError> {
    Ok(run_experiment(trace, cfg, mode)?.flagged().into_iter().collect())
}

/// Alarms proper: everything except suppression records.
pub fn alarm_total(out: &PipelineOutput) -> usize {
    out.alarms.iter().filter(|a| !a.kind.is_suppression()).count()
}

/// Maps `f` over `items` on scoped threads, keeping input order.
fn par_map<T: Sync, R: Send>(items: &[T], f: impl Fn(&T) -> R + Sync) -> Vec<R> {
    let workers = std::thread::available_parallelism()
        .map_or(1, |n| n.get())
        .min(items.len().max(1));
    let chunk = items.len().div_ceil(workers).max(1);
    std::thread::scope(|s| {
        let handles: Vec<_> = items
            .chunks(chunk)
            .map(|c| s.spawn(|| c.iter().map(&f).collect::<Vec<_>>()))
            .collect();
        handles
            .into_iter()
            .flat_map(|h| h.join().expect("worker panicked"))
            .collect()
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct RocPoint {
    pub mode: Mode,
    pub threshold: usize,
    pub tpr: f64,
    pub fpr: f64,
}

fn fraction(hits: usize, total: usize) -> f64 {
    if total == 0 {
        0.0
    } else {
        hits as f64 / total as f64
    }
}

/// One point per (mode, threshold), modes outermost.
pub fn roc_points(
    trace: &LabeledTrace,
    cfg: &PipelineConfig,
    thresholds: &[usize],
    modes: &[Mode],
) -> Result<Vec<RocPoint>, ConfigError> {
    let runs: Vec<(Mode, usize)> = modes
        .iter()
        .flat_map(|m| thresholds.iter().map(move |t| (*m, *t)))
        .collect();
    let scanners: BTreeSet<_> = trace.scanners().collect();
    let benign: BTreeSet<_> = trace.bittorrent_hosts().collect();
    par_map(&runs, |&(mode, threshold)| {
        let mut c = cfg.clone();
        c.detector = at_threshold(&cfg.detector, threshold);
        let flagged = flagged_sources(trace, &c, mode)?;
        Ok(RocPoint {
            mode,
            threshold,
            tpr: fraction(flagged.intersection(&scanners).count(), scanners.len()),
            fpr: fraction(flagged.intersection(&benign).count(), benign.len()),
        })
    })
    .into_iter()
    .collect()
}

pub fn write_roc_csv<W: Write>(mut sink: W, points: &[RocPoint]) -> std::io::Result<()> {
    writeln!(sink, "mode,threshold,tpr,fpr")?;
    for p in points {
        writeln!(sink, "{},{},{:.6},{:.6}", p.mode, p.threshold, p.tpr, p.fpr)?;
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Histogram {
    pub bin: f64,
    pub counts: Vec<usize>,
    /// Per measured source: seconds from first packet to its k-th predicted
    /// connection.
    pub durations: BTreeMap<Ipv4Addr, f64>,
}

impl Histogram {
    pub fn total(&self) -> usize {
        self.counts.iter().sum()
    }

    pub fn first_bin_share(&self) -> f64 {
        fraction(self.counts.first().copied().unwrap_or(0), self.total())
    }
}

/// For every source flagged in baseline mode, the time from its first
/// packet to its `k`-th predicted connection at or before the flag.
/// Sources with fewer than `k` such connections are left out.
pub fn predicted_duration_histogram(
    trace: &LabeledTrace,
    cfg: &PipelineConfig,
    k: usize,
    bin: f64,
) -> Result<Histogram, ConfigError> {
    assert!(k >= 1 && bin > 0.0, "k >= 1 and a positive bin width");
    let out = run_experiment(trace, cfg, Mode::Baseline)?;
    let mut flag_ts: BTreeMap<Ipv4Addr, f64> = BTreeMap::new();
    for a in out.alarms_of(AlarmKind::AddressScan) {
        flag_ts.entry(a.source).or_insert(a.ts);
    }
    let mut predicted: BTreeMap<Ipv4Addr, Vec<f64>> = BTreeMap::new();
    for e in out.events.iter().filter(|e| e.predicted) {
        if flag_ts.get(&e.event.initiator).is_some_and(|f| e.event.ts <= *f) {
            predicted.entry(e.event.initiator).or_default().push(e.event.ts);
        }
    }
    let mut durations = BTreeMap::new();
    for (src, mut times) in predicted {
        if times.len() < k {
            continue;
        }
        times.sort_by(f64::total_cmp);
        let first = out.first_packet.get(&src).copied().unwrap_or(times[0]);
        durations.insert(src, times[k - 1] - first);
    }
    let mut counts = Vec::new();
    for d in durations.values() {
        let i = (d.max(0.0) / bin).floor() as usize;
        if counts.len() <= i {
            counts.resize(i + 1, 0);
        }
        counts[i] += 1;
    }
    Ok(Histogram { bin, counts, durations })
}

pub fn write_histogram_csv<W: Write>(mut sink: W, h: &Histogram) -> std::io::Result<()> {
    writeln!(sink, "bin_start_seconds,count")?;
    for (i, c) in h.counts.iter().enumerate() {
        writeln!(sink, "{},{}", i as f64 * h.bin, c)?;
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct FlagBreakdown {
    pub total_flags_baseline: usize,
    pub suppressed: usize,
    pub residual_flags: usize,
    pub residual_true: usize,
    pub residual_false: usize,
    /// Sources flagged with suppression on but not in baseline. Suppression
    /// can only remove flags, so this stays 0.
    pub new_flags: usize,
}

/// Baseline flags against predicted+PPR flags, residuals split by label.
pub fn flag_breakdown(trace: &LabeledTrace, cfg: &PipelineConfig) -> Result<FlagBreakdown, ConfigError> {
    let runs = par_map(&[Mode::Baseline, Mode::PredictedPpr], |m| {
        flagged_sources(trace, cfg, *m)
    });
    let mut runs = runs.into_iter();
    let baseline = runs.next().expect("two runs")?;
    let suppressed_run = runs.next().expect("two runs")?;
    let residual: BTreeSet<_> = baseline.intersection(&suppressed_run).copied().collect();
    let residual_true = residual
        .iter()
        .filter(|ip| trace.labels.get(ip).is_some_and(|k| k.is_scanner()))
        .count();
    Ok(FlagBreakdown {
        total_flags_baseline: baseline.len(),
        suppressed: baseline.len() - residual.len(),
        residual_flags: residual.len(),
        residual_true,
        residual_false: residual.len() - residual_true,
        new_flags: suppressed_run.difference(&baseline).count(),
    })
}
