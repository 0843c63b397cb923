//! `btscan`: analyze traces, generate labeled experiments, sweep ROC curves.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use thiserror::Error;

use btscan::capture::{ingest_ndjson, ingest_pcap, is_pcap_magic, write_ndjson, write_pcap, PacketRecord};
use btscan::dht::SignatureTable;
use btscan::eval::{self, Mode, DEFAULT_LADDER};
use btscan::peermap::PeerMapConfig;
use btscan::pipeline::{self, AnalyzerSet, PipelineConfig};
use btscan::scandet::DetectorConfig;
use btscan::synth::{self, Coordination, ExperimentConfig, LabeledTrace};

const EXIT_IO: u8 = 2;
const EXIT_USAGE: u8 = 64;

#[derive(Debug, Error)]
enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Io(String),
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Usage(_) => EXIT_USAGE,
            CliError::Io(_) => EXIT_IO,
        }
    }
}

fn io_err(path: &Path, e: impl std::fmt::Display) -> CliError {
    CliError::Io(format!("{}: {e}", path.display()))
}

fn usage(e: impl std::fmt::Display) -> CliError {
    CliError::Usage(e.to_string())
}

#[derive(Parser)]
#[command(name = "btscan", version, about = "BitTorrent-aware port-scan detection")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the detector over a trace and write alarm logs and a summary.
    Analyze(AnalyzeArgs),
    /// Generate a labeled synthetic experiment.
    Synth(SynthArgs),
    /// Sweep thresholds in every mode and write ROC points.
    Roc(RocArgs),
    /// Write the predicted-connection duration histogram.
    Hist(HistArgs),
    /// Compare baseline and suppressed flags against the labels.
    Breakdown(BreakdownArgs),
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum InputFormat {
    Auto,
    Pcap,
    Ndjson,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum TraceFormat {
    Ndjson,
    Pcap,
}

#[derive(Args)]
struct DetectorArgs {
    /// Report threshold(s) in distinct failed destinations (comma list).
    #[arg(long, value_delimiter = ',')]
    threshold: Vec<usize>,
    /// Sliding window in seconds.
    #[arg(long, default_value_t = 900.0)]
    window: f64,
    /// Distinct failures after which a source is silenced.
    #[arg(long)]
    shutdown: Option<usize>,
    #[arg(long, default_value_t = 0.75)]
    ppr_lower: f64,
    #[arg(long, default_value_t = 1.0)]
    ppr_upper: f64,
    /// Count predicted failures like any other.
    #[arg(long)]
    no_predicted: bool,
    /// Disable port/peer-ratio alarm suppression.
    #[arg(long)]
    no_ppr: bool,
    /// Analyzers feeding the peer map: comma list of http_tracker,
    /// udp_tracker, adht, mdht, btudp, pex, or all / none.
    #[arg(long, default_value = "all")]
    analyzers: String,
    /// UDP signature file replacing the built-in signatures.
    #[arg(long)]
    signatures: Option<PathBuf>,
    /// Peer-map entry lifetime in seconds.
    #[arg(long, default_value_t = 1800.0)]
    ttl: f64,
}

impl DetectorArgs {
    fn detector(&self) -> DetectorConfig {
        let base = DetectorConfig::default();
        let thresholds = if self.threshold.is_empty() {
            base.report_thresholds.clone()
        } else {
            self.threshold.clone()
        };
        let shutdown = self
            .shutdown
            .unwrap_or_else(|| thresholds.last().copied().unwrap_or(base.shutdown_threshold));
        DetectorConfig {
            report_thresholds: thresholds,
            window: self.window,
            shutdown_threshold: shutdown,
            ppr_lower: self.ppr_lower,
            ppr_upper: self.ppr_upper,
            suppress_predicted: !self.no_predicted,
            suppress_ppr: !self.no_ppr,
        }
    }

    fn pipeline(&self) -> Result<PipelineConfig, CliError> {
        let detector = self.detector();
        detector.validate().map_err(usage)?;
        if !(self.ttl.is_finite() && self.ttl > 0.0) {
            return Err(usage("--ttl must be positive"));
        }
        let analyzers: AnalyzerSet = self.analyzers.parse().map_err(usage)?;
        let signatures = match &self.signatures {
            None => SignatureTable::default(),
            Some(path) => {
                let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
                text.parse().map_err(|e| usage(format!("{}: {e}", path.display())))?
            }
        };
        Ok(PipelineConfig {
            detector,
            peermap: PeerMapConfig {
                ttl: self.ttl,
                ..Default::default()
            },
            analyzers,
            signatures,
            ..Default::default()
        })
    }
}

#[derive(Args)]
struct AnalyzeArgs {
    #[arg(long)]
    input: PathBuf,
    #[arg(long, value_enum, default_value_t = InputFormat::Auto)]
    format: InputFormat,
    #[command(flatten)]
    detector: DetectorArgs,
    #[arg(long, default_value = ".")]
    out: PathBuf,
}

#[derive(Args)]
struct ExperimentArgs {
    #[arg(long, default_value_t = 1)]
    seed: u64,
    #[arg(long, default_value_t = 51)]
    scanners: usize,
    #[arg(long, default_value_t = 49)]
    bt_hosts: usize,
    /// Peers learned by each BitTorrent host.
    #[arg(long, default_value_t = 200)]
    peers: usize,
    /// Share of peers that cannot be connected to.
    #[arg(long, default_value_t = 0.8)]
    unconnectable: f64,
    /// Probes sent by each scanner.
    #[arg(long, default_value_t = 1000)]
    scan_probes: usize,
}

impl ExperimentArgs {
    fn generate(&self) -> Result<LabeledTrace, CliError> {
        let cfg = ExperimentConfig {
            scanners: self.scanners,
            bt_hosts: self.bt_hosts,
            peers: self.peers,
            unconnectable: self.unconnectable,
            scan_probes: self.scan_probes,
            mix: Coordination::ALL.to_vec(),
            ..Default::default()
        };
        cfg.generate(self.seed).map_err(usage)
    }
}

#[derive(Args)]
struct SynthArgs {
    #[command(flatten)]
    experiment: ExperimentArgs,
    #[arg(long, value_enum, default_value_t = TraceFormat::Ndjson)]
    format: TraceFormat,
    #[arg(long, default_value = ".")]
    out: PathBuf,
}

/// A labeled trace from files, or a freshly generated experiment.
#[derive(Args)]
struct TraceArgs {
    /// Trace to evaluate; without it the synthetic experiment is generated.
    #[arg(long, requires = "labels")]
    input: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = InputFormat::Auto)]
    format: InputFormat,
    /// Labels sidecar (NDJSON of source, kind).
    #[arg(long, requires = "input")]
    labels: Option<PathBuf>,
    #[command(flatten)]
    experiment: ExperimentArgs,
}

impl TraceArgs {
    fn load(&self) -> Result<LabeledTrace, CliError> {
        match (&self.input, &self.labels) {
            (Some(input), Some(labels)) => {
                let packets = read_trace(input, self.format)?;
                let file = fs::File::open(labels).map_err(|e| io_err(labels, e))?;
                let labels = synth::read_labels(std::io::BufReader::new(file)).map_err(|e| io_err(labels, e))?;
                Ok(LabeledTrace { packets, labels })
            }
            _ => self.experiment.generate(),
        }
    }
}

#[derive(Args)]
struct RocArgs {
    #[command(flatten)]
    trace: TraceArgs,
    #[command(flatten)]
    detector: DetectorArgs,
    #[arg(long, default_value = ".")]
    out: PathBuf,
}

#[derive(Args)]
struct HistArgs {
    #[command(flatten)]
    trace: TraceArgs,
    #[command(flatten)]
    detector: DetectorArgs,
    /// Predicted connections to count before the flag.
    #[arg(long, default_value_t = 100)]
    k: usize,
    /// Bin width in seconds.
    #[arg(long, default_value_t = 900.0)]
    bin: f64,
    #[arg(long, default_value = ".")]
    out: PathBuf,
}

#[derive(Args)]
struct BreakdownArgs {
    #[command(flatten)]
    trace: TraceArgs,
    #[command(flatten)]
    detector: DetectorArgs,
    #[arg(long, default_value = ".")]
    out: PathBuf,
}

fn read_trace(path: &Path, format: InputFormat) -> Result<Vec<PacketRecord>, CliError> {
    let data = fs::read(path).map_err(|e| io_err(path, e))?;
    let format = match format {
        InputFormat::Auto => detect_format(&data).map_err(|e| io_err(path, e))?,
        f => f,
    };
    match format {
        InputFormat::Pcap => {
            let ingest = ingest_pcap(&data[..]).map_err(|e| io_err(path, e))?;
            for w in ingest.warnings() {
                eprintln!("warning: {}: {w}", path.display());
            }
            Ok(ingest.packets)
        }
        _ => {
            let ingest = ingest_ndjson(&data[..]).map_err(|e| io_err(path, e))?;
            for e in &ingest.errors {
                eprintln!("warning: {}: {e}", path.display());
            }
            if ingest.packets.is_empty() && !ingest.errors.is_empty() {
                return Err(io_err(path, "no valid packet lines"));
            }
            Ok(ingest.packets)
        }
    }
}

/// pcap by magic number, NDJSON if the first non-blank line is a JSON
/// object; anything else is refused rather than guessed.
fn detect_format(data: &[u8]) -> Result<InputFormat, String> {
    if is_pcap_magic(data) {
        return Ok(InputFormat::Pcap);
    }
    let first = data
        .split(|b| *b == b'\n')
        .find(|l| !l.iter().all(u8::is_ascii_whitespace))
        .ok_or("empty input, cannot detect format")?;
    match serde_json::from_slice::<serde_json::Value>(first) {
        Ok(v) if v.is_object() => Ok(InputFormat::Ndjson),
        _ => Err("neither pcap nor NDJSON; pass --format".into()),
    }
}

/// Writes `name` inside `dir` via a temporary file and rename.
fn write_atomic(
    dir: &Path,
    name: &str,
    fill: impl FnOnce(&mut BufWriter<&mut fs::File>) -> std::io::Result<()>,
) -> Result<(), CliError> {
    fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    let target = dir.join(name);
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| io_err(dir, e))?;
    {
        let mut w = BufWriter::new(tmp.as_file_mut());
        fill(&mut w).and_then(|()| w.flush()).map_err(|e| io_err(&target, e))?;
    }
    tmp.persist(&target).map_err(|e| io_err(&target, e.error))?;
    Ok(())
}

fn analyze(args: &AnalyzeArgs) -> Result<(), CliError> {
    let cfg = args.detector.pipeline()?;
    let packets = read_trace(&args.input, args.format)?;
    let out = pipeline::run(&packets, cfg).map_err(usage)?;
    let (suppressions, alarms): (Vec<_>, Vec<_>) = out.alarms.iter().partition(|a| a.kind.is_suppression());
    write_atomic(&args.out, "alarms.log", |w| {
        alarms.iter().try_for_each(|a| writeln!(w, "{a}"))
    })?;
    write_atomic(&args.out, "suppressions.log", |w| {
        suppressions.iter().try_for_each(|a| writeln!(w, "{a}"))
    })?;
    write_atomic(&args.out, "peermap.ndjson", |w| out.peermap.export_ndjson(w))?;
    write_atomic(&args.out, "summary.json", |w| {
        serde_json::to_writer_pretty(&mut *w, &out.summary())?;
        writeln!(w)
    })?;
    eprintln!(
        "{} packets, {} alarms, {} suppressed",
        out.packets,
        alarms.len(),
        suppressions.len()
    );
    Ok(())
}

fn synth_cmd(args: &SynthArgs) -> Result<(), CliError> {
    let trace = args.experiment.generate()?;
    match args.format {
        TraceFormat::Ndjson => write_atomic(&args.out, "trace.ndjson", |w| {
            write_ndjson(w, &trace.packets).map_err(std::io::Error::other)
        })?,
        TraceFormat::Pcap => write_atomic(&args.out, "trace.pcap", |w| {
            write_pcap(w, &trace.packets).map_err(std::io::Error::other)
        })?,
    }
    write_atomic(&args.out, "labels.ndjson", |w| synth::write_labels(w, &trace.labels))
}

fn roc(args: &RocArgs) -> Result<(), CliError> {
    let cfg = args.detector.pipeline()?;
    let thresholds = if args.detector.threshold.is_empty() {
        DEFAULT_LADDER.to_vec()
    } else {
        args.detector.threshold.clone()
    };
    let trace = args.trace.load()?;
    let points = eval::roc_points(&trace, &cfg, &thresholds, &Mode::ALL).map_err(usage)?;
    write_atomic(&args.out, "roc.csv", |w| eval::write_roc_csv(w, &points))
}

/// Single-threshold runs for commands that compare flags.
fn flag_config(detector: &DetectorArgs) -> Result<PipelineConfig, CliError> {
    let mut cfg = detector.pipeline()?;
    let threshold = detector.threshold.last().copied().unwrap_or(100);
    cfg.detector = eval::at_threshold(&cfg.detector, threshold);
    if let Some(s) = detector.shutdown {
        cfg.detector.shutdown_threshold = s;
    }
    Ok(cfg)
}

fn hist(args: &HistArgs) -> Result<(), CliError> {
    if args.k == 0 || !(args.bin.is_finite() && args.bin > 0.0) {
        return Err(usage("--k must be at least 1 and --bin positive"));
    }
    let cfg = flag_config(&args.detector)?;
    let trace = args.trace.load()?;
    let h = eval::predicted_duration_histogram(&trace, &cfg, args.k, args.bin).map_err(usage)?;
    write_atomic(&args.out, "histogram.csv", |w| eval::write_histogram_csv(w, &h))
}

fn breakdown(args: &BreakdownArgs) -> Result<(), CliError> {
    let cfg = flag_config(&args.detector)?;
    let trace = args.trace.load()?;
    let b = eval::flag_breakdown(&trace, &cfg).map_err(usage)?;
    write_atomic(&args.out, "breakdown.json", |w| {
        serde_json::to_writer_pretty(&mut *w, &b)?;
        writeln!(w)
    })
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result = match &cli.command {
        Command::Analyze(a) => analyze(a),
        Command::Synth(a) => synth_cmd(a),
        Command::Roc(a) => roc(a),
        Command::Hist(a) => hist(a),
        Command::Breakdown(a) => breakdown(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("btscan: {e}");
            ExitCode::from(e.code())
        }
    }
}
