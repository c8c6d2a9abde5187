//! Command-line surface: generate synthetic recordings, run the streaming
//! pipeline, evaluate against ground truth, benchmark latency, and convert
//! between the signal format and CSV.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use nalgebra::DMatrix;
use serde::Serialize;

use crate::block::MultichannelBlock;
use crate::error::{CorssError, Result};
use crate::identify;
use crate::io as sigio;
use crate::metrics::{latency_stats, matching_rate, LatencyReport};
use crate::pipeline::{
    burn_in_samples, evaluate_emgdi_segment, identify_outputs, Algorithm, Pipeline,
    PipelineConfig,
};
use crate::schedule::ForgettingSchedule;
use crate::separate::Nonlinearity;
use crate::synth::{self, SynthSpec, Task};

#[derive(Debug, Parser)]
#[command(
    name = "corss",
    about = "Streaming blind source separation for multichannel electrophysiological signals"
)]
pub struct CliArgs {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic recording plus its ground-truth sidecar
    Synth(SynthArgs),
    /// Run the streaming pipeline over a recording
    Run(RunArgs),
    /// Evaluate a finished run against ground truth
    Eval(EvalArgs),
    /// Measure per-block processing latency across block sizes
    Bench(BenchArgs),
    /// Convert between the signal format and CSV
    Convert(ConvertArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum TaskArg {
    /// Surface-EMG decomposition into motor-unit spike trains
    Semg,
    /// Diaphragmatic-EMG monitoring under ECG contamination
    Emgdi,
}

impl From<TaskArg> for Task {
    fn from(t: TaskArg) -> Task {
        match t {
            TaskArg::Semg => Task::SemgDecomposition,
            TaskArg::Emgdi => Task::EmgdiMonitoring,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum AlgorithmArg {
    Corss,
    Orica,
}

impl From<AlgorithmArg> for Algorithm {
    fn from(a: AlgorithmArg) -> Algorithm {
        match a {
            AlgorithmArg::Corss => Algorithm::Corss,
            AlgorithmArg::Orica => Algorithm::Orica,
        }
    }
}

#[derive(Debug, Args)]
struct SynthArgs {
    #[arg(long, value_enum)]
    task: TaskArg,
    #[arg(long)]
    channels: Option<usize>,
    #[arg(long)]
    sources: Option<usize>,
    /// Recording length in seconds
    #[arg(long)]
    duration: Option<f64>,
    /// Sample rate in Hz
    #[arg(long)]
    rate: Option<f64>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Sensor SNR in dB ("inf" disables noise)
    #[arg(long)]
    snr: Option<f64>,
    #[arg(long)]
    breath_bpm: Option<f64>,
    #[arg(long)]
    ecg_bpm: Option<f64>,
    /// Output signal path; the truth sidecar lands next to it as
    /// <out>.truth.json
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct RunArgs {
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    out_dir: PathBuf,
    #[arg(long, value_enum, default_value_t = AlgorithmArg::Corss)]
    algorithm: AlgorithmArg,
    /// Block size L in samples
    #[arg(long, default_value_t = 200)]
    block: usize,
    #[arg(long, value_enum, default_value_t = TaskArg::Semg)]
    task: TaskArg,
    #[arg(long, default_value_t = 25)]
    checkpoint_blocks: usize,
    /// Override the whitening schedule as lambda0,gamma,lambda_min
    #[arg(long)]
    whiten_schedule: Option<String>,
    /// Override the separation schedule as lambda0,gamma,lambda_min
    #[arg(long)]
    separate_schedule: Option<String>,
    /// Constrained nonlinearity parameters as a0,a1
    #[arg(long)]
    nonlinearity: Option<String>,
}

#[derive(Debug, Args)]
struct EvalArgs {
    /// Directory produced by `run` (reads sources.sig)
    #[arg(long)]
    run_dir: PathBuf,
    /// Ground-truth JSON sidecar
    #[arg(long)]
    truth: PathBuf,
    /// Spike-matching tolerance in milliseconds
    #[arg(long, default_value_t = 0.5)]
    tolerance_ms: f64,
    /// Trace only checkpoints at least this far (seconds) past the burn-in
    #[arg(long, default_value_t = 5.0)]
    trace_every_s: f64,
}

#[derive(Debug, Args)]
struct BenchArgs {
    #[arg(long)]
    input: PathBuf,
    /// Comma-separated block sizes
    #[arg(long, default_value = "100,200,400,500,1000,2000")]
    blocks: String,
    /// Leading blocks excluded from the statistics
    #[arg(long, default_value_t = 5)]
    warmup: usize,
    /// Optional CSV output path (always printed to stdout)
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct ConvertArgs {
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    output: PathBuf,
    /// Sample rate, required when importing CSV
    #[arg(long)]
    rate: Option<f64>,
}

/// Entry point: parses argv and runs the selected command.
pub fn main_with_args<I, T>(argv: I) -> Result<()>
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match CliArgs::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e)
            if matches!(
                e.kind(),
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion
            ) =>
        {
            print!("{e}");
            return Ok(());
        }
        Err(e) => return Err(CorssError::InvalidSpec(e.to_string())),
    };
    match cli.command {
        Command::Synth(args) => cmd_synth(args),
        Command::Run(args) => cmd_run(args),
        Command::Eval(args) => cmd_eval(args),
        Command::Bench(args) => cmd_bench(args),
        Command::Convert(args) => cmd_convert(args),
    }
}

fn truth_path_for(signal: &Path) -> PathBuf {
    let mut s = signal.as_os_str().to_os_string();
    s.push(".truth.json");
    PathBuf::from(s)
}

fn cmd_synth(args: SynthArgs) -> Result<()> {
    let mut spec = match args.task {
        TaskArg::Semg => SynthSpec::default_mu(),
        TaskArg::Emgdi => SynthSpec::default_emgdi(),
    };
    if let Some(v) = args.channels {
        spec.n_ch = v;
    }
    if let Some(v) = args.sources {
        spec.n_sources = v;
    }
    if let Some(v) = args.duration {
        spec.duration_s = v;
    }
    if let Some(v) = args.rate {
        spec.sample_rate = v;
    }
    if let Some(v) = args.snr {
        spec.snr_db = v;
    }
    if let Some(v) = args.breath_bpm {
        spec.breath_rate_bpm = v;
    }
    if let Some(v) = args.ecg_bpm {
        spec.ecg_rate_bpm = v;
    }
    spec.seed = args.seed;
    let (recording, truth) = synth::generate(&spec)?;
    sigio::write_signal(&args.out, &recording)?;
    sigio::write_truth(&truth_path_for(&args.out), &truth)?;
    println!(
        "wrote {} ({} ch, {} samples @ {} Hz) and truth sidecar",
        args.out.display(),
        recording.n_ch(),
        recording.len(),
        recording.sample_rate
    );
    Ok(())
}

fn parse_schedule(s: &str) -> Result<ForgettingSchedule> {
    let parts: Vec<&str> = s.split(',').collect();
    if parts.len() != 3 {
        return Err(CorssError::InvalidSpec(format!(
            "schedule {s:?} must be lambda0,gamma,lambda_min"
        )));
    }
    ForgettingSchedule::power_decay(
        parts[0].trim().parse()?,
        parts[1].trim().parse()?,
        parts[2].trim().parse()?,
    )
}

fn parse_nonlinearity(s: &str) -> Result<Nonlinearity> {
    let parts: Vec<&str> = s.split(',').collect();
    if parts.len() != 2 {
        return Err(CorssError::InvalidSpec(format!(
            "nonlinearity {s:?} must be a0,a1"
        )));
    }
    Nonlinearity::constrained(parts[0].trim().parse()?, parts[1].trim().parse()?)
}

#[derive(Debug, Serialize)]
struct RunSummary {
    algorithm: Algorithm,
    task: Task,
    block_size: usize,
    n_blocks: usize,
    n_samples: usize,
    sample_rate: f64,
    skipped_samples: u64,
    latency: LatencyReport,
}

fn cmd_run(args: RunArgs) -> Result<()> {
    let recording = sigio::read_signal(&args.input)?;
    let mut config = PipelineConfig::default_for_task(args.task.into());
    config.algorithm = args.algorithm.into();
    config.block_size = args.block;
    config.checkpoint_every_blocks = args.checkpoint_blocks;
    if let Some(s) = &args.whiten_schedule {
        config.whiten_schedule = parse_schedule(s)?;
    }
    if let Some(s) = &args.separate_schedule {
        config.separate_schedule = parse_schedule(s)?;
    }
    if let Some(s) = &args.nonlinearity {
        config.nonlinearity = parse_nonlinearity(s)?;
    } else if config.algorithm == Algorithm::Orica {
        // the baseline algorithm pairs with the baseline score
        config.nonlinearity = Nonlinearity::BaselineTanh;
    }
    config.validate()?;

    std::fs::create_dir_all(&args.out_dir)?;
    let n_ch = recording.n_ch();
    let sources_path = args.out_dir.join("sources.sig");
    let mut sources_out = BufWriter::new(File::create(&sources_path)?);
    let whitened_path = args.out_dir.join("whitened.sig");
    let mut whitened_out = BufWriter::new(File::create(&whitened_path)?);
    for out in [&mut sources_out, &mut whitened_out] {
        sigio::write_signal_header(out, n_ch, recording.sample_rate, recording.len())?;
    }

    let blocks = MultichannelBlock::split(&recording, config.block_size);
    let mut pipeline = Pipeline::new(config, n_ch)?;
    let mut timings = Vec::with_capacity(blocks.len());
    let mut all_whitened = DMatrix::zeros(n_ch, recording.len());
    let mut col = 0usize;
    for block in &blocks {
        let out = pipeline.process_block(block)?;
        // each block hits the disk as soon as it is produced
        sigio::write_signal_frames(&mut sources_out, &out.sources)?;
        sigio::write_signal_frames(&mut whitened_out, &out.whitened)?;
        sources_out.flush()?;
        whitened_out.flush()?;
        all_whitened
            .view_mut((0, col), (n_ch, out.whitened.len()))
            .copy_from(&out.whitened.data);
        col += out.whitened.len();
        timings.push(out.elapsed_s);
    }
    pipeline.checkpoint();
    write_json(&args.out_dir.join("checkpoints.json"), &pipeline.checkpoints())?;

    // identification reads the whole run through the converged unmixing
    // matrix; a single streamed row shuffles under permutation drift
    let ident_sources = pipeline.separator().unmixing() * &all_whitened;
    let task_outputs = identify_outputs(config.task, &ident_sources, recording.sample_rate)?;
    write_json(&args.out_dir.join("identification.json"), &task_outputs)?;

    let summary = RunSummary {
        algorithm: config.algorithm,
        task: config.task,
        block_size: config.block_size,
        n_blocks: blocks.len(),
        n_samples: recording.len(),
        sample_rate: recording.sample_rate,
        skipped_samples: pipeline.separator().skipped_samples(),
        latency: latency_stats(&timings, config.block_size, recording.sample_rate)?,
    };
    write_json(&args.out_dir.join("summary.json"), &summary)?;
    println!(
        "processed {} blocks; mean latency {:.4} ms/block (realtime ratio {:.3})",
        summary.n_blocks,
        summary.latency.mean_s * 1e3,
        summary.latency.realtime_ratio
    );
    Ok(())
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    serde_json::to_writer_pretty(&mut out, value)?;
    out.flush()?;
    Ok(())
}

#[derive(Debug, Serialize)]
#[serde(tag = "task", rename_all = "kebab-case")]
enum EvalMetrics {
    SemgDecomposition {
        per_source_mr: Vec<f64>,
        mean_mr: f64,
        n_recovered: usize,
        tolerance_ms: f64,
    },
    EmgdiMonitoring {
        source_row: usize,
        envelope_corr: f64,
        rmse_percent: f64,
        trigger_mr: f64,
    },
}

/// Rising edges of the gating curve: the true breathing onsets.
fn gate_onsets(gate: &[f64]) -> Vec<u64> {
    let mut onsets = Vec::new();
    let mut prev = 0.0;
    for (i, &g) in gate.iter().enumerate() {
        if prev == 0.0 && g > 0.0 {
            onsets.push(i as u64);
        }
        prev = g;
    }
    onsets
}

fn cmd_eval(args: EvalArgs) -> Result<()> {
    // metrics come from checkpointed unmixing matrices applied to the
    // whitened history, not from the streamed rows (which shuffle under
    // permutation drift over long runs)
    let whitened = sigio::read_signal(&args.run_dir.join("whitened.sig"))?;
    let checkpoints: Vec<crate::pipeline::Checkpoint> =
        serde_json::from_reader(File::open(args.run_dir.join("checkpoints.json"))?)?;
    let last = checkpoints
        .last()
        .ok_or_else(|| CorssError::UnavailableMetric("run produced no checkpoints".into()))?;
    let truth = sigio::read_truth(&args.truth)?;
    let fs = whitened.sample_rate;
    let n_ch = whitened.n_ch();
    let burn = burn_in_samples(n_ch);
    let is_emgdi = !truth.gating_curve.is_empty();
    if is_emgdi && truth.gating_curve.len() != whitened.len() {
        return Err(CorssError::ShapeError(format!(
            "truth covers {} samples, run has {}",
            truth.gating_curve.len(),
            whitened.len()
        )));
    }
    let y_end = &last.unmixing * &whitened.data;

    let trace_step = ((args.trace_every_s * fs) as usize).max(1);
    let mut trace_rows: Vec<(u64, Vec<f64>)> = Vec::new();

    let metrics = if is_emgdi {
        let ev = evaluate_emgdi_segment(&y_end, &truth, fs)?;
        // trigger agreement against the true breath onsets, +-300 ms
        let outputs = identify_outputs(Task::EmgdiMonitoring, &y_end, fs)?;
        let est_triggers: Vec<u64> = outputs
            .triggers
            .map(|t| {
                t.onset_samples
                    .iter()
                    .map(|&s| s + burn as u64)
                    .collect()
            })
            .unwrap_or_default();
        let true_onsets: Vec<u64> = gate_onsets(&truth.gating_curve)
            .into_iter()
            .filter(|&s| s >= burn as u64)
            .collect();
        let ta = identify::SpikeTrain::new(0, est_triggers, fs)?;
        let tb = identify::SpikeTrain::new(1, true_onsets, fs)?;
        let trigger_mr = matching_rate(&ta, &tb, 300.0)?.mr;

        for ck in &checkpoints {
            if ck.sample_count <= (burn + trace_step) as u64 {
                continue;
            }
            let upto = ck.sample_count as usize;
            let seg = (&ck.unmixing * whitened.data.columns(0, upto)).into_owned();
            if let Ok(e) = evaluate_emgdi_segment(&seg, &truth, fs) {
                trace_rows.push((ck.sample_count, vec![e.corr, e.rmse_percent]));
            }
        }
        EvalMetrics::EmgdiMonitoring {
            source_row: ev.source_row,
            envelope_corr: ev.corr,
            rmse_percent: ev.rmse_percent,
            trigger_mr,
        }
    } else {
        let mean = |v: &[f64]| {
            if v.is_empty() {
                0.0
            } else {
                v.iter().sum::<f64>() / v.len() as f64
            }
        };
        let per_source = semg_per_source_mr(&y_end, &truth, fs, args.tolerance_ms, burn)?;
        let mean_mr = mean(&per_source);
        let n_recovered = per_source.iter().filter(|&&m| m >= 0.9).count();
        for ck in &checkpoints {
            if ck.sample_count <= (burn + trace_step) as u64 {
                continue;
            }
            let upto = ck.sample_count as usize;
            let seg = (&ck.unmixing * whitened.data.columns(0, upto)).into_owned();
            let mrs = semg_per_source_mr(&seg, &truth, fs, args.tolerance_ms, burn)?;
            trace_rows.push((ck.sample_count, vec![mean(&mrs)]));
        }
        EvalMetrics::SemgDecomposition {
            per_source_mr: per_source,
            mean_mr,
            n_recovered,
            tolerance_ms: args.tolerance_ms,
        }
    };

    write_json(&args.run_dir.join("metrics.json"), &metrics)?;
    let trace_path = args.run_dir.join("trace.csv");
    let mut out = BufWriter::new(File::create(&trace_path)?);
    if is_emgdi {
        writeln!(out, "sample_count,envelope_corr,rmse_percent")?;
    } else {
        writeln!(out, "sample_count,mean_mr")?;
    }
    for (count, vals) in &trace_rows {
        let cells: Vec<String> = vals.iter().map(|v| format!("{v}")).collect();
        writeln!(out, "{count},{}", cells.join(","))?;
    }
    out.flush()?;
    println!("{}", serde_json::to_string(&metrics)?);
    Ok(())
}

/// Best matching rate per true source over all estimated trains from the
/// post-burn-in segment of `sources`.
fn semg_per_source_mr(
    sources: &DMatrix<f64>,
    truth: &crate::synth::GroundTruth,
    fs: f64,
    tolerance_ms: f64,
    burn: usize,
) -> Result<Vec<f64>> {
    let outputs = identify_outputs(Task::SemgDecomposition, sources, fs)?;
    let mut per_source = Vec::with_capacity(truth.spike_trains.len());
    for tr in &truth.spike_trains {
        let tb = tr.after(burn as u64);
        let mut best = 0.0f64;
        for est in &outputs.spike_trains {
            let m = matching_rate(est, &tb, tolerance_ms)?.mr;
            best = best.max(m);
        }
        per_source.push(best);
    }
    Ok(per_source)
}

fn cmd_bench(args: BenchArgs) -> Result<()> {
    let recording = sigio::read_signal(&args.input)?;
    let sizes: Vec<usize> = args
        .blocks
        .split(',')
        .map(|s| {
            s.trim()
                .parse::<usize>()
                .map_err(|_| CorssError::InvalidSpec(format!("bad block size {s:?}")))
        })
        .collect::<Result<_>>()?;
    if sizes.is_empty() {
        return Err(CorssError::InvalidSpec("no block sizes given".into()));
    }
    let mut reports = Vec::new();
    for &size in &sizes {
        let mut config = PipelineConfig::default_for_task(Task::SemgDecomposition);
        config.block_size = size;
        let blocks = MultichannelBlock::split(&recording, size);
        if blocks.len() <= args.warmup {
            return Err(CorssError::InvalidSpec(format!(
                "recording too short for block size {size} with {} warm-up blocks",
                args.warmup
            )));
        }
        let mut pipeline = Pipeline::new(config, recording.n_ch())?;
        let mut timings = Vec::new();
        for (i, block) in blocks.iter().enumerate() {
            let out = pipeline.process_block(block)?;
            if i >= args.warmup {
                timings.push(out.elapsed_s);
            }
        }
        reports.push(latency_stats(&timings, size, recording.sample_rate)?);
    }
    let header = "block_size,mean_s,std_s,max_s,realtime_ratio";
    let mut lines = vec![header.to_string()];
    for r in &reports {
        lines.push(format!(
            "{},{:.6},{:.6},{:.6},{:.4}",
            r.block_size, r.mean_s, r.std_s, r.max_s, r.realtime_ratio
        ));
    }
    let table = lines.join("\n");
    println!("{table}");
    if let Some(path) = &args.out {
        std::fs::write(path, format!("{table}\n"))?;
    }
    Ok(())
}

fn cmd_convert(args: ConvertArgs) -> Result<()> {
    let in_ext = args.input.extension().and_then(|e| e.to_str()).unwrap_or("");
    let out_ext = args
        .output
        .extension()
        .and_then(|e| e.to_str())
        .unwrap_or("");
    match (in_ext, out_ext) {
        (_, "csv") => {
            let block = sigio::read_signal(&args.input)?;
            sigio::export_csv(&args.output, &block)?;
        }
        ("csv", _) => {
            let rate = args.rate.ok_or_else(|| {
                CorssError::InvalidSpec("--rate is required when importing CSV".into())
            })?;
            let block = sigio::import_csv(&args.input, rate)?;
            sigio::write_signal(&args.output, &block)?;
        }
        _ => {
            return Err(CorssError::InvalidSpec(format!(
                "cannot infer conversion direction from {:?} -> {:?}",
                args.input, args.output
            )))
        }
    }
    println!("wrote {}", args.output.display());
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_flag_parses() {
        let s = parse_schedule("0.1, 0.55, 0.0015").unwrap();
        assert_eq!(
            s,
            ForgettingSchedule::PowerDecay {
                lambda0: 0.1,
                gamma: 0.55,
                lambda_min: 0.0015
            }
        );
        assert!(parse_schedule("0.1,0.55").is_err());
        assert!(parse_schedule("a,b,c").is_err());
    }

    #[test]
    fn nonlinearity_flag_parses() {
        assert_eq!(
            parse_nonlinearity("1,4").unwrap(),
            Nonlinearity::Constrained { a0: 1.0, a1: 4.0 }
        );
        assert!(parse_nonlinearity("0,4").is_err());
        assert!(parse_nonlinearity("1").is_err());
    }

    #[test]
    fn gate_onsets_count_rising_edges() {
        let gate = [0.0, 0.0, 0.3, 0.5, 0.0, 0.0, 0.2, 0.0];
        assert_eq!(gate_onsets(&gate), vec![2, 6]);
    }
}
