//! End-to-end streaming pipeline: blocked ingestion, online whitening, online
//! unmixing, and checkpointed identification, with per-block timing.

use std::time::Instant;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::block::MultichannelBlock;
use crate::error::{CorssError, Result};
use crate::identify::{self, Envelope, SpikeTrain, TriggerTrain};
use crate::metrics::{amari_index, pearson_corr, rmse_percent};
use crate::schedule::ForgettingSchedule;
use crate::separate::{Nonlinearity, Separator};
use crate::synth::{GroundTruth, Task};
use crate::whiten::Whitener;

/// Burn-in heuristic: the first `25 * n_ch^2` samples are the convergence
/// transient and are excluded from steady-state metrics.
pub const BURN_IN_K: usize = 25;

pub fn burn_in_samples(n_ch: usize) -> usize {
    BURN_IN_K * n_ch * n_ch
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Algorithm {
    /// Per-sample recursive updates.
    Orica,
    /// Blockwise constrained updates.
    Corss,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub block_size: usize,
    pub algorithm: Algorithm,
    pub whiten_schedule: ForgettingSchedule,
    pub separate_schedule: ForgettingSchedule,
    pub nonlinearity: Nonlinearity,
    pub task: Task,
    pub checkpoint_every_blocks: usize,
}

impl PipelineConfig {
    /// Task-tuned defaults.
    ///
    /// Both tasks share the separation schedule; the whitening schedule
    /// differs. Respiratory bursts repeat on a ~4 s cycle, and a whitening
    /// forgetting floor with a comparable time constant tracks (and flattens)
    /// that modulation like an automatic gain control, so the monitoring task
    /// uses a fast-decaying schedule with a much deeper floor.
    pub fn default_for_task(task: Task) -> Self {
        let whiten_schedule = match task {
            Task::SemgDecomposition => ForgettingSchedule::default_power_decay(),
            Task::EmgdiMonitoring => ForgettingSchedule::PowerDecay {
                lambda0: 0.2,
                gamma: 0.7,
                lambda_min: 1e-4,
            },
        };
        PipelineConfig {
            block_size: 200,
            algorithm: Algorithm::Corss,
            whiten_schedule,
            separate_schedule: ForgettingSchedule::default_power_decay(),
            nonlinearity: Nonlinearity::default_constrained(),
            task,
            checkpoint_every_blocks: 25,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.block_size == 0 {
            return Err(CorssError::InvalidSpec("block_size must be >= 1".into()));
        }
        if self.checkpoint_every_blocks == 0 {
            return Err(CorssError::InvalidSpec(
                "checkpoint_every_blocks must be >= 1".into(),
            ));
        }
        self.whiten_schedule.validate()?;
        self.separate_schedule.validate()?;
        self.nonlinearity.validate()
    }
}

/// Per-block result: separated sources plus diagnostics.
#[derive(Debug, Clone)]
pub struct BlockOutput {
    pub block_index: usize,
    pub sources: MultichannelBlock,
    /// Whitened observations for the same samples (input to the unmixer).
    pub whitened: MultichannelBlock,
    pub elapsed_s: f64,
    pub skipped_samples: u64,
    pub w_row_norms: Vec<f64>,
}

/// Snapshot of both state matrices at a checkpoint.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Checkpoint {
    pub sample_count: u64,
    pub whitening: DMatrix<f64>,
    pub unmixing: DMatrix<f64>,
}

/// Identification outputs for whichever task was configured.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TaskOutputs {
    /// Selected pulse sources and their trains (decomposition task).
    pub spike_trains: Vec<SpikeTrain>,
    /// Index of the source row carrying the respiratory signal.
    pub emgdi_source: Option<usize>,
    /// Envelope of that source (monitoring task).
    pub envelope: Option<Envelope>,
    /// Breathing onsets from that envelope.
    pub triggers: Option<TriggerTrain>,
}

/// Everything produced by a full run.
#[derive(Debug, Clone)]
pub struct RunResult {
    pub outputs: Vec<BlockOutput>,
    pub checkpoints: Vec<Checkpoint>,
    /// All source samples in stream order (streaming y values, concatenated).
    pub sources: DMatrix<f64>,
    /// The whitened stream in the same order. Applying a later unmixing
    /// matrix to this history re-reads the whole recording through the
    /// converged separator, which sidesteps the row-permutation drift that a
    /// single streamed row accumulates over long runs.
    pub whitened: DMatrix<f64>,
    pub sample_rate: f64,
    pub task_outputs: TaskOutputs,
    pub whitener: Whitener,
    pub separator: Separator,
}

/// Incremental pipeline state: feed blocks in stream order, collect per-block
/// outputs immediately (so callers can stream them to disk as produced).
#[derive(Debug, Clone)]
pub struct Pipeline {
    config: PipelineConfig,
    whitener: Whitener,
    separator: Separator,
    n_ch: usize,
    blocks_seen: usize,
    checkpoints: Vec<Checkpoint>,
}

impl Pipeline {
    pub fn new(config: PipelineConfig, n_ch: usize) -> Result<Self> {
        config.validate()?;
        Ok(Pipeline {
            config,
            whitener: Whitener::new(n_ch, config.whiten_schedule)?,
            separator: Separator::new(n_ch, config.separate_schedule, config.nonlinearity)?,
            n_ch,
            blocks_seen: 0,
            checkpoints: Vec::new(),
        })
    }

    pub fn whitener(&self) -> &Whitener {
        &self.whitener
    }

    pub fn separator(&self) -> &Separator {
        &self.separator
    }

    pub fn checkpoints(&self) -> &[Checkpoint] {
        &self.checkpoints
    }

    /// Whitens and separates one block; records a state checkpoint every
    /// `checkpoint_every_blocks`. Timing wraps only the compute stages.
    pub fn process_block(&mut self, block: &MultichannelBlock) -> Result<BlockOutput> {
        let bi = self.blocks_seen;
        if block.n_ch() != self.n_ch {
            return Err(CorssError::StreamCorrupt(format!(
                "block {bi} has {} channels, stream started with {}",
                block.n_ch(),
                self.n_ch
            )));
        }
        let start = Instant::now();
        let whitened = self
            .whitener
            .whiten_block(block)
            .map_err(|e| annotate_block(e, bi))?;
        let y_block = match self.config.algorithm {
            Algorithm::Corss => self
                .separator
                .corss_block_update(&whitened)
                .map_err(|e| annotate_block(e, bi))?,
            Algorithm::Orica => {
                let mut y = DMatrix::zeros(self.n_ch, whitened.len());
                for l in 0..whitened.len() {
                    let v = whitened.data.column(l).into_owned();
                    match self.separator.orica_update(&v) {
                        Ok(yv) => y.set_column(l, &yv),
                        // singular denominator: sample skipped, W unchanged,
                        // output still well-defined as W v
                        Err(CorssError::SingularUpdate(_)) => {
                            y.set_column(l, &(self.separator.unmixing() * &v));
                        }
                        Err(e) => return Err(annotate_block(e, bi)),
                    }
                }
                MultichannelBlock {
                    data: y,
                    start_sample: whitened.start_sample,
                    sample_rate: whitened.sample_rate,
                }
            }
        };
        let elapsed_s = start.elapsed().as_secs_f64();
        self.blocks_seen += 1;
        if self.blocks_seen % self.config.checkpoint_every_blocks == 0 {
            self.checkpoint();
        }
        Ok(BlockOutput {
            block_index: bi,
            sources: y_block,
            whitened,
            elapsed_s,
            skipped_samples: self.separator.skipped_samples(),
            w_row_norms: self.separator.row_norms(),
        })
    }

    /// Records a checkpoint of the current state matrices (deduplicated).
    pub fn checkpoint(&mut self) {
        let count = self.separator.sample_count();
        if self.checkpoints.last().is_some_and(|c| c.sample_count == count) {
            return;
        }
        self.checkpoints.push(Checkpoint {
            sample_count: count,
            whitening: self.whitener.matrix().clone(),
            unmixing: self.separator.unmixing().clone(),
        });
    }
}

/// Runs the full pipeline over an ordered sequence of blocks.
///
/// Whitening is per-sample; separation is per-sample (orica) or per-block
/// (corss). Identification runs once over the accumulated post-burn-in
/// sources at the end.
pub fn run_stream(config: &PipelineConfig, input: &[MultichannelBlock]) -> Result<RunResult> {
    config.validate()?;
    let n_ch = match input.first() {
        Some(b) => b.n_ch(),
        None => 0,
    };
    if !input.is_empty() && n_ch < 2 {
        return Err(CorssError::InvalidChannelCount(n_ch));
    }
    let sample_rate = input.first().map_or(0.0, |b| b.sample_rate);
    let mut pipeline = Pipeline::new(*config, n_ch.max(2))?;
    if input.is_empty() {
        return Ok(RunResult {
            outputs: Vec::new(),
            checkpoints: Vec::new(),
            sources: DMatrix::zeros(0, 0),
            whitened: DMatrix::zeros(0, 0),
            sample_rate,
            task_outputs: TaskOutputs {
                spike_trains: Vec::new(),
                emgdi_source: None,
                envelope: None,
                triggers: None,
            },
            whitener: pipeline.whitener,
            separator: pipeline.separator,
        });
    }

    let total_samples: usize = input.iter().map(|b| b.len()).sum();
    let mut sources = DMatrix::zeros(n_ch, total_samples);
    let mut whitened = DMatrix::zeros(n_ch, total_samples);
    let mut outputs = Vec::with_capacity(input.len());
    let mut col = 0usize;

    for block in input {
        let out = pipeline.process_block(block)?;
        sources
            .view_mut((0, col), (n_ch, out.sources.len()))
            .copy_from(&out.sources.data);
        whitened
            .view_mut((0, col), (n_ch, out.whitened.len()))
            .copy_from(&out.whitened.data);
        col += out.sources.len();
        outputs.push(out);
    }
    pipeline.checkpoint();

    // Identify on the converged unmixing applied to the whole whitened
    // history; streamed rows shuffle under ICA permutation drift, so no fixed
    // row tracks one source across a long run.
    let retro = pipeline.separator.unmixing() * &whitened;
    let task_outputs = identify_outputs(config.task, &retro, sample_rate)?;
    Ok(RunResult {
        outputs,
        checkpoints: pipeline.checkpoints,
        sources,
        whitened,
        sample_rate,
        task_outputs,
        whitener: pipeline.whitener,
        separator: pipeline.separator,
    })
}

fn annotate_block(e: CorssError, block_index: usize) -> CorssError {
    match e {
        CorssError::Divergence { limit, sample } => CorssError::StreamCorrupt(format!(
            "divergence (limit {limit:.0e}) at sample {sample} in block {block_index}"
        )),
        other => other,
    }
}

/// Splits a whole recording into pipeline blocks and runs it.
pub fn run_recording(config: &PipelineConfig, recording: &MultichannelBlock) -> Result<RunResult> {
    let blocks = MultichannelBlock::split(recording, config.block_size);
    run_stream(config, &blocks)
}

/// Identification over accumulated sources, excluding the burn-in transient.
pub fn identify_outputs(
    task: Task,
    sources: &DMatrix<f64>,
    sample_rate: f64,
) -> Result<TaskOutputs> {
    let n_ch = sources.nrows();
    let burn = burn_in_samples(n_ch).min(sources.ncols());
    let post = sources.columns(burn, sources.ncols() - burn).into_owned();
    match task {
        Task::SemgDecomposition => {
            let mut trains = Vec::new();
            if post.ncols() > 2 {
                let selected = identify::select_pulse_sources(
                    &post,
                    identify::DEFAULT_MIN_KURTOSIS,
                    identify::DEFAULT_MIN_SPIKES,
                    sample_rate,
                )?;
                for r in selected {
                    let row: Vec<f64> = post.row(r).iter().copied().collect();
                    let mut train = identify::detect_spikes(
                        &row,
                        identify::DEFAULT_K_SIGMA,
                        identify::DEFAULT_REFRACTORY_MS,
                        sample_rate,
                    )?;
                    train.source_id = r;
                    // re-reference to absolute stream time
                    for s in &mut train.spike_samples {
                        *s += burn as u64;
                    }
                    trains.push(train);
                }
            }
            Ok(TaskOutputs {
                spike_trains: trains,
                emgdi_source: None,
                envelope: None,
                triggers: None,
            })
        }
        Task::EmgdiMonitoring => {
            if post.ncols() < 2 {
                return Ok(TaskOutputs {
                    spike_trains: Vec::new(),
                    emgdi_source: None,
                    envelope: None,
                    triggers: None,
                });
            }
            let r = identify::select_emgdi_source(&post, sample_rate)?;
            let row: Vec<f64> = post.row(r).iter().copied().collect();
            let env = identify::compute_envelope(
                &row,
                identify::DEFAULT_ENVELOPE_WINDOW_MS,
                identify::DEFAULT_ENVELOPE_HOP_MS,
                sample_rate,
            )?;
            let triggers = identify::detect_triggers(&env, 0.3, 1000.0)?;
            Ok(TaskOutputs {
                spike_trains: Vec::new(),
                emgdi_source: Some(r),
                envelope: Some(env),
                triggers: Some(triggers),
            })
        }
    }
}

/// One point of a convergence trace.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct TracePoint {
    pub sample_count: u64,
    pub value: f64,
}

/// Kind of metric a trace carries.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TraceMetric {
    Amari,
    EnvelopeCorr,
    EnvelopeRmse,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ConvergenceTrace {
    pub metric: TraceMetric,
    pub points: Vec<TracePoint>,
}

/// Evaluates a convergence metric at each stored checkpoint.
///
/// For a square ground-truth mixing matrix the metric is the Amari index of
/// `W * M * A` at the checkpoint. For the monitoring task it is the envelope
/// CORR (and RMSE) of the accumulated post-burn-in sources up to each
/// checkpoint against the gating curve.
pub fn convergence_trace(result: &RunResult, truth: &GroundTruth) -> Result<Vec<ConvergenceTrace>> {
    if result.checkpoints.is_empty() {
        return Err(CorssError::UnavailableMetric("no checkpoints".into()));
    }
    let n_ch = result.sources.nrows();
    if !truth.gating_curve.is_empty() {
        let burn = burn_in_samples(n_ch) as u64;
        let mut corr = Vec::new();
        let mut rmse = Vec::new();
        for ck in &result.checkpoints {
            if ck.sample_count <= burn + 1000 {
                continue;
            }
            let upto = ck.sample_count as usize;
            let seg = (&ck.unmixing * result.whitened.columns(0, upto)).into_owned();
            match evaluate_emgdi_segment(&seg, truth, result.sample_rate) {
                Ok(ev) => {
                    corr.push(TracePoint {
                        sample_count: ck.sample_count,
                        value: ev.corr,
                    });
                    rmse.push(TracePoint {
                        sample_count: ck.sample_count,
                        value: ev.rmse_percent,
                    });
                }
                Err(CorssError::UndefinedCorrelation) => continue,
                Err(e) => return Err(e),
            }
        }
        if corr.is_empty() {
            return Err(CorssError::UnavailableMetric(
                "no checkpoint beyond burn-in".into(),
            ));
        }
        return Ok(vec![
            ConvergenceTrace {
                metric: TraceMetric::EnvelopeCorr,
                points: corr,
            },
            ConvergenceTrace {
                metric: TraceMetric::EnvelopeRmse,
                points: rmse,
            },
        ]);
    }
    if truth.mixing.nrows() == truth.mixing.ncols() && truth.mixing.nrows() == n_ch {
        let points = result
            .checkpoints
            .iter()
            .map(|ck| {
                let g = &ck.unmixing * &ck.whitening * &truth.mixing;
                amari_index(&g).map(|value| TracePoint {
                    sample_count: ck.sample_count,
                    value,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        return Ok(vec![ConvergenceTrace {
            metric: TraceMetric::Amari,
            points,
        }]);
    }
    Err(CorssError::UnavailableMetric(
        "ground truth supports neither Amari (non-square mixing) nor envelope metrics".into(),
    ))
}

/// Envelope-level evaluation of a source segment against the gating curve.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct EmgdiEvaluation {
    pub source_row: usize,
    pub corr: f64,
    pub rmse_percent: f64,
}

/// Picks the respiratory source in `sources` (post-burn-in), computes its
/// envelope, and scores it against the gating curve. The estimate's arbitrary
/// ICA scale is fixed by a least-squares gain fit to the reference before the
/// RMSE normalization.
pub fn evaluate_emgdi_segment(
    sources: &DMatrix<f64>,
    truth: &GroundTruth,
    sample_rate: f64,
) -> Result<EmgdiEvaluation> {
    let n_ch = sources.nrows();
    let burn = burn_in_samples(n_ch);
    if sources.ncols() <= burn + 1 {
        return Err(CorssError::EmptyInput(
            "segment shorter than the burn-in".into(),
        ));
    }
    let post = sources
        .columns(burn, sources.ncols() - burn)
        .into_owned();
    let r = identify::select_emgdi_source(&post, sample_rate)?;
    let row: Vec<f64> = post.row(r).iter().copied().collect();
    let env = identify::compute_envelope(
        &row,
        identify::DEFAULT_ENVELOPE_WINDOW_MS,
        identify::DEFAULT_ENVELOPE_HOP_MS,
        sample_rate,
    )?;
    // reference: gating curve averaged over the same envelope windows
    let hop = env.hop_samples();
    let win = ((env.window_ms * sample_rate / 1000.0).round() as usize).max(1);
    let gate = &truth.gating_curve;
    let mut ref_vals = Vec::with_capacity(env.values.len());
    for f in 0..env.values.len() {
        let lo = burn + f * hop;
        let hi = (lo + win).min(gate.len());
        if lo >= gate.len() {
            ref_vals.push(0.0);
            continue;
        }
        ref_vals.push(gate[lo..hi].iter().sum::<f64>() / (hi - lo) as f64);
    }
    let corr = pearson_corr(&env.values, &ref_vals)?.abs();
    // The source scale is arbitrary and the estimate's envelope carries a
    // noise floor the reference lacks, so fit gain + offset by least squares
    // (clamped at zero) before the shared max(ref) normalization.
    let cnt = env.values.len() as f64;
    let sx: f64 = env.values.iter().sum();
    let sy: f64 = ref_vals.iter().sum();
    let sxx: f64 = env.values.iter().map(|&v| v * v).sum();
    let sxy: f64 = env.values.iter().zip(&ref_vals).map(|(&e, &r)| e * r).sum();
    let det = cnt * sxx - sx * sx;
    let (gain, offset) = if det.abs() > 0.0 {
        let a = (cnt * sxy - sx * sy) / det;
        ((a), (sy - a * sx) / cnt)
    } else {
        (0.0, 0.0)
    };
    let est = Envelope {
        values: env
            .values
            .iter()
            .map(|&v| (gain * v + offset).max(0.0))
            .collect(),
        ..env.clone()
    };
    let reference = Envelope {
        values: ref_vals,
        ..env
    };
    let rmse = rmse_percent(&est, &reference)?;
    Ok(EmgdiEvaluation {
        source_row: r,
        corr,
        rmse_percent: rmse,
    })
}
