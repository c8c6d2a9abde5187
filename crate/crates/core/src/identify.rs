//! Identification stage: turns separated source series into task-level
//! outputs — spike trains for the decomposition task, envelopes and breathing
//! triggers for the monitoring task.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{CorssError, Result};

/// Default threshold multiplier for spike detection on the squared signal.
/// The squared signal's MAD is tiny relative to genuine pulse peaks, so the
/// multiplier is large; small values admit ordinary noise maxima.
pub const DEFAULT_K_SIGMA: f64 = 150.0;
/// Default motor-unit refractory period.
pub const DEFAULT_REFRACTORY_MS: f64 = 20.0;
/// Default excess-kurtosis gate for pulse-source selection.
pub const DEFAULT_MIN_KURTOSIS: f64 = 5.0;
/// Default minimum spike count for pulse-source selection.
pub const DEFAULT_MIN_SPIKES: usize = 10;
/// Default envelope RMS window / hop.
pub const DEFAULT_ENVELOPE_WINDOW_MS: f64 = 250.0;
pub const DEFAULT_ENVELOPE_HOP_MS: f64 = 50.0;
/// Duplicate-source collapse threshold (pairwise spike-train MR).
pub const DUPLICATE_MR: f64 = 0.9;
/// Default spike-matching tolerance used for duplicate collapse.
pub const DEFAULT_SPIKE_TOLERANCE_MS: f64 = 0.5;

/// A detected pulse train for one source.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpikeTrain {
    pub source_id: usize,
    /// Strictly increasing sample indices.
    pub spike_samples: Vec<u64>,
    pub sample_rate: f64,
}

impl SpikeTrain {
    pub fn new(source_id: usize, spike_samples: Vec<u64>, sample_rate: f64) -> Result<Self> {
        if sample_rate <= 0.0 || !sample_rate.is_finite() {
            return Err(CorssError::InvalidSpec(format!(
                "sample_rate = {sample_rate} must be positive"
            )));
        }
        if spike_samples.windows(2).any(|w| w[0] >= w[1]) {
            return Err(CorssError::InvalidSpec(
                "spike samples must be strictly increasing".into(),
            ));
        }
        Ok(SpikeTrain {
            source_id,
            spike_samples,
            sample_rate,
        })
    }

    pub fn len(&self) -> usize {
        self.spike_samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.spike_samples.is_empty()
    }

    /// Spikes at or after `start`, re-referenced to the same time base.
    pub fn after(&self, start: u64) -> SpikeTrain {
        SpikeTrain {
            source_id: self.source_id,
            spike_samples: self
                .spike_samples
                .iter()
                .copied()
                .filter(|&s| s >= start)
                .collect(),
            sample_rate: self.sample_rate,
        }
    }
}

/// Sliding-window RMS magnitude series.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Envelope {
    pub values: Vec<f64>,
    pub window_ms: f64,
    pub hop_ms: f64,
    pub sample_rate: f64,
}

impl Envelope {
    pub fn hop_samples(&self) -> usize {
        ((self.hop_ms * self.sample_rate / 1000.0).round() as usize).max(1)
    }
}

/// Breathing-onset events.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TriggerTrain {
    /// Strictly increasing sample indices of detected onsets.
    pub onset_samples: Vec<u64>,
}

fn median(sorted: &[f64]) -> f64 {
    let n = sorted.len();
    if n % 2 == 1 {
        sorted[n / 2]
    } else {
        0.5 * (sorted[n / 2 - 1] + sorted[n / 2])
    }
}

/// Detects pulses as local maxima of the squared signal exceeding
/// `median + k_sigma * MAD`, thinned so no two spikes are closer than the
/// refractory period (the larger peak wins each conflict).
pub fn detect_spikes(
    source: &[f64],
    k_sigma: f64,
    refractory_ms: f64,
    sample_rate: f64,
) -> Result<SpikeTrain> {
    if !(k_sigma > 0.0) {
        return Err(CorssError::InvalidSpec(format!(
            "k_sigma = {k_sigma} must be positive"
        )));
    }
    if !(refractory_ms > 0.0) {
        return Err(CorssError::InvalidSpec(format!(
            "refractory_ms = {refractory_ms} must be positive"
        )));
    }
    if source.iter().any(|v| !v.is_finite()) {
        return Err(CorssError::NonFiniteSample);
    }
    let n = source.len();
    if n < 3 {
        return SpikeTrain::new(0, Vec::new(), sample_rate);
    }
    let z: Vec<f64> = source.iter().map(|&v| v * v).collect();
    let mut sorted = z.clone();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let med = median(&sorted);
    let mut dev: Vec<f64> = z.iter().map(|&v| (v - med).abs()).collect();
    dev.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let mad = median(&dev);
    let thr = med + k_sigma * mad;

    let mut cand: Vec<usize> = (1..n - 1)
        .filter(|&i| z[i] > thr && z[i] > z[i - 1] && z[i] >= z[i + 1])
        .collect();
    // descending amplitude; ties broken by index so the result is deterministic
    cand.sort_by(|&a, &b| z[b].partial_cmp(&z[a]).unwrap().then(a.cmp(&b)));
    let refr = ((refractory_ms * sample_rate / 1000.0).round() as i64).max(1);
    let mut accepted: Vec<i64> = Vec::new();
    for i in cand {
        let i = i as i64;
        if accepted.iter().all(|&j| (i - j).abs() >= refr) {
            accepted.push(i);
        }
    }
    accepted.sort_unstable();
    SpikeTrain::new(0, accepted.into_iter().map(|i| i as u64).collect(), sample_rate)
}

/// Sample excess kurtosis (zero for a Gaussian).
pub fn excess_kurtosis(x: &[f64]) -> f64 {
    let n = x.len() as f64;
    if n < 2.0 {
        return 0.0;
    }
    let mean = x.iter().sum::<f64>() / n;
    let m2 = x.iter().map(|&v| (v - mean).powi(2)).sum::<f64>() / n;
    if m2 <= 0.0 {
        return 0.0;
    }
    let m4 = x.iter().map(|&v| (v - mean).powi(4)).sum::<f64>() / n;
    m4 / (m2 * m2) - 3.0
}

/// Selects source rows that look like pulse trains: excess kurtosis at least
/// `min_kurtosis` and at least `min_spikes` detected spikes. Near-duplicate
/// sources (pairwise MR >= 0.9 at the default tolerance) collapse to the one
/// with higher kurtosis.
pub fn select_pulse_sources(
    y_sources: &DMatrix<f64>,
    min_kurtosis: f64,
    min_spikes: usize,
    sample_rate: f64,
) -> Result<Vec<usize>> {
    let mut picked: Vec<(usize, f64, SpikeTrain)> = Vec::new();
    for r in 0..y_sources.nrows() {
        let row: Vec<f64> = y_sources.row(r).iter().copied().collect();
        let k = excess_kurtosis(&row);
        if k < min_kurtosis {
            continue;
        }
        let train = detect_spikes(&row, DEFAULT_K_SIGMA, DEFAULT_REFRACTORY_MS, sample_rate)?;
        if train.len() < min_spikes {
            continue;
        }
        picked.push((r, k, train));
    }
    // duplicate collapse: keep the higher-kurtosis member of each match pair
    let mut keep = vec![true; picked.len()];
    for i in 0..picked.len() {
        for j in i + 1..picked.len() {
            if !keep[i] || !keep[j] {
                continue;
            }
            let m = crate::metrics::matching_rate(
                &picked[i].2,
                &picked[j].2,
                DEFAULT_SPIKE_TOLERANCE_MS,
            )?;
            if m.mr >= DUPLICATE_MR {
                if picked[i].1 >= picked[j].1 {
                    keep[j] = false;
                } else {
                    keep[i] = false;
                }
            }
        }
    }
    Ok(picked
        .into_iter()
        .zip(keep)
        .filter_map(|((r, _, _), k)| k.then_some(r))
        .collect())
}

/// Sliding-window RMS envelope with the given window and hop.
pub fn compute_envelope(
    source: &[f64],
    window_ms: f64,
    hop_ms: f64,
    sample_rate: f64,
) -> Result<Envelope> {
    if !(hop_ms > 0.0) || window_ms < hop_ms {
        return Err(CorssError::InvalidSpec(format!(
            "need window_ms >= hop_ms > 0, got window {window_ms} hop {hop_ms}"
        )));
    }
    if source.is_empty() {
        return Err(CorssError::EmptyInput("empty source series".into()));
    }
    let win = ((window_ms * sample_rate / 1000.0).round() as usize).max(1);
    let hop = ((hop_ms * sample_rate / 1000.0).round() as usize).max(1);
    let n = source.len();
    let frames = n.div_ceil(hop);
    let mut values = Vec::with_capacity(frames);
    for f in 0..frames {
        let lo = f * hop;
        let hi = (lo + win).min(n);
        let seg = &source[lo..hi];
        let rms = (seg.iter().map(|&v| v * v).sum::<f64>() / seg.len() as f64).sqrt();
        values.push(rms);
    }
    Ok(Envelope {
        values,
        window_ms,
        hop_ms,
        sample_rate,
    })
}

fn percentile_95(values: &[f64]) -> f64 {
    let mut sorted: Vec<f64> = values.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let pos = 0.95 * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = pos - lo as f64;
    sorted[lo] * (1.0 - frac) + sorted[hi] * frac
}

/// Breathing-onset detection: upward crossings of
/// `onset_fraction * P95(envelope)`, thinned by the minimum interval.
pub fn detect_triggers(
    env: &Envelope,
    onset_fraction: f64,
    min_interval_ms: f64,
) -> Result<TriggerTrain> {
    if !(onset_fraction > 0.0 && onset_fraction < 1.0) {
        return Err(CorssError::InvalidSpec(format!(
            "onset_fraction = {onset_fraction} must lie in (0, 1)"
        )));
    }
    if env.values.is_empty() {
        return Err(CorssError::EmptyInput("empty envelope".into()));
    }
    let thr = onset_fraction * percentile_95(&env.values);
    if thr <= 0.0 {
        return Ok(TriggerTrain {
            onset_samples: Vec::new(),
        });
    }
    let hop = env.hop_samples() as u64;
    let min_interval = ((min_interval_ms * env.sample_rate / 1000.0).round() as u64).max(1);
    let mut onsets = Vec::new();
    let mut last: Option<u64> = None;
    for i in 1..env.values.len() {
        if env.values[i - 1] < thr && env.values[i] >= thr {
            let t = i as u64 * hop;
            if last.is_none_or(|p| t - p >= min_interval) {
                onsets.push(t);
                last = Some(t);
            }
        }
    }
    Ok(TriggerTrain {
        onset_samples: onsets,
    })
}

/// Picks the source row carrying the respiratory signal: the one whose
/// smoothed RMS envelope has the largest coefficient of variation. Slow cyclic
/// gating maximizes this; both near-constant noise rows and sparse ECG rows
/// (whose spikes are flattened by the 1 s smoother) score lower.
pub fn select_emgdi_source(y_sources: &DMatrix<f64>, sample_rate: f64) -> Result<usize> {
    if y_sources.ncols() == 0 || y_sources.nrows() == 0 {
        return Err(CorssError::EmptyInput("empty source matrix".into()));
    }
    let mut best: Option<(f64, usize)> = None;
    for r in 0..y_sources.nrows() {
        let row: Vec<f64> = y_sources.row(r).iter().copied().collect();
        let env = compute_envelope(
            &row,
            DEFAULT_ENVELOPE_WINDOW_MS,
            DEFAULT_ENVELOPE_HOP_MS,
            sample_rate,
        )?;
        // moving-average smoothing over ~1 s of hops
        let k = ((1000.0 / env.hop_ms).round() as usize).max(1);
        let v = &env.values;
        let mut smooth = Vec::with_capacity(v.len());
        for i in 0..v.len() {
            let lo = i.saturating_sub(k / 2);
            let hi = (i + k.div_ceil(2)).min(v.len());
            smooth.push(v[lo..hi].iter().sum::<f64>() / (hi - lo) as f64);
        }
        let mean = smooth.iter().sum::<f64>() / smooth.len() as f64;
        let var = smooth.iter().map(|&x| (x - mean).powi(2)).sum::<f64>() / smooth.len() as f64;
        let cv = var.sqrt() / mean.max(1e-12);
        if best.is_none_or(|(b, _)| cv > b) {
            best = Some((cv, r));
        }
    }
    Ok(best.unwrap().1)
}
