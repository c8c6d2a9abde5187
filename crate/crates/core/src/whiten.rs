//! Online recursive pre-whitening.
//!
//! Maintains a whitening matrix `M` with a rank-one recursion so that the
//! running output `v = M x` has approximately identity covariance. The output
//! of each step uses the pre-update `M`; the same `v` feeds the update term.

use nalgebra::{DMatrix, DVector};

use crate::block::MultichannelBlock;
use crate::error::{CorssError, Result};
use crate::schedule::ForgettingSchedule;

/// Magnitude above which the recursion is declared divergent.
pub const DIVERGENCE_LIMIT: f64 = 1e6;

/// State of the online whitening recursion.
#[derive(Debug, Clone)]
pub struct Whitener {
    m: DMatrix<f64>,
    mean: DVector<f64>,
    sample_count: u64,
    schedule: ForgettingSchedule,
    /// When false, the per-channel running mean is frozen at zero and raw
    /// samples are whitened as-is (useful for already-centered test streams).
    remove_mean: bool,
}

impl Whitener {
    pub fn new(n_ch: usize, schedule: ForgettingSchedule) -> Result<Self> {
        if n_ch < 2 {
            return Err(CorssError::InvalidChannelCount(n_ch));
        }
        schedule.validate()?;
        Ok(Whitener {
            m: DMatrix::identity(n_ch, n_ch),
            mean: DVector::zeros(n_ch),
            sample_count: 0,
            schedule,
            remove_mean: true,
        })
    }

    pub fn with_mean_removal(mut self, enabled: bool) -> Self {
        self.remove_mean = enabled;
        self
    }

    pub fn n_ch(&self) -> usize {
        self.m.nrows()
    }

    pub fn sample_count(&self) -> u64 {
        self.sample_count
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.m
    }

    pub fn running_mean(&self) -> &DVector<f64> {
        &self.mean
    }

    /// Whitens one sample and updates the recursion.
    ///
    /// Returns `v = M x_c` computed with the pre-update `M` (`x_c` is the
    /// sample minus the pre-update running mean), then applies
    /// `M <- M + lam/(1-lam) * [I - v v^T / (1 + lam (v^T v - 1))] * M`.
    /// A forgetting factor of exactly zero leaves `M` and the mean untouched.
    pub fn whiten_sample(&mut self, x: &DVector<f64>) -> Result<DVector<f64>> {
        let n = self.n_ch();
        if x.len() != n {
            return Err(CorssError::ShapeError(format!(
                "sample length {} does not match channel count {}",
                x.len(),
                n
            )));
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(CorssError::NonFiniteSample);
        }
        let lam = self.schedule.value(self.sample_count + 1);
        if lam >= 1.0 {
            return Err(CorssError::ScheduleOutOfRange(format!(
                "lambda = {lam} must be < 1"
            )));
        }

        let xc = if self.remove_mean { x - &self.mean } else { x.clone() };
        let v = &self.m * &xc;

        if lam > 0.0 {
            let coef = lam / (1.0 - lam);
            let vtv = v.dot(&v);
            // Denominator 1 + lam (v^T v - 1) >= 1 - lam > 0.
            let denom = 1.0 + lam * (vtv - 1.0);
            let vt_m = v.transpose() * &self.m; // 1 x n
            let rank_one = &v * vt_m; // n x n
            self.m = &self.m * (1.0 + coef) - rank_one * (coef / denom);
            if self.remove_mean {
                self.mean += lam * (x - &self.mean);
            }
        }
        self.sample_count += 1;

        if self.m.iter().any(|e| !e.is_finite() || e.abs() > DIVERGENCE_LIMIT) {
            return Err(CorssError::Divergence {
                limit: DIVERGENCE_LIMIT,
                sample: self.sample_count,
            });
        }
        Ok(v)
    }

    /// Whitens each column of the block in temporal order.
    pub fn whiten_block(&mut self, block: &MultichannelBlock) -> Result<MultichannelBlock> {
        if block.n_ch() != self.n_ch() {
            return Err(CorssError::ShapeError(format!(
                "block has {} channels, whitener has {}",
                block.n_ch(),
                self.n_ch()
            )));
        }
        let mut out = DMatrix::zeros(block.n_ch(), block.len());
        for (l, col) in block.data.column_iter().enumerate() {
            let v = self.whiten_sample(&col.into_owned())?;
            out.set_column(l, &v);
        }
        Ok(MultichannelBlock {
            data: out,
            start_sample: block.start_sample,
            sample_rate: block.sample_rate,
        })
    }
}
