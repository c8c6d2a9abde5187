//! Online unmixing: per-sample recursive updates (ORICA-style) and blockwise
//! constrained updates (CORSS-style) on whitened data.
//!
//! Both algorithms share the same separating direction: the update subtracts
//! `score(y) * y^T` terms from the identity, where `score` is the nonlinearity's
//! score function (`tanh` for the baseline, the negated constrained sigmoid for
//! the constrained mode). The printed sigmoid itself is exposed via
//! [`Nonlinearity::eval`]; see the module tests for the algebraic identity
//! between the two at `a0 = 1`.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::block::MultichannelBlock;
use crate::error::{CorssError, Result};
use crate::schedule::ForgettingSchedule;
use crate::whiten::DIVERGENCE_LIMIT;

/// Denominator magnitude below which an update sample is skipped.
pub const SINGULAR_EPS: f64 = 1e-12;

/// Nonlinearity applied to estimated sources inside the update rules.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Nonlinearity {
    /// Plain `tanh(y)`, the standard super-Gaussian choice.
    BaselineTanh,
    /// Constrained sigmoid `f(y) = 1 - 2 / (1 + a0 * exp(-a1 * y))`.
    Constrained { a0: f64, a1: f64 },
}

impl Nonlinearity {
    /// Default constrained configuration: `a0 = 1`, `a1 = 4` (sharpened toward
    /// the steep CDF of sparse pulse trains).
    pub const DEFAULT_A0: f64 = 1.0;
    pub const DEFAULT_A1: f64 = 4.0;

    pub fn constrained(a0: f64, a1: f64) -> Result<Self> {
        let nl = Nonlinearity::Constrained { a0, a1 };
        nl.validate()?;
        Ok(nl)
    }

    pub fn default_constrained() -> Self {
        Nonlinearity::Constrained {
            a0: Self::DEFAULT_A0,
            a1: Self::DEFAULT_A1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if let Nonlinearity::Constrained { a0, a1 } = *self {
            if !(a0 > 0.0 && a0.is_finite()) {
                return Err(CorssError::InvalidNonlinearity(format!(
                    "a0 = {a0} must be positive and finite"
                )));
            }
            if !(a1 > 0.0 && a1.is_finite()) {
                return Err(CorssError::InvalidNonlinearity(format!(
                    "a1 = {a1} must be positive and finite"
                )));
            }
        }
        Ok(())
    }

    /// The nonlinearity as written: `tanh(y)` or the constrained sigmoid.
    ///
    /// The constrained form is computed as `tanh((ln a0 - a1*y) / 2)`, which is
    /// algebraically identical to `1 - 2/(1 + a0 e^{-a1 y})` but saturates
    /// instead of overflowing for large `|y|`.
    pub fn eval_scalar(&self, y: f64) -> f64 {
        match *self {
            Nonlinearity::BaselineTanh => y.tanh(),
            Nonlinearity::Constrained { a0, a1 } => ((a0.ln() - a1 * y) / 2.0).tanh(),
        }
    }

    /// Elementwise [`eval_scalar`](Self::eval_scalar).
    pub fn eval(&self, y: &DVector<f64>) -> DVector<f64> {
        y.map(|v| self.eval_scalar(v))
    }

    /// Score function used by the update rules: the direction that shrinks
    /// super-Gaussian dependence. For the baseline this is `tanh(y)`; for the
    /// constrained sigmoid it is `-f(y) = tanh((a1*y - ln a0)/2)`, since the
    /// sigmoid decreases in `y`.
    pub fn score_scalar(&self, y: f64) -> f64 {
        match *self {
            Nonlinearity::BaselineTanh => y.tanh(),
            Nonlinearity::Constrained { a0, a1 } => ((a1 * y - a0.ln()) / 2.0).tanh(),
        }
    }

    pub fn score(&self, y: &DVector<f64>) -> DVector<f64> {
        y.map(|v| self.score_scalar(v))
    }
}

/// Fits `(a0, a1)` so that the rising sigmoid `1 / (1 + a0 e^{-a1 c})` tracks
/// the empirical CDF of a template source, by least squares in logit space.
/// Interior CDF points (strictly between 0 and 1) give
/// `logit(F) = a1*c - ln a0`, a linear model in `c`.
pub fn calibrate_nonlinearity(template: &[f64]) -> Result<Nonlinearity> {
    if template.len() < 3 {
        return Err(CorssError::EmptyInput(
            "need at least 3 template samples to calibrate".into(),
        ));
    }
    if template.iter().any(|v| !v.is_finite()) {
        return Err(CorssError::NonFiniteSample);
    }
    let mut sorted: Vec<f64> = template.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = sorted.len() as f64;
    // (c_i, logit(F_i)) pairs; plotting positions keep F strictly interior
    let mut sx = 0.0;
    let mut sy = 0.0;
    let mut sxx = 0.0;
    let mut sxy = 0.0;
    let mut cnt = 0.0;
    for (i, &c) in sorted.iter().enumerate() {
        let f = (i as f64 + 0.5) / n;
        let logit = (f / (1.0 - f)).ln();
        sx += c;
        sy += logit;
        sxx += c * c;
        sxy += c * logit;
        cnt += 1.0;
    }
    let det = cnt * sxx - sx * sx;
    if det.abs() < 1e-12 {
        return Err(CorssError::InvalidNonlinearity(
            "template is constant; cannot calibrate".into(),
        ));
    }
    let a1 = (cnt * sxy - sx * sy) / det;
    let intercept = (sy - a1 * sx) / cnt;
    let a0 = (-intercept).exp();
    Nonlinearity::constrained(a0, a1)
}

/// State of an online unmixing recursion. The same state type serves both the
/// per-sample and the blockwise update; they must not be interleaved on one
/// state (the schedule position is shared).
#[derive(Debug, Clone)]
pub struct Separator {
    w: DMatrix<f64>,
    sample_count: u64,
    schedule: ForgettingSchedule,
    nl: Nonlinearity,
    renormalize: bool,
    skipped: u64,
}

impl Separator {
    pub fn new(n_ch: usize, schedule: ForgettingSchedule, nl: Nonlinearity) -> Result<Self> {
        if n_ch < 2 {
            return Err(CorssError::InvalidChannelCount(n_ch));
        }
        schedule.validate()?;
        nl.validate()?;
        Ok(Separator {
            w: DMatrix::identity(n_ch, n_ch),
            sample_count: 0,
            schedule,
            nl,
            renormalize: true,
            skipped: 0,
        })
    }

    /// Row renormalization after each update (default on). The update scales W
    /// monotonically; unit-row-norm keeps it bounded without changing source
    /// directions.
    pub fn with_renormalization(mut self, enabled: bool) -> Self {
        self.renormalize = enabled;
        self
    }

    pub fn n_ch(&self) -> usize {
        self.w.nrows()
    }

    pub fn sample_count(&self) -> u64 {
        self.sample_count
    }

    pub fn skipped_samples(&self) -> u64 {
        self.skipped
    }

    pub fn unmixing(&self) -> &DMatrix<f64> {
        &self.w
    }

    pub fn row_norms(&self) -> Vec<f64> {
        self.w.row_iter().map(|r| r.norm()).collect()
    }

    fn renorm(&mut self) {
        if !self.renormalize {
            return;
        }
        for mut row in self.w.row_iter_mut() {
            let n = row.norm();
            if n > 0.0 {
                row /= n;
            }
        }
    }

    fn check_divergence(&self) -> Result<()> {
        if self
            .w
            .iter()
            .any(|e| !e.is_finite() || e.abs() > DIVERGENCE_LIMIT)
        {
            return Err(CorssError::Divergence {
                limit: DIVERGENCE_LIMIT,
                sample: self.sample_count,
            });
        }
        Ok(())
    }

    /// Per-sample recursive update. Returns `y = W_n v` from the pre-update
    /// `W_n`, then applies
    /// `W <- W + lam/(1-lam) * [I - s(y) y^T / (1 + lam (s(y)^T y - 1))] * W`
    /// with `s` the score function. A zero forgetting factor is an exact no-op
    /// on `W`.
    pub fn orica_update(&mut self, v: &DVector<f64>) -> Result<DVector<f64>> {
        let n = self.n_ch();
        if v.len() != n {
            return Err(CorssError::ShapeError(format!(
                "sample length {} does not match channel count {}",
                v.len(),
                n
            )));
        }
        if v.iter().any(|e| !e.is_finite()) {
            return Err(CorssError::NonFiniteSample);
        }
        let lam = self.schedule.value(self.sample_count + 1);
        let y = &self.w * v;
        self.sample_count += 1;
        if lam > 0.0 {
            let s = self.nl.score(&y);
            let denom = 1.0 + lam * (s.dot(&y) - 1.0);
            if denom.abs() < SINGULAR_EPS {
                self.skipped += 1;
                return Err(CorssError::SingularUpdate(self.sample_count));
            }
            let coef = lam / (1.0 - lam);
            let st_y = &s * y.transpose(); // n x n rank-one
            let update = (DMatrix::identity(n, n) - st_y / denom) * &self.w * coef;
            self.w += update;
            self.renorm();
            self.check_divergence()?;
        }
        Ok(y)
    }

    /// Blockwise update over `L` samples:
    /// `W_{n+L} = prod_l 1/(1-lam_l) * [I - sum_l s(y_l) y_l^T / (beta_l + s(y_l)^T y_l)] * W_n`
    /// with `beta_l = (1 - lam_l)/lam_l` and every `y_l = W_n v_l` taken from
    /// the block-initial `W_n`. Returns the `y` block.
    ///
    /// Samples with `lam_l = 0` contribute nothing (factor 1, term 0); samples
    /// whose denominator is within [`SINGULAR_EPS`] of zero are skipped and
    /// counted. A block in which every `lam_l > 0` sample was skipped leaves
    /// `W` unchanged and reports `degenerate-block`.
    pub fn corss_block_update(&mut self, v_block: &MultichannelBlock) -> Result<MultichannelBlock> {
        let n = self.n_ch();
        if v_block.n_ch() != n {
            return Err(CorssError::ShapeError(format!(
                "block has {} channels, separator has {}",
                v_block.n_ch(),
                n
            )));
        }
        if v_block.data.iter().any(|e| !e.is_finite()) {
            return Err(CorssError::NonFiniteSample);
        }
        let y_block = &self.w * &v_block.data;
        let len = v_block.len();

        let mut sum = DMatrix::<f64>::zeros(n, n);
        let mut scale = 1.0f64;
        let mut active = 0u64;
        let mut skipped_here = 0u64;
        for l in 0..len {
            let lam = self.schedule.value(self.sample_count + l as u64 + 1);
            if lam <= 0.0 {
                continue;
            }
            active += 1;
            scale /= 1.0 - lam;
            let y = y_block.column(l).into_owned();
            let s = self.nl.score(&y);
            let beta = (1.0 - lam) / lam;
            let denom = beta + s.dot(&y);
            if denom.abs() < SINGULAR_EPS {
                skipped_here += 1;
                continue;
            }
            sum += &s * y.transpose() / denom;
        }
        self.sample_count += len as u64;
        self.skipped += skipped_here;
        if active > 0 && skipped_here == active {
            return Err(CorssError::DegenerateBlock);
        }
        if active > 0 {
            self.w = (DMatrix::identity(n, n) - sum) * &self.w * scale;
            self.renorm();
            self.check_divergence()?;
        }
        Ok(MultichannelBlock {
            data: y_block,
            start_sample: v_block.start_sample,
            sample_rate: v_block.sample_rate,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    use crate::metrics::amari_index;
    use crate::oracle::{batch_infomax, batch_whitening_matrix};

    #[test]
    fn constrained_identity_with_tanh() {
        // f_{a0=1, a1=2}(y) = -tanh(y) on a dense grid
        let nl = Nonlinearity::constrained(1.0, 2.0).unwrap();
        for i in 0..10_000 {
            let y = -10.0 + 20.0 * (i as f64) / 9999.0;
            assert!(
                (nl.eval_scalar(y) + y.tanh()).abs() < 1e-12,
                "mismatch at y = {y}"
            );
        }
    }

    #[test]
    fn constrained_examples() {
        let nl = Nonlinearity::constrained(1.0, 2.0).unwrap();
        assert_abs_diff_eq!(nl.eval_scalar(0.0), 0.0, epsilon = 1e-15);
        assert_abs_diff_eq!(nl.eval_scalar(1.0), -(1.0f64.tanh()), epsilon = 1e-12);
        let nl2 = Nonlinearity::constrained(2.0, 1.0).unwrap();
        assert_abs_diff_eq!(nl2.eval_scalar(0.0), 1.0 / 3.0, epsilon = 1e-12);
    }

    #[test]
    fn odd_symmetry_only_at_a0_one() {
        let sym = Nonlinearity::constrained(1.0, 3.0).unwrap();
        for y in [0.1, 0.7, 2.5] {
            assert_abs_diff_eq!(sym.eval_scalar(-y), -sym.eval_scalar(y), epsilon = 1e-14);
        }
        let asym = Nonlinearity::constrained(2.0, 3.0).unwrap();
        assert!((asym.eval_scalar(-0.5) + asym.eval_scalar(0.5)).abs() > 1e-6);
    }

    #[test]
    fn invalid_parameters_rejected() {
        assert!(Nonlinearity::constrained(0.0, 1.0).is_err());
        assert!(Nonlinearity::constrained(-1.0, 1.0).is_err());
        assert!(Nonlinearity::constrained(1.0, 0.0).is_err());
        assert!(Nonlinearity::constrained(1.0, f64::NAN).is_err());
    }

    #[test]
    fn init_is_identity() {
        let s = Separator::new(
            8,
            ForgettingSchedule::default_power_decay(),
            Nonlinearity::constrained(1.0, 2.0).unwrap(),
        )
        .unwrap();
        assert_eq!(s.unmixing(), &DMatrix::identity(8, 8));
        assert_eq!(s.sample_count(), 0);
        assert!(Separator::new(
            1,
            ForgettingSchedule::default_power_decay(),
            Nonlinearity::BaselineTanh
        )
        .is_err());
    }

    #[test]
    fn orica_lambda_zero_is_exact_noop() {
        let mut s = Separator::new(
            3,
            ForgettingSchedule::constant(0.0).unwrap(),
            Nonlinearity::BaselineTanh,
        )
        .unwrap();
        let before = s.unmixing().clone();
        for i in 0..50 {
            let v = DVector::from_vec(vec![i as f64, 1.0, -2.0]);
            let y = s.orica_update(&v).unwrap();
            assert_eq!(y, v); // W stays I
        }
        assert_eq!(s.unmixing(), &before);
    }

    #[test]
    fn orica_zero_sample_scales_w() {
        // v = 0 => y = 0, s(0) = 0 (a0 = 1), update = lam/(1-lam) * W, i.e.
        // W scaled by 1/(1-lam) before renormalization.
        let lam = 0.25;
        let mut s = Separator::new(
            2,
            ForgettingSchedule::constant(lam).unwrap(),
            Nonlinearity::constrained(1.0, 4.0).unwrap(),
        )
        .unwrap()
        .with_renormalization(false);
        s.orica_update(&DVector::zeros(2)).unwrap();
        let expected = DMatrix::identity(2, 2) / (1.0 - lam);
        for (a, b) in s.unmixing().iter().zip(expected.iter()) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-14);
        }
    }

    #[test]
    fn corss_zero_block_scales_w() {
        let lam = 0.1;
        let mut s = Separator::new(
            2,
            ForgettingSchedule::constant(lam).unwrap(),
            Nonlinearity::constrained(1.0, 4.0).unwrap(),
        )
        .unwrap()
        .with_renormalization(false);
        let block = MultichannelBlock::new(DMatrix::zeros(2, 5), 0, 1000.0).unwrap();
        let y = s.corss_block_update(&block).unwrap();
        assert!(y.data.iter().all(|&e| e == 0.0));
        let expected = DMatrix::identity(2, 2) / (1.0 - lam).powi(5);
        for (a, b) in s.unmixing().iter().zip(expected.iter()) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-12);
        }
    }

    #[test]
    fn corss_block_is_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let data = DMatrix::from_fn(4, 100, |_, _| StandardNormal.sample(&mut rng));
        let block = MultichannelBlock::new(data, 0, 1000.0).unwrap();
        let run = || {
            let mut s = Separator::new(
                4,
                ForgettingSchedule::default_power_decay(),
                Nonlinearity::default_constrained(),
            )
            .unwrap();
            s.corss_block_update(&block).unwrap();
            s.unmixing().clone()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn corss_y_uses_block_initial_w() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let data = DMatrix::from_fn(3, 40, |_, _| StandardNormal.sample(&mut rng));
        let block = MultichannelBlock::new(data.clone(), 0, 1000.0).unwrap();
        let mut s = Separator::new(
            3,
            ForgettingSchedule::default_power_decay(),
            Nonlinearity::default_constrained(),
        )
        .unwrap();
        // warm the state so W != I
        s.corss_block_update(&block).unwrap();
        let w_before = s.unmixing().clone();
        let y = s.corss_block_update(&block).unwrap();
        assert_eq!(y.data, &w_before * &data);
    }

    fn laplacian(rng: &mut ChaCha8Rng) -> f64 {
        let u: f64 = rand::Rng::random_range(rng, -0.5..0.5);
        -u.signum() * (1.0 - 2.0 * u.abs()).ln()
    }

    fn whitened_mixture(
        n: usize,
        samples: usize,
        seed: u64,
    ) -> (DMatrix<f64>, DMatrix<f64>, DMatrix<f64>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let s = DMatrix::from_fn(n, samples, |_, _| laplacian(&mut rng));
        let a = DMatrix::from_fn(n, n, |_, _| StandardNormal.sample(&mut rng));
        let x = &a * &s;
        let m = batch_whitening_matrix(&x, n).unwrap();
        let v = &m * &x;
        (v, m, a)
    }

    #[test]
    fn orica_separates_and_improves_over_stream() {
        // 2-source Laplacian mixture, constant lambda: final Amari below 0.3,
        // below the 10% checkpoint, and within 2x of the batch oracle's result.
        let (v, m, a) = whitened_mixture(2, 50_000, 31);
        let mut s = Separator::new(
            2,
            ForgettingSchedule::constant(0.002).unwrap(),
            Nonlinearity::BaselineTanh,
        )
        .unwrap();
        let mut at_10 = 0.0;
        for l in 0..v.ncols() {
            s.orica_update(&v.column(l).into_owned()).unwrap();
            if l + 1 == v.ncols() / 10 {
                at_10 = amari_index(&(s.unmixing() * &m * &a)).unwrap();
            }
        }
        let end = amari_index(&(s.unmixing() * &m * &a)).unwrap();
        let w_batch = batch_infomax(&v, 30, 0).unwrap();
        let batch = amari_index(&(&w_batch * &m * &a)).unwrap();
        assert!(end < 0.3, "final amari {end}");
        assert!(end < at_10, "end {end} vs 10% {at_10}");
        assert!(end <= 2.0 * batch.max(0.05), "end {end} vs batch {batch}");
    }

    #[test]
    fn corss_separates_laplacian_mixture() {
        let (v, m, a) = whitened_mixture(3, 60_000, 7);
        let mut s = Separator::new(
            3,
            ForgettingSchedule::default_power_decay(),
            Nonlinearity::default_constrained(),
        )
        .unwrap();
        let rec = MultichannelBlock::new(v.clone(), 0, 1000.0).unwrap();
        for block in MultichannelBlock::split(&rec, 200) {
            s.corss_block_update(&block).unwrap();
        }
        let end = amari_index(&(s.unmixing() * &m * &a)).unwrap();
        assert!(end < 0.15, "final amari {end}");
    }

    #[test]
    fn calibration_recovers_sigmoid_parameters() {
        // Sample from the logistic CDF 1/(1 + a0 e^{-a1 c}) via inverse
        // transform and check the fit recovers (a0, a1).
        let (a0_true, a1_true) = (1.5, 3.0);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let template: Vec<f64> = (0..4000)
            .map(|_| {
                let u: f64 = rand::Rng::random_range(&mut rng, 1e-6..1.0);
                (a0_true * u / (1.0 - u)).ln() / a1_true
            })
            .collect();
        match calibrate_nonlinearity(&template).unwrap() {
            Nonlinearity::Constrained { a0, a1 } => {
                assert!((a0 - a0_true).abs() < 0.2, "a0 {a0}");
                assert!((a1 - a1_true).abs() < 0.2, "a1 {a1}");
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn calibration_rejects_degenerate_templates() {
        assert!(calibrate_nonlinearity(&[1.0, 2.0]).is_err());
        assert!(calibrate_nonlinearity(&[3.0; 100]).is_err());
        assert!(calibrate_nonlinearity(&[0.0, f64::NAN, 1.0]).is_err());
    }
}
