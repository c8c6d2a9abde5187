//! Evaluation metrics: spike-train matching rate, envelope RMSE and Pearson
//! correlation, the Amari separation index, and per-block latency statistics.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{CorssError, Result};
use crate::identify::{Envelope, SpikeTrain};

/// Outcome of matching two spike trains.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MatchResult {
    pub n_common: usize,
    pub n_a: usize,
    pub n_b: usize,
    /// `2 * n_common / (n_a + n_b)`; defined as 1 when both trains are empty.
    pub mr: f64,
}

/// Matches two spike trains one-to-one within a tolerance window and returns
/// the symmetric matching rate.
///
/// Both trains are sorted, so a two-pointer greedy scan (advance whichever
/// unmatched spike is earlier) realizes a maximum matching for interval
/// structures of this form; the test suite certifies this against an
/// exhaustive search on small trains.
///
/// Empty vs empty is perfect vacuous agreement: `mr = 1`, `n_common = 0`.
pub fn matching_rate(a: &SpikeTrain, b: &SpikeTrain, tolerance_ms: f64) -> Result<MatchResult> {
    if a.sample_rate != b.sample_rate {
        return Err(CorssError::ShapeError(format!(
            "sample rates differ: {} vs {}",
            a.sample_rate, b.sample_rate
        )));
    }
    if tolerance_ms < 0.0 {
        return Err(CorssError::InvalidSpec(format!(
            "tolerance_ms = {tolerance_ms} must be >= 0"
        )));
    }
    let tol = tolerance_ms * a.sample_rate / 1000.0;
    let (sa, sb) = (&a.spike_samples, &b.spike_samples);
    let mut i = 0;
    let mut j = 0;
    let mut common = 0usize;
    while i < sa.len() && j < sb.len() {
        let d = sa[i] as f64 - sb[j] as f64;
        if d.abs() <= tol {
            common += 1;
            i += 1;
            j += 1;
        } else if sa[i] < sb[j] {
            i += 1;
        } else {
            j += 1;
        }
    }
    let (n_a, n_b) = (sa.len(), sb.len());
    let mr = if n_a + n_b == 0 {
        1.0
    } else {
        2.0 * common as f64 / (n_a + n_b) as f64
    };
    Ok(MatchResult {
        n_common: common,
        n_a,
        n_b,
        mr,
    })
}

/// Envelope error as a percentage of the reference peak: both envelopes are
/// scaled by `1 / max(ref)`, then `sqrt(mean((est - ref)^2)) * 100`.
pub fn rmse_percent(est: &Envelope, reference: &Envelope) -> Result<f64> {
    if est.values.len() != reference.values.len() {
        return Err(CorssError::ShapeError(format!(
            "envelope lengths differ: {} vs {}",
            est.values.len(),
            reference.values.len()
        )));
    }
    if reference.values.is_empty() {
        return Err(CorssError::EmptyInput("empty envelopes".into()));
    }
    let peak = reference.values.iter().cloned().fold(f64::MIN, f64::max);
    if peak <= 0.0 {
        return Err(CorssError::UndefinedNormalization);
    }
    let n = est.values.len() as f64;
    let mse = est
        .values
        .iter()
        .zip(&reference.values)
        .map(|(&e, &r)| ((e - r) / peak).powi(2))
        .sum::<f64>()
        / n;
    Ok(mse.sqrt() * 100.0)
}

/// Standard Pearson product-moment correlation.
pub fn pearson_corr(est: &[f64], reference: &[f64]) -> Result<f64> {
    if est.len() != reference.len() {
        return Err(CorssError::ShapeError(format!(
            "series lengths differ: {} vs {}",
            est.len(),
            reference.len()
        )));
    }
    let n = est.len();
    if n < 2 {
        return Err(CorssError::EmptyInput("need at least 2 samples".into()));
    }
    let nf = n as f64;
    let me = est.iter().sum::<f64>() / nf;
    let mr = reference.iter().sum::<f64>() / nf;
    let mut se = 0.0;
    let mut sr = 0.0;
    let mut cross = 0.0;
    for (&e, &r) in est.iter().zip(reference) {
        let de = e - me;
        let dr = r - mr;
        se += de * de;
        sr += dr * dr;
        cross += de * dr;
    }
    if se <= 0.0 || sr <= 0.0 {
        return Err(CorssError::UndefinedCorrelation);
    }
    Ok(cross / (se * sr).sqrt())
}

/// Normalized Amari performance index of `G = W * M * A`: zero iff `G` is a
/// scaled permutation; invariant to row/column permutation and scaling.
pub fn amari_index(g: &DMatrix<f64>) -> Result<f64> {
    let n = g.nrows();
    if n != g.ncols() {
        return Err(CorssError::ShapeError(format!(
            "matrix is {}x{}, need square",
            g.nrows(),
            g.ncols()
        )));
    }
    if n < 2 {
        return Err(CorssError::ShapeError("need at least 2x2".into()));
    }
    let a = g.map(f64::abs);
    let mut row_term = 0.0;
    for i in 0..n {
        let row = a.row(i);
        let max = row.max();
        if max <= 0.0 {
            return Err(CorssError::DegenerateMatrix(format!("row {i} is all zero")));
        }
        row_term += row.sum() / max - 1.0;
    }
    let mut col_term = 0.0;
    for j in 0..n {
        let col = a.column(j);
        let max = col.max();
        if max <= 0.0 {
            return Err(CorssError::DegenerateMatrix(format!(
                "column {j} is all zero"
            )));
        }
        col_term += col.sum() / max - 1.0;
    }
    let norm = (n * (n - 1)) as f64;
    Ok(0.5 * (row_term + col_term) / norm)
}

/// Per-block processing time statistics for one block size.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LatencyReport {
    pub block_size: usize,
    pub mean_s: f64,
    pub std_s: f64,
    pub max_s: f64,
    /// Mean processing time divided by the block's wall duration.
    pub realtime_ratio: f64,
}

pub fn latency_stats(
    timings_s: &[f64],
    block_size: usize,
    sample_rate: f64,
) -> Result<LatencyReport> {
    if timings_s.is_empty() {
        return Err(CorssError::EmptyInput("no timings".into()));
    }
    if block_size == 0 || sample_rate <= 0.0 {
        return Err(CorssError::InvalidSpec(
            "block_size and sample_rate must be positive".into(),
        ));
    }
    let n = timings_s.len() as f64;
    let mean = timings_s.iter().sum::<f64>() / n;
    let var = timings_s.iter().map(|&t| (t - mean).powi(2)).sum::<f64>() / n;
    let max = timings_s.iter().cloned().fold(f64::MIN, f64::max);
    let block_duration = block_size as f64 / sample_rate;
    Ok(LatencyReport {
        block_size,
        mean_s: mean,
        std_s: var.sqrt(),
        max_s: max,
        realtime_ratio: mean / block_duration,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn train(samples: Vec<u64>) -> SpikeTrain {
        SpikeTrain::new(0, samples, 1000.0).unwrap()
    }

    #[test]
    fn identical_trains_match_fully() {
        let a = train(vec![10, 50, 90, 200]);
        let m = matching_rate(&a, &a, 0.0).unwrap();
        assert_eq!(m.mr, 1.0);
        assert_eq!(m.n_common, 4);
    }

    #[test]
    fn disjoint_trains_score_zero() {
        let a = train(vec![100, 200, 300]);
        let b = train(vec![150, 250, 350]);
        let m = matching_rate(&a, &b, 2.0).unwrap(); // 2 ms = 2 samples
        assert_eq!(m.mr, 0.0);
    }

    #[test]
    fn partial_match_example() {
        let a = train(vec![100, 200, 300]);
        let b = train(vec![101, 205, 400]);
        let m = matching_rate(&a, &b, 2.0).unwrap();
        assert_eq!(m.n_common, 1);
        assert!((m.mr - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn empty_vs_empty_is_one() {
        let e = train(vec![]);
        let m = matching_rate(&e, &e, 1.0).unwrap();
        assert_eq!(m.mr, 1.0);
        assert_eq!(m.n_common, 0);
        let a = train(vec![5]);
        assert_eq!(matching_rate(&a, &e, 1.0).unwrap().mr, 0.0);
    }

    /// Exhaustive maximum one-to-one matching by recursion over a's spikes.
    fn brute_force_max_matching(a: &[u64], b: &[u64], tol: f64, used: &mut Vec<bool>) -> usize {
        if a.is_empty() {
            return 0;
        }
        // skip a[0]
        let mut best = brute_force_max_matching(&a[1..], b, tol, used);
        for j in 0..b.len() {
            if !used[j] && (a[0] as f64 - b[j] as f64).abs() <= tol {
                used[j] = true;
                best = best.max(1 + brute_force_max_matching(&a[1..], b, tol, used));
                used[j] = false;
            }
        }
        best
    }

    #[test]
    fn greedy_equals_exhaustive_on_small_trains() {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        for case in 0..1200 {
            let na = rand::Rng::random_range(&mut rng, 0..=8usize);
            let nb = rand::Rng::random_range(&mut rng, 0..=8usize);
            let mut sa: Vec<u64> = (0..na)
                .map(|_| rand::Rng::random_range(&mut rng, 0..60u64))
                .collect();
            let mut sb: Vec<u64> = (0..nb)
                .map(|_| rand::Rng::random_range(&mut rng, 0..60u64))
                .collect();
            sa.sort_unstable();
            sa.dedup();
            sb.sort_unstable();
            sb.dedup();
            let tol_ms = rand::Rng::random_range(&mut rng, 0..6u64) as f64;
            let a = train(sa.clone());
            let b = train(sb.clone());
            let greedy = matching_rate(&a, &b, tol_ms).unwrap().n_common;
            let mut used = vec![false; sb.len()];
            let exact = brute_force_max_matching(&sa, &sb, tol_ms, &mut used);
            assert_eq!(greedy, exact, "case {case}: a={sa:?} b={sb:?} tol={tol_ms}");
        }
    }

    proptest! {
        #[test]
        fn mr_is_symmetric(
            mut sa in proptest::collection::vec(0u64..500, 0..12),
            mut sb in proptest::collection::vec(0u64..500, 0..12),
            tol in 0.0f64..10.0,
        ) {
            sa.sort_unstable(); sa.dedup();
            sb.sort_unstable(); sb.dedup();
            let a = train(sa);
            let b = train(sb);
            let ab = matching_rate(&a, &b, tol).unwrap();
            let ba = matching_rate(&b, &a, tol).unwrap();
            prop_assert_eq!(ab.mr, ba.mr);
            prop_assert_eq!(ab.n_common, ba.n_common);
        }

        #[test]
        fn mr_monotone_in_tolerance(
            mut sa in proptest::collection::vec(0u64..500, 0..12),
            mut sb in proptest::collection::vec(0u64..500, 0..12),
            t1 in 0.0f64..5.0,
            dt in 0.0f64..5.0,
        ) {
            sa.sort_unstable(); sa.dedup();
            sb.sort_unstable(); sb.dedup();
            let a = train(sa);
            let b = train(sb);
            let lo = matching_rate(&a, &b, t1).unwrap().mr;
            let hi = matching_rate(&a, &b, t1 + dt).unwrap().mr;
            prop_assert!(lo <= hi + 1e-15);
        }

        #[test]
        fn pearson_affine_invariance(
            base in proptest::collection::vec(-10.0f64..10.0, 8..40),
            scale in 0.1f64..50.0,
            offset in -100.0f64..100.0,
        ) {
            // make sure the series is non-constant
            let mut est = base.clone();
            est[0] += 1.0;
            let refv: Vec<f64> = est.iter().enumerate().map(|(i, &v)| v + (i as f64).sin()).collect();
            prop_assume!(refv.iter().any(|&v| (v - refv[0]).abs() > 1e-9));
            let c0 = pearson_corr(&est, &refv).unwrap();
            let scaled: Vec<f64> = est.iter().map(|&v| scale * v + offset).collect();
            let c1 = pearson_corr(&scaled, &refv).unwrap();
            prop_assert!((c0 - c1).abs() < 1e-9);
            let flipped: Vec<f64> = est.iter().map(|&v| -scale * v + offset).collect();
            let c2 = pearson_corr(&flipped, &refv).unwrap();
            prop_assert!((c0 + c2).abs() < 1e-9);
        }
    }

    #[test]
    fn pearson_basics() {
        let x: Vec<f64> = (0..100).map(|i| (i as f64 * 0.37).sin()).collect();
        assert!((pearson_corr(&x, &x).unwrap() - 1.0).abs() < 1e-12);
        let neg: Vec<f64> = x.iter().map(|&v| -v).collect();
        assert!((pearson_corr(&x, &neg).unwrap() + 1.0).abs() < 1e-12);
        assert!(pearson_corr(&[1.0, 1.0, 1.0], &x[..3]).is_err());
    }

    #[test]
    fn pearson_snr_zero_db() {
        // est = ref + noise at equal power: expected corr = 1/sqrt(2)
        let mut sum = 0.0;
        let n = 10_000;
        let seeds = 20;
        for seed in 0..seeds {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let refv: Vec<f64> = (0..n).map(|_| StandardNormal.sample(&mut rng)).collect();
            let est: Vec<f64> = refv
                .iter()
                .map(|&v| {
                    let e: f64 = StandardNormal.sample(&mut rng);
                    v + e
                })
                .collect();
            sum += pearson_corr(&est, &refv).unwrap();
        }
        let mean = sum / seeds as f64;
        assert!(
            (mean - std::f64::consts::FRAC_1_SQRT_2).abs() < 0.05,
            "mean corr {mean}"
        );
    }

    fn env(values: Vec<f64>) -> Envelope {
        Envelope {
            values,
            window_ms: 250.0,
            hop_ms: 50.0,
            sample_rate: 1000.0,
        }
    }

    #[test]
    fn rmse_examples() {
        let r = env(vec![1.0; 10]);
        assert_eq!(rmse_percent(&r, &r).unwrap(), 0.0);
        let e = env(vec![0.9; 10]);
        assert!((rmse_percent(&e, &r).unwrap() - 10.0).abs() < 1e-12);
        assert!(rmse_percent(&env(vec![1.0; 3]), &env(vec![1.0; 4])).is_err());
        assert!(matches!(
            rmse_percent(&env(vec![1.0; 4]), &env(vec![0.0; 4])),
            Err(CorssError::UndefinedNormalization)
        ));
    }

    #[test]
    fn amari_trivial_cases() {
        assert_eq!(amari_index(&DMatrix::identity(4, 4)).unwrap(), 0.0);
        // scaled permutation
        let mut p = DMatrix::zeros(3, 3);
        p[(0, 2)] = 5.0;
        p[(1, 0)] = -0.3;
        p[(2, 1)] = 2.0;
        assert!(amari_index(&p).unwrap() < 1e-15);
        // all-ones 2x2: rows give (2/1 - 1) each, columns the same,
        // normalized by n(n-1) = 2 -> 0.5*(2 + 2)/2 = 1
        let ones = DMatrix::from_element(2, 2, 1.0);
        assert!((amari_index(&ones).unwrap() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn amari_invariance_under_scaled_permutation() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let g = DMatrix::from_fn(5, 5, |_, _| {
            let v: f64 = StandardNormal.sample(&mut rng);
            v + 2.0
        });
        let base = amari_index(&g).unwrap();
        // c * P * G for a permutation P and a global scale c; per-row scaling
        // is deliberately excluded (it changes the column term)
        let perm = [3usize, 0, 4, 1, 2];
        let mut p = DMatrix::zeros(5, 5);
        for (i, &pj) in perm.iter().enumerate() {
            p[(i, pj)] = 1.0;
        }
        let transformed = (&p * &g) * -2.5;
        assert!((amari_index(&transformed).unwrap() - base).abs() < 1e-9);
    }

    #[test]
    fn amari_rejects_degenerate() {
        let mut g = DMatrix::from_element(3, 3, 1.0);
        g.set_row(1, &nalgebra::RowDVector::zeros(3).into());
        assert!(matches!(
            amari_index(&g),
            Err(CorssError::DegenerateMatrix(_))
        ));
    }

    #[test]
    fn latency_arithmetic() {
        let r = latency_stats(&[0.005; 10], 100, 1000.0).unwrap();
        assert!((r.mean_s - 0.005).abs() < 1e-15);
        assert!(r.std_s < 1e-12);
        assert!((r.realtime_ratio - 0.05).abs() < 1e-12);
        assert!(r.max_s >= r.mean_s);
        assert!(latency_stats(&[], 100, 1000.0).is_err());
    }
}
