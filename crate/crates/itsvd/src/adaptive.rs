//! Energy-based rank control and the hardware-driven bunch-size estimate.
//!
//! The retained-energy criterion compares partial sums of squared singular
//! values against the exact accumulated matrix energy. Because the leading
//! singular values frequently dominate the spectrum to the point of driving
//! the plain criterion into machine accuracy, the adaptive variant discounts
//! the first `o - 1` values from both numerator and denominator.

use crate::error::{Error, Result};
use ndarray::ArrayView1;
use serde::{Deserialize, Serialize};

/// Rank selection policy for the incremental factorization.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum TruncationPolicy {
    /// Keep at most `q_max` singular values.
    Fixed { q_max: usize },
    /// Keep the smallest rank `>= min_rank` whose discounted retained energy
    /// reaches `eta`, judged against the exact accumulated energy.
    Adaptive { min_rank: usize, eta: f64 },
}

impl TruncationPolicy {
    pub fn fixed(q_max: usize) -> Result<Self> {
        if q_max == 0 {
            return Err(Error::Argument("fixed rank must be at least 1".into()));
        }
        Ok(TruncationPolicy::Fixed { q_max })
    }

    pub fn adaptive(min_rank: usize, eta: f64) -> Result<Self> {
        if min_rank == 0 {
            return Err(Error::Argument("minimum rank must be at least 1".into()));
        }
        if !(eta > 0.0 && eta <= 1.0) {
            return Err(Error::Argument(format!(
                "energy threshold must lie in (0, 1], got {eta}"
            )));
        }
        Ok(TruncationPolicy::Adaptive { min_rank, eta })
    }
}

/// Discounted retained energy of the first `q` singular values.
///
/// Returns `(sum_{i=o..q} s_i^2) / (e - sum_{i=1..o-1} s_i^2)` with 1-based
/// `o` and `q`; `o = 1` recovers the plain retained-energy ratio. `e` is the
/// exact accumulated squared Frobenius norm of all snapshots seen.
pub fn retained_energy(s: ArrayView1<'_, f64>, q: usize, o: usize, e: f64) -> Result<f64> {
    if o == 0 || q < o || q > s.len() {
        return Err(Error::Argument(format!(
            "ranks must satisfy 1 <= o <= q <= {}, got o={o}, q={q}",
            s.len()
        )));
    }
    if !(e > 0.0) {
        return Err(Error::EnergyAccounting(format!(
            "matrix energy must be positive, got {e}"
        )));
    }
    let head: f64 = s.iter().take(o - 1).map(|x| x * x).sum();
    let denom = e - head;
    if denom <= 0.0 {
        return Err(Error::EnergyAccounting(format!(
            "leading {} singular values already exceed the accumulated energy \
             ({head} >= {e}); the energy accumulator is inconsistent",
            o - 1
        )));
    }
    let num: f64 = s.iter().skip(o - 1).take(q - o + 1).map(|x| x * x).sum();
    Ok(num / denom)
}

/// Smallest rank in `[o, len]` whose discounted retained energy reaches
/// `eta`; keeps every candidate when the bound is unreachable this update,
/// and all of them when fewer than `o` values exist.
pub fn adaptive_truncation(
    s: ArrayView1<'_, f64>,
    o: usize,
    eta: f64,
    e: f64,
) -> Result<usize> {
    if o == 0 {
        return Err(Error::Argument("minimum rank must be at least 1".into()));
    }
    let n = s.len();
    if n <= o {
        return Ok(n);
    }
    for q in o..=n {
        if retained_energy(s, q, o, e)? >= eta {
            return Ok(q);
        }
    }
    Ok(n)
}

/// Working-set memory model of one update: `c_work` simultaneously live
/// row-dominant matrices of width `b` (the bunch itself, its residual, its
/// orthonormal basis and the widened left factor).
pub const DEFAULT_WORK_MATRICES: usize = 4;

/// Raw footprint of a single `n_rows x b` double-precision matrix, the unit
/// the estimator reasons in.
pub fn single_matrix_footprint_bytes(n_rows: u64, bunch: u64) -> u64 {
    n_rows * bunch * 8
}

/// Largest bunch size whose working set fits the memory budget after the
/// safety factor. Errors when even a single column does not fit.
pub fn estimate_bunch_size(
    n_rows: u64,
    mem_budget_bytes: u64,
    safety: f64,
    work_matrices: usize,
) -> Result<usize> {
    if n_rows == 0 {
        return Err(Error::Argument("row count must be positive".into()));
    }
    if !(safety > 0.0 && safety <= 1.0) {
        return Err(Error::Argument(format!(
            "safety factor must lie in (0, 1], got {safety}"
        )));
    }
    if work_matrices == 0 {
        return Err(Error::Argument("work matrix count must be positive".into()));
    }
    let per_column = work_matrices as f64 * n_rows as f64 * 8.0;
    let b = (safety * mem_budget_bytes as f64 / per_column).floor();
    if b < 1.0 {
        return Err(Error::Config(format!(
            "memory budget of {mem_budget_bytes} bytes is below the minimum {} bytes \
             required for a single bunch column",
            (per_column / safety).ceil() as u64
        )));
    }
    Ok(b as usize)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{array, Array1};

    #[test]
    fn retained_energy_direct_formula() {
        let s = array![2.0, 1.0, 1.0];
        let eta = retained_energy(s.view(), 2, 1, 6.0).unwrap();
        assert!((eta - 5.0 / 6.0).abs() < 1e-15);
    }

    #[test]
    fn full_retention_is_one() {
        let s = array![3.0, 2.0, 0.5];
        let e: f64 = s.iter().map(|x| x * x).sum();
        let eta = retained_energy(s.view(), 3, 1, e).unwrap();
        assert!((eta - 1.0).abs() < 1e-15);
    }

    #[test]
    fn o_one_recovers_plain_ratio() {
        let s = array![4.0, 2.0, 1.0, 0.5];
        let e: f64 = s.iter().map(|x| x * x).sum();
        for q in 1..=4 {
            let plain: f64 = s.iter().take(q).map(|x| x * x).sum::<f64>() / e;
            let eta = retained_energy(s.view(), q, 1, e).unwrap();
            assert!((eta - plain).abs() < 1e-15);
        }
    }

    #[test]
    fn monotone_in_q() {
        let s = array![5.0, 3.0, 2.0, 1.0, 0.1];
        let e: f64 = s.iter().map(|x| x * x).sum::<f64>() * 1.25;
        let mut prev = 0.0;
        for q in 2..=5 {
            let eta = retained_energy(s.view(), q, 2, e).unwrap();
            assert!(eta >= prev);
            prev = eta;
        }
    }

    #[test]
    fn bad_energy_accounting_is_detected() {
        let s = array![10.0, 1.0];
        // e smaller than the first singular value squared.
        let err = retained_energy(s.view(), 2, 2, 50.0).unwrap_err();
        assert!(matches!(err, Error::EnergyAccounting(_)));
    }

    #[test]
    fn short_spectrum_keeps_everything() {
        let s = array![3.0, 2.0, 1.0];
        assert_eq!(adaptive_truncation(s.view(), 5, 0.9, 14.0).unwrap(), 3);
    }

    #[test]
    fn zero_threshold_stops_at_minimum_rank() {
        let s = array![3.0, 2.0, 1.0, 0.5];
        let e: f64 = s.iter().map(|x| x * x).sum();
        assert_eq!(adaptive_truncation(s.view(), 2, 0.0, e).unwrap(), 2);
    }

    #[test]
    fn unreachable_threshold_keeps_all() {
        let s = array![3.0, 2.0, 1.0, 0.5];
        // Energy twice the spectrum's content: eta never reaches 0.99.
        let e: f64 = s.iter().map(|x| x * x).sum::<f64>() * 2.0;
        assert_eq!(adaptive_truncation(s.view(), 1, 0.99, e).unwrap(), 4);
    }

    #[test]
    fn matches_exhaustive_scan_on_geometric_spectrum() {
        let s = Array1::from_shape_fn(20, |i| 10.0 * 0.5_f64.powi(i as i32 + 1));
        let e: f64 = s.iter().map(|x| x * x).sum();
        let (o, eta) = (3, 0.9);
        let got = adaptive_truncation(s.view(), o, eta, e).unwrap();
        let brute = (o..=20)
            .find(|&q| retained_energy(s.view(), q, o, e).unwrap() >= eta)
            .unwrap_or(20);
        assert_eq!(got, brute);
    }

    #[test]
    fn scale_invariance_of_the_decision() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let mut vals: Vec<f64> = (0..15).map(|_| rng.gen_range(0.01..10.0)).collect();
            vals.sort_by(|a, b| b.partial_cmp(a).unwrap());
            let s = Array1::from_vec(vals);
            let e: f64 = s.iter().map(|x| x * x).sum::<f64>() * 1.5;
            let alpha: f64 = rng.gen_range(0.1..100.0);
            let scaled = s.mapv(|x| alpha * x);
            let q1 = adaptive_truncation(s.view(), 2, 0.8, e).unwrap();
            let q2 = adaptive_truncation(scaled.view(), 2, 0.8, alpha * alpha * e).unwrap();
            assert_eq!(q1, q2);
        }
    }

    #[test]
    fn bunch_size_formula() {
        // N=1, 64 bytes, no safety margin, 4 work matrices -> two columns.
        assert_eq!(estimate_bunch_size(1, 64, 1.0, 4).unwrap(), 2);
        // Budget sized for exactly 100 columns at 75% safety.
        let n = 1000u64;
        let budget = 4 * n * 8 * 100;
        assert_eq!(estimate_bunch_size(n, budget, 0.75, 4).unwrap(), 75);
    }

    #[test]
    fn paper_scale_footprint() {
        // 3.18e6 rows at bunch 500 occupy 12.72 GB as a raw double matrix.
        let bytes = single_matrix_footprint_bytes(3_180_000, 500);
        assert!((bytes as f64 / 1e9 - 12.72).abs() < 0.005 * 12.72);
    }

    #[test]
    fn budget_below_one_column_is_a_config_error() {
        let err = estimate_bunch_size(1_000_000, 1024, 0.75, 4).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
        assert!(err.to_string().contains("bytes"));
    }
}
