//! Rank-q̃ evaluation of a completed factorization, realizability clipping,
//! linear quantities of interest and error reporting.
//!
//! Reconstruction of time step `t` computes the modal coefficients
//! `f = diag(s(1:q̃)) V(t,1:q̃)ᵀ` once (identical on every partition, since s
//! and V are replicated) and then the local rows `ỹ = U_local(:,1:q̃) f`.
//! Clipping never mutates the stored factorization; it post-processes
//! reconstructed fields only.

use crate::comm::Communicator;
use crate::error::{Error, Result};
use crate::snapshot::{disassemble_state_vector, ReferenceScales};
use crate::svd::ItSvdState;
use ndarray::{s, Array1, ArrayView1};
use serde::{Deserialize, Serialize};

/// Per-state physical bounds restoring realizability of reconstructed fields.
///
/// Bounds model positivity-constrained quantities: the effective lower bound
/// is `max(lower, alpha)` with `alpha` a small positive floor standing in for
/// zero, so a stated lower bound of `0` clips to `alpha` rather than exactly
/// zero.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RealizabilityBounds {
    /// `states[s] = None` leaves state `s` unclipped.
    states: Vec<Option<StateBounds>>,
    alpha: f64,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct StateBounds {
    pub lower: Option<f64>,
    pub upper: Option<f64>,
}

pub const DEFAULT_ALPHA: f64 = 1e-16;

impl RealizabilityBounds {
    pub fn new(states: Vec<Option<StateBounds>>, alpha: f64) -> Result<Self> {
        if !(alpha > 0.0) {
            return Err(Error::Argument(format!(
                "alpha must be a small positive floor, got {alpha}"
            )));
        }
        for (i, b) in states.iter().enumerate() {
            if let Some(StateBounds {
                lower: Some(lo),
                upper: Some(hi),
            }) = b
            {
                if !(lo < hi) {
                    return Err(Error::Argument(format!(
                        "state {i}: lower bound {lo} must be below upper bound {hi}"
                    )));
                }
            }
        }
        Ok(RealizabilityBounds { states, alpha })
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn states(&self) -> &[Option<StateBounds>] {
        &self.states
    }
}

/// Clip outcome for one state at one time step.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct ClipStats {
    /// Number of entries moved by clipping.
    pub count: usize,
    /// Largest |original - clipped| excursion.
    pub max_excursion: f64,
}

/// Reconstructs the local fields of time step `t` (0-based) using the first
/// `q_tilde` modes.
pub fn reconstruct_column(
    state: &ItSvdState,
    t: usize,
    q_tilde: usize,
    scales: &ReferenceScales,
) -> Result<Vec<Array1<f64>>> {
    let y = reconstruct_local_vector(state, t, q_tilde)?;
    disassemble_state_vector(y.view(), scales)
}

/// Reconstructs the local dimensionless state vector of time step `t`.
pub fn reconstruct_local_vector(
    state: &ItSvdState,
    t: usize,
    q_tilde: usize,
) -> Result<Array1<f64>> {
    if q_tilde == 0 || q_tilde > state.rank() {
        return Err(Error::Argument(format!(
            "evaluation rank must satisfy 1 <= q_tilde <= {}, got {q_tilde}",
            state.rank()
        )));
    }
    if t >= state.t_seen() {
        return Err(Error::Argument(format!(
            "time index {t} outside the {} absorbed snapshots",
            state.t_seen()
        )));
    }
    // f = diag(s) V(t,:)ᵀ restricted to the leading modes; global data, so
    // identical on every partition.
    let mut f = state.v().slice(s![t, ..q_tilde]).to_owned();
    for (i, x) in f.iter_mut().enumerate() {
        *x *= state.singular_values()[i];
    }
    Ok(state.u_local().slice(s![.., ..q_tilde]).dot(&f))
}

/// Clamps each bounded state elementwise; returns per-state clip statistics.
/// Clipping is total and idempotent.
pub fn clip_realizability(
    fields: &mut [Array1<f64>],
    bounds: &RealizabilityBounds,
) -> Result<Vec<ClipStats>> {
    if bounds.states.len() != fields.len() {
        return Err(Error::Argument(format!(
            "bounds cover {} states, fields have {}",
            bounds.states.len(),
            fields.len()
        )));
    }
    let mut stats = vec![ClipStats::default(); fields.len()];
    for (s_idx, field) in fields.iter_mut().enumerate() {
        let Some(b) = &bounds.states[s_idx] else {
            continue;
        };
        let lo = b.lower.map(|l| l.max(bounds.alpha));
        let hi = b.upper;
        let st = &mut stats[s_idx];
        for x in field.iter_mut() {
            let mut clipped = *x;
            if let Some(lo) = lo {
                clipped = clipped.max(lo);
            }
            if let Some(hi) = hi {
                clipped = clipped.min(hi);
            }
            if clipped != *x {
                st.count += 1;
                st.max_excursion = st.max_excursion.max((clipped - *x).abs());
                *x = clipped;
            }
        }
    }
    Ok(stats)
}

/// Evaluates linear functionals `F_j = sum_dof w_j . y` over the distributed
/// state vector; one batched all-reduce covers all functionals.
pub fn evaluate_functionals(
    y_local: ArrayView1<'_, f64>,
    weights_local: &[Array1<f64>],
    comm: &Communicator,
) -> Result<Vec<f64>> {
    let mut vals = Vec::with_capacity(weights_local.len());
    for (j, w) in weights_local.iter().enumerate() {
        if w.len() != y_local.len() {
            return Err(Error::Argument(format!(
                "functional {j} has {} weights, local vector has {}",
                w.len(),
                y_local.len()
            )));
        }
        vals.push(w.dot(&y_local));
    }
    comm.all_reduce_sum(&mut vals)?;
    Ok(vals)
}

/// One row of the functional comparison.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FunctionalErrorRow {
    /// 1-based time index, matching the CSV convention.
    pub t: usize,
    pub functional_id: String,
    pub value_original: f64,
    pub value_reconstructed: f64,
    /// Relative error, or the absolute error for flagged rows.
    pub rel_error: f64,
    /// True when |original| fell below 1e-12 of the functional's scale and
    /// the error is reported absolutely instead of relatively.
    pub absolute: bool,
}

/// Horizon aggregate per functional (of |error|).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FunctionalErrorSummary {
    pub functional_id: String,
    pub mean: f64,
    pub max: f64,
    pub min: f64,
    pub flagged_rows: usize,
}

/// Comparison of original and reconstructed trajectories.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ErrorReport {
    pub rows: Vec<FunctionalErrorRow>,
    pub per_functional: Vec<FunctionalErrorSummary>,
    /// Max over time and space of |reconstructed - original| / phi_ref,
    /// one entry per state.
    pub per_state_max_field_error: Vec<f64>,
}

/// Threshold below which an original functional value counts as a zero
/// crossing and the error is reported absolutely.
const ZERO_CROSSING_REL: f64 = 1e-12;

/// Joins two functional logs over the same time stamps (1-based) into an
/// error report. Field errors are not available on this path and come back
/// empty.
pub fn compare_functional_logs(
    ids: &[String],
    times: &[usize],
    original: &[Vec<f64>],
    reconstructed: &[Vec<f64>],
) -> Result<ErrorReport> {
    if original.len() != reconstructed.len() || original.len() != times.len() {
        return Err(Error::Data(format!(
            "logs cover different horizons: {} stamps, {} vs {} rows",
            times.len(),
            original.len(),
            reconstructed.len()
        )));
    }
    let h = ids.len();
    for (t, (o, r)) in original.iter().zip(reconstructed.iter()).enumerate() {
        if o.len() != h || r.len() != h {
            return Err(Error::Data(format!(
                "log row {t} does not carry {h} functional values"
            )));
        }
    }
    let mut rows = Vec::with_capacity(original.len() * h);
    let mut per_functional = Vec::with_capacity(h);
    for j in 0..h {
        let scale = original
            .iter()
            .map(|row| row[j].abs())
            .fold(0.0_f64, f64::max);
        let mut errs = Vec::with_capacity(original.len());
        let mut flagged = 0usize;
        for (i, (o, r)) in original.iter().zip(reconstructed.iter()).enumerate() {
            let vo = o[j];
            let vr = r[j];
            let absolute = vo.abs() < ZERO_CROSSING_REL * scale;
            let err = if absolute {
                flagged += 1;
                vr - vo
            } else {
                (vr - vo) / vo
            };
            errs.push(err.abs());
            rows.push(FunctionalErrorRow {
                t: times[i],
                functional_id: ids[j].clone(),
                value_original: vo,
                value_reconstructed: vr,
                rel_error: err,
                absolute,
            });
        }
        let mean = errs.iter().sum::<f64>() / errs.len().max(1) as f64;
        let max = errs.iter().cloned().fold(0.0, f64::max);
        let min = errs.iter().cloned().fold(f64::INFINITY, f64::min);
        per_functional.push(FunctionalErrorSummary {
            functional_id: ids[j].clone(),
            mean,
            max,
            min: if min.is_finite() { min } else { 0.0 },
            flagged_rows: flagged,
        });
    }
    Ok(ErrorReport {
        rows,
        per_functional,
        per_state_max_field_error: Vec::new(),
    })
}

/// Combines per-partition clip statistics into global ones (sum of counts,
/// max of excursions) using only sum collectives: each partition contributes
/// to its own slot of a shared buffer and the combination happens locally.
pub fn globalize_clip_stats(
    local: &[ClipStats],
    comm: &Communicator,
) -> Result<Vec<ClipStats>> {
    let states = local.len();
    let parts = comm.partition_count();
    let me = comm.partition_id();
    let mut buf = vec![0.0_f64; states * parts * 2];
    for (s_idx, st) in local.iter().enumerate() {
        buf[(s_idx * parts + me) * 2] = st.count as f64;
        buf[(s_idx * parts + me) * 2 + 1] = st.max_excursion;
    }
    comm.all_reduce_sum(&mut buf)?;
    let mut out = Vec::with_capacity(states);
    for s_idx in 0..states {
        let mut count = 0usize;
        let mut max_excursion = 0.0_f64;
        for p in 0..parts {
            count += buf[(s_idx * parts + p) * 2] as usize;
            max_excursion = max_excursion.max(buf[(s_idx * parts + p) * 2 + 1]);
        }
        out.push(ClipStats {
            count,
            max_excursion,
        });
    }
    Ok(out)
}

/// Compares every reconstructed time step against the original stream:
/// functional errors per time step plus the horizon-wide max-abs normalized
/// field error per state. Runs inside an SPMD context; the returned report is
/// identical on every partition.
pub fn reconstruction_error<S: crate::driver::SnapshotSource>(
    source: &S,
    state: &ItSvdState,
    q_tilde: usize,
    functionals: Option<&crate::driver::FunctionalSet>,
    comm: &Communicator,
) -> Result<ErrorReport> {
    use crate::driver::localize_global_vector;
    use crate::snapshot::{assemble_state_vector, PartitionLayout};

    let p = comm.partition_id();
    let scales = source.scales();
    if source.num_steps() < state.t_seen() {
        return Err(Error::Data(format!(
            "originals cover {} steps but the state absorbed {}",
            source.num_steps(),
            state.t_seen()
        )));
    }
    let counts: Vec<usize> = (0..source.partitions())
        .map(|q| source.local_spatial_dof(q))
        .collect();
    let layout = PartitionLayout::from_counts(counts)?;
    let local_weights: Vec<Array1<f64>> = match functionals {
        Some(f) => f
            .weights
            .iter()
            .map(|w| localize_global_vector(w, &layout, scales.num_states(), p))
            .collect::<Result<_>>()?,
        None => Vec::new(),
    };

    let states = scales.num_states();
    let mut local_field_err = vec![0.0_f64; states];
    let mut log_orig = Vec::new();
    let mut log_rec = Vec::new();
    for t in 0..state.t_seen() {
        let original = source.fields(t, p)?;
        let reconstructed = reconstruct_column(state, t, q_tilde, scales)?;
        for (s_idx, e) in field_errors(&original, &reconstructed, scales)?
            .into_iter()
            .enumerate()
        {
            local_field_err[s_idx] = local_field_err[s_idx].max(e);
        }
        if !local_weights.is_empty() {
            let y_orig = assemble_state_vector(&original, scales, t, p)?;
            let y_rec = assemble_state_vector(&reconstructed, scales, t, p)?;
            log_orig.push(evaluate_functionals(y_orig.values(), &local_weights, comm)?);
            log_rec.push(evaluate_functionals(y_rec.values(), &local_weights, comm)?);
        }
    }

    // Globalize the per-state field maxima through partition slots.
    let parts = comm.partition_count();
    let mut buf = vec![0.0_f64; states * parts];
    for (s_idx, &e) in local_field_err.iter().enumerate() {
        buf[s_idx * parts + p] = e;
    }
    comm.all_reduce_sum(&mut buf)?;
    let per_state_max_field_error: Vec<f64> = (0..states)
        .map(|s_idx| {
            (0..parts)
                .map(|q| buf[s_idx * parts + q])
                .fold(0.0, f64::max)
        })
        .collect();

    let mut report = match functionals {
        Some(f) => {
            let times: Vec<usize> = (1..=state.t_seen()).collect();
            compare_functional_logs(&f.ids, &times, &log_orig, &log_rec)?
        }
        None => ErrorReport {
            rows: Vec::new(),
            per_functional: Vec::new(),
            per_state_max_field_error: Vec::new(),
        },
    };
    report.per_state_max_field_error = per_state_max_field_error;
    Ok(report)
}

/// Max-abs normalized field error of one time step, per state:
/// `max_i |rec[s][i] - orig[s][i]| / phi_ref[s]`.
pub fn field_errors(
    original: &[Array1<f64>],
    reconstructed: &[Array1<f64>],
    scales: &ReferenceScales,
) -> Result<Vec<f64>> {
    if original.len() != reconstructed.len() || original.len() != scales.num_states() {
        return Err(Error::Argument("state counts disagree".into()));
    }
    let mut out = Vec::with_capacity(original.len());
    for (s_idx, (o, r)) in original.iter().zip(reconstructed.iter()).enumerate() {
        if o.len() != r.len() {
            return Err(Error::Data(format!(
                "state {s_idx}: original has {} entries, reconstruction {}",
                o.len(),
                r.len()
            )));
        }
        let phi = scales.per_state_ref()[s_idx];
        let e = o
            .iter()
            .zip(r.iter())
            .map(|(a, b)| (a - b).abs() / phi)
            .fold(0.0, f64::max);
        out.push(e);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::snapshot::assemble_state_vector;
    use crate::svd::init_rank_one;
    use ndarray::array;

    #[test]
    fn rank_one_reconstruction_is_exact() {
        let comm = Communicator::solo();
        let scales = ReferenceScales::new(vec![2.0], 3).unwrap();
        let fields = vec![array![3.0, 4.0, 12.0]];
        let y = assemble_state_vector(&fields, &scales, 0, 0).unwrap();
        let st = init_rank_one(&y, &comm).unwrap();
        let rec = reconstruct_column(&st, 0, 1, &scales).unwrap();
        for (a, b) in rec[0].iter().zip(fields[0].iter()) {
            assert!((a - b).abs() < 1e-15 * b.abs());
        }
    }

    #[test]
    fn out_of_range_arguments_are_rejected() {
        let comm = Communicator::solo();
        let scales = ReferenceScales::dimensionless(1, 1).unwrap();
        let y = assemble_state_vector(&[array![1.0, 1.0]], &scales, 0, 0).unwrap();
        let st = init_rank_one(&y, &comm).unwrap();
        assert!(matches!(
            reconstruct_column(&st, 0, 2, &scales),
            Err(Error::Argument(_))
        ));
        assert!(matches!(
            reconstruct_column(&st, 1, 1, &scales),
            Err(Error::Argument(_))
        ));
        assert!(matches!(
            reconstruct_column(&st, 0, 0, &scales),
            Err(Error::Argument(_))
        ));
    }

    #[test]
    fn clipping_matches_the_worked_example() {
        let bounds = RealizabilityBounds::new(
            vec![Some(StateBounds {
                lower: Some(0.0),
                upper: Some(1.0),
            })],
            1e-16,
        )
        .unwrap();
        let mut fields = vec![array![-0.2, 0.5, 1.3]];
        let stats = clip_realizability(&mut fields, &bounds).unwrap();
        assert_eq!(fields[0].to_vec(), vec![1e-16, 0.5, 1.0]);
        assert_eq!(stats[0].count, 2);
        assert!((stats[0].max_excursion - 0.3).abs() < 1e-15);
    }

    #[test]
    fn clipping_in_bounds_data_is_a_no_op() {
        let bounds = RealizabilityBounds::new(
            vec![Some(StateBounds {
                lower: Some(0.0),
                upper: Some(1.0),
            })],
            1e-16,
        )
        .unwrap();
        let mut fields = vec![array![0.2, 0.5, 0.9]];
        let stats = clip_realizability(&mut fields, &bounds).unwrap();
        assert_eq!(stats[0].count, 0);
        assert_eq!(stats[0].max_excursion, 0.0);
    }

    #[test]
    fn clipping_is_idempotent_and_floors_at_alpha() {
        let bounds = RealizabilityBounds::new(
            vec![Some(StateBounds {
                lower: Some(0.0),
                upper: None,
            })],
            1e-16,
        )
        .unwrap();
        let mut fields = vec![array![-1e-5]];
        clip_realizability(&mut fields, &bounds).unwrap();
        assert_eq!(fields[0][0], 1e-16);
        let again = clip_realizability(&mut fields, &bounds).unwrap();
        assert_eq!(again[0].count, 0);
    }

    #[test]
    fn invalid_bounds_are_rejected() {
        assert!(RealizabilityBounds::new(
            vec![Some(StateBounds {
                lower: Some(1.0),
                upper: Some(0.5),
            })],
            1e-16,
        )
        .is_err());
        assert!(RealizabilityBounds::new(vec![None], 0.0).is_err());
    }

    #[test]
    fn functionals_select_and_sum() {
        let comm = Communicator::solo();
        let y = array![1.0, 2.0, 3.0];
        let selector = array![0.0, 1.0, 0.0];
        let ones = array![1.0, 1.0, 1.0];
        let vals = evaluate_functionals(y.view(), &[selector, ones], &comm).unwrap();
        assert_eq!(vals, vec![2.0, 6.0]);

        let zeros = Array1::<f64>::zeros(3);
        let vals =
            evaluate_functionals(zeros.view(), &[array![1.0, 1.0, 1.0]], &comm).unwrap();
        assert_eq!(vals, vec![0.0]);
    }

    #[test]
    fn identical_logs_compare_to_zero_error() {
        let ids = vec!["f0".to_string()];
        let log = vec![vec![1.0], vec![2.0], vec![3.0]];
        let report = compare_functional_logs(&ids, &[1, 2, 3], &log, &log).unwrap();
        assert!(report.rows.iter().all(|r| r.rel_error == 0.0));
        let s = &report.per_functional[0];
        assert_eq!((s.mean, s.max, s.min), (0.0, 0.0, 0.0));
        assert!(s.min <= s.mean && s.mean <= s.max);
    }

    #[test]
    fn zero_crossing_rows_are_flagged_absolute() {
        let ids = vec!["lift".to_string()];
        let original = vec![vec![1.0], vec![0.0], vec![-1.0]];
        let reconstructed = vec![vec![1.0], vec![1e-6], vec![-1.0]];
        let report = compare_functional_logs(&ids, &[1, 2, 3], &original, &reconstructed).unwrap();
        assert!(report.rows[1].absolute);
        assert!((report.rows[1].rel_error - 1e-6).abs() < 1e-18);
        assert_eq!(report.per_functional[0].flagged_rows, 1);
    }
}
