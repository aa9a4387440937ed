//! The incremental truncated SVD state machine.
//!
//! Each partition owns the row block `U_local` of the left factor; the
//! singular values `s` and the right factor `V` are global and replicated
//! bit-identically on every partition. A rank-1 factorization is seeded from
//! the first snapshot, after which buffered snapshot bunches are absorbed by
//! the column-update rule: project the bunch onto the current basis,
//! orthonormalize the residual with a distributed Gram-Schmidt QR, take the
//! dense SVD of the small coupling matrix K on the master partition,
//! broadcast, and rotate the factors.
//!
//! Two update variants exist. The basic one factorizes
//! `K = [diag(s) M; 0 R_P]` directly; the enhanced (default) variant
//! premultiplies by the re-orthonormalization residual, `K = R_Q [..]`, which
//! regularizes the update against accumulated rounding. The re-orthonormalization
//! of `[U | Q_P]` is on by default and can be switched off to expose the
//! cheaper, drift-prone path.

use crate::adaptive::{adaptive_truncation, TruncationPolicy};
use crate::comm::Communicator;
use crate::error::{Error, Result};
use crate::jacobi::small_svd;
use crate::snapshot::LocalStateVector;
use crate::timing::{UpdateLine, UpdateTimings};
use ndarray::{s, Array1, Array2};
use serde::{Deserialize, Serialize};
use std::time::Instant;

/// Columns whose globalized residual norm falls below this multiple of the
/// largest previously accepted column norm are deflated to exact zero.
const DROP_TOL: f64 = 1e-14;

/// Incremental truncated SVD state of one partition.
///
/// Invariants (up to round-off): `s` is non-increasing, the stacked `U_local`
/// blocks have globally orthonormal columns, `VᵀV = I` with `V` bit-identical
/// across partitions, and `energy >= sum(s_i^2)`.
#[derive(Debug, Clone)]
pub struct ItSvdState {
    u_local: Array2<f64>,
    s: Array1<f64>,
    v: Array2<f64>,
    energy: f64,
    t_seen: usize,
}

impl ItSvdState {
    /// Partition-local rows of the left factor, `Y_p x q`.
    pub fn u_local(&self) -> &Array2<f64> {
        &self.u_local
    }

    /// Global singular values, non-increasing.
    pub fn singular_values(&self) -> &Array1<f64> {
        &self.s
    }

    /// Global right factor, `t_seen x q`.
    pub fn v(&self) -> &Array2<f64> {
        &self.v
    }

    /// Exact accumulated squared Frobenius norm of every snapshot seen,
    /// independent of truncation.
    pub fn energy(&self) -> f64 {
        self.energy
    }

    pub fn t_seen(&self) -> usize {
        self.t_seen
    }

    pub fn rank(&self) -> usize {
        self.s.len()
    }

    /// Reassembles a state from stored parts; used by persistence.
    pub(crate) fn from_parts(
        u_local: Array2<f64>,
        s: Array1<f64>,
        v: Array2<f64>,
        energy: f64,
        t_seen: usize,
    ) -> Result<Self> {
        let q = s.len();
        if u_local.ncols() != q || v.ncols() != q || v.nrows() != t_seen {
            return Err(Error::Data(format!(
                "inconsistent factor shapes: U {}x{}, s {}, V {}x{}, t_seen {}",
                u_local.nrows(),
                u_local.ncols(),
                q,
                v.nrows(),
                v.ncols(),
                t_seen
            )));
        }
        Ok(ItSvdState {
            u_local,
            s,
            v,
            energy,
            t_seen,
        })
    }
}

/// Which coupling matrix the update factorizes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    /// `K = [diag(s) M; 0 R_P]`.
    Basic,
    /// `K = R_Q [diag(s) M; 0 R_P]`; requires the re-orthonormalization.
    Enhanced,
}

/// Update configuration.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UpdateOptions {
    pub variant: Variant,
    /// Re-orthonormalize `[U | Q_P]` every update. Switching this off is the
    /// cheaper path whose orthogonality drift the overhead study measures.
    pub reortho: bool,
}

impl Default for UpdateOptions {
    fn default() -> Self {
        UpdateOptions {
            variant: Variant::Enhanced,
            reortho: true,
        }
    }
}

impl UpdateOptions {
    pub fn validate(&self) -> Result<()> {
        if self.variant == Variant::Enhanced && !self.reortho {
            return Err(Error::Argument(
                "the enhanced variant needs R_Q and therefore the re-orthonormalization; \
                 combine --no-reortho with the basic variant"
                    .into(),
            ));
        }
        Ok(())
    }
}

/// Diagnostics of one update.
#[derive(Debug, Clone, Copy, Default)]
pub struct UpdateStats {
    /// Retained rank after truncation.
    pub rank: usize,
    /// Bunch residual columns deflated to zero by the QR (duplicate or
    /// dependent snapshots).
    pub bunch_deflations: usize,
    /// Columns deflated during the re-orthonormalization of `[U | Q_P]`.
    pub basis_deflations: usize,
}

/// Result of the distributed Gram-Schmidt QR.
#[derive(Debug, Clone)]
pub struct QrResult {
    /// Orthonormal columns, rows distributed like the input.
    pub q: Array2<f64>,
    /// Upper-triangular global factor, identical on all partitions.
    pub r: Array2<f64>,
    /// Indices of columns deflated to zero (rank-deficient input).
    pub deflated: Vec<usize>,
}

/// Seeds the factorization with the first snapshot: `y = u * s1 * 1` with
/// `s1 = ||y||_2` over all partitions.
pub fn init_rank_one(y: &LocalStateVector, comm: &Communicator) -> Result<ItSvdState> {
    let local: f64 = y.values().dot(&y.values());
    let sum = comm.all_reduce_scalar(local)?;
    let norm = sum.sqrt();
    if !(norm >= 1e-300) {
        return Err(Error::DegenerateStart);
    }
    let u = y
        .values()
        .mapv(|x| x / norm)
        .into_shape_with_order((y.len(), 1))
        .expect("column reshape");
    Ok(ItSvdState {
        u_local: u,
        s: Array1::from_vec(vec![norm]),
        v: Array2::from_elem((1, 1), 1.0),
        energy: sum,
        t_seen: 1,
    })
}

/// Adds one snapshot's exact squared norm to the energy accumulator and
/// returns the updated value. Call exactly once per snapshot.
pub fn accumulate_energy(
    state: &mut ItSvdState,
    y: &LocalStateVector,
    comm: &Communicator,
) -> Result<f64> {
    let local: f64 = y.values().dot(&y.values());
    state.energy += comm.all_reduce_scalar(local)?;
    Ok(state.energy)
}

/// Modified Gram-Schmidt QR of a row-distributed matrix; every inner product
/// is globalized with an all-reduce, so `Q` is globally orthonormal and `R`
/// is identical on all partitions.
///
/// Columns whose global residual norm falls below `1e-14` times the largest
/// previously accepted column norm are replaced by the zero vector with a
/// zero row/column in `R`; the indices are reported in the result.
pub fn parallel_gram_schmidt(a: &Array2<f64>, comm: &Communicator) -> Result<QrResult> {
    let (rows, m) = a.dim();
    if m == 0 {
        return Err(Error::Argument("QR of a zero-column matrix".into()));
    }
    // Work on the transpose so each column under construction is contiguous.
    let mut qt = Array2::<f64>::zeros((m, rows));
    qt.assign(&a.t());
    let mut r = Array2::<f64>::zeros((m, m));
    let mut deflated = Vec::new();
    let mut scale = 0.0_f64;

    for j in 0..m {
        let (head, mut tail) = qt.view_mut().split_at(ndarray::Axis(0), j);
        let mut v = tail.row_mut(0);
        for i in 0..j {
            let qi = head.row(i);
            let rij = comm.all_reduce_scalar(qi.dot(&v))?;
            r[[i, j]] = rij;
            v.zip_mut_with(&qi, |x, &q| *x -= rij * q);
        }
        let norm_sq = comm.all_reduce_scalar(v.dot(&v))?;
        let norm = norm_sq.sqrt();
        if norm <= DROP_TOL * scale || norm < 1e-300 {
            v.fill(0.0);
            deflated.push(j);
        } else {
            v.mapv_inplace(|x| x / norm);
            r[[j, j]] = norm;
            scale = scale.max(norm);
        }
    }

    Ok(QrResult {
        q: qt.t().to_owned(),
        r,
        deflated,
    })
}

struct LineClock<'a> {
    timings: Option<&'a mut UpdateTimings>,
    mark: Instant,
}

impl<'a> LineClock<'a> {
    fn new(timings: Option<&'a mut UpdateTimings>) -> Self {
        LineClock {
            timings,
            mark: Instant::now(),
        }
    }

    fn lap(&mut self, line: UpdateLine) {
        let now = Instant::now();
        if let Some(t) = self.timings.as_deref_mut() {
            t.add(line, now - self.mark);
        }
        self.mark = now;
    }
}

/// Absorbs a `Y_p x k` bunch of snapshot columns into the factorization.
///
/// All partitions must enter together with the same column count; the dense
/// SVD of the coupling matrix runs on partition 0 only and its results are
/// broadcast, the adapted rank first.
pub fn update(
    state: &mut ItSvdState,
    bunch: &Array2<f64>,
    comm: &Communicator,
    policy: &TruncationPolicy,
    options: &UpdateOptions,
    timings: Option<&mut UpdateTimings>,
) -> Result<UpdateStats> {
    options.validate()?;
    let (rows, k) = bunch.dim();
    if k == 0 {
        return Err(Error::Argument("bunch must have at least one column".into()));
    }
    if rows != state.u_local.nrows() {
        return Err(Error::Argument(format!(
            "bunch has {rows} rows, state has {}",
            state.u_local.nrows()
        )));
    }
    let q = state.rank();
    let c = q + k;
    let mut clock = LineClock::new(timings);

    // M = Uᵀ B, local then globalized.
    let mut m = state.u_local.t().dot(bunch);
    comm.all_reduce_mat(&mut m)?;
    clock.lap(UpdateLine::MProduct);

    // Residual of the bunch against the current basis.
    let p_mat = bunch - &state.u_local.dot(&m);
    clock.lap(UpdateLine::ResidualP);

    let p_qr = parallel_gram_schmidt(&p_mat, comm)?;
    clock.lap(UpdateLine::QrP);

    let mut q_wide = Array2::<f64>::zeros((rows, c));
    q_wide.slice_mut(s![.., ..q]).assign(&state.u_local);
    q_wide.slice_mut(s![.., q..]).assign(&p_qr.q);
    clock.lap(UpdateLine::ConcatQ);

    let (q_q, r_q, basis_deflations) = if options.reortho {
        let qr = parallel_gram_schmidt(&q_wide, comm)?;
        let n_defl = qr.deflated.len();
        (qr.q, Some(qr.r), n_defl)
    } else {
        (q_wide, None, 0)
    };
    clock.lap(UpdateLine::QrQ);

    // Dense SVD of K on the master partition only.
    let mut factors = if comm.is_master() {
        let mut k_mat = Array2::<f64>::zeros((c, c));
        for i in 0..q {
            k_mat[[i, i]] = state.s[i];
        }
        k_mat.slice_mut(s![..q, q..]).assign(&m);
        k_mat.slice_mut(s![q.., q..]).assign(&p_qr.r);
        if options.variant == Variant::Enhanced {
            let r_q = r_q.as_ref().expect("enhanced variant validated reortho");
            k_mat = r_q.dot(&k_mat);
        }
        Some(small_svd(&k_mat)?)
    } else {
        None
    };
    clock.lap(UpdateLine::SmallSvd);

    let target_rank = match (policy, &factors) {
        (TruncationPolicy::Fixed { q_max }, _) => *q_max,
        (TruncationPolicy::Adaptive { min_rank, eta }, Some((_, s_prime, _))) => {
            adaptive_truncation(s_prime.view(), *min_rank, *eta, state.energy)?
        }
        // Non-master partitions receive the rank via broadcast below.
        (TruncationPolicy::Adaptive { .. }, None) => 0,
    };
    let l_master = factors
        .as_ref()
        .map(|(_, s_prime, _)| {
            let mut l = target_rank.min(c).max(1);
            // Exact zero singular values come from deflated columns; keeping
            // them would carry dead directions in the factors.
            let zero_tol = s_prime[0] * (c as f64) * f64::EPSILON;
            while l > 1 && s_prime[l - 1] <= zero_tol {
                l -= 1;
            }
            l
        })
        .unwrap_or(0);
    clock.lap(UpdateLine::AdaptRank);

    // The adapted rank travels first so every partition sizes the factor
    // buffers identically; a residual mismatch is a contract violation.
    let l = comm.broadcast_scalar(0, l_master as f64)? as usize;
    let (u_cols, s_new, v_cols) = match factors.take() {
        Some((u_p, s_p, v_p)) => {
            let mut u_cols = u_p.slice(s![.., ..l]).to_owned();
            let mut s_new = s_p.slice(s![..l]).to_owned();
            let mut v_cols = v_p.slice(s![.., ..l]).to_owned();
            comm.broadcast_mat(0, &mut u_cols)?;
            comm.broadcast(0, s_new.as_slice_mut().expect("contiguous"))?;
            comm.broadcast_mat(0, &mut v_cols)?;
            (u_cols, s_new, v_cols)
        }
        None => {
            let mut u_cols = Array2::<f64>::zeros((c, l));
            let mut s_new = Array1::<f64>::zeros(l);
            let mut v_cols = Array2::<f64>::zeros((c, l));
            comm.broadcast_mat(0, &mut u_cols)?;
            comm.broadcast(0, s_new.as_slice_mut().expect("contiguous"))?;
            comm.broadcast_mat(0, &mut v_cols)?;
            (u_cols, s_new, v_cols)
        }
    };
    clock.lap(UpdateLine::Broadcast);

    // V ← [V 0; 0 I_k] V'(:,1:l)
    let t_new = state.t_seen + k;
    let mut v_new = Array2::<f64>::zeros((t_new, l));
    v_new
        .slice_mut(s![..state.t_seen, ..])
        .assign(&state.v.dot(&v_cols.slice(s![..q, ..])));
    v_new.slice_mut(s![state.t_seen.., ..]).assign(&v_cols.slice(s![q.., ..]));
    state.v = v_new;
    state.s = s_new;
    clock.lap(UpdateLine::UpdateV);

    // U ← Q_Q U'(:,1:l)
    state.u_local = q_q.dot(&u_cols);
    state.t_seen = t_new;
    clock.lap(UpdateLine::UpdateU);

    if let Some(t) = clock.timings.as_deref_mut() {
        t.count_update();
    }

    Ok(UpdateStats {
        rank: l,
        bunch_deflations: p_qr.deflated.len(),
        basis_deflations,
    })
}

/// Max-abs deviation of `UᵀU` (globalized) and `VᵀV` from the identity.
pub fn orthogonality_defect(state: &ItSvdState, comm: &Communicator) -> Result<(f64, f64)> {
    let mut utu = state.u_local.t().dot(&state.u_local);
    comm.all_reduce_mat(&mut utu)?;
    let q = state.rank();
    let mut u_defect = 0.0_f64;
    let mut v_defect = 0.0_f64;
    let vtv = state.v.t().dot(&state.v);
    for i in 0..q {
        for j in 0..q {
            let target = if i == j { 1.0 } else { 0.0 };
            u_defect = u_defect.max((utu[[i, j]] - target).abs());
            v_defect = v_defect.max((vtv[[i, j]] - target).abs());
        }
    }
    Ok((u_defect, v_defect))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::comm::{run_spmd, SpmdMode};
    use crate::snapshot::{assemble_state_vector, ReferenceScales};
    use ndarray::array;

    fn vector(vals: &[f64]) -> LocalStateVector {
        let scales = ReferenceScales::dimensionless(1, 1).unwrap();
        assemble_state_vector(&[Array1::from_vec(vals.to_vec())], &scales, 0, 0).unwrap()
    }

    use ndarray::Array1;

    #[test]
    fn rank_one_init_three_four_five() {
        let comm = Communicator::solo();
        let st = init_rank_one(&vector(&[3.0, 4.0]), &comm).unwrap();
        assert!((st.singular_values()[0] - 5.0).abs() < 1e-15);
        assert!((st.u_local()[[0, 0]] - 0.6).abs() < 1e-15);
        assert!((st.u_local()[[1, 0]] - 0.8).abs() < 1e-15);
        assert_eq!(st.v()[[0, 0]], 1.0);
        assert!((st.energy() - 25.0).abs() < 1e-12);
    }

    #[test]
    fn rank_one_init_split_matches_serial() {
        let serial = {
            let comm = Communicator::solo();
            init_rank_one(&vector(&[3.0, 4.0]), &comm).unwrap()
        };
        let results = run_spmd(2, SpmdMode::Threaded, |comm| {
            let vals = if comm.partition_id() == 0 { [3.0] } else { [4.0] };
            init_rank_one(&vector(&vals), comm)
        })
        .unwrap();
        for st in &results {
            assert!((st.singular_values()[0] - serial.singular_values()[0]).abs() < 1e-15);
        }
        assert!((results[0].u_local()[[0, 0]] - 0.6).abs() < 1e-15);
        assert!((results[1].u_local()[[0, 0]] - 0.8).abs() < 1e-15);
    }

    #[test]
    fn zero_first_snapshot_is_a_degenerate_start() {
        let comm = Communicator::solo();
        let err = init_rank_one(&vector(&[0.0, 0.0]), &comm).unwrap_err();
        assert!(matches!(err, Error::DegenerateStart));
    }

    #[test]
    fn energy_accumulates_exactly() {
        let comm = Communicator::solo();
        let mut st = init_rank_one(&vector(&[3.0, 4.0]), &comm).unwrap();
        let e = accumulate_energy(&mut st, &vector(&[0.0, 0.0]), &comm).unwrap();
        assert_eq!(e, 25.0);
    }

    #[test]
    fn gram_schmidt_identity_input() {
        let comm = Communicator::solo();
        let a = Array2::<f64>::eye(4);
        let qr = parallel_gram_schmidt(&a, &comm).unwrap();
        assert_eq!(qr.q, Array2::<f64>::eye(4));
        assert_eq!(qr.r, Array2::<f64>::eye(4));
        assert!(qr.deflated.is_empty());
    }

    #[test]
    fn gram_schmidt_hand_example() {
        // Columns (1,1) and (0,1): classic worked example.
        let comm = Communicator::solo();
        let a = array![[1.0, 0.0], [1.0, 1.0]];
        let qr = parallel_gram_schmidt(&a, &comm).unwrap();
        let is = 1.0 / 2.0_f64.sqrt();
        assert!((qr.q[[0, 0]] - is).abs() < 1e-15);
        assert!((qr.q[[1, 0]] - is).abs() < 1e-15);
        assert!((qr.q[[0, 1]] + is).abs() < 1e-15);
        assert!((qr.q[[1, 1]] - is).abs() < 1e-15);
        assert!((qr.r[[0, 0]] - 2.0_f64.sqrt()).abs() < 1e-15);
        assert!((qr.r[[0, 1]] - is).abs() < 1e-15);
        assert!((qr.r[[1, 1]] - is).abs() < 1e-15);
        assert_eq!(qr.r[[1, 0]], 0.0);
    }

    #[test]
    fn gram_schmidt_distributed_reconstruction() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        let global = Array2::from_shape_fn((50, 5), |_| rng.gen_range(-1.0..1.0));
        let per = 10;
        let results = run_spmd(5, SpmdMode::Threaded, |comm| {
            let p = comm.partition_id();
            let block = global.slice(s![p * per..(p + 1) * per, ..]).to_owned();
            let qr = parallel_gram_schmidt(&block, comm)?;
            // Globalized QᵀQ must be the identity.
            let mut qtq = qr.q.t().dot(&qr.q);
            comm.all_reduce_mat(&mut qtq)?;
            let defect = (0..5)
                .flat_map(|i| (0..5).map(move |j| (i, j)))
                .map(|(i, j)| (qtq[[i, j]] - if i == j { 1.0 } else { 0.0 }).abs())
                .fold(0.0, f64::max);
            let resid = (&qr.q.dot(&qr.r) - &block)
                .iter()
                .map(|x| x.abs())
                .fold(0.0, f64::max);
            Ok((defect, resid))
        })
        .unwrap();
        for (defect, resid) in results {
            assert!(defect < 1e-12, "orthogonality defect {defect}");
            assert!(resid < 1e-12, "reconstruction residual {resid}");
        }
    }

    #[test]
    fn gram_schmidt_deflates_dependent_columns() {
        let comm = Communicator::solo();
        let a = array![[1.0, 2.0], [1.0, 2.0]];
        let qr = parallel_gram_schmidt(&a, &comm).unwrap();
        assert_eq!(qr.deflated, vec![1]);
        assert_eq!(qr.r[[1, 1]], 0.0);
        assert!(qr.q.column(1).iter().all(|&x| x == 0.0));
    }

    #[test]
    fn zero_column_update_leaves_singular_values() {
        let comm = Communicator::solo();
        let mut st = init_rank_one(&vector(&[3.0, 4.0]), &comm).unwrap();
        accumulate_energy(&mut st, &vector(&[0.0, 0.0]), &comm).unwrap();
        let bunch = Array2::<f64>::zeros((2, 1));
        let policy = TruncationPolicy::fixed(10).unwrap();
        update(
            &mut st,
            &bunch,
            &comm,
            &policy,
            &UpdateOptions::default(),
            None,
        )
        .unwrap();
        assert_eq!(st.rank(), 1); // the exact zero singular value is truncated
        assert!((st.singular_values()[0] - 5.0).abs() < 1e-12);
        assert_eq!(st.t_seen(), 2);
        // The new snapshot's V row is exactly zero -> its reconstruction is 0.
        assert_eq!(st.v()[[1, 0]], 0.0);
    }

    #[test]
    fn incremental_matches_oracle_on_small_matrix() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(17);
        let y = Array2::from_shape_fn((6, 5), |_| rng.gen_range(-1.0..1.0));
        let comm = Communicator::solo();
        let scales = ReferenceScales::dimensionless(1, 1).unwrap();

        let col = |t: usize| {
            assemble_state_vector(&[y.column(t).to_owned()], &scales, t, 0).unwrap()
        };
        let mut st = init_rank_one(&col(0), &comm).unwrap();
        let policy = TruncationPolicy::fixed(5).unwrap();
        // Two more columns in each of two bunches (b=2).
        for chunk in [[1usize, 2], [3, 4]] {
            let mut bunch = Array2::<f64>::zeros((6, 2));
            for (i, &t) in chunk.iter().enumerate() {
                accumulate_energy(&mut st, &col(t), &comm).unwrap();
                bunch.column_mut(i).assign(&y.column(t));
            }
            update(&mut st, &bunch, &comm, &policy, &UpdateOptions::default(), None).unwrap();
        }
        assert_eq!(st.t_seen(), 5);

        let oracle = nalgebra::DMatrix::from_fn(6, 5, |i, j| y[[i, j]])
            .svd(false, false)
            .singular_values;
        for i in 0..5 {
            assert!(
                (st.singular_values()[i] - oracle[i]).abs() <= 1e-12 * oracle[0],
                "sv {i}: {} vs {}",
                st.singular_values()[i],
                oracle[i]
            );
        }

        // Full-rank reconstruction reproduces the matrix.
        let vt = st.v().t().to_owned();
        let mut svt = vt.clone();
        for (i, mut row) in svt.rows_mut().into_iter().enumerate() {
            let si = st.singular_values()[i];
            row.mapv_inplace(|x| x * si);
        }
        let rec = st.u_local().dot(&svt);
        for (a, b) in rec.iter().zip(y.iter()) {
            assert!((a - b).abs() < 1e-11);
        }

        let (ud, vd) = orthogonality_defect(&st, &comm).unwrap();
        assert!(ud < 1e-12 && vd < 1e-12);
    }

    #[test]
    fn basic_and_enhanced_agree_in_exact_regime() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(23);
        let y = Array2::from_shape_fn((8, 6), |_| rng.gen_range(-1.0..1.0));
        let comm = Communicator::solo();
        let scales = ReferenceScales::dimensionless(1, 1).unwrap();
        let policy = TruncationPolicy::fixed(6).unwrap();

        let built = |options: UpdateOptions| {
            let col = |t: usize| {
                assemble_state_vector(&[y.column(t).to_owned()], &scales, t, 0).unwrap()
            };
            let mut st = init_rank_one(&col(0), &comm).unwrap();
            for t in 1..6 {
                accumulate_energy(&mut st, &col(t), &comm).unwrap();
                let bunch = y.column(t).to_owned().into_shape_with_order((8, 1)).unwrap();
                update(&mut st, &bunch, &comm, &policy, &options, None).unwrap();
            }
            st
        };
        let a = built(UpdateOptions {
            variant: Variant::Basic,
            reortho: true,
        });
        let b = built(UpdateOptions::default());
        for i in 0..6 {
            assert!((a.singular_values()[i] - b.singular_values()[i]).abs() < 1e-10);
        }
    }

    #[test]
    fn enhanced_without_reortho_is_rejected() {
        let opts = UpdateOptions {
            variant: Variant::Enhanced,
            reortho: false,
        };
        assert!(matches!(opts.validate(), Err(Error::Argument(_))));
    }

    #[test]
    fn rank_request_is_clamped_to_available() {
        let comm = Communicator::solo();
        let mut st = init_rank_one(&vector(&[1.0, 2.0, 3.0]), &comm).unwrap();
        accumulate_energy(&mut st, &vector(&[4.0, 5.0, 6.0]), &comm).unwrap();
        let bunch = Array2::from_shape_vec((3, 1), vec![4.0, 5.0, 6.0]).unwrap();
        let policy = TruncationPolicy::fixed(50).unwrap();
        let stats = update(&mut st, &bunch, &comm, &policy, &UpdateOptions::default(), None)
            .unwrap();
        assert_eq!(stats.rank, 2); // q + k = 2 < 50
        assert_eq!(st.rank(), 2);
    }
}
