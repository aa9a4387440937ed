//! Construction driver: the per-partition time loop feeding the incremental
//! factorization, plus helpers mapping between the canonical global row
//! ordering and per-partition local layouts.
//!
//! The canonical ordering concatenates states over the full spatial domain
//! (row = state * total_dof + i). A partition owns the spatial slice
//! `[offset, offset + count)` of every state block, so its local vector is
//! the state-major concatenation of those slices. Singular values do not
//! depend on the row ordering, which is what makes partition layouts
//! interchangeable.

use crate::adaptive::TruncationPolicy;
use crate::comm::Communicator;
use crate::error::{Error, Result};
use crate::reconstruct::evaluate_functionals;
use crate::snapshot::{
    assemble_state_vector, BunchBuffer, PartitionLayout, ReferenceScales,
};
use crate::svd::{accumulate_energy, init_rank_one, update, ItSvdState, UpdateOptions};
use crate::timing::UpdateTimings;
use ndarray::Array1;

/// A stream of raw per-state snapshot fields, already partitioned.
pub trait SnapshotSource: Sync {
    fn num_steps(&self) -> usize;
    fn partitions(&self) -> usize;
    fn scales(&self) -> &ReferenceScales;
    /// Spatial DoF owned by `partition`.
    fn local_spatial_dof(&self, partition: usize) -> usize;
    /// Raw fields (one array per state, each `local_spatial_dof` long) of
    /// time step `t` on `partition`.
    fn fields(&self, t: usize, partition: usize) -> Result<Vec<Array1<f64>>>;
}

/// Named linear functionals with weights over the canonical global vector.
#[derive(Debug, Clone, Default)]
pub struct FunctionalSet {
    pub ids: Vec<String>,
    /// One weight vector per functional, length `num_states * total_dof`.
    pub weights: Vec<Array1<f64>>,
}

impl FunctionalSet {
    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }
}

/// Restriction of a canonical global vector to one partition's local layout.
pub fn localize_global_vector(
    global: &Array1<f64>,
    layout: &PartitionLayout,
    num_states: usize,
    partition: usize,
) -> Result<Array1<f64>> {
    let total = layout.total();
    if global.len() != num_states * total {
        return Err(Error::Argument(format!(
            "global vector has {} entries, expected {}",
            global.len(),
            num_states * total
        )));
    }
    let count = layout.count(partition);
    let off = layout.offset(partition);
    let mut local = Array1::<f64>::zeros(num_states * count);
    for s in 0..num_states {
        let src = global.slice(ndarray::s![s * total + off..s * total + off + count]);
        local
            .slice_mut(ndarray::s![s * count..(s + 1) * count])
            .assign(&src);
    }
    Ok(local)
}

/// Merges per-partition state fields back into canonical global fields.
pub fn merge_partition_fields(
    parts: &[Vec<Array1<f64>>],
    layout: &PartitionLayout,
    num_states: usize,
) -> Result<Vec<Array1<f64>>> {
    if parts.len() != layout.partitions() {
        return Err(Error::Argument(format!(
            "{} partition results for a {}-partition layout",
            parts.len(),
            layout.partitions()
        )));
    }
    let total = layout.total();
    let mut fields = vec![Array1::<f64>::zeros(total); num_states];
    for (p, local) in parts.iter().enumerate() {
        if local.len() != num_states {
            return Err(Error::Argument(format!(
                "partition {p} returned {} states, expected {num_states}",
                local.len()
            )));
        }
        let off = layout.offset(p);
        let count = layout.count(p);
        for (s, f) in local.iter().enumerate() {
            fields[s]
                .slice_mut(ndarray::s![off..off + count])
                .assign(&f.slice(ndarray::s![..count]));
        }
    }
    Ok(fields)
}

/// Construction parameters.
#[derive(Debug, Clone)]
pub struct ConstructionConfig {
    pub bunch: usize,
    pub policy: TruncationPolicy,
    pub options: UpdateOptions,
}

/// Per-partition result of a construction run. The functional log and the
/// factorization's global parts are identical on every partition.
#[derive(Debug)]
pub struct PartitionBuild {
    pub state: ItSvdState,
    /// `num_steps` rows of functional values (empty when no functionals).
    pub functional_log: Vec<Vec<f64>>,
    pub timings: UpdateTimings,
    pub bunch_deflations: usize,
    pub basis_deflations: usize,
}

/// Runs the construction loop for one partition: assemble, log functionals,
/// accumulate energy, buffer, and update whenever the bunch fills or the
/// stream ends. With `full_store` set, every normalized snapshot is also
/// written verbatim to that directory as the full-storage baseline.
pub fn construct_partition<S: SnapshotSource>(
    source: &S,
    functionals: Option<&FunctionalSet>,
    cfg: &ConstructionConfig,
    full_store: Option<&std::path::Path>,
    comm: &Communicator,
) -> Result<PartitionBuild> {
    cfg.options.validate()?;
    if cfg.bunch == 0 {
        return Err(Error::Argument("bunch size must be at least 1".into()));
    }
    let steps = source.num_steps();
    if steps == 0 {
        return Err(Error::Argument("snapshot stream is empty".into()));
    }
    let p = comm.partition_id();
    let scales = source.scales();
    let rows = source.local_spatial_dof(p) * scales.num_states();

    // Functional weights restricted to this partition.
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

    let mut state: Option<ItSvdState> = None;
    let mut bunch = BunchBuffer::new(rows, cfg.bunch)?;
    let mut timings = UpdateTimings::new();
    let mut functional_log = Vec::new();
    let mut bunch_deflations = 0;
    let mut basis_deflations = 0;
    let mut baseline = match full_store {
        Some(dir) => Some(crate::store::FullStoreWriter::create(dir, p, rows, steps)?),
        None => None,
    };

    for t in 0..steps {
        let fields = source.fields(t, p)?;
        let y = assemble_state_vector(&fields, scales, t, p)?;
        if let Some(w) = baseline.as_mut() {
            w.append(y.values())?;
        }
        if !local_weights.is_empty() {
            functional_log.push(evaluate_functionals(y.values(), &local_weights, comm)?);
        }
        match state.as_mut() {
            None => {
                state = Some(init_rank_one(&y, comm)?);
            }
            Some(st) => {
                accumulate_energy(st, &y, comm)?;
                let full = bunch.push(&y)?;
                if full || t + 1 == steps {
                    let b = bunch.take();
                    let stats =
                        update(st, &b, comm, &cfg.policy, &cfg.options, Some(&mut timings))?;
                    bunch_deflations += stats.bunch_deflations;
                    basis_deflations += stats.basis_deflations;
                }
            }
        }
    }
    if let Some(w) = baseline {
        w.finalize(scales, comm)?;
    }

    Ok(PartitionBuild {
        state: state.expect("at least one step"),
        functional_log,
        timings,
        bunch_deflations,
        basis_deflations,
    })
}
