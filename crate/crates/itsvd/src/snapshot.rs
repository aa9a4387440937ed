//! Snapshot assembly: raw per-state fields are scaled into dimensionless
//! local state vectors, buffered in the bunch matrix between updates, and
//! rescaled back on reconstruction.
//!
//! A local state vector concatenates all S states of one partition in
//! state-major order; state `s` occupies the contiguous block
//! `[s*L, (s+1)*L)`. Each state is divided by its reference value and by the
//! global degree-of-freedom count, which keeps later global matrix products
//! inside comfortably representable ranges.

use crate::error::{Error, Result};
use ndarray::{Array1, Array2, ArrayView1};
use serde::{Deserialize, Serialize};

/// Reference values used for (de)normalization.
///
/// The same scales must be applied during construction and evaluation; they
/// are persisted in the manifest for that reason. `dof_scale` is the global
/// spatial degree-of-freedom count summed over partitions, which makes the
/// normalization independent of the partition layout.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReferenceScales {
    per_state_ref: Vec<f64>,
    dof_scale: u64,
}

impl ReferenceScales {
    pub fn new(per_state_ref: Vec<f64>, dof_scale: u64) -> Result<Self> {
        if per_state_ref.is_empty() {
            return Err(Error::Argument("at least one state is required".into()));
        }
        if let Some((s, bad)) = per_state_ref
            .iter()
            .enumerate()
            .find(|(_, r)| !(r.is_finite() && **r > 0.0))
        {
            return Err(Error::Argument(format!(
                "reference value for state {s} must be strictly positive, got {bad}"
            )));
        }
        if dof_scale == 0 {
            return Err(Error::Argument("dof_scale must be positive".into()));
        }
        Ok(ReferenceScales {
            per_state_ref,
            dof_scale,
        })
    }

    /// Dimensionless states use a reference value of one.
    pub fn dimensionless(num_states: usize, dof_scale: u64) -> Result<Self> {
        Self::new(vec![1.0; num_states], dof_scale)
    }

    pub fn num_states(&self) -> usize {
        self.per_state_ref.len()
    }

    pub fn per_state_ref(&self) -> &[f64] {
        &self.per_state_ref
    }

    pub fn dof_scale(&self) -> u64 {
        self.dof_scale
    }

    /// Combined divisor for state `s`: `phi_ref[s] * dof_scale`.
    fn divisor(&self, state: usize) -> f64 {
        self.per_state_ref[state] * self.dof_scale as f64
    }
}

/// One partition's dimensionless snapshot at a single time step.
#[derive(Debug, Clone)]
pub struct LocalStateVector {
    values: Array1<f64>,
    time_index: usize,
    partition_id: usize,
}

impl LocalStateVector {
    pub fn values(&self) -> ArrayView1<'_, f64> {
        self.values.view()
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn time_index(&self) -> usize {
        self.time_index
    }

    pub fn partition_id(&self) -> usize {
        self.partition_id
    }
}

/// Builds the dimensionless local state vector from raw per-state fields.
///
/// Block `s` of the result equals `fields[s] / (phi_ref[s] * dof_scale)`.
/// All fields must have equal length and finite entries.
pub fn assemble_state_vector(
    fields: &[Array1<f64>],
    scales: &ReferenceScales,
    time_index: usize,
    partition_id: usize,
) -> Result<LocalStateVector> {
    if fields.len() != scales.num_states() {
        return Err(Error::Argument(format!(
            "expected {} state fields, got {}",
            scales.num_states(),
            fields.len()
        )));
    }
    let local_dof = fields[0].len();
    for (s, f) in fields.iter().enumerate() {
        if f.len() != local_dof {
            return Err(Error::Argument(format!(
                "state {s} has {} entries, expected {local_dof}",
                f.len()
            )));
        }
        if let Some(i) = f.iter().position(|x| !x.is_finite()) {
            return Err(Error::Data(format!(
                "non-finite value in state {s} at index {i} (t={time_index})"
            )));
        }
    }
    let mut values = Array1::<f64>::zeros(scales.num_states() * local_dof);
    for (s, f) in fields.iter().enumerate() {
        let inv = 1.0 / scales.divisor(s);
        let mut block = values.slice_mut(ndarray::s![s * local_dof..(s + 1) * local_dof]);
        block.assign(f);
        block.mapv_inplace(|x| x * inv);
    }
    Ok(LocalStateVector {
        values,
        time_index,
        partition_id,
    })
}

/// Inverts [`assemble_state_vector`]: `field[s] = phi_ref[s] * dof_scale * block_s`.
pub fn disassemble_state_vector(
    y: ArrayView1<'_, f64>,
    scales: &ReferenceScales,
) -> Result<Vec<Array1<f64>>> {
    let states = scales.num_states();
    if y.len() % states != 0 {
        return Err(Error::Argument(format!(
            "vector of length {} cannot split into {} state blocks",
            y.len(),
            states
        )));
    }
    let local_dof = y.len() / states;
    let mut fields = Vec::with_capacity(states);
    for s in 0..states {
        let factor = scales.divisor(s);
        let block = y.slice(ndarray::s![s * local_dof..(s + 1) * local_dof]);
        fields.push(block.mapv(|x| x * factor));
    }
    Ok(fields)
}

/// Fixed-capacity column buffer of pending snapshots.
///
/// Snapshots accumulate until the buffer is full (or the stream ends), at
/// which point the filled columns are handed to the factorization update as
/// a `rows x fill_count` matrix, never zero-padded.
#[derive(Debug, Clone)]
pub struct BunchBuffer {
    columns: Array2<f64>,
    fill_count: usize,
}

impl BunchBuffer {
    pub fn new(rows: usize, capacity: usize) -> Result<Self> {
        if capacity == 0 {
            return Err(Error::Argument("bunch capacity must be at least 1".into()));
        }
        Ok(BunchBuffer {
            columns: Array2::zeros((rows, capacity)),
            fill_count: 0,
        })
    }

    pub fn capacity(&self) -> usize {
        self.columns.ncols()
    }

    pub fn fill_count(&self) -> usize {
        self.fill_count
    }

    pub fn is_empty(&self) -> bool {
        self.fill_count == 0
    }

    pub fn is_full(&self) -> bool {
        self.fill_count == self.capacity()
    }

    /// Appends a snapshot column. Returns `true` when the buffer just became
    /// full, i.e. an update must be applied before the next push.
    pub fn push(&mut self, y: &LocalStateVector) -> Result<bool> {
        if self.is_full() {
            return Err(Error::Logic(
                "push into a full bunch buffer; flush it with an update first".into(),
            ));
        }
        if y.len() != self.columns.nrows() {
            return Err(Error::Argument(format!(
                "snapshot length {} does not match buffer rows {}",
                y.len(),
                self.columns.nrows()
            )));
        }
        self.columns.column_mut(self.fill_count).assign(&y.values());
        self.fill_count += 1;
        Ok(self.is_full())
    }

    /// Removes and returns the filled columns as a `rows x fill_count` matrix.
    pub fn take(&mut self) -> Array2<f64> {
        let filled = self
            .columns
            .slice(ndarray::s![.., ..self.fill_count])
            .to_owned();
        self.fill_count = 0;
        filled
    }
}

/// Block distribution of the global spatial degrees of freedom over
/// partitions: the remainder is spread over the leading partitions, so sizes
/// differ by at most one.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PartitionLayout {
    counts: Vec<usize>,
    offsets: Vec<usize>,
}

impl PartitionLayout {
    pub fn split(total_spatial_dof: usize, partitions: usize) -> Result<Self> {
        if partitions == 0 {
            return Err(Error::Argument("partition count must be at least 1".into()));
        }
        if total_spatial_dof < partitions {
            return Err(Error::Argument(format!(
                "cannot split {total_spatial_dof} spatial DoF over {partitions} partitions"
            )));
        }
        let base = total_spatial_dof / partitions;
        let extra = total_spatial_dof % partitions;
        let counts: Vec<usize> = (0..partitions)
            .map(|p| base + usize::from(p < extra))
            .collect();
        let mut offsets = Vec::with_capacity(partitions);
        let mut acc = 0;
        for &c in &counts {
            offsets.push(acc);
            acc += c;
        }
        Ok(PartitionLayout { counts, offsets })
    }

    pub fn from_counts(counts: Vec<usize>) -> Result<Self> {
        if counts.is_empty() {
            return Err(Error::Argument("partition count must be at least 1".into()));
        }
        let mut offsets = Vec::with_capacity(counts.len());
        let mut acc = 0;
        for &c in &counts {
            offsets.push(acc);
            acc += c;
        }
        Ok(PartitionLayout { counts, offsets })
    }

    pub fn partitions(&self) -> usize {
        self.counts.len()
    }

    pub fn total(&self) -> usize {
        self.counts.iter().sum()
    }

    /// Spatial DoF owned by partition `p`.
    pub fn count(&self, p: usize) -> usize {
        self.counts[p]
    }

    /// Global spatial offset of partition `p`'s block.
    pub fn offset(&self, p: usize) -> usize {
        self.offsets[p]
    }

    pub fn counts(&self) -> &[usize] {
        &self.counts
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn assemble_divides_by_reference_and_dof_scale() {
        let scales = ReferenceScales::new(vec![2.0], 2).unwrap();
        let y = assemble_state_vector(&[array![2.0, 4.0]], &scales, 0, 0).unwrap();
        assert_eq!(y.values().to_vec(), vec![0.5, 1.0]);
    }

    #[test]
    fn assemble_two_states() {
        let scales = ReferenceScales::new(vec![10.0, 1.0], 4).unwrap();
        let y = assemble_state_vector(&[array![10.0], array![-3.0]], &scales, 0, 0).unwrap();
        assert_eq!(y.values().to_vec(), vec![0.25, -0.75]);
    }

    #[test]
    fn round_trip_is_identity_to_rounding() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let scales = ReferenceScales::new(vec![3.7, 0.04, 11.0], 123).unwrap();
        let fields: Vec<Array1<f64>> = (0..3)
            .map(|_| Array1::from_shape_fn(17, |_| rng.gen_range(-5.0..5.0)))
            .collect();
        let y = assemble_state_vector(&fields, &scales, 0, 0).unwrap();
        let back = disassemble_state_vector(y.values(), &scales).unwrap();
        for (orig, rec) in fields.iter().zip(back.iter()) {
            for (a, b) in orig.iter().zip(rec.iter()) {
                assert!((a - b).abs() <= 1e-15 * a.abs().max(1.0));
            }
        }
        // And assemble(disassemble(y)) == y.
        let y2 = assemble_state_vector(&back, &scales, 0, 0).unwrap();
        for (a, b) in y.values().iter().zip(y2.values().iter()) {
            assert!((a - b).abs() <= 1e-15 * a.abs().max(1e-300));
        }
    }

    #[test]
    fn assemble_is_linear() {
        let scales = ReferenceScales::new(vec![2.5], 7).unwrap();
        let f = array![1.0, -2.0, 3.0];
        let y1 = assemble_state_vector(&[f.clone()], &scales, 0, 0).unwrap();
        let y2 = assemble_state_vector(&[f.mapv(|x| 4.0 * x)], &scales, 0, 0).unwrap();
        for (a, b) in y1.values().iter().zip(y2.values().iter()) {
            assert_eq!(4.0 * a, *b);
        }
    }

    #[test]
    fn non_finite_input_names_state_and_index() {
        let scales = ReferenceScales::new(vec![1.0, 1.0], 1).unwrap();
        let err = assemble_state_vector(
            &[array![0.0, 1.0], array![0.0, f64::NAN]],
            &scales,
            3,
            0,
        )
        .unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("state 1") && msg.contains("index 1"), "{msg}");
    }

    #[test]
    fn field_length_mismatch_is_rejected() {
        let scales = ReferenceScales::new(vec![1.0, 1.0], 1).unwrap();
        let err =
            assemble_state_vector(&[array![0.0, 1.0], array![0.0]], &scales, 0, 0).unwrap_err();
        assert!(matches!(err, Error::Argument(_)));
    }

    #[test]
    fn zero_vector_disassembles_to_zero_fields() {
        let scales = ReferenceScales::new(vec![5.0, 2.0], 9).unwrap();
        let fields = disassemble_state_vector(Array1::zeros(8).view(), &scales).unwrap();
        assert!(fields.iter().all(|f| f.iter().all(|&x| x == 0.0)));
    }

    #[test]
    fn bunch_reports_full_on_capacity() {
        let scales = ReferenceScales::new(vec![1.0], 1).unwrap();
        let y = |t| assemble_state_vector(&[array![t as f64]], &scales, t, 0).unwrap();

        let mut b1 = BunchBuffer::new(1, 1).unwrap();
        assert!(b1.push(&y(0)).unwrap());

        let mut b3 = BunchBuffer::new(1, 3).unwrap();
        assert!(!b3.push(&y(0)).unwrap());
        assert!(!b3.push(&y(1)).unwrap());
        assert!(b3.push(&y(2)).unwrap());
        assert!(matches!(b3.push(&y(3)), Err(Error::Logic(_))));
    }

    #[test]
    fn partial_take_returns_only_filled_columns() {
        let scales = ReferenceScales::new(vec![1.0], 1).unwrap();
        let mut b = BunchBuffer::new(1, 5).unwrap();
        for t in 0..2 {
            let y = assemble_state_vector(&[array![t as f64 + 1.0]], &scales, t, 0).unwrap();
            b.push(&y).unwrap();
        }
        let m = b.take();
        assert_eq!(m.dim(), (1, 2));
        assert_eq!(m[[0, 0]], 1.0);
        assert_eq!(m[[0, 1]], 2.0);
        assert!(b.is_empty());
    }

    #[test]
    fn layout_spreads_remainder() {
        let layout = PartitionLayout::split(100, 8).unwrap();
        assert_eq!(layout.counts(), &[13, 13, 13, 13, 12, 12, 12, 12]);
        assert_eq!(layout.total(), 100);
        assert_eq!(layout.offset(4), 52);
    }

    #[test]
    fn invalid_scales_are_rejected() {
        assert!(ReferenceScales::new(vec![0.0], 4).is_err());
        assert!(ReferenceScales::new(vec![-1.0], 4).is_err());
        assert!(ReferenceScales::new(vec![1.0], 0).is_err());
        assert!(ReferenceScales::new(vec![], 4).is_err());
    }
}
