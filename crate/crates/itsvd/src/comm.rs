//! Deterministic SPMD collectives over simulated partitions.
//!
//! Every partition runs the same program on its own row block; `all_reduce_sum`
//! and `broadcast` are the only synchronization points, mirroring the
//! ALLREDUCE/BCAST pair of an MPI build. Reductions always combine
//! contributions in ascending partition order, so results are bitwise
//! reproducible for a fixed partition count regardless of thread scheduling.
//!
//! Misuse (mismatched shapes, diverging call sequences, a partition exiting
//! while others wait) poisons the context and surfaces as
//! [`Error::CollectiveContract`] instead of deadlocking or corrupting data.

use std::cell::Cell;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::sync::{Arc, Condvar, Mutex};

use crate::error::{Error, Result};
use ndarray::Array2;

/// How `run_spmd` schedules the partitions.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SpmdMode {
    /// One thread per partition; collectives are the only rendezvous.
    Threaded,
    /// Strictly serialized round-robin execution for debugging. At most one
    /// partition executes user code at any time; results are identical to
    /// `Threaded` because the combine order is fixed either way.
    RoundRobin,
}

#[derive(Debug, Clone, PartialEq)]
struct OpSignature {
    kind: OpKind,
    shape: Vec<usize>,
    root: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum OpKind {
    AllReduceSum,
    Broadcast,
}

#[derive(Debug, Clone)]
struct Poison {
    partition: usize,
    epoch: u64,
    detail: String,
}

struct Slot {
    /// Epoch currently accepting deposits.
    epoch: u64,
    signature: Option<OpSignature>,
    data: Vec<Option<Vec<f64>>>,
    contributed: Vec<bool>,
    arrived: usize,
    /// Completed collective: (epoch, result), kept until overwritten by the
    /// next epoch. Safe because no partition can deposit into epoch e+1
    /// before it has collected epoch e.
    last_result: Option<(u64, Arc<Vec<f64>>)>,
    /// Round-robin execution token; ignored in threaded mode.
    turn: usize,
    done: Vec<bool>,
    poison: Option<Poison>,
}

struct Shared {
    partitions: usize,
    mode: SpmdMode,
    slot: Mutex<Slot>,
    cv: Condvar,
}

impl Shared {
    fn new(partitions: usize, mode: SpmdMode) -> Self {
        Shared {
            partitions,
            mode,
            slot: Mutex::new(Slot {
                epoch: 0,
                signature: None,
                data: vec![None; partitions],
                contributed: vec![false; partitions],
                arrived: 0,
                last_result: None,
                turn: 0,
                done: vec![false; partitions],
                poison: None,
            }),
            cv: Condvar::new(),
        }
    }

    fn poison_err(p: &Poison) -> Error {
        Error::CollectiveContract {
            partition: p.partition,
            epoch: p.epoch,
            detail: p.detail.clone(),
        }
    }

    /// A partition is done; anybody still waiting on a collective that this
    /// partition never entered can no longer make progress.
    fn finish(&self, partition: usize) {
        let mut slot = self.slot.lock().unwrap();
        slot.done[partition] = true;
        if slot.arrived > 0 && slot.poison.is_none() {
            if let Some(missing) = (0..self.partitions)
                .find(|&x| slot.done[x] && !slot.contributed[x])
            {
                slot.poison = Some(Poison {
                    partition: missing,
                    epoch: slot.epoch,
                    detail: "partition exited before entering the collective".into(),
                });
            }
        }
        if self.mode == SpmdMode::RoundRobin && slot.turn == partition {
            slot.turn = partition + 1;
        }
        self.cv.notify_all();
    }

    /// Round-robin start gate: a partition may begin executing only once it
    /// holds the token.
    fn wait_start(&self, partition: usize) {
        if self.mode != SpmdMode::RoundRobin {
            return;
        }
        let mut slot = self.slot.lock().unwrap();
        while slot.turn != partition && slot.poison.is_none() {
            slot = self.cv.wait(slot).unwrap();
        }
    }

    fn collective(
        &self,
        partition: usize,
        my_epoch: u64,
        sig: OpSignature,
        payload: Option<Vec<f64>>,
    ) -> Result<Arc<Vec<f64>>> {
        let mut slot = self.slot.lock().unwrap();

        // Deposit phase.
        loop {
            if let Some(p) = &slot.poison {
                return Err(Self::poison_err(p));
            }
            let my_turn = self.mode != SpmdMode::RoundRobin || slot.turn == partition;
            if slot.epoch == my_epoch && my_turn {
                break;
            }
            slot = self.cv.wait(slot).unwrap();
        }

        match &slot.signature {
            None => slot.signature = Some(sig.clone()),
            Some(first) if *first != sig => {
                slot.poison = Some(Poison {
                    partition,
                    epoch: my_epoch,
                    detail: format!(
                        "collective signature mismatch: expected {:?}, got {:?}",
                        first, sig
                    ),
                });
                self.cv.notify_all();
                let p = slot.poison.clone().unwrap();
                return Err(Self::poison_err(&p));
            }
            Some(_) => {}
        }

        slot.data[partition] = payload;
        slot.contributed[partition] = true;
        slot.arrived += 1;
        if self.mode == SpmdMode::RoundRobin {
            // Hand the execution token to the next partition, which may be
            // blocked in its start gate, a deposit or a collect.
            slot.turn = partition + 1;
            self.cv.notify_all();
        }

        if slot.arrived > 0 && slot.poison.is_none() {
            if let Some(missing) = (0..self.partitions)
                .find(|&x| slot.done[x] && !slot.contributed[x])
            {
                slot.poison = Some(Poison {
                    partition: missing,
                    epoch: slot.epoch,
                    detail: "partition exited before entering the collective".into(),
                });
                self.cv.notify_all();
                let p = slot.poison.clone().unwrap();
                return Err(Self::poison_err(&p));
            }
        }

        if slot.arrived == self.partitions {
            let result = match sig.kind {
                OpKind::AllReduceSum => {
                    let len: usize = sig.shape.iter().product();
                    let mut acc = vec![0.0_f64; len];
                    // Summation in ascending partition order; this is the
                    // reduction-order contract the tests pin down.
                    for p in 0..self.partitions {
                        let contrib = slot.data[p].as_ref().expect("allreduce payload");
                        for (a, c) in acc.iter_mut().zip(contrib.iter()) {
                            *a += *c;
                        }
                    }
                    acc
                }
                OpKind::Broadcast => slot.data[sig.root].take().expect("broadcast payload"),
            };
            slot.last_result = Some((my_epoch, Arc::new(result)));
            slot.epoch += 1;
            slot.signature = None;
            slot.arrived = 0;
            for d in slot.data.iter_mut() {
                *d = None;
            }
            for c in slot.contributed.iter_mut() {
                *c = false;
            }
            if self.mode == SpmdMode::RoundRobin {
                slot.turn = 0;
            }
            self.cv.notify_all();
        }

        // Collect phase.
        loop {
            if let Some(p) = &slot.poison {
                return Err(Self::poison_err(p));
            }
            let ready = matches!(&slot.last_result, Some((e, _)) if *e == my_epoch);
            let my_turn = self.mode != SpmdMode::RoundRobin || slot.turn == partition;
            if ready && my_turn {
                let (_, res) = slot.last_result.as_ref().unwrap();
                // The token is kept through the following compute segment and
                // handed over at the next deposit (or at finish).
                return Ok(Arc::clone(res));
            }
            slot = self.cv.wait(slot).unwrap();
        }
    }

    fn poison(&self, partition: usize, epoch: u64, detail: String) {
        let mut slot = self.slot.lock().unwrap();
        if slot.poison.is_none() {
            slot.poison = Some(Poison {
                partition,
                epoch,
                detail,
            });
        }
        self.cv.notify_all();
    }
}

/// SPMD collective context for one partition.
///
/// Partition 0 is the designated master. Each communicator counts its own
/// collective calls (the epoch); partitions that fall out of lockstep abort
/// with a contract violation.
pub struct Communicator {
    partition_id: usize,
    partition_count: usize,
    epoch: Cell<u64>,
    shared: Option<Arc<Shared>>,
}

impl Communicator {
    /// Single-partition context; every collective is the identity.
    pub fn solo() -> Self {
        Communicator {
            partition_id: 0,
            partition_count: 1,
            epoch: Cell::new(0),
            shared: None,
        }
    }

    pub fn partition_id(&self) -> usize {
        self.partition_id
    }

    pub fn partition_count(&self) -> usize {
        self.partition_count
    }

    pub fn is_master(&self) -> bool {
        self.partition_id == 0
    }

    pub fn epoch(&self) -> u64 {
        self.epoch.get()
    }

    fn next_epoch(&self) -> u64 {
        let e = self.epoch.get();
        self.epoch.set(e + 1);
        e
    }

    fn run(&self, sig: OpSignature, payload: Option<Vec<f64>>) -> Result<Arc<Vec<f64>>> {
        let epoch = self.next_epoch();
        let shared = self.shared.as_ref().expect("multi-partition context");
        shared.collective(self.partition_id, epoch, sig, payload)
    }

    /// Elementwise sum over all partitions; every partition receives the
    /// identical result. Summation order is ascending partition id.
    pub fn all_reduce_sum(&self, buf: &mut [f64]) -> Result<()> {
        self.all_reduce_shaped(buf, vec![buf.len()])
    }

    fn all_reduce_shaped(&self, buf: &mut [f64], shape: Vec<usize>) -> Result<()> {
        if self.shared.is_none() {
            self.next_epoch();
            return Ok(());
        }
        let sig = OpSignature {
            kind: OpKind::AllReduceSum,
            shape,
            root: 0,
        };
        let res = self.run(sig, Some(buf.to_vec()))?;
        buf.copy_from_slice(&res);
        Ok(())
    }

    pub fn all_reduce_scalar(&self, x: f64) -> Result<f64> {
        let mut buf = [x];
        self.all_reduce_sum(&mut buf)?;
        Ok(buf[0])
    }

    /// All-reduce over a row-major matrix; the shape participates in the
    /// collective contract.
    pub fn all_reduce_mat(&self, m: &mut Array2<f64>) -> Result<()> {
        let shape = vec![m.nrows(), m.ncols()];
        let slice = m
            .as_slice_mut()
            .expect("matrices passed to collectives are standard layout");
        self.all_reduce_shaped(slice, shape)
    }

    /// Copies the root partition's buffer to every partition, bit-identically.
    pub fn broadcast(&self, root: usize, buf: &mut [f64]) -> Result<()> {
        self.broadcast_shaped(root, buf, vec![buf.len()])
    }

    fn broadcast_shaped(&self, root: usize, buf: &mut [f64], shape: Vec<usize>) -> Result<()> {
        if root >= self.partition_count {
            return Err(Error::Argument(format!(
                "broadcast root {} out of range for {} partitions",
                root, self.partition_count
            )));
        }
        if self.shared.is_none() {
            self.next_epoch();
            return Ok(());
        }
        let sig = OpSignature {
            kind: OpKind::Broadcast,
            shape,
            root,
        };
        let payload = (self.partition_id == root).then(|| buf.to_vec());
        let res = self.run(sig, payload)?;
        buf.copy_from_slice(&res);
        Ok(())
    }

    pub fn broadcast_scalar(&self, root: usize, x: f64) -> Result<f64> {
        let mut buf = [x];
        self.broadcast(root, &mut buf)?;
        Ok(buf[0])
    }

    pub fn broadcast_mat(&self, root: usize, m: &mut Array2<f64>) -> Result<()> {
        let shape = vec![m.nrows(), m.ncols()];
        let slice = m
            .as_slice_mut()
            .expect("matrices passed to collectives are standard layout");
        self.broadcast_shaped(root, slice, shape)
    }
}

/// Executes `worker` on `partitions` logical partitions to completion and
/// returns each partition's result, ordered by partition id.
///
/// Results are independent of scheduling: collectives combine in a fixed
/// order, and `SpmdMode::RoundRobin` serializes execution entirely without
/// changing any value.
pub fn run_spmd<R, F>(partitions: usize, mode: SpmdMode, worker: F) -> Result<Vec<R>>
where
    R: Send,
    F: Fn(&Communicator) -> Result<R> + Sync,
{
    if partitions == 0 {
        return Err(Error::Argument("partition count must be at least 1".into()));
    }
    if partitions == 1 {
        let comm = Communicator::solo();
        return Ok(vec![worker(&comm)?]);
    }

    let shared = Arc::new(Shared::new(partitions, mode));
    let mut results: Vec<Option<Result<R>>> = (0..partitions).map(|_| None).collect();

    std::thread::scope(|scope| {
        let mut handles = Vec::with_capacity(partitions);
        for p in 0..partitions {
            let shared = Arc::clone(&shared);
            let worker = &worker;
            handles.push(scope.spawn(move || {
                let comm = Communicator {
                    partition_id: p,
                    partition_count: partitions,
                    epoch: Cell::new(0),
                    shared: Some(Arc::clone(&shared)),
                };
                shared.wait_start(p);
                let outcome = catch_unwind(AssertUnwindSafe(|| worker(&comm)));
                let res = match outcome {
                    Ok(r) => r,
                    Err(payload) => {
                        let msg = panic_message(&payload);
                        let err = Error::CollectiveContract {
                            partition: p,
                            epoch: comm.epoch(),
                            detail: format!("worker panicked: {msg}"),
                        };
                        shared.poison(p, comm.epoch(), format!("worker panicked: {msg}"));
                        Err(err)
                    }
                };
                shared.finish(p);
                res
            }));
        }
        for (p, h) in handles.into_iter().enumerate() {
            results[p] = Some(h.join().expect("partition thread cannot vanish"));
        }
    });

    let mut out = Vec::with_capacity(partitions);
    for r in results {
        out.push(r.expect("every partition reports")?);
    }
    Ok(out)
}

fn panic_message(payload: &Box<dyn std::any::Any + Send>) -> String {
    if let Some(s) = payload.downcast_ref::<&str>() {
        (*s).to_string()
    } else if let Some(s) = payload.downcast_ref::<String>() {
        s.clone()
    } else {
        "non-string panic payload".into()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn solo_all_reduce_is_identity() {
        let comm = Communicator::solo();
        assert_eq!(comm.all_reduce_scalar(3.5).unwrap(), 3.5);
        let mut buf = [1.0, 2.0];
        comm.broadcast(0, &mut buf).unwrap();
        assert_eq!(buf, [1.0, 2.0]);
        assert_eq!(comm.epoch(), 2);
    }

    #[test]
    fn four_partition_sum() {
        for mode in [SpmdMode::Threaded, SpmdMode::RoundRobin] {
            let results = run_spmd(4, mode, |comm| {
                comm.all_reduce_scalar(comm.partition_id() as f64)
            })
            .unwrap();
            assert_eq!(results, vec![6.0; 4]);
        }
    }

    #[test]
    fn broadcast_from_root() {
        let results = run_spmd(4, SpmdMode::Threaded, |comm| {
            let x = if comm.is_master() { 9.0 } else { f64::NAN };
            comm.broadcast_scalar(0, x)
        })
        .unwrap();
        assert_eq!(results, vec![9.0; 4]);
    }

    #[test]
    fn reduction_order_is_ascending_partition_id() {
        // 1e16 + 1 rounds back to 1e16, so only the defined left-to-right
        // order produces exactly 1.0.
        let vals = [1e16, 1.0, -1e16, 1.0];
        for mode in [SpmdMode::Threaded, SpmdMode::RoundRobin] {
            let results =
                run_spmd(4, mode, |comm| comm.all_reduce_scalar(vals[comm.partition_id()]))
                    .unwrap();
            assert_eq!(results, vec![1.0; 4]);
        }
    }

    #[test]
    fn repeated_runs_are_bitwise_identical() {
        let run = || {
            run_spmd(8, SpmdMode::Threaded, |comm| {
                let mut acc = 0.0;
                for i in 0..50 {
                    let x = ((comm.partition_id() * 31 + i) as f64).sin() * 1e-3 + acc * 0.5;
                    acc = comm.all_reduce_scalar(x)?;
                }
                Ok(acc)
            })
            .unwrap()
        };
        let a = run();
        let b = run();
        for (x, y) in a.iter().zip(b.iter()) {
            assert_eq!(x.to_bits(), y.to_bits());
        }
    }

    #[test]
    fn shape_mismatch_aborts() {
        let err = run_spmd(2, SpmdMode::Threaded, |comm| {
            if comm.partition_id() == 0 {
                comm.all_reduce_sum(&mut [1.0])?;
            } else {
                comm.all_reduce_sum(&mut [1.0, 2.0])?;
            }
            Ok(())
        })
        .unwrap_err();
        assert!(matches!(err, Error::CollectiveContract { .. }), "{err}");
    }

    #[test]
    fn divergent_sequence_aborts_instead_of_deadlocking() {
        let err = run_spmd(3, SpmdMode::Threaded, |comm| {
            comm.all_reduce_scalar(1.0)?;
            if comm.partition_id() != 2 {
                comm.all_reduce_scalar(2.0)?;
            }
            Ok(())
        })
        .unwrap_err();
        match err {
            Error::CollectiveContract { partition, epoch, .. } => {
                assert_eq!(partition, 2);
                assert_eq!(epoch, 1);
            }
            other => panic!("unexpected error {other}"),
        }
    }

    #[test]
    fn worker_panic_is_reported_with_partition() {
        let err = run_spmd(2, SpmdMode::Threaded, |comm| {
            if comm.partition_id() == 1 {
                panic!("boom");
            }
            comm.all_reduce_scalar(1.0)
        })
        .unwrap_err();
        match err {
            Error::CollectiveContract { detail, .. } => assert!(detail.contains("boom")),
            other => panic!("unexpected error {other}"),
        }
    }

    #[test]
    fn bad_root_is_an_argument_error() {
        let err = run_spmd(2, SpmdMode::Threaded, |comm| comm.broadcast_scalar(5, 1.0))
            .unwrap_err();
        assert!(matches!(err, Error::Argument(_) | Error::CollectiveContract { .. }));
    }

    #[test]
    fn zero_partitions_rejected() {
        let err = run_spmd(0, SpmdMode::Threaded, |_| Ok(())).unwrap_err();
        assert!(matches!(err, Error::Argument(_)));
    }

    #[test]
    fn round_robin_matches_threaded() {
        let job = |comm: &Communicator| {
            let mut v = vec![comm.partition_id() as f64 + 0.25; 3];
            comm.all_reduce_sum(&mut v)?;
            let s = comm.broadcast_scalar(1, v[0] * (comm.partition_id() + 1) as f64)?;
            Ok(s + v[2])
        };
        let a = run_spmd(3, SpmdMode::Threaded, job).unwrap();
        let b = run_spmd(3, SpmdMode::RoundRobin, job).unwrap();
        for (x, y) in a.iter().zip(b.iter()) {
            assert_eq!(x.to_bits(), y.to_bits());
        }
    }
}
