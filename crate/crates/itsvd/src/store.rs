//! Persistence of completed factorizations and of the full-storage baseline.
//!
//! Layout on disk mirrors the distributed memory layout: partition `p` writes
//! its left-factor block to `U_<p>.bin`, while only partition 0 writes the
//! global singular values and right factor (`SV_0.bin`) and the manifest.
//! Binary files are little-endian throughout: an 8-byte magic, u64 dimensions
//! and row-major f64 payloads. Writes go to a `.tmp` sibling and are renamed
//! into place; SHA-256 checksums of every file live in the manifest.

use crate::comm::Communicator;
use crate::error::{Error, Result};
use crate::snapshot::ReferenceScales;
use crate::svd::{ItSvdState, UpdateOptions, Variant};
use crate::adaptive::TruncationPolicy;
use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::collections::BTreeMap;
use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

pub const MAGIC: [u8; 8] = *b"ITSVD\x00\x00\x01";
pub const FORMAT_VERSION: u32 = 1;

pub const MANIFEST_FILE: &str = "manifest.json";
pub const GLOBALS_FILE: &str = "SV_0.bin";
pub const FULL_MANIFEST_FILE: &str = "manifest_full.json";

pub fn u_file_name(partition: usize) -> String {
    format!("U_{partition}.bin")
}

pub fn snapshots_file_name(partition: usize) -> String {
    format!("snapshots_{partition}.bin")
}

/// Construction parameters recorded alongside a stored state.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct StoredPolicy {
    pub bunch: u64,
    pub policy: TruncationPolicy,
    pub variant: Variant,
    pub reortho: bool,
}

impl StoredPolicy {
    pub fn update_options(&self) -> UpdateOptions {
        UpdateOptions {
            variant: self.variant,
            reortho: self.reortho,
        }
    }
}

/// Metadata of a stored factorization.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub n_global_rows: u64,
    pub t_seen: u64,
    pub rank: u64,
    pub num_states: u64,
    pub partitions: u64,
    pub spatial_dof_per_partition: Vec<u64>,
    pub per_state_ref: Vec<f64>,
    pub dof_scale: u64,
    pub energy: f64,
    pub policy: StoredPolicy,
    /// SHA-256 hex digests keyed by file name.
    pub checksums: BTreeMap<String, String>,
}

impl Manifest {
    pub fn scales(&self) -> Result<ReferenceScales> {
        ReferenceScales::new(self.per_state_ref.clone(), self.dof_scale)
    }
}

/// Metadata of a full-storage snapshot directory.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FullManifest {
    pub format_version: u32,
    pub kind: String,
    pub steps: u64,
    pub num_states: u64,
    pub partitions: u64,
    pub spatial_dof_per_partition: Vec<u64>,
    pub per_state_ref: Vec<f64>,
    pub dof_scale: u64,
    pub checksums: BTreeMap<String, String>,
}

fn atomic_write(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    let write = || -> std::io::Result<()> {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
        Ok(())
    };
    write().map_err(|e| Error::io(tmp.display().to_string(), e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path.display().to_string(), e))?;
    Ok(())
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut buf))
        .map_err(|e| Error::io(path.display().to_string(), e))?;
    Ok(buf)
}

fn sha256_hex(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(bytes);
    let digest = h.finalize();
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

fn encode_matrix(m: &Array2<f64>) -> Vec<u8> {
    let mut out = Vec::with_capacity(MAGIC.len() + 16 + m.len() * 8);
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&(m.nrows() as u64).to_le_bytes());
    out.extend_from_slice(&(m.ncols() as u64).to_le_bytes());
    for row in m.rows() {
        for x in row {
            out.extend_from_slice(&x.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn new(bytes: &'a [u8], path: &'a Path) -> Result<Self> {
        if bytes.len() < MAGIC.len() || bytes[..MAGIC.len()] != MAGIC {
            return Err(Error::Format {
                path: path.display().to_string(),
                detail: "missing or unknown magic header".into(),
            });
        }
        Ok(Reader {
            bytes,
            pos: MAGIC.len(),
            path,
        })
    }

    fn err(&self, detail: &str) -> Error {
        Error::Format {
            path: self.path.display().to_string(),
            detail: detail.into(),
        }
    }

    fn u64(&mut self) -> Result<u64> {
        let end = self.pos + 8;
        if end > self.bytes.len() {
            return Err(self.err("truncated dimension field"));
        }
        let v = u64::from_le_bytes(self.bytes[self.pos..end].try_into().unwrap());
        self.pos = end;
        Ok(v)
    }

    fn f64s(&mut self, count: usize) -> Result<Vec<f64>> {
        let end = self.pos + count * 8;
        if end > self.bytes.len() {
            return Err(self.err("truncated float payload"));
        }
        let out = self.bytes[self.pos..end]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        self.pos = end;
        Ok(out)
    }

    fn finish(&self) -> Result<()> {
        if self.pos != self.bytes.len() {
            return Err(self.err("trailing bytes after payload"));
        }
        Ok(())
    }
}

fn decode_matrix(bytes: &[u8], path: &Path) -> Result<Array2<f64>> {
    let mut r = Reader::new(bytes, path)?;
    let rows = r.u64()? as usize;
    let cols = r.u64()? as usize;
    let data = r.f64s(rows * cols)?;
    r.finish()?;
    Array2::from_shape_vec((rows, cols), data).map_err(|e| Error::Format {
        path: path.display().to_string(),
        detail: e.to_string(),
    })
}

/// Exchanges each partition's SHA-256 digest so every partition knows all of
/// them. Digest bytes ride the sum collective as exact small integers.
fn gather_digests(comm: &Communicator, digest_hex: &str) -> Result<Vec<String>> {
    let p = comm.partition_count();
    let me = comm.partition_id();
    let bytes = hex_to_bytes(digest_hex);
    let mut buf = vec![0.0_f64; p * 8];
    for (i, chunk) in bytes.chunks_exact(4).enumerate() {
        let word = u32::from_be_bytes(chunk.try_into().unwrap());
        buf[me * 8 + i] = word as f64;
    }
    comm.all_reduce_sum(&mut buf)?;
    let mut out = Vec::with_capacity(p);
    for q in 0..p {
        let mut bytes = Vec::with_capacity(32);
        for i in 0..8 {
            let word = buf[q * 8 + i] as u32;
            bytes.extend_from_slice(&word.to_be_bytes());
        }
        out.push(bytes.iter().map(|b| format!("{b:02x}")).collect());
    }
    Ok(out)
}

fn hex_to_bytes(hex: &str) -> Vec<u8> {
    (0..hex.len() / 2)
        .map(|i| u8::from_str_radix(&hex[2 * i..2 * i + 2], 16).unwrap())
        .collect()
}

fn gather_usizes(comm: &Communicator, value: usize) -> Result<Vec<usize>> {
    let p = comm.partition_count();
    let mut buf = vec![0.0_f64; p];
    buf[comm.partition_id()] = value as f64;
    comm.all_reduce_sum(&mut buf)?;
    Ok(buf.iter().map(|&x| x as usize).collect())
}

/// Writes the factorization: every partition stores its `U` block, partition
/// 0 additionally stores `(s, V)` and the manifest. Returns the manifest,
/// identical on all partitions.
pub fn write_state(
    state: &ItSvdState,
    scales: &ReferenceScales,
    policy: &StoredPolicy,
    dir: &Path,
    comm: &Communicator,
) -> Result<Manifest> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir.display().to_string(), e))?;
    let p = comm.partition_id();
    let states = scales.num_states();
    if state.u_local().nrows() % states != 0 {
        return Err(Error::Data(format!(
            "local rows {} do not split into {} states",
            state.u_local().nrows(),
            states
        )));
    }

    let u_bytes = encode_matrix(state.u_local());
    let u_digest = sha256_hex(&u_bytes);
    atomic_write(&dir.join(u_file_name(p)), &u_bytes)?;

    let local_dof = state.u_local().nrows() / states;
    let all_dof = gather_usizes(comm, local_dof)?;
    let all_u_digests = gather_digests(comm, &u_digest)?;

    // Globals file: s followed by V, written by the master only; its digest
    // is computable everywhere because s and V are replicated.
    let mut sv_bytes = Vec::new();
    sv_bytes.extend_from_slice(&MAGIC);
    sv_bytes.extend_from_slice(&(state.rank() as u64).to_le_bytes());
    for x in state.singular_values() {
        sv_bytes.extend_from_slice(&x.to_le_bytes());
    }
    sv_bytes.extend_from_slice(&(state.t_seen() as u64).to_le_bytes());
    sv_bytes.extend_from_slice(&(state.rank() as u64).to_le_bytes());
    for row in state.v().rows() {
        for x in row {
            sv_bytes.extend_from_slice(&x.to_le_bytes());
        }
    }
    let sv_digest = sha256_hex(&sv_bytes);
    if comm.is_master() {
        atomic_write(&dir.join(GLOBALS_FILE), &sv_bytes)?;
    }

    let mut checksums = BTreeMap::new();
    for (q, digest) in all_u_digests.iter().enumerate() {
        checksums.insert(u_file_name(q), digest.clone());
    }
    checksums.insert(GLOBALS_FILE.to_string(), sv_digest);

    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        n_global_rows: (all_dof.iter().sum::<usize>() * states) as u64,
        t_seen: state.t_seen() as u64,
        rank: state.rank() as u64,
        num_states: states as u64,
        partitions: comm.partition_count() as u64,
        spatial_dof_per_partition: all_dof.iter().map(|&x| x as u64).collect(),
        per_state_ref: scales.per_state_ref().to_vec(),
        dof_scale: scales.dof_scale(),
        energy: state.energy(),
        policy: policy.clone(),
        checksums,
    };
    if comm.is_master() {
        let json = serde_json::to_vec_pretty(&manifest).expect("manifest serializes");
        atomic_write(&dir.join(MANIFEST_FILE), &json)?;
    }
    // Every file is in place once any partition returns.
    comm.all_reduce_scalar(0.0)?;
    Ok(manifest)
}

fn load_manifest(dir: &Path) -> Result<Manifest> {
    let path = dir.join(MANIFEST_FILE);
    let bytes = read_file(&path)?;
    let manifest: Manifest = serde_json::from_slice(&bytes).map_err(|e| Error::Format {
        path: path.display().to_string(),
        detail: e.to_string(),
    })?;
    if manifest.format_version != FORMAT_VERSION {
        return Err(Error::VersionMismatch(manifest.format_version));
    }
    Ok(manifest)
}

fn verify_checksum(manifest: &Manifest, name: &str, bytes: &[u8]) -> Result<()> {
    match manifest.checksums.get(name) {
        Some(expected) if *expected == sha256_hex(bytes) => Ok(()),
        Some(_) => Err(Error::ChecksumMismatch(name.to_string())),
        None => Err(Error::Format {
            path: name.to_string(),
            detail: "file missing from manifest checksums".into(),
        }),
    }
}

/// Reads a factorization back: the master reads and broadcasts the global
/// factors, every partition reads its own `U` block. The partition count
/// must match the manifest.
pub fn read_state(dir: &Path, comm: &Communicator) -> Result<(ItSvdState, Manifest)> {
    let manifest = load_manifest(dir)?;
    if manifest.partitions as usize != comm.partition_count() {
        return Err(Error::PartitionMismatch {
            stored: manifest.partitions as usize,
            actual: comm.partition_count(),
        });
    }
    let rank = manifest.rank as usize;
    let t_seen = manifest.t_seen as usize;

    // Globals: read once, broadcast.
    let (mut s, mut v) = if comm.is_master() {
        let path = dir.join(GLOBALS_FILE);
        let bytes = read_file(&path)?;
        verify_checksum(&manifest, GLOBALS_FILE, &bytes)?;
        let mut r = Reader::new(&bytes, &path)?;
        let q = r.u64()? as usize;
        let s = r.f64s(q)?;
        let v_rows = r.u64()? as usize;
        let v_cols = r.u64()? as usize;
        let v = r.f64s(v_rows * v_cols)?;
        r.finish()?;
        if q != rank || v_rows != t_seen || v_cols != rank {
            return Err(Error::Format {
                path: path.display().to_string(),
                detail: format!(
                    "globals dims (q={q}, V {v_rows}x{v_cols}) disagree with manifest \
                     (rank {rank}, t_seen {t_seen})"
                ),
            });
        }
        (
            Array1::from_vec(s),
            Array2::from_shape_vec((t_seen, rank), v).expect("shape checked"),
        )
    } else {
        (Array1::zeros(rank), Array2::zeros((t_seen, rank)))
    };
    comm.broadcast(0, s.as_slice_mut().expect("contiguous"))?;
    comm.broadcast_mat(0, &mut v)?;

    // Local block.
    let p = comm.partition_id();
    let u_name = u_file_name(p);
    let u_path = dir.join(&u_name);
    let u_bytes = read_file(&u_path)?;
    verify_checksum(&manifest, &u_name, &u_bytes)?;
    let u = decode_matrix(&u_bytes, &u_path)?;
    let expect_rows = manifest.spatial_dof_per_partition[p] as usize * manifest.num_states as usize;
    if u.nrows() != expect_rows || u.ncols() != rank {
        return Err(Error::Format {
            path: u_path.display().to_string(),
            detail: format!(
                "U block is {}x{}, manifest expects {expect_rows}x{rank}",
                u.nrows(),
                u.ncols()
            ),
        });
    }

    let state = ItSvdState::from_parts(u, s, v, manifest.energy, t_seen)?;
    Ok((state, manifest))
}

/// Reads only the global parts of a stored state (manifest, singular values
/// and right factor), without binding to a partition count. Used by
/// inspection tooling; reconstruction needs the partition-matched
/// [`read_state`].
pub fn read_globals(dir: &Path) -> Result<(Manifest, Array1<f64>, Array2<f64>)> {
    let manifest = load_manifest(dir)?;
    let path = dir.join(GLOBALS_FILE);
    let bytes = read_file(&path)?;
    verify_checksum(&manifest, GLOBALS_FILE, &bytes)?;
    let mut r = Reader::new(&bytes, &path)?;
    let q = r.u64()? as usize;
    let s = r.f64s(q)?;
    let v_rows = r.u64()? as usize;
    let v_cols = r.u64()? as usize;
    let v = r.f64s(v_rows * v_cols)?;
    r.finish()?;
    if q != manifest.rank as usize
        || v_rows != manifest.t_seen as usize
        || v_cols != manifest.rank as usize
    {
        return Err(Error::Format {
            path: path.display().to_string(),
            detail: "globals dims disagree with manifest".into(),
        });
    }
    Ok((
        manifest,
        Array1::from_vec(s),
        Array2::from_shape_vec((v_rows, v_cols), v).expect("shape checked"),
    ))
}

/// Streaming writer for the full-storage baseline: every normalized snapshot
/// column verbatim, one file per partition.
pub struct FullStoreWriter {
    dir: PathBuf,
    rows: usize,
    steps_expected: usize,
    steps_written: usize,
    file: fs::File,
    tmp_path: PathBuf,
    final_path: PathBuf,
    hasher: Sha256,
}

impl FullStoreWriter {
    pub fn create(dir: &Path, partition: usize, rows: usize, steps: usize) -> Result<Self> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir.display().to_string(), e))?;
        let final_path = dir.join(snapshots_file_name(partition));
        let tmp_path = final_path.with_extension("tmp");
        let mut file =
            fs::File::create(&tmp_path).map_err(|e| Error::io(tmp_path.display().to_string(), e))?;
        let mut header = Vec::with_capacity(MAGIC.len() + 16);
        header.extend_from_slice(&MAGIC);
        header.extend_from_slice(&(rows as u64).to_le_bytes());
        header.extend_from_slice(&(steps as u64).to_le_bytes());
        file.write_all(&header)
            .map_err(|e| Error::io(tmp_path.display().to_string(), e))?;
        let mut hasher = Sha256::new();
        hasher.update(&header);
        Ok(FullStoreWriter {
            dir: dir.to_path_buf(),
            rows,
            steps_expected: steps,
            steps_written: 0,
            file,
            tmp_path,
            final_path,
            hasher,
        })
    }

    /// Appends one normalized snapshot column.
    pub fn append(&mut self, y: ndarray::ArrayView1<'_, f64>) -> Result<()> {
        if y.len() != self.rows {
            return Err(Error::Argument(format!(
                "snapshot has {} rows, file expects {}",
                y.len(),
                self.rows
            )));
        }
        if self.steps_written == self.steps_expected {
            return Err(Error::Logic("more snapshots than declared".into()));
        }
        let mut buf = Vec::with_capacity(self.rows * 8);
        for x in y.iter() {
            buf.extend_from_slice(&x.to_le_bytes());
        }
        self.file
            .write_all(&buf)
            .map_err(|e| Error::io(self.tmp_path.display().to_string(), e))?;
        self.hasher.update(&buf);
        self.steps_written += 1;
        Ok(())
    }

    /// Seals the file and exchanges metadata; the master writes the full
    /// manifest. Returns the bytes this partition wrote.
    pub fn finalize(self, scales: &ReferenceScales, comm: &Communicator) -> Result<u64> {
        if self.steps_written != self.steps_expected {
            return Err(Error::Logic(format!(
                "declared {} steps but wrote {}",
                self.steps_expected, self.steps_written
            )));
        }
        self.file
            .sync_all()
            .map_err(|e| Error::io(self.tmp_path.display().to_string(), e))?;
        drop(self.file);
        fs::rename(&self.tmp_path, &self.final_path)
            .map_err(|e| Error::io(self.final_path.display().to_string(), e))?;

        let digest: String = {
            let d = self.hasher.finalize();
            d.iter().map(|b| format!("{b:02x}")).collect()
        };
        let states = scales.num_states();
        let all_dof = gather_usizes(comm, self.rows / states)?;
        let all_digests = gather_digests(comm, &digest)?;
        if comm.is_master() {
            let mut checksums = BTreeMap::new();
            for (q, d) in all_digests.iter().enumerate() {
                checksums.insert(snapshots_file_name(q), d.clone());
            }
            let manifest = FullManifest {
                format_version: FORMAT_VERSION,
                kind: "snapshots".into(),
                steps: self.steps_expected as u64,
                num_states: states as u64,
                partitions: comm.partition_count() as u64,
                spatial_dof_per_partition: all_dof.iter().map(|&x| x as u64).collect(),
                per_state_ref: scales.per_state_ref().to_vec(),
                dof_scale: scales.dof_scale(),
                checksums,
            };
            let json = serde_json::to_vec_pretty(&manifest).expect("manifest serializes");
            atomic_write(&self.dir.join(FULL_MANIFEST_FILE), &json)?;
        }
        // Every file is in place once any partition returns.
        comm.all_reduce_scalar(0.0)?;
        let bytes = MAGIC.len() as u64 + 16 + (self.rows * self.steps_expected * 8) as u64;
        Ok(bytes)
    }
}

/// In-memory view of a full-storage directory, usable as a snapshot source
/// for (re)construction.
pub struct FullSnapshotStore {
    manifest: FullManifest,
    scales: ReferenceScales,
    /// Normalized columns per partition, `rows x steps`.
    columns: Vec<Array2<f64>>,
}

impl FullSnapshotStore {
    pub fn open(dir: &Path) -> Result<Self> {
        let path = dir.join(FULL_MANIFEST_FILE);
        let bytes = read_file(&path)?;
        let manifest: FullManifest =
            serde_json::from_slice(&bytes).map_err(|e| Error::Format {
                path: path.display().to_string(),
                detail: e.to_string(),
            })?;
        if manifest.format_version != FORMAT_VERSION {
            return Err(Error::VersionMismatch(manifest.format_version));
        }
        let scales = ReferenceScales::new(manifest.per_state_ref.clone(), manifest.dof_scale)?;
        let mut columns = Vec::with_capacity(manifest.partitions as usize);
        for p in 0..manifest.partitions as usize {
            let name = snapshots_file_name(p);
            let fpath = dir.join(&name);
            let bytes = read_file(&fpath)?;
            match manifest.checksums.get(&name) {
                Some(expected) if *expected == sha256_hex(&bytes) => {}
                Some(_) => return Err(Error::ChecksumMismatch(name)),
                None => {
                    return Err(Error::Format {
                        path: name,
                        detail: "file missing from manifest checksums".into(),
                    })
                }
            }
            let mut r = Reader::new(&bytes, &fpath)?;
            let rows = r.u64()? as usize;
            let steps = r.u64()? as usize;
            let data = r.f64s(rows * steps)?;
            r.finish()?;
            if steps != manifest.steps as usize
                || rows
                    != manifest.spatial_dof_per_partition[p] as usize
                        * manifest.num_states as usize
            {
                return Err(Error::Format {
                    path: fpath.display().to_string(),
                    detail: "snapshot dims disagree with manifest".into(),
                });
            }
            // Stored column-major (one column per step); reversing the axes
            // yields the logical rows x steps matrix without copying.
            let cols = Array2::from_shape_vec((steps, rows), data)
                .expect("shape checked")
                .reversed_axes();
            columns.push(cols);
        }
        Ok(FullSnapshotStore {
            manifest,
            scales,
            columns,
        })
    }

    pub fn manifest(&self) -> &FullManifest {
        &self.manifest
    }

    /// Normalized column of partition `p` at step `t`.
    pub fn normalized_column(&self, t: usize, p: usize) -> ndarray::ArrayView1<'_, f64> {
        self.columns[p].column(t)
    }
}

impl crate::driver::SnapshotSource for FullSnapshotStore {
    fn num_steps(&self) -> usize {
        self.manifest.steps as usize
    }

    fn partitions(&self) -> usize {
        self.manifest.partitions as usize
    }

    fn scales(&self) -> &ReferenceScales {
        &self.scales
    }

    fn local_spatial_dof(&self, partition: usize) -> usize {
        self.manifest.spatial_dof_per_partition[partition] as usize
    }

    fn fields(&self, t: usize, partition: usize) -> Result<Vec<Array1<f64>>> {
        if t >= self.num_steps() {
            return Err(Error::Data(format!("no snapshot at time index {t}")));
        }
        let y = self.columns[partition].column(t);
        crate::snapshot::disassemble_state_vector(y, &self.scales)
    }
}

/// Total size in bytes of the regular files directly inside `dir`.
pub fn dir_bytes(dir: &Path) -> Result<u64> {
    let entries = fs::read_dir(dir).map_err(|e| Error::io(dir.display().to_string(), e))?;
    let mut total = 0;
    for entry in entries {
        let entry = entry.map_err(|e| Error::io(dir.display().to_string(), e))?;
        let meta = entry
            .metadata()
            .map_err(|e| Error::io(entry.path().display().to_string(), e))?;
        if meta.is_file() {
            total += meta.len();
        }
    }
    Ok(total)
}

/// Bytes of the compressed state over bytes of the full-storage baseline.
pub fn measure_disk_ratio(svd_dir: &Path, full_dir: &Path) -> Result<f64> {
    let svd = dir_bytes(svd_dir)?;
    let full = dir_bytes(full_dir)?;
    if svd == 0 {
        return Err(Error::Config(format!(
            "no stored state under {}",
            svd_dir.display()
        )));
    }
    if full == 0 {
        return Err(Error::Config(format!(
            "no full-storage baseline under {}",
            full_dir.display()
        )));
    }
    Ok(svd as f64 / full as f64)
}
