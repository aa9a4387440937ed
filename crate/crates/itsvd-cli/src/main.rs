//! Batch front-end for the incremental truncated SVD engine: construct a
//! factorization from stored or synthetic snapshot streams, evaluate it at a
//! chosen rank, inspect spectra, and compare functional logs.
//!
//! Exit codes: 0 success, 2 usage, 3 data/format, 4 numeric/contract.

mod inputs;
mod outputs;

use clap::{Args, Parser, Subcommand, ValueEnum};
use itsvd::adaptive::{estimate_bunch_size, DEFAULT_WORK_MATRICES};
use itsvd::comm::{run_spmd, SpmdMode};
use itsvd::driver::{construct_partition, ConstructionConfig, SnapshotSource};
use itsvd::reconstruct::{
    clip_realizability, evaluate_functionals, globalize_clip_stats, reconstruct_column,
};
use itsvd::snapshot::assemble_state_vector;
use itsvd::store::{
    measure_disk_ratio, read_globals, read_state, write_state, FullSnapshotStore,
    FullStoreWriter, StoredPolicy,
};
use itsvd::svd::{UpdateOptions, Variant};
use itsvd::{Error, Result, TruncationPolicy};
use std::path::PathBuf;

#[derive(Parser)]
#[command(
    name = "itsvd",
    about = "Partition-parallel incremental truncated SVD for snapshot streams",
    version
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Build a factorization from a snapshot stream.
    Construct(ConstructArgs),
    /// Reconstruct fields from a stored factorization.
    Evaluate(EvaluateArgs),
    /// Print singular values and retained energy of a stored factorization.
    Spectrum(SpectrumArgs),
    /// Join original and reconstructed functional logs into an error report.
    Compare(CompareArgs),
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum VariantArg {
    Basic,
    Enhanced,
}

impl From<VariantArg> for Variant {
    fn from(v: VariantArg) -> Variant {
        match v {
            VariantArg::Basic => Variant::Basic,
            VariantArg::Enhanced => Variant::Enhanced,
        }
    }
}

#[derive(Args)]
struct ConstructArgs {
    /// Snapshot source: a full-storage directory or a synthetic spec such as
    /// synthetic:spectrum=geo20,l=100,t=40,seed=7 or
    /// synthetic:cylinder,modes=3,noise=1e-6
    #[arg(long)]
    input: String,
    /// Partition count (synthetic input only; directory input is bound to
    /// the partitioning it was written with).
    #[arg(long)]
    partitions: Option<usize>,
    /// Bunch size: a positive integer, or `auto` to derive it from
    /// --mem-budget.
    #[arg(long, default_value = "1")]
    bunch: String,
    /// Fixed truncation rank (mutually exclusive with --adaptive).
    #[arg(long)]
    rank: Option<usize>,
    /// Adapt the rank from the retained-energy criterion.
    #[arg(long)]
    adaptive: bool,
    /// Minimum rank o of the adaptive criterion.
    #[arg(long = "min-rank", default_value_t = 1)]
    min_rank: usize,
    /// Energy threshold eta of the adaptive criterion, in (0, 1].
    #[arg(long)]
    eta: Option<f64>,
    #[arg(long, value_enum, default_value_t = VariantArg::Enhanced)]
    variant: VariantArg,
    /// Skip the re-orthonormalization of [U | Q_P] (basic variant only).
    #[arg(long = "no-reortho")]
    no_reortho: bool,
    /// Memory budget in bytes for --bunch auto.
    #[arg(long = "mem-budget")]
    mem_budget: Option<u64>,
    /// Output directory for the stored factorization.
    #[arg(long)]
    out: PathBuf,
    /// Also write every normalized snapshot verbatim (the full-storage
    /// baseline) and report the disk ratio.
    #[arg(long = "store-full")]
    store_full: Option<PathBuf>,
    /// JSON file with linear functional weights to log during construction.
    #[arg(long)]
    functionals: Option<PathBuf>,
    /// Serialize partition execution round-robin (debugging; same results).
    #[arg(long)]
    sequential: bool,
}

#[derive(Args)]
struct EvaluateArgs {
    /// Directory holding a stored factorization.
    #[arg(long)]
    state: PathBuf,
    /// Evaluation rank (at most the stored rank).
    #[arg(long)]
    qtilde: usize,
    /// JSON file with per-state realizability bounds to clip with.
    #[arg(long)]
    clip: Option<PathBuf>,
    /// Time selection: `all`, a single 1-based index, or `a..b` inclusive.
    #[arg(long, default_value = "all")]
    times: String,
    /// JSON file with linear functional weights to log.
    #[arg(long)]
    functionals: Option<PathBuf>,
    /// Output directory for reconstructed snapshots and logs.
    #[arg(long)]
    out: PathBuf,
    /// Serialize partition execution round-robin (debugging; same results).
    #[arg(long)]
    sequential: bool,
}

#[derive(Args)]
struct SpectrumArgs {
    /// Directory holding a stored factorization.
    #[arg(long)]
    state: PathBuf,
}

#[derive(Args)]
struct CompareArgs {
    /// Functional log of the original run (t,functional_id,value).
    #[arg(long)]
    original: PathBuf,
    /// Functional log of the reconstructed run.
    #[arg(long)]
    reconstructed: PathBuf,
    /// Directory for error_report.csv and summary.json (printed only when
    /// omitted).
    #[arg(long)]
    out: Option<PathBuf>,
}

fn main() {
    // Die quietly when a downstream pipe closes instead of panicking
    // mid-print.
    #[cfg(unix)]
    unsafe {
        libc::signal(libc::SIGPIPE, libc::SIG_DFL);
    }
    let cli = Cli::parse();
    let result = match cli.cmd {
        Cmd::Construct(a) => cmd_construct(a),
        Cmd::Evaluate(a) => cmd_evaluate(a),
        Cmd::Spectrum(a) => cmd_spectrum(a),
        Cmd::Compare(a) => cmd_compare(a),
    };
    if let Err(e) = result {
        eprintln!("error: {e}");
        std::process::exit(e.exit_code());
    }
}

fn spmd_mode(sequential: bool) -> SpmdMode {
    if sequential {
        SpmdMode::RoundRobin
    } else {
        SpmdMode::Threaded
    }
}

fn cmd_construct(a: ConstructArgs) -> Result<()> {
    let policy = match (a.rank, a.adaptive) {
        (Some(_), true) => {
            return Err(Error::Argument(
                "--rank and --adaptive are mutually exclusive".into(),
            ))
        }
        (None, false) => {
            return Err(Error::Argument(
                "choose either --rank <q> or --adaptive".into(),
            ))
        }
        (Some(q), false) => TruncationPolicy::fixed(q)?,
        (None, true) => {
            let eta = a.eta.ok_or_else(|| {
                Error::Argument("--adaptive requires --eta <threshold>".into())
            })?;
            TruncationPolicy::adaptive(a.min_rank, eta)?
        }
    };
    let options = UpdateOptions {
        variant: a.variant.into(),
        reortho: !a.no_reortho,
    };
    options.validate()?;

    if a.input.starts_with("synthetic:") {
        let stream = inputs::parse_synthetic(&a.input)?;
        let partitions = a.partitions.unwrap_or(1);
        let src = stream.partitioned(partitions)?;
        run_construct(&src, &a, policy, options)
    } else {
        let store = FullSnapshotStore::open(std::path::Path::new(&a.input))?;
        if let Some(p) = a.partitions {
            if p != store.partitions() {
                return Err(Error::Argument(format!(
                    "--partitions {p} disagrees with the stored layout of {} partitions",
                    store.partitions()
                )));
            }
        }
        run_construct(&store, &a, policy, options)
    }
}

fn run_construct<S: SnapshotSource>(
    src: &S,
    a: &ConstructArgs,
    policy: TruncationPolicy,
    options: UpdateOptions,
) -> Result<()> {
    let n_rows: usize = (0..src.partitions())
        .map(|p| src.local_spatial_dof(p))
        .sum::<usize>()
        * src.scales().num_states();

    let bunch = if a.bunch == "auto" {
        let budget = a.mem_budget.ok_or_else(|| {
            Error::Argument("--bunch auto requires --mem-budget <bytes>".into())
        })?;
        let b = estimate_bunch_size(n_rows as u64, budget, 0.75, DEFAULT_WORK_MATRICES)?;
        println!("bunch size from memory budget: b = {b}");
        b
    } else {
        let b: usize = a
            .bunch
            .parse()
            .map_err(|_| Error::Argument(format!("bad bunch size '{}'", a.bunch)))?;
        if b == 0 {
            return Err(Error::Argument("bunch size must be at least 1".into()));
        }
        b
    };

    let functionals = match &a.functionals {
        Some(path) => Some(inputs::load_functionals(path, n_rows)?),
        None => None,
    };
    let cfg = ConstructionConfig {
        bunch,
        policy: policy.clone(),
        options,
    };
    let stored_policy = StoredPolicy {
        bunch: bunch as u64,
        policy,
        variant: options.variant,
        reortho: options.reortho,
    };

    let out = a.out.clone();
    let full_dir = a.store_full.clone();
    let started = std::time::Instant::now();
    let mut results = run_spmd(src.partitions(), spmd_mode(a.sequential), |comm| {
        let build = construct_partition(
            src,
            functionals.as_ref(),
            &cfg,
            full_dir.as_deref(),
            comm,
        )?;
        let manifest = write_state(&build.state, src.scales(), &stored_policy, &out, comm)?;
        Ok((build, manifest))
    })?;
    let wall = started.elapsed();
    let (build, manifest) = results.remove(0);

    println!(
        "constructed rank-{} factorization of {} snapshots ({} x {}), energy {:.6e}",
        manifest.rank, manifest.t_seen, manifest.n_global_rows, manifest.t_seen, manifest.energy
    );
    println!(
        "wall time {:.3} s over {} partitions (bunch {})",
        wall.as_secs_f64(),
        src.partitions(),
        bunch
    );
    if build.bunch_deflations + build.basis_deflations > 0 {
        println!(
            "rank-deficient columns deflated: {} in bunches, {} in the basis",
            build.bunch_deflations, build.basis_deflations
        );
    }
    outputs::report_timings(&build.timings, Some(&a.out.join("timings.csv")))?;

    if let Some(f) = &functionals {
        let times: Vec<usize> = (0..build.functional_log.len()).collect();
        outputs::write_functional_log(
            &a.out.join("functionals_original.csv"),
            &f.ids,
            &times,
            &build.functional_log,
        )?;
    }
    if let Some(full) = &a.store_full {
        let ratio = measure_disk_ratio(&a.out, full)?;
        println!("disk ratio vs full storage: {ratio:.6}");
    }
    Ok(())
}

fn cmd_evaluate(a: EvaluateArgs) -> Result<()> {
    let (manifest, _, _) = read_globals(&a.state)?;
    if a.qtilde == 0 || a.qtilde > manifest.rank as usize {
        return Err(Error::Argument(format!(
            "--qtilde must lie in 1..={}, got {}",
            manifest.rank, a.qtilde
        )));
    }
    let times = inputs::parse_times(&a.times, manifest.t_seen as usize)?;
    let num_states = manifest.num_states as usize;
    let n_rows = manifest.n_global_rows as usize;
    let bounds = match &a.clip {
        Some(path) => Some(inputs::load_bounds(path, num_states)?),
        None => None,
    };
    let functionals = match &a.functionals {
        Some(path) => Some(inputs::load_functionals(path, n_rows)?),
        None => None,
    };

    let state_dir = a.state.clone();
    let out = a.out.clone();
    let times_ref = &times;
    let bounds_ref = bounds.as_ref();
    let functionals_ref = functionals.as_ref();
    let mut results = run_spmd(
        manifest.partitions as usize,
        spmd_mode(a.sequential),
        move |comm| {
            let (state, manifest) = read_state(&state_dir, comm)?;
            let scales = manifest.scales()?;
            let p = comm.partition_id();

            let local_weights: Vec<ndarray::Array1<f64>> = match functionals_ref {
                Some(f) => {
                    let counts: Vec<usize> = manifest
                        .spatial_dof_per_partition
                        .iter()
                        .map(|&x| x as usize)
                        .collect();
                    let layout = itsvd::PartitionLayout::from_counts(counts)?;
                    f.weights
                        .iter()
                        .map(|w| {
                            itsvd::driver::localize_global_vector(
                                w,
                                &layout,
                                scales.num_states(),
                                p,
                            )
                        })
                        .collect::<Result<_>>()?
                }
                None => Vec::new(),
            };

            let rows = state.u_local().nrows();
            let mut writer = FullStoreWriter::create(&out, p, rows, times_ref.len())?;
            let mut clip_rows = Vec::new();
            let mut flog = Vec::new();
            for &t in times_ref {
                let mut fields = reconstruct_column(&state, t, a.qtilde, &scales)?;
                if let Some(b) = bounds_ref {
                    let local = clip_realizability(&mut fields, b)?;
                    let global = globalize_clip_stats(&local, comm)?;
                    for (s_idx, st) in global.into_iter().enumerate() {
                        clip_rows.push((t, s_idx, st));
                    }
                }
                let y = assemble_state_vector(&fields, &scales, t, p)?;
                writer.append(y.values())?;
                if !local_weights.is_empty() {
                    flog.push(evaluate_functionals(y.values(), &local_weights, comm)?);
                }
            }
            writer.finalize(&scales, comm)?;
            Ok((clip_rows, flog))
        },
    )?;
    let (clip_rows, flog) = results.remove(0);

    println!(
        "reconstructed {} time steps at rank {} into {}",
        times.len(),
        a.qtilde,
        a.out.display()
    );
    if bounds.is_some() {
        let clipped: usize = clip_rows.iter().map(|(_, _, st)| st.count).sum();
        println!("clipped {clipped} entries; statistics in clip_stats.csv");
        outputs::write_clip_stats(&a.out.join("clip_stats.csv"), &clip_rows)?;
    }
    if let Some(f) = &functionals {
        outputs::write_functional_log(
            &a.out.join("functionals_reconstructed.csv"),
            &f.ids,
            &times,
            &flog,
        )?;
    }
    Ok(())
}

fn cmd_spectrum(a: SpectrumArgs) -> Result<()> {
    use std::io::Write;
    let (manifest, s, _) = read_globals(&a.state)?;
    let stdout = std::io::stdout();
    let mut out = std::io::BufWriter::new(stdout.lock());
    let mut emit = |line: String| -> std::io::Result<()> { writeln!(out, "{line}") };
    let mut cumulative = 0.0;
    let mut lines = vec!["index,singular_value,retained_energy".to_string()];
    for (i, x) in s.iter().enumerate() {
        cumulative += x * x;
        lines.push(format!("{},{},{}", i + 1, x, cumulative / manifest.energy));
    }
    for line in lines {
        match emit(line) {
            Ok(()) => {}
            // A closed pipe (e.g. `| head`) is not an error for a printer.
            Err(e) if e.kind() == std::io::ErrorKind::BrokenPipe => return Ok(()),
            Err(e) => return Err(Error::Io {
                path: "<stdout>".into(),
                source: e,
            }),
        }
    }
    Ok(())
}

fn cmd_compare(a: CompareArgs) -> Result<()> {
    let (ids_o, times_o, rows_o) = inputs::read_functional_log(&a.original)?;
    let (ids_r, times_r, rows_r) = inputs::read_functional_log(&a.reconstructed)?;
    if ids_o != ids_r {
        return Err(Error::Data(format!(
            "functional ids disagree: {ids_o:?} vs {ids_r:?}"
        )));
    }
    // The reconstructed log may cover a sub-range; compare on the original
    // rows at exactly those stamps.
    let mut orig_rows = Vec::with_capacity(times_r.len());
    for &t in &times_r {
        match times_o.iter().position(|&x| x == t) {
            Some(i) => orig_rows.push(rows_o[i].clone()),
            None => {
                return Err(Error::Data(format!(
                    "original log has no row for t={t}"
                )))
            }
        }
    }
    let report =
        itsvd::reconstruct::compare_functional_logs(&ids_o, &times_r, &orig_rows, &rows_r)?;
    outputs::print_error_summary(&report);
    if let Some(dir) = &a.out {
        outputs::write_error_report(dir, &report)?;
        println!("report written to {}", dir.display());
    }
    Ok(())
}
