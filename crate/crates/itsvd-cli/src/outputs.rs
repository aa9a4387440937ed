//! CSV and report writers plus the timing table.

use itsvd::reconstruct::{ClipStats, ErrorReport};
use itsvd::timing::UpdateTimings;
use itsvd::{Error, Result};
use std::io::Write;
use std::path::Path;

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::Io {
        path: path.display().to_string(),
        source: e,
    })
}

/// `t,functional_id,value` rows; `times` carries the 0-based indices the
/// rows belong to and is written 1-based.
pub fn write_functional_log(
    path: &Path,
    ids: &[String],
    times: &[usize],
    rows: &[Vec<f64>],
) -> Result<()> {
    let mut out = String::from("t,functional_id,value\n");
    for (i, row) in rows.iter().enumerate() {
        for (j, v) in row.iter().enumerate() {
            out.push_str(&format!("{},{},{}\n", times[i] + 1, ids[j], v));
        }
    }
    write_text(path, &out)
}

/// `t,state,count,max_excursion` rows for clip statistics, 1-based time.
pub fn write_clip_stats(path: &Path, rows: &[(usize, usize, ClipStats)]) -> Result<()> {
    let mut out = String::from("t,state,count,max_excursion\n");
    for (t, state, st) in rows {
        out.push_str(&format!("{},{},{},{}\n", t + 1, state, st.count, st.max_excursion));
    }
    write_text(path, &out)
}

/// Writes `error_report.csv` and `summary.json` into `dir`.
pub fn write_error_report(dir: &Path, report: &ErrorReport) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::Io {
        path: dir.display().to_string(),
        source: e,
    })?;
    let mut csv = String::from(
        "t,functional_id,value_original,value_reconstructed,rel_error,error_kind\n",
    );
    for r in &report.rows {
        csv.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.t,
            r.functional_id,
            r.value_original,
            r.value_reconstructed,
            r.rel_error,
            if r.absolute { "absolute" } else { "relative" }
        ));
    }
    write_text(&dir.join("error_report.csv"), &csv)?;

    let summary = serde_json::json!({
        "per_functional": report.per_functional,
        "per_state_max_field_error": report.per_state_max_field_error,
    });
    write_text(
        &dir.join("summary.json"),
        &serde_json::to_string_pretty(&summary).expect("summary serializes"),
    )
}

pub fn print_error_summary(report: &ErrorReport) {
    for s in &report.per_functional {
        println!(
            "functional {}: mean |err| {:.3e}, max {:.3e}, min {:.3e}{}",
            s.functional_id,
            s.mean,
            s.max,
            s.min,
            if s.flagged_rows > 0 {
                format!(" ({} rows reported absolutely)", s.flagged_rows)
            } else {
                String::new()
            }
        );
    }
}

/// Prints the summed per-line update timings and writes them as CSV.
pub fn report_timings(timings: &UpdateTimings, csv_path: Option<&Path>) -> Result<()> {
    let total = timings.grand_total().as_secs_f64();
    println!(
        "update timing over {} updates (partition 0):",
        timings.updates()
    );
    println!("  {:<12} {:>12} {:>8}", "line", "total [ms]", "share");
    let mut csv = String::from("line,total_seconds\n");
    for (label, dur) in timings.rows() {
        let secs = dur.as_secs_f64();
        let share = if total > 0.0 { 100.0 * secs / total } else { 0.0 };
        println!("  {:<12} {:>12.3} {:>7.1}%", label, secs * 1e3, share);
        csv.push_str(&format!("{label},{secs}\n"));
    }
    println!("  {:<12} {:>12.3}", "total", total * 1e3);
    if let Some(path) = csv_path {
        write_text(path, &csv)?;
    }
    std::io::stdout().flush().ok();
    Ok(())
}
