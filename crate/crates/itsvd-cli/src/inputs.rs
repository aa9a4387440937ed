//! Input parsing: the `synthetic:` scheme, functional weight files,
//! realizability bounds files, time ranges and functional logs.

use itsvd::datagen::{
    generate_cylinder_like, generate_spectrum, CylinderLikeSpec, GlobalStream, OscillatoryMode,
    SyntheticCase,
};
use itsvd::driver::FunctionalSet;
use itsvd::reconstruct::{RealizabilityBounds, StateBounds, DEFAULT_ALPHA};
use itsvd::{Error, Result};
use ndarray::Array1;
use serde::Deserialize;
use std::collections::HashMap;
use std::path::Path;

/// Builds a synthetic stream from a spec string such as
/// `synthetic:spectrum=geo20,l=100,t=40,seed=7` or
/// `synthetic:cylinder,modes=3,noise=1e-6,l=100,s=3,t=64`.
pub fn parse_synthetic(spec: &str) -> Result<GlobalStream> {
    let body = spec
        .strip_prefix("synthetic:")
        .ok_or_else(|| Error::Argument(format!("not a synthetic spec: {spec}")))?;
    let mut kind = None;
    let mut keys: HashMap<&str, &str> = HashMap::new();
    for token in body.split(',').filter(|t| !t.is_empty()) {
        match token.split_once('=') {
            Some(("spectrum", v)) => kind = Some(("spectrum", v)),
            Some((k, v)) => {
                keys.insert(k, v);
            }
            None => kind = Some((token, "")),
        }
    }
    let (kind, kind_arg) =
        kind.ok_or_else(|| Error::Argument("synthetic spec names no generator".into()))?;

    let get_usize = |k: &str, default: usize| -> Result<usize> {
        match keys.get(k) {
            Some(v) => v
                .parse()
                .map_err(|_| Error::Argument(format!("bad integer for {k}: {v}"))),
            None => Ok(default),
        }
    };
    let get_f64 = |k: &str, default: f64| -> Result<f64> {
        match keys.get(k) {
            Some(v) => v
                .parse()
                .map_err(|_| Error::Argument(format!("bad number for {k}: {v}"))),
            None => Ok(default),
        }
    };
    let case = SyntheticCase {
        spatial_dof: get_usize("l", 100)?,
        states: get_usize("s", 1)?,
        steps: get_usize("t", 40)?,
        seed: get_usize("seed", 0)? as u64,
    };

    match kind {
        "spectrum" => {
            let count: usize = kind_arg
                .strip_prefix("geo")
                .and_then(|n| n.parse().ok())
                .ok_or_else(|| {
                    Error::Argument(format!(
                        "unknown spectrum '{kind_arg}'; expected geo<count> (e.g. geo20)"
                    ))
                })?;
            let target: Vec<f64> = (1..=count as i32).map(|i| 10.0 * 0.5_f64.powi(i)).collect();
            generate_spectrum(&target, &case)
        }
        "cylinder" => {
            let modes = get_usize("modes", 3)?;
            let amp = get_f64("amp", 1.0)?;
            let spec = CylinderLikeSpec {
                bulk_amplitude: get_f64("bulk", 2.0)?,
                modes: (0..modes)
                    .map(|j| OscillatoryMode {
                        amplitude: amp * 0.5_f64.powi(j as i32),
                        angular_frequency: 0.25 * (j + 1) as f64,
                    })
                    .collect(),
                noise: get_f64("noise", 0.0)?,
            };
            generate_cylinder_like(&case, &spec)
        }
        other => Err(Error::Argument(format!(
            "unknown synthetic generator '{other}' (expected spectrum=geo<n> or cylinder)"
        ))),
    }
}

#[derive(Deserialize)]
struct FunctionalsFile {
    functionals: Vec<FunctionalEntry>,
}

#[derive(Deserialize)]
struct FunctionalEntry {
    id: String,
    weights: Vec<f64>,
}

/// Loads functional weights; every weight vector must cover the full
/// canonical global vector of `expected_len` entries.
pub fn load_functionals(path: &Path, expected_len: usize) -> Result<FunctionalSet> {
    let bytes = std::fs::read(path).map_err(|e| Error::Io {
        path: path.display().to_string(),
        source: e,
    })?;
    let parsed: FunctionalsFile = serde_json::from_slice(&bytes).map_err(|e| Error::Format {
        path: path.display().to_string(),
        detail: e.to_string(),
    })?;
    let mut ids = Vec::new();
    let mut weights = Vec::new();
    for f in parsed.functionals {
        if f.id.contains(',') {
            return Err(Error::Data(format!(
                "functional id '{}' must not contain commas",
                f.id
            )));
        }
        if f.weights.len() != expected_len {
            return Err(Error::Data(format!(
                "functional '{}' carries {} weights, expected {expected_len}",
                f.id,
                f.weights.len()
            )));
        }
        ids.push(f.id);
        weights.push(Array1::from_vec(f.weights));
    }
    Ok(FunctionalSet { ids, weights })
}

#[derive(Deserialize)]
struct BoundsFile {
    #[serde(default)]
    alpha: Option<f64>,
    states: Vec<BoundsEntry>,
}

#[derive(Deserialize)]
struct BoundsEntry {
    state: usize,
    #[serde(default)]
    lower: Option<f64>,
    #[serde(default)]
    upper: Option<f64>,
}

/// Loads per-state realizability bounds for a case with `num_states` states.
pub fn load_bounds(path: &Path, num_states: usize) -> Result<RealizabilityBounds> {
    let bytes = std::fs::read(path).map_err(|e| Error::Io {
        path: path.display().to_string(),
        source: e,
    })?;
    let parsed: BoundsFile = serde_json::from_slice(&bytes).map_err(|e| Error::Format {
        path: path.display().to_string(),
        detail: e.to_string(),
    })?;
    let mut states = vec![None; num_states];
    for entry in parsed.states {
        if entry.state >= num_states {
            return Err(Error::Data(format!(
                "bounds reference state {} but the case has {num_states}",
                entry.state
            )));
        }
        states[entry.state] = Some(StateBounds {
            lower: entry.lower,
            upper: entry.upper,
        });
    }
    RealizabilityBounds::new(states, parsed.alpha.unwrap_or(DEFAULT_ALPHA))
}

/// Parses a 1-based inclusive time selection: `all`, a single index, or
/// `a..b`. Returns 0-based indices.
pub fn parse_times(arg: &str, t_seen: usize) -> Result<Vec<usize>> {
    let check = |t: usize| -> Result<usize> {
        if t == 0 || t > t_seen {
            Err(Error::Argument(format!(
                "time index {t} outside 1..={t_seen}"
            )))
        } else {
            Ok(t - 1)
        }
    };
    if arg == "all" {
        return Ok((0..t_seen).collect());
    }
    if let Some((a, b)) = arg.split_once("..") {
        let a: usize = a
            .parse()
            .map_err(|_| Error::Argument(format!("bad time range '{arg}'")))?;
        let b: usize = b
            .parse()
            .map_err(|_| Error::Argument(format!("bad time range '{arg}'")))?;
        if a > b {
            return Err(Error::Argument(format!("empty time range '{arg}'")));
        }
        return (a..=b).map(check).collect();
    }
    let t: usize = arg
        .parse()
        .map_err(|_| Error::Argument(format!("bad time selection '{arg}'")))?;
    Ok(vec![check(t)?])
}

/// Reads a functional log CSV (`t,functional_id,value`) back into ids, the
/// 1-based time stamps present, and one value row per stamp.
pub fn read_functional_log(
    path: &Path,
) -> Result<(Vec<String>, Vec<usize>, Vec<Vec<f64>>)> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::Io {
        path: path.display().to_string(),
        source: e,
    })?;
    let mut lines = text.lines();
    let header = lines.next().unwrap_or("");
    if header != "t,functional_id,value" {
        return Err(Error::Format {
            path: path.display().to_string(),
            detail: format!("unexpected header '{header}'"),
        });
    }
    let mut ids: Vec<String> = Vec::new();
    let mut times: Vec<usize> = Vec::new();
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for (lineno, line) in lines.enumerate() {
        if line.is_empty() {
            continue;
        }
        let mut parts = line.splitn(3, ',');
        let bad = || Error::Format {
            path: path.display().to_string(),
            detail: format!("malformed row {} ('{line}')", lineno + 2),
        };
        let t: usize = parts.next().ok_or_else(bad)?.parse().map_err(|_| bad())?;
        let id = parts.next().ok_or_else(bad)?.to_string();
        let value: f64 = parts.next().ok_or_else(bad)?.parse().map_err(|_| bad())?;
        if t == 0 {
            return Err(bad());
        }
        let row_idx = match times.iter().position(|&x| x == t) {
            Some(i) => i,
            None => {
                times.push(t);
                rows.push(Vec::new());
                times.len() - 1
            }
        };
        if !ids.contains(&id) {
            ids.push(id.clone());
        }
        let col = ids.iter().position(|x| *x == id).unwrap();
        let row = &mut rows[row_idx];
        while row.len() <= col {
            row.push(f64::NAN);
        }
        row[col] = value;
    }
    for (i, row) in rows.iter().enumerate() {
        if row.len() != ids.len() || row.iter().any(|x| x.is_nan()) {
            return Err(Error::Data(format!(
                "log is not rectangular at t={} ({} of {} functionals)",
                times[i],
                row.len(),
                ids.len()
            )));
        }
    }
    Ok((ids, times, rows))
}
