//! Target release profiles.
//!
//! CSV format: header `t,mdot`, one row per sample, `t` strictly increasing.
//! The run grid is `t_n = n * dt` for `n = 1..=n_steps`; `mdot` is the
//! signed solid-mass rate, negative while dissolving.

use std::path::Path;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum TargetError {
    #[error("cannot read target {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("target {path}: {detail}")]
    Parse { path: String, detail: String },
}

#[derive(Debug, Clone, PartialEq)]
pub struct TargetProfile {
    pub t: Vec<f64>,
    pub mdot: Vec<f64>,
    /// The source samples did not match the run grid and were interpolated.
    pub resampled: bool,
}

/// Read a `t,mdot` CSV and put it on the run grid.
pub fn load_target(path: &Path, dt: f64, n_steps: usize) -> Result<TargetProfile, TargetError> {
    let name = path.display().to_string();
    let text = std::fs::read_to_string(path).map_err(|source| TargetError::Io {
        path: name.clone(),
        source,
    })?;
    let (t, v) =
        parse_target_csv(&text).map_err(|detail| TargetError::Parse { path: name, detail })?;
    Ok(onto_grid(&t, &v, dt, n_steps))
}

pub fn parse_target_csv(text: &str) -> Result<(Vec<f64>, Vec<f64>), String> {
    let mut rdr = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .comment(Some(b'#'))
        .from_reader(text.as_bytes());
    let headers = rdr.headers().map_err(|e| e.to_string())?.clone();
    if headers.is_empty() {
        return Err("empty file".into());
    }
    if headers.len() != 2 || &headers[0] != "t" || &headers[1] != "mdot" {
        return Err(format!(
            "expected header `t,mdot`, found `{}`",
            headers.iter().collect::<Vec<_>>().join(",")
        ));
    }
    let (mut t, mut v) = (Vec::new(), Vec::new());
    for (i, row) in rdr.records().enumerate() {
        let row = row.map_err(|e| e.to_string())?;
        let line = i + 2;
        if row.len() != 2 {
            return Err(format!(
                "line {line}: expected 2 columns, found {}",
                row.len()
            ));
        }
        let num = |s: &str| -> Result<f64, String> {
            s.parse::<f64>()
                .ok()
                .filter(|x| x.is_finite())
                .ok_or_else(|| format!("line {line}: '{s}' is not a finite number"))
        };
        let (ti, vi) = (num(&row[0])?, num(&row[1])?);
        if let Some(&prev) = t.last() {
            if ti <= prev {
                return Err(format!(
                    "line {line}: t = {ti} does not increase (previous {prev})"
                ));
            }
        }
        t.push(ti);
        v.push(vi);
    }
    if t.is_empty() {
        return Err("no data rows".into());
    }
    Ok((t, v))
}

/// Pass samples through when they already sit on the grid, otherwise
/// interpolate linearly (held constant outside the sampled range).
pub fn onto_grid(t: &[f64], v: &[f64], dt: f64, n_steps: usize) -> TargetProfile {
    let grid: Vec<f64> = (1..=n_steps).map(|n| n as f64 * dt).collect();
    let tol = 1e-9 * grid.last().copied().unwrap_or(1.0).abs().max(1.0);
    if t.len() == n_steps && t.iter().zip(&grid).all(|(a, b)| (a - b).abs() <= tol) {
        return TargetProfile {
            t: grid,
            mdot: v.to_vec(),
            resampled: false,
        };
    }
    log::warn!(
        "target has {} samples on [{}, {}]; resampling linearly onto {} steps of dt = {}",
        t.len(),
        t[0],
        t[t.len() - 1],
        n_steps,
        dt
    );
    if grid[0] < t[0] - tol || grid[n_steps - 1] > t[t.len() - 1] + tol {
        log::warn!("target does not cover the run horizon; end values are held constant");
    }
    let mdot = grid.iter().map(|&x| interpolate(t, v, x)).collect();
    TargetProfile {
        t: grid,
        mdot,
        resampled: true,
    }
}

fn interpolate(t: &[f64], v: &[f64], x: f64) -> f64 {
    if x <= t[0] {
        return v[0];
    }
    let last = t.len() - 1;
    if x >= t[last] {
        return v[last];
    }
    let i = t.partition_point(|&ti| ti <= x);
    let (t0, t1) = (t[i - 1], t[i]);
    let w = (x - t0) / (t1 - t0);
    v[i - 1] + w * (v[i] - v[i - 1])
}

/// Render a profile as a `t,mdot` CSV.
pub fn target_csv(t: &[f64], mdot: &[f64]) -> String {
    let mut out = String::from("t,mdot\n");
    for (a, b) in t.iter().zip(mdot) {
        out.push_str(&format!("{a:e},{b:e}\n"));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_passthrough_and_resample() {
        let t: Vec<f64> = (1..=4).map(|n| n as f64 * 0.5).collect();
        let v = vec![1.0, 2.0, 3.0, 4.0];
        let p = onto_grid(&t, &v, 0.5, 4);
        assert!(!p.resampled);
        assert_eq!(p.mdot, v);

        let coarse = onto_grid(&[1.0, 2.0], &[1.0, 3.0], 0.5, 4);
        assert!(coarse.resampled);
        assert_eq!(coarse.mdot, vec![1.0, 1.0, 2.0, 3.0]);
    }

    #[test]
    fn csv_errors() {
        assert!(parse_target_csv("").is_err());
        assert!(parse_target_csv("t,mdot\n").is_err());
        assert!(parse_target_csv("0.5,1\n1.0,2\n")
            .unwrap_err()
            .contains("header"));
        assert!(parse_target_csv("t,mdot\n1,0\n1,0\n")
            .unwrap_err()
            .contains("does not increase"));
        assert!(parse_target_csv("t,mdot\n1,nan\n").is_err());
        let (t, v) = parse_target_csv("t, mdot\n# comment\n1, -2e-4\n").unwrap();
        assert_eq!((t, v), (vec![1.0], vec![-2e-4]));
    }
}
