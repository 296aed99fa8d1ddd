//! Output-directory handling and the numeric CSV formats.
//!
//! Point-cloud files (samples, noise vectors, reconstructions) are plain
//! comma-separated numbers with no header, one row per vector, ready for
//! `gnuplot` or any CSV reader. Metric and log files carry a header row.

use anyhow::{bail, Context, Result};
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

/// Resolve the run directory: the explicit `--out`, or a fresh
/// `runs/<timestamp>-seed<seed>`. Never reuses a nonempty directory.
pub fn prepare_out_dir(out: Option<&Path>, seed: u64) -> Result<PathBuf> {
    let dir = match out {
        Some(p) => p.to_path_buf(),
        None => {
            let stamp = SystemTime::now()
                .duration_since(UNIX_EPOCH)
                .map(|d| d.as_millis())
                .unwrap_or(0);
            PathBuf::from("runs").join(format!("{stamp}-seed{seed}"))
        }
    };
    if dir.exists() {
        let occupied = std::fs::read_dir(&dir)
            .with_context(|| format!("inspecting {}", dir.display()))?
            .next()
            .is_some();
        if occupied {
            bail!("output directory {} already exists and is not empty", dir.display());
        }
    } else {
        std::fs::create_dir_all(&dir)
            .with_context(|| format!("creating {}", dir.display()))?;
    }
    Ok(dir)
}

/// Write rows of numbers, no header.
pub fn write_points_csv(path: &Path, rows: &[Vec<f64>]) -> Result<()> {
    let mut text = String::new();
    for row in rows {
        let mut first = true;
        for v in row {
            if !first {
                text.push(',');
            }
            text.push_str(&format!("{v}"));
            first = false;
        }
        text.push('\n');
    }
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

/// Read rows of numbers, rejecting ragged rows.
pub fn read_points_csv(path: &Path) -> Result<Vec<Vec<f64>>> {
    let text =
        std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let row: Result<Vec<f64>> = line
            .split(',')
            .map(|f| {
                f.trim()
                    .parse::<f64>()
                    .with_context(|| format!("{}:{}: bad number '{f}'", path.display(), i + 1))
            })
            .collect();
        let row = row?;
        if let Some(first) = rows.first() {
            if row.len() != first.len() {
                bail!("{}:{}: ragged row", path.display(), i + 1);
            }
        }
        rows.push(row);
    }
    if rows.is_empty() {
        bail!("{} holds no data rows", path.display());
    }
    Ok(rows)
}

/// Parse a comma-separated list of numbers from a flag value.
pub fn parse_number_list(raw: &str) -> Result<Vec<f64>> {
    raw.split(',')
        .map(|f| {
            f.trim()
                .parse::<f64>()
                .with_context(|| format!("bad number '{f}' in list '{raw}'"))
        })
        .collect()
}
