//! File formats shared by the pipeline commands: stat-map CSV, raw map CSV,
//! plain PGM images, cluster JSON, and profile CSV.
//!
//! Stat-map CSVs carry one `# hook=... q=... width=... height=...` comment
//! line before the header so they round-trip without a sidecar; readers
//! treat `#` lines as comments.

use crate::analysis::{Cluster, StatMap};
use crate::grid::Coord;
use crate::model::HookId;
use ndarray::Array2;
use serde::{Deserialize, Serialize};
use std::io::Write;
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ExportError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("{path} line {line}: {msg}")]
    Parse { path: String, line: usize, msg: String },
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

fn parse_err(path: &Path, line: usize, msg: impl Into<String>) -> ExportError {
    ExportError::Parse { path: path.display().to_string(), line, msg: msg.into() }
}

pub fn write_statmap_csv(path: &Path, map: &StatMap) -> Result<(), ExportError> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(w, "# hook={} q={} width={} height={}", map.hook, map.q, map.width, map.height)?;
    writeln!(w, "unit,row,col,t,p,p_adj,significant")?;
    for u in 0..map.n_units() {
        writeln!(
            w,
            "{},{},{},{:.17e},{:.17e},{:.17e},{}",
            u,
            map.cells[u].row,
            map.cells[u].col,
            map.t[u],
            map.p[u],
            map.p_adj[u],
            map.significant[u] as u8
        )?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_statmap_csv(path: &Path) -> Result<StatMap, ExportError> {
    let text = std::fs::read_to_string(path)?;
    let mut lines = text.lines().enumerate();

    let (_, meta) = lines
        .next()
        .ok_or_else(|| parse_err(path, 1, "empty file"))?;
    if !meta.starts_with('#') {
        return Err(parse_err(path, 1, "missing '# hook=... q=...' metadata line"));
    }
    let mut hook = None;
    let mut q = None;
    let mut width = None;
    let mut height = None;
    for field in meta.trim_start_matches('#').split_whitespace() {
        let Some((key, value)) = field.split_once('=') else { continue };
        match key {
            "hook" => hook = value.parse::<HookId>().ok(),
            "q" => q = value.parse::<f64>().ok(),
            "width" => width = value.parse::<usize>().ok(),
            "height" => height = value.parse::<usize>().ok(),
            _ => {}
        }
    }
    let (hook, q, width, height) = match (hook, q, width, height) {
        (Some(h), Some(q), Some(w), Some(ht)) => (h, q, w, ht),
        _ => return Err(parse_err(path, 1, "metadata must define hook, q, width, height")),
    };

    let (_, header) = lines.next().ok_or_else(|| parse_err(path, 2, "missing header"))?;
    if header.trim() != "unit,row,col,t,p,p_adj,significant" {
        return Err(parse_err(path, 2, "unexpected header"));
    }

    let mut cells = Vec::new();
    let mut t = Vec::new();
    let mut p = Vec::new();
    let mut p_adj = Vec::new();
    let mut significant = Vec::new();
    for (i, line) in lines {
        let line_no = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 7 {
            return Err(parse_err(path, line_no, format!("expected 7 fields, got {}", fields.len())));
        }
        let unit: usize = fields[0]
            .parse()
            .map_err(|_| parse_err(path, line_no, "bad unit index"))?;
        if unit != cells.len() {
            return Err(parse_err(path, line_no, "unit indices must be consecutive from 0"));
        }
        let row: usize = fields[1].parse().map_err(|_| parse_err(path, line_no, "bad row"))?;
        let col: usize = fields[2].parse().map_err(|_| parse_err(path, line_no, "bad col"))?;
        if row >= height || col >= width {
            return Err(parse_err(path, line_no, "cell outside the declared grid"));
        }
        cells.push(Coord::new(row, col));
        t.push(fields[3].parse().map_err(|_| parse_err(path, line_no, "bad t value"))?);
        p.push(fields[4].parse().map_err(|_| parse_err(path, line_no, "bad p value"))?);
        p_adj.push(fields[5].parse().map_err(|_| parse_err(path, line_no, "bad p_adj value"))?);
        significant.push(match fields[6].trim() {
            "0" => false,
            "1" => true,
            other => return Err(parse_err(path, line_no, format!("bad significant flag {other:?}"))),
        });
    }
    if cells.len() != width * height {
        return Err(parse_err(
            path,
            1,
            format!("expected {} units for a {width}x{height} grid, got {}", width * height, cells.len()),
        ));
    }
    Ok(StatMap { hook, width, height, cells, t, p, p_adj, q, significant })
}

/// A map CSV that is either a full stat map or a raw `row,col,value` field.
pub enum MapFile {
    Stat(StatMap),
    Raw { width: usize, height: usize, cells: Vec<Coord>, values: Vec<f64> },
}

impl MapFile {
    pub fn values(&self) -> &[f64] {
        match self {
            MapFile::Stat(m) => &m.t,
            MapFile::Raw { values, .. } => values,
        }
    }

    pub fn cells(&self) -> &[Coord] {
        match self {
            MapFile::Stat(m) => &m.cells,
            MapFile::Raw { cells, .. } => cells,
        }
    }

    pub fn dims(&self) -> (usize, usize) {
        match self {
            MapFile::Stat(m) => (m.width, m.height),
            MapFile::Raw { width, height, .. } => (*width, *height),
        }
    }
}

pub fn write_raw_map_csv(path: &Path, values: &Array2<f64>) -> Result<(), ExportError> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(w, "row,col,value")?;
    for ((r, c), v) in values.indexed_iter() {
        writeln!(w, "{r},{c},{v:.17e}")?;
    }
    w.flush()?;
    Ok(())
}

/// Read either format, keyed on the first line.
pub fn read_map_csv(path: &Path) -> Result<MapFile, ExportError> {
    let text = std::fs::read_to_string(path)?;
    let first = text.lines().next().unwrap_or_default();
    if first.starts_with('#') {
        return Ok(MapFile::Stat(read_statmap_csv(path)?));
    }
    if first.trim() != "row,col,value" {
        return Err(parse_err(path, 1, "expected a stat-map CSV or a 'row,col,value' header"));
    }
    let mut entries = Vec::new();
    for (i, line) in text.lines().enumerate().skip(1) {
        let line_no = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 3 {
            return Err(parse_err(path, line_no, "expected row,col,value"));
        }
        let row: usize = fields[0].parse().map_err(|_| parse_err(path, line_no, "bad row"))?;
        let col: usize = fields[1].parse().map_err(|_| parse_err(path, line_no, "bad col"))?;
        let value: f64 = fields[2].parse().map_err(|_| parse_err(path, line_no, "bad value"))?;
        entries.push((Coord::new(row, col), value));
    }
    if entries.is_empty() {
        return Err(parse_err(path, 1, "no data rows"));
    }
    let width = entries.iter().map(|(c, _)| c.col).max().unwrap() + 1;
    let height = entries.iter().map(|(c, _)| c.row).max().unwrap() + 1;
    let (cells, values) = entries.into_iter().unzip();
    Ok(MapFile::Raw { width, height, cells, values })
}

/// Plain (ASCII) PGM, max value 255, one row of the grid per line.
pub fn write_pgm(path: &Path, image: &Array2<f64>, lo: f64, hi: f64) -> Result<(), ExportError> {
    let (h, w) = image.dim();
    let mut out = format!("P2\n{w} {h}\n255\n");
    let span = if hi > lo { hi - lo } else { 1.0 };
    for r in 0..h {
        let row: Vec<String> = (0..w)
            .map(|c| {
                let v = ((image[[r, c]] - lo) / span * 255.0).round().clamp(0.0, 255.0);
                format!("{}", v as u8)
            })
            .collect();
        out.push_str(&row.join(" "));
        out.push('\n');
    }
    std::fs::write(path, out)?;
    Ok(())
}

/// Write the signed-map image pair: positive magnitudes and negative
/// magnitudes, both scaled by the same max |t| so they are comparable.
pub fn write_signed_pgms(
    pos_path: &Path,
    neg_path: &Path,
    map: &StatMap,
) -> Result<(), ExportError> {
    let mut pos = Array2::zeros((map.height, map.width));
    let mut neg = Array2::zeros((map.height, map.width));
    let mut max_abs = 0.0f64;
    for (u, c) in map.cells.iter().enumerate() {
        max_abs = max_abs.max(map.t[u].abs());
        if map.t[u] > 0.0 {
            pos[[c.row, c.col]] = map.t[u];
        } else {
            neg[[c.row, c.col]] = -map.t[u];
        }
    }
    let hi = if max_abs > 0.0 { max_abs } else { 1.0 };
    write_pgm(pos_path, &pos, 0.0, hi)?;
    write_pgm(neg_path, &neg, 0.0, hi)
}

#[derive(Debug, Serialize, Deserialize)]
pub struct ClustersFile {
    pub source_map: String,
    pub q: f64,
    pub min_size: usize,
    pub clusters: Vec<Cluster>,
}

pub fn write_clusters_json(path: &Path, file: &ClustersFile) -> Result<(), ExportError> {
    std::fs::write(path, serde_json::to_string_pretty(file)?)?;
    Ok(())
}

pub fn read_clusters_json(path: &Path) -> Result<ClustersFile, ExportError> {
    Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
}

/// One row per (cluster, condition), ready for bar plotting.
pub fn write_profile_csv(
    path: &Path,
    rows: &[(String, String, f64)],
) -> Result<(), ExportError> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(w, "cluster,condition,mean_abs_activation")?;
    for (cluster, condition, value) in rows {
        writeln!(w, "{cluster},{condition},{value:.17e}")?;
    }
    w.flush()?;
    Ok(())
}
