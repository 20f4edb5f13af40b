//! Point cloud, prior, and result file I/O.
//!
//! CSV is the canonical format: one point per line, `D` decimal coordinates,
//! optionally followed by one integer cluster label. ASCII PLY is supported
//! read-only for mesh-derived clouds (vertex elements plus an optional
//! integer `cluster` property). All files are UTF-8 with LF line endings and
//! `.` as the decimal separator; floats are written with 17 significant
//! digits so a read-back reproduces them bit-exactly.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use crate::ecpd::CorrespondencePriors;
use crate::error::{Error, Result};
use crate::types::{ClusterAssignment, IterationRecord, PointSet, RegistrationResult, UNCLUSTERED};

/// On-disk cloud encodings.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CloudFormat {
    Csv,
    PlyAscii,
}

/// A point cloud file plus how to read it. For CSV the `has_labels` flag
/// decides whether the last column is a cluster label; PLY declares its own
/// properties, so labels are read whenever a `cluster` property is present.
#[derive(Debug, Clone)]
pub struct LabeledCloudFile {
    pub path: PathBuf,
    pub format: CloudFormat,
    pub has_labels: bool,
}

impl LabeledCloudFile {
    pub fn csv(path: impl Into<PathBuf>, has_labels: bool) -> Self {
        LabeledCloudFile {
            path: path.into(),
            format: CloudFormat::Csv,
            has_labels,
        }
    }

    pub fn ply(path: impl Into<PathBuf>) -> Self {
        LabeledCloudFile {
            path: path.into(),
            format: CloudFormat::PlyAscii,
            has_labels: true,
        }
    }

    /// Pick the format from the file extension (`.ply` is PLY, anything else
    /// is CSV).
    pub fn infer(path: impl Into<PathBuf>, has_labels: bool) -> Self {
        let path = path.into();
        let is_ply = path
            .extension()
            .map(|e| e.eq_ignore_ascii_case("ply"))
            .unwrap_or(false);
        LabeledCloudFile {
            format: if is_ply {
                CloudFormat::PlyAscii
            } else {
                CloudFormat::Csv
            },
            path,
            has_labels,
        }
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
    move |source| Error::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn parse_err(path: &Path, line: usize, reason: impl Into<String>) -> Error {
    Error::Parse {
        path: path.to_path_buf(),
        line,
        reason: reason.into(),
    }
}

/// Read a point cloud, returning labels when the file carries them.
/// Raw labels are re-indexed densely to 1..=C in first-appearance order;
/// label 0 is the sentinel for unclustered points and passes through.
pub fn read_point_set(file: &LabeledCloudFile) -> Result<(PointSet, Option<ClusterAssignment>)> {
    let text = fs::read_to_string(&file.path).map_err(io_err(&file.path))?;
    match file.format {
        CloudFormat::Csv => parse_csv_cloud(&file.path, &text, file.has_labels),
        CloudFormat::PlyAscii => parse_ply_cloud(&file.path, &text),
    }
}

fn parse_csv_cloud(
    path: &Path,
    text: &str,
    has_labels: bool,
) -> Result<(PointSet, Option<ClusterAssignment>)> {
    let mut rows: Vec<Vec<f64>> = Vec::new();
    let mut raw_labels: Vec<i64> = Vec::new();
    let mut dim: Option<usize> = None;
    for (lineno, line) in text.lines().enumerate() {
        let lineno = lineno + 1;
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        let n_coords = if has_labels {
            if fields.len() < 2 {
                return Err(parse_err(
                    path,
                    lineno,
                    "labeled row needs at least one coordinate and a label",
                ));
            }
            fields.len() - 1
        } else {
            fields.len()
        };
        match dim {
            None => dim = Some(n_coords),
            Some(d) if d != n_coords => {
                return Err(parse_err(
                    path,
                    lineno,
                    format!("ragged row: expected {d} coordinates, got {n_coords}"),
                ));
            }
            _ => {}
        }
        let mut coords = Vec::with_capacity(n_coords);
        for field in &fields[..n_coords] {
            let v: f64 = field
                .parse()
                .map_err(|_| parse_err(path, lineno, format!("non-numeric field `{field}`")))?;
            if !v.is_finite() {
                return Err(parse_err(path, lineno, "non-finite coordinate"));
            }
            coords.push(v);
        }
        if has_labels {
            let raw: i64 = fields[n_coords].parse().map_err(|_| {
                parse_err(
                    path,
                    lineno,
                    format!("label `{}` is not an integer", fields[n_coords]),
                )
            })?;
            if raw < 0 {
                return Err(parse_err(path, lineno, format!("negative label {raw}")));
            }
            raw_labels.push(raw);
        }
        rows.push(coords);
    }
    if rows.is_empty() {
        return Err(parse_err(path, 0, "file holds no points"));
    }
    let points = PointSet::from_rows(&rows)?;
    let labels = if has_labels {
        Some(reindex_labels(path, &raw_labels)?)
    } else {
        None
    };
    Ok((points, labels))
}

/// Dense re-indexing: positive raw labels map to 1..=C in order of first
/// appearance; the 0 sentinel passes through. Idempotent on already-dense
/// labelings.
fn reindex_labels(path: &Path, raw: &[i64]) -> Result<ClusterAssignment> {
    let mut order: Vec<i64> = Vec::new();
    let mut labels = Vec::with_capacity(raw.len());
    for &r in raw {
        if r == 0 {
            labels.push(UNCLUSTERED);
            continue;
        }
        let dense = match order.iter().position(|&seen| seen == r) {
            Some(k) => k + 1,
            None => {
                order.push(r);
                order.len()
            }
        };
        labels.push(dense);
    }
    if order.is_empty() {
        return Err(parse_err(
            path,
            0,
            "label column present but every label is the 0 sentinel",
        ));
    }
    ClusterAssignment::new(labels, order.len())
}

fn parse_ply_cloud(path: &Path, text: &str) -> Result<(PointSet, Option<ClusterAssignment>)> {
    let float_types = ["float", "float32", "double", "float64"];
    let int_types = [
        "char", "int8", "uchar", "uint8", "short", "int16", "ushort", "uint16", "int", "int32",
        "uint", "uint32",
    ];

    let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l.trim()));
    let (_, magic) = lines
        .next()
        .ok_or_else(|| parse_err(path, 0, "empty file"))?;
    if magic != "ply" {
        return Err(parse_err(path, 1, "missing `ply` magic line"));
    }

    let mut vertex_count: Option<usize> = None;
    let mut properties: Vec<String> = Vec::new();
    let mut in_vertex_element = false;
    let mut coord_cols: Vec<usize> = Vec::new();
    let mut label_col: Option<usize> = None;
    let mut header_end = 0usize;

    for (lineno, line) in lines.by_ref() {
        if line == "end_header" {
            header_end = lineno;
            break;
        }
        let mut words = line.split_whitespace();
        match words.next() {
            Some("format") => {
                if words.next() != Some("ascii") {
                    return Err(parse_err(path, lineno, "only ascii PLY is supported"));
                }
            }
            Some("comment") | Some("obj_info") => {}
            Some("element") => {
                let name = words.next().unwrap_or("");
                let count: usize = words
                    .next()
                    .and_then(|w| w.parse().ok())
                    .ok_or_else(|| parse_err(path, lineno, "bad element count"))?;
                if name == "vertex" {
                    if vertex_count.is_some() {
                        return Err(parse_err(path, lineno, "duplicate vertex element"));
                    }
                    vertex_count = Some(count);
                    in_vertex_element = true;
                } else {
                    if vertex_count.is_none() {
                        return Err(parse_err(
                            path,
                            lineno,
                            "vertex element must come first",
                        ));
                    }
                    in_vertex_element = false;
                }
            }
            Some("property") => {
                if !in_vertex_element {
                    continue;
                }
                let ty = words.next().unwrap_or("");
                if ty == "list" {
                    return Err(parse_err(
                        path,
                        lineno,
                        "list properties are not supported on vertices",
                    ));
                }
                let name = words.next().unwrap_or("");
                let col = properties.len();
                match name {
                    "x" | "y" | "z" => {
                        if !float_types.contains(&ty) {
                            return Err(parse_err(
                                path,
                                lineno,
                                format!("coordinate property `{name}` has non-float type `{ty}`"),
                            ));
                        }
                        coord_cols.push(col);
                    }
                    "cluster" => {
                        if !int_types.contains(&ty) {
                            return Err(parse_err(
                                path,
                                lineno,
                                format!("cluster property has non-integer type `{ty}`"),
                            ));
                        }
                        label_col = Some(col);
                    }
                    _ => {}
                }
                properties.push(name.to_string());
            }
            Some(other) => {
                return Err(parse_err(
                    path,
                    lineno,
                    format!("unexpected header keyword `{other}`"),
                ));
            }
            None => {}
        }
    }
    if header_end == 0 {
        return Err(parse_err(path, 0, "missing end_header"));
    }
    let vertex_count =
        vertex_count.ok_or_else(|| parse_err(path, header_end, "no vertex element declared"))?;
    if coord_cols.is_empty() {
        return Err(parse_err(path, header_end, "no x/y/z properties declared"));
    }

    let mut rows = Vec::with_capacity(vertex_count);
    let mut raw_labels = Vec::new();
    for _ in 0..vertex_count {
        let (lineno, line) = lines
            .next()
            .ok_or_else(|| parse_err(path, header_end, "vertex data ends early"))?;
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != properties.len() {
            return Err(parse_err(
                path,
                lineno,
                format!(
                    "vertex line has {} values, header declares {}",
                    fields.len(),
                    properties.len()
                ),
            ));
        }
        let mut coords = Vec::with_capacity(coord_cols.len());
        for &c in &coord_cols {
            let v: f64 = fields[c]
                .parse()
                .map_err(|_| parse_err(path, lineno, format!("non-numeric field `{}`", fields[c])))?;
            if !v.is_finite() {
                return Err(parse_err(path, lineno, "non-finite coordinate"));
            }
            coords.push(v);
        }
        if let Some(c) = label_col {
            let raw: i64 = fields[c].parse().map_err(|_| {
                parse_err(path, lineno, format!("label `{}` is not an integer", fields[c]))
            })?;
            if raw < 0 {
                return Err(parse_err(path, lineno, format!("negative label {raw}")));
            }
            raw_labels.push(raw);
        }
        rows.push(coords);
    }
    if rows.is_empty() {
        return Err(parse_err(path, 0, "file holds no points"));
    }
    let points = PointSet::from_rows(&rows)?;
    let labels = if label_col.is_some() {
        Some(reindex_labels(path, &raw_labels)?)
    } else {
        None
    };
    Ok((points, labels))
}

/// 17-significant-digit decimal form; parses back to the identical f64.
pub(crate) fn fmt_f64(v: f64) -> String {
    format!("{v:.16e}")
}

/// Write a cloud as CSV, appending each point's label when provided.
pub fn write_point_set_csv(
    path: &Path,
    points: &PointSet,
    labels: Option<&ClusterAssignment>,
) -> Result<()> {
    if let Some(l) = labels {
        if l.len() != points.n_points() {
            return Err(Error::Input(
                "labeling length does not match its point set".to_string(),
            ));
        }
    }
    let mut out = String::new();
    for i in 0..points.n_points() {
        let coords: Vec<String> = (0..points.dim())
            .map(|c| fmt_f64(points.matrix()[(i, c)]))
            .collect();
        out.push_str(&coords.join(","));
        if let Some(l) = labels {
            out.push(',');
            out.push_str(&l.label(i).to_string());
        }
        out.push('\n');
    }
    fs::write(path, out).map_err(io_err(path))
}

/// Write the artifacts of a registration run into `out_dir`:
/// `transformed.csv` (aligned template, with labels when given), `w.csv`
/// (coefficients), and `trace.jsonl` (one iteration record per line).
pub fn write_result(
    result: &RegistrationResult,
    labels: Option<&ClusterAssignment>,
    out_dir: &Path,
) -> Result<()> {
    if result.trace.is_empty() {
        return Err(Error::Input(
            "refusing to write a result with an empty trace".to_string(),
        ));
    }
    fs::create_dir_all(out_dir).map_err(io_err(out_dir))?;

    write_point_set_csv(&out_dir.join("transformed.csv"), &result.transformed, labels)?;

    let w = result.field.coefficients();
    let w_path = out_dir.join("w.csv");
    let mut out = String::new();
    for i in 0..w.nrows() {
        let row: Vec<String> = (0..w.ncols()).map(|c| fmt_f64(w[(i, c)])).collect();
        out.push_str(&row.join(","));
        out.push('\n');
    }
    fs::write(&w_path, out).map_err(io_err(&w_path))?;

    let log_path = out_dir.join("trace.jsonl");
    let mut file = fs::File::create(&log_path).map_err(io_err(&log_path))?;
    for record in &result.trace {
        let line = serde_json::to_string(record)
            .map_err(|e| Error::Input(format!("run log serialization failed: {e}")))?;
        writeln!(file, "{line}").map_err(io_err(&log_path))?;
    }
    Ok(())
}

/// Read back a `trace.jsonl` run log.
pub fn read_run_log(path: &Path) -> Result<Vec<IterationRecord>> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    let mut records = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let record: IterationRecord = serde_json::from_str(line)
            .map_err(|e| parse_err(path, lineno + 1, e.to_string()))?;
        records.push(record);
    }
    Ok(records)
}

/// Read a correspondence-prior file: a `alpha_sq=<value>` header line, then
/// one 1-based `n_index,m_index` pair per line. Duplicate pairs are
/// rejected; index upper bounds are checked later against the actual clouds.
pub fn read_priors(path: &Path) -> Result<CorrespondencePriors> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    let mut lines = text.lines().enumerate();

    let (_, header) = lines
        .by_ref()
        .map(|(i, l)| (i, l.trim()))
        .find(|(_, l)| !l.is_empty())
        .ok_or_else(|| parse_err(path, 1, "missing alpha_sq header"))?;
    let alpha_sq: f64 = header
        .strip_prefix("alpha_sq=")
        .ok_or_else(|| parse_err(path, 1, "first line must be alpha_sq=<value>"))?
        .trim()
        .parse()
        .map_err(|_| parse_err(path, 1, "alpha_sq value is not a number"))?;
    if !(alpha_sq > 0.0 && alpha_sq.is_finite()) {
        return Err(parse_err(path, 1, "alpha_sq must be positive and finite"));
    }

    let mut pairs = Vec::new();
    let mut seen = std::collections::HashSet::new();
    for (lineno, line) in lines {
        let lineno = lineno + 1;
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let (n_str, m_str) = line
            .split_once(',')
            .ok_or_else(|| parse_err(path, lineno, "expected `n_index,m_index`"))?;
        let n: usize = n_str
            .trim()
            .parse()
            .map_err(|_| parse_err(path, lineno, format!("bad data index `{n_str}`")))?;
        let m: usize = m_str
            .trim()
            .parse()
            .map_err(|_| parse_err(path, lineno, format!("bad template index `{m_str}`")))?;
        if n == 0 || m == 0 {
            return Err(parse_err(path, lineno, "indices are 1-based"));
        }
        if !seen.insert((n, m)) {
            return Err(parse_err(path, lineno, format!("duplicate pair {n},{m}")));
        }
        pairs.push((n - 1, m - 1));
    }
    CorrespondencePriors::new(pairs, alpha_sq)
}
