//! Readers and writers for the two on-disk point formats.
//!
//! OFF meshes are triangulated on read (polygon faces become a fan around the
//! first vertex). XYZ files hold one whitespace-separated coordinate triple
//! per line; `#` starts a comment in both formats.

use std::fs;
use std::io::Write as _;
use std::path::Path;

use crate::error::{Error, Result};

use super::{PointCloud, TriangleMesh};

fn parse_err(path: &Path, line: usize, msg: impl Into<String>) -> Error {
    Error::Parse {
        path: path.to_path_buf(),
        line,
        msg: msg.into(),
    }
}

/// Content lines of a text file with comments stripped, keeping the original
/// 1-based line numbers for error messages.
fn content_lines(text: &str) -> impl Iterator<Item = (usize, &str)> {
    text.lines().enumerate().filter_map(|(i, raw)| {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            None
        } else {
            Some((i + 1, line))
        }
    })
}

/// Read an OFF mesh file.
///
/// Tolerates the common header variant where the counts share the first line
/// with the `OFF` keyword, and ignores trailing tokens on vertex lines (some
/// exporters append per-vertex colors).
pub fn read_off(path: &Path) -> Result<TriangleMesh> {
    let text = fs::read_to_string(path)?;
    let mut lines = content_lines(&text);

    let (lineno, header) = lines
        .next()
        .ok_or_else(|| parse_err(path, 1, "empty OFF file"))?;
    let counts_line = if header == "OFF" {
        let (n, l) = lines
            .next()
            .ok_or_else(|| parse_err(path, lineno, "missing count line"))?;
        (n, l.to_string())
    } else if let Some(rest) = header.strip_prefix("OFF") {
        (lineno, rest.trim().to_string())
    } else {
        return Err(parse_err(path, lineno, "missing OFF header"));
    };
    let counts: Vec<usize> = counts_line
        .1
        .split_whitespace()
        .map(|t| t.parse::<usize>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|e| parse_err(path, counts_line.0, format!("bad count: {e}")))?;
    if counts.len() < 2 {
        return Err(parse_err(
            path,
            counts_line.0,
            "expected vertex and face counts",
        ));
    }
    let (nv, nf) = (counts[0], counts[1]);

    let mut vertices = Vec::with_capacity(nv);
    for _ in 0..nv {
        let (lineno, line) = lines
            .next()
            .ok_or_else(|| parse_err(path, counts_line.0, "file ends inside vertex list"))?;
        let tokens: Vec<&str> = line.split_whitespace().collect();
        if tokens.len() < 3 {
            return Err(parse_err(path, lineno, "vertex needs three coordinates"));
        }
        let mut v = [0.0f64; 3];
        for (k, t) in tokens[..3].iter().enumerate() {
            v[k] = t
                .parse()
                .map_err(|e| parse_err(path, lineno, format!("bad coordinate {t:?}: {e}")))?;
        }
        vertices.push(v);
    }

    let mut faces = Vec::with_capacity(nf);
    for _ in 0..nf {
        let (lineno, line) = lines
            .next()
            .ok_or_else(|| parse_err(path, counts_line.0, "file ends inside face list"))?;
        let tokens: Vec<&str> = line.split_whitespace().collect();
        let k: usize = tokens[0]
            .parse()
            .map_err(|e| parse_err(path, lineno, format!("bad face size: {e}")))?;
        if k < 3 {
            return Err(parse_err(path, lineno, format!("face with {k} vertices")));
        }
        if tokens.len() < 1 + k {
            return Err(parse_err(path, lineno, "face line is short"));
        }
        let mut idx = Vec::with_capacity(k);
        for t in &tokens[1..=k] {
            let i: usize = t
                .parse()
                .map_err(|e| parse_err(path, lineno, format!("bad vertex index {t:?}: {e}")))?;
            if i >= nv {
                return Err(parse_err(path, lineno, format!("vertex index {i} out of range")));
            }
            idx.push(i);
        }
        for w in 1..k - 1 {
            faces.push([idx[0], idx[w], idx[w + 1]]);
        }
    }
    Ok(TriangleMesh { vertices, faces })
}

/// Read a plain-text XYZ point file.
pub fn read_xyz(path: &Path) -> Result<PointCloud> {
    let text = fs::read_to_string(path)?;
    let mut points = Vec::new();
    for (lineno, line) in content_lines(&text) {
        let tokens: Vec<&str> = line.split_whitespace().collect();
        if tokens.len() != 3 {
            return Err(parse_err(
                path,
                lineno,
                format!("expected 3 coordinates, found {}", tokens.len()),
            ));
        }
        let mut p = [0.0f64; 3];
        for (k, t) in tokens.iter().enumerate() {
            p[k] = t
                .parse()
                .map_err(|e| parse_err(path, lineno, format!("bad coordinate {t:?}: {e}")))?;
        }
        points.push(p);
    }
    if points.is_empty() {
        return Err(parse_err(path, 1, "no points in file"));
    }
    let id = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    Ok(PointCloud::new(id, points))
}

/// Write a cloud as XYZ text. `{}` prints the shortest representation that
/// round-trips each f64 exactly.
pub fn write_xyz(path: &Path, cloud: &PointCloud) -> Result<()> {
    let mut out = std::io::BufWriter::new(fs::File::create(path)?);
    for p in &cloud.points {
        writeln!(out, "{} {} {}", p[0], p[1], p[2])?;
    }
    out.flush()?;
    Ok(())
}
