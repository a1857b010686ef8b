//! Shared file formats: the metrics CSV, binary PGM maps, and the
//! salient-point sidecar, plus the 9-significant-digit number format they
//! agree on.

use std::path::Path;

use crate::error::{Error, Result};

/// Formats with nine significant digits in plain decimal notation.
pub fn fmt_sig9(x: f64) -> String {
    if x == 0.0 {
        return "0.00000000".into();
    }
    if !x.is_finite() {
        return format!("{x}");
    }
    let exp = x.abs().log10().floor() as i32;
    let prec = (8 - exp).clamp(0, 17) as usize;
    format!("{x:.prec$}")
}

/// One metrics row: training loss averaged since the previous evaluation,
/// validation AP50, and wall-clock milliseconds since the run began.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRow {
    pub step: usize,
    pub train_loss: f64,
    pub val_ap50: f64,
    pub wall_ms: u64,
}

pub const METRICS_HEADER: &str = "step,train_loss,val_ap50,wall_ms";

pub fn metrics_to_csv(rows: &[MetricsRow]) -> String {
    let mut out = String::from(METRICS_HEADER);
    out.push('\n');
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{}\n",
            r.step,
            fmt_sig9(r.train_loss),
            fmt_sig9(r.val_ap50),
            r.wall_ms
        ));
    }
    out
}

pub fn parse_metrics_csv(text: &str) -> Result<Vec<MetricsRow>> {
    let mut lines = text.lines();
    match lines.next() {
        Some(h) if h == METRICS_HEADER => {}
        other => {
            return Err(Error::format(
                "metrics",
                format!("bad header {:?}, expected {METRICS_HEADER:?}", other.unwrap_or("")),
            ))
        }
    }
    let mut rows = Vec::new();
    for (i, line) in lines.enumerate() {
        let parts: Vec<&str> = line.split(',').collect();
        if parts.len() != 4 {
            return Err(Error::format("metrics", format!("row {i} has {} fields", parts.len())));
        }
        let bad = |what: &str| Error::format("metrics", format!("row {i}: bad {what}"));
        rows.push(MetricsRow {
            step: parts[0].parse().map_err(|_| bad("step"))?,
            train_loss: parts[1].parse().map_err(|_| bad("train_loss"))?,
            val_ap50: parts[2].parse().map_err(|_| bad("val_ap50"))?,
            wall_ms: parts[3].parse().map_err(|_| bad("wall_ms"))?,
        });
    }
    Ok(rows)
}

/// Min-max normalizes values onto 0..=255; a constant map becomes zeros.
pub fn normalize_to_bytes(vals: &[f64]) -> Vec<u8> {
    let lo = vals.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = vals.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !(hi > lo) {
        return vec![0; vals.len()];
    }
    vals.iter().map(|v| ((v - lo) / (hi - lo) * 255.0).round() as u8).collect()
}

/// Writes a binary PGM (`P5`, maxval 255).
pub fn write_pgm(path: &Path, width: usize, height: usize, bytes: &[u8]) -> Result<()> {
    if bytes.len() != width * height {
        return Err(Error::format(
            "pgm",
            format!("{} bytes for a {width}x{height} map", bytes.len()),
        ));
    }
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(bytes);
    std::fs::write(path, out)?;
    Ok(())
}

/// Parses a binary PGM written by [`write_pgm`].
pub fn read_pgm(path: &Path) -> Result<(usize, usize, Vec<u8>)> {
    let bytes = std::fs::read(path)?;
    let header_end = bytes
        .iter()
        .enumerate()
        .filter(|&(_, b)| *b == b'\n')
        .nth(2)
        .map(|(i, _)| i + 1)
        .ok_or_else(|| Error::format("pgm", "missing header"))?;
    let header = std::str::from_utf8(&bytes[..header_end])
        .map_err(|_| Error::format("pgm", "header is not UTF-8"))?;
    let mut fields = header.split_ascii_whitespace();
    if fields.next() != Some("P5") {
        return Err(Error::format("pgm", "not a binary PGM"));
    }
    let bad = || Error::format("pgm", "malformed dimensions");
    let width: usize = fields.next().ok_or_else(bad)?.parse().map_err(|_| bad())?;
    let height: usize = fields.next().ok_or_else(bad)?.parse().map_err(|_| bad())?;
    if fields.next() != Some("255") {
        return Err(Error::format("pgm", "maxval must be 255"));
    }
    let data = bytes[header_end..].to_vec();
    if data.len() != width * height {
        return Err(Error::format(
            "pgm",
            format!("{} data bytes for {width}x{height}", data.len()),
        ));
    }
    Ok((width, height, data))
}

/// Sidecar lines `query head x y` with 6-decimal normalized coordinates.
pub fn points_sidecar(points: &[(usize, usize, f64, f64)]) -> String {
    let mut out = String::new();
    for &(q, h, x, y) in points {
        out.push_str(&format!("{q} {h} {x:.6} {y:.6}\n"));
    }
    out
}
