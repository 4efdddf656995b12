//! Attention maps and grid heatmaps.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::data::InstanceBag;
use crate::error::{MilError, Result};
use crate::eval::{auc, nearest_rank, ScoredSet};
use crate::model::MilModel;

/// Lower and upper percentiles clamped by the heatmap normalization.
pub const NORMALIZE_PERCENTILES: (f64, f64) = (0.01, 0.99);

#[derive(Debug, Clone, PartialEq)]
pub struct AttentionMap {
    pub bag_id: String,
    pub predicted_class: usize,
    /// Attention of the predicted class, one weight per instance.
    pub raw: Vec<f64>,
    /// `raw` rescaled to `[0, 1]`.
    pub normalized: Vec<f64>,
    pub coords: Option<Vec<(u32, u32)>>,
}

/// Min-max scaling between the 1st and 99th percentiles, clamped to
/// `[0, 1]`. A zero range maps every value to 1.
pub fn normalize_attention(raw: &[f64]) -> Vec<f64> {
    let mut sorted = raw.to_vec();
    sorted.sort_by(f64::total_cmp);
    if sorted.is_empty() {
        return Vec::new();
    }
    let lo = nearest_rank(&sorted, NORMALIZE_PERCENTILES.0);
    let hi = nearest_rank(&sorted, NORMALIZE_PERCENTILES.1);
    let range = hi - lo;
    if range.is_nan() || range <= 0.0 {
        return vec![1.0; raw.len()];
    }
    raw.iter().map(|&v| ((v - lo) / range).clamp(0.0, 1.0)).collect()
}

/// Attention of the predicted class over the full bag.
pub fn attention_map(bag: &InstanceBag, model: &MilModel) -> Result<AttentionMap> {
    if bag.is_empty() {
        return Err(MilError::TooFewInstances(format!("bag {} is empty", bag.bag_id)));
    }
    let pred = model.predict(bag)?;
    let class = pred.predicted_class();
    let raw = pred.attention.row(class).to_vec();
    Ok(AttentionMap {
        bag_id: bag.bag_id.clone(),
        predicted_class: class,
        normalized: normalize_attention(&raw),
        raw,
        coords: bag.coords.clone(),
    })
}

/// Round-half-up quantization of a value in `[0, 1]`.
pub fn quantize(v: f64) -> u8 {
    (255.0 * v.clamp(0.0, 1.0) + 0.5).floor() as u8
}

/// Grayscale raster of a map: `(width, height, row-major pixels)`. Cells
/// without an instance are 0.
pub fn raster(map: &AttentionMap) -> Result<(usize, usize, Vec<u8>)> {
    let coords = map
        .coords
        .as_ref()
        .ok_or_else(|| MilError::InvalidCoords(format!("bag {} has no coordinates", map.bag_id)))?;
    if coords.len() != map.normalized.len() {
        return Err(MilError::InvalidCoords(format!(
            "{} coordinates for {} instances",
            coords.len(),
            map.normalized.len()
        )));
    }
    let mut seen = HashMap::with_capacity(coords.len());
    for (i, c) in coords.iter().enumerate() {
        if let Some(j) = seen.insert(*c, i) {
            return Err(MilError::InvalidCoords(format!(
                "instances {j} and {i} share cell {c:?}"
            )));
        }
    }
    let height = coords.iter().map(|c| c.0 as usize + 1).max().unwrap_or(0);
    let width = coords.iter().map(|c| c.1 as usize + 1).max().unwrap_or(0);
    let mut pixels = vec![0u8; width * height];
    for (&(r, c), &v) in coords.iter().zip(&map.normalized) {
        pixels[r as usize * width + c as usize] = quantize(v);
    }
    Ok((width, height, pixels))
}

/// Binary PGM (`P5`, maxval 255) and a `row,col,raw,normalized` CSV.
pub fn render_grid(map: &AttentionMap) -> Result<(Vec<u8>, String)> {
    let (width, height, pixels) = raster(map)?;
    let mut pgm = format!("P5\n{width} {height}\n255\n").into_bytes();
    pgm.extend_from_slice(&pixels);
    let mut csv = String::from("row,col,raw,normalized\n");
    let coords = map.coords.as_deref().unwrap_or_default();
    for ((r, c), (raw, norm)) in coords.iter().zip(map.raw.iter().zip(&map.normalized)) {
        let _ = writeln!(csv, "{r},{c},{raw},{norm}");
    }
    Ok((pgm, csv))
}

/// Writes `PREFIX.pgm` and `PREFIX.csv`, returning both paths.
pub fn write_heatmap(map: &AttentionMap, prefix: &Path) -> Result<(PathBuf, PathBuf)> {
    let (pgm, csv) = render_grid(map)?;
    let with_ext = |ext: &str| {
        let mut p = prefix.as_os_str().to_owned();
        p.push(ext);
        PathBuf::from(p)
    };
    let (pgm_path, csv_path) = (with_ext(".pgm"), with_ext(".csv"));
    std::fs::write(&pgm_path, pgm)?;
    std::fs::write(&csv_path, csv)?;
    Ok((pgm_path, csv_path))
}

/// Parses a binary PGM with maxval 255 into `(width, height, pixels)`.
pub fn parse_pgm(bytes: &[u8]) -> Result<(usize, usize, Vec<u8>)> {
    let bad = |m: &str| MilError::Format(format!("PGM: {m}"));
    let mut pos = 0;
    let mut fields = Vec::with_capacity(4);
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if pos < bytes.len() && bytes[pos] == b'#' {
            while pos < bytes.len() && bytes[pos] != b'\n' {
                pos += 1;
            }
            continue;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(bad("truncated header"));
        }
        fields.push(std::str::from_utf8(&bytes[start..pos]).map_err(|_| bad("non-ASCII header"))?);
    }
    if fields[0] != "P5" {
        return Err(bad("magic is not P5"));
    }
    let num = |s: &str| s.parse::<usize>().map_err(|_| bad("bad header number"));
    let (width, height, maxval) = (num(fields[1])?, num(fields[2])?, num(fields[3])?);
    if maxval != 255 {
        return Err(bad("maxval must be 255"));
    }
    // Exactly one whitespace byte separates the header from the raster.
    let data = bytes.get(pos + 1..).ok_or_else(|| bad("missing raster"))?;
    if data.len() != width * height {
        return Err(bad(&format!(
            "raster has {} bytes, expected {}",
            data.len(),
            width * height
        )));
    }
    Ok((width, height, data.to_vec()))
}

/// How well raw attention separates witness from background instances,
/// as an AUC.
pub fn witness_attention_auc(raw: &[f64], witness: &[bool]) -> Result<f64> {
    if raw.len() != witness.len() {
        return Err(MilError::InvalidValue(
            "attention and witness mask differ in length".into(),
        ));
    }
    auc(&ScoredSet::from_pairs(
        raw,
        &witness.iter().map(|&w| u8::from(w)).collect::<Vec<_>>(),
    )?)
}

/// Mean [`witness_attention_auc`] over bags that contain both witness and
/// background instances.
pub fn mean_witness_attention_auc(model: &MilModel, bags: &[InstanceBag], witness: &[Vec<bool>]) -> Result<f64> {
    let mut total = 0.0;
    let mut n = 0usize;
    for (bag, mask) in bags.iter().zip(witness) {
        if !mask.contains(&true) || !mask.contains(&false) {
            continue;
        }
        total += witness_attention_auc(&attention_map(bag, model)?.raw, mask)?;
        n += 1;
    }
    if n == 0 {
        return Err(MilError::DegenerateInput(
            "no bag mixes witness and background instances".into(),
        ));
    }
    Ok(total / n as f64)
}
