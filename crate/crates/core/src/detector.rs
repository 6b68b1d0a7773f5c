//! Whole-image inference and pore extraction.

use std::path::Path;

use ndgrad::{Grid4, Shape4};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataprep::{extract_patches_nonoverlapping, normalize, stitch, Patch, Pore};
use crate::error::{Error, Result};
use crate::fsutil::atomic_write;
use crate::plane::Plane;
use crate::porenet::PoreNet;

/// Tiles per forward pass during inference.
const INFERENCE_BATCH: usize = 8;

/// A local maximum of the pore map.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub row: usize,
    pub col: usize,
    pub value: f32,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MaximaOptions {
    /// Odd side length of the max-filter window.
    pub window: usize,
    /// Keep only the top-left pixel of each connected run of tied maxima.
    pub dedup_plateaus: bool,
}

impl Default for MaximaOptions {
    fn default() -> Self {
        MaximaOptions {
            window: 5,
            dedup_plateaus: false,
        }
    }
}

/// Max over a `window`-wide window along rows then columns, clipped at the
/// borders. Separable, so equal to the full 2-D windowed maximum.
pub fn max_filter(map: &Plane<f32>, window: usize) -> Plane<f32> {
    let half = window / 2;
    let (rows, cols) = map.dims();
    let horiz = Plane::from_fn(rows, cols, |r, c| {
        let row = map.row(r);
        row[c.saturating_sub(half)..(c + half + 1).min(cols)]
            .iter()
            .copied()
            .fold(f32::NEG_INFINITY, f32::max)
    });
    Plane::from_fn(rows, cols, |r, c| {
        (r.saturating_sub(half)..(r + half + 1).min(rows))
            .map(|rr| horiz.get(rr, c))
            .fold(f32::NEG_INFINITY, f32::max)
    })
}

/// Pixels equal to their windowed maximum and strictly above `th`, in
/// row-major order.
pub fn local_maxima(map: &Plane<f32>, th: f32, opts: MaximaOptions) -> Result<Vec<Detection>> {
    if opts.window % 2 == 0 {
        return Err(Error::config("window", format!("{} must be odd", opts.window)));
    }
    let filtered = max_filter(map, opts.window);
    let mut peaks: Vec<Detection> = Vec::new();
    for r in 0..map.rows() {
        for c in 0..map.cols() {
            let v = map.get(r, c);
            if v == filtered.get(r, c) && v > th {
                peaks.push(Detection { row: r, col: c, value: v });
            }
        }
    }
    if opts.dedup_plateaus {
        peaks = dedup_plateaus(map.dims(), peaks);
    }
    Ok(peaks)
}

/// Collapse 8-connected groups of equal-valued peaks to their first
/// (top-left in row-major order) pixel.
fn dedup_plateaus(dims: (usize, usize), peaks: Vec<Detection>) -> Vec<Detection> {
    let mut index = Plane::filled(dims.0, dims.1, usize::MAX);
    for (i, p) in peaks.iter().enumerate() {
        index.set(p.row, p.col, i);
    }
    let mut seen = vec![false; peaks.len()];
    let mut kept = Vec::new();
    for start in 0..peaks.len() {
        if seen[start] {
            continue;
        }
        seen[start] = true;
        kept.push(peaks[start]);
        let mut stack = vec![start];
        while let Some(i) = stack.pop() {
            let p = peaks[i];
            for r in p.row.saturating_sub(1)..(p.row + 2).min(dims.0) {
                for c in p.col.saturating_sub(1)..(p.col + 2).min(dims.1) {
                    let j = index.get(r, c);
                    if j != usize::MAX && !seen[j] && peaks[j].value == p.value {
                        seen[j] = true;
                        stack.push(j);
                    }
                }
            }
        }
    }
    kept
}

/// Eval-mode pore map for a whole image: normalize, tile, infer, stitch.
pub fn predict_map(net: &PoreNet<f32>, img: &Plane<u8>) -> Result<Plane<f32>> {
    let size = net.arch.pore.input_size;
    let tiled = extract_patches_nonoverlapping(&normalize(img), size)?;
    let outputs: Vec<Vec<Patch<f32>>> = tiled
        .tiles
        .par_chunks(INFERENCE_BATCH)
        .map(|chunk| infer_tiles(net, chunk))
        .collect::<Result<_>>()?;
    let tiles: Vec<Patch<f32>> = outputs.into_iter().flatten().collect();
    Ok(stitch(&tiles, tiled.rows, tiled.cols, tiled.padded_rows, tiled.padded_cols))
}

/// Pore maps for a set of equally sized patches, keeping their offsets.
pub fn infer_tiles(net: &PoreNet<f32>, tiles: &[Patch<f32>]) -> Result<Vec<Patch<f32>>> {
    let size = net.arch.pore.input_size;
    let mut data = Vec::with_capacity(tiles.len() * size * size);
    for t in tiles {
        data.extend_from_slice(t.data.data());
    }
    let y = net.predict(Grid4::from_vec(Shape4::new(tiles.len(), 1, size, size), data)?)?;
    Ok(tiles
        .iter()
        .enumerate()
        .map(|(i, t)| Patch {
            row: t.row,
            col: t.col,
            data: Plane::from_vec(size, size, y.sample(i).to_vec()),
        })
        .collect())
}

/// Pore coordinates of a pore map at threshold `th`.
pub fn detect_in_map(map: &Plane<f32>, th: f32, opts: MaximaOptions) -> Result<Vec<Detection>> {
    local_maxima(map, th, opts)
}

pub struct Detections {
    pub map: Plane<f32>,
    pub pores: Vec<Detection>,
}

pub fn detect(net: &PoreNet<f32>, img: &Plane<u8>, th: f32, opts: MaximaOptions) -> Result<Detections> {
    let map = predict_map(net, img)?;
    let pores = local_maxima(&map, th, opts)?;
    Ok(Detections { map, pores })
}

pub fn coordinates(dets: &[Detection]) -> Vec<Pore> {
    dets.iter().map(|d| (d.row, d.col)).collect()
}

/// Write a pore map as a binary 16-bit PGM (big-endian samples). Values are
/// multiplied by `65535 / max` (or 1 for an all-zero map); the factor is
/// recorded in a header comment and returned.
pub fn write_pgm16(map: &Plane<f32>, path: &Path) -> Result<f64> {
    let peak = map.data().iter().copied().fold(0.0f32, f32::max) as f64;
    let scale = if peak > 0.0 { 65535.0 / peak } else { 1.0 };
    let mut out = format!(
        "P5\n# pore intensity scale {scale:e}\n{} {}\n65535\n",
        map.cols(),
        map.rows()
    )
    .into_bytes();
    for &v in map.data() {
        let q = (v.max(0.0) as f64 * scale).round().min(65535.0) as u16;
        out.extend_from_slice(&q.to_be_bytes());
    }
    atomic_write(path, &out)?;
    Ok(scale)
}

/// Read back a map written by [`write_pgm16`], dividing by its recorded scale.
pub fn read_pgm16(path: &Path) -> Result<Plane<f32>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let bad = |d: &str| Error::UnsupportedImage {
        path: path.to_path_buf(),
        detail: d.to_string(),
    };
    let mut pos = 0;
    let mut scale = None;
    let mut fields = Vec::new();
    while fields.len() < 4 {
        let end = bytes[pos..]
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| bad("truncated header"))?
            + pos;
        let line = std::str::from_utf8(&bytes[pos..end]).map_err(|_| bad("header is not text"))?;
        pos = end + 1;
        if let Some(s) = line.strip_prefix("# pore intensity scale ") {
            scale = Some(s.trim().parse::<f64>().map_err(|_| bad("bad scale comment"))?);
        } else if !line.starts_with('#') {
            fields.extend(line.split_whitespace().map(str::to_string));
        }
    }
    if fields[0] != "P5" || fields[3] != "65535" {
        return Err(bad("expected a 16-bit binary PGM"));
    }
    let cols: usize = fields[1].parse().map_err(|_| bad("bad width"))?;
    let rows: usize = fields[2].parse().map_err(|_| bad("bad height"))?;
    let scale = scale.ok_or_else(|| bad("missing scale comment"))?;
    let body = &bytes[pos..];
    if body.len() != rows * cols * 2 {
        return Err(bad("pixel data length mismatch"));
    }
    let data = body
        .chunks_exact(2)
        .map(|b| (u16::from_be_bytes([b[0], b[1]]) as f64 / scale) as f32)
        .collect();
    Ok(Plane::from_vec(rows, cols, data))
}
