use crate::error::{Error, Result};
use crate::plane::Plane;

/// A square window of an image and where it was cut from.
#[derive(Clone, Debug, PartialEq)]
pub struct Patch<T> {
    pub row: usize,
    pub col: usize,
    pub data: Plane<T>,
}

fn grid_positions(len: usize, size: usize, step: usize) -> Vec<usize> {
    (0..=(len - size) / step).map(|i| i * step).collect()
}

/// Number of overlapping `size` patches at stride `step` in a `rows x cols` image.
pub fn overlapping_count(rows: usize, cols: usize, size: usize, step: usize) -> usize {
    if rows < size || cols < size || step == 0 {
        return 0;
    }
    ((rows - size) / step + 1) * ((cols - size) / step + 1)
}

/// Number of tiles after padding each axis up to a multiple of `size`.
pub fn nonoverlapping_count(rows: usize, cols: usize, size: usize) -> usize {
    rows.div_ceil(size) * cols.div_ceil(size)
}

pub fn extract_patches_overlapping<T: Copy>(
    img: &Plane<T>,
    size: usize,
    step: usize,
) -> Result<Vec<Patch<T>>> {
    if size == 0 || step == 0 {
        return Err(Error::config("patch", "size and step must be positive"));
    }
    let (rows, cols) = img.dims();
    if rows < size || cols < size {
        return Err(Error::ImageTooSmall { rows, cols, size });
    }
    let cs = grid_positions(cols, size, step);
    let mut out = Vec::with_capacity(overlapping_count(rows, cols, size, step));
    for r in grid_positions(rows, size, step) {
        for &c in &cs {
            out.push(Patch {
                row: r,
                col: c,
                data: img.crop(r, c, size, size),
            });
        }
    }
    Ok(out)
}

/// Mirror an out-of-range index back into `0..len` without repeating the edge
/// sample (`... 2 1 | 0 1 2 ... n-1 | n-2 n-3 ...`). Works for any overshoot.
pub fn reflect_index(i: isize, len: usize) -> usize {
    if len == 1 {
        return 0;
    }
    let period = 2 * (len as isize - 1);
    let m = i.rem_euclid(period);
    if m < len as isize {
        m as usize
    } else {
        (period - m) as usize
    }
}

/// Extend `img` at the bottom and right by reflection to `rows x cols`.
pub fn reflect_pad<T: Copy>(img: &Plane<T>, rows: usize, cols: usize) -> Plane<T> {
    assert!(rows >= img.rows() && cols >= img.cols(), "padding cannot shrink");
    Plane::from_fn(rows, cols, |r, c| {
        img.get(
            reflect_index(r as isize, img.rows()),
            reflect_index(c as isize, img.cols()),
        )
    })
}

/// Non-overlapping tiling of an image padded up to whole tiles.
#[derive(Clone, Debug, PartialEq)]
pub struct TiledImage<T> {
    pub rows: usize,
    pub cols: usize,
    pub padded_rows: usize,
    pub padded_cols: usize,
    pub tiles: Vec<Patch<T>>,
}

pub fn extract_patches_nonoverlapping<T: Copy>(img: &Plane<T>, size: usize) -> Result<TiledImage<T>> {
    if size == 0 {
        return Err(Error::config("patch", "size must be positive"));
    }
    let (rows, cols) = img.dims();
    if rows == 0 || cols == 0 {
        return Err(Error::Empty("image"));
    }
    let padded_rows = rows.div_ceil(size) * size;
    let padded_cols = cols.div_ceil(size) * size;
    let padded = reflect_pad(img, padded_rows, padded_cols);
    let tiles = extract_patches_overlapping(&padded, size, size)?;
    Ok(TiledImage {
        rows,
        cols,
        padded_rows,
        padded_cols,
        tiles,
    })
}

/// Reassemble tiles (in any order) and crop back to the original size.
pub fn stitch<T: Copy + Default>(
    tiles: &[Patch<T>],
    rows: usize,
    cols: usize,
    padded_rows: usize,
    padded_cols: usize,
) -> Plane<T> {
    let mut full = Plane::filled(padded_rows, padded_cols, T::default());
    for t in tiles {
        full.paste(&t.data, t.row, t.col);
    }
    full.crop(0, 0, rows, cols)
}
