use std::collections::HashSet;
use std::io::Cursor;
use std::path::{Path, PathBuf};

use image::codecs::pnm::{PnmEncoder, PnmSubtype, SampleEncoding};
use image::{DynamicImage, ExtendedColorType, GrayImage, ImageEncoder, ImageFormat, ImageReader};
use serde::{Deserialize, Serialize};

use super::{Origin, Pore};
use crate::error::{Error, Result};
use crate::fsutil::atomic_write;
use crate::plane::Plane;

/// An 8-bit grayscale fingerprint.
#[derive(Clone, Debug, PartialEq)]
pub struct FingerprintImage {
    pub id: String,
    pub pixels: Plane<u8>,
    /// Scan resolution when known; informational only.
    pub dpi: Option<u32>,
}

/// Read an 8-bit grayscale PNG or binary PGM (P5). Any other depth or colour
/// layout is rejected rather than converted.
pub fn load_image(path: &Path) -> Result<FingerprintImage> {
    let unsupported = |detail: String| Error::UnsupportedImage {
        path: path.to_path_buf(),
        detail,
    };
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let reader = ImageReader::new(Cursor::new(bytes))
        .with_guessed_format()
        .map_err(|e| Error::io(path, e))?;
    match reader.format() {
        Some(ImageFormat::Png) | Some(ImageFormat::Pnm) => {}
        other => return Err(unsupported(format!("container {other:?}"))),
    }
    let img = reader.decode().map_err(|e| unsupported(e.to_string()))?;
    let gray = match img {
        DynamicImage::ImageLuma8(g) => g,
        other => return Err(unsupported(format!("{:?} pixels, expected 8-bit gray", other.color()))),
    };
    let (w, h) = gray.dimensions();
    let id = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    Ok(FingerprintImage {
        id,
        pixels: Plane::from_vec(h as usize, w as usize, gray.into_raw()),
        dpi: None,
    })
}

/// Write 8-bit grayscale as PNG, or as binary PGM when the extension is `.pgm`.
pub fn save_image(pixels: &Plane<u8>, path: &Path) -> Result<()> {
    let gray = GrayImage::from_raw(pixels.cols() as u32, pixels.rows() as u32, pixels.data().to_vec())
        .expect("plane dimensions match its buffer");
    let pgm = path
        .extension()
        .and_then(|e| e.to_str())
        .is_some_and(|e| e.eq_ignore_ascii_case("pgm"));
    let mut buf = Cursor::new(Vec::new());
    let written = if pgm {
        // The default PNM encoder picks PAM (P7) for gray images; force P5.
        PnmEncoder::new(&mut buf)
            .with_subtype(PnmSubtype::Graymap(SampleEncoding::Binary))
            .write_image(gray.as_raw(), gray.width(), gray.height(), ExtendedColorType::L8)
    } else {
        gray.write_to(&mut buf, ImageFormat::Png)
    };
    written.map_err(|e| Error::UnsupportedImage {
        path: path.to_path_buf(),
        detail: e.to_string(),
    })?;
    atomic_write(path, buf.get_ref())
}

/// Parse a `.pores` file: one `row col` pair per line, blank lines ignored.
/// Bounds are not known here; see [`load_ground_truth_for`].
pub fn load_ground_truth(path: &Path) -> Result<Vec<Pore>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut pores = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let trimmed = line.trim();
        if trimmed.is_empty() {
            continue;
        }
        let malformed = || Error::MalformedPoreLine {
            path: path.to_path_buf(),
            line: i + 1,
            content: line.to_string(),
        };
        let mut fields = trimmed.split_whitespace();
        let (Some(r), Some(c), None) = (fields.next(), fields.next(), fields.next()) else {
            return Err(malformed());
        };
        let r = r.parse::<usize>().map_err(|_| malformed())?;
        let c = c.parse::<usize>().map_err(|_| malformed())?;
        pores.push((r, c));
    }
    Ok(pores)
}

/// [`load_ground_truth`] plus bounds and uniqueness checks against an image.
pub fn load_ground_truth_for(path: &Path, rows: usize, cols: usize) -> Result<Vec<Pore>> {
    let pores = load_ground_truth(path)?;
    validate_pores(&pores, rows, cols)?;
    Ok(pores)
}

pub fn validate_pores(pores: &[Pore], rows: usize, cols: usize) -> Result<()> {
    let mut seen = HashSet::with_capacity(pores.len());
    for &(row, col) in pores {
        if row >= rows || col >= cols {
            return Err(Error::PoreOutOfBounds { row, col, rows, cols });
        }
        if !seen.insert((row, col)) {
            return Err(Error::DuplicatePore { row, col });
        }
    }
    Ok(())
}

pub fn write_pores(pores: &[Pore], path: &Path) -> Result<()> {
    let mut text = String::with_capacity(pores.len() * 8);
    for (r, c) in pores {
        text.push_str(&format!("{r} {c}\n"));
    }
    atomic_write(path, text.as_bytes())
}

/// One image of a dataset, with paths relative to the manifest file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetEntry {
    pub image: PathBuf,
    #[serde(default)]
    pub pores: Option<PathBuf>,
    pub domain: Origin,
}

/// JSON array of [`DatasetEntry`].
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct DatasetManifest {
    pub entries: Vec<DatasetEntry>,
}

/// A manifest entry resolved and loaded from disk.
#[derive(Clone, Debug)]
pub struct LoadedEntry {
    pub image: FingerprintImage,
    pub pores: Option<Vec<Pore>>,
    pub domain: Origin,
}

impl DatasetManifest {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_slice(&text).map_err(|source| Error::Json {
            path: path.to_path_buf(),
            source,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut json = serde_json::to_vec_pretty(self).map_err(|source| Error::Json {
            path: path.to_path_buf(),
            source,
        })?;
        json.push(b'\n');
        atomic_write(path, &json)
    }

    /// Load every entry whose domain is `origin` (all entries when `None`),
    /// resolving paths against `base`.
    pub fn load_entries(&self, base: &Path, origin: Option<Origin>) -> Result<Vec<LoadedEntry>> {
        self.entries
            .iter()
            .filter(|e| origin.is_none_or(|o| o == e.domain))
            .map(|e| {
                let image = load_image(&base.join(&e.image))?;
                let pores = match &e.pores {
                    Some(p) => Some(load_ground_truth_for(
                        &base.join(p),
                        image.pixels.rows(),
                        image.pixels.cols(),
                    )?),
                    None => None,
                };
                Ok(LoadedEntry {
                    image,
                    pores,
                    domain: e.domain,
                })
            })
            .collect()
    }
}
