//! Label images, patch grids, domain tagging, file formats, and the synthetic
//! two-sensor dataset generator.

mod io;
mod patches;
pub mod synth;

pub use io::{
    load_ground_truth, load_ground_truth_for, load_image, save_image, validate_pores, write_pores,
    DatasetEntry, DatasetManifest, FingerprintImage, LoadedEntry,
};
pub use patches::{
    extract_patches_nonoverlapping, extract_patches_overlapping, nonoverlapping_count,
    overlapping_count, reflect_index, reflect_pad, stitch, Patch, TiledImage,
};
pub use synth::{synth_domain, synth_domain_pair, synth_image, SynthConfig, SynthImage};

use crate::error::{Error, Result};
use crate::plane::Plane;

/// Ground-truth pore position, 0-based `(row, col)`.
pub type Pore = (usize, usize);

/// Radius in pixels inside which label images are non-zero.
pub const LABEL_RADIUS: f64 = 5.0;

/// Soft pore target: `1 - d/radius` for the distance `d` to the nearest pore
/// when `d < radius`, else 0.
pub fn pore_label_image(pores: &[Pore], rows: usize, cols: usize) -> Result<Plane<f64>> {
    pore_label_image_with_radius(pores, rows, cols, LABEL_RADIUS)
}

pub fn pore_label_image_with_radius(
    pores: &[Pore],
    rows: usize,
    cols: usize,
    radius: f64,
) -> Result<Plane<f64>> {
    if !(radius > 0.0) {
        return Err(Error::config("label radius", "must be positive"));
    }
    validate_pores(pores, rows, cols)?;
    let mut label = Plane::filled(rows, cols, 0.0);
    let reach = radius.ceil() as usize;
    for &(pr, pc) in pores {
        for r in pr.saturating_sub(reach)..(pr + reach + 1).min(rows) {
            for c in pc.saturating_sub(reach)..(pc + reach + 1).min(cols) {
                let dr = r as f64 - pr as f64;
                let dc = c as f64 - pc as f64;
                let d = (dr * dr + dc * dc).sqrt();
                if d < radius {
                    let v = 1.0 - d / radius;
                    if v > label.get(r, c) {
                        label.set(r, c, v);
                    }
                }
            }
        }
    }
    Ok(label)
}

/// Which dataset a patch came from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Origin {
    Source,
    Target,
}

/// Domain label: 0 for source patches, 1 for target patches.
pub fn assign_domain(origin: Origin) -> usize {
    match origin {
        Origin::Source => 0,
        Origin::Target => 1,
    }
}

/// Network-ready patch with its domain label; only source samples carry a
/// pore label patch.
#[derive(Clone, Debug, PartialEq)]
pub struct DomainSample {
    patch: Plane<f32>,
    domain: usize,
    label: Option<Plane<f32>>,
}

impl DomainSample {
    pub fn source(patch: Plane<f32>, label: Plane<f32>) -> Self {
        assert_eq!(patch.dims(), label.dims(), "label must match its patch");
        DomainSample {
            patch,
            domain: assign_domain(Origin::Source),
            label: Some(label),
        }
    }

    pub fn target(patch: Plane<f32>) -> Self {
        DomainSample {
            patch,
            domain: assign_domain(Origin::Target),
            label: None,
        }
    }

    pub fn patch(&self) -> &Plane<f32> {
        &self.patch
    }

    pub fn domain(&self) -> usize {
        self.domain
    }

    pub fn label(&self) -> Option<&Plane<f32>> {
        self.label.as_ref()
    }
}

/// 8-bit intensities scaled into `[0, 1]`.
pub fn normalize(pixels: &Plane<u8>) -> Plane<f32> {
    pixels.map(|v| v as f32 / 255.0)
}

/// Overlapping training patches of one image, labelled when `pores` is given.
pub fn domain_samples(
    image: &Plane<u8>,
    pores: Option<&[Pore]>,
    size: usize,
    step: usize,
) -> Result<Vec<DomainSample>> {
    let input = normalize(image);
    let label = match pores {
        Some(p) => Some(pore_label_image(p, image.rows(), image.cols())?.map(|v| v as f32)),
        None => None,
    };
    let patches = extract_patches_overlapping(&input, size, step)?;
    Ok(patches
        .into_iter()
        .map(|p| match &label {
            Some(l) => {
                let lp = l.crop(p.row, p.col, size, size);
                DomainSample::source(p.data, lp)
            }
            None => DomainSample::target(p.data),
        })
        .collect())
}

/// Training samples from loaded dataset entries: labelled source patches when
/// `origin` is `Source`, unlabelled target patches otherwise.
pub fn samples_from_entries(
    entries: &[LoadedEntry],
    origin: Origin,
    size: usize,
    step: usize,
) -> Result<Vec<DomainSample>> {
    let mut out = Vec::new();
    for e in entries.iter().filter(|e| e.domain == origin) {
        let pores = match origin {
            Origin::Source => Some(
                e.pores
                    .as_deref()
                    .ok_or_else(|| Error::config("manifest", format!("source image {} has no pore file", e.image.id)))?,
            ),
            Origin::Target => None,
        };
        out.extend(domain_samples(&e.image.pixels, pores, size, step)?);
    }
    Ok(out)
}

/// Labelled patches regardless of domain (for fine-tuning on a new sensor).
pub fn labelled_samples(entries: &[LoadedEntry], size: usize, step: usize) -> Result<Vec<DomainSample>> {
    let mut out = Vec::new();
    for e in entries {
        let pores = e
            .pores
            .as_deref()
            .ok_or_else(|| Error::config("manifest", format!("image {} has no pore file", e.image.id)))?;
        out.extend(domain_samples(&e.image.pixels, Some(pores), size, step)?);
    }
    Ok(out)
}
