//! Synthetic high-resolution fingerprints for two simulated sensors.
//!
//! Ridges are a warped oriented sinusoid `0.5 - 0.35 cos(phi)`, so ridge
//! crests (`phi = 2 pi k`) are dark and valleys bright. Pores are bright
//! elliptical Gaussian blobs centred on crest pixels; their exact integer
//! coordinates are the ground truth.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::Pore;
use crate::error::{Error, Result};
use crate::plane::Plane;

/// Crest (darkest) ridge intensity.
pub const RIDGE_DARK: f64 = 0.15;
/// Valley (brightest) ridge intensity.
pub const RIDGE_BRIGHT: f64 = 0.85;
/// Blob profiles are cut off beyond this many radii.
const BLOB_CUTOFF: f64 = 2.5;
const NEWTON_STEPS: usize = 4;
const ATTEMPTS_PER_PORE: usize = 60;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthConfig {
    pub rows: usize,
    pub cols: usize,
    pub count: usize,
    /// Ridge-to-ridge distance in pixels.
    pub ridge_period: f64,
    /// Amplitude (radians) of the low-frequency phase warp that bends ridges.
    pub warp: f64,
    /// Half-width at half-maximum of the pore blobs, drawn uniformly.
    pub pore_radius: [f64; 2],
    /// Pores per pixel of ridge length.
    pub pore_density: f64,
    /// Blob peak brightness above the ridge crest.
    pub contrast: f64,
    /// Standard deviation of additive Gaussian noise (intensity units).
    pub noise: f64,
}

impl SynthConfig {
    /// Simulated sensor with fine ridges and small pores (labelled domain).
    pub fn source() -> Self {
        SynthConfig {
            rows: 160,
            cols: 160,
            count: 8,
            ridge_period: 9.0,
            warp: 2.0,
            pore_radius: [1.5, 2.5],
            pore_density: 1.0 / 18.0,
            contrast: 0.55,
            noise: 0.03,
        }
    }

    /// Simulated sensor with coarser ridges, larger and fainter pores, and
    /// more noise (unlabelled domain).
    pub fn target() -> Self {
        SynthConfig {
            ridge_period: 12.0,
            pore_radius: [2.5, 3.5],
            pore_density: 1.0 / 24.0,
            contrast: 0.35,
            noise: 0.06,
            ..Self::source()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("rows", self.rows as f64),
            ("cols", self.cols as f64),
            ("count", self.count as f64),
            ("ridge_period", self.ridge_period),
            ("pore_radius", self.pore_radius[0]),
            ("pore_density", self.pore_density),
            ("contrast", self.contrast),
        ];
        for (field, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::config(field, "must be positive"));
            }
        }
        if !(self.noise >= 0.0 && self.warp >= 0.0) {
            return Err(Error::config("noise/warp", "must be non-negative"));
        }
        let [lo, hi] = self.pore_radius;
        if lo > hi {
            return Err(Error::config("pore_radius", "range is reversed"));
        }
        if hi >= self.ridge_period / 2.0 {
            return Err(Error::config("pore_radius", "must stay below half the ridge period"));
        }
        Ok(())
    }

    /// Pores requested per image: density times total ridge length.
    pub fn pores_per_image(&self) -> usize {
        (self.pore_density * (self.rows * self.cols) as f64 / self.ridge_period).round() as usize
    }
}

/// Orientation and warp of one image's ridge field.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RidgeLayout {
    /// Ridge normal direction.
    pub theta: f64,
    pub offset: f64,
    pub warp: f64,
    pub warp_freq: f64,
    pub warp_phase: f64,
    pub period: f64,
}

impl RidgeLayout {
    fn draw(cfg: &SynthConfig, rng: &mut ChaCha8Rng) -> Self {
        RidgeLayout {
            theta: rng.gen_range(0.0..std::f64::consts::PI),
            offset: rng.gen_range(0.0..std::f64::consts::TAU),
            warp: cfg.warp,
            warp_freq: std::f64::consts::TAU / (0.8 * cfg.rows.max(cfg.cols) as f64),
            warp_phase: rng.gen_range(0.0..std::f64::consts::TAU),
            period: cfg.ridge_period,
        }
    }

    /// Ridge phase and its gradient at `(row, col)`.
    ///
    /// `phi = k u + A sin(w v + p)` with `u` along the ridge normal and `v`
    /// along the ridge; `|grad phi| >= k`, so ridges never merge.
    pub fn phase(&self, r: f64, c: f64) -> (f64, [f64; 2]) {
        let (s, co) = self.theta.sin_cos();
        let u = c * co + r * s;
        let v = -c * s + r * co;
        let k = std::f64::consts::TAU / self.period;
        let arg = self.warp_freq * v + self.warp_phase;
        let phi = k * u + self.warp * arg.sin() + self.offset;
        let dv = self.warp * self.warp_freq * arg.cos();
        // d/dr and d/dc via du/dr = s, du/dc = co, dv/dr = co, dv/dc = -s
        (phi, [k * s + dv * co, k * co - dv * s])
    }

    pub fn intensity(&self, r: f64, c: f64) -> f64 {
        0.5 - 0.35 * self.phase(r, c).0.cos()
    }

    /// Newton iterations moving a point onto the nearest ridge crest.
    fn project_to_crest(&self, mut r: f64, mut c: f64) -> (f64, f64) {
        for _ in 0..NEWTON_STEPS {
            let (phi, [gr, gc]) = self.phase(r, c);
            let target = (phi / std::f64::consts::TAU).round() * std::f64::consts::TAU;
            let g2 = gr * gr + gc * gc;
            let step = (phi - target) / g2;
            r -= step * gr;
            c -= step * gc;
        }
        (r, c)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Blob {
    pub row: usize,
    pub col: usize,
    pub radius: f64,
    pub aspect: f64,
    pub angle: f64,
}

impl Blob {
    /// Normalized elliptical distance `q`; the profile is `exp(-ln2 q^2)`.
    fn q(&self, r: f64, c: f64) -> f64 {
        let (s, co) = self.angle.sin_cos();
        let dr = r - self.row as f64;
        let dc = c - self.col as f64;
        let a = (dc * co + dr * s) / self.radius;
        let b = (-dc * s + dr * co) / (self.radius * self.aspect);
        (a * a + b * b).sqrt()
    }

    pub fn profile(&self, r: f64, c: f64) -> f64 {
        let q = self.q(r, c);
        if q > BLOB_CUTOFF {
            0.0
        } else {
            (-std::f64::consts::LN_2 * q * q).exp()
        }
    }
}

/// One generated fingerprint and its exact pore positions.
#[derive(Clone, Debug, PartialEq)]
pub struct SynthImage {
    pub pixels: Plane<u8>,
    pub pores: Vec<Pore>,
    pub blobs: Vec<Blob>,
    pub layout: RidgeLayout,
}

fn place_blobs(cfg: &SynthConfig, layout: &RidgeLayout, rng: &mut ChaCha8Rng) -> Result<Vec<Blob>> {
    let wanted = cfg.pores_per_image();
    let attempts = wanted * ATTEMPTS_PER_PORE;
    let mut blobs: Vec<Blob> = Vec::with_capacity(wanted);
    for _ in 0..attempts {
        if blobs.len() == wanted {
            break;
        }
        let r0 = rng.gen_range(0.0..cfg.rows as f64);
        let c0 = rng.gen_range(0.0..cfg.cols as f64);
        let radius = rng.gen_range(cfg.pore_radius[0]..=cfg.pore_radius[1]);
        let aspect = rng.gen_range(0.8..=1.0);
        let angle = rng.gen_range(0.0..std::f64::consts::PI);
        let (r, c) = layout.project_to_crest(r0, c0);
        let (r, c) = (r.round(), c.round());
        if r < 0.0 || c < 0.0 || r >= cfg.rows as f64 || c >= cfg.cols as f64 {
            continue;
        }
        let (row, col) = (r as usize, c as usize);
        let clear = blobs.iter().all(|b| {
            let dr = b.row as f64 - r;
            let dc = b.col as f64 - c;
            (dr * dr + dc * dc).sqrt() >= 2.0 * (b.radius + radius)
        });
        if clear {
            blobs.push(Blob {
                row,
                col,
                radius,
                aspect,
                angle,
            });
        }
    }
    if blobs.len() < wanted {
        return Err(Error::PorePlacement {
            wanted,
            placed: blobs.len(),
            attempts,
        });
    }
    Ok(blobs)
}

/// Continuous intensity field (before noise and quantization).
pub fn render(cfg: &SynthConfig, layout: &RidgeLayout, blobs: &[Blob]) -> Plane<f64> {
    let mut img = Plane::from_fn(cfg.rows, cfg.cols, |r, c| layout.intensity(r as f64, c as f64));
    let peak = RIDGE_DARK + cfg.contrast;
    for b in blobs {
        let reach = (BLOB_CUTOFF * b.radius).ceil() as usize;
        for r in b.row.saturating_sub(reach)..(b.row + reach + 1).min(cfg.rows) {
            for c in b.col.saturating_sub(reach)..(b.col + reach + 1).min(cfg.cols) {
                let g = b.profile(r as f64, c as f64);
                if g > 0.0 {
                    let v = img.get(r, c);
                    img.set(r, c, v * (1.0 - g) + peak * g);
                }
            }
        }
    }
    img
}

/// Generate one image from its own random stream.
pub fn synth_image(cfg: &SynthConfig, rng: &mut ChaCha8Rng) -> Result<SynthImage> {
    cfg.validate()?;
    let layout = RidgeLayout::draw(cfg, rng);
    let blobs = place_blobs(cfg, &layout, rng)?;
    let field = render(cfg, &layout, &blobs);
    let noise = Normal::new(0.0, cfg.noise).map_err(|e| Error::config("noise", e.to_string()))?;
    let data = field
        .data()
        .iter()
        .map(|&v| {
            let n = if cfg.noise > 0.0 { noise.sample(rng) } else { 0.0 };
            ((v + n).clamp(0.0, 1.0) * 255.0).round() as u8
        })
        .collect();
    let mut pores: Vec<Pore> = blobs.iter().map(|b| (b.row, b.col)).collect();
    pores.sort_unstable();
    Ok(SynthImage {
        pixels: Plane::from_vec(cfg.rows, cfg.cols, data),
        pores,
        blobs,
        layout,
    })
}

/// `cfg.count` images for one domain; image `i` depends only on
/// `(seed, stream, i)`.
pub fn synth_domain(cfg: &SynthConfig, seed: u64, stream: u64) -> Result<Vec<SynthImage>> {
    cfg.validate()?;
    (0..cfg.count)
        .into_par_iter()
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream((stream << 32) | i as u64);
            synth_image(cfg, &mut rng)
        })
        .collect()
}

/// Source and target datasets from one seed; the two domains use disjoint
/// random streams.
pub fn synth_domain_pair(
    src: &SynthConfig,
    tgt: &SynthConfig,
    seed: u64,
) -> Result<(Vec<SynthImage>, Vec<SynthImage>)> {
    Ok((synth_domain(src, seed, 0)?, synth_domain(tgt, seed, 1)?))
}
