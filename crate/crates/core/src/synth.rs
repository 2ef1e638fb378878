//! Synthetic desk-scale dataset generator.
//!
//! Each sample is 1-3 smooth blobs — closed curves with harmonically
//! jittered radius — rendered as polyp-like bumps over a textured tissue
//! background. The binary mask is rasterized from the same geometry that
//! shades the image, so ground truth is exact by construction. Identical
//! configs produce byte-identical PNG files.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::save_image_rgb;
use crate::data::save_mask;
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub count: usize,
    /// Canvas side in pixels.
    pub canvas: usize,
    pub blob_count_range: [usize; 2],
    /// Base blob radius as a fraction of the canvas.
    pub blob_radius_range: [f64; 2],
    /// Relative amplitude of the boundary harmonics.
    pub boundary_jitter: f64,
    /// Per-pixel noise amplitude.
    pub texture_noise: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            count: 16,
            canvas: 96,
            blob_count_range: [1, 3],
            blob_radius_range: [0.10, 0.22],
            boundary_jitter: 0.15,
            texture_noise: 0.04,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.count == 0 {
            return Err(Error::Dataset("size-0 dataset requested".into()));
        }
        if self.canvas < 32 {
            return Err(Error::Config(format!(
                "canvas must be at least 32 px, got {}",
                self.canvas
            )));
        }
        if self.blob_count_range[0] == 0 || self.blob_count_range[0] > self.blob_count_range[1] {
            return Err(Error::Config(format!(
                "bad blob count range {:?}",
                self.blob_count_range
            )));
        }
        let [lo, hi] = self.blob_radius_range;
        if !(0.0 < lo && lo <= hi && hi < 0.5) {
            return Err(Error::Config(format!(
                "blob radius range must lie in (0, 0.5), got {:?}",
                self.blob_radius_range
            )));
        }
        if self.boundary_jitter < 0.0 || self.texture_noise < 0.0 {
            return Err(Error::Config("jitter and noise must be >= 0".into()));
        }
        Ok(())
    }
}

struct Blob {
    cx: f64,
    cy: f64,
    r0: f64,
    /// (amplitude, phase) for harmonics k = 2, 3, 4.
    harmonics: [(f64, f64); 3],
}

impl Blob {
    fn radius_at(&self, theta: f64, jitter: f64) -> f64 {
        let mut factor = 1.0;
        for (k, &(a, phi)) in self.harmonics.iter().enumerate() {
            let freq = (k + 2) as f64;
            factor += jitter * a / freq * (freq * theta + phi).cos();
        }
        // keep the curve a valid star-shaped boundary
        self.r0 * factor.clamp(0.55, 1.45)
    }

    fn contains(&self, x: f64, y: f64, jitter: f64) -> bool {
        let dx = x - self.cx;
        let dy = y - self.cy;
        let dist = (dx * dx + dy * dy).sqrt();
        dist <= self.radius_at(dy.atan2(dx), jitter)
    }
}

/// Low-frequency background field: a few random sinusoids.
struct Field {
    waves: Vec<(f64, f64, f64, f64)>, // (fx, fy, phase, amplitude)
}

impl Field {
    fn sample(rng: &mut Rng, canvas: f64) -> Self {
        let waves = (0..3)
            .map(|_| {
                (
                    rng.uniform_in(0.5, 2.5) * std::f64::consts::TAU / canvas,
                    rng.uniform_in(0.5, 2.5) * std::f64::consts::TAU / canvas,
                    rng.uniform_in(0.0, std::f64::consts::TAU),
                    rng.uniform_in(0.02, 0.05),
                )
            })
            .collect();
        Field { waves }
    }

    fn at(&self, x: f64, y: f64) -> f64 {
        self.waves
            .iter()
            .map(|&(fx, fy, phase, amp)| amp * (fx * x + fy * y + phase).sin())
            .sum()
    }
}

/// Generate `cfg.count` image/mask pairs under `out/images` and `out/masks`
/// and store the config as `synth_config.json` beside them.
pub fn synth_generate(cfg: &SynthConfig, out: &Path) -> Result<()> {
    cfg.validate()?;
    let images_dir = out.join("images");
    let masks_dir = out.join("masks");
    std::fs::create_dir_all(&images_dir).map_err(|e| Error::io(&images_dir, e))?;
    std::fs::create_dir_all(&masks_dir).map_err(|e| Error::io(&masks_dir, e))?;

    let mut rng = Rng::seeded(cfg.seed);
    let s = cfg.canvas;
    let sf = s as f64;
    for idx in 0..cfg.count {
        let blob_count = cfg.blob_count_range[0]
            + rng.below(cfg.blob_count_range[1] - cfg.blob_count_range[0] + 1);
        let mut blobs = Vec::with_capacity(blob_count);
        for _ in 0..blob_count {
            let r0 = rng.uniform_in(cfg.blob_radius_range[0], cfg.blob_radius_range[1]) * sf;
            let margin = 1.45 * r0 + 2.0;
            let lo = margin.min(sf / 2.0 - 1.0);
            let hi = (sf - margin).max(sf / 2.0 + 1.0);
            blobs.push(Blob {
                cx: rng.uniform_in(lo, hi),
                cy: rng.uniform_in(lo, hi),
                r0,
                harmonics: [
                    (rng.uniform_in(-1.0, 1.0), rng.uniform_in(0.0, std::f64::consts::TAU)),
                    (rng.uniform_in(-1.0, 1.0), rng.uniform_in(0.0, std::f64::consts::TAU)),
                    (rng.uniform_in(-1.0, 1.0), rng.uniform_in(0.0, std::f64::consts::TAU)),
                ],
            });
        }
        let field = Field::sample(&mut rng, sf);
        // Base tissue tone with a mild per-sample tint.
        let tint = rng.uniform_in(-0.04, 0.04);
        let base = [0.70 + tint, 0.46 + tint * 0.6, 0.40 + tint * 0.5];

        let mut mask = Tensor::<f32>::zeros(&[1, s, s]);
        let mut image = Tensor::<f32>::zeros(&[3, s, s]);
        for y in 0..s {
            for x in 0..s {
                let (xf, yf) = (x as f64 + 0.5, y as f64 + 0.5);
                let mut inside = false;
                // Shading profile of the nearest covering blob.
                let mut profile: f64 = 0.0;
                for blob in &blobs {
                    if blob.contains(xf, yf, cfg.boundary_jitter) {
                        inside = true;
                        let dx = xf - blob.cx;
                        let dy = yf - blob.cy;
                        let dist = (dx * dx + dy * dy).sqrt();
                        let r = blob.radius_at(dy.atan2(dx), cfg.boundary_jitter);
                        profile = profile.max(1.0 - (dist / r) * (dist / r) * 0.55);
                    }
                }
                if inside {
                    mask.data_mut()[y * s + x] = 1.0;
                }
                let texture = field.at(xf, yf);
                let noise = rng.normal() * cfg.texture_noise;
                let bump = if inside { 0.20 * profile } else { 0.0 };
                let rgb = [
                    base[0] + texture + noise + bump,
                    base[1] + texture + noise + bump * 0.55,
                    base[2] + texture + noise + bump * 0.40,
                ];
                for (c, v) in rgb.iter().enumerate() {
                    image.data_mut()[c * s * s + y * s + x] = v.clamp(0.0, 1.0) as f32;
                }
            }
        }
        let stem = format!("sample_{idx:04}");
        save_image_rgb(&image, &images_dir.join(format!("{stem}.png")))?;
        save_mask(&mask, &masks_dir.join(format!("{stem}.png")))?;
    }
    crate::checkpoint::write_json(cfg, &out.join("synth_config.json"))?;
    Ok(())
}
