//! Dataset ingestion and multi-scale sizing.
//!
//! On-disk layout: `<root>/<split>/images/*.png` and
//! `<root>/<split>/masks/*.png` with name-matched stems (an empty split name
//! reads `<root>/images` directly). Images load as RGB in `[0, 1]` and are
//! resized bilinearly; masks load as grayscale, threshold at half of full
//! range, resize nearest-neighbor and re-binarize, so binarity survives
//! every path.

use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::tape::bilinear_taps;
use crate::tensor::{Elem, Tensor};

pub struct Sample<E: Elem> {
    pub id: String,
    /// `(3, S, S)` in `[0, 1]`.
    pub image: Tensor<E>,
    /// `(1, S, S)` binary.
    pub mask: Tensor<E>,
}

pub struct Dataset<E: Elem> {
    pub name: String,
    pub samples: Vec<Sample<E>>,
}

/// Image batch ready for the network.
pub struct SampleBatch<E: Elem> {
    /// `(N, 3, S, S)` in `[0, 1]`.
    pub images: Tensor<E>,
    /// `(N, 1, S, S)` binary.
    pub masks: Tensor<E>,
    pub ids: Vec<String>,
}

impl<E: Elem> Dataset<E> {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Stack the samples at `indices` into one batch.
    pub fn gather(&self, indices: &[usize]) -> SampleBatch<E> {
        assert!(!indices.is_empty(), "empty batch");
        let s = self.samples[indices[0]].image.shape()[1];
        let n = indices.len();
        let mut images = Tensor::zeros(&[n, 3, s, s]);
        let mut masks = Tensor::zeros(&[n, 1, s, s]);
        let mut ids = Vec::with_capacity(n);
        for (row, &idx) in indices.iter().enumerate() {
            let sample = &self.samples[idx];
            images.data_mut()[row * 3 * s * s..(row + 1) * 3 * s * s]
                .copy_from_slice(sample.image.data());
            masks.data_mut()[row * s * s..(row + 1) * s * s].copy_from_slice(sample.mask.data());
            ids.push(sample.id.clone());
        }
        SampleBatch { images, masks, ids }
    }
}

// ---------------------------------------------------------------------------
// Resizing
// ---------------------------------------------------------------------------

/// Bilinear resize of a `(C, H, W)` tensor (half-pixel centers, clamped).
pub fn resize_bilinear<E: Elem>(src: &Tensor<E>, oh: usize, ow: usize) -> Tensor<E> {
    let shape = src.shape();
    assert_eq!(shape.len(), 3, "resize_bilinear expects (C, H, W)");
    let (c, h, w) = (shape[0], shape[1], shape[2]);
    if (h, w) == (oh, ow) {
        return src.clone();
    }
    let taps_y = bilinear_taps::<E>(h, oh);
    let taps_x = bilinear_taps::<E>(w, ow);
    let mut out = Tensor::zeros(&[c, oh, ow]);
    for ch in 0..c {
        let plane = &src.data()[ch * h * w..(ch + 1) * h * w];
        let dst = &mut out.data_mut()[ch * oh * ow..(ch + 1) * oh * ow];
        for (oy, &(y0, y1, wy)) in taps_y.iter().enumerate() {
            for (ox, &(x0, x1, wx)) in taps_x.iter().enumerate() {
                dst[oy * ow + ox] = plane[y0 * w + x0] * (E::ONE - wy) * (E::ONE - wx)
                    + plane[y0 * w + x1] * (E::ONE - wy) * wx
                    + plane[y1 * w + x0] * wy * (E::ONE - wx)
                    + plane[y1 * w + x1] * wy * wx;
            }
        }
    }
    out
}

/// Nearest-neighbor resize of a `(C, H, W)` tensor.
pub fn resize_nearest<E: Elem>(src: &Tensor<E>, oh: usize, ow: usize) -> Tensor<E> {
    let shape = src.shape();
    assert_eq!(shape.len(), 3, "resize_nearest expects (C, H, W)");
    let (c, h, w) = (shape[0], shape[1], shape[2]);
    if (h, w) == (oh, ow) {
        return src.clone();
    }
    let mut out = Tensor::zeros(&[c, oh, ow]);
    for ch in 0..c {
        let plane = &src.data()[ch * h * w..(ch + 1) * h * w];
        let dst = &mut out.data_mut()[ch * oh * ow..(ch + 1) * oh * ow];
        for oy in 0..oh {
            let sy = (((oy as f64 + 0.5) * h as f64 / oh as f64) as usize).min(h - 1);
            for ox in 0..ow {
                let sx = (((ox as f64 + 0.5) * w as f64 / ow as f64) as usize).min(w - 1);
                dst[oy * ow + ox] = plane[sy * w + sx];
            }
        }
    }
    out
}

/// Re-binarize a mask tensor at 0.5.
pub fn binarize<E: Elem>(mask: &Tensor<E>) -> Tensor<E> {
    mask.map(|v| if v.to_f64() >= 0.5 { E::ONE } else { E::ZERO })
}

/// Resize a whole `(N, C, H, W)` batch; images bilinear, masks nearest +
/// re-binarized. Used by multi-scale training.
pub fn resize_batch<E: Elem>(batch: &SampleBatch<E>, side: usize) -> SampleBatch<E> {
    let (n, _, h, _) = batch.images.dims4();
    if h == side {
        return SampleBatch {
            images: batch.images.clone(),
            masks: batch.masks.clone(),
            ids: batch.ids.clone(),
        };
    }
    let mut images = Tensor::zeros(&[n, 3, side, side]);
    let mut masks = Tensor::zeros(&[n, 1, side, side]);
    for i in 0..n {
        let img = Tensor::new(
            &[3, h, h],
            batch.images.data()[i * 3 * h * h..(i + 1) * 3 * h * h].to_vec(),
        );
        let resized = resize_bilinear(&img, side, side);
        images.data_mut()[i * 3 * side * side..(i + 1) * 3 * side * side]
            .copy_from_slice(resized.data());
        let mask = Tensor::new(&[1, h, h], batch.masks.data()[i * h * h..(i + 1) * h * h].to_vec());
        let resized = binarize(&resize_nearest(&mask, side, side));
        masks.data_mut()[i * side * side..(i + 1) * side * side].copy_from_slice(resized.data());
    }
    SampleBatch {
        images,
        masks,
        ids: batch.ids.clone(),
    }
}

// ---------------------------------------------------------------------------
// PNG I/O
// ---------------------------------------------------------------------------

/// Decode an RGB image into `(3, H, W)` in `[0, 1]`.
pub fn load_image_rgb<E: Elem>(path: &Path) -> Result<Tensor<E>> {
    let img = image::open(path).map_err(|e| Error::Image {
        path: path.into(),
        message: e.to_string(),
    })?;
    let rgb = img.to_rgb8();
    let (w, h) = (rgb.width() as usize, rgb.height() as usize);
    let mut out = Tensor::zeros(&[3, h, w]);
    for (x, y, pixel) in rgb.enumerate_pixels() {
        for c in 0..3 {
            out.data_mut()[c * h * w + y as usize * w + x as usize] =
                E::from_f64(pixel.0[c] as f64 / 255.0);
        }
    }
    Ok(out)
}

/// Decode a grayscale mask into a binary `(1, H, W)` tensor, thresholding at
/// half of full range.
pub fn load_mask<E: Elem>(path: &Path) -> Result<Tensor<E>> {
    let img = image::open(path).map_err(|e| Error::Image {
        path: path.into(),
        message: e.to_string(),
    })?;
    let gray = img.to_luma16();
    let (w, h) = (gray.width() as usize, gray.height() as usize);
    let mut out = Tensor::zeros(&[1, h, w]);
    for (x, y, pixel) in gray.enumerate_pixels() {
        out.data_mut()[y as usize * w + x as usize] = if pixel.0[0] as u32 >= 32768 {
            E::ONE
        } else {
            E::ZERO
        };
    }
    Ok(out)
}

/// Decode a probability map: 16-bit grayscale scaled to `[0, 1]`.
pub fn load_probability_map<E: Elem>(path: &Path) -> Result<Tensor<E>> {
    let img = image::open(path).map_err(|e| Error::Image {
        path: path.into(),
        message: e.to_string(),
    })?;
    let gray = img.to_luma16();
    let (w, h) = (gray.width() as usize, gray.height() as usize);
    let mut out = Tensor::zeros(&[1, h, w]);
    for (x, y, pixel) in gray.enumerate_pixels() {
        out.data_mut()[y as usize * w + x as usize] = E::from_f64(pixel.0[0] as f64 / 65535.0);
    }
    Ok(out)
}

/// Write a `(3, H, W)` `[0, 1]` tensor as an 8-bit RGB PNG.
pub fn save_image_rgb<E: Elem>(t: &Tensor<E>, path: &Path) -> Result<()> {
    let shape = t.shape();
    let (h, w) = (shape[1], shape[2]);
    let mut img = image::RgbImage::new(w as u32, h as u32);
    for y in 0..h {
        for x in 0..w {
            let px = |c: usize| {
                (t.data()[c * h * w + y * w + x].to_f64().clamp(0.0, 1.0) * 255.0).round() as u8
            };
            img.put_pixel(x as u32, y as u32, image::Rgb([px(0), px(1), px(2)]));
        }
    }
    img.save(path).map_err(|e| Error::Image {
        path: path.into(),
        message: e.to_string(),
    })
}

/// Write a binary `(1, H, W)` mask as an 8-bit grayscale PNG with {0, 255}.
pub fn save_mask<E: Elem>(t: &Tensor<E>, path: &Path) -> Result<()> {
    let shape = t.shape();
    let (h, w) = (shape[shape.len() - 2], shape[shape.len() - 1]);
    let mut img = image::GrayImage::new(w as u32, h as u32);
    for y in 0..h {
        for x in 0..w {
            let v = if t.data()[y * w + x].to_f64() >= 0.5 { 255 } else { 0 };
            img.put_pixel(x as u32, y as u32, image::Luma([v]));
        }
    }
    img.save(path).map_err(|e| Error::Image {
        path: path.into(),
        message: e.to_string(),
    })
}

/// Write a `(1, H, W)` probability map as a 16-bit grayscale PNG.
pub fn save_probability_map<E: Elem>(t: &Tensor<E>, path: &Path) -> Result<()> {
    let shape = t.shape();
    let (h, w) = (shape[shape.len() - 2], shape[shape.len() - 1]);
    let mut img = image::ImageBuffer::<image::Luma<u16>, Vec<u16>>::new(w as u32, h as u32);
    for y in 0..h {
        for x in 0..w {
            let v = (t.data()[y * w + x].to_f64().clamp(0.0, 1.0) * 65535.0).round() as u16;
            img.put_pixel(x as u32, y as u32, image::Luma([v]));
        }
    }
    img.save(path).map_err(|e| Error::Image {
        path: path.into(),
        message: e.to_string(),
    })
}

// ---------------------------------------------------------------------------
// Directory loading
// ---------------------------------------------------------------------------

pub fn split_dir(root: &Path, split: &str) -> PathBuf {
    if split.is_empty() {
        root.to_path_buf()
    } else {
        root.join(split)
    }
}

fn png_stems(dir: &Path) -> Result<Vec<String>> {
    let mut stems = Vec::new();
    let entries = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    for entry in entries {
        let entry = entry.map_err(|e| Error::io(dir, e))?;
        let path = entry.path();
        if path.extension().and_then(|e| e.to_str()) == Some("png") {
            if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
                stems.push(stem.to_string());
            }
        }
    }
    stems.sort();
    Ok(stems)
}

/// Load a split into memory at `target_size` (square).
pub fn load_dataset<E: Elem>(root: &Path, split: &str, target_size: usize) -> Result<Dataset<E>> {
    let base = split_dir(root, split);
    let images_dir = base.join("images");
    let masks_dir = base.join("masks");
    let image_stems = png_stems(&images_dir)?;
    let mask_stems = png_stems(&masks_dir)?;
    for stem in &image_stems {
        if !mask_stems.contains(stem) {
            return Err(Error::Dataset(format!(
                "image {stem}.png has no mask counterpart under {}",
                masks_dir.display()
            )));
        }
    }
    for stem in &mask_stems {
        if !image_stems.contains(stem) {
            return Err(Error::Dataset(format!(
                "mask {stem}.png has no image counterpart under {}",
                images_dir.display()
            )));
        }
    }
    if image_stems.is_empty() {
        return Err(Error::Dataset(format!(
            "size-0 dataset under {}",
            base.display()
        )));
    }
    let mut samples = Vec::with_capacity(image_stems.len());
    for stem in image_stems {
        let image = load_image_rgb::<E>(&images_dir.join(format!("{stem}.png")))?;
        let mask = load_mask::<E>(&masks_dir.join(format!("{stem}.png")))?;
        let image = resize_bilinear(&image, target_size, target_size);
        let mask = binarize(&resize_nearest(&mask, target_size, target_size));
        samples.push(Sample {
            id: stem,
            image,
            mask,
        });
    }
    let name = if split.is_empty() {
        root.display().to_string()
    } else {
        format!("{}/{split}", root.display())
    };
    Ok(Dataset { name, samples })
}

/// Deterministic seeded split, e.g. for carving a validation set out of a
/// synthetic training set when no explicit split directory exists.
pub fn split_dataset<E: Elem>(
    mut dataset: Dataset<E>,
    val_fraction: f64,
    seed: u64,
) -> Result<(Dataset<E>, Dataset<E>)> {
    if !(0.0 < val_fraction && val_fraction < 1.0) {
        return Err(Error::Config(format!(
            "val fraction must lie in (0, 1), got {val_fraction}"
        )));
    }
    if dataset.len() < 2 {
        return Err(Error::Dataset(
            "need at least two samples to split train/val".into(),
        ));
    }
    let n_val = ((dataset.len() as f64 * val_fraction).round() as usize)
        .clamp(1, dataset.len() - 1);
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    let mut rng = crate::rng::Rng::stream(seed, 3);
    rng.shuffle(&mut order);
    let val_indices: std::collections::BTreeSet<usize> =
        order[..n_val].iter().copied().collect();
    let name = dataset.name.clone();
    let mut train_samples = Vec::with_capacity(dataset.len() - n_val);
    let mut val_samples = Vec::with_capacity(n_val);
    for (i, sample) in dataset.samples.drain(..).enumerate() {
        if val_indices.contains(&i) {
            val_samples.push(sample);
        } else {
            train_samples.push(sample);
        }
    }
    Ok((
        Dataset {
            name: format!("{name} (train split)"),
            samples: train_samples,
        },
        Dataset {
            name: format!("{name} (val split)"),
            samples: val_samples,
        },
    ))
}

// ---------------------------------------------------------------------------
// Multi-scale sizing
// ---------------------------------------------------------------------------

/// Scale `base` by `ratio`, then snap to the nearest multiple of 32 (the
/// five stride-2 stages require it). Halfway cases round up.
pub fn multiscale_size(base: usize, ratio: f64) -> Result<usize> {
    if !base.is_multiple_of(32) {
        return Err(Error::Contract(format!(
            "base size must be a multiple of 32, got {base}"
        )));
    }
    let raw = (base as f64 * ratio).round() as i64;
    let snapped = ((raw + 16) / 32) * 32;
    if snapped < 32 {
        return Err(Error::Contract(format!(
            "scaled size {raw} snaps below the 32 px minimum"
        )));
    }
    Ok(snapped as usize)
}

pub const MULTI_SCALE_RATIOS: [f64; 3] = [0.75, 1.0, 1.25];
