//! Paired HR/LR image sets and augmented patch sampling.

use std::path::Path;

use rand::Rng;

use crate::error::{Error, Result};
use crate::image_io::{list_pngs, load_png};
use crate::ops::bicubic_downsample;
use crate::tensor::Tensor;

/// High-resolution images and their bicubic-downsampled counterparts.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub scale: usize,
    pub hr: Vec<Tensor<f32>>,
    pub lr: Vec<Tensor<f32>>,
    pub names: Vec<String>,
}

/// Crop the bottom/right edges so both sides are multiples of `r`.
pub fn crop_to_multiple(img: &Tensor<f32>, r: usize) -> Result<Tensor<f32>> {
    let s = img.shape();
    let (h, w) = (s.h - s.h % r, s.w - s.w % r);
    if h == 0 || w == 0 {
        return Err(Error::dim("dataset", format!("{s} is smaller than scale {r}")));
    }
    img.crop(0, 0, h, w)
}

impl Dataset {
    pub fn from_images(images: Vec<Tensor<f32>>, scale: usize) -> Result<Self> {
        let names = (0..images.len()).map(|i| format!("image{i:03}")).collect();
        Self::from_named(images, names, scale)
    }

    fn from_named(images: Vec<Tensor<f32>>, names: Vec<String>, scale: usize) -> Result<Self> {
        if images.is_empty() {
            return Err(Error::Config("dataset is empty".into()));
        }
        let hr = images.iter().map(|i| crop_to_multiple(i, scale)).collect::<Result<Vec<_>>>()?;
        let lr = hr.iter().map(|i| bicubic_downsample(i, scale)).collect::<Result<Vec<_>>>()?;
        Ok(Dataset { scale, hr, lr, names })
    }

    /// Every PNG of `dir`, in file-name order.
    pub fn from_dir(dir: &Path, scale: usize) -> Result<Self> {
        let paths = list_pngs(dir)?;
        if paths.is_empty() {
            return Err(Error::Config(format!("no PNG images in {}", dir.display())));
        }
        let images = paths.iter().map(|p| load_png(p)).collect::<Result<Vec<_>>>()?;
        let names = paths.iter().map(|p| p.file_name().unwrap().to_string_lossy().into_owned()).collect();
        Self::from_named(images, names, scale)
    }

    pub fn len(&self) -> usize {
        self.hr.len()
    }

    pub fn is_empty(&self) -> bool {
        self.hr.is_empty()
    }
}

/// Horizontal flip (optional) followed by `k` counter-clockwise quarter turns.
pub fn augment(t: &Tensor<f32>, flip: bool, k: usize) -> Tensor<f32> {
    let t = if flip { t.flip_horizontal() } else { t.clone() };
    t.rot90(k)
}

/// Aligned random `patch × patch` LR crops and their HR counterparts, each
/// pair independently flipped (p = 0.5) and rotated by a uniform multiple
/// of 90°.
pub fn sample_batch<R: Rng>(ds: &Dataset, batch: usize, patch: usize, rng: &mut R) -> Result<(Tensor<f32>, Tensor<f32>)> {
    if ds.is_empty() || batch == 0 || patch == 0 {
        return Err(Error::Config("sampling needs a non-empty dataset, batch and patch".into()));
    }
    if let Some((i, lr)) = ds.lr.iter().enumerate().find(|(_, l)| l.shape().h < patch || l.shape().w < patch) {
        return Err(Error::Config(format!(
            "{}: LR size {}x{} is smaller than patch {patch}",
            ds.names[i],
            lr.shape().h,
            lr.shape().w
        )));
    }
    let r = ds.scale;
    let mut lrs = Vec::with_capacity(batch);
    let mut hrs = Vec::with_capacity(batch);
    for _ in 0..batch {
        let i = rng.gen_range(0..ds.len());
        let s = ds.lr[i].shape();
        let y = rng.gen_range(0..=s.h - patch);
        let x = rng.gen_range(0..=s.w - patch);
        let flip = rng.gen_bool(0.5);
        let k = rng.gen_range(0..4);
        let lr = ds.lr[i].crop(y, x, patch, patch)?;
        let hr = ds.hr[i].crop(y * r, x * r, patch * r, patch * r)?;
        lrs.push(augment(&lr, flip, k));
        hrs.push(augment(&hr, flip, k));
    }
    Ok((Tensor::stack(&lrs)?, Tensor::stack(&hrs)?))
}
