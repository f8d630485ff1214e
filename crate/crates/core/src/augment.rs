//! Training-time augmentations and the data-level defenses (Mixup, CutMix,
//! Cutout, Gaussian smoothing). Batches are NCHW tensors; labels are
//! `n x classes` rows of target probabilities.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Beta, Distribution};
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Augmentation {
    /// Bilinear resize to the configured side (a no-op at native size).
    Resize,
    /// Zero-pad by 4 pixels and crop back at a random offset.
    RandomCrop,
    RandomHorizontalFlip,
    /// Map `[0, 1]` to `[-1, 1]`.
    Normalize,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Defense {
    None,
    Mixup { alpha: f32 },
    Cutmix { alpha: f32 },
    Cutout { mask_side: usize },
    GaussianSmooth { kernel: usize, sigma: f32 },
}

impl Defense {
    /// Conventional defaults for an image side of `side` pixels.
    pub fn from_name(name: &str, side: usize) -> Option<Self> {
        Some(match name {
            "none" => Defense::None,
            "mixup" => Defense::Mixup { alpha: 1.0 },
            "cutmix" => Defense::Cutmix { alpha: 1.0 },
            "cutout" => Defense::Cutout {
                mask_side: (side / 4).max(1),
            },
            "gaussian_smooth" | "gaussian" => Defense::GaussianSmooth { kernel: 3, sigma: 0.5 },
            _ => return None,
        })
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            Defense::None => {}
            Defense::Mixup { alpha } | Defense::Cutmix { alpha } => {
                ensure!(alpha > 0.0 && alpha.is_finite(), Parameter, "alpha must be positive, got {alpha}");
            }
            Defense::Cutout { mask_side } => ensure!(mask_side >= 1, Parameter, "cutout mask side must be positive"),
            Defense::GaussianSmooth { kernel, sigma } => {
                ensure!(kernel % 2 == 1, Parameter, "gaussian kernel size must be odd, got {kernel}");
                ensure!(sigma > 0.0 && sigma.is_finite(), Parameter, "gaussian sigma must be positive");
            }
        }
        Ok(())
    }

    /// Apply the defense to a training batch.
    pub fn apply(&self, batch: &mut Tensor, labels: &mut [f32], rng: &mut impl Rng) -> Result<()> {
        match *self {
            Defense::None => Ok(()),
            Defense::Mixup { alpha } => mixup(batch, labels, alpha, rng),
            Defense::Cutmix { alpha } => cutmix(batch, labels, alpha, rng),
            Defense::Cutout { mask_side } => cutout(batch, mask_side, rng),
            Defense::GaussianSmooth { kernel, sigma } => {
                *batch = gaussian_smooth(batch, kernel, sigma)?;
                Ok(())
            }
        }
    }
}

/// `x <- lam * x + (1 - lam) * x[partner]`, labels likewise.
pub fn mixup_with(batch: &mut Tensor, labels: &mut [f32], partner: &[usize], lam: f32) {
    let orig = batch.clone();
    let orig_labels = labels.to_vec();
    let k = labels.len() / batch.batch().max(1);
    for (i, &j) in partner.iter().enumerate() {
        for (d, (&a, &b)) in batch.item_mut(i).iter_mut().zip(orig.item(i).iter().zip(orig.item(j))) {
            *d = lam * a + (1.0 - lam) * b;
        }
        for c in 0..k {
            labels[i * k + c] = lam * orig_labels[i * k + c] + (1.0 - lam) * orig_labels[j * k + c];
        }
    }
}

pub fn mixup(batch: &mut Tensor, labels: &mut [f32], alpha: f32, rng: &mut impl Rng) -> Result<()> {
    ensure!(alpha > 0.0, Parameter, "mixup alpha must be positive");
    let lam = Beta::new(alpha, alpha).unwrap().sample(rng);
    let mut partner: Vec<usize> = (0..batch.batch()).collect();
    partner.shuffle(rng);
    mixup_with(batch, labels, &partner, lam);
    Ok(())
}

/// Rectangle `[y0, y1) x [x0, x1)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Rect {
    pub y0: usize,
    pub y1: usize,
    pub x0: usize,
    pub x1: usize,
}

impl Rect {
    pub fn area(&self) -> usize {
        (self.y1 - self.y0) * (self.x1 - self.x0)
    }
}

fn centered_box(cy: usize, cx: usize, bh: usize, bw: usize, h: usize, w: usize) -> Rect {
    Rect {
        y0: cy.saturating_sub(bh / 2),
        y1: (cy + bh - bh / 2).min(h),
        x0: cx.saturating_sub(bw / 2),
        x1: (cx + bw - bw / 2).min(w),
    }
}

/// Paste `rect` of each partner into each image; labels mix with
/// `lam = 1 - area / (h * w)`. Returns the label weight used.
pub fn cutmix_with(batch: &mut Tensor, labels: &mut [f32], partner: &[usize], rect: Rect) -> f32 {
    let [n, c, h, w] = batch.shape();
    let orig = batch.clone();
    let lam = 1.0 - rect.area() as f32 / (h * w) as f32;
    let orig_labels = labels.to_vec();
    let k = labels.len() / n.max(1);
    for (i, &j) in partner.iter().enumerate() {
        let src = orig.item(j);
        let dst = batch.item_mut(i);
        for ch in 0..c {
            for y in rect.y0..rect.y1 {
                for x in rect.x0..rect.x1 {
                    let p = (ch * h + y) * w + x;
                    dst[p] = src[p];
                }
            }
        }
        for cl in 0..k {
            labels[i * k + cl] = lam * orig_labels[i * k + cl] + (1.0 - lam) * orig_labels[j * k + cl];
        }
    }
    lam
}

pub fn cutmix(batch: &mut Tensor, labels: &mut [f32], alpha: f32, rng: &mut impl Rng) -> Result<()> {
    ensure!(alpha > 0.0, Parameter, "cutmix alpha must be positive");
    let [n, _, h, w] = batch.shape();
    let lam: f32 = Beta::new(alpha, alpha).unwrap().sample(rng);
    let ratio = (1.0 - lam).sqrt();
    let (bh, bw) = ((h as f32 * ratio) as usize, (w as f32 * ratio) as usize);
    let rect = centered_box(rng.gen_range(0..h), rng.gen_range(0..w), bh, bw, h, w);
    let mut partner: Vec<usize> = (0..n).collect();
    partner.shuffle(rng);
    cutmix_with(batch, labels, &partner, rect);
    Ok(())
}

/// Zero a `mask_side` square (clipped at the border) around a random
/// centre in every image.
pub fn cutout(batch: &mut Tensor, mask_side: usize, rng: &mut impl Rng) -> Result<()> {
    let [n, c, h, w] = batch.shape();
    ensure!(
        mask_side >= 1 && mask_side <= h.min(w),
        Parameter,
        "cutout mask side {mask_side} does not fit a {h}x{w} image"
    );
    for i in 0..n {
        let rect = centered_box(rng.gen_range(0..h), rng.gen_range(0..w), mask_side, mask_side, h, w);
        let img = batch.item_mut(i);
        for ch in 0..c {
            for y in rect.y0..rect.y1 {
                img[(ch * h + y) * w + rect.x0..(ch * h + y) * w + rect.x1].fill(0.0);
            }
        }
    }
    Ok(())
}

fn reflect(i: isize, n: usize) -> usize {
    let n = n as isize;
    if n == 1 {
        return 0;
    }
    let period = 2 * (n - 1);
    let mut r = i.rem_euclid(period);
    if r >= n {
        r = period - r;
    }
    r as usize
}

pub fn gaussian_kernel(size: usize, sigma: f32) -> Vec<f32> {
    let r = (size / 2) as isize;
    let raw: Vec<f64> = (-r..=r)
        .map(|d| (-(d * d) as f64 / (2.0 * sigma as f64 * sigma as f64)).exp())
        .collect();
    let sum: f64 = raw.iter().sum();
    raw.iter().map(|v| (v / sum) as f32).collect()
}

/// Separable Gaussian blur with reflection padding, clipped to `[0, 1]`.
pub fn gaussian_smooth(batch: &Tensor, kernel: usize, sigma: f32) -> Result<Tensor> {
    ensure!(kernel % 2 == 1, Parameter, "gaussian kernel size must be odd, got {kernel}");
    ensure!(sigma > 0.0, Parameter, "gaussian sigma must be positive");
    let weights = gaussian_kernel(kernel, sigma);
    let r = (kernel / 2) as isize;
    let [n, c, h, w] = batch.shape();
    let mut tmp = Tensor::zeros(batch.shape());
    let mut out = Tensor::zeros(batch.shape());
    for i in 0..n {
        let src = batch.item(i);
        let mid = tmp.item_mut(i);
        for ch in 0..c {
            for y in 0..h {
                for x in 0..w {
                    let mut acc = 0.0;
                    for (t, &wt) in weights.iter().enumerate() {
                        let xx = reflect(x as isize + t as isize - r, w);
                        acc += wt * src[(ch * h + y) * w + xx];
                    }
                    mid[(ch * h + y) * w + x] = acc;
                }
            }
        }
        let mid = tmp.item(i).to_vec();
        let dst = out.item_mut(i);
        for ch in 0..c {
            for y in 0..h {
                for x in 0..w {
                    let mut acc = 0.0;
                    for (t, &wt) in weights.iter().enumerate() {
                        let yy = reflect(y as isize + t as isize - r, h);
                        acc += wt * mid[(ch * h + yy) * w + x];
                    }
                    dst[(ch * h + y) * w + x] = acc.clamp(0.0, 1.0);
                }
            }
        }
    }
    Ok(out)
}

/// Bilinear resize (align-corners off) of every image to `side x side`.
pub fn resize(batch: &Tensor, side: usize) -> Tensor {
    let [n, c, h, w] = batch.shape();
    if h == side && w == side {
        return batch.clone();
    }
    let mut out = Tensor::zeros([n, c, side, side]);
    let sy = h as f32 / side as f32;
    let sx = w as f32 / side as f32;
    for i in 0..n {
        let src = batch.item(i);
        let dst = out.item_mut(i);
        for ch in 0..c {
            for y in 0..side {
                let fy = ((y as f32 + 0.5) * sy - 0.5).clamp(0.0, (h - 1) as f32);
                let (y0, ty) = (fy.floor() as usize, fy - fy.floor());
                let y1 = (y0 + 1).min(h - 1);
                for x in 0..side {
                    let fx = ((x as f32 + 0.5) * sx - 0.5).clamp(0.0, (w - 1) as f32);
                    let (x0, tx) = (fx.floor() as usize, fx - fx.floor());
                    let x1 = (x0 + 1).min(w - 1);
                    let at = |yy: usize, xx: usize| src[(ch * h + yy) * w + xx];
                    let top = at(y0, x0) * (1.0 - tx) + at(y0, x1) * tx;
                    let bot = at(y1, x0) * (1.0 - tx) + at(y1, x1) * tx;
                    dst[(ch * side + y) * side + x] = top * (1.0 - ty) + bot * ty;
                }
            }
        }
    }
    out
}

const CROP_PAD: usize = 4;

pub fn random_crop(batch: &mut Tensor, rng: &mut impl Rng) {
    let [n, c, h, w] = batch.shape();
    for i in 0..n {
        let dy = rng.gen_range(0..=2 * CROP_PAD) as isize - CROP_PAD as isize;
        let dx = rng.gen_range(0..=2 * CROP_PAD) as isize - CROP_PAD as isize;
        let src = batch.item(i).to_vec();
        let dst = batch.item_mut(i);
        for ch in 0..c {
            for y in 0..h {
                let sy = y as isize + dy;
                for x in 0..w {
                    let sx = x as isize + dx;
                    dst[(ch * h + y) * w + x] = if sy < 0 || sy >= h as isize || sx < 0 || sx >= w as isize {
                        0.0
                    } else {
                        src[(ch * h + sy as usize) * w + sx as usize]
                    };
                }
            }
        }
    }
}

pub fn random_horizontal_flip(batch: &mut Tensor, rng: &mut impl Rng) {
    let [n, c, h, w] = batch.shape();
    for i in 0..n {
        if rng.gen_bool(0.5) {
            let img = batch.item_mut(i);
            for ch in 0..c {
                for y in 0..h {
                    img[(ch * h + y) * w..(ch * h + y + 1) * w].reverse();
                }
            }
        }
    }
}

pub fn normalize(batch: &mut Tensor) {
    batch.data_mut().iter_mut().for_each(|v| *v = 2.0 * *v - 1.0);
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn constant(values: &[f32], side: usize) -> Tensor {
        let per = 3 * side * side;
        let mut data = Vec::new();
        for &v in values {
            data.extend(std::iter::repeat(v).take(per));
        }
        Tensor::from_vec([values.len(), 3, side, side], data)
    }

    #[test]
    fn mixup_endpoints_and_midpoint() {
        let mut b = constant(&[0.2, 0.6], 4);
        let mut y = vec![1.0, 0.0, 0.0, 1.0];
        mixup_with(&mut b, &mut y, &[1, 0], 1.0);
        assert_eq!(b, constant(&[0.2, 0.6], 4));
        assert_eq!(y, vec![1.0, 0.0, 0.0, 1.0]);

        mixup_with(&mut b, &mut y, &[1, 0], 0.5);
        assert!(b.data().iter().all(|v| (v - 0.4).abs() < 1e-6));
        assert_eq!(y, vec![0.5, 0.5, 0.5, 0.5]);
    }

    #[test]
    fn sampled_mixup_stays_in_range() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut b = constant(&[0.0, 1.0, 0.3], 4);
        let mut y = vec![1.0, 0.0, 0.0, 1.0, 1.0, 0.0];
        mixup(&mut b, &mut y, 1.0, &mut rng).unwrap();
        assert!(b.data().iter().all(|v| (0.0..=1.0).contains(v)));
        for row in y.chunks(2) {
            assert!((row[0] + row[1] - 1.0).abs() < 1e-6);
        }
        assert!(mixup(&mut b, &mut y, 0.0, &mut rng).is_err());
    }

    #[test]
    fn cutmix_label_weight_is_area_fraction() {
        let mut b = constant(&[0.0, 1.0], 8);
        let mut y = vec![1.0, 0.0, 0.0, 1.0];
        let rect = Rect {
            y0: 0,
            y1: 4,
            x0: 0,
            x1: 4,
        };
        let lam = cutmix_with(&mut b, &mut y, &[1, 0], rect);
        assert!((lam - 0.75).abs() < 1e-6);
        assert_eq!(&y[..2], &[0.75, 0.25]);
        let ones = b.item(0).iter().filter(|&&v| v == 1.0).count();
        assert_eq!(ones, 3 * 16);
    }

    #[test]
    fn cutout_zeroes_a_square() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut b = constant(&[0.5], 8);
        cutout(&mut b, 2, &mut rng).unwrap();
        let zeros = b.data().iter().filter(|&&v| v == 0.0).count();
        assert!(zeros > 0 && zeros <= 3 * 4);
        assert!(cutout(&mut b, 9, &mut rng).is_err());
    }

    #[test]
    fn gaussian_delta_kernel_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let data: Vec<f32> = (0..2 * 3 * 6 * 6).map(|_| rng.gen()).collect();
        let b = Tensor::from_vec([2, 3, 6, 6], data);
        let out = gaussian_smooth(&b, 3, 1e-3).unwrap();
        for (a, c) in out.data().iter().zip(b.data()) {
            assert!((a - c).abs() <= 1e-6);
        }
        assert!(gaussian_smooth(&b, 4, 0.5).is_err());
    }

    #[test]
    fn gaussian_preserves_constants_and_range() {
        let b = constant(&[0.3], 5);
        let out = gaussian_smooth(&b, 5, 1.5).unwrap();
        assert!(out.data().iter().all(|v| (v - 0.3).abs() < 1e-6));
        let k = gaussian_kernel(5, 1.0);
        assert!((k.iter().sum::<f32>() - 1.0).abs() < 1e-6);
    }

    #[test]
    fn reflect_indices() {
        assert_eq!(reflect(-1, 5), 1);
        assert_eq!(reflect(5, 5), 3);
        assert_eq!(reflect(2, 5), 2);
    }

    #[test]
    fn resize_is_identity_at_native_size_and_preserves_constants() {
        let b = constant(&[0.7], 8);
        assert_eq!(resize(&b, 8), b);
        assert!(resize(&b, 5).data().iter().all(|v| (v - 0.7).abs() < 1e-6));
    }

    #[test]
    fn flip_twice_is_identity_in_distribution_of_shapes() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let data: Vec<f32> = (0..3 * 3 * 4 * 4).map(|i| i as f32).collect();
        let mut b = Tensor::from_vec([3, 3, 4, 4], data.clone());
        random_horizontal_flip(&mut b, &mut rng);
        let mut sorted = b.data().to_vec();
        sorted.sort_by(f32::total_cmp);
        assert_eq!(sorted, data);
    }
}
