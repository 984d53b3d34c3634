//! Label-preserving augmentations: crop, affine (rotation/shear/zoom/shift),
//! flips, brightness, contrast, pixel jitter.
//!
//! Each augmentation fires with probability 0.5 and draws its parameter from
//! a documented conservative range. Application order is fixed: crop, affine,
//! flips, brightness, contrast, jitter. Geometric resampling is bilinear with
//! edge clamping; every photometric step clamps back to `[0,1]`. The
//! identity parameter draw reproduces the input exactly.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::image::resize_bilinear;
use crate::data::Sample;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Parameter ranges, all applied with probability [`AugmentPolicy::apply_prob`].
#[derive(Debug, Clone, PartialEq)]
pub struct AugmentPolicy {
    pub rotation_deg: f64,
    pub shift_frac: f64,
    pub shear_deg: f64,
    pub zoom: (f64, f64),
    pub brightness: f64,
    pub contrast: f64,
    /// Smallest crop, as a fraction of each extent; crops resize back.
    pub crop_min_frac: f64,
    /// Peak per-pixel jitter amplitude.
    pub jitter: f64,
    pub apply_prob: f64,
}

impl Default for AugmentPolicy {
    fn default() -> Self {
        AugmentPolicy {
            rotation_deg: 15.0,
            shift_frac: 0.10,
            shear_deg: 10.0,
            zoom: (0.9, 1.1),
            brightness: 0.2,
            contrast: 0.2,
            crop_min_frac: 0.9,
            jitter: 2.0 / 255.0,
            apply_prob: 0.5,
        }
    }
}

/// A concrete parameter draw. Applying the same params twice gives the same
/// output.
#[derive(Debug, Clone, PartialEq)]
pub struct AugmentParams {
    pub crop_frac: f64,
    /// Crop window offset within the slack, as fractions in `[0,1]`.
    pub crop_offset: (f64, f64),
    pub rotation_deg: f64,
    pub shear_deg: f64,
    pub zoom: f64,
    /// Shift as a fraction of each extent.
    pub shift_frac: (f64, f64),
    pub horizontal_flip: bool,
    pub vertical_flip: bool,
    pub brightness_delta: f64,
    pub contrast_delta: f64,
    /// Amplitude and seed of per-pixel jitter; `None` disables it.
    pub jitter: Option<(f64, u64)>,
}

impl AugmentParams {
    /// The null transform: reproduces the input exactly.
    pub fn identity() -> Self {
        AugmentParams {
            crop_frac: 1.0,
            crop_offset: (0.0, 0.0),
            rotation_deg: 0.0,
            shear_deg: 0.0,
            zoom: 1.0,
            shift_frac: (0.0, 0.0),
            horizontal_flip: false,
            vertical_flip: false,
            brightness_delta: 0.0,
            contrast_delta: 0.0,
            jitter: None,
        }
    }

    /// Draws a parameter set from the policy. Deterministic per seed.
    pub fn draw(policy: &AugmentPolicy, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = AugmentParams::identity();
        let gate = |rng: &mut ChaCha8Rng| rng.random::<f64>() < policy.apply_prob;
        if gate(&mut rng) {
            params.crop_frac = rng.random_range(policy.crop_min_frac..=1.0);
            params.crop_offset = (rng.random::<f64>(), rng.random::<f64>());
        }
        if gate(&mut rng) {
            params.rotation_deg = rng.random_range(-policy.rotation_deg..=policy.rotation_deg);
        }
        if gate(&mut rng) {
            params.shear_deg = rng.random_range(-policy.shear_deg..=policy.shear_deg);
        }
        if gate(&mut rng) {
            params.zoom = rng.random_range(policy.zoom.0..=policy.zoom.1);
        }
        if gate(&mut rng) {
            params.shift_frac = (
                rng.random_range(-policy.shift_frac..=policy.shift_frac),
                rng.random_range(-policy.shift_frac..=policy.shift_frac),
            );
        }
        params.horizontal_flip = gate(&mut rng);
        params.vertical_flip = gate(&mut rng);
        if gate(&mut rng) {
            params.brightness_delta = rng.random_range(-policy.brightness..=policy.brightness);
        }
        if gate(&mut rng) {
            params.contrast_delta = rng.random_range(-policy.contrast..=policy.contrast);
        }
        if gate(&mut rng) {
            params.jitter = Some((policy.jitter, rng.random::<u64>()));
        }
        params
    }
}

fn shape3(t: &Tensor) -> Result<(usize, usize, usize)> {
    match t.shape() {
        &[c, h, w] => Ok((c, h, w)),
        other => Err(Error::dimension(format!(
            "augment expects [C,H,W], got {other:?}"
        ))),
    }
}

fn sample_bilinear(plane: &[f64], h: usize, w: usize, fy: f64, fx: f64) -> f64 {
    let y0 = fy.floor();
    let x0 = fx.floor();
    let (wy, wx) = (fy - y0, fx - x0);
    let clamp = |v: isize, hi: usize| v.clamp(0, hi as isize - 1) as usize;
    let (y0c, y1c) = (clamp(y0 as isize, h), clamp(y0 as isize + 1, h));
    let (x0c, x1c) = (clamp(x0 as isize, w), clamp(x0 as isize + 1, w));
    let top = plane[y0c * w + x0c] * (1.0 - wx) + plane[y0c * w + x1c] * wx;
    let bottom = plane[y1c * w + x0c] * (1.0 - wx) + plane[y1c * w + x1c] * wx;
    top * (1.0 - wy) + bottom * wy
}

fn crop_and_resize(pixels: &Tensor, frac: f64, offset: (f64, f64)) -> Result<Tensor> {
    let (c, h, w) = shape3(pixels)?;
    let ch = ((frac * h as f64).round() as usize).clamp(1, h);
    let cw = ((frac * w as f64).round() as usize).clamp(1, w);
    if (ch, cw) == (h, w) {
        return Ok(pixels.clone());
    }
    let y0 = (offset.1 * (h - ch) as f64).round() as usize;
    let x0 = (offset.0 * (w - cw) as f64).round() as usize;
    let mut cropped = Tensor::zeros(vec![c, ch, cw]);
    let src = pixels.data();
    let dst = cropped.data_mut();
    for chn in 0..c {
        for y in 0..ch {
            let s = chn * h * w + (y0 + y) * w + x0;
            let d = chn * ch * cw + y * cw;
            dst[d..d + cw].copy_from_slice(&src[s..s + cw]);
        }
    }
    resize_bilinear(&cropped, h, w)
}

fn affine(pixels: &Tensor, params: &AugmentParams) -> Result<Tensor> {
    let (c, h, w) = shape3(pixels)?;
    let identity = params.rotation_deg == 0.0
        && params.shear_deg == 0.0
        && params.zoom == 1.0
        && params.shift_frac == (0.0, 0.0);
    if identity {
        return Ok(pixels.clone());
    }
    let theta = params.rotation_deg.to_radians();
    let shear = params.shear_deg.to_radians().tan();
    let z = params.zoom;
    // Forward map M = R(theta) * Shear * Scale; sampling inverts it.
    let m = [
        z * theta.cos(),
        z * (theta.cos() * shear - theta.sin()),
        z * theta.sin(),
        z * (theta.sin() * shear + theta.cos()),
    ];
    let det = m[0] * m[3] - m[1] * m[2];
    let inv = [m[3] / det, -m[1] / det, -m[2] / det, m[0] / det];
    let (cx, cy) = ((w as f64 - 1.0) / 2.0, (h as f64 - 1.0) / 2.0);
    let (dx, dy) = (params.shift_frac.0 * w as f64, params.shift_frac.1 * h as f64);

    let mut out = Tensor::zeros(vec![c, h, w]);
    let src = pixels.data();
    let dst = out.data_mut();
    for chn in 0..c {
        let plane = &src[chn * h * w..(chn + 1) * h * w];
        for oy in 0..h {
            for ox in 0..w {
                let vx = ox as f64 - cx - dx;
                let vy = oy as f64 - cy - dy;
                let sx = inv[0] * vx + inv[1] * vy + cx;
                let sy = inv[2] * vx + inv[3] * vy + cy;
                dst[chn * h * w + oy * w + ox] = sample_bilinear(plane, h, w, sy, sx);
            }
        }
    }
    Ok(out)
}

fn flip(pixels: &Tensor, horizontal: bool, vertical: bool) -> Result<Tensor> {
    if !horizontal && !vertical {
        return Ok(pixels.clone());
    }
    let (c, h, w) = shape3(pixels)?;
    let mut out = Tensor::zeros(vec![c, h, w]);
    let src = pixels.data();
    let dst = out.data_mut();
    for chn in 0..c {
        for y in 0..h {
            let sy = if vertical { h - 1 - y } else { y };
            for x in 0..w {
                let sx = if horizontal { w - 1 - x } else { x };
                dst[chn * h * w + y * w + x] = src[chn * h * w + sy * w + sx];
            }
        }
    }
    Ok(out)
}

/// Applies a concrete parameter set. The label is untouched and the output
/// stays within `[0,1]` at the input's shape.
pub fn apply_params(sample: &Sample, params: &AugmentParams) -> Result<Sample> {
    let mut pixels = crop_and_resize(&sample.pixels, params.crop_frac, params.crop_offset)?;
    pixels = affine(&pixels, params)?;
    pixels = flip(&pixels, params.horizontal_flip, params.vertical_flip)?;

    if params.brightness_delta != 0.0 {
        for v in pixels.data_mut() {
            *v = (*v + params.brightness_delta).clamp(0.0, 1.0);
        }
    }
    if params.contrast_delta != 0.0 {
        let gain = 1.0 + params.contrast_delta;
        for v in pixels.data_mut() {
            *v = (0.5 + (*v - 0.5) * gain).clamp(0.0, 1.0);
        }
    }
    if let Some((amplitude, seed)) = params.jitter {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for v in pixels.data_mut() {
            *v = (*v + rng.random_range(-amplitude..=amplitude)).clamp(0.0, 1.0);
        }
    }
    Ok(Sample { pixels, label: sample.label })
}

/// Draws parameters from the policy under `seed` and applies them.
pub fn augment(sample: &Sample, policy: &AugmentPolicy, seed: u64) -> Result<Sample> {
    apply_params(sample, &AugmentParams::draw(policy, seed))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Label;

    fn sample(h: usize, w: usize) -> Sample {
        let data: Vec<f64> = (0..3 * h * w).map(|i| (i % 11) as f64 / 10.0).collect();
        Sample { pixels: Tensor::new(vec![3, h, w], data).unwrap(), label: Label::Covid }
    }

    #[test]
    fn horizontal_flip_reverses_rows_and_involutes() {
        let s = Sample {
            pixels: Tensor::new(vec![1, 1, 3], vec![1.0, 2.0, 3.0]).unwrap(),
            label: Label::Normal,
        };
        let mut p = AugmentParams::identity();
        p.horizontal_flip = true;
        let flipped = apply_params(&s, &p).unwrap();
        assert_eq!(flipped.pixels.data(), &[3.0, 2.0, 1.0]);
        let back = apply_params(&flipped, &p).unwrap();
        assert_eq!(back.pixels.data(), s.pixels.data());
    }

    #[test]
    fn identity_params_reproduce_input_exactly() {
        let s = sample(16, 16);
        let out = apply_params(&s, &AugmentParams::identity()).unwrap();
        for (a, b) in out.pixels.data().iter().zip(s.pixels.data()) {
            assert!((a - b).abs() < 1e-9);
        }
        assert_eq!(out.label, s.label);
    }

    #[test]
    fn brightness_clamps_at_one() {
        let s = Sample {
            pixels: Tensor::filled(vec![3, 4, 4], 0.9),
            label: Label::Covid,
        };
        let mut p = AugmentParams::identity();
        p.brightness_delta = 0.2;
        let out = apply_params(&s, &p).unwrap();
        assert!(out.pixels.data().iter().all(|v| *v == 1.0));
    }

    #[test]
    fn draws_are_deterministic_and_bounded() {
        let policy = AugmentPolicy::default();
        let s = sample(20, 20);
        for seed in 0..40 {
            let a = augment(&s, &policy, seed).unwrap();
            let b = augment(&s, &policy, seed).unwrap();
            assert_eq!(a.pixels.data(), b.pixels.data());
            assert_eq!(a.label, s.label);
            assert_eq!(a.pixels.shape(), s.pixels.shape());
            assert!(a.pixels.data().iter().all(|v| (0.0..=1.0).contains(v)), "seed {seed}");
        }
    }

    #[test]
    fn zoom_rotation_shift_zero_is_identity() {
        let s = sample(12, 12);
        let mut p = AugmentParams::identity();
        p.rotation_deg = 0.0;
        p.shift_frac = (0.0, 0.0);
        p.zoom = 1.0;
        let out = apply_params(&s, &p).unwrap();
        for (a, b) in out.pixels.data().iter().zip(s.pixels.data()) {
            assert!((a - b).abs() < 1e-9);
        }
    }
}
