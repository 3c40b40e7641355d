use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::Sample;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Ranges of the random affine augmentation. Each transform parameter is
/// drawn uniformly from `[-range, range]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentConfig {
    pub rotation_deg: f64,
    /// Fraction of the image size, per axis.
    pub shift: f64,
    pub shear_deg: f64,
    /// Relative scale change.
    pub zoom: f64,
    pub flip_prob: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            rotation_deg: 10.0,
            shift: 0.05,
            shear_deg: 5.0,
            zoom: 0.1,
            flip_prob: 0.5,
        }
    }
}

impl AugmentConfig {
    /// No transform at all.
    pub fn none() -> Self {
        AugmentConfig {
            rotation_deg: 0.0,
            shift: 0.0,
            shear_deg: 0.0,
            zoom: 0.0,
            flip_prob: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ranges = [self.rotation_deg, self.shift, self.shear_deg, self.zoom];
        if ranges.iter().any(|r| r.is_nan() || *r < 0.0) {
            return Err(Error::Config("augmentation ranges must be non-negative".into()));
        }
        if self.zoom >= 1.0 {
            return Err(Error::Config("zoom range must be below 1".into()));
        }
        if !(0.0..=1.0).contains(&self.flip_prob) {
            return Err(Error::Config("flip probability must be in [0, 1]".into()));
        }
        Ok(())
    }
}

/// One sampled transform.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct AffineParams {
    pub rotation_deg: f64,
    pub shift_y: f64,
    pub shift_x: f64,
    pub shear_deg: f64,
    /// Added to a unit scale.
    pub zoom: f64,
    pub flip: bool,
}

impl AffineParams {
    pub fn sample(rng: &mut impl Rng, cfg: &AugmentConfig) -> Self {
        let mut draw = |r: f64| if r > 0.0 { rng.random_range(-r..=r) } else { 0.0 };
        let rotation_deg = draw(cfg.rotation_deg);
        let shift_y = draw(cfg.shift);
        let shift_x = draw(cfg.shift);
        let shear_deg = draw(cfg.shear_deg);
        let zoom = draw(cfg.zoom);
        let flip = cfg.flip_prob > 0.0 && rng.random_bool(cfg.flip_prob);
        AffineParams {
            rotation_deg,
            shift_y,
            shift_x,
            shear_deg,
            zoom,
            flip,
        }
    }

    fn is_identity_warp(&self) -> bool {
        self.rotation_deg == 0.0
            && self.shift_y == 0.0
            && self.shift_x == 0.0
            && self.shear_deg == 0.0
            && self.zoom == 0.0
    }

    /// Maps output coordinates `(y, x)` back to input coordinates.
    fn inverse(&self, h: usize, w: usize) -> impl Fn(f64, f64) -> (f64, f64) {
        let (s, c) = self.rotation_deg.to_radians().sin_cos();
        let k = self.shear_deg.to_radians().tan();
        let z = 1.0 + self.zoom;
        // Forward linear part in (x, y) order: rotation * shear * zoom.
        let a = [[c * z, (c * k - s) * z], [s * z, (s * k + c) * z]];
        let det = a[0][0] * a[1][1] - a[0][1] * a[1][0];
        let inv = [[a[1][1] / det, -a[0][1] / det], [-a[1][0] / det, a[0][0] / det]];
        let cy = (h as f64 - 1.0) / 2.0;
        let cx = (w as f64 - 1.0) / 2.0;
        let ty = self.shift_y * h as f64;
        let tx = self.shift_x * w as f64;
        move |y, x| {
            let dx = x - cx - tx;
            let dy = y - cy - ty;
            (
                inv[1][0] * dx + inv[1][1] * dy + cy,
                inv[0][0] * dx + inv[0][1] * dy + cx,
            )
        }
    }
}

/// Random stream for sample `index` in `epoch`, independent of the order
/// samples are processed in.
pub fn sample_rng(seed: u64, epoch: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream((epoch << 32) ^ index);
    rng
}

/// Mirrors every plane left to right.
pub fn hflip(t: &Tensor<f32>) -> Tensor<f32> {
    let w = t.shape().w;
    let mut out = t.clone();
    for (src, dst) in t.data().chunks(w).zip(out.data_mut().chunks_mut(w)) {
        for (d, s) in dst.iter_mut().zip(src.iter().rev()) {
            *d = *s;
        }
    }
    out
}

fn warp(t: &Tensor<f32>, map: &impl Fn(f64, f64) -> (f64, f64), bilinear: bool) -> Tensor<f32> {
    let s = t.shape();
    let src = t.data();
    let at = |y: isize, x: isize| -> f32 {
        if y < 0 || x < 0 || y >= s.h as isize || x >= s.w as isize {
            0.0
        } else {
            src[y as usize * s.w + x as usize]
        }
    };
    let mut out = Vec::with_capacity(s.plane());
    for y in 0..s.h {
        for x in 0..s.w {
            let (sy, sx) = map(y as f64, x as f64);
            let v = if bilinear {
                let (y0, x0) = (sy.floor(), sx.floor());
                let (fy, fx) = ((sy - y0) as f32, (sx - x0) as f32);
                let (y0, x0) = (y0 as isize, x0 as isize);
                let top = at(y0, x0) * (1.0 - fx) + at(y0, x0 + 1) * fx;
                let bottom = at(y0 + 1, x0) * (1.0 - fx) + at(y0 + 1, x0 + 1) * fx;
                top * (1.0 - fy) + bottom * fy
            } else {
                at(sy.round() as isize, sx.round() as isize)
            };
            out.push(v);
        }
    }
    Tensor::from_vec(s, out).expect("warp shape")
}

/// Applies `params` to image (bilinear, zero fill) and mask (nearest).
pub fn apply_affine(sample: &Sample, params: &AffineParams) -> Sample {
    let mut out = sample.clone();
    if !params.is_identity_warp() {
        let s = sample.image.shape();
        let map = params.inverse(s.h, s.w);
        out.image = warp(&sample.image, &map, true);
        out.mask = super::binarize_mask(&warp(&sample.mask, &map, false));
    }
    if params.flip {
        out.image = hflip(&out.image);
        out.mask = hflip(&out.mask);
    }
    out
}

pub fn augment(sample: &Sample, rng: &mut impl Rng, cfg: &AugmentConfig) -> Sample {
    let params = AffineParams::sample(rng, cfg);
    apply_affine(sample, &params)
}
