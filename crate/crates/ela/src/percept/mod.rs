//! Perception: sign-region masks, IOU, and the perspective transformation
//! network that maps attacker-view vehicle boxes to victim-view sign
//! geometry.

mod ptn;

pub use ptn::{
    evaluate_miou, gt_grid_mask, mask_mse_loss, predict_soft_mask, ptn_forward, ptn_train,
    PtnConfig, PtnDecoder, PtnModel, PtnTrainMode, PtnTrainResult,
};

use crate::error::{ElaError, Result};
use crate::scene::{SignGeometry, SignShape};

/// Hard binary mask, bit-packed, `rows x cols` in the victim image's pixel
/// convention (i = column, j = row).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask {
    pub rows: usize,
    pub cols: usize,
    bits: Vec<u64>,
}

/// Soft relaxation of [`Mask`], values in (0,1).
#[derive(Debug, Clone, PartialEq)]
pub struct SoftMask {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Mask {
    pub fn new(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            bits: vec![0; (rows * cols + 63) / 64],
        }
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> bool {
        let idx = j * self.cols + i;
        self.bits[idx / 64] >> (idx % 64) & 1 == 1
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: bool) {
        let idx = j * self.cols + i;
        if v {
            self.bits[idx / 64] |= 1 << (idx % 64);
        } else {
            self.bits[idx / 64] &= !(1 << (idx % 64));
        }
    }

    pub fn count_ones(&self) -> usize {
        self.bits.iter().map(|w| w.count_ones() as usize).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.iter().all(|&w| w == 0)
    }
}

/// Rotated-ellipse quadratic form at pixel (i, j); the mask indicator is
/// `Q <= 1`.
#[inline]
pub fn ellipse_q(geom: &SignGeometry, i: f64, j: f64) -> f64 {
    let dx = i - geom.x_center;
    let dy = j - geom.y_center;
    let (s, c) = geom.delta.sin_cos();
    let u = dx * c - dy * s;
    let v = dx * s + dy * c;
    (u * u) / (geom.a * geom.a) + (v * v) / (geom.b * geom.b)
}

fn check_axes(geom: &SignGeometry) -> Result<()> {
    if geom.a <= 0.0 || geom.b <= 0.0 {
        return Err(ElaError::Argument(format!(
            "non-positive semi-axes a={} b={}",
            geom.a, geom.b
        )));
    }
    Ok(())
}

/// Hard elliptical mask: 1 iff the rotated-ellipse quadratic form is <= 1.
pub fn render_mask(geom: &SignGeometry, rows: usize, cols: usize) -> Result<Mask> {
    check_axes(geom)?;
    let mut mask = Mask::new(rows, cols);
    for j in 0..rows {
        for i in 0..cols {
            if ellipse_q(geom, i as f64, j as f64) <= 1.0 {
                mask.set(i, j, true);
            }
        }
    }
    Ok(mask)
}

/// Half-plane normals scaled by the apothem for the canonical regular
/// octagon (circumradius 1, flat-top vertex phase: vertices at
/// (2k+1)*pi/8).
const OCT_APOTHEM: f64 = 0.9238795325112867; // cos(pi/8)

/// Point-in-canonical-octagon test.
#[inline]
pub fn in_canonical_octagon(x: f64, y: f64) -> bool {
    for k in 0..8 {
        let ang = k as f64 * std::f64::consts::FRAC_PI_4;
        if x * ang.cos() + y * ang.sin() > OCT_APOTHEM {
            return false;
        }
    }
    true
}

/// Hard octagon mask: affine image of the canonical regular octagon under
/// the map sending the unit circle to (center, a, b, delta).
pub fn render_octagon_mask(geom: &SignGeometry, rows: usize, cols: usize) -> Result<Mask> {
    check_axes(geom)?;
    let mut mask = Mask::new(rows, cols);
    let (s, c) = geom.delta.sin_cos();
    for j in 0..rows {
        for i in 0..cols {
            let dx = i as f64 - geom.x_center;
            let dy = j as f64 - geom.y_center;
            // inverse affine: rotate by -delta, divide by axes
            let u = (dx * c - dy * s) / geom.a;
            let v = (dx * s + dy * c) / geom.b;
            if in_canonical_octagon(u, v) {
                mask.set(i, j, true);
            }
        }
    }
    Ok(mask)
}

/// Shape-dispatching ground-truth mask.
pub fn render_shape_mask(geom: &SignGeometry, rows: usize, cols: usize) -> Result<Mask> {
    match geom.shape {
        SignShape::Circle => render_mask(geom, rows, cols),
        SignShape::Octagon => render_octagon_mask(geom, rows, cols),
    }
}

/// Sigmoid relaxation of the hard mask: `sigmoid((1 - Q)/tau)`.
pub fn soft_mask(geom: &SignGeometry, rows: usize, cols: usize, tau: f64) -> Result<SoftMask> {
    check_axes(geom)?;
    if tau <= 0.0 {
        return Err(ElaError::Argument("tau must be > 0".into()));
    }
    let mut data = vec![0.0; rows * cols];
    for j in 0..rows {
        for i in 0..cols {
            let q = ellipse_q(geom, i as f64, j as f64);
            data[j * cols + i] = sigmoid((1.0 - q) / tau);
        }
    }
    Ok(SoftMask { rows, cols, data })
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

impl SoftMask {
    /// Threshold at 0.5 into a hard mask.
    pub fn threshold(&self) -> Mask {
        let mut m = Mask::new(self.rows, self.cols);
        for j in 0..self.rows {
            for i in 0..self.cols {
                if self.data[j * self.cols + i] > 0.5 {
                    m.set(i, j, true);
                }
            }
        }
        m
    }
}

/// Intersection over union of two hard masks; 1 when both are empty.
pub fn iou(m1: &Mask, m2: &Mask) -> Result<f64> {
    if m1.rows != m2.rows || m1.cols != m2.cols {
        return Err(ElaError::Shape(format!(
            "mask dims {}x{} vs {}x{}",
            m1.rows, m1.cols, m2.rows, m2.cols
        )));
    }
    let mut inter = 0usize;
    let mut union = 0usize;
    for (a, b) in m1.bits.iter().zip(m2.bits.iter()) {
        inter += (a & b).count_ones() as usize;
        union += (a | b).count_ones() as usize;
    }
    if union == 0 {
        return Ok(1.0);
    }
    Ok(inter as f64 / union as f64)
}
