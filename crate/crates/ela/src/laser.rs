//! Laser beam model: wavelength to colour, thick anti-aliased beam
//! rasterization, and additive compositing restricted to the sign mask.

use crate::error::{ElaError, Result};
use crate::img::Image;
use crate::percept::Mask;

pub const OMEGA_MIN: f64 = 1.0;
pub const OMEGA_MAX: f64 = 12.0;
pub const LAMBDA_MIN: f64 = 400.0;
pub const LAMBDA_MAX: f64 = 700.0;
pub const BETA_DEFAULT: f64 = 0.7;

/// One laser configuration: beam angle in image coordinates, stripe width in
/// pixels, and wavelength in nanometres.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LaserParams {
    /// Beam direction angle in `[0, pi)`; the beam is an infinite line.
    pub phi: f64,
    /// Stripe width in pixels.
    pub omega: f64,
    /// Wavelength in nanometres.
    pub lambda: f64,
}

impl LaserParams {
    pub fn new(phi: f64, omega: f64, lambda: f64) -> Result<Self> {
        if !(0.0..std::f64::consts::PI).contains(&phi) {
            return Err(ElaError::Argument(format!("phi {phi} outside [0, pi)")));
        }
        if !(OMEGA_MIN..=OMEGA_MAX).contains(&omega) {
            return Err(ElaError::Argument(format!(
                "omega {omega} outside [{OMEGA_MIN}, {OMEGA_MAX}]"
            )));
        }
        if !(LAMBDA_MIN..=LAMBDA_MAX).contains(&lambda) {
            return Err(ElaError::Argument(format!(
                "lambda {lambda} outside [{LAMBDA_MIN}, {LAMBDA_MAX}]"
            )));
        }
        Ok(Self { phi, omega, lambda })
    }

    /// Slope `k = tan(phi)` as a display string; vertical beams print "inf".
    pub fn slope_repr(&self) -> String {
        let quarter = (self.phi - std::f64::consts::FRAC_PI_2).abs();
        if quarter < 1e-12 {
            "inf".to_string()
        } else {
            format!("{:.4}", self.phi.tan())
        }
    }
}

/// Piecewise-linear visible-spectrum approximation, returning linear RGB in
/// `[0, 1]`. Accepts the extended range `[380, 780]` nm.
pub fn wavelength_to_rgb(lambda: f64) -> Result<[f64; 3]> {
    if !(380.0..=780.0).contains(&lambda) {
        return Err(ElaError::Argument(format!(
            "wavelength {lambda} nm outside [380, 780]"
        )));
    }
    let (r, g, b) = if lambda < 440.0 {
        (-(lambda - 440.0) / (440.0 - 380.0), 0.0, 1.0)
    } else if lambda < 490.0 {
        (0.0, (lambda - 440.0) / (490.0 - 440.0), 1.0)
    } else if lambda < 510.0 {
        (0.0, 1.0, -(lambda - 510.0) / (510.0 - 490.0))
    } else if lambda < 580.0 {
        ((lambda - 510.0) / (580.0 - 510.0), 1.0, 0.0)
    } else if lambda < 645.0 {
        (1.0, -(lambda - 645.0) / (645.0 - 580.0), 0.0)
    } else {
        (1.0, 0.0, 0.0)
    };
    Ok([r, g, b])
}

/// Per-pixel beam coverage in `[0, 1]` for a beam through `anchor` with
/// direction `(cos phi, sin phi)`. Coverage is 1 inside the stripe core,
/// 0 beyond a half-pixel ramp, and linear in between.
pub fn rasterize_beam(
    width: usize,
    height: usize,
    anchor: (f64, f64),
    params: &LaserParams,
) -> Vec<f64> {
    let (sn, cs) = params.phi.sin_cos();
    let half = params.omega / 2.0;
    let mut cov = vec![0.0; width * height];
    for j in 0..height {
        for i in 0..width {
            let dx = i as f64 - anchor.0;
            let dy = j as f64 - anchor.1;
            // perpendicular distance to the line through the anchor
            let d = (dx * sn - dy * cs).abs();
            cov[j * width + i] = beam_coverage(d, half);
        }
    }
    cov
}

#[inline]
pub(crate) fn beam_coverage(d: f64, half: f64) -> f64 {
    if d <= half - 0.5 {
        1.0
    } else if d >= half + 0.5 {
        0.0
    } else {
        (half + 0.5 - d).clamp(0.0, 1.0)
    }
}

/// Additively blend the beam into `base`, restricted to the sign mask.
/// Pixels outside the mask are copied bit-exactly.
pub fn composite(
    base: &Image,
    mask: &Mask,
    anchor: (f64, f64),
    params: &LaserParams,
    beta: f64,
) -> Result<Image> {
    if mask.cols != base.width || mask.rows != base.height {
        return Err(ElaError::Shape(format!(
            "mask {}x{} vs image {}x{}",
            mask.cols, mask.rows, base.width, base.height
        )));
    }
    if !(0.0..=1.0).contains(&beta) {
        return Err(ElaError::Argument(format!("beta {beta} outside [0, 1]")));
    }
    let rgb = wavelength_to_rgb(params.lambda)?;
    let (sn, cs) = params.phi.sin_cos();
    let half = params.omega / 2.0;
    let mut out = base.clone();
    for j in 0..base.height {
        for i in 0..base.width {
            if !mask.get(i, j) {
                continue;
            }
            let dx = i as f64 - anchor.0;
            let dy = j as f64 - anchor.1;
            let cov = beam_coverage((dx * sn - dy * cs).abs(), half);
            if cov <= 0.0 {
                continue;
            }
            let px = base.get(i, j);
            out.set(
                i,
                j,
                [
                    px[0] + beta * cov * rgb[0],
                    px[1] + beta * cov * rgb[1],
                    px[2] + beta * cov * rgb[2],
                ],
            );
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::percept::Mask;

    #[test]
    fn spectrum_breakpoints() {
        let red = wavelength_to_rgb(700.0).unwrap();
        assert_eq!(red, [1.0, 0.0, 0.0]);
        let cyan = wavelength_to_rgb(475.0).unwrap();
        assert!((cyan[0] - 0.0).abs() < 1e-12);
        assert!((cyan[1] - 0.7).abs() < 1e-12);
        assert!((cyan[2] - 1.0).abs() < 1e-12);
        let green = wavelength_to_rgb(545.0).unwrap();
        assert!((green[0] - 0.5).abs() < 1e-12);
        assert!((green[1] - 1.0).abs() < 1e-12);
        assert!((green[2] - 0.0).abs() < 1e-12);
    }

    #[test]
    fn spectrum_range_and_continuity() {
        let mut prev = wavelength_to_rgb(380.0).unwrap();
        let mut lambda = 380.5;
        while lambda <= 780.0 {
            let c = wavelength_to_rgb(lambda).unwrap();
            for k in 0..3 {
                assert!((0.0..=1.0).contains(&c[k]), "channel out of range at {lambda}");
                // steepest segment ramps 1.0 over 20 nm
                assert!((c[k] - prev[k]).abs() < 0.5 / 20.0 + 1e-9, "jump at {lambda} nm");
            }
            prev = c;
            lambda += 0.5;
        }
        assert!(wavelength_to_rgb(379.9).is_err());
        assert!(wavelength_to_rgb(780.1).is_err());
    }

    #[test]
    fn horizontal_beam_coverage_profile() {
        // phi = 0: the beam runs along +x, coverage depends only on row
        let p = LaserParams::new(0.0, 4.0, 650.0).unwrap();
        let cov = rasterize_beam(16, 16, (8.0, 8.0), &p);
        for i in 0..16 {
            assert_eq!(cov[8 * 16 + i], 1.0); // on the axis
            assert_eq!(cov[7 * 16 + i], 1.0); // |d| = 1 <= 1.5
            assert_eq!(cov[12 * 16 + i], 0.0); // |d| = 4 >= 2.5
            assert!((cov[10 * 16 + i] - 0.5).abs() < 1e-12); // |d| = 2, mid-ramp
        }
    }

    #[test]
    fn beam_symmetric_about_axis() {
        let p = LaserParams::new(1.1, 5.0, 500.0).unwrap();
        let cov = rasterize_beam(33, 33, (16.0, 16.0), &p);
        for j in 0..33 {
            for i in 0..33 {
                let (ri, rj) = (32 - i, 32 - j);
                assert!((cov[j * 33 + i] - cov[rj * 33 + ri]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn composite_identity_outside_mask() {
        let mut base = Image::new(32, 32);
        for j in 0..32 {
            for i in 0..32 {
                base.set(i, j, [0.3, 0.5, 0.2]);
            }
        }
        let mut mask = Mask::new(32, 32);
        for j in 10..22 {
            for i in 10..22 {
                mask.set(i, j, true);
            }
        }
        let p = LaserParams::new(0.8, 6.0, 450.0).unwrap();
        let out = composite(&base, &mask, (16.0, 16.0), &p, 0.7).unwrap();
        let mut touched = 0usize;
        for j in 0..32 {
            for i in 0..32 {
                if mask.get(i, j) {
                    if out.get(i, j) != base.get(i, j) {
                        touched += 1;
                    }
                } else {
                    assert_eq!(out.get(i, j), base.get(i, j), "pixel outside mask changed");
                }
            }
        }
        assert!(touched > 0, "beam never intersected the mask");
    }

    #[test]
    fn composite_additive_and_clipped() {
        let mut base = Image::new(8, 8);
        for j in 0..8 {
            for i in 0..8 {
                base.set(i, j, [0.9, 0.1, 0.0]);
            }
        }
        let mut mask = Mask::new(8, 8);
        for j in 0..8 {
            for i in 0..8 {
                mask.set(i, j, true);
            }
        }
        // red beam at full coverage over the anchor row
        let p = LaserParams::new(0.0, 4.0, 700.0).unwrap();
        let out = composite(&base, &mask, (4.0, 4.0), &p, 0.7).unwrap();
        let px = out.get(4, 4);
        assert!((px[0] - 1.0).abs() < 1e-12, "red clipped to 1");
        assert!((px[1] - 0.1).abs() < 0.01, "green unchanged by a pure red beam");
    }

    #[test]
    fn parameter_validation() {
        assert!(LaserParams::new(-0.1, 5.0, 500.0).is_err());
        assert!(LaserParams::new(std::f64::consts::PI, 5.0, 500.0).is_err());
        assert!(LaserParams::new(0.5, 0.5, 500.0).is_err());
        assert!(LaserParams::new(0.5, 13.0, 500.0).is_err());
        assert!(LaserParams::new(0.5, 5.0, 300.0).is_err());
        assert!(LaserParams::new(std::f64::consts::FRAC_PI_2, 5.0, 500.0)
            .unwrap()
            .slope_repr()
            .contains("inf"));
    }
}
