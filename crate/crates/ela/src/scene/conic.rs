//! Direct least-squares ellipse fitting (Fitzgibbon-style, solved through the
//! reduced 3x3 generalized eigenproblem) and conic-to-geometric conversion.

use crate::error::{ElaError, Result};
use nalgebra::{DMatrix, Matrix3, Vector3};

/// Fitted ellipse: center, semi-axes with `a >= b`, major-axis rotation
/// normalized to `[0, pi)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FittedEllipse {
    pub cx: f64,
    pub cy: f64,
    pub a: f64,
    pub b: f64,
    pub delta: f64,
}

/// Fit an ellipse to 2D points by direct least squares on the conic
/// `Ax^2 + Bxy + Cy^2 + Dx + Ey + F = 0` with the ellipse constraint
/// `4AC - B^2 = 1`.
pub fn fit_ellipse(points: &[[f64; 2]]) -> Result<FittedEllipse> {
    if points.len() < 6 {
        return Err(ElaError::Argument(format!(
            "ellipse fit needs >= 6 points, got {}",
            points.len()
        )));
    }
    let n = points.len();

    // Normalize for conditioning: centroid shift + isotropic scale.
    let mean_x = points.iter().map(|p| p[0]).sum::<f64>() / n as f64;
    let mean_y = points.iter().map(|p| p[1]).sum::<f64>() / n as f64;
    let mean_dist = points
        .iter()
        .map(|p| ((p[0] - mean_x).powi(2) + (p[1] - mean_y).powi(2)).sqrt())
        .sum::<f64>()
        / n as f64;
    if mean_dist < 1e-12 {
        return Err(ElaError::Degenerate("all points coincide".into()));
    }
    let s = std::f64::consts::SQRT_2 / mean_dist;

    let mut d1 = DMatrix::<f64>::zeros(n, 3);
    let mut d2 = DMatrix::<f64>::zeros(n, 3);
    for (i, p) in points.iter().enumerate() {
        let x = (p[0] - mean_x) * s;
        let y = (p[1] - mean_y) * s;
        d1[(i, 0)] = x * x;
        d1[(i, 1)] = x * y;
        d1[(i, 2)] = y * y;
        d2[(i, 0)] = x;
        d2[(i, 1)] = y;
        d2[(i, 2)] = 1.0;
    }
    let s1 = d1.transpose() * &d1;
    let s2 = d1.transpose() * &d2;
    let s3 = d2.transpose() * &d2;
    let s3_inv = s3
        .try_inverse()
        .ok_or_else(|| ElaError::Degenerate("degenerate point set (collinear?)".into()))?;
    let t = -(&s3_inv) * s2.transpose();
    let m_full = &s1 + &s2 * &t;
    let m_full = Matrix3::from_iterator(m_full.iter().cloned());

    // Constraint matrix C1 for 4AC - B^2; reduced system is C1^-1 M.
    let c1_inv_m = Matrix3::new(
        m_full[(2, 0)] / 2.0,
        m_full[(2, 1)] / 2.0,
        m_full[(2, 2)] / 2.0,
        -m_full[(1, 0)],
        -m_full[(1, 1)],
        -m_full[(1, 2)],
        m_full[(0, 0)] / 2.0,
        m_full[(0, 1)] / 2.0,
        m_full[(0, 2)] / 2.0,
    );

    let a1 = pick_elliptical_eigenvector(&c1_inv_m)
        .ok_or_else(|| ElaError::Degenerate("no elliptical solution in eigensystem".into()))?;
    let a2 = &t * Vector3::new(a1[0], a1[1], a1[2]);

    // Denormalize conic coefficients back to pixel coordinates.
    let (na, nb, nc) = (a1[0], a1[1], a1[2]);
    let (nd, ne, nf) = (a2[0], a2[1], a2[2]);
    let a = na * s * s;
    let b = nb * s * s;
    let c = nc * s * s;
    let d_coef = nd * s - 2.0 * a * mean_x - b * mean_y;
    let e_coef = ne * s - b * mean_x - 2.0 * c * mean_y;
    let f_coef = nf - nd * s * mean_x - ne * s * mean_y
        + a * mean_x * mean_x
        + b * mean_x * mean_y
        + c * mean_y * mean_y;
    conic_to_ellipse(a, b, c, d_coef, e_coef, f_coef)
}

/// Among the eigenvectors of the reduced system, the elliptical solution has
/// `4ac - b^2 > 0`.
fn pick_elliptical_eigenvector(system: &Matrix3<f64>) -> Option<Vector3<f64>> {
    let eigvals = system.complex_eigenvalues();
    let mut best: Option<(f64, Vector3<f64>)> = None;
    for k in 0..3 {
        let ev = eigvals[k];
        if ev.im.abs() > 1e-6 * (1.0 + ev.re.abs()) {
            continue;
        }
        let lam = ev.re;
        let shifted = system - Matrix3::identity() * lam;
        let svd = shifted.svd(false, true);
        let v_t = svd.v_t?;
        let v = v_t.row(2).transpose();
        let cond = 4.0 * v[0] * v[2] - v[1] * v[1];
        if cond > 0.0 {
            // prefer the smallest-residual elliptical vector
            let resid = (shifted * v).norm();
            match best {
                Some((r, _)) if r <= resid => {}
                _ => best = Some((resid, v)),
            }
        }
    }
    best.map(|(_, v)| v)
}

/// Convert general conic coefficients to geometric ellipse parameters.
pub fn conic_to_ellipse(a: f64, b: f64, c: f64, d: f64, e: f64, f: f64) -> Result<FittedEllipse> {
    let disc = 4.0 * a * c - b * b;
    if disc <= 1e-18 {
        return Err(ElaError::Degenerate("conic is not an ellipse".into()));
    }
    let cx = (b * e - 2.0 * c * d) / disc;
    let cy = (b * d - 2.0 * a * e) / disc;
    let f_center = a * cx * cx + b * cx * cy + c * cy * cy + d * cx + e * cy + f;
    if f_center.abs() < 1e-300 {
        return Err(ElaError::Degenerate("degenerate (point) conic".into()));
    }
    // Eigenvalues of the quadratic part give the axis scales.
    let sum = a + c;
    let diff = ((a - c).powi(2) + b * b).sqrt();
    let lam1 = (sum + diff) / 2.0; // larger eigenvalue -> shorter axis
    let lam2 = (sum - diff) / 2.0;
    let a_sq = -f_center / lam2;
    let b_sq = -f_center / lam1;
    if a_sq <= 0.0 || b_sq <= 0.0 {
        return Err(ElaError::Degenerate("imaginary ellipse".into()));
    }
    // Major axis direction is the eigenvector of the smaller eigenvalue.
    let delta = if b.abs() < 1e-15 && (a - c).abs() < 1e-15 {
        0.0
    } else {
        0.5 * b.atan2(a - c) + std::f64::consts::FRAC_PI_2
    };
    let mut delta = delta.rem_euclid(std::f64::consts::PI);
    if delta >= std::f64::consts::PI {
        delta -= std::f64::consts::PI;
    }
    Ok(FittedEllipse {
        cx,
        cy,
        a: a_sq.sqrt(),
        b: b_sq.sqrt(),
        delta,
    })
}
