//! Victim-view frame rendering: gradient background plus the canonical sign
//! texture warped onto the projected ellipse.

use super::texture::TEXTURE_SIZE;
use super::{project_sign_geometry, project_vehicle_bbox, FrameRecord, SignShape, VehiclePose, WorldConfig};
use crate::error::Result;
use crate::img::Image;
use crate::percept::{in_canonical_octagon, render_shape_mask};

/// Render one victim-view frame with its ground-truth geometry, attacker
/// observation, and mask.
pub fn render_frame(config: &WorldConfig, pose: &VehiclePose, texture: &Image) -> Result<FrameRecord> {
    let geometry = project_sign_geometry(config, pose)?;
    let observation = project_vehicle_bbox(config, pose)?;
    let w = config.victim_intrinsics.width;
    let h = config.victim_intrinsics.height;
    let mut image = Image::new(w, h);

    // sky-to-road gradient background
    let horizon = h as f64 * 0.55;
    for j in 0..h {
        let (r, g, b) = if (j as f64) < horizon {
            let p = j as f64 / horizon;
            (0.45 + 0.1 * p, 0.62 + 0.05 * p, 0.88 - 0.1 * p)
        } else {
            let p = (j as f64 - horizon) / (h as f64 - horizon);
            (0.38 - 0.08 * p, 0.38 - 0.08 * p, 0.4 - 0.08 * p)
        };
        for i in 0..w {
            image.set(i, j, [r, g, b]);
        }
    }

    // affine map sending the unit circle to (center, a, b, delta); inverse per
    // pixel, bilinear texture lookup
    let (s, c) = geometry.delta.sin_cos();
    let pad = geometry.a.ceil() as isize + 1;
    let cx = geometry.x_center;
    let cy = geometry.y_center;
    let i0 = ((cx as isize) - pad).max(0) as usize;
    let i1 = (((cx as isize) + pad + 1).max(0) as usize).min(w);
    let j0 = ((cy as isize) - pad).max(0) as usize;
    let j1 = (((cy as isize) + pad + 1).max(0) as usize).min(h);
    let half = TEXTURE_SIZE as f64 / 2.0;
    for j in j0..j1 {
        for i in i0..i1 {
            let dx = i as f64 - cx;
            let dy = j as f64 - cy;
            let u = (dx * c - dy * s) / geometry.a;
            let v = (dx * s + dy * c) / geometry.b;
            let inside = match geometry.shape {
                SignShape::Circle => u * u + v * v <= 1.0,
                SignShape::Octagon => in_canonical_octagon(u, v),
            };
            if inside {
                let tx = (u + 1.0) * half - 0.5;
                let ty = (v + 1.0) * half - 0.5;
                image.set(i, j, texture.sample_bilinear(tx, ty));
            }
        }
    }

    let mask = render_shape_mask(&geometry, h, w)?;
    Ok(FrameRecord {
        t: pose.t,
        image,
        geometry,
        observation,
        label: config.sign_class.label(),
        mask,
        pose: *pose,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::percept::{ellipse_q, iou, Mask};
    use crate::rng::SeedNode;
    use crate::scene::{canonical_texture, make_trajectory, SignClass, TrajectoryKind};

    fn rendered() -> FrameRecord {
        let cfg = WorldConfig::default_for_class(SignClass::Speed60);
        let traj = make_trajectory(&cfg, TrajectoryKind::Straight, 30, SeedNode::new(4)).unwrap();
        let tex = canonical_texture(SignClass::Speed60);
        render_frame(&cfg, &traj.poses[29], &tex).unwrap()
    }

    #[test]
    fn ellipse_center_takes_texture_center_color() {
        let f = rendered();
        let tex = canonical_texture(SignClass::Speed60);
        // the rendered pixel nearest the ellipse center must equal the
        // inverse-warped texture sample at that pixel
        let g = &f.geometry;
        let pi = g.x_center.round() as usize;
        let pj = g.y_center.round() as usize;
        let (s, c) = g.delta.sin_cos();
        let dx = pi as f64 - g.x_center;
        let dy = pj as f64 - g.y_center;
        let u = (dx * c - dy * s) / g.a;
        let v = (dx * s + dy * c) / g.b;
        let half = TEXTURE_SIZE as f64 / 2.0;
        let expect = tex.sample_bilinear((u + 1.0) * half - 0.5, (v + 1.0) * half - 0.5);
        let center = f.image.get(pi, pj);
        for ch in 0..3 {
            assert!((center[ch] - expect[ch]).abs() < 0.01, "{center:?} vs {expect:?}");
        }
    }

    #[test]
    fn mask_pixels_inside_dilated_shape() {
        let f = rendered();
        for j in 0..f.mask.rows {
            for i in 0..f.mask.cols {
                if f.mask.get(i, j) {
                    // every mask pixel lies inside the ellipse dilated by 1 px
                    let g = &f.geometry;
                    let q = ellipse_q(g, i as f64, j as f64);
                    let dil = ((g.a + 1.5) / g.a).powi(2);
                    assert!(q <= dil, "mask pixel ({i},{j}) outside dilated shape, q={q}");
                }
            }
        }
        assert!(!f.mask.is_empty(), "mask nonzero when sign visible");
    }

    #[test]
    fn mask_iou_with_dense_projection_oracle() {
        let cfg = WorldConfig::default_for_class(SignClass::Speed60);
        let traj = make_trajectory(&cfg, TrajectoryKind::Curved, 30, SeedNode::new(8)).unwrap();
        let tex = canonical_texture(SignClass::Speed60);
        let f = render_frame(&cfg, &traj.poses[25], &tex).unwrap();
        // dense-sampling oracle: project 4096 boundary points, rasterize the
        // convex hull by scanline point-in-polygon
        let dense = crate::scene::project_sign_geometry_with(&cfg, &traj.poses[25], 4096).unwrap();
        let oracle = crate::percept::render_mask(&dense, f.mask.rows, f.mask.cols).unwrap();
        let v = iou(&f.mask, &oracle).unwrap();
        assert!(v > 0.98, "iou {v}");
        let _ = Mask::new(1, 1);
    }
}
