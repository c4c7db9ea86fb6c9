//! Route-based dataset generation and on-disk layout.
//!
//! Split is by trajectory, never by frame: the last `held_out` routes of a
//! class form the test set.

use super::{
    canonical_texture, make_trajectory, render_frame, FrameRecord, SignClass, Trajectory,
    TrajectoryKind, WorldConfig,
};
use crate::error::{ElaError, Result};
use crate::img::Image;
use crate::rng::SeedNode;
use rayon::prelude::*;
use std::io::Write;
use std::path::Path;

#[derive(Debug, Clone)]
pub struct RouteFrames {
    pub route_id: usize,
    pub kind: TrajectoryKind,
    pub frames: Vec<FrameRecord>,
}

#[derive(Debug, Clone)]
pub struct ClassDataset {
    pub class: SignClass,
    pub world: WorldConfig,
    pub train_routes: Vec<RouteFrames>,
    pub test_routes: Vec<RouteFrames>,
}

impl ClassDataset {
    pub fn train_frames(&self) -> impl Iterator<Item = &FrameRecord> {
        self.train_routes.iter().flat_map(|r| r.frames.iter())
    }

    pub fn test_frames(&self) -> impl Iterator<Item = &FrameRecord> {
        self.test_routes.iter().flat_map(|r| r.frames.iter())
    }
}

const KIND_CYCLE: [TrajectoryKind; 3] = [
    TrajectoryKind::Straight,
    TrajectoryKind::LaneChange,
    TrajectoryKind::Curved,
];

/// Generate all routes for one sign class. `seed` must already be scoped to
/// the class.
pub fn generate_class_dataset(
    world: &WorldConfig,
    n_routes: usize,
    frames_per_route: usize,
    held_out: usize,
    seed: SeedNode,
) -> Result<ClassDataset> {
    world.validate()?;
    if n_routes < 2 || held_out == 0 || held_out >= n_routes {
        return Err(ElaError::Argument(format!(
            "need >= 2 routes with 1 <= held_out < n_routes, got {n_routes}/{held_out}"
        )));
    }
    let texture = canonical_texture(world.sign_class);
    let mut routes = Vec::with_capacity(n_routes);
    for route_id in 0..n_routes {
        let kind = KIND_CYCLE[route_id % KIND_CYCLE.len()];
        let traj = make_trajectory(world, kind, frames_per_route, seed.child_idx(route_id as u64))?;
        let frames = render_route(world, &traj, &texture)?;
        routes.push(RouteFrames {
            route_id,
            kind,
            frames,
        });
    }
    let test_routes = routes.split_off(n_routes - held_out);
    Ok(ClassDataset {
        class: world.sign_class,
        world: world.clone(),
        train_routes: routes,
        test_routes,
    })
}

/// Render every pose of a trajectory; parallel over frames with pre-indexed
/// output slots.
pub fn render_route(world: &WorldConfig, traj: &Trajectory, texture: &Image) -> Result<Vec<FrameRecord>> {
    traj.poses
        .par_iter()
        .map(|pose| render_frame(world, pose, texture))
        .collect()
}

/// Write one class dataset: one directory per route, binary PPM frames,
/// key=value sidecar metadata, and a split manifest.
pub fn write_class_dataset(dataset: &ClassDataset, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let mut manifest = String::new();
    for (split, routes) in [("train", &dataset.train_routes), ("test", &dataset.test_routes)] {
        for route in routes.iter() {
            let route_dir = dir.join(format!("route_{:03}", route.route_id));
            std::fs::create_dir_all(&route_dir)?;
            manifest.push_str(&format!(
                "{} route_{:03} kind={} frames={}\n",
                split,
                route.route_id,
                route.kind.name(),
                route.frames.len()
            ));
            for frame in &route.frames {
                let stem = format!("frame_{:03}", frame.t);
                frame.image.write_ppm(&route_dir.join(format!("{stem}.ppm")))?;
                let mut meta = std::io::BufWriter::new(std::fs::File::create(
                    route_dir.join(format!("{stem}.txt")),
                )?);
                let g = &frame.geometry;
                let o = &frame.observation;
                let p = &frame.pose;
                writeln!(meta, "t = {}", frame.t)?;
                writeln!(meta, "label = {}", frame.label)?;
                writeln!(meta, "class = {}", dataset.class.name())?;
                writeln!(
                    meta,
                    "bbox = {:.6} {:.6} {:.6} {:.6}",
                    o.x_min, o.y_min, o.x_max, o.y_max
                )?;
                writeln!(
                    meta,
                    "ellipse = {:.6} {:.6} {:.6} {:.6} {:.6}",
                    g.x_center, g.y_center, g.a, g.b, g.delta
                )?;
                writeln!(
                    meta,
                    "pose = {:.6} {:.6} {:.6} {:.6}",
                    p.position[0], p.position[1], p.position[2], p.heading
                )?;
            }
        }
    }
    std::fs::write(dir.join("manifest.txt"), manifest)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_dataset() -> ClassDataset {
        let world = WorldConfig::default_for_class(SignClass::Speed30);
        generate_class_dataset(&world, 3, 12, 1, SeedNode::new(21).child("scene")).unwrap()
    }

    #[test]
    fn split_is_by_route() {
        let ds = small_dataset();
        assert_eq!(ds.train_routes.len(), 2);
        assert_eq!(ds.test_routes.len(), 1);
        let train_ids: Vec<usize> = ds.train_routes.iter().map(|r| r.route_id).collect();
        for r in &ds.test_routes {
            assert!(!train_ids.contains(&r.route_id));
        }
        assert_eq!(ds.train_frames().count(), 24);
        assert_eq!(ds.test_frames().count(), 12);
    }

    #[test]
    fn generation_deterministic_per_seed() {
        let a = small_dataset();
        let b = small_dataset();
        for (ra, rb) in a.train_routes.iter().zip(b.train_routes.iter()) {
            for (fa, fb) in ra.frames.iter().zip(rb.frames.iter()) {
                assert_eq!(fa.image.data, fb.image.data);
                assert_eq!(fa.geometry, fb.geometry);
            }
        }
    }

    #[test]
    fn insufficient_routes_rejected() {
        let world = WorldConfig::default_for_class(SignClass::Speed30);
        assert!(generate_class_dataset(&world, 1, 12, 1, SeedNode::new(0)).is_err());
        assert!(generate_class_dataset(&world, 3, 12, 3, SeedNode::new(0)).is_err());
    }

    #[test]
    fn disk_round_trip_images_bit_exact() {
        let ds = small_dataset();
        let dir = tempfile::tempdir().unwrap();
        write_class_dataset(&ds, dir.path()).unwrap();
        let f0 = &ds.train_routes[0].frames[3];
        let back = Image::read_ppm(&dir.path().join("route_000").join("frame_003.ppm")).unwrap();
        assert_eq!(back, f0.image);
        assert!(dir.path().join("manifest.txt").exists());
    }
}
