//! Analytic scene substrate: vehicle trajectories past a roadside sign,
//! pinhole projections into the fixed attacker sensor and the moving victim
//! camera, and rendered victim-view frames.
//!
//! World frame: x along the road (vehicles drive toward +x), y lateral,
//! z up, meters. The sign sits near the origin ahead of the vehicle.

pub mod camera;
pub mod conic;
mod dataset;
mod render;
mod texture;

pub use camera::{Camera, CameraIntrinsics, Vec3};
pub use conic::{conic_to_ellipse, fit_ellipse, FittedEllipse};
pub use dataset::{generate_class_dataset, write_class_dataset, ClassDataset, RouteFrames};
pub use render::render_frame;
pub use texture::canonical_texture;

use crate::error::{ElaError, Result};
use crate::img::Image;
use crate::percept::Mask;
use crate::rng::SeedNode;
use rand::Rng;

/// The seven sign classes; 70/80/100 act as distractors.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum SignClass {
    Speed30,
    Speed60,
    Speed70,
    Speed80,
    Speed90,
    Speed100,
    Stop,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SignShape {
    Circle,
    Octagon,
}

impl SignClass {
    pub const ALL: [SignClass; 7] = [
        SignClass::Speed30,
        SignClass::Speed60,
        SignClass::Speed70,
        SignClass::Speed80,
        SignClass::Speed90,
        SignClass::Speed100,
        SignClass::Stop,
    ];

    pub fn label(self) -> usize {
        Self::ALL.iter().position(|&c| c == self).unwrap()
    }

    pub fn from_label(label: usize) -> Result<Self> {
        Self::ALL
            .get(label)
            .copied()
            .ok_or_else(|| ElaError::Argument(format!("bad class label {label}")))
    }

    pub fn name(self) -> &'static str {
        match self {
            SignClass::Speed30 => "30",
            SignClass::Speed60 => "60",
            SignClass::Speed70 => "70",
            SignClass::Speed80 => "80",
            SignClass::Speed90 => "90",
            SignClass::Speed100 => "100",
            SignClass::Stop => "stop",
        }
    }

    pub fn from_name(name: &str) -> Result<Self> {
        Self::ALL
            .iter()
            .copied()
            .find(|c| c.name() == name)
            .ok_or_else(|| ElaError::Argument(format!("unknown sign class '{name}'")))
    }

    pub fn shape(self) -> SignShape {
        match self {
            SignClass::Stop => SignShape::Octagon,
            _ => SignShape::Circle,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VehicleDims {
    pub length: f64,
    pub width: f64,
    pub height: f64,
}

/// Static world description: sign, both cameras, vehicle body.
#[derive(Debug, Clone, PartialEq)]
pub struct WorldConfig {
    pub sign_center: Vec3,
    pub sign_radius: f64,
    /// Unit normal, pointing toward oncoming traffic.
    pub sign_normal: Vec3,
    pub sign_class: SignClass,
    pub attacker_position: Vec3,
    pub attacker_look_at: Vec3,
    pub attacker_intrinsics: CameraIntrinsics,
    pub victim_intrinsics: CameraIntrinsics,
    pub victim_cam_height: f64,
    /// Fixed dashcam yaw toward the roadside, radians.
    pub victim_yaw: f64,
    pub vehicle: VehicleDims,
}

impl WorldConfig {
    pub fn default_for_class(sign_class: SignClass) -> Self {
        Self {
            sign_center: [0.0, 1.2, 2.0],
            sign_radius: 0.35,
            sign_normal: [-1.0, 0.0, 0.0],
            sign_class,
            // perpendicular overlook of the approach so the whole route stays
            // inside the attacker frame
            attacker_position: [-12.0, 11.0, 7.0],
            attacker_look_at: [-12.0, 0.0, 0.75],
            attacker_intrinsics: CameraIntrinsics {
                focal_px: 100.0,
                width: 160,
                height: 120,
            },
            victim_intrinsics: CameraIntrinsics {
                focal_px: 400.0,
                width: 128,
                height: 128,
            },
            victim_cam_height: 1.2,
            // slight fixed yaw toward the roadside keeps the sign centered
            // over the whole approach at this focal length
            victim_yaw: (1.2_f64).atan2(12.0),
            vehicle: VehicleDims {
                length: 4.2,
                width: 1.8,
                height: 1.5,
            },
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.sign_radius <= 0.0 {
            return Err(ElaError::Argument("sign radius must be > 0".into()));
        }
        if self.attacker_intrinsics.focal_px <= 0.0 || self.victim_intrinsics.focal_px <= 0.0 {
            return Err(ElaError::Argument("focal lengths must be > 0".into()));
        }
        let n = camera::norm(self.sign_normal);
        if (n - 1.0).abs() > 1e-9 {
            return Err(ElaError::Argument(format!("sign normal not unit length ({n})")));
        }
        Ok(())
    }

    pub fn attacker_camera(&self) -> Result<Camera> {
        Camera::look_at(self.attacker_position, self.attacker_look_at, self.attacker_intrinsics)
    }

    /// Dashcam mounted level and aligned with the lane axis; its view is a
    /// function of vehicle position alone, which keeps the attacker-side
    /// bbox-to-view mapping well defined.
    pub fn victim_camera(&self, pose: &VehiclePose) -> Result<Camera> {
        let pos = [
            pose.position[0],
            pose.position[1],
            pose.position[2] + self.victim_cam_height,
        ];
        let target = [
            pos[0] + self.victim_yaw.cos(),
            pos[1] + self.victim_yaw.sin(),
            pos[2],
        ];
        Camera::look_at(pos, target, self.victim_intrinsics)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VehiclePose {
    pub t: usize,
    pub position: Vec3,
    pub heading: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum TrajectoryKind {
    Straight,
    LaneChange,
    Curved,
}

impl TrajectoryKind {
    pub fn name(self) -> &'static str {
        match self {
            TrajectoryKind::Straight => "straight",
            TrajectoryKind::LaneChange => "lane-change",
            TrajectoryKind::Curved => "curved",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub kind: TrajectoryKind,
    pub poses: Vec<VehiclePose>,
}

/// Vehicle bounding box in the attacker image, pixels.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AttackerObservation {
    pub x_min: f64,
    pub y_min: f64,
    pub x_max: f64,
    pub y_max: f64,
    pub clamped: bool,
}

/// Victim-view sign ellipse (circumcircle image for octagons), pixels.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SignGeometry {
    pub x_center: f64,
    pub y_center: f64,
    pub a: f64,
    pub b: f64,
    /// Major-axis rotation in [0, pi).
    pub delta: f64,
    pub shape: SignShape,
}

/// One rendered timestep.
#[derive(Debug, Clone)]
pub struct FrameRecord {
    pub t: usize,
    pub image: Image,
    pub geometry: SignGeometry,
    pub observation: AttackerObservation,
    pub label: usize,
    pub mask: Mask,
    pub pose: VehiclePose,
}

/// Generate a vehicle trajectory approaching the sign.
pub fn make_trajectory(
    config: &WorldConfig,
    kind: TrajectoryKind,
    frames: usize,
    seed: SeedNode,
) -> Result<Trajectory> {
    if frames < 5 {
        return Err(ElaError::Argument(format!(
            "need >= 5 frames per route (segment length), got {frames}"
        )));
    }
    let mut rng = seed.rng();
    let start_dist: f64 = rng.gen_range(16.0..20.0);
    let end_dist: f64 = rng.gen_range(8.0..10.0);
    let y0: f64 = rng.gen_range(-0.2..0.2);
    let bump: f64 = match kind {
        TrajectoryKind::Straight => 0.0,
        TrajectoryKind::LaneChange => {
            let mag = rng.gen_range(0.25..0.45);
            if rng.gen_bool(0.5) {
                mag
            } else {
                -mag
            }
        }
        TrajectoryKind::Curved => rng.gen_range(-0.5..0.5),
    };
    let sign_x = config.sign_center[0];
    let mut positions = Vec::with_capacity(frames);
    for t in 0..frames {
        let p = t as f64 / (frames - 1) as f64;
        let x = sign_x - (start_dist + (end_dist - start_dist) * p);
        let y = match kind {
            TrajectoryKind::Straight => y0,
            // departs then returns within the lane
            TrajectoryKind::LaneChange => y0 - bump * (std::f64::consts::PI * p).sin().powi(2),
            // gentle arc converging onto the lane
            TrajectoryKind::Curved => y0 + bump * (1.0 - p).powi(2),
        };
        positions.push([x, y, 0.0]);
    }
    let mut poses = Vec::with_capacity(frames);
    for t in 0..frames {
        let (from, to) = if t + 1 < frames {
            (positions[t], positions[t + 1])
        } else {
            (positions[t - 1], positions[t])
        };
        let heading = (to[1] - from[1]).atan2(to[0] - from[0]);
        poses.push(VehiclePose {
            t,
            position: positions[t],
            heading,
        });
    }
    let traj = Trajectory { kind, poses };
    // invariant: the vehicle approaches the sign monotonically
    let mut prev = f64::INFINITY;
    for pose in &traj.poses {
        let d = camera::norm(camera::sub(config.sign_center, pose.position));
        if d > prev + 1e-9 {
            return Err(ElaError::Numeric(
                "trajectory distance to sign not monotone".into(),
            ));
        }
        prev = d;
    }
    Ok(traj)
}

/// Distance from a pose to the sign center.
pub fn sign_distance(config: &WorldConfig, pose: &VehiclePose) -> f64 {
    camera::norm(camera::sub(config.sign_center, pose.position))
}

/// Project the vehicle's 3D box into the attacker sensor and take the tight
/// pixel bounding box over visible corners.
pub fn project_vehicle_bbox(config: &WorldConfig, pose: &VehiclePose) -> Result<AttackerObservation> {
    let cam = config.attacker_camera()?;
    let (hc, hs) = (pose.heading.cos(), pose.heading.sin());
    let fwd = [hc, hs, 0.0];
    let left = [-hs, hc, 0.0];
    let dims = &config.vehicle;
    let mut corners = Vec::with_capacity(8);
    for &sx in &[-0.5, 0.5] {
        for &sy in &[-0.5, 0.5] {
            for &sz in &[0.0, 1.0] {
                let p = camera::add(
                    camera::add(pose.position, camera::scale(fwd, sx * dims.length)),
                    camera::add(camera::scale(left, sy * dims.width), [0.0, 0.0, sz * dims.height]),
                );
                corners.push(p);
            }
        }
    }
    let mut x_min = f64::INFINITY;
    let mut y_min = f64::INFINITY;
    let mut x_max = f64::NEG_INFINITY;
    let mut y_max = f64::NEG_INFINITY;
    let mut visible = 0;
    for &corner in &corners {
        if let Some((u, v)) = cam.project(corner) {
            visible += 1;
            x_min = x_min.min(u);
            y_min = y_min.min(v);
            x_max = x_max.max(u);
            y_max = y_max.max(v);
        }
    }
    if visible == 0 {
        return Err(ElaError::Visibility("vehicle fully behind attacker camera".into()));
    }
    let w = config.attacker_intrinsics.width as f64;
    let h = config.attacker_intrinsics.height as f64;
    let cx_min = x_min.clamp(0.0, w - 1.0);
    let cy_min = y_min.clamp(0.0, h - 1.0);
    let cx_max = x_max.clamp(0.0, w - 1.0);
    let cy_max = y_max.clamp(0.0, h - 1.0);
    let clamped = cx_min != x_min || cy_min != y_min || cx_max != x_max || cy_max != y_max;
    if cx_max <= cx_min || cy_max <= cy_min {
        return Err(ElaError::Visibility("vehicle outside attacker frame".into()));
    }
    Ok(AttackerObservation {
        x_min: cx_min,
        y_min: cy_min,
        x_max: cx_max,
        y_max: cy_max,
        clamped,
    })
}

/// Boundary samples used for the projected-ellipse fit.
pub const SIGN_BOUNDARY_SAMPLES: usize = 64;

/// Project the sign disk's boundary into the victim camera and fit an
/// ellipse.
pub fn project_sign_geometry(config: &WorldConfig, pose: &VehiclePose) -> Result<SignGeometry> {
    project_sign_geometry_with(config, pose, SIGN_BOUNDARY_SAMPLES)
}

pub fn project_sign_geometry_with(
    config: &WorldConfig,
    pose: &VehiclePose,
    samples: usize,
) -> Result<SignGeometry> {
    let cam = config.victim_camera(pose)?;
    // viewing-angle guard: ray to sign vs sign normal
    let to_sign = camera::normalize(camera::sub(config.sign_center, cam.position));
    let cos_view = -camera::dot(to_sign, config.sign_normal);
    if cos_view < (85.0_f64).to_radians().cos() {
        return Err(ElaError::Degenerate(format!(
            "grazing view of sign (cos angle {cos_view:.4})"
        )));
    }
    // orthonormal basis in the sign plane
    let n = config.sign_normal;
    let helper = if n[2].abs() < 0.9 { [0.0, 0.0, 1.0] } else { [1.0, 0.0, 0.0] };
    let e1 = camera::normalize(camera::cross(n, helper));
    let e2 = camera::cross(n, e1);
    let mut pts = Vec::with_capacity(samples);
    for k in 0..samples {
        let th = 2.0 * std::f64::consts::PI * k as f64 / samples as f64;
        let p = camera::add(
            config.sign_center,
            camera::add(
                camera::scale(e1, config.sign_radius * th.cos()),
                camera::scale(e2, config.sign_radius * th.sin()),
            ),
        );
        match cam.project(p) {
            Some(uv) => pts.push([uv.0, uv.1]),
            None => {
                return Err(ElaError::Visibility("sign boundary behind victim camera".into()))
            }
        }
    }
    let e = fit_ellipse(&pts)?;
    Ok(SignGeometry {
        x_center: e.cx,
        y_center: e.cy,
        a: e.a,
        b: e.b,
        delta: e.delta,
        shape: config.sign_class.shape(),
    })
}
