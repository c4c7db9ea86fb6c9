//! Perspective Transformation Network: attacker-view vehicle bbox (4 values)
//! to victim-view sign ellipse (5 values), trained either through the soft
//! mask MSE or directly on normalized parameters.

use super::{iou, render_shape_mask, sigmoid, soft_mask, SoftMask};
use crate::error::{ElaError, Result};
use crate::nn::{read_checkpoint, write_checkpoint, Activation, DenseNet, NetGrads, OptimState};
use crate::rng::SeedNode;
use crate::scene::{AttackerObservation, FrameRecord, SignGeometry, SignShape};
use rand::seq::SliceRandom;
use std::path::Path;

/// Output decoder ranges; sigmoid outputs map into these.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PtnDecoder {
    pub img_w: f64,
    pub img_h: f64,
    pub b_min: f64,
    pub b_max: f64,
    /// `a = b + sigmoid * a_residual_max` keeps `a >= b` for any output.
    pub a_residual_max: f64,
}

#[derive(Debug, Clone)]
pub struct PtnModel {
    pub net: DenseNet,
    pub attacker_w: f64,
    pub attacker_h: f64,
    pub decoder: PtnDecoder,
    pub shape: SignShape,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PtnTrainMode {
    MaskMse,
    ParamMse,
}

#[derive(Debug, Clone)]
pub struct PtnConfig {
    pub hidden: Vec<usize>,
    pub tau: f64,
    /// Mask-mode temperature at epoch 0; annealed geometrically down to
    /// `tau`. A wide early band lets the centre gradient reach a distant
    /// target instead of just shrinking the mask.
    pub tau_start: f64,
    pub lr: f64,
    pub epochs: usize,
    pub batch: usize,
    /// Training-time mask grid (downsampled from the victim image).
    pub grid: usize,
    /// Fraction of mask-mode epochs spent warming up on the parameter loss.
    pub warm_frac: f64,
    /// Learning-rate multiplier for the mask-loss phase; the mask gradient
    /// is sparse and noisy, so refinement runs slower than the warm-up.
    pub mask_lr_scale: f64,
    /// Weight of the parameter-space anchor mixed into the mask phase.
    pub mask_anchor: f64,
    pub mode: PtnTrainMode,
}

impl Default for PtnConfig {
    fn default() -> Self {
        Self {
            hidden: vec![64, 64],
            tau: 0.05,
            tau_start: 0.6,
            lr: 3e-3,
            epochs: 1200,
            batch: 32,
            grid: 64,
            warm_frac: 0.3,
            mask_lr_scale: 1.0,
            mask_anchor: 0.05,
            mode: PtnTrainMode::MaskMse,
        }
    }
}

#[derive(Debug, Clone)]
pub struct PtnTrainResult {
    pub model: PtnModel,
    pub loss_curve: Vec<f64>,
}

impl PtnModel {
    pub fn new(
        attacker_w: f64,
        attacker_h: f64,
        victim_w: f64,
        victim_h: f64,
        shape: SignShape,
        hidden: &[usize],
        seed: SeedNode,
    ) -> Result<Self> {
        let mut sizes = vec![4];
        sizes.extend_from_slice(hidden);
        sizes.push(5);
        let mut acts = vec![Activation::Relu; hidden.len()];
        acts.push(Activation::Identity);
        let net = DenseNet::new(&sizes, &acts, seed)?;
        Ok(Self {
            net,
            attacker_w,
            attacker_h,
            decoder: PtnDecoder {
                img_w: victim_w,
                img_h: victim_h,
                b_min: 1.0,
                b_max: victim_w / 6.0,
                a_residual_max: victim_w / 10.0,
            },
            shape,
        })
    }

    pub fn normalize_input(&self, obs: &AttackerObservation) -> [f64; 4] {
        [
            obs.x_min / self.attacker_w,
            obs.y_min / self.attacker_h,
            obs.x_max / self.attacker_w,
            obs.y_max / self.attacker_h,
        ]
    }

    /// Decode raw head outputs into a valid geometry.
    pub fn decode(&self, raw: &[f64]) -> SignGeometry {
        let d = &self.decoder;
        let b = d.b_min + sigmoid(raw[2]) * (d.b_max - d.b_min);
        SignGeometry {
            x_center: sigmoid(raw[0]) * d.img_w,
            y_center: sigmoid(raw[1]) * d.img_h,
            a: b + sigmoid(raw[3]) * d.a_residual_max,
            b,
            delta: (sigmoid(raw[4]) * std::f64::consts::PI).min(std::f64::consts::PI - 1e-9),
            shape: self.shape,
        }
    }

    /// d(decoded param)/d(raw output), in decode order
    /// (x_c, y_c, b, a_residual, delta).
    fn decode_jacobian_diag(&self, raw: &[f64]) -> [f64; 5] {
        let d = &self.decoder;
        let sp = |r: f64| {
            let s = sigmoid(r);
            s * (1.0 - s)
        };
        [
            sp(raw[0]) * d.img_w,
            sp(raw[1]) * d.img_h,
            sp(raw[2]) * (d.b_max - d.b_min),
            sp(raw[3]) * d.a_residual_max,
            sp(raw[4]) * std::f64::consts::PI,
        ]
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let d = &self.decoder;
        let header = vec![
            ("kind".to_string(), "ptn".to_string()),
            (
                "attacker_dims".to_string(),
                format!("{} {}", self.attacker_w, self.attacker_h),
            ),
            (
                "decoder".to_string(),
                format!(
                    "{} {} {} {} {}",
                    d.img_w, d.img_h, d.b_min, d.b_max, d.a_residual_max
                ),
            ),
            (
                "shape".to_string(),
                match self.shape {
                    SignShape::Circle => "circle".to_string(),
                    SignShape::Octagon => "octagon".to_string(),
                },
            ),
        ];
        write_checkpoint(path, &self.net, &header)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (net, header) = read_checkpoint(path)?;
        let get = |key: &str| -> Result<String> {
            header
                .iter()
                .find(|(k, _)| k == key)
                .map(|(_, v)| v.clone())
                .ok_or_else(|| ElaError::Format {
                    path: path.display().to_string(),
                    reason: format!("missing header key {key}"),
                })
        };
        let nums = |s: &str| -> Vec<f64> { s.split_whitespace().filter_map(|x| x.parse().ok()).collect() };
        let ad = nums(&get("attacker_dims")?);
        let dd = nums(&get("decoder")?);
        if ad.len() != 2 || dd.len() != 5 {
            return Err(ElaError::Format {
                path: path.display().to_string(),
                reason: "bad ptn header".into(),
            });
        }
        let shape = match get("shape")?.as_str() {
            "octagon" => SignShape::Octagon,
            _ => SignShape::Circle,
        };
        Ok(Self {
            net,
            attacker_w: ad[0],
            attacker_h: ad[1],
            decoder: PtnDecoder {
                img_w: dd[0],
                img_h: dd[1],
                b_min: dd[2],
                b_max: dd[3],
                a_residual_max: dd[4],
            },
            shape,
        })
    }
}

/// Map an attacker observation to victim-view sign geometry.
pub fn ptn_forward(model: &PtnModel, obs: &AttackerObservation) -> Result<SignGeometry> {
    let input = model.normalize_input(obs);
    let raw = model.net.forward(&input)?;
    Ok(model.decode(&raw))
}

/// Rescale a geometry onto the training grid.
fn scale_geom(g: &SignGeometry, s: f64) -> SignGeometry {
    SignGeometry {
        x_center: g.x_center * s,
        y_center: g.y_center * s,
        a: g.a * s,
        b: g.b * s,
        delta: g.delta,
        shape: g.shape,
    }
}

/// Pixel window the per-sample loss is evaluated over. Restricting the sum
/// to a region around the target keeps small, distant signs from being
/// drowned out by the loss mass of near ones.
#[derive(Debug, Clone, Copy)]
struct LossWindow {
    i0: usize,
    i1: usize,
    j0: usize,
    j1: usize,
}

impl LossWindow {
    fn around(geom: &SignGeometry, grid: usize) -> Self {
        let r = (3.0 * geom.a).max(6.0);
        let clampi = |v: f64| (v.round().max(0.0) as usize).min(grid);
        Self {
            i0: clampi(geom.x_center - r),
            i1: clampi(geom.x_center + r + 1.0),
            j0: clampi(geom.y_center - r),
            j1: clampi(geom.y_center + r + 1.0),
        }
    }

    fn full(grid: usize) -> Self {
        Self { i0: 0, i1: grid, j0: 0, j1: grid }
    }

    fn len(&self) -> usize {
        (self.i1 - self.i0) * (self.j1 - self.j0)
    }
}

/// Mask-MSE loss and its gradient with respect to the five decoded
/// parameters (at grid scale), against a precomputed ground-truth grid mask.
fn mask_mse_grad(
    pred: &SignGeometry,
    gt: &[f64],
    grid: usize,
    tau: f64,
    win: LossWindow,
) -> (f64, [f64; 5]) {
    let nk = win.len() as f64;
    let (sn, cs) = pred.delta.sin_cos();
    let (a, b) = (pred.a, pred.b);
    let apothem = (std::f64::consts::PI / 8.0).cos();
    let mut loss = 0.0;
    let mut grad = [0.0; 5]; // d/d(x_c, y_c, a, b, delta)
    for j in win.j0..win.j1 {
        for i in win.i0..win.i1 {
            let dx = i as f64 - pred.x_center;
            let dy = j as f64 - pred.y_center;
            // canonical coordinates: unit circle / unit-circumradius octagon
            let u = (dx * cs - dy * sn) / a;
            let v = (dx * sn + dy * cs) / b;
            // Q = 1 on the shape boundary; (dq_du, dq_dv) in canonical coords
            let (q, dq_du, dq_dv) = match pred.shape {
                SignShape::Circle => (u * u + v * v, 2.0 * u, 2.0 * v),
                SignShape::Octagon => {
                    // furthest-violated half-plane of the eight
                    let mut best = f64::NEG_INFINITY;
                    let mut bn = (1.0, 0.0);
                    for k in 0..8 {
                        let th = k as f64 * std::f64::consts::FRAC_PI_4;
                        let (nsn, ncs) = th.sin_cos();
                        let p = u * ncs + v * nsn;
                        if p > best {
                            best = p;
                            bn = (ncs, nsn);
                        }
                    }
                    let s = best / apothem;
                    (s * s, 2.0 * s * bn.0 / apothem, 2.0 * s * bn.1 / apothem)
                }
            };
            let m = sigmoid((1.0 - q) / tau);
            let diff = m - gt[j * grid + i];
            loss += diff * diff;
            let dl_dq = 2.0 * diff / nk * (-m * (1.0 - m) / tau);
            grad[0] += dl_dq * (dq_du * -cs / a + dq_dv * -sn / b);
            grad[1] += dl_dq * (dq_du * sn / a + dq_dv * -cs / b);
            grad[2] += dl_dq * dq_du * (-u / a);
            grad[3] += dl_dq * dq_dv * (-v / b);
            grad[4] += dl_dq * (dq_du * (-v * b / a) + dq_dv * (u * a / b));
        }
    }
    (loss / nk, grad)
}

/// Evaluate the full-grid mask-MSE loss for an arbitrary geometry against a
/// GT mask grid (used by tests probing the perfect-prediction floor).
pub fn mask_mse_loss(pred: &SignGeometry, gt_mask: &[f64], grid: usize, tau: f64) -> f64 {
    mask_mse_grad(pred, gt_mask, grid, tau, LossWindow::full(grid)).0
}

/// Hard GT mask rasterized onto the training grid as 0/1 reals.
pub fn gt_grid_mask(geom: &SignGeometry, grid: usize, scale: f64) -> Result<Vec<f64>> {
    let g = scale_geom(geom, scale);
    let m = render_shape_mask(&g, grid, grid)?;
    let mut out = vec![0.0; grid * grid];
    for j in 0..grid {
        for i in 0..grid {
            if m.get(i, j) {
                out[j * grid + i] = 1.0;
            }
        }
    }
    Ok(out)
}

/// Train a PTN on one class's frames.
pub fn ptn_train(
    frames: &[&FrameRecord],
    attacker_w: f64,
    attacker_h: f64,
    victim_w: f64,
    victim_h: f64,
    shape: SignShape,
    config: &PtnConfig,
    seed: SeedNode,
) -> Result<PtnTrainResult> {
    if frames.is_empty() {
        return Err(ElaError::Argument("empty training set".into()));
    }
    let mut model = PtnModel::new(
        attacker_w,
        attacker_h,
        victim_w,
        victim_h,
        shape,
        &config.hidden,
        seed.child("init"),
    )?;
    if config.mode == PtnTrainMode::MaskMse {
        // start from one broad centered mask: if the first prediction misses
        // the target entirely, the only surviving gradient shrinks the mask
        // to nothing
        model.net.zero_last_layer();
        let logit = |p: f64| (p / (1.0 - p)).ln();
        model.net.set_output_bias(&[0.0, 0.0, logit(0.93), 0.0, 0.0])?;
    }
    let grid_scale = config.grid as f64 / victim_w;
    let gt_masks: Vec<Vec<f64>> = match config.mode {
        PtnTrainMode::MaskMse => frames
            .iter()
            .map(|f| gt_grid_mask(&f.geometry, config.grid, grid_scale))
            .collect::<Result<_>>()?,
        PtnTrainMode::ParamMse => Vec::new(),
    };
    let inputs: Vec<[f64; 4]> = frames.iter().map(|f| model.normalize_input(&f.observation)).collect();

    let mut opt = OptimState::new(model.net.param_count(), config.lr);
    let mut rng = seed.child("shuffle").rng();
    let mut order: Vec<usize> = (0..frames.len()).collect();
    let mut loss_curve = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        // coarse step decay: most of the run at full rate, then settle
        let frac = epoch as f64 / config.epochs as f64;
        let anneal = (frac / 0.7).min(1.0);
        let tau = config.tau_start * (config.tau / config.tau_start).powf(anneal);
        // mask mode warms up on the parameter loss: pure mask MSE started
        // cold collapses to the empty mask before the centre ever aligns
        let mode = if config.mode == PtnTrainMode::MaskMse && frac < config.warm_frac {
            PtnTrainMode::ParamMse
        } else {
            config.mode
        };
        opt.lr = config.lr * if frac < 0.6 { 1.0 } else if frac < 0.85 { 0.3 } else { 0.1 };
        if config.mode == PtnTrainMode::MaskMse && mode == PtnTrainMode::MaskMse {
            opt.lr *= config.mask_lr_scale;
        }
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for chunk in order.chunks(config.batch) {
            let mut batch_grads = NetGrads::zeros_like(&model.net);
            let mut batch_loss = 0.0;
            for &idx in chunk {
                let (raw, cache) = model.net.forward_cached(&inputs[idx])?;
                let pred = model.decode(&raw);
                let jac = model.decode_jacobian_diag(&raw);
                // parameter-space loss relative to the target's own axes:
                // overlap quality depends on error against the sign size,
                // not the image size, and rotation only matters when the
                // ellipse is actually eccentric
                let param_terms = {
                    let gt = &frames[idx].geometry;
                    let ecc = 1.0 - gt.b / gt.a;
                    let diffs = [
                        (pred.x_center - gt.x_center) / gt.a,
                        (pred.y_center - gt.y_center) / gt.a,
                        (pred.a - gt.a) / gt.a,
                        (pred.b - gt.b) / gt.b,
                        angle_diff(pred.delta, gt.delta) * ecc,
                    ];
                    let loss = diffs.iter().map(|x| x * x).sum::<f64>() / 5.0;
                    let scale = 2.0 / 5.0;
                    // d diffs / d (x_c, y_c, a, b, delta), then to raw:
                    // raw[2] moves both b and a, raw[3] moves a only
                    let g_a = scale * diffs[2] / gt.a;
                    let g_b = scale * diffs[3] / gt.b;
                    let grad = [
                        scale * diffs[0] / gt.a * jac[0],
                        scale * diffs[1] / gt.a * jac[1],
                        (g_a + g_b) * jac[2],
                        g_a * jac[3],
                        scale * diffs[4] * ecc * jac[4],
                    ];
                    (loss, grad)
                };
                let (loss, mut raw_grad) = match mode {
                    PtnTrainMode::MaskMse => {
                        let pred_scaled = scale_geom(&pred, grid_scale);
                        let win = LossWindow::around(&scale_geom(&frames[idx].geometry, grid_scale), config.grid);
                        let (loss, g) = mask_mse_grad(&pred_scaled, &gt_masks[idx], config.grid, tau, win);
                        // chain grid-scale params back to raw head outputs;
                        // decode order is (x_c, y_c, b, a_res, delta)
                        let mut raw_grad = [
                            g[0] * grid_scale * jac[0],
                            g[1] * grid_scale * jac[1],
                            (g[2] + g[3]) * grid_scale * jac[2],
                            g[2] * grid_scale * jac[3],
                            g[4] * jac[4],
                        ];
                        // a faint parameter-space anchor keeps frames whose
                        // masks drift fully disjoint from going gradient-dead
                        let anchor = config.mask_anchor;
                        for (rg, pg) in raw_grad.iter_mut().zip(param_terms.1.iter()) {
                            *rg += anchor * pg;
                        }
                        (loss + anchor * param_terms.0, raw_grad)
                    }
                    PtnTrainMode::ParamMse => param_terms,
                };
                if !loss.is_finite() {
                    return Err(ElaError::Numeric("ptn training loss diverged".into()));
                }
                for g in raw_grad.iter_mut() {
                    *g /= chunk.len() as f64;
                }
                let (grads, _) = model.net.backward(&cache, &raw_grad)?;
                batch_grads.add(&grads);
                batch_loss += loss;
            }
            let mut flat = model.net.params_flat();
            opt.apply(&mut flat, &batch_grads.flat())?;
            model.net.set_params_flat(&flat)?;
            epoch_loss += batch_loss;
        }
        loss_curve.push(epoch_loss / frames.len() as f64);
    }
    if let (Some(first), Some(last)) = (loss_curve.first(), loss_curve.last()) {
        if last >= first {
            return Err(ElaError::Training(format!(
                "ptn loss did not decrease ({first} -> {last})"
            )));
        }
    }
    Ok(PtnTrainResult { model, loss_curve })
}

fn angle_diff(a: f64, b: f64) -> f64 {
    // delta lives on a half-circle; compare modulo pi
    let mut d = a - b;
    while d > std::f64::consts::FRAC_PI_2 {
        d -= std::f64::consts::PI;
    }
    while d < -std::f64::consts::FRAC_PI_2 {
        d += std::f64::consts::PI;
    }
    d
}

/// Mean IOU between predicted and ground-truth masks over frames, with the
/// per-frame breakdown.
pub fn evaluate_miou(model: &PtnModel, frames: &[&FrameRecord]) -> Result<(f64, Vec<f64>)> {
    if frames.is_empty() {
        return Err(ElaError::Argument("no evaluation frames".into()));
    }
    let mut per_frame = Vec::with_capacity(frames.len());
    for f in frames {
        let pred = ptn_forward(model, &f.observation)?;
        let mask = render_shape_mask(&pred, f.mask.rows, f.mask.cols)?;
        per_frame.push(iou(&mask, &f.mask)?);
    }
    let mean = per_frame.iter().sum::<f64>() / per_frame.len() as f64;
    Ok((mean, per_frame))
}

/// Convenience for tests: soft mask of a model prediction at full resolution.
pub fn predict_soft_mask(model: &PtnModel, obs: &AttackerObservation, tau: f64) -> Result<SoftMask> {
    let g = ptn_forward(model, obs)?;
    soft_mask(&g, model.decoder.img_h as usize, model.decoder.img_w as usize, tau)
}
