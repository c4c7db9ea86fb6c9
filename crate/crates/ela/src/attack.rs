//! Inference-time orchestration: run the trained policy over held-out routes,
//! plus the random, random-search, and static-beam baselines, and a
//! brute-force grid oracle for reachability checks.
//!
//! Victims are held behind [`VictimPool`], which counts every query; nothing
//! inside a decision loop touches it, and tests assert the count.

use crate::agent::{decode_action, AgentState, PolicyNet};
use crate::classify::{crop_sign, ensemble_eval, victim_eval, Classifier, EnsembleScore, SuccessRule};
use crate::error::{ElaError, Result};
use crate::laser::{
    composite, LaserParams, LAMBDA_MAX, LAMBDA_MIN, OMEGA_MAX, OMEGA_MIN,
};
use crate::percept::{ptn_forward, render_shape_mask, Mask, PtnModel};
use crate::rng::SeedNode;
use crate::scene::{FrameRecord, SignGeometry};
use rand::Rng;
use rayon::prelude::*;
use std::f64::consts::PI;
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::time::Instant;

/// Discretized laser parameter grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GridSpec {
    pub n_phi: usize,
    pub n_omega: usize,
    pub n_lambda: usize,
}

/// Coarse grid used by the static-beam baseline.
pub const GRID_COARSE: GridSpec = GridSpec {
    n_phi: 36,
    n_omega: 12,
    n_lambda: 31,
};
/// Fine (2x resolution) grid used by the reachability oracle.
pub const GRID_FINE: GridSpec = GridSpec {
    n_phi: 72,
    n_omega: 24,
    n_lambda: 61,
};

impl GridSpec {
    pub fn len(&self) -> usize {
        self.n_phi * self.n_omega * self.n_lambda
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// The `idx`-th triple; phi covers [0, pi) exclusive, omega and lambda
    /// cover their closed ranges inclusively.
    pub fn params(&self, idx: usize) -> LaserParams {
        let k = idx % self.n_lambda;
        let j = (idx / self.n_lambda) % self.n_omega;
        let i = idx / (self.n_lambda * self.n_omega);
        LaserParams {
            phi: i as f64 * PI / self.n_phi as f64,
            omega: OMEGA_MIN
                + j as f64 * (OMEGA_MAX - OMEGA_MIN) / (self.n_omega - 1) as f64,
            lambda: LAMBDA_MIN
                + k as f64 * (LAMBDA_MAX - LAMBDA_MIN) / (self.n_lambda - 1) as f64,
        }
    }
}

#[derive(Debug, Clone)]
pub struct AttackConfig {
    pub n_max: usize,
    pub beta: f64,
    pub rule: SuccessRule,
    /// Random-search query budget per frame.
    pub search_budget: usize,
    /// Fraction of train frames the static baseline fits on.
    pub eot_subsample: f64,
}

impl Default for AttackConfig {
    fn default() -> Self {
        Self {
            n_max: 10,
            beta: crate::laser::BETA_DEFAULT,
            rule: SuccessRule::All,
            search_budget: 200,
            eot_subsample: 0.1,
        }
    }
}

/// Victim classifiers behind a query counter. The attack loop never touches
/// this; only post-hoc scoring does.
#[derive(Debug)]
pub struct VictimPool {
    pub models: Vec<Classifier>,
    queries: AtomicU64,
}

impl VictimPool {
    pub fn new(models: Vec<Classifier>) -> Self {
        Self {
            models,
            queries: AtomicU64::new(0),
        }
    }

    /// Evaluate every victim on the (attacked) frame, cropping with
    /// ground-truth geometry.
    pub fn eval(
        &self,
        frame: &crate::img::Image,
        geom: &SignGeometry,
        true_label: usize,
    ) -> Result<Vec<(usize, bool)>> {
        self.queries
            .fetch_add(self.models.len() as u64, Ordering::Relaxed);
        self.models
            .iter()
            .map(|m| victim_eval(m, frame, geom, true_label))
            .collect()
    }

    pub fn query_count(&self) -> u64 {
        self.queries.load(Ordering::Relaxed)
    }
}

/// Per-frame attack outcome.
#[derive(Debug, Clone)]
pub struct FrameTrace {
    pub frame_id: usize,
    pub geometry: SignGeometry,
    pub steps: usize,
    pub params: LaserParams,
    pub surrogate_success: bool,
    /// (top-1 label, misclassified) per victim.
    pub victims: Vec<(usize, bool)>,
    /// Decision-loop wall clock, excluding disk I/O and victim scoring.
    pub ms: f64,
    /// Set when the perceived geometry fell outside the frame.
    pub skipped: bool,
}

/// Route-level outcome: frames plus per-victim ASR.
#[derive(Debug, Clone)]
pub struct AttackTrace {
    pub frames: Vec<FrameTrace>,
    /// ASR against each victim (mean misclassified flag over frames).
    pub asr: Vec<f64>,
    /// ASR against the surrogate ensemble.
    pub surrogate_asr: f64,
    pub mean_latency_ms: f64,
}

fn summarize(frames: Vec<FrameTrace>, n_victims: usize) -> AttackTrace {
    let n = frames.len().max(1) as f64;
    let mut asr = vec![0.0; n_victims];
    let mut surr = 0.0;
    let mut ms = 0.0;
    for f in &frames {
        for (v, &(_, miss)) in f.victims.iter().enumerate() {
            asr[v] += f64::from(u8::from(miss));
        }
        surr += f64::from(u8::from(f.surrogate_success));
        ms += f.ms;
    }
    AttackTrace {
        asr: asr.into_iter().map(|x| x / n).collect(),
        surrogate_asr: surr / n,
        mean_latency_ms: ms / n,
        frames,
    }
}

/// Uniform draw over the action space.
pub fn random_params(rng: &mut rand_chacha::ChaCha8Rng) -> LaserParams {
    LaserParams {
        phi: rng.gen_range(0.0..PI),
        omega: rng.gen_range(OMEGA_MIN..=OMEGA_MAX),
        lambda: rng.gen_range(LAMBDA_MIN..=LAMBDA_MAX),
    }
}

/// Transposed first-layer weights of each surrogate, shared across frame
/// evaluators so the 6 MB copies happen once per route/stage rather than
/// per frame.
pub struct SurrogateCache {
    /// Per surrogate: column-major first-layer weights `[in][out]`.
    w1t: Vec<Vec<f64>>,
}

impl SurrogateCache {
    pub fn new(surrogates: &[Classifier]) -> Self {
        let w1t = surrogates
            .iter()
            .map(|s| {
                let l = &s.net.layers[0];
                let mut t = vec![0.0; l.weights.len()];
                for o in 0..l.out_dim {
                    for c in 0..l.in_dim {
                        t[c * l.out_dim + o] = l.weights[o * l.in_dim + c];
                    }
                }
                t
            })
            .collect();
        Self { w1t }
    }
}

/// One bilinear tap of the crop resampler: the four clamped source corners
/// and interpolation weights, mirroring `Image::sample_bilinear` exactly.
struct CropTap {
    x0: usize,
    y0: usize,
    x1: usize,
    y1: usize,
    fx: f64,
    fy: f64,
}

/// Scores laser parameters against the surrogate ensemble for one fixed
/// frame without recompositing the whole victim image. The clean crop and
/// the clean first-layer pre-activations are cached; each candidate beam
/// only touches the crop pixels whose (quantized) value actually changes,
/// and pushes that sparse delta through the cached transposed input layer.
///
/// The crop pixel values are bit-identical to `composite` + `crop_sign`;
/// logits can differ from a full forward pass in the last float bit because
/// the input-layer sum is accumulated in a different order.
pub struct FrameEvaluator<'a> {
    frame: &'a FrameRecord,
    geom: SignGeometry,
    mask: &'a Mask,
    surrogates: &'a [Classifier],
    cache: &'a SurrogateCache,
    rule: SuccessRule,
    beta: f64,
    taps: Vec<CropTap>,
    clean_crop: Vec<u8>,
    /// Per surrogate: clean first-layer pre-activation.
    z1: Vec<Vec<f64>>,
    clean_score: EnsembleScore,
}

impl<'a> FrameEvaluator<'a> {
    pub fn new(
        frame: &'a FrameRecord,
        geom: &SignGeometry,
        mask: &'a Mask,
        surrogates: &'a [Classifier],
        cache: &'a SurrogateCache,
        cfg: &AttackConfig,
    ) -> Result<Self> {
        if cache.w1t.len() != surrogates.len() {
            return Err(ElaError::Argument(
                "surrogate cache does not match the ensemble".into(),
            ));
        }
        let crop = crop_sign(&frame.image, geom)?;
        let input = crate::classify::crop_to_input(&crop);
        let clean_score = ensemble_eval(surrogates, &crop, frame.label, cfg.rule)?;
        let z1 = surrogates
            .iter()
            .map(|s| Ok(s.net.forward_cached(&input)?.1.pre[0].clone()))
            .collect::<Result<Vec<_>>>()?;
        let (bx0, by0, bw, bh) = crate::classify::crop_box(geom);
        let n = crate::classify::CROP_SIZE;
        let (w, h) = (frame.image.width, frame.image.height);
        let mut taps = Vec::with_capacity(n * n);
        for j in 0..n {
            let sy = by0 + (j as f64 + 0.5) / n as f64 * bh - 0.5;
            for i in 0..n {
                let sx = bx0 + (i as f64 + 0.5) / n as f64 * bw - 0.5;
                let xc = sx.clamp(0.0, (w - 1) as f64);
                let yc = sy.clamp(0.0, (h - 1) as f64);
                let x0 = xc.floor() as usize;
                let y0 = yc.floor() as usize;
                taps.push(CropTap {
                    x0,
                    y0,
                    x1: (x0 + 1).min(w - 1),
                    y1: (y0 + 1).min(h - 1),
                    fx: xc - x0 as f64,
                    fy: yc - y0 as f64,
                });
            }
        }
        Ok(Self {
            frame,
            geom: *geom,
            mask,
            surrogates,
            cache,
            rule: cfg.rule,
            beta: cfg.beta,
            taps,
            clean_crop: crop.data,
            z1,
            clean_score,
        })
    }

    pub fn geom(&self) -> &SignGeometry {
        &self.geom
    }

    /// One source pixel under the candidate beam: returns the attacked RGB
    /// exactly as `composite` + `Image::get` would produce it.
    #[inline]
    fn source_rgb(
        &self,
        x: usize,
        y: usize,
        sn: f64,
        cs: f64,
        half: f64,
        rgb: &[f64; 3],
    ) -> [f64; 3] {
        let px = self.frame.image.get(x, y);
        if !self.mask.get(x, y) {
            return px;
        }
        let dx = x as f64 - self.geom.x_center;
        let dy = y as f64 - self.geom.y_center;
        let cov = crate::laser::beam_coverage((dx * sn - dy * cs).abs(), half);
        if cov <= 0.0 {
            return px;
        }
        let mut out = [0.0; 3];
        for c in 0..3 {
            let v = px[c] + self.beta * cov * rgb[c];
            out[c] = f64::from((v.clamp(0.0, 1.0) * 255.0).round() as u8) / 255.0;
        }
        out
    }

    #[inline]
    fn tap_touched(&self, tap: &CropTap, sn: f64, cs: f64, half: f64) -> bool {
        for (x, y) in [
            (tap.x0, tap.y0),
            (tap.x1, tap.y0),
            (tap.x0, tap.y1),
            (tap.x1, tap.y1),
        ] {
            if self.mask.get(x, y) {
                let dx = x as f64 - self.geom.x_center;
                let dy = y as f64 - self.geom.y_center;
                if crate::laser::beam_coverage((dx * sn - dy * cs).abs(), half) > 0.0 {
                    return true;
                }
            }
        }
        false
    }

    /// Surrogate score for one candidate triple.
    pub fn eval(&self, params: &LaserParams) -> Result<EnsembleScore> {
        let rgb = crate::laser::wavelength_to_rgb(params.lambda)?;
        let (sn, cs) = params.phi.sin_cos();
        let half = params.omega / 2.0;
        let mut deltas: Vec<(usize, f64)> = Vec::new();
        for (p, tap) in self.taps.iter().enumerate() {
            if !self.tap_touched(tap, sn, cs, half) {
                continue;
            }
            let p00 = self.source_rgb(tap.x0, tap.y0, sn, cs, half, &rgb);
            let p10 = self.source_rgb(tap.x1, tap.y0, sn, cs, half, &rgb);
            let p01 = self.source_rgb(tap.x0, tap.y1, sn, cs, half, &rgb);
            let p11 = self.source_rgb(tap.x1, tap.y1, sn, cs, half, &rgb);
            for c in 0..3 {
                let top = p00[c] * (1.0 - tap.fx) + p10[c] * tap.fx;
                let bot = p01[c] * (1.0 - tap.fx) + p11[c] * tap.fx;
                let val = top * (1.0 - tap.fy) + bot * tap.fy;
                let new = (val.clamp(0.0, 1.0) * 255.0).round() as u8;
                let old = self.clean_crop[p * 3 + c];
                if new != old {
                    deltas.push((p * 3 + c, f64::from(new) / 255.0 - f64::from(old) / 255.0));
                }
            }
        }
        if deltas.is_empty() {
            return Ok(self.clean_score.clone());
        }
        let mut confidences = Vec::with_capacity(self.surrogates.len());
        let mut top1 = Vec::with_capacity(self.surrogates.len());
        for (si, s) in self.surrogates.iter().enumerate() {
            let width = s.net.layers[0].out_dim;
            let mut z = self.z1[si].clone();
            let w1t = &self.cache.w1t[si];
            for &(c, d) in &deltas {
                let col = &w1t[c * width..(c + 1) * width];
                for (zo, wv) in z.iter_mut().zip(col.iter()) {
                    *zo += wv * d;
                }
            }
            let act0 = s.net.layers[0].activation;
            let mut x: Vec<f64> = z.iter().map(|&v| act0.apply(v)).collect();
            for layer in &s.net.layers[1..] {
                let mut y = layer.biases.clone();
                for (o, yo) in y.iter_mut().enumerate() {
                    let row = &layer.weights[o * layer.in_dim..(o + 1) * layer.in_dim];
                    let mut acc = 0.0;
                    for (wv, xi) in row.iter().zip(x.iter()) {
                        acc += wv * xi;
                    }
                    *yo += acc;
                }
                x = y.iter().map(|&v| layer.activation.apply(v)).collect();
            }
            let probs = crate::nn::softmax(&x);
            confidences.push(probs[self.frame.label]);
            top1.push(crate::classify::argmax(&probs));
        }
        let fooled = top1.iter().filter(|&&l| l != self.frame.label).count();
        let success = match self.rule {
            SuccessRule::All => fooled == self.surrogates.len(),
            SuccessRule::Any => fooled >= 1,
            SuccessRule::Majority => 2 * fooled > self.surrogates.len(),
        };
        Ok(EnsembleScore {
            confidences,
            top1,
            success,
        })
    }

    /// Mean true-class confidence under the ensemble.
    pub fn mean_confidence(score: &EnsembleScore) -> f64 {
        score.confidences.iter().sum::<f64>() / score.confidences.len() as f64
    }

    /// Materialize the attacked victim frame for the chosen parameters.
    pub fn attacked_image(&self, params: &LaserParams) -> Result<crate::img::Image> {
        composite(
            &self.frame.image,
            self.mask,
            (self.geom.x_center, self.geom.y_center),
            params,
            self.beta,
        )
    }
}

/// Composite + surrogate scoring for one candidate parameter set.
/// Returns (score, success) where score is the mean true-class confidence.
fn try_params(
    frame: &FrameRecord,
    geom: &SignGeometry,
    mask: &Mask,
    params: &LaserParams,
    surrogates: &[Classifier],
    cfg: &AttackConfig,
) -> Result<(f64, bool, crate::img::Image)> {
    let anchor = (geom.x_center, geom.y_center);
    let attacked = composite(&frame.image, mask, anchor, params, cfg.beta)?;
    let crop = crop_sign(&attacked, geom)?;
    let score = ensemble_eval(surrogates, &crop, frame.label, cfg.rule)?;
    let mean_conf =
        score.confidences.iter().sum::<f64>() / score.confidences.len() as f64;
    Ok((mean_conf, score.success, attacked))
}

/// Run the decision loop on one frame with the trained policy (mean mode:
/// inference is deterministic). Returns the adversarial frame and the trace
/// row; victims are scored exactly once, after the loop.
#[allow(clippy::too_many_arguments)]
pub fn attack_frame(
    frame: &FrameRecord,
    ptn: &PtnModel,
    policy: &PolicyNet,
    surrogates: &[Classifier],
    cache: &SurrogateCache,
    victims: &VictimPool,
    cfg: &AttackConfig,
    prev: LaserParams,
) -> Result<(crate::img::Image, FrameTrace)> {
    let start = Instant::now();
    let geom = ptn_forward(ptn, &frame.observation)?;
    let img_w = frame.image.width as f64;
    let img_h = frame.image.height as f64;
    // Out-of-frame perception: skip the frame, count it as a failure.
    if AgentState::encode(&geom, &prev, img_w, img_h).is_err() {
        let victims_clean = victims.eval(&frame.image, &frame.geometry, frame.label)?;
        return Ok((
            frame.image.clone(),
            FrameTrace {
                frame_id: frame.t,
                geometry: geom,
                steps: 0,
                params: prev,
                surrogate_success: false,
                victims: victims_clean,
                ms: start.elapsed().as_secs_f64() * 1e3,
                skipped: true,
            },
        ));
    }
    let mask = render_shape_mask(&geom, frame.image.height, frame.image.width)?;
    let evaluator = FrameEvaluator::new(frame, &geom, &mask, surrogates, cache, cfg)?;
    let mut params = prev;
    let mut steps = 0;
    let mut success = false;
    // If no try fools the whole ensemble, the beam stays on with the
    // best-scoring parameters seen, so track the minimum mean confidence.
    let mut applied = (f64::INFINITY, prev);
    for step in 1..=cfg.n_max {
        let state = AgentState::encode(&geom, &params, img_w, img_h)?;
        let mean = policy.mean(&state)?;
        params = decode_action(&mean);
        let score = evaluator.eval(&params)?;
        let conf = FrameEvaluator::mean_confidence(&score);
        if conf < applied.0 {
            applied = (conf, params);
        }
        steps = step;
        success = score.success;
        if success {
            applied = (conf, params);
            break;
        }
    }
    let ms = start.elapsed().as_secs_f64() * 1e3;
    let params = applied.1;
    let best = evaluator.attacked_image(&params)?;
    let victim_rows = victims.eval(&best, &frame.geometry, frame.label)?;
    Ok((
        best,
        FrameTrace {
            frame_id: frame.t,
            geometry: geom,
            steps,
            params,
            surrogate_success: success,
            victims: victim_rows,
            ms,
            skipped: false,
        },
    ))
}

/// Attack a whole route sequentially with parameter carry-over. Frame 0
/// starts from a random draw.
#[allow(clippy::too_many_arguments)]
pub fn attack_route(
    frames: &[FrameRecord],
    ptn: &PtnModel,
    policy: &PolicyNet,
    surrogates: &[Classifier],
    victims: &VictimPool,
    cfg: &AttackConfig,
    seed: SeedNode,
    save: Option<&mut Vec<crate::img::Image>>,
) -> Result<AttackTrace> {
    if frames.len() < 5 {
        return Err(ElaError::Argument(format!(
            "route needs >= 5 frames, got {}",
            frames.len()
        )));
    }
    let mut rng = seed.rng();
    let mut params = random_params(&mut rng);
    let cache = SurrogateCache::new(surrogates);
    let mut rows = Vec::with_capacity(frames.len());
    let mut saved = save;
    for frame in frames {
        let (img, trace) =
            attack_frame(frame, ptn, policy, surrogates, &cache, victims, cfg, params)?;
        params = trace.params;
        if let Some(out) = saved.as_deref_mut() {
            out.push(img);
        }
        rows.push(trace);
    }
    Ok(summarize(rows, victims.models.len()))
}

/// Shared core of the random baselines: `budget` independent draws per
/// frame, keeping the draw with the lowest mean surrogate confidence.
#[allow(clippy::too_many_arguments)]
fn random_search_core(
    frames: &[FrameRecord],
    ptn: &PtnModel,
    surrogates: &[Classifier],
    victims: &VictimPool,
    cfg: &AttackConfig,
    budget: usize,
    seed: SeedNode,
) -> Result<AttackTrace> {
    if budget == 0 {
        return Err(ElaError::Argument("query budget must be >= 1".into()));
    }
    let mut rng = seed.rng();
    let cache = SurrogateCache::new(surrogates);
    let mut rows = Vec::with_capacity(frames.len());
    for frame in frames {
        let start = Instant::now();
        let geom = ptn_forward(ptn, &frame.observation)?;
        let mask = render_shape_mask(&geom, frame.image.height, frame.image.width)?;
        let evaluator = FrameEvaluator::new(frame, &geom, &mask, surrogates, &cache, cfg)?;
        let mut best: Option<(f64, bool, LaserParams)> = None;
        for _ in 0..budget {
            let params = random_params(&mut rng);
            let score = evaluator.eval(&params)?;
            let conf = FrameEvaluator::mean_confidence(&score);
            if best.as_ref().is_none_or(|(c, ..)| conf < *c) {
                best = Some((conf, score.success, params));
            }
        }
        let (_, fooled, params) = best.unwrap();
        let ms = start.elapsed().as_secs_f64() * 1e3;
        let attacked = evaluator.attacked_image(&params)?;
        let victim_rows = victims.eval(&attacked, &frame.geometry, frame.label)?;
        rows.push(FrameTrace {
            frame_id: frame.t,
            geometry: geom,
            steps: budget,
            params,
            surrogate_success: fooled,
            victims: victim_rows,
            ms,
            skipped: false,
        });
    }
    Ok(summarize(rows, victims.models.len()))
}

/// One uniform parameter draw per frame.
pub fn baseline_random(
    frames: &[FrameRecord],
    ptn: &PtnModel,
    surrogates: &[Classifier],
    victims: &VictimPool,
    cfg: &AttackConfig,
    seed: SeedNode,
) -> Result<AttackTrace> {
    random_search_core(frames, ptn, surrogates, victims, cfg, 1, seed)
}

/// Random search with `cfg.search_budget` queries per frame, keeping the
/// best draw by mean surrogate confidence.
pub fn baseline_random_search(
    frames: &[FrameRecord],
    ptn: &PtnModel,
    surrogates: &[Classifier],
    victims: &VictimPool,
    cfg: &AttackConfig,
    seed: SeedNode,
) -> Result<AttackTrace> {
    random_search_core(frames, ptn, surrogates, victims, cfg, cfg.search_budget, seed)
}

/// Fit a single static beam on a 1/10 subsample of the train frames by
/// exhaustive coarse-grid search, then apply it to every test frame.
pub fn baseline_static_eot(
    train_frames: &[&FrameRecord],
    test_frames: &[FrameRecord],
    ptn: &PtnModel,
    surrogates: &[Classifier],
    victims: &VictimPool,
    cfg: &AttackConfig,
    seed: SeedNode,
) -> Result<(LaserParams, AttackTrace)> {
    if train_frames.is_empty() {
        return Err(ElaError::Argument("no train frames for the static fit".into()));
    }
    let mut rng = seed.rng();
    let keep = ((train_frames.len() as f64 * cfg.eot_subsample).round() as usize).max(1);
    let mut picked: Vec<&FrameRecord> = Vec::with_capacity(keep);
    // Reservoir-free subsample: draw distinct indices.
    let mut indices: Vec<usize> = (0..train_frames.len()).collect();
    for k in 0..keep {
        let j = rng.gen_range(k..indices.len());
        indices.swap(k, j);
        picked.push(train_frames[indices[k]]);
    }
    // Perceived geometry and masks once per picked frame.
    let prepared: Vec<(_, _, _)> = picked
        .iter()
        .map(|f| {
            let geom = ptn_forward(ptn, &f.observation)?;
            let mask = render_shape_mask(&geom, f.image.height, f.image.width)?;
            Ok((*f, geom, mask))
        })
        .collect::<Result<_>>()?;
    let cache = SurrogateCache::new(surrogates);
    let evaluators: Vec<FrameEvaluator> = prepared
        .iter()
        .map(|(f, geom, mask)| FrameEvaluator::new(f, geom, mask, surrogates, &cache, cfg))
        .collect::<Result<_>>()?;

    // Objective: expected surrogate misclassification (fraction of
    // (frame, surrogate) pairs driven off the true class).
    let grid = GRID_COARSE;
    let scored: Vec<(usize, f64)> = (0..grid.len())
        .into_par_iter()
        .map(|idx| {
            let params = grid.params(idx);
            let mut fooled = 0usize;
            let mut total = 0usize;
            for (evaluator, (frame, ..)) in evaluators.iter().zip(&prepared) {
                let score = evaluator.eval(&params)?;
                fooled += score
                    .top1
                    .iter()
                    .filter(|&&l| l != frame.label)
                    .count();
                total += score.top1.len();
            }
            Ok((idx, fooled as f64 / total as f64))
        })
        .collect::<Result<_>>()?;
    let (best_idx, _) = scored
        .iter()
        .fold((0usize, f64::NEG_INFINITY), |(bi, bs), &(i, s)| {
            if s > bs {
                (i, s)
            } else {
                (bi, bs)
            }
        });
    let best_params = grid.params(best_idx);

    // Apply statically to every test frame.
    let mut rows = Vec::with_capacity(test_frames.len());
    for frame in test_frames {
        let start = Instant::now();
        let geom = ptn_forward(ptn, &frame.observation)?;
        let mask = render_shape_mask(&geom, frame.image.height, frame.image.width)?;
        let (_, fooled, attacked) =
            try_params(frame, &geom, &mask, &best_params, surrogates, cfg)?;
        let ms = start.elapsed().as_secs_f64() * 1e3;
        let victim_rows = victims.eval(&attacked, &frame.geometry, frame.label)?;
        rows.push(FrameTrace {
            frame_id: frame.t,
            geometry: geom,
            steps: 1,
            params: best_params,
            surrogate_success: fooled,
            victims: victim_rows,
            ms,
            skipped: false,
        });
    }
    Ok((best_params, summarize(rows, victims.models.len())))
}

/// Result of the per-frame reachability oracle.
#[derive(Debug, Clone)]
pub struct OracleResult {
    pub success_exists: bool,
    /// The first grid triple fooling all surrogates, if any.
    pub best_params: Option<LaserParams>,
}

/// Exhaustively composite every grid triple; report whether any fools the
/// whole surrogate ensemble. Early-exits once a success is found (existence
/// semantics, so ordering cannot change the flag).
pub fn oracle_grid(
    frame: &FrameRecord,
    ptn: &PtnModel,
    surrogates: &[Classifier],
    cfg: &AttackConfig,
    grid: GridSpec,
) -> Result<OracleResult> {
    let geom = ptn_forward(ptn, &frame.observation)?;
    let mask = render_shape_mask(&geom, frame.image.height, frame.image.width)?;
    let cache = SurrogateCache::new(surrogates);
    let evaluator = FrameEvaluator::new(frame, &geom, &mask, surrogates, &cache, cfg)?;
    let found = AtomicBool::new(false);
    let hits: Vec<usize> = (0..grid.len())
        .into_par_iter()
        .filter_map(|idx| {
            if found.load(Ordering::Relaxed) {
                return None;
            }
            match evaluator.eval(&grid.params(idx)) {
                Ok(score) if score.success => {
                    found.store(true, Ordering::Relaxed);
                    Some(idx)
                }
                _ => None,
            }
        })
        .collect();
    let best = hits.into_iter().min().map(|idx| grid.params(idx));
    Ok(OracleResult {
        success_exists: best.is_some(),
        best_params: best,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::classify::CROP_SIZE;
    use crate::nn::{Activation, DenseNet};
    use crate::scene::{generate_class_dataset, ClassDataset, SignClass, WorldConfig};

    fn rigged(label: usize) -> Classifier {
        let mut net = DenseNet::zeros(
            &[CROP_SIZE * CROP_SIZE * 3, 4, SignClass::ALL.len()],
            &[Activation::Relu, Activation::Identity],
        )
        .unwrap();
        let mut biases = vec![0.0; SignClass::ALL.len()];
        biases[label] = 8.0;
        net.set_output_bias(&biases).unwrap();
        Classifier {
            net,
            width: 4,
            seed_tag: label as u64,
            clean_accuracy: 0.0,
        }
    }

    fn setup() -> (ClassDataset, PtnModel, PolicyNet) {
        let world = WorldConfig::default_for_class(SignClass::Speed60);
        let ds = generate_class_dataset(&world, 3, 6, 1, SeedNode::new(900)).unwrap();
        let f = &ds.train_routes[0].frames[0];
        let ptn = PtnModel::new(
            160.0,
            120.0,
            f.image.width as f64,
            f.image.height as f64,
            SignClass::Speed60.shape(),
            &[16],
            SeedNode::new(901),
        )
        .unwrap();
        let policy = PolicyNet::new(&[16], SeedNode::new(902)).unwrap();
        (ds, ptn, policy)
    }

    #[test]
    fn grid_spec_covers_ranges() {
        for grid in [GRID_COARSE, GRID_FINE] {
            assert_eq!(grid.len(), grid.n_phi * grid.n_omega * grid.n_lambda);
            let first = grid.params(0);
            assert_eq!(first.phi, 0.0);
            assert_eq!(first.omega, OMEGA_MIN);
            assert_eq!(first.lambda, LAMBDA_MIN);
            let last = grid.params(grid.len() - 1);
            assert!(last.phi < PI);
            assert_eq!(last.omega, OMEGA_MAX);
            assert_eq!(last.lambda, LAMBDA_MAX);
            // Every triple is feasible.
            for idx in (0..grid.len()).step_by(97) {
                let p = grid.params(idx);
                LaserParams::new(p.phi, p.omega, p.lambda).unwrap();
            }
        }
        assert_eq!(GRID_FINE.len(), 72 * 24 * 61);
    }

    #[test]
    fn instant_surrogate_success_exits_after_one_step() {
        let (ds, ptn, policy) = setup();
        let frame = &ds.test_routes[0].frames[0];
        let surrogates = vec![rigged(0)]; // always wrong for Speed60
        let victims = VictimPool::new(vec![rigged(frame.label)]);
        let cfg = AttackConfig::default();
        let prev = decode_action(&[0.0; 3]);
        let (_, trace) =
            attack_frame(frame, &ptn, &policy, &surrogates, &SurrogateCache::new(&surrogates), &victims, &cfg, prev).unwrap();
        assert_eq!(trace.steps, 1);
        assert!(trace.surrogate_success);
        assert!(!trace.skipped);
        // One victim scored exactly once.
        assert_eq!(victims.query_count(), 1);
    }

    #[test]
    fn hopeless_frame_uses_full_budget() {
        let (ds, ptn, policy) = setup();
        let frame = &ds.test_routes[0].frames[0];
        let surrogates = vec![rigged(frame.label)]; // never fooled
        let victims = VictimPool::new(vec![rigged(frame.label)]);
        let cfg = AttackConfig::default();
        let prev = decode_action(&[0.0; 3]);
        let (_, trace) =
            attack_frame(frame, &ptn, &policy, &surrogates, &SurrogateCache::new(&surrogates), &victims, &cfg, prev).unwrap();
        assert_eq!(trace.steps, cfg.n_max);
        assert!(!trace.surrogate_success);
        assert_eq!(victims.query_count(), 1);
    }

    #[test]
    fn route_carry_over_and_victim_isolation() {
        let (ds, ptn, policy) = setup();
        let frames = &ds.test_routes[0].frames;
        let surrogates = vec![rigged(frames[0].label)]; // full budget each frame
        let victims = VictimPool::new(vec![rigged(0), rigged(1)]);
        let cfg = AttackConfig::default();
        let trace = attack_route(
            frames, &ptn, &policy, &surrogates, &victims, &cfg, SeedNode::new(5), None,
        )
        .unwrap();
        assert_eq!(trace.frames.len(), frames.len());
        // Victims are queried exactly once per frame per victim, no matter
        // how many decision steps ran.
        assert_eq!(victims.query_count(), (frames.len() * 2) as u64);
        for f in &trace.frames {
            assert!(f.steps <= cfg.n_max);
            assert!(f.ms > 0.0);
        }
        // ASR consistency: mean of the misclassified flags.
        for v in 0..2 {
            let mean = trace
                .frames
                .iter()
                .map(|f| f64::from(u8::from(f.victims[v].1)))
                .sum::<f64>()
                / trace.frames.len() as f64;
            assert_eq!(trace.asr[v], mean);
        }
    }

    #[test]
    fn random_baseline_is_deterministic_and_beta_zero_is_clean() {
        let (ds, ptn, _) = setup();
        let frames = &ds.test_routes[0].frames;
        let surrogates = vec![rigged(frames[0].label)];
        let cfg = AttackConfig {
            beta: 0.0,
            ..AttackConfig::default()
        };
        let victims = VictimPool::new(vec![rigged(frames[0].label)]);
        let a = baseline_random(frames, &ptn, &surrogates, &victims, &cfg, SeedNode::new(8))
            .unwrap();
        let b = baseline_random(frames, &ptn, &surrogates, &victims, &cfg, SeedNode::new(8))
            .unwrap();
        for (fa, fb) in a.frames.iter().zip(&b.frames) {
            assert_eq!(fa.params, fb.params);
            assert_eq!(fa.surrogate_success, fb.surrogate_success);
        }
        // beta = 0 composites nothing: the rigged correct victim keeps its
        // label on every frame.
        assert_eq!(a.asr[0], 0.0);
    }

    #[test]
    fn search_budget_one_equals_random_baseline() {
        let (ds, ptn, _) = setup();
        let frames = &ds.test_routes[0].frames;
        let surrogates = vec![rigged(frames[0].label)];
        let victims = VictimPool::new(vec![rigged(0)]);
        let cfg = AttackConfig {
            search_budget: 1,
            ..AttackConfig::default()
        };
        let a = baseline_random(frames, &ptn, &surrogates, &victims, &cfg, SeedNode::new(9))
            .unwrap();
        let b =
            baseline_random_search(frames, &ptn, &surrogates, &victims, &cfg, SeedNode::new(9))
                .unwrap();
        for (fa, fb) in a.frames.iter().zip(&b.frames) {
            assert_eq!(fa.params, fb.params);
        }
    }

    /// A surrogate that flips away from the true class once enough red beam
    /// energy lands on the crop: reacts to the red channel mean.
    fn red_sensitive(true_label: usize) -> Classifier {
        let in_dim = CROP_SIZE * CROP_SIZE * 3;
        let mut net = DenseNet::zeros(
            &[in_dim, 2, SignClass::ALL.len()],
            &[Activation::Relu, Activation::Identity],
        )
        .unwrap();
        let mut flat = net.params_flat();
        // First hidden unit sums the red channel.
        for px in 0..CROP_SIZE * CROP_SIZE {
            flat[px * 3] = 1.0;
        }
        net.set_params_flat(&flat).unwrap();
        // Output: bias prefers the true label; the red-sum unit pushes a
        // wrong label once red mass exceeds the threshold.
        let wrong = (true_label + 1) % SignClass::ALL.len();
        let mut flat = net.params_flat();
        let n_hidden_w = in_dim * 2;
        let hidden_b = n_hidden_w; // 2 biases
        let out_w = hidden_b + 2;
        // out weight layout: [class][hidden]; red unit is hidden 0.
        flat[out_w + wrong * 2] = 0.05;
        let out_b = out_w + 2 * SignClass::ALL.len();
        flat[out_b + true_label] = 20.0;
        net.set_params_flat(&flat).unwrap();
        Classifier {
            net,
            width: 2,
            seed_tag: 999,
            clean_accuracy: 0.0,
        }
    }

    #[test]
    fn search_asr_non_decreasing_in_budget() {
        let (ds, ptn, _) = setup();
        let frames = &ds.test_routes[0].frames;
        let label = frames[0].label;
        let surrogates = vec![red_sensitive(label)];
        let mut rates = Vec::new();
        for budget in [1, 20, 80] {
            let victims = VictimPool::new(vec![red_sensitive(label)]);
            let cfg = AttackConfig {
                search_budget: budget,
                ..AttackConfig::default()
            };
            let t = baseline_random_search(
                frames, &ptn, &surrogates, &victims, &cfg, SeedNode::new(10),
            )
            .unwrap();
            rates.push(t.surrogate_asr);
        }
        assert!(rates[0] <= rates[1] + 1e-12);
        assert!(rates[1] <= rates[2] + 1e-12);
    }

    #[test]
    fn static_fit_is_deterministic_and_grid_feasible() {
        let (ds, ptn, _) = setup();
        let label = ds.test_routes[0].frames[0].label;
        let train: Vec<&FrameRecord> = ds.train_frames().collect();
        let surrogates = vec![red_sensitive(label)];
        let victims = VictimPool::new(vec![rigged(label)]);
        let cfg = AttackConfig::default();
        let (p1, _) = baseline_static_eot(
            &train,
            &ds.test_routes[0].frames,
            &ptn,
            &surrogates,
            &victims,
            &cfg,
            SeedNode::new(11),
        )
        .unwrap();
        let victims2 = VictimPool::new(vec![rigged(label)]);
        let (p2, _) = baseline_static_eot(
            &train,
            &ds.test_routes[0].frames,
            &ptn,
            &surrogates,
            &victims2,
            &cfg,
            SeedNode::new(11),
        )
        .unwrap();
        assert_eq!(p1, p2);
        LaserParams::new(p1.phi, p1.omega, p1.lambda).unwrap();
        // The triple sits on the coarse grid.
        let grid = GRID_COARSE;
        let on_grid = (0..grid.len()).any(|i| grid.params(i) == p1);
        assert!(on_grid);
    }

    #[test]
    fn oracle_beta_zero_finds_nothing() {
        let (ds, ptn, _) = setup();
        let frame = &ds.test_routes[0].frames[0];
        let surrogates = vec![rigged(frame.label)];
        let cfg = AttackConfig {
            beta: 0.0,
            ..AttackConfig::default()
        };
        let small = GridSpec {
            n_phi: 6,
            n_omega: 3,
            n_lambda: 7,
        };
        let res = oracle_grid(frame, &ptn, &surrogates, &cfg, small).unwrap();
        assert!(!res.success_exists);
        assert!(res.best_params.is_none());
    }

    #[test]
    fn oracle_finds_reachable_success() {
        let (ds, ptn, _) = setup();
        let frame = &ds.test_routes[0].frames[0];
        let surrogates = vec![rigged(0)]; // everything fools it
        let cfg = AttackConfig::default();
        let small = GridSpec {
            n_phi: 4,
            n_omega: 2,
            n_lambda: 3,
        };
        let res = oracle_grid(frame, &ptn, &surrogates, &cfg, small).unwrap();
        assert!(res.success_exists);
        let p = res.best_params.unwrap();
        LaserParams::new(p.phi, p.omega, p.lambda).unwrap();
    }

    #[test]
    fn saved_frames_reproduce_victim_labels() {
        let (ds, ptn, policy) = setup();
        let frames = &ds.test_routes[0].frames;
        let surrogates = vec![rigged(frames[0].label)];
        let victims = VictimPool::new(vec![rigged(0)]);
        let cfg = AttackConfig::default();
        let mut saved = Vec::new();
        let trace = attack_route(
            frames,
            &ptn,
            &policy,
            &surrogates,
            &victims,
            &cfg,
            SeedNode::new(12),
            Some(&mut saved),
        )
        .unwrap();
        assert_eq!(saved.len(), frames.len());
        // Round trip through PPM and rescore: labels must be identical.
        let dir = tempfile::tempdir().unwrap();
        for (k, (img, row)) in saved.iter().zip(&trace.frames).enumerate() {
            let path = dir.path().join(format!("f{k}.ppm"));
            img.write_ppm(&path).unwrap();
            let back = crate::img::Image::read_ppm(&path).unwrap();
            assert_eq!(back.data, img.data);
            let again = victims
                .eval(&back, &frames[k].geometry, frames[k].label)
                .unwrap();
            assert_eq!(again, row.victims);
        }
    }
}
