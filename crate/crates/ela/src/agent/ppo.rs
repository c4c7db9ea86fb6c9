//! Clipped-surrogate policy optimization over a frozen rollout buffer.

use super::{
    AgentState, PolicyNet, RolloutBuffer, ValueNet, ACTION_DIM, ACTION_HALF,
};
use crate::error::{ElaError, Result};
use crate::nn::{gaussian_logprob_entropy, NetGrads, OptimState};
use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;

/// Ratio magnitude beyond which the update is considered blown up.
pub const RATIO_ABORT: f64 = 1e3;

#[derive(Debug, Clone)]
pub struct PpoConfig {
    pub clip: f64,
    pub epochs: usize,
    pub minibatch: usize,
    pub lr_policy: f64,
    pub lr_value: f64,
    pub value_coef: f64,
    pub entropy_coef: f64,
}

impl Default for PpoConfig {
    fn default() -> Self {
        Self {
            clip: 0.2,
            epochs: 4,
            minibatch: 64,
            lr_policy: 3e-4,
            lr_value: 1e-3,
            value_coef: 0.5,
            entropy_coef: 0.01,
        }
    }
}

/// Per-update diagnostics. The `first_*` fields are measured on the very
/// first pass, before any parameter step, where every ratio must be 1.
#[derive(Debug, Clone, Default)]
pub struct PpoDiagnostics {
    pub first_ratio_max_dev: f64,
    pub first_clip_fraction: f64,
    pub first_policy_loss: f64,
    /// Statistics of the final optimization epoch.
    pub ratio_mean: f64,
    pub ratio_max: f64,
    pub clip_fraction: f64,
    pub policy_loss: f64,
    pub value_loss: f64,
    pub entropy: f64,
}

/// Clipped surrogate objective for a single sample (the quantity maximized).
pub fn clipped_objective(ratio: f64, advantage: f64, clip: f64) -> f64 {
    let clipped = ratio.clamp(1.0 - clip, 1.0 + clip);
    (ratio * advantage).min(clipped * advantage)
}

/// Optimizer state carried across `ppo_update` calls.
pub struct PpoOptim {
    policy: OptimState,
    log_std: OptimState,
    value: OptimState,
}

impl PpoOptim {
    pub fn new(policy: &PolicyNet, value: &ValueNet, cfg: &PpoConfig) -> Self {
        Self {
            policy: OptimState::new(policy.net.param_count(), cfg.lr_policy),
            log_std: OptimState::new(ACTION_DIM, cfg.lr_policy),
            value: OptimState::new(value.net.param_count(), cfg.lr_value),
        }
    }
}

struct SampleGrad {
    policy: NetGrads,
    log_std: [f64; ACTION_DIM],
    value: NetGrads,
    ratio: f64,
    clipped: bool,
    policy_loss: f64,
    value_loss: f64,
    entropy: f64,
}

/// Loss terms and gradients for one transition. `adv` is the normalized
/// advantage, `old_logprob` the behavior-policy logprob.
#[allow(clippy::too_many_arguments)]
fn sample_grad(
    policy: &PolicyNet,
    value: &ValueNet,
    state: &AgentState,
    raw: &[f64; ACTION_DIM],
    old_logprob: f64,
    adv: f64,
    ret: f64,
    cfg: &PpoConfig,
) -> Result<SampleGrad> {
    let (mean_out, pcache) = policy.net.forward_cached(&state.0)?;
    let (lp_gauss, entropy) = gaussian_logprob_entropy(&mean_out, &policy.log_std, raw)?;
    let mut correction = 0.0;
    for i in 0..ACTION_DIM {
        correction += super::log_one_minus_tanh_sq(raw[i]) + ACTION_HALF[i].ln();
    }
    let lp_new = lp_gauss - correction;
    let ratio = (lp_new - old_logprob).exp();
    if !ratio.is_finite() || ratio > RATIO_ABORT {
        return Err(ElaError::Numeric(format!(
            "ppo ratio {ratio} exceeds abort threshold {RATIO_ABORT}"
        )));
    }
    let surr_unclipped = ratio * adv;
    let surr_clipped = ratio.clamp(1.0 - cfg.clip, 1.0 + cfg.clip) * adv;
    let objective = surr_unclipped.min(surr_clipped);
    let policy_loss = -objective - cfg.entropy_coef * entropy;

    // The min picks the unclipped branch (or both coincide): gradient flows
    // through the ratio. Otherwise the sample contributes no policy-mean
    // gradient.
    let through_ratio = surr_unclipped <= surr_clipped;
    let dl_dlp = if through_ratio { -adv * ratio } else { 0.0 };

    let mut dmean = vec![0.0; ACTION_DIM];
    let mut dlog_std = [0.0; ACTION_DIM];
    for i in 0..ACTION_DIM {
        let std = policy.log_std[i].exp();
        let z = (raw[i] - mean_out[i]) / std;
        // d lp / d mean_i and d lp / d log_std_i of the Gaussian term; the
        // tanh correction does not depend on the parameters.
        dmean[i] = dl_dlp * z / std;
        dlog_std[i] = dl_dlp * (z * z - 1.0);
        // Entropy is sum(log_std) + const: gradient 1 per dim.
        dlog_std[i] += -cfg.entropy_coef;
    }
    let (pgrads, _) = policy.net.backward(&pcache, &dmean)?;

    let (vout, vcache) = value.net.forward_cached(&state.0)?;
    let verr = vout[0] - ret;
    let value_loss = cfg.value_coef * verr * verr;
    let (vgrads, _) = value.net.backward(&vcache, &[2.0 * cfg.value_coef * verr])?;

    Ok(SampleGrad {
        policy: pgrads,
        log_std: dlog_std,
        value: vgrads,
        ratio,
        clipped: ratio < 1.0 - cfg.clip || ratio > 1.0 + cfg.clip,
        policy_loss,
        value_loss,
        entropy,
    })
}

/// Run the clipped-surrogate update over the buffer. Advantages are
/// normalized to zero mean / unit variance across the whole buffer first.
pub fn ppo_update(
    policy: &mut PolicyNet,
    value: &mut ValueNet,
    buffer: &RolloutBuffer,
    cfg: &PpoConfig,
    optim: &mut PpoOptim,
    rng: &mut ChaCha8Rng,
) -> Result<PpoDiagnostics> {
    let n = buffer.steps.len();
    if n == 0 {
        return Err(ElaError::Argument("empty rollout buffer".into()));
    }
    let mean_adv = buffer.steps.iter().map(|s| s.advantage).sum::<f64>() / n as f64;
    let var_adv = buffer
        .steps
        .iter()
        .map(|s| (s.advantage - mean_adv).powi(2))
        .sum::<f64>()
        / n as f64;
    let std_adv = var_adv.sqrt().max(1e-8);
    let norm_adv: Vec<f64> = buffer
        .steps
        .iter()
        .map(|s| (s.advantage - mean_adv) / std_adv)
        .collect();

    let mut diag = PpoDiagnostics::default();
    let mut first_pass = true;
    let mut order: Vec<usize> = (0..n).collect();
    for epoch in 0..cfg.epochs {
        order.shuffle(rng);
        let mut ratio_sum = 0.0;
        let mut ratio_max = 0.0_f64;
        let mut clipped = 0usize;
        let mut ploss = 0.0;
        let mut vloss = 0.0;
        let mut ent = 0.0;
        for chunk in order.chunks(cfg.minibatch.max(1)) {
            let mut pg = NetGrads::zeros_like(&policy.net);
            let mut lsg = [0.0; ACTION_DIM];
            let mut vg = NetGrads::zeros_like(&value.net);
            let mut chunk_ratio_dev = 0.0_f64;
            let mut chunk_clipped = 0usize;
            let mut chunk_ploss = 0.0;
            for &idx in chunk {
                let s = &buffer.steps[idx];
                let g = sample_grad(
                    policy, value, &s.state, &s.action.raw, s.logprob, norm_adv[idx], s.ret, cfg,
                )?;
                ratio_sum += g.ratio;
                ratio_max = ratio_max.max(g.ratio);
                clipped += usize::from(g.clipped);
                chunk_clipped += usize::from(g.clipped);
                chunk_ratio_dev = chunk_ratio_dev.max((g.ratio - 1.0).abs());
                chunk_ploss += g.policy_loss;
                ploss += g.policy_loss;
                vloss += g.value_loss;
                ent += g.entropy;
                pg.add(&g.policy);
                for i in 0..ACTION_DIM {
                    lsg[i] += g.log_std[i];
                }
                vg.add(&g.value);
            }
            let scale = 1.0 / chunk.len() as f64;
            if first_pass {
                diag.first_ratio_max_dev = chunk_ratio_dev;
                diag.first_clip_fraction = chunk_clipped as f64 / chunk.len() as f64;
                diag.first_policy_loss = chunk_ploss * scale;
                first_pass = false;
            }
            pg.scale(scale);
            vg.scale(scale);
            for g in &mut lsg {
                *g *= scale;
            }
            let mut params = policy.net.params_flat();
            optim.policy.apply(&mut params, &pg.flat())?;
            policy.net.set_params_flat(&params)?;
            optim.log_std.apply(&mut policy.log_std, &lsg)?;
            let mut vparams = value.net.params_flat();
            optim.value.apply(&mut vparams, &vg.flat())?;
            value.net.set_params_flat(&vparams)?;
        }
        if epoch == cfg.epochs - 1 {
            diag.ratio_mean = ratio_sum / n as f64;
            diag.ratio_max = ratio_max;
            diag.clip_fraction = clipped as f64 / n as f64;
            diag.policy_loss = ploss / n as f64;
            diag.value_loss = vloss / n as f64;
            diag.entropy = ent / n as f64;
        }
    }
    Ok(diag)
}

#[cfg(test)]
mod tests {
    use super::*;
    use super::super::{
        decode_action, policy_act, ActMode, Action, AgentState, Transition,
    };
    use crate::rng::SeedNode;
    use approx::assert_relative_eq;
    use rand::Rng;

    fn random_buffer(policy: &PolicyNet, value: &ValueNet, len: usize, seed: u64) -> RolloutBuffer {
        let mut rng = SeedNode::new(seed).rng();
        let steps = (0..len)
            .map(|_| {
                let mut sv = [0.0; 8];
                for x in &mut sv {
                    *x = rng.gen_range(0.0..1.0);
                }
                let state = AgentState(sv);
                let (action, logprob, v) =
                    policy_act(policy, value, &state, ActMode::Sample, &mut rng).unwrap();
                Transition {
                    state,
                    action,
                    logprob,
                    value: v,
                    reward: rng.gen_range(-1.0..1.0),
                    done: false,
                    advantage: rng.gen_range(-1.0..1.0),
                    ret: rng.gen_range(-1.0..1.0),
                }
            })
            .collect();
        RolloutBuffer { steps }
    }

    #[test]
    fn clip_arithmetic() {
        assert_relative_eq!(clipped_objective(1.5, 2.0, 0.2), 2.4);
        assert_relative_eq!(clipped_objective(0.5, -1.0, 0.2), -0.8);
        assert_relative_eq!(clipped_objective(1.0, 3.0, 0.2), 3.0);
    }

    #[test]
    fn ratios_are_one_at_old_parameters() {
        let mut policy = PolicyNet::new(&[32], SeedNode::new(21)).unwrap();
        let mut value = ValueNet::new(&[32], SeedNode::new(22)).unwrap();
        let buffer = random_buffer(&policy, &value, 48, 23);
        let cfg = PpoConfig {
            minibatch: 48,
            ..PpoConfig::default()
        };
        let mut optim = PpoOptim::new(&policy, &value, &cfg);
        let mut rng = SeedNode::new(24).rng();
        let diag =
            ppo_update(&mut policy, &mut value, &buffer, &cfg, &mut optim, &mut rng).unwrap();
        assert!(
            diag.first_ratio_max_dev < 1e-12,
            "max |ratio-1| = {}",
            diag.first_ratio_max_dev
        );
        assert_relative_eq!(diag.first_clip_fraction, 0.0);
        // With all ratios 1 the surrogate part is -mean(normalized A) = 0;
        // what remains is the entropy bonus.
        let expected_entropy_part = {
            let (_, ent) =
                gaussian_logprob_entropy(&[0.0; 3], &policy.log_std, &[0.0; 3]).unwrap();
            -cfg.entropy_coef * ent
        };
        assert!((diag.first_policy_loss - expected_entropy_part).abs() < 0.05);
    }

    #[test]
    fn blown_up_ratio_aborts() {
        let policy = PolicyNet::new(&[16], SeedNode::new(31)).unwrap();
        let value = ValueNet::new(&[16], SeedNode::new(32)).unwrap();
        let mut buffer = random_buffer(&policy, &value, 8, 33);
        // Falsify a stored logprob so the recomputed ratio explodes.
        buffer.steps[3].logprob -= 20.0;
        let cfg = PpoConfig::default();
        let mut policy = policy;
        let mut value = value;
        let mut optim = PpoOptim::new(&policy, &value, &cfg);
        let mut rng = SeedNode::new(34).rng();
        match ppo_update(&mut policy, &mut value, &buffer, &cfg, &mut optim, &mut rng) {
            Err(crate::ElaError::Numeric(msg)) => assert!(msg.contains("ratio")),
            other => panic!("expected numeric abort, got {other:?}"),
        }
    }

    /// Total loss of a frozen minibatch as a function of the flattened
    /// policy parameters (net weights then log_std).
    fn policy_loss_flat(
        flat: &[f64],
        template: &PolicyNet,
        buffer: &RolloutBuffer,
        advs: &[f64],
        cfg: &PpoConfig,
    ) -> f64 {
        let mut p = template.clone();
        let nlen = p.net.param_count();
        p.net.set_params_flat(&flat[..nlen]).unwrap();
        p.log_std.copy_from_slice(&flat[nlen..]);
        let mut total = 0.0;
        for (s, &adv) in buffer.steps.iter().zip(advs) {
            let lp = p.logprob(&s.state, &s.action.raw).unwrap();
            let mean = p.mean(&s.state).unwrap();
            let (_, ent) = gaussian_logprob_entropy(&mean, &p.log_std, &s.action.raw).unwrap();
            let ratio = (lp - s.logprob).exp();
            total += -clipped_objective(ratio, adv, cfg.clip) - cfg.entropy_coef * ent;
        }
        total / buffer.steps.len() as f64
    }

    #[test]
    fn policy_gradient_matches_finite_differences() {
        let policy = PolicyNet::new(&[12], SeedNode::new(41)).unwrap();
        let value = ValueNet::new(&[12], SeedNode::new(42)).unwrap();
        // A *different* behavior policy generated the buffer, so ratios != 1
        // and the clip branch logic is exercised.
        let behavior = PolicyNet::new(&[12], SeedNode::new(43)).unwrap();
        let mut buffer = random_buffer(&behavior, &value, 16, 44);
        for s in &mut buffer.steps {
            s.logprob = behavior.logprob(&s.state, &s.action.raw).unwrap();
        }
        let advs: Vec<f64> = buffer.steps.iter().map(|s| s.advantage).collect();
        let cfg = PpoConfig::default();

        // Analytic gradient via sample_grad.
        let mut pg = NetGrads::zeros_like(&policy.net);
        let mut lsg = [0.0; ACTION_DIM];
        for (s, &adv) in buffer.steps.iter().zip(&advs) {
            let g = sample_grad(
                &policy, &value, &s.state, &s.action.raw, s.logprob, adv, s.ret, &cfg,
            )
            .unwrap();
            pg.add(&g.policy);
            for i in 0..ACTION_DIM {
                lsg[i] += g.log_std[i];
            }
        }
        let scale = 1.0 / buffer.steps.len() as f64;
        pg.scale(scale);
        let mut analytic = pg.flat();
        analytic.extend(lsg.iter().map(|g| g * scale));

        let mut flat = policy.net.params_flat();
        flat.extend_from_slice(&policy.log_std);
        let h = 1e-6;
        let mut max_err = 0.0_f64;
        // Spot-check a deterministic spread of coordinates.
        let stride = (flat.len() / 60).max(1);
        for k in (0..flat.len()).step_by(stride) {
            let mut plus = flat.clone();
            plus[k] += h;
            let mut minus = flat.clone();
            minus[k] -= h;
            let fd = (policy_loss_flat(&plus, &policy, &buffer, &advs, &cfg)
                - policy_loss_flat(&minus, &policy, &buffer, &advs, &cfg))
                / (2.0 * h);
            let denom = fd.abs().max(analytic[k].abs()).max(1.0);
            max_err = max_err.max((fd - analytic[k]).abs() / denom);
        }
        assert!(max_err < 1e-4, "policy FD mismatch {max_err}");
    }

    #[test]
    fn value_gradient_matches_finite_differences() {
        let policy = PolicyNet::new(&[12], SeedNode::new(51)).unwrap();
        let value = ValueNet::new(&[12], SeedNode::new(52)).unwrap();
        let buffer = random_buffer(&policy, &value, 16, 53);
        let cfg = PpoConfig::default();
        let mut vg = NetGrads::zeros_like(&value.net);
        for s in &buffer.steps {
            let g = sample_grad(
                &policy, &value, &s.state, &s.action.raw, s.logprob, 0.0, s.ret, &cfg,
            )
            .unwrap();
            vg.add(&g.value);
        }
        let scale = 1.0 / buffer.steps.len() as f64;
        vg.scale(scale);
        let analytic = {
            let mut a = vg.flat();
            for x in &mut a {
                *x *= 1.0;
            }
            a
        };
        let loss = |flat: &[f64]| -> f64 {
            let mut v = value.clone();
            v.net.set_params_flat(flat).unwrap();
            buffer
                .steps
                .iter()
                .map(|s| {
                    let e = v.value(&s.state).unwrap() - s.ret;
                    cfg.value_coef * e * e
                })
                .sum::<f64>()
                / buffer.steps.len() as f64
        };
        let flat = value.net.params_flat();
        let h = 1e-6;
        let stride = (flat.len() / 60).max(1);
        let mut max_err = 0.0_f64;
        for k in (0..flat.len()).step_by(stride) {
            let mut plus = flat.clone();
            plus[k] += h;
            let mut minus = flat.clone();
            minus[k] -= h;
            let fd = (loss(&plus) - loss(&minus)) / (2.0 * h);
            let denom = fd.abs().max(analytic[k].abs()).max(1.0);
            max_err = max_err.max((fd - analytic[k]).abs() / denom);
        }
        assert!(max_err < 1e-4, "value FD mismatch {max_err}");
    }

    #[test]
    fn update_moves_toward_advantaged_actions() {
        // Single state; positive advantage iff the raw phi action is
        // positive. After updates the mean phi output should increase.
        let mut policy = PolicyNet::new(&[16], SeedNode::new(61)).unwrap();
        let mut value = ValueNet::new(&[16], SeedNode::new(62)).unwrap();
        let state = AgentState([0.5; 8]);
        let mut rng = SeedNode::new(63).rng();
        let before = policy.mean(&state).unwrap()[0];
        let cfg = PpoConfig {
            lr_policy: 3e-3,
            ..PpoConfig::default()
        };
        let mut optim = PpoOptim::new(&policy, &value, &cfg);
        for _ in 0..10 {
            let steps = (0..32)
                .map(|_| {
                    let (action, logprob, v) =
                        policy_act(&policy, &value, &state, ActMode::Sample, &mut rng).unwrap();
                    let advantage = if action.raw[0] > 0.0 { 1.0 } else { -1.0 };
                    Transition {
                        state,
                        action,
                        logprob,
                        value: v,
                        reward: 0.0,
                        done: true,
                        advantage,
                        ret: v,
                    }
                })
                .collect();
            let buffer = RolloutBuffer { steps };
            ppo_update(&mut policy, &mut value, &buffer, &cfg, &mut optim, &mut rng).unwrap();
        }
        let after = policy.mean(&state).unwrap()[0];
        assert!(
            after > before + 0.05,
            "mean raw phi did not increase: {before} -> {after}"
        );
        // Decoded params remain valid throughout.
        let p = decode_action(&[after, 0.0, 0.0]);
        crate::laser::LaserParams::new(p.phi, p.omega, p.lambda).unwrap();
    }

    #[test]
    fn empty_buffer_rejected_by_update() {
        let mut policy = PolicyNet::new(&[8], SeedNode::new(71)).unwrap();
        let mut value = ValueNet::new(&[8], SeedNode::new(72)).unwrap();
        let cfg = PpoConfig::default();
        let mut optim = PpoOptim::new(&policy, &value, &cfg);
        let mut rng = SeedNode::new(73).rng();
        let buffer = RolloutBuffer::default();
        assert!(ppo_update(&mut policy, &mut value, &buffer, &cfg, &mut optim, &mut rng).is_err());
    }

    #[test]
    fn action_packaging_consistent() {
        let raw = [0.3, -0.7, 1.1];
        let a = Action {
            raw,
            params: decode_action(&raw),
        };
        assert_relative_eq!(a.params.omega, 6.5 + 5.5 * (-0.7_f64).tanh());
    }
}
