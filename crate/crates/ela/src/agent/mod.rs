//! The decision core: Gaussian policy over laser parameters, value baseline,
//! reward shaping, and generalized advantage estimation.
//!
//! The RL state is 8 normalized reals: the victim-view sign ellipse (from the
//! perspective network, not ground truth) plus the current laser parameters.
//! Actions are absolute parameters; carry-over between frames happens through
//! the laser part of the state vector.

mod ppo;
mod train;

pub use ppo::{clipped_objective, ppo_update, PpoConfig, PpoDiagnostics, PpoOptim};
pub use train::{
    train_agent, AgentArtifacts, AgentTrainConfig, EpochStats, ROLLOUT_SEGMENT_LEN,
};

use crate::classify::EnsembleScore;
use crate::error::{ElaError, Result};
use crate::laser::{LaserParams, LAMBDA_MAX, LAMBDA_MIN, OMEGA_MAX, OMEGA_MIN};
use crate::nn::{
    gaussian_logprob_entropy, read_checkpoint, write_checkpoint, Activation, DenseNet,
};
use crate::rng::SeedNode;
use crate::scene::SignGeometry;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use std::f64::consts::PI;
use std::path::Path;

pub const STATE_DIM: usize = 8;
pub const ACTION_DIM: usize = 3;
/// Initial policy log standard deviation per action dimension.
pub const LOG_STD_INIT: f64 = -0.5;

/// Midpoints of the decoded action ranges (phi, omega, lambda).
pub const ACTION_MID: [f64; 3] = [
    PI / 2.0,
    (OMEGA_MIN + OMEGA_MAX) / 2.0,
    (LAMBDA_MIN + LAMBDA_MAX) / 2.0,
];
/// Half-widths of the decoded action ranges.
pub const ACTION_HALF: [f64; 3] = [
    PI / 2.0,
    (OMEGA_MAX - OMEGA_MIN) / 2.0,
    (LAMBDA_MAX - LAMBDA_MIN) / 2.0,
];

/// Normalized 8-dim RL state.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AgentState(pub [f64; STATE_DIM]);

impl AgentState {
    /// Build the state from perceived geometry and current laser parameters.
    /// All components land in [0, 1].
    pub fn encode(
        geom: &SignGeometry,
        params: &LaserParams,
        img_w: f64,
        img_h: f64,
    ) -> Result<Self> {
        let v = [
            geom.x_center / img_w,
            geom.y_center / img_h,
            geom.a / img_w,
            geom.b / img_h,
            geom.delta / PI,
            params.phi / PI,
            (params.omega - OMEGA_MIN) / (OMEGA_MAX - OMEGA_MIN),
            (params.lambda - LAMBDA_MIN) / (LAMBDA_MAX - LAMBDA_MIN),
        ];
        for (i, x) in v.iter().enumerate() {
            if !(0.0..=1.0).contains(x) {
                return Err(ElaError::Argument(format!(
                    "state component {i} = {x} outside [0, 1]"
                )));
            }
        }
        Ok(Self(v))
    }
}

/// One policy action: the raw Gaussian sample and its decoded parameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Action {
    pub raw: [f64; ACTION_DIM],
    pub params: LaserParams,
}

/// Decode a raw action vector: tanh squash, then affine map into each
/// parameter range. Total and range-safe for any finite input.
pub fn decode_action(raw: &[f64; ACTION_DIM]) -> LaserParams {
    let squash = |i: usize| ACTION_MID[i] + ACTION_HALF[i] * raw[i].tanh();
    LaserParams {
        // tanh saturating to exactly +-1.0 in f64 would leave the half-open
        // phi range; clamp the endpoints away.
        phi: squash(0).clamp(0.0, PI - 1e-9),
        omega: squash(1).clamp(OMEGA_MIN, OMEGA_MAX),
        lambda: squash(2).clamp(LAMBDA_MIN, LAMBDA_MAX),
    }
}

/// Numerically stable log(1 - tanh(x)^2).
pub(crate) fn log_one_minus_tanh_sq(x: f64) -> f64 {
    // log(1 - tanh(x)^2) = 2 (log 2 - x - softplus(-2x))
    let softplus = |z: f64| {
        if z > 30.0 {
            z
        } else {
            z.exp().ln_1p()
        }
    };
    2.0 * (std::f64::consts::LN_2 - x - softplus(-2.0 * x))
}

/// Gaussian policy: a dense net producing action means plus a state-free
/// learned log standard deviation.
#[derive(Debug, Clone)]
pub struct PolicyNet {
    pub net: DenseNet,
    pub log_std: [f64; ACTION_DIM],
}

/// State-value baseline.
#[derive(Debug, Clone)]
pub struct ValueNet {
    pub net: DenseNet,
}

impl PolicyNet {
    pub fn new(hidden: &[usize], seed: SeedNode) -> Result<Self> {
        let mut sizes = vec![STATE_DIM];
        sizes.extend_from_slice(hidden);
        sizes.push(ACTION_DIM);
        let mut acts = vec![Activation::Relu; hidden.len()];
        acts.push(Activation::Identity);
        Ok(Self {
            net: DenseNet::new(&sizes, &acts, seed)?,
            log_std: [LOG_STD_INIT; ACTION_DIM],
        })
    }

    pub fn mean(&self, state: &AgentState) -> Result<[f64; ACTION_DIM]> {
        let out = self.net.forward(&state.0)?;
        Ok([out[0], out[1], out[2]])
    }

    /// Log density of the decoded action under the squashed Gaussian,
    /// including the tanh + affine change-of-variables correction.
    pub fn logprob(&self, state: &AgentState, raw: &[f64; ACTION_DIM]) -> Result<f64> {
        let mean = self.mean(state)?;
        let (lp, _) = gaussian_logprob_entropy(&mean, &self.log_std, raw)?;
        let mut correction = 0.0;
        for i in 0..ACTION_DIM {
            correction += log_one_minus_tanh_sq(raw[i]) + ACTION_HALF[i].ln();
        }
        Ok(lp - correction)
    }

    pub fn save(&self, path: &Path, extra_header: &[(String, String)]) -> Result<()> {
        let mut header = vec![
            ("kind".to_string(), "policy".to_string()),
            (
                "log_std".to_string(),
                self.log_std
                    .iter()
                    .map(|v| format!("{v:.17e}"))
                    .collect::<Vec<_>>()
                    .join(","),
            ),
        ];
        header.extend_from_slice(extra_header);
        write_checkpoint(path, &self.net, &header)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (net, header) = read_checkpoint(path)?;
        let bad = |reason: &str| ElaError::Format {
            path: path.display().to_string(),
            reason: reason.to_string(),
        };
        let kind = header
            .iter()
            .find(|(k, _)| k == "kind")
            .map(|(_, v)| v.as_str())
            .ok_or_else(|| bad("missing kind"))?;
        if kind != "policy" {
            return Err(bad("not a policy checkpoint"));
        }
        let raw = header
            .iter()
            .find(|(k, _)| k == "log_std")
            .map(|(_, v)| v.clone())
            .ok_or_else(|| bad("missing log_std"))?;
        let parts: Vec<f64> = raw
            .split(',')
            .map(|s| s.parse().map_err(|_| bad("bad log_std")))
            .collect::<Result<_>>()?;
        if parts.len() != ACTION_DIM {
            return Err(bad("log_std length mismatch"));
        }
        Ok(Self {
            net,
            log_std: [parts[0], parts[1], parts[2]],
        })
    }
}

impl ValueNet {
    pub fn new(hidden: &[usize], seed: SeedNode) -> Result<Self> {
        let mut sizes = vec![STATE_DIM];
        sizes.extend_from_slice(hidden);
        sizes.push(1);
        let mut acts = vec![Activation::Relu; hidden.len()];
        acts.push(Activation::Identity);
        Ok(Self {
            net: DenseNet::new(&sizes, &acts, seed)?,
        })
    }

    pub fn value(&self, state: &AgentState) -> Result<f64> {
        Ok(self.net.forward(&state.0)?[0])
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_checkpoint(path, &self.net, &[("kind".to_string(), "value".to_string())])
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (net, header) = read_checkpoint(path)?;
        if !header.iter().any(|(k, v)| k == "kind" && v == "value") {
            return Err(ElaError::Format {
                path: path.display().to_string(),
                reason: "not a value checkpoint".into(),
            });
        }
        Ok(Self { net })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ActMode {
    Sample,
    Mean,
}

/// Draw (or take the mean of) an action and report its logprob and the value
/// estimate for the state.
pub fn policy_act(
    policy: &PolicyNet,
    value: &ValueNet,
    state: &AgentState,
    mode: ActMode,
    rng: &mut ChaCha8Rng,
) -> Result<(Action, f64, f64)> {
    let mean = policy.mean(state)?;
    let mut raw = [0.0; ACTION_DIM];
    for i in 0..ACTION_DIM {
        raw[i] = match mode {
            ActMode::Mean => mean[i],
            ActMode::Sample => {
                let std = policy.log_std[i].exp();
                let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
                let u2: f64 = rng.gen_range(0.0..1.0);
                // Box-Muller keeps the draw count per action fixed.
                let z = (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos();
                mean[i] + std * z
            }
        };
    }
    let action = Action {
        raw,
        params: decode_action(&raw),
    };
    let lp = policy.logprob(state, &raw)?;
    let v = value.value(state)?;
    Ok((action, lp, v))
}

/// Reward-shaping constants; none are fixed by theory, all are reported with
/// every run.
#[derive(Debug, Clone, PartialEq)]
pub struct RewardConfig {
    /// Bonus for fooling the whole surrogate ensemble.
    pub r_success: f64,
    /// Per-decision-step penalty.
    pub alpha: f64,
    /// Per-surrogate confidence weights (all 1 by default).
    pub c: Vec<f64>,
    /// Beam-width pivot in pixels: wider beams than this are penalized.
    pub omega0: f64,
    pub r_omega: f64,
    pub r_lambda: f64,
    /// Weight of the attack reward in the total.
    pub gamma1: f64,
    /// Weight of the appearance reward in the total.
    pub gamma2: f64,
    pub lambda_min: f64,
    pub lambda_max: f64,
}

impl Default for RewardConfig {
    fn default() -> Self {
        Self {
            r_success: 10.0,
            alpha: 0.1,
            c: vec![1.0; 3],
            omega0: 8.0,
            r_omega: 0.05,
            r_lambda: 0.5,
            gamma1: 1.0,
            gamma2: 0.2,
            lambda_min: LAMBDA_MIN,
            lambda_max: LAMBDA_MAX,
        }
    }
}

impl RewardConfig {
    pub fn validate(&self) -> Result<()> {
        if self.r_success <= 0.0 || self.alpha < 0.0 || self.gamma1 < 0.0 || self.gamma2 < 0.0 {
            return Err(ElaError::Config(
                "need r_success > 0 and alpha, gamma1, gamma2 >= 0".into(),
            ));
        }
        if self.lambda_min >= self.lambda_max {
            return Err(ElaError::Config("lambda_min must be < lambda_max".into()));
        }
        Ok(())
    }

    /// Header entries recording every constant, embedded in checkpoints and
    /// reports.
    pub fn header(&self) -> Vec<(String, String)> {
        vec![
            ("reward.r_success".into(), format!("{}", self.r_success)),
            ("reward.alpha".into(), format!("{}", self.alpha)),
            (
                "reward.c".into(),
                self.c.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(","),
            ),
            ("reward.omega0".into(), format!("{}", self.omega0)),
            ("reward.r_omega".into(), format!("{}", self.r_omega)),
            ("reward.r_lambda".into(), format!("{}", self.r_lambda)),
            ("reward.gamma1".into(), format!("{}", self.gamma1)),
            ("reward.gamma2".into(), format!("{}", self.gamma2)),
        ]
    }
}

/// Sign with sign(0) = 0 (f64::signum maps +0.0 to 1.0, which is not wanted
/// at exact range endpoints).
fn sign0(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Attack reward: success bonus or mean weighted surrogate confidence
/// penalty, either way minus the step cost.
pub fn reward_attack(
    score: &EnsembleScore,
    success: bool,
    n_steps: usize,
    cfg: &RewardConfig,
) -> Result<f64> {
    if score.confidences.is_empty() {
        return Err(ElaError::Argument("empty ensemble score".into()));
    }
    if n_steps == 0 {
        return Err(ElaError::Argument("n_steps must be >= 1".into()));
    }
    let step_cost = cfg.alpha * n_steps as f64;
    if success {
        return Ok(cfg.r_success - step_cost);
    }
    let n = score.confidences.len();
    let weighted: f64 = score
        .confidences
        .iter()
        .enumerate()
        .map(|(i, f)| cfg.c.get(i).copied().unwrap_or(1.0) * f)
        .sum();
    Ok(-weighted / n as f64 - step_cost)
}

/// Appearance reward: narrow-beam bonus plus in-spectrum indicator.
pub fn reward_appear(params: &LaserParams, cfg: &RewardConfig) -> f64 {
    let width_term = (cfg.omega0 - params.omega) * cfg.r_omega;
    let in_band = (params.lambda - cfg.lambda_min) * (cfg.lambda_max - params.lambda);
    width_term + sign0(in_band) * cfg.r_lambda
}

pub fn reward_total(r_att: f64, r_app: f64, cfg: &RewardConfig) -> f64 {
    cfg.gamma1 * r_att + cfg.gamma2 * r_app
}

/// One rollout step.
#[derive(Debug, Clone)]
pub struct Transition {
    pub state: AgentState,
    pub action: Action,
    pub logprob: f64,
    pub value: f64,
    pub reward: f64,
    pub done: bool,
    pub advantage: f64,
    pub ret: f64,
}

/// Ordered transitions for one or more concatenated episodes.
#[derive(Debug, Clone, Default)]
pub struct RolloutBuffer {
    pub steps: Vec<Transition>,
}

/// Generalized advantage estimation over the buffer, in place. Episodes are
/// delimited by `done`; the value after a terminal (or after the final step)
/// is taken as zero. Advantages are left unnormalized here; `ppo_update`
/// normalizes per update batch.
pub fn compute_gae(buffer: &mut RolloutBuffer, gamma: f64, lam: f64) -> Result<()> {
    if buffer.steps.is_empty() {
        return Err(ElaError::Argument("empty rollout buffer".into()));
    }
    let mut next_value = 0.0;
    let mut next_adv = 0.0;
    for t in (0..buffer.steps.len()).rev() {
        let s = &buffer.steps[t];
        let nonterminal = if s.done { 0.0 } else { 1.0 };
        let delta = s.reward + gamma * next_value * nonterminal - s.value;
        let adv = delta + gamma * lam * nonterminal * next_adv;
        next_adv = adv;
        next_value = s.value;
        let s = &mut buffer.steps[t];
        s.advantage = adv;
        s.ret = adv + s.value;
    }
    Ok(())
}
