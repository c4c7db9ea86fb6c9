//! Rollout collection over five-frame route segments and the training loop.

use super::{
    compute_gae, policy_act, ppo_update, ActMode, AgentState, PolicyNet, PpoConfig, PpoDiagnostics,
    PpoOptim, RewardConfig, RolloutBuffer, Transition, ValueNet,
};
use super::{reward_appear, reward_attack, reward_total};
use crate::classify::{crop_sign, ensemble_eval, Classifier, SuccessRule};
use crate::error::{ElaError, Result};
use crate::laser::{composite, LaserParams};
use crate::percept::{ptn_forward, render_shape_mask, Mask, PtnModel};
use crate::rng::SeedNode;
use crate::scene::{ClassDataset, FrameRecord, SignGeometry};
use rand::Rng;
use rayon::prelude::*;
use std::path::Path;

/// Routes are cut into distinct continuous five-frame training segments.
pub const ROLLOUT_SEGMENT_LEN: usize = 5;

#[derive(Debug, Clone)]
pub struct AgentTrainConfig {
    pub epochs: usize,
    pub segments_per_epoch: usize,
    /// Decision-step budget per frame.
    pub n_max: usize,
    pub gamma: f64,
    pub lam: f64,
    pub hidden: Vec<usize>,
    pub ppo: PpoConfig,
    pub reward: RewardConfig,
    pub rule: SuccessRule,
    /// Laser blend strength.
    pub beta: f64,
}

impl Default for AgentTrainConfig {
    fn default() -> Self {
        Self {
            epochs: 100,
            segments_per_epoch: 8,
            n_max: 10,
            gamma: 0.99,
            lam: 0.95,
            hidden: vec![64, 64],
            ppo: PpoConfig::default(),
            reward: RewardConfig::default(),
            rule: SuccessRule::All,
            beta: crate::laser::BETA_DEFAULT,
        }
    }
}

/// One epoch's training curve row.
#[derive(Debug, Clone)]
pub struct EpochStats {
    pub epoch: usize,
    /// Mean cumulative reward per frame.
    pub mean_reward: f64,
    /// Mean decision steps per frame.
    pub mean_steps: f64,
    /// Fraction of rollout frames where the ensemble was fooled.
    pub train_asr: f64,
    pub diagnostics: PpoDiagnostics,
}

#[derive(Debug, Clone)]
pub struct AgentArtifacts {
    pub policy: PolicyNet,
    pub value: ValueNet,
    pub curves: Vec<EpochStats>,
}

impl AgentArtifacts {
    pub fn save(&self, dir: &Path, reward: &RewardConfig) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        self.policy.save(&dir.join("policy.ckpt"), &reward.header())?;
        self.value.save(&dir.join("value.ckpt"))?;
        let mut csv = String::from("epoch,mean_reward,mean_steps,train_asr\n");
        for row in &self.curves {
            csv.push_str(&format!(
                "{},{:.6},{:.4},{:.4}\n",
                row.epoch, row.mean_reward, row.mean_steps, row.train_asr
            ));
        }
        std::fs::write(dir.join("curves.csv"), csv)?;
        Ok(())
    }
}

/// Per-frame rollout bookkeeping shared by training and inference: runs the
/// inner decision loop on one frame and returns the transitions plus the
/// carried-over parameters.
#[allow(clippy::too_many_arguments)]
pub(crate) fn rollout_frame(
    frame: &FrameRecord,
    geom: &SignGeometry,
    mask: &Mask,
    policy: &PolicyNet,
    value: &ValueNet,
    surrogates: &[Classifier],
    cfg: &AgentTrainConfig,
    start_params: LaserParams,
    last_frame: bool,
    rng: &mut rand_chacha::ChaCha8Rng,
) -> Result<(Vec<Transition>, LaserParams, bool)> {
    let img_w = frame.image.width as f64;
    let img_h = frame.image.height as f64;
    let anchor = (geom.x_center, geom.y_center);
    let mut params = start_params;
    let mut out = Vec::new();
    let mut fooled = false;
    for step in 1..=cfg.n_max {
        let state = AgentState::encode(geom, &params, img_w, img_h)?;
        let (action, logprob, v) = policy_act(policy, value, &state, ActMode::Sample, rng)?;
        let attacked = composite(&frame.image, mask, anchor, &action.params, cfg.beta)?;
        let crop = crop_sign(&attacked, geom)?;
        let score = ensemble_eval(surrogates, &crop, frame.label, cfg.rule)?;
        fooled = score.success;
        let r_att = reward_attack(&score, fooled, step, &cfg.reward)?;
        let r_app = reward_appear(&action.params, &cfg.reward);
        let reward = reward_total(r_att, r_app, &cfg.reward);
        let frame_over = fooled || step == cfg.n_max;
        out.push(Transition {
            state,
            action,
            logprob,
            value: v,
            reward,
            done: last_frame && frame_over,
            advantage: 0.0,
            ret: 0.0,
        });
        params = action.params;
        if fooled {
            break;
        }
    }
    Ok((out, params, fooled))
}

struct SegmentRollout {
    steps: Vec<Transition>,
    frames: usize,
    successes: usize,
    reward_sum: f64,
}

/// Roll out one sampled segment under a frozen policy snapshot.
fn rollout_segment(
    dataset: &ClassDataset,
    ptn: &PtnModel,
    policy: &PolicyNet,
    value: &ValueNet,
    surrogates: &[Classifier],
    cfg: &AgentTrainConfig,
    seed: SeedNode,
) -> Result<SegmentRollout> {
    let mut rng = seed.rng();
    let route = &dataset.train_routes[rng.gen_range(0..dataset.train_routes.len())];
    let max_start = route.frames.len() - ROLLOUT_SEGMENT_LEN;
    let start = if max_start == 0 {
        0
    } else {
        rng.gen_range(0..=max_start)
    };
    let mut params = super::decode_action(&[0.0; 3]);
    let mut steps = Vec::new();
    let mut successes = 0;
    let mut reward_sum = 0.0;
    for k in 0..ROLLOUT_SEGMENT_LEN {
        let frame = &route.frames[start + k];
        let geom = ptn_forward(ptn, &frame.observation)?;
        let mask = render_shape_mask(&geom, frame.image.height, frame.image.width)?;
        let last = k == ROLLOUT_SEGMENT_LEN - 1;
        let (mut transitions, carried, fooled) = rollout_frame(
            frame, &geom, &mask, policy, value, surrogates, cfg, params, last, &mut rng,
        )?;
        reward_sum += transitions.iter().map(|t| t.reward).sum::<f64>();
        successes += usize::from(fooled);
        params = carried;
        steps.append(&mut transitions);
    }
    Ok(SegmentRollout {
        steps,
        frames: ROLLOUT_SEGMENT_LEN,
        successes,
        reward_sum,
    })
}

/// Train the laser-parameter policy against the surrogate ensemble on the
/// perspective network's perception of the train routes.
pub fn train_agent(
    dataset: &ClassDataset,
    ptn: &PtnModel,
    surrogates: &[Classifier],
    cfg: &AgentTrainConfig,
    seed: SeedNode,
) -> Result<AgentArtifacts> {
    cfg.reward.validate()?;
    if surrogates.is_empty() {
        return Err(ElaError::Config("no surrogate models supplied".into()));
    }
    if dataset.train_routes.is_empty() {
        return Err(ElaError::Config("dataset has no train routes".into()));
    }
    if dataset
        .train_routes
        .iter()
        .any(|r| r.frames.len() < ROLLOUT_SEGMENT_LEN)
    {
        return Err(ElaError::Config(format!(
            "every route needs >= {ROLLOUT_SEGMENT_LEN} frames"
        )));
    }
    let mut policy = PolicyNet::new(&cfg.hidden, seed.child("policy"))?;
    let mut value = ValueNet::new(&cfg.hidden, seed.child("value"))?;
    let mut optim = PpoOptim::new(&policy, &value, &cfg.ppo);
    let mut update_rng = seed.child("update").rng();
    let mut curves = Vec::with_capacity(cfg.epochs);

    for epoch in 0..cfg.epochs {
        let epoch_seed = seed.child("rollout").child_idx(epoch as u64);
        // Segments roll out in parallel against the frozen snapshot and are
        // merged in segment-index order.
        let rollouts: Vec<SegmentRollout> = (0..cfg.segments_per_epoch)
            .into_par_iter()
            .map(|s| {
                rollout_segment(
                    dataset,
                    ptn,
                    &policy,
                    &value,
                    surrogates,
                    cfg,
                    epoch_seed.child_idx(s as u64),
                )
            })
            .collect::<Result<_>>()?;

        let mut buffer = RolloutBuffer::default();
        let mut frames = 0;
        let mut successes = 0;
        let mut reward_sum = 0.0;
        for mut r in rollouts {
            frames += r.frames;
            successes += r.successes;
            reward_sum += r.reward_sum;
            buffer.steps.append(&mut r.steps);
        }
        compute_gae(&mut buffer, cfg.gamma, cfg.lam)?;
        let diagnostics = ppo_update(
            &mut policy,
            &mut value,
            &buffer,
            &cfg.ppo,
            &mut optim,
            &mut update_rng,
        )?;
        curves.push(EpochStats {
            epoch,
            mean_reward: reward_sum / frames as f64,
            mean_steps: buffer.steps.len() as f64 / frames as f64,
            train_asr: successes as f64 / frames as f64,
            diagnostics,
        });
    }
    Ok(AgentArtifacts {
        policy,
        value,
        curves,
    })
}
