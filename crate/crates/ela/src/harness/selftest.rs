//! Fast self-test exercising one invariant per module. Each check prints a
//! line and the whole run fails on the first violation, so a broken build is
//! caught before any long training stage starts.

use crate::agent::{
    compute_gae, policy_act, ActMode, Action, AgentState, PolicyNet, RewardConfig, RolloutBuffer,
    Transition, ValueNet, reward_appear, reward_attack,
};
use crate::classify::EnsembleScore;
use crate::error::{ElaError, Result};
use crate::laser::{composite, LaserParams};
use crate::nn::{grad_check, softmax_xent, Activation, DenseNet};
use crate::percept::{render_mask, Mask};
use crate::rng::SeedNode;
use crate::img::Image;
use crate::scene::{SignGeometry, SignShape};
use rand::Rng;

fn check(name: &str, ok: bool, detail: &str) -> Result<()> {
    if ok {
        println!("selftest {name}: ok");
        Ok(())
    } else {
        println!("selftest {name}: FAIL ({detail})");
        Err(ElaError::Numeric(format!("selftest {name} failed: {detail}")))
    }
}

fn nn_gradients() -> Result<()> {
    let net = DenseNet::new(
        &[6, 8, 4],
        &[Activation::Relu, Activation::Identity],
        SeedNode::new(11).child("selftest-nn"),
    )?;
    let input: Vec<f64> = (0..6).map(|i| 0.3 * i as f64 - 0.8).collect();
    let (out, cache) = net.forward_cached(&input)?;
    let (_, dlogits) = softmax_xent(&out, 2)?;
    let (grads, _) = net.backward(&cache, &dlogits)?;
    let input2 = input.clone();
    let report = grad_check(
        &net,
        move |n| {
            let o = n.forward(&input2)?;
            Ok(softmax_xent(&o, 2)?.0)
        },
        &grads.flat(),
        1e-5,
        1e-4,
    )?;
    check(
        "nn-gradcheck",
        report.pass,
        &format!("max rel dev {:.3e}", report.max_rel_error),
    )
}

fn gae_double_loop() -> Result<()> {
    let (gamma, lam) = (0.99, 0.95);
    let seed = SeedNode::new(4).child("selftest-gae");
    let mut rng = seed.rng();
    let n = 24;
    let mut buffer = RolloutBuffer::default();
    for t in 0..n {
        buffer.steps.push(Transition {
            state: AgentState([0.5; crate::agent::STATE_DIM]),
            action: Action {
                raw: [0.0; 3],
                params: LaserParams::new(1.0, 5.0, 550.0)?,
            },
            logprob: 0.0,
            value: rng.gen_range(-1.0..1.0),
            reward: rng.gen_range(-2.0..2.0),
            done: t % 8 == 7,
            advantage: 0.0,
            ret: 0.0,
        });
    }
    compute_gae(&mut buffer, gamma, lam)?;
    // Independent double loop: advantage_t = sum_k (gamma*lam)^k delta_{t+k}
    // truncated at the episode boundary.
    let mut max_dev: f64 = 0.0;
    for t in 0..n {
        let mut adv = 0.0;
        let mut factor = 1.0;
        for k in t..n {
            let next_v = if buffer.steps[k].done || k + 1 == n {
                0.0
            } else {
                buffer.steps[k + 1].value
            };
            let delta = buffer.steps[k].reward + gamma * next_v - buffer.steps[k].value;
            adv += factor * delta;
            if buffer.steps[k].done {
                break;
            }
            factor *= gamma * lam;
        }
        max_dev = max_dev.max((adv - buffer.steps[t].advantage).abs());
    }
    check("gae-double-loop", max_dev < 1e-12, &format!("dev {max_dev:.3e}"))
}

fn ppo_ratio_identity() -> Result<()> {
    let seed = SeedNode::new(9).child("selftest-ppo");
    let policy = PolicyNet::new(&[16, 16], seed.child("policy"))?;
    let value = ValueNet::new(&[16, 16], seed.child("value"))?;
    let mut rng = seed.child("draws").rng();
    let mut max_dev: f64 = 0.0;
    for _ in 0..16 {
        let mut s = [0.0; crate::agent::STATE_DIM];
        for v in s.iter_mut() {
            *v = rng.gen_range(0.0..1.0);
        }
        let state = AgentState(s);
        let (action, logprob, _) = policy_act(&policy, &value, &state, ActMode::Sample, &mut rng)?;
        let ratio = (policy.logprob(&state, &action.raw)? - logprob).exp();
        max_dev = max_dev.max((ratio - 1.0).abs());
    }
    check("ppo-ratio-one", max_dev < 1e-12, &format!("dev {max_dev:.3e}"))
}

fn mask_symmetry() -> Result<()> {
    let geom = SignGeometry {
        x_center: 31.5,
        y_center: 31.5,
        a: 12.0,
        b: 7.0,
        delta: 0.0,
        shape: SignShape::Circle,
    };
    let mask = render_mask(&geom, 64, 64)?;
    let mut ok = true;
    for i in 0..64 {
        for j in 0..64 {
            if mask.get(i, j) != mask.get(63 - i, j) || mask.get(i, j) != mask.get(i, 63 - j) {
                ok = false;
            }
        }
    }
    check("mask-symmetry", ok && !mask.is_empty(), "axis-aligned ellipse not mirror symmetric")
}

fn laser_outside_mask() -> Result<()> {
    let mut base = Image::new(48, 48);
    let mut rng = SeedNode::new(3).child("selftest-laser").rng();
    for v in base.data.iter_mut() {
        *v = rng.gen_range(0..=255);
    }
    let mut mask = Mask::new(48, 48);
    for x in 10..30 {
        for y in 14..34 {
            mask.set(x, y, true);
        }
    }
    let params = LaserParams::new(0.9, 4.0, 500.0)?;
    let attacked = composite(&base, &mask, (24.0, 24.0), &params, 0.7)?;
    let mut ok = true;
    for x in 0..48 {
        for y in 0..48 {
            if !mask.get(x, y) && attacked.get(x, y) != base.get(x, y) {
                ok = false;
            }
        }
    }
    check("laser-identity-outside-mask", ok, "pixel changed outside the sign mask")
}

fn reward_arithmetic() -> Result<()> {
    let cfg = RewardConfig::default();
    // Success reward at 3 steps: r_success - alpha * n.
    let score = EnsembleScore {
        confidences: vec![0.9, 0.8, 0.7],
        top1: vec![0, 0, 0],
        success: true,
    };
    let r = reward_attack(&score, true, 3, &cfg)?;
    let expect = cfg.r_success - cfg.alpha * 3.0;
    let mut ok = r == expect;
    // In-band indicator is exactly zero on the spectrum boundary.
    let on_edge = LaserParams::new(1.0, 5.0, cfg.lambda_min)?;
    let at_edge = reward_appear(&on_edge, &cfg);
    let width_only = (cfg.omega0 - on_edge.omega) * cfg.r_omega;
    ok &= at_edge == width_only;
    // Strictly inside the band the bonus is +r_lambda.
    let inside = LaserParams::new(1.0, 5.0, 550.0)?;
    ok &= reward_appear(&inside, &cfg) == width_only + cfg.r_lambda;
    check("reward-arithmetic", ok, "closed-form reward mismatch")
}

fn seeding_determinism() -> Result<()> {
    let a = SeedNode::new(7).child("stage").child_idx(3);
    let b = SeedNode::new(7).child("stage").child_idx(3);
    let c = SeedNode::new(7).child("stage").child_idx(4);
    let mut ra = a.rng();
    let mut rb = b.rng();
    let mut rc = c.rng();
    let xa: [u64; 4] = std::array::from_fn(|_| ra.gen());
    let xb: [u64; 4] = std::array::from_fn(|_| rb.gen());
    let xc: [u64; 4] = std::array::from_fn(|_| rc.gen());
    check(
        "seeding-determinism",
        a.state() == b.state() && xa == xb && xa != xc,
        "seed tree not reproducible or siblings collide",
    )
}

/// Run every check in order; returns the first failure.
pub fn run_selftest() -> Result<()> {
    nn_gradients()?;
    gae_double_loop()?;
    ppo_ratio_identity()?;
    mask_symmetry()?;
    laser_outside_mask()?;
    reward_arithmetic()?;
    seeding_determinism()?;
    println!("selftest: all checks passed");
    Ok(())
}
