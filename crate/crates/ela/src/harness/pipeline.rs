//! Experiment stages. Every stage is deterministic given the run config:
//! datasets are regenerated from the scoped seed rather than reread, so a
//! stage depends only on `config.txt` and upstream checkpoints.
//!
//! Wall-clock measurements go to separate `timing.*` files; everything else
//! in an output directory is byte-stable across reruns.

use super::{stage_seed, RunConfig};
use crate::attack::{
    attack_route, baseline_random, baseline_random_search, baseline_static_eot, oracle_grid,
    AttackTrace, FrameTrace, GRID_FINE, VictimPool,
};
use crate::agent::{train_agent, PolicyNet};
use crate::classify::{
    crop_sign, crop_to_input, per_class_accuracy, train_model_zoo, Classifier, LabelledCrop,
};
use crate::error::{ElaError, Result};
use crate::percept::{evaluate_miou, ptn_train, PtnModel};
use crate::scene::{
    generate_class_dataset, write_class_dataset, ClassDataset, FrameRecord, SignClass,
};
use std::path::{Path, PathBuf};
use std::time::Instant;

pub fn write_run_config(cfg: &RunConfig, out: &Path) -> Result<()> {
    std::fs::create_dir_all(out)?;
    std::fs::write(out.join("config.txt"), cfg.canonical_text())?;
    std::fs::write(out.join("config_hash.txt"), format!("{}\n", cfg.hash()))?;
    Ok(())
}

/// Deterministic per-class dataset for this run.
pub fn dataset_for(cfg: &RunConfig, class: SignClass) -> Result<ClassDataset> {
    let world = crate::scene::WorldConfig::default_for_class(class);
    generate_class_dataset(
        &world,
        cfg.scene_routes,
        cfg.scene_frames,
        cfg.scene_held_out,
        stage_seed(cfg, "scene").child(class.name()),
    )
}

/// Render and write every class dataset (all seven classes, so the
/// classifier corpus is inspectable too).
pub fn gen_scenes(cfg: &RunConfig, out: &Path) -> Result<()> {
    write_run_config(cfg, out)?;
    for &class in &SignClass::ALL {
        let ds = dataset_for(cfg, class)?;
        write_class_dataset(&ds, &out.join("dataset").join(class.name()))?;
    }
    Ok(())
}

fn corpus(cfg: &RunConfig) -> Result<(Vec<LabelledCrop>, Vec<LabelledCrop>)> {
    let mut train = Vec::new();
    let mut test = Vec::new();
    for &class in &SignClass::ALL {
        let ds = dataset_for(cfg, class)?;
        for f in ds.train_frames() {
            train.push(LabelledCrop {
                input: crop_to_input(&crop_sign(&f.image, &f.geometry)?),
                label: f.label,
            });
        }
        for f in ds.test_frames() {
            test.push(LabelledCrop {
                input: crop_to_input(&crop_sign(&f.image, &f.geometry)?),
                label: f.label,
            });
        }
    }
    Ok((train, test))
}

fn classifier_dir(out: &Path) -> PathBuf {
    out.join("classifiers")
}

/// Train the surrogate ensemble and the held-out victims on crops of all
/// seven classes; write checkpoints and a per-class accuracy table.
pub fn train_classifier_stage(cfg: &RunConfig, out: &Path) -> Result<()> {
    write_run_config(cfg, out)?;
    let (train, test) = corpus(cfg)?;
    let (surrogates, victims) =
        train_model_zoo(&train, &test, stage_seed(cfg, "classify"), &cfg.classifier)?;
    let dir = classifier_dir(out);
    std::fs::create_dir_all(&dir)?;
    let mut csv = String::from("model,width,clean_accuracy");
    for class in SignClass::ALL {
        csv.push_str(&format!(",acc_{}", class.name()));
    }
    csv.push('\n');
    let mut row = |name: &str, model: &Classifier| -> Result<()> {
        csv.push_str(&format!(
            "{name},{},{:.4}",
            model.width, model.clean_accuracy
        ));
        for (_, _, acc) in per_class_accuracy(model, &test)? {
            csv.push_str(&format!(",{acc:.4}"));
        }
        csv.push('\n');
        Ok(())
    };
    for (i, m) in surrogates.iter().enumerate() {
        m.save(&dir.join(format!("surrogate_{i}.ckpt")))?;
        row(&format!("surrogate_{i}"), m)?;
    }
    for (i, m) in victims.iter().enumerate() {
        m.save(&dir.join(format!("victim_{i}.ckpt")))?;
        row(&format!("victim_{i}"), m)?;
    }
    std::fs::write(dir.join("accuracy.csv"), csv)?;
    Ok(())
}

pub fn load_surrogates(out: &Path) -> Result<Vec<Classifier>> {
    (0..3)
        .map(|i| Classifier::load(&classifier_dir(out).join(format!("surrogate_{i}.ckpt"))))
        .collect()
}

pub fn load_victims(out: &Path) -> Result<Vec<Classifier>> {
    (0..2)
        .map(|i| Classifier::load(&classifier_dir(out).join(format!("victim_{i}.ckpt"))))
        .collect()
}

/// Train one perspective network per configured class; record held-out mIOU
/// (deterministic) and wall-clock seconds (timing file).
pub fn train_ptn_stage(cfg: &RunConfig, out: &Path) -> Result<()> {
    write_run_config(cfg, out)?;
    let dir = out.join("ptn");
    std::fs::create_dir_all(&dir)?;
    let mut miou_csv = String::from("class,miou_test,miou_train\n");
    let mut timing_csv = String::from("class,train_seconds\n");
    for &class in &cfg.classes {
        let ds = dataset_for(cfg, class)?;
        let train_set: Vec<&FrameRecord> = ds.train_frames().collect();
        let sample = train_set
            .first()
            .ok_or_else(|| ElaError::Config("empty train split".into()))?;
        let ai = &ds.world.attacker_intrinsics;
        let (aw, ah) = (ai.width as f64, ai.height as f64);
        let start = Instant::now();
        let result = ptn_train(
            &train_set,
            aw,
            ah,
            sample.image.width as f64,
            sample.image.height as f64,
            class.shape(),
            &cfg.ptn,
            stage_seed(cfg, "ptn").child(class.name()),
        )?;
        let secs = start.elapsed().as_secs_f64();
        let test_frames: Vec<&FrameRecord> = ds.test_frames().collect();
        let (miou_test, _) = evaluate_miou(&result.model, &test_frames)?;
        let train_frames: Vec<&FrameRecord> = ds.train_frames().collect();
        let (miou_train, _) = evaluate_miou(&result.model, &train_frames)?;
        result.model.save(&dir.join(format!("{}.ckpt", class.name())))?;
        miou_csv.push_str(&format!(
            "{},{miou_test:.4},{miou_train:.4}\n",
            class.name()
        ));
        timing_csv.push_str(&format!("{},{secs:.2}\n", class.name()));
    }
    std::fs::write(dir.join("miou.csv"), miou_csv)?;
    std::fs::write(dir.join("timing.csv"), timing_csv)?;
    Ok(())
}

pub fn load_ptn(out: &Path, class: SignClass) -> Result<PtnModel> {
    PtnModel::load(&out.join("ptn").join(format!("{}.ckpt", class.name())))
}

/// Train the laser policy per class against the surrogate ensemble.
pub fn train_agent_stage(cfg: &RunConfig, out: &Path) -> Result<()> {
    write_run_config(cfg, out)?;
    let surrogates = load_surrogates(out)?;
    for &class in &cfg.classes {
        let ds = dataset_for(cfg, class)?;
        let ptn = load_ptn(out, class)?;
        let art = train_agent(
            &ds,
            &ptn,
            &surrogates,
            &cfg.agent,
            stage_seed(cfg, "agent").child(class.name()),
        )?;
        art.save(&out.join("agent").join(class.name()), &cfg.agent.reward)?;
    }
    Ok(())
}

fn trace_csv(trace: &AttackTrace, route_ids: &[usize]) -> (String, String) {
    let n_victims = trace.frames.first().map_or(0, |f| f.victims.len());
    let mut head = String::from("route,frame,skipped,steps,phi,omega,lambda,surrogate_success");
    for v in 0..n_victims {
        head.push_str(&format!(",victim{v}_label,victim{v}_miss"));
    }
    head.push('\n');
    let mut timing = String::from("route,frame,ms\n");
    for (f, &route) in trace.frames.iter().zip(route_ids) {
        head.push_str(&format!(
            "{route},{},{},{},{:.6},{:.6},{:.6},{}",
            f.frame_id,
            u8::from(f.skipped),
            f.steps,
            f.params.phi,
            f.params.omega,
            f.params.lambda,
            u8::from(f.surrogate_success),
        ));
        for &(label, miss) in &f.victims {
            head.push_str(&format!(",{label},{}", u8::from(miss)));
        }
        head.push('\n');
        timing.push_str(&format!("{route},{},{:.3}\n", f.frame_id, f.ms));
    }
    (head, timing)
}

fn merge_traces(mut traces: Vec<(usize, AttackTrace)>) -> (AttackTrace, Vec<usize>) {
    let mut frames: Vec<FrameTrace> = Vec::new();
    let mut route_ids = Vec::new();
    let n_victims = traces
        .first()
        .map_or(0, |(_, t)| t.frames.first().map_or(0, |f| f.victims.len()));
    for (route, t) in traces.drain(..) {
        for f in t.frames {
            route_ids.push(route);
            frames.push(f);
        }
    }
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
    (
        AttackTrace {
            asr: asr.into_iter().map(|x| x / n).collect(),
            surrogate_asr: surr / n,
            mean_latency_ms: ms / n,
            frames,
        },
        route_ids,
    )
}

pub(crate) fn percentile(sorted: &[f64], p: f64) -> f64 {
    if sorted.is_empty() {
        return f64::NAN;
    }
    let idx = ((sorted.len() as f64 - 1.0) * p).round() as usize;
    sorted[idx]
}

fn write_outcome(
    dir: &Path,
    method: &str,
    cfg: &RunConfig,
    class: SignClass,
    trace: &AttackTrace,
    route_ids: &[usize],
    clean_asr: Option<&[f64]>,
) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let (trace_text, timing_text) = trace_csv(trace, route_ids);
    std::fs::write(dir.join("trace.csv"), trace_text)?;
    std::fs::write(dir.join("timing.csv"), timing_text)?;
    let mean_steps = trace.frames.iter().map(|f| f.steps as f64).sum::<f64>()
        / trace.frames.len().max(1) as f64;
    let mut summary = serde_json::json!({
        "method": method,
        "class": class.name(),
        "config_hash": cfg.hash(),
        "seed": cfg.seed,
        "frames": trace.frames.len(),
        "asr_victims": trace.asr,
        "surrogate_asr": trace.surrogate_asr,
        "mean_steps": mean_steps,
        "reward_constants": cfg.reward().header().into_iter()
            .map(|(k, v)| (k, serde_json::Value::String(v)))
            .collect::<serde_json::Map<_, _>>(),
    });
    if let Some(clean) = clean_asr {
        summary["clean_asr_victims"] = serde_json::json!(clean);
    }
    std::fs::write(
        dir.join("summary.json"),
        serde_json::to_string_pretty(&summary).map_err(|e| ElaError::Format {
            path: dir.join("summary.json").display().to_string(),
            reason: e.to_string(),
        })? + "\n",
    )?;
    let mut ms: Vec<f64> = trace.frames.iter().map(|f| f.ms).collect();
    ms.sort_by(f64::total_cmp);
    let timing = serde_json::json!({
        "median_ms": percentile(&ms, 0.5),
        "p95_ms": percentile(&ms, 0.95),
        "mean_ms": trace.mean_latency_ms,
        "note": "decision loop wall clock, disk I/O excluded",
    });
    std::fs::write(
        dir.join("timing.json"),
        serde_json::to_string_pretty(&timing).unwrap() + "\n",
    )?;
    Ok(())
}

/// Run the trained agent over every held-out route of every configured
/// class; write traces, adversarial frames, and summaries.
pub fn attack_stage(cfg: &RunConfig, out: &Path) -> Result<()> {
    write_run_config(cfg, out)?;
    let surrogates = load_surrogates(out)?;
    for &class in &cfg.classes {
        let ds = dataset_for(cfg, class)?;
        let ptn = load_ptn(out, class)?;
        let policy = PolicyNet::load(&out.join("agent").join(class.name()).join("policy.ckpt"))?;
        let victims = VictimPool::new(load_victims(out)?);
        let dir = out.join("attack").join(class.name());
        let frames_dir = dir.join("frames");
        std::fs::create_dir_all(&frames_dir)?;
        let mut traces = Vec::new();
        let seed = stage_seed(cfg, "attack").child(class.name());
        for (r, route) in ds.test_routes.iter().enumerate() {
            let mut saved = Vec::new();
            let trace = attack_route(
                &route.frames,
                &ptn,
                &policy,
                &surrogates,
                &victims,
                &cfg.attack,
                seed.child_idx(r as u64),
                Some(&mut saved),
            )?;
            for (img, f) in saved.iter().zip(&trace.frames) {
                img.write_ppm(&frames_dir.join(format!("r{r}_f{:03}.ppm", f.frame_id)))?;
            }
            traces.push((r, trace));
        }
        // Clean-frame ASR: victims on unattacked frames.
        let mut clean = vec![0.0; victims.models.len()];
        let mut n_clean = 0usize;
        for route in &ds.test_routes {
            for f in &route.frames {
                for (v, (_, miss)) in victims
                    .eval(&f.image, &f.geometry, f.label)?
                    .into_iter()
                    .enumerate()
                {
                    clean[v] += f64::from(u8::from(miss));
                }
                n_clean += 1;
            }
        }
        for c in &mut clean {
            *c /= n_clean as f64;
        }
        let (merged, route_ids) = merge_traces(traces);
        write_outcome(&dir, "agent", cfg, class, &merged, &route_ids, Some(&clean))?;
    }
    Ok(())
}

/// Run all three baselines over the same held-out frames as the agent.
pub fn baseline_stage(cfg: &RunConfig, out: &Path) -> Result<()> {
    write_run_config(cfg, out)?;
    let surrogates = load_surrogates(out)?;
    for &class in &cfg.classes {
        let ds = dataset_for(cfg, class)?;
        let ptn = load_ptn(out, class)?;
        let base = out.join("baselines").join(class.name());
        let seed = stage_seed(cfg, "baseline").child(class.name());

        for (method, budgeted) in [("random", false), ("search", true)] {
            let victims = VictimPool::new(load_victims(out)?);
            let mut traces = Vec::new();
            for (r, route) in ds.test_routes.iter().enumerate() {
                let s = seed.child(method).child_idx(r as u64);
                let t = if budgeted {
                    baseline_random_search(
                        &route.frames, &ptn, &surrogates, &victims, &cfg.attack, s,
                    )?
                } else {
                    baseline_random(&route.frames, &ptn, &surrogates, &victims, &cfg.attack, s)?
                };
                traces.push((r, t));
            }
            let (merged, route_ids) = merge_traces(traces);
            write_outcome(
                &base.join(method), method, cfg, class, &merged, &route_ids, None,
            )?;
        }

        // Static beam: fit once on the train split, apply per test route.
        let victims = VictimPool::new(load_victims(out)?);
        let train: Vec<&FrameRecord> = ds.train_frames().collect();
        let mut traces = Vec::new();
        let mut fitted = None;
        for (r, route) in ds.test_routes.iter().enumerate() {
            let (params, t) = baseline_static_eot(
                &train,
                &route.frames,
                &ptn,
                &surrogates,
                &victims,
                &cfg.attack,
                seed.child("static"),
            )?;
            fitted = Some(params);
            traces.push((r, t));
        }
        let (merged, route_ids) = merge_traces(traces);
        let dir = base.join("static");
        write_outcome(&dir, "static", cfg, class, &merged, &route_ids, None)?;
        if let Some(p) = fitted {
            std::fs::write(
                dir.join("params.txt"),
                format!("phi = {:.6}\nomega = {:.6}\nlambda = {:.6}\n", p.phi, p.omega, p.lambda),
            )?;
        }
    }
    Ok(())
}

/// Fine-grid reachability oracle vs the trained agent on held-out frames.
pub fn oracle_stage(cfg: &RunConfig, out: &Path) -> Result<()> {
    write_run_config(cfg, out)?;
    let surrogates = load_surrogates(out)?;
    let dir = out.join("oracle");
    std::fs::create_dir_all(&dir)?;
    for &class in &cfg.classes {
        let ds = dataset_for(cfg, class)?;
        let ptn = load_ptn(out, class)?;
        let policy = PolicyNet::load(&out.join("agent").join(class.name()).join("policy.ckpt"))?;
        let victims = VictimPool::new(load_victims(out)?);
        let seed = stage_seed(cfg, "oracle").child(class.name());

        // Agent outcomes per frame, with normal carry-over.
        let mut agent_flags = Vec::new();
        for (r, route) in ds.test_routes.iter().enumerate() {
            let t = attack_route(
                &route.frames,
                &ptn,
                &policy,
                &surrogates,
                &victims,
                &cfg.attack,
                seed.child_idx(r as u64),
                None,
            )?;
            for f in &t.frames {
                agent_flags.push((r, f.frame_id, f.surrogate_success));
            }
        }

        let mut csv = String::from("route,frame,oracle_success,agent_success\n");
        let mut budget = cfg.oracle_frames;
        let mut idx = 0usize;
        for route in &ds.test_routes {
            for frame in &route.frames {
                if budget == 0 {
                    break;
                }
                let (r, fid, agent_ok) = agent_flags[idx];
                let res = oracle_grid(frame, &ptn, &surrogates, &cfg.attack, GRID_FINE)?;
                csv.push_str(&format!(
                    "{r},{fid},{},{}\n",
                    u8::from(res.success_exists),
                    u8::from(agent_ok)
                ));
                budget -= 1;
                idx += 1;
            }
        }
        std::fs::write(dir.join(format!("{}.csv", class.name())), csv)?;
    }
    Ok(())
}
