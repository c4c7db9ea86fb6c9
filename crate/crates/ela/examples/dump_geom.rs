use ela::attack::{baseline_random, baseline_random_search, AttackConfig, VictimPool};
use ela::classify::Classifier;
use ela::percept::PtnModel;
use ela::rng::SeedNode;
use ela::scene::{generate_class_dataset, SignClass, WorldConfig};
use std::path::Path;

fn main() {
    let out = Path::new("/tmp/smoke3");
    let class = SignClass::Speed30;
    let world = WorldConfig::default_for_class(class);
    let ds = generate_class_dataset(&world, 10, 14, 2, SeedNode::new(42).child("scene").child("30")).unwrap();
    let surrogates: Vec<Classifier> = (0..3)
        .map(|i| Classifier::load(&out.join(format!("classifiers/surrogate_{i}.ckpt"))).unwrap())
        .collect();
    let victims: Vec<Classifier> = (0..2)
        .map(|i| Classifier::load(&out.join(format!("classifiers/victim_{i}.ckpt"))).unwrap())
        .collect();
    let ptn = PtnModel::load(&out.join("ptn/30.ckpt")).unwrap();
    for beta in [0.3, 0.4, 0.5, 0.6, 0.7] {
        let cfg = AttackConfig { beta, ..AttackConfig::default() };
        let mut surr = 0.0;
        let mut v = [0.0; 2];
        let mut s_surr = 0.0;
        let mut n = 0.0;
        for (r, route) in ds.test_routes.iter().enumerate() {
            let pool = VictimPool::new(victims.clone());
            let t = baseline_random(&route.frames, &ptn, &surrogates, &pool, &cfg, SeedNode::new(7).child_idx(r as u64)).unwrap();
            let pool2 = VictimPool::new(victims.clone());
            let t2 = baseline_random_search(&route.frames, &ptn, &surrogates, &pool2, &cfg, SeedNode::new(8).child_idx(r as u64)).unwrap();
            let k = t.frames.len() as f64;
            surr += t.surrogate_asr * k;
            v[0] += t.asr[0] * k;
            v[1] += t.asr[1] * k;
            s_surr += t2.surrogate_asr * k;
            n += k;
        }
        println!("beta {beta}: random surr {:.3} victims [{:.3},{:.3}] | search surr {:.3}", surr/n, v[0]/n, v[1]/n, s_surr/n);
    }
}
