//! Sign-crop classifiers: the surrogate ensemble queried during the attack
//! loop and the held-out victims used only for final ASR scoring.
//!
//! All models are small dense nets over a flattened 32x32x3 crop. Surrogates
//! and victims differ by hidden width and by seed, and the two groups are
//! asserted disjoint in both, so transfer to a victim is never trivial
//! parameter sharing.

use crate::error::{ElaError, Result};
use crate::img::Image;
use crate::nn::{
    read_checkpoint, softmax, softmax_xent, write_checkpoint, Activation, DenseNet, NetGrads,
    OptimState,
};
use crate::rng::SeedNode;
use crate::scene::{SignClass, SignGeometry};
use rand::seq::SliceRandom;
use rayon::prelude::*;
use std::path::Path;

/// Side length of the square classifier input crop.
pub const CROP_SIZE: usize = 32;
/// Fractional padding added around the ellipse bounding box before resampling.
pub const CROP_PAD: f64 = 0.1;
/// Hidden widths of the three surrogate models.
pub const SURROGATE_WIDTHS: [usize; 3] = [256, 192, 320];
/// Hidden widths of the two held-out victim models.
pub const VICTIM_WIDTHS: [usize; 2] = [288, 224];
/// Clean held-out accuracy every trained model must reach.
pub const CLEAN_ACCURACY_FLOOR: f64 = 0.98;

/// How the per-model outcomes combine into one ensemble success flag.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SuccessRule {
    /// Every surrogate must mispredict the true label.
    All,
    /// At least one surrogate mispredicts.
    Any,
    /// Strictly more than half mispredict.
    Majority,
}

impl SuccessRule {
    pub fn name(self) -> &'static str {
        match self {
            SuccessRule::All => "all",
            SuccessRule::Any => "any",
            SuccessRule::Majority => "majority",
        }
    }

    pub fn from_name(name: &str) -> Result<Self> {
        match name {
            "all" => Ok(SuccessRule::All),
            "any" => Ok(SuccessRule::Any),
            "majority" => Ok(SuccessRule::Majority),
            other => Err(ElaError::Argument(format!(
                "unknown success rule '{other}' (expected all/any/majority)"
            ))),
        }
    }
}

/// A trained crop classifier plus the metadata needed to audit it.
#[derive(Debug, Clone)]
pub struct Classifier {
    pub net: DenseNet,
    pub width: usize,
    pub seed_tag: u64,
    pub clean_accuracy: f64,
}

/// Per-model true-class confidences and the combined success flag for one crop.
#[derive(Debug, Clone)]
pub struct EnsembleScore {
    /// True-class softmax probability under each surrogate.
    pub confidences: Vec<f64>,
    pub top1: Vec<usize>,
    pub success: bool,
}

/// One labelled training example: flattened crop plus class label.
#[derive(Debug, Clone)]
pub struct LabelledCrop {
    pub input: Vec<f64>,
    pub label: usize,
}

#[derive(Debug, Clone)]
pub struct TrainClassifierConfig {
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
    pub accuracy_floor: f64,
}

impl Default for TrainClassifierConfig {
    fn default() -> Self {
        Self {
            epochs: 40,
            batch: 32,
            lr: 1e-3,
            accuracy_floor: CLEAN_ACCURACY_FLOOR,
        }
    }
}

/// Axis-aligned bounding box of the sign ellipse, padded by `CROP_PAD`.
/// Returns (x0, y0, width, height) in pixels.
pub fn crop_box(geom: &SignGeometry) -> (f64, f64, f64, f64) {
    let (sn, cs) = geom.delta.sin_cos();
    let hx = ((geom.a * cs).powi(2) + (geom.b * sn).powi(2)).sqrt();
    let hy = ((geom.a * sn).powi(2) + (geom.b * cs).powi(2)).sqrt();
    let hw = hx * (1.0 + CROP_PAD);
    let hh = hy * (1.0 + CROP_PAD);
    (geom.x_center - hw, geom.y_center - hh, 2.0 * hw, 2.0 * hh)
}

/// Cut the padded ellipse bounding box out of `frame` and resample it to
/// `CROP_SIZE` x `CROP_SIZE` bilinearly.
pub fn crop_sign(frame: &Image, geom: &SignGeometry) -> Result<Image> {
    let (x0, y0, bw, bh) = crop_box(geom);
    if bw < 4.0 || bh < 4.0 {
        return Err(ElaError::Argument(format!(
            "crop box {bw:.2}x{bh:.2} px is degenerate (< 4 px)"
        )));
    }
    let mut crop = Image::new(CROP_SIZE, CROP_SIZE);
    for j in 0..CROP_SIZE {
        let sy = y0 + (j as f64 + 0.5) / CROP_SIZE as f64 * bh - 0.5;
        for i in 0..CROP_SIZE {
            let sx = x0 + (i as f64 + 0.5) / CROP_SIZE as f64 * bw - 0.5;
            crop.set(i, j, frame.sample_bilinear(sx, sy));
        }
    }
    Ok(crop)
}

/// Flatten a crop into the classifier input layout (row-major, RGB-interleaved).
pub fn crop_to_input(crop: &Image) -> Vec<f64> {
    let mut v = Vec::with_capacity(crop.width * crop.height * 3);
    for y in 0..crop.height {
        for x in 0..crop.width {
            v.extend_from_slice(&crop.get(x, y));
        }
    }
    v
}

fn class_count() -> usize {
    SignClass::ALL.len()
}

/// Fraction of `data` classified correctly by `net`.
fn accuracy(net: &DenseNet, data: &[LabelledCrop]) -> Result<f64> {
    if data.is_empty() {
        return Err(ElaError::Argument("empty evaluation set".into()));
    }
    let hits: usize = data
        .par_iter()
        .map(|ex| {
            let logits = net.forward(&ex.input)?;
            Ok(usize::from(argmax(&logits) == ex.label))
        })
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .sum();
    Ok(hits as f64 / data.len() as f64)
}

pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x > v[best] {
            best = i;
        }
    }
    best
}

/// Train one crop classifier with Adam + minibatch cross-entropy.
///
/// `train` must be class-balanced with at least 100 examples per class;
/// `test` is the held-out split the accuracy floor is checked on.
pub fn train_classifier(
    train: &[LabelledCrop],
    test: &[LabelledCrop],
    width: usize,
    seed: SeedNode,
    cfg: &TrainClassifierConfig,
) -> Result<Classifier> {
    let c = class_count();
    let mut per_class = vec![0usize; c];
    for ex in train {
        if ex.label >= c {
            return Err(ElaError::Argument(format!("label {} out of range", ex.label)));
        }
        per_class[ex.label] += 1;
    }
    if let Some((label, &n)) = per_class.iter().enumerate().min_by_key(|(_, &n)| n) {
        if n < 100 {
            return Err(ElaError::Argument(format!(
                "class {label} has only {n} training crops (need >= 100)"
            )));
        }
    }
    let in_dim = CROP_SIZE * CROP_SIZE * 3;
    let sizes = [in_dim, width, 128, c];
    let acts = [Activation::Relu, Activation::Relu, Activation::Identity];
    let mut net = DenseNet::new(&sizes, &acts, seed.child("init"))?;
    let mut opt = OptimState::new(net.param_count(), cfg.lr);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut shuffle_rng = seed.child("shuffle").rng();

    for _epoch in 0..cfg.epochs {
        order.shuffle(&mut shuffle_rng);
        for chunk in order.chunks(cfg.batch) {
            // One shared accumulator per minibatch: a per-sample gradient
            // buffer for the 3072-wide input layer would dominate runtime.
            let mut total = NetGrads::zeros_like(&net);
            for &idx in chunk {
                let ex = &train[idx];
                let (logits, cache) = net.forward_cached(&ex.input)?;
                let (_, dlogits) = softmax_xent(&logits, ex.label)?;
                net.backward_accumulate(&cache, &dlogits, &mut total)?;
            }
            total.scale(1.0 / chunk.len() as f64);
            let mut params = net.params_flat();
            opt.apply(&mut params, &total.flat())?;
            net.set_params_flat(&params)?;
        }
    }

    let clean_accuracy = accuracy(&net, test)?;
    if clean_accuracy < cfg.accuracy_floor {
        return Err(ElaError::Training(format!(
            "classifier width {width} reached only {clean_accuracy:.4} held-out accuracy \
             (floor {:.2})",
            cfg.accuracy_floor
        )));
    }
    Ok(Classifier {
        net,
        width,
        seed_tag: seed.state(),
        clean_accuracy,
    })
}

impl Classifier {
    /// Softmax class probabilities for one crop.
    pub fn predict(&self, crop: &Image) -> Result<Vec<f64>> {
        let logits = self.net.forward(&crop_to_input(crop))?;
        Ok(softmax(&logits))
    }

    pub fn top1(&self, crop: &Image) -> Result<usize> {
        Ok(argmax(&self.net.forward(&crop_to_input(crop))?))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let classes: Vec<&str> = SignClass::ALL.iter().map(|c| c.name()).collect();
        let header = vec![
            ("kind".to_string(), "classifier".to_string()),
            ("classes".to_string(), classes.join(",")),
            ("width".to_string(), self.width.to_string()),
            ("seed_tag".to_string(), self.seed_tag.to_string()),
            (
                "clean_accuracy".to_string(),
                format!("{:.17e}", self.clean_accuracy),
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
        if get("kind")? != "classifier" {
            return Err(ElaError::Format {
                path: path.display().to_string(),
                reason: "not a classifier checkpoint".into(),
            });
        }
        let expected: Vec<&str> = SignClass::ALL.iter().map(|c| c.name()).collect();
        if get("classes")? != expected.join(",") {
            return Err(ElaError::Format {
                path: path.display().to_string(),
                reason: "class list does not match this build".into(),
            });
        }
        let bad = |reason: &str| ElaError::Format {
            path: path.display().to_string(),
            reason: reason.to_string(),
        };
        Ok(Self {
            width: get("width")?.parse().map_err(|_| bad("bad width"))?,
            seed_tag: get("seed_tag")?.parse().map_err(|_| bad("bad seed_tag"))?,
            clean_accuracy: get("clean_accuracy")?
                .parse()
                .map_err(|_| bad("bad clean_accuracy"))?,
            net,
        })
    }
}

/// Score one crop against the surrogate ensemble.
pub fn ensemble_eval(
    surrogates: &[Classifier],
    crop: &Image,
    true_label: usize,
    rule: SuccessRule,
) -> Result<EnsembleScore> {
    if surrogates.is_empty() {
        return Err(ElaError::Argument("empty surrogate ensemble".into()));
    }
    let mut confidences = Vec::with_capacity(surrogates.len());
    let mut top1 = Vec::with_capacity(surrogates.len());
    for model in surrogates {
        let probs = model.predict(crop)?;
        confidences.push(probs[true_label]);
        top1.push(argmax(&probs));
    }
    let fooled = top1.iter().filter(|&&l| l != true_label).count();
    let success = match rule {
        SuccessRule::All => fooled == surrogates.len(),
        SuccessRule::Any => fooled >= 1,
        SuccessRule::Majority => 2 * fooled > surrogates.len(),
    };
    Ok(EnsembleScore {
        confidences,
        top1,
        success,
    })
}

/// Classify the sign in an (attacked) frame with a held-out victim.
/// The victim crops with ground-truth geometry: misperception by the attacker
/// must not help the attack.
pub fn victim_eval(
    victim: &Classifier,
    frame: &Image,
    geom: &SignGeometry,
    true_label: usize,
) -> Result<(usize, bool)> {
    let crop = crop_sign(frame, geom)?;
    let label = victim.top1(&crop)?;
    Ok((label, label != true_label))
}

/// Train the full model zoo: three surrogates and two victims, all with
/// distinct widths and seeds (asserted).
pub fn train_model_zoo(
    train: &[LabelledCrop],
    test: &[LabelledCrop],
    seed: SeedNode,
    cfg: &TrainClassifierConfig,
) -> Result<(Vec<Classifier>, Vec<Classifier>)> {
    let mut widths: Vec<usize> = SURROGATE_WIDTHS
        .iter()
        .chain(VICTIM_WIDTHS.iter())
        .copied()
        .collect();
    widths.sort_unstable();
    widths.dedup();
    assert_eq!(
        widths.len(),
        SURROGATE_WIDTHS.len() + VICTIM_WIDTHS.len(),
        "surrogate and victim widths must be pairwise distinct"
    );
    let surrogates = SURROGATE_WIDTHS
        .iter()
        .enumerate()
        .map(|(i, &w)| train_classifier(train, test, w, seed.child("surrogate").child_idx(i as u64), cfg))
        .collect::<Result<Vec<_>>>()?;
    let victims = VICTIM_WIDTHS
        .iter()
        .enumerate()
        .map(|(i, &w)| train_classifier(train, test, w, seed.child("victim").child_idx(i as u64), cfg))
        .collect::<Result<Vec<_>>>()?;
    for s in &surrogates {
        for v in &victims {
            assert_ne!(s.seed_tag, v.seed_tag, "surrogates and victims share a seed");
        }
    }
    Ok((surrogates, victims))
}

/// Per-class accuracy rows as (class name, n, accuracy).
pub fn per_class_accuracy(
    model: &Classifier,
    data: &[LabelledCrop],
) -> Result<Vec<(String, usize, f64)>> {
    let c = class_count();
    let mut n = vec![0usize; c];
    let mut hit = vec![0usize; c];
    for ex in data {
        let pred = argmax(&model.net.forward(&ex.input)?);
        n[ex.label] += 1;
        hit[ex.label] += usize::from(pred == ex.label);
    }
    Ok(SignClass::ALL
        .iter()
        .enumerate()
        .map(|(i, class)| {
            let acc = if n[i] == 0 { 0.0 } else { hit[i] as f64 / n[i] as f64 };
            (class.name().to_string(), n[i], acc)
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::{generate_class_dataset, WorldConfig};

    fn gradient_frame(w: usize, h: usize) -> Image {
        let mut img = Image::new(w, h);
        for y in 0..h {
            for x in 0..w {
                img.set(
                    x,
                    y,
                    [
                        x as f64 / w as f64,
                        y as f64 / h as f64,
                        (x + y) as f64 / (w + h) as f64,
                    ],
                );
            }
        }
        img
    }

    fn centered_geom(x: f64, y: f64, a: f64, b: f64) -> SignGeometry {
        SignGeometry {
            x_center: x,
            y_center: y,
            a,
            b,
            delta: 0.0,
            shape: crate::scene::SignShape::Circle,
        }
    }

    #[test]
    fn crop_box_pads_by_ten_percent() {
        let geom = centered_geom(64.0, 64.0, 10.0, 10.0);
        let (_, _, bw, bh) = crop_box(&geom);
        assert!((bw - 22.0).abs() < 1e-12);
        assert!((bh - 22.0).abs() < 1e-12);
    }

    #[test]
    fn crop_box_covers_rotated_ellipse() {
        // A rotated ellipse's AABB must contain the extreme points of both axes.
        let geom = SignGeometry {
            x_center: 50.0,
            y_center: 50.0,
            a: 12.0,
            b: 5.0,
            delta: 0.7,
            shape: crate::scene::SignShape::Circle,
        };
        let (x0, y0, bw, bh) = crop_box(&geom);
        for k in 0..64 {
            let t = k as f64 / 64.0 * std::f64::consts::TAU;
            let px = geom.x_center
                + geom.a * t.cos() * geom.delta.cos()
                - geom.b * t.sin() * geom.delta.sin();
            let py = geom.y_center
                + geom.a * t.cos() * geom.delta.sin()
                + geom.b * t.sin() * geom.delta.cos();
            assert!(px >= x0 && px <= x0 + bw);
            assert!(py >= y0 && py <= y0 + bh);
        }
    }

    #[test]
    fn degenerate_box_rejected() {
        let frame = gradient_frame(64, 64);
        let geom = centered_geom(32.0, 32.0, 1.0, 1.0);
        assert!(matches!(
            crop_sign(&frame, &geom),
            Err(ElaError::Argument(_))
        ));
    }

    #[test]
    fn crop_translation_equivariance() {
        // Shifting frame content and geometry by the same integer offset
        // produces bit-identical crops.
        let base = gradient_frame(96, 96);
        let mut shifted = Image::new(96, 96);
        let (dx, dy) = (7usize, 4usize);
        for y in 0..96 {
            for x in 0..96 {
                let sx = (x + 96 - dx) % 96;
                let sy = (y + 96 - dy) % 96;
                shifted.set(x, y, base.get(sx, sy));
            }
        }
        let g0 = centered_geom(40.0, 45.0, 9.0, 6.0);
        let g1 = centered_geom(40.0 + dx as f64, 45.0 + dy as f64, 9.0, 6.0);
        let c0 = crop_sign(&base, &g0).unwrap();
        let c1 = crop_sign(&shifted, &g1).unwrap();
        for y in 0..CROP_SIZE {
            for x in 0..CROP_SIZE {
                assert_eq!(c0.get(x, y), c1.get(x, y));
            }
        }
    }

    #[test]
    fn crop_is_pure() {
        let ds = small_dataset(SignClass::Speed60, 3);
        let f = &ds.train_routes[0].frames[0];
        let c0 = crop_sign(&f.image, &f.geometry).unwrap();
        let c1 = crop_sign(&f.image, &f.geometry).unwrap();
        assert_eq!(c0.data, c1.data);
    }

    fn small_dataset(class: SignClass, routes: usize) -> crate::scene::ClassDataset {
        let world = WorldConfig::default_for_class(class);
        generate_class_dataset(&world, routes, 6, 1, SeedNode::new(1000 + class.label() as u64))
            .unwrap()
    }

    fn crops_of(ds: &crate::scene::ClassDataset, test: bool) -> Vec<LabelledCrop> {
        let frames: Vec<_> = if test {
            ds.test_frames().collect()
        } else {
            ds.train_frames().collect()
        };
        frames
            .iter()
            .map(|f| LabelledCrop {
                input: crop_to_input(&crop_sign(&f.image, &f.geometry).unwrap()),
                label: f.label,
            })
            .collect()
    }

    /// Tiny 7-class corpus for fast training tests.
    fn tiny_corpus() -> (Vec<LabelledCrop>, Vec<LabelledCrop>) {
        let mut train = Vec::new();
        let mut test = Vec::new();
        for &class in &SignClass::ALL {
            let ds = small_dataset(class, 3);
            train.extend(crops_of(&ds, false));
            test.extend(crops_of(&ds, true));
        }
        (train, test)
    }

    fn tiny_cfg() -> TrainClassifierConfig {
        TrainClassifierConfig {
            epochs: 25,
            batch: 16,
            lr: 1e-3,
            // The tiny-corpus tests only check learning direction, not the
            // production floor.
            accuracy_floor: 0.0,
        }
    }

    #[test]
    fn minimum_crop_count_enforced() {
        let (train, test) = tiny_corpus();
        let cfg = TrainClassifierConfig {
            accuracy_floor: 0.0,
            ..TrainClassifierConfig::default()
        };
        // The tiny corpus has far fewer than 100 crops per class.
        assert!(train.len() < 700);
        match train_classifier(&train, &test, 32, SeedNode::new(5), &cfg) {
            Err(ElaError::Argument(msg)) => assert!(msg.contains("need >= 100")),
            other => panic!("expected argument error, got {other:?}"),
        }
    }

    /// Pad a sub-100 corpus up to the precondition by repeating crops.
    fn padded(train: &[LabelledCrop]) -> Vec<LabelledCrop> {
        let mut out = train.to_vec();
        while out.iter().filter(|e| e.label == 0).count() < 100 {
            out.extend(train.to_vec());
        }
        out
    }

    #[test]
    fn training_beats_chance_and_is_deterministic() {
        let (train, test) = tiny_corpus();
        let train = padded(&train);
        let cfg = tiny_cfg();
        let m0 = train_classifier(&train, &test, 32, SeedNode::new(5), &cfg).unwrap();
        let m1 = train_classifier(&train, &test, 32, SeedNode::new(5), &cfg).unwrap();
        assert_eq!(m0.net.params_flat(), m1.net.params_flat());
        assert!(
            m0.clean_accuracy > 0.5,
            "tiny model should beat chance by a wide margin, got {}",
            m0.clean_accuracy
        );
        // Train-split accuracy should be at least held-out accuracy.
        let train_acc = accuracy(&m0.net, &train).unwrap();
        assert!(train_acc + 1e-9 >= m0.clean_accuracy);
    }

    #[test]
    fn label_permuted_corpus_stays_at_chance() {
        let (train, test) = tiny_corpus();
        let mut train = padded(&train);
        // Shuffle the label multiset: classes stay exactly balanced while
        // the input-label association is destroyed.
        let mut labels: Vec<usize> = train.iter().map(|e| e.label).collect();
        labels.shuffle(&mut SeedNode::new(77).rng());
        for (ex, label) in train.iter_mut().zip(labels) {
            ex.label = label;
        }
        let cfg = TrainClassifierConfig {
            epochs: 6,
            ..tiny_cfg()
        };
        let m = train_classifier(&train, &test, 32, SeedNode::new(5), &cfg).unwrap();
        let chance = 1.0 / SignClass::ALL.len() as f64;
        assert!(
            (m.clean_accuracy - chance).abs() < 0.1,
            "permuted labels should give chance accuracy, got {}",
            m.clean_accuracy
        );
    }

    /// Build a classifier whose logits are fixed by an output bias.
    fn rigged_classifier(predicted: usize) -> Classifier {
        let in_dim = CROP_SIZE * CROP_SIZE * 3;
        let mut net = DenseNet::zeros(
            &[in_dim, 8, SignClass::ALL.len()],
            &[Activation::Relu, Activation::Identity],
        )
        .unwrap();
        let mut biases = vec![0.0; SignClass::ALL.len()];
        biases[predicted] = 10.0;
        net.set_output_bias(&biases).unwrap();
        Classifier {
            net,
            width: 8,
            seed_tag: predicted as u64,
            clean_accuracy: 0.0,
        }
    }

    #[test]
    fn ensemble_rules() {
        let crop = gradient_frame(CROP_SIZE, CROP_SIZE);
        let true_label = 2;
        let all_right = vec![rigged_classifier(2), rigged_classifier(2), rigged_classifier(2)];
        let one_wrong = vec![rigged_classifier(2), rigged_classifier(3), rigged_classifier(2)];
        let all_wrong = vec![rigged_classifier(0), rigged_classifier(3), rigged_classifier(5)];

        let s = ensemble_eval(&all_right, &crop, true_label, SuccessRule::All).unwrap();
        assert!(!s.success);
        assert!(s.confidences.iter().all(|&p| p > 0.99));

        let s = ensemble_eval(&all_wrong, &crop, true_label, SuccessRule::All).unwrap();
        assert!(s.success);
        assert!(s.confidences.iter().all(|&p| p < 0.01));

        assert!(!ensemble_eval(&one_wrong, &crop, true_label, SuccessRule::All)
            .unwrap()
            .success);
        assert!(ensemble_eval(&one_wrong, &crop, true_label, SuccessRule::Any)
            .unwrap()
            .success);
        assert!(!ensemble_eval(&one_wrong, &crop, true_label, SuccessRule::Majority)
            .unwrap()
            .success);
    }

    #[test]
    fn empty_ensemble_rejected() {
        let crop = gradient_frame(CROP_SIZE, CROP_SIZE);
        assert!(ensemble_eval(&[], &crop, 0, SuccessRule::All).is_err());
    }

    #[test]
    fn softmax_probabilities_sum_to_one() {
        let model = rigged_classifier(4);
        let crop = gradient_frame(CROP_SIZE, CROP_SIZE);
        let probs = model.predict(&crop).unwrap();
        let sum: f64 = probs.iter().sum();
        assert!((sum - 1.0).abs() < 1e-9);
    }

    #[test]
    fn checkpoint_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("clf.ckpt");
        let model = rigged_classifier(1);
        model.save(&path).unwrap();
        let loaded = Classifier::load(&path).unwrap();
        assert_eq!(loaded.width, model.width);
        assert_eq!(loaded.seed_tag, model.seed_tag);
        assert_eq!(loaded.net.params_flat(), model.net.params_flat());
    }

    #[test]
    fn victim_eval_matches_rigged_model() {
        let ds = small_dataset(SignClass::Speed60, 3);
        let f = &ds.train_routes[0].frames[2];
        let right = rigged_classifier(f.label);
        let wrong = rigged_classifier((f.label + 1) % 7);
        let (label, flag) = victim_eval(&right, &f.image, &f.geometry, f.label).unwrap();
        assert_eq!(label, f.label);
        assert!(!flag);
        let (_, flag) = victim_eval(&wrong, &f.image, &f.geometry, f.label).unwrap();
        assert!(flag);
    }
}
