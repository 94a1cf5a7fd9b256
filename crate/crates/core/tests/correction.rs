//! Correction-loss identities, the ClArC perturbation contract and the
//! fine-tuning contracts.

use clarc_core::cav::{Cav, CavSolver};
use clarc_core::correction::{
    clarc_perturb, deployed_gradients, fine_tune, forward_perturbed, rr_loss, step_objective, Aggregation,
    AnnotationMode, ClarcStats, CorrectionConfig, Method, PerturbMode, StepContext,
};
use clarc_core::data::{ConceptDataset, SplitTag};
use clarc_core::gradcheck::SmallArch;
use clarc_core::net::{cross_entropy, Layer, LayerKind, LayeredModel};
use clarc_core::rng::stream_rng;
use clarc_core::Tensor;
use proptest::prelude::*;
use rand::Rng;

fn random_tensor(shape: Vec<usize>, rng: &mut impl Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

fn cav_from(direction: Vec<f64>, layer: usize) -> Cav {
    let norm = direction.iter().map(|v| v * v).sum::<f64>().sqrt();
    Cav {
        direction,
        bias_term: None,
        solver: CavSolver::Signal,
        hyperparameter: None,
        layer_index: layer,
        norm,
    }
}

fn random_cav(m: usize, layer: usize, rng: &mut impl Rng) -> Cav {
    cav_from((0..m).map(|_| rng.gen_range(-1.0..1.0)).collect(), layer)
}

fn input_batch(arch: SmallArch, n: usize, rng: &mut impl Rng) -> Tensor {
    let mut shape = vec![n];
    shape.extend(arch.input_shape());
    random_tensor(shape, rng)
}

fn sign_vectors(k: usize) -> impl Iterator<Item = Vec<f64>> {
    (0..1u32 << k).map(move |bits| (0..k).map(|i| if bits >> i & 1 == 1 { -1.0 } else { 1.0 }).collect())
}

#[test]
fn sign_average_equals_sum_of_squares_exactly() {
    // small integers keep every product and the power-of-two mean exact
    let mut rng = stream_rng(3, 0);
    for k in 1..=8 {
        let m = 5;
        let g: Vec<Vec<f64>> = (0..k).map(|_| (0..m).map(|_| rng.gen_range(-9..=9) as f64).collect()).collect();
        let h = cav_from((0..m).map(|_| rng.gen_range(-9..=9) as f64).collect(), 0);
        if h.norm == 0.0 {
            continue;
        }
        let mut sum = 0.0;
        for signs in sign_vectors(k) {
            let combined: Vec<f64> = (0..m).map(|j| (0..k).map(|i| signs[i] * g[i][j]).sum()).collect();
            sum += rr_loss(&combined, &h, Aggregation::Squared).unwrap();
        }
        let expected: f64 = g
            .iter()
            .map(|gi| {
                let p: f64 = gi.iter().zip(&h.direction).map(|(a, b)| a * b).sum();
                p * p
            })
            .sum();
        assert_eq!(sum / (1u32 << k) as f64, expected, "k = {k}");
    }
}

#[test]
fn sign_average_through_model() {
    for seed in 0..10u64 {
        let arch = SmallArch::ALL[seed as usize % 3];
        let mut model = arch.build(seed).unwrap();
        model.set_frozen_upto(Some(model.split_index())).unwrap();
        let mut rng = stream_rng(seed, 5);
        let x = input_batch(arch, 1, &mut rng);
        let h = random_cav(model.latent_dim(), model.split_index(), &mut rng);
        let k = model.num_classes();
        let mut cfg = CorrectionConfig::new(Method::RrClarc);
        cfg.cav = Some(h.clone());
        let mut sum = 0.0;
        for signs in sign_vectors(k) {
            let ctx = StepContext {
                annotations: Some(Tensor::new(vec![1, k], signs).unwrap()),
                stats: None,
            };
            sum += step_objective(&model, &x, &[0], &cfg, &ctx).unwrap().penalty;
        }
        let mut expected = 0.0;
        for c in 0..k {
            let mut w = Tensor::zeros(vec![1, k]);
            w.data_mut()[c] = 1.0;
            let g = deployed_gradients(&model, &x, &w, None, false).unwrap().latent;
            let p: f64 = g.sample(0).iter().zip(&h.direction).map(|(a, b)| a * b).sum();
            expected += p * p;
        }
        let avg = sum / (1u32 << k) as f64;
        assert!((avg - expected).abs() <= 1e-12 * expected.max(1e-300), "{avg} vs {expected}");
    }
}

fn projections(acts: &Tensor, cav: &Cav) -> Vec<f64> {
    let unit = cav.unit_direction().unwrap();
    (0..acts.batch())
        .map(|n| acts.sample(n).iter().zip(&unit).map(|(a, b)| a * b).sum())
        .collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn projection_hits_clean_mean(seed in 0u64..1_000_000, m in 1usize..12, n in 1usize..20, scale in 0.01f64..100.0) {
        let mut rng = stream_rng(seed, 0);
        let acts = random_tensor(vec![n, m], &mut rng).map(|v| v * scale);
        let cav = random_cav(m, 0, &mut rng);
        prop_assume!(cav.norm > 1e-3);
        let stats = ClarcStats {
            mean_clean_projection: rng.gen_range(-5.0..5.0),
            mean_artifact_projection: rng.gen_range(-5.0..5.0),
        };
        let once = clarc_perturb(&acts, &cav, &stats, PerturbMode::ProjectClean).unwrap();
        for p in projections(&once, &cav) {
            prop_assert!((p - stats.mean_clean_projection).abs() <= 1e-9, "{} vs {}", p, stats.mean_clean_projection);
        }
        let added = clarc_perturb(&acts, &cav, &stats, PerturbMode::AddArtifact).unwrap();
        for p in projections(&added, &cav) {
            prop_assert!((p - stats.mean_artifact_projection).abs() <= 1e-9);
        }
        let twice = clarc_perturb(&once, &cav, &stats, PerturbMode::ProjectClean).unwrap();
        for (a, b) in once.data().iter().zip(twice.data()) {
            prop_assert!((a - b).abs() <= 1e-12 * (1.0 + a.abs()));
        }
        // the orthogonal complement is untouched
        let unit = cav.unit_direction().unwrap();
        for i in 0..n {
            let before = acts.sample(i);
            let after = once.sample(i);
            let pb: f64 = before.iter().zip(&unit).map(|(a, b)| a * b).sum();
            let pa: f64 = after.iter().zip(&unit).map(|(a, b)| a * b).sum();
            for j in 0..m {
                let rb = before[j] - pb * unit[j];
                let ra = after[j] - pa * unit[j];
                prop_assert!((rb - ra).abs() <= 1e-9 * (1.0 + scale));
            }
        }
    }
}

#[test]
fn perturbed_forward_matches_hand_composition() {
    for seed in 0..10u64 {
        let arch = if seed % 2 == 0 { SmallArch::ConvToDense } else { SmallArch::ConvHead };
        let model = arch.build(seed).unwrap();
        let mut rng = stream_rng(seed, 6);
        let x = input_batch(arch, 4, &mut rng);
        let cav = random_cav(model.latent_dim(), 1, &mut rng);
        let stats = ClarcStats {
            mean_clean_projection: 0.4,
            mean_artifact_projection: 1.3,
        };
        let got = forward_perturbed(&model, &x, &cav, &stats, PerturbMode::ProjectClean).unwrap();

        let split = model.split_index();
        let mut out = model.run_layers(0, split + 1, x.clone()).unwrap().output().clone();
        let shape = out.shape().to_vec();
        let (c, hw) = (shape[1], shape[2] * shape[3]);
        let unit = cav.unit_direction().unwrap();
        for n in 0..x.batch() {
            let s = out.sample_mut(n);
            let pooled: Vec<f64> = (0..c)
                .map(|ch| s[ch * hw..(ch + 1) * hw].iter().copied().fold(f64::NEG_INFINITY, f64::max))
                .collect();
            let proj: f64 = pooled.iter().zip(&unit).map(|(a, b)| a * b).sum();
            let gamma = (stats.mean_clean_projection - proj) / cav.norm;
            for ch in 0..c {
                for v in &mut s[ch * hw..(ch + 1) * hw] {
                    *v += gamma * cav.direction[ch];
                }
            }
        }
        let want = model.forward_from(split + 1, out).unwrap();
        for (a, b) in got.output().data().iter().zip(want.output().data()) {
            assert!((a - b).abs() <= 1e-12 * (1.0 + b.abs()), "{a} vs {b}");
        }
    }
}

#[test]
fn step_zero_loss_assembly() {
    for seed in 0..10u64 {
        let arch = SmallArch::ALL[seed as usize % 3];
        let mut model = arch.build(seed).unwrap();
        model.set_frozen_upto(Some(model.split_index())).unwrap();
        let mut rng = stream_rng(seed, 7);
        let n = 5;
        let x = input_batch(arch, n, &mut rng);
        let y: Vec<usize> = (0..n).map(|_| rng.gen_range(0..3)).collect();
        let h = random_cav(model.latent_dim(), model.split_index(), &mut rng);
        let signs: Vec<f64> = (0..n * 3).map(|_| if rng.gen::<bool>() { 1.0 } else { -1.0 }).collect();
        let ann = Tensor::new(vec![n, 3], signs).unwrap();
        let mut cfg = CorrectionConfig::new(Method::RrClarc);
        cfg.lambda = 2.5;
        cfg.cav = Some(h.clone());
        let ctx = StepContext {
            annotations: Some(ann.clone()),
            stats: None,
        };
        let obj = step_objective(&model, &x, &y, &cfg, &ctx).unwrap();

        let (ce, _) = cross_entropy(&model.forward(&x).unwrap(), &y).unwrap();
        let g = deployed_gradients(&model, &x, &ann, None, false).unwrap().latent;
        let pen: f64 = (0..n)
            .map(|i| {
                let p: f64 = g.sample(i).iter().zip(&h.direction).map(|(a, b)| a * b).sum();
                p * p
            })
            .sum::<f64>()
            / n as f64;
        let want = ce + cfg.lambda * pen;
        let got = obj.total(cfg.lambda);
        assert!((got - want).abs() <= 1e-10 * want.abs().max(1.0), "{got} vs {want}");
    }
}

/// Small image dataset on the pixel scale for the conv architectures.
fn toy_dataset(n: usize, seed: u64) -> ConceptDataset {
    let mut rng = stream_rng(seed, 8);
    let inputs = Tensor::new(vec![n, 1, 6, 6], (0..n * 36).map(|_| rng.gen_range(0.0..255.0)).collect()).unwrap();
    ConceptDataset {
        inputs,
        labels: (0..n).map(|i| i % 3).collect(),
        flags: (0..n).map(|i| i % 4 == 0).collect(),
        split: SplitTag::Train,
        num_classes: 3,
    }
}

fn frozen_conv_model(seed: u64) -> LayeredModel {
    let mut model = SmallArch::ConvToDense.build(seed).unwrap();
    model.set_frozen_upto(Some(model.split_index())).unwrap();
    model
}

fn short_config(method: Method, lambda: f64, cav: Option<Cav>) -> CorrectionConfig {
    let mut cfg = CorrectionConfig::new(method);
    cfg.lambda = lambda;
    cfg.cav = cav;
    cfg.epochs = 3;
    cfg.learning_rate = 0.05;
    cfg.batch_size = 4;
    cfg
}

#[test]
fn zero_lambda_trains_like_vanilla() {
    let data = toy_dataset(24, 1);
    for seed in 0..3u64 {
        let model = frozen_conv_model(seed);
        let mut rng = stream_rng(seed, 9);
        let cav = random_cav(model.latent_dim(), model.split_index(), &mut rng);
        let vanilla = fine_tune(&model, &data, &short_config(Method::Vanilla, 0.0, None), seed).unwrap();
        for annotation in [AnnotationMode::AllOnes, AnnotationMode::RandomSign { seed: 4 }] {
            let mut cfg = short_config(Method::RrClarc, 0.0, Some(cav.clone()));
            cfg.annotation = annotation;
            let rr = fine_tune(&model, &data, &cfg, seed).unwrap();
            assert_eq!(rr.model.layers(), vanilla.model.layers());
        }
        let mut rrr = short_config(Method::Rrr, 0.0, None);
        rrr.mask = Some(vec![1.0; 36]);
        assert_eq!(fine_tune(&model, &data, &rrr, seed).unwrap().model.layers(), vanilla.model.layers());
    }
}

#[test]
fn corrections_keep_the_feature_extractor() {
    let data = toy_dataset(24, 2);
    for seed in 0..3u64 {
        let model = frozen_conv_model(seed);
        let mut rng = stream_rng(seed, 10);
        let cav = random_cav(model.latent_dim(), model.split_index(), &mut rng);
        for method in [Method::Vanilla, Method::RrClarc, Method::AClarc, Method::PClarc] {
            let cfg = short_config(method, 1.0, method.uses_cav().then(|| cav.clone()));
            let out = fine_tune(&model, &data, &cfg, seed).unwrap();
            let split = model.split_index();
            assert_eq!(&out.model.layers()[..=split], &model.layers()[..=split], "{}", method.name());
            assert_ne!(out.model.layers(), model.layers(), "{} did not train the head", method.name());
        }
    }
}

#[test]
fn fine_tuning_is_deterministic() {
    let data = toy_dataset(24, 3);
    let model = frozen_conv_model(5);
    let mut rng = stream_rng(5, 11);
    let cav = random_cav(model.latent_dim(), model.split_index(), &mut rng);
    let mut cfg = short_config(Method::RrClarc, 0.5, Some(cav));
    cfg.annotation = AnnotationMode::RandomSign { seed: 9 };
    let a = fine_tune(&model, &data, &cfg, 7).unwrap();
    let b = fine_tune(&model, &data, &cfg, 7).unwrap();
    assert_eq!(a.model, b.model);
    assert_eq!(a.epoch_losses, b.epoch_losses);
}

/// The model's last dense layer restricted to output `c`.
fn single_logit_model(model: &LayeredModel, c: usize) -> LayeredModel {
    let mut layers: Vec<Layer> = model.layers().to_vec();
    let last = layers.pop().unwrap();
    let LayerKind::Dense { in_features, .. } = last.kind else {
        panic!("dense head expected")
    };
    let p = last.params.as_ref().unwrap();
    let row = p.weight.data()[c * in_features..(c + 1) * in_features].to_vec();
    layers.push(
        Layer::with_params(
            LayerKind::Dense { in_features, out_features: 1 },
            Tensor::new(vec![1, in_features], row).unwrap(),
            Tensor::new(vec![1], vec![p.bias.data()[c]]).unwrap(),
        )
        .unwrap(),
    );
    let mut m = LayeredModel::new(model.input_shape().to_vec(), layers, model.split_index(), model.seed()).unwrap();
    m.set_frozen_upto(model.frozen_upto()).unwrap();
    m
}

#[test]
fn one_hot_matches_single_logit_regularizer() {
    for seed in 0..6u64 {
        let arch = if seed % 2 == 0 { SmallArch::Dense } else { SmallArch::ConvToDense };
        let mut model = arch.build(seed).unwrap();
        model.set_frozen_upto(Some(model.split_index())).unwrap();
        let mut rng = stream_rng(seed, 12);
        let n = 4;
        let x = input_batch(arch, n, &mut rng);
        let h = random_cav(model.latent_dim(), model.split_index(), &mut rng);
        let c = (seed % 3) as usize;
        let restricted = single_logit_model(&model, c);

        // penalty gradient as the difference of lambda = 1 and lambda = 0
        let penalty_grads = |m: &LayeredModel, k: usize, labels: &[usize], target: usize| {
            let mut ann = Tensor::zeros(vec![n, k]);
            for i in 0..n {
                ann.sample_mut(i)[target] = 1.0;
            }
            let ctx = StepContext {
                annotations: Some(ann),
                stats: None,
            };
            let mut cfg = CorrectionConfig::new(Method::RrClarc);
            cfg.cav = Some(h.clone());
            cfg.lambda = 1.0;
            let with = step_objective(m, &x, labels, &cfg, &ctx).unwrap();
            cfg.lambda = 0.0;
            let without = step_objective(m, &x, labels, &cfg, &ctx).unwrap();
            let diff: Vec<(Vec<f64>, Vec<f64>)> = with
                .grads
                .parameter_grads
                .iter()
                .zip(&without.grads.parameter_grads)
                .map(|(a, b)| match (a, b) {
                    (Some(a), Some(b)) => (
                        a.weight.data().iter().zip(b.weight.data()).map(|(u, v)| u - v).collect(),
                        a.bias.data().iter().zip(b.bias.data()).map(|(u, v)| u - v).collect(),
                    ),
                    _ => (Vec::new(), Vec::new()),
                })
                .collect();
            (with.penalty, diff)
        };
        let (pen_full, full) = penalty_grads(&model, 3, &[0; 4], c);
        let (pen_one, one) = penalty_grads(&restricted, 1, &[0; 4], 0);
        assert!((pen_full - pen_one).abs() <= 1e-12 * pen_one.max(1e-300));
        let last = full.len() - 1;
        let close = |a: &[f64], b: &[f64]| a.iter().zip(b).all(|(u, v)| (u - v).abs() <= 1e-10 * (1.0 + v.abs()));
        for i in 0..last {
            assert!(close(&full[i].0, &one[i].0) && close(&full[i].1, &one[i].1), "layer {i}");
        }
        // only row c of the output layer is regularized
        let width = full[last].0.len() / 3;
        for r in 0..3 {
            let w = &full[last].0[r * width..(r + 1) * width];
            if r == c {
                assert!(close(w, &one[last].0));
                assert!((full[last].1[r] - one[last].1[0]).abs() <= 1e-10);
            } else {
                assert!(w.iter().all(|v| v.abs() <= 1e-12));
            }
        }
    }
}
