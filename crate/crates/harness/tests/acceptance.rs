//! Acceptance suite: prints one PASS/FAIL line per criterion. A failing
//! criterion makes the process exit non-zero only when `ACCEPTANCE_STRICT=1`
//! is set, so the rest of the workspace tests still run.

use std::path::Path;
use std::process::ExitCode;
use std::thread;

use clarc_core::cav::oracle::{lasso_oracle, svm_oracle};
use clarc_core::cav::solvers::{
    lasso_objective, lasso_solve, logistic_probabilities, logistic_solve, ridge_gradient, ridge_solve,
    svm_objective, svm_solve,
};
use clarc_core::cav::{fit_signal_cav, Cav, CavSolver, ConceptSample};
use clarc_core::correction::{
    clarc_perturb, rr_loss, Aggregation, AnnotationMode, ClarcStats, CorrectionConfig, GradientTarget, Method,
    PerturbMode, StepContext,
};
use clarc_core::gradcheck::{self, FdCheck, SmallArch};
use clarc_core::metrics::Predictor;
use clarc_core::rng::stream_rng;
use clarc_core::Tensor;
use clarc_harness::config::ExperimentConfig;
use clarc_harness::experiment::{run_experiment_detailed, ExperimentOutcome};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

const SEEDS: [u64; 3] = [0, 1, 2];

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: impl Into<String>) -> Verdict {
    Verdict {
        pass,
        detail: detail.into(),
    }
}

fn random_tensor(shape: Vec<usize>, rng: &mut impl Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

fn batch_of(arch: SmallArch, n: usize, rng: &mut impl Rng) -> Tensor {
    let mut shape = vec![n];
    shape.extend(arch.input_shape());
    random_tensor(shape, rng)
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

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn gradients() -> Verdict {
    const MODELS: u64 = 50;
    const BATCH: usize = 3;
    let cases = [
        (Method::Vanilla, Aggregation::Squared, GradientTarget::Logits),
        (Method::AClarc, Aggregation::Squared, GradientTarget::Logits),
        (Method::RrClarc, Aggregation::Squared, GradientTarget::Logits),
        (Method::RrClarc, Aggregation::Squared, GradientTarget::LogProbs),
        (Method::RrClarc, Aggregation::Absolute, GradientTarget::Logits),
        (Method::RrClarc, Aggregation::Cosine, GradientTarget::LogProbs),
        (Method::Rrr, Aggregation::Squared, GradientTarget::LogProbs),
    ];
    let (mut params, mut input, mut latent) = (FdCheck::empty(), FdCheck::empty(), FdCheck::empty());
    for seed in 0..MODELS {
        let arch = SmallArch::ALL[seed as usize % 3];
        let mut rng = stream_rng(seed, 7001);
        let x = batch_of(arch, BATCH, &mut rng);
        let y: Vec<usize> = (0..BATCH).map(|_| rng.gen_range(0..3)).collect();
        for (method, aggregation, target) in cases {
            let mut model = arch.build(seed).unwrap();
            let mut cfg = CorrectionConfig::new(method);
            cfg.lambda = 0.7;
            cfg.aggregation = aggregation;
            cfg.gradient_target = target;
            let mut ctx = StepContext::default();
            if method.uses_cav() {
                model.set_frozen_upto(Some(model.split_index())).unwrap();
                cfg.cav = Some(random_cav(model.latent_dim(), model.split_index(), &mut rng));
                ctx.stats = Some(ClarcStats {
                    mean_clean_projection: -0.2,
                    mean_artifact_projection: 0.9,
                });
                let signs = (0..BATCH * 3).map(|_| if rng.gen::<bool>() { 1.0 } else { -1.0 }).collect();
                ctx.annotations = Some(Tensor::new(vec![BATCH, 3], signs).unwrap());
                cfg.annotation = AnnotationMode::RandomSign { seed };
            }
            if method == Method::Rrr {
                let n: usize = arch.input_shape().iter().product();
                cfg.mask = Some((0..n).map(|i| if i % 3 == 0 { 1.0 } else { 0.0 }).collect());
            }
            params = params.merge(gradcheck::objective_params(&model, &x, &y, &cfg, &ctx).unwrap());
        }
        let model = arch.build(seed).unwrap();
        let w = random_tensor(vec![BATCH, 3], &mut rng);
        let c = random_cav(model.latent_dim(), model.split_index(), &mut rng);
        let stats = ClarcStats {
            mean_clean_projection: 0.3,
            mean_artifact_projection: 1.1,
        };
        for projected in [false, true] {
            let predictor = Predictor {
                model: &model,
                projection: projected.then_some((&c, &stats)),
            };
            input = input.merge(gradcheck::input_gradient(&predictor, &x, &w).unwrap());
            latent = latent.merge(gradcheck::latent_gradient(&predictor, &x, &w).unwrap());
        }
    }
    let tol = 1e-3;
    verdict(
        params.passes(tol) && input.passes(tol) && latent.passes(tol),
        format!(
            "{MODELS} models; worst relative error params {:.1e}, input {:.1e}, latent {:.1e} (tol {tol:e})",
            params.rel_error, input.rel_error, latent.rel_error
        ),
    )
}

fn clouds(n: usize, d: usize, shift: f64, seed: u64) -> (Vec<Vec<f64>>, Vec<f64>) {
    let mut rng = stream_rng(seed, 7002);
    let dir: Vec<f64> = (0..d).map(|_| StandardNormal.sample(&mut rng)).collect();
    let dn = dir.iter().map(|v| v * v).sum::<f64>().sqrt();
    let mut x = Vec::with_capacity(n);
    let mut t = Vec::with_capacity(n);
    for i in 0..n {
        let c = i % 2 == 0;
        x.push(
            dir.iter()
                .map(|v| {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    z + if c { shift * v / dn } else { 0.0 }
                })
                .collect(),
        );
        t.push(if c { 1.0 } else { 0.0 });
    }
    (x, t)
}

fn solver_oracles() -> Verdict {
    let mut ridge_worst = 0.0f64;
    let mut logistic_worst = 0.0f64;
    for seed in 0..20 {
        let (x, t) = clouds(40, 1 + seed as usize % 5, 1.5, seed);
        for lambda in [1e-4, 1e-1, 10.0] {
            let fit = ridge_solve(&x, &t, lambda).unwrap();
            ridge_worst = ridge_gradient(&x, &t, &fit, lambda).iter().fold(ridge_worst, |m, v| m.max(v.abs()));
        }
        let (x, t) = clouds(50, 1 + seed as usize % 4, 1.0, 300 + seed);
        for lambda in [1e-3, 1.0] {
            let fit = logistic_solve(&x, &t, lambda).unwrap();
            let s: f64 = logistic_probabilities(&x, &fit).iter().zip(&t).map(|(p, t)| p - t).sum();
            logistic_worst = logistic_worst.max(s.abs());
        }
    }
    let mut lasso_ratio = 0.0f64;
    let mut svm_ratio = 0.0f64;
    for d in 1..=3 {
        for seed in 0..3 {
            let (x, t) = clouds(30, d, 1.0, 100 + seed);
            for lambda in [1e-3, 5e-2] {
                let got = lasso_objective(&x, &t, &lasso_solve(&x, &t, lambda).unwrap(), lambda);
                lasso_ratio = lasso_ratio.max(got / lasso_oracle(&x, &t, lambda, 3.0).1);
            }
            if d <= 2 {
                let (x, t) = clouds(30, d, 1.5, 200 + seed);
                for lambda in [0.1, 1.0] {
                    let got = svm_objective(&x, &t, &svm_solve(&x, &t, lambda).unwrap(), lambda);
                    svm_ratio = svm_ratio.max(got / svm_oracle(&x, &t, lambda, 8.0).1);
                }
            }
        }
    }
    let mut cos_worst = 0.0f64;
    for seed in 0..20 {
        let (x, t) = clouds(37, 6, 0.7, 400 + seed);
        let samples: Vec<ConceptSample> = x
            .iter()
            .zip(&t)
            .map(|(a, &ti)| ConceptSample {
                activation: a.clone(),
                concept: ti > 0.5,
            })
            .collect();
        let np = t.iter().sum::<f64>();
        let nn = t.len() as f64 - np;
        let mut diff = vec![0.0; 6];
        for s in &samples {
            let w = if s.concept { 1.0 / np } else { -1.0 / nn };
            for (o, v) in diff.iter_mut().zip(&s.activation) {
                *o += w * v;
            }
        }
        let h = fit_signal_cav(&samples).unwrap().direction;
        let c = dot(&h, &diff) / (dot(&h, &h).sqrt() * dot(&diff, &diff).sqrt());
        cos_worst = cos_worst.max((c - 1.0).abs());
    }
    verdict(
        ridge_worst <= 1e-8 && lasso_ratio <= 1.01 && svm_ratio <= 1.01 && logistic_worst <= 1e-6 && cos_worst <= 1e-12,
        format!(
            "ridge |grad| {ridge_worst:.1e}, lasso/oracle {lasso_ratio:.4}, svm/oracle {svm_ratio:.4}, \
             logistic |sum(p-t)| {logistic_worst:.1e}, signal |cos-1| {cos_worst:.1e}"
        ),
    )
}

/// Instances where the forward and backward slopes disagree sit on a kink
/// (a ReLU input or a pooling tie at exactly zero) and are counted, not
/// compared, with the same 5% cap as the gradient check.
fn directional_derivative() -> Verdict {
    const EPS: f64 = 1e-4;
    let (mut worst, mut kinks) = (0.0f64, 0);
    for i in 0..100u64 {
        let arch = SmallArch::ALL[i as usize % 3];
        let model = arch.build(5000 + i).unwrap();
        let mut rng = stream_rng(i, 7003);
        let x = batch_of(arch, 1, &mut rng);
        let w = random_tensor(vec![1, 3], &mut rng);
        let h = random_cav(model.latent_dim(), model.split_index(), &mut rng);
        let fwd = gradcheck::directional_derivatives(&model, &x, &w, &h, EPS).unwrap();
        let bwd = gradcheck::directional_derivatives(&model, &x, &w, &h, -EPS).unwrap();
        for ((fd, an), (bd, _)) in fwd.into_iter().zip(bwd) {
            if (fd - bd).abs() > 1e-3 * (fd.abs() + bd.abs()) + 1e-6 {
                kinks += 1;
                continue;
            }
            worst = worst.max((fd - an).abs() / an.abs().max(1e-8));
        }
    }
    verdict(
        worst < 1e-3 && kinks * 20 < 100,
        format!("100 instances, {kinks} on a kink, worst relative error {worst:.1e}"),
    )
}

fn projection_contract() -> Verdict {
    let mut worst = 0.0f64;
    for seed in 0..20u64 {
        let arch = SmallArch::ALL[seed as usize % 3];
        let model = arch.build(seed).unwrap();
        let mut rng = stream_rng(seed, 7004);
        let x = batch_of(arch, 16, &mut rng);
        let l = model.split_index();
        let out = model.run_layers(0, l + 1, x).unwrap().output().clone();
        let acts = model.pool_latent(&out).unwrap().values;
        let cav = random_cav(model.latent_dim(), l, &mut rng);
        let stats = ClarcStats {
            mean_clean_projection: rng.gen_range(-3.0..3.0),
            mean_artifact_projection: rng.gen_range(-3.0..3.0),
        };
        let moved = clarc_perturb(&acts, &cav, &stats, PerturbMode::ProjectClean).unwrap();
        let unit = cav.unit_direction().unwrap();
        for n in 0..moved.batch() {
            worst = worst.max((dot(moved.sample(n), &unit) - stats.mean_clean_projection).abs());
        }
    }
    verdict(worst <= 1e-9, format!("20 batches of 16, worst |projection - clean mean| {worst:.1e}"))
}

fn sign_enumeration() -> Verdict {
    let mut rng = stream_rng(0, 7007);
    let mut exact = true;
    for k in 1..=8usize {
        for _ in 0..5 {
            let m = 6;
            let g: Vec<Vec<f64>> = (0..k).map(|_| (0..m).map(|_| rng.gen_range(-9..=9) as f64).collect()).collect();
            let h = cav_from((0..m).map(|_| rng.gen_range(-9..=9) as f64).collect(), 0);
            if h.norm == 0.0 {
                continue;
            }
            let mut sum = 0.0;
            for bits in 0..1u32 << k {
                let combined: Vec<f64> = (0..m)
                    .map(|j| (0..k).map(|i| if bits >> i & 1 == 1 { -g[i][j] } else { g[i][j] }).sum())
                    .collect();
                sum += rr_loss(&combined, &h, Aggregation::Squared).unwrap();
            }
            let expected: f64 = g.iter().map(|gi| dot(gi, &h.direction).powi(2)).sum();
            exact &= sum / (1u32 << k) as f64 == expected;
        }
    }
    verdict(exact, "k = 1..8, five instances each, compared with ==")
}

fn run_all(configs: Vec<ExperimentConfig>) -> Vec<ExperimentOutcome> {
    thread::scope(|s| {
        let handles: Vec<_> = configs
            .iter()
            .map(|c| s.spawn(move || run_experiment_detailed(c).expect("experiment failed")))
            .collect();
        handles.into_iter().map(|h| h.join().unwrap()).collect()
    })
}

fn with_dir(mut cfg: ExperimentConfig, dir: &Path) -> ExperimentConfig {
    cfg.out_dir = dir.to_path_buf();
    cfg
}

fn alignment_order(outcomes: &[ExperimentOutcome]) -> Verdict {
    let mut pass = true;
    let mut parts = Vec::new();
    for o in outcomes {
        let selected = |solver: CavSolver| {
            o.alignment
                .iter()
                .find(|r| r.solver == solver && r.selected)
                .map(|r| r.report.overall)
                .unwrap_or(f64::NAN)
        };
        let signal = selected(CavSolver::Signal);
        let others = [CavSolver::Ridge, CavSolver::Lasso, CavSolver::Logistic, CavSolver::Svm].map(selected);
        let ok = signal >= 0.85 && others.iter().all(|&v| signal > v);
        pass &= ok;
        parts.push(format!(
            "seed {}: signal {signal:.3} vs ridge/lasso/logistic/svm {:.3}/{:.3}/{:.3}/{:.3}",
            o.prepared.config.seed, others[0], others[1], others[2], others[3]
        ));
    }
    verdict(pass, parts.join("; "))
}

fn bias_unlearning(outcomes: &[ExperimentOutcome]) -> Verdict {
    let mut passed = 0;
    let mut parts = Vec::new();
    for o in outcomes {
        let vanilla = o.corrections.baseline().best();
        let rr = o.corrections.by_label("rr_clarc").expect("rr_clarc sweep").best();
        let (v, r) = (&vanilla.test, &rr.test);
        let gain = r.biased_accuracy - v.biased_accuracy;
        let drop = v.clean_accuracy - r.clean_accuracy;
        let ok = gain >= 0.10
            && drop <= 0.05
            && (0.35..=0.65).contains(&r.tcav)
            && !(0.25..=0.75).contains(&v.tcav);
        passed += ok as usize;
        parts.push(format!(
            "seed {} {}: lambda {:e}, biased +{:.3}, clean -{:.3}, tcav {:.3} -> {:.3}",
            o.prepared.config.seed,
            if ok { "ok" } else { "miss" },
            rr.lambda,
            gain,
            drop,
            v.tcav,
            r.tcav
        ));
    }
    verdict(passed * 2 > outcomes.len(), parts.join("; "))
}

fn class_specific(outcomes: &[ExperimentOutcome]) -> Verdict {
    let mut passed = 0;
    let mut parts = Vec::new();
    for o in outcomes {
        let change = |label: &str| {
            o.class_impact
                .iter()
                .find(|r| r.label == label)
                .map(|r| r.impact.selected.abs())
                .unwrap_or(f64::NAN)
        };
        let (rr, a, p) = (change("rr_clarc_onehot"), change("a_clarc"), change("p_clarc"));
        let ok = rr <= 0.02 && (a > rr || p > rr);
        passed += ok as usize;
        parts.push(format!(
            "seed {} {}: |change| one-hot RR {rr:.3}, A {a:.3}, P {p:.3}",
            o.prepared.config.seed,
            if ok { "ok" } else { "miss" }
        ));
    }
    verdict(passed * 2 > outcomes.len(), parts.join("; "))
}

fn freezing(outcomes: &[&ExperimentOutcome]) -> Verdict {
    let mut runs = 0;
    let mut broken = 0;
    for o in outcomes {
        let before = &o.prepared.model;
        let l = before.split_index();
        for sweep in &o.corrections.sweeps {
            for run in &sweep.runs {
                runs += 1;
                if run.model.layers()[..=l] != before.layers()[..=l] {
                    broken += 1;
                }
            }
        }
    }
    verdict(broken == 0, format!("{runs} correction runs, {broken} with changed feature layers"))
}

fn csv_bytes(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files: Vec<_> = std::fs::read_dir(dir.join("reports"))
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.extension().is_some_and(|e| e == "csv"))
        .collect();
    files.sort();
    files
        .into_iter()
        .map(|p| (p.file_name().unwrap().to_string_lossy().into_owned(), std::fs::read(&p).unwrap()))
        .collect()
}

fn determinism(first: &Path, second: &Path) -> Verdict {
    let (a, b) = (csv_bytes(first), csv_bytes(second));
    let same = !a.is_empty() && a == b;
    let names: Vec<&str> = a.iter().map(|(n, _)| n.as_str()).collect();
    verdict(same, format!("rerun of seed 0 compared byte-wise: {}", names.join(", ")))
}

fn turning_point(outcomes: &[ExperimentOutcome]) -> Verdict {
    let mut any = false;
    let mut parts = Vec::new();
    for o in outcomes {
        let sweep = o.corrections.by_label("rr_clarc").expect("rr_clarc sweep");
        let curve: Vec<f64> = sweep.runs.iter().filter(|r| !r.diverged).map(|r| r.test.biased_accuracy).collect();
        let best = curve.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let n = curve.len();
        let interior = n >= 3 && curve[1..n - 1].contains(&best) && curve[0] < best && curve[n - 1] < best;
        any |= interior;
        let at = curve.iter().position(|&v| v == best).unwrap_or(0);
        parts.push(format!(
            "seed {}: max {best:.3} at point {} of {n}, ends {:.3}/{:.3}",
            o.prepared.config.seed,
            at + 1,
            curve.first().copied().unwrap_or(f64::NAN),
            curve.last().copied().unwrap_or(f64::NAN)
        ));
    }
    verdict(any, parts.join("; "))
}

fn main() -> ExitCode {
    let start = std::time::Instant::now();
    let tmp = tempfile::tempdir().unwrap();
    let mut configs: Vec<ExperimentConfig> = SEEDS
        .iter()
        .map(|&s| with_dir(ExperimentConfig::standard(s), &tmp.path().join(format!("standard_{s}"))))
        .collect();
    configs.extend(
        SEEDS
            .iter()
            .map(|&s| with_dir(ExperimentConfig::class_study(s), &tmp.path().join(format!("class_{s}")))),
    );
    configs.push(with_dir(ExperimentConfig::standard(0), &tmp.path().join("standard_0_again")));
    let mut outcomes = run_all(configs);
    let _rerun = outcomes.pop().unwrap();
    let class = outcomes.split_off(SEEDS.len());
    let standard = outcomes;

    let results = [
        ("1 gradient correctness", gradients()),
        ("2 solver oracles", solver_oracles()),
        ("3 directional derivative", directional_derivative()),
        ("4 projection contract", projection_contract()),
        ("5 alignment ordering", alignment_order(&standard)),
        ("6 bias unlearning", bias_unlearning(&standard)),
        ("7 random-sign expectation", sign_enumeration()),
        ("8 class-specific correction", class_specific(&class)),
        ("9 freezing contract", freezing(&standard.iter().chain(&class).collect::<Vec<_>>())),
        (
            "10 determinism",
            determinism(&tmp.path().join("standard_0"), &tmp.path().join("standard_0_again")),
        ),
        ("11 lambda turning point", turning_point(&standard)),
    ];
    let mut failed = 0;
    for (name, v) in &results {
        println!("{} {name}: {}", if v.pass { "PASS" } else { "FAIL" }, v.detail);
        failed += !v.pass as usize;
    }
    println!(
        "{} of {} criteria passed in {:.0} s",
        results.len() - failed,
        results.len(),
        start.elapsed().as_secs_f64()
    );
    let strict = std::env::var("ACCEPTANCE_STRICT").is_ok_and(|v| v == "1");
    if failed == 0 || !strict {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
