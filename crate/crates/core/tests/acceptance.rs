//! Acceptance checks. Each criterion prints one PASS/FAIL line; the test
//! fails if any criterion fails.

use std::time::Instant;

use seprep_core::ckpt;
use seprep_core::data::{gen_domain, DomainSpec, Transform};
use seprep_core::experiment::{Benchmark, ExperimentConfig, Method, TargetReport};
use seprep_core::metrics::{flops_count, h_score};
use seprep_core::nn::{train_source, Arch, ConvBnPathway, ModelBundle, TrainConfig, Unit};
use seprep_core::seprep::{
    assemble, extract_pathway, fuse_model, fuse_unit, merge_forward, predict, softmax_weights, Criterion, SepUnit,
    WeightMode,
};
use seprep_core::tensor::{grad_check, ops, Real, Tape, Tensor, Var};
use seprep_core::{Error, Result, SplitMix64};

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome { pass, detail: detail.into() }
}

fn random<T: Real>(shape: &[usize], lo: f64, hi: f64, rng: &mut SplitMix64) -> Tensor<T> {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| T::from_f64(rng.uniform(lo, hi))).collect()).unwrap()
}

/// Pathway with random kernels and nontrivial BN parameters.
fn random_pathway(cin: usize, cout: usize, rng: &mut SplitMix64) -> ConvBnPathway<f64> {
    ConvBnPathway {
        kernels: random(&[cout, cin, 3, 3], -0.5, 0.5, rng),
        run_mu: random(&[cout], -0.5, 0.5, rng),
        run_sigma: random(&[cout], 0.5, 2.0, rng),
        gamma: random(&[cout], 0.5, 1.5, rng),
        beta: random(&[cout], -0.5, 0.5, rng),
        stride: 2,
        padding: 1,
    }
}

/// Every Conv-BN unit of `model` gets random BN statistics and affine terms.
fn perturb_bn(model: &mut ModelBundle<f64>, rng: &mut SplitMix64) {
    for u in &mut model.units {
        if let Unit::ConvBn(p) = u {
            let c = p.out_channels();
            p.run_mu = random(&[c], -0.3, 0.3, rng);
            p.run_sigma = random(&[c], 0.5, 2.0, rng);
            p.gamma = random(&[c], 0.5, 1.5, rng);
            p.beta = random(&[c], -0.3, 0.3, rng);
        }
    }
}

fn fusion_equivalence() -> Outcome {
    let started = Instant::now();
    let shapes = Arch::toy().unit_shapes();
    let mut rng = SplitMix64::new(1);
    let (mut worst32, mut worst64) = (0.0f64, 0.0f64);
    let mut count = 0;
    for i in 0..1000 {
        let k = [1, 2, 3, 5][i % 4];
        let s = shapes[rng.below(shapes.len())];
        let pathways: Vec<_> = (0..k).map(|_| random_pathway(s.in_channels, s.out_channels, &mut rng)).collect();
        let w: Vec<f64> = (0..k).map(|_| rng.uniform(0.1, 1.0)).collect();
        let total: f64 = w.iter().sum();
        let unit = SepUnit::with_weights(pathways, w.iter().map(|v| v / total).collect()).unwrap();
        let x: Tensor<f64> = random(&[2, s.in_channels, s.in_size, s.in_size], -1.0, 1.0, &mut rng);

        let merged = merge_forward(&unit, &x).unwrap();
        let fused = fuse_unit(&unit).unwrap().forward(&x).unwrap();
        worst64 = worst64.max(merged.max_abs_diff(&fused).unwrap());

        let (u32_, x32) = (unit.cast::<f32>(), x.cast::<f32>());
        let merged = merge_forward(&u32_, &x32).unwrap();
        let fused = fuse_unit(&u32_).unwrap().forward(&x32).unwrap();
        worst32 = worst32.max(merged.max_abs_diff(&fused).unwrap() as f64);
        count += 1;
    }
    let secs = started.elapsed().as_secs_f64();
    outcome(
        worst32 <= 1e-4 && worst64 <= 1e-10 && secs < 60.0,
        format!("{count} units, max |diff| f32 {worst32:.2e}, f64 {worst64:.2e}, {secs:.1}s"),
    )
}

fn scalar_fusion_oracle() -> Outcome {
    let one = |v: f64| Tensor::<f64>::from_f64(&[1], &[v]).unwrap();
    let path = |f: f64, mu: f64, sigma: f64, g: f64, b: f64| ConvBnPathway {
        kernels: Tensor::from_f64(&[1, 1, 1, 1], &[f]).unwrap(),
        run_mu: one(mu),
        run_sigma: one(sigma),
        gamma: one(g),
        beta: one(b),
        stride: 1,
        padding: 0,
    };
    let unit = SepUnit::with_weights(vec![path(2.0, 0.0, 1.0, 1.0, 0.0), path(4.0, 1.0, 2.0, 2.0, 1.0)], vec![0.5, 0.5])
        .unwrap();
    let fused = fuse_unit(&unit).unwrap();
    let x = Tensor::from_f64(&[1, 1, 1, 1], &[3.0]).unwrap();
    let (f, b, y) = (fused.kernels.data()[0], fused.bias.data()[0], fused.forward(&x).unwrap().data()[0]);
    let merged = merge_forward(&unit, &x).unwrap().data()[0];
    outcome(
        f == 3.0 && b == 0.0 && y == 9.0 && merged == 9.0,
        format!("F' = {f}, b = {b}, fused(3) = {y}, merged(3) = {merged}"),
    )
}

fn argmax_rows(logits: &Tensor<f64>) -> Vec<usize> {
    let c = *logits.shape().last().unwrap();
    logits.data().chunks(c).map(ops::argmax).collect()
}

fn end_to_end_fusion() -> Outcome {
    let arch = Arch::toy();
    let mut rng = SplitMix64::new(3);
    let sources: Vec<ModelBundle<f64>> = (0..3)
        .map(|s| {
            let mut m = ModelBundle::<f64>::init(&arch, 100 + s).unwrap();
            perturb_bn(&mut m, &mut rng);
            m
        })
        .collect();
    let sep = assemble(&sources).unwrap();
    let fused = fuse_model(&sep).unwrap();
    let x: Tensor<f64> = random(&[64, 3, 16, 16], 0.0, 1.0, &mut rng);

    let (sep32, fused32, x32) = (sep.cast::<f32>(), fused.cast::<f32>(), x.cast::<f32>());
    let diff32 = sep32.forward_eval(&x32).unwrap().max_abs_diff(&fused32.forward_eval(&x32).unwrap()).unwrap();

    let a = sep.forward_eval(&x).unwrap();
    let b = fused.forward_eval(&x).unwrap();
    let same = argmax_rows(&a) == argmax_rows(&b);
    outcome(
        diff32 as f64 <= 1e-4 && same,
        format!("64 probes, max logit |diff| f32 {diff32:.2e}, f64 top-1 identical: {same}"),
    )
}

fn project(t: &Tape<f64>, v: Var, seed: u64) -> Result<Var> {
    let shape = t.value(v).shape().to_vec();
    let r = t.leaf(random(&shape, -1.0, 1.0, &mut SplitMix64::new(seed)));
    let prod = t.mul(v, r)?;
    t.sum(prod)
}

fn gradient_suite() -> Outcome {
    let mut rng = SplitMix64::new(4);
    let x: Tensor<f64> = random(&[2, 2, 5, 5], -1.0, 1.0, &mut rng);
    let k: Tensor<f64> = random(&[3, 2, 3, 3], -1.0, 1.0, &mut rng);
    let c3: Tensor<f64> = random(&[3], 0.5, 1.5, &mut rng);
    let feats: Tensor<f64> = random(&[4, 3], -1.0, 1.0, &mut rng);
    let w: Tensor<f64> = random(&[5, 3], -1.0, 1.0, &mut rng);
    let b5: Tensor<f64> = random(&[5], -1.0, 1.0, &mut rng);
    let logits: Tensor<f64> = random(&[5, 4], -2.0, 2.0, &mut rng);
    let act: Tensor<f64> = random(&[3, 3, 2, 2], -1.0, 1.0, &mut rng);
    let sigma = Tensor::from_f64(&[3], &[0.7, 1.3, 2.1]).unwrap();
    let targets = ops::softmax(&random::<f64>(&[5, 4], -1.0, 1.0, &mut rng)).unwrap();

    type Check<'a> = (&'a str, Box<dyn Fn(&Tape<f64>, Var) -> Result<Var> + 'a>, &'a Tensor<f64>);
    let checks: Vec<Check> = vec![
        ("conv2d/input", Box::new(|t, v| { let kv = t.leaf(k.clone()); let y = t.conv2d(v, kv, 2, 1)?; project(t, y, 1) }), &x),
        ("conv2d/kernels", Box::new(|t, v| { let xv = t.leaf(x.clone()); let y = t.conv2d(xv, v, 1, 1)?; project(t, y, 1) }), &k),
        ("bias", Box::new(|t, v| { let bv = t.leaf(c3.clone()); let y = t.add_channel_bias(v, bv)?; project(t, y, 2) }), &act),
        ("bn_train", Box::new(|t, v| {
            let (g, b) = (t.leaf(c3.clone()), t.leaf(c3.map(|v| v - 1.0)));
            let (y, _) = t.batchnorm_train(v, g, b)?;
            project(t, y, 3)
        }), &act),
        ("bn_eval", Box::new(|t, v| {
            let (g, b) = (t.leaf(c3.clone()), t.leaf(c3.clone()));
            let y = t.batchnorm_eval(v, &c3, &sigma, g, b)?;
            project(t, y, 4)
        }), &act),
        ("relu", Box::new(|t, v| { let y = t.relu(v)?; project(t, y, 5) }), &act),
        ("pool", Box::new(|t, v| { let y = t.global_avg_pool(v)?; project(t, y, 6) }), &act),
        ("merge", Box::new(|t, v| { let r = t.relu(v)?; let y = t.weighted_sum(&[v, r], &[0.3, 0.7])?; project(t, y, 7) }), &act),
        ("linear", Box::new(|t, v| { let (wv, bv) = (t.leaf(w.clone()), t.leaf(b5.clone())); let y = t.linear(v, wv, bv)?; project(t, y, 8) }), &feats),
        ("cross_entropy", Box::new(|t, v| t.soft_cross_entropy(v, &targets)), &logits),
        ("im_loss", Box::new(|t, v| t.im_loss(v, 1.0)), &logits),
    ];
    let mut worst = (0.0f64, "");
    let mut failed = Vec::new();
    for (name, f, input) in &checks {
        let err = grad_check(|t, v| f(t, v), input, 1e-5).unwrap_or(f64::INFINITY);
        if err > worst.0 {
            worst = (err, name);
        }
        if err.is_nan() || err > 1e-4 {
            failed.push(*name);
        }
    }
    outcome(
        failed.is_empty(),
        format!("{} checks, worst relative error {:.2e} ({}), failing: {:?}", checks.len(), worst.0, worst.1, failed),
    )
}

fn h_score_anchors() -> Outcome {
    let a = h_score(90.0, 75.0).unwrap();
    let b = h_score(73.4, 75.4).unwrap();
    outcome(
        (a - 81.8).abs() <= 0.05 && (b - 74.4).abs() <= 0.05,
        format!("H(90, 75) = {a:.3}, H(73.4, 75.4) = {b:.3}"),
    )
}

fn flops_ratios() -> Outcome {
    let arch = Arch::toy();
    let shape = arch.input_shape();
    let sources: Vec<ModelBundle<f32>> = (0..3).map(|s| ModelBundle::init(&arch, s).unwrap()).collect();
    let sep = assemble(&sources).unwrap();
    let fused = fuse_model(&sep).unwrap();
    let single = fuse_model(&extract_pathway(&sep, 0).unwrap()).unwrap();
    let (u, f, s) = (
        flops_count(&sep, &shape).unwrap(),
        flops_count(&fused, &shape).unwrap(),
        flops_count(&single, &shape).unwrap(),
    );
    let ratio = u.extractor as f64 / f.extractor as f64;
    let head = s.heads;
    outcome(
        (2.94..=3.06).contains(&ratio) && f.total - s.total == 2 * head,
        format!(
            "unfused/fused extractor = {}/{} = {ratio:.3}; fused total {} - single-head total {} = {} = 2 x {head}",
            u.extractor,
            f.extractor,
            f.total,
            s.total,
            f.total - s.total
        ),
    )
}

/// Mean of `f` over the targets.
fn mean(targets: &[TargetReport], f: impl Fn(&TargetReport) -> f64) -> f64 {
    targets.iter().map(&f).sum::<f64>() / targets.len() as f64
}

fn toy_experiment(targets: &[TargetReport], secs: f64) -> Outcome {
    let col = |m: Method, f: fn(&seprep_core::EvalReport) -> f64| mean(targets, |t| f(t.row(m).unwrap()));
    let s = |m| col(m, |r| r.source_mean);
    let t = |m| col(m, |r| r.target_accuracy);
    let unadapted = mean(targets, |t| t.unadapted_target_accuracy);

    let a = t(Method::SepRep) >= unadapted + 10.0;
    let b = s(Method::SepRep) > s(Method::ShotEnsKd);
    let wins = targets
        .iter()
        .filter(|r| r.row(Method::SepRep).unwrap().h_score >= r.row(Method::ShotEnsKd).unwrap().h_score)
        .count();
    let c = wins >= 3;
    let adapted = [Method::ShotEns, Method::ShotEnsKd, Method::SepRep];
    let d = adapted.iter().all(|&m| s(Method::SourceEns) > s(m) && t(Method::SourceEns) < t(m));
    for r in targets {
        let row = |m: Method| r.row(m).unwrap();
        println!(
            "      {:<10} unadapted T {:5.1} | seprep S {:5.1} T {:5.1} H {:5.1} | kd S {:5.1} T {:5.1} H {:5.1} | source-ens S {:5.1} T {:5.1}",
            r.target_domain,
            r.unadapted_target_accuracy,
            row(Method::SepRep).source_mean,
            row(Method::SepRep).target_accuracy,
            row(Method::SepRep).h_score,
            row(Method::ShotEnsKd).source_mean,
            row(Method::ShotEnsKd).target_accuracy,
            row(Method::ShotEnsKd).h_score,
            row(Method::SourceEns).source_mean,
            row(Method::SourceEns).target_accuracy,
        );
    }
    outcome(
        a && b && c && d && secs < 900.0,
        format!(
            "(a) mean T seprep {:.1} vs unadapted {unadapted:.1} [{}]; (b) mean S seprep {:.1} vs kd {:.1} [{}]; \
             (c) H wins {wins}/4 [{}]; (d) source-ens mean S {:.1} T {:.1}, shot-ens S {:.1} T {:.1} [{}]; {secs:.0}s",
            t(Method::SepRep),
            a,
            s(Method::SepRep),
            s(Method::ShotEnsKd),
            b,
            c,
            s(Method::SourceEns),
            t(Method::SourceEns),
            s(Method::ShotEns),
            t(Method::ShotEns),
            d
        ),
    )
}

fn reweighting() -> Outcome {
    let scores = [0.3, 1.7, 0.9, 2.2];
    let sum: f64 = softmax_weights(&scores).unwrap().iter().sum();
    // Bitwise equality needs a shift that itself adds without rounding.
    let exact = [0.25, 1.75, 0.875, 2.125];
    let shifted: Vec<f64> = exact.iter().map(|s| s + 8.0).collect();
    let invariant = softmax_weights(&exact).unwrap() == softmax_weights(&shifted).unwrap();

    // Three heads on one extractor; scaling a head's weights sharpens its softmax.
    let arch = Arch::parse("widths=8-16").unwrap();
    let sources: Vec<ModelBundle<f64>> = (0..3).map(|s| ModelBundle::init(&arch, 20 + s).unwrap()).collect();
    let mut model = assemble(&sources).unwrap();
    for (h, scale) in model.heads.iter_mut().zip([1.0, 40.0, 5.0]) {
        h.weight = h.weight.map(|v| v * scale);
        h.bias = h.bias.map(|v| v * scale);
    }
    let x: Tensor<f64> = random(&[32, 3, 16, 16], 0.0, 1.0, &mut SplitMix64::new(9));
    let (_, report) = predict(&model, &x, &WeightMode::PerBatch, Criterion::Entropy).unwrap();
    let argmin = |v: &[f64]| (0..v.len()).min_by(|&a, &b| v[a].total_cmp(&v[b])).unwrap();
    let argmax = |v: &[f64]| (0..v.len()).max_by(|&a, &b| v[a].total_cmp(&v[b])).unwrap();
    let lowest_gets_most = argmin(&report.per_model) == argmax(&report.weights);
    outcome(
        (sum - 1.0).abs() <= 1e-6 && invariant && lowest_gets_most,
        format!(
            "sum {sum:.12}, shift-invariant {invariant}, entropies {:?} -> weights {:?}",
            report.per_model.iter().map(|v| format!("{v:.3}")).collect::<Vec<_>>(),
            report.weights.iter().map(|v| format!("{v:.3}")).collect::<Vec<_>>()
        ),
    )
}

fn determinism_and_serialization() -> Outcome {
    let arch = Arch::parse("widths=4-8,classes=3").unwrap();
    let data = gen_domain(&DomainSpec::new(Transform::Identity, 8, 5), 3).unwrap();
    let cfg = TrainConfig { epochs: 2, batch_size: 8, seed: 11, ..TrainConfig::default() };
    let a = ckpt::model_to_bytes(&train_source(&data, &arch, &cfg).unwrap()).unwrap();
    let b = ckpt::model_to_bytes(&train_source(&data, &arch, &cfg).unwrap()).unwrap();
    let identical = a == b;
    let roundtrip = ckpt::model_to_bytes(&ckpt::model_from_bytes(&a).unwrap()).unwrap() == a;

    let mut bad_magic = a.clone();
    bad_magic[0] = b'X';
    let mut bad_version = a.clone();
    bad_version[4] = 9;
    let truncated = &a[..a.len() - 3];
    let mut trailing = a.clone();
    trailing.extend_from_slice(&[0, 0, 0, 0]);
    let classes = [
        matches!(ckpt::model_from_bytes(&bad_magic), Err(Error::BadMagic(_))),
        matches!(ckpt::model_from_bytes(&bad_version), Err(Error::VersionMismatch { .. })),
        matches!(ckpt::model_from_bytes(truncated), Err(Error::TruncatedPayload { .. })),
        matches!(ckpt::model_from_bytes(&trailing), Err(Error::ManifestMismatch(_))),
    ];
    outcome(
        identical && roundtrip && classes.iter().all(|&c| c),
        format!("identical checkpoints {identical}, bit-exact roundtrip {roundtrip}, corruption classes {classes:?}"),
    )
}

fn ablation_harness(bench: &Benchmark, target: usize) -> Outcome {
    match bench.ablation(target) {
        Ok(rows) => {
            let all = Criterion::ALL.iter().all(|c| rows.iter().any(|r| r.criterion == *c));
            let valid = rows.iter().all(|r| {
                r.h_score.is_finite() && (r.loss_weights.iter().sum::<f64>() - 1.0).abs() < 1e-6
            });
            let summary: Vec<String> = rows
                .iter()
                .map(|r| format!("{} S {:.1} T {:.1} H {:.1}", r.criterion, r.source_mean, r.target_accuracy, r.h_score))
                .collect();
            outcome(all && valid && rows.len() == 3, format!("target {}: {}", rows[0].target_domain, summary.join("; ")))
        }
        Err(e) => outcome(false, format!("ablation failed: {e}")),
    }
}

#[test]
fn acceptance_criteria() {
    let mut results: Vec<(u32, &str, Outcome)> = vec![
        (1, "fusion equivalence", fusion_equivalence()),
        (2, "scalar fusion oracle", scalar_fusion_oracle()),
        (3, "end-to-end fused model", end_to_end_fusion()),
        (4, "gradient suite", gradient_suite()),
        (5, "h-score anchors", h_score_anchors()),
        (6, "flops ratios", flops_ratios()),
    ];

    let started = Instant::now();
    let cfg = ExperimentConfig::default();
    let bench = Benchmark::prepare(&cfg).expect("benchmark");
    let targets: Vec<TargetReport> = cfg.targets.iter().map(|&t| bench.run_target(t).expect("target")).collect();
    let secs = started.elapsed().as_secs_f64();
    results.push((7, "toy multi-source experiment", toy_experiment(&targets, secs)));
    results.push((8, "reweighting properties", reweighting()));
    results.push((9, "determinism and serialization", determinism_and_serialization()));
    results.push((10, "uncertainty-criterion ablation", ablation_harness(&bench, cfg.targets[1])));
    results.sort_by_key(|r| r.0);

    for (n, name, o) in &results {
        println!("{} criterion {n:>2} {name}: {}", if o.pass { "PASS" } else { "FAIL" }, o.detail);
    }
    let failed: Vec<u32> = results.iter().filter(|r| !r.2.pass).map(|r| r.0).collect();
    assert!(failed.is_empty(), "failing criteria: {failed:?}");
}
