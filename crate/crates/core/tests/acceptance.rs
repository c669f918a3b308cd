//! Acceptance suite. Runs every acceptance criterion at its stated tolerance,
//! prints one PASS/FAIL line per criterion and exits non-zero if any fails.
//! Built with `harness = false` so the lines show up in `cargo test` output.

use std::process::{Command, ExitCode};
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use agefair::data::{generate_synthetic, zscore_apply, zscore_fit, FeatureMatrix, SynthConfig};
use agefair::fairness::{delta_eo, GroupedOutcomes};
use agefair::harness::{
    gradcheck_suite, run_experiment, ExperimentConfig, ExperimentReport, GRADCHECK_TOLERANCE,
    QUADRATIC_TOLERANCE,
};
use agefair::models::{
    build, probe_age, train, AgeStats, ArchConfig, Batch, LossHistory, ModelBundle, ModelKind,
    ProbeConfig, TrainConfig, Trainer,
};

type Verdict = Result<(bool, String), String>;

struct Criterion {
    id: usize,
    name: &'static str,
    limit: Duration,
}

fn report(c: &Criterion, verdict: Verdict, elapsed: Duration) -> bool {
    let (passed, detail) = match verdict {
        Ok((ok, detail)) => (ok, detail),
        Err(e) => (false, format!("error: {e}")),
    };
    let in_time = elapsed <= c.limit;
    let passed = passed && in_time;
    let timing = if in_time {
        format!("{:.2}s", elapsed.as_secs_f64())
    } else {
        format!(
            "{:.2}s, over the {:.0}s limit",
            elapsed.as_secs_f64(),
            c.limit.as_secs_f64()
        )
    };
    println!(
        "criterion {} {}  {}: {} ({timing})",
        c.id,
        if passed { "PASS" } else { "FAIL" },
        c.name,
        detail
    );
    passed
}

fn err(e: impl std::fmt::Display) -> String {
    e.to_string()
}

fn metric_exactness() -> Verdict {
    let hand = delta_eo(&GroupedOutcomes::from_rates(&[0.1, 0.3], &[0.2, 0.2]).map_err(err)?)
        .map_err(err)?;
    let hand_ok = (hand - 0.2).abs() <= 1e-12;

    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let mut one_group_bad = 0;
    let mut two_group_bad = 0;
    for _ in 0..1000 {
        let (p, n): (f64, f64) = (rng.random(), rng.random());
        if delta_eo(&GroupedOutcomes::from_rates(&[p], &[n]).map_err(err)?).map_err(err)? != 0.0 {
            one_group_bad += 1;
        }
        let (p0, p1, n0, n1): (f64, f64, f64, f64) =
            (rng.random(), rng.random(), rng.random(), rng.random());
        let got = delta_eo(&GroupedOutcomes::from_rates(&[p0, p1], &[n0, n1]).map_err(err)?)
            .map_err(err)?;
        let oracle = (p0 - p1).abs() + (n0 - n1).abs();
        if got.to_bits() != oracle.to_bits() {
            two_group_bad += 1;
        }
    }
    Ok((
        hand_ok && one_group_bad == 0 && two_group_bad == 0,
        format!(
            "hand fixture {hand:.15}, one-group nonzero {one_group_bad}/1000, two-group inexact {two_group_bad}/1000"
        ),
    ))
}

fn bound_fuzz() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(202);
    let mut tight = 0;
    let mut loose = 0;
    let mut worst_tight: f64 = 0.0;
    let mut worst_loose: f64 = 0.0;
    for _ in 0..10_000 {
        let n = rng.random_range(1..=10usize);
        let fp: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..=0.5)).collect();
        let fnr: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..=0.5)).collect();
        let d = delta_eo(&GroupedOutcomes::from_rates(&fp, &fnr).map_err(err)?).map_err(err)?;
        worst_tight = worst_tight.max(d / n as f64);
        tight += usize::from(d > n as f64);

        let fp: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..=1.0)).collect();
        let fnr: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..=1.0)).collect();
        let d = delta_eo(&GroupedOutcomes::from_rates(&fp, &fnr).map_err(err)?).map_err(err)?;
        worst_loose = worst_loose.max(d / (2 * n) as f64);
        loose += usize::from(d > 2.0 * n as f64);
    }
    Ok((
        tight == 0 && loose == 0,
        format!(
            "violations {tight} of Δ ≤ N (worst Δ/N {worst_tight:.3}), {loose} of Δ ≤ 2N (worst Δ/2N {worst_loose:.3}) over 10⁴ draws each"
        ),
    ))
}

fn gradient_verification() -> Verdict {
    let mut worst_quadratic: f64 = 0.0;
    let mut worst_other: f64 = 0.0;
    let mut failures = Vec::new();
    let mut cases = 0;
    for seed in 0..10 {
        for case in gradcheck_suite(seed).map_err(err)? {
            cases += 1;
            if case.tolerance == QUADRATIC_TOLERANCE {
                worst_quadratic = worst_quadratic.max(case.max_relative_error);
            } else {
                worst_other = worst_other.max(case.max_relative_error);
            }
            if !case.passed() {
                failures.push(format!("{} (seed {seed})", case.name));
            }
        }
    }
    let ok = failures.is_empty()
        && worst_quadratic < QUADRATIC_TOLERANCE
        && worst_other < GRADCHECK_TOLERANCE;
    let mut detail = format!(
        "{cases} cases over 10 seeds, max relative error {worst_other:.2e} (< 1e-4), quadratic {worst_quadratic:.2e} (< 1e-7)"
    );
    if !failures.is_empty() {
        detail.push_str(&format!("; failed: {}", failures.join(", ")));
    }
    Ok((ok, detail))
}

fn small_arch() -> ArchConfig {
    ArchConfig {
        interpreter_hidden: vec![8],
        z_dim: 4,
        classifier_hidden: vec![4],
        adversary_hidden: vec![4],
        reconstructor_hidden: vec![8],
        discriminator_hidden: vec![4],
    }
}

fn synthetic(n: usize, d: usize, seed: u64) -> Result<FeatureMatrix, String> {
    let m = generate_synthetic(&SynthConfig {
        n,
        d,
        seed,
        ..SynthConfig::default()
    })
    .map_err(err)?
    .matrix;
    let stats = zscore_fit(&m).map_err(err)?;
    zscore_apply(&stats, &m).map_err(err)
}

fn snapshot(b: &ModelBundle) -> Vec<(&'static str, Vec<f64>)> {
    b.networks()
        .into_iter()
        .map(|(role, net)| (role, net.clone().flat_params()))
        .collect()
}

/// Roles whose parameters differ between two snapshots.
fn changed(
    before: &[(&'static str, Vec<f64>)],
    after: &[(&'static str, Vec<f64>)],
) -> Vec<&'static str> {
    let mut roles: Vec<&'static str> = before
        .iter()
        .zip(after)
        .filter(|(a, b)| {
            a.1.len() != b.1.len()
                || a.1
                    .iter()
                    .zip(&b.1)
                    .any(|(x, y)| x.to_bits() != y.to_bits())
        })
        .map(|(a, _)| a.0)
        .collect();
    roles.dedup();
    roles
}

fn roles_of(b: &ModelBundle) -> Vec<&'static str> {
    let mut r: Vec<&'static str> = b.networks().into_iter().map(|(role, _)| role).collect();
    r.dedup();
    r
}

fn structure_for(kind: ModelKind, data: &FeatureMatrix) -> Result<Vec<String>, String> {
    let cfg = TrainConfig {
        modalities: 2,
        arch: small_arch(),
        seed: 5,
        ..TrainConfig::default()
    };
    let mut bundle = build(kind, data.n_features(), &cfg).map_err(err)?;
    let stats = AgeStats::fit(&data.ages).map_err(err)?;
    let rows: Vec<usize> = (0..16).collect();
    let batch = Batch::from_matrix(data, &rows, &stats);
    let roles = roles_of(&bundle);
    let expect_joint: Vec<&str> = roles
        .iter()
        .copied()
        .filter(|r| matches!(*r, "interpreter" | "classifier" | "reconstructor"))
        .collect();
    let mut problems = Vec::new();
    let mut check = |phase: &str, got: Vec<&'static str>, want: Vec<&str>| {
        if got != want {
            problems.push(format!(
                "{kind} {phase}: changed {got:?}, expected {want:?}"
            ));
        }
    };

    let mut trainer = Trainer::new(&mut bundle, &cfg);
    let s0 = snapshot(trainer.bundle());
    let (_, stacked) = trainer.joint_step(&batch).map_err(err)?;
    let s1 = snapshot(trainer.bundle());
    check("joint step", changed(&s0, &s1), expect_joint);
    if kind == ModelKind::ConsensusNet {
        trainer.discriminator_step(&stacked).map_err(err)?;
        let s2 = snapshot(trainer.bundle());
        check(
            "discriminator step",
            changed(&s1, &s2),
            vec!["discriminator"],
        );
        trainer.adversary_step(&stacked, &batch).map_err(err)?;
        check(
            "adversary step",
            changed(&s2, &snapshot(trainer.bundle())),
            vec!["adversary"],
        );
    } else {
        trainer.adversary_step(&stacked, &batch).map_err(err)?;
        check(
            "adversary step",
            changed(&s1, &snapshot(trainer.bundle())),
            vec!["adversary"],
        );
    }
    Ok(problems)
}

fn trace_of(h: &LossHistory) -> Vec<u64> {
    h.epochs.iter().map(|e| e.loss_c.to_bits()).collect()
}

fn algorithm_structure() -> Verdict {
    let data = synthetic(40, 6, 17)?;
    let mut problems = Vec::new();
    for kind in [
        ModelKind::Simple,
        ModelKind::Autoencoder,
        ModelKind::ConsensusNet,
        ModelKind::Entropy,
    ] {
        problems.extend(structure_for(kind, &data)?);
    }

    // With every extra term switched off each architecture must retrace the
    // baseline exactly. Consensus reduces only with a single modality.
    let off = TrainConfig {
        epochs: 3,
        adversary_weight: 0.0,
        reconstruction_weight: 0.0,
        discriminator_weight: 0.0,
        modalities: 1,
        arch: small_arch(),
        seed: 9,
        ..TrainConfig::default()
    };
    let mut base = build(ModelKind::BaselineDnn, data.n_features(), &off).map_err(err)?;
    let base_trace = trace_of(&train(&mut base, &data, &off).map_err(err)?);
    let base_params = snapshot(&base);
    let mut reduced = 0;
    for kind in ModelKind::ALL
        .into_iter()
        .filter(|k| *k != ModelKind::BaselineDnn)
    {
        let mut b = build(kind, data.n_features(), &off).map_err(err)?;
        let trace = trace_of(&train(&mut b, &data, &off).map_err(err)?);
        let params: Vec<_> = snapshot(&b)
            .into_iter()
            .filter(|(r, _)| matches!(*r, "interpreter" | "classifier"))
            .collect();
        if trace != base_trace || !changed(&base_params, &params).is_empty() {
            problems.push(format!(
                "{kind} with extra terms off diverges from baseline_dnn"
            ));
        } else {
            reduced += 1;
        }
    }
    let detail = if problems.is_empty() {
        format!("update partitioning holds for 4 algorithms; {reduced}/6 kinds retrace baseline_dnn bitwise")
    } else {
        problems.join("; ")
    };
    Ok((problems.is_empty(), detail))
}

struct Paired {
    baseline_acc: f64,
    simple_acc: f64,
    baseline_delta: f64,
    simple_delta: f64,
    z_probe: f64,
    x_probe: f64,
}

const PAIRED_SEEDS: u64 = 5;

fn paired_runs() -> Result<Paired, String> {
    let mut p = Paired {
        baseline_acc: 0.0,
        simple_acc: 0.0,
        baseline_delta: 0.0,
        simple_delta: 0.0,
        z_probe: 0.0,
        x_probe: 0.0,
    };
    let k = PAIRED_SEEDS as f64;
    for seed in 0..PAIRED_SEEDS {
        let cfg = ExperimentConfig {
            seed,
            models: vec![ModelKind::BaselineDnn, ModelKind::Simple],
            n_groups: vec![2],
            ..ExperimentConfig::default()
        };
        let report = run_experiment(&cfg).map_err(err)?;
        let get = |kind| {
            report
                .model(kind)
                .ok_or_else(|| format!("{kind} missing from report"))
        };
        let delta = |kind| -> Result<f64, String> {
            get(kind)?.aggregate.deltas[0]
                .summary
                .map(|s| s.mean)
                .ok_or_else(|| format!("{kind} has no defined Δ_eo^(2) on seed {seed}"))
        };
        let (b, s) = (get(ModelKind::BaselineDnn)?, get(ModelKind::Simple)?);
        p.baseline_acc += b.aggregate.accuracy.mean / k;
        p.simple_acc += s.aggregate.accuracy.mean / k;
        p.baseline_delta += delta(ModelKind::BaselineDnn)? / k;
        p.simple_delta += delta(ModelKind::Simple)? / k;
        let z = s
            .aggregate
            .representation_probe
            .ok_or("simple has no representation probe")?;
        let x = s
            .aggregate
            .feature_probe
            .ok_or("simple has no feature probe")?;
        p.z_probe += z.mean / k;
        p.x_probe += x.mean / k;
    }
    Ok(p)
}

fn disentanglement_direction(p: &Paired) -> Verdict {
    let gap = (p.simple_acc - p.baseline_acc).abs();
    Ok((
        p.simple_delta < p.baseline_delta && gap <= 0.05,
        format!(
            "mean Δ_eo^(2) simple {:.3} vs baseline {:.3}; accuracy {:.3} vs {:.3} (gap {:.1} pp, limit 5)",
            p.simple_delta,
            p.baseline_delta,
            p.simple_acc,
            p.baseline_acc,
            100.0 * gap
        ),
    ))
}

fn adversary_degradation(p: &Paired) -> Verdict {
    let ratio = p.z_probe / p.x_probe;
    Ok((
        ratio >= 1.5,
        format!(
            "age MAE on z {:.2} y vs on x {:.2} y, ratio {ratio:.2} (needs ≥ 1.5)",
            p.z_probe, p.x_probe
        ),
    ))
}

fn age_predictability() -> Verdict {
    let mut gains = Vec::new();
    let mut null_ratios = Vec::new();
    for seed in 0..3 {
        let cfg = ProbeConfig {
            seed,
            ..ProbeConfig::default()
        };
        let with_age = generate_synthetic(&SynthConfig {
            seed,
            ..SynthConfig::default()
        })
        .map_err(err)?;
        let r = probe_age(&with_age.matrix, &cfg).map_err(err)?;
        gains.push(1.0 - r.mean / r.reference_mean);
        let without = generate_synthetic(&SynthConfig {
            seed,
            age_effect: 0.0,
            ..SynthConfig::default()
        })
        .map_err(err)?;
        let r = probe_age(&without.matrix, &cfg).map_err(err)?;
        null_ratios.push(r.mean / r.reference_mean);
    }
    let ok =
        gains.iter().all(|g| *g >= 0.30) && null_ratios.iter().all(|r| (r - 1.0).abs() <= 0.10);
    let fmt = |v: &[f64]| {
        v.iter()
            .map(|x| format!("{:+.1}%", 100.0 * x))
            .collect::<Vec<_>>()
            .join(", ")
    };
    Ok((
        ok,
        format!(
            "gain over mean predictor {} (needs ≥ 30%); with age effect 0, MAE vs mean predictor {} (needs within 10%)",
            fmt(&gains),
            fmt(&null_ratios.iter().map(|r| r - 1.0).collect::<Vec<_>>())
        ),
    ))
}

fn entropy_degeneracy() -> Verdict {
    let data = synthetic(80, 8, 23)?;
    let cfg = TrainConfig {
        epochs: 6,
        lambda_h: 0.0,
        arch: small_arch(),
        seed: 31,
        ..TrainConfig::default()
    };
    let run = |kind| -> Result<Vec<[Option<u64>; 4]>, String> {
        let mut b = build(kind, data.n_features(), &cfg).map_err(err)?;
        let h = train(&mut b, &data, &cfg).map_err(err)?;
        Ok(h.epochs
            .iter()
            .map(|e| {
                [
                    Some(e.loss_c.to_bits()),
                    e.loss_a.map(f64::to_bits),
                    e.loss_r.map(f64::to_bits),
                    e.loss_d.map(f64::to_bits),
                ]
            })
            .collect())
    };
    let full = run(ModelKind::Entropy)?;
    let binary = run(ModelKind::EntropyBinary)?;
    Ok((
        full == binary,
        format!(
            "{} epochs of loss history {} bitwise",
            full.len(),
            if full == binary {
                "identical"
            } else {
                "differ"
            }
        ),
    ))
}

fn end_to_end_determinism() -> Verdict {
    let dir = tempfile::tempdir().map_err(err)?;
    let config = dir.path().join("experiment.cfg");
    std::fs::write(
        &config,
        "data = synthetic\n\
         synth.n = 120\n\
         synth.d = 10\n\
         models = baseline_dnn, simple, consensus_net, entropy\n\
         folds = 3\n\
         groups = 2, 5\n\
         train.epochs = 4\n\
         probe.epochs = 5\n",
    )
    .map_err(err)?;
    let mut outputs = Vec::new();
    for run in ["a", "b"] {
        let out = dir.path().join(run);
        let status = Command::new(env!("CARGO_BIN_EXE_agefair"))
            .args(["run", "--seed", "7", "--config"])
            .arg(&config)
            .arg("--out")
            .arg(&out)
            .output()
            .map_err(err)?;
        if !status.status.success() {
            return Err(String::from_utf8_lossy(&status.stderr).into_owned());
        }
        outputs.push(std::fs::read(out.join("report.json")).map_err(err)?);
    }
    let same = outputs[0] == outputs[1];
    let parsed =
        ExperimentReport::from_json(std::str::from_utf8(&outputs[0]).map_err(err)?).map_err(err)?;
    Ok((
        same,
        format!(
            "two runs wrote {} and {} bytes, {} ({} models)",
            outputs[0].len(),
            outputs[1].len(),
            if same { "byte-identical" } else { "different" },
            parsed.models.len()
        ),
    ))
}

fn timed<F: FnOnce() -> Verdict>(f: F) -> (Verdict, Duration) {
    let start = Instant::now();
    let v = f();
    (v, start.elapsed())
}

fn main() -> ExitCode {
    let secs = Duration::from_secs;
    let criteria = [
        Criterion {
            id: 1,
            name: "metric exactness",
            limit: secs(1),
        },
        Criterion {
            id: 2,
            name: "bound fuzz",
            limit: secs(5),
        },
        Criterion {
            id: 3,
            name: "gradient verification",
            limit: secs(10),
        },
        Criterion {
            id: 4,
            name: "algorithm structure",
            limit: secs(300),
        },
        Criterion {
            id: 5,
            name: "disentanglement direction",
            limit: secs(300),
        },
        Criterion {
            id: 6,
            name: "adversary degradation",
            limit: secs(300),
        },
        Criterion {
            id: 7,
            name: "age predictability",
            limit: secs(300),
        },
        Criterion {
            id: 8,
            name: "entropy-variant degeneracy",
            limit: secs(300),
        },
        Criterion {
            id: 9,
            name: "end-to-end determinism",
            limit: secs(300),
        },
    ];
    let mut passed = 0;
    let mut run = |i: usize, (v, t): (Verdict, Duration)| {
        passed += usize::from(report(&criteria[i], v, t));
    };
    run(0, timed(metric_exactness));
    run(1, timed(bound_fuzz));
    run(2, timed(gradient_verification));
    run(3, timed(algorithm_structure));

    // Criteria 5 and 6 read the same paired runs; each is charged the full
    // cost of producing them.
    let start = Instant::now();
    let paired = paired_runs();
    let shared = start.elapsed();
    let (v5, v6) = match &paired {
        Ok(p) => (disentanglement_direction(p), adversary_degradation(p)),
        Err(e) => (Err(e.clone()), Err(e.clone())),
    };
    run(4, (v5, shared));
    run(5, (v6, shared));

    run(6, timed(age_predictability));
    run(7, timed(entropy_degeneracy));
    run(8, timed(end_to_end_determinism));

    println!("acceptance: {passed}/{} criteria passed", criteria.len());
    if passed == criteria.len() {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
