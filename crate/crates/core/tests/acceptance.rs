//! Acceptance suite. Runs every criterion, prints one PASS/FAIL line each and
//! exits non-zero if any failed.

use std::collections::BTreeSet;
use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use proptest::prelude::*;
use proptest::test_runner::{Config as PropConfig, TestRunner};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use ststnet::apex::{argmax_first, spot_apex, RoiSet};
use ststnet::dataio::{generate_synthetic, DatasetId, EmotionClass, SubjectKey, SynthSpec};
use ststnet::eval::{make_loso_plan, metrics, ConfusionMatrix};
use ststnet::flow::{estimate_flow, optical_strain, FlowField, FlowParams};
use ststnet::numerics::{Grid2, Grid3};
use ststnet::ststnet::{backward, count_parameters, forward, loss, NetworkParams, STREAM_KERNELS};

type Check = Result<String, String>;

fn ensure(cond: bool, msg: impl Into<String>) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn random_cube(rng: &mut ChaCha8Rng) -> Grid3 {
    Grid3::from_fn(28, 28, 3, |_, _, _| rng.random_range(0.0..1.0))
}

fn shapes() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let params = NetworkParams::init(&mut rng);
    let tape = forward(&params, &random_cube(&mut rng)).map_err(|e| e.to_string())?;
    for (st, &k) in tape.streams.iter().zip(&STREAM_KERNELS) {
        ensure(
            st.conv.shape() == (28, 28, k),
            format!("conv {:?}", st.conv.shape()),
        )?;
        ensure(
            st.relu.shape() == (28, 28, k),
            format!("relu {:?}", st.relu.shape()),
        )?;
        ensure(
            st.pooled.shape() == (10, 10, k),
            format!("pool {:?}", st.pooled.shape()),
        )?;
    }
    ensure(tape.streams.len() == 3, "three streams")?;
    ensure(
        tape.merged.shape() == (10, 10, 16),
        format!("merge {:?}", tape.merged.shape()),
    )?;
    ensure(
        tape.averaged.shape() == (5, 5, 16),
        format!("avg {:?}", tape.averaged.shape()),
    )?;
    ensure(tape.averaged.data().len() == 400, "flatten 400")?;
    ensure(
        tape.logits.len() == 3 && tape.probabilities.len() == 3,
        "3 outputs",
    )?;
    Ok("28x28x{3,5,8} -> 10x10x{3,5,8} -> 10x10x16 -> 5x5x16 -> 400 -> 3".into())
}

/// Max-pool winners and the ReLU sign of each winner: the piecewise-linear
/// piece the network output is on. A central difference is only a derivative
/// estimate if both probes stay on the same piece as the base point.
fn activation_pattern(tape: &ststnet::ststnet::ActivationTape) -> (Vec<bool>, Vec<usize>) {
    let mut signs = Vec::new();
    let mut winners = Vec::new();
    for st in &tape.streams {
        signs.extend(st.pooled.data().iter().map(|&v| v > 0.0));
        winners.extend_from_slice(&st.argmax);
    }
    (signs, winners)
}

fn gradients() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let h = 1e-5;
    let mut worst = 0.0f64;
    let mut kinks = 0;
    for pair in 0..5 {
        let mut params = NetworkParams::init(&mut rng);
        // Non-zero biases so every bias gradient is exercised away from init.
        params.for_each_mut(|v| {
            if *v == 0.0 {
                *v = rng.random_range(-0.1..0.1);
            }
        });
        let x = random_cube(&mut rng);
        let y = EmotionClass::ALL[pair % 3];
        let tape = forward(&params, &x).unwrap();
        let pattern = activation_pattern(&tape);
        let analytic = backward(&params, &tape, y).flatten();
        let base = params.flatten();
        let probe = |flat: &[f64]| {
            let mut p = params.clone();
            let mut it = flat.iter();
            p.for_each_mut(|v| *v = *it.next().unwrap());
            let t = forward(&p, &x).unwrap();
            (loss(&t.probabilities, y), activation_pattern(&t) == pattern)
        };
        let mut flat = base.clone();
        let mut compared = [0usize; 4];
        for i in 0..base.len() {
            flat[i] = base[i] + h;
            let (lp, same_p) = probe(&flat);
            flat[i] = base[i] - h;
            let (lm, same_m) = probe(&flat);
            flat[i] = base[i];
            if !(same_p && same_m) {
                kinks += 1;
                continue;
            }
            let group = match i {
                0..=83 => 0,
                84..=223 => 1,
                224..=447 => 2,
                _ => 3,
            };
            compared[group] += 1;
            let numeric = (lp - lm) / (2.0 * h);
            let a = analytic[i];
            let denom = a.abs().max(numeric.abs());
            if denom == 0.0 {
                continue;
            }
            let rel = (a - numeric).abs() / denom;
            worst = worst.max(rel);
            if rel >= 1e-4 {
                return Err(format!(
                    "pair {pair} param {i}: analytic {a:e} numeric {numeric:e}"
                ));
            }
        }
        ensure(
            compared.iter().all(|&c| c > 0),
            format!("pair {pair}: a parameter group went unchecked"),
        )?;
        ensure(
            compared.iter().sum::<usize>() * 100 >= 99 * base.len(),
            format!("pair {pair}: too many probes crossed a kink"),
        )?;
    }
    Ok(format!(
        "5 pairs x {} parameters, max rel err {worst:.2e} ({kinks} probes straddling a ReLU/pool switch not compared)",
        count_parameters(&NetworkParams::zeros())
    ))
}

fn parameter_audit() -> Check {
    let n = count_parameters(&NetworkParams::zeros());
    ensure(n == 1651, format!("count drifted to {n}"))?;
    Ok("1651 learnable scalars (reported figure 0.00167M, gap of 19 noted)".into())
}

fn metric_oracle() -> Check {
    let cm = ConfusionMatrix::from_counts(vec![vec![2, 0], vec![1, 1]]).unwrap();
    let r = metrics(&cm, "example").unwrap();
    ensure((r.accuracy - 0.75).abs() < 1e-12, "example accuracy")?;
    ensure((r.uar - 0.75).abs() < 1e-12, "example UAR")?;
    ensure(
        (r.uf1 - 0.733_333_333_333_333_3).abs() < 1e-12,
        format!("example UF1 {}", r.uf1),
    )?;

    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for case in 0..1000 {
        let m = 3;
        let n = rng.random_range(1..500);
        let truths: Vec<usize> = (0..n).map(|_| rng.random_range(0..m)).collect();
        let preds: Vec<usize> = truths
            .iter()
            .map(|&t| {
                if rng.random_bool(0.6) {
                    t
                } else {
                    rng.random_range(0..m)
                }
            })
            .collect();
        let mut cm = ConfusionMatrix::new(m);
        for (t, p) in truths.iter().zip(&preds) {
            cm.record(*t, *p).unwrap();
        }
        let r = metrics(&cm, "x").unwrap();
        let (mut rs, mut fs, mut ps) = (0.0, 0.0, 0.0);
        for a in 0..m {
            let count = |f: &dyn Fn(usize, usize) -> bool| {
                truths
                    .iter()
                    .zip(&preds)
                    .filter(|(t, p)| f(**t, **p))
                    .count() as f64
            };
            let tp = count(&|t, p| t == a && p == a);
            let fp = count(&|t, p| t != a && p == a);
            let fneg = count(&|t, p| t == a && p != a);
            let prec = if tp + fp > 0.0 { tp / (tp + fp) } else { 0.0 };
            let rec = if tp + fneg > 0.0 {
                tp / (tp + fneg)
            } else {
                0.0
            };
            ps += prec;
            rs += rec;
            fs += if prec + rec > 0.0 {
                2.0 * prec * rec / (prec + rec)
            } else {
                0.0
            };
        }
        let acc = truths.iter().zip(&preds).filter(|(t, p)| t == p).count() as f64 / n as f64;
        let (mp, mr) = (ps / 3.0, rs / 3.0);
        let f1 = if mp + mr > 0.0 {
            2.0 * mp * mr / (mp + mr)
        } else {
            0.0
        };
        for (name, got, want) in [
            ("accuracy", r.accuracy, acc),
            ("F1", r.f1, f1),
            ("UF1", r.uf1, fs / 3.0),
            ("UAR", r.uar, rs / 3.0),
        ] {
            ensure(
                (got - want).abs() <= 1e-12,
                format!("case {case} {name}: {got} vs {want}"),
            )?;
        }
    }
    Ok("worked example + 1000 random cases agree to 1e-12".into())
}

fn loso_partition() -> Check {
    let mut runner = TestRunner::new(PropConfig {
        cases: 256,
        ..PropConfig::default()
    });
    let strategy = (1usize..=68, prop::collection::vec(0usize..1000, 1..500));
    runner
        .run(&strategy, |(subjects, draws)| {
            let keys: Vec<SubjectKey> = draws
                .iter()
                .map(|d| {
                    let s = d % subjects;
                    let ds = match s {
                        0..=23 => DatasetId::Smic,
                        24..=39 => DatasetId::Casme2,
                        _ => DatasetId::Samm,
                    };
                    SubjectKey::new(ds, format!("{s}"))
                })
                .collect();
            let plan = make_loso_plan(&keys);
            let distinct: BTreeSet<_> = keys.iter().collect();
            prop_assert_eq!(plan.len(), distinct.len());
            let mut tested = vec![0; keys.len()];
            for fold in &plan {
                for &i in &fold.test {
                    tested[i] += 1;
                    prop_assert_eq!(&keys[i], &fold.subject);
                }
                for &i in &fold.train {
                    prop_assert!(keys[i] != fold.subject, "subject leaked into training");
                }
                prop_assert_eq!(fold.train.len() + fold.test.len(), keys.len());
            }
            prop_assert!(tested.iter().all(|&c| c == 1));
            Ok(())
        })
        .map_err(|e| e.to_string())?;
    Ok("256 random datasets of up to 68 subjects".into())
}

fn periodic(y: f64, x: f64) -> f64 {
    use std::f64::consts::TAU;
    0.5 + 0.18 * (TAU * x / 16.0).sin() * (TAU * y / 32.0).cos()
        + 0.12 * (TAU * (x + 2.0 * y) / 32.0).sin()
        + 0.1 * (TAU * (3.0 * x - y) / 64.0).cos()
        + 0.08 * (TAU * y / 8.0).sin()
}

fn flow_recovery() -> Check {
    let n = 64;
    let onset = Grid2::from_fn(n, n, |y, x| periodic(y as f64, x as f64));
    let mut worst = 0.0f64;
    for (dx, dy) in [
        (1, 0),
        (0, 1),
        (1, 1),
        (2, -1),
        (-2, 3),
        (3, 3),
        (-3, -3),
        (0, -3),
        (3, -2),
    ] {
        let (dxf, dyf) = (dx as f64, dy as f64);
        let apex = Grid2::from_fn(n, n, |y, x| periodic(y as f64 - dyf, x as f64 - dxf));
        let f = estimate_flow(&onset, &apex, &FlowParams::default()).map_err(|e| e.to_string())?;
        let (mut eu, mut ev, mut count) = (0.0, 0.0, 0.0);
        for y in 4..n - 4 {
            for x in 4..n - 4 {
                eu += (f.u.get(y, x) - dxf).abs();
                ev += (f.v.get(y, x) - dyf).abs();
                count += 1.0;
            }
        }
        let (mu, mv) = (eu / count, ev / count);
        worst = worst.max(mu).max(mv);
        ensure(
            mu <= 0.2 && mv <= 0.2,
            format!("shift ({dx},{dy}): MAE u {mu:.3}, v {mv:.3}"),
        )?;
    }
    Ok(format!(
        "9 shifts up to (3,3), worst interior MAE {worst:.3} px"
    ))
}

fn strain() -> Check {
    let (h, w) = (20, 24);
    let translation = FlowField {
        u: Grid2::filled(h, w, 1.7),
        v: Grid2::filled(h, w, -0.4),
        converged: true,
    };
    let s = optical_strain(&translation).map_err(|e| e.to_string())?;
    ensure(
        s.magnitude.data().iter().all(|&m| m.abs() <= 1e-10),
        "translation strain",
    )?;
    for a in [0.3, -1.25, 2.0] {
        let shear = FlowField {
            u: Grid2::from_fn(h, w, |y, _| a * y as f64),
            v: Grid2::zeros(h, w),
            converged: true,
        };
        let s = optical_strain(&shear).map_err(|e| e.to_string())?;
        let want = a.abs() / 2f64.sqrt();
        for y in 1..h - 1 {
            for x in 1..w - 1 {
                let m = s.magnitude.get(y, x);
                ensure(
                    (m - want).abs() <= 1e-10,
                    format!("shear a={a} at ({y},{x}): {m} vs {want}"),
                )?;
                ensure((s.exy.get(y, x) - a / 2.0).abs() <= 1e-10, "exy")?;
                ensure(
                    s.exx.get(y, x).abs() <= 1e-10 && s.eyy.get(y, x).abs() <= 1e-10,
                    "normal strain",
                )?;
            }
        }
    }
    Ok("translation -> 0, shear a*y -> |a|/sqrt(2) within 1e-10".into())
}

fn apex_spotting() -> Check {
    let out = generate_synthetic(&SynthSpec {
        seed: 31,
        subjects: 12,
        clips_per_subject: 10,
        ..SynthSpec::default()
    })
    .map_err(|e| e.to_string())?;
    let n = out.dataset.len();
    let (mut same_as_scan, mut within_one) = (0, 0);
    for (seq, truth) in out.dataset.sequences.iter().zip(&out.truth) {
        let (h, w) = seq.frames[0].extent();
        let spot = spot_apex(seq, &RoiSet::for_face(h, w)).map_err(|e| e.to_string())?;
        if spot.apex == seq.onset + argmax_first(&spot.rates) {
            same_as_scan += 1;
        }
        if spot.apex.abs_diff(truth.apex) <= 1 {
            within_one += 1;
        }
    }
    ensure(n >= 100, "need at least 100 clips")?;
    ensure(
        same_as_scan == n,
        format!("search matched scan on {same_as_scan}/{n}"),
    )?;
    ensure(
        within_one * 100 >= 95 * n,
        format!("within one frame on {within_one}/{n}"),
    )?;
    Ok(format!(
        "{n} clips: search == scan {same_as_scan}/{n}, |spot - truth| <= 1 on {within_one}/{n}"
    ))
}

fn cli(out: &Path, args: &[&str]) -> Result<(), String> {
    let status = Command::new(env!("CARGO_BIN_EXE_ststnet"))
        .args(args)
        .arg("--out")
        .arg(out)
        .output()
        .map_err(|e| e.to_string())?;
    if !status.status.success() {
        return Err(format!(
            "`{}` failed: {}",
            args.join(" "),
            String::from_utf8_lossy(&status.stderr)
        ));
    }
    Ok(())
}

fn pipeline(out: &Path, workers: usize) -> Result<serde_json::Value, String> {
    let w = workers.to_string();
    for cmd in ["synth", "spot", "flow", "eval"] {
        cli(out, &[cmd, "--seed", "7", "--workers", &w])?;
    }
    let text = std::fs::read_to_string(out.join("results.json")).map_err(|e| e.to_string())?;
    serde_json::from_str(&text).map_err(|e| e.to_string())
}

fn full_scores(results: &serde_json::Value) -> Result<(f64, f64), String> {
    let full = results["reports"]
        .as_array()
        .and_then(|r| r.iter().find(|r| r["scope"] == "Full"))
        .ok_or("no Full report")?;
    Ok((
        full["uf1"].as_f64().unwrap_or(0.0),
        full["uar"].as_f64().unwrap_or(0.0),
    ))
}

fn end_to_end(dir: &Path) -> Check {
    let results = pipeline(&dir.join("run_a"), 1)?;
    let (uf1, uar) = full_scores(&results)?;
    ensure(
        results["meta"]["samples"] == 60,
        "expected 60 evaluated clips",
    )?;
    ensure(
        uf1 >= 0.9 && uar >= 0.9,
        format!("UF1 {uf1:.4}, UAR {uar:.4}"),
    )?;
    Ok(format!(
        "6 subjects x 10 clips, Full UF1 {uf1:.4}, UAR {uar:.4}"
    ))
}

fn without_timing(mut v: serde_json::Value) -> serde_json::Value {
    if let Some(obj) = v.as_object_mut() {
        obj.remove("timing");
    }
    v
}

fn determinism(dir: &Path) -> Check {
    let a_path = dir.join("run_a");
    if !a_path.join("results.json").exists() {
        pipeline(&a_path, 1)?;
    }
    let a: serde_json::Value = serde_json::from_str(
        &std::fs::read_to_string(a_path.join("results.json")).map_err(|e| e.to_string())?,
    )
    .map_err(|e| e.to_string())?;
    let b = pipeline(&dir.join("run_b"), 3)?;
    for file in ["data/annotations.csv", "spotted.csv", "cubes.stst"] {
        let fa = std::fs::read(a_path.join(file)).map_err(|e| e.to_string())?;
        let fb = std::fs::read(dir.join("run_b").join(file)).map_err(|e| e.to_string())?;
        ensure(fa == fb, format!("{file} differs between 1 and 3 workers"))?;
    }
    let (sa, sb) = (
        serde_json::to_string(&without_timing(a)).unwrap(),
        serde_json::to_string(&without_timing(b)).unwrap(),
    );
    ensure(sa == sb, "results differ outside timing fields")?;
    Ok("1 vs 3 workers: identical intermediates and results (timing excluded)".into())
}

fn main() {
    let dir = tempfile::tempdir().expect("temp dir");
    let criteria: Vec<(&str, Duration, Box<dyn Fn() -> Check>)> = vec![
        (
            "1 shape conformance",
            Duration::from_secs(1),
            Box::new(shapes),
        ),
        (
            "2 gradient correctness",
            Duration::from_secs(30),
            Box::new(gradients),
        ),
        (
            "3 parameter audit",
            Duration::from_secs(1),
            Box::new(parameter_audit),
        ),
        (
            "4 metric oracle",
            Duration::from_secs(10),
            Box::new(metric_oracle),
        ),
        (
            "5 LOSO partition",
            Duration::from_secs(10),
            Box::new(loso_partition),
        ),
        (
            "6 flow recovery",
            Duration::from_secs(60),
            Box::new(flow_recovery),
        ),
        (
            "7 strain correctness",
            Duration::from_secs(5),
            Box::new(strain),
        ),
        (
            "8 apex spotting",
            Duration::from_secs(120),
            Box::new(apex_spotting),
        ),
        (
            "9 end-to-end LOSO",
            Duration::from_secs(15 * 60),
            Box::new(|| end_to_end(dir.path())),
        ),
        (
            "10 determinism",
            Duration::from_secs(15 * 60),
            Box::new(|| determinism(dir.path())),
        ),
    ];
    // Optional criterion numbers on the command line select a subset.
    let only: Vec<String> = std::env::args()
        .skip(1)
        .filter(|a| a.parse::<u32>().is_ok())
        .collect();
    let criteria: Vec<_> = criteria
        .into_iter()
        .filter(|(name, _, _)| {
            only.is_empty() || only.iter().any(|n| name.split(' ').next() == Some(n))
        })
        .collect();
    let mut failed = 0;
    for (name, limit, check) in &criteria {
        let start = Instant::now();
        let result = std::panic::catch_unwind(std::panic::AssertUnwindSafe(check))
            .unwrap_or_else(|_| Err("panicked".into()));
        let took = start.elapsed();
        let result = result.and_then(|msg| {
            if took > *limit {
                Err(format!("{msg}; took {took:.1?}, limit {limit:?}"))
            } else {
                Ok(msg)
            }
        });
        match result {
            Ok(msg) => println!("PASS  criterion {name} [{took:.1?}]: {msg}"),
            Err(msg) => {
                failed += 1;
                println!("FAIL  criterion {name} [{took:.1?}]: {msg}");
            }
        }
    }
    println!(
        "\n{} of {} criteria passed",
        criteria.len() - failed,
        criteria.len()
    );
    if failed > 0 {
        std::process::exit(1);
    }
}
