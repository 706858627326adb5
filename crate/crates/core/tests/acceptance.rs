//! Acceptance suite: one PASS/FAIL line per criterion, non-zero exit when any
//! criterion fails. Pass criterion numbers as arguments to run a subset.

mod common;

use std::panic::{self, AssertUnwindSafe};
use std::time::{Duration, Instant};

use nalgebra::{Rotation3, Unit, Vector3};
use needle_core::calibrate::{pivot_calibrate, Pose};
use needle_core::harness::{
    benchmark_inference, config_digest, evaluate, normalized_mse, split_dataset, train, Metrics,
    MetricsReport, TipTracker, TrainConfig, REFERENCE_LATENCY_MS,
};
use needle_core::io;
use needle_core::layers::Mode;
use needle_core::optim::{adamw_step, AdamWConfig, OptimizerState};
use needle_core::preprocess::{
    denormalize_position, normalize_position, NormalizationConfig, TipPosition,
};
use needle_core::simulate::{generate_dataset, irradiance_map, render_scatter_image, OpticsConfig};
use needle_core::{Dataset, Network, NetworkConfig, ParameterSet, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Check = Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn err<E: std::fmt::Display>(e: E) -> String {
    e.to_string()
}

// ---------------------------------------------------------------------------
// 1
// ---------------------------------------------------------------------------

fn architecture() -> Check {
    let cfg = NetworkConfig::default();
    let net = Network::<f32>::build(cfg.clone(), 0).map_err(err)?;
    let image = Tensor::zeros(cfg.input_shape().to_vec());
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let (out, trace) = net.forward(&image, Mode::Eval, &mut rng).map_err(err)?;
    let expected: [(&str, &[usize]); 12] = [
        ("input", &[3, 400, 400]),
        ("conv1", &[16, 200, 200]),
        ("relu1", &[16, 200, 200]),
        ("pool1", &[16, 100, 100]),
        ("conv2", &[32, 100, 100]),
        ("relu2", &[32, 100, 100]),
        ("pool2", &[32, 50, 50]),
        ("flatten", &[80_000]),
        ("fc1", &[512]),
        ("relu3", &[512]),
        ("dropout", &[512]),
        ("fc2", &[3]),
    ];
    let got = trace.layer_shapes();
    ensure(got.len() == expected.len(), || format!("{} layers traced", got.len()))?;
    for ((name, shape), (ename, eshape)) in got.iter().zip(expected) {
        ensure(*name == ename && shape == eshape, || {
            format!("{name} {shape:?}, expected {ename} {eshape:?}")
        })?;
    }
    ensure(out.shape() == [3], || format!("output {:?}", out.shape()))?;
    let p = net.params();
    let counts = [
        ("conv1", 448),
        ("conv2", 4_640),
        ("fc1", 40_960_512),
        ("fc2", 1_539),
    ];
    for (layer, n) in counts {
        let got = p.layer_param_count(layer);
        ensure(got == n, || format!("{layer} has {got} parameters, expected {n}"))?;
    }
    Ok(format!("12 layer shapes match; {} parameters", p.param_count()))
}

// ---------------------------------------------------------------------------
// 2
// ---------------------------------------------------------------------------

fn gradients() -> Check {
    use common::gradcheck;
    let layers = [
        ("conv2d s1 p1", gradcheck::conv2d(2, 3, 5, 1, 1, 0)),
        ("conv2d s2 p1", gradcheck::conv2d(3, 2, 6, 2, 1, 1)),
        ("conv2d s1 p0", gradcheck::conv2d(1, 2, 5, 1, 0, 2)),
        ("relu", gradcheck::relu(150, 1)),
        ("maxpool", gradcheck::maxpool(2, 8, 4)),
        ("linear", gradcheck::linear(20, 9, 8)),
        ("dropout", gradcheck::dropout(120, 0.4, 3)),
        ("mse", gradcheck::mse(7, 2)),
    ];
    let mut worst_layer = 0.0f64;
    for (name, e) in layers {
        ensure(e < 1e-4, || format!("{name}: relative error {e:e}"))?;
        worst_layer = worst_layer.max(e);
    }
    let mut worst_net = 0.0f64;
    for (name, e) in gradcheck::end_to_end(5) {
        ensure(e < 1e-3, || format!("network {name}: relative error {e:e}"))?;
        worst_net = worst_net.max(e);
    }
    Ok(format!(
        "worst layer error {worst_layer:.1e}, worst end-to-end error {worst_net:.1e}"
    ))
}

// ---------------------------------------------------------------------------
// 3
// ---------------------------------------------------------------------------

fn scalar(v: f64) -> ParameterSet<f64> {
    [("w".to_string(), Tensor::new(vec![1], vec![v]).expect("one element"))]
        .into_iter()
        .collect()
}

fn adamw() -> Check {
    let mut p = scalar(1.0);
    let mut s = OptimizerState::new(&p);
    adamw_step(&mut p, &scalar(1.0), &mut s, &AdamWConfig::default()).map_err(err)?;
    let got = p.get("w").expect("w").data()[0];
    ensure((got - 0.99899).abs() < 1e-9, || format!("hand case gave {got}"))?;

    let no_wd = AdamWConfig {
        weight_decay: 0.0,
        ..AdamWConfig::default()
    };
    for g in [1e-3, 1.0, 1e3] {
        let mut p = scalar(0.0);
        let mut s = OptimizerState::new(&p);
        adamw_step(&mut p, &scalar(g), &mut s, &no_wd).map_err(err)?;
        let step = p.get("w").expect("w").data()[0].abs();
        ensure(step <= no_wd.lr && step >= 0.999 * no_wd.lr, || {
            format!("|g| = {g}: first step {step}")
        })?;
    }

    // plain Adam written out by hand
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut p = scalar(0.7);
    let mut s = OptimizerState::new(&p);
    let (mut theta, mut m, mut v) = (0.7f64, 0.0f64, 0.0f64);
    let mut worst = 0.0f64;
    for t in 1..=50 {
        let g: f64 = rng.random_range(-2.0..2.0);
        adamw_step(&mut p, &scalar(g), &mut s, &no_wd).map_err(err)?;
        m = 0.9 * m + 0.1 * g;
        v = 0.999 * v + 0.001 * g * g;
        let mh = m / (1.0 - 0.9f64.powi(t));
        let vh = v / (1.0 - 0.999f64.powi(t));
        theta -= 1e-3 * mh / (vh.sqrt() + 1e-8);
        worst = worst.max((p.get("w").expect("w").data()[0] - theta).abs());
    }
    ensure(worst < 1e-12, || format!("wd = 0 departs from Adam by {worst:e}"))?;
    Ok(format!("hand case {got:.11}; Adam agreement {worst:.1e}"))
}

// ---------------------------------------------------------------------------
// 4
// ---------------------------------------------------------------------------

fn normalization() -> Check {
    let cfg = NormalizationConfig::default();
    let lo = TipPosition::new(-8.3, -5.5, 0.0);
    let hi = TipPosition::new(8.3, 5.5, 6.5);
    ensure(normalize_position(&lo, &cfg).value == [-1.0; 3], || "minima do not map to -1".into())?;
    ensure(normalize_position(&hi, &cfg).value == [1.0; 3], || "maxima do not map to +1".into())?;
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut worst = 0.0f64;
    for _ in 0..1000 {
        let p = TipPosition::new(
            rng.random_range(-8.3..=8.3),
            rng.random_range(-5.5..=5.5),
            rng.random_range(0.0..=6.5),
        );
        let back = denormalize_position(normalize_position(&p, &cfg).value, &cfg);
        for (a, b) in p.to_array().iter().zip(back.to_array()) {
            worst = worst.max((a - b).abs());
        }
    }
    ensure(worst < 1e-12, || format!("round-trip error {worst:e} cm"))?;
    Ok(format!("endpoints exact; round-trip max error {worst:.1e} cm"))
}

// ---------------------------------------------------------------------------
// 5
// ---------------------------------------------------------------------------

fn pivot() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let offset = Vector3::new(0.4, -0.9, 13.7);
    let pivot = Vector3::new(3.0, -1.5, 27.0);
    let poses: Vec<Pose> = (0..30)
        .map(|_| {
            let axis = Unit::new_normalize(Vector3::from_fn(|_, _| rng.random_range(-1.0..1.0)));
            let r = *Rotation3::from_axis_angle(&axis, rng.random_range(-1.0..1.0)).matrix();
            Pose::new(r, pivot - r * offset)
        })
        .collect::<Result<_, _>>()
        .map_err(err)?;
    let cal = pivot_calibrate(&poses, 3).map_err(err)?;
    let off_err = (cal.tip_offset - offset).amax();
    ensure(off_err < 1e-9, || format!("tip offset error {off_err:e} cm"))?;

    let r = *Rotation3::from_euler_angles(0.3, -0.1, 0.8).matrix();
    let same: Vec<Pose> = (0..8)
        .map(|k| Pose::new(r, Vector3::new(k as f64, 1.0, 2.0)))
        .collect::<Result<_, _>>()
        .map_err(err)?;
    ensure(pivot_calibrate(&same, 3).is_err(), || "identical rotations accepted".into())?;

    let shift = Vector3::new(12.0, -30.0, 4.5);
    let shifted: Vec<Pose> = poses
        .iter()
        .map(|p| Pose::new(*p.rotation(), p.translation() + shift))
        .collect::<Result<_, _>>()
        .map_err(err)?;
    let moved = pivot_calibrate(&shifted, 3).map_err(err)?;
    let eq_err = (moved.tip_offset - cal.tip_offset)
        .amax()
        .max((moved.pivot_point - cal.pivot_point - shift).amax());
    ensure(eq_err < 1e-9, || format!("translation equivariance error {eq_err:e}"))?;
    Ok(format!(
        "offset error {off_err:.1e} cm; degenerate set rejected; equivariance error {eq_err:.1e}"
    ))
}

// ---------------------------------------------------------------------------
// 6
// ---------------------------------------------------------------------------

fn plateau_centre(t: &Tensor<f32>) -> (f64, f64) {
    let side = t.shape()[2];
    let max = t.data().iter().copied().fold(f32::MIN, f32::max);
    let hits: Vec<usize> = (0..t.len()).filter(|&k| t.data()[k] == max).collect();
    let n = hits.len() as f64;
    (
        hits.iter().map(|&k| (k / side) as f64).sum::<f64>() / n,
        hits.iter().map(|&k| (k % side) as f64).sum::<f64>() / n,
    )
}

fn simulator() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let cfg = OpticsConfig::desk_scale().noiseless();
    let centre = (cfg.image_side as f64 - 1.0) / 2.0;
    for z in [0.5, 2.0, 3.5, 6.5] {
        let img = render_scatter_image(&TipPosition::new(0.0, 0.0, z), &cfg, &mut rng).map_err(err)?;
        let (r, c) = plateau_centre(&img);
        ensure((r - centre).abs() <= 1.0 && (c - centre).abs() <= 1.0, || {
            format!("z = {z}: peak at ({r}, {c})")
        })?;
    }

    let open = OpticsConfig {
        max_count: 1e12,
        ..cfg.clone()
    };
    let s = open.pixel_size();
    let (x0, y0) = open.pixel_center(32, 32);
    let k = 6;
    let map = irradiance_map(&TipPosition::new(x0, y0, k as f64 * s), &open).map_err(err)?;
    let side = open.image_side;
    let ratio = map[32 * side + 32 + k] / map[32 * side + 32];
    let ratio_err = (ratio - 2f64.powf(-1.5)).abs();
    ensure(ratio_err < 1e-3, || format!("I(ρ=z)/I(0) = {ratio}"))?;

    let mut last = f32::INFINITY;
    for step in 1..=13 {
        let z = 0.5 * step as f64;
        let img = render_scatter_image(&TipPosition::new(x0, y0, z), &open, &mut rng).map_err(err)?;
        let peak = img.data().iter().copied().fold(f32::MIN, f32::max);
        ensure(peak < last, || format!("peak {peak} at z = {z} does not drop below {last}"))?;
        last = peak;
    }
    Ok(format!("peak centred; I(ρ=z)/I(0) error {ratio_err:.1e}; peak falls over 13 depths"))
}

// ---------------------------------------------------------------------------
// 7
// ---------------------------------------------------------------------------

fn overfit() -> Check {
    let optics = OpticsConfig::desk_scale();
    let norm = NormalizationConfig::default();
    let records = generate_dataset(8, &optics, &norm, 7).map_err(err)?;
    let cfg = TrainConfig {
        epochs: 300,
        seed: 7,
        ..TrainConfig::default()
    };
    let net = NetworkConfig {
        dropout_rate: 0.0,
        ..NetworkConfig::desk_scale()
    };
    let out = train(&records, &norm, optics.max_count, &cfg, &net).map_err(err)?;
    let mse = normalized_mse(&out.tracker, &records).map_err(err)?;
    ensure(mse < 1e-3, || format!("training MSE {mse:e}"))?;
    Ok(format!("training MSE {mse:.2e} after 300 epochs (dropout off)"))
}

// ---------------------------------------------------------------------------
// 8
// ---------------------------------------------------------------------------

fn midpoint_baseline(records: &[needle_core::SampleRecord], norm: &NormalizationConfig) -> Result<Metrics, String> {
    let truth: Vec<TipPosition> = records.iter().map(|r| r.ground_truth).collect();
    Metrics::from_positions(&vec![norm.midpoint(); truth.len()], &truth).map_err(err)
}

fn learning() -> Check {
    let optics = OpticsConfig::desk_scale();
    let norm = NormalizationConfig::default();
    let records = generate_dataset(500, &optics, &norm, 8).map_err(err)?;
    let cfg = TrainConfig {
        seed: 8,
        ..TrainConfig::default()
    };
    let (train_set, test_set) = split_dataset(&records, cfg.split_ratio, cfg.seed).map_err(err)?;
    let out = train(&train_set, &norm, optics.max_count, &cfg, &NetworkConfig::desk_scale())
        .map_err(err)?;
    let m = evaluate(&out.tracker, &test_set, &norm).map_err(err)?;
    let base = midpoint_baseline(&test_set, &norm)?;
    let (l2, b) = (m.l2.mean_mm, base.l2.mean_mm);
    ensure(l2 < 0.5 * b && l2 < 10.0, || {
        format!("test L2 {l2:.3} mm against baseline {b:.3} mm")
    })?;
    Ok(format!(
        "test L2 {l2:.3} ± {:.3} mm vs midpoint baseline {b:.3} mm ({} train / {} test)",
        m.l2.std_mm,
        train_set.len(),
        test_set.len()
    ))
}

// ---------------------------------------------------------------------------
// 9
// ---------------------------------------------------------------------------

fn metric_protocol() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut draw = |n: usize| -> Vec<TipPosition> {
        (0..n)
            .map(|_| {
                TipPosition::new(
                    rng.random_range(-8.3..8.3),
                    rng.random_range(-5.5..5.5),
                    rng.random_range(0.0..6.5),
                )
            })
            .collect()
    };
    let truth = draw(121);
    let answers = draw(121);
    let norm = NormalizationConfig::default();
    let lookup = common::Lookup {
        norm: norm.clone(),
        answers: answers.clone(),
    };
    let got = evaluate(&lookup, &common::tagged_records(&truth), &norm).map_err(err)?;
    let oracle = common::metrics_oracle(&answers, &truth);
    let pairs = [
        (got.per_axis.x, oracle.per_axis.x),
        (got.per_axis.y, oracle.per_axis.y),
        (got.per_axis.z, oracle.per_axis.z),
        (got.l2, oracle.l2),
    ];
    let worst = pairs
        .iter()
        .map(|(a, b)| (a.mean_mm - b.mean_mm).abs().max((a.std_mm - b.std_mm).abs()))
        .fold(0.0, f64::max);
    ensure(worst < 1e-9, || format!("evaluate departs from oracle by {worst:e} mm"))?;

    let single = Metrics::from_positions(&[norm.midpoint()], &[TipPosition::new(8.3, 5.5, 6.5)])
        .map_err(err)?;
    let want = [83.0, 55.0, 32.5, 10970.25f64.sqrt()];
    let have = [
        single.per_axis.x.mean_mm,
        single.per_axis.y.mean_mm,
        single.per_axis.z.mean_mm,
        single.l2.mean_mm,
    ];
    for (w, h) in want.iter().zip(have) {
        ensure((w - h).abs() < 1e-9, || format!("single point gave {have:?}"))?;
    }
    Ok(format!("oracle agreement {worst:.1e} mm; corner case L2 {:.2} mm", have[3]))
}

// ---------------------------------------------------------------------------
// 10
// ---------------------------------------------------------------------------

fn latency() -> Check {
    let mut lines = Vec::new();
    let mut desk_mean = f64::INFINITY;
    for side in [64usize, 400] {
        let net = NetworkConfig {
            input_side: side,
            ..NetworkConfig::default()
        };
        let optics = OpticsConfig {
            image_side: side,
            ..OpticsConfig::default()
        };
        let tracker = TipTracker {
            network: Network::build(net, 10).map_err(err)?,
            normalization: NormalizationConfig::default(),
            max_count: optics.max_count,
        };
        let report = benchmark_inference(&tracker, &optics, 100, 5).map_err(err)?;
        ensure(report.reference_ms == REFERENCE_LATENCY_MS, || "reference line missing".into())?;
        ensure(report.summary().contains("reference 20 ms"), || report.summary())?;
        if side == 64 {
            desk_mean = report.total.mean_ms;
        }
        lines.push(format!(
            "{side}px mean {:.2} / p50 {:.2} / p95 {:.2} ms",
            report.total.mean_ms, report.total.p50_ms, report.total.p95_ms
        ));
    }
    ensure(desk_mean < REFERENCE_LATENCY_MS, || {
        format!("desk-scale mean {desk_mean:.2} ms exceeds {REFERENCE_LATENCY_MS} ms")
    })?;
    Ok(format!("{}; reference {REFERENCE_LATENCY_MS} ms", lines.join("; ")))
}

// ---------------------------------------------------------------------------
// 11
// ---------------------------------------------------------------------------

fn pipeline_once(root: &std::path::Path) -> Result<Vec<u8>, String> {
    let optics = OpticsConfig::desk_scale();
    let norm = NormalizationConfig::default();
    let seed = 11;
    let dataset = Dataset {
        records: generate_dataset(500, &optics, &norm, seed).map_err(err)?,
        optics: optics.clone(),
        normalization: norm.clone(),
    };
    let data_dir = root.join("data");
    io::write_dataset(&data_dir, &dataset, false).map_err(err)?;
    let loaded = io::read_dataset(&data_dir).map_err(err)?;
    let cfg = TrainConfig {
        epochs: 10,
        seed,
        ..TrainConfig::default()
    };
    let (train_set, test_set) = split_dataset(&loaded.records, cfg.split_ratio, seed).map_err(err)?;
    let net = NetworkConfig::desk_scale();
    let out = train(&train_set, &loaded.normalization, loaded.optics.max_count, &cfg, &net)
        .map_err(err)?;
    let weights = root.join("weights.ntwt");
    io::save_tensors(&weights, out.tracker.network.params()).map_err(err)?;
    let restored = TipTracker {
        network: Network::from_parts(net.clone(), io::load_tensors(&weights).map_err(err)?)
            .map_err(err)?,
        normalization: loaded.normalization.clone(),
        max_count: loaded.optics.max_count,
    };
    let metrics = evaluate(&restored, &test_set, &loaded.normalization).map_err(err)?;
    let digest = config_digest(&(&optics, &norm, &net, &cfg, seed));
    let path = root.join("metrics.json");
    io::write_json(&path, &MetricsReport::new(&metrics, digest)).map_err(err)?;
    std::fs::read(&path).map_err(err)
}

fn determinism() -> Check {
    let a = tempfile::tempdir().map_err(err)?;
    let b = tempfile::tempdir().map_err(err)?;
    let first = pipeline_once(a.path())?;
    let second = pipeline_once(b.path())?;
    ensure(first == second, || {
        format!(
            "metrics differ:\n{}\n{}",
            String::from_utf8_lossy(&first),
            String::from_utf8_lossy(&second)
        )
    })?;
    Ok(format!("two runs wrote identical {}-byte metrics files", first.len()))
}

// ---------------------------------------------------------------------------

struct Criterion {
    id: u32,
    name: &'static str,
    budget: Duration,
    run: fn() -> Check,
}

fn main() {
    let criteria = [
        Criterion { id: 1, name: "architecture fidelity", budget: Duration::from_secs(1), run: architecture },
        Criterion { id: 2, name: "gradient suite", budget: Duration::from_secs(60), run: gradients },
        Criterion { id: 3, name: "AdamW oracle", budget: Duration::from_secs(1), run: adamw },
        Criterion { id: 4, name: "normalization", budget: Duration::from_secs(1), run: normalization },
        Criterion { id: 5, name: "pivot calibration oracle", budget: Duration::from_secs(1), run: pivot },
        Criterion { id: 6, name: "simulator sanity", budget: Duration::from_secs(5), run: simulator },
        Criterion { id: 7, name: "overfit check", budget: Duration::from_secs(5 * 60), run: overfit },
        Criterion { id: 8, name: "learning check", budget: Duration::from_secs(30 * 60), run: learning },
        Criterion { id: 9, name: "metric protocol", budget: Duration::from_secs(1), run: metric_protocol },
        Criterion { id: 10, name: "latency report", budget: Duration::from_secs(60), run: latency },
        Criterion { id: 11, name: "determinism", budget: Duration::from_secs(10 * 60), run: determinism },
    ];
    let selected: Vec<u32> = std::env::args()
        .skip(1)
        .filter_map(|a| a.parse().ok())
        .collect();

    panic::set_hook(Box::new(|_| {}));
    let mut failed = 0;
    let mut ran = 0;
    for c in criteria.iter().filter(|c| selected.is_empty() || selected.contains(&c.id)) {
        let start = Instant::now();
        let result = panic::catch_unwind(AssertUnwindSafe(c.run)).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panicked".into());
            Err(format!("panic: {msg}"))
        });
        let elapsed = start.elapsed();
        let result = match result {
            Ok(detail) if elapsed > c.budget => Err(format!(
                "{detail}; exceeded time budget of {:.0} s",
                c.budget.as_secs_f64()
            )),
            other => other,
        };
        let (tag, detail) = match &result {
            Ok(d) => ("PASS", d),
            Err(d) => {
                failed += 1;
                ("FAIL", d)
            }
        };
        println!(
            "{tag} [{:>2}] {:<26} {:>8.2} s  {detail}",
            c.id,
            c.name,
            elapsed.as_secs_f64()
        );
        ran += 1;
    }
    println!("acceptance: {} of {ran} criteria passed", ran - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
