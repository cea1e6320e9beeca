//! End-to-end acceptance checks. Prints one PASS/FAIL line per criterion and
//! exits non-zero if any fails.

use std::collections::BTreeSet;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::{Duration, Instant};

use fedsim::codec::{decode_gradient, encode_gradient, encode_model, recover_model, CompressedModel, SparseGradient};
use fedsim::datagen::{partition_indices, PartitionSpec};
use fedsim::learner::{grad, init_model, loss, DatasetShard, ModelSpec};
use fedsim::policy::{batch_size_for, download_ratio, importance, kl_divergence, uniform, upload_ratios};
use fedsim::sim::{run_experiment, RoundMetrics, SimConfig, Strategy};
use fedsim::{Params, SeededRng};
use rand::Rng;

type Outcome = Result<String, String>;
type Check = fn() -> Outcome;

fn ensure(ok: bool, msg: impl Into<String>) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn within(elapsed: Duration, limit_s: u64) -> Result<(), String> {
    ensure(elapsed.as_secs_f64() < limit_s as f64, format!("took {:.1} s, limit {limit_s} s", elapsed.as_secs_f64()))
}

fn workspace_root() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..")
}

/// The desk-scale experiment with `output` and `seeds` stripped.
fn desk_config() -> (SimConfig, Vec<u64>) {
    let text = std::fs::read_to_string(workspace_root().join("configs/desk-scale.json")).unwrap();
    let mut doc: serde_json::Value = serde_json::from_str(&text).unwrap();
    let obj = doc.as_object_mut().unwrap();
    obj.remove("output");
    let seeds: Vec<u64> = serde_json::from_value(obj.remove("seeds").unwrap()).unwrap();
    obj.insert("seed".into(), seeds[0].into());
    (serde_json::from_value(doc).unwrap(), seeds)
}

fn codec_exactness() -> Outcome {
    let start = Instant::now();
    let mut rng = SeededRng::new(1);
    for case in 0..1000 {
        let n = rng.random_range(1..=4096);
        let scale = 10f32.powi(rng.random_range(-6..6));
        let w: Vec<f32> = (0..n).map(|_| rng.random_range(-1.0f32..1.0) * scale).collect();
        let cm = encode_model(&w, 0.0).map_err(|e| e.to_string())?;
        let cm = CompressedModel::<f32>::from_bytes(&cm.to_bytes()).map_err(|e| e.to_string())?;
        let back = recover_model(&cm, None).map_err(|e| e.to_string())?;
        let sg = encode_gradient(&w, 0.0).map_err(|e| e.to_string())?;
        let sg = SparseGradient::<f32>::from_bytes(&sg.to_bytes()).map_err(|e| e.to_string())?;
        let dense = decode_gradient(&sg);
        let same = |v: &[f32]| v.len() == n && v.iter().zip(&w).all(|(a, b)| a.to_bits() == b.to_bits());
        ensure(same(&back), format!("model identity broken in case {case}"))?;
        ensure(same(&dense), format!("gradient identity broken in case {case}"))?;
    }
    within(start.elapsed(), 5)?;
    Ok(format!("1000 vectors bit-identical in {:.2} s", start.elapsed().as_secs_f64()))
}

fn worked_example() -> Outcome {
    let w = [0.9f32, -0.2, 1.2, -1.5, 0.5, 0.3, 1.1, -0.7, 0.8];
    let cm = encode_model(&w, 5.0 / 9.0).map_err(|e| e.to_string())?;
    ensure(cm.masked_count() == 5, format!("masked {}", cm.masked_count()))?;
    ensure(cm.avg_abs() == 0.5 && cm.max_abs() == 0.8, format!("avg {} max {}", cm.avg_abs(), cm.max_abs()))?;
    // Position 1 has flipped sign, position 8 exceeds the maximum.
    let local = [0.85f32, 0.25, 1.0, -1.4, 0.45, 0.31, 1.0, -0.65, 0.95];
    let out = recover_model(&cm, Some(&local)).map_err(|e| e.to_string())?;
    ensure(out[1] == -0.5 && out[8] == 0.5, format!("recovered {} and {}", out[1], out[8]))?;
    ensure(out[4] == 0.45 && out[5] == 0.31 && out[7] == -0.65, "kept local values changed")?;
    ensure([0, 2, 3, 6].iter().all(|&i| out[i] == w[i]), "full-precision values changed")?;
    Ok("avg 0.5, max 0.8, recovered -0.5 and +0.5".into())
}

fn formula_units() -> Outcome {
    let e = |r: fedsim::Result<f64>| r.map_err(|e| e.to_string());
    let ratio = e(download_ratio(5, 10, 0.6))?;
    ensure((ratio - 0.3).abs() < 1e-9, format!("staleness ratio {ratio}"))?;
    let mut one_hot = vec![0.0; 10];
    one_hot[3] = 1.0;
    let divergence = e(kl_divergence(&one_hot, &uniform(10)))?;
    ensure((divergence - 10f64.ln()).abs() < 1e-9, format!("divergence {divergence}"))?;
    let score = e(importance(40, 40, 0.0, 0.5))?;
    ensure((score - 1.0).abs() < 1e-9, format!("importance {score}"))?;
    let ranked = upload_ratios(&[(0, 0.9), (1, 0.7), (2, 0.5), (3, 0.1)], 0.1, 0.6).map_err(|e| e.to_string())?;
    let got: Vec<f64> = ranked.values().copied().collect();
    let want = [0.1, 0.225, 0.35, 0.475];
    ensure(got.iter().zip(want).all(|(g, w)| (g - w).abs() < 1e-9), format!("upload ratios {got:?}"))?;
    let batch = batch_size_for(100.0, 40.0, 30, 0.5, 64);
    ensure(batch == 4, format!("batch {batch}"))?;
    Ok("0.3, ln 10, 1.0, {0.1, 0.225, 0.35, 0.475}, 4".into())
}

/// Small random model and batch with every ReLU input at least `margin`
/// from zero, so central differences never cross a kink.
fn random_case(rng: &mut SeededRng, margin: f64) -> (ModelSpec, Params<f64>, DatasetShard<f64>) {
    loop {
        let d = rng.random_range(2..=6);
        let h = rng.random_range(2..=5);
        let spec = if rng.random_bool(0.3) {
            ModelSpec::softmax_regression(d, h)
        } else {
            ModelSpec::mlp(d, vec![rng.random_range(2..=8)], h)
        };
        if spec.param_count() > 200 {
            continue;
        }
        let w: Params<f64> = init_model(&spec, rng.random());
        let m = rng.random_range(1..=6);
        let feats: Vec<f64> = (0..m * d).map(|_| rng.random_range(-1.0..1.0)).collect();
        let labels: Vec<usize> = (0..m).map(|_| rng.random_range(0..h)).collect();
        let batch = DatasetShard::new(d, feats, labels).unwrap();
        let clear = spec.hidden_dims.first().is_none_or(|&hidden| {
            (0..m).all(|s| {
                (0..hidden).all(|o| {
                    let z = w[d * hidden + o] + (0..d).map(|i| w[o * d + i] * batch.row(s)[i]).sum::<f64>();
                    z.abs() > margin
                })
            })
        });
        if clear {
            return (spec, w, batch);
        }
    }
}

fn gradient_check() -> Outcome {
    let start = Instant::now();
    let mut rng = SeededRng::new(4);
    let step = 1e-3;
    let mut worst: f64 = 0.0;
    for _ in 0..20 {
        let (spec, w, batch) = random_case(&mut rng, 0.05);
        let g = grad(&w, &spec, &batch).map_err(|e| e.to_string())?;
        for k in 0..w.len() {
            let mut plus = w.to_vec();
            let mut minus = w.to_vec();
            plus[k] += step;
            minus[k] -= step;
            let fd = (loss(&plus, &spec, &batch).unwrap() - loss(&minus, &spec, &batch).unwrap()) / (2.0 * step);
            worst = worst.max((g[k] - fd).abs() / g[k].abs().max(fd.abs()).max(1e-8));
        }
    }
    ensure(worst < 1e-4, format!("max relative error {worst:e}"))?;
    within(start.elapsed(), 30)?;
    Ok(format!("max relative error {worst:.2e}"))
}

/// Spearman correlation of `ys` with their positions, average ranks for ties.
fn spearman_with_index(ys: &[f64]) -> f64 {
    let n = ys.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| ys[a].total_cmp(&ys[b]));
    let mut ranks = vec![0.0; n];
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && ys[order[j + 1]] == ys[order[i]] {
            j += 1;
        }
        for &o in &order[i..=j] {
            ranks[o] = (i + j) as f64 / 2.0;
        }
        i = j + 1;
    }
    let mean = (n as f64 - 1.0) / 2.0;
    let (mut num, mut dx, mut dy) = (0.0, 0.0, 0.0);
    for (k, &r) in ranks.iter().enumerate() {
        num += (k as f64 - mean) * (r - mean);
        dx += (k as f64 - mean).powi(2);
        dy += (r - mean).powi(2);
    }
    num / (dx * dy).sqrt()
}

fn recovery_trend() -> Outcome {
    let start = Instant::now();
    let thetas: Vec<f64> = (1..=9).map(|k| k as f64 / 10.0).collect();
    // Per-round drift of 0.1, for staleness 1 to 5.
    let scales: Vec<f32> = (1..=5).map(|s| 0.1 * s as f32).collect();
    let mut rng = SeededRng::new(5);
    let (mut by_theta, mut by_scale) = (0.0, 0.0);
    let trials = 100;
    for _ in 0..trials {
        let w: Vec<f32> = (0..1024).map(|_| rng.random_range(-1.0f32..1.0)).collect();
        let energy = w.iter().map(|v| f64::from(*v).powi(2)).sum::<f64>();
        let noise: Vec<f32> = (0..w.len()).map(|_| rng.random_range(-1.0f32..1.0)).collect();
        let nmse = |theta: f64, scale: f32| {
            // Drift grows with staleness: the same noise direction, scaled.
            let local: Vec<f32> = w.iter().zip(&noise).map(|(v, z)| v + scale * z).collect();
            let out = recover_model(&encode_model(&w, theta).unwrap(), Some(&local)).unwrap();
            out.iter().zip(&w).map(|(a, b)| f64::from(a - b).powi(2)).sum::<f64>() / energy
        };
        let along_theta: Vec<f64> = thetas.iter().map(|&t| nmse(t, 0.2)).collect();
        let along_scale: Vec<f64> = scales.iter().map(|&s| nmse(0.5, s)).collect();
        by_theta += spearman_with_index(&along_theta);
        by_scale += spearman_with_index(&along_scale);
    }
    let (by_theta, by_scale) = (by_theta / trials as f64, by_scale / trials as f64);
    ensure(by_theta > 0.9 && by_scale > 0.9, format!("mean rho {by_theta:.3} over ratio, {by_scale:.3} over staleness"))?;
    within(start.elapsed(), 60)?;
    Ok(format!("mean rho {by_theta:.3} over ratio, {by_scale:.3} over staleness"))
}

fn accuracies(series: &[RoundMetrics]) -> Vec<u64> {
    series.iter().map(|m| m.accuracy.to_bits()).collect()
}

fn oracle_equivalence() -> Outcome {
    let (base, seeds) = desk_config();
    for &seed in &seeds[..2] {
        let degenerate = SimConfig {
            strategy: Strategy::Caesar,
            theta_d_max: 0.0,
            theta_u_min: 0.0,
            theta_u_max: 0.0,
            adaptive_batch: false,
            seed,
            ..base.clone()
        };
        let fedavg = SimConfig { strategy: Strategy::Fedavg, ..degenerate.clone() };
        let a = run_experiment(&degenerate).map_err(|e| e.to_string())?;
        let b = run_experiment(&fedavg).map_err(|e| e.to_string())?;
        ensure(accuracies(&a) == accuracies(&b), format!("trajectories differ for seed {seed}"))?;
    }
    Ok(format!("identical accuracy over {} rounds, 2 seeds", base.max_rounds.unwrap_or(0)))
}

/// Cumulative traffic at the first round whose accuracy reaches `target`.
fn traffic_at(series: &[RoundMetrics], target: f64) -> u64 {
    series.iter().find(|m| m.accuracy >= target).map_or(u64::MAX, RoundMetrics::cum_traffic_bits)
}

fn mean_wait(series: &[RoundMetrics]) -> f64 {
    series.iter().map(|m| m.avg_wait_s).sum::<f64>() / series.len() as f64
}

fn desk_scale() -> Outcome {
    let start = Instant::now();
    let (base, seeds) = desk_config();
    ensure(base.devices.count == 50 && seeds.len() == 5, "desk config must have 50 devices and 5 seeds")?;
    let (mut acc_ok, mut traffic_ok, mut wait_ok) = (0, 0, 0);
    let mut notes = Vec::new();
    for &seed in &seeds {
        let run = |strategy| run_experiment(&SimConfig { strategy, seed, ..base.clone() }).map_err(|e| e.to_string());
        let caesar = run(Strategy::Caesar)?;
        let fedavg = run(Strategy::Fedavg)?;
        let fic = run(Strategy::Fic)?;
        let cac = run(Strategy::Cac)?;
        let last = |s: &[RoundMetrics]| s.last().unwrap().accuracy;
        let best = |s: &[RoundMetrics]| s.iter().map(|m| m.accuracy).fold(0.0, f64::max);
        let gap = last(&fedavg) - last(&caesar);
        acc_ok += usize::from(gap <= 0.02);
        let target = [&caesar, &fedavg, &fic, &cac].iter().map(|s| best(s)).fold(1.0, f64::min);
        let own = traffic_at(&caesar, target) as f64;
        let vs_fic = own / traffic_at(&fic, target) as f64;
        let vs_cac = own / traffic_at(&cac, target) as f64;
        traffic_ok += usize::from(vs_fic <= 0.85 && vs_cac <= 0.90);
        let wait = mean_wait(&caesar) / mean_wait(&fedavg);
        wait_ok += usize::from(wait <= 0.5);
        notes.push(format!("seed {seed}: gap {gap:+.4} traffic {vs_fic:.2}/{vs_cac:.2} wait {wait:.3}"));
    }
    for n in &notes {
        println!("    {n}");
    }
    let summary = format!(
        "accuracy {acc_ok}/5, traffic {traffic_ok}/5, waiting {wait_ok}/5 in {:.0} s",
        start.elapsed().as_secs_f64()
    );
    ensure(acc_ok >= 4 && traffic_ok >= 4 && wait_ok == 5, summary.clone())?;
    within(start.elapsed(), 15 * 60)?;
    Ok(summary)
}

fn run_cli(config: &Path, out: &Path, threads: &str) -> Vec<u8> {
    let status = Command::new(env!("CARGO_BIN_EXE_fedsim"))
        .args(["run", "--quiet", "--seed", "3", "--config"])
        .arg(config)
        .arg("--out")
        .arg(out)
        .env("CAESAR_SIM_THREADS", threads)
        .status()
        .unwrap();
    assert!(status.success());
    std::fs::read(out.join("caesar-seed3/metrics.csv")).unwrap()
}

fn determinism() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let config = workspace_root().join("configs/desk-scale.json");
    let a = run_cli(&config, &dir.path().join("a"), "1");
    let b = run_cli(&config, &dir.path().join("b"), "1");
    let c = run_cli(&config, &dir.path().join("c"), "8");
    ensure(!a.is_empty() && a == b, "repeated invocations differ")?;
    ensure(a == c, "1 and 8 worker threads differ")?;
    Ok(format!("{} CSV bytes identical across runs and thread counts", a.len()))
}

fn shard_kl(labels: &[usize], shard: &[usize], classes: usize) -> f64 {
    let mut counts = vec![0usize; classes];
    for &i in shard {
        counts[labels[i]] += 1;
    }
    let total = shard.len() as f64;
    counts
        .iter()
        .filter(|&&c| c > 0)
        .map(|&c| {
            let p = c as f64 / total;
            p * (p * classes as f64).ln()
        })
        .sum()
}

fn partition_properties() -> Outcome {
    let mut rng = SeededRng::new(9);
    for case in 0..50 {
        let classes = rng.random_range(2..=10);
        let len = rng.random_range(200..=2000);
        let labels: Vec<usize> = (0..len).map(|_| rng.random_range(0..classes)).collect();
        let spec = PartitionSpec {
            n_devices: rng.random_range(1..=20),
            heterogeneity: if case % 10 == 0 { 0.0 } else { rng.random_range(0.05..20.0) },
            min_per_device: rng.random_range(1..=5),
            seed: rng.random(),
        };
        let parts = partition_indices(&labels, &spec).map_err(|e| e.to_string())?;
        let all: Vec<usize> = parts.iter().flatten().copied().collect();
        let unique: BTreeSet<usize> = all.iter().copied().collect();
        ensure(all.len() == len && unique.len() == len, format!("case {case}: not a disjoint cover"))?;
        ensure(parts.len() == spec.n_devices, format!("case {case}: device count"))?;
        ensure(parts.iter().all(|p| p.len() >= spec.min_per_device), format!("case {case}: minimum volume"))?;
    }

    let classes = 10;
    let labels: Vec<usize> = (0..5000).map(|i| i % classes).collect();
    let mean_kl = |p: f64, seed: u64| {
        let spec = PartitionSpec { n_devices: 50, heterogeneity: p, min_per_device: 10, seed };
        let parts = partition_indices(&labels, &spec).unwrap();
        parts.iter().map(|s| shard_kl(&labels, s, classes)).sum::<f64>() / parts.len() as f64
    };
    let (mut wins, mut low, mut high) = (0, 0.0, 0.0);
    for seed in 0..20 {
        let (a, b) = (mean_kl(1.0, seed), mean_kl(10.0, seed));
        wins += usize::from(b > a);
        low += a / 20.0;
        high += b / 20.0;
    }
    ensure(wins == 20, format!("p = 10 more skewed on {wins}/20 seeds"))?;
    Ok(format!("50 covers ok; mean KL {low:.3} at p = 1, {high:.3} at p = 10"))
}

fn main() {
    let criteria: [(&str, Check); 9] = [
        ("1 codec exactness at zero ratio", codec_exactness),
        ("2 worked recovery example", worked_example),
        ("3 formula units", formula_units),
        ("4 gradient vs finite differences", gradient_check),
        ("5 recovery error trend", recovery_trend),
        ("6 degenerate caesar equals fedavg", oracle_equivalence),
        ("7 desk-scale end to end", desk_scale),
        ("8 determinism across runs and threads", determinism),
        ("9 partition properties", partition_properties),
    ];
    let mut failed = 0;
    for (name, check) in criteria {
        let result = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|_| Err("panicked".into()));
        match result {
            Ok(detail) => println!("criterion {name}: PASS ({detail})"),
            Err(detail) => {
                failed += 1;
                println!("criterion {name}: FAIL ({detail})");
            }
        }
    }
    if failed > 0 {
        println!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
}
