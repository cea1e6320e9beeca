use fedsim::learner::{evaluate, grad, init_model, local_train, loss, DatasetShard, ModelSpec};
use fedsim::{Params, SeededRng};
use rand::Rng;

/// Relative error; the tiny floor only guards exact-zero gradients.
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
}

/// Random small model + batch whose ReLU pre-activations all sit at least
/// `margin` away from zero, so a central difference never straddles a kink.
pub fn random_case(rng: &mut SeededRng) -> (ModelSpec, Params<f64>, DatasetShard<f64>) {
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
        let w = Params::new(w.iter().map(|v| v + rng.random_range(-0.1..0.1)).collect()).unwrap();
        let m = rng.random_range(1..=6);
        let feats: Vec<f64> = (0..m * d).map(|_| rng.random_range(-1.0..1.0)).collect();
        let labels: Vec<usize> = (0..m).map(|_| rng.random_range(0..h)).collect();
        let batch = DatasetShard::new(d, feats, labels).unwrap();
        if kink_free(&spec, &w, &batch, 0.05) {
            return (spec, w, batch);
        }
    }
}

fn kink_free(spec: &ModelSpec, w: &[f64], batch: &DatasetShard<f64>, margin: f64) -> bool {
    let Some(&hidden) = spec.hidden_dims.first() else {
        return true;
    };
    let d = spec.input_dim;
    (0..batch.len()).all(|s| {
        let x = batch.row(s);
        (0..hidden).all(|o| {
            let z = w[d * hidden + o] + (0..d).map(|i| w[o * d + i] * x[i]).sum::<f64>();
            z.abs() > margin
        })
    })
}

#[test]
fn gradient_matches_central_differences() {
    let mut rng = SeededRng::new(2024);
    let step = 1e-3;
    let mut worst: f64 = 0.0;
    for _ in 0..20 {
        let (spec, w, batch) = random_case(&mut rng);
        let g = grad(&w, &spec, &batch).unwrap();
        for k in 0..w.len() {
            let mut plus = w.to_vec();
            let mut minus = w.to_vec();
            plus[k] += step;
            minus[k] -= step;
            let fd = (loss(&plus, &spec, &batch).unwrap() - loss(&minus, &spec, &batch).unwrap()) / (2.0 * step);
            worst = worst.max(rel_err(g[k], fd));
        }
    }
    println!("max relative error {worst:e}");
    assert!(worst < 1e-4, "max relative error {worst}");
}

#[test]
fn local_train_delta_reconstructs_weights() {
    let mut rng = SeededRng::new(5);
    for case in 0..10u64 {
        let spec = ModelSpec::mlp(4, vec![6], 3);
        let w0: Params<f32> = init_model(&spec, case);
        let m = 20;
        let feats: Vec<f32> = (0..m * 4).map(|_| rng.random_range(-1.0..1.0)).collect();
        let labels: Vec<usize> = (0..m).map(|_| rng.random_range(0..3)).collect();
        let shard = DatasetShard::new(4, feats, labels).unwrap();
        let out = local_train(&w0, &spec, &shard, 5, 7, 0.3, case).unwrap();
        assert!(w0.sub(&out.delta).unwrap().bit_eq(&out.weights));

        // Same inputs, same bits.
        let again = local_train(&w0, &spec, &shard, 5, 7, 0.3, case).unwrap();
        assert!(again.weights.bit_eq(&out.weights));
    }
}

#[test]
fn full_batch_step_does_not_increase_convex_loss() {
    let mut rng = SeededRng::new(77);
    for _ in 0..20 {
        let spec = ModelSpec::softmax_regression(3, 4);
        let w: Params<f64> = init_model(&spec, rng.random());
        let m = 12;
        let feats: Vec<f64> = (0..m * 3).map(|_| rng.random_range(-1.0..1.0)).collect();
        let labels: Vec<usize> = (0..m).map(|_| rng.random_range(0..4)).collect();
        let batch = DatasetShard::new(3, feats, labels).unwrap();
        let before = loss(&w, &spec, &batch).unwrap();
        let g = grad(&w, &spec, &batch).unwrap();
        let stepped: Vec<f64> = w.iter().zip(g.iter()).map(|(a, b)| a - 0.01 * b).collect();
        let after = loss(&stepped, &spec, &batch).unwrap();
        assert!(before >= 0.0 && after <= before, "{after} > {before}");
    }
}

#[test]
fn random_model_is_near_chance_on_balanced_data() {
    let mut rng = SeededRng::new(3);
    let spec = ModelSpec::softmax_regression(8, 4);
    let n = 4000;
    let feats: Vec<f32> = (0..n * 8).map(|_| rng.random_range(-1.0..1.0)).collect();
    let labels: Vec<usize> = (0..n).map(|i| i % 4).collect();
    let test = DatasetShard::new(8, feats, labels).unwrap();
    let w: Params<f32> = init_model(&spec, 1);
    let acc = evaluate(&w, &spec, &test).unwrap();
    assert!((acc - 0.25).abs() < 0.05, "accuracy {acc}");
}
