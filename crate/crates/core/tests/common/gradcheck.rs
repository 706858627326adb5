//! Finite-difference checks of every backward kernel and the whole network.
//!
//! Each check returns the worst relative error over the gradients it covers.

use needle_core::layers::{self, Mode};
use needle_core::model::{Network, NetworkConfig};
use needle_core::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{numeric_gradient, relative_error};

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(shape.to_vec(), |_| rng.random_range(-1.0..1.0))
}

fn with(shape: &[usize], data: &[f64]) -> Tensor<f64> {
    Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
}

fn dot(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum()
}

/// Projects the layer output onto a fixed random direction so the scalar
/// objective's gradient w.r.t. the output is that direction.
pub fn conv2d(c_in: usize, c_out: usize, side: usize, stride: usize, pad: usize, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = random(&[c_in, side, side], &mut rng);
    let w = random(&[c_out, c_in, 3, 3], &mut rng);
    let b = random(&[c_out], &mut rng);
    let (y, ctx) = layers::conv2d(&x, &w, &b, stride, pad).unwrap();
    let dir = random(y.shape(), &mut rng);
    let g = layers::conv2d_backward(ctx, &dir).unwrap();

    let objective = |x: &Tensor<f64>, w: &Tensor<f64>, b: &Tensor<f64>| {
        dot(&layers::conv2d(x, w, b, stride, pad).unwrap().0, &dir)
    };
    let nx = numeric_gradient(x.data(), |v| objective(&with(x.shape(), v), &w, &b));
    let nw = numeric_gradient(w.data(), |v| objective(&x, &with(w.shape(), v), &b));
    let nb = numeric_gradient(b.data(), |v| objective(&x, &w, &with(b.shape(), v)));
    relative_error(g.input.data(), &nx)
        .max(relative_error(g.weight.data(), &nw))
        .max(relative_error(g.bias.data(), &nb))
}

pub fn relu(n: usize, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // keep clear of the kink so central differences never straddle it
    let x = Tensor::from_fn(vec![n], |_| {
        let m = rng.random_range(0.05..1.0);
        if rng.random_bool(0.5) { m } else { -m }
    });
    let dir = random(&[n], &mut rng);
    let (_, ctx) = layers::relu(&x);
    let g = layers::relu_backward(ctx, &dir).unwrap();
    let num = numeric_gradient(x.data(), |v| dot(&layers::relu(&with(&[n], v)).0, &dir));
    relative_error(g.data(), &num)
}

pub fn maxpool(c: usize, side: usize, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // distinct values spaced far beyond the finite-difference step
    let n = c * side * side;
    let mut vals: Vec<f64> = (0..n).map(|i| i as f64 * 0.01).collect();
    rand::seq::SliceRandom::shuffle(vals.as_mut_slice(), &mut rng);
    let x = with(&[c, side, side], &vals);
    let (y, ctx) = layers::maxpool2d(&x).unwrap();
    let dir = random(y.shape(), &mut rng);
    let g = layers::maxpool2d_backward(ctx, &dir).unwrap();
    let num = numeric_gradient(x.data(), |v| {
        dot(&layers::maxpool2d(&with(x.shape(), v)).unwrap().0, &dir)
    });
    relative_error(g.data(), &num)
}

pub fn linear(n_in: usize, n_out: usize, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = random(&[n_in], &mut rng);
    let w = random(&[n_out, n_in], &mut rng);
    let b = random(&[n_out], &mut rng);
    let dir = random(&[n_out], &mut rng);
    let (_, ctx) = layers::linear(&x, &w, &b).unwrap();
    let g = layers::linear_backward(ctx, &dir).unwrap();
    let objective = |x: &Tensor<f64>, w: &Tensor<f64>, b: &Tensor<f64>| {
        dot(&layers::linear(x, w, b).unwrap().0, &dir)
    };
    let nx = numeric_gradient(x.data(), |v| objective(&with(x.shape(), v), &w, &b));
    let nw = numeric_gradient(w.data(), |v| objective(&x, &with(w.shape(), v), &b));
    let nb = numeric_gradient(b.data(), |v| objective(&x, &w, &with(b.shape(), v)));
    relative_error(g.input.data(), &nx)
        .max(relative_error(g.weight.data(), &nw))
        .max(relative_error(g.bias.data(), &nb))
}

/// Train-mode dropout with the mask pinned by re-seeding for every evaluation.
pub fn dropout(n: usize, rate: f64, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = random(&[n], &mut rng);
    let dir = random(&[n], &mut rng);
    let run = |v: &Tensor<f64>| {
        let mut mask_rng = ChaCha8Rng::seed_from_u64(seed ^ 0xd0);
        layers::dropout(v, rate, Mode::Train, &mut mask_rng).unwrap()
    };
    let (_, ctx) = run(&x);
    let g = layers::dropout_backward(ctx, &dir).unwrap();
    let num = numeric_gradient(x.data(), |v| dot(&run(&with(&[n], v)).0, &dir));
    relative_error(g.data(), &num)
}

pub fn mse(n: usize, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let p = random(&[n], &mut rng);
    let t = random(&[n], &mut rng);
    let (_, g) = layers::mse_loss(&p, &t).unwrap();
    let num = numeric_gradient(p.data(), |v| layers::mse_loss(&with(&[n], v), &t).unwrap().0);
    relative_error(g.data(), &num)
}

/// Worst per-tensor relative error of the analytic network gradient of
/// `mse(forward(image), target)` on the 16-pixel toy configuration.
pub fn end_to_end(seed: u64) -> Vec<(String, f64)> {
    let cfg = NetworkConfig { input_side: 16, ..NetworkConfig::default() };
    let net = Network::<f64>::build(cfg.clone(), seed).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let image = Tensor::from_fn(cfg.input_shape().to_vec(), |_| rng.random_range(0.0..1.0));
    let target = random(&[3], &mut rng);
    let mask_seed = seed.wrapping_add(1);

    let loss_of = |net: &Network<f64>| {
        let mut mask_rng = ChaCha8Rng::seed_from_u64(mask_seed);
        let (out, _) = net.forward(&image, Mode::Train, &mut mask_rng).unwrap();
        layers::mse_loss(&out, &target).unwrap().0
    };

    let mut mask_rng = ChaCha8Rng::seed_from_u64(mask_seed);
    let (out, trace) = net.forward(&image, Mode::Train, &mut mask_rng).unwrap();
    let (_, g) = layers::mse_loss(&out, &target).unwrap();
    let grads = net.backward(trace, &g).unwrap();

    let mut probe = net.clone();
    let mut report = Vec::new();
    for (name, analytic) in grads.iter() {
        let base = net.params().get(name).unwrap().data().to_vec();
        let numeric = numeric_gradient(&base, |v| {
            probe.params_mut().get_mut(name).unwrap().data_mut().copy_from_slice(v);
            loss_of(&probe)
        });
        probe.params_mut().get_mut(name).unwrap().data_mut().copy_from_slice(&base);
        report.push((name.to_string(), relative_error(analytic.data(), &numeric)));
    }
    report
}
