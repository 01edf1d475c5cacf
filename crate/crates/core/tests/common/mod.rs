#![allow(dead_code)]

use edcnn::nets::{Architecture, Layer, Network, Tape};
use edcnn::train::InputLayout;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const H: f64 = 1e-5;
pub const REL_TOL: f64 = 1e-4;
/// Inputs whose pre-activations come this close to a ReLU kink are redrawn.
pub const KINK_MARGIN: f64 = 1e-4;

pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}

/// Largest relative error between backprop and central differences over all
/// trainable scalars.
pub fn worst_gradient_error(net: &Network, x: &[f64]) -> f64 {
    let mut tape = Tape::default();
    net.forward_taped(x, &mut tape).unwrap();
    let mut grads = net.zero_grads();
    net.backward(&mut tape, 1.0, &mut grads);

    let mut worst = 0.0f64;
    let n_params = net.params().len();
    for p in 0..n_params {
        if !net.params()[p].trainable {
            continue;
        }
        for j in 0..net.params()[p].len() {
            let mut plus = net.clone();
            plus.params_mut()[p].values[j] += H;
            let mut minus = net.clone();
            minus.params_mut()[p].values[j] -= H;
            let numeric = (plus.forward(x).unwrap() - minus.forward(x).unwrap()) / (2.0 * H);
            worst = worst.max(rel_err(grads[p][j], numeric));
        }
    }
    worst
}

/// Biases bounded away from zero: a dead window's pre-activation equals its
/// bias, which no choice of input can move off the kink.
pub fn jitter_biases(net: &mut Network, rng: &mut ChaCha8Rng) {
    for layer in &mut net.layers {
        let values = match layer {
            Layer::Conv { bias, .. } => &mut bias.values,
            Layer::Dense { bias: Some(b), .. } => &mut b.values,
            _ => continue,
        };
        for v in values {
            let sign = if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
            *v = sign * rng.gen_range(0.02..0.1);
        }
    }
}

pub fn away_from_kinks(net: &Network, mut draw: impl FnMut() -> Vec<f64>) -> Vec<f64> {
    let mut tape = Tape::default();
    for _ in 0..1000 {
        let x = draw();
        net.forward_taped(&x, &mut tape).unwrap();
        if tape.min_nonzero_preactivation() > KINK_MARGIN {
            return x;
        }
    }
    panic!("no input found away from ReLU kinks");
}

/// Worst finite-difference error of `arch` over seeds `0..seeds`.
pub fn architecture_gradient_error(arch: &Architecture, layout: InputLayout, seeds: u64) -> f64 {
    (0..seeds)
        .map(|seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut net = arch.build(30, &mut rng).unwrap();
            jitter_biases(&mut net, &mut rng);
            let x = away_from_kinks(&net, || layout.sample(30, &mut rng));
            worst_gradient_error(&net, &x)
        })
        .fold(0.0, f64::max)
}

