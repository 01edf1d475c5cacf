//! Acceptance run: one PASS/FAIL line per criterion.
//!
//! Pass criterion numbers as arguments to run a subset, e.g.
//! `cargo test -p edcnn --test acceptance -- 1 5 11`.
//! Criteria 8 to 10 are empirical comparisons over trained networks; their
//! lines are printed honestly but do not fail the run.

mod common;

use std::time::Instant;

use edcnn::convops::{conv_compose, equivariance_check, find_equivariance_witness, ConvKind};
use edcnn::factorize::{
    compile_dense_layer, compile_dense_net, factor_filter, verify_translation_invariance,
    BiasSynthesis, CompiledEDCNN, SymbolPolynomial,
};
use edcnn::nets::{
    build_experiment_config, Architecture, DenseNet, ExperimentName, LEARNING_DEPTH,
};
use edcnn::train::{
    isotonic_non_increasing, run_experiment, ExperimentResult, InputLayout, RunOptions,
    SupportPosition, TrainConfig,
};
use edcnn::{Filter, Matrix, SupportedVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const SEED: u64 = 20240601;

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: String) -> Verdict {
    Verdict { pass, detail }
}

// ---------------------------------------------------------------------------
// Oracles

fn poly_mul(a: &[f64], b: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; a.len() + b.len() - 1];
    for (i, x) in a.iter().enumerate() {
        for (j, y) in b.iter().enumerate() {
            out[i + j] += x * y;
        }
    }
    out
}

/// Moves `v` down by `places`, dropping what falls off the end.
fn shift_down(v: &[f64], places: usize) -> Vec<f64> {
    (0..v.len())
        .map(|i| if i >= places { v[i - places] } else { 0.0 })
        .collect()
}

fn contracting(w: &[f64], v: &[f64]) -> Vec<f64> {
    let s = w.len() - 1;
    poly_mul(w, v)[s..v.len()].to_vec()
}

fn dense_oracle(net: &DenseNet, x: &[f64]) -> Vec<f64> {
    net.layers.iter().fold(x.to_vec(), |h, layer| {
        (0..layer.weights.rows())
            .map(|j| {
                let z = layer.weights.row(j).iter().zip(&h).map(|(a, b)| a * b).sum::<f64>()
                    + layer.bias[j];
                if layer.activated {
                    z.max(0.0)
                } else {
                    z
                }
            })
            .collect()
    })
}

fn relative_gap(got: &[f64], want: &[f64]) -> f64 {
    assert_eq!(got.len(), want.len());
    let scale = want.iter().fold(1.0f64, |m, v| m.max(v.abs()));
    got.iter().zip(want).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max) / scale
}

fn uniform(rng: &mut ChaCha8Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(lo..hi)).collect()
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

// ---------------------------------------------------------------------------
// Algebra and compiler

fn commutativity() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(SEED);
    let mut worst = 0.0f64;
    for _ in 0..200 {
        let s1 = rng.gen_range(2..=8);
        let s2 = rng.gen_range(2..=8);
        let a = Filter::new(uniform(&mut rng, s1 + 1, -1.0, 1.0)).unwrap();
        let b = Filter::new(uniform(&mut rng, s2 + 1, -1.0, 1.0)).unwrap();
        let ab = conv_compose(&a, &b);
        let ba = conv_compose(&b, &a);
        let gap = ab
            .coeffs()
            .iter()
            .zip(ba.coeffs())
            .map(|(x, y)| (x - y).abs())
            .fold(0.0, f64::max);
        let oracle = poly_mul(a.coeffs(), b.coeffs());
        let oracle_gap =
            ab.coeffs().iter().zip(&oracle).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
        worst = worst.max(gap).max(oracle_gap);
    }
    verdict(worst <= 1e-13, format!("max |w1*w2 - w2*w1| = {worst:.1e} over 200 pairs"))
}

fn equivariance() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(SEED + 1);
    let (mut worst, mut checked) = (0.0f64, 0usize);
    for _ in 0..50 {
        let depth = rng.gen_range(1..=6);
        let d = rng.gen_range(2..=32);
        let filters: Vec<Filter> = (0..depth)
            .map(|_| {
                let s = rng.gen_range(2..=4);
                Filter::new(uniform(&mut rng, s + 1, -1.0, 1.0)).unwrap()
            })
            .collect();
        let p = rng.gen_range(1..=d);
        let v = SupportedVector::new(d, 1, &uniform(&mut rng, p, -1.0, 1.0)).unwrap();
        let stack = |x: &[f64]| filters.iter().fold(x.to_vec(), |h, w| poly_mul(w.coeffs(), &h));
        let base = stack(v.values());
        for j in 1..=(d - p + 1) {
            let lhs = stack(&shift_down(v.values(), j - 1));
            let rhs = shift_down(&base, j - 1);
            let gap = lhs.iter().zip(&rhs).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            let report = equivariance_check(ConvKind::Expansive, &filters, &v, j).unwrap();
            worst = worst.max(gap).max(report.max_abs_gap);
            checked += 1;
            if !report.holds {
                return verdict(false, format!("library reports a violation at shift {j}"));
            }
        }
    }
    verdict(worst <= 1e-10, format!("max gap {worst:.1e} over {checked} shifts of 50 stacks"))
}

fn contracting_witness() -> Verdict {
    let Some((w, j)) = find_equivariance_witness(2, 10, 2) else {
        return verdict(false, "no witness found".into());
    };
    let mut v = vec![0.0; 10];
    v[..2].fill(1.0);
    let lhs = contracting(w.coeffs(), &shift_down(&v, j - 1));
    let rhs = shift_down(&contracting(w.coeffs(), &v), j - 1);
    let gap = lhs.iter().zip(&rhs).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    verdict(
        gap > 1e-6,
        format!("filter {:?} at translation index {j}: gap {gap:.3}", w.coeffs()),
    )
}

fn factorization() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(SEED + 3);
    let (mut worst, mut depth_ok) = (0.0f64, true);
    for i in 0..100 {
        let degree = rng.gen_range(1..=60);
        let s = [2, 3, 5][i % 3];
        let mut u = uniform(&mut rng, degree + 1, -1.0, 1.0);
        if u[degree].abs() < 0.05 {
            u[degree] = 0.5;
        }
        let cascade = factor_filter(&SymbolPolynomial::new(u.clone()), s).unwrap();
        depth_ok &= cascade.len() <= degree.div_ceil(s - 1);
        let product = cascade.filters.iter().fold(vec![1.0], |acc, f| poly_mul(&acc, f.coeffs()));
        let scale = u.iter().fold(0.0f64, |m, c| m.max(c.abs()));
        let err = (0..product.len().max(u.len()))
            .map(|k| {
                (product.get(k).copied().unwrap_or(0.0) - u.get(k).copied().unwrap_or(0.0)).abs()
            })
            .fold(0.0, f64::max)
            / scale;
        worst = worst.max(err);
    }
    verdict(
        worst <= 1e-8 && depth_ok,
        format!("max relative error {worst:.1e}, depth bound held: {depth_ok}"),
    )
}

fn shallow_compiler() -> Verdict {
    const S: usize = 2;
    let mut rng = ChaCha8Rng::seed_from_u64(SEED + 4);
    let (mut worst, mut bound_ok) = (0.0f64, true);
    for _ in 0..50 {
        let n = rng.gen_range(1..=8);
        let d = rng.gen_range(1..=8);
        let w = Matrix::from_fn(n, d, |_, _| rng.gen_range(-1.0..1.0));
        let theta = uniform(&mut rng, n, -1.0, 1.0);
        let stage = compile_dense_layer(&w, &theta, S, 1.0, BiasSynthesis::Tight, true).unwrap();
        bound_ok &= stage.depth() * (S + 1) <= 3 * n * d;
        for _ in 0..100 {
            let x = uniform(&mut rng, d, 0.0, 1.0);
            let want: Vec<f64> = (0..n)
                .map(|j| {
                    (w.row(j).iter().zip(&x).map(|(a, b)| a * b).sum::<f64>() + theta[j]).max(0.0)
                })
                .collect();
            worst = worst.max(relative_gap(&stage.forward(&x, 0).unwrap(), &want));
        }
    }
    verdict(
        worst <= 1e-6 && bound_ok,
        format!("max relative gap {worst:.1e} on 5000 probes, L(s+1) <= 3nd: {bound_ok}"),
    )
}

fn random_dense(rng: &mut ChaCha8Rng) -> DenseNet {
    let layers = rng.gen_range(2..=3);
    let d = rng.gen_range(2..=8);
    let widths: Vec<usize> = (0..layers).map(|_| rng.gen_range(1..=8)).collect();
    DenseNet::random(d, &widths, 0.5, false, rng)
}

fn dfcn_compiler() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(SEED + 5);
    let (mut worst, mut worst_shift, mut shifts) = (0.0f64, 0.0f64, 0usize);
    for _ in 0..20 {
        let dense = random_dense(&mut rng);
        let s = rng.gen_range(2..=4);
        let compiled = compile_dense_net(&dense, s, 1.0, BiasSynthesis::Tight).unwrap();
        let d = dense.input_dim;
        for _ in 0..100 {
            let x = uniform(&mut rng, d, -1.0, 1.0);
            worst = worst.max(relative_gap(&compiled.forward(&x).unwrap(), &dense_oracle(&dense, &x)));
        }
        for p in 1..=d {
            let x = SupportedVector::new(d, 1, &uniform(&mut rng, p, -1.0, 1.0)).unwrap();
            let want = dense_oracle(&dense, x.values());
            for shift in 0..=(d - p) {
                let moved = shift_down(x.values(), shift);
                let got = compiled.forward_with_offset(&moved, shift).unwrap();
                worst_shift = worst_shift.max(relative_gap(&got, &want));
                let report = verify_translation_invariance(&compiled, &x, shift).unwrap();
                if !report.equal {
                    return verdict(
                        false,
                        format!(
                            "invariance report fails at shift {shift} (gap {:.1e}, oracle gap {:.1e}, p={p}, d={d})",
                            report.max_abs_gap,
                            relative_gap(&got, &want)
                        ),
                    );
                }
                shifts += 1;
            }
        }
    }
    verdict(
        worst <= 1e-6 && worst_shift <= 1e-6,
        format!(
            "max relative gap {worst:.1e} on 2000 probes; {shifts} translated inputs within {worst_shift:.1e}"
        ),
    )
}

fn gradients() -> Verdict {
    let layout = InputLayout::Supported(SupportPosition::Random);
    let suite = Architecture::learning_suite(LEARNING_DEPTH);
    let worst = suite
        .iter()
        .map(|arch| common::architecture_gradient_error(arch, layout, 10))
        .fold(0.0, f64::max);
    verdict(
        worst <= common::REL_TOL,
        format!("{} architectures x 10 seeds, worst relative error {worst:.1e}", suite.len()),
    )
}

fn round_trip() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(SEED + 11);
    let dir = tempfile::tempdir().unwrap();
    let mut worst = 0.0f64;
    for i in 0..10 {
        let dense = random_dense(&mut rng);
        let compiled = compile_dense_net(&dense, 3, 1.0, BiasSynthesis::Tight).unwrap();
        let path = dir.path().join(format!("c{i}.json"));
        let first = compiled.to_json().unwrap();
        std::fs::write(&path, &first).unwrap();
        let loaded = CompiledEDCNN::from_json(&std::fs::read_to_string(&path).unwrap()).unwrap();
        if loaded.to_json().unwrap() != first || loaded != compiled {
            return verdict(false, format!("network {i} changed across save/load"));
        }
        for _ in 0..100 {
            let x = uniform(&mut rng, dense.input_dim, -1.0, 1.0);
            worst = worst.max(relative_gap(&loaded.forward(&x).unwrap(), &dense_oracle(&dense, &x)));
        }
    }
    verdict(
        worst <= 1e-6,
        format!("10 networks re-saved byte-identically; loaded gap {worst:.1e}"),
    )
}

// ---------------------------------------------------------------------------
// Trained comparisons

fn run(name: ExperimentName, architectures: &[&str], repeats: usize) -> ExperimentResult {
    let config = build_experiment_config(name);
    let opts = RunOptions {
        repeats,
        seed: SEED,
        train: TrainConfig::default(),
        architectures: Some(architectures.iter().map(|a| a.to_string()).collect()),
        train_sizes: None,
        record_timing: false,
        keep_traces: false,
    };
    run_experiment(&config, &opts).unwrap()
}

fn fit_direction() -> Verdict {
    const FC: &str = "1-layer fc";
    const CONV: &str = "1-block multi-conv eDCNN";
    let mut pass = true;
    let mut parts = Vec::new();
    for name in [ExperimentName::FitF1, ExperimentName::FitF2] {
        let result = run(name, &[FC, CONV], 10);
        let variant = &result.variants[0];
        let m = result.rows[0].m;
        let fc = result.retained_rmse(variant, FC, m);
        let conv = result.retained_rmse(variant, CONV, m);
        let fc_params = result.row(variant, FC, m).unwrap().params;
        let conv_params = result.row(variant, CONV, m).unwrap().params;
        let ok = !fc.is_empty()
            && !conv.is_empty()
            && mean(&conv) < mean(&fc)
            && conv_params == 16
            && fc_params == 300;
        pass &= ok;
        parts.push(format!(
            "{name}: eDCNN {:.3} ({} kept, {conv_params} params) vs fc {:.3} ({} kept, {fc_params} params)",
            mean(&conv),
            conv.len(),
            mean(&fc),
            fc.len()
        ));
    }
    verdict(pass, parts.join("; "))
}

fn edge_separation() -> Verdict {
    let config = build_experiment_config(ExperimentName::F2m);
    let names: Vec<&str> = config
        .architectures
        .iter()
        .map(|a| a.name.as_str())
        .filter(|n| n.starts_with("cDCNN") || n.starts_with("eDCNN"))
        .collect();
    let result = run(ExperimentName::F2m, &names, 10);
    let edge = result.variants.iter().find(|v| v.ends_with("_edge")).unwrap().clone();
    let m = result.rows[0].m;
    let pooled = |family: &str| -> Vec<f64> {
        names
            .iter()
            .filter(|n| n.starts_with(family))
            .flat_map(|n| result.retained_rmse(&edge, n, m))
            .collect()
    };
    let (e, c) = (pooled("eDCNN"), pooled("cDCNN"));
    let mut wins = 0;
    let mut pairs = 0;
    for n in names.iter().filter(|n| n.starts_with("eDCNN")) {
        let twin = n.replacen("eDCNN", "cDCNN", 1);
        let (a, b) = (result.retained_rmse(&edge, n, m), result.retained_rmse(&edge, &twin, m));
        if !a.is_empty() && !b.is_empty() {
            pairs += 1;
            wins += usize::from(mean(&a) < mean(&b));
        }
    }
    verdict(
        !e.is_empty() && !c.is_empty() && mean(&e) < mean(&c),
        format!(
            "edge-support RMSE eDCNN {:.3} ({} runs) vs cDCNN {:.3} ({} runs); eDCNN better in {wins}/{pairs} matched variants",
            mean(&e),
            e.len(),
            mean(&c),
            c.len()
        ),
    )
}

fn consistency() -> Verdict {
    let result = run(ExperimentName::ConsistencyF2, &["eDCNN"], 10);
    let variant = &result.variants[0];
    let mut sizes: Vec<usize> = result.rows.iter().map(|r| r.m).collect();
    sizes.sort_unstable();
    sizes.dedup();
    let means: Vec<f64> = sizes
        .iter()
        .map(|&m| {
            let v = result.retained_rmse(variant, "eDCNN", m);
            if v.is_empty() {
                f64::NAN
            } else {
                mean(&v)
            }
        })
        .collect();
    if means.iter().any(|v| v.is_nan()) {
        return verdict(false, format!("a training size kept no repeats: {means:?}"));
    }
    let smooth = isotonic_non_increasing(&means);
    let monotone = smooth.windows(2).all(|w| w[1] <= w[0]);
    let (first, last) = (means[0], means[means.len() - 1]);
    let listing: Vec<String> = sizes
        .iter()
        .zip(&means)
        .map(|(m, r)| format!("{m}:{r:.4}"))
        .collect();
    verdict(
        last < first && monotone && smooth[smooth.len() - 1] < smooth[0],
        format!("mean RMSE by m {}", listing.join(" ")),
    )
}

fn main() {
    type Check = fn() -> Verdict;
    let criteria: [(u32, &str, bool, Check); 11] = [
        (1, "filter composition commutes", true, commutativity),
        (2, "expansive stacks are translation equivariant", true, equivariance),
        (3, "contracting convolution equivariance witness", true, contracting_witness),
        (4, "filter factorization", true, factorization),
        (5, "shallow layer compiler", true, shallow_compiler),
        (6, "dense network compiler and invariance", true, dfcn_compiler),
        (7, "gradient correctness", true, gradients),
        (8, "fit tables: eDCNN beats 1-layer fc", false, fit_direction),
        (9, "edge-support separation", false, edge_separation),
        (10, "empirical consistency", false, consistency),
        (11, "serialization round trip", true, round_trip),
    ];
    let selected: Vec<u32> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let mut hard_failures = 0;
    for (n, title, enforced, check) in criteria {
        if !selected.is_empty() && !selected.contains(&n) {
            continue;
        }
        let start = Instant::now();
        let v = check();
        let status = if v.pass { "PASS" } else { "FAIL" };
        let note = if v.pass || enforced { "" } else { " (empirical, not enforced)" };
        println!(
            "{status} criterion {n:>2} ({title}): {} [{:.1}s]{note}",
            v.detail,
            start.elapsed().as_secs_f64()
        );
        if !v.pass && enforced {
            hard_failures += 1;
        }
    }
    if hard_failures > 0 {
        eprintln!("{hard_failures} enforced criteria failed");
        std::process::exit(1);
    }
}
