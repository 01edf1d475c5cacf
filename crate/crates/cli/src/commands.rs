use std::fs;
use std::path::{Path, PathBuf};

use clap::Parser;
use edcnn::factorize::{
    compile_dense_net, factor_filter, verify_translation_invariance, BiasSynthesis, CompiledEDCNN,
    SymbolPolynomial,
};
use edcnn::nets::{build_experiment_config, DenseNet};
use edcnn::train::{run_experiment, write_csv, RunOptions, TrainConfig};
use edcnn::SupportedVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::manifest::{sidecar, RunManifest};
use crate::{
    exit, BiasModeArg, Cli, Command, CompileArgs, ExperimentArgs, FactorizeArgs, Failure,
    InitDenseArgs, ReplayArgs, VerifyArgs,
};

type Outcome = Result<(), Failure>;

/// Gap accepted by the inline check after `compile`.
const COMPILE_TOLERANCE: f64 = 1e-6;

pub fn run(cli: &Cli) -> Outcome {
    match &cli.command {
        Command::Factorize(args) => factorize(cli, args),
        Command::Compile(args) => compile(cli, args),
        Command::Verify(args) => verify(cli, args),
        Command::Experiment(args) => experiment(cli, args),
        Command::InitDense(args) => init_dense(cli, args),
        Command::Replay(args) => replay(cli, args),
    }
}

fn resolve_seed(cli: &Cli) -> u64 {
    cli.seed.unwrap_or_else(|| rand::thread_rng().gen())
}

fn ensure_writable(cli: &Cli, paths: &[&Path]) -> Outcome {
    for p in paths {
        if p.exists() && !cli.force {
            return Err(Failure::new(
                exit::INVALID_INPUT,
                format!("{} exists; pass --force to overwrite", p.display()),
            ));
        }
    }
    Ok(())
}

fn read_text(path: &Path) -> Result<String, Failure> {
    fs::read_to_string(path).map_err(|e| {
        Failure::new(exit::INVALID_INPUT, format!("cannot read {}: {e}", path.display()))
    })
}

fn write_text(path: &Path, text: &str) -> Outcome {
    fs::write(path, text).map_err(|e| {
        Failure::new(exit::INVALID_INPUT, format!("cannot write {}: {e}", path.display()))
    })
}

fn path_arg(p: &Path) -> String {
    p.display().to_string()
}

fn record(
    cli: &Cli,
    command: &str,
    argv: Vec<String>,
    config: &impl Serialize,
    seed: Option<u64>,
    outputs: Vec<PathBuf>,
    default_path: PathBuf,
) -> Outcome {
    let config = serde_json::to_value(config)?;
    let manifest = RunManifest::new(command, argv, config, seed, outputs);
    let path = cli.manifest.clone().unwrap_or(default_path);
    manifest.write(&path).map_err(|e| {
        Failure::new(exit::INVALID_INPUT, format!("cannot write manifest {}: {e}", path.display()))
    })
}

fn print_json(value: &serde_json::Value) {
    println!("{}", serde_json::to_string_pretty(value).expect("JSON values serialise"));
}

/// `max_i |a_i − b_i| / max(1, max_i |b_i|)`.
fn relative_gap(approx: &[f64], exact: &[f64]) -> f64 {
    if approx.len() != exact.len() {
        return f64::INFINITY;
    }
    let scale = exact.iter().fold(1.0f64, |m, v| m.max(v.abs()));
    let diff = approx
        .iter()
        .zip(exact)
        .fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
    if diff.is_nan() {
        f64::INFINITY
    } else {
        diff / scale
    }
}

// ---------------------------------------------------------------------------
// factorize

#[derive(Deserialize)]
#[serde(untagged)]
enum CoeffFile {
    Bare(Vec<f64>),
    Wrapped { coeffs: Vec<f64> },
}

fn factorize(cli: &Cli, args: &FactorizeArgs) -> Outcome {
    ensure_writable(cli, &[&args.out])?;
    let text = read_text(&args.input)?;
    let coeffs = match serde_json::from_str::<CoeffFile>(&text) {
        Ok(CoeffFile::Bare(c)) | Ok(CoeffFile::Wrapped { coeffs: c }) => c,
        Err(e) => {
            return Err(Failure::new(
                exit::INVALID_INPUT,
                format!("{}: expected a JSON array of coefficients: {e}", args.input.display()),
            ))
        }
    };
    let poly = SymbolPolynomial::new(coeffs);
    if poly.is_zero() {
        return Err(Failure::new(exit::INVALID_INPUT, "cannot factor the zero polynomial"));
    }
    let cascade = factor_filter(&poly, args.s)?;
    write_text(&args.out, &(serde_json::to_string_pretty(&cascade)? + "\n"))?;

    let argv = vec![
        "factorize".into(),
        "--input".into(),
        path_arg(&args.input),
        "--s".into(),
        args.s.to_string(),
        "--out".into(),
        path_arg(&args.out),
        "--threshold".into(),
        args.threshold.to_string(),
    ];
    record(
        cli,
        "factorize",
        argv,
        args,
        None,
        vec![args.out.clone()],
        sidecar(&args.out, "manifest.json"),
    )?;

    let err = cascade.reconstruction_error;
    let passed = err <= args.threshold;
    if cli.json {
        print_json(&json!({
            "filters": cascade.len(),
            "s": cascade.s,
            "reconstruction_error": err,
            "threshold": args.threshold,
            "passed": passed,
            "out": args.out,
        }));
    } else {
        println!("filters: {}", cascade.len());
        println!("reconstruction error: {err:.3e} (threshold {:.0e})", args.threshold);
    }
    if passed {
        Ok(())
    } else {
        Err(Failure::new(
            exit::NUMERIC,
            format!("reconstruction error {err:.3e} exceeds threshold {:.0e}", args.threshold),
        ))
    }
}

// ---------------------------------------------------------------------------
// compile / verify

fn load_dense(path: &Path) -> Result<DenseNet, Failure> {
    DenseNet::from_json(&read_text(path)?)
        .map_err(|e| Failure::new(exit::INVALID_INPUT, format!("{}: {e}", path.display())))
}

fn load_compiled(path: &Path) -> Result<CompiledEDCNN, Failure> {
    CompiledEDCNN::from_json(&read_text(path)?)
        .map_err(|e| Failure::new(exit::INVALID_INPUT, format!("{}: {e}", path.display())))
}

#[derive(Debug, Serialize)]
struct ProbeRecord {
    index: usize,
    input: Vec<f64>,
    dense: Vec<f64>,
    compiled: Vec<f64>,
    relative_gap: f64,
}

#[derive(Debug, Serialize)]
struct ProbeSummary {
    probes: usize,
    max_relative_gap: f64,
    worst_probe: Option<ProbeRecord>,
}

/// Compares both networks on inputs drawn uniformly from `[−bound, bound]^d`.
fn probe_equivalence(
    dense: &DenseNet,
    compiled: &CompiledEDCNN,
    probes: usize,
    rng: &mut ChaCha8Rng,
) -> Result<ProbeSummary, Failure> {
    let bound = compiled.input_bound;
    let mut summary = ProbeSummary {
        probes,
        max_relative_gap: 0.0,
        worst_probe: None,
    };
    for index in 0..probes {
        let x: Vec<f64> = (0..dense.input_dim)
            .map(|_| if bound > 0.0 { rng.gen_range(-bound..=bound) } else { 0.0 })
            .collect();
        let want = dense.features(&x)?;
        let got = compiled.forward(&x)?;
        let gap = relative_gap(&got, &want);
        if summary.worst_probe.is_none() || gap > summary.max_relative_gap {
            summary.max_relative_gap = gap;
            summary.worst_probe = Some(ProbeRecord {
                index,
                input: x,
                dense: want,
                compiled: got,
                relative_gap: gap,
            });
        }
    }
    Ok(summary)
}

fn dense_parameter_count(dense: &DenseNet) -> usize {
    dense
        .layers
        .iter()
        .map(|l| l.weights.rows() * (l.weights.cols() + 1))
        .sum()
}

fn filter_bound(dense: &DenseNet) -> usize {
    3 * dense
        .layers
        .iter()
        .map(|l| l.weights.rows() * l.weights.cols())
        .sum::<usize>()
}

fn compile(cli: &Cli, args: &CompileArgs) -> Outcome {
    ensure_writable(cli, &[&args.out])?;
    let seed = resolve_seed(cli);
    let dense = load_dense(&args.dense)?;
    let mode = match args.mode {
        BiasModeArg::Tight => BiasSynthesis::Tight,
        BiasModeArg::Paper => BiasSynthesis::Paper,
    };
    let compiled = compile_dense_net(&dense, args.s, args.bound, mode).map_err(|e| {
        let mut f = Failure::from(e);
        if f.code == exit::NUMERIC && !f.message.contains("tight") {
            f.message.push_str(" (retry with --mode tight)");
        }
        f
    })?;
    write_text(&args.out, &(compiled.to_json()? + "\n"))?;

    let argv = vec![
        "compile".into(),
        "--dense".into(),
        path_arg(&args.dense),
        "--s".into(),
        args.s.to_string(),
        "--bound".into(),
        args.bound.to_string(),
        "--mode".into(),
        match args.mode {
            BiasModeArg::Tight => "tight".into(),
            BiasModeArg::Paper => "paper".into(),
        },
        "--out".into(),
        path_arg(&args.out),
        "--probes".into(),
        args.probes.to_string(),
        "--seed".into(),
        seed.to_string(),
    ];
    record(
        cli,
        "compile",
        argv,
        args,
        Some(seed),
        vec![args.out.clone()],
        sidecar(&args.out, "manifest.json"),
    )?;

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let summary = probe_equivalence(&dense, &compiled, args.probes, &mut rng)?;
    let passed = summary.max_relative_gap <= COMPILE_TOLERANCE;
    let dense_params = dense_parameter_count(&dense);
    let filter_params = compiled.filter_parameter_count();
    let bound = filter_bound(&dense);
    if cli.json {
        print_json(&json!({
            "dense_params": dense_params,
            "cascade_filter_params": filter_params,
            "compiled_params": compiled.parameter_count(),
            "filter_param_bound": bound,
            "within_bound": filter_params <= bound,
            "depths": compiled.stages.iter().map(|st| st.depth()).collect::<Vec<_>>(),
            "probes": summary.probes,
            "max_relative_gap": summary.max_relative_gap,
            "passed": passed,
            "seed": seed,
        }));
    } else {
        println!("dense parameters:            {dense_params}");
        println!("cascade filter parameters:   {filter_params}");
        println!("compiled parameters (total): {}", compiled.parameter_count());
        println!(
            "filter bound 3*sum d_j d_(j-1): {bound} ({})",
            if filter_params <= bound { "holds" } else { "exceeded" }
        );
        println!(
            "max relative gap over {} probes: {:.3e}",
            summary.probes, summary.max_relative_gap
        );
    }
    if passed {
        Ok(())
    } else {
        let mut message = format!(
            "compiled network deviates from the dense network (gap {:.3e})",
            summary.max_relative_gap
        );
        if args.mode == BiasModeArg::Paper {
            message.push_str("; paper-mode biases grow geometrically and cancel inexactly, try --mode tight");
        }
        Err(Failure::new(exit::VERIFICATION, message))
    }
}

#[derive(Debug, Serialize)]
struct ShiftRecord {
    support_len: usize,
    shift: usize,
    relative_gap: f64,
}

#[derive(Debug, Serialize)]
struct ShiftSummary {
    checked: usize,
    failed: usize,
    max_relative_gap: f64,
    worst: Option<ShiftRecord>,
}

/// One random supported vector at the origin per support length, checked at
/// every admissible shift.
fn shift_test(
    compiled: &CompiledEDCNN,
    tolerance: f64,
    rng: &mut ChaCha8Rng,
) -> Result<ShiftSummary, Failure> {
    let d = compiled.input_dim;
    let stride = compiled.stages.first().map_or(d, |st| st.pooling.stride).max(1);
    let bound = compiled.input_bound;
    let mut summary = ShiftSummary {
        checked: 0,
        failed: 0,
        max_relative_gap: 0.0,
        worst: None,
    };
    for p in 1..=d {
        let support: Vec<f64> = (0..p)
            .map(|_| if bound > 0.0 { rng.gen_range(-bound..=bound) } else { 0.0 })
            .collect();
        let x = SupportedVector::new(d, 1, &support)?;
        let scale = compiled.forward(x.values())?.iter().fold(1.0f64, |m, v| m.max(v.abs()));
        for shift in 0..=(d - p).min(stride - 1) {
            let report = verify_translation_invariance(compiled, &x, shift)?;
            let gap = if report.max_abs_gap.is_nan() {
                f64::INFINITY
            } else {
                report.max_abs_gap / scale
            };
            summary.checked += 1;
            if gap > tolerance {
                summary.failed += 1;
            }
            if summary.worst.is_none() || gap > summary.max_relative_gap {
                summary.max_relative_gap = gap;
                summary.worst = Some(ShiftRecord {
                    support_len: p,
                    shift,
                    relative_gap: gap,
                });
            }
        }
    }
    Ok(summary)
}

fn verify(cli: &Cli, args: &VerifyArgs) -> Outcome {
    let seed = resolve_seed(cli);
    let compiled = load_compiled(&args.compiled)?;
    let dense = load_dense(&args.dense)?;
    if compiled.input_dim != dense.input_dim
        || compiled.stages.len() != dense.layers.len()
        || compiled.output_dim() != dense.output_dim()
    {
        return Err(Failure::new(
            exit::INVALID_INPUT,
            format!(
                "dimension mismatch: compiled maps {} -> {} in {} stages, dense maps {} -> {} in {} layers",
                compiled.input_dim,
                compiled.output_dim(),
                compiled.stages.len(),
                dense.input_dim,
                dense.output_dim(),
                dense.layers.len()
            ),
        ));
    }

    let mut argv = vec![
        "verify".into(),
        "--compiled".into(),
        path_arg(&args.compiled),
        "--dense".into(),
        path_arg(&args.dense),
        "--probes".into(),
        args.probes.to_string(),
        "--tolerance".into(),
        args.tolerance.to_string(),
        "--seed".into(),
        seed.to_string(),
    ];
    if args.shift_test {
        argv.push("--shift-test".into());
    }
    record(
        cli,
        "verify",
        argv,
        args,
        Some(seed),
        Vec::new(),
        sidecar(&args.compiled, "verify.manifest.json"),
    )?;

    if args.probes == 0 {
        eprintln!("warning: --probes 0 checks nothing; equivalence holds vacuously");
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let probes = probe_equivalence(&dense, &compiled, args.probes, &mut rng)?;
    let shifts = if args.shift_test {
        Some(shift_test(&compiled, args.tolerance, &mut rng)?)
    } else {
        None
    };
    let probes_ok = probes.max_relative_gap <= args.tolerance;
    let shifts_ok = shifts.as_ref().map_or(true, |s| s.failed == 0);
    let passed = probes_ok && shifts_ok;
    print_json(&json!({
        "passed": passed,
        "tolerance": args.tolerance,
        "seed": seed,
        "probes": probes,
        "shift_test": shifts,
    }));
    if passed {
        return Ok(());
    }
    let message = if !probes_ok {
        let w = probes.worst_probe.as_ref().expect("a failing run has a worst probe");
        format!(
            "compiled output differs on probe {} (relative gap {:.3e})",
            w.index, w.relative_gap
        )
    } else {
        let w = shifts.as_ref().and_then(|s| s.worst.as_ref()).expect("failing shift recorded");
        format!(
            "translation invariance fails at support length {}, shift {} (gap {:.3e})",
            w.support_len, w.shift, w.relative_gap
        )
    };
    Err(Failure::new(exit::VERIFICATION, message))
}

// ---------------------------------------------------------------------------
// experiment

fn experiment(cli: &Cli, args: &ExperimentArgs) -> Outcome {
    let mut outputs = vec![args.out.clone()];
    outputs.extend(args.cells.clone());
    ensure_writable(cli, &outputs.iter().map(PathBuf::as_path).collect::<Vec<_>>())?;
    let seed = resolve_seed(cli);
    let config = build_experiment_config(args.name);
    let mut train = TrainConfig::with_epochs(args.epochs);
    train.truncation = args.truncation;
    let opts = RunOptions {
        repeats: args.repeats,
        seed,
        train,
        architectures: (!args.architectures.is_empty()).then(|| args.architectures.clone()),
        train_sizes: (!args.sizes.is_empty()).then(|| args.sizes.clone()),
        record_timing: args.timing,
        keep_traces: args.cells.is_some(),
    };
    let result = run_experiment(&config, &opts)?;

    let mut csv = Vec::new();
    write_csv(&result.rows, &mut csv)?;
    fs::write(&args.out, csv)?;
    if let Some(path) = &args.cells {
        write_text(path, &(serde_json::to_string_pretty(&result.cells)? + "\n"))?;
    }

    let mut argv = vec![
        "experiment".into(),
        "--name".into(),
        args.name.as_str().into(),
        "--repeats".into(),
        args.repeats.to_string(),
        "--out".into(),
        path_arg(&args.out),
        "--epochs".into(),
        args.epochs.to_string(),
        "--seed".into(),
        seed.to_string(),
    ];
    for a in &args.architectures {
        argv.push("--arch".into());
        argv.push(a.clone());
    }
    if !args.sizes.is_empty() {
        argv.push("--sizes".into());
        argv.push(args.sizes.iter().map(usize::to_string).collect::<Vec<_>>().join(","));
    }
    if let Some(m) = args.truncation {
        argv.push("--truncation".into());
        argv.push(m.to_string());
    }
    if args.timing {
        argv.push("--timing".into());
    }
    if let Some(path) = &args.cells {
        argv.push("--cells".into());
        argv.push(path_arg(path));
    }
    let run_config = json!({ "args": args, "options": opts, "experiment": config });
    record(
        cli,
        "experiment",
        argv,
        &run_config,
        Some(seed),
        outputs,
        sidecar(&args.out, "manifest.json"),
    )?;

    let failed = result.cells.iter().filter(|c| c.error.is_some()).count();
    if failed > 0 {
        eprintln!("warning: {failed} cells hit a numeric failure and were dropped as outliers");
    }
    if cli.json {
        print_json(&json!({ "seed": seed, "rows": result.rows, "failed_cells": failed }));
    } else {
        for row in &result.rows {
            let fmt = |v: Option<f64>| v.map_or("-".to_string(), |v| format!("{v:.4e}"));
            println!(
                "{:<18} {:<24} m={:<5} kept={:<3} rmse={} ± {} params={}",
                row.experiment,
                row.architecture,
                row.m,
                row.seed_count,
                fmt(row.rmse_mean),
                fmt(row.rmse_std),
                row.params
            );
        }
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// init-dense / replay

fn init_dense(cli: &Cli, args: &InitDenseArgs) -> Outcome {
    ensure_writable(cli, &[&args.out])?;
    if args.input_dim == 0 || args.widths.contains(&0) {
        return Err(Failure::new(exit::INVALID_INPUT, "dimensions must be positive"));
    }
    if !(args.bias_scale.is_finite() && args.bias_scale >= 0.0) {
        return Err(Failure::new(exit::INVALID_INPUT, "--bias-scale must be finite and >= 0"));
    }
    let seed = resolve_seed(cli);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let net = DenseNet::random(args.input_dim, &args.widths, args.bias_scale, args.head, &mut rng);
    write_text(&args.out, &(net.to_json()? + "\n"))?;

    let mut argv = vec![
        "init-dense".into(),
        "--input-dim".into(),
        args.input_dim.to_string(),
        "--widths".into(),
        args.widths.iter().map(usize::to_string).collect::<Vec<_>>().join(","),
        "--bias-scale".into(),
        args.bias_scale.to_string(),
        "--out".into(),
        path_arg(&args.out),
        "--seed".into(),
        seed.to_string(),
    ];
    if args.head {
        argv.push("--head".into());
    }
    record(
        cli,
        "init-dense",
        argv,
        args,
        Some(seed),
        vec![args.out.clone()],
        sidecar(&args.out, "manifest.json"),
    )?;
    if cli.json {
        print_json(&json!({ "out": args.out, "seed": seed, "params": net.parameter_count() }));
    }
    Ok(())
}

/// Flags whose value names a file the command writes.
const OUTPUT_FLAGS: [&str; 2] = ["--out", "--cells"];

fn replay(cli: &Cli, args: &ReplayArgs) -> Outcome {
    let manifest = RunManifest::read(&args.from).map_err(|m| Failure::new(exit::INVALID_INPUT, m))?;
    if manifest.argv.first().map(String::as_str) == Some("replay") {
        return Err(Failure::new(exit::INVALID_INPUT, "a manifest cannot replay a replay"));
    }
    let mut argv = manifest.argv.clone();
    if let Some(dir) = &args.out_dir {
        fs::create_dir_all(dir)?;
        for i in 1..argv.len() {
            if OUTPUT_FLAGS.contains(&argv[i - 1].as_str()) {
                let name = Path::new(&argv[i]).file_name().ok_or_else(|| {
                    Failure::new(exit::INVALID_INPUT, format!("output path {:?} has no file name", argv[i]))
                })?;
                argv[i] = path_arg(&dir.join(name));
            }
        }
    }
    let mut full = vec!["edcnn".to_string()];
    full.extend(argv);
    full.push("--force".into());
    if cli.json {
        full.push("--json".into());
    }
    let inner = Cli::try_parse_from(&full).map_err(|e| {
        Failure::new(exit::INVALID_INPUT, format!("manifest holds an invalid command line: {e}"))
    })?;
    run(&inner)
}
