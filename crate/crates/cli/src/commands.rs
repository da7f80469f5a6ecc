//! Resolves each subcommand's configuration and runs it.

use std::path::{Path, PathBuf};

use serde::Serialize;

use pruneprint::completion::{CompletionConfig, LambdaPath};
use pruneprint::defense::{self, DefenseParams};
use pruneprint::report;
use pruneprint::revival::{self, MaskPolicy, RevivalPlan};
use pruneprint::synthbench::{self, CellConfig, DefenseSweep, MaskMode, SynthSpec, STREAM_MASK};
use pruneprint::tensor::{self, LayerSet, WeightMatrix};

use crate::args::*;
use crate::config::*;

const TOOL: &str = "pruneprint";

/// The JSON document written by `--report`.
#[derive(Serialize)]
struct RunReport<'a, C: Serialize, R: Serialize> {
    tool: &'static str,
    version: &'static str,
    command: &'a str,
    config: &'a C,
    result: &'a R,
}

fn emit_report<C: Serialize, R: Serialize>(path: Option<&Path>, command: &str, config: &C, result: &R) -> Result<(), CliError> {
    if let Some(path) = path {
        let doc = RunReport {
            tool: TOOL,
            version: env!("CARGO_PKG_VERSION"),
            command,
            config,
            result,
        };
        report::write_json(&doc, path)?;
        log::info!("report written to {}", path.display());
    }
    Ok(())
}

pub fn run(cli: Cli) -> Result<(), CliError> {
    let cfg_path = cli.config.as_deref();
    let report_path = cli.report.as_deref();
    if cli.jobs == Some(0) {
        return Err(usage("--jobs must be at least 1"));
    }
    match cli.command {
        Command::Attack(a) => attack(a, cfg_path, cli.jobs, report_path),
        Command::Defend(a) => defend(a, cfg_path, report_path),
        Command::Analyze(AnalyzeCommand::Detect(a)) => detect(a, cfg_path, report_path),
        Command::Analyze(AnalyzeCommand::Surface(a)) => surface(a, cfg_path, report_path),
        Command::Analyze(AnalyzeCommand::P(a)) => probability(a, cfg_path, report_path),
        Command::Bench(BenchCommand::Synth(a)) => bench_synth(a, cfg_path, cli.jobs, report_path),
        Command::Ideal(a) => ideal(a, cfg_path, report_path),
    }
}

fn parse<T: std::str::FromStr<Err = pruneprint::Error>>(value: &str) -> Result<T, CliError> {
    value.parse().map_err(invalid)
}

fn apply_completion(cfg: &mut CompletionConfig, a: &CompletionArgs) -> Result<(), CliError> {
    if let Some(alg) = &a.algorithm {
        cfg.algorithm = parse(alg)?;
    }
    if let Some(values) = &a.lambdas {
        if a.lambda_steps.is_some() || a.lambda_ratio.is_some() {
            return Err(usage("--lambdas cannot be combined with --lambda-steps or --lambda-ratio"));
        }
        cfg.lambda_path = LambdaPath::Explicit { values: values.clone() };
    } else if a.lambda_steps.is_some() || a.lambda_ratio.is_some() {
        let (mut steps, mut ratio) = match (&cfg.lambda_path, LambdaPath::default()) {
            (LambdaPath::Auto { steps, ratio }, _) => (*steps, *ratio),
            (_, LambdaPath::Auto { steps, ratio }) => (steps, ratio),
            _ => unreachable!("the default lambda path is automatic"),
        };
        steps = a.lambda_steps.unwrap_or(steps);
        ratio = a.lambda_ratio.unwrap_or(ratio);
        cfg.lambda_path = LambdaPath::Auto { steps, ratio };
    }
    if let Some(r) = a.rank_cap {
        cfg.rank_cap = r;
    }
    if let Some(n) = a.max_iters {
        cfg.max_iters_per_lambda = n;
    }
    if let Some(t) = a.rel_tol {
        cfg.rel_tol = t;
    }
    if let Some(n) = a.oversample {
        cfg.svd_oversample = n;
    }
    if let Some(n) = a.power_iters {
        cfg.svd_power_iters = n;
    }
    Ok(())
}

fn apply_plan(plan: &mut RevivalPlan, a: &PlanArgs) -> Result<(), CliError> {
    if let Some(k) = a.topk {
        plan.k_fraction = k;
    }
    if let Some(m) = &a.magnitude {
        plan.magnitude_strategy = parse(m)?;
    }
    if let Some(axis) = &a.pool_axis {
        plan.pool_axis = parse(axis)?;
    }
    Ok(())
}

fn apply_cell(spec: &mut SynthSpec, mask: &mut MaskMode, a: &SynthCellArgs) {
    if let Some(v) = a.rows {
        spec.rows = v;
    }
    if let Some(v) = a.cols {
        spec.cols = v;
    }
    if let Some(v) = a.rank {
        spec.rank = v;
    }
    if a.noise_std.is_some() {
        spec.noise_std = a.noise_std;
    }
    if let Some(v) = a.target_sigma {
        spec.target_sigma = v;
    }
    if let Some(frac) = a.mask_frac {
        *mask = MaskMode::Uniform { frac };
    }
}

fn require_input(input: &Option<PathBuf>) -> Result<&Path, CliError> {
    let path = input.as_deref().ok_or_else(|| usage("--in is required"))?;
    if !path.exists() {
        return Err(usage(format!("input {} does not exist", path.display())));
    }
    Ok(path)
}

fn require_dir(input: &Option<PathBuf>) -> Result<&Path, CliError> {
    let path = require_input(input)?;
    if !path.is_dir() {
        return Err(usage(format!("input {} is not a directory", path.display())));
    }
    Ok(path)
}

fn check_glob(pattern: &str) -> Result<(), CliError> {
    glob::Pattern::new(pattern).map_err(|e| usage(format!("invalid glob {pattern:?}: {e}")))?;
    Ok(())
}

fn positive(name: &str, v: f64) -> Result<f64, CliError> {
    if v.is_finite() && v > 0.0 {
        Ok(v)
    } else {
        Err(usage(format!("{name} = {v} must be positive and finite")))
    }
}

fn attack(a: AttackArgs, cfg_path: Option<&Path>, jobs: Option<usize>, report_path: Option<&Path>) -> Result<(), CliError> {
    let mut cfg: AttackConfig = load(cfg_path)?;
    if a.layers.input.is_some() {
        cfg.input = a.layers.input;
    }
    if let Some(g) = a.layers.glob {
        cfg.glob = g;
    }
    if a.out.is_some() {
        cfg.output = a.out;
    }
    if let Some(d) = &a.dtype {
        cfg.dtype = parse(d)?;
    }
    if let Some(j) = jobs {
        cfg.jobs = j;
    }
    if let Some(seed) = a.seed {
        cfg.completion.seed = seed;
        cfg.plan.seed = seed;
    }
    apply_completion(&mut cfg.completion, &a.completion)?;
    apply_plan(&mut cfg.plan, &a.plan)?;
    let input = require_dir(&cfg.input)?;
    check_glob(&cfg.glob)?;
    cfg.completion.validate().map_err(invalid)?;
    cfg.plan.validate().map_err(invalid)?;
    if cfg.jobs == 0 {
        return Err(usage("jobs must be at least 1"));
    }

    let layers = tensor::load_layer_set(input, &cfg.glob)?;
    let (revived, result) = revival::attack_model(&layers, &cfg.completion, &cfg.plan, cfg.jobs)?;
    for l in &result.layers {
        println!(
            "{}: {}x{} pruned {} ({:.2}%), retained {}, zeroed {}, rank {}, {:.2}s",
            l.name,
            l.rows,
            l.cols,
            l.pruned_count,
            100.0 * l.pruned_fraction,
            l.retained,
            l.zeroed,
            l.effective_rank,
            l.wall_time_s
        );
    }
    if let Some(out) = &cfg.output {
        tensor::save_layer_set(&revived, out, cfg.dtype)?;
    }
    emit_report(report_path, "attack", &cfg, &result)
}

#[derive(Debug, Serialize)]
struct DefendedLayer {
    name: String,
    pruned_count: usize,
    alpha: f64,
    sigma_u: f64,
    w: f64,
    score_before: f64,
    score_after: f64,
    detect_probability: Option<f64>,
}

fn defend(a: DefendArgs, cfg_path: Option<&Path>, report_path: Option<&Path>) -> Result<(), CliError> {
    let mut cfg: DefendConfig = load(cfg_path)?;
    if a.layers.input.is_some() {
        cfg.input = a.layers.input;
    }
    if let Some(g) = a.layers.glob {
        cfg.glob = g;
    }
    if a.out.is_some() {
        cfg.output = a.out;
    }
    if let Some(d) = &a.dtype {
        cfg.dtype = parse(d)?;
    }
    if a.sigma_m.is_some() {
        cfg.sigma_m = a.sigma_m;
    }
    if a.w.is_some() {
        cfg.w = a.w;
    }
    if let Some(seed) = a.seed {
        cfg.seed = seed;
    }
    let input = require_dir(&cfg.input)?;
    check_glob(&cfg.glob)?;
    let sigma_m = positive("sigma_m", cfg.sigma_m.ok_or_else(|| usage("--sigma-m is required"))?)?;
    if let Some(w) = cfg.w {
        positive("w", w)?;
    }

    let layers = tensor::load_layer_set(input, &cfg.glob)?;
    let mut defended = Vec::with_capacity(layers.len());
    let mut rows = Vec::with_capacity(layers.len());
    for (idx, layer) in layers.layers().iter().enumerate() {
        let (matrix, row) = defend_layer(layer, sigma_m, cfg.w, synthbench::derive_seed(cfg.seed, idx as u64))
            .map_err(|e| CliError::Runtime(pruneprint::Error::Layer {
                name: layer.name().to_string(),
                source: Box::new(e),
            }))?;
        println!(
            "{}: {} entries obfuscated, detector {:.4} -> {:.4}",
            row.name, row.pruned_count, row.score_before, row.score_after
        );
        defended.push(matrix);
        rows.push(row);
    }
    if let Some(out) = &cfg.output {
        tensor::save_layer_set(&LayerSet::new(defended)?, out, cfg.dtype)?;
    }
    emit_report(report_path, "defend", &cfg, &rows)
}

fn defend_layer(layer: &WeightMatrix, sigma_m: f64, w: Option<f64>, seed: u64) -> pruneprint::Result<(WeightMatrix, DefendedLayer)> {
    let mask = revival::extract_mask(layer, &MaskPolicy::ExactZero)?;
    let sigma_u = defense::estimate_sigma_u(layer, &mask)?.sigma_u;
    let w = w.unwrap_or(sigma_u / 10.0);
    let score_before = defense::excess_mass_detector(layer, w)?;
    let out = defense::gaussian_obfuscate(layer, &mask, sigma_m, seed)?;
    let score_after = defense::excess_mass_detector(&out, w)?;
    let alpha = mask.pruned_fraction();
    let detect_probability = if alpha > 0.0 && alpha < 1.0 && sigma_u > 0.0 {
        Some(defense::detect_probability(&DefenseParams {
            sigma_m,
            sigma_u,
            alpha,
            w,
            seed,
        })?)
    } else {
        None
    };
    Ok((
        out,
        DefendedLayer {
            name: layer.name().to_string(),
            pruned_count: mask.pruned_count(),
            alpha,
            sigma_u,
            w,
            score_before,
            score_after,
            detect_probability,
        },
    ))
}

#[derive(Debug, Serialize)]
struct DetectRow {
    name: String,
    w: f64,
    score: f64,
}

fn detect(a: DetectArgs, cfg_path: Option<&Path>, report_path: Option<&Path>) -> Result<(), CliError> {
    let mut cfg: DetectConfig = load(cfg_path)?;
    if a.input.is_some() {
        cfg.input = a.input;
    }
    if let Some(g) = a.glob {
        cfg.glob = g;
    }
    if a.w.is_some() {
        cfg.w = a.w;
    }
    let input = require_input(&cfg.input)?;
    check_glob(&cfg.glob)?;
    if let Some(w) = cfg.w {
        positive("w", w)?;
    }

    let layers = if input.is_dir() {
        tensor::load_layer_set(input, &cfg.glob)?.into_layers()
    } else {
        vec![tensor::read_matrix(input)?]
    };
    let mut rows = Vec::with_capacity(layers.len());
    for layer in &layers {
        let w = match cfg.w {
            Some(w) => w,
            None => {
                let mask = revival::extract_mask(layer, &MaskPolicy::ExactZero)?;
                defense::estimate_sigma_u(layer, &mask)?.sigma_u / 10.0
            }
        };
        let score = defense::excess_mass_detector(layer, w)?;
        println!("{}\t{score:.6}", layer.name());
        rows.push(DetectRow {
            name: layer.name().to_string(),
            w,
            score,
        });
    }
    emit_report(report_path, "analyze detect", &cfg, &rows)
}

fn surface(a: SurfaceArgs, cfg_path: Option<&Path>, report_path: Option<&Path>) -> Result<(), CliError> {
    let mut cfg: SurfaceConfig = load(cfg_path)?;
    if let Some(g) = a.alpha {
        cfg.alpha = g;
    }
    if let Some(g) = a.sigma_m {
        cfg.sigma_m = g;
    }
    if let Some(s) = a.sigma_u {
        cfg.sigma_u = s;
    }
    if a.w.is_some() {
        cfg.w = a.w;
    }
    if a.out.is_some() {
        cfg.output = a.out;
    }
    let sigma_u = positive("sigma_u", cfg.sigma_u)?;
    let w = positive("w", cfg.w.unwrap_or(sigma_u / 10.0))?;
    if !(cfg.sigma_m.start > 0.0 && cfg.sigma_m.stop > 0.0) {
        return Err(usage("the sigma_m grid is geometric and needs positive bounds"));
    }
    let alphas = defense::linear_grid(cfg.alpha.start, cfg.alpha.stop, cfg.alpha.count);
    let sigmas = defense::geometric_grid(cfg.sigma_m.start, cfg.sigma_m.stop, cfg.sigma_m.count);
    for &alpha in &alphas {
        if !(alpha > 0.0 && alpha < 1.0) {
            return Err(usage(format!("alpha = {alpha} must lie in (0, 1)")));
        }
    }
    let grid = defense::detectability_surface(&alphas, &sigmas, sigma_u, w).map_err(invalid)?;
    match &cfg.output {
        Some(out) => report::write_file(out, grid.to_csv().as_bytes())?,
        None => print!("{}", grid.to_csv()),
    }
    emit_report(report_path, "analyze surface", &cfg, &grid)
}

fn probability(a: PArgs, cfg_path: Option<&Path>, report_path: Option<&Path>) -> Result<(), CliError> {
    let mut cfg: PConfig = load(cfg_path)?;
    cfg.alpha = a.alpha.or(cfg.alpha);
    cfg.sigma_m = a.sigma_m.or(cfg.sigma_m);
    cfg.sigma_u = a.sigma_u.or(cfg.sigma_u);
    cfg.w = a.w.or(cfg.w);
    let need = |v: Option<f64>, flag: &str| v.ok_or_else(|| usage(format!("{flag} is required")));
    let sigma_u = need(cfg.sigma_u, "--sigma-u")?;
    let params = DefenseParams {
        alpha: need(cfg.alpha, "--alpha")?,
        sigma_m: need(cfg.sigma_m, "--sigma-m")?,
        sigma_u,
        w: cfg.w.unwrap_or(sigma_u / 10.0),
        seed: 0,
    };
    params.validate().map_err(invalid)?;
    let p = defense::detect_probability(&params)?;
    println!("{p}");
    emit_report(report_path, "analyze p", &cfg, &p)
}

fn bench_synth(a: SynthArgs, cfg_path: Option<&Path>, jobs: Option<usize>, report_path: Option<&Path>) -> Result<(), CliError> {
    let mut cfg: BenchSynthConfig = load(cfg_path)?;
    if a.out.is_some() {
        cfg.output = a.out;
    }
    if let Some(j) = jobs {
        cfg.jobs = j;
    }
    if let Some(seed) = a.seed {
        cfg.bench.master_seed = seed;
    }
    apply_completion(&mut cfg.bench.completion, &a.completion)?;
    if a.cell.any() || cfg.bench.cells.is_empty() {
        let mut spec = default_cell_spec();
        let mut mask = default_cell_mask();
        apply_cell(&mut spec, &mut mask, &a.cell);
        cfg.bench.cells = vec![CellConfig {
            spec,
            mask,
            plan: RevivalPlan::default(),
            defense: None,
        }];
    }
    for cell in &mut cfg.bench.cells {
        apply_plan(&mut cell.plan, &a.plan)?;
        if a.defense_sweep && cell.defense.is_none() {
            cell.defense = Some(DefenseSweep::default());
        }
    }
    cfg.bench.validate().map_err(invalid)?;
    if cfg.jobs == 0 {
        return Err(usage("jobs must be at least 1"));
    }

    let result = synthbench::run_bench(&cfg.bench, cfg.jobs)?;
    for c in &result.cells {
        match (&c.attack, &c.error) {
            (Some(at), _) => println!(
                "cell {}: {}x{} rank {}{} sign accuracy {:.4}, missing rel error {:.4e}, {:.2}s",
                c.index,
                c.spec.rows,
                c.spec.cols,
                c.spec.rank,
                c.defense
                    .as_ref()
                    .map(|d| format!(" sigma_m {:e},", d.sigma_m))
                    .unwrap_or_else(|| ",".into()),
                at.sign_accuracy_overall,
                at.missing_rel_error,
                c.wall_time_s
            ),
            (None, Some(e)) => println!("cell {}: failed: {e}", c.index),
            (None, None) => println!("cell {}: no attack", c.index),
        }
    }
    if let Some(out) = &cfg.output {
        result.write_tables(out)?;
    }
    emit_report(report_path, "bench synth", &cfg, &result)
}

#[derive(Debug, Serialize)]
struct IdealRow {
    variant: String,
    sign_accuracy: f64,
}

fn ideal(a: IdealArgs, cfg_path: Option<&Path>, report_path: Option<&Path>) -> Result<(), CliError> {
    let mut cfg: IdealConfig = load(cfg_path)?;
    if a.truth.is_some() {
        cfg.truth = a.truth;
    }
    if a.pruned.is_some() {
        cfg.pruned = a.pruned;
    }
    if let Some(v) = &a.variant {
        cfg.variants = if v == "all" {
            IdealConfig::default().variants
        } else {
            v.split(',').map(|s| parse(s.trim())).collect::<Result<_, _>>()?
        };
    }
    if a.out.is_some() {
        cfg.output = a.out;
    }
    if let Some(seed) = a.seed {
        cfg.seed = seed;
        cfg.spec.seed = seed;
        cfg.plan.seed = seed;
    }
    if let Some(axis) = &a.pool_axis {
        cfg.plan.pool_axis = parse(axis)?;
    }
    apply_cell(&mut cfg.spec, &mut cfg.mask, &a.cell);
    if cfg.variants.is_empty() {
        return Err(usage("no ideal-case variant selected"));
    }
    if cfg.pruned.is_some() && cfg.truth.is_none() {
        return Err(usage("--pruned needs --truth to score sign accuracy"));
    }
    for path in [&cfg.truth, &cfg.pruned] {
        if path.is_some() {
            require_input(path)?;
        }
    }
    cfg.plan.validate().map_err(invalid)?;
    if cfg.truth.is_none() {
        cfg.spec.validate().map_err(invalid)?;
        cfg.mask.validate().map_err(invalid)?;
    }

    let truth = match &cfg.truth {
        Some(path) => tensor::read_matrix(path)?,
        None => synthbench::gen_lowrank_matrix(&cfg.spec)?,
    };
    let mask = match &cfg.pruned {
        Some(path) => {
            let pruned = tensor::read_matrix(path)?;
            if pruned.shape() != truth.shape() {
                return Err(usage(format!(
                    "pruned matrix is {:?}, truth is {:?}",
                    pruned.shape(),
                    truth.shape()
                )));
            }
            revival::extract_mask(&pruned, &MaskPolicy::ExactZero)?
        }
        None => synthbench::gen_mask(&truth, &cfg.mask, synthbench::derive_seed(cfg.seed, STREAM_MASK))?,
    };

    if let Some(out) = &cfg.output {
        std::fs::create_dir_all(out).map_err(|e| usage(format!("cannot create {}: {e}", out.display())))?;
    }
    let mut rows = Vec::with_capacity(cfg.variants.len());
    for &variant in &cfg.variants {
        let outcome = synthbench::ideal_case_study(&truth, &mask, variant, &cfg.plan, cfg.seed)?;
        println!("{variant}: sign accuracy {:.4}", outcome.sign_accuracy);
        if let Some(out) = &cfg.output {
            tensor::write_matrix(&outcome.revived, out.join(format!("{variant}.npy")), tensor::Dtype::F8)?;
        }
        rows.push(IdealRow {
            variant: variant.to_string(),
            sign_accuracy: outcome.sign_accuracy,
        });
    }
    emit_report(report_path, "ideal", &cfg, &rows)
}
