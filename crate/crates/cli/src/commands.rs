use std::path::Path;

use dgcrn_core::config::validate_horizons;
use dgcrn_core::container::Dtype;
use dgcrn_core::data::{
    read_speed, synth_generate, write_speed_bin, write_speed_csv, Dataset, NormStats, RoadNetwork, Sentinel, Split,
};
use dgcrn_core::diagnostics::{end_to_end_gradcheck, tiny_config, tiny_problem};
use dgcrn_core::eval::{analyze_dataset, evaluate_baselines, lagged_pearson, masked_metrics, write_histograms_csv, MetricReport};
use dgcrn_core::generator::FilterMode;
use dgcrn_core::graph::{read_distance_csv, save_graph, write_distance_csv, StaticGraph};
use dgcrn_core::model::{load_checkpoint, save_checkpoint, Model};
use dgcrn_core::numerics::Tensor;
use dgcrn_core::training::{evaluate_model, fit, write_log, FitResult};
use dgcrn_core::{Config, Error, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::manifest::RunManifest;
use crate::pipeline::{build_graph, load_inputs};
use crate::{context, Cli, Command, Precision, RunContext, SpeedFormat};

fn io_err(path: &Path, e: std::io::Error) -> Error {
    Error::Io {
        path: path.to_path_buf(),
        source: e,
    }
}

fn format_err(what: &'static str, e: impl ToString) -> Error {
    Error::Format {
        what,
        detail: e.to_string(),
    }
}

pub(crate) fn dispatch(cli: &Cli) -> Result<()> {
    let ctx = context(&cli.common)?;
    let out = cli.common.out.clone();
    std::fs::create_dir_all(&out).map_err(|e| io_err(&out, e))?;
    let mut manifest = RunManifest::start(cli.command.name(), &ctx.config, cli.common.precision.bits(), ctx.threads);
    let outcome = run_command(cli, &ctx, &out, &mut manifest);
    manifest.finish(&outcome);
    manifest.write(&out)?;
    outcome
}

fn run_command(cli: &Cli, ctx: &RunContext, out: &Path, m: &mut RunManifest) -> Result<()> {
    match &cli.command {
        Command::GenData { format } => gen_data(ctx, *format, out, m),
        Command::BuildGraph { distances, nodes } => build_graph_cmd(ctx, distances.as_deref(), *nodes, out, m),
        Command::Train => train(ctx, cli.common.precision, out, m),
        Command::Eval {
            checkpoint,
            split,
            predictions,
            truth,
        } => match (checkpoint, predictions, truth) {
            (_, Some(p), Some(t)) => eval_predictions(ctx, p, t, out, m),
            (Some(c), None, _) => eval_checkpoint(ctx, c, Split::parse(split)?, out, m),
            _ => Err(Error::Config("eval needs --checkpoint, or --predictions with --truth".into())),
        },
        Command::Gradcheck { eps, tol } => gradcheck(cli, ctx, *eps, *tol, out, m),
        Command::Bench => bench(ctx, cli.common.precision, out, m),
        Command::Analyze { bins } => analyze(ctx, *bins, out, m),
    }
}

fn gen_data(ctx: &RunContext, format: SpeedFormat, out: &Path, m: &mut RunManifest) -> Result<()> {
    let synth = &ctx.config.data.synth;
    let net = RoadNetwork::generate(synth.n_nodes, synth.seed)?;
    let series = synth_generate(&net, synth, synth.seed)?;
    let speed = match format {
        SpeedFormat::Bin => {
            let p = out.join("speed.bin");
            write_speed_bin(&p, &series)?;
            p
        }
        SpeedFormat::Csv => {
            let p = out.join("speed.csv");
            write_speed_csv(&p, &series)?;
            p
        }
    };
    let dist = out.join("distances.csv");
    write_distance_csv(&dist, &net.distances())?;
    println!(
        "{} nodes x {} steps ({} roads) -> {}",
        series.n_nodes,
        series.n_steps(),
        net.edges.len(),
        speed.display()
    );
    m.outputs = vec![speed, dist];
    Ok(())
}

fn build_graph_cmd(
    ctx: &RunContext,
    distances: Option<&Path>,
    nodes: Option<usize>,
    out: &Path,
    m: &mut RunManifest,
) -> Result<()> {
    let cfg = &ctx.config;
    let d = match distances {
        Some(p) => {
            if !p.is_file() {
                return Err(Error::Config(format!("distance file {} not found", p.display())));
            }
            m.inputs.push(p.to_path_buf());
            read_distance_csv(p, nodes)?
        }
        None => {
            let inputs = load_inputs(cfg, &ctx.config_dir)?;
            m.inputs = inputs.files;
            inputs.distances
        }
    };
    let graph = build_graph(cfg, &d)?;
    let path = out.join("graph.bin");
    save_graph(&graph, cfg.graph.kappa, &path)?;
    println!(
        "{} nodes, {} edges at kappa {} -> {}",
        graph.n_nodes,
        graph.edge_count(),
        cfg.graph.kappa,
        path.display()
    );
    m.outputs.push(path);
    Ok(())
}

/// Dataset and graph for training commands.
fn prepare(ctx: &RunContext, m: &mut RunManifest) -> Result<(Dataset, StaticGraph)> {
    let cfg = &ctx.config;
    let inputs = load_inputs(cfg, &ctx.config_dir)?;
    m.inputs = inputs.files;
    let graph = build_graph(cfg, &inputs.distances)?;
    if graph.n_nodes != inputs.series.n_nodes {
        return Err(Error::Config(format!(
            "graph has {} nodes, speed series {}",
            graph.n_nodes, inputs.series.n_nodes
        )));
    }
    let data = Dataset::prepare(
        inputs.series,
        &cfg.data.split,
        cfg.model.input_len,
        cfg.model.output_len,
    )?;
    Ok((data, graph))
}

/// Initializes and fits a model; every random draw descends from `cfg.seed`.
pub(crate) fn train_model(cfg: &Config, data: &Dataset, graph: &StaticGraph) -> Result<(Model, FitResult)> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut model = Model::new(cfg.model.clone(), data.n_nodes(), &mut rng)?;
    if cfg.train.f32_params {
        for t in model.params.tensors_mut() {
            for v in t.data_mut() {
                *v = *v as f32 as f64;
            }
        }
    }
    log::info!("{} parameters, {} training windows", model.parameter_count(), data.windows(Split::Train).len());
    let fit_seed: u64 = rng.random();
    let res = fit(&mut model, data, graph, &cfg.train, cfg.data.sentinel, fit_seed, |r| {
        log::info!(
            "epoch {:>3}  train {:.4}  val MAE {:.4}  horizon {}  p_ss {:.3}",
            r.epoch,
            r.train_mae,
            r.val_mae,
            r.horizon_i,
            r.ss_prob
        )
    })?;
    Ok((model, res))
}

fn model_label(cfg: &Config) -> String {
    let d = Config::default();
    let m = &cfg.model;
    let mut tags = Vec::new();
    if m.beta_mix == 0.0 {
        tags.push("w/o-dg");
    }
    if m.gamma_mix == 0.0 {
        tags.push("w/o-preA");
    }
    if m.hyper != d.model.hyper {
        tags.push("w/o-hypernet");
    }
    if m.filter != d.model.filter {
        tags.push(match m.filter {
            FilterMode::Constant => "dg2sg",
            _ => "hypernet-mul2matmul",
        });
    }
    if !cfg.train.curriculum {
        tags.push("w/o-cl");
    }
    if tags.is_empty() {
        "DGCRN".into()
    } else {
        format!("DGCRN ({})", tags.join(", "))
    }
}

fn write_report(report: &MetricReport, out: &Path, name: &str, m: &mut RunManifest) -> Result<()> {
    let path = out.join(name);
    report.write_csv(&path)?;
    print!("{}", report.to_table());
    m.outputs.push(path);
    Ok(())
}

fn train(ctx: &RunContext, precision: Precision, out: &Path, m: &mut RunManifest) -> Result<()> {
    let cfg = &ctx.config;
    let (data, graph) = prepare(ctx, m)?;
    let (model, res) = train_model(cfg, &data, &graph)?;
    let ckpt = out.join("model.ckpt");
    let dtype = match precision {
        Precision::F32 => Dtype::F32,
        Precision::F64 => Dtype::F64,
    };
    save_checkpoint(&model, (data.norm.mean, data.norm.std), dtype, &ckpt)?;
    let log_path = out.join("train_log.csv");
    write_log(&log_path, &res.history)?;
    m.outputs.extend([ckpt, log_path]);
    println!(
        "best epoch {} (val MAE {:.4}) after {} iterations",
        res.best_epoch, res.best_val_mae, res.iterations
    );
    let acc = evaluate_model(&model, &data, &graph, Split::Test, cfg.eval.batch_size, cfg.data.sentinel)?;
    write_report(&acc.report(&model_label(cfg), &cfg.eval.horizons), out, "metrics.csv", m)
}

fn eval_checkpoint(ctx: &RunContext, ckpt: &Path, split: Split, out: &Path, m: &mut RunManifest) -> Result<()> {
    if !ckpt.is_file() {
        return Err(Error::Config(format!("checkpoint {} not found", ckpt.display())));
    }
    let cfg = &ctx.config;
    let (model, (mean, std)) = load_checkpoint(ckpt)?;
    let inputs = load_inputs(cfg, &ctx.config_dir)?;
    m.inputs = inputs.files;
    m.inputs.push(ckpt.to_path_buf());
    if inputs.series.n_nodes != model.n_nodes {
        return Err(Error::Config(format!(
            "checkpoint has {} nodes, data {}",
            model.n_nodes, inputs.series.n_nodes
        )));
    }
    let graph = build_graph(cfg, &inputs.distances)?;
    let (p, q) = (model.config.input_len, model.config.output_len);
    validate_horizons(&cfg.eval.horizons, q)?;
    let data = Dataset::prepare_with_norm(inputs.series, &cfg.data.split, p, q, Some(NormStats { mean, std }))?;
    let acc = evaluate_model(&model, &data, &graph, split, cfg.eval.batch_size, cfg.data.sentinel)?;
    write_report(&acc.report("DGCRN", &cfg.eval.horizons), out, "metrics.csv", m)
}

fn eval_predictions(ctx: &RunContext, pred: &Path, truth: &Path, out: &Path, m: &mut RunManifest) -> Result<()> {
    for p in [pred, truth] {
        if !p.is_file() {
            return Err(Error::Config(format!("speed file {} not found", p.display())));
        }
    }
    m.inputs = vec![pred.to_path_buf(), truth.to_path_buf()];
    let p = read_speed(pred, Sentinel::Nan)?;
    let t = read_speed(truth, ctx.config.data.sentinel)?;
    if (p.n_steps(), p.n_nodes) != (t.n_steps(), t.n_nodes) {
        return Err(Error::Config(format!(
            "predictions are {}x{}, truths {}x{}",
            p.n_steps(),
            p.n_nodes,
            t.n_steps(),
            t.n_nodes
        )));
    }
    let shape = [p.n_steps(), 1, p.n_nodes];
    let report = masked_metrics(
        &Tensor::new(shape.to_vec(), p.values().to_vec())?,
        &Tensor::new(shape.to_vec(), t.values().to_vec())?,
        Sentinel::Nan,
        "predictions",
        &[1],
    )?;
    write_report(&report, out, "metrics.csv", m)
}

fn gradcheck(cli: &Cli, ctx: &RunContext, eps: f64, tol: f64, out: &Path, m: &mut RunManifest) -> Result<()> {
    let mut cfg = Config {
        model: tiny_config(),
        ..Config::default()
    };
    for a in &cli.common.ablation {
        a.apply(&mut cfg);
    }
    let problem = tiny_problem(cfg.model, ctx.config.seed)?;
    let r = end_to_end_gradcheck(&problem, eps)?;
    println!(
        "max relative error {:.3e} over {} parameters ({} scalars); worst in {}",
        r.max_rel_error, r.n_params, r.n_scalars, r.worst
    );
    let path = out.join("gradcheck.json");
    let body = serde_json::json!({
        "seed": ctx.config.seed,
        "eps": eps,
        "tolerance": tol,
        "max_rel_error": r.max_rel_error,
        "worst": r.worst,
        "n_params": r.n_params,
        "n_scalars": r.n_scalars,
    });
    let text = serde_json::to_string_pretty(&body).map_err(|e| format_err("gradcheck report", e))?;
    std::fs::write(&path, text + "\n").map_err(|e| io_err(&path, e))?;
    m.outputs.push(path);
    if r.max_rel_error < tol {
        Ok(())
    } else {
        Err(Error::Numeric(format!(
            "relative error {:.3e} in {} exceeds {tol:e}",
            r.max_rel_error, r.worst
        )))
    }
}

fn bench(ctx: &RunContext, precision: Precision, out: &Path, m: &mut RunManifest) -> Result<()> {
    let cfg = &ctx.config;
    let (data, graph) = prepare(ctx, m)?;
    let (model, res) = train_model(cfg, &data, &graph)?;
    let log_path = out.join("train_log.csv");
    write_log(&log_path, &res.history)?;
    m.outputs.push(log_path);
    if precision == Precision::F32 {
        log::info!("parameters were kept at f32 precision");
    }
    let horizons = &cfg.eval.horizons;
    let mut report = evaluate_baselines(&data, Split::Test, horizons, cfg.data.sentinel)?;
    let acc = evaluate_model(&model, &data, &graph, Split::Test, cfg.eval.batch_size, cfg.data.sentinel)?;
    report.extend(acc.report(&model_label(cfg), horizons));
    write_report(&report, out, "report.csv", m)
}

fn analyze(ctx: &RunContext, bins: usize, out: &Path, m: &mut RunManifest) -> Result<()> {
    if bins == 0 {
        return Err(Error::Config("--bins must be >= 1".into()));
    }
    let inputs = load_inputs(&ctx.config, &ctx.config_dir)?;
    m.inputs = inputs.files;
    let series = &inputs.series;
    let stats = analyze_dataset(series, bins)?;
    let hist = out.join("histograms.csv");
    write_histograms_csv(&hist, &stats)?;
    let corr = out.join("correlations.csv");
    let mut text = String::from("node_a,node_b,pearson\n");
    for (a, b, r) in &stats.correlations {
        text.push_str(&format!("{a},{b},{r:.6}\n"));
    }
    std::fs::write(&corr, text).map_err(|e| io_err(&corr, e))?;

    let mean = |v: &[f64]| if v.is_empty() { f64::NAN } else { v.iter().sum::<f64>() / v.len() as f64 };
    let all: Vec<f64> = stats.correlations.iter().map(|c| c.2).collect();
    println!(
        "{} nodes x {} steps, {:.2}% missing",
        series.n_nodes,
        series.n_steps(),
        100.0 * series.missing_count() as f64 / series.values().len() as f64
    );
    println!("mean pairwise correlation {:.4} over {} pairs", mean(&all), all.len());
    if !stats.excluded_nodes.is_empty() {
        println!("excluded constant nodes: {:?}", stats.excluded_nodes);
    }
    let mut summary = serde_json::json!({
        "n_nodes": series.n_nodes,
        "n_steps": series.n_steps(),
        "missing": series.missing_count(),
        "mean_correlation": mean(&all),
        "excluded_nodes": stats.excluded_nodes,
    });
    if let Some(net) = &inputs.network {
        let (mut adj, mut other) = (Vec::new(), Vec::new());
        for &(a, b, r) in &stats.correlations {
            if net.is_adjacent(a, b) {
                adj.push(r);
            } else {
                other.push(r);
            }
        }
        println!("adjacent pairs {:.4}, other pairs {:.4}", mean(&adj), mean(&other));
        summary["adjacent_mean_correlation"] = mean(&adj).into();
        summary["other_mean_correlation"] = mean(&other).into();
        let cols: Vec<Vec<f64>> = (0..series.n_nodes).map(|i| series.node(i)).collect();
        let lag1: Vec<f64> = net
            .edges
            .iter()
            .filter_map(|&(a, b, _)| lagged_pearson(&cols[a], &cols[b], 1))
            .collect();
        summary["downstream_lag1_correlation"] = mean(&lag1).into();
    }
    let summary_path = out.join("summary.json");
    let text = serde_json::to_string_pretty(&summary).map_err(|e| format_err("summary", e))?;
    std::fs::write(&summary_path, text + "\n").map_err(|e| io_err(&summary_path, e))?;
    m.outputs = vec![hist, corr, summary_path];
    Ok(())
}
