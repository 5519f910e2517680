//! `coprune`: score, plan and apply correlation-based filter pruning.

mod config;

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};
use coprune::cost_model::{layer_flops, layer_params, regularized_importance, total_flops, total_params};
use coprune::{
    apply_plan, build_plan, layer_costs, parse_manifest, prune_graph, read_container, regularizer, score_graph, synth,
    write_container, LayerSpec, ModelGraph, PruningPlan, WeightContainer,
};

use config::{usage, RunConfig, UsageError};

#[derive(Parser)]
#[command(name = "coprune", version, about = "Correlation-based structured filter pruning")]
struct Cli {
    /// TOML file supplying defaults for any flag
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Per-layer parameters, FLOPs, touched costs and coupling groups
    Inspect(RunConfig),
    /// Dump per-filter similarity, importance and regularized importance
    Importance(RunConfig),
    /// Rank all filters globally and write a pruning plan
    Plan(RunConfig),
    /// Apply a plan, writing a pruned manifest and weight container
    Apply(RunConfig),
    /// Predicted per-layer shapes and reductions of a plan
    Report(RunConfig),
    /// Write seeded random weights matching a manifest
    Synth(RunConfig),
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Inspect(_) => "inspect",
            Command::Importance(_) => "importance",
            Command::Plan(_) => "plan",
            Command::Apply(_) => "apply",
            Command::Report(_) => "report",
            Command::Synth(_) => "synth",
        }
    }

    fn flags(self) -> RunConfig {
        match self {
            Command::Inspect(c)
            | Command::Importance(c)
            | Command::Plan(c)
            | Command::Apply(c)
            | Command::Report(c)
            | Command::Synth(c) => c,
        }
    }
}

fn load_graph(cfg: &RunConfig) -> Result<ModelGraph> {
    let path = cfg.require(&cfg.manifest, "manifest")?;
    let text = fs::read_to_string(path).with_context(|| format!("reading manifest {}", path.display()))?;
    parse_manifest(&text).with_context(|| format!("manifest {}", path.display()))
}

fn load_weights(cfg: &RunConfig, graph: &ModelGraph) -> Result<WeightContainer> {
    let path = cfg.require(&cfg.weights, "weights")?;
    let bytes = fs::read(path).with_context(|| format!("reading weights {}", path.display()))?;
    let weights = read_container(&bytes).with_context(|| format!("weights {}", path.display()))?;
    weights
        .check_against(graph)
        .with_context(|| format!("weights {} do not match the manifest", path.display()))?;
    Ok(weights)
}

fn load_plan(cfg: &RunConfig) -> Result<PruningPlan> {
    let path = cfg.require(&cfg.plan, "plan")?;
    let text = fs::read_to_string(path).with_context(|| format!("reading plan {}", path.display()))?;
    PruningPlan::from_toml(&text).with_context(|| format!("plan {}", path.display()))
}

/// Write `text` to `--out` if given, otherwise to stdout.
fn emit(cfg: &RunConfig, text: &str) -> Result<()> {
    match &cfg.out {
        Some(path) => fs::write(path, text).with_context(|| format!("writing {}", path.display())),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn group_summary(graph: &ModelGraph) -> String {
    let groups = graph.groups();
    let prunable = groups.iter().filter(|g| g.prunable).count();
    let mut out = format!("coupling groups: {} ({prunable} prunable)\n", groups.len());
    for (i, g) in groups.iter().enumerate() {
        let axes: Vec<&str> = g.output_axes().map(|a| a.layer.as_str()).collect();
        let _ = writeln!(
            out,
            "  group {i:<3} width {:<5} {:<10} {} axes: {}",
            g.width,
            if g.prunable { "prunable" } else { "fixed" },
            axes.len(),
            axes.join(", ")
        );
    }
    out
}

fn cmd_inspect(cfg: &RunConfig) -> Result<()> {
    let graph = load_graph(cfg)?;
    let plan_cfg = cfg.plan_config()?;
    let costs = layer_costs(&graph, plan_cfg.spatial_convention);
    let reg = regularizer(&costs, plan_cfg.beta, plan_cfg.gamma)?;
    let mut out = cfg.echo("inspect");
    out.push_str(&costs.report(&graph, Some(&reg)));
    out.push_str(&group_summary(&graph));
    emit(cfg, &out)
}

fn cmd_importance(cfg: &RunConfig) -> Result<()> {
    let graph = load_graph(cfg)?;
    let weights = load_weights(cfg, &graph)?;
    let plan_cfg = cfg.plan_config()?;
    let table = score_graph(&graph, &weights, &plan_cfg.importance())?;
    let costs = layer_costs(&graph, plan_cfg.spatial_convention);
    let reg = regularizer(&costs, plan_cfg.beta, plan_cfg.gamma)?;
    let table = regularized_importance(&table, &reg)?;
    let mut out = cfg.echo("importance");
    out.push_str(&table.to_tsv());
    emit(cfg, &out)
}

fn cmd_plan(cfg: &RunConfig) -> Result<()> {
    cfg.require(&cfg.ratio, "ratio")?;
    let graph = load_graph(cfg)?;
    let weights = load_weights(cfg, &graph)?;
    let plan = build_plan(&graph, &weights, &cfg.plan_config()?)?;
    let text = format!("{}{}", cfg.echo("plan"), plan.to_toml());
    match &cfg.out {
        Some(path) => {
            fs::write(path, text).with_context(|| format!("writing {}", path.display()))?;
            print!("{}", plan.summary());
        }
        None => print!("{text}"),
    }
    Ok(())
}

fn cmd_apply(cfg: &RunConfig) -> Result<()> {
    let graph = load_graph(cfg)?;
    let weights = load_weights(cfg, &graph)?;
    let plan = load_plan(cfg)?;
    let out_dir = cfg.require(&cfg.out, "out")?;
    let (pruned, pruned_weights) = apply_plan(&graph, &weights, &plan)?;

    fs::create_dir_all(out_dir).with_context(|| format!("creating {}", out_dir.display()))?;
    let manifest = format!("{}{}", cfg.echo("apply"), pruned.to_manifest_string());
    write_file(&out_dir.join("manifest.toml"), manifest.as_bytes())?;
    write_file(&out_dir.join("weights.copw"), &write_container(&pruned_weights))?;

    let convention = plan.config.spatial_convention;
    let (p0, f0) = (total_params(&graph), total_flops(&graph, convention));
    let (p1, f1) = (total_params(&pruned), total_flops(&pruned, convention));
    println!("params {p0} -> {p1} (-{}), flops {f0} -> {f1} (-{})", p0 - p1, f0 - f1);
    println!("wrote {}", out_dir.display());
    Ok(())
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).with_context(|| format!("writing {}", path.display()))
}

fn cmd_report(cfg: &RunConfig) -> Result<()> {
    let graph = load_graph(cfg)?;
    let plan = load_plan(cfg)?;
    let pruned = prune_graph(&graph, &plan)?;
    let convention = plan.config.spatial_convention;
    let shape = |l: &LayerSpec| format!("{}x{}", l.in_channels, l.out_channels);

    let mut out = cfg.echo("report");
    let _ = writeln!(
        out,
        "requested ratio {:.4}, achieved {:.4} ({} of {} units, {} skipped)",
        plan.config.ratio, plan.achieved_ratio, plan.removed_units, plan.total_units, plan.skipped_units
    );
    let _ = writeln!(
        out,
        "{:<16} {:>12} {:>12} {:>12} {:>12} {:>14} {:>14}",
        "layer", "shape", "pruned", "params", "pruned", "flops", "pruned"
    );
    for (before, after) in graph.layers().iter().zip(pruned.layers()) {
        let _ = writeln!(
            out,
            "{:<16} {:>12} {:>12} {:>12} {:>12} {:>14} {:>14}",
            before.name,
            shape(before),
            shape(after),
            layer_params(before),
            layer_params(after),
            layer_flops(before, convention),
            layer_flops(after, convention)
        );
    }
    let p = plan.predicted;
    let _ = writeln!(
        out,
        "total params {} -> {} (Prr {:.2}%), flops {} -> {} (Frr {:.2}%)",
        plan.source_params,
        total_params(&pruned),
        100.0 * p.prr,
        plan.source_flops,
        total_flops(&pruned, convention),
        100.0 * p.frr
    );
    emit(cfg, &out)
}

fn cmd_synth(cfg: &RunConfig) -> Result<()> {
    let graph = load_graph(cfg)?;
    let out = cfg.require(&cfg.out, "out")?;
    let seed = cfg.seed.unwrap_or(0);
    let weights = synth::random_weights(&graph, seed);
    write_file(out, &write_container(&weights))?;
    println!("wrote {} tensors ({} parameters) to {}", weights.len(), weights.param_count(), out.display());
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    let name = cli.command.name();
    let file = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    let cfg = file.overlay(cli.command.flags()).with_defaults();
    match name {
        "inspect" => cmd_inspect(&cfg),
        "importance" => cmd_importance(&cfg),
        "plan" => cmd_plan(&cfg),
        "apply" => cmd_apply(&cfg),
        "report" => cmd_report(&cfg),
        "synth" => cmd_synth(&cfg),
        _ => Err(usage(format!("unknown command {name}"))),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.downcast_ref::<UsageError>().is_some() {
                ExitCode::from(1)
            } else {
                ExitCode::from(2)
            }
        }
    }
}
