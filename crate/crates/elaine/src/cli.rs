//! Command-line front end: flag parsing, config-file merging, and the
//! subcommand drivers. Settings resolve as flag over file over default.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{ArgAction, Args, Parser, Subcommand, ValueEnum};
use serde::Deserialize;

use crate::elaine::{save_embedding, train_model, EdgeAttrMode, ElaineConfig};
use crate::error::{ElaineError, Result};
use crate::eval::{
    linkpred_rows, nodeclass_rows, run_ablation, run_link_prediction, run_node_classification,
    run_sweep, write_csv, CsvRow, EvalParams, SweepAxis,
};
use crate::graph::{generate_sbm, EdgeAttributes, Graph, NodeLabels, SbmConfig};

/// Optional TOML settings file; both tables may be partial.
#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RunConfig {
    #[serde(default)]
    model: ElaineConfig,
    #[serde(default)]
    eval: EvalSection,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct EvalSection {
    holdout_fraction: f64,
    max_eval_nodes: usize,
    repeats: usize,
    train_ratios: Vec<f64>,
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection {
            holdout_fraction: 0.2,
            max_eval_nodes: 1024,
            repeats: 5,
            train_ratios: (2..=9).map(|t| t as f64 / 10.0).collect(),
        }
    }
}

#[derive(Parser, Debug)]
#[command(
    name = "elaine",
    version,
    about = "Attributed graph embeddings from a coupled variational autoencoder"
)]
struct Cli {
    /// Increase log detail on stderr (-v info, -vv debug)
    #[arg(short, long, action = ArgAction::Count, global = true)]
    verbose: u8,
    /// TOML settings file with optional [model] and [eval] tables
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Seed for every random choice (walks, init, splits)
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads; defaults to all cores
    #[arg(long, global = true)]
    jobs: Option<usize>,
    /// Directory for reusable walk matrices
    #[arg(long, global = true)]
    cache_dir: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct GraphArgs {
    /// Edge list: one `u v [weight]` per line, `#` comments
    graph: PathBuf,
    /// Per-edge attribute table: one `u v a1 a2 ...` per line
    #[arg(long)]
    edge_attrs: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum EdgeAttrModeArg {
    Coupled,
    NodeAugmented,
    Off,
}

impl From<EdgeAttrModeArg> for EdgeAttrMode {
    fn from(m: EdgeAttrModeArg) -> EdgeAttrMode {
        match m {
            EdgeAttrModeArg::Coupled => EdgeAttrMode::Coupled,
            EdgeAttrModeArg::NodeAugmented => EdgeAttrMode::NodeAugmented,
            EdgeAttrModeArg::Off => EdgeAttrMode::Off,
        }
    }
}

#[derive(Args, Debug)]
struct ModelFlags {
    /// Embedding width [default: 128]
    #[arg(long)]
    dim: Option<usize>,
    /// Comma-separated encoder hidden widths [default: 500,300]
    #[arg(long)]
    encoder_hidden: Option<String>,
    /// Comma-separated edge-decoder hidden widths [default: none]
    #[arg(long)]
    edge_decoder_hidden: Option<String>,
    /// Edge-attribute loss weight [default: 1]
    #[arg(long)]
    alpha1: Option<f64>,
    /// KL loss weight [default: 0.01]
    #[arg(long)]
    alpha_v: Option<f64>,
    /// L1 weight penalty [default: 1e-6]
    #[arg(long)]
    alpha_l: Option<f64>,
    /// L2 weight penalty [default: 1e-5]
    #[arg(long)]
    alpha_r: Option<f64>,
    /// Reconstruction penalty on nonzero feature entries [default: 5]
    #[arg(long)]
    beta: Option<f64>,
    /// Random walks started per node [default: 10]
    #[arg(long)]
    walks_per_node: Option<usize>,
    /// Steps per walk [default: 5]
    #[arg(long)]
    walk_length: Option<usize>,
    /// Sample latent codes and apply the KL term [default: true]
    #[arg(long)]
    use_vae: Option<bool>,
    /// Walk-based proximity rows instead of adjacency [default: true]
    #[arg(long)]
    use_higher_order: Option<bool>,
    /// Append the social-role block [default: true]
    #[arg(long)]
    use_roles: Option<bool>,
    /// How edge attributes enter the model [default: coupled]
    #[arg(long, value_enum)]
    edge_attr_mode: Option<EdgeAttrModeArg>,
    /// Training epochs [default: 200]
    #[arg(long)]
    epochs: Option<usize>,
    /// Edges per minibatch [default: 64]
    #[arg(long)]
    batch_size: Option<usize>,
    /// Adam step size [default: 0.001]
    #[arg(long)]
    learning_rate: Option<f64>,
}

impl ModelFlags {
    fn apply(&self, cfg: &mut ElaineConfig) -> Result<()> {
        if let Some(v) = self.dim {
            cfg.dim = v;
        }
        if let Some(s) = &self.encoder_hidden {
            cfg.encoder_hidden = parse_usize_list(s)?;
        }
        if let Some(s) = &self.edge_decoder_hidden {
            cfg.edge_decoder_hidden = parse_usize_list(s)?;
        }
        if let Some(v) = self.alpha1 {
            cfg.alpha1 = v;
        }
        if let Some(v) = self.alpha_v {
            cfg.alpha_v = v;
        }
        if let Some(v) = self.alpha_l {
            cfg.alpha_l = v;
        }
        if let Some(v) = self.alpha_r {
            cfg.alpha_r = v;
        }
        if let Some(v) = self.beta {
            cfg.beta = v;
        }
        if let Some(v) = self.walks_per_node {
            cfg.walks_per_node = v;
        }
        if let Some(v) = self.walk_length {
            cfg.walk_length = v;
        }
        if let Some(v) = self.use_vae {
            cfg.use_vae = v;
        }
        if let Some(v) = self.use_higher_order {
            cfg.use_higher_order = v;
        }
        if let Some(v) = self.use_roles {
            cfg.use_roles = v;
        }
        if let Some(m) = self.edge_attr_mode {
            cfg.edge_attr_mode = m.into();
        }
        if let Some(v) = self.epochs {
            cfg.epochs = v;
        }
        if let Some(v) = self.batch_size {
            cfg.batch_size = v;
        }
        if let Some(v) = self.learning_rate {
            cfg.learning_rate = v;
        }
        Ok(())
    }
}

#[derive(Args, Debug)]
struct EvalFlags {
    /// Fraction of edges held out per repeat [default: 0.2]
    #[arg(long)]
    holdout: Option<f64>,
    /// Independent split-and-train repeats [default: 5]
    #[arg(long)]
    repeats: Option<usize>,
    /// Cap on evaluation nodes per split [default: 1024]
    #[arg(long)]
    max_eval_nodes: Option<usize>,
}

impl EvalFlags {
    fn apply(&self, p: &mut EvalParams) {
        if let Some(v) = self.holdout {
            p.holdout_fraction = v;
        }
        if let Some(v) = self.repeats {
            p.repeats = v;
        }
        if let Some(v) = self.max_eval_nodes {
            p.max_eval_nodes = v;
        }
    }
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum AxisArg {
    Dim,
    Alpha1,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train the model and write the node embedding
    Embed {
        #[command(flatten)]
        graph: GraphArgs,
        #[command(flatten)]
        model: ModelFlags,
        /// Embedding output file
        #[arg(long, short)]
        out: PathBuf,
    },
    /// Link prediction over held-out edges
    Linkpred {
        #[command(flatten)]
        graph: GraphArgs,
        #[command(flatten)]
        model: ModelFlags,
        #[command(flatten)]
        eval: EvalFlags,
        /// Directory for the CSV report
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Node classification from the trained embedding
    Nodeclass {
        #[command(flatten)]
        graph: GraphArgs,
        #[command(flatten)]
        model: ModelFlags,
        /// Node label table: one `u l1,l2,...` per line
        #[arg(long)]
        labels: PathBuf,
        /// Comma-separated training ratios [default: 0.2..0.9]
        #[arg(long)]
        train_ratios: Option<String>,
        /// Split redraws per ratio [default: 5]
        #[arg(long)]
        repeats: Option<usize>,
        /// Directory for the CSV report
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the ablation ladder under shared splits
    Ablate {
        #[command(flatten)]
        graph: GraphArgs,
        #[command(flatten)]
        model: ModelFlags,
        #[command(flatten)]
        eval: EvalFlags,
        /// Directory for the CSV report
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Sweep one hyperparameter under shared splits
    Sweep {
        #[command(flatten)]
        graph: GraphArgs,
        #[command(flatten)]
        model: ModelFlags,
        #[command(flatten)]
        eval: EvalFlags,
        /// Which knob to sweep
        #[arg(long, value_enum)]
        axis: AxisArg,
        /// Comma-separated values for the swept knob
        #[arg(long)]
        values: String,
        /// Directory for the CSV report
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Generate a planted-partition graph with topical edge attributes
    GenSynthetic {
        /// Number of planted communities
        #[arg(long, default_value_t = 4)]
        blocks: usize,
        /// Nodes per community
        #[arg(long, default_value_t = 50)]
        nodes_per_block: usize,
        /// Intra-community edge probability
        #[arg(long, default_value_t = 0.15)]
        p_in: f64,
        /// Inter-community edge probability
        #[arg(long, default_value_t = 0.02)]
        p_out: f64,
        /// Width of the per-edge topic vectors
        #[arg(long, default_value_t = 8)]
        edge_topics: usize,
        /// Blend toward uniform topic vectors, 0 (clean) to 1 (uniform)
        #[arg(long, default_value_t = 0.2)]
        attr_noise: f64,
        /// Output directory for graph.tsv, edge_attrs.tsv, labels.tsv
        #[arg(long)]
        out_dir: PathBuf,
    },
}

fn parse_usize_list(s: &str) -> Result<Vec<usize>> {
    let s = s.trim();
    if s.is_empty() {
        return Ok(vec![]);
    }
    s.split(',')
        .map(|t| {
            t.trim()
                .parse()
                .map_err(|e| ElaineError::Config(format!("bad list entry {t:?}: {e}")))
        })
        .collect()
}

fn parse_f64_list(s: &str) -> Result<Vec<f64>> {
    let s = s.trim();
    if s.is_empty() {
        return Ok(vec![]);
    }
    s.split(',')
        .map(|t| {
            t.trim()
                .parse()
                .map_err(|e| ElaineError::Config(format!("bad list entry {t:?}: {e}")))
        })
        .collect()
}

fn load_run_config(path: Option<&Path>) -> Result<RunConfig> {
    let Some(path) = path else {
        return Ok(RunConfig::default());
    };
    let text = std::fs::read_to_string(path).map_err(|e| ElaineError::io(path, e))?;
    toml::from_str(&text).map_err(|e| ElaineError::Config(format!("{}: {e}", path.display())))
}

fn load_inputs(args: &GraphArgs) -> Result<(Graph, Option<EdgeAttributes>)> {
    let g = Graph::load(&args.graph)?;
    let attrs = match &args.edge_attrs {
        Some(p) => Some(EdgeAttributes::load(p, &g)?),
        None => None,
    };
    Ok((g, attrs))
}

fn print_table(rows: &[CsvRow]) {
    println!(
        "{:<14} {:<10} {:>12} {:>12} {:>8}",
        "label", "metric", "mean", "std", "repeats"
    );
    for r in rows {
        println!(
            "{:<14} {:<10} {:>12.6} {:>12.6} {:>8}",
            r.label, r.metric, r.mean, r.std, r.repeats
        );
    }
}

fn write_report(out: Option<&Path>, file: &str, rows: &[CsvRow]) -> Result<()> {
    print_table(rows);
    if let Some(dir) = out {
        std::fs::create_dir_all(dir).map_err(|e| ElaineError::io(dir, e))?;
        let path = dir.join(file);
        write_csv(&path, rows)?;
        println!("wrote {}", path.display());
    }
    Ok(())
}

/// Parse arguments, run the selected subcommand, and map the outcome onto
/// exit codes: 0 on success, 1 on runtime failure (usage errors exit 2 via
/// the parser).
pub fn run() -> ExitCode {
    let cli = Cli::parse();

    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .target(env_logger::Target::Stderr)
        .init();

    if let Some(jobs) = cli.jobs {
        if let Err(e) = rayon::ThreadPoolBuilder::new()
            .num_threads(jobs)
            .build_global()
        {
            log::warn!("could not size the worker pool: {e}");
        }
    }

    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}

fn dispatch(cli: Cli) -> Result<()> {
    let run_cfg = load_run_config(cli.config.as_deref())?;
    let cache_dir = cli.cache_dir.as_deref();

    let resolve_model = |flags: &ModelFlags| -> Result<ElaineConfig> {
        let mut cfg = run_cfg.model.clone();
        flags.apply(&mut cfg)?;
        if let Some(s) = cli.seed {
            cfg.seed = s;
        }
        cfg.validate()?;
        Ok(cfg)
    };
    let resolve_eval = |flags: &EvalFlags, seed: u64| -> EvalParams {
        let section = &run_cfg.eval;
        let mut p = EvalParams {
            holdout_fraction: section.holdout_fraction,
            max_eval_nodes: section.max_eval_nodes,
            repeats: section.repeats,
            seed,
        };
        flags.apply(&mut p);
        p
    };

    match &cli.command {
        Command::Embed { graph, model, out } => {
            let cfg = resolve_model(model)?;
            let (g, attrs) = load_inputs(graph)?;
            let trained = train_model(&g, attrs.as_ref(), &cfg, cache_dir)?;
            let emb = trained.embed();
            save_embedding(out, &emb)?;
            println!(
                "wrote {} ({} nodes x {} dims)",
                out.display(),
                emb.num_nodes(),
                emb.dim()
            );
            if let Some(last) = trained.history.last() {
                println!("final training loss {:.6}", last.total);
            }
            Ok(())
        }
        Command::Linkpred {
            graph,
            model,
            eval,
            out,
        } => {
            let cfg = resolve_model(model)?;
            let params = resolve_eval(eval, cfg.seed);
            let (g, attrs) = load_inputs(graph)?;
            let report = run_link_prediction(&g, attrs.as_ref(), &cfg, &params, cache_dir)?;
            if report.failures > 0 {
                log::warn!(
                    "{} of {} repeats failed",
                    report.failures,
                    report.repeats_attempted
                );
            }
            write_report(
                out.as_deref(),
                "linkpred.csv",
                &linkpred_rows("model", &report),
            )
        }
        Command::Nodeclass {
            graph,
            model,
            labels,
            train_ratios,
            repeats,
            out,
        } => {
            let cfg = resolve_model(model)?;
            let (g, attrs) = load_inputs(graph)?;
            let labels = NodeLabels::load(labels, g.num_nodes())?;
            let ratios = match train_ratios {
                Some(s) => parse_f64_list(s)?,
                None => run_cfg.eval.train_ratios.clone(),
            };
            let repeats = repeats.unwrap_or(run_cfg.eval.repeats);
            let rows = run_node_classification(
                &g,
                attrs.as_ref(),
                &labels,
                &cfg,
                &ratios,
                repeats,
                cfg.seed,
                cache_dir,
            )?;
            write_report(out.as_deref(), "nodeclass.csv", &nodeclass_rows(&rows))
        }
        Command::Ablate {
            graph,
            model,
            eval,
            out,
        } => {
            let cfg = resolve_model(model)?;
            let params = resolve_eval(eval, cfg.seed);
            let (g, attrs) = load_inputs(graph)?;
            let ladder = run_ablation(&g, attrs.as_ref(), &cfg, &params, cache_dir)?;
            let mut rows = Vec::new();
            for (variant, report) in &ladder {
                rows.extend(linkpred_rows(variant.name(), report));
            }
            write_report(out.as_deref(), "ablation.csv", &rows)
        }
        Command::Sweep {
            graph,
            model,
            eval,
            axis,
            values,
            out,
        } => {
            let cfg = resolve_model(model)?;
            let params = resolve_eval(eval, cfg.seed);
            let (g, attrs) = load_inputs(graph)?;
            let axis = match axis {
                AxisArg::Dim => SweepAxis::Dim(parse_usize_list(values)?),
                AxisArg::Alpha1 => SweepAxis::Alpha1(parse_f64_list(values)?),
            };
            let sweep = run_sweep(&g, attrs.as_ref(), &cfg, &axis, &params, cache_dir)?;
            let mut rows = Vec::new();
            for (label, report) in &sweep {
                rows.extend(linkpred_rows(label, report));
            }
            write_report(out.as_deref(), "sweep.csv", &rows)
        }
        Command::GenSynthetic {
            blocks,
            nodes_per_block,
            p_in,
            p_out,
            edge_topics,
            attr_noise,
            out_dir,
        } => {
            let cfg = SbmConfig {
                blocks: *blocks,
                nodes_per_block: *nodes_per_block,
                p_in: *p_in,
                p_out: *p_out,
                edge_topics: *edge_topics,
                attr_noise: *attr_noise,
                seed: cli.seed.unwrap_or(0),
            };
            let (g, attrs, labels) = generate_sbm(&cfg)?;
            std::fs::create_dir_all(out_dir).map_err(|e| ElaineError::io(out_dir, e))?;
            g.save(out_dir.join("graph.tsv"))?;
            attrs.save(out_dir.join("edge_attrs.tsv"))?;
            labels.save(out_dir.join("labels.tsv"))?;
            println!(
                "wrote {} nodes, {} edges, {} labels to {}",
                g.num_nodes(),
                g.num_edges(),
                labels.num_labels(),
                out_dir.display()
            );
            Ok(())
        }
    }
}
