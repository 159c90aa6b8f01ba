use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, ensure, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::{json, Value};

use salient_si::codec::format_f64;
use salient_si::experiments::{
    power, robustness, tau_sweep, type1, write_csv, CampaignResult, ExperimentConfig, Method,
};
use salient_si::gnn::Architecture;
use salient_si::graph::{load_covariance, load_graph, CovarianceModel};
use salient_si::inference::{run_test, TestOptions, TestResult};
use salient_si::model_io::{load_model, random_model, save_model, ModelDims};
use salient_si::noise::{calibrate_noise, NoiseKind, CALIBRATION_NODES};
use salient_si::saliency::SaliencyMethod;
use salient_si::synthgen::{kronecker_cov, CovKind};

#[derive(Parser)]
#[command(name = "salient-si", version, about = "Selective p-values for salient subgraphs of GNN saliency maps")]
struct Cli {
    /// Worker threads for campaigns (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Print machine-readable JSON on stdout.
    #[arg(long, global = true)]
    json: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Test one graph with a saved model.
    Test(TestArgs),
    /// Type I error campaign.
    Type1(CampaignArgs),
    /// Power campaign over signal sizes.
    Power {
        #[command(flatten)]
        campaign: CampaignArgs,
        #[arg(long, value_delimiter = ',', default_values_t = [1.0, 1.5, 2.0, 2.5])]
        deltas: Vec<f64>,
    },
    /// Type I error under non-Gaussian noise.
    Robustness {
        #[command(flatten)]
        campaign: CampaignArgs,
        #[arg(long, value_delimiter = ',')]
        families: Vec<NoiseKind>,
        #[arg(long, value_delimiter = ',', default_values_t = [0.01, 0.05, 0.1, 0.15])]
        distances: Vec<f64>,
    },
    /// Type I error over a grid of thresholds; pairs with tau_l >= tau_u are dropped.
    TauSweep {
        #[command(flatten)]
        campaign: CampaignArgs,
        #[arg(long, value_delimiter = ',', default_values_t = [0.1, 0.3, 0.5, 0.7])]
        lower: Vec<f64>,
        #[arg(long, value_delimiter = ',', default_values_t = [0.2, 0.4, 0.6, 0.8])]
        upper: Vec<f64>,
    },
    /// Write a randomly initialized weight file.
    GenModel(GenModelArgs),
    /// Find noise shapes at given 1-Wasserstein distances from N(0, 1).
    CalibrateNoise {
        #[arg(long, value_delimiter = ',')]
        families: Vec<NoiseKind>,
        #[arg(long, value_delimiter = ',', default_values_t = [0.01, 0.05, 0.1, 0.15])]
        distances: Vec<f64>,
    },
}

#[derive(Args)]
struct TestArgs {
    /// Graph file with features.
    #[arg(long)]
    graph: PathBuf,
    /// Weight file.
    #[arg(long)]
    model: PathBuf,
    /// `identity`, `correlation`, or a covariance file.
    #[arg(long, default_value = "identity")]
    cov: String,
    #[arg(long, default_value = "cam")]
    method: SaliencyMethod,
    #[arg(long, default_value_t = 0.3)]
    tau_l: f64,
    #[arg(long, default_value_t = 0.7)]
    tau_u: f64,
    /// Threshold the raw map instead of the min-max normalized one.
    #[arg(long)]
    raw: bool,
}

#[derive(Args)]
struct CampaignArgs {
    /// JSON experiment config; flags below override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    trials: Option<usize>,
    #[arg(long)]
    nodes: Option<usize>,
    #[arg(long)]
    cov: Option<CovKind>,
    #[arg(long)]
    method: Option<SaliencyMethod>,
    /// One model for all trials.
    #[arg(long)]
    fixed_model: bool,
    /// Weight file to use as the fixed model.
    #[arg(long)]
    model: Option<PathBuf>,
    /// Per-trial records as `.csv` (long format) or `.json`.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum ArchArg {
    Gcn,
    Gin,
}

#[derive(Args)]
struct GenModelArgs {
    #[arg(long, value_enum, default_value = "gcn")]
    arch: ArchArg,
    /// Input feature dimension.
    #[arg(long, default_value_t = 5)]
    features: usize,
    /// GCN layer widths.
    #[arg(long, value_delimiter = ',', default_values_t = [10, 10, 10])]
    hidden: Vec<usize>,
    #[arg(long, default_value_t = 3)]
    gin_layers: usize,
    #[arg(long, value_delimiter = ',', default_values_t = [64, 64])]
    gin_mlp: Vec<usize>,
    #[arg(long, default_value_t = 2)]
    classes: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// GCN propagation over A + I.
    #[arg(long)]
    self_loops: bool,
    #[arg(long)]
    out: PathBuf,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    if let Some(k) = cli.threads {
        rayon::ThreadPoolBuilder::new().num_threads(k).build_global().context("thread pool")?;
    }
    match cli.command {
        Command::Test(args) => cmd_test(&args, cli.json),
        Command::Type1(c) => {
            let cfg = campaign_config(&c)?;
            finish(&type1(&cfg)?, &c, cli.json)
        }
        Command::Power { campaign, deltas } => {
            let cfg = campaign_config(&campaign)?;
            finish(&power(&cfg, &deltas)?, &campaign, cli.json)
        }
        Command::Robustness { campaign, families, distances } => {
            let cfg = campaign_config(&campaign)?;
            let kinds = if families.is_empty() { NoiseKind::ALL.to_vec() } else { families };
            finish(&robustness(&cfg, &kinds, &distances)?, &campaign, cli.json)
        }
        Command::TauSweep { campaign, lower, upper } => {
            let cfg = campaign_config(&campaign)?;
            finish(&tau_sweep(&cfg, &lower, &upper)?, &campaign, cli.json)
        }
        Command::GenModel(args) => cmd_gen_model(&args),
        Command::CalibrateNoise { families, distances } => {
            let kinds = if families.is_empty() { NoiseKind::ALL.to_vec() } else { families };
            cmd_calibrate(&kinds, &distances, cli.json)
        }
    }
}

fn covariance(spec: &str, g: &salient_si::graph::Graph, d: usize) -> Result<CovarianceModel> {
    Ok(match spec {
        "identity" => CovarianceModel::identity(g.node_count(), d),
        "correlation" => kronecker_cov(CovKind::Correlation, g, d),
        path => load_covariance(path).with_context(|| format!("reading covariance {path}"))?,
    })
}

fn endpoint(v: f64) -> Value {
    if v.is_finite() {
        json!(v)
    } else {
        json!(format_f64(v))
    }
}

fn cmd_test(args: &TestArgs, as_json: bool) -> Result<()> {
    let (g, x) = load_graph(&args.graph).with_context(|| format!("reading graph {}", args.graph.display()))?;
    let model = load_model(&args.model).with_context(|| format!("reading model {}", args.model.display()))?;
    let cov = covariance(&args.cov, &g, x.dim())?;
    let opts = TestOptions {
        method: args.method,
        tau_l: args.tau_l,
        tau_u: args.tau_u,
        normalize: !args.raw,
        ..TestOptions::default()
    };
    let report = match run_test(&model, &g, &x, &cov, &opts)? {
        TestResult::Skipped(reason) => {
            if as_json {
                println!("{}", json!({ "status": format!("Skipped({reason})") }));
            } else {
                println!("status: Skipped({reason})");
            }
            return Ok(());
        }
        TestResult::Tested(r) => r,
    };
    ensure!((0.0..=1.0).contains(&report.p_selective), "selective p-value {} outside [0, 1]", report.p_selective);
    ensure!(report.truncation.contains(report.t_obs), "observed statistic {} outside the truncation set", report.t_obs);

    let intervals: Vec<(f64, f64)> = report.truncation.intervals().iter().map(|i| (i.lo, i.hi)).collect();
    if as_json {
        let out = json!({
            "status": "Tested",
            "class": report.class,
            "salient": report.selection.salient,
            "nonsalient": report.selection.nonsalient,
            "t_obs": report.t_obs,
            "truncation": intervals.iter().map(|&(lo, hi)| json!([endpoint(lo), endpoint(hi)])).collect::<Vec<_>>(),
            "p_selective": report.p_selective,
            "p_naive": report.p_naive,
            "p_bonferroni": report.p_bonferroni,
            "p_wo_pp": report.p_wo_pp,
            "search_steps": report.search_steps,
        });
        println!("{}", serde_json::to_string_pretty(&out)?);
        return Ok(());
    }
    let join = |s: &std::collections::BTreeSet<usize>| s.iter().map(usize::to_string).collect::<Vec<_>>().join(" ");
    println!("status: Tested");
    println!("class: {}", report.class);
    println!("salient ({}): {}", report.selection.salient.len(), join(&report.selection.salient));
    println!("nonsalient ({}): {}", report.selection.nonsalient.len(), join(&report.selection.nonsalient));
    println!("T_obs: {:.6}", report.t_obs);
    let z: Vec<String> = intervals.iter().map(|(lo, hi)| format!("[{lo:.6}, {hi:.6}]")).collect();
    println!("truncation: {}", z.join(" "));
    println!("p_selective: {:.6e}", report.p_selective);
    println!("p_naive: {:.6e}", report.p_naive);
    println!("p_bonferroni: {:.6e}", report.p_bonferroni);
    println!("p_wo_pp: {:.6e}", report.p_wo_pp);
    Ok(())
}

fn campaign_config(args: &CampaignArgs) -> Result<ExperimentConfig> {
    let mut cfg = match &args.config {
        Some(path) => {
            let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
            serde_json::from_str(&text).with_context(|| format!("parsing config {}", path.display()))?
        }
        None => ExperimentConfig::default(),
    };
    if let Some(v) = args.seed {
        cfg.seed = v;
    }
    if let Some(v) = args.trials {
        cfg.trials = v;
    }
    if let Some(v) = args.nodes {
        cfg.n = v;
    }
    if let Some(v) = args.cov {
        cfg.cov_kind = v;
    }
    if let Some(v) = args.method {
        cfg.saliency_method = v;
    }
    if args.fixed_model {
        cfg.fixed_model = true;
    }
    if let Some(p) = &args.model {
        cfg.model_file = Some(p.clone());
    }
    cfg.validate()?;
    Ok(cfg)
}

fn finish(result: &CampaignResult, args: &CampaignArgs, as_json: bool) -> Result<()> {
    if let Some(path) = &args.out {
        write_records(result, path)?;
    }
    if as_json {
        let summary: Vec<Value> = result
            .settings
            .iter()
            .map(|s| {
                json!({
                    "label": s.label,
                    "tested": s.tested,
                    "skipped": s.skipped,
                    "failed": s.failed,
                    "rates": s.rates,
                    "wall_clock_secs": s.wall_clock_secs,
                })
            })
            .collect();
        println!("{}", serde_json::to_string_pretty(&json!({ "kind": result.kind, "settings": summary }))?);
        return Ok(());
    }
    println!("{:<28} {:>6} {:>7} {:>6}  {}", "setting", "tested", "skipped", "failed", rate_header());
    for s in &result.settings {
        let rates: Vec<String> =
            Method::ALL.iter().map(|&m| format!("{:.3}±{:.3}", s.rate(m).rate, s.rate(m).std_error)).collect();
        println!("{:<28} {:>6} {:>7} {:>6}  {}", s.label, s.tested, s.skipped, s.failed, rates.join("  "));
    }
    println!("wall clock {:.1}s", result.wall_clock_secs);
    Ok(())
}

fn rate_header() -> String {
    Method::ALL.iter().map(|m| format!("{:<11}", m.name())).collect::<Vec<_>>().join(" ")
}

fn write_records(result: &CampaignResult, path: &Path) -> Result<()> {
    let file = File::create(path).with_context(|| format!("creating {}", path.display()))?;
    let mut out = BufWriter::new(file);
    match path.extension().and_then(|e| e.to_str()) {
        Some("csv") => write_csv(result, &mut out)?,
        Some("json") => serde_json::to_writer_pretty(&mut out, result)?,
        _ => bail!("output must end in .csv or .json: {}", path.display()),
    }
    Ok(())
}

fn cmd_gen_model(args: &GenModelArgs) -> Result<()> {
    let (arch, dims) = match args.arch {
        ArchArg::Gcn => (Architecture::Gcn, ModelDims::gcn(args.features, &args.hidden, args.classes)),
        ArchArg::Gin => (Architecture::Gin, ModelDims::gin(args.features, args.gin_layers, &args.gin_mlp, args.classes)),
    };
    let model = random_model(arch, &dims, args.seed)?.with_self_loops(args.self_loops);
    save_model(&model, &args.out).with_context(|| format!("writing {}", args.out.display()))?;
    Ok(())
}

fn cmd_calibrate(kinds: &[NoiseKind], distances: &[f64], as_json: bool) -> Result<()> {
    let mut rows = Vec::new();
    for &kind in kinds {
        for &target in distances {
            let family = calibrate_noise(kind, target)?;
            let achieved = family.wasserstein_to_normal(CALIBRATION_NODES);
            if !as_json {
                println!("{kind:<14} target {target:<5} shape {:<12.6} W1 {achieved:.6}", family.shape);
            }
            rows.push(json!({ "family": kind, "target": target, "shape": family.shape, "distance": achieved }));
        }
    }
    if as_json {
        println!("{}", serde_json::to_string_pretty(&rows)?);
    }
    Ok(())
}
