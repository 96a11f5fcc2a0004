//! Command-line interface: `generate`, `train`, `eval`, `ablate`,
//! `heatmap`, `gradcheck`.
//!
//! Commands that train or evaluate read a JSON config file and accept
//! per-key flag overrides; precedence is flag > `MASRA_SEED` > file.
//! Usage errors exit 2, validation failures exit 1 naming the key.

use super::ablate::{ablate, preset_variants, VariantSpec};
use super::config::RunConfig;
use super::evaluate::{evaluate_split, read_predictions, score_records, write_predictions};
use super::gradcheck_suite::run_suite;
use super::heatmap::{emit_heatmap, HeatmapStage};
use super::train::{train, Checkpoint};
use crate::error::{Error, Result};
use crate::model::{EstaSource, LrcaSource};
use crate::synth::io::{generate_dataset, load_dataset, Split};
use crate::synth::ScenarioConfig;
use clap::{Args, Parser, Subcommand};
use std::path::PathBuf;

#[derive(Parser)]
#[command(name = "masra", version, about = "Desk-scale video temporal grounding")]
struct Cli {
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset directory.
    Generate(GenerateArgs),
    /// Train a model and write run artifacts.
    Train(TrainArgs),
    /// Evaluate a checkpoint, or score an existing prediction dump.
    Eval(EvalArgs),
    /// Train and evaluate a variant sweep.
    Ablate(AblateArgs),
    /// Export similarity-matrix CSV grids for one scenario.
    Heatmap(HeatmapArgs),
    /// Run finite-difference checks over every loss; nonzero exit on failure.
    Gradcheck(GradcheckArgs),
}

#[derive(Args)]
struct GenerateArgs {
    /// Output dataset directory.
    #[arg(long)]
    out: PathBuf,
    /// Number of scenarios.
    #[arg(long, default_value_t = 600)]
    n: usize,
    #[arg(long, default_value_t = 32)]
    t: usize,
    #[arg(long, default_value_t = 8)]
    l: usize,
    #[arg(long, default_value_t = 64)]
    c_v: usize,
    #[arg(long, default_value_t = 64)]
    c_q: usize,
    #[arg(long, default_value_t = 32)]
    d: usize,
    #[arg(long, default_value_t = 3)]
    m_min: usize,
    #[arg(long, default_value_t = 5)]
    m_max: usize,
    #[arg(long, default_value_t = 0.1)]
    noise_sigma: f64,
    #[arg(long, default_value_t = 1)]
    base_seed: u64,
    /// Fraction of records assigned to the validation split.
    #[arg(long, default_value_t = 0.2)]
    val_frac: f64,
}

/// Flag overrides mirroring the RunConfig keys.
#[derive(Args, Clone)]
struct ConfigOverrides {
    #[arg(long)]
    dataset: Option<PathBuf>,
    #[arg(long)]
    out_dir: Option<PathBuf>,
    #[arg(long)]
    c: Option<usize>,
    #[arg(long)]
    heads: Option<usize>,
    #[arg(long)]
    ctx_layers: Option<usize>,
    #[arg(long)]
    post_fuse_layers: Option<usize>,
    #[arg(long)]
    dec_layers: Option<usize>,
    #[arg(long)]
    n_queries: Option<usize>,
    #[arg(long)]
    codebook_size: Option<usize>,
    #[arg(long)]
    aux_top_k: Option<usize>,
    #[arg(long)]
    lambda_sal: Option<f64>,
    #[arg(long)]
    lambda_sem: Option<f64>,
    #[arg(long)]
    lambda_rel: Option<f64>,
    #[arg(long)]
    lambda_cb: Option<f64>,
    #[arg(long)]
    beta: Option<f64>,
    #[arg(long)]
    w_cls: Option<f64>,
    #[arg(long)]
    w_l1: Option<f64>,
    #[arg(long)]
    w_giou: Option<f64>,
    #[arg(long)]
    margin: Option<f64>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    weight_decay: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    use_esta: Option<bool>,
    #[arg(long)]
    use_lrca: Option<bool>,
    #[arg(long)]
    use_dai: Option<bool>,
    #[arg(long)]
    use_sge: Option<bool>,
    #[arg(long)]
    use_sora: Option<bool>,
    #[arg(long)]
    codebook_attn_grads: Option<bool>,
    /// mllm_prior | gt_only | visual
    #[arg(long)]
    esta_source: Option<String>,
    /// text_prior | visual_self
    #[arg(long)]
    lrca_source: Option<String>,
}

impl ConfigOverrides {
    fn resolve(&self, config_file: Option<&PathBuf>) -> Result<RunConfig> {
        let mut cfg = match config_file {
            Some(path) => RunConfig::from_file(path)?,
            None => {
                let dataset = self.dataset.clone().ok_or_else(|| Error::Config {
                    key: "dataset".into(),
                    reason: "required (give --config or --dataset)".into(),
                })?;
                RunConfig::with_dataset(dataset)
            }
        };
        cfg.apply_env()?;
        macro_rules! over {
            ($($field:ident),*) => {
                $(if let Some(v) = &self.$field { cfg.$field = v.clone(); })*
            };
        }
        over!(
            dataset, c, heads, ctx_layers, post_fuse_layers, dec_layers, n_queries,
            codebook_size, aux_top_k, lambda_sal, lambda_sem, lambda_rel, lambda_cb,
            beta, w_cls, w_l1, w_giou, margin, lr, weight_decay, batch_size, epochs,
            seed, use_esta, use_lrca, use_dai, use_sge, use_sora, codebook_attn_grads
        );
        if let Some(dir) = &self.out_dir {
            cfg.out_dir = Some(dir.clone());
        }
        if let Some(s) = &self.esta_source {
            cfg.esta_source = match s.as_str() {
                "mllm_prior" => EstaSource::MllmPrior,
                "gt_only" => EstaSource::GtOnly,
                "visual" => EstaSource::Visual,
                other => {
                    return Err(Error::Config {
                        key: "esta_source".into(),
                        reason: format!("unknown value `{other}`"),
                    })
                }
            };
        }
        if let Some(s) = &self.lrca_source {
            cfg.lrca_source = match s.as_str() {
                "text_prior" => LrcaSource::TextPrior,
                "visual_self" => LrcaSource::VisualSelf,
                other => {
                    return Err(Error::Config {
                        key: "lrca_source".into(),
                        reason: format!("unknown value `{other}`"),
                    })
                }
            };
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Args)]
struct TrainArgs {
    /// JSON config file; flags override individual keys.
    #[arg(long)]
    config: Option<PathBuf>,
    #[command(flatten)]
    overrides: ConfigOverrides,
}

#[derive(Args)]
struct EvalArgs {
    /// Checkpoint to evaluate (omit when scoring a prediction dump).
    #[arg(long, required_unless_present = "preds")]
    checkpoint: Option<PathBuf>,
    /// Dataset directory; defaults to the checkpoint's dataset.
    #[arg(long)]
    dataset: Option<PathBuf>,
    /// Split to evaluate: train | val | all.
    #[arg(long, default_value = "val")]
    split: String,
    /// Score this JSON-lines prediction dump instead of running inference.
    #[arg(long)]
    preds: Option<PathBuf>,
    /// Write the prediction dump here.
    #[arg(long)]
    preds_out: Option<PathBuf>,
    /// Write the evaluation JSON here.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct AblateArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[command(flatten)]
    overrides: ConfigOverrides,
    /// Variant preset: alignment-grid | backbone | prior-source.
    #[arg(long, conflicts_with = "variants_json")]
    preset: Option<String>,
    /// JSON file with a list of {label, patch} variant overrides.
    #[arg(long)]
    variants_json: Option<PathBuf>,
    /// Comma-separated seed list, e.g. 1,2,3.
    #[arg(long, default_value = "1,2,3")]
    seeds: String,
    /// Where to write ablation.md / ablation.json.
    #[arg(long)]
    report_dir: Option<PathBuf>,
}

#[derive(Args)]
struct HeatmapArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Dataset directory; defaults to the checkpoint's dataset.
    #[arg(long)]
    dataset: Option<PathBuf>,
    #[arg(long)]
    scenario_id: u64,
    /// no_lrca | pre_sora | post_sora
    #[arg(long)]
    stage: String,
    #[arg(long, default_value = "heatmaps")]
    out_dir: PathBuf,
}

#[derive(Args)]
struct GradcheckArgs {
    /// Emit the full per-parameter reports as JSON.
    #[arg(long)]
    json: bool,
}

fn parse_split(s: &str) -> Result<Option<Split>> {
    match s {
        "train" => Ok(Some(Split::Train)),
        "val" => Ok(Some(Split::Val)),
        "all" => Ok(None),
        other => Err(Error::Config {
            key: "split".into(),
            reason: format!("unknown split `{other}` (train | val | all)"),
        }),
    }
}

fn cmd_generate(args: GenerateArgs) -> Result<()> {
    let config = ScenarioConfig {
        t: args.t,
        l: args.l,
        c_v: args.c_v,
        c_q: args.c_q,
        d: args.d,
        m_range: (args.m_min, args.m_max),
        noise_sigma: args.noise_sigma,
        seed: 0,
    };
    let ds = generate_dataset(&config, args.n, args.base_seed, args.val_frac, &args.out)?;
    println!(
        "wrote {} records ({} train / {} val) to {}",
        ds.len(),
        ds.indices(Some(Split::Train)).len(),
        ds.indices(Some(Split::Val)).len(),
        args.out.display()
    );
    Ok(())
}

fn cmd_train(args: TrainArgs) -> Result<()> {
    let cfg = args.overrides.resolve(args.config.as_ref())?;
    let result = train(&cfg)?;
    println!(
        "trained {} epochs; initial mean loss {:.4}, final {:.4}",
        cfg.epochs, result.initial_train_loss, result.final_train_loss
    );
    if let Some(best) = result.checkpoint.best_val() {
        print!("{}", best.table());
    }
    if let Some(dir) = &cfg.out_dir {
        println!("artifacts in {}", dir.display());
    }
    Ok(())
}

fn cmd_eval(args: EvalArgs) -> Result<()> {
    let split = parse_split(&args.split)?;
    let result = if let Some(preds_path) = &args.preds {
        let dataset_dir = args.dataset.as_ref().ok_or_else(|| Error::Config {
            key: "dataset".into(),
            reason: "required when scoring a prediction dump".into(),
        })?;
        let dataset = load_dataset(dataset_dir)?;
        let scenarios: Vec<_> = dataset.iter(split).collect::<Result<_>>()?;
        let records = read_predictions(preds_path)?;
        score_records(&scenarios, &records)?
    } else {
        let ckpt = Checkpoint::load(args.checkpoint.as_ref().expect("clap enforces"))?;
        let dataset_dir = args
            .dataset
            .clone()
            .unwrap_or_else(|| ckpt.run_config.dataset.clone());
        let dataset = load_dataset(&dataset_dir)?;
        let (model, store) = ckpt.build_model()?;
        let (result, records) = evaluate_split(&model, &store, &dataset, split)?;
        if let Some(path) = &args.preds_out {
            write_predictions(path, &records)?;
        }
        result
    };
    print!("{}", result.table());
    if let Some(path) = &args.out {
        std::fs::write(path, serde_json::to_string_pretty(&result).unwrap())
            .map_err(|e| Error::io(path, e))?;
    }
    Ok(())
}

fn cmd_ablate(args: AblateArgs) -> Result<()> {
    let cfg = args.overrides.resolve(args.config.as_ref())?;
    let variants: Vec<VariantSpec> = if let Some(path) = &args.variants_json {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Config {
            key: path.display().to_string(),
            reason: e.to_string(),
        })?
    } else {
        let preset = args.preset.as_deref().unwrap_or("alignment-grid");
        preset_variants(preset)?
    };
    let seeds: Vec<u64> = args
        .seeds
        .split(',')
        .map(|s| {
            s.trim().parse::<u64>().map_err(|_| Error::Config {
                key: "seeds".into(),
                reason: format!("not an unsigned integer: {s}"),
            })
        })
        .collect::<Result<_>>()?;
    let report = ablate(&cfg, &variants, &seeds)?;
    print!("{}", report.to_markdown());
    if let Some(dir) = &args.report_dir {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let md = dir.join("ablation.md");
        std::fs::write(&md, report.to_markdown()).map_err(|e| Error::io(&md, e))?;
        let json = dir.join("ablation.json");
        std::fs::write(&json, serde_json::to_string_pretty(&report).unwrap())
            .map_err(|e| Error::io(&json, e))?;
    }
    Ok(())
}

fn cmd_heatmap(args: HeatmapArgs) -> Result<()> {
    let stage: HeatmapStage = args.stage.parse()?;
    let ckpt = Checkpoint::load(&args.checkpoint)?;
    let dataset_dir = args
        .dataset
        .clone()
        .unwrap_or_else(|| ckpt.run_config.dataset.clone());
    let dataset = load_dataset(&dataset_dir)?;
    let (grid, mask) = emit_heatmap(&ckpt, &dataset, args.scenario_id, stage, &args.out_dir)?;
    println!("wrote {} and {}", grid.display(), mask.display());
    Ok(())
}

fn cmd_gradcheck(args: GradcheckArgs) -> Result<i32> {
    let reports = run_suite()?;
    let mut all_pass = true;
    if args.json {
        let mut obj = serde_json::Map::new();
        for (kind, report) in &reports {
            obj.insert(kind.name().into(), report.to_json());
            all_pass &= report.pass;
        }
        println!("{}", serde_json::Value::Object(obj));
    } else {
        for (kind, report) in &reports {
            let (worst_name, worst) = report.worst().unwrap_or(("-", 0.0));
            println!(
                "{:<10} {}  max_rel_err {:.3e} ({worst_name})",
                kind.name(),
                if report.pass { "pass" } else { "FAIL" },
                worst
            );
            all_pass &= report.pass;
        }
    }
    Ok(if all_pass { 0 } else { 1 })
}

/// Entry point used by the binary; returns the process exit code.
pub fn run<I, S>(argv: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            // clap exits 2 on usage errors, 0 on --help/--version.
            let code = e.exit_code();
            let _ = e.print();
            return code;
        }
    };
    let outcome = match cli.cmd {
        Command::Generate(a) => cmd_generate(a).map(|()| 0),
        Command::Train(a) => cmd_train(a).map(|()| 0),
        Command::Eval(a) => cmd_eval(a).map(|()| 0),
        Command::Ablate(a) => cmd_ablate(a).map(|()| 0),
        Command::Heatmap(a) => cmd_heatmap(a).map(|()| 0),
        Command::Gradcheck(a) => cmd_gradcheck(a),
    };
    match outcome {
        Ok(code) => code,
        Err(err) => {
            eprintln!("error: {err}");
            1
        }
    }
}
