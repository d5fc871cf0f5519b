//! `calips` — calibrated inverse-propensity-scoring experiments.
//!
//! Subcommands mirror the pipeline stages: `pipeline` runs everything,
//! `synth` materializes a synthetic dataset in the Coat layout,
//! `propensity` / `calibrate` / `train` / `evaluate` run single stages on
//! saved artifacts, and `audit` runs the numerical theory checks.
//!
//! Configuration comes from defaults, then an optional flat `key = value`
//! file (`--config`), then command-line flags; later sources win.
//! Exit codes: 0 success, 1 configuration error, 2 stage failure.

use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use calips_core::data;
use calips_core::estimators::ErrorKind;
use calips_core::eval;
use calips_core::nn;
use calips_core::pipeline::{
    self, AuditConfig, CalibrationChoice, DatasetChoice, MethodChoice, PipelineConfig,
    PipelineError,
};
use calips_core::propensity;
use calips_core::recommender;
use calips_core::seed::derive_seed;

#[derive(Parser)]
#[command(name = "calips", version, about = "Calibrated inverse propensity scoring for MNAR recommendation")]
struct Cli {
    /// Flat `key = value` config file; flags override its entries.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the full two-stage pipeline and write report.json.
    Pipeline(Overrides),
    /// Generate a synthetic MNAR dataset in the Coat layout.
    Synth(Overrides),
    /// Train the propensity classifier and save score CSVs + checkpoint.
    Propensity(Overrides),
    /// Re-run calibration and ECE on a saved validation-score CSV.
    Calibrate(CalibrateArgs),
    /// Train a recommender arm from a saved propensity-score CSV.
    Train(TrainArgs),
    /// Evaluate a saved recommender checkpoint on the MAR test split.
    Evaluate(EvaluateArgs),
    /// Run the theory audit on a synthetic world with oracle propensities.
    Audit(AuditArgs),
}

/// Optional overrides applied on top of defaults and the config file.
#[derive(Args, Default, Clone)]
struct Overrides {
    /// Dataset: coat, yahoo, or synthetic.
    #[arg(long)]
    dataset: Option<String>,
    /// Directory holding the dataset files.
    #[arg(long)]
    data_dir: Option<PathBuf>,
    /// Output directory for reports and artifacts.
    #[arg(long)]
    out_dir: Option<PathBuf>,
    /// Relevance threshold on the 1-5 rating scale.
    #[arg(long)]
    threshold: Option<u8>,
    /// Fraction of MNAR entries assigned to the train split.
    #[arg(long)]
    train_fraction: Option<f64>,
    /// Master seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Number of seeded replicas (replica r uses seed + r).
    #[arg(long = "seeds")]
    replicas: Option<usize>,
    /// Lower clip for propensity scores used as weights.
    #[arg(long)]
    floor: Option<f64>,
    #[arg(long)]
    prop_epochs: Option<usize>,
    #[arg(long)]
    prop_lr: Option<f64>,
    #[arg(long)]
    prop_batch: Option<usize>,
    #[arg(long)]
    prop_weight_decay: Option<f64>,
    #[arg(long)]
    prop_embedding_dim: Option<usize>,
    /// Comma-separated MLP widths ending in 1, e.g. "32,16,1".
    #[arg(long)]
    prop_mlp: Option<String>,
    #[arg(long)]
    prop_dropout: Option<f64>,
    /// Calibration arm: none, platt, mc-dropout, or ensemble.
    #[arg(long)]
    calibration: Option<String>,
    /// Number of equal-width ECE bins.
    #[arg(long)]
    bins: Option<usize>,
    /// Dropout passes for mc-dropout averaging.
    #[arg(long)]
    mc_passes: Option<usize>,
    /// Member count for deep-ensemble averaging.
    #[arg(long)]
    ensemble_size: Option<usize>,
    /// Gradient-norm tolerance for the Platt fit.
    #[arg(long)]
    platt_tolerance: Option<f64>,
    /// Also report the count-weighted ECE variant.
    #[arg(long)]
    weighted_ece: bool,
    /// Recommender arm: base, ips, or drjl.
    #[arg(long)]
    method: Option<String>,
    /// Sampled negatives per positive in recommender training.
    #[arg(long)]
    neg_ratio: Option<f64>,
    #[arg(long)]
    rec_epochs: Option<usize>,
    #[arg(long)]
    rec_lr: Option<f64>,
    #[arg(long)]
    rec_batch: Option<usize>,
    #[arg(long)]
    rec_weight_decay: Option<f64>,
    #[arg(long)]
    rec_embedding_dim: Option<usize>,
    #[arg(long)]
    rec_mlp: Option<String>,
    #[arg(long)]
    rec_dropout: Option<f64>,
    /// Comma-separated ranking cutoffs, e.g. "2,4,6".
    #[arg(long)]
    ks: Option<String>,
    #[arg(long)]
    synth_users: Option<usize>,
    #[arg(long)]
    synth_items: Option<usize>,
    #[arg(long)]
    synth_bias: Option<f64>,
    #[arg(long)]
    synth_base_rate: Option<f64>,
    #[arg(long)]
    synth_mar_per_user: Option<usize>,
}

#[derive(Args)]
struct CalibrateArgs {
    /// val_scores.csv produced by `pipeline` or `propensity`.
    #[arg(long)]
    scores: PathBuf,
    /// none or platt (averaging methods need the trained model).
    #[arg(long, default_value = "platt")]
    calibration: String,
    #[arg(long, default_value_t = 100)]
    bins: usize,
    #[arg(long, default_value_t = 1e-6)]
    platt_tolerance: f64,
    /// Optional directory for reliability-curve CSVs.
    #[arg(long)]
    out_dir: Option<PathBuf>,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    overrides: Overrides,
    /// scores.csv produced by `pipeline` or `propensity`.
    #[arg(long)]
    scores: PathBuf,
    /// Weight with the calibrated column instead of the raw one.
    #[arg(long)]
    use_calibrated: bool,
}

#[derive(Args)]
struct EvaluateArgs {
    #[command(flatten)]
    overrides: Overrides,
    /// Recommender checkpoint to evaluate.
    #[arg(long)]
    model: PathBuf,
}

#[derive(Args)]
struct AuditArgs {
    #[arg(long)]
    out_dir: Option<PathBuf>,
    #[arg(long)]
    synth_users: Option<usize>,
    #[arg(long)]
    synth_items: Option<usize>,
    #[arg(long)]
    synth_bias: Option<f64>,
    #[arg(long)]
    synth_base_rate: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    /// Monte-Carlo indicator samples (at least 100).
    #[arg(long)]
    trials: Option<usize>,
    /// Confidence parameter of the generalization bound.
    #[arg(long)]
    eta: Option<f64>,
    /// Hypothesis-space size |H| in the bound.
    #[arg(long)]
    hypothesis_count: Option<usize>,
    #[arg(long)]
    bins: Option<usize>,
    #[arg(long)]
    floor: Option<f64>,
    /// mae or mse.
    #[arg(long)]
    error_kind: Option<String>,
}

fn config_err(msg: impl Into<String>) -> PipelineError {
    PipelineError::Config(msg.into())
}

fn parse_dataset(s: &str) -> Result<DatasetChoice, PipelineError> {
    match s {
        "coat" => Ok(DatasetChoice::Coat),
        "yahoo" => Ok(DatasetChoice::Yahoo),
        "synthetic" => Ok(DatasetChoice::Synthetic),
        other => Err(config_err(format!("unknown dataset {other:?}"))),
    }
}

fn parse_calibration(s: &str) -> Result<CalibrationChoice, PipelineError> {
    match s {
        "none" => Ok(CalibrationChoice::None),
        "platt" => Ok(CalibrationChoice::Platt),
        "mc-dropout" => Ok(CalibrationChoice::McDropout),
        "ensemble" => Ok(CalibrationChoice::Ensemble),
        other => Err(config_err(format!("unknown calibration {other:?}"))),
    }
}

fn parse_method(s: &str) -> Result<MethodChoice, PipelineError> {
    match s {
        "base" => Ok(MethodChoice::Base),
        "ips" => Ok(MethodChoice::Ips),
        "drjl" => Ok(MethodChoice::Drjl),
        other => Err(config_err(format!("unknown method {other:?}"))),
    }
}

fn parse_usize_list(s: &str, what: &str) -> Result<Vec<usize>, PipelineError> {
    s.split(',')
        .map(|t| t.trim().parse::<usize>())
        .collect::<Result<Vec<_>, _>>()
        .map_err(|_| config_err(format!("bad {what} list {s:?}")))
}

impl Overrides {
    fn apply(&self, config: &mut PipelineConfig) -> Result<(), PipelineError> {
        if let Some(v) = &self.dataset {
            config.dataset = parse_dataset(v)?;
        }
        if let Some(v) = &self.data_dir {
            config.data_dir = Some(v.clone());
        }
        if let Some(v) = &self.out_dir {
            config.out_dir = v.clone();
        }
        if let Some(v) = self.threshold {
            config.threshold = v;
        }
        if let Some(v) = self.train_fraction {
            config.train_fraction = v;
        }
        if let Some(v) = self.seed {
            config.seed = v;
        }
        if let Some(v) = self.replicas {
            config.replicas = v;
        }
        if let Some(v) = self.floor {
            config.floor = v;
        }
        if let Some(v) = self.prop_epochs {
            config.prop.epochs = v;
        }
        if let Some(v) = self.prop_lr {
            config.prop.learning_rate = v;
        }
        if let Some(v) = self.prop_batch {
            config.prop.batch_size = v;
        }
        if let Some(v) = self.prop_weight_decay {
            config.prop.weight_decay = v;
        }
        if let Some(v) = self.prop_embedding_dim {
            config.prop.embedding_dim = v;
        }
        if let Some(v) = &self.prop_mlp {
            config.prop.mlp_layers = parse_usize_list(v, "prop_mlp")?;
        }
        if let Some(v) = self.prop_dropout {
            config.prop.dropout_rate = v;
        }
        if let Some(v) = &self.calibration {
            config.calibration = parse_calibration(v)?;
        }
        if let Some(v) = self.bins {
            config.bins = v;
        }
        if let Some(v) = self.mc_passes {
            config.mc_passes = v;
        }
        if let Some(v) = self.ensemble_size {
            config.ensemble_size = v;
        }
        if let Some(v) = self.platt_tolerance {
            config.platt_tolerance = v;
        }
        if self.weighted_ece {
            config.weighted_ece = true;
        }
        if let Some(v) = &self.method {
            config.method = parse_method(v)?;
        }
        if let Some(v) = self.neg_ratio {
            config.neg_ratio = v;
        }
        if let Some(v) = self.rec_epochs {
            config.rec.epochs = v;
        }
        if let Some(v) = self.rec_lr {
            config.rec.learning_rate = v;
        }
        if let Some(v) = self.rec_batch {
            config.rec.batch_size = v;
        }
        if let Some(v) = self.rec_weight_decay {
            config.rec.weight_decay = v;
        }
        if let Some(v) = self.rec_embedding_dim {
            config.rec.embedding_dim = v;
        }
        if let Some(v) = &self.rec_mlp {
            config.rec.mlp_layers = parse_usize_list(v, "rec_mlp")?;
        }
        if let Some(v) = self.rec_dropout {
            config.rec.dropout_rate = v;
        }
        if let Some(v) = &self.ks {
            config.ks = parse_usize_list(v, "ks")?;
        }
        if let Some(v) = self.synth_users {
            config.synth.n_users = v;
        }
        if let Some(v) = self.synth_items {
            config.synth.n_items = v;
        }
        if let Some(v) = self.synth_bias {
            config.synth.bias_strength = v;
        }
        if let Some(v) = self.synth_base_rate {
            config.synth.base_rate = v;
        }
        if let Some(v) = self.synth_mar_per_user {
            config.synth.mar_items_per_user = v;
        }
        Ok(())
    }
}

/// Parses a flat `key = value` file into Overrides; `#` starts a comment.
fn overrides_from_file(path: &Path) -> Result<Overrides, PipelineError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| config_err(format!("cannot read config {}: {e}", path.display())))?;
    let mut map = HashMap::new();
    for (idx, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| config_err(format!("{}:{}: expected key = value", path.display(), idx + 1)))?;
        map.insert(key.trim().to_string(), value.trim().to_string());
    }

    let mut o = Overrides::default();
    let parse = |v: &str, key: &str| -> Result<u64, PipelineError> {
        v.parse().map_err(|_| config_err(format!("bad integer for {key}: {v:?}")))
    };
    let parse_f = |v: &str, key: &str| -> Result<f64, PipelineError> {
        v.parse().map_err(|_| config_err(format!("bad number for {key}: {v:?}")))
    };
    for (key, value) in &map {
        match key.as_str() {
            "dataset" => o.dataset = Some(value.clone()),
            "data_dir" => o.data_dir = Some(PathBuf::from(value)),
            "out_dir" => o.out_dir = Some(PathBuf::from(value)),
            "threshold" => o.threshold = Some(parse(value, key)? as u8),
            "train_fraction" => o.train_fraction = Some(parse_f(value, key)?),
            "seed" => o.seed = Some(parse(value, key)?),
            "replicas" | "seeds" => o.replicas = Some(parse(value, key)? as usize),
            "floor" => o.floor = Some(parse_f(value, key)?),
            "prop_epochs" => o.prop_epochs = Some(parse(value, key)? as usize),
            "prop_lr" => o.prop_lr = Some(parse_f(value, key)?),
            "prop_batch" => o.prop_batch = Some(parse(value, key)? as usize),
            "prop_weight_decay" => o.prop_weight_decay = Some(parse_f(value, key)?),
            "prop_embedding_dim" => o.prop_embedding_dim = Some(parse(value, key)? as usize),
            "prop_mlp" => o.prop_mlp = Some(value.clone()),
            "prop_dropout" => o.prop_dropout = Some(parse_f(value, key)?),
            "calibration" => o.calibration = Some(value.clone()),
            "bins" => o.bins = Some(parse(value, key)? as usize),
            "mc_passes" => o.mc_passes = Some(parse(value, key)? as usize),
            "ensemble_size" => o.ensemble_size = Some(parse(value, key)? as usize),
            "platt_tolerance" => o.platt_tolerance = Some(parse_f(value, key)?),
            "weighted_ece" => o.weighted_ece = value == "true" || value == "1",
            "method" => o.method = Some(value.clone()),
            "neg_ratio" => o.neg_ratio = Some(parse_f(value, key)?),
            "rec_epochs" => o.rec_epochs = Some(parse(value, key)? as usize),
            "rec_lr" => o.rec_lr = Some(parse_f(value, key)?),
            "rec_batch" => o.rec_batch = Some(parse(value, key)? as usize),
            "rec_weight_decay" => o.rec_weight_decay = Some(parse_f(value, key)?),
            "rec_embedding_dim" => o.rec_embedding_dim = Some(parse(value, key)? as usize),
            "rec_mlp" => o.rec_mlp = Some(value.clone()),
            "rec_dropout" => o.rec_dropout = Some(parse_f(value, key)?),
            "ks" => o.ks = Some(value.clone()),
            "synth_users" => o.synth_users = Some(parse(value, key)? as usize),
            "synth_items" => o.synth_items = Some(parse(value, key)? as usize),
            "synth_bias" => o.synth_bias = Some(parse_f(value, key)?),
            "synth_base_rate" => o.synth_base_rate = Some(parse_f(value, key)?),
            "synth_mar_per_user" => o.synth_mar_per_user = Some(parse(value, key)? as usize),
            other => return Err(config_err(format!("unknown config key {other:?}"))),
        }
    }
    Ok(o)
}

fn build_config(
    file: Option<&PathBuf>,
    flags: &Overrides,
) -> Result<PipelineConfig, PipelineError> {
    let mut config = PipelineConfig::default();
    if let Some(path) = file {
        overrides_from_file(path)?.apply(&mut config)?;
    }
    flags.apply(&mut config)?;
    Ok(config)
}

fn cmd_pipeline(config: PipelineConfig) -> Result<(), PipelineError> {
    let report = pipeline::run_pipeline(&config)?;
    println!("arm: {}", report.metrics.arm);
    println!(
        "raw ECE: {:.4} ± {:.4}",
        report.ece.raw.mean, report.ece.raw.stderr
    );
    if let Some(cal) = &report.ece.calibrated {
        println!(
            "{} ECE: {:.4} ± {:.4}",
            config.calibration.label(),
            cal.mean,
            cal.stderr
        );
    }
    for (slot, &k) in report.metrics.ks.iter().enumerate() {
        println!(
            "DCG@{k}: {:.4} ± {:.4}   Recall@{k}: {:.4} ± {:.4}",
            report.metrics.dcg[slot].mean,
            report.metrics.dcg[slot].stderr,
            report.metrics.recall[slot].mean,
            report.metrics.recall[slot].stderr
        );
    }
    println!(
        "Average: {:.4} ± {:.4}",
        report.metrics.average.mean, report.metrics.average.stderr
    );
    println!("report: {}", config.out_dir.join("report.json").display());
    Ok(())
}

fn cmd_synth(config: PipelineConfig) -> Result<(), PipelineError> {
    pipeline::export_synthetic_dataset(&config.synth, config.seed, &config.out_dir)?;
    println!(
        "wrote train.ascii, test.ascii, propensities.csv to {}",
        config.out_dir.display()
    );
    Ok(())
}

fn cmd_propensity(config: PipelineConfig) -> Result<(), PipelineError> {
    config.validate()?;
    std::fs::create_dir_all(&config.out_dir).map_err(|e| PipelineError::Stage {
        stage: "report",
        message: e.to_string(),
    })?;
    let stage = |stage: &'static str| {
        move |e: calips_core::data::DataError| PipelineError::Stage {
            stage,
            message: e.to_string(),
        }
    };
    let (splits, id_maps) = pipeline::load_splits(&config, config.seed)?;
    let obs = data::build_observation_dataset(&splits.train, derive_seed(config.seed, 5))
        .map_err(stage("observation"))?;
    let val_obs = data::build_observation_dataset_excluding(
        &splits.validation,
        &splits.train.pair_set(),
        derive_seed(config.seed, 6),
    )
    .map_err(stage("observation"))?;

    let spec = config.prop.spec(splits.train.n_users, splits.train.n_items);
    let model = propensity::train_propensity(
        &obs,
        &spec,
        &config.prop.train_config(),
        derive_seed(config.seed, 7),
    )
    .map_err(|e| PipelineError::Stage {
        stage: "propensity",
        message: e.to_string(),
    })?
    .model;

    let raw = propensity::score_observed(&model, &splits.train);
    propensity::write_scores_csv(&raw, None, &config.out_dir.join("scores.csv")).map_err(|e| {
        PipelineError::Stage {
            stage: "report",
            message: e.to_string(),
        }
    })?;
    let val_pairs: Vec<(usize, usize)> = val_obs.samples.iter().map(|s| (s.user, s.item)).collect();
    let val_labels: Vec<bool> = val_obs.samples.iter().map(|s| s.observed).collect();
    let val_raw = nn::predict(&model, &val_pairs, nn::PredictMode::Deterministic);
    pipeline::write_val_scores_csv(
        &config.out_dir.join("val_scores.csv"),
        &val_pairs,
        &val_labels,
        &val_raw,
        None,
    )?;
    nn::save_model(&model, &config.out_dir.join("propensity.ckpt")).map_err(|e| {
        PipelineError::Stage {
            stage: "report",
            message: e.to_string(),
        }
    })?;
    if let Some((users, items)) = id_maps {
        users.write(&config.out_dir.join("users.idmap")).map_err(stage("report"))?;
        items.write(&config.out_dir.join("items.idmap")).map_err(stage("report"))?;
    }
    println!(
        "wrote scores.csv, val_scores.csv, propensity.ckpt to {}",
        config.out_dir.display()
    );
    Ok(())
}

fn cmd_calibrate(args: &CalibrateArgs) -> Result<(), PipelineError> {
    let method = parse_calibration(&args.calibration)?;
    let out = pipeline::calibrate_from_csv(&args.scores, method, args.bins, args.platt_tolerance)?;
    // Full precision so downstream comparisons can be exact.
    println!("raw ECE: {}", out.raw_ece);
    if let Some(e) = out.calibrated_ece {
        println!("calibrated ECE: {e}");
    }
    if let Some(p) = &out.platt {
        println!("platt b = {}, c = {}", p.b, p.c);
    }
    if let Some(dir) = &args.out_dir {
        std::fs::create_dir_all(dir).map_err(|e| PipelineError::Stage {
            stage: "calibrate",
            message: e.to_string(),
        })?;
        let val = pipeline::read_val_scores_csv(&args.scores)?;
        let write = |scores: &[f64], name: &str| -> Result<(), PipelineError> {
            calips_core::calib::reliability_curve(scores, &val.labels, args.bins)
                .and_then(|curve| curve.write_csv(&dir.join(name)))
                .map_err(|e| PipelineError::Stage {
                    stage: "calibrate",
                    message: e.to_string(),
                })
        };
        write(&val.raw, "reliability_raw.csv")?;
        if let Some(p) = &out.platt {
            let calibrated = calips_core::calib::platt_apply(p, &val.raw);
            write(&calibrated, "reliability_platt.csv")?;
        }
        println!("wrote reliability CSVs to {}", dir.display());
    }
    Ok(())
}

fn cmd_train(config: PipelineConfig, args: &TrainArgs) -> Result<(), PipelineError> {
    config.validate()?;
    std::fs::create_dir_all(&config.out_dir).map_err(|e| PipelineError::Stage {
        stage: "report",
        message: e.to_string(),
    })?;
    let (splits, _) = pipeline::load_splits(&config, config.seed)?;
    let (raw, calibrated) = pipeline::read_scores_csv(&args.scores)?;
    let scores = if args.use_calibrated {
        calibrated.ok_or_else(|| config_err("scores.csv has no calibrated column"))?
    } else {
        raw
    };
    let rec_err = |stage: &'static str| {
        move |e: recommender::RecError| PipelineError::Stage {
            stage,
            message: e.to_string(),
        }
    };
    let weights = match config.method {
        MethodChoice::Base => None,
        _ => Some(
            propensity::clip_floor(&scores, config.floor).map_err(|e| PipelineError::Stage {
                stage: "recommender",
                message: e.to_string(),
            })?,
        ),
    };
    let trainset = recommender::build_rec_trainset(
        &splits.train,
        weights.as_ref(),
        config.neg_ratio,
        derive_seed(config.seed, 11),
    )
    .map_err(rec_err("recommender"))?;
    let spec = config.rec.spec(splits.train.n_users, splits.train.n_items);
    let model = match config.method {
        MethodChoice::Drjl => recommender::train_drjl(
            &trainset,
            &spec,
            &config.rec.train_config(),
            derive_seed(config.seed, 12),
        )
        .map(|state| state.prediction)
        .map_err(rec_err("recommender"))?,
        _ => recommender::train_ips(
            &trainset,
            &spec,
            &config.rec.train_config(),
            derive_seed(config.seed, 12),
        )
        .map(|outcome| outcome.model)
        .map_err(rec_err("recommender"))?,
    };
    let path = config.out_dir.join("recommender.ckpt");
    nn::save_model(&model, &path).map_err(|e| PipelineError::Stage {
        stage: "report",
        message: e.to_string(),
    })?;
    println!("wrote {}", path.display());
    Ok(())
}

fn cmd_evaluate(config: PipelineConfig, args: &EvaluateArgs) -> Result<(), PipelineError> {
    config.validate()?;
    let (splits, _) = pipeline::load_splits(&config, config.seed)?;
    let model = nn::load_model(&args.model).map_err(|e| PipelineError::Stage {
        stage: "evaluation",
        message: e.to_string(),
    })?;
    let metrics = eval::evaluate(&model, &splits.test, &config.ks);
    for (slot, &k) in metrics.ks.iter().enumerate() {
        println!(
            "DCG@{k}: {:.4}   Recall@{k}: {:.4}",
            metrics.dcg[slot], metrics.recall[slot]
        );
    }
    println!("Average: {:.4}", metrics.average);
    std::fs::create_dir_all(&config.out_dir).ok();
    let write_err = |e: std::io::Error| PipelineError::Stage {
        stage: "report",
        message: e.to_string(),
    };
    let path = config.out_dir.join("metrics.json");
    std::fs::write(&path, serde_json::to_string_pretty(&metrics).unwrap()).map_err(write_err)?;
    let mut csv = String::from("method,K,dcg,recall\n");
    let arm = config.arm_label();
    for (slot, &k) in metrics.ks.iter().enumerate() {
        csv.push_str(&format!(
            "{arm},{k},{:?},{:?}\n",
            metrics.dcg[slot], metrics.recall[slot]
        ));
    }
    std::fs::write(config.out_dir.join("metrics.csv"), csv).map_err(write_err)?;
    println!("wrote {}", path.display());
    Ok(())
}

fn cmd_audit(args: &AuditArgs) -> Result<(), PipelineError> {
    let mut config = AuditConfig::default();
    if let Some(v) = &args.out_dir {
        config.out_dir = v.clone();
    }
    if let Some(v) = args.synth_users {
        config.n_users = v;
    }
    if let Some(v) = args.synth_items {
        config.n_items = v;
    }
    if let Some(v) = args.synth_bias {
        config.bias_strength = v;
    }
    if let Some(v) = args.synth_base_rate {
        config.base_rate = v;
    }
    if let Some(v) = args.seed {
        config.seed = v;
    }
    if let Some(v) = args.trials {
        config.trials = v;
    }
    if let Some(v) = args.eta {
        config.eta = v;
    }
    if let Some(v) = args.hypothesis_count {
        config.hypothesis_count = v;
    }
    if let Some(v) = args.bins {
        config.bins = v;
    }
    if let Some(v) = args.floor {
        config.floor = v;
    }
    if let Some(v) = &args.error_kind {
        config.error_kind = match v.as_str() {
            "mae" => ErrorKind::Mae,
            "mse" => ErrorKind::Mse,
            other => return Err(config_err(format!("unknown error kind {other:?}"))),
        };
    }
    let report = pipeline::run_audit(&config)?;
    println!(
        "unbiasedness: mc bias {:.6} (stderr {:.6}) -> {}",
        report.unbiasedness.mc_bias,
        report.unbiasedness.mc_stderr,
        if report.unbiasedness.within_three_stderr { "ok" } else { "FLAG" }
    );
    println!(
        "bias identity: analytic {:.6} vs mc {:.6} (stderr {:.6}) -> {}",
        report.bias_identity.analytic_bias,
        report.bias_identity.mc_bias,
        report.bias_identity.mc_stderr,
        if report.bias_identity.within_three_stderr { "ok" } else { "FLAG" }
    );
    println!(
        "raw vs calibrated bias: {:.6} vs {:.6} (dominates: {})",
        report.calibration_comparison.bias_raw, report.calibration_comparison.bias_cal, report.calibration_comparison.dominates
    );
    println!(
        "bound terms: empirical {:.6} + bias {:.6} + variance {:.6} = {:.6}",
        report.bound_terms.empirical_error,
        report.bound_terms.bias_term,
        report.bound_terms.variance_term,
        report.bound_terms.total
    );
    println!(
        "ece bound: lhs {:.6} <= rhs {:.6} : {}",
        report.ece_audit.lhs, report.ece_audit.rhs, report.ece_audit.holds
    );
    println!("report: {}", config.out_dir.join("audit.json").display());
    Ok(())
}

fn run() -> Result<(), PipelineError> {
    let cli = Cli::parse();
    match &cli.command {
        Command::Pipeline(flags) => cmd_pipeline(build_config(cli.config.as_ref(), flags)?),
        Command::Synth(flags) => cmd_synth(build_config(cli.config.as_ref(), flags)?),
        Command::Propensity(flags) => cmd_propensity(build_config(cli.config.as_ref(), flags)?),
        Command::Calibrate(args) => cmd_calibrate(args),
        Command::Train(args) => {
            cmd_train(build_config(cli.config.as_ref(), &args.overrides)?, args)
        }
        Command::Evaluate(args) => {
            cmd_evaluate(build_config(cli.config.as_ref(), &args.overrides)?, args)
        }
        Command::Audit(args) => cmd_audit(args),
    }
}

fn main() -> ExitCode {
    env_logger::init();
    match run() {
        Ok(()) => ExitCode::SUCCESS,
        Err(PipelineError::Config(msg)) => {
            eprintln!("configuration error: {msg}");
            ExitCode::from(1)
        }
        Err(err) => {
            eprintln!("{err}");
            ExitCode::from(2)
        }
    }
}
