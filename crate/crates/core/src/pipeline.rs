//! End-to-end pipeline driver, configuration, and report emission.
//!
//! The pipeline runs the two-stage procedure: train the propensity
//! classifier on the observation dataset, calibrate its scores with the
//! configured method, quantify calibration (ECE, reliability curve), weight
//! the recommender's training set with the inverse scores, train the
//! configured recommender arm, and evaluate on the MAR test split. Replicas
//! re-run everything with seeds `master_seed + replica_index` and the report
//! aggregates mean ± standard error per quantity.
//!
//! The audit entry point generates a synthetic world with oracle
//! propensities and runs the numerical checks of the bias identity, the
//! calibrated-vs-raw comparison, the generalization-bound terms, and the
//! ECE bound.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::calib::{self, PlattParams, ReliabilityCurve};
use crate::data::{self, IdMap, LoadConfig, SplitPair};
use crate::estimators::{self, BiasComparison, BoundTerms, EceBoundAudit, ErrorKind};
use crate::eval::{self, RankingMetrics};
use crate::nn::{self, Loss, ModelSpec, TrainConfig, TrainedModel};
use crate::propensity::{self, PropensityScores, ScoreKind};
use crate::recommender;
use crate::seed::derive_seed;
use crate::synth::{self, WorldConfig};

// Seed streams, fanned out from the replica (or master) seed.
const STREAM_WORLD: u64 = 1;
const STREAM_INDICATOR: u64 = 2;
const STREAM_MAR: u64 = 3;
const STREAM_SPLIT: u64 = 4;
const STREAM_OBS: u64 = 5;
const STREAM_VAL_OBS: u64 = 6;
const STREAM_PROP: u64 = 7;
const STREAM_ENSEMBLE: u64 = 8;
const STREAM_MC_TRAIN: u64 = 9;
const STREAM_MC_VAL: u64 = 10;
const STREAM_TRAINSET: u64 = 11;
const STREAM_REC: u64 = 12;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("stage {stage} failed: {message}")]
    Stage { stage: &'static str, message: String },
}

impl PipelineError {
    fn stage<E: std::fmt::Display>(stage: &'static str) -> impl FnOnce(E) -> PipelineError {
        move |e| PipelineError::Stage {
            stage,
            message: e.to_string(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DatasetChoice {
    Coat,
    Yahoo,
    Synthetic,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CalibrationChoice {
    None,
    Platt,
    McDropout,
    Ensemble,
}

impl CalibrationChoice {
    pub fn label(self) -> &'static str {
        match self {
            CalibrationChoice::None => "raw",
            CalibrationChoice::Platt => "platt",
            CalibrationChoice::McDropout => "mc-dropout",
            CalibrationChoice::Ensemble => "ensemble",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MethodChoice {
    Base,
    Ips,
    Drjl,
}

impl MethodChoice {
    pub fn label(self) -> &'static str {
        match self {
            MethodChoice::Base => "base",
            MethodChoice::Ips => "ips",
            MethodChoice::Drjl => "drjl",
        }
    }
}

/// Hyperparameters for one model family (propensity or recommender).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetParams {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub embedding_dim: usize,
    pub mlp_layers: Vec<usize>,
    pub dropout_rate: f64,
}

impl NetParams {
    pub fn spec(&self, n_users: usize, n_items: usize) -> ModelSpec {
        ModelSpec {
            n_users,
            n_items,
            embedding_dim: self.embedding_dim,
            mlp_layers: self.mlp_layers.clone(),
            dropout_rate: self.dropout_rate,
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            batch_size: self.batch_size,
            learning_rate: self.learning_rate,
            weight_decay: self.weight_decay,
            loss: Loss::Bce,
            per_sample_weights: None,
        }
    }
}

/// Synthetic-dataset shape used when `dataset = synthetic`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthDataParams {
    pub n_users: usize,
    pub n_items: usize,
    pub bias_strength: f64,
    pub base_rate: f64,
    pub mar_items_per_user: usize,
}

impl SynthDataParams {
    pub fn world_config(&self) -> WorldConfig {
        WorldConfig {
            n_users: self.n_users,
            n_items: self.n_items,
            bias_strength: self.bias_strength,
            base_rate: self.base_rate,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub dataset: DatasetChoice,
    pub data_dir: Option<PathBuf>,
    pub out_dir: PathBuf,
    pub threshold: u8,
    pub train_fraction: f64,
    pub seed: u64,
    pub replicas: usize,
    pub floor: f64,
    pub prop: NetParams,
    pub calibration: CalibrationChoice,
    pub bins: usize,
    pub mc_passes: usize,
    pub ensemble_size: usize,
    pub platt_tolerance: f64,
    pub weighted_ece: bool,
    pub method: MethodChoice,
    pub neg_ratio: f64,
    pub rec: NetParams,
    pub ks: Vec<usize>,
    pub synth: SynthDataParams,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            dataset: DatasetChoice::Synthetic,
            data_dir: None,
            out_dir: PathBuf::from("out"),
            threshold: 4,
            train_fraction: 0.9,
            seed: 0,
            replicas: 1,
            floor: propensity::DEFAULT_FLOOR,
            prop: NetParams {
                epochs: 40,
                batch_size: 32,
                learning_rate: 0.5,
                weight_decay: 0.0,
                embedding_dim: 16,
                mlp_layers: vec![32, 16, 1],
                dropout_rate: 0.2,
            },
            calibration: CalibrationChoice::Platt,
            bins: 100,
            mc_passes: 10,
            ensemble_size: 10,
            platt_tolerance: 1e-6,
            weighted_ece: false,
            method: MethodChoice::Ips,
            neg_ratio: 1.0,
            rec: NetParams {
                epochs: 30,
                batch_size: 256,
                learning_rate: 0.1,
                weight_decay: 0.0,
                embedding_dim: 8,
                mlp_layers: vec![32, 16, 1],
                dropout_rate: 0.0,
            },
            ks: vec![2, 4, 6],
            synth: SynthDataParams {
                n_users: 290,
                n_items: 300,
                bias_strength: 1.0,
                base_rate: 0.08,
                mar_items_per_user: 16,
            },
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<(), PipelineError> {
        let fail = |msg: String| Err(PipelineError::Config(msg));
        if self.dataset != DatasetChoice::Synthetic && self.data_dir.is_none() {
            return fail("data_dir is required for real datasets".into());
        }
        if let Some(dir) = &self.data_dir {
            if !dir.exists() {
                return fail(format!("data_dir {} does not exist", dir.display()));
            }
        }
        if !(1..=5).contains(&self.threshold) {
            return fail(format!("threshold {} outside 1-5", self.threshold));
        }
        if !(self.train_fraction > 0.0 && self.train_fraction < 1.0) {
            return fail(format!("train_fraction {} outside (0,1)", self.train_fraction));
        }
        if self.replicas == 0 {
            return fail("replicas must be >= 1".into());
        }
        if !(self.floor > 0.0 && self.floor < 0.5) {
            return fail(format!("floor {} outside (0, 0.5)", self.floor));
        }
        if self.bins == 0 {
            return fail("bins must be >= 1".into());
        }
        if self.calibration == CalibrationChoice::McDropout {
            if self.mc_passes < 2 {
                return fail("mc_passes must be >= 2".into());
            }
            if self.prop.dropout_rate == 0.0 {
                return fail("mc-dropout calibration needs prop dropout_rate > 0".into());
            }
        }
        if self.calibration == CalibrationChoice::Ensemble && self.ensemble_size < 2 {
            return fail("ensemble_size must be >= 2".into());
        }
        if self.ks.is_empty() || self.ks.contains(&0) {
            return fail("ks must be nonempty positive cutoffs".into());
        }
        if !(self.neg_ratio >= 0.0) {
            return fail(format!("neg_ratio {} must be nonnegative", self.neg_ratio));
        }
        Ok(())
    }

    /// Method arm label used in reports and CSV rows, e.g. `ips-platt`.
    pub fn arm_label(&self) -> String {
        match self.method {
            MethodChoice::Base => "base".to_string(),
            m => format!("{}-{}", m.label(), self.calibration.label()),
        }
    }
}

/// Mean, standard error, and the per-replica values behind them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub mean: f64,
    pub stderr: f64,
    pub per_replica: Vec<f64>,
}

impl Aggregate {
    pub fn from_values(values: Vec<f64>) -> Self {
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let stderr = if values.len() > 1 {
            let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
            (var / n).sqrt()
        } else {
            0.0
        };
        Self {
            mean,
            stderr,
            per_replica: values,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EceSection {
    pub raw: Aggregate,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub calibrated: Option<Aggregate>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub raw_count_weighted: Option<Aggregate>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub calibrated_count_weighted: Option<Aggregate>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsSection {
    pub arm: String,
    pub ks: Vec<usize>,
    pub dcg: Vec<Aggregate>,
    pub recall: Vec<Aggregate>,
    pub average: Aggregate,
    pub users_evaluated: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub config: PipelineConfig,
    pub ece: EceSection,
    pub metrics: MetricsSection,
    /// File names written under `out_dir`.
    pub artifacts: Vec<String>,
    /// Wall-clock seconds per stage, summed over replicas. Excluded from the
    /// deterministic report body.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub timing: Option<BTreeMap<String, f64>>,
}

impl RunReport {
    /// The deterministic report body: everything except timing.
    pub fn body_json(&self) -> String {
        let mut clone = self.clone();
        clone.timing = None;
        serde_json::to_string_pretty(&clone).expect("report serializes")
    }

    pub fn full_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

struct ReplicaOutput {
    raw_ece: f64,
    calibrated_ece: Option<f64>,
    raw_ece_weighted: f64,
    calibrated_ece_weighted: Option<f64>,
    metrics: RankingMetrics,
    timing: BTreeMap<&'static str, f64>,
    // Replica-0 artifacts.
    artifacts: Option<ReplicaArtifacts>,
}

struct ReplicaArtifacts {
    raw_curve: ReliabilityCurve,
    calibrated_curve: Option<ReliabilityCurve>,
    raw_train_scores: PropensityScores,
    calibrated_train_scores: Option<PropensityScores>,
    val_pairs: Vec<(usize, usize)>,
    val_labels: Vec<bool>,
    val_raw_scores: Vec<f64>,
    val_calibrated_scores: Option<Vec<f64>>,
    propensity_model: TrainedModel,
    recommender_model: TrainedModel,
    id_maps: Option<(IdMap, IdMap)>,
}

/// Loads (or generates) the dataset splits for one replica seed.
pub fn load_splits(
    config: &PipelineConfig,
    seed: u64,
) -> Result<(SplitPair, Option<(IdMap, IdMap)>), PipelineError> {
    let load_cfg = LoadConfig {
        threshold: config.threshold,
        train_fraction: config.train_fraction,
        seed,
    };
    match config.dataset {
        DatasetChoice::Coat => {
            let dir = config.data_dir.as_ref().expect("validated");
            let splits = data::load_coat(dir, &load_cfg).map_err(PipelineError::stage("load"))?;
            Ok((splits, None))
        }
        DatasetChoice::Yahoo => {
            let dir = config.data_dir.as_ref().expect("validated");
            let loaded = data::load_yahoo(dir, &load_cfg).map_err(PipelineError::stage("load"))?;
            Ok((loaded.splits, Some((loaded.user_map, loaded.item_map))))
        }
        DatasetChoice::Synthetic => {
            // The world and its MNAR/MAR draws come from the master seed so
            // every replica sees the same dataset; only the split is reseeded.
            let world = synth::generate_world(
                &config.synth.world_config(),
                derive_seed(config.seed, STREAM_WORLD),
            )
            .map_err(PipelineError::stage("load"))?;
            let indicator = synth::sample_indicator(&world, derive_seed(config.seed, STREAM_INDICATOR));
            let mnar = synth::world_to_dataset(&world, &indicator)
                .map_err(PipelineError::stage("load"))?;
            let mnar = data::binarize(&mnar, config.threshold);
            let test = synth::sample_mar_test(
                &world,
                &indicator,
                config.synth.mar_items_per_user,
                derive_seed(config.seed, STREAM_MAR),
            )
            .map_err(PipelineError::stage("load"))?;
            let test = data::binarize(&test, config.threshold);
            let (train, validation) =
                data::split_mnar(&mnar, config.train_fraction, derive_seed(seed, STREAM_SPLIT))
                    .map_err(PipelineError::stage("load"))?;
            let splits = SplitPair::new(train, validation, test)
                .map_err(PipelineError::stage("load"))?;
            Ok((splits, None))
        }
    }
}

fn time_stage<T>(
    timing: &mut BTreeMap<&'static str, f64>,
    stage: &'static str,
    f: impl FnOnce() -> T,
) -> T {
    let start = Instant::now();
    let out = f();
    *timing.entry(stage).or_insert(0.0) += start.elapsed().as_secs_f64();
    out
}

fn run_replica(
    config: &PipelineConfig,
    replica: usize,
    keep_artifacts: bool,
) -> Result<ReplicaOutput, PipelineError> {
    let seed = config.seed + replica as u64;
    let mut timing = BTreeMap::new();

    let (splits, id_maps) = time_stage(&mut timing, "load", || load_splits(config, seed))?;
    let (n_users, n_items) = (splits.train.n_users, splits.train.n_items);

    // Balanced observation sets: training one from the train split, the
    // calibration one from the validation entries with train pairs kept out
    // of its negative pool.
    let (obs, val_obs) = time_stage(&mut timing, "observation", || {
        let obs = data::build_observation_dataset(&splits.train, derive_seed(seed, STREAM_OBS))
            .map_err(PipelineError::stage("observation"))?;
        let val_obs = data::build_observation_dataset_excluding(
            &splits.validation,
            &splits.train.pair_set(),
            derive_seed(seed, STREAM_VAL_OBS),
        )
        .map_err(PipelineError::stage("observation"))?;
        Ok::<_, PipelineError>((obs, val_obs))
    })?;

    let prop_spec = config.prop.spec(n_users, n_items);
    let prop_config = config.prop.train_config();
    let model = time_stage(&mut timing, "propensity", || {
        propensity::train_propensity(&obs, &prop_spec, &prop_config, derive_seed(seed, STREAM_PROP))
            .map(|outcome| outcome.model)
            .map_err(PipelineError::stage("propensity"))
    })?;

    let train_pairs = splits.train.pairs();
    let val_pairs: Vec<(usize, usize)> = val_obs.samples.iter().map(|s| (s.user, s.item)).collect();
    let val_labels: Vec<bool> = val_obs.samples.iter().map(|s| s.observed).collect();
    let raw_train = propensity::score_observed(&model, &splits.train);
    let raw_val = nn::predict(&model, &val_pairs, nn::PredictMode::Deterministic);

    // Calibration arm: produce calibrated scores for the training pairs
    // (for IPS weights) and for the validation set (for ECE).
    let calibrated = time_stage(&mut timing, "calibration", || {
        match config.calibration {
            CalibrationChoice::None => Ok(None),
            CalibrationChoice::Platt => {
                let params = calib::platt_fit(&raw_val, &val_labels, config.platt_tolerance)
                    .map_err(PipelineError::stage("calibration"))?;
                let train_scores = calib::calibrate_scores(&params, &raw_train);
                let val_scores = calib::platt_apply(&params, &raw_val);
                Ok(Some((train_scores, val_scores)))
            }
            CalibrationChoice::McDropout => {
                let train_scores = calib::mc_dropout_scores(
                    &model,
                    &train_pairs,
                    config.mc_passes,
                    derive_seed(seed, STREAM_MC_TRAIN),
                )
                .map_err(PipelineError::stage("calibration"))?;
                let val_scores = calib::mc_dropout_scores(
                    &model,
                    &val_pairs,
                    config.mc_passes,
                    derive_seed(seed, STREAM_MC_VAL),
                )
                .map_err(PipelineError::stage("calibration"))?;
                Ok(Some((train_scores, val_scores.scores)))
            }
            CalibrationChoice::Ensemble => {
                let ensemble = calib::train_ensemble(
                    &obs,
                    &prop_spec,
                    &prop_config,
                    config.ensemble_size,
                    derive_seed(seed, STREAM_ENSEMBLE),
                )
                .map_err(PipelineError::stage("calibration"))?;
                let train_scores = calib::ensemble_scores(&ensemble, &train_pairs);
                let val_scores = calib::ensemble_scores(&ensemble, &val_pairs);
                Ok(Some((train_scores, val_scores.scores)))
            }
        }
    })?;

    let (raw_ece, calibrated_ece, raw_ece_weighted, calibrated_ece_weighted, curves) =
        time_stage(&mut timing, "ece", || {
            let raw_ece = calib::ece(&raw_val, &val_labels, config.bins)
                .map_err(PipelineError::stage("ece"))?;
            let raw_weighted = calib::ece_count_weighted(&raw_val, &val_labels, config.bins)
                .map_err(PipelineError::stage("ece"))?;
            let raw_curve = calib::reliability_curve(&raw_val, &val_labels, config.bins)
                .map_err(PipelineError::stage("ece"))?;
            let (cal_ece, cal_weighted, cal_curve) = match &calibrated {
                Some((_, val_scores)) => (
                    Some(
                        calib::ece(val_scores, &val_labels, config.bins)
                            .map_err(PipelineError::stage("ece"))?,
                    ),
                    Some(
                        calib::ece_count_weighted(val_scores, &val_labels, config.bins)
                            .map_err(PipelineError::stage("ece"))?,
                    ),
                    Some(
                        calib::reliability_curve(val_scores, &val_labels, config.bins)
                            .map_err(PipelineError::stage("ece"))?,
                    ),
                ),
                None => (None, None, None),
            };
            Ok::<_, PipelineError>((raw_ece, cal_ece, raw_weighted, cal_weighted, (raw_curve, cal_curve)))
        })?;

    // Weighting scores for the recommender: the arm's scores, floor-clipped.
    let weight_scores = match (&config.method, &calibrated) {
        (MethodChoice::Base, _) => None,
        (_, Some((train_scores, _))) => Some(
            propensity::clip_floor(train_scores, config.floor)
                .map_err(PipelineError::stage("recommender"))?,
        ),
        (_, None) => Some(
            propensity::clip_floor(&raw_train, config.floor)
                .map_err(PipelineError::stage("recommender"))?,
        ),
    };

    let rec_spec = config.rec.spec(n_users, n_items);
    let rec_config = config.rec.train_config();
    let (rec_model, trainset) = time_stage(&mut timing, "recommender", || {
        let trainset = recommender::build_rec_trainset(
            &splits.train,
            weight_scores.as_ref(),
            config.neg_ratio,
            derive_seed(seed, STREAM_TRAINSET),
        )
        .map_err(PipelineError::stage("recommender"))?;
        let model = match config.method {
            MethodChoice::Drjl => {
                recommender::train_drjl(&trainset, &rec_spec, &rec_config, derive_seed(seed, STREAM_REC))
                    .map(|state| state.prediction)
                    .map_err(PipelineError::stage("recommender"))?
            }
            _ => recommender::train_ips(&trainset, &rec_spec, &rec_config, derive_seed(seed, STREAM_REC))
                .map(|outcome| outcome.model)
                .map_err(PipelineError::stage("recommender"))?,
        };
        Ok::<_, PipelineError>((model, trainset))
    })?;
    let _ = trainset;

    let metrics = time_stage(&mut timing, "evaluation", || {
        eval::evaluate(&rec_model, &splits.test, &config.ks)
    });

    let artifacts = keep_artifacts.then(|| ReplicaArtifacts {
        raw_curve: curves.0,
        calibrated_curve: curves.1,
        raw_train_scores: raw_train,
        calibrated_train_scores: calibrated.as_ref().map(|(t, _)| t.clone()),
        val_pairs,
        val_labels,
        val_raw_scores: raw_val,
        val_calibrated_scores: calibrated.map(|(_, v)| v),
        propensity_model: model,
        recommender_model: rec_model,
        id_maps,
    });

    Ok(ReplicaOutput {
        raw_ece,
        calibrated_ece,
        raw_ece_weighted,
        calibrated_ece_weighted,
        metrics,
        timing,
        artifacts,
    })
}

fn write_artifacts(
    config: &PipelineConfig,
    artifacts: &ReplicaArtifacts,
) -> Result<Vec<String>, PipelineError> {
    let out = &config.out_dir;
    std::fs::create_dir_all(out).map_err(PipelineError::stage("report"))?;
    let mut written = Vec::new();
    let mut record = |name: &str| written.push(name.to_string());

    let raw_curve_name = "reliability_raw.csv";
    artifacts
        .raw_curve
        .write_csv(&out.join(raw_curve_name))
        .map_err(PipelineError::stage("report"))?;
    record(raw_curve_name);

    calib::write_histogram_csv(
        &artifacts.raw_train_scores.scores,
        config.bins,
        &out.join("histogram_raw.csv"),
    )
    .map_err(PipelineError::stage("report"))?;
    record("histogram_raw.csv");

    if let Some(curve) = &artifacts.calibrated_curve {
        let name = format!("reliability_{}.csv", config.calibration.label());
        curve
            .write_csv(&out.join(&name))
            .map_err(PipelineError::stage("report"))?;
        record(&name);
    }
    if let Some(scores) = &artifacts.calibrated_train_scores {
        let name = format!("histogram_{}.csv", config.calibration.label());
        calib::write_histogram_csv(&scores.scores, config.bins, &out.join(&name))
            .map_err(PipelineError::stage("report"))?;
        record(&name);
    }

    propensity::write_scores_csv(
        &artifacts.raw_train_scores,
        artifacts.calibrated_train_scores.as_ref(),
        &out.join("scores.csv"),
    )
    .map_err(PipelineError::stage("report"))?;
    record("scores.csv");

    write_val_scores_csv(
        &out.join("val_scores.csv"),
        &artifacts.val_pairs,
        &artifacts.val_labels,
        &artifacts.val_raw_scores,
        artifacts.val_calibrated_scores.as_deref(),
    )?;
    record("val_scores.csv");

    nn::save_model(&artifacts.propensity_model, &out.join("propensity.ckpt"))
        .map_err(PipelineError::stage("report"))?;
    record("propensity.ckpt");
    nn::save_model(&artifacts.recommender_model, &out.join("recommender.ckpt"))
        .map_err(PipelineError::stage("report"))?;
    record("recommender.ckpt");

    if let Some((user_map, item_map)) = &artifacts.id_maps {
        user_map
            .write(&out.join("users.idmap"))
            .map_err(PipelineError::stage("report"))?;
        item_map
            .write(&out.join("items.idmap"))
            .map_err(PipelineError::stage("report"))?;
        record("users.idmap");
        record("items.idmap");
    }

    Ok(written)
}

fn write_metrics_csv(
    path: &Path,
    arm: &str,
    metrics: &MetricsSection,
) -> Result<(), PipelineError> {
    let mut out = String::from("method,K,dcg,recall\n");
    for (slot, &k) in metrics.ks.iter().enumerate() {
        out.push_str(&format!(
            "{arm},{k},{:?},{:?}\n",
            metrics.dcg[slot].mean, metrics.recall[slot].mean
        ));
    }
    std::fs::write(path, out).map_err(PipelineError::stage("report"))
}

/// Runs the full pipeline and writes `report.json` plus the CSV artifacts
/// into `out_dir`. Replica 0 runs first so its artifacts survive a failure
/// in a later replica.
pub fn run_pipeline(config: &PipelineConfig) -> Result<RunReport, PipelineError> {
    config.validate()?;
    std::fs::create_dir_all(&config.out_dir)
        .map_err(PipelineError::stage("report"))?;

    let first = run_replica(config, 0, true)?;
    let mut artifact_names = write_artifacts(
        config,
        first.artifacts.as_ref().expect("replica 0 keeps artifacts"),
    )?;

    let rest: Vec<ReplicaOutput> = (1..config.replicas)
        .into_par_iter()
        .map(|r| run_replica(config, r, false))
        .collect::<Result<_, _>>()?;

    let mut replicas = vec![first];
    replicas.extend(rest);

    let mut timing: BTreeMap<String, f64> = BTreeMap::new();
    for rep in &replicas {
        for (stage, secs) in &rep.timing {
            *timing.entry((*stage).to_string()).or_insert(0.0) += secs;
        }
    }

    let collect = |f: &dyn Fn(&ReplicaOutput) -> f64| -> Aggregate {
        Aggregate::from_values(replicas.iter().map(f).collect())
    };
    let collect_opt = |f: &dyn Fn(&ReplicaOutput) -> Option<f64>| -> Option<Aggregate> {
        let values: Option<Vec<f64>> = replicas.iter().map(f).collect();
        values.map(Aggregate::from_values)
    };

    let ece = EceSection {
        raw: collect(&|r| r.raw_ece),
        calibrated: collect_opt(&|r| r.calibrated_ece),
        raw_count_weighted: config.weighted_ece.then(|| collect(&|r| r.raw_ece_weighted)),
        calibrated_count_weighted: if config.weighted_ece {
            collect_opt(&|r| r.calibrated_ece_weighted)
        } else {
            None
        },
    };

    let ks = config.ks.clone();
    let dcg: Vec<Aggregate> = (0..ks.len())
        .map(|slot| collect(&move |r| r.metrics.dcg[slot]))
        .collect();
    let recall: Vec<Aggregate> = (0..ks.len())
        .map(|slot| collect(&move |r| r.metrics.recall[slot]))
        .collect();
    let metrics = MetricsSection {
        arm: config.arm_label(),
        ks,
        dcg,
        recall,
        average: collect(&|r| r.metrics.average),
        users_evaluated: replicas[0].metrics.users_evaluated,
    };

    write_metrics_csv(&config.out_dir.join("metrics.csv"), &metrics.arm, &metrics)?;
    artifact_names.push("metrics.csv".to_string());
    artifact_names.push("report.json".to_string());

    let report = RunReport {
        config: config.clone(),
        ece,
        metrics,
        artifacts: artifact_names,
        timing: Some(timing),
    };
    std::fs::write(config.out_dir.join("report.json"), report.full_json())
        .map_err(PipelineError::stage("report"))?;
    Ok(report)
}

// ---------------------------------------------------------------------------
// Stage isolation: calibrate from a saved score CSV.
// ---------------------------------------------------------------------------

/// Writes `user,item,label,raw_score,calibrated_score` rows; scores use the
/// shortest-round-trip form so a reload is bit-exact.
pub fn write_val_scores_csv(
    path: &Path,
    pairs: &[(usize, usize)],
    labels: &[bool],
    raw: &[f64],
    calibrated: Option<&[f64]>,
) -> Result<(), PipelineError> {
    let mut out = String::from("user,item,label,raw_score,calibrated_score\n");
    for (k, &(user, item)) in pairs.iter().enumerate() {
        let cal = calibrated.map_or(String::new(), |v| format!("{:?}", v[k]));
        out.push_str(&format!(
            "{user},{item},{},{:?},{cal}\n",
            labels[k] as u8, raw[k]
        ));
    }
    std::fs::write(path, out).map_err(PipelineError::stage("report"))
}

/// Parsed `val_scores.csv` content.
pub struct ValScores {
    pub pairs: Vec<(usize, usize)>,
    pub labels: Vec<bool>,
    pub raw: Vec<f64>,
    pub calibrated: Option<Vec<f64>>,
}

pub fn read_val_scores_csv(path: &Path) -> Result<ValScores, PipelineError> {
    let text = std::fs::read_to_string(path).map_err(PipelineError::stage("calibrate"))?;
    let mut pairs = Vec::new();
    let mut labels = Vec::new();
    let mut raw = Vec::new();
    let mut calibrated: Vec<f64> = Vec::new();
    let mut has_calibrated = true;
    for (idx, line) in text.lines().enumerate() {
        if idx == 0 || line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 5 {
            return Err(PipelineError::Stage {
                stage: "calibrate",
                message: format!("{}:{}: expected 5 fields", path.display(), idx + 1),
            });
        }
        let parse_err = |what: &str| PipelineError::Stage {
            stage: "calibrate",
            message: format!("{}:{}: bad {what}", path.display(), idx + 1),
        };
        pairs.push((
            fields[0].parse().map_err(|_| parse_err("user"))?,
            fields[1].parse().map_err(|_| parse_err("item"))?,
        ));
        labels.push(fields[2] == "1");
        raw.push(fields[3].parse().map_err(|_| parse_err("raw score"))?);
        if fields[4].is_empty() {
            has_calibrated = false;
        } else {
            calibrated.push(fields[4].parse().map_err(|_| parse_err("calibrated score"))?);
        }
    }
    Ok(ValScores {
        pairs,
        labels,
        raw,
        calibrated: has_calibrated.then_some(calibrated),
    })
}

/// Output of the standalone calibrate stage.
#[derive(Debug, Clone, Serialize)]
pub struct CalibrateOutput {
    pub raw_ece: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub calibrated_ece: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub platt: Option<PlattParams>,
}

/// Re-runs the calibration stage on a saved validation-score CSV. With the
/// same inputs this reproduces the pipeline's ECE bit-for-bit (scores are
/// serialized in shortest-round-trip form). Only `none` and `platt` can run
/// from a CSV; the averaging methods need the trained model.
pub fn calibrate_from_csv(
    path: &Path,
    method: CalibrationChoice,
    bins: usize,
    tolerance: f64,
) -> Result<CalibrateOutput, PipelineError> {
    let val = read_val_scores_csv(path)?;
    let raw_ece =
        calib::ece(&val.raw, &val.labels, bins).map_err(PipelineError::stage("calibrate"))?;
    match method {
        CalibrationChoice::None => Ok(CalibrateOutput {
            raw_ece,
            calibrated_ece: None,
            platt: None,
        }),
        CalibrationChoice::Platt => {
            let params = calib::platt_fit(&val.raw, &val.labels, tolerance)
                .map_err(PipelineError::stage("calibrate"))?;
            let scores = calib::platt_apply(&params, &val.raw);
            let calibrated_ece = calib::ece(&scores, &val.labels, bins)
                .map_err(PipelineError::stage("calibrate"))?;
            Ok(CalibrateOutput {
                raw_ece,
                calibrated_ece: Some(calibrated_ece),
                platt: Some(params),
            })
        }
        other => Err(PipelineError::Config(format!(
            "calibration method {} needs the trained model, not a score CSV",
            other.label()
        ))),
    }
}

/// Reads `scores.csv` (`user,item,raw_score,calibrated_score`).
pub fn read_scores_csv(
    path: &Path,
) -> Result<(PropensityScores, Option<PropensityScores>), PipelineError> {
    let text = std::fs::read_to_string(path).map_err(PipelineError::stage("train"))?;
    let mut pairs = Vec::new();
    let mut raw = Vec::new();
    let mut calibrated: Vec<f64> = Vec::new();
    let mut has_calibrated = true;
    for (idx, line) in text.lines().enumerate() {
        if idx == 0 || line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 4 {
            return Err(PipelineError::Stage {
                stage: "train",
                message: format!("{}:{}: expected 4 fields", path.display(), idx + 1),
            });
        }
        let parse_err = |what: &str| PipelineError::Stage {
            stage: "train",
            message: format!("{}:{}: bad {what}", path.display(), idx + 1),
        };
        pairs.push((
            fields[0].parse().map_err(|_| parse_err("user"))?,
            fields[1].parse().map_err(|_| parse_err("item"))?,
        ));
        raw.push(fields[2].parse().map_err(|_| parse_err("raw score"))?);
        if fields[3].is_empty() {
            has_calibrated = false;
        } else {
            calibrated.push(fields[3].parse().map_err(|_| parse_err("calibrated score"))?);
        }
    }
    let raw_scores = PropensityScores {
        pairs: pairs.clone(),
        scores: raw,
        kind: ScoreKind::Raw,
    };
    let calibrated_scores = has_calibrated.then_some(PropensityScores {
        pairs,
        scores: calibrated,
        kind: ScoreKind::Calibrated(crate::propensity::CalibrationMethod::Platt),
    });
    Ok((raw_scores, calibrated_scores))
}

// ---------------------------------------------------------------------------
// Theory audit.
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditConfig {
    pub out_dir: PathBuf,
    pub n_users: usize,
    pub n_items: usize,
    pub bias_strength: f64,
    pub base_rate: f64,
    pub seed: u64,
    pub trials: usize,
    pub eta: f64,
    pub hypothesis_count: usize,
    pub bins: usize,
    pub floor: f64,
    pub error_kind: ErrorKind,
    pub threshold: u8,
    pub train_fraction: f64,
    pub platt_tolerance: f64,
    pub prop: NetParams,
}

impl Default for AuditConfig {
    fn default() -> Self {
        Self {
            out_dir: PathBuf::from("out"),
            n_users: 50,
            n_items: 50,
            bias_strength: 1.0,
            base_rate: 0.1,
            seed: 7,
            trials: 10_000,
            eta: 0.05,
            hypothesis_count: 100,
            bins: 100,
            floor: propensity::DEFAULT_FLOOR,
            error_kind: ErrorKind::Mae,
            threshold: 4,
            train_fraction: 0.9,
            platt_tolerance: 1e-6,
            prop: NetParams {
                epochs: 40,
                batch_size: 32,
                learning_rate: 0.5,
                weight_decay: 0.0,
                embedding_dim: 16,
                mlp_layers: vec![32, 16, 1],
                dropout_rate: 0.2,
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct McBiasSection {
    pub analytic_bias: f64,
    pub mc_bias: f64,
    pub mc_stderr: f64,
    pub within_three_stderr: bool,
}

/// All five audit sections.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditReport {
    pub config: AuditConfig,
    /// Oracle propensities: the IPS estimator should be unbiased.
    pub unbiasedness: McBiasSection,
    /// Doubled propensities: Monte-Carlo bias must match the bias identity.
    pub bias_identity: McBiasSection,
    /// Raw vs Platt-calibrated propensity bias comparison.
    pub calibration_comparison: BiasComparison,
    /// Generalization-bound terms under the calibrated propensities.
    pub bound_terms: BoundTerms,
    /// Calibrated bias term against the `n * ECE` bound.
    pub ece_audit: EceBoundAudit,
}

/// Runs the numerical audit suite on a synthetic world with oracle
/// propensities and writes `audit.json` into `out_dir`.
pub fn run_audit(config: &AuditConfig) -> Result<AuditReport, PipelineError> {
    let world_cfg = WorldConfig {
        n_users: config.n_users,
        n_items: config.n_items,
        bias_strength: config.bias_strength,
        base_rate: config.base_rate,
    };
    let world = synth::generate_world(&world_cfg, derive_seed(config.seed, STREAM_WORLD))
        .map_err(PipelineError::stage("audit"))?;

    // Audit errors: a constant mid-scale predictor, so the error surface is
    // deterministic and correlated with the rating (hence with the
    // propensity) without training a model first.
    let predictions = vec![3.0; world.universe_size()];
    let errors = estimators::prediction_errors(&world.true_ratings, &predictions, config.error_kind);

    let section = |report: estimators::BiasReport, against_analytic: bool| McBiasSection {
        within_three_stderr: if against_analytic {
            (report.mc_bias - report.analytic_bias).abs() < 3.0 * report.mc_stderr
        } else {
            report.mc_bias < 3.0 * report.mc_stderr
        },
        analytic_bias: report.analytic_bias,
        mc_bias: report.mc_bias,
        mc_stderr: report.mc_stderr,
    };

    let unbiasedness = section(
        estimators::ips_bias_mc(
            &world,
            &world.true_propensities.clone(),
            &errors,
            config.trials,
            derive_seed(config.seed, 20),
        )
        .map_err(PipelineError::stage("audit"))?,
        false,
    );

    let doubled: Vec<f64> = world
        .true_propensities
        .iter()
        .map(|p| (2.0 * p).min(1.0))
        .collect();
    let bias_identity = section(
        estimators::ips_bias_mc(&world, &doubled, &errors, config.trials, derive_seed(config.seed, 21))
            .map_err(PipelineError::stage("audit"))?,
        true,
    );

    // Train the propensity pipeline on one sampled indicator and calibrate.
    let indicator = synth::sample_indicator(&world, derive_seed(config.seed, STREAM_INDICATOR));
    let mnar = synth::world_to_dataset(&world, &indicator).map_err(PipelineError::stage("audit"))?;
    let mnar = data::binarize(&mnar, config.threshold);
    let (train, validation) = data::split_mnar(
        &mnar,
        config.train_fraction,
        derive_seed(config.seed, STREAM_SPLIT),
    )
    .map_err(PipelineError::stage("audit"))?;
    let obs = data::build_observation_dataset(&train, derive_seed(config.seed, STREAM_OBS))
        .map_err(PipelineError::stage("audit"))?;
    let val_obs = data::build_observation_dataset_excluding(
        &validation,
        &train.pair_set(),
        derive_seed(config.seed, STREAM_VAL_OBS),
    )
    .map_err(PipelineError::stage("audit"))?;

    let spec = config.prop.spec(world.n_users, world.n_items);
    let model = propensity::train_propensity(
        &obs,
        &spec,
        &config.prop.train_config(),
        derive_seed(config.seed, STREAM_PROP),
    )
    .map_err(PipelineError::stage("audit"))?
    .model;

    let val_pairs: Vec<(usize, usize)> = val_obs.samples.iter().map(|s| (s.user, s.item)).collect();
    let val_labels: Vec<bool> = val_obs.samples.iter().map(|s| s.observed).collect();
    let val_raw = nn::predict(&model, &val_pairs, nn::PredictMode::Deterministic);
    let params = calib::platt_fit(&val_raw, &val_labels, config.platt_tolerance)
        .map_err(PipelineError::stage("audit"))?;

    let all_pairs: Vec<(usize, usize)> = (0..world.n_users)
        .flat_map(|u| (0..world.n_items).map(move |i| (u, i)))
        .collect();
    let raw_all = nn::predict(&model, &all_pairs, nn::PredictMode::Deterministic);
    let cal_all = calib::platt_apply(&params, &raw_all);
    let clip = |v: &[f64]| -> Vec<f64> { v.iter().map(|&x| x.max(config.floor)).collect() };
    let raw_clipped = clip(&raw_all);
    let cal_clipped = clip(&cal_all);

    let calibration_comparison = estimators::calibrated_bias_compare(
        &world.true_propensities,
        &raw_clipped,
        &cal_clipped,
        &errors,
    )
    .map_err(PipelineError::stage("audit"))?;

    // Empirical IPS error of the sampled indicator under calibrated scores.
    let mut empirical = 0.0;
    for (k, &observed) in indicator.indicator.iter().enumerate() {
        if observed {
            empirical += errors[k] / cal_clipped[k];
        }
    }
    empirical /= world.universe_size() as f64;
    let nabla_tilde = estimators::ips_bias_analytic(&world.true_propensities, &cal_clipped, &errors)
        .map_err(PipelineError::stage("audit"))?
        .nabla;
    let bound_terms = estimators::generalization_bound(
        empirical,
        &nabla_tilde,
        &cal_clipped,
        config.hypothesis_count,
        config.eta,
    )
    .map_err(PipelineError::stage("audit"))?;

    let ece_audit = estimators::ece_bound_audit(
        &world.true_propensities,
        &cal_clipped,
        &indicator.indicator,
        config.bins,
    )
    .map_err(PipelineError::stage("audit"))?;

    let report = AuditReport {
        config: config.clone(),
        unbiasedness,
        bias_identity,
        calibration_comparison,
        bound_terms,
        ece_audit,
    };
    std::fs::create_dir_all(&config.out_dir).map_err(PipelineError::stage("audit"))?;
    std::fs::write(
        config.out_dir.join("audit.json"),
        serde_json::to_string_pretty(&report).expect("audit report serializes"),
    )
    .map_err(PipelineError::stage("audit"))?;
    Ok(report)
}

/// Generates a synthetic world and writes it out as a Coat-layout dataset:
/// `train.ascii` (one MNAR indicator draw), `test.ascii` (per-user uniform
/// MAR sample), and `propensities.csv` (the ground truth).
pub fn export_synthetic_dataset(
    synth_params: &SynthDataParams,
    seed: u64,
    out_dir: &Path,
) -> Result<(), PipelineError> {
    let world = synth::generate_world(&synth_params.world_config(), derive_seed(seed, STREAM_WORLD))
        .map_err(PipelineError::stage("synth"))?;
    let indicator = synth::sample_indicator(&world, derive_seed(seed, STREAM_INDICATOR));
    let mnar = synth::world_to_dataset(&world, &indicator).map_err(PipelineError::stage("synth"))?;
    let test = synth::sample_mar_test(
        &world,
        &indicator,
        synth_params.mar_items_per_user,
        derive_seed(seed, STREAM_MAR),
    )
    .map_err(PipelineError::stage("synth"))?;
    std::fs::create_dir_all(out_dir).map_err(PipelineError::stage("synth"))?;
    data::write_coat_matrix(&mnar, &out_dir.join("train.ascii"))
        .map_err(PipelineError::stage("synth"))?;
    data::write_coat_matrix(&test, &out_dir.join("test.ascii"))
        .map_err(PipelineError::stage("synth"))?;
    synth::write_propensity_csv(&world, &out_dir.join("propensities.csv"))
        .map_err(PipelineError::stage("synth"))?;
    Ok(())
}
