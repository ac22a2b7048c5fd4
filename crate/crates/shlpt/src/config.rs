//! Experiment configuration, run-directory persistence, resume, and grid
//! search: the operational shell around the training modules.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::io::Write;
use std::path::{Path, PathBuf};

use crate::backbone::{synthetic_corpus, Backbone, BackboneConfig, PretrainConfig};
use crate::error::{Error, Result};
use crate::estimator::EstimatorParams;
use crate::evalbench::{save_accuracy_csv, MetricReport};
use crate::pool::PromptPool;
use crate::task_data::{generate_task, make_similar_pair, TaskDataset, TaskFamily, TaskSpec};
use crate::trainer::{
    run_sequence, Method, SequenceOutcome, TaskResult, TrainConfig, TrainerState,
};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Benchmark {
    #[default]
    StandardToy,
    LongToy,
    NegativeTransferToy,
    Custom,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LogLevel {
    Error,
    Warn,
    #[default]
    Info,
    Debug,
    Trace,
}

impl LogLevel {
    pub fn as_filter(self) -> &'static str {
        match self {
            LogLevel::Error => "error",
            LogLevel::Warn => "warn",
            LogLevel::Info => "info",
            LogLevel::Debug => "debug",
            LogLevel::Trace => "trace",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub schema_version: u32,
    pub benchmark: Benchmark,
    /// Task specs in training order; filled from the benchmark preset when
    /// empty.
    pub sequence: Vec<TaskSpec>,
    pub train: TrainConfig,
    pub backbone: BackboneConfig,
    pub output_dir: PathBuf,
    pub log_level: LogLevel,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            benchmark: Benchmark::StandardToy,
            sequence: Vec::new(),
            train: TrainConfig::default(),
            backbone: BackboneConfig::default(),
            output_dir: PathBuf::from("runs/default"),
            log_level: LogLevel::default(),
        }
    }
}

fn cluster_spec(task_id: &str, num_classes: usize, seed: u64) -> TaskSpec {
    TaskSpec {
        task_id: task_id.to_string(),
        num_classes,
        family: TaskFamily::ClusterClassification,
        generator_params: Default::default(),
        seed,
    }
}

/// Built-in task sequences for the named benchmarks.
pub fn benchmark_sequence(benchmark: Benchmark) -> Result<Vec<TaskSpec>> {
    match benchmark {
        Benchmark::StandardToy => {
            // a similar pair split across the sequence plus one unrelated task
            let base = cluster_spec("alpha", 3, 11);
            let (first, paired) = make_similar_pair(&base, 0.15)?;
            let distinct = cluster_spec("gamma", 3, 977);
            Ok(vec![first, distinct, paired])
        }
        Benchmark::LongToy => {
            let mut specs = Vec::new();
            for (i, seed) in [11u64, 313, 977, 1511, 2203, 2897].iter().enumerate() {
                specs.push(cluster_spec(&format!("task{}", i + 1), 3, *seed));
            }
            Ok(specs)
        }
        Benchmark::NegativeTransferToy => Ok(vec![
            cluster_spec("nt1", 2, 101),
            cluster_spec("nt2", 4, 577),
            cluster_spec("nt3", 3, 1201),
        ]),
        Benchmark::Custom => Err(Error::Config(
            "the custom benchmark requires an explicit task sequence".into(),
        )),
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.schema_version > SCHEMA_VERSION {
            return Err(Error::Config(format!(
                "config schema {} is newer than this build supports ({SCHEMA_VERSION})",
                self.schema_version
            )));
        }
        self.train.validate()?;
        self.backbone.validate()?;
        if self.output_dir.as_os_str().is_empty() {
            return Err(Error::InvalidArgument {
                field: "output_dir",
                reason: "must not be empty".into(),
            });
        }
        if self.benchmark == Benchmark::Custom && self.sequence.is_empty() {
            return Err(Error::Config(
                "the custom benchmark requires an explicit task sequence".into(),
            ));
        }
        Ok(())
    }

    /// The configured sequence, or the benchmark preset when none given.
    pub fn resolved_sequence(&self) -> Result<Vec<TaskSpec>> {
        if self.sequence.is_empty() {
            benchmark_sequence(self.benchmark)
        } else {
            Ok(self.sequence.clone())
        }
    }

    pub fn datasets(&self) -> Result<Vec<TaskDataset>> {
        self.resolved_sequence()?
            .iter()
            .map(|spec| generate_task(spec, self.backbone.vocab_size))
            .collect()
    }

    /// Content hash of the canonical JSON form, for resume checks.
    pub fn content_hash(&self) -> Result<String> {
        let json = serde_json::to_string(self)?;
        let mut hasher = Sha256::new();
        hasher.update(json.as_bytes());
        Ok(hex::encode(hasher.finalize()))
    }
}

/// Loads and fully validates a config file. Unknown keys are rejected and
/// the negative-transfer benchmark raises the partition threshold to its
/// documented default unless the file sets one explicitly.
pub fn load_config(path: &Path) -> Result<ExperimentConfig> {
    let text = std::fs::read_to_string(path)?;
    let raw: serde_json::Value = serde_json::from_str(&text)?;
    let delta_explicit = raw
        .get("train")
        .and_then(|t| t.get("delta"))
        .is_some();
    let mut config: ExperimentConfig = serde_json::from_str(&text)
        .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    if config.benchmark == Benchmark::NegativeTransferToy && !delta_explicit {
        config.train.delta = 1.5;
    }
    config.validate()?;
    Ok(config)
}

/// One sequence run, with everything needed to reproduce it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub schema_version: u32,
    pub config: ExperimentConfig,
    pub config_hash: String,
    pub seed: u64,
    pub platform: String,
    pub outcome: SequenceOutcome,
    pub metrics: Option<MetricReport>,
}

pub fn platform_fingerprint() -> String {
    format!("{}-{}", std::env::consts::OS, std::env::consts::ARCH)
}

pub fn append_record(path: &Path, record: &RunRecord) -> Result<()> {
    let mut file = std::fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)?;
    writeln!(file, "{}", serde_json::to_string(record)?)?;
    Ok(())
}

pub fn read_records(path: &Path) -> Result<Vec<RunRecord>> {
    let text = std::fs::read_to_string(path)?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(Error::from))
        .collect()
}

/// Exclusive handle on an output directory. The lock file is removed when
/// the handle drops.
pub struct RunDir {
    root: PathBuf,
}

impl RunDir {
    /// Claims `root`, writing the config snapshot on first use. A second
    /// live handle (or a crash leftover) shows up as [`Error::Locked`].
    pub fn claim(root: &Path, config: &ExperimentConfig) -> Result<Self> {
        std::fs::create_dir_all(root)?;
        let lock = root.join("lock");
        match std::fs::OpenOptions::new()
            .write(true)
            .create_new(true)
            .open(&lock)
        {
            Ok(mut f) => writeln!(f, "{}", std::process::id())?,
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => {
                return Err(Error::Locked(root.display().to_string()));
            }
            Err(e) => return Err(e.into()),
        }
        let snapshot = root.join("config.json");
        if !snapshot.exists() {
            std::fs::write(&snapshot, serde_json::to_string_pretty(config)?)?;
        }
        Ok(Self {
            root: root.to_path_buf(),
        })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    /// The config this directory was created with must match byte-for-byte
    /// in content hash before resuming into it.
    pub fn verify_config(&self, config: &ExperimentConfig) -> Result<()> {
        let stored: ExperimentConfig =
            serde_json::from_str(&std::fs::read_to_string(self.root.join("config.json"))?)?;
        let expected = stored.content_hash()?;
        let actual = config.content_hash()?;
        if expected != actual {
            return Err(Error::HashMismatch { expected, actual });
        }
        Ok(())
    }

    fn seed_dir(&self, seed: u64) -> PathBuf {
        self.root.join(format!("seed_{seed}"))
    }

    /// Persists one seed's trainer state at a task boundary.
    pub fn save_state(&self, seed: u64, state: &TrainerState) -> Result<()> {
        let dir = self.seed_dir(seed);
        std::fs::create_dir_all(&dir)?;
        state.pool.save(&dir.join("pool"))?;
        match &state.estimator {
            Some(est) => est.save(&dir.join("estimator.json"))?,
            None => {
                let _ = std::fs::remove_file(dir.join("estimator.json"));
            }
        }
        let mut lines = String::new();
        for r in &state.completed {
            lines.push_str(&serde_json::to_string(r)?);
            lines.push('\n');
        }
        std::fs::write(dir.join("completed.jsonl"), lines)?;
        save_accuracy_csv(&state.accuracy_matrix, &dir.join("accuracy.csv"))?;
        Ok(())
    }

    /// Restores a seed's state; [`Error::NothingToResume`] when this seed
    /// never checkpointed.
    pub fn load_state(&self, seed: u64) -> Result<TrainerState> {
        let dir = self.seed_dir(seed);
        if !dir.join("completed.jsonl").exists() {
            return Err(Error::NothingToResume(dir.display().to_string()));
        }
        let pool = PromptPool::load(&dir.join("pool"))?;
        let estimator = if dir.join("estimator.json").exists() {
            Some(EstimatorParams::load(&dir.join("estimator.json"))?)
        } else {
            None
        };
        let completed: Vec<TaskResult> = std::fs::read_to_string(dir.join("completed.jsonl"))?
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(|l| serde_json::from_str(l).map_err(Error::from))
            .collect::<Result<_>>()?;
        let accuracy_matrix = crate::evalbench::load_accuracy_csv(&dir.join("accuracy.csv"))?;
        Ok(TrainerState {
            pool,
            estimator,
            completed,
            accuracy_matrix,
        })
    }
}

impl Drop for RunDir {
    fn drop(&mut self) {
        let _ = std::fs::remove_file(self.root.join("lock"));
    }
}

/// The frozen backbone for an experiment: pretrained once, checkpointed in
/// the output directory, and hash-verified on reload.
pub fn experiment_backbone(config: &ExperimentConfig, run_root: &Path) -> Result<Backbone> {
    let path = run_root.join("backbone.bin");
    if path.exists() {
        let model = Backbone::load(&path)?;
        if model.config != config.backbone {
            return Err(Error::Config(
                "checkpointed backbone was built with a different configuration".into(),
            ));
        }
        return Ok(model);
    }
    let corpus = synthetic_corpus(config.backbone.vocab_size, 192, 24, config.backbone.seed);
    let (model, _) = Backbone::pretrain(config.backbone.clone(), &corpus, &PretrainConfig::default())?;
    model.save(&path)?;
    Ok(model)
}

/// Per-task single-task accuracies under the same seed and data, the
/// reference point for forward-transfer scores.
pub fn per_task_baselines(
    backbone: &Backbone,
    datasets: &[TaskDataset],
    config: &TrainConfig,
    seed: u64,
) -> Result<Vec<f64>> {
    let per_task = TrainConfig {
        method: Method::PerTaskPrompts,
        ..config.clone()
    };
    let mut baselines = Vec::with_capacity(datasets.len());
    for (t, dataset) in datasets.iter().enumerate() {
        let pool = PromptPool::new();
        let mut est = None;
        let (_, result) =
            crate::trainer::train_task(backbone, &pool, &mut est, dataset, &per_task, seed, t, None)?;
        baselines.push(result.test_accuracy);
    }
    Ok(baselines)
}

/// Runs the full experiment (all configured seeds), persisting state at
/// every task boundary and appending one record per seed. With `resume`,
/// picks up each seed from its last completed task.
pub fn run_experiment(config: &ExperimentConfig, resume: bool) -> Result<Vec<RunRecord>> {
    config.validate()?;
    let datasets = config.datasets()?;
    if resume && !config.output_dir.join("config.json").exists() {
        return Err(Error::NothingToResume(config.output_dir.display().to_string()));
    }
    let dir = RunDir::claim(&config.output_dir, config)?;
    dir.verify_config(config)?;
    let backbone = experiment_backbone(config, dir.root())?;
    let config_hash = config.content_hash()?;

    let mut records = Vec::new();
    for &seed in &config.train.seeds {
        let state = if resume {
            match dir.load_state(seed) {
                Ok(s) => Some(s),
                Err(Error::NothingToResume(_)) => None,
                Err(e) => return Err(e),
            }
        } else {
            None
        };
        let mut save = |state: &TrainerState| dir.save_state(seed, state);
        let outcome = run_sequence(
            &backbone,
            &datasets,
            &config.train,
            seed,
            state,
            Some(&mut save),
        )?;
        let metrics = if datasets.len() >= 2 {
            let baselines = per_task_baselines(&backbone, &datasets, &config.train, seed)?;
            Some(MetricReport::from_matrix(&outcome.accuracy_matrix, &baselines)?)
        } else {
            None
        };
        let record = RunRecord {
            schema_version: SCHEMA_VERSION,
            config: config.clone(),
            config_hash: config_hash.clone(),
            seed,
            platform: platform_fingerprint(),
            outcome,
            metrics,
        };
        append_record(&dir.root().join("records.jsonl"), &record)?;
        records.push(record);
    }
    Ok(records)
}

/// One grid point's outcome.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GridCell {
    pub delta: f64,
    pub tau_sim: Option<f64>,
    pub mean_val_accuracy: Option<f64>,
    pub error: Option<String>,
}

/// Hyperparameter grid over the partition threshold and the similarity
/// temperature. Either axis may hold a single value.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GridSpec {
    pub delta: Vec<f64>,
    pub tau_sim: Vec<Option<f64>>,
}

/// Trains every grid point under every configured seed and picks the one
/// with the best mean validation accuracy. Failed cells are reported in
/// the table without aborting the search.
pub fn grid_search(
    base: &ExperimentConfig,
    grid: &GridSpec,
) -> Result<(ExperimentConfig, Vec<GridCell>)> {
    if grid.delta.is_empty() || grid.tau_sim.is_empty() {
        return Err(Error::InvalidArgument {
            field: "grid",
            reason: "both grid axes need at least one value".into(),
        });
    }
    let mut cells = Vec::new();
    let mut best: Option<(f64, ExperimentConfig)> = None;
    for (i, &delta) in grid.delta.iter().enumerate() {
        for (j, &tau_sim) in grid.tau_sim.iter().enumerate() {
            let mut config = base.clone();
            config.train.delta = delta;
            config.train.tau_sim = tau_sim;
            config.output_dir = base.output_dir.join(format!("grid/cell_{i}_{j}"));
            let cell = match run_experiment(&config, false) {
                Ok(records) => {
                    let accs: Vec<f64> = records
                        .iter()
                        .flat_map(|r| &r.outcome.task_results)
                        .map(|t| t.val_accuracies[t.best_epoch])
                        .collect();
                    let (mean, _) = crate::evalbench::mean_std(&accs);
                    if best.as_ref().map_or(true, |(b, _)| mean > *b) {
                        best = Some((mean, config.clone()));
                    }
                    GridCell {
                        delta,
                        tau_sim,
                        mean_val_accuracy: Some(mean),
                        error: None,
                    }
                }
                Err(e) => {
                    log::warn!("grid cell delta={delta} tau_sim={tau_sim:?} failed: {e}");
                    GridCell {
                        delta,
                        tau_sim,
                        mean_val_accuracy: None,
                        error: Some(e.to_string()),
                    }
                }
            };
            cells.push(cell);
        }
    }
    let (_, best_config) = best.ok_or_else(|| Error::Config("every grid cell failed".into()))?;
    Ok((best_config, cells))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_config(dir: &Path) -> ExperimentConfig {
        let mut config = ExperimentConfig::default();
        config.backbone = BackboneConfig {
            vocab_size: 64,
            d_model: 16,
            num_layers: 1,
            ffn_dim: 32,
            activation: crate::backbone::Activation::Relu,
            seed: 5,
            max_len: 96,
        };
        config.train.epochs = 1;
        config.train.batch_size = 4;
        config.train.prompt_length = 4;
        config.train.seeds = vec![42];
        config.train.tau_sim = Some(2.0);
        config.benchmark = Benchmark::Custom;
        config.sequence = vec![
            cluster_spec("a", 2, 3).with_param("shots", 4.0).with_param("val_per_class", 2.0)
                .with_param("test_per_class", 2.0).with_param("seq_len", 10.0),
            cluster_spec("b", 2, 9).with_param("shots", 4.0).with_param("val_per_class", 2.0)
                .with_param("test_per_class", 2.0).with_param("seq_len", 10.0),
        ];
        config.output_dir = dir.to_path_buf();
        config
    }

    #[test]
    fn defaults_match_documented_values() {
        let config = ExperimentConfig::default();
        assert_eq!(config.train.lambda_1, 0.1);
        assert_eq!(config.train.lambda_2, 0.5);
        assert_eq!(config.train.tau_hsc, 1.0);
        assert_eq!(config.train.tau_asc, 1.0);
        assert_eq!(config.train.delta, 0.06);
        assert_eq!(config.train.weight_decay, 0.01);
        assert_eq!(config.train.batch_size, 8);
        assert_eq!(config.train.learning_rate, 0.3);
        assert_eq!(config.train.seeds, vec![42, 142, 242]);
    }

    #[test]
    fn minimal_config_loads_with_defaults() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("config.json");
        std::fs::write(
            &path,
            r#"{"benchmark": "standard_toy", "output_dir": "runs/x"}"#,
        )
        .unwrap();
        let config = load_config(&path).unwrap();
        assert_eq!(config.train.delta, 0.06);
        assert_eq!(config.train.lambda_1, 0.1);
    }

    #[test]
    fn negative_transfer_benchmark_raises_the_threshold() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("config.json");
        std::fs::write(
            &path,
            r#"{"benchmark": "negative_transfer_toy", "output_dir": "runs/x"}"#,
        )
        .unwrap();
        assert_eq!(load_config(&path).unwrap().train.delta, 1.5);
        // explicit delta wins
        std::fs::write(
            &path,
            r#"{"benchmark": "negative_transfer_toy", "output_dir": "runs/x", "train": {"delta": 0.1}}"#,
        )
        .unwrap();
        assert_eq!(load_config(&path).unwrap().train.delta, 0.1);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("config.json");
        std::fs::write(&path, r#"{"benchmark": "standard_toy", "foo": 1}"#).unwrap();
        assert!(load_config(&path).is_err());
    }

    #[test]
    fn negative_delta_is_a_range_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("config.json");
        std::fs::write(
            &path,
            r#"{"benchmark": "standard_toy", "train": {"delta": -0.1}}"#,
        )
        .unwrap();
        let err = load_config(&path).unwrap_err();
        assert!(err.to_string().contains("delta"), "{err}");
    }

    #[test]
    fn benchmark_presets_resolve() {
        assert_eq!(benchmark_sequence(Benchmark::StandardToy).unwrap().len(), 3);
        assert_eq!(benchmark_sequence(Benchmark::LongToy).unwrap().len(), 6);
        assert!(benchmark_sequence(Benchmark::Custom).is_err());
    }

    #[test]
    fn lock_file_guards_the_run_dir() {
        let tmp = tempfile::tempdir().unwrap();
        let config = tiny_config(tmp.path());
        let held = RunDir::claim(tmp.path(), &config).unwrap();
        assert!(matches!(
            RunDir::claim(tmp.path(), &config),
            Err(Error::Locked(_))
        ));
        drop(held);
        RunDir::claim(tmp.path(), &config).unwrap();
    }

    #[test]
    fn resume_refuses_a_changed_config() {
        let tmp = tempfile::tempdir().unwrap();
        let config = tiny_config(tmp.path());
        {
            let dir = RunDir::claim(tmp.path(), &config).unwrap();
            dir.verify_config(&config).unwrap();
        }
        let mut edited = config.clone();
        edited.train.lambda_1 = 0.9;
        let dir = RunDir::claim(tmp.path(), &edited).unwrap();
        assert!(matches!(
            dir.verify_config(&edited),
            Err(Error::HashMismatch { .. })
        ));
    }

    #[test]
    fn fresh_dir_resume_is_an_explicit_error() {
        let tmp = tempfile::tempdir().unwrap();
        let config = tiny_config(&tmp.path().join("fresh"));
        assert!(matches!(
            run_experiment(&config, true),
            Err(Error::NothingToResume(_))
        ));
    }

    #[test]
    fn state_roundtrips_through_the_run_dir() {
        let tmp = tempfile::tempdir().unwrap();
        let config = tiny_config(tmp.path());
        let dir = RunDir::claim(tmp.path(), &config).unwrap();
        assert!(matches!(dir.load_state(42), Err(Error::NothingToResume(_))));

        let mut state = TrainerState::default();
        state
            .pool
            .append_finalized(
                crate::pool::Prompt::trainable("a", ndarray::Array2::from_elem((2, 4), 0.5))
                    .finalize(),
            )
            .unwrap();
        state.estimator = Some(EstimatorParams::init(16, 2.0, 0.06, 7).unwrap());
        state.accuracy_matrix = vec![vec![0.75]];
        state.completed.push(TaskResult {
            task_id: "a".into(),
            step_losses: vec![1.0, 0.5],
            train_losses: vec![0.75],
            val_losses: vec![0.9],
            val_accuracies: vec![0.5],
            best_epoch: 0,
            test_accuracy: 0.75,
            final_alpha: vec![],
            pool_task_ids: vec![],
            alpha_profiles: vec![],
            wall_clock_secs: 1.0,
        });
        dir.save_state(42, &state).unwrap();
        let loaded = dir.load_state(42).unwrap();
        assert_eq!(loaded.completed, state.completed);
        assert_eq!(loaded.accuracy_matrix, state.accuracy_matrix);
        assert_eq!(
            loaded.pool.get("a").unwrap().matrix(),
            state.pool.get("a").unwrap().matrix()
        );
        assert_eq!(
            loaded.estimator.as_ref().unwrap().w_down,
            state.estimator.as_ref().unwrap().w_down
        );
    }

    #[test]
    fn records_append_and_read_back() {
        let tmp = tempfile::tempdir().unwrap();
        let path = tmp.path().join("records.jsonl");
        let config = tiny_config(tmp.path());
        let record = RunRecord {
            schema_version: SCHEMA_VERSION,
            config: config.clone(),
            config_hash: config.content_hash().unwrap(),
            seed: 42,
            platform: platform_fingerprint(),
            outcome: SequenceOutcome {
                method: Method::Shlpt,
                seed: 42,
                task_results: vec![],
                accuracy_matrix: vec![],
            },
            metrics: None,
        };
        append_record(&path, &record).unwrap();
        append_record(&path, &record).unwrap();
        let records = read_records(&path).unwrap();
        assert_eq!(records.len(), 2);
        assert_eq!(records[0], record);
        assert_eq!(records[0].config_hash, records[0].config.content_hash().unwrap());
    }
}
