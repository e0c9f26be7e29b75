//! End-to-end runs driven by a [`RunConfig`]: building the task model,
//! loading or synthesising data, training into a run directory, and
//! reloading a run from its checkpoint alone.
//!
//! A run directory holds `config.txt` (the resolved configuration, seed
//! included), `metrics.jsonl` and `model.adf`.

use std::path::{Path, PathBuf};

use rand::SeedableRng;

use crate::checkpoint::Checkpoint;
use crate::config::RunConfig;
use crate::data::{self, ParaphraseExample, SentimentExample, Sonnet};
use crate::error::{Error, Result};
use crate::logging::MetricsWriter;
use crate::model::{analytic_param_budget, FfnKind, GptModel, ModelConfig, ParamBudget};
use crate::nn::{Module, Parameter, Rng};
use crate::tasks::{
    train_loop, ParaphraseCloze, RecordSink, SentimentClassifier, SonnetLm, Task, TaskKind, TrainReport,
};
use crate::tokenizer::BpeVocab;

pub const CONFIG_FILE: &str = "config.txt";
pub const METRICS_FILE: &str = "metrics.jsonl";
pub const CHECKPOINT_FILE: &str = "model.adf";

/// Seeds of the built-in synthetic splits; fixed so that every run of a
/// task sees the same toy data.
const SYNTH_TRAIN_SEED: u64 = 0x7261_696e;
const SYNTH_DEV_SEED: u64 = 0x6465_7600;

pub fn load_tokenizer(cfg: &RunConfig) -> Result<BpeVocab> {
    match (&cfg.vocab_path, &cfg.merges_path) {
        (Some(v), Some(m)) => BpeVocab::load(v, m),
        (None, None) => Ok(BpeVocab::byte_level()),
        _ => Err(Error::InvalidArgument(
            "vocab_path and merges_path must be given together".into(),
        )),
    }
}

pub fn model_config(cfg: &RunConfig, tok: &BpeVocab) -> ModelConfig {
    ModelConfig {
        vocab_size: tok.vocab_size(),
        ..cfg.model.clone()
    }
}

/// A model with the head for one task.
pub enum TaskModel {
    Sentiment(SentimentClassifier),
    Paraphrase(ParaphraseCloze),
    Sonnet(SonnetLm),
}

#[derive(Clone, Debug, PartialEq)]
pub enum Dataset {
    Sentiment(Vec<SentimentExample>),
    Paraphrase(Vec<ParaphraseExample>),
    Sonnet(Vec<Sonnet>),
}

impl Dataset {
    pub fn len(&self) -> usize {
        match self {
            Dataset::Sentiment(d) => d.len(),
            Dataset::Paraphrase(d) => d.len(),
            Dataset::Sonnet(d) => d.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Dev,
}

/// The split named by the config, or the synthetic one when no path is set.
pub fn load_split(cfg: &RunConfig, split: Split) -> Result<Dataset> {
    let (path, n, seed) = match split {
        Split::Train => (&cfg.train_path, cfg.synth_train_size, SYNTH_TRAIN_SEED),
        Split::Dev => (&cfg.dev_path, cfg.synth_dev_size, SYNTH_DEV_SEED),
    };
    load_dataset(cfg.task, path.as_deref(), n, seed)
}

pub fn load_dataset(task: TaskKind, path: Option<&Path>, synth_n: usize, seed: u64) -> Result<Dataset> {
    Ok(match (task, path) {
        (TaskKind::Sst | TaskKind::Cfimdb, Some(p)) => {
            Dataset::Sentiment(data::load_sentiment(p, task.num_classes().expect("sentiment"))?)
        }
        (TaskKind::Sst | TaskKind::Cfimdb, None) => Dataset::Sentiment(data::synth_sentiment(
            synth_n,
            task.num_classes().expect("sentiment"),
            seed,
        )?),
        (TaskKind::Paraphrase, Some(p)) => Dataset::Paraphrase(data::load_paraphrase(p)?),
        (TaskKind::Paraphrase, None) => Dataset::Paraphrase(data::synth_paraphrase(synth_n, seed)),
        (TaskKind::Sonnet, Some(p)) => Dataset::Sonnet(data::load_sonnets(p)?),
        (TaskKind::Sonnet, None) => Dataset::Sonnet(data::synth_sonnets(synth_n, seed)),
    })
}

fn mismatch(task: TaskKind) -> Error {
    Error::InvalidArgument(format!("dataset does not match task {task}"))
}

impl TaskModel {
    /// Fresh model and head, initialised from `cfg.train.seed`.
    pub fn build(cfg: &RunConfig, tok: BpeVocab) -> Result<Self> {
        let mut rng = Rng::seed_from_u64(cfg.train.seed);
        let model = GptModel::new(model_config(cfg, &tok), &mut rng)?;
        Ok(match cfg.task {
            TaskKind::Sst | TaskKind::Cfimdb => {
                TaskModel::Sentiment(SentimentClassifier::new(model, tok, cfg.task, &mut rng)?)
            }
            TaskKind::Paraphrase => TaskModel::Paraphrase(ParaphraseCloze::new(model, tok)?),
            TaskKind::Sonnet => {
                let stop = tok.eot_id();
                TaskModel::Sonnet(SonnetLm::new(model, tok, cfg.sampling_config(stop)))
            }
        })
    }

    pub fn model(&self) -> &GptModel<f32> {
        match self {
            TaskModel::Sentiment(t) => &t.model,
            TaskModel::Paraphrase(t) => &t.model,
            TaskModel::Sonnet(t) => &t.model,
        }
    }

    pub fn tokenizer(&self) -> &BpeVocab {
        match self {
            TaskModel::Sentiment(t) => &t.tokenizer,
            TaskModel::Paraphrase(t) => &t.tokenizer,
            TaskModel::Sonnet(t) => &t.tokenizer,
        }
    }

    pub fn kind(&self) -> TaskKind {
        match self {
            TaskModel::Sentiment(t) => t.kind(),
            TaskModel::Paraphrase(t) => t.kind(),
            TaskModel::Sonnet(t) => t.kind(),
        }
    }

    pub fn train(
        &self,
        train: &Dataset,
        dev: &Dataset,
        cfg: &RunConfig,
        sink: Option<&mut dyn RecordSink>,
    ) -> Result<TrainReport> {
        let t = &cfg.train;
        match (self, train, dev) {
            (TaskModel::Sentiment(m), Dataset::Sentiment(a), Dataset::Sentiment(b)) => train_loop(m, a, b, t, sink),
            (TaskModel::Paraphrase(m), Dataset::Paraphrase(a), Dataset::Paraphrase(b)) => train_loop(m, a, b, t, sink),
            (TaskModel::Sonnet(m), Dataset::Sonnet(a), Dataset::Sonnet(b)) => train_loop(m, a, b, t, sink),
            _ => Err(mismatch(self.kind())),
        }
    }

    pub fn evaluate(&self, data: &Dataset) -> Result<f64> {
        match (self, data) {
            (TaskModel::Sentiment(m), Dataset::Sentiment(d)) => m.evaluate(d),
            (TaskModel::Paraphrase(m), Dataset::Paraphrase(d)) => m.evaluate(d),
            (TaskModel::Sonnet(m), Dataset::Sonnet(d)) => m.evaluate(d),
            _ => Err(mismatch(self.kind())),
        }
    }
}

impl Module<f32> for TaskModel {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a Parameter<f32>)) {
        match self {
            TaskModel::Sentiment(t) => t.visit(f),
            TaskModel::Paraphrase(t) => t.visit(f),
            TaskModel::Sonnet(t) => t.visit(f),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunSummary {
    pub out_dir: PathBuf,
    pub report: TrainReport,
    pub total_params: usize,
    pub trainable_params: usize,
    /// Parameters copied from `init_from`, if set.
    pub initialised_from: Option<usize>,
}

/// Configuration stored in checkpoints. The run directory is left out so
/// that identical runs written to different places produce identical files.
pub fn snapshot_pairs(cfg: &RunConfig) -> Vec<(String, String)> {
    cfg.to_pairs().into_iter().filter(|(k, _)| k != "out_dir").collect()
}

/// Trains per `cfg` and writes the run directory.
pub fn train(cfg: &RunConfig) -> Result<RunSummary> {
    std::fs::create_dir_all(&cfg.out_dir)?;
    std::fs::write(cfg.out_dir.join(CONFIG_FILE), cfg.to_text())?;
    let task = TaskModel::build(cfg, load_tokenizer(cfg)?)?;
    let initialised_from = match &cfg.init_from {
        Some(p) => Some(Checkpoint::load(p)?.init_matching(&task)?),
        None => None,
    };
    let train_set = load_split(cfg, Split::Train)?;
    let dev_set = load_split(cfg, Split::Dev)?;
    let mut writer = MetricsWriter::create(&cfg.out_dir.join(METRICS_FILE))?;
    let report = task.train(&train_set, &dev_set, cfg, Some(&mut writer))?;
    writer.flush()?;
    Checkpoint::capture(&task, snapshot_pairs(cfg), cfg.train.seed).save(&cfg.out_dir.join(CHECKPOINT_FILE))?;
    Ok(RunSummary {
        out_dir: cfg.out_dir.clone(),
        report,
        total_params: task.param_count(),
        trainable_params: task.trainable_param_count(),
        initialised_from,
    })
}

/// Rebuilds the configuration and model stored in a checkpoint.
pub fn load_run(checkpoint: &Path) -> Result<(RunConfig, TaskModel)> {
    let ck = Checkpoint::load(checkpoint)?;
    let mut cfg = RunConfig::default();
    cfg.apply(&ck.header.config)?;
    cfg.resolve()?;
    let task = TaskModel::build(&cfg, load_tokenizer(&cfg)?)?;
    ck.restore(&task)?;
    Ok((cfg, task))
}

/// Task metric of a saved run on `data_path`, or on its dev split.
pub fn evaluate(checkpoint: &Path, data_path: Option<&Path>) -> Result<(TaskKind, f64)> {
    let (cfg, task) = load_run(checkpoint)?;
    let data = match data_path {
        Some(p) => load_dataset(cfg.task, Some(p), 0, 0)?,
        None => load_split(&cfg, Split::Dev)?,
    };
    Ok((cfg.task, task.evaluate(&data)?))
}

/// Continuation of `prompt` from the language-model head of a saved run.
/// Sampling settings default to the stored configuration.
pub fn generate(checkpoint: &Path, prompt: &str, overrides: &[(String, String)]) -> Result<String> {
    let (mut cfg, task) = load_run(checkpoint)?;
    cfg.apply(overrides)?;
    let tok = task.tokenizer();
    let ids = tok.encode(prompt);
    let sampling = cfg.sampling_config(tok.eot_id());
    let out = task.model().generate(&ids, &sampling)?;
    let mut new = &out[ids.len()..];
    if let Some(i) = new.iter().position(|&t| Some(t) == sampling.stop_token) {
        new = &new[..i];
    }
    tok.decode(new)
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamRow {
    pub ffn_kind: FfnKind,
    /// Backbone counts by enumeration.
    pub total: usize,
    pub trainable: usize,
    /// Closed-form backbone counts.
    pub analytic: ParamBudget,
    /// Task-head parameters on top of the backbone (always trainable).
    pub head: usize,
}

/// Backbone parameter counts of every feed-forward variant at the sizes in
/// `cfg`.
pub fn param_table(cfg: &RunConfig) -> Result<Vec<ParamRow>> {
    let tok = load_tokenizer(cfg)?;
    let head = cfg.task.num_classes().map_or(0, |c| c * cfg.model.d_model + c);
    FfnKind::ALL
        .into_iter()
        .map(|kind| {
            let mc = ModelConfig {
                ffn_kind: kind,
                ..model_config(cfg, &tok)
            };
            let model = GptModel::<f32>::new(mc.clone(), &mut Rng::seed_from_u64(cfg.train.seed))?;
            Ok(ParamRow {
                ffn_kind: kind,
                total: model.param_count(),
                trainable: model.trainable_param_count(),
                analytic: analytic_param_budget(&mc)?,
                head,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::logging::read_metrics;

    fn small(dir: &Path, extra: &str) -> RunConfig {
        let text = format!(
            "d_model = 16\nn_layers = 1\nn_heads = 2\nmax_seq_len = 48\nffn_mult = 2\n\
             dropout_p = 0.1\nlora_r = 2\nlora_alpha = 4\ngat_heads = 2\n\
             learning_rate = 0.003\nepochs = 2\nbatch_size = 8\nseed = 5\n\
             synth_train_size = 16\nsynth_dev_size = 8\nout_dir = {}\n{extra}",
            dir.display()
        );
        RunConfig::from_text(&text).unwrap()
    }

    #[test]
    fn run_directory_reproduces_bit_exactly() {
        let root = tempfile::tempdir().unwrap();
        let a = small(&root.path().join("a"), "ffn_kind = lora\nweight_decay = 0.2");
        let b = RunConfig {
            out_dir: root.path().join("b"),
            ..a.clone()
        };
        train(&a).unwrap();
        train(&b).unwrap();
        let read = |c: &RunConfig, f: &str| std::fs::read(c.out_dir.join(f)).unwrap();
        assert!(read(&a, CHECKPOINT_FILE) == read(&b, CHECKPOINT_FILE));
        assert!(read(&a, METRICS_FILE) == read(&b, METRICS_FILE));

        let echoed = std::fs::read_to_string(a.out_dir.join(CONFIG_FILE)).unwrap();
        let c = RunConfig {
            out_dir: root.path().join("c"),
            ..RunConfig::from_text(&echoed).unwrap()
        };
        train(&c).unwrap();
        assert!(read(&a, CHECKPOINT_FILE) == read(&c, CHECKPOINT_FILE));
        assert!(read(&a, METRICS_FILE) == read(&c, METRICS_FILE));
    }

    #[test]
    fn saved_runs_evaluate_without_the_config_file() {
        let root = tempfile::tempdir().unwrap();
        let cfg = small(root.path(), "task = cfimdb");
        let summary = train(&cfg).unwrap();
        let records = read_metrics(&cfg.out_dir.join(METRICS_FILE)).unwrap();
        let dev: Vec<f64> = records.iter().filter(|r| r.split == "dev").map(|r| r.value).collect();
        assert_eq!(dev.len(), 2);
        let (task, acc) = evaluate(&cfg.out_dir.join(CHECKPOINT_FILE), None).unwrap();
        assert_eq!(task, TaskKind::Cfimdb);
        assert_eq!(Some(acc), summary.report.best_dev);
        let text = generate(
            &cfg.out_dir.join(CHECKPOINT_FILE),
            "the film",
            &[
                ("max_new_tokens".into(), "5".into()),
                ("temperature".into(), "0".into()),
            ],
        )
        .unwrap();
        assert!(text.len() <= 4 * 5);
    }

    #[test]
    fn init_from_copies_matching_parameters() {
        let root = tempfile::tempdir().unwrap();
        let dense = small(&root.path().join("dense"), "epochs = 1");
        train(&dense).unwrap();
        let adapted = small(
            &root.path().join("adapted"),
            &format!(
                "epochs = 1\nffn_kind = lora\ninit_from = {}",
                dense.out_dir.join(CHECKPOINT_FILE).display()
            ),
        );
        let summary = train(&adapted).unwrap();
        let (_, dense_model) = load_run(&dense.out_dir.join(CHECKPOINT_FILE)).unwrap();
        assert_eq!(summary.initialised_from, Some(dense_model.parameters().len()));
        let (_, model) = load_run(&adapted.out_dir.join(CHECKPOINT_FILE)).unwrap();
        assert_eq!(
            model.model().wte.tensor().to_vec(),
            dense_model.model().wte.tensor().to_vec()
        );
    }

    #[test]
    fn dataset_task_mismatch_is_an_error() {
        let root = tempfile::tempdir().unwrap();
        let cfg = small(root.path(), "");
        let task = TaskModel::build(&cfg, BpeVocab::byte_level()).unwrap();
        let wrong = Dataset::Sonnet(data::synth_sonnets(1, 0));
        assert!(task.evaluate(&wrong).is_err());
    }

    #[test]
    fn param_table_agrees_with_the_closed_form() {
        let root = tempfile::tempdir().unwrap();
        let rows = param_table(&small(root.path(), "")).unwrap();
        assert_eq!(rows.len(), 6);
        for r in &rows {
            assert_eq!(r.total, r.analytic.total, "{:?}", r.ffn_kind);
            assert_eq!(r.trainable, r.analytic.trainable, "{:?}", r.ffn_kind);
            assert_eq!(r.head, 5 * 16 + 5);
        }
        let mlp = &rows[0];
        let lora = rows.iter().find(|r| r.ffn_kind == FfnKind::Lora).unwrap();
        assert!(lora.trainable < mlp.trainable);
    }
}
