//! Run configuration: a flat `key = value` table layered as
//! defaults, then a config file, then command-line overrides.

use std::fmt::Display;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::model::{ModelConfig, SamplingConfig};
use crate::tasks::{TaskKind, TrainConfig};

/// Every accepted key with its meaning. Defaults come from
/// [`RunConfig::default`].
pub const KEYS: &[(&str, &str)] = &[
    ("task", "sst | cfimdb | paraphrase | sonnet"),
    ("ffn_kind", "mlp | lora | kan | kan_lora | gat | graph_lora"),
    ("d_model", "hidden width"),
    ("n_layers", "transformer blocks"),
    ("n_heads", "attention heads per block"),
    ("max_seq_len", "longest sequence the model accepts"),
    ("ffn_mult", "MLP and KAN hidden width as a multiple of d_model"),
    ("dropout_p", "dropout on embeddings, attention and residual branches"),
    ("lora_r", "adapter rank"),
    ("lora_alpha", "adapter scale numerator; the update is scaled by alpha/r"),
    ("lora_dropout", "dropout on the adapter input"),
    (
        "lora_targets",
        "comma-separated subset of q,k,v,o,ffn adapted by `lora`",
    ),
    ("kan_grid_size", "spline intervals per input"),
    ("kan_spline_order", "spline degree"),
    ("kan_grid_min", "lower end of the spline grid"),
    ("kan_grid_max", "upper end of the spline grid"),
    ("kan_scale_base", "weight of the SiLU base path"),
    ("kan_scale_spline", "weight of the spline path"),
    ("gat_heads", "graph attention heads"),
    ("gat_d_head", "per-head width; 0 means d_model / gat_heads"),
    ("gat_window", "token graph neighbourhood radius"),
    ("gat_leaky_slope", "LeakyReLU slope on attention scores"),
    ("gat_dropout", "dropout on graph attention coefficients"),
    ("learning_rate", "AdamW step size"),
    ("weight_decay", "decoupled weight decay on matrices"),
    ("epochs", "passes over the training set; 0 picks the task default"),
    ("batch_size", "examples per optimizer step"),
    ("seed", "seed for initialisation, batch order, dropout and sampling"),
    (
        "early_stop_patience",
        "dev evaluations without improvement before stopping; 0 disables",
    ),
    ("max_steps", "cap on optimizer steps; 0 means none"),
    ("grad_clip", "global gradient norm bound; 0 disables"),
    ("eval_train", "also score the training split each epoch"),
    ("temperature", "sampling temperature; 0 is greedy"),
    ("top_p", "nucleus mass kept when sampling"),
    ("max_new_tokens", "tokens generated per completion"),
    ("train_path", "training file; empty uses the built-in synthesiser"),
    ("dev_path", "development file; empty uses the built-in synthesiser"),
    (
        "vocab_path",
        "GPT-2 style encoder.json; empty uses the byte-level vocabulary",
    ),
    ("merges_path", "GPT-2 style vocab.bpe merges"),
    ("init_from", "checkpoint whose matching parameters initialise the model"),
    ("out_dir", "run directory for config echo, checkpoint and metrics"),
    ("synth_train_size", "synthetic training examples"),
    ("synth_dev_size", "synthetic development examples"),
];

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub task: TaskKind,
    /// `vocab_size` is taken from the tokenizer when the model is built.
    pub model: ModelConfig,
    /// `epochs == 0` resolves to the task default.
    pub train: TrainConfig,
    /// `seed` and `stop_token` are filled in at generation time.
    pub sampling: SamplingConfig,
    pub train_path: Option<PathBuf>,
    pub dev_path: Option<PathBuf>,
    pub vocab_path: Option<PathBuf>,
    pub merges_path: Option<PathBuf>,
    pub init_from: Option<PathBuf>,
    pub out_dir: PathBuf,
    pub synth_train_size: usize,
    pub synth_dev_size: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            task: TaskKind::Sst,
            model: ModelConfig::default(),
            train: TrainConfig {
                epochs: 0,
                ..TrainConfig::default()
            },
            sampling: SamplingConfig::default(),
            train_path: None,
            dev_path: None,
            vocab_path: None,
            merges_path: None,
            init_from: None,
            out_dir: PathBuf::from("runs/default"),
            synth_train_size: 64,
            synth_dev_size: 16,
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str, expected: &'static str) -> Result<T> {
    value.parse().map_err(|_| Error::ConfigType {
        key: key.to_string(),
        value: value.to_string(),
        expected,
    })
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(Error::ConfigType {
            key: key.to_string(),
            value: value.to_string(),
            expected: "a boolean",
        }),
    }
}

fn parse_path(value: &str) -> Option<PathBuf> {
    (!value.is_empty()).then(|| PathBuf::from(value))
}

fn show_path(p: &Option<PathBuf>) -> String {
    p.as_ref().map(|p| p.display().to_string()).unwrap_or_default()
}

/// Nearest accepted key by edit distance.
pub fn suggest_key(key: &str) -> Option<&'static str> {
    KEYS.iter()
        .map(|(k, _)| (strsim::levenshtein(key, k), *k))
        .min()
        .filter(|(d, k)| *d <= (k.len() / 2).max(2))
        .map(|(_, k)| k)
}

/// `key = value` pairs, skipping blank lines and `#` comments.
pub fn parse_pairs(text: &str, path: &Path) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            msg: format!("expected `key = value`, found `{line}`"),
        })?;
        out.push((k.trim().to_string(), v.trim().to_string()));
    }
    Ok(out)
}

impl RunConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        let m = &mut self.model;
        let t = &mut self.train;
        match key {
            "task" => self.task = parse(key, v, "a task name")?,
            "ffn_kind" => m.ffn_kind = parse(key, v, "an ffn kind")?,
            "d_model" => m.d_model = parse(key, v, "an unsigned integer")?,
            "n_layers" => m.n_layers = parse(key, v, "an unsigned integer")?,
            "n_heads" => m.n_heads = parse(key, v, "an unsigned integer")?,
            "max_seq_len" => m.max_seq_len = parse(key, v, "an unsigned integer")?,
            "ffn_mult" => m.ffn_mult = parse(key, v, "an unsigned integer")?,
            "dropout_p" => m.dropout_p = parse(key, v, "a real number")?,
            "lora_r" => m.lora.r = parse(key, v, "an unsigned integer")?,
            "lora_alpha" => m.lora.alpha = parse(key, v, "a real number")?,
            "lora_dropout" => m.lora.dropout = parse(key, v, "a real number")?,
            "lora_targets" => m.lora_targets = parse(key, v, "a list drawn from q,k,v,o,ffn")?,
            "kan_grid_size" => m.kan.grid_size = parse(key, v, "an unsigned integer")?,
            "kan_spline_order" => m.kan.spline_order = parse(key, v, "an unsigned integer")?,
            "kan_grid_min" => m.kan.grid_min = parse(key, v, "a real number")?,
            "kan_grid_max" => m.kan.grid_max = parse(key, v, "a real number")?,
            "kan_scale_base" => m.kan.scale_base = parse(key, v, "a real number")?,
            "kan_scale_spline" => m.kan.scale_spline = parse(key, v, "a real number")?,
            "gat_heads" => m.gat.heads = parse(key, v, "an unsigned integer")?,
            "gat_d_head" => {
                let d: usize = parse(key, v, "an unsigned integer")?;
                m.gat.d_head = (d > 0).then_some(d);
            }
            "gat_window" => m.gat.window = parse(key, v, "an unsigned integer")?,
            "gat_leaky_slope" => m.gat.leaky_slope = parse(key, v, "a real number")?,
            "gat_dropout" => m.gat.dropout = parse(key, v, "a real number")?,
            "learning_rate" => t.learning_rate = parse(key, v, "a real number")?,
            "weight_decay" => t.weight_decay = parse(key, v, "a real number")?,
            "epochs" => t.epochs = parse(key, v, "an unsigned integer")?,
            "batch_size" => t.batch_size = parse(key, v, "an unsigned integer")?,
            "seed" => t.seed = parse(key, v, "an unsigned integer")?,
            "early_stop_patience" => t.early_stop_patience = parse(key, v, "an unsigned integer")?,
            "max_steps" => t.max_steps = parse(key, v, "an unsigned integer")?,
            "grad_clip" => t.grad_clip = parse(key, v, "a real number")?,
            "eval_train" => t.eval_train = parse_bool(key, v)?,
            "temperature" => self.sampling.temperature = parse(key, v, "a real number")?,
            "top_p" => self.sampling.top_p = parse(key, v, "a real number")?,
            "max_new_tokens" => self.sampling.max_new_tokens = parse(key, v, "an unsigned integer")?,
            "train_path" => self.train_path = parse_path(v),
            "dev_path" => self.dev_path = parse_path(v),
            "vocab_path" => self.vocab_path = parse_path(v),
            "merges_path" => self.merges_path = parse_path(v),
            "init_from" => self.init_from = parse_path(v),
            "out_dir" => self.out_dir = PathBuf::from(v),
            "synth_train_size" => self.synth_train_size = parse(key, v, "an unsigned integer")?,
            "synth_dev_size" => self.synth_dev_size = parse(key, v, "an unsigned integer")?,
            _ => {
                return Err(Error::UnknownConfigKey {
                    key: key.to_string(),
                    suggestion: suggest_key(key).map(str::to_string),
                })
            }
        }
        Ok(())
    }

    pub fn get(&self, key: &str) -> Option<String> {
        fn s(v: impl Display) -> Option<String> {
            Some(v.to_string())
        }
        let m = &self.model;
        let t = &self.train;
        match key {
            "task" => s(self.task),
            "ffn_kind" => s(m.ffn_kind),
            "d_model" => s(m.d_model),
            "n_layers" => s(m.n_layers),
            "n_heads" => s(m.n_heads),
            "max_seq_len" => s(m.max_seq_len),
            "ffn_mult" => s(m.ffn_mult),
            "dropout_p" => s(m.dropout_p),
            "lora_r" => s(m.lora.r),
            "lora_alpha" => s(m.lora.alpha),
            "lora_dropout" => s(m.lora.dropout),
            "lora_targets" => s(&m.lora_targets),
            "kan_grid_size" => s(m.kan.grid_size),
            "kan_spline_order" => s(m.kan.spline_order),
            "kan_grid_min" => s(m.kan.grid_min),
            "kan_grid_max" => s(m.kan.grid_max),
            "kan_scale_base" => s(m.kan.scale_base),
            "kan_scale_spline" => s(m.kan.scale_spline),
            "gat_heads" => s(m.gat.heads),
            "gat_d_head" => s(m.gat.d_head.unwrap_or(0)),
            "gat_window" => s(m.gat.window),
            "gat_leaky_slope" => s(m.gat.leaky_slope),
            "gat_dropout" => s(m.gat.dropout),
            "learning_rate" => s(t.learning_rate),
            "weight_decay" => s(t.weight_decay),
            "epochs" => s(t.epochs),
            "batch_size" => s(t.batch_size),
            "seed" => s(t.seed),
            "early_stop_patience" => s(t.early_stop_patience),
            "max_steps" => s(t.max_steps),
            "grad_clip" => s(t.grad_clip),
            "eval_train" => s(t.eval_train),
            "temperature" => s(self.sampling.temperature),
            "top_p" => s(self.sampling.top_p),
            "max_new_tokens" => s(self.sampling.max_new_tokens),
            "train_path" => Some(show_path(&self.train_path)),
            "dev_path" => Some(show_path(&self.dev_path)),
            "vocab_path" => Some(show_path(&self.vocab_path)),
            "merges_path" => Some(show_path(&self.merges_path)),
            "init_from" => Some(show_path(&self.init_from)),
            "out_dir" => s(self.out_dir.display()),
            "synth_train_size" => s(self.synth_train_size),
            "synth_dev_size" => s(self.synth_dev_size),
            _ => None,
        }
    }

    pub fn apply<K: AsRef<str>, V: AsRef<str>>(&mut self, pairs: &[(K, V)]) -> Result<()> {
        pairs.iter().try_for_each(|(k, v)| self.set(k.as_ref(), v.as_ref()))
    }

    /// Defaults, then `file`, then `overrides`, then task-dependent
    /// resolution and validation.
    pub fn load(file: Option<&Path>, overrides: &[(String, String)]) -> Result<Self> {
        let mut cfg = Self::default();
        if let Some(path) = file {
            let text = std::fs::read_to_string(path)?;
            cfg.apply(&parse_pairs(&text, path)?)?;
        }
        cfg.apply(overrides)?;
        cfg.resolve()?;
        Ok(cfg)
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        cfg.apply(&parse_pairs(text, Path::new("<config>"))?)?;
        cfg.resolve()?;
        Ok(cfg)
    }

    /// Fills task defaults and checks cross-field constraints.
    pub fn resolve(&mut self) -> Result<()> {
        if self.train.epochs == 0 {
            self.train.epochs = self.task.default_epochs();
        }
        self.train.validate()?;
        if !(0.0..1.0).contains(&self.model.lora.dropout) || !(0.0..1.0).contains(&self.model.gat.dropout) {
            return Err(Error::InvalidArgument("dropout rates must lie in [0, 1)".into()));
        }
        if self.vocab_path.is_some() != self.merges_path.is_some() {
            return Err(Error::InvalidArgument(
                "vocab_path and merges_path must be given together".into(),
            ));
        }
        let m = &self.model;
        if m.ffn_kind.is_adapter() && m.lora.r == 0 {
            return Err(Error::InvalidArgument("lora_r must be ≥ 1".into()));
        }
        let mut probe = m.clone();
        probe.vocab_size = probe.vocab_size.max(1);
        probe.validate()
    }

    pub fn to_pairs(&self) -> Vec<(String, String)> {
        KEYS.iter()
            .map(|(k, _)| (k.to_string(), self.get(k).expect("every key has a getter")))
            .collect()
    }

    /// Resolved configuration as parseable `key = value` text.
    pub fn to_text(&self) -> String {
        self.to_pairs().iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    /// Sampling settings with the run seed and an optional stop token.
    pub fn sampling_config(&self, stop_token: Option<u32>) -> SamplingConfig {
        SamplingConfig {
            seed: self.train.seed,
            stop_token,
            ..self.sampling.clone()
        }
    }
}
