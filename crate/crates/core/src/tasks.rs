//! Task heads on top of [`GptModel`] and the shared training loop.
//!
//! Sentiment uses a linear head on the last real token. Paraphrase detection
//! is a cloze: the model's next-token logits for the two verbalizer tokens
//! after a fixed prompt. Sonnets train the LM head directly and are scored by
//! corpus CHRF of completions generated from each held-out poem's first
//! three lines.

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;

use crate::data::{ParaphraseExample, SentimentExample, Sonnet};
use crate::error::{Error, Result};
use crate::logging::{MetricRecord, MetricsWriter};
use crate::metrics::{accuracy, argmax, corpus_chrf, ChrfParams};
use crate::model::{FfnKind, GptModel, SamplingConfig, TokenBatch};
use crate::nn::{Linear, Mode, Module, Parameter, Rng};
use crate::optim::{clip_grad_norm, AdamW, AdamWConfig};
use crate::tensor::{no_grad, Tensor};
use crate::tokenizer::BpeVocab;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum TaskKind {
    Sst,
    Cfimdb,
    Paraphrase,
    Sonnet,
}

impl TaskKind {
    pub const ALL: [TaskKind; 4] = [TaskKind::Sst, TaskKind::Cfimdb, TaskKind::Paraphrase, TaskKind::Sonnet];

    pub fn as_str(self) -> &'static str {
        match self {
            TaskKind::Sst => "sst",
            TaskKind::Cfimdb => "cfimdb",
            TaskKind::Paraphrase => "paraphrase",
            TaskKind::Sonnet => "sonnet",
        }
    }

    /// Classes of the sentiment head; `None` for the other tasks.
    pub fn num_classes(self) -> Option<usize> {
        match self {
            TaskKind::Sst => Some(5),
            TaskKind::Cfimdb => Some(2),
            _ => None,
        }
    }

    pub fn default_epochs(self) -> usize {
        match self {
            TaskKind::Paraphrase => 4,
            _ => 10,
        }
    }

    pub fn metric_name(self) -> &'static str {
        match self {
            TaskKind::Sonnet => "chrf",
            _ => "accuracy",
        }
    }
}

impl fmt::Display for TaskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for TaskKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        TaskKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown task `{s}` (sst, cfimdb, paraphrase, sonnet)")))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// Dev evaluations without improvement before stopping; 0 disables.
    pub early_stop_patience: usize,
    /// Hard cap on optimizer steps; 0 means no cap.
    pub max_steps: usize,
    pub grad_clip: f64,
    /// Also score the training split after each epoch.
    pub eval_train: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-5,
            weight_decay: 0.2,
            epochs: 10,
            batch_size: 8,
            seed: 0,
            early_stop_patience: 0,
            max_steps: 0,
            grad_clip: 1.0,
            eval_train: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let c = self;
        if !(c.learning_rate >= 0.0 && c.weight_decay >= 0.0 && c.grad_clip >= 0.0) {
            return Err(Error::InvalidArgument(
                "learning_rate, weight_decay and grad_clip must be ≥ 0".into(),
            ));
        }
        if c.batch_size == 0 {
            return Err(Error::InvalidArgument("batch_size must be ≥ 1".into()));
        }
        Ok(())
    }
}

/// A model plus the head and scoring rule for one task.
pub trait Task: Module<f32> {
    type Example;

    fn kind(&self) -> TaskKind;

    fn ffn_kind(&self) -> FfnKind;

    /// Mean loss over `batch`.
    fn loss(&self, batch: &[&Self::Example], mode: &mut Mode) -> Result<Tensor<f32>>;

    /// Task metric on `examples` in eval mode; higher is better.
    fn evaluate(&self, examples: &[Self::Example]) -> Result<f64>;
}

/// Tokens of `text`, clipped to the first `max_len`, never empty.
fn encode_clipped(tok: &BpeVocab, text: &str, max_len: usize) -> Vec<u32> {
    let mut ids = tok.encode(text);
    ids.truncate(max_len);
    if ids.is_empty() {
        ids.push(pad_id(tok));
    }
    ids
}

fn pad_id(tok: &BpeVocab) -> u32 {
    tok.eot_id().unwrap_or(0)
}

const EVAL_CHUNK: usize = 32;

pub struct SentimentClassifier {
    pub model: GptModel<f32>,
    pub head: Linear<f32>,
    pub tokenizer: BpeVocab,
    kind: TaskKind,
}

impl SentimentClassifier {
    /// Adds a fresh trainable head named `head`.
    pub fn new(model: GptModel<f32>, tokenizer: BpeVocab, kind: TaskKind, rng: &mut Rng) -> Result<Self> {
        let classes = kind
            .num_classes()
            .ok_or_else(|| Error::InvalidArgument(format!("{kind} is not a sentiment task")))?;
        let head = Linear::new("head", model.config.d_model, classes, true, rng);
        Ok(Self {
            model,
            head,
            tokenizer,
            kind,
        })
    }

    pub fn num_classes(&self) -> usize {
        self.head.out_dim()
    }

    /// Class logits `(B, C)`.
    pub fn logits(&self, sentences: &[&str], mode: &mut Mode) -> Result<Tensor<f32>> {
        let max = self.model.config.max_seq_len;
        let seqs: Vec<Vec<u32>> = sentences
            .iter()
            .map(|s| encode_clipped(&self.tokenizer, s, max))
            .collect();
        let batch = TokenBatch::from_sequences(&seqs, pad_id(&self.tokenizer))?;
        self.head.forward(&self.model.last_token_hidden(&batch, mode)?)
    }

    pub fn predict(&self, sentences: &[&str]) -> Result<Vec<usize>> {
        let mut out = Vec::with_capacity(sentences.len());
        for chunk in sentences.chunks(EVAL_CHUNK) {
            let logits = no_grad(|| self.logits(chunk, &mut Mode::Eval))?;
            let c = self.num_classes();
            out.extend(logits.to_f64_vec().chunks(c).map(argmax));
        }
        Ok(out)
    }
}

impl Module<f32> for SentimentClassifier {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a Parameter<f32>)) {
        self.model.visit(f);
        self.head.visit(f);
    }
}

impl Task for SentimentClassifier {
    type Example = SentimentExample;

    fn kind(&self) -> TaskKind {
        self.kind
    }

    fn ffn_kind(&self) -> FfnKind {
        self.model.config.ffn_kind
    }

    fn loss(&self, batch: &[&SentimentExample], mode: &mut Mode) -> Result<Tensor<f32>> {
        let c = self.num_classes();
        if let Some(bad) = batch.iter().find(|e| e.label >= c) {
            return Err(Error::IndexOutOfRange {
                what: "class label",
                index: bad.label,
                size: c,
            });
        }
        let sentences: Vec<&str> = batch.iter().map(|e| e.sentence.as_str()).collect();
        let labels: Vec<usize> = batch.iter().map(|e| e.label).collect();
        self.logits(&sentences, mode)?.cross_entropy(&labels)
    }

    fn evaluate(&self, examples: &[SentimentExample]) -> Result<f64> {
        let sentences: Vec<&str> = examples.iter().map(|e| e.sentence.as_str()).collect();
        let labels: Vec<usize> = examples.iter().map(|e| e.label).collect();
        accuracy(&self.predict(&sentences)?, &labels)
    }
}

/// Answer tokens for the cloze prompt.
///
/// `prefix` is the shared leading tokens of the encodings of `" yes"` and
/// `" no"`; it is appended to every prompt so that `yes` and `no` are the
/// first tokens on which the two answers differ.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Verbalizer {
    pub prefix: Vec<u32>,
    pub yes: u32,
    pub no: u32,
}

impl Verbalizer {
    pub fn new(tok: &BpeVocab) -> Result<Self> {
        let y = tok.encode(" yes");
        let n = tok.encode(" no");
        let common = y.iter().zip(&n).take_while(|(a, b)| a == b).count();
        match (y.get(common), n.get(common)) {
            (Some(&yes), Some(&no)) => Ok(Self {
                prefix: y[..common].to_vec(),
                yes,
                no,
            }),
            _ => Err(Error::Vocab("\" yes\" and \" no\" do not diverge".into())),
        }
    }
}

pub const CLOZE_TEMPLATE: &str = "Question 1: {q1}\nQuestion 2: {q2}\nAre these questions paraphrases? Answer:";

pub fn cloze_prompt(q1: &str, q2: &str) -> String {
    CLOZE_TEMPLATE.replace("{q1}", q1).replace("{q2}", q2)
}

pub struct ParaphraseCloze {
    pub model: GptModel<f32>,
    pub tokenizer: BpeVocab,
    pub verbalizer: Verbalizer,
}

impl ParaphraseCloze {
    pub fn new(model: GptModel<f32>, tokenizer: BpeVocab) -> Result<Self> {
        let verbalizer = Verbalizer::new(&tokenizer)?;
        Ok(Self {
            model,
            tokenizer,
            verbalizer,
        })
    }

    /// Prompt tokens followed by the verbalizer prefix.
    pub fn prompt_ids(&self, q1: &str, q2: &str) -> Result<Vec<u32>> {
        let mut ids = self.tokenizer.encode(&cloze_prompt(q1, q2));
        ids.extend_from_slice(&self.verbalizer.prefix);
        let max = self.model.config.max_seq_len;
        if ids.len() > max {
            return Err(Error::PromptTooLong { len: ids.len(), max });
        }
        Ok(ids)
    }

    /// Logits `(B, 2)` over `[yes, no]`.
    pub fn answer_logits(&self, pairs: &[(&str, &str)], mode: &mut Mode) -> Result<Tensor<f32>> {
        let seqs = pairs
            .iter()
            .map(|(a, b)| self.prompt_ids(a, b))
            .collect::<Result<Vec<_>>>()?;
        let batch = TokenBatch::from_sequences(&seqs, pad_id(&self.tokenizer))?;
        let h = self.model.last_token_hidden(&batch, mode)?;
        let rows = self
            .model
            .wte
            .tensor()
            .gather_rows(&[self.verbalizer.yes as usize, self.verbalizer.no as usize])?;
        h.matmul_t(&rows)
    }

    /// `[p(yes), p(no)]` for one pair.
    pub fn probabilities(&self, q1: &str, q2: &str) -> Result<[f64; 2]> {
        let logits = no_grad(|| self.answer_logits(&[(q1, q2)], &mut Mode::Eval))?;
        let p = logits.softmax().to_f64_vec();
        Ok([p[0], p[1]])
    }

    pub fn predict(&self, pairs: &[(&str, &str)]) -> Result<Vec<bool>> {
        let mut out = Vec::with_capacity(pairs.len());
        for chunk in pairs.chunks(EVAL_CHUNK) {
            let logits = no_grad(|| self.answer_logits(chunk, &mut Mode::Eval))?;
            out.extend(logits.to_f64_vec().chunks(2).map(|l| argmax(l) == 0));
        }
        Ok(out)
    }
}

impl Module<f32> for ParaphraseCloze {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a Parameter<f32>)) {
        self.model.visit(f);
    }
}

fn answer_index(duplicate: bool) -> usize {
    if duplicate {
        0
    } else {
        1
    }
}

impl Task for ParaphraseCloze {
    type Example = ParaphraseExample;

    fn kind(&self) -> TaskKind {
        TaskKind::Paraphrase
    }

    fn ffn_kind(&self) -> FfnKind {
        self.model.config.ffn_kind
    }

    fn loss(&self, batch: &[&ParaphraseExample], mode: &mut Mode) -> Result<Tensor<f32>> {
        let pairs: Vec<(&str, &str)> = batch
            .iter()
            .map(|e| (e.question1.as_str(), e.question2.as_str()))
            .collect();
        let labels: Vec<usize> = batch.iter().map(|e| answer_index(e.is_duplicate)).collect();
        self.answer_logits(&pairs, mode)?.cross_entropy(&labels)
    }

    fn evaluate(&self, examples: &[ParaphraseExample]) -> Result<f64> {
        let pairs: Vec<(&str, &str)> = examples
            .iter()
            .map(|e| (e.question1.as_str(), e.question2.as_str()))
            .collect();
        let preds: Vec<usize> = self.predict(&pairs)?.into_iter().map(answer_index).collect();
        let labels: Vec<usize> = examples.iter().map(|e| answer_index(e.is_duplicate)).collect();
        accuracy(&preds, &labels)
    }
}

pub const SONNET_PROMPT_LINES: usize = 3;

pub struct SonnetLm {
    pub model: GptModel<f32>,
    pub tokenizer: BpeVocab,
    pub sampling: SamplingConfig,
}

impl SonnetLm {
    /// Stops generation at the end-of-text token when the vocabulary has one.
    pub fn new(model: GptModel<f32>, tokenizer: BpeVocab, mut sampling: SamplingConfig) -> Self {
        if sampling.stop_token.is_none() {
            sampling.stop_token = tokenizer.eot_id();
        }
        Self {
            model,
            tokenizer,
            sampling,
        }
    }

    /// Training windows of at most `max_seq_len` tokens covering the poem
    /// followed by end-of-text. Consecutive windows share no targets.
    pub fn windows(&self, sonnet: &Sonnet) -> Vec<Vec<u32>> {
        let mut ids = self.tokenizer.encode(&sonnet.text());
        ids.extend(self.tokenizer.eot_id());
        let max = self.model.config.max_seq_len;
        if ids.len() <= max {
            return if ids.len() >= 2 { vec![ids] } else { Vec::new() };
        }
        let stride = max - 1;
        let mut out = Vec::new();
        let mut start = 0;
        while start + 1 < ids.len() {
            let end = (start + max).min(ids.len());
            out.push(ids[start..end].to_vec());
            start += stride;
        }
        out
    }

    /// Prompt text (first lines, newline-terminated) and reference text
    /// (remaining lines).
    pub fn split(sonnet: &Sonnet) -> Option<(String, String)> {
        if sonnet.lines.len() <= SONNET_PROMPT_LINES {
            return None;
        }
        let (head, rest) = sonnet.lines.split_at(SONNET_PROMPT_LINES);
        Some((format!("{}\n", head.join("\n")), rest.join("\n")))
    }

    /// Decoded continuation of `prompt`, cut at end-of-text.
    pub fn complete(&self, prompt: &str, seed: u64) -> Result<String> {
        let ids = self.tokenizer.encode(prompt);
        let cfg = SamplingConfig {
            seed,
            ..self.sampling.clone()
        };
        let out = self.model.generate(&ids, &cfg)?;
        let mut new = &out[ids.len()..];
        if let Some(stop) = cfg.stop_token {
            if let Some(i) = new.iter().position(|&t| t == stop) {
                new = &new[..i];
            }
        }
        self.tokenizer.decode(new)
    }
}

impl Module<f32> for SonnetLm {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a Parameter<f32>)) {
        self.model.visit(f);
    }
}

impl Task for SonnetLm {
    type Example = Sonnet;

    fn kind(&self) -> TaskKind {
        TaskKind::Sonnet
    }

    fn ffn_kind(&self) -> FfnKind {
        self.model.config.ffn_kind
    }

    fn loss(&self, batch: &[&Sonnet], mode: &mut Mode) -> Result<Tensor<f32>> {
        let windows: Vec<Vec<u32>> = batch.iter().flat_map(|s| self.windows(s)).collect();
        if windows.is_empty() {
            return Err(Error::InvalidArgument("sonnet batch has no trainable tokens".into()));
        }
        let batch = TokenBatch::from_sequences(&windows, pad_id(&self.tokenizer))?;
        self.model.lm_loss(&batch, mode)
    }

    fn evaluate(&self, examples: &[Sonnet]) -> Result<f64> {
        let mut hyps = Vec::new();
        let mut refs = Vec::new();
        for (i, sonnet) in examples.iter().enumerate() {
            let Some((prompt, reference)) = Self::split(sonnet) else {
                continue;
            };
            hyps.push(self.complete(&prompt, self.sampling.seed.wrapping_add(i as u64))?);
            refs.push(reference);
        }
        if hyps.is_empty() {
            return Err(Error::InvalidArgument(format!(
                "no dev sonnet has more than {SONNET_PROMPT_LINES} lines"
            )));
        }
        corpus_chrf(&hyps, &refs, &ChrfParams::default())
    }
}

/// Stops after `patience` consecutive evaluations without a new best.
#[derive(Clone, Debug, PartialEq)]
pub struct EarlyStopping {
    pub patience: usize,
    pub best: Option<f64>,
    pub since_best: usize,
    pub evaluations: usize,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        Self {
            patience,
            best: None,
            since_best: 0,
            evaluations: 0,
        }
    }

    /// Records one evaluation; returns whether it is a new best.
    pub fn observe(&mut self, metric: f64) -> bool {
        self.evaluations += 1;
        if self.best.is_none_or(|b| metric > b) {
            self.best = Some(metric);
            self.since_best = 0;
            true
        } else {
            self.since_best += 1;
            false
        }
    }

    pub fn should_stop(&self) -> bool {
        self.patience > 0 && self.since_best >= self.patience
    }
}

/// Destination for metric records produced during training.
pub trait RecordSink {
    fn record(&mut self, r: &MetricRecord) -> Result<()>;

    fn flush(&mut self) -> Result<()> {
        Ok(())
    }
}

impl<W: std::io::Write> RecordSink for MetricsWriter<W> {
    fn record(&mut self, r: &MetricRecord) -> Result<()> {
        self.write(r)
    }

    fn flush(&mut self) -> Result<()> {
        MetricsWriter::flush(self)
    }
}

impl RecordSink for Vec<MetricRecord> {
    fn record(&mut self, r: &MetricRecord) -> Result<()> {
        self.push(r.clone());
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainReport {
    pub steps: usize,
    pub epochs: usize,
    pub stopped_early: bool,
    pub best_dev: Option<f64>,
    /// 1-based epoch of the restored best-dev weights.
    pub best_epoch: Option<usize>,
    pub final_train_metric: Option<f64>,
    pub final_loss: Option<f64>,
}

/// Seeds for the shuffle and dropout streams, derived from the run seed so
/// they never coincide with the initialisation stream.
fn stream_seed(seed: u64, stream: u64) -> u64 {
    seed ^ (0x9e37_79b9_7f4a_7c15u64.wrapping_mul(stream))
}

/// Minibatch AdamW training with per-epoch dev evaluation.
///
/// Batch order and dropout masks depend only on `cfg.seed`. When `dev` is
/// non-empty, the trainable parameters of the best dev epoch are restored
/// before returning.
pub fn train_loop<K: Task>(
    task: &K,
    train: &[K::Example],
    dev: &[K::Example],
    cfg: &TrainConfig,
    mut sink: Option<&mut dyn RecordSink>,
) -> Result<TrainReport> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::InvalidArgument("training set is empty".into()));
    }
    let params: Vec<&Parameter<f32>> = task.parameters().into_iter().filter(|p| p.trainable()).collect();
    let mut opt = AdamW::new(AdamWConfig {
        lr: cfg.learning_rate,
        weight_decay: cfg.weight_decay,
        ..AdamWConfig::default()
    })?;
    let mut order_rng = Rng::seed_from_u64(stream_seed(cfg.seed, 1));
    let mut dropout_rng = Rng::seed_from_u64(stream_seed(cfg.seed, 2));
    let mut stopper = EarlyStopping::new(cfg.early_stop_patience);
    let mut best: Option<Vec<Vec<f32>>> = None;
    let mut report = TrainReport {
        steps: 0,
        epochs: 0,
        stopped_early: false,
        best_dev: None,
        best_epoch: None,
        final_train_metric: None,
        final_loss: None,
    };
    let (task_name, ffn) = (task.kind().as_str(), task.ffn_kind().as_str());
    let record = |step: usize, epoch: usize, split: &str, metric: &str, value: f64| MetricRecord {
        step: step as u64,
        epoch: epoch as u64,
        task: task_name.to_string(),
        split: split.to_string(),
        metric: metric.to_string(),
        value,
        ffn_kind: ffn.to_string(),
    };
    let emit = |sink: &mut Option<&mut dyn RecordSink>, r: MetricRecord| -> Result<()> {
        match sink {
            Some(s) => s.record(&r),
            None => Ok(()),
        }
    };
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut capped = false;
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut order_rng);
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<&K::Example> = chunk.iter().map(|&i| &train[i]).collect();
            task.zero_grad();
            let loss = task.loss(&batch, &mut Mode::Train(&mut dropout_rng))?;
            let value = loss.item() as f64;
            if !value.is_finite() {
                return Err(Error::NonFiniteLoss { step: report.steps });
            }
            loss.backward()?;
            if cfg.grad_clip > 0.0 {
                clip_grad_norm(&params, cfg.grad_clip);
            }
            opt.step(&params)?;
            report.steps += 1;
            report.final_loss = Some(value);
            emit(&mut sink, record(report.steps, epoch, "train", "loss", value))?;
            if cfg.max_steps > 0 && report.steps >= cfg.max_steps {
                capped = true;
                break;
            }
        }
        report.epochs = epoch;
        let metric = task.kind().metric_name();
        if cfg.eval_train {
            let m = task.evaluate(train)?;
            report.final_train_metric = Some(m);
            emit(&mut sink, record(report.steps, epoch, "train", metric, m))?;
        }
        if !dev.is_empty() {
            let m = task.evaluate(dev)?;
            emit(&mut sink, record(report.steps, epoch, "dev", metric, m))?;
            if stopper.observe(m) {
                best = Some(params.iter().map(|p| p.tensor().to_vec()).collect());
                report.best_dev = Some(m);
                report.best_epoch = Some(epoch);
            }
        }
        if let Some(s) = sink.as_mut() {
            s.flush()?;
        }
        if capped {
            break;
        }
        if stopper.should_stop() {
            report.stopped_early = true;
            break;
        }
    }
    if let Some(snapshot) = best {
        for (p, values) in params.iter().zip(snapshot) {
            *p.tensor().data_mut() = values;
        }
        if cfg.eval_train && report.best_epoch != Some(report.epochs) {
            report.final_train_metric = Some(task.evaluate(train)?);
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{synth_paraphrase, synth_sentiment, synth_sonnets};
    use crate::model::ModelConfig;

    fn tiny(kind: FfnKind, max_seq_len: usize, seed: u64) -> GptModel<f32> {
        let cfg = ModelConfig {
            max_seq_len,
            ..ModelConfig::tiny(257, kind)
        };
        GptModel::new(cfg, &mut Rng::seed_from_u64(seed)).unwrap()
    }

    fn classifier(kind: FfnKind, seed: u64) -> SentimentClassifier {
        let mut rng = Rng::seed_from_u64(seed + 100);
        SentimentClassifier::new(tiny(kind, 48, seed), BpeVocab::byte_level(), TaskKind::Cfimdb, &mut rng).unwrap()
    }

    #[test]
    fn head_width_follows_the_task() {
        let mut rng = Rng::seed_from_u64(0);
        let sst = SentimentClassifier::new(
            tiny(FfnKind::Mlp, 32, 0),
            BpeVocab::byte_level(),
            TaskKind::Sst,
            &mut rng,
        )
        .unwrap();
        assert_eq!(sst.logits(&["a b", "c"], &mut Mode::Eval).unwrap().shape(), &[2, 5]);
        let cf = classifier(FfnKind::Mlp, 0);
        assert_eq!(cf.logits(&["x"], &mut Mode::Eval).unwrap().shape(), &[1, 2]);
        assert!(SentimentClassifier::new(
            tiny(FfnKind::Mlp, 32, 0),
            BpeVocab::byte_level(),
            TaskKind::Sonnet,
            &mut rng
        )
        .is_err());
    }

    #[test]
    fn tied_logits_predict_the_lowest_class() {
        let c = classifier(FfnKind::Mlp, 1);
        c.head.weight.tensor().data_mut().fill(0.0);
        c.head.bias.as_ref().unwrap().tensor().data_mut().fill(0.25);
        assert_eq!(c.predict(&["anything", "else"]).unwrap(), vec![0, 0]);
    }

    #[test]
    fn out_of_range_label_fails_at_loss_time() {
        let c = classifier(FfnKind::Mlp, 1);
        let ex = SentimentExample {
            id: "x".into(),
            sentence: "ok".into(),
            label: 2,
        };
        assert!(c.loss(&[&ex], &mut Mode::Eval).is_err());
    }

    #[test]
    fn verbalizer_skips_the_shared_space() {
        let v = Verbalizer::new(&BpeVocab::byte_level()).unwrap();
        assert_eq!(v.prefix, vec![b' ' as u32]);
        assert_eq!((v.yes, v.no), (b'y' as u32, b'n' as u32));
        let merged = crate::tokenizer::vocab_with_merges(&[("Ġ", "y"), ("Ġy", "e"), ("Ġye", "s")]).unwrap();
        let v = Verbalizer::new(&merged).unwrap();
        assert!(v.prefix.is_empty());
        assert_eq!(merged.token(v.yes), Some("Ġyes"));
    }

    #[test]
    fn cloze_prompt_is_fixed_and_bounded() {
        let p = cloze_prompt("Is it?", "Is it really?");
        assert_eq!(
            p,
            "Question 1: Is it?\nQuestion 2: Is it really?\nAre these questions paraphrases? Answer:"
        );
        assert_eq!(p, cloze_prompt("Is it?", "Is it really?"));
        let task = ParaphraseCloze::new(tiny(FfnKind::Mlp, 128, 0), BpeVocab::byte_level()).unwrap();
        let [y, n] = task.probabilities("a", "b").unwrap();
        assert!((y + n - 1.0).abs() < 1e-6);
        let long = "word ".repeat(40);
        match task.prompt_ids(&long, "b") {
            Err(Error::PromptTooLong { len, max }) => assert!(len > max && max == 128),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn early_stopping_counts_evaluations() {
        let mut s = EarlyStopping::new(2);
        let mut evals = 0;
        for m in [0.9, 0.8, 0.7, 0.6, 0.5] {
            evals += 1;
            s.observe(m);
            if s.should_stop() {
                break;
            }
        }
        assert_eq!(evals, 3);
        let mut off = EarlyStopping::new(0);
        for m in [0.5, 0.4, 0.3, 0.2] {
            off.observe(m);
        }
        assert!(!off.should_stop());
    }

    fn fast_cfg(seed: u64) -> TrainConfig {
        TrainConfig {
            learning_rate: 3e-3,
            weight_decay: 0.0,
            epochs: 2,
            batch_size: 8,
            seed,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn loop_stops_early_on_a_worsening_dev_metric() {
        struct Scripted {
            w: Parameter<f32>,
            scores: std::cell::RefCell<Vec<f64>>,
        }
        impl Module<f32> for Scripted {
            fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a Parameter<f32>)) {
                f(&self.w);
            }
        }
        impl Task for Scripted {
            type Example = f32;
            fn kind(&self) -> TaskKind {
                TaskKind::Sst
            }
            fn ffn_kind(&self) -> FfnKind {
                FfnKind::Mlp
            }
            fn loss(&self, batch: &[&f32], _: &mut Mode) -> Result<Tensor<f32>> {
                let x = Tensor::new(batch.iter().map(|&&v| v).collect(), &[batch.len()])?;
                Ok(self.w.tensor().mul(&x)?.sum())
            }
            fn evaluate(&self, _: &[f32]) -> Result<f64> {
                Ok(self.scores.borrow_mut().remove(0))
            }
        }
        let task = Scripted {
            w: Parameter::new("w", Tensor::new(vec![1.0], &[1]).unwrap(), true),
            scores: vec![0.9, 0.8, 0.7, 0.6, 0.5].into(),
        };
        let cfg = TrainConfig {
            epochs: 5,
            early_stop_patience: 2,
            learning_rate: 0.1,
            ..TrainConfig::default()
        };
        let mut log: Vec<MetricRecord> = Vec::new();
        let report = train_loop(&task, &[1.0f32], &[0.0], &cfg, Some(&mut log)).unwrap();
        assert!(report.stopped_early);
        assert_eq!(report.epochs, 3);
        assert_eq!(log.iter().filter(|r| r.split == "dev").count(), 3);
        assert_eq!(report.best_epoch, Some(1));
        let after_first = 1.0 - 0.1;
        assert!((task.w.tensor().item() - after_first).abs() < 1e-4);
    }

    #[test]
    fn non_finite_loss_reports_the_step() {
        let c = classifier(FfnKind::Mlp, 2);
        c.head.bias.as_ref().unwrap().tensor().data_mut()[0] = f32::NAN;
        let data = synth_sentiment(8, 2, 0).unwrap();
        let err = train_loop(&c, &data, &[], &fast_cfg(0), None).unwrap_err();
        assert!(matches!(err, Error::NonFiniteLoss { step: 0 }), "{err:?}");
    }

    #[test]
    fn frozen_base_is_bit_identical_after_training() {
        let c = classifier(FfnKind::Lora, 3);
        let frozen: Vec<(String, Vec<f32>)> = c
            .parameters()
            .iter()
            .filter(|p| !p.trainable())
            .map(|p| (p.name().to_string(), p.tensor().to_vec()))
            .collect();
        assert!(frozen.iter().any(|(n, _)| n.ends_with(".weight")));
        let data = synth_sentiment(32, 2, 1).unwrap();
        let cfg = TrainConfig {
            weight_decay: 0.2,
            ..fast_cfg(4)
        };
        train_loop(&c, &data, &data[..8], &cfg, None).unwrap();
        for ((name, before), p) in frozen.iter().zip(c.parameters().iter().filter(|p| !p.trainable())) {
            assert_eq!(name, p.name());
            assert_eq!(before, &p.tensor().to_vec(), "{name} moved");
        }
    }

    #[test]
    fn identical_seeds_give_identical_trajectories() {
        let run = || {
            let c = classifier(FfnKind::Mlp, 5);
            let data = synth_sentiment(24, 2, 2).unwrap();
            let mut log: Vec<MetricRecord> = Vec::new();
            let cfg = TrainConfig { ..fast_cfg(9) };
            train_loop(&c, &data, &data[..6], &cfg, Some(&mut log)).unwrap();
            let params: Vec<Vec<f32>> = c.parameters().iter().map(|p| p.tensor().to_vec()).collect();
            (log, params)
        };
        let (a, pa) = run();
        let (b, pb) = run();
        assert_eq!(a, b);
        assert_eq!(pa, pb);
    }

    #[test]
    fn loss_on_training_data_falls() {
        let c = classifier(FfnKind::Mlp, 6);
        let data = synth_sentiment(16, 2, 3).unwrap();
        let refs: Vec<&SentimentExample> = data.iter().collect();
        let before = c.loss(&refs, &mut Mode::Eval).unwrap().item();
        let cfg = TrainConfig {
            epochs: 6,
            ..fast_cfg(1)
        };
        train_loop(&c, &data, &[], &cfg, None).unwrap();
        let after = c.loss(&refs, &mut Mode::Eval).unwrap().item();
        assert!(after < before, "{after} ≥ {before}");
    }

    #[test]
    fn cloze_overfits_duplicates() {
        let task = ParaphraseCloze::new(tiny(FfnKind::Mlp, 160, 7), BpeVocab::byte_level()).unwrap();
        let data: Vec<ParaphraseExample> = synth_paraphrase(16, 4);
        let cfg = TrainConfig {
            learning_rate: 3e-3,
            epochs: 30,
            ..fast_cfg(2)
        };
        train_loop(&task, &data, &[], &cfg, None).unwrap();
        let q = &data[0].question1;
        let [yes, _] = task.probabilities(q, q).unwrap();
        assert!(yes > 0.9, "p(yes) = {yes}");
    }

    #[test]
    fn sonnet_windows_cover_every_target() {
        let lm = SonnetLm::new(
            tiny(FfnKind::Mlp, 64, 0),
            BpeVocab::byte_level(),
            SamplingConfig::default(),
        );
        let s = &synth_sonnets(1, 0)[0];
        let mut all = BpeVocab::byte_level().encode(&s.text());
        all.push(256);
        let windows = lm.windows(s);
        assert!(windows.iter().all(|w| w.len() <= 64 && w.len() >= 2));
        let mut covered: Vec<u32> = vec![windows[0][0]];
        for w in &windows {
            covered.extend_from_slice(&w[1..]);
        }
        assert_eq!(covered, all);
        let (prompt, reference) = SonnetLm::split(s).unwrap();
        assert_eq!(prompt.lines().count(), 3);
        assert_eq!(reference.lines().count(), 11);
    }

    #[test]
    fn sonnet_training_and_scoring_run() {
        let sampling = SamplingConfig {
            max_new_tokens: 24,
            ..SamplingConfig::default()
        };
        let lm = SonnetLm::new(tiny(FfnKind::Mlp, 64, 1), BpeVocab::byte_level(), sampling);
        let data = synth_sonnets(3, 5);
        let cfg = TrainConfig {
            epochs: 1,
            batch_size: 2,
            ..fast_cfg(0)
        };
        let mut log: Vec<MetricRecord> = Vec::new();
        let report = train_loop(&lm, &data, &data[..1], &cfg, Some(&mut log)).unwrap();
        let chrf = report.best_dev.unwrap();
        assert!((0.0..=100.0).contains(&chrf));
        assert!(log.iter().any(|r| r.metric == "chrf"));
        assert_eq!(lm.evaluate(&data[..1]).unwrap(), chrf);
    }
}
