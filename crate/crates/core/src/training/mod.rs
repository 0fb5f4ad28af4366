//! Cross-entropy training with encoder warmup and BLEU-4 early stopping,
//! self-critical fine-tuning with a frozen encoder, and evaluation.

mod checkpoint;
mod optim;

pub use checkpoint::Checkpoint;
pub use optim::{AdamW, AdamWConfig};

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use log::{debug, info};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::decoder::{self, sequence_nll_graph, teacher_forced_loss_graph, CaptionHypothesis};
use crate::encoder::{encode_graph, RegionFeatures};
use crate::error::{Error, Result};
use crate::metrics::{bleu4, score_pairs, CiderD, EvalPair, MetricReport};
use crate::model::CaptionModel;
use crate::tensor::{Graph, ParamGroup};
use crate::text::{decode_tokens, TokenContext, Vocabulary, BOS, EOS};

/// One image prepared for training or evaluation.
#[derive(Debug, Clone)]
pub struct Example {
    pub image_id: String,
    pub regions: RegionFeatures,
    /// Epoch `e` (1-based) uses `contexts[(e - 1) % len]`; evaluation uses
    /// `contexts[0]`.
    pub contexts: Vec<TokenContext>,
    pub references: Vec<String>,
}

impl Example {
    pub fn context(&self, epoch: usize) -> &TokenContext {
        &self.contexts[epoch.saturating_sub(1) % self.contexts.len()]
    }
}

/// Which reference captions serve as targets in an epoch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TargetPolicy {
    /// Every reference, every epoch.
    All,
    /// One reference per image per epoch, cycling through them.
    Rotate,
    /// Only the first reference.
    First,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    /// Validation rounds without improvement before stopping.
    pub patience: usize,
    /// Epochs between validation rounds.
    pub validate_every: usize,
    /// Linear 0→1 ramp of the encoder rate over the first epoch.
    pub warmup: bool,
    pub max_steps: Option<usize>,
    pub seed: u64,
    pub optimizer: AdamWConfig,
    pub targets: TargetPolicy,
    pub beam_width: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 3e-5,
            batch_size: 16,
            max_epochs: 100,
            patience: 5,
            validate_every: 1,
            warmup: true,
            max_steps: None,
            seed: 0,
            optimizer: AdamWConfig::default(),
            targets: TargetPolicy::Rotate,
            beam_width: decoder::DEFAULT_BEAM_WIDTH,
        }
    }
}

impl TrainConfig {
    pub fn check(&self) -> Result<()> {
        let mut issues = Vec::new();
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            issues.push(format!("learning rate {} must be positive", self.learning_rate));
        }
        for (name, v) in [
            ("batch_size", self.batch_size),
            ("max_epochs", self.max_epochs),
            ("patience", self.patience),
            ("validate_every", self.validate_every),
            ("beam_width", self.beam_width),
        ] {
            if v == 0 {
                issues.push(format!("{name} must be at least 1"));
            }
        }
        if issues.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(issues))
        }
    }
}

/// Encoder rate multiplier for 1-based `step_in_epoch` of `epoch`.
pub fn warmup_multiplier(epoch: usize, step_in_epoch: usize, steps_per_epoch: usize) -> f64 {
    if epoch <= 1 && steps_per_epoch > 0 {
        (step_in_epoch as f64 / steps_per_epoch as f64).min(1.0)
    } else {
        1.0
    }
}

/// Stops after `patience` consecutive rounds without strict improvement.
#[derive(Debug, Clone)]
pub struct EarlyStopping {
    patience: usize,
    best: Option<(usize, f64)>,
    stale: usize,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        Self {
            patience,
            best: None,
            stale: 0,
        }
    }

    /// Records a score; returns `true` when training should stop.
    pub fn observe(&mut self, epoch: usize, score: f64) -> bool {
        match self.best {
            Some((_, best)) if score <= best => self.stale += 1,
            _ => {
                self.best = Some((epoch, score));
                self.stale = 0;
            }
        }
        self.stale >= self.patience
    }

    pub fn improved_last(&self) -> bool {
        self.stale == 0 && self.best.is_some()
    }

    /// `(epoch, score)` of the best round so far.
    pub fn best(&self) -> Option<(usize, f64)> {
        self.best
    }
}

/// One JSON-lines training log entry.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub epoch: usize,
    pub step: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub loss: Option<f64>,
    pub learning_rate: f64,
    pub encoder_lr_multiplier: f64,
    pub decoder_lr_multiplier: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub val_bleu4: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mean_advantage: Option<f64>,
}

struct LogSink {
    writer: Option<BufWriter<File>>,
    records: Vec<LogRecord>,
}

impl LogSink {
    fn new(path: Option<&Path>) -> Result<Self> {
        let writer = match path {
            Some(p) => Some(BufWriter::new(File::create(p).map_err(|e| Error::io(p, e))?)),
            None => None,
        };
        Ok(Self {
            writer,
            records: Vec::new(),
        })
    }

    fn push(&mut self, record: LogRecord) -> Result<()> {
        if let Some(w) = &mut self.writer {
            serde_json::to_writer(&mut *w, &record)?;
            w.write_all(b"\n").map_err(|e| Error::io("<training log>", e))?;
        }
        self.records.push(record);
        Ok(())
    }

    fn finish(mut self) -> Result<Vec<LogRecord>> {
        if let Some(w) = &mut self.writer {
            w.flush().map_err(|e| Error::io("<training log>", e))?;
        }
        Ok(self.records)
    }
}

/// `BOS w… EOS`, dropping trailing words so at most `max_len` tokens follow
/// BOS.
pub fn target_ids(vocab: &Vocabulary, caption: &str, max_len: usize) -> Vec<usize> {
    let mut ids = vocab.encode(caption);
    ids.truncate(max_len.saturating_sub(1));
    let mut out = Vec::with_capacity(ids.len() + 2);
    out.push(BOS);
    out.extend(ids);
    out.push(EOS);
    out
}

fn check_examples(split: &str, examples: &[Example]) -> Result<()> {
    if examples.is_empty() {
        return Err(Error::InvalidInput(format!("{split} split is empty")));
    }
    for e in examples {
        if e.references.is_empty() {
            return Err(Error::InvalidInput(format!("image {} has no references", e.image_id)));
        }
        if e.contexts.is_empty() {
            return Err(Error::InvalidInput(format!("image {} has no context", e.image_id)));
        }
    }
    Ok(())
}

fn epoch_units(examples: &[Example], policy: TargetPolicy, epoch: usize) -> Vec<(usize, usize)> {
    let mut units = Vec::new();
    for (i, e) in examples.iter().enumerate() {
        let n = e.references.len();
        match policy {
            TargetPolicy::All => units.extend((0..n).map(|r| (i, r))),
            TargetPolicy::Rotate => units.push((i, (epoch - 1) % n)),
            TargetPolicy::First => units.push((i, 0)),
        }
    }
    units
}

/// Mean teacher-forced loss of `model` over `units`, contexts of `epoch`.
fn batch_loss_and_grads(
    model: &mut CaptionModel,
    vocab: &Vocabulary,
    examples: &[Example],
    units: &[(usize, usize)],
    epoch: usize,
) -> Result<f64> {
    let scale = 1.0 / units.len() as f64;
    let mut total = 0.0;
    model.params.zero_grad();
    for &(i, r) in units {
        let ex = &examples[i];
        let target = target_ids(vocab, &ex.references[r], model.config.decoder.max_len);
        let grads = {
            let mut g = Graph::new(&model.params);
            let mem = encode_graph(&mut g, &model.config.encoder, &ex.regions, ex.context(epoch))?;
            let loss = teacher_forced_loss_graph(&mut g, &model.config.decoder, &mem, &target)?;
            let value = g.value(loss).item();
            if !value.is_finite() {
                return Err(Error::Training(format!(
                    "loss {value} on image {} (reference {r}) in epoch {epoch}",
                    ex.image_id
                )));
            }
            total += value * scale;
            let scaled = g.scale(loss, scale);
            g.backward(scaled)?
        };
        model.params.accumulate(&grads);
    }
    Ok(total)
}

/// Mean per-caption teacher-forced loss under `policy` (evaluation contexts).
pub fn mean_loss(model: &CaptionModel, vocab: &Vocabulary, examples: &[Example], policy: TargetPolicy) -> Result<f64> {
    let units = epoch_units(examples, policy, 1);
    let mut total = 0.0;
    for &(i, r) in &units {
        let ex = &examples[i];
        let encoded = model.encode(&ex.regions, ex.context(1))?;
        let target = target_ids(vocab, &ex.references[r], model.config.decoder.max_len);
        total += model.teacher_forced_loss(&encoded, &target)?;
    }
    Ok(total / units.len() as f64)
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Parameters from the best validation round.
    pub checkpoint: Checkpoint,
    pub log: Vec<LogRecord>,
    pub epochs_run: usize,
    pub steps_run: usize,
    pub stopped_early: bool,
}

/// Cross-entropy training. Returns the best-validation-BLEU-4 parameters.
pub fn train_xe(
    mut model: CaptionModel,
    vocab: &Vocabulary,
    train: &[Example],
    val: &[Example],
    config: &TrainConfig,
    log_path: Option<&Path>,
) -> Result<TrainOutcome> {
    config.check()?;
    model.config.check()?;
    check_examples("train", train)?;
    check_examples("validation", val)?;
    if vocab.len() != model.config.decoder.vocab_size {
        return Err(Error::Config(vec![format!(
            "vocabulary of {} tokens for a model sized {}",
            vocab.len(),
            model.config.decoder.vocab_size
        )]));
    }
    model.params.set_trainable(ParamGroup::Encoder, true);
    model.params.set_trainable(ParamGroup::Decoder, true);

    let mut sink = LogSink::new(log_path)?;
    let mut opt = AdamW::new(&model.params, config.optimizer);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut stopper = EarlyStopping::new(config.patience);
    let mut best_params = model.params.clone();
    let mut step = 0usize;
    let mut epochs_run = 0;
    let mut stopped_early = false;

    'epochs: for epoch in 1..=config.max_epochs {
        epochs_run = epoch;
        let mut units = epoch_units(train, config.targets, epoch);
        units.shuffle(&mut rng);
        let steps_per_epoch = units.len().div_ceil(config.batch_size);
        let mut budget_hit = false;
        for (b, batch) in units.chunks(config.batch_size).enumerate() {
            let loss = batch_loss_and_grads(&mut model, vocab, train, batch, epoch)?;
            let enc_mult = if config.warmup {
                warmup_multiplier(epoch, b + 1, steps_per_epoch)
            } else {
                1.0
            };
            opt.step(&mut model.params, config.learning_rate, |grp| match grp {
                ParamGroup::Encoder => enc_mult,
                ParamGroup::Decoder => 1.0,
            });
            step += 1;
            sink.push(LogRecord {
                epoch,
                step,
                loss: Some(loss),
                learning_rate: config.learning_rate,
                encoder_lr_multiplier: enc_mult,
                decoder_lr_multiplier: 1.0,
                val_bleu4: None,
                mean_advantage: None,
            })?;
            if config.max_steps.is_some_and(|m| step >= m) {
                budget_hit = true;
                break;
            }
        }
        if epoch % config.validate_every == 0 || budget_hit || epoch == config.max_epochs {
            let pairs = generate_pairs(&model, vocab, val, config.beam_width)?;
            let score = bleu4(&pairs)?;
            info!("epoch {epoch} step {step}: validation BLEU-4 {score:.4}");
            let stop = stopper.observe(epoch, score);
            if stopper.improved_last() {
                best_params = model.params.clone();
            }
            sink.push(LogRecord {
                epoch,
                step,
                loss: None,
                learning_rate: config.learning_rate,
                encoder_lr_multiplier: 1.0,
                decoder_lr_multiplier: 1.0,
                val_bleu4: Some(score),
                mean_advantage: None,
            })?;
            if stop {
                stopped_early = true;
                break 'epochs;
            }
        }
        if budget_hit {
            break;
        }
    }

    let (best_epoch, best_score) = stopper.best().expect("at least one validation round");
    model.params = best_params;
    Ok(TrainOutcome {
        checkpoint: Checkpoint {
            model,
            vocab: vocab.clone(),
            epoch: best_epoch,
            best_val_bleu4: Some(best_score),
        },
        log: sink.finish()?,
        epochs_run,
        steps_run: step,
        stopped_early,
    })
}

/// Beam-search caption for `example` under its evaluation context.
pub fn caption_example(model: &CaptionModel, example: &Example, beam_width: usize) -> Result<CaptionHypothesis> {
    let encoded = model.encode(&example.regions, example.context(1))?;
    model.beam(&encoded, beam_width)
}

fn generate_pairs(model: &CaptionModel, vocab: &Vocabulary, examples: &[Example], beam_width: usize) -> Result<Vec<EvalPair>> {
    examples
        .iter()
        .map(|ex| {
            let hyp = caption_example(model, ex, beam_width)?;
            Ok(EvalPair {
                image_id: ex.image_id.clone(),
                candidate: decode_tokens(&hyp.tokens, vocab)?,
                references: ex.references.clone(),
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub report: MetricReport,
    /// Generated caption and references per image, in input order.
    pub pairs: Vec<EvalPair>,
}

/// Beam-search captions for every example, scored with corpus BLEU-4 and
/// CIDEr-D (idf from the examples' references).
pub fn evaluate(model: &CaptionModel, vocab: &Vocabulary, examples: &[Example], beam_width: usize) -> Result<Evaluation> {
    check_examples("evaluation", examples)?;
    let pairs = generate_pairs(model, vocab, examples, beam_width)?;
    Ok(Evaluation {
        report: score_pairs(&pairs)?,
        pairs,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScstConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    /// Fixed update budget; no metric-based stopping.
    pub steps: usize,
    pub seed: u64,
    pub optimizer: AdamWConfig,
}

impl Default for ScstConfig {
    fn default() -> Self {
        Self {
            learning_rate: 3e-5,
            batch_size: 8,
            steps: 200,
            seed: 0,
            optimizer: AdamWConfig::default(),
        }
    }
}

/// One self-critical update: per image, reward = CIDEr-D of a sampled
/// caption minus that of the greedy caption; loss = −advantage · Σ log P
/// (sample). The encoder is frozen. Returns the mean advantage.
pub fn scst_step(
    model: &mut CaptionModel,
    opt: &mut AdamW,
    vocab: &Vocabulary,
    batch: &[&Example],
    scorer: &CiderD,
    learning_rate: f64,
    seed: u64,
) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::EmptyBatch);
    }
    model.params.set_trainable(ParamGroup::Encoder, false);
    model.params.zero_grad();
    let max_len = model.config.decoder.max_len;
    let mut advantage_sum = 0.0;
    for (i, ex) in batch.iter().enumerate() {
        if ex.references.is_empty() {
            return Err(Error::InvalidInput(format!("image {} has no references", ex.image_id)));
        }
        let encoded = model.encode(&ex.regions, ex.context(1))?;
        let sample = decoder::sample_sequence(
            &encoded,
            &model.params,
            &model.config.decoder,
            seed.wrapping_mul(1_000_003).wrapping_add(i as u64),
            max_len,
        )?;
        let greedy = decoder::greedy_decode(&encoded, &model.params, &model.config.decoder, max_len)?;
        let r_sample = scorer.score_or_zero(&decode_tokens(&sample.tokens, vocab)?, &ex.references)?;
        let r_greedy = scorer.score_or_zero(&decode_tokens(&greedy.tokens, vocab)?, &ex.references)?;
        let advantage = r_sample - r_greedy;
        advantage_sum += advantage;
        if advantage == 0.0 {
            continue;
        }
        let steps = sample.tokens.len() - 1;
        let weight = advantage / batch.len() as f64;
        let grads = {
            let mut g = Graph::new(&model.params);
            let mem = encoded.to_nodes(&mut g);
            let loss = sequence_nll_graph(&mut g, &model.config.decoder, &mem, &sample.tokens, &vec![weight; steps])?;
            g.backward(loss)?
        };
        model.params.accumulate(&grads);
    }
    opt.step(&mut model.params, learning_rate, |grp| match grp {
        ParamGroup::Encoder => 0.0,
        ParamGroup::Decoder => 1.0,
    });
    Ok(advantage_sum / batch.len() as f64)
}

#[derive(Debug, Clone)]
pub struct ScstOutcome {
    pub model: CaptionModel,
    pub mean_advantages: Vec<f64>,
    pub log: Vec<LogRecord>,
}

/// Runs `config.steps` self-critical updates over shuffled batches, with
/// CIDEr-D idf frozen from the training references.
pub fn train_scst(
    mut model: CaptionModel,
    vocab: &Vocabulary,
    train: &[Example],
    config: &ScstConfig,
    log_path: Option<&Path>,
) -> Result<ScstOutcome> {
    check_examples("train", train)?;
    if config.batch_size == 0 || !(config.learning_rate > 0.0) {
        return Err(Error::Config(vec!["SCST needs batch_size ≥ 1 and a positive learning rate".into()]));
    }
    let corpus: Vec<Vec<String>> = train.iter().map(|e| e.references.clone()).collect();
    let scorer = CiderD::new(&corpus)?;
    let mut opt = AdamW::new(&model.params, config.optimizer);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut sink = LogSink::new(log_path)?;
    let mut advantages = Vec::with_capacity(config.steps);
    let mut order: Vec<usize> = Vec::new();
    let mut epoch = 0;
    for step in 1..=config.steps {
        if order.len() < config.batch_size {
            epoch += 1;
            let mut fresh: Vec<usize> = (0..train.len()).collect();
            fresh.shuffle(&mut rng);
            order.extend(fresh);
        }
        let batch: Vec<&Example> = order.drain(..config.batch_size.min(order.len())).map(|i| &train[i]).collect();
        let adv = scst_step(
            &mut model,
            &mut opt,
            vocab,
            &batch,
            &scorer,
            config.learning_rate,
            config.seed ^ (step as u64) << 20,
        )?;
        debug!("scst step {step}: mean advantage {adv:.4}");
        advantages.push(adv);
        sink.push(LogRecord {
            epoch,
            step,
            loss: None,
            learning_rate: config.learning_rate,
            encoder_lr_multiplier: 0.0,
            decoder_lr_multiplier: 1.0,
            val_bleu4: None,
            mean_advantage: Some(adv),
        })?;
    }
    model.params.set_trainable(ParamGroup::Encoder, true);
    Ok(ScstOutcome {
        model,
        mean_advantages: advantages,
        log: sink.finish()?,
    })
}
