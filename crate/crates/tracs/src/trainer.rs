//! Fine-tuning loop: AdamW with a linear schedule over chunked shards,
//! per-epoch validation with the composite metric, and checkpointing
//! with deterministic resume at epoch boundaries.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::chunker::{select_chunks, Chunk, ChunkedEntry, SelectionMode};
use crate::corpus_ingest::{LabelVocabulary, PaperRecord};
use crate::error::{Error, Result};
use crate::eval_metrics::{evaluate, BoolF1Variant, ScoredCorpus};
use crate::inference_aggregate::aggregate;
use crate::model_core::{
    forward_chunk, joint_loss_with_grad, BoolReduction, Encoder, EncoderMode, MultiTaskHead,
    TinyEncoder, NUM_BOOLEAN_LABELS,
};

fn default_lr() -> f64 {
    2e-5
}
fn default_batch() -> usize {
    8
}
fn default_epochs() -> usize {
    4
}
fn default_seed() -> u64 {
    42
}
fn default_k() -> usize {
    10
}
fn default_val_fraction() -> f64 {
    0.1
}
fn default_optimizer() -> String {
    "adamw".into()
}
fn default_schedule() -> String {
    "linear".into()
}
fn default_weight_decay() -> f64 {
    0.01
}
fn default_grad_clip() -> f64 {
    1.0
}
fn default_hidden() -> usize {
    32
}
fn default_vocab() -> usize {
    4096
}
fn default_mode() -> SelectionMode {
    SelectionMode::First
}
fn one() -> f64 {
    1.0
}

/// Training configuration. Defaults are the published hyperparameters:
/// AdamW, lr 2e-5, linear schedule, batch size 8, 4 epochs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub optimizer: String,
    pub learning_rate: f64,
    pub schedule: String,
    pub warmup_steps: usize,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub mode: SelectionMode,
    pub k: usize,
    pub validation_fraction: f64,
    pub weight_decay: f64,
    /// Global-norm gradient clip; 0 disables.
    pub grad_clip_norm: f64,
    pub bool_reduction: BoolReduction,
    /// Weights on the cross-entropy and boolean terms of the joint loss.
    pub ce_weight: f64,
    pub bce_weight: f64,
    pub bool_f1_variant: BoolF1Variant,
    /// Small-encoder shape (the pluggable test/demo encoder).
    pub hidden_size: usize,
    pub tokenizer_vocab: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            optimizer: default_optimizer(),
            learning_rate: default_lr(),
            schedule: default_schedule(),
            warmup_steps: 0,
            batch_size: default_batch(),
            epochs: default_epochs(),
            seed: default_seed(),
            mode: default_mode(),
            k: default_k(),
            validation_fraction: default_val_fraction(),
            weight_decay: default_weight_decay(),
            grad_clip_norm: default_grad_clip(),
            bool_reduction: BoolReduction::Mean,
            ce_weight: one(),
            bce_weight: one(),
            bool_f1_variant: BoolF1Variant::Positive,
            hidden_size: default_hidden(),
            tokenizer_vocab: default_vocab(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.optimizer != "adamw" {
            return Err(Error::Config(format!("unsupported optimizer {:?}", self.optimizer)));
        }
        if self.schedule != "linear" {
            return Err(Error::Config(format!("unsupported schedule {:?}", self.schedule)));
        }
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be >= 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        if !(self.validation_fraction > 0.0 && self.validation_fraction < 1.0) {
            return Err(Error::Config("validation_fraction must be in (0, 1)".into()));
        }
        if self.learning_rate <= 0.0 || !self.learning_rate.is_finite() {
            return Err(Error::Config("learning_rate must be positive".into()));
        }
        if self.k == 0 {
            return Err(Error::Config("k must be >= 1".into()));
        }
        Ok(())
    }

    /// Stable hash of the serialized config for checkpoint provenance.
    pub fn fingerprint(&self) -> String {
        let canonical = serde_json::to_string(self).expect("config serializes");
        let mut hasher = Sha256::new();
        hasher.update(canonical.as_bytes());
        let digest = hasher.finalize();
        digest.iter().take(8).map(|b| format!("{b:02x}")).collect()
    }
}

/// Linear decay to zero over the total step count, with optional warmup.
pub fn lr_at_step(config: &TrainConfig, step: usize, total_steps: usize) -> Result<f64> {
    if step > total_steps {
        return Err(Error::Config(format!(
            "step {step} out of range 0..={total_steps}"
        )));
    }
    if step < config.warmup_steps {
        return Ok(config.learning_rate * step as f64 / config.warmup_steps as f64);
    }
    Ok(config.learning_rate * (1.0 - step as f64 / total_steps as f64))
}

/// Deterministic stratified split indices: one (train, validation) pair
/// over items labeled by class name. Every class keeps at least one item
/// on each side.
fn stratified_split_indices(
    labels: &[String],
    fraction: f64,
    seed: u64,
) -> Result<(Vec<usize>, Vec<usize>)> {
    let mut by_class: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, label) in labels.iter().enumerate() {
        by_class.entry(label.as_str()).or_default().push(i);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut validation: Vec<usize> = Vec::new();
    for (class, mut indices) in by_class {
        if indices.len() < 2 {
            return Err(Error::Validation(format!(
                "class {class:?} has {} document(s); need >= 2 to stratify",
                indices.len()
            )));
        }
        indices.shuffle(&mut rng);
        let n = indices.len();
        let take = ((n as f64 * fraction).round() as usize).clamp(1, n - 1);
        validation.extend(indices.into_iter().take(take));
    }
    let in_validation: std::collections::HashSet<usize> = validation.iter().copied().collect();
    let train: Vec<usize> = (0..labels.len()).filter(|i| !in_validation.contains(i)).collect();
    let mut validation: Vec<usize> = in_validation.into_iter().collect();
    validation.sort_unstable();
    Ok((train, validation))
}

/// Document-level stratified train/validation split of labeled records.
pub fn split_train_validation(
    records: &[PaperRecord],
    fraction: f64,
    seed: u64,
) -> Result<(Vec<PaperRecord>, Vec<PaperRecord>)> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(Error::Config("fraction must be in (0, 1)".into()));
    }
    let labels: Vec<String> = records
        .iter()
        .map(|r| {
            r.telescope
                .clone()
                .ok_or_else(|| Error::Validation(format!("{}: unlabeled record", r.bibcode)))
        })
        .collect::<Result<_>>()?;
    let (train, validation) = stratified_split_indices(&labels, fraction, seed)?;
    Ok((
        train.into_iter().map(|i| records[i].clone()).collect(),
        validation.into_iter().map(|i| records[i].clone()).collect(),
    ))
}

/// AdamW first/second moment state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamWState {
    pub step: usize,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

impl AdamWState {
    fn new(n: usize) -> Self {
        AdamWState {
            step: 0,
            m: vec![0.0; n],
            v: vec![0.0; n],
        }
    }

    /// One decoupled-weight-decay Adam update at the given learning rate.
    fn update(&mut self, params: &mut [f64], grads: &[f64], lr: f64, weight_decay: f64) {
        const BETA1: f64 = 0.9;
        const BETA2: f64 = 0.999;
        const EPS: f64 = 1e-8;
        self.step += 1;
        let t = self.step as f64;
        let bc1 = 1.0 - BETA1.powf(t);
        let bc2 = 1.0 - BETA2.powf(t);
        for i in 0..params.len() {
            self.m[i] = BETA1 * self.m[i] + (1.0 - BETA1) * grads[i];
            self.v[i] = BETA2 * self.v[i] + (1.0 - BETA2) * grads[i] * grads[i];
            let m_hat = self.m[i] / bc1;
            let v_hat = self.v[i] / bc2;
            params[i] -= lr * (m_hat / (v_hat.sqrt() + EPS) + weight_decay * params[i]);
        }
    }
}

/// Saved training state: model, optimizer, schedule position, and the
/// best validation score so far.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Checkpoint {
    pub encoder: TinyEncoder,
    pub head: MultiTaskHead,
    pub vocabulary: LabelVocabulary,
    pub tokenizer_id: String,
    pub config: TrainConfig,
    /// Epochs fully completed.
    pub epoch: usize,
    pub step: usize,
    pub val_composite: f64,
    pub optimizer_encoder: AdamWState,
    pub optimizer_head: AdamWState,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    encoder: String,
    hidden_size: usize,
    num_classes: usize,
    boolean_labels: [String; NUM_BOOLEAN_LABELS],
    created: u64,
    tokenizer: String,
    config_fingerprint: String,
}

impl Checkpoint {
    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir.display().to_string(), e))?;
        let manifest = Manifest {
            encoder: self.encoder.identifier(),
            hidden_size: self.encoder.hidden,
            num_classes: self.head.num_classes,
            boolean_labels: crate::corpus_ingest::BOOLEAN_LABEL_NAMES.map(String::from),
            created: std::time::SystemTime::now()
                .duration_since(std::time::UNIX_EPOCH)
                .map(|d| d.as_secs())
                .unwrap_or(0),
            tokenizer: self.tokenizer_id.clone(),
            config_fingerprint: self.config.fingerprint(),
        };
        let write_json = |name: &str, value: &serde_json::Value| -> Result<()> {
            let path = dir.join(name);
            std::fs::write(&path, serde_json::to_string_pretty(value).expect("serializable"))
                .map_err(|e| Error::io(path.display().to_string(), e))
        };
        write_json("manifest.json", &serde_json::to_value(&manifest).unwrap())?;
        self.vocabulary.save(&dir.join("vocabulary.json"))?;
        write_json("config.json", &serde_json::to_value(&self.config).unwrap())?;
        write_json(
            "model.json",
            &serde_json::json!({"encoder": self.encoder, "head": self.head}),
        )?;
        write_json(
            "train_state.json",
            &serde_json::json!({
                "epoch": self.epoch,
                "step": self.step,
                "val_composite": self.val_composite,
                "tokenizer_id": self.tokenizer_id,
                "optimizer_encoder": self.optimizer_encoder,
                "optimizer_head": self.optimizer_head,
            }),
        )
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let read_json = |name: &str| -> Result<serde_json::Value> {
            let path = dir.join(name);
            let text = std::fs::read_to_string(&path)
                .map_err(|e| Error::io(path.display().to_string(), e))?;
            serde_json::from_str(&text).map_err(|e| Error::json(path.display().to_string(), e))
        };
        let model = read_json("model.json")?;
        let encoder: TinyEncoder = serde_json::from_value(model["encoder"].clone())
            .map_err(|e| Error::Checkpoint(format!("{}: {e}", dir.display())))?;
        let head: MultiTaskHead = serde_json::from_value(model["head"].clone())
            .map_err(|e| Error::Checkpoint(format!("{}: {e}", dir.display())))?;
        let vocabulary = LabelVocabulary::load(&dir.join("vocabulary.json"))?;
        if head.num_classes != vocabulary.len() {
            return Err(Error::Checkpoint(format!(
                "{}: head classes {} != vocabulary size {}",
                dir.display(),
                head.num_classes,
                vocabulary.len()
            )));
        }
        let config: TrainConfig = serde_json::from_value(read_json("config.json")?)
            .map_err(|e| Error::Checkpoint(format!("{}: {e}", dir.display())))?;
        let state = read_json("train_state.json")?;
        let parse = |v: &serde_json::Value| -> Result<AdamWState> {
            serde_json::from_value(v.clone())
                .map_err(|e| Error::Checkpoint(format!("{}: {e}", dir.display())))
        };
        Ok(Checkpoint {
            encoder,
            head,
            vocabulary,
            tokenizer_id: state["tokenizer_id"].as_str().unwrap_or_default().to_string(),
            config,
            epoch: state["epoch"].as_u64().unwrap_or(0) as usize,
            step: state["step"].as_u64().unwrap_or(0) as usize,
            val_composite: state["val_composite"].as_f64().unwrap_or(0.0),
            optimizer_encoder: parse(&state["optimizer_encoder"])?,
            optimizer_head: parse(&state["optimizer_head"])?,
        })
    }
}

/// Per-epoch validation metrics emitted to the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub val_composite: f64,
    pub val_multiclass_f1: f64,
    pub val_bool_f1: BTreeMap<String, f64>,
    pub mean_train_loss: f64,
}

/// Everything a caller needs after training.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub best: Checkpoint,
    pub epoch_metrics: Vec<EpochMetrics>,
    pub step_losses: Vec<f64>,
    pub train_bibcodes: Vec<String>,
    pub validation_bibcodes: Vec<String>,
    /// Chunks consumed per epoch (each selected chunk exactly once).
    pub chunks_per_epoch: usize,
}

struct TrainExample {
    tokens: Vec<u32>,
    telescope: usize,
    booleans: [bool; NUM_BOOLEAN_LABELS],
}

fn labeled_targets(
    entry: &ChunkedEntry,
    vocabulary: &LabelVocabulary,
) -> Result<(usize, [bool; NUM_BOOLEAN_LABELS])> {
    let name = entry
        .telescope()
        .ok_or_else(|| Error::Validation(format!("{}: unlabeled entry", entry.bibcode())))?;
    let class = vocabulary
        .index_of(name)
        .ok_or_else(|| Error::Validation(format!("{}: unknown class {name:?}", entry.bibcode())))?;
    let booleans = entry
        .labels()
        .ok_or_else(|| Error::Validation(format!("{}: missing boolean labels", entry.bibcode())))?;
    Ok((class, booleans.as_array()))
}

/// Composite-metric validation of the current model over held-out
/// entries (all their chunks, majority voting).
fn validate_model(
    encoder: &TinyEncoder,
    head: &MultiTaskHead,
    entries: &[&ChunkedEntry],
    vocabulary: &LabelVocabulary,
    variant: BoolF1Variant,
) -> Result<crate::eval_metrics::EvalReport> {
    let mut corpus = ScoredCorpus {
        gold_telescope: Vec::new(),
        pred_telescope: Vec::new(),
        gold_booleans: Vec::new(),
        pred_booleans: Vec::new(),
    };
    for entry in entries {
        let (gold_class, gold_bools) = labeled_targets(entry, vocabulary)?;
        let predictions: Vec<_> = entry
            .chunks
            .iter()
            .map(|c| forward_chunk(encoder, head, c))
            .collect::<Result<_>>()?;
        let doc = aggregate(&predictions, vocabulary, 0.5)?;
        let pred_class = vocabulary
            .index_of(&doc.telescope)
            .expect("aggregate emits vocabulary names");
        corpus.gold_telescope.push(gold_class);
        corpus.pred_telescope.push(pred_class);
        corpus.gold_booleans.push(gold_bools);
        corpus.pred_booleans.push(doc.booleans.as_array());
    }
    evaluate(&corpus, vocabulary, variant)
}

fn global_norm(a: &[f64], b: &[f64]) -> f64 {
    (a.iter().chain(b).map(|g| g * g).sum::<f64>()).sqrt()
}

/// Fine-tune over chunked entries, keeping the checkpoint with the best
/// validation composite (ties go to the later epoch).
///
/// When `out_dir` is given, a line-delimited JSON training log and
/// `last`/`best` checkpoint directories are written there; an existing
/// `last` checkpoint with a matching config fingerprint is resumed from
/// its epoch boundary.
pub fn train(
    config: &TrainConfig,
    entries: &[ChunkedEntry],
    vocabulary: &LabelVocabulary,
    tokenizer_id: &str,
    out_dir: Option<&Path>,
) -> Result<TrainOutcome> {
    run_train(config, entries, vocabulary, tokenizer_id, out_dir, None)
}

// stop_after simulates an interruption at an epoch boundary (tests).
fn run_train(
    config: &TrainConfig,
    entries: &[ChunkedEntry],
    vocabulary: &LabelVocabulary,
    tokenizer_id: &str,
    out_dir: Option<&Path>,
    stop_after: Option<usize>,
) -> Result<TrainOutcome> {
    config.validate()?;
    if entries.is_empty() {
        return Err(Error::Validation("empty training corpus".into()));
    }

    // Document-level stratified split.
    let labels: Vec<String> = entries
        .iter()
        .map(|e| {
            e.telescope()
                .map(String::from)
                .ok_or_else(|| Error::Validation(format!("{}: unlabeled entry", e.bibcode())))
        })
        .collect::<Result<_>>()?;
    let (train_idx, val_idx) =
        stratified_split_indices(&labels, config.validation_fraction, config.seed)?;
    let train_entries: Vec<&ChunkedEntry> = train_idx.iter().map(|&i| &entries[i]).collect();
    let val_entries: Vec<&ChunkedEntry> = val_idx.iter().map(|&i| &entries[i]).collect();

    // Per-mode chunk selection (a no-op on shards already written in the
    // same mode).
    let mut examples: Vec<TrainExample> = Vec::new();
    for entry in &train_entries {
        let (telescope, booleans) = labeled_targets(entry, vocabulary)?;
        let selected: Vec<Chunk> = select_chunks(&entry.chunks, config.mode, config.k, config.seed)?;
        for chunk in selected {
            examples.push(TrainExample {
                tokens: chunk.tokens,
                telescope,
                booleans,
            });
        }
    }
    if examples.is_empty() {
        return Err(Error::Validation("no training chunks after selection".into()));
    }

    let steps_per_epoch = examples.len().div_ceil(config.batch_size);
    let total_steps = config.epochs * steps_per_epoch;

    // Fresh model or resume from the last epoch boundary.
    let mut resume_from: Option<Checkpoint> = None;
    if let Some(dir) = out_dir {
        let last = dir.join("last");
        if last.join("train_state.json").exists() {
            let ckpt = Checkpoint::load(&last)?;
            if ckpt.config.fingerprint() != config.fingerprint() {
                return Err(Error::Checkpoint(format!(
                    "{}: existing checkpoint was trained with a different config",
                    last.display()
                )));
            }
            resume_from = Some(ckpt);
        }
    }
    let (mut encoder, mut head, mut opt_enc, mut opt_head, start_epoch, mut best) =
        match resume_from {
            Some(ckpt) => (
                ckpt.encoder.clone(),
                ckpt.head.clone(),
                ckpt.optimizer_encoder.clone(),
                ckpt.optimizer_head.clone(),
                ckpt.epoch,
                out_dir.map(|d| Checkpoint::load(&d.join("best"))).transpose()?,
            ),
            None => {
                let encoder = TinyEncoder::new(config.tokenizer_vocab, config.hidden_size, config.seed);
                let head = MultiTaskHead::new(config.hidden_size, vocabulary.len(), config.seed ^ 0x9e37_79b9)
                    ;
                let n_enc = encoder.num_params();
                let n_head = head.num_params();
                (encoder, head, AdamWState::new(n_enc), AdamWState::new(n_head), 0, None)
            }
        };

    let mut log_file = match out_dir {
        Some(dir) => {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir.display().to_string(), e))?;
            let path = dir.join("train_log.jsonl");
            let file = if start_epoch > 0 {
                std::fs::OpenOptions::new().append(true).create(true).open(&path)
            } else {
                std::fs::File::create(&path)
            }
            .map_err(|e| Error::io(path.display().to_string(), e))?;
            Some(file)
        }
        None => None,
    };
    let mut log_line = |value: serde_json::Value| -> Result<()> {
        if let Some(file) = log_file.as_mut() {
            writeln!(file, "{value}").map_err(|e| Error::io("train_log.jsonl", e))?;
        }
        Ok(())
    };

    let trainable_encoder = encoder.mode() == EncoderMode::Trainable;
    let mut epoch_metrics: Vec<EpochMetrics> = Vec::new();
    let mut step_losses: Vec<f64> = Vec::new();
    let mut step = start_epoch * steps_per_epoch;
    let mut enc_grads = vec![0.0; encoder.num_params()];
    let mut head_grads = vec![0.0; head.num_params()];

    for epoch in start_epoch..config.epochs {
        // Per-epoch shuffle seeded from (seed, epoch) so resume at an
        // epoch boundary replays the identical order.
        let mut order: Vec<usize> = (0..examples.len()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(epoch as u64 + 1));
        order.shuffle(&mut rng);

        let mut epoch_loss = 0.0;
        for batch in order.chunks(config.batch_size) {
            let lr = lr_at_step(config, step, total_steps)?;
            enc_grads.fill(0.0);
            head_grads.fill(0.0);
            let mut batch_loss = 0.0;
            let scale = 1.0 / batch.len() as f64;
            for &i in batch {
                let ex = &examples[i];
                let (pooled, cache) = encoder.forward_cached(&ex.tokens)?;
                let (tel, booleans) = head.forward(&pooled)?;
                let (loss, mut d_tel, mut d_bool) = joint_loss_with_grad(
                    &tel,
                    ex.telescope,
                    &booleans,
                    &ex.booleans,
                    config.bool_reduction,
                )?;
                // Term weights are applied on the gradient side; the
                // logged loss is the unweighted joint loss.
                for d in &mut d_tel {
                    *d *= config.ce_weight * scale;
                }
                for d in &mut d_bool {
                    *d *= config.bce_weight * scale;
                }
                batch_loss += loss * scale;
                let d_pooled = head.backward(&pooled, &d_tel, &d_bool, &mut head_grads);
                if trainable_encoder {
                    encoder.backward(&ex.tokens, &cache, &d_pooled, &mut enc_grads);
                }
            }
            if !batch_loss.is_finite() {
                if let Some(dir) = out_dir {
                    // Last-good checkpoint is already on disk from the
                    // previous epoch boundary.
                    let _ = dir;
                }
                return Err(Error::NonFinite(format!("training loss at step {step}")));
            }
            if config.grad_clip_norm > 0.0 {
                let norm = global_norm(&enc_grads, &head_grads);
                if norm > config.grad_clip_norm {
                    let factor = config.grad_clip_norm / norm;
                    for g in enc_grads.iter_mut().chain(head_grads.iter_mut()) {
                        *g *= factor;
                    }
                }
            }
            if trainable_encoder {
                opt_enc.update(&mut encoder.params, &enc_grads, lr, config.weight_decay);
            }
            opt_head.update(&mut head.params, &head_grads, lr, config.weight_decay);
            step += 1;
            epoch_loss += batch_loss;
            step_losses.push(batch_loss);
            log_line(serde_json::json!({
                "step": step,
                "epoch": epoch,
                "loss": batch_loss,
                "lr": lr,
            }))?;
        }

        let report = validate_model(&encoder, &head, &val_entries, vocabulary, config.bool_f1_variant)?;
        let mut val_bool_f1 = BTreeMap::new();
        for (name, value) in crate::corpus_ingest::BOOLEAN_LABEL_NAMES
            .iter()
            .zip(report.boolean_f1.as_array())
        {
            val_bool_f1.insert(name.to_string(), value);
        }
        let metrics = EpochMetrics {
            epoch,
            val_composite: report.composite,
            val_multiclass_f1: report.multiclass_f1,
            val_bool_f1: val_bool_f1.clone(),
            mean_train_loss: epoch_loss / steps_per_epoch as f64,
        };
        log_line(serde_json::json!({
            "epoch": epoch,
            "val_composite": metrics.val_composite,
            "val_multiclass_f1": metrics.val_multiclass_f1,
            "val_bool_f1": val_bool_f1,
        }))?;
        epoch_metrics.push(metrics);

        let checkpoint = Checkpoint {
            encoder: encoder.clone(),
            head: head.clone(),
            vocabulary: vocabulary.clone(),
            tokenizer_id: tokenizer_id.to_string(),
            config: config.clone(),
            epoch: epoch + 1,
            step,
            val_composite: report.composite,
            optimizer_encoder: opt_enc.clone(),
            optimizer_head: opt_head.clone(),
        };
        // Ties go to the later epoch.
        let is_best = best
            .as_ref()
            .map(|b| checkpoint.val_composite >= b.val_composite)
            .unwrap_or(true);
        if is_best {
            best = Some(checkpoint.clone());
        }
        if let Some(dir) = out_dir {
            checkpoint.save(&dir.join("last"))?;
            if is_best {
                checkpoint.save(&dir.join("best"))?;
            }
        }
        if stop_after == Some(epoch + 1) {
            break;
        }
    }

    Ok(TrainOutcome {
        best: best.expect("at least one epoch ran"),
        epoch_metrics,
        step_losses,
        train_bibcodes: train_entries.iter().map(|e| e.bibcode().to_string()).collect(),
        validation_bibcodes: val_entries.iter().map(|e| e.bibcode().to_string()).collect(),
        chunks_per_epoch: examples.len(),
    })
}
