//! Teacher-forced training with Adam, global-norm clipping, per-epoch
//! augmentation and checkpointing.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{
    toy_encode, AugmentKind, AugmentPolicy, FeatureSet, ImageFeatures, ImageRaster, DEFAULT_DISTORTION,
};
use crate::model::{save_checkpoint, DecoderKind, Model, ModelConfig, TrainMode};
use crate::seed;
use crate::tensor::{Graph, Var};
use crate::text::{select_training_captions, CaptionDataset, Split, TrainingPair, Vocabulary};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    /// `None` picks 10 for convolutional decoders and 32 for the LSTM.
    pub batch_size: Option<usize>,
    pub epochs: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub grad_clip_norm: f64,
    pub seed: u64,
    pub augment: AugmentKind,
    pub distortion: f64,
    /// Write a numbered checkpoint every this many epochs (0 disables).
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: None,
            epochs: 30,
            learning_rate: 2e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            grad_clip_norm: 5.0,
            seed: 0,
            augment: AugmentKind::None,
            distortion: DEFAULT_DISTORTION,
            checkpoint_every: 1,
        }
    }
}

impl TrainConfig {
    pub fn batch_size_for(&self, decoder: DecoderKind) -> usize {
        self.batch_size.unwrap_or(match decoder {
            DecoderKind::Lstm => 32,
            DecoderKind::Conv | DecoderKind::ConvAttention => 10,
        })
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == Some(0) {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!(
                "learning_rate must be positive, got {}",
                self.learning_rate
            )));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::Config("Adam betas must lie in [0, 1)".into()));
        }
        if self.eps.is_nan() || self.eps <= 0.0 {
            return Err(Error::Config("eps must be positive".into()));
        }
        if self.grad_clip_norm.is_nan() || self.grad_clip_norm <= 0.0 {
            return Err(Error::Config("grad_clip_norm must be positive".into()));
        }
        AugmentPolicy::new(self.augment, self.distortion)?;
        Ok(())
    }
}

/// Adam moment buffers, one pair per parameter tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub step: u64,
    pub first: Vec<Vec<f32>>,
    pub second: Vec<Vec<f32>>,
}

impl OptimizerState {
    pub fn new(model: &Model<f32>) -> Self {
        let zeros: Vec<Vec<f32>> = model.params().iter().map(|(_, t)| vec![0.0; t.numel()]).collect();
        OptimizerState {
            step: 0,
            first: zeros.clone(),
            second: zeros,
        }
    }

    /// One bias-corrected Adam update.
    pub fn apply(&mut self, model: &mut Model<f32>, grads: &[Vec<f32>], cfg: &TrainConfig) {
        self.step += 1;
        let t = self.step as i32;
        let (b1, b2) = (cfg.beta1, cfg.beta2);
        let c1 = 1.0 - b1.powi(t);
        let c2 = 1.0 - b2.powi(t);
        for (i, p) in model.params_mut().enumerate() {
            let (m, v, g) = (&mut self.first[i], &mut self.second[i], &grads[i]);
            for (j, w) in p.data_mut().iter_mut().enumerate() {
                let gj = g[j] as f64;
                let mj = b1 * m[j] as f64 + (1.0 - b1) * gj;
                let vj = b2 * v[j] as f64 + (1.0 - b2) * gj * gj;
                m[j] = mj as f32;
                v[j] = vj as f32;
                let update = cfg.learning_rate * (mj / c1) / ((vj / c2).sqrt() + cfg.eps);
                *w = (*w as f64 - update) as f32;
            }
        }
    }
}

/// Scales `grads` in place so their global L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_global_norm(grads: &mut [Vec<f32>], max_norm: f64) -> f64 {
    let norm = grads
        .iter()
        .flatten()
        .map(|&g| (g as f64) * (g as f64))
        .sum::<f64>()
        .sqrt();
    if norm > max_norm {
        let s = max_norm / norm;
        grads.iter_mut().flatten().for_each(|g| *g = (*g as f64 * s) as f32);
    }
    norm
}

/// A caption pair together with the features it is conditioned on.
pub type Example<'a> = (&'a TrainingPair, &'a ImageFeatures);

fn trimmed(pair: &TrainingPair) -> (&[usize], &[usize], &[bool]) {
    let n = pair.active_len();
    (&pair.input_ids[..n], &pair.target_ids[..n], &pair.mask[..n])
}

/// Token-averaged masked cross-entropy of a batch, built on `g`.
///
/// Padding past the caption's END is dropped before the forward pass; causal
/// decoders make this exact.
pub fn batch_loss(
    model: &Model<f32>,
    g: &mut Graph<f32>,
    vars: &crate::model::ParamVars,
    batch: &[Example<'_>],
    mut train: Option<&mut TrainMode<'_>>,
) -> Result<Var> {
    if batch.is_empty() {
        return Err(Error::Data("empty batch".into()));
    }
    let total: usize = batch.iter().map(|(p, _)| p.active_len()).sum();
    let mut acc: Option<Var> = None;
    for (pair, feats) in batch {
        let (inputs, targets, mask) = trimmed(pair);
        let logits = model.forward(g, vars, feats, inputs, train.as_deref_mut())?;
        let ce = g.cross_entropy_masked(logits, targets, mask)?;
        let weighted = g.scale(ce, mask.len() as f64 / total as f64);
        acc = Some(match acc {
            Some(a) => g.add(a, weighted)?,
            None => weighted,
        });
    }
    Ok(acc.expect("batch is nonempty"))
}

/// Forward, backward, clip and Adam update on one batch. Returns the loss
/// measured before the update.
pub fn training_step(
    model: &mut Model<f32>,
    opt: &mut OptimizerState,
    cfg: &TrainConfig,
    batch: &[Example<'_>],
    dropout_rng: &mut dyn rand::RngCore,
) -> Result<f32> {
    let mut g = Graph::new();
    let vars = model.register(&mut g);
    let mut mode = TrainMode { rng: dropout_rng };
    let loss = batch_loss(model, &mut g, &vars, batch, Some(&mut mode))?;
    let value = g.value(loss).item();
    if !value.is_finite() {
        return Err(Error::Numeric(format!(
            "non-finite training loss {value} at step {}",
            opt.step + 1
        )));
    }
    g.backward(loss)?;
    let mut grads: Vec<Vec<f32>> = vars
        .vars()
        .iter()
        .map(|&v| {
            g.grad(v)
                .map(|t| t.data().to_vec())
                .expect("parameters receive gradients")
        })
        .collect();
    if grads.iter().flatten().any(|x| !x.is_finite()) {
        return Err(Error::Numeric(format!("non-finite gradient at step {}", opt.step + 1)));
    }
    clip_global_norm(&mut grads, cfg.grad_clip_norm);
    opt.apply(model, &grads, cfg);
    Ok(value)
}

/// Token-averaged loss over `examples` without dropout or updates.
pub fn evaluate_loss(model: &Model<f32>, examples: &[Example<'_>]) -> Result<f64> {
    let mut sum = 0.0;
    let mut count = 0usize;
    for (pair, feats) in examples {
        let (inputs, targets, mask) = trimmed(pair);
        let logits = model.logits(feats, inputs)?;
        for (t, &target) in targets.iter().enumerate() {
            if mask[t] {
                sum -= crate::tensor::log_softmax_row(logits.row(t))[target];
                count += 1;
            }
        }
    }
    if count == 0 {
        return Err(Error::Degenerate("no unmasked positions".into()));
    }
    Ok(sum / count as f64)
}

/// Fraction of unmasked positions whose teacher-forced argmax (lowest index
/// on ties) equals the target.
pub fn teacher_forced_accuracy(model: &Model<f32>, examples: &[Example<'_>]) -> Result<f64> {
    let mut correct = 0usize;
    let mut count = 0usize;
    for (pair, feats) in examples {
        let (inputs, targets, mask) = trimmed(pair);
        let logits = model.logits(feats, inputs)?;
        for (t, &target) in targets.iter().enumerate() {
            if mask[t] {
                count += 1;
                if argmax(logits.row(t)) == target {
                    correct += 1;
                }
            }
        }
    }
    if count == 0 {
        return Err(Error::Degenerate("no unmasked positions".into()));
    }
    Ok(correct as f64 / count as f64)
}

pub(crate) fn argmax(row: &[f32]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// How the toy encoder is run when features are recomputed from pixels.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderSpec {
    pub grid: usize,
    pub dim: usize,
    pub seed: u64,
}

/// Where per-image features come from during training.
pub enum FeatureSource<'a> {
    /// Fixed, precomputed features; augmentation is unavailable.
    Precomputed(&'a FeatureSet),
    /// Raw images, re-augmented and re-encoded each epoch.
    Images {
        images: &'a BTreeMap<String, ImageRaster>,
        encoder: EncoderSpec,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub epoch: usize,
    pub mean_loss: f64,
    pub wall_time: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dev_loss: Option<f64>,
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub model: Model<f32>,
    pub log: Vec<LogRecord>,
    /// Epoch and loss of the best dev-loss model, when a dev split exists.
    pub best: Option<(usize, f64)>,
    pub best_model: Option<Model<f32>>,
}

/// Artifacts written under `out_dir` by [`train`].
pub struct TrainPaths;

impl TrainPaths {
    pub const LOG: &'static str = "train_log.jsonl";
    pub const LAST: &'static str = "last.ckpt";
    pub const BEST: &'static str = "best.ckpt";

    pub fn numbered(out_dir: &Path, epoch: usize) -> PathBuf {
        out_dir.join(format!("epoch_{epoch:04}.ckpt"))
    }
}

fn clean_features(dataset: &CaptionDataset, source: &FeatureSource<'_>) -> Result<BTreeMap<String, ImageFeatures>> {
    let mut out = BTreeMap::new();
    for rec in dataset.records() {
        let feats = match source {
            FeatureSource::Precomputed(set) => set
                .get(&rec.id)
                .cloned()
                .ok_or_else(|| Error::Data(format!("no features for image {:?}", rec.id)))?,
            FeatureSource::Images { images, encoder } => {
                let img = images
                    .get(&rec.id)
                    .ok_or_else(|| Error::Data(format!("no image for {:?}", rec.id)))?;
                toy_encode(img, encoder.grid, encoder.dim, encoder.seed)?
            }
        };
        out.insert(rec.id.clone(), feats);
    }
    Ok(out)
}

/// Trains a freshly initialized model.
///
/// Every epoch redraws augmentations (when the policy is not `none` and raw
/// images are given), reapplies the maximum-length policy, shuffles, and
/// runs the batches. With `out_dir` set, the log, numbered checkpoints, the
/// last checkpoint and the best-by-dev-loss checkpoint are written there.
pub fn train(
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
    dataset: &CaptionDataset,
    vocab: &Vocabulary,
    source: &FeatureSource<'_>,
    out_dir: Option<&Path>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let mut model = Model::init(model_cfg)?;
    if model_cfg.vocab_size != vocab.len() {
        return Err(Error::Config(format!(
            "model vocab_size {} differs from vocabulary size {}",
            model_cfg.vocab_size,
            vocab.len()
        )));
    }
    if dataset.split(Split::Train).next().is_none() {
        return Err(Error::Data("dataset has no train split".into()));
    }
    let policy = AugmentPolicy::new(cfg.augment, cfg.distortion)?;
    let base = clean_features(dataset, source)?;
    let batch_size = cfg.batch_size_for(model_cfg.decoder);
    let mut opt = OptimizerState::new(&model);

    let dev_pairs = if dataset.split(Split::Dev).next().is_some() {
        let mut rng = seed::stream(cfg.seed, "dev-captions", &[]);
        Some(select_training_captions(
            dataset,
            vocab,
            Split::Dev,
            model_cfg.max_len,
            &mut rng,
        )?)
    } else {
        None
    };

    let mut log_file = match out_dir {
        Some(dir) => {
            std::fs::create_dir_all(dir)?;
            save_checkpoint(&model, TrainPaths::numbered(dir, 0))?;
            Some(std::fs::File::create(dir.join(TrainPaths::LOG))?)
        }
        None => None,
    };

    let started = Instant::now();
    let mut log = Vec::new();
    let mut best: Option<(usize, f64)> = None;
    let mut best_model = None;

    for epoch in 1..=cfg.epochs {
        let e = epoch as u64;
        let feats: BTreeMap<String, ImageFeatures> = match source {
            FeatureSource::Images { images, encoder } if cfg.augment != AugmentKind::None => {
                let mut out = BTreeMap::new();
                for rec in dataset.split(Split::Train) {
                    let mut rng = seed::stream(cfg.seed, "augment", &[e, seed::fnv1a(&rec.id)]);
                    let img = policy.apply(&images[&rec.id], &mut rng);
                    out.insert(
                        rec.id.clone(),
                        toy_encode(&img, encoder.grid, encoder.dim, encoder.seed)?,
                    );
                }
                out
            }
            _ => BTreeMap::new(),
        };
        let features_for = |id: &str| feats.get(id).unwrap_or(&base[id]);

        let mut caption_rng = seed::stream(cfg.seed, "captions", &[e]);
        let mut pairs = select_training_captions(dataset, vocab, Split::Train, model_cfg.max_len, &mut caption_rng)?;
        let mut shuffle_rng = seed::stream(cfg.seed, "shuffle", &[e]);
        pairs.shuffle(&mut shuffle_rng);
        let mut dropout_rng = seed::stream(cfg.seed, "dropout", &[e]);

        let mut loss_sum = 0.0;
        let mut batches = 0usize;
        for chunk in pairs.chunks(batch_size) {
            let batch: Vec<Example<'_>> = chunk.iter().map(|p| (p, features_for(&p.image_id))).collect();
            loss_sum += training_step(&mut model, &mut opt, cfg, &batch, &mut dropout_rng)? as f64;
            batches += 1;
        }
        let mean_loss = loss_sum / batches as f64;

        let dev_loss = match &dev_pairs {
            Some(dp) => {
                let ex: Vec<Example<'_>> = dp.iter().map(|p| (p, &base[&p.image_id])).collect();
                Some(evaluate_loss(&model, &ex)?)
            }
            None => None,
        };
        if let Some(dl) = dev_loss {
            if best.is_none_or(|(_, b)| dl < b) {
                best = Some((epoch, dl));
                best_model = Some(model.clone());
                if let Some(dir) = out_dir {
                    save_checkpoint(&model, dir.join(TrainPaths::BEST))?;
                }
            }
        }

        let record = LogRecord {
            epoch,
            mean_loss,
            wall_time: started.elapsed().as_secs_f64(),
            dev_loss,
        };
        log::info!("epoch {epoch}: loss {mean_loss:.4}");
        if let (Some(f), Some(dir)) = (log_file.as_mut(), out_dir) {
            writeln!(f, "{}", serde_json::to_string(&record)?)?;
            if cfg.checkpoint_every > 0 && epoch % cfg.checkpoint_every == 0 {
                save_checkpoint(&model, TrainPaths::numbered(dir, epoch))?;
            }
        }
        log.push(record);
    }

    if let Some(dir) = out_dir {
        if cfg.epochs > 0 {
            save_checkpoint(&model, dir.join(TrainPaths::LAST))?;
        }
    }
    Ok(TrainOutcome {
        model,
        log,
        best,
        best_model,
    })
}

/// Pairs each training pair with its image's features.
pub fn examples<'a>(pairs: &'a [TrainingPair], features: &'a FeatureSet) -> Result<Vec<Example<'a>>> {
    pairs
        .iter()
        .map(|p| {
            features
                .get(&p.image_id)
                .map(|f| (p, f))
                .ok_or_else(|| Error::Data(format!("no features for image {:?}", p.image_id)))
        })
        .collect()
}
