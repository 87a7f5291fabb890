//! Shared oracles for the integration tests.
#![allow(dead_code)]

use std::collections::BTreeMap;

use convcap_core::image::ImageFeatures;
use convcap_core::model::{DecoderKind, Model, ModelConfig};
use convcap_core::tensor::{Graph, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const FD_STEP: f64 = 1e-3;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_tensor(rng: &mut impl Rng, shape: &[usize], scale: f64) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-scale..scale)).collect()).unwrap()
}

fn l2(v: impl Iterator<Item = f64>) -> f64 {
    v.map(|x| x * x).sum::<f64>().sqrt()
}

/// `‖a − b‖ / max(‖a‖, ‖b‖)`, zero when both vanish.
pub fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let diff = l2(a.iter().zip(b).map(|(x, y)| x - y));
    let scale = l2(a.iter().copied()).max(l2(b.iter().copied()));
    if scale == 0.0 {
        0.0
    } else {
        diff / scale
    }
}

/// Compares reverse-mode gradients of `Σ build(inputs) ⊙ R` (R a fixed
/// random weighting) against central differences. Returns the worst
/// relative error over the inputs.
pub fn check_op<F>(inputs: &[Tensor<f64>], seed: u64, build: F) -> f64
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Var,
{
    let weights = {
        let mut g = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|t| g.constant(t.clone())).collect();
        let out = build(&mut g, &vars);
        random_tensor(&mut rng(seed ^ 0x5eed), g.shape(out), 1.0)
    };
    let weighted = |g: &mut Graph<f64>, out: Var| -> Var {
        if g.value(out).numel() == 1 && weights.numel() == 1 {
            g.scale(out, weights.item())
        } else {
            let w = g.constant(weights.clone());
            let p = g.mul(out, w).unwrap();
            g.sum(p)
        }
    };
    let loss_at = |vals: &[Tensor<f64>]| -> f64 {
        let mut g = Graph::new();
        let vars: Vec<Var> = vals.iter().map(|t| g.constant(t.clone())).collect();
        let out = build(&mut g, &vars);
        let l = weighted(&mut g, out);
        g.value(l).item()
    };

    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let out = build(&mut g, &vars);
    let loss = weighted(&mut g, out);
    g.backward(loss).unwrap();

    let mut worst: f64 = 0.0;
    for (i, v) in vars.iter().enumerate() {
        let analytic = g.grad(*v).unwrap().data().to_vec();
        let numeric: Vec<f64> = (0..analytic.len())
            .map(|j| {
                let mut plus = inputs.to_vec();
                plus[i].data_mut()[j] += FD_STEP;
                let mut minus = inputs.to_vec();
                minus[i].data_mut()[j] -= FD_STEP;
                (loss_at(&plus) - loss_at(&minus)) / (2.0 * FD_STEP)
            })
            .collect();
        worst = worst.max(rel_err(&analytic, &numeric));
    }
    worst
}

pub fn random_features(rng: &mut impl Rng, regions: usize, dim: usize) -> ImageFeatures {
    let r: Vec<f32> = (0..regions * dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let mut global = vec![0.0f32; dim];
    for k in 0..regions {
        for d in 0..dim {
            global[d] += r[k * dim + d] / regions as f32;
        }
    }
    ImageFeatures::new(dim, r, global).unwrap()
}

pub fn toy_config(decoder: DecoderKind, layers: usize, vocab: usize, seed: u64) -> ModelConfig {
    ModelConfig {
        decoder,
        num_layers: layers,
        emb_dim: 4,
        hidden: 4,
        kernel: 3,
        vocab_size: vocab,
        feature_dim: 3,
        regions: 2,
        max_len: 6,
        seed,
        ..ModelConfig::default()
    }
}

/// Masked cross-entropy of a model on one sequence, in `f64`.
pub fn model_loss(
    model: &Model<f64>,
    feats: &ImageFeatures,
    inputs: &[usize],
    targets: &[usize],
    mask: &[bool],
) -> f64 {
    let mut g = Graph::new();
    let vars = model.register(&mut g);
    let logits = model.forward(&mut g, &vars, feats, inputs, None).unwrap();
    let l = g.cross_entropy_masked(logits, targets, mask).unwrap();
    g.value(l).item()
}

/// Worst relative error between reverse-mode and central-difference
/// gradients over all parameter tensors of `model`.
pub fn check_model(
    model: &Model<f64>,
    feats: &ImageFeatures,
    inputs: &[usize],
    targets: &[usize],
    mask: &[bool],
) -> f64 {
    let mut g = Graph::new();
    let vars = model.register(&mut g);
    let logits = model.forward(&mut g, &vars, feats, inputs, None).unwrap();
    let l = g.cross_entropy_masked(logits, targets, mask).unwrap();
    g.backward(l).unwrap();
    let mut analytic = Vec::new();
    let mut numeric = Vec::new();
    for (i, (name, t)) in model.params().iter().enumerate() {
        analytic.extend_from_slice(g.grad(vars.vars()[i]).unwrap().data());
        for j in 0..t.numel() {
            let mut plus = model.clone();
            plus.param_mut(name).unwrap().data_mut()[j] += FD_STEP;
            let mut minus = model.clone();
            minus.param_mut(name).unwrap().data_mut()[j] -= FD_STEP;
            let d = (model_loss(&plus, feats, inputs, targets, mask)
                - model_loss(&minus, feats, inputs, targets, mask))
                / (2.0 * FD_STEP);
            numeric.push(d);
        }
    }
    rel_err(&analytic, &numeric)
}

/// Multiplies every parameter by `factor`, sharpening the output
/// distributions of a freshly initialized model.
pub fn sharpen(model: &mut Model<f32>, factor: f32) {
    for t in model.params_mut() {
        t.data_mut().iter_mut().for_each(|v| *v *= factor);
    }
}

// Metric oracles, written independently of the library: n-grams are
// space-joined strings, counts are linear scans, LCS is found by
// enumerating candidate subsequences.

pub fn ngrams(tokens: &[String], n: usize) -> Vec<String> {
    if tokens.len() < n {
        return Vec::new();
    }
    (0..=tokens.len() - n).map(|i| tokens[i..i + n].join(" ")).collect()
}

fn count_of(list: &[String], g: &str) -> usize {
    list.iter().filter(|x| x.as_str() == g).count()
}

#[derive(Clone, Debug)]
pub struct Instance {
    pub cand: Vec<String>,
    pub refs: Vec<Vec<String>>,
}

pub fn oracle_bleu(corpus: &[Instance], n_max: usize) -> Vec<f64> {
    let mut clipped = vec![0.0; n_max];
    let mut totals = vec![0.0; n_max];
    let mut cand_len = 0.0;
    let mut ref_len = 0.0;
    for inst in corpus {
        let c = inst.cand.len() as i64;
        cand_len += c as f64;
        let mut best: Option<i64> = None;
        for r in &inst.refs {
            let rl = r.len() as i64;
            best = Some(match best {
                None => rl,
                Some(b) if (rl - c).abs() < (b - c).abs() || ((rl - c).abs() == (b - c).abs() && rl < b) => rl,
                Some(b) => b,
            });
        }
        ref_len += best.unwrap() as f64;
        for n in 1..=n_max {
            let grams = ngrams(&inst.cand, n);
            let mut distinct: Vec<String> = Vec::new();
            for g in &grams {
                if !distinct.contains(g) {
                    distinct.push(g.clone());
                }
            }
            for g in &distinct {
                let in_cand = count_of(&grams, g);
                let max_ref = inst.refs.iter().map(|r| count_of(&ngrams(r, n), g)).max().unwrap_or(0);
                clipped[n - 1] += in_cand.min(max_ref) as f64;
            }
            totals[n - 1] += grams.len() as f64;
        }
    }
    let bp = if cand_len == 0.0 {
        0.0
    } else if cand_len >= ref_len {
        1.0
    } else {
        (1.0 - ref_len / cand_len).exp()
    };
    (1..=n_max)
        .map(|n| {
            let ps: Vec<f64> = (0..n)
                .map(|k| if totals[k] == 0.0 { 0.0 } else { clipped[k] / totals[k] })
                .collect();
            if ps.contains(&0.0) {
                0.0
            } else {
                let geo: f64 = ps.iter().product::<f64>().powf(1.0 / n as f64);
                bp * geo
            }
        })
        .collect()
}

fn is_subsequence(needle: &[&String], hay: &[String]) -> bool {
    let mut it = hay.iter();
    needle.iter().all(|n| it.any(|h| h == *n))
}

pub fn oracle_lcs(a: &[String], b: &[String]) -> usize {
    let mut best = 0;
    for mask in 0u32..(1 << a.len()) {
        let sub: Vec<&String> = (0..a.len()).filter(|i| mask & (1 << i) != 0).map(|i| &a[i]).collect();
        if sub.len() > best && is_subsequence(&sub, b) {
            best = sub.len();
        }
    }
    best
}

pub fn oracle_rouge(corpus: &[Instance], beta: f64) -> f64 {
    let mut total = 0.0;
    for inst in corpus {
        let mut best: f64 = 0.0;
        for r in &inst.refs {
            let l = oracle_lcs(&inst.cand, r) as f64;
            if l > 0.0 {
                let p = l / inst.cand.len() as f64;
                let rec = l / r.len() as f64;
                best = best.max((1.0 + beta * beta) * p * rec / (rec + beta * beta * p));
            }
        }
        total += best;
    }
    total / corpus.len() as f64
}

pub fn oracle_cider(corpus: &[Instance], n_max: usize) -> f64 {
    let n_img = corpus.len() as f64;
    let mut score = 0.0;
    for inst in corpus {
        let mut per_n = 0.0;
        for n in 1..=n_max {
            let idf = |g: &str| -> f64 {
                let df = corpus
                    .iter()
                    .filter(|o| o.refs.iter().any(|r| ngrams(r, n).iter().any(|x| x == g)))
                    .count();
                n_img.ln() - (df.max(1) as f64).ln()
            };
            let vector = |toks: &[String]| -> BTreeMap<String, f64> {
                let grams = ngrams(toks, n);
                let mut v = BTreeMap::new();
                for g in &grams {
                    v.insert(g.clone(), count_of(&grams, g) as f64 * idf(g));
                }
                v
            };
            let cv = vector(&inst.cand);
            let cn = cv.values().map(|x| x * x).sum::<f64>().sqrt();
            let mut acc = 0.0;
            for r in &inst.refs {
                let rv = vector(r);
                let rn = rv.values().map(|x| x * x).sum::<f64>().sqrt();
                if cn > 0.0 && rn > 0.0 {
                    let dot: f64 = cv.iter().map(|(g, x)| x * rv.get(g).unwrap_or(&0.0)).sum();
                    acc += dot / (cn * rn);
                }
            }
            per_n += acc / inst.refs.len() as f64;
        }
        score += 10.0 * per_n / n_max as f64;
    }
    score / n_img
}

pub fn random_sentence(rng: &mut impl Rng, words: &[&str], min: usize, max: usize) -> Vec<String> {
    let len = rng.gen_range(min..=max);
    (0..len)
        .map(|_| words[rng.gen_range(0..words.len())].to_string())
        .collect()
}

pub fn random_corpus(rng: &mut impl Rng, images: usize) -> Vec<Instance> {
    let words = ["a", "dog", "cat", "runs", "on", "the", "grass", "red", "ball"];
    (0..images)
        .map(|_| {
            let refs = (0..rng.gen_range(1..=4))
                .map(|_| random_sentence(rng, &words, 1, 8))
                .collect();
            Instance {
                cand: random_sentence(rng, &words, 0, 8),
                refs,
            }
        })
        .collect()
}

pub const OPS: [&str; 22] = [
    "matmul",
    "transpose",
    "add",
    "add_scalar",
    "mul",
    "mul_scalar",
    "scale",
    "sigmoid",
    "tanh",
    "concat",
    "add_bias",
    "conv1d_causal",
    "glu",
    "softmax",
    "cross_entropy",
    "gather_rows",
    "repeat_rows",
    "slice_cols",
    "slice_rows",
    "stack_rows",
    "sum",
    "dropout",
];

/// Finite-difference relative error of one op on a seeded random case.
pub fn op_error(op: &str, seed: u64) -> f64 {
    let mut r = rng(seed);
    let mut dim = |lo: usize, hi: usize| r.gen_range(lo..=hi);
    let (m, k, n) = (dim(1, 4), dim(1, 4), dim(1, 4));
    let mut r = rng(seed.wrapping_add(1));
    let mut t = |shape: &[usize]| random_tensor(&mut r, shape, 1.0);
    match op {
        "matmul" => check_op(&[t(&[m, k]), t(&[k, n])], seed, |g, v| g.matmul(v[0], v[1]).unwrap()),
        "transpose" => check_op(&[t(&[m, n])], seed, |g, v| g.transpose(v[0]).unwrap()),
        "add" => check_op(&[t(&[m, n]), t(&[m, n])], seed, |g, v| g.add(v[0], v[1]).unwrap()),
        "add_scalar" => check_op(&[t(&[m, n]), t(&[1])], seed, |g, v| g.add(v[0], v[1]).unwrap()),
        "mul" => check_op(&[t(&[m, n]), t(&[m, n])], seed, |g, v| g.mul(v[0], v[1]).unwrap()),
        "mul_scalar" => check_op(&[t(&[1]), t(&[m, n])], seed, |g, v| g.mul(v[0], v[1]).unwrap()),
        "scale" => check_op(&[t(&[m, n])], seed, |g, v| g.scale(v[0], -1.7)),
        "sigmoid" => check_op(&[t(&[m, n])], seed, |g, v| g.sigmoid(v[0])),
        "tanh" => check_op(&[t(&[m, n])], seed, |g, v| g.tanh(v[0])),
        "concat" => check_op(&[t(&[m, k]), t(&[m, n])], seed, |g, v| g.concat(v[0], v[1]).unwrap()),
        "add_bias" => check_op(&[t(&[m, n]), t(&[n])], seed, |g, v| g.add_bias(v[0], v[1]).unwrap()),
        "conv1d_causal" => {
            let kw = 1 + (seed as usize % 3);
            check_op(&[t(&[m + 1, k]), t(&[kw, k, n]), t(&[n])], seed, |g, v| {
                g.conv1d_causal(v[0], v[1], v[2]).unwrap()
            })
        }
        "glu" => check_op(&[t(&[m, 2 * n])], seed, |g, v| g.glu(v[0]).unwrap()),
        "softmax" => check_op(&[t(&[m, n + 1])], seed, |g, v| g.softmax(v[0])),
        "cross_entropy" => {
            let vocab = n + 1;
            let targets: Vec<usize> = (0..m).map(|i| (i * 7 + seed as usize) % vocab).collect();
            let mut mask: Vec<bool> = (0..m).map(|i| !(i + seed as usize).is_multiple_of(3)).collect();
            mask[0] = true;
            check_op(&[t(&[m, vocab])], seed, move |g, v| {
                g.cross_entropy_masked(v[0], &targets, &mask).unwrap()
            })
        }
        "gather_rows" => {
            let ids: Vec<usize> = (0..m + 2).map(|i| (i * 5 + seed as usize) % k).collect();
            check_op(&[t(&[k, n])], seed, move |g, v| g.gather_rows(v[0], &ids).unwrap())
        }
        "repeat_rows" => check_op(&[t(&[1, n])], seed, |g, v| g.repeat_rows(v[0], m).unwrap()),
        "slice_cols" => check_op(&[t(&[m, n + 2])], seed, |g, v| g.slice_cols(v[0], 1, n).unwrap()),
        "slice_rows" => check_op(&[t(&[m + 2, n])], seed, |g, v| g.slice_rows(v[0], 1, m).unwrap()),
        "stack_rows" => check_op(&[t(&[1, n]), t(&[1, n]), t(&[1, n])], seed, |g, v| {
            g.stack_rows(v).unwrap()
        }),
        "sum" => check_op(&[t(&[m, n])], seed, |g, v| g.sum(v[0])),
        "dropout" => {
            let keep: Vec<f64> = (0..m * n)
                .map(|i| {
                    if (i + seed as usize).is_multiple_of(3) {
                        0.0
                    } else {
                        1.5
                    }
                })
                .collect();
            check_op(&[t(&[m, n])], seed, move |g, v| g.dropout(v[0], keep.clone()).unwrap())
        }
        other => panic!("unknown op {other}"),
    }
}

/// Finite-difference relative error of a full toy decoder on a seeded
/// random sequence.
pub fn model_error(decoder: DecoderKind, seed: u64) -> f64 {
    let mut r = rng(seed);
    let layers = 1 + (seed as usize % 2);
    let cfg = toy_config(decoder, layers, 5, seed);
    let model: Model<f64> = Model::init(&cfg).unwrap().cast();
    let feats = random_features(&mut r, cfg.regions, cfg.feature_dim);
    let steps = 3;
    let inputs: Vec<usize> = (0..steps).map(|_| r.gen_range(0..5)).collect();
    let targets: Vec<usize> = (0..steps).map(|_| r.gen_range(0..5)).collect();
    let mut mask: Vec<bool> = (0..steps).map(|_| r.gen_bool(0.7)).collect();
    mask[0] = true;
    check_model(&model, &feats, &inputs, &targets, &mask)
}

/// Perturbs tokens after a random cut point and reports whether logits up to
/// the cut stayed bitwise identical.
pub fn causality_trial(decoder: DecoderKind, seed: u64) -> bool {
    let mut r = rng(seed);
    let vocab = 7;
    let mut cfg = toy_config(decoder, 1 + (seed as usize % 4), vocab, seed);
    cfg.max_len = 9;
    let model = Model::init(&cfg).unwrap();
    let feats = random_features(&mut r, cfg.regions, cfg.feature_dim);
    let steps = r.gen_range(2..=cfg.max_len + 1);
    let tokens: Vec<usize> = (0..steps).map(|_| r.gen_range(0..vocab)).collect();
    let cut = r.gen_range(0..steps - 1);
    let mut changed = tokens.clone();
    for t in changed.iter_mut().skip(cut + 1) {
        *t = (*t + r.gen_range(1..vocab)) % vocab;
    }
    let a = model.logits(&feats, &tokens).unwrap();
    let b = model.logits(&feats, &changed).unwrap();
    (0..=cut).all(|t| a.row(t).iter().zip(b.row(t)).all(|(x, y)| x.to_bits() == y.to_bits()))
}

/// Input positions whose embedding receives gradient from the logits at
/// the last position. Every position carries a distinct token.
pub fn gradient_support(decoder: DecoderKind, layers: usize, kernel: usize, steps: usize) -> Vec<usize> {
    let cfg = ModelConfig {
        decoder,
        num_layers: layers,
        emb_dim: 4,
        hidden: 4,
        kernel,
        vocab_size: steps,
        feature_dim: 3,
        regions: 2,
        max_len: steps,
        seed: 11,
        ..ModelConfig::default()
    };
    let model: Model<f64> = Model::init(&cfg).unwrap().cast();
    let feats = random_features(&mut rng(3), 2, 3);
    let tokens: Vec<usize> = (0..steps).collect();
    let mut g = Graph::new();
    let vars = model.register(&mut g);
    let logits = model.forward(&mut g, &vars, &feats, &tokens, None).unwrap();
    let last = g.slice_rows(logits, steps - 1, 1).unwrap();
    let w = g.constant(random_tensor(&mut rng(5), &[1, steps], 1.0));
    let p = g.mul(last, w).unwrap();
    let l = g.sum(p);
    g.backward(l).unwrap();
    let embed = g.grad(vars.vars()[0]).unwrap();
    (0..steps).filter(|&t| embed.row(t).iter().any(|&v| v != 0.0)).collect()
}

/// A small decoder with sharpened outputs for search tests. Vocabulary
/// size is 3 to 5; the model accepts up to 4 decode steps.
pub fn toy_decoder(seed: u64) -> (Model<f32>, ImageFeatures) {
    let mut r = rng(seed);
    let kinds = [DecoderKind::Conv, DecoderKind::ConvAttention, DecoderKind::Lstm];
    let vocab = r.gen_range(3..=5);
    let mut cfg = toy_config(kinds[seed as usize % 3], 1 + (seed as usize % 2), vocab, seed);
    cfg.max_len = 4;
    let mut model = Model::init(&cfg).unwrap();
    sharpen(&mut model, r.gen_range(1.5..4.0));
    let feats = random_features(&mut r, cfg.regions, cfg.feature_dim);
    (model, feats)
}

/// Checks the maximum-length policy on one seeded random dataset.
pub fn length_policy_trial(seed: u64) -> Result<(), String> {
    use convcap_core::text::{
        select_captions, select_training_captions, CaptionDataset, ImageRecord, Split, Vocabulary,
    };
    let mut r = rng(seed);
    let max_len = r.gen_range(1..=8);
    let words = ["a", "b", "c", "d", "e"];
    let records: Vec<ImageRecord> = (0..r.gen_range(1..=6))
        .map(|i| ImageRecord {
            id: format!("img{i}"),
            split: Split::Train,
            captions: (0..r.gen_range(1..=5))
                .map(|_| random_sentence(&mut r, &words, 1, 12))
                .collect(),
        })
        .collect();
    for rec in &records {
        let chosen = select_captions(&rec.captions, max_len, &mut rng(seed ^ 77));
        if chosen.len() != rec.captions.len() {
            return Err(format!("{}: count {} != {}", rec.id, chosen.len(), rec.captions.len()));
        }
        let fitting: Vec<&Vec<String>> = rec.captions.iter().filter(|c| c.len() <= max_len).collect();
        for (orig, got) in rec.captions.iter().zip(&chosen) {
            if orig.len() <= max_len {
                if got != orig {
                    return Err(format!("{}: fitting caption changed", rec.id));
                }
            } else if !fitting.is_empty() {
                if !fitting.contains(&got) {
                    return Err(format!("{}: replacement {got:?} is not a qualifying sibling", rec.id));
                }
            } else {
                let shortest = rec.captions.iter().map(Vec::len).min().unwrap();
                let source = rec.captions.iter().find(|c| c.len() == shortest).unwrap();
                if got.as_slice() != &source[..max_len] {
                    return Err(format!("{}: truncation fallback wrong", rec.id));
                }
            }
        }
    }
    let ds = CaptionDataset::new(records.clone()).map_err(|e| e.to_string())?;
    let vocab = Vocabulary::build(&ds, 1).map_err(|e| e.to_string())?;
    let pairs =
        select_training_captions(&ds, &vocab, Split::Train, max_len, &mut rng(seed)).map_err(|e| e.to_string())?;
    for rec in &records {
        let n = pairs.iter().filter(|p| p.image_id == rec.id).count();
        if n != rec.captions.len() {
            return Err(format!("{}: {n} pairs for {} captions", rec.id, rec.captions.len()));
        }
    }
    for p in &pairs {
        let len = p.active_len();
        if len > max_len + 1 {
            return Err("pair longer than max_len + 1".into());
        }
        for t in 0..len - 1 {
            if p.target_ids[t] != p.input_ids[t + 1] {
                return Err("shift-by-one property violated".into());
            }
        }
    }
    Ok(())
}

/// Empirical outcome frequencies of `draws` seeded policy draws, keyed by
/// transform label.
pub fn policy_frequencies(
    kind: convcap_core::image::AugmentKind,
    draws: usize,
    seed: u64,
) -> BTreeMap<&'static str, f64> {
    let policy = convcap_core::image::AugmentPolicy::from_kind(kind);
    let mut r = rng(seed);
    let mut counts: BTreeMap<&'static str, usize> = BTreeMap::new();
    for _ in 0..draws {
        *counts.entry(policy.draw(16, 16, &mut r).label()).or_insert(0) += 1;
    }
    counts.into_iter().map(|(k, v)| (k, v as f64 / draws as f64)).collect()
}
