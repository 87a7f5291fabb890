//! Acceptance run. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any criterion fails or exceeds its time budget.

mod common;

use std::collections::BTreeMap;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::{Duration, Instant};

use common::*;
use convcap_core::decode::{beam_search, brute_force_decode, greedy_decode, DecodeOptions, ModelScorer};
use convcap_core::experiment::{
    ablation_table, caption_split, featurize, run_ablation, AblationData, GridKind, InferenceConfig, RunConfig,
};
use convcap_core::image::{flip_h, flip_v, rotate90k, AugmentKind, FeatureSet};
use convcap_core::metrics::{bleu, cider, evaluate_corpus, rouge_l, EvalInstance, ROUGE_BETA, TABLE_COLUMNS};
use convcap_core::model::{read_checkpoint, receptive_field, write_checkpoint, DecoderKind, Model, ModelConfig};
use convcap_core::synth::{generate, SynthSpec};
use convcap_core::text::{select_training_captions, Split, Vocabulary};
use convcap_core::train::{examples, teacher_forced_accuracy, train, FeatureSource, TrainConfig};
use rand::Rng;

type Outcome = Result<String, String>;
type Criterion = (&'static str, u64, fn() -> Outcome);

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn gradient_suite() -> Outcome {
    let mut worst_op = 0.0f64;
    for op in OPS {
        for seed in 0..20 {
            let e = op_error(op, seed);
            ensure(e < 1e-4, || format!("{op} seed {seed}: relative error {e:e}"))?;
            worst_op = worst_op.max(e);
        }
    }
    let mut worst_model = 0.0f64;
    for kind in [DecoderKind::Conv, DecoderKind::ConvAttention, DecoderKind::Lstm] {
        for seed in 0..20 {
            let e = model_error(kind, seed);
            ensure(e < 1e-3, || format!("{kind:?} seed {seed}: relative error {e:e}"))?;
            worst_model = worst_model.max(e);
        }
    }
    Ok(format!(
        "{} ops max {worst_op:.1e}, models max {worst_model:.1e}",
        OPS.len()
    ))
}

fn causality() -> Outcome {
    for kind in [DecoderKind::Conv, DecoderKind::ConvAttention, DecoderKind::Lstm] {
        for seed in 0..100 {
            ensure(causality_trial(kind, seed), || {
                format!("{kind:?} seed {seed} leaks future tokens")
            })?;
        }
    }
    for kind in [DecoderKind::Conv, DecoderKind::ConvAttention] {
        for layers in 1..=4 {
            let cfg = ModelConfig {
                decoder: kind,
                num_layers: layers,
                kernel: 5,
                ..ModelConfig::default()
            };
            let rf = receptive_field(&cfg).map_err(|e| e.to_string())?;
            ensure(rf == 1 + layers * 4, || format!("receptive field {rf} for L={layers}"))?;
            let steps = rf + 4;
            let support = gradient_support(kind, layers, 5, steps);
            ensure(support == (steps - rf..steps).collect::<Vec<_>>(), || {
                format!("{kind:?} L={layers}: support {support:?}, expected width {rf}")
            })?;
        }
    }
    Ok("300 trials exact; support 5/9/13/17 for L=1..4".into())
}

fn beam_exactness() -> Outcome {
    for seed in 0..50 {
        let (model, feats) = toy_decoder(seed);
        let scorer = ModelScorer::new(&model, &feats);
        let v = model.config().vocab_size;
        for max_len in 1..=4 {
            let opts = DecodeOptions::with_max_len(max_len);
            let beam = beam_search(&scorer, v.pow(max_len as u32), &opts).map_err(|e| e.to_string())?;
            let (exact, _) = brute_force_decode(&scorer, &opts).map_err(|e| e.to_string())?;
            ensure(beam.best() == &exact, || format!("seed {seed} max_len {max_len}"))?;
        }
    }
    for seed in 0..100 {
        let (model, feats) = toy_decoder(seed);
        let scorer = ModelScorer::new(&model, &feats);
        let opts = DecodeOptions::with_max_len(4);
        let greedy = greedy_decode(&scorer, &opts).map_err(|e| e.to_string())?.logprob;
        let mut prev = f64::NEG_INFINITY;
        for width in 1..=5 {
            let best = beam_search(&scorer, width, &opts)
                .map_err(|e| e.to_string())?
                .best()
                .logprob;
            ensure(best >= prev, || {
                format!("seed {seed}: width {width} scored {best} < {prev}")
            })?;
            if width == 3 {
                ensure(best >= greedy, || {
                    format!("seed {seed}: beam-3 {best} < greedy {greedy}")
                })?;
            }
            prev = best;
        }
    }
    Ok("50 saturated models exact; beam-3 >= greedy and widths 1..5 monotone on 100".into())
}

fn to_eval(corpus: &[Instance]) -> Vec<EvalInstance> {
    corpus
        .iter()
        .enumerate()
        .map(|(i, c)| EvalInstance {
            image_id: format!("i{i}"),
            candidate: c.cand.clone(),
            references: c.refs.clone(),
        })
        .collect()
}

fn words(s: &str) -> Vec<String> {
    s.split_whitespace().map(String::from).collect()
}

fn metric_oracles() -> Outcome {
    let mut worst = 0.0f64;
    for seed in 0..20 {
        let corpus = random_corpus(&mut rng(seed), 2 + seed as usize % 5);
        let ev = to_eval(&corpus);
        let (b, ob) = (bleu(&ev, 4), oracle_bleu(&corpus, 4));
        let mut diffs: Vec<f64> = (0..4).map(|n| (b[n] - ob[n]).abs()).collect();
        diffs.push((rouge_l(&ev, ROUGE_BETA) - oracle_rouge(&corpus, ROUGE_BETA)).abs());
        diffs.push((cider(&ev, 4) - oracle_cider(&corpus, 4)).abs());
        let d = diffs.iter().copied().fold(0.0, f64::max);
        ensure(d < 1e-9, || format!("seed {seed}: deviation {d:e}"))?;
        worst = worst.max(d);
    }
    let identity = to_eval(&[Instance {
        cand: words("a red circle on the left"),
        refs: vec![words("a red circle on the left")],
    }]);
    ensure(bleu(&identity, 4).iter().all(|&v| v == 1.0), || {
        "identity BLEU below 1".into()
    })?;
    ensure(rouge_l(&identity, ROUGE_BETA) == 1.0, || {
        "identity ROUGE-L below 1".into()
    })?;
    let clipped = to_eval(&[Instance {
        cand: words("the the the the the the the"),
        refs: vec![words("the cat is on the mat"), words("there is a cat on the mat")],
    }]);
    let p1 = bleu(&clipped, 1)[0];
    ensure((p1 - 2.0 / 7.0).abs() < 1e-12, || format!("clipped precision {p1}"))?;
    Ok(format!(
        "20 corpora max deviation {worst:.1e}; identity 1.0; clipping 2/7"
    ))
}

fn augmentation() -> Outcome {
    let expected: [(AugmentKind, &[(&str, f64)]); 5] = [
        (
            AugmentKind::Rotate,
            &[
                ("identity", 0.4),
                ("rotate90", 0.2),
                ("rotate180", 0.2),
                ("rotate270", 0.2),
            ],
        ),
        (
            AugmentKind::Flip,
            &[("identity", 0.5), ("flip_h", 0.25), ("flip_v", 0.25)],
        ),
        (AugmentKind::Horizontal, &[("identity", 0.5), ("flip_h", 0.5)]),
        (AugmentKind::Vertical, &[("identity", 0.5), ("flip_v", 0.5)]),
        (AugmentKind::Perspective, &[("identity", 0.5), ("perspective", 0.5)]),
    ];
    let mut worst = 0.0f64;
    for (i, (kind, probs)) in expected.iter().enumerate() {
        let freq = policy_frequencies(*kind, 10_000, 100 + i as u64);
        let want: BTreeMap<&str, f64> = probs.iter().copied().collect();
        ensure(freq.keys().all(|k| want.contains_key(k)), || {
            format!("{kind:?}: unexpected outcomes {freq:?}")
        })?;
        for (label, p) in &want {
            let f = freq.get(label).copied().unwrap_or(0.0);
            ensure((f - p).abs() <= 0.02, || format!("{kind:?} {label}: {f} vs {p}"))?;
            worst = worst.max((f - p).abs());
        }
    }
    for seed in 0..20 {
        let mut r = rng(seed);
        let (w, h) = (r.gen_range(1..12), r.gen_range(1..12));
        let img = convcap_core::image::ImageRaster::new(w, h, (0..w * h * 3).map(|_| r.gen()).collect())
            .map_err(|e| e.to_string())?;
        ensure(flip_h(&flip_h(&img)) == img, || "flip_h is not an involution".into())?;
        ensure(flip_v(&flip_v(&img)) == img, || "flip_v is not an involution".into())?;
        ensure(rotate90k(&img, 4) == img, || {
            "four quarter turns differ from identity".into()
        })?;
        ensure(rotate90k(&rotate90k(&img, 1), 3) == img, || {
            "rotate90 then rotate270 differs".into()
        })?;
        ensure(rotate90k(&img, 2) == flip_h(&flip_v(&img)), || {
            "rotate180 differs from both flips".into()
        })?;
        ensure(rotate90k(&rotate90k(&img, 1), 1) == rotate90k(&img, 2), || {
            "two quarter turns differ".into()
        })?;
    }
    Ok(format!(
        "5 policies x 10000 draws, max deviation {worst:.4}; identities exact"
    ))
}

fn overfit_one(kind: DecoderKind, lr: f64) -> Result<(f64, f64), String> {
    let corpus = generate(&SynthSpec::default()).map_err(|e| e.to_string())?;
    let vocab = Vocabulary::build(&corpus.dataset, 1).map_err(|e| e.to_string())?;
    let feats = featurize(&corpus.images, 4, 64, 0).map_err(|e| e.to_string())?;
    let mc = ModelConfig {
        decoder: kind,
        emb_dim: 64,
        hidden: 64,
        vocab_size: vocab.len(),
        ..ModelConfig::default()
    };
    let tc = TrainConfig {
        epochs: 300,
        learning_rate: lr,
        ..TrainConfig::default()
    };
    let out = train(
        &mc,
        &tc,
        &corpus.dataset,
        &vocab,
        &FeatureSource::Precomputed(&feats),
        None,
    )
    .map_err(|e| e.to_string())?;
    let mut r = convcap_core::seed::stream(0, "overfit", &[]);
    let pairs = select_training_captions(&corpus.dataset, &vocab, Split::Train, mc.max_len, &mut r)
        .map_err(|e| e.to_string())?;
    let ex = examples(&pairs, &feats).map_err(|e| e.to_string())?;
    let acc = teacher_forced_accuracy(&out.model, &ex).map_err(|e| e.to_string())?;
    let inference = InferenceConfig {
        beam_width: 3,
        ..InferenceConfig::default()
    };
    let caps = caption_split(
        &out.model,
        &feats,
        &corpus.dataset,
        &vocab,
        Some(Split::Train),
        &inference,
    )
    .map_err(|e| e.to_string())?;
    let cands: Vec<_> = caps.into_iter().map(|c| c.0).collect();
    let report = evaluate_corpus(&cands, &corpus.dataset, Split::Train).map_err(|e| e.to_string())?;
    Ok((acc, report.bleu4))
}

fn overfit() -> Outcome {
    let mut parts = Vec::new();
    let mut failures = Vec::new();
    for (kind, lr) in [(DecoderKind::Conv, 2e-3), (DecoderKind::Lstm, 5e-3)] {
        let (acc, b4) = overfit_one(kind, lr)?;
        let line = format!("{} acc {acc:.4} BLEU-4 {b4:.4}", kind.name());
        if acc < 0.95 || b4 < 0.90 {
            failures.push(line.clone());
        }
        parts.push(line);
    }
    if failures.is_empty() {
        Ok(parts.join("; "))
    } else {
        Err(parts.join("; "))
    }
}

fn ablation() -> Outcome {
    let corpus = generate(&SynthSpec {
        count: 48,
        ..SynthSpec::default()
    })
    .map_err(|e| e.to_string())?;
    let vocab = Vocabulary::build(&corpus.dataset, 1).map_err(|e| e.to_string())?;
    let mut base = RunConfig::default();
    base.model.emb_dim = 32;
    base.model.hidden = 32;
    base.model.feature_dim = 32;
    base.train.epochs = 15;
    base.train.learning_rate = 2e-3;
    let data = AblationData {
        dataset: &corpus.dataset,
        vocab: &vocab,
        images: &corpus.images,
        eval_split: Split::Test,
    };
    let header = |label: &str| {
        let mut cols = vec![label.to_string()];
        cols.extend(TABLE_COLUMNS.iter().map(|c| c.to_string()));
        cols
    };
    for grid in [GridKind::Layers, GridKind::MaxLen, GridKind::Augment] {
        let first = run_ablation(grid, &base, &data).map_err(|e| e.to_string())?;
        let second = run_ablation(grid, &base, &data).map_err(|e| e.to_string())?;
        let (ta, tb) = (ablation_table(grid, &first), ablation_table(grid, &second));
        ensure(ta == tb, || format!("{} table differs between runs", grid.name()))?;
        for cell in &first {
            ensure(cell.result.is_ok(), || {
                format!("{} cell {}: {:?}", grid.name(), cell.label, cell.result)
            })?;
        }
        let labels: Vec<String> = first.iter().map(|c| c.label.clone()).collect();
        ensure(labels == grid.labels(), || format!("{} labels {labels:?}", grid.name()))?;
        let mut lines = ta.lines();
        let head: Vec<String> = lines
            .next()
            .unwrap_or_default()
            .split_whitespace()
            .map(String::from)
            .collect();
        ensure(head == header(grid.name()), || {
            format!("{} header {head:?}", grid.name())
        })?;
        for (line, label) in lines.by_ref().zip(&labels) {
            let fields: Vec<&str> = line.split_whitespace().collect();
            ensure(
                fields.len() == head.len() && fields[0] == label && fields[5] == "n/a",
                || format!("{} row {line:?}", grid.name()),
            )?;
            let numeric = fields.iter().enumerate().filter(|(i, _)| *i != 0 && *i != 5);
            for (_, f) in numeric {
                ensure(f.parse::<f64>().is_ok_and(f64::is_finite), || {
                    format!("{} cell {f:?}", grid.name())
                })?;
            }
        }
        ensure(lines.next().is_none(), || format!("{} has extra rows", grid.name()))?;
    }
    Ok("layers 4, max_len 7, augment 6 cells; reruns byte-identical".into())
}

fn serialization() -> Outcome {
    for kind in [DecoderKind::Conv, DecoderKind::ConvAttention, DecoderKind::Lstm] {
        let cfg = toy_config(kind, 2, 9, 4);
        let model = Model::init(&cfg).map_err(|e| e.to_string())?;
        let bytes = write_checkpoint(&model).map_err(|e| e.to_string())?;
        let loaded = read_checkpoint(&bytes).map_err(|e| e.to_string())?;
        for ((na, ta), (nb, tb)) in model.params().iter().zip(loaded.params()) {
            let same = na == nb
                && ta.shape() == tb.shape()
                && ta.data().iter().zip(tb.data()).all(|(a, b)| a.to_bits() == b.to_bits());
            ensure(same, || format!("{kind:?} parameter {na} changed"))?;
        }
        ensure(write_checkpoint(&loaded).map_err(|e| e.to_string())? == bytes, || {
            "re-encoding differs".into()
        })?;
        let feats = random_features(&mut rng(1), cfg.regions, cfg.feature_dim);
        let tokens = [0, 5, 6, 7];
        let (a, b) = (
            model.logits(&feats, &tokens).map_err(|e| e.to_string())?,
            loaded.logits(&feats, &tokens).map_err(|e| e.to_string())?,
        );
        ensure(
            a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits()),
            || format!("{kind:?} logits differ after load"),
        )?;
    }
    let corpus = generate(&SynthSpec::default()).map_err(|e| e.to_string())?;
    let set = featurize(&corpus.images, 4, 16, 3).map_err(|e| e.to_string())?;
    let bytes = set.write();
    let back = FeatureSet::read(&bytes).map_err(|e| e.to_string())?;
    ensure(back.write() == bytes, || "feature file re-encoding differs".into())?;
    for (id, f) in set.iter() {
        let g = back.get(id).ok_or_else(|| format!("{id} missing after read"))?;
        let same = f
            .regions()
            .iter()
            .zip(g.regions())
            .all(|(a, b)| a.to_bits() == b.to_bits())
            && f.global()
                .iter()
                .zip(g.global())
                .all(|(a, b)| a.to_bits() == b.to_bits());
        ensure(same, || format!("{id} features changed"))?;
    }
    Ok(format!("3 checkpoints and {} feature records bitwise", set.len()))
}

fn length_policy() -> Outcome {
    for seed in 0..100 {
        length_policy_trial(seed).map_err(|e| format!("seed {seed}: {e}"))?;
    }
    Ok("100 datasets".into())
}

fn main() {
    let criteria: [Criterion; 9] = [
        ("gradient suite", 60, gradient_suite),
        ("causality and receptive field", 60, causality),
        ("beam search exactness", 60, beam_exactness),
        ("metric oracles", 30, metric_oracles),
        ("augmentation distributions", 30, augmentation),
        ("overfit run", 600, overfit),
        ("ablation harness", 5400, ablation),
        ("serialization", 10, serialization),
        ("sentence length policy", 10, length_policy),
    ];
    let only: Option<usize> = std::env::var("ACCEPTANCE_ONLY").ok().and_then(|v| v.parse().ok());
    let mut failed = 0;
    for (i, (name, budget, run)) in criteria.iter().enumerate() {
        let n = i + 1;
        if only.is_some_and(|o| o != n) {
            continue;
        }
        let start = Instant::now();
        let result = catch_unwind(AssertUnwindSafe(run)).unwrap_or_else(|p| {
            Err(p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panicked".into()))
        });
        let elapsed = start.elapsed();
        let over = elapsed > Duration::from_secs(*budget);
        let (status, detail) = match &result {
            Ok(d) if !over => ("PASS", d.clone()),
            Ok(d) => ("FAIL", format!("{d}; over time budget")),
            Err(e) => ("FAIL", e.clone()),
        };
        if status == "FAIL" {
            failed += 1;
        }
        println!(
            "{status} [{n}] {name}: {detail} ({:.1}s, budget {budget}s)",
            elapsed.as_secs_f64()
        );
    }
    if failed > 0 {
        println!("{failed} criteria failed");
        std::process::exit(1);
    }
}
