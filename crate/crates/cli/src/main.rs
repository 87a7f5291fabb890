//! `convcap`: command-line front end for the captioning pipeline.

use std::fs;
use std::io::{BufReader, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use convcap_core::decode::write_nbest;
use convcap_core::experiment::{
    ablation_table, caption_split, featurize, run_ablation, AblationData, GridKind, RunConfig,
};
use convcap_core::image::{contact_sheet, AugmentKind, AugmentPolicy, FeatureSet, ImageRaster};
use convcap_core::metrics::{evaluate_corpus, format_table, read_candidates};
use convcap_core::model::{load_checkpoint, DecoderKind};
use convcap_core::synth::{generate, read_images, SynthSpec};
use convcap_core::text::{CaptionDataset, Split, Vocabulary};
use convcap_core::train::{train, FeatureSource};
use convcap_core::{seed, Error};

#[derive(Parser)]
#[command(
    name = "convcap",
    version,
    about = "Train and evaluate convolutional and LSTM image caption decoders"
)]
struct Cli {
    /// Run configuration (JSON with model, train, data and inference sections).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides every seed in the configuration.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone, Default)]
struct DataArgs {
    /// Captions JSONL.
    #[arg(long)]
    captions: Option<PathBuf>,
    /// Directory of `<id>.ppm` images.
    #[arg(long)]
    images: Option<PathBuf>,
    /// Precomputed feature file.
    #[arg(long)]
    features: Option<PathBuf>,
    /// Vocabulary JSON.
    #[arg(long)]
    vocab: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic shapes corpus.
    Synth {
        #[arg(long)]
        count: Option<usize>,
        #[arg(long)]
        canvas: Option<usize>,
        #[arg(long)]
        captions_per_image: Option<usize>,
    },
    /// Build the vocabulary from the train split.
    Vocab {
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        min_count: Option<usize>,
    },
    /// Encode images into a feature file.
    Featurize {
        #[command(flatten)]
        data: DataArgs,
    },
    /// Train a decoder.
    Train {
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        decoder: Option<DecoderKind>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        batch_size: Option<usize>,
        #[arg(long)]
        learning_rate: Option<f64>,
        #[arg(long)]
        layers: Option<usize>,
        #[arg(long)]
        augment: Option<AugmentKind>,
    },
    /// Beam-decode captions with a trained checkpoint.
    Caption {
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Split to caption; every featurized image when omitted.
        #[arg(long)]
        split: Option<Split>,
        #[arg(long)]
        beam_width: Option<usize>,
    },
    /// Score candidate captions against the references of a split.
    Eval {
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        candidates: PathBuf,
        #[arg(long, default_value = "test")]
        split: Split,
    },
    /// Run one ablation grid and write its table.
    Ablate {
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        grid: GridKind,
        #[arg(long, default_value = "test")]
        split: Split,
    },
    /// Write a contact sheet of sampled augmentations of one image.
    Augment {
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        policy: AugmentKind,
        #[arg(long, default_value_t = 10)]
        samples: usize,
        #[arg(long, default_value_t = 5)]
        columns: usize,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            let code = e
                .chain()
                .find_map(|c| c.downcast_ref::<Error>())
                .map_or(1, Error::exit_code);
            ExitCode::from(code as u8)
        }
    }
}

fn resolve_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.model.seed = s;
        cfg.train.seed = s;
        cfg.data.feature_seed = s;
    }
    Ok(cfg)
}

fn apply_data(cfg: &mut RunConfig, data: &DataArgs) {
    let d = &mut cfg.data;
    for (slot, value) in [
        (&mut d.captions, &data.captions),
        (&mut d.images, &data.images),
        (&mut d.features, &data.features),
        (&mut d.vocab, &data.vocab),
    ] {
        if value.is_some() {
            slot.clone_from(value);
        }
    }
}

fn require<'a>(path: &'a Option<PathBuf>, what: &str) -> Result<&'a Path> {
    path.as_deref()
        .ok_or_else(|| Error::Config(format!("no {what} path given (flag or data.{what} in config)")).into())
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::Data(format!("{}: {e}", path.display())).into())
}

fn load_dataset(cfg: &RunConfig) -> Result<CaptionDataset> {
    let path = require(&cfg.data.captions, "captions")?;
    let bytes = read_file(path)?;
    CaptionDataset::read_jsonl(BufReader::new(&bytes[..])).with_context(|| path.display().to_string())
}

fn load_vocab(cfg: &RunConfig) -> Result<Vocabulary> {
    let path = require(&cfg.data.vocab, "vocab")?;
    let text = String::from_utf8_lossy(&read_file(path)?).into_owned();
    Vocabulary::from_json(&text).with_context(|| path.display().to_string())
}

fn load_features(path: &Path) -> Result<FeatureSet> {
    FeatureSet::read(&read_file(path)?).with_context(|| path.display().to_string())
}

/// Features from `data.features` if set, otherwise encoded from `data.images`.
fn features_for(cfg: &RunConfig, dataset: &CaptionDataset, dim: usize) -> Result<FeatureSet> {
    if let Some(path) = &cfg.data.features {
        return load_features(path);
    }
    let images = read_images(require(&cfg.data.images, "images")?, dataset)?;
    Ok(featurize(&images, cfg.data.grid, dim, cfg.data.feature_seed)?)
}

fn write_out(dir: &Path, name: &str, bytes: impl AsRef<[u8]>) -> Result<PathBuf> {
    let path = dir.join(name);
    fs::write(&path, bytes).with_context(|| path.display().to_string())?;
    Ok(path)
}

fn run(cli: Cli) -> Result<()> {
    let mut cfg = resolve_config(&cli)?;
    let out = cli.out.clone();
    fs::create_dir_all(&out).with_context(|| out.display().to_string())?;
    match &cli.command {
        Command::Synth {
            count,
            canvas,
            captions_per_image,
        } => {
            let mut spec = SynthSpec {
                seed: cli.seed.unwrap_or(0),
                ..SynthSpec::default()
            };
            spec.count = count.unwrap_or(spec.count);
            spec.canvas = canvas.unwrap_or(spec.canvas);
            spec.captions_per_image = captions_per_image.unwrap_or(spec.captions_per_image);
            let corpus = generate(&spec)?;
            corpus.write(&out)?;
            write_out(&out, "synth.json", serde_json::to_string_pretty(&spec)?)?;
            println!(
                "wrote {} images and {} captions to {}",
                corpus.items.len(),
                corpus.dataset.records().iter().map(|r| r.captions.len()).sum::<usize>(),
                out.display()
            );
        }
        Command::Vocab { data, min_count } => {
            apply_data(&mut cfg, data);
            if let Some(m) = min_count {
                cfg.data.min_count = *m;
            }
            let dataset = load_dataset(&cfg)?;
            let vocab = Vocabulary::build(&dataset, cfg.data.min_count)?;
            let path = write_out(&out, "vocab.json", vocab.to_json()?)?;
            write_out(&out, "config.json", cfg.to_json()?)?;
            println!("{} tokens -> {}", vocab.len(), path.display());
        }
        Command::Featurize { data } => {
            apply_data(&mut cfg, data);
            cfg.data.features = None;
            let dataset = load_dataset(&cfg)?;
            let set = features_for(&cfg, &dataset, cfg.model.feature_dim)?;
            let path = write_out(&out, "features.icf", set.write())?;
            write_out(&out, "config.json", cfg.to_json()?)?;
            println!("{} images -> {}", set.len(), path.display());
        }
        Command::Train {
            data,
            decoder,
            epochs,
            batch_size,
            learning_rate,
            layers,
            augment,
        } => {
            apply_data(&mut cfg, data);
            if let Some(d) = decoder {
                cfg.model.decoder = *d;
            }
            if let Some(l) = layers {
                cfg.model.num_layers = *l;
            }
            if let Some(e) = epochs {
                cfg.train.epochs = *e;
            }
            if batch_size.is_some() {
                cfg.train.batch_size = *batch_size;
            }
            if let Some(lr) = learning_rate {
                cfg.train.learning_rate = *lr;
            }
            if let Some(a) = augment {
                cfg.train.augment = *a;
            }
            let dataset = load_dataset(&cfg)?;
            let vocab = match &cfg.data.vocab {
                Some(_) => load_vocab(&cfg)?,
                None => {
                    let v = Vocabulary::build(&dataset, cfg.data.min_count)?;
                    cfg.data.vocab = Some(write_out(&out, "vocab.json", v.to_json()?)?);
                    v
                }
            };
            cfg.model.vocab_size = vocab.len();
            let precomputed;
            let images;
            let source = match (&cfg.data.features, &cfg.data.images) {
                (Some(path), _) if cfg.train.augment == AugmentKind::None || cfg.data.images.is_none() => {
                    precomputed = load_features(path)?;
                    cfg.model.regions = precomputed.num_regions();
                    cfg.model.feature_dim = precomputed.dim();
                    FeatureSource::Precomputed(&precomputed)
                }
                (_, Some(dir)) => {
                    images = read_images(dir, &dataset)?;
                    cfg.model.regions = cfg.data.grid * cfg.data.grid;
                    FeatureSource::Images {
                        images: &images,
                        encoder: cfg.data.encoder(cfg.model.feature_dim),
                    }
                }
                _ => return Err(Error::Config("train needs --features or --images".into()).into()),
            };
            cfg.validate()?;
            write_out(&out, "config.json", cfg.to_json()?)?;
            let outcome = train(&cfg.model, &cfg.train, &dataset, &vocab, &source, Some(&out))?;
            let batch = cfg.train.batch_size_for(cfg.model.decoder);
            let final_loss = outcome
                .log
                .last()
                .map_or("n/a".to_string(), |r| format!("{:.4}", r.mean_loss));
            println!(
                "{} decoder, batch {batch}, {} epochs, final loss {final_loss}",
                cfg.model.decoder.name(),
                outcome.log.len()
            );
        }
        Command::Caption {
            data,
            checkpoint,
            split,
            beam_width,
        } => {
            apply_data(&mut cfg, data);
            if let Some(w) = beam_width {
                cfg.inference.beam_width = *w;
            }
            let model = load_checkpoint(checkpoint).with_context(|| checkpoint.display().to_string())?;
            cfg.model = model.config().clone();
            cfg.validate()?;
            let vocab = load_vocab(&cfg)?;
            if vocab.len() != cfg.model.vocab_size {
                return Err(Error::Config(format!(
                    "vocabulary has {} tokens but the checkpoint expects {}",
                    vocab.len(),
                    cfg.model.vocab_size
                ))
                .into());
            }
            let dataset = match (&cfg.data.captions, split) {
                (Some(_), _) => load_dataset(&cfg)?,
                (None, Some(_)) => return Err(Error::Config("--split needs --captions".into()).into()),
                (None, None) => CaptionDataset::new(Vec::new())?,
            };
            let features = match &cfg.data.features {
                Some(path) => load_features(path)?,
                None => features_for(&cfg, &dataset, cfg.model.feature_dim)?,
            };
            let results = caption_split(&model, &features, &dataset, &vocab, *split, &cfg.inference)?;
            let mut cands = Vec::new();
            let mut nbest = Vec::new();
            for (cand, hyps) in &results {
                writeln!(cands, "{}", serde_json::to_string(cand)?)?;
                write_nbest(&mut nbest, &cand.id, hyps, &vocab)?;
            }
            write_out(&out, "captions.jsonl", cands)?;
            write_out(&out, "nbest.jsonl", nbest)?;
            write_out(&out, "config.json", cfg.to_json()?)?;
            for (cand, _) in results.iter().take(5) {
                println!("{}: {}", cand.id, cand.tokens.join(" "));
            }
            println!("captioned {} images", results.len());
        }
        Command::Eval {
            data,
            candidates,
            split,
        } => {
            apply_data(&mut cfg, data);
            let dataset = load_dataset(&cfg)?;
            let bytes = read_file(candidates)?;
            let cands =
                read_candidates(BufReader::new(&bytes[..])).with_context(|| candidates.display().to_string())?;
            let report = evaluate_corpus(&cands, &dataset, *split)?;
            write_out(&out, "metrics.json", serde_json::to_string_pretty(&report)?)?;
            write_out(&out, "config.json", cfg.to_json()?)?;
            print!("{}", format_table("split", &[(split.to_string(), Some(report))]));
        }
        Command::Ablate { data, grid, split } => {
            apply_data(&mut cfg, data);
            let dataset = load_dataset(&cfg)?;
            let vocab = match &cfg.data.vocab {
                Some(_) => load_vocab(&cfg)?,
                None => Vocabulary::build(&dataset, cfg.data.min_count)?,
            };
            let images = read_images(require(&cfg.data.images, "images")?, &dataset)?;
            cfg.model.regions = cfg.data.grid * cfg.data.grid;
            let cells = run_ablation(
                *grid,
                &cfg,
                &AblationData {
                    dataset: &dataset,
                    vocab: &vocab,
                    images: &images,
                    eval_split: *split,
                },
            )?;
            let table = ablation_table(*grid, &cells);
            write_out(&out, &format!("ablation_{}.txt", grid.name()), &table)?;
            let records: Vec<serde_json::Value> = cells
                .iter()
                .map(|c| {
                    let mut cell_cfg = c.config.clone();
                    cell_cfg.model.vocab_size = vocab.len();
                    serde_json::json!({
                        "label": c.label,
                        "config": cell_cfg,
                        "metrics": c.result.as_ref().ok(),
                        "error": c.result.as_ref().err(),
                    })
                })
                .collect();
            write_out(
                &out,
                &format!("ablation_{}.json", grid.name()),
                serde_json::to_string_pretty(&records)?,
            )?;
            write_out(&out, "config.json", cfg.to_json()?)?;
            print!("{table}");
        }
        Command::Augment {
            image,
            policy,
            samples,
            columns,
        } => {
            let img = ImageRaster::read_ppm(&read_file(image)?).with_context(|| image.display().to_string())?;
            if *samples == 0 {
                return Err(Error::Config("samples must be at least 1".into()).into());
            }
            let policy = AugmentPolicy::new(*policy, cfg.train.distortion)?;
            let mut rng = seed::stream(cfg.train.seed, "augment", &[]);
            let tiles: Vec<ImageRaster> = (0..*samples).map(|_| policy.apply(&img, &mut rng)).collect();
            let sheet = contact_sheet(&tiles, *columns)?;
            let path = write_out(
                &out,
                &format!("augment_{}.ppm", policy.kind().name()),
                sheet.write_ppm(),
            )?;
            write_out(&out, "config.json", cfg.to_json()?)?;
            println!("{} tiles -> {}", tiles.len(), path.display());
        }
    }
    Ok(())
}
