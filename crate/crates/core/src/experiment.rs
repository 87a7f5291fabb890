//! Run configuration, end-to-end pipeline helpers and the ablation grids.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::decode::{beam_search, DecodeOptions, Hypothesis, ModelScorer};
use crate::error::{Error, Result};
use crate::image::{toy_encode, AugmentKind, FeatureSet, ImageRaster};
use crate::metrics::{evaluate_corpus, format_table, CandidateRecord, MetricReport};
use crate::model::{Model, ModelConfig};
use crate::seed;
use crate::text::{CaptionDataset, Split, Vocabulary};
use crate::train::{train, EncoderSpec, FeatureSource, TrainConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub captions: Option<PathBuf>,
    pub images: Option<PathBuf>,
    pub features: Option<PathBuf>,
    pub vocab: Option<PathBuf>,
    pub min_count: usize,
    pub grid: usize,
    pub feature_seed: u64,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            captions: None,
            images: None,
            features: None,
            vocab: None,
            min_count: 1,
            grid: 4,
            feature_seed: 0,
        }
    }
}

impl DataConfig {
    pub fn encoder(&self, dim: usize) -> EncoderSpec {
        EncoderSpec {
            grid: self.grid,
            dim,
            seed: self.feature_seed,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InferenceConfig {
    pub beam_width: usize,
    /// Decode steps; defaults to the model's `max_len + 1` so END fits.
    pub max_len: Option<usize>,
    pub length_norm: bool,
    pub suppress_unk: bool,
}

impl Default for InferenceConfig {
    fn default() -> Self {
        InferenceConfig {
            beam_width: 3,
            max_len: None,
            length_norm: false,
            suppress_unk: false,
        }
    }
}

impl InferenceConfig {
    pub fn options(&self, model: &ModelConfig) -> DecodeOptions {
        DecodeOptions {
            max_len: self.max_len.unwrap_or(model.max_len + 1).min(model.max_len + 1),
            length_norm: self.length_norm,
            suppress_unk: self.suppress_unk,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
    pub inference: InferenceConfig,
}

impl RunConfig {
    pub fn from_json(s: &str) -> Result<Self> {
        serde_json::from_str(s).map_err(|e| Error::Config(format!("run config: {e}")))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        if self.inference.beam_width == 0 {
            return Err(Error::Config("beam_width must be at least 1".into()));
        }
        if self.data.grid == 0 {
            return Err(Error::Config("grid must be at least 1".into()));
        }
        Ok(())
    }
}

/// Runs the toy encoder over every image.
pub fn featurize(images: &BTreeMap<String, ImageRaster>, grid: usize, dim: usize, seed: u64) -> Result<FeatureSet> {
    let mut set = FeatureSet::new(grid * grid, dim);
    for (id, img) in images {
        set.insert(id, toy_encode(img, grid, dim, seed)?)?;
    }
    Ok(set)
}

/// Beam-decodes every image of `split`; returns candidates and n-best lists
/// in dataset order.
pub fn caption_split(
    model: &Model<f32>,
    features: &FeatureSet,
    dataset: &CaptionDataset,
    vocab: &Vocabulary,
    split: Option<Split>,
    inference: &InferenceConfig,
) -> Result<Vec<(CandidateRecord, Vec<Hypothesis>)>> {
    let opts = inference.options(model.config());
    let ids: Vec<&str> = match split {
        Some(s) => dataset.split(s).map(|r| r.id.as_str()).collect(),
        None => features.iter().map(|(id, _)| id).collect(),
    };
    let mut out = Vec::with_capacity(ids.len());
    for id in ids {
        let feats = features
            .get(id)
            .ok_or_else(|| Error::Data(format!("no features for image {id:?}")))?;
        let scorer = ModelScorer::new(model, feats);
        let result = beam_search(&scorer, inference.beam_width, &opts)?;
        let mut nbest = result.nbest;
        nbest.truncate(inference.beam_width);
        let cand = CandidateRecord {
            id: id.to_string(),
            tokens: vocab.decode(&nbest[0].tokens)?,
        };
        out.push((cand, nbest));
    }
    Ok(out)
}

/// Which knob an ablation grid varies.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GridKind {
    Layers,
    MaxLen,
    Augment,
}

impl GridKind {
    pub fn name(self) -> &'static str {
        match self {
            GridKind::Layers => "layers",
            GridKind::MaxLen => "max_len",
            GridKind::Augment => "augment",
        }
    }

    pub fn labels(self) -> Vec<String> {
        match self {
            GridKind::Layers => LAYER_GRID.iter().map(|v| v.to_string()).collect(),
            GridKind::MaxLen => MAX_LEN_GRID.iter().map(|v| v.to_string()).collect(),
            GridKind::Augment => AugmentKind::ALL.iter().map(|k| k.name().to_string()).collect(),
        }
    }
}

impl std::str::FromStr for GridKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "layers" => Ok(GridKind::Layers),
            "max_len" => Ok(GridKind::MaxLen),
            "augment" => Ok(GridKind::Augment),
            other => Err(Error::Config(format!("unknown ablation grid {other:?}"))),
        }
    }
}

pub const LAYER_GRID: [usize; 4] = [1, 2, 3, 4];
pub const MAX_LEN_GRID: [usize; 7] = [10, 15, 20, 25, 30, 35, 40];

/// Inputs shared by every ablation cell.
pub struct AblationData<'a> {
    pub dataset: &'a CaptionDataset,
    pub vocab: &'a Vocabulary,
    pub images: &'a BTreeMap<String, ImageRaster>,
    pub eval_split: Split,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationCell {
    pub label: String,
    pub config: RunConfig,
    pub result: std::result::Result<MetricReport, String>,
}

/// The run configuration for each cell of `grid`, with per-cell seeds.
pub fn grid_configs(grid: GridKind, base: &RunConfig) -> Vec<(String, RunConfig)> {
    grid.labels()
        .into_iter()
        .enumerate()
        .map(|(i, label)| {
            let mut cfg = base.clone();
            let cell_seed = seed::derive(base.train.seed, &[seed::fnv1a(grid.name()), i as u64]);
            cfg.train.seed = cell_seed;
            cfg.model.seed = cell_seed;
            match grid {
                GridKind::Layers => cfg.model.num_layers = LAYER_GRID[i],
                GridKind::MaxLen => cfg.model.max_len = MAX_LEN_GRID[i],
                GridKind::Augment => cfg.train.augment = AugmentKind::ALL[i],
            }
            (label, cfg)
        })
        .collect()
}

fn run_cell(cfg: &RunConfig, data: &AblationData<'_>, features: &FeatureSet) -> Result<MetricReport> {
    let mut model_cfg = cfg.model.clone();
    model_cfg.vocab_size = data.vocab.len();
    model_cfg.regions = features.num_regions();
    let source = FeatureSource::Images {
        images: data.images,
        encoder: cfg.data.encoder(model_cfg.feature_dim),
    };
    let outcome = train(&model_cfg, &cfg.train, data.dataset, data.vocab, &source, None)?;
    let model = outcome.best_model.unwrap_or(outcome.model);
    let captions = caption_split(
        &model,
        features,
        data.dataset,
        data.vocab,
        Some(data.eval_split),
        &cfg.inference,
    )?;
    let cands: Vec<CandidateRecord> = captions.into_iter().map(|(c, _)| c).collect();
    evaluate_corpus(&cands, data.dataset, data.eval_split)
}

fn thread_cap() -> usize {
    let available = std::thread::available_parallelism().map_or(1, |n| n.get());
    match std::env::var("CONVCAP_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
    {
        Some(n) if n >= 1 => n,
        _ => available,
    }
}

/// Trains and evaluates every cell of `grid`. Cells run on up to
/// `CONVCAP_THREADS` worker threads; a failing cell is recorded and the
/// rest continue.
pub fn run_ablation(grid: GridKind, base: &RunConfig, data: &AblationData<'_>) -> Result<Vec<AblationCell>> {
    let mut checked = base.clone();
    checked.model.vocab_size = data.vocab.len();
    checked.validate()?;
    if data.dataset.split(data.eval_split).next().is_none() {
        return Err(Error::Data(format!("evaluation split {} is empty", data.eval_split)));
    }
    let features = featurize(
        data.images,
        base.data.grid,
        base.model.feature_dim,
        base.data.feature_seed,
    )?;
    let configs = grid_configs(grid, base);
    let workers = thread_cap().min(configs.len()).max(1);
    let next = std::sync::atomic::AtomicUsize::new(0);
    let slots: std::sync::Mutex<Vec<Option<std::result::Result<MetricReport, String>>>> =
        std::sync::Mutex::new(vec![None; configs.len()]);
    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, std::sync::atomic::Ordering::SeqCst);
                if i >= configs.len() {
                    break;
                }
                let (label, cfg) = &configs[i];
                log::info!("ablation {} cell {label}", grid.name());
                let r = run_cell(cfg, data, &features).map_err(|e| e.to_string());
                if let Err(e) = &r {
                    log::warn!("ablation {} cell {label} failed: {e}", grid.name());
                }
                slots.lock().expect("no worker panicked")[i] = Some(r);
            });
        }
    });
    let results = slots.into_inner().expect("no worker panicked");
    Ok(configs
        .into_iter()
        .zip(results)
        .map(|((label, config), result)| AblationCell {
            label,
            config,
            result: result.unwrap_or_else(|| Err("cell did not run".into())),
        })
        .collect())
}

pub fn ablation_table(grid: GridKind, cells: &[AblationCell]) -> String {
    let rows: Vec<(String, Option<MetricReport>)> = cells
        .iter()
        .map(|c| (c.label.clone(), c.result.as_ref().ok().copied()))
        .collect();
    format_table(grid.name(), &rows)
}
