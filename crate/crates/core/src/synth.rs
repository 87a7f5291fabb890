//! Synthetic shapes corpus: small PPM images of one colored shape on a
//! gradient background, each with template captions naming color, shape and
//! position.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::ImageRaster;
use crate::seed;
use crate::text::{tokenize, CaptionDataset, ImageRecord, Split};

pub const SHAPES: [&str; 3] = ["circle", "square", "triangle"];

pub const COLORS: [(&str, [u8; 3]); 8] = [
    ("red", [230, 30, 30]),
    ("green", [30, 200, 40]),
    ("blue", [30, 60, 235]),
    ("yellow", [245, 230, 40]),
    ("purple", [140, 40, 200]),
    ("orange", [250, 140, 20]),
    ("white", [250, 250, 250]),
    ("black", [10, 10, 10]),
];

pub const POSITIONS: [&str; 5] = ["left", "right", "top", "bottom", "center"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthSpec {
    pub count: usize,
    pub canvas: usize,
    pub captions_per_image: usize,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            count: 32,
            canvas: 32,
            captions_per_image: 5,
            seed: 0,
        }
    }
}

/// What was drawn in one image.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SynthItem {
    pub id: String,
    pub color: String,
    pub shape: String,
    pub position: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthCorpus {
    pub images: BTreeMap<String, ImageRaster>,
    pub dataset: CaptionDataset,
    pub items: Vec<SynthItem>,
}

fn position_phrase(pos: &str) -> String {
    match pos {
        "left" | "right" => format!("on the {pos}"),
        "center" => "in the center".into(),
        _ => format!("at the {pos}"),
    }
}

/// The caption repeated for every image; the remaining slot takes one
/// paraphrase that differs from it at the first word.
fn captions_for(item: &SynthItem, n: usize, rng: &mut impl Rng) -> Vec<String> {
    let (c, s, p) = (&item.color, &item.shape, &item.position);
    let pp = position_phrase(p);
    let canonical = format!("a {c} {s} {pp}");
    let paraphrases = [
        format!("the {p} of the picture has a {c} {s}"),
        format!("there is a {c} {s} {pp}"),
        format!("there is a {c} {s} drawn {pp} of a plain background with nothing else around it"),
    ];
    let mut out = vec![canonical; n.saturating_sub(1).max(1)];
    if n > 1 {
        out.push(paraphrases[rng.gen_range(0..paraphrases.len())].clone());
    }
    out
}

fn inside(shape: &str, dx: f64, dy: f64, r: f64) -> bool {
    match shape {
        "circle" => dx * dx + dy * dy <= r * r,
        "square" => dx.abs() <= 0.85 * r && dy.abs() <= 0.85 * r,
        // apex up, base at dy = r
        _ => dy >= -r && dy <= r && dx.abs() <= (dy + r) / 2.0,
    }
}

fn render(item: &SynthItem, canvas: usize) -> ImageRaster {
    let n = canvas as f64;
    let (cx, cy) = match item.position.as_str() {
        "left" => (0.25 * n, 0.5 * n),
        "right" => (0.75 * n, 0.5 * n),
        "top" => (0.5 * n, 0.25 * n),
        "bottom" => (0.5 * n, 0.75 * n),
        _ => (0.5 * n, 0.5 * n),
    };
    let r = 0.2 * n;
    let rgb = COLORS
        .iter()
        .find(|(name, _)| *name == item.color)
        .map(|c| c.1)
        .unwrap_or([0, 0, 0]);
    let mut img = ImageRaster::filled(canvas, canvas, [0, 0, 0]);
    let span = (canvas.max(2) - 1) as f64;
    for y in 0..canvas {
        for x in 0..canvas {
            let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
            let px_rgb = if inside(&item.shape, px - cx, py - cy, r) {
                rgb
            } else {
                [
                    (40.0 + 160.0 * x as f64 / span) as u8,
                    (40.0 + 160.0 * y as f64 / span) as u8,
                    90,
                ]
            };
            img.set(x, y, px_rgb);
        }
    }
    img
}

/// Deterministic corpus for `spec`. Color, shape and position combinations
/// are drawn without replacement until all 120 are used.
pub fn generate(spec: &SynthSpec) -> Result<SynthCorpus> {
    if spec.count == 0 {
        return Err(Error::Config("synth count must be at least 1".into()));
    }
    if spec.canvas < 8 {
        return Err(Error::Config("synth canvas must be at least 8 pixels".into()));
    }
    if spec.captions_per_image == 0 {
        return Err(Error::Config("captions_per_image must be at least 1".into()));
    }
    let mut combos = Vec::new();
    for (c, _) in COLORS {
        for s in SHAPES {
            for p in POSITIONS {
                combos.push((c, s, p));
            }
        }
    }
    let mut rng = seed::stream(spec.seed, "synth", &[]);
    let mut order = Vec::with_capacity(spec.count);
    while order.len() < spec.count {
        let mut round = combos.clone();
        round.shuffle(&mut rng);
        order.extend(round);
    }
    order.truncate(spec.count);

    let mut images = BTreeMap::new();
    let mut records = Vec::new();
    let mut items = Vec::new();
    for (i, (c, s, p)) in order.into_iter().enumerate() {
        let item = SynthItem {
            id: format!("img_{i:04}"),
            color: c.into(),
            shape: s.into(),
            position: p.into(),
        };
        images.insert(item.id.clone(), render(&item, spec.canvas));
        let captions = captions_for(&item, spec.captions_per_image, &mut rng)
            .iter()
            .map(|c| tokenize(c))
            .collect();
        records.push(ImageRecord {
            id: item.id.clone(),
            split: Split::for_id(&item.id),
            captions,
        });
        items.push(item);
    }
    Ok(SynthCorpus {
        images,
        dataset: CaptionDataset::new(records)?,
        items,
    })
}

impl SynthCorpus {
    pub const CAPTIONS: &'static str = "captions.jsonl";
    pub const CONTENT: &'static str = "content.jsonl";
    pub const IMAGES: &'static str = "images";

    /// Writes `images/<id>.ppm`, `captions.jsonl` and `content.jsonl`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        let img_dir = dir.join(Self::IMAGES);
        fs::create_dir_all(&img_dir)?;
        for (id, img) in &self.images {
            fs::write(img_dir.join(format!("{id}.ppm")), img.write_ppm())?;
        }
        let mut caps = Vec::new();
        self.dataset.write_jsonl(&mut caps)?;
        fs::write(dir.join(Self::CAPTIONS), caps)?;
        let mut content = String::new();
        for item in &self.items {
            content.push_str(&serde_json::to_string(item)?);
            content.push('\n');
        }
        fs::write(dir.join(Self::CONTENT), content)?;
        Ok(())
    }
}

/// Loads `<dir>/<id>.ppm` for every record of `dataset`.
pub fn read_images(dir: &Path, dataset: &CaptionDataset) -> Result<BTreeMap<String, ImageRaster>> {
    let mut out = BTreeMap::new();
    for rec in dataset.records() {
        let path = dir.join(format!("{}.ppm", rec.id));
        let bytes = fs::read(&path).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
        out.insert(rec.id.clone(), ImageRaster::read_ppm(&bytes)?);
    }
    Ok(out)
}
