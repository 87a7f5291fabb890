use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::ImageRaster;
use crate::error::{Error, Result};

/// Length of the hand-crafted per-cell descriptor.
pub const DESCRIPTOR_LEN: usize = 8;

const MAGIC: &[u8; 4] = b"ICF1";

/// Encoded representation of one image: `R` region vectors and their mean.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageFeatures {
    dim: usize,
    regions: Vec<f32>,
    global: Vec<f32>,
}

impl ImageFeatures {
    /// `regions` is row-major `[R×dim]`; `global` has `dim` entries.
    pub fn new(dim: usize, regions: Vec<f32>, global: Vec<f32>) -> Result<Self> {
        if dim == 0 || regions.is_empty() || !regions.len().is_multiple_of(dim) || global.len() != dim {
            return Err(Error::Data(format!(
                "feature sizes do not match: dim {dim}, {} region values, {} global values",
                regions.len(),
                global.len()
            )));
        }
        if regions.iter().chain(&global).any(|v| !v.is_finite()) {
            return Err(Error::Data("non-finite feature value".into()));
        }
        Ok(ImageFeatures { dim, regions, global })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn num_regions(&self) -> usize {
        self.regions.len() / self.dim
    }

    pub fn regions(&self) -> &[f32] {
        &self.regions
    }

    pub fn region(&self, r: usize) -> &[f32] {
        &self.regions[r * self.dim..(r + 1) * self.dim]
    }

    pub fn global(&self) -> &[f32] {
        &self.global
    }
}

/// Deterministic stand-in for a pretrained CNN encoder.
///
/// Each cell of a `grid × grid` partition gets the descriptor
/// `[mean R, mean G, mean B, mean gradient magnitude, center x, center y,
/// luminance std, 1]` (colors and positions in `[0, 1]`), which is then
/// multiplied by a seed-derived `8×dim` matrix. Regions are ordered row by
/// row; the global vector is their mean.
pub fn toy_encode(img: &ImageRaster, grid: usize, dim: usize, seed: u64) -> Result<ImageFeatures> {
    let (w, h) = (img.width(), img.height());
    if grid == 0 || dim == 0 {
        return Err(Error::Config("grid and feature dim must be positive".into()));
    }
    if w < grid || h < grid {
        return Err(Error::Data(format!(
            "{w}x{h} image is smaller than a {grid}x{grid} grid"
        )));
    }
    let projection = projection_matrix(dim, seed);
    let lum: Vec<f64> = img
        .pixels()
        .chunks(3)
        .map(|p| (0.299 * p[0] as f64 + 0.587 * p[1] as f64 + 0.114 * p[2] as f64) / 255.0)
        .collect();

    let mut regions = Vec::with_capacity(grid * grid * dim);
    let mut global = vec![0.0f64; dim];
    for gy in 0..grid {
        for gx in 0..grid {
            let (x0, x1) = (gx * w / grid, (gx + 1) * w / grid);
            let (y0, y1) = (gy * h / grid, (gy + 1) * h / grid);
            let n = ((x1 - x0) * (y1 - y0)) as f64;
            let mut rgb = [0.0f64; 3];
            let mut grad = 0.0;
            let mut lsum = 0.0;
            let mut lsq = 0.0;
            for y in y0..y1 {
                for x in x0..x1 {
                    let p = img.get(x, y);
                    for c in 0..3 {
                        rgb[c] += p[c] as f64 / 255.0;
                    }
                    let l = lum[y * w + x];
                    let dx = if x + 1 < w { lum[y * w + x + 1] - l } else { 0.0 };
                    let dy = if y + 1 < h { lum[(y + 1) * w + x] - l } else { 0.0 };
                    grad += (dx * dx + dy * dy).sqrt();
                    lsum += l;
                    lsq += l * l;
                }
            }
            let mean_l = lsum / n;
            let var = (lsq / n - mean_l * mean_l).max(0.0);
            let desc = [
                rgb[0] / n,
                rgb[1] / n,
                rgb[2] / n,
                grad / n,
                (gx as f64 + 0.5) / grid as f64,
                (gy as f64 + 0.5) / grid as f64,
                var.sqrt(),
                1.0,
            ];
            for f in 0..dim {
                let mut v = 0.0;
                for (d, &dv) in desc.iter().enumerate() {
                    v += dv * projection[d * dim + f];
                }
                regions.push(v as f32);
                global[f] += v;
            }
        }
    }
    let cells = (grid * grid) as f64;
    let global = global.into_iter().map(|v| (v / cells) as f32).collect();
    ImageFeatures::new(dim, regions, global)
}

fn projection_matrix(dim: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..DESCRIPTOR_LEN * dim).map(|_| rng.gen_range(-1.0..1.0)).collect()
}

/// Features for a collection of images sharing `(R, F)`.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureSet {
    num_regions: usize,
    dim: usize,
    ids: Vec<String>,
    entries: Vec<ImageFeatures>,
    index: HashMap<String, usize>,
}

impl FeatureSet {
    pub fn new(num_regions: usize, dim: usize) -> Self {
        FeatureSet {
            num_regions,
            dim,
            ids: Vec::new(),
            entries: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn insert(&mut self, id: &str, feats: ImageFeatures) -> Result<()> {
        if feats.num_regions() != self.num_regions || feats.dim() != self.dim {
            return Err(Error::Data(format!(
                "features of {id:?} are {}x{}, set holds {}x{}",
                feats.num_regions(),
                feats.dim(),
                self.num_regions,
                self.dim
            )));
        }
        if id.len() > u16::MAX as usize {
            return Err(Error::Data("image id longer than 65535 bytes".into()));
        }
        match self.index.get(id) {
            Some(&i) => self.entries[i] = feats,
            None => {
                self.index.insert(id.to_string(), self.entries.len());
                self.ids.push(id.to_string());
                self.entries.push(feats);
            }
        }
        Ok(())
    }

    pub fn get(&self, id: &str) -> Option<&ImageFeatures> {
        self.index.get(id).map(|&i| &self.entries[i])
    }

    pub fn num_regions(&self) -> usize {
        self.num_regions
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &ImageFeatures)> {
        self.ids.iter().map(String::as_str).zip(&self.entries)
    }

    /// Serializes to the little-endian "ICF1" layout.
    pub fn write(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        for v in [self.entries.len(), self.num_regions, self.dim] {
            out.extend_from_slice(&(v as u32).to_le_bytes());
        }
        for (id, f) in self.iter() {
            out.extend_from_slice(&(id.len() as u16).to_le_bytes());
            out.extend_from_slice(id.as_bytes());
            for v in f.regions().iter().chain(f.global()) {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn read(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader::new(bytes);
        if r.take(4)? != MAGIC {
            return Err(Error::Format("bad feature file magic".into()));
        }
        let count = r.u32()? as usize;
        let num_regions = r.u32()? as usize;
        let dim = r.u32()? as usize;
        if num_regions == 0 || dim == 0 {
            return Err(Error::Format(format!("invalid dimensions R={num_regions} F={dim}")));
        }
        let mut set = FeatureSet::new(num_regions, dim);
        for _ in 0..count {
            let len = r.u16()? as usize;
            let id = std::str::from_utf8(r.take(len)?)
                .map_err(|_| Error::Format("image id is not UTF-8".into()))?
                .to_string();
            let mut vals = Vec::with_capacity((num_regions + 1) * dim);
            for _ in 0..(num_regions + 1) * dim {
                vals.push(r.f32()?);
            }
            let global = vals.split_off(num_regions * dim);
            let feats = ImageFeatures::new(dim, vals, global).map_err(|e| Error::Format(e.to_string()))?;
            if set.get(&id).is_some() {
                return Err(Error::Format(format!("duplicate id {id:?}")));
            }
            set.insert(&id, feats)?;
        }
        if !r.is_done() {
            return Err(Error::Format("trailing bytes after last image".into()));
        }
        Ok(set)
    }
}

pub(crate) struct ByteReader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> ByteReader<'a> {
    pub(crate) fn new(bytes: &'a [u8]) -> Self {
        ByteReader { bytes, pos: 0 }
    }

    pub(crate) fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::Format(format!(
                "truncated input: wanted {n} bytes at offset {}",
                self.pos
            )));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub(crate) fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    pub(crate) fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    pub(crate) fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub(crate) fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub(crate) fn is_done(&self) -> bool {
        self.pos == self.bytes.len()
    }
}
