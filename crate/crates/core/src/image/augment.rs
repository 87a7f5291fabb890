use rand::Rng;
use serde::{Deserialize, Serialize};

use super::transform::{flip_h, flip_v, rotate90k, warp_perspective, Homography};
use super::ImageRaster;
use crate::error::{Error, Result};

/// Corner displacement of the random perspective transform, as a fraction
/// of half the image side.
pub const DEFAULT_DISTORTION: f64 = 0.5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AugmentKind {
    None,
    Horizontal,
    Vertical,
    Flip,
    Rotate,
    Perspective,
}

impl AugmentKind {
    pub const ALL: [AugmentKind; 6] = [
        AugmentKind::None,
        AugmentKind::Horizontal,
        AugmentKind::Vertical,
        AugmentKind::Flip,
        AugmentKind::Rotate,
        AugmentKind::Perspective,
    ];

    pub fn name(self) -> &'static str {
        match self {
            AugmentKind::None => "none",
            AugmentKind::Horizontal => "horizontal",
            AugmentKind::Vertical => "vertical",
            AugmentKind::Flip => "flip",
            AugmentKind::Rotate => "rotate",
            AugmentKind::Perspective => "perspective",
        }
    }
}

impl std::str::FromStr for AugmentKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        AugmentKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown augmentation policy {s:?}")))
    }
}

/// A concrete transform drawn from a policy.
#[derive(Clone, Debug, PartialEq)]
pub enum Transform {
    Identity,
    FlipH,
    FlipV,
    /// Clockwise quarter turns (1, 2 or 3).
    Rotate(u32),
    /// Destination of the four image corners (TL, TR, BR, BL).
    Perspective([[f64; 2]; 4]),
}

impl Transform {
    pub fn apply(&self, img: &ImageRaster) -> ImageRaster {
        match self {
            Transform::Identity => img.clone(),
            Transform::FlipH => flip_h(img),
            Transform::FlipV => flip_v(img),
            Transform::Rotate(k) => rotate90k(img, *k),
            Transform::Perspective(dst) => {
                let src = corners(img);
                Homography::from_points(&src, dst)
                    .and_then(|h| warp_perspective(img, &h))
                    .unwrap_or_else(|_| img.clone())
            }
        }
    }

    /// Short label used when tallying outcomes.
    pub fn label(&self) -> &'static str {
        match self {
            Transform::Identity => "identity",
            Transform::FlipH => "flip_h",
            Transform::FlipV => "flip_v",
            Transform::Rotate(1) => "rotate90",
            Transform::Rotate(2) => "rotate180",
            Transform::Rotate(_) => "rotate270",
            Transform::Perspective(_) => "perspective",
        }
    }
}

fn corners(img: &ImageRaster) -> [[f64; 2]; 4] {
    let (w, h) = ((img.width() - 1) as f64, (img.height() - 1) as f64);
    [[0.0, 0.0], [w, 0.0], [w, h], [0.0, h]]
}

#[derive(Clone, Copy, Debug)]
enum Outcome {
    Identity,
    FlipH,
    FlipV,
    Rotate(u32),
    Perspective,
}

/// Randomized augmentation with a fixed outcome distribution per kind.
#[derive(Clone, Debug, PartialEq)]
pub struct AugmentPolicy {
    kind: AugmentKind,
    distortion: f64,
}

impl AugmentPolicy {
    pub fn new(kind: AugmentKind, distortion: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&distortion) {
            return Err(Error::Config(format!("distortion {distortion} outside [0, 1]")));
        }
        let total: f64 = outcomes(kind).iter().map(|(_, p)| p).sum();
        if (total - 1.0).abs() > 1e-12 || outcomes(kind).iter().any(|(_, p)| *p < 0.0) {
            return Err(Error::Config(format!("probabilities of {kind:?} do not sum to 1")));
        }
        Ok(AugmentPolicy { kind, distortion })
    }

    pub fn from_kind(kind: AugmentKind) -> Self {
        AugmentPolicy::new(kind, DEFAULT_DISTORTION).expect("built-in tables are valid")
    }

    pub fn kind(&self) -> AugmentKind {
        self.kind
    }

    pub fn distortion(&self) -> f64 {
        self.distortion
    }

    /// Draws a transform for an image of the given size.
    pub fn draw<R: Rng + ?Sized>(&self, width: usize, height: usize, rng: &mut R) -> Transform {
        let table = outcomes(self.kind);
        if table.len() == 1 {
            return Transform::Identity;
        }
        let u: f64 = rng.gen();
        let mut acc = 0.0;
        let mut picked = table[table.len() - 1].0;
        for &(o, p) in table {
            acc += p;
            if u < acc {
                picked = o;
                break;
            }
        }
        match picked {
            Outcome::Identity => Transform::Identity,
            Outcome::FlipH => Transform::FlipH,
            Outcome::FlipV => Transform::FlipV,
            Outcome::Rotate(k) => Transform::Rotate(k),
            Outcome::Perspective => {
                let (w, h) = ((width - 1) as f64, (height - 1) as f64);
                let (mx, my) = (
                    self.distortion * width as f64 / 2.0,
                    self.distortion * height as f64 / 2.0,
                );
                let mut dst = [[0.0, 0.0], [w, 0.0], [w, h], [0.0, h]];
                for p in dst.iter_mut() {
                    let dx = if mx > 0.0 { rng.gen_range(-mx..=mx) } else { 0.0 };
                    let dy = if my > 0.0 { rng.gen_range(-my..=my) } else { 0.0 };
                    p[0] += dx;
                    p[1] += dy;
                }
                Transform::Perspective(dst)
            }
        }
    }

    /// Draws and applies a transform. The input is never modified.
    pub fn apply<R: Rng + ?Sized>(&self, img: &ImageRaster, rng: &mut R) -> ImageRaster {
        self.draw(img.width(), img.height(), rng).apply(img)
    }
}

fn outcomes(kind: AugmentKind) -> &'static [(Outcome, f64)] {
    match kind {
        AugmentKind::None => &[(Outcome::Identity, 1.0)],
        AugmentKind::Horizontal => &[(Outcome::Identity, 0.5), (Outcome::FlipH, 0.5)],
        AugmentKind::Vertical => &[(Outcome::Identity, 0.5), (Outcome::FlipV, 0.5)],
        AugmentKind::Flip => &[(Outcome::Identity, 0.5), (Outcome::FlipH, 0.25), (Outcome::FlipV, 0.25)],
        AugmentKind::Rotate => &[
            (Outcome::Identity, 0.4),
            (Outcome::Rotate(1), 0.2),
            (Outcome::Rotate(2), 0.2),
            (Outcome::Rotate(3), 0.2),
        ],
        AugmentKind::Perspective => &[(Outcome::Identity, 0.5), (Outcome::Perspective, 0.5)],
    }
}
