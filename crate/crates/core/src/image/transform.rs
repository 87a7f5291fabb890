use super::ImageRaster;
use crate::error::{Error, Result};

/// Mirror about the vertical axis.
pub fn flip_h(img: &ImageRaster) -> ImageRaster {
    let (w, h) = (img.width(), img.height());
    let mut out = img.clone();
    for y in 0..h {
        for x in 0..w {
            out.set(x, y, img.get(w - 1 - x, y));
        }
    }
    out
}

/// Mirror about the horizontal axis.
pub fn flip_v(img: &ImageRaster) -> ImageRaster {
    let (w, h) = (img.width(), img.height());
    let mut out = img.clone();
    for y in 0..h {
        for x in 0..w {
            out.set(x, y, img.get(x, h - 1 - y));
        }
    }
    out
}

/// Clockwise rotation by `k` quarter turns. Odd `k` swaps width and height.
pub fn rotate90k(img: &ImageRaster, k: u32) -> ImageRaster {
    let (w, h) = (img.width(), img.height());
    match k % 4 {
        0 => img.clone(),
        2 => {
            let mut out = img.clone();
            for y in 0..h {
                for x in 0..w {
                    out.set(x, y, img.get(w - 1 - x, h - 1 - y));
                }
            }
            out
        }
        quarter => {
            let mut out = ImageRaster::filled(h, w, [0, 0, 0]);
            for y in 0..w {
                for x in 0..h {
                    let src = if quarter == 1 { (y, h - 1 - x) } else { (w - 1 - y, x) };
                    out.set(x, y, img.get(src.0, src.1));
                }
            }
            out
        }
    }
}

/// Projective map of the plane, normalized so that `m[2][2] == 1`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Homography(pub [[f64; 3]; 3]);

impl Homography {
    pub const IDENTITY: Homography = Homography([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]]);

    /// Solves for the homography taking each `src[i]` to `dst[i]`.
    pub fn from_points(src: &[[f64; 2]; 4], dst: &[[f64; 2]; 4]) -> Result<Self> {
        for pts in [src, dst] {
            for skip in 0..4 {
                let tri: Vec<&[f64; 2]> = (0..4).filter(|&i| i != skip).map(|i| &pts[i]).collect();
                let area = (tri[1][0] - tri[0][0]) * (tri[2][1] - tri[0][1])
                    - (tri[2][0] - tri[0][0]) * (tri[1][1] - tri[0][1]);
                if area.abs() < 1e-9 {
                    return Err(Error::Degenerate("three of the points are collinear".into()));
                }
            }
        }
        let mut a = [[0.0f64; 9]; 8];
        for i in 0..4 {
            let [x, y] = src[i];
            let [u, v] = dst[i];
            a[2 * i] = [x, y, 1.0, 0.0, 0.0, 0.0, -u * x, -u * y, u];
            a[2 * i + 1] = [0.0, 0.0, 0.0, x, y, 1.0, -v * x, -v * y, v];
        }
        let h = solve8(a).ok_or_else(|| Error::Degenerate("singular homography system".into()))?;
        Ok(Homography([[h[0], h[1], h[2]], [h[3], h[4], h[5]], [h[6], h[7], 1.0]]))
    }

    pub fn apply(&self, p: [f64; 2]) -> Option<[f64; 2]> {
        let m = &self.0;
        let w = m[2][0] * p[0] + m[2][1] * p[1] + m[2][2];
        if w.abs() < 1e-12 {
            return None;
        }
        Some([
            (m[0][0] * p[0] + m[0][1] * p[1] + m[0][2]) / w,
            (m[1][0] * p[0] + m[1][1] * p[1] + m[1][2]) / w,
        ])
    }

    pub fn determinant(&self) -> f64 {
        let m = &self.0;
        m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1]) - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
            + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0])
    }

    pub fn inverse(&self) -> Result<Self> {
        let det = self.determinant();
        if !det.is_finite() || det.abs() < 1e-12 {
            return Err(Error::Degenerate("homography is not invertible".into()));
        }
        let m = &self.0;
        let cof = |r0: usize, r1: usize, c0: usize, c1: usize| m[r0][c0] * m[r1][c1] - m[r0][c1] * m[r1][c0];
        let adj = [
            [cof(1, 2, 1, 2), -cof(0, 2, 1, 2), cof(0, 1, 1, 2)],
            [-cof(1, 2, 0, 2), cof(0, 2, 0, 2), -cof(0, 1, 0, 2)],
            [cof(1, 2, 0, 1), -cof(0, 2, 0, 1), cof(0, 1, 0, 1)],
        ];
        let mut inv = [[0.0; 3]; 3];
        for r in 0..3 {
            for c in 0..3 {
                inv[r][c] = adj[r][c] / det;
            }
        }
        let n = inv[2][2];
        if n.abs() > 1e-12 {
            for row in inv.iter_mut() {
                for v in row.iter_mut() {
                    *v /= n;
                }
            }
        }
        Ok(Homography(inv))
    }
}

/// Gaussian elimination with partial pivoting on an augmented 8×9 system.
fn solve8(mut a: [[f64; 9]; 8]) -> Option<[f64; 8]> {
    for col in 0..8 {
        let pivot = (col..8).max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs()))?;
        if a[pivot][col].abs() < 1e-12 {
            return None;
        }
        a.swap(col, pivot);
        for row in col + 1..8 {
            let f = a[row][col] / a[col][col];
            if f != 0.0 {
                let pivot_row = a[col];
                for (dst, src) in a[row][col..].iter_mut().zip(&pivot_row[col..]) {
                    *dst -= f * src;
                }
            }
        }
    }
    let mut x = [0.0; 8];
    for row in (0..8).rev() {
        let mut s = a[row][8];
        for k in row + 1..8 {
            s -= a[row][k] * x[k];
        }
        x[row] = s / a[row][row];
    }
    x.iter().all(|v| v.is_finite()).then_some(x)
}

/// Warps `img` by `h` using inverse mapping and bilinear sampling. Samples
/// that land outside the source are black; output size equals input size.
pub fn warp_perspective(img: &ImageRaster, h: &Homography) -> Result<ImageRaster> {
    let inv = h.inverse()?;
    let (w, ht) = (img.width(), img.height());
    let mut out = ImageRaster::filled(w, ht, [0, 0, 0]);
    let (max_x, max_y) = ((w - 1) as f64, (ht - 1) as f64);
    const EPS: f64 = 1e-9;
    for y in 0..ht {
        for x in 0..w {
            let Some([sx, sy]) = inv.apply([x as f64, y as f64]) else {
                continue;
            };
            if !(sx >= -EPS && sy >= -EPS && sx <= max_x + EPS && sy <= max_y + EPS) {
                continue;
            }
            let sx = sx.clamp(0.0, max_x);
            let sy = sy.clamp(0.0, max_y);
            let x0 = sx.floor() as usize;
            let y0 = sy.floor() as usize;
            let x1 = (x0 + 1).min(w - 1);
            let y1 = (y0 + 1).min(ht - 1);
            let (fx, fy) = (sx - x0 as f64, sy - y0 as f64);
            let (p00, p10, p01, p11) = (img.get(x0, y0), img.get(x1, y0), img.get(x0, y1), img.get(x1, y1));
            let mut rgb = [0u8; 3];
            for c in 0..3 {
                let top = p00[c] as f64 * (1.0 - fx) + p10[c] as f64 * fx;
                let bottom = p01[c] as f64 * (1.0 - fx) + p11[c] as f64 * fx;
                rgb[c] = (top * (1.0 - fy) + bottom * fy).round().clamp(0.0, 255.0) as u8;
            }
            out.set(x, y, rgb);
        }
    }
    Ok(out)
}
