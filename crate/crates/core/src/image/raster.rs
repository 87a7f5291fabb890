use crate::error::{Error, Result};

/// 8-bit RGB image, row-major, three bytes per pixel.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ImageRaster {
    width: usize,
    height: usize,
    pixels: Vec<u8>,
}

impl ImageRaster {
    pub fn new(width: usize, height: usize, pixels: Vec<u8>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::Data(format!("empty image {width}x{height}")));
        }
        if pixels.len() != 3 * width * height {
            return Err(Error::Data(format!(
                "{width}x{height} image needs {} bytes, got {}",
                3 * width * height,
                pixels.len()
            )));
        }
        Ok(ImageRaster { width, height, pixels })
    }

    pub fn filled(width: usize, height: usize, rgb: [u8; 3]) -> Self {
        let pixels = rgb.iter().copied().cycle().take(3 * width * height).collect();
        ImageRaster { width, height, pixels }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn pixels(&self) -> &[u8] {
        &self.pixels
    }

    pub fn get(&self, x: usize, y: usize) -> [u8; 3] {
        let i = 3 * (y * self.width + x);
        [self.pixels[i], self.pixels[i + 1], self.pixels[i + 2]]
    }

    pub fn set(&mut self, x: usize, y: usize, rgb: [u8; 3]) {
        let i = 3 * (y * self.width + x);
        self.pixels[i..i + 3].copy_from_slice(&rgb);
    }

    /// Parses a binary P6 file with maxval 255. `#` comments are allowed
    /// anywhere in the header.
    pub fn read_ppm(bytes: &[u8]) -> Result<Self> {
        let mut pos = 0;
        let magic = header_token(bytes, &mut pos)?;
        if magic != b"P6" {
            return Err(Error::Format(format!(
                "unsupported netpbm format {:?}",
                String::from_utf8_lossy(magic)
            )));
        }
        let width = header_number(bytes, &mut pos)?;
        let height = header_number(bytes, &mut pos)?;
        let maxval = header_number(bytes, &mut pos)?;
        if maxval != 255 {
            return Err(Error::Format(format!("unsupported maxval {maxval}")));
        }
        // exactly one whitespace byte separates the header from the raster
        if pos >= bytes.len() || !bytes[pos].is_ascii_whitespace() {
            return Err(Error::Format("missing whitespace after header".into()));
        }
        pos += 1;
        let need = 3 * width * height;
        let payload = &bytes[pos..];
        if payload.len() < need {
            return Err(Error::Format(format!(
                "truncated payload: {} of {need} bytes",
                payload.len()
            )));
        }
        ImageRaster::new(width, height, payload[..need].to_vec()).map_err(|e| Error::Format(e.to_string()))
    }

    pub fn write_ppm(&self) -> Vec<u8> {
        let mut out = format!("P6\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend_from_slice(&self.pixels);
        out
    }
}

pub const SHEET_GAP: usize = 2;
const SHEET_BACKGROUND: [u8; 3] = [255, 255, 255];

/// Lays `tiles` out in rows of `columns`, each cell sized to the largest
/// tile and separated by a white gap of `SHEET_GAP` pixels.
pub fn contact_sheet(tiles: &[ImageRaster], columns: usize) -> Result<ImageRaster> {
    if tiles.is_empty() || columns == 0 {
        return Err(Error::Config(
            "contact sheet needs at least one tile and one column".into(),
        ));
    }
    let cols = columns.min(tiles.len());
    let rows = tiles.len().div_ceil(cols);
    let cw = tiles.iter().map(|t| t.width).max().unwrap_or(1);
    let ch = tiles.iter().map(|t| t.height).max().unwrap_or(1);
    let mut sheet = ImageRaster::filled(
        cols * cw + (cols + 1) * SHEET_GAP,
        rows * ch + (rows + 1) * SHEET_GAP,
        SHEET_BACKGROUND,
    );
    for (i, tile) in tiles.iter().enumerate() {
        let (x0, y0) = sheet_origin(i, cols, cw, ch);
        for y in 0..tile.height {
            for x in 0..tile.width {
                sheet.set(x0 + x, y0 + y, tile.get(x, y));
            }
        }
    }
    Ok(sheet)
}

/// Top-left pixel of cell `index` on a sheet built by [`contact_sheet`].
pub fn sheet_origin(index: usize, columns: usize, cell_w: usize, cell_h: usize) -> (usize, usize) {
    let (r, c) = (index / columns, index % columns);
    (
        SHEET_GAP + c * (cell_w + SHEET_GAP),
        SHEET_GAP + r * (cell_h + SHEET_GAP),
    )
}

fn header_token<'a>(bytes: &'a [u8], pos: &mut usize) -> Result<&'a [u8]> {
    loop {
        while *pos < bytes.len() && bytes[*pos].is_ascii_whitespace() {
            *pos += 1;
        }
        if *pos < bytes.len() && bytes[*pos] == b'#' {
            while *pos < bytes.len() && bytes[*pos] != b'\n' {
                *pos += 1;
            }
            continue;
        }
        break;
    }
    let start = *pos;
    while *pos < bytes.len() && !bytes[*pos].is_ascii_whitespace() && bytes[*pos] != b'#' {
        *pos += 1;
    }
    if start == *pos {
        return Err(Error::Format("malformed header: unexpected end".into()));
    }
    Ok(&bytes[start..*pos])
}

fn header_number(bytes: &[u8], pos: &mut usize) -> Result<usize> {
    let tok = header_token(bytes, pos)?;
    std::str::from_utf8(tok)
        .ok()
        .and_then(|s| s.parse::<usize>().ok())
        .filter(|&n| n > 0)
        .ok_or_else(|| Error::Format(format!("malformed header field {:?}", String::from_utf8_lossy(tok))))
}
