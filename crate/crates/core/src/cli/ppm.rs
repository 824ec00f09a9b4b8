//! Binary PPM (P6) images and contact sheets.

use std::path::Path;

/// An 8-bit RGB raster.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Rgb8 {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<u8>,
}

impl Rgb8 {
    pub fn new(width: usize, height: usize) -> Self {
        Rgb8 {
            width,
            height,
            pixels: vec![0; width * height * 3],
        }
    }

    /// From a channel-major [c, size, size] image in [0,1]; one channel is
    /// replicated to grey. Each source pixel becomes a `zoom`×`zoom` block.
    pub fn from_chw(img: &[f64], channels: usize, size: usize, zoom: usize) -> Self {
        let out = size * zoom;
        let mut r = Rgb8::new(out, out);
        let plane = size * size;
        for y in 0..out {
            for x in 0..out {
                let src = (y / zoom) * size + x / zoom;
                for ch in 0..3 {
                    let c = if channels == 1 { 0 } else { ch };
                    let v = img[c * plane + src].clamp(0.0, 1.0);
                    r.pixels[(y * out + x) * 3 + ch] = (v * 255.0).round() as u8;
                }
            }
        }
        r
    }

    pub fn blit(&mut self, tile: &Rgb8, x0: usize, y0: usize) {
        for y in 0..tile.height.min(self.height.saturating_sub(y0)) {
            let w = tile.width.min(self.width.saturating_sub(x0));
            let dst = ((y0 + y) * self.width + x0) * 3;
            let src = y * tile.width * 3;
            self.pixels[dst..dst + w * 3].copy_from_slice(&tile.pixels[src..src + w * 3]);
        }
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = format!("P6\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend_from_slice(&self.pixels);
        out
    }

    pub fn decode(bytes: &[u8]) -> Option<Rgb8> {
        // Header: magic, width, height, maxval separated by single whitespace.
        let mut fields = Vec::with_capacity(4);
        let mut pos = 0;
        while fields.len() < 4 {
            while bytes.get(pos)?.is_ascii_whitespace() {
                pos += 1;
            }
            let start = pos;
            while !bytes.get(pos)?.is_ascii_whitespace() {
                pos += 1;
            }
            fields.push(std::str::from_utf8(&bytes[start..pos]).ok()?);
        }
        pos += 1;
        if fields[0] != "P6" || fields[3] != "255" {
            return None;
        }
        let width: usize = fields[1].parse().ok()?;
        let height: usize = fields[2].parse().ok()?;
        let pixels = bytes.get(pos..)?.to_vec();
        (pixels.len() == width * height * 3).then_some(Rgb8 { width, height, pixels })
    }

    pub fn write(&self, path: &Path) -> std::io::Result<()> {
        std::fs::write(path, self.encode())
    }
}

/// Tiles equally sized images row by row, `cols` per row, 2-pixel gutters.
pub fn contact_sheet(tiles: &[Rgb8], cols: usize) -> Rgb8 {
    const GAP: usize = 2;
    let cols = cols.max(1);
    let (tw, th) = tiles.first().map_or((0, 0), |t| (t.width, t.height));
    let rows = tiles.len().div_ceil(cols);
    let mut sheet = Rgb8::new(cols * (tw + GAP) + GAP, rows * (th + GAP) + GAP);
    for (i, t) in tiles.iter().enumerate() {
        sheet.blit(t, GAP + (i % cols) * (tw + GAP), GAP + (i / cols) * (th + GAP));
    }
    sheet
}
