//! Screens, horizontal cropping and the patch-transformer image encoder.

use std::io::{BufRead, Write};

use crate::layers::{Block, LayerNorm, Linear};
use crate::numerics::{AttnMask, Graph, NodeId, ParamId, ParamStore, Tensor};
use crate::{Error, Result};

/// An RGB screenshot. Row-major, origin top-left, 3 bytes per pixel.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Screen {
    width: usize,
    height: usize,
    pixels: Vec<u8>,
}

impl Screen {
    pub fn new(width: usize, height: usize, pixels: Vec<u8>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::Config(format!("screen must be non-empty, got {width}x{height}")));
        }
        if pixels.len() != width * height * 3 {
            return Err(Error::Length {
                what: "pixel buffer",
                expected: width * height * 3,
                got: pixels.len(),
            });
        }
        Ok(Self { width, height, pixels })
    }

    pub fn filled(width: usize, height: usize, rgb: [u8; 3]) -> Self {
        let pixels = rgb.iter().copied().cycle().take(width * height * 3).collect();
        Self { width, height, pixels }
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

    pub fn pixel(&self, x: usize, y: usize) -> [u8; 3] {
        let i = (y * self.width + x) * 3;
        [self.pixels[i], self.pixels[i + 1], self.pixels[i + 2]]
    }

    pub fn set_pixel(&mut self, x: usize, y: usize, rgb: [u8; 3]) {
        let i = (y * self.width + x) * 3;
        self.pixels[i..i + 3].copy_from_slice(&rgb);
    }

    /// Pixel under a normalized point (x right, y down, both in `[0, 1]`).
    pub fn pixel_at(&self, x: f64, y: f64) -> [u8; 3] {
        let px = ((x * self.width as f64) as usize).min(self.width - 1);
        let py = ((y * self.height as f64) as usize).min(self.height - 1);
        self.pixel(px, py)
    }

    /// Integer box-filter reduction to `width x height`; identity if the size already matches.
    pub fn fit(&self, width: usize, height: usize) -> Result<Screen> {
        if (width, height) == (self.width, self.height) {
            return Ok(self.clone());
        }
        if width == 0 || height == 0 || !self.width.is_multiple_of(width) || !self.height.is_multiple_of(height) {
            return Err(Error::Config(format!(
                "cannot reduce a {}x{} screen to {width}x{height} by an integer factor",
                self.width, self.height
            )));
        }
        let (fx, fy) = (self.width / width, self.height / height);
        let n = (fx * fy) as u32;
        let mut out = Vec::with_capacity(width * height * 3);
        for y in 0..height {
            for x in 0..width {
                let mut acc = [0u32; 3];
                for dy in 0..fy {
                    for dx in 0..fx {
                        let p = self.pixel(x * fx + dx, y * fy + dy);
                        for c in 0..3 {
                            acc[c] += u32::from(p[c]);
                        }
                    }
                }
                out.extend(acc.iter().map(|&s| ((s + n / 2) / n) as u8));
            }
        }
        Screen::new(width, height, out)
    }

    /// Binary PPM (P6, maxval 255).
    pub fn write_ppm(&self, mut w: impl Write) -> Result<()> {
        write!(w, "P6\n{} {}\n255\n", self.width, self.height)?;
        w.write_all(&self.pixels)?;
        Ok(())
    }

    pub fn read_ppm(mut r: impl BufRead) -> Result<Screen> {
        let mut fields = Vec::new();
        let mut line = String::new();
        while fields.len() < 4 {
            line.clear();
            if r.read_line(&mut line)? == 0 {
                return Err(Error::Format("truncated PPM header".into()));
            }
            let content = line.split('#').next().unwrap_or("");
            fields.extend(content.split_whitespace().map(str::to_string));
        }
        if fields[0] != "P6" {
            return Err(Error::Format(format!("not a binary PPM: magic {}", fields[0])));
        }
        let num = |s: &str| {
            s.parse::<usize>()
                .map_err(|_| Error::Format(format!("bad PPM header field {s}")))
        };
        let (w, h, maxval) = (num(&fields[1])?, num(&fields[2])?, num(&fields[3])?);
        if maxval != 255 {
            return Err(Error::Format(format!("unsupported PPM maxval {maxval}")));
        }
        let mut pixels = vec![0u8; w * h * 3];
        r.read_exact(&mut pixels)
            .map_err(|_| Error::Format("truncated PPM pixel data".into()))?;
        Screen::new(w, h, pixels)
    }
}

/// Axis-aligned region in normalized screen coordinates.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Rect {
    pub x0: f64,
    pub y0: f64,
    pub x1: f64,
    pub y1: f64,
}

impl Rect {
    pub fn new(x0: f64, y0: f64, x1: f64, y1: f64) -> Result<Self> {
        if !(0.0 <= x0 && x0 < x1 && x1 <= 1.0 && 0.0 <= y0 && y0 < y1 && y1 <= 1.0) {
            return Err(Error::Contract(format!("invalid rect ({x0}, {y0}, {x1}, {y1})")));
        }
        Ok(Self { x0, y0, x1, y1 })
    }

    pub fn width(&self) -> f64 {
        self.x1 - self.x0
    }

    pub fn height(&self) -> f64 {
        self.y1 - self.y0
    }

    pub fn center(&self) -> (f64, f64) {
        ((self.x0 + self.x1) / 2.0, (self.y0 + self.y1) / 2.0)
    }

    /// Closed on all sides.
    pub fn contains(&self, x: f64, y: f64) -> bool {
        (self.x0..=self.x1).contains(&x) && (self.y0..=self.y1).contains(&y)
    }

    pub fn overlaps(&self, o: &Rect) -> bool {
        self.x0 < o.x1 && o.x0 < self.x1 && self.y0 < o.y1 && o.y0 < self.y1
    }
}

/// Top-to-bottom bands of one source screen.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CropSet {
    pub crops: Vec<Screen>,
}

impl CropSet {
    pub fn len(&self) -> usize {
        self.crops.len()
    }

    pub fn is_empty(&self) -> bool {
        self.crops.is_empty()
    }

    /// Stacks the bands back into one screen.
    pub fn reassemble(&self) -> Result<Screen> {
        let first = self
            .crops
            .first()
            .ok_or_else(|| Error::Contract("empty crop set".into()))?;
        let width = first.width;
        let mut pixels = Vec::new();
        let mut height = 0;
        for c in &self.crops {
            if c.width != width {
                return Err(Error::Contract("crop widths differ".into()));
            }
            pixels.extend_from_slice(&c.pixels);
            height += c.height;
        }
        Screen::new(width, height, pixels)
    }
}

/// Splits a screen into `count` equal-height horizontal bands.
pub fn crop_horizontal(s: &Screen, count: usize) -> Result<CropSet> {
    if count == 0 || !s.height.is_multiple_of(count) {
        return Err(Error::Config(format!(
            "screen height {} is not divisible into {count} crops",
            s.height
        )));
    }
    let band = s.height / count;
    let row_bytes = s.width * 3;
    let crops = (0..count)
        .map(|c| Screen {
            width: s.width,
            height: band,
            pixels: s.pixels[c * band * row_bytes..(c + 1) * band * row_bytes].to_vec(),
        })
        .collect();
    Ok(CropSet { crops })
}

#[derive(Clone, Debug, PartialEq)]
pub struct VisionConfig {
    /// Input geometry the positional table is sized for.
    pub width: usize,
    pub height: usize,
    pub patch: usize,
    pub d_i: usize,
    pub layers: usize,
    pub heads: usize,
    pub ffn_mult: usize,
}

impl VisionConfig {
    pub fn validate(&self) -> Result<()> {
        check_patch_geometry(self.patch, self.width, self.height)?;
        if self.d_i == 0 || self.heads == 0 || !self.d_i.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "encoder width {} must be a positive multiple of heads {}",
                self.d_i, self.heads
            )));
        }
        Ok(())
    }

    pub fn n_patches(&self) -> usize {
        (self.width / self.patch) * (self.height / self.patch)
    }

    pub fn patch_dim(&self) -> usize {
        self.patch * self.patch * 3
    }
}

fn check_patch_geometry(p: usize, width: usize, height: usize) -> Result<()> {
    if p == 0 || !width.is_multiple_of(p) || !height.is_multiple_of(p) {
        return Err(Error::Config(format!(
            "patch size {p} must divide screen width {width} and height {height}"
        )));
    }
    Ok(())
}

/// Patch tokens plus one prepended global token (row 0).
#[derive(Clone, Copy, Debug)]
pub struct ImageEmbeddings {
    pub tokens: NodeId,
    pub n_patches: usize,
    pub d_i: usize,
}

impl ImageEmbeddings {
    pub fn token_count(&self) -> usize {
        self.n_patches + 1
    }
}

/// Rows are patches in raster order; each row is the patch's pixels
/// (row, column, channel) scaled to `[0, 1]`.
pub fn patchify(s: &Screen, p: usize) -> Result<Tensor> {
    check_patch_geometry(p, s.width, s.height)?;
    let (gx, gy) = (s.width / p, s.height / p);
    let mut data = Vec::with_capacity(s.pixels.len());
    for py in 0..gy {
        for px in 0..gx {
            for dy in 0..p {
                for dx in 0..p {
                    let rgb = s.pixel(px * p + dx, py * p + dy);
                    data.extend(rgb.iter().map(|&v| f64::from(v) / 255.0));
                }
            }
        }
    }
    Tensor::new(vec![gx * gy, p * p * 3], data)
}

#[derive(Clone, Debug)]
pub struct VisionEncoder {
    pub cfg: VisionConfig,
    pub patch_embed: Linear,
    pub position: ParamId,
    pub global: ParamId,
    pub blocks: Vec<Block>,
    pub ln_out: LayerNorm,
}

impl VisionEncoder {
    pub fn new(ps: &mut ParamStore, cfg: VisionConfig) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.d_i;
        Ok(Self {
            patch_embed: Linear::new(ps, "vision.patch_embed", cfg.patch_dim(), d),
            position: ps.uniform_bound("vision.position", &[cfg.n_patches(), d], 1.0),
            global: ps.uniform("vision.global", &[1, d], d),
            blocks: (0..cfg.layers)
                .map(|l| Block::new(ps, &format!("vision.block{l}"), d, cfg.heads, cfg.ffn_mult))
                .collect(),
            ln_out: LayerNorm::new(ps, "vision.ln_out", d),
            cfg,
        })
    }

    fn check_geometry(&self, s: &Screen) -> Result<()> {
        check_patch_geometry(self.cfg.patch, s.width, s.height)?;
        if (s.width, s.height) != (self.cfg.width, self.cfg.height) {
            return Err(Error::Config(format!(
                "encoder expects {}x{} screens (patch {}), got {}x{}",
                self.cfg.width, self.cfg.height, self.cfg.patch, s.width, s.height
            )));
        }
        Ok(())
    }

    /// Per-patch linear embedding, before positions are added.
    pub fn patch_embeddings(&self, g: &mut Graph<'_>, s: &Screen) -> Result<NodeId> {
        self.check_geometry(s)?;
        let patches = g.constant(patchify(s, self.cfg.patch)?);
        self.patch_embed.forward(g, patches)
    }

    pub fn encode_low(&self, g: &mut Graph<'_>, s: &Screen) -> Result<ImageEmbeddings> {
        let x = self.patch_embeddings(g, s)?;
        let pos = g.param(self.position);
        let x = g.add(x, pos)?;
        let global = g.param(self.global);
        let mut x = g.concat_rows(&[global, x])?;
        for b in &self.blocks {
            x = b.forward(g, x, &AttnMask::None)?;
        }
        let tokens = self.ln_out.forward(g, x)?;
        Ok(ImageEmbeddings {
            tokens,
            n_patches: self.cfg.n_patches(),
            d_i: self.cfg.d_i,
        })
    }

    /// Encodes every crop with the shared weights; tokens concatenated in crop order.
    pub fn encode_crops(&self, g: &mut Graph<'_>, crops: &CropSet) -> Result<NodeId> {
        let parts = crops
            .crops
            .iter()
            .map(|c| self.encode_low(g, c).map(|e| e.tokens))
            .collect::<Result<Vec<_>>>()?;
        g.concat_rows(&parts)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy_cfg() -> VisionConfig {
        VisionConfig {
            width: 64,
            height: 64,
            patch: 8,
            d_i: 16,
            layers: 1,
            heads: 2,
            ffn_mult: 2,
        }
    }

    fn noise_screen(w: usize, h: usize, seed: u64) -> Screen {
        let mut x = seed.wrapping_mul(6364136223846793005).wrapping_add(1);
        let px = (0..w * h * 3)
            .map(|_| {
                x = x.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                (x >> 56) as u8
            })
            .collect();
        Screen::new(w, h, px).unwrap()
    }

    #[test]
    fn low_res_token_count() {
        let mut ps = ParamStore::new(1);
        let enc = VisionEncoder::new(&mut ps, toy_cfg()).unwrap();
        let mut g = Graph::inference(&ps);
        let e = enc.encode_low(&mut g, &noise_screen(64, 64, 3)).unwrap();
        assert_eq!(g.shape(e.tokens), &[65, 16]);
        assert_eq!(e.token_count(), 65);
    }

    #[test]
    fn full_size_geometry_patch_count() {
        let cfg = VisionConfig {
            width: 224,
            height: 224,
            patch: 14,
            ..toy_cfg()
        };
        assert_eq!(cfg.n_patches(), 256);
    }

    #[test]
    fn non_divisible_screen_is_config_error() {
        let mut ps = ParamStore::new(1);
        let enc = VisionEncoder::new(&mut ps, toy_cfg()).unwrap();
        let mut g = Graph::inference(&ps);
        let err = enc.encode_low(&mut g, &Screen::filled(60, 64, [0; 3])).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains('8') && msg.contains("60") && msg.contains("64"), "{msg}");
    }

    #[test]
    fn uniform_screen_gives_identical_patch_embeddings() {
        let mut ps = ParamStore::new(2);
        let enc = VisionEncoder::new(&mut ps, toy_cfg()).unwrap();
        let mut g = Graph::inference(&ps);
        let x = enc
            .patch_embeddings(&mut g, &Screen::filled(64, 64, [10, 200, 30]))
            .unwrap();
        let t = g.value(x);
        for r in 1..t.rows() {
            assert_eq!(t.row(r), t.row(0));
        }
    }

    #[test]
    fn moving_a_patch_permutes_embeddings() {
        let mut ps = ParamStore::new(2);
        let enc = VisionEncoder::new(&mut ps, toy_cfg()).unwrap();
        let mut a = Screen::filled(64, 64, [0, 0, 0]);
        let mut b = a.clone();
        // distinct 8x8 block at patch (1, 2) in `a` and at patch (5, 6) in `b`
        for dy in 0..8 {
            for dx in 0..8 {
                let c = [(dx * 30) as u8, (dy * 30) as u8, 77];
                a.set_pixel(8 + dx, 16 + dy, c);
                b.set_pixel(40 + dx, 48 + dy, c);
            }
        }
        let mut g = Graph::inference(&ps);
        let ea = enc.patch_embeddings(&mut g, &a).unwrap();
        let eb = enc.patch_embeddings(&mut g, &b).unwrap();
        let (ta, tb) = (g.value(ea).clone(), g.value(eb).clone());
        let (ia, ib) = (2 * 8 + 1, 6 * 8 + 5);
        assert_eq!(ta.row(ia), tb.row(ib));
        assert_eq!(ta.row(ib), tb.row(ia));
        assert_ne!(ta.row(ia), ta.row(ib));
        for r in (0..64).filter(|&r| r != ia && r != ib) {
            assert_eq!(ta.row(r), tb.row(r));
        }
    }

    #[test]
    fn encode_is_deterministic() {
        let mut ps = ParamStore::new(4);
        let enc = VisionEncoder::new(&mut ps, toy_cfg()).unwrap();
        let s = noise_screen(64, 64, 9);
        let mut g1 = Graph::inference(&ps);
        let mut g2 = Graph::inference(&ps);
        let a = enc.encode_low(&mut g1, &s).unwrap();
        let b = enc.encode_low(&mut g2, &s).unwrap();
        assert_eq!(g1.value(a.tokens), g2.value(b.tokens));
    }

    #[test]
    fn crops_of_tall_screen() {
        let s = noise_screen(64, 256, 5);
        let cs = crop_horizontal(&s, 4).unwrap();
        assert_eq!(cs.len(), 4);
        for c in &cs.crops {
            assert_eq!((c.width(), c.height()), (64, 64));
        }
        assert_eq!(cs.reassemble().unwrap(), s);
        let one = crop_horizontal(&s, 1).unwrap();
        assert_eq!(one.crops[0], s);
        let err = crop_horizontal(&s, 3).unwrap_err().to_string();
        assert!(err.contains("256") && err.contains('3'), "{err}");
    }

    #[test]
    fn encode_crops_concatenates_shared_weight_blocks() {
        let mut ps = ParamStore::new(4);
        let enc = VisionEncoder::new(&mut ps, toy_cfg()).unwrap();
        let band = noise_screen(64, 64, 1);
        let cs = CropSet {
            crops: vec![band.clone(); 4],
        };
        let mut g = Graph::inference(&ps);
        let all = enc.encode_crops(&mut g, &cs).unwrap();
        let t = g.value(all).clone();
        assert_eq!(t.shape(), &[260, 16]);
        for c in 1..4 {
            for r in 0..65 {
                assert_eq!(t.row(c * 65 + r), t.row(r));
            }
        }
        let single = enc
            .encode_crops(
                &mut g,
                &CropSet {
                    crops: vec![band.clone()],
                },
            )
            .unwrap();
        let low = enc.encode_low(&mut g, &band).unwrap();
        assert_eq!(g.value(single), g.value(low.tokens));
    }

    #[test]
    fn fit_box_filters_and_ppm_round_trips() {
        let s = noise_screen(64, 256, 8);
        let small = s.fit(64, 64).unwrap();
        assert_eq!((small.width(), small.height()), (64, 64));
        let avg: u32 = (0..4).map(|dy| u32::from(s.pixel(3, dy)[1])).sum();
        assert_eq!(u32::from(small.pixel(3, 0)[1]), (avg + 2) / 4);
        assert!(s.fit(60, 64).is_err());

        let mut buf = Vec::new();
        s.write_ppm(&mut buf).unwrap();
        let back = Screen::read_ppm(std::io::Cursor::new(buf)).unwrap();
        assert_eq!(back, s);
    }
}
