//! Procedural face images with correlated, controllable attributes.
//!
//! Two rendering styles share one geometry: `Crisp` draws flat-shaded
//! primitives, `Textured` overlays seeded multi-scale value noise on every
//! foreground pixel to mimic the higher pixel complexity of photographs.
//! Backgrounds are exactly zero in both styles.

use std::fs;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::Tensor;

#[derive(Debug, Error)]
pub enum FacesError {
    #[error("invalid probability row `{row}`: {msg}")]
    InvalidProbabilities { row: String, msg: String },
    #[error("invalid dataset config: {0}")]
    InvalidConfig(String),
    #[error("no decodable images in {0}")]
    EmptyDirectory(PathBuf),
    #[error("image error: {0}")]
    Image(String),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, FacesError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Expression {
    Neutral,
    Smile,
    Frown,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Gender {
    A,
    B,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AgeBand {
    Young,
    Mid,
    Old,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Accessory {
    None,
    Glasses,
    Hat,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HairColor {
    Dark,
    Light,
    Red,
}

impl Expression {
    pub const ALL: [Self; 3] = [Self::Neutral, Self::Smile, Self::Frown];
}
impl Gender {
    pub const ALL: [Self; 2] = [Self::A, Self::B];
}
impl AgeBand {
    pub const ALL: [Self; 3] = [Self::Young, Self::Mid, Self::Old];
}
impl Accessory {
    pub const ALL: [Self; 3] = [Self::None, Self::Glasses, Self::Hat];
}
impl HairColor {
    pub const ALL: [Self; 3] = [Self::Dark, Self::Light, Self::Red];
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct FaceAttributes {
    pub expression: Expression,
    pub facial_hair: bool,
    pub gender: Gender,
    pub age: AgeBand,
    pub accessory: Accessory,
    pub hair_color: HairColor,
}

/// Marginal and conditional probabilities for attribute sampling.
///
/// Correlations form two edges: gender → facial hair and age → accessory.
/// Every other attribute is drawn independently from its marginal.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrelationTable {
    pub expression: [f64; 3],
    pub gender: [f64; 2],
    /// Rows indexed by gender; columns are `[no facial hair, facial hair]`.
    pub facial_hair_given_gender: [[f64; 2]; 2],
    pub age: [f64; 3],
    /// Rows indexed by age band; columns follow [`Accessory::ALL`].
    pub accessory_given_age: [[f64; 3]; 3],
    pub hair_color: [f64; 3],
}

impl Default for CorrelationTable {
    fn default() -> Self {
        Self {
            expression: [0.40, 0.35, 0.25],
            gender: [0.5, 0.5],
            facial_hair_given_gender: [[0.40, 0.60], [0.95, 0.05]],
            age: [0.40, 0.35, 0.25],
            accessory_given_age: [[0.70, 0.15, 0.15], [0.50, 0.35, 0.15], [0.30, 0.50, 0.20]],
            hair_color: [0.45, 0.35, 0.20],
        }
    }
}

impl CorrelationTable {
    pub fn uniform() -> Self {
        Self {
            expression: [1.0 / 3.0; 3],
            gender: [0.5; 2],
            facial_hair_given_gender: [[0.5; 2]; 2],
            age: [1.0 / 3.0; 3],
            accessory_given_age: [[1.0 / 3.0; 3]; 3],
            hair_color: [1.0 / 3.0; 3],
        }
    }

    fn rows(&self) -> Vec<(String, &[f64])> {
        let mut rows: Vec<(String, &[f64])> = vec![
            ("expression".into(), &self.expression[..]),
            ("gender".into(), &self.gender[..]),
            ("age".into(), &self.age[..]),
            ("hair_color".into(), &self.hair_color[..]),
        ];
        for (i, r) in self.facial_hair_given_gender.iter().enumerate() {
            rows.push((format!("facial_hair_given_gender[{i}]"), &r[..]));
        }
        for (i, r) in self.accessory_given_age.iter().enumerate() {
            rows.push((format!("accessory_given_age[{i}]"), &r[..]));
        }
        rows
    }

    pub fn validate(&self) -> Result<()> {
        for (name, row) in self.rows() {
            if row.iter().any(|p| !p.is_finite() || *p < 0.0 || *p > 1.0) {
                return Err(FacesError::InvalidProbabilities {
                    row: name,
                    msg: format!("entries must lie in [0, 1], got {row:?}"),
                });
            }
            let sum: f64 = row.iter().sum();
            if (sum - 1.0).abs() > 1e-9 {
                return Err(FacesError::InvalidProbabilities {
                    row: name,
                    msg: format!("sums to {sum}"),
                });
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RenderStyle {
    Crisp,
    Textured,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DatasetConfig {
    pub count: usize,
    pub image_size: usize,
    pub channels: usize,
    pub correlation_table: CorrelationTable,
    pub seed: u64,
    pub style: RenderStyle,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            count: 512,
            image_size: 32,
            channels: 3,
            correlation_table: CorrelationTable::default(),
            seed: 0,
            style: RenderStyle::Crisp,
        }
    }
}

impl DatasetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.channels != 1 && self.channels != 3 {
            return Err(FacesError::InvalidConfig(format!(
                "channels must be 1 or 3, got {}",
                self.channels
            )));
        }
        if self.image_size < 8 {
            return Err(FacesError::InvalidConfig(format!(
                "image_size must be at least 8, got {}",
                self.image_size
            )));
        }
        self.correlation_table.validate()
    }
}

fn categorical<R: Rng + ?Sized>(rng: &mut R, probs: &[f64]) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    // Rounding left u above the cumulative sum; fall back to the last
    // category with nonzero mass.
    probs.iter().rposition(|&p| p > 0.0).unwrap_or(probs.len() - 1)
}

/// Draws one attribute tuple following the conditional chain in the table.
pub fn sample_attributes<R: Rng + ?Sized>(table: &CorrelationTable, rng: &mut R) -> Result<FaceAttributes> {
    table.validate()?;
    let expression = Expression::ALL[categorical(rng, &table.expression)];
    let g = categorical(rng, &table.gender);
    let facial_hair = categorical(rng, &table.facial_hair_given_gender[g]) == 1;
    let a = categorical(rng, &table.age);
    let accessory = Accessory::ALL[categorical(rng, &table.accessory_given_age[a])];
    let hair_color = HairColor::ALL[categorical(rng, &table.hair_color)];
    Ok(FaceAttributes {
        expression,
        facial_hair,
        gender: Gender::ALL[g],
        age: AgeBand::ALL[a],
        accessory,
        hair_color,
    })
}

/// Seed of image `index` in a dataset built with `global_seed`.
pub fn image_seed(global_seed: u64, index: u64) -> u64 {
    // SplitMix64 finalizer over the pair.
    let mut z = global_seed ^ index.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(0x632B_E59B_D9B4_E019);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

/// Seed-dependent geometry shared by every attribute combination.
#[derive(Debug, Clone, PartialEq)]
pub struct FaceLayout {
    pub cx: f64,
    pub cy: f64,
    pub rx: f64,
    pub ry: f64,
    pub skin_shift: f64,
    pub hat_tint: [f64; 3],
    pub size: usize,
}

const EYE_BAND_HALF: f64 = 0.07;

impl FaceLayout {
    pub fn from_seed(seed: u64, size: usize) -> Self {
        let mut rng = stream(seed, 1);
        let mut jitter = |scale: f64| (rng.random::<f64>() * 2.0 - 1.0) * scale;
        Self {
            cx: 0.5 + jitter(0.04),
            cy: 0.56 + jitter(0.03),
            rx: 0.27 + jitter(0.02),
            ry: 0.33 + jitter(0.02),
            skin_shift: jitter(0.08),
            hat_tint: [jitter(0.3), jitter(0.3), jitter(0.3)],
            size,
        }
    }

    pub fn eye_y(&self) -> f64 {
        self.cy - 0.25 * self.ry
    }

    /// Pixel rows that may contain eye-region features (eyes, glasses).
    pub fn eye_band(&self) -> std::ops::Range<usize> {
        let s = self.size as f64;
        let lo = ((self.eye_y() - EYE_BAND_HALF) * s - 0.5).floor().max(0.0) as usize;
        let hi = ((self.eye_y() + EYE_BAND_HALF) * s - 0.5).ceil().min(s - 1.0) as usize;
        lo..hi + 1
    }

    fn in_eye_band(&self, v: f64) -> bool {
        (v - self.eye_y()).abs() <= EYE_BAND_HALF
    }
}

fn skin_rgb(attrs: &FaceAttributes, layout: &FaceLayout) -> [f64; 3] {
    let base = match attrs.age {
        AgeBand::Young => [0.75, 0.35, 0.15],
        AgeBand::Mid => [0.65, 0.28, 0.10],
        AgeBand::Old => [0.55, 0.30, 0.22],
    };
    base.map(|c| c + layout.skin_shift)
}

fn hair_rgb(attrs: &FaceAttributes) -> [f64; 3] {
    match attrs.hair_color {
        HairColor::Dark => [-0.70, -0.75, -0.78],
        HairColor::Light => [0.85, 0.70, 0.20],
        HairColor::Red => [0.70, -0.20, -0.55],
    }
}

/// Smooth value noise on a `cells x cells` lattice, bilinearly interpolated.
struct ValueNoise {
    cells: usize,
    lattice: Vec<f64>,
}

impl ValueNoise {
    fn new<R: Rng + ?Sized>(rng: &mut R, cells: usize) -> Self {
        let n = (cells + 1) * (cells + 1);
        Self {
            cells,
            lattice: (0..n).map(|_| rng.random::<f64>() * 2.0 - 1.0).collect(),
        }
    }

    fn at(&self, u: f64, v: f64) -> f64 {
        let c = self.cells as f64;
        let (x, y) = ((u * c).clamp(0.0, c - 1e-9), (v * c).clamp(0.0, c - 1e-9));
        let (x0, y0) = (x.floor() as usize, y.floor() as usize);
        let (fx, fy) = (x - x0 as f64, y - y0 as f64);
        let w = self.cells + 1;
        let l = |i: usize, j: usize| self.lattice[j * w + i];
        let top = l(x0, y0) * (1.0 - fx) + l(x0 + 1, y0) * fx;
        let bot = l(x0, y0 + 1) * (1.0 - fx) + l(x0 + 1, y0 + 1) * fx;
        top * (1.0 - fy) + bot * fy
    }
}

/// Renders one face as a `[C, H, W]` tensor with values in `[-1, 1]`.
pub fn render_face(attrs: &FaceAttributes, cfg: &DatasetConfig, seed: u64) -> Tensor<f32> {
    let s = cfg.image_size;
    let layout = FaceLayout::from_seed(seed, s);
    let skin = skin_rgb(attrs, &layout);
    let hair = hair_rgb(attrs);
    let (cx, cy, rx, ry) = (layout.cx, layout.cy, layout.rx, layout.ry);
    let eye_y = layout.eye_y();
    let mouth_y = cy + 0.5 * ry;
    // Hair outline: long hair for presentation B falls beside the face.
    let (hrx, hry, hcy) = match attrs.gender {
        Gender::A => (rx * 1.12, ry * 1.08, cy - 0.04),
        Gender::B => (rx * 1.35, ry * 1.25, cy + 0.02),
    };
    let hairline = cy - 0.55 * ry;

    let mut rgb = vec![[0.0f64; 3]; s * s];
    let mut fg = vec![false; s * s];
    for py in 0..s {
        let v = (py as f64 + 0.5) / s as f64;
        for px in 0..s {
            let u = (px as f64 + 0.5) / s as f64;
            let idx = py * s + px;
            let face_d = ((u - cx) / rx).powi(2) + ((v - cy) / ry).powi(2);
            let hair_d = ((u - cx) / hrx).powi(2) + ((v - hcy) / hry).powi(2);
            let mut color = None;
            let in_long_hair = attrs.gender == Gender::B && v < cy + 0.6 * ry;
            if hair_d <= 1.0 && (v < hairline || in_long_hair) {
                color = Some(hair);
            }
            if face_d <= 1.0 {
                let mut c = skin;
                if v < hairline {
                    c = hair;
                }
                if attrs.facial_hair && v > cy + 0.2 * ry {
                    c = hair.map(|h| h * 0.8 - 0.1);
                }
                if attrs.age == AgeBand::Old {
                    let fy = cy - 0.42 * ry;
                    if (v - fy).abs() < 0.012 && (u - cx).abs() < 0.45 * rx {
                        c = c.map(|x| x - 0.35);
                    }
                }
                // Eyes.
                for side in [-1.0, 1.0] {
                    let ex = cx + side * 0.4 * rx;
                    if ((u - ex).powi(2) + (v - eye_y).powi(2)).sqrt() < 0.038 {
                        c = [-0.9, -0.9, -0.85];
                    }
                }
                // Mouth: parabola bent up for a smile, down for a frown.
                let dx = (u - cx) / (0.45 * rx);
                if dx.abs() <= 1.0 {
                    let bend = match attrs.expression {
                        Expression::Neutral => 0.0,
                        Expression::Smile => -0.05,
                        Expression::Frown => 0.05,
                    };
                    let curve = mouth_y + bend * (dx * dx - 0.5);
                    if (v - curve).abs() < 0.022 {
                        c = [0.35, -0.55, -0.5];
                    }
                }
                color = Some(c);
            }
            if attrs.accessory == Accessory::Glasses && layout.in_eye_band(v) {
                for side in [-1.0, 1.0] {
                    let ex = cx + side * 0.4 * rx;
                    let r = ((u - ex).powi(2) + (v - eye_y).powi(2)).sqrt();
                    if (0.05..0.068).contains(&r) {
                        color = Some([-0.95, -0.95, -0.95]);
                    }
                }
                if (v - eye_y).abs() < 0.012 && (u - cx).abs() < 0.4 * rx - 0.05 {
                    color = Some([-0.95, -0.95, -0.95]);
                }
            }
            if attrs.accessory == Accessory::Hat {
                let crown = v < cy - 0.78 * ry && v > cy - 1.35 * ry && (u - cx).abs() < rx * 0.95;
                let brim = (v - (cy - 0.78 * ry)).abs() < 0.03 && (u - cx).abs() < rx * 1.4;
                if crown || brim {
                    let t = layout.hat_tint;
                    color = Some([-0.3 + t[0], -0.5 + t[1], 0.4 + t[2]]);
                }
            }
            if let Some(c) = color {
                rgb[idx] = c;
                fg[idx] = true;
            }
        }
    }

    if cfg.style == RenderStyle::Textured {
        let mut rng = stream(seed, 2);
        let octaves: Vec<(ValueNoise, f64)> = [(3usize, 0.30), (7, 0.20), (15, 0.14)]
            .into_iter()
            .map(|(cells, amp)| (ValueNoise::new(&mut rng, cells), amp))
            .collect();
        let tint: [f64; 3] = [
            0.8 + 0.4 * rng.random::<f64>(),
            0.8 + 0.4 * rng.random::<f64>(),
            0.8 + 0.4 * rng.random::<f64>(),
        ];
        let grain_amp = 0.08;
        for py in 0..s {
            let v = (py as f64 + 0.5) / s as f64;
            for px in 0..s {
                let u = (px as f64 + 0.5) / s as f64;
                let idx = py * s + px;
                // Grain is drawn for every pixel so the stream does not
                // depend on the foreground mask.
                let grain = (rng.random::<f64>() * 2.0 - 1.0) * grain_amp;
                if !fg[idx] {
                    continue;
                }
                let n: f64 = octaves.iter().map(|(o, a)| a * o.at(u, v)).sum::<f64>() + grain;
                for (ch, t) in rgb[idx].iter_mut().zip(tint) {
                    *ch += n * t;
                }
            }
        }
    }

    let c = cfg.channels;
    let mut data = vec![0.0f32; c * s * s];
    for (idx, px) in rgb.iter().enumerate() {
        if !fg[idx] {
            continue;
        }
        if c == 3 {
            for ch in 0..3 {
                data[ch * s * s + idx] = px[ch].clamp(-1.0, 1.0) as f32;
            }
        } else {
            let lum = 0.299 * px[0] + 0.587 * px[1] + 0.114 * px[2];
            data[idx] = lum.clamp(-1.0, 1.0) as f32;
        }
    }
    Tensor::new(vec![c, s, s], data).expect("shape matches")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestRow {
    pub index: usize,
    pub expression: Expression,
    pub facial_hair: bool,
    pub gender: Gender,
    pub age: AgeBand,
    pub accessory: Accessory,
    pub hair_color: HairColor,
    pub seed: u64,
}

impl ManifestRow {
    pub fn attributes(&self) -> FaceAttributes {
        FaceAttributes {
            expression: self.expression,
            facial_hair: self.facial_hair,
            gender: self.gender,
            age: self.age,
            accessory: self.accessory,
            hair_color: self.hair_color,
        }
    }
}

/// In-memory image collection, `[C, H, W]` per image.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub images: Vec<Tensor<f32>>,
    /// One row per procedurally generated image; empty for external sets.
    pub manifest: Vec<ManifestRow>,
    pub channels: usize,
    pub image_size: usize,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn write_manifest(&self, path: &Path) -> Result<()> {
        // Header comes from the row's field names.
        let mut w = csv::WriterBuilder::new().has_headers(true).from_path(path)?;
        if self.manifest.is_empty() {
            w.write_record(["index", "expression", "facial_hair", "gender", "age", "accessory", "hair_color", "seed"])?;
        }
        for row in &self.manifest {
            w.serialize(row)?;
        }
        w.flush()?;
        Ok(())
    }
}

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestRow>> {
    let mut r = csv::Reader::from_path(path)?;
    r.deserialize().map(|row| row.map_err(FacesError::from)).collect()
}

/// Generates `cfg.count` images. Each image's randomness comes from its own
/// stream keyed by `(cfg.seed, index)`.
pub fn build_dataset(cfg: &DatasetConfig) -> Result<Dataset> {
    cfg.validate()?;
    let mut images = Vec::with_capacity(cfg.count);
    let mut manifest = Vec::with_capacity(cfg.count);
    for index in 0..cfg.count {
        let seed = image_seed(cfg.seed, index as u64);
        let attrs = sample_attributes(&cfg.correlation_table, &mut stream(seed, 0))?;
        images.push(render_face(&attrs, cfg, seed));
        manifest.push(ManifestRow {
            index,
            expression: attrs.expression,
            facial_hair: attrs.facial_hair,
            gender: attrs.gender,
            age: attrs.age,
            accessory: attrs.accessory,
            hair_color: attrs.hair_color,
            seed,
        });
    }
    Ok(Dataset {
        images,
        manifest,
        channels: cfg.channels,
        image_size: cfg.image_size,
    })
}

struct Decoded {
    width: usize,
    height: usize,
    /// RGB triples, 0..=255.
    rgb: Vec<[u8; 3]>,
}

fn decode_png(path: &Path) -> Result<Decoded> {
    let file = fs::File::open(path)?;
    let mut decoder = png::Decoder::new(std::io::BufReader::new(file));
    decoder.set_transformations(png::Transformations::EXPAND | png::Transformations::STRIP_16);
    let mut reader = decoder.read_info().map_err(|e| FacesError::Image(e.to_string()))?;
    let size = reader
        .output_buffer_size()
        .ok_or_else(|| FacesError::Image("image too large".into()))?;
    let mut buf = vec![0; size];
    let info = reader.next_frame(&mut buf).map_err(|e| FacesError::Image(e.to_string()))?;
    let (w, h) = (info.width as usize, info.height as usize);
    let channels = info.color_type.samples();
    let bytes = &buf[..info.buffer_size()];
    let rgb = bytes
        .chunks(channels)
        .map(|p| match channels {
            1 | 2 => [p[0]; 3],
            _ => [p[0], p[1], p[2]],
        })
        .collect::<Vec<_>>();
    if rgb.len() != w * h {
        return Err(FacesError::Image(format!("unexpected buffer size for {w}x{h}")));
    }
    Ok(Decoded { width: w, height: h, rgb })
}

/// Center-crops to a square, resizes with nearest-neighbour sampling and
/// maps 8-bit values to `[-1, 1]`.
fn preprocess(img: &Decoded, size: usize, channels: usize) -> Tensor<f32> {
    let side = img.width.min(img.height);
    let x0 = (img.width - side) / 2;
    let y0 = (img.height - side) / 2;
    let mut data = vec![0.0f32; channels * size * size];
    for oy in 0..size {
        let sy = y0 + (oy * side) / size;
        for ox in 0..size {
            let sx = x0 + (ox * side) / size;
            let p = img.rgb[sy * img.width + sx];
            let scale = |b: u8| b as f32 / 127.5 - 1.0;
            if channels == 3 {
                for ch in 0..3 {
                    data[ch * size * size + oy * size + ox] = scale(p[ch]);
                }
            } else {
                let lum = (0.299 * p[0] as f32 + 0.587 * p[1] as f32 + 0.114 * p[2] as f32).round();
                data[oy * size + ox] = scale(lum as u8);
            }
        }
    }
    Tensor::new(vec![channels, size, size], data).expect("shape matches")
}

/// Loads every decodable PNG in `dir` (sorted by file name). Unreadable
/// files are skipped with a warning.
pub fn load_external_images(dir: &Path, image_size: usize, channels: usize) -> Result<Dataset> {
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file())
        .collect();
    paths.sort();
    let mut images = Vec::new();
    for path in paths {
        match decode_png(&path) {
            Ok(img) if img.width > 0 && img.height > 0 => images.push(preprocess(&img, image_size, channels)),
            Ok(_) => log::warn!("skipping empty image {}", path.display()),
            Err(e) => log::warn!("skipping {}: {e}", path.display()),
        }
    }
    if images.is_empty() {
        return Err(FacesError::EmptyDirectory(dir.to_path_buf()));
    }
    Ok(Dataset {
        images,
        manifest: Vec::new(),
        channels,
        image_size,
    })
}

/// Writes a `[C, H, W]` image (values in `[-1, 1]`) as an 8-bit PNG.
pub fn save_png(image: &Tensor<f32>, path: &Path) -> Result<()> {
    let s = image.shape();
    if s.len() != 3 || (s[0] != 1 && s[0] != 3) {
        return Err(FacesError::Image(format!("expected [1|3, H, W], got {s:?}")));
    }
    let (c, h, w) = (s[0], s[1], s[2]);
    let quantize = |v: f32| ((v.clamp(-1.0, 1.0) + 1.0) * 127.5).round() as u8;
    let mut bytes = Vec::with_capacity(c * h * w);
    for i in 0..h * w {
        for ch in 0..c {
            bytes.push(quantize(image.data()[ch * h * w + i]));
        }
    }
    let file = fs::File::create(path)?;
    let mut enc = png::Encoder::new(BufWriter::new(file), w as u32, h as u32);
    enc.set_color(if c == 3 { png::ColorType::Rgb } else { png::ColorType::Grayscale });
    enc.set_depth(png::BitDepth::Eight);
    let mut writer = enc.write_header().map_err(|e| FacesError::Image(e.to_string()))?;
    writer.write_image_data(&bytes).map_err(|e| FacesError::Image(e.to_string()))?;
    Ok(())
}
