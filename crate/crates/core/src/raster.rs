//! Multi-band rasters, label maps, their binary containers, and sliding-window
//! tiling.
//!
//! Raster container (little-endian):
//!
//! ```text
//! "MSRS" | version: u16 | height: u32 | width: u32 | channels: u16 | bit_depth: u8
//! channels × (tag: u8, other_index: u16)
//! height × width × channels samples, band-interleaved, row-major
//! ```
//!
//! `bit_depth` 8 and 16 store unsigned integers that are divided by the
//! depth maximum on load; 32 stores already-normalized `f32` values.
//! Tags: 0 NIR, 1 red, 2 green, 3 blue, 4 other (with its index).
//!
//! Label container:
//!
//! ```text
//! "LBLS" | version: u16 | height: u32 | width: u32 | n_classes: u16 | height × width × u8
//! ```

use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use crate::element::Element;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

const RASTER_MAGIC: &[u8; 4] = b"MSRS";
const LABEL_MAGIC: &[u8; 4] = b"LBLS";
const VERSION: u16 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum BandTag {
    Nir,
    Red,
    Green,
    Blue,
    Other(u16),
}

impl BandTag {
    fn code(self) -> (u8, u16) {
        match self {
            BandTag::Nir => (0, 0),
            BandTag::Red => (1, 0),
            BandTag::Green => (2, 0),
            BandTag::Blue => (3, 0),
            BandTag::Other(i) => (4, i),
        }
    }

    fn from_code(code: u8, index: u16) -> Option<Self> {
        Some(match code {
            0 => BandTag::Nir,
            1 => BandTag::Red,
            2 => BandTag::Green,
            3 => BandTag::Blue,
            4 => BandTag::Other(index),
            _ => return None,
        })
    }
}

impl fmt::Display for BandTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            BandTag::Nir => f.write_str("nir"),
            BandTag::Red => f.write_str("red"),
            BandTag::Green => f.write_str("green"),
            BandTag::Blue => f.write_str("blue"),
            BandTag::Other(i) => write!(f, "other{i}"),
        }
    }
}

impl FromStr for BandTag {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim().to_ascii_lowercase();
        Ok(match s.as_str() {
            "nir" => BandTag::Nir,
            "red" | "r" => BandTag::Red,
            "green" | "g" => BandTag::Green,
            "blue" | "b" => BandTag::Blue,
            _ => match s.strip_prefix("other").and_then(|i| i.parse().ok()) {
                Some(i) => BandTag::Other(i),
                None => return Err(Error::Config(format!("unknown band tag {s:?}"))),
            },
        })
    }
}

/// Parses `nir,red,green,blue`.
pub fn parse_bands(list: &str) -> Result<Vec<BandTag>> {
    list.split(',').map(str::parse).collect()
}

pub const DEFAULT_BANDS: [BandTag; 4] = [BandTag::Nir, BandTag::Red, BandTag::Green, BandTag::Blue];

/// `H×W×C` band-interleaved image with values normalized to `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Raster {
    height: usize,
    width: usize,
    bands: Vec<BandTag>,
    data: Vec<f32>,
}

impl Raster {
    pub fn new(height: usize, width: usize, bands: Vec<BandTag>, data: Vec<f32>) -> Result<Self> {
        if height == 0 || width == 0 || bands.is_empty() {
            return Err(Error::contract(format!(
                "raster extents must be positive, got {height}×{width}×{}",
                bands.len()
            )));
        }
        if data.len() != height * width * bands.len() {
            return Err(Error::dims("raster", &[height, width, bands.len()], &[data.len()]));
        }
        if let Some(v) = data.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::contract(format!("raster value {v} outside [0, 1]")));
        }
        Ok(Self {
            height,
            width,
            bands,
            data,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.bands.len()
    }

    pub fn bands(&self) -> &[BandTag] {
        &self.bands
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn get(&self, row: usize, col: usize, band: usize) -> f32 {
        self.data[(row * self.width + col) * self.channels() + band]
    }

    pub fn band_index(&self, tag: BandTag) -> Option<usize> {
        self.bands.iter().position(|&b| b == tag)
    }

    /// One band as an `H×W` plane.
    pub fn band(&self, tag: BandTag) -> Option<Tensor<f32>> {
        let b = self.band_index(tag)?;
        let c = self.channels();
        let plane = self.data.iter().skip(b).step_by(c).copied().collect();
        Some(Tensor::from_parts(vec![self.height, self.width], plane))
    }

    /// Channel-first `[C×H×W]` copy.
    pub fn to_chw<T: Element>(&self) -> Tensor<T> {
        let (h, w, c) = (self.height, self.width, self.channels());
        Tensor::from_fn([c, h, w], |i| {
            let (ch, p) = (i / (h * w), i % (h * w));
            T::of(self.data[p * c + ch] as f64)
        })
    }

    pub fn crop(&self, row: usize, col: usize, height: usize, width: usize) -> Result<Raster> {
        check_window(self.height, self.width, row, col, height, width)?;
        let c = self.channels();
        let mut data = Vec::with_capacity(height * width * c);
        for r in row..row + height {
            let start = (r * self.width + col) * c;
            data.extend_from_slice(&self.data[start..start + width * c]);
        }
        Ok(Raster {
            height,
            width,
            bands: self.bands.clone(),
            data,
        })
    }

    pub fn with_bands(mut self, bands: Vec<BandTag>) -> Result<Self> {
        if bands.len() != self.bands.len() {
            return Err(Error::contract(format!(
                "{} band tags given for a {}-band raster",
                bands.len(),
                self.bands.len()
            )));
        }
        self.bands = bands;
        Ok(self)
    }
}

fn check_window(h: usize, w: usize, row: usize, col: usize, wh: usize, ww: usize) -> Result<()> {
    if wh == 0 || ww == 0 || row + wh > h || col + ww > w {
        return Err(Error::contract(format!(
            "window {wh}×{ww} at ({row}, {col}) outside {h}×{w}"
        )));
    }
    Ok(())
}

/// Per-pixel class ids in `[0, n_classes)`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelMap {
    height: usize,
    width: usize,
    n_classes: usize,
    labels: Vec<u8>,
}

impl LabelMap {
    pub fn new(height: usize, width: usize, n_classes: usize, labels: Vec<u8>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::contract("label map extents must be positive"));
        }
        if n_classes == 0 || n_classes > 256 {
            return Err(Error::contract(format!("n_classes {n_classes} outside 1..=256")));
        }
        if labels.len() != height * width {
            return Err(Error::dims("label map", &[height, width], &[labels.len()]));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l as usize >= n_classes) {
            return Err(Error::contract(format!(
                "label {bad} outside {n_classes} classes"
            )));
        }
        Ok(Self {
            height,
            width,
            n_classes,
            labels,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn n_classes(&self) -> usize {
        self.n_classes
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn get(&self, row: usize, col: usize) -> u8 {
        self.labels[row * self.width + col]
    }

    pub fn as_indices(&self) -> Vec<usize> {
        self.labels.iter().map(|&l| l as usize).collect()
    }

    pub fn crop(&self, row: usize, col: usize, height: usize, width: usize) -> Result<LabelMap> {
        check_window(self.height, self.width, row, col, height, width)?;
        let mut labels = Vec::with_capacity(height * width);
        for r in row..row + height {
            let start = r * self.width + col;
            labels.extend_from_slice(&self.labels[start..start + width]);
        }
        Ok(LabelMap {
            height,
            width,
            n_classes: self.n_classes,
            labels,
        })
    }

    /// Pixel count per class.
    pub fn histogram(&self) -> Vec<usize> {
        let mut h = vec![0; self.n_classes];
        for &l in &self.labels {
            h[l as usize] += 1;
        }
        h
    }
}

// ---- tiling ----------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TileSpec {
    pub window: usize,
    pub stride: usize,
}

impl TileSpec {
    pub fn new(window: usize, stride: usize) -> Result<Self> {
        if window == 0 || stride == 0 || stride > window {
            return Err(Error::contract(format!(
                "tile spec needs 0 < stride ≤ window, got window {window}, stride {stride}"
            )));
        }
        Ok(Self { window, stride })
    }
}

/// Window offsets along one axis: `0, stride, 2·stride, …` with the last
/// window clamped to end exactly at `extent`.
pub fn tile_offsets(extent: usize, spec: TileSpec) -> Result<Vec<usize>> {
    if spec.window > extent {
        return Err(Error::contract(format!(
            "window {} larger than image extent {extent}",
            spec.window
        )));
    }
    let mut offsets = Vec::new();
    let mut o = 0;
    loop {
        if o + spec.window >= extent {
            offsets.push(extent - spec.window);
            return Ok(offsets);
        }
        offsets.push(o);
        o += spec.stride;
    }
}

/// Row-major window origins `(row, col)` covering an `height×width` image.
pub fn tile_origins(height: usize, width: usize, spec: TileSpec) -> Result<Vec<(usize, usize)>> {
    let rows = tile_offsets(height, spec)?;
    let cols = tile_offsets(width, spec)?;
    Ok(rows
        .iter()
        .flat_map(|&r| cols.iter().map(move |&c| (r, c)))
        .collect())
}

#[derive(Clone, Debug, PartialEq)]
pub struct Tile {
    pub row: usize,
    pub col: usize,
    pub raster: Raster,
    pub labels: LabelMap,
}

pub fn tile(raster: &Raster, labels: &LabelMap, spec: TileSpec) -> Result<Vec<Tile>> {
    if (raster.height, raster.width) != (labels.height, labels.width) {
        return Err(Error::dims(
            "tile",
            &[raster.height, raster.width],
            &[labels.height, labels.width],
        ));
    }
    tile_origins(raster.height, raster.width, spec)?
        .into_iter()
        .map(|(row, col)| {
            Ok(Tile {
                row,
                col,
                raster: raster.crop(row, col, spec.window, spec.window)?,
                labels: labels.crop(row, col, spec.window, spec.window)?,
            })
        })
        .collect()
}

// ---- containers ----------------------------------------------------------------

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn new(bytes: &'a [u8]) -> Self {
        Self { bytes, pos: 0 }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::format(
                self.pos as u64,
                format!("truncated: need {n} bytes, {} left", self.bytes.len() - self.pos),
            ));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn header(&mut self, magic: &[u8; 4]) -> Result<()> {
        if self.bytes.is_empty() {
            return Err(Error::format(0, "empty file"));
        }
        if self.take(4)? != magic {
            return Err(Error::format(
                0,
                format!("bad magic, expected {}", String::from_utf8_lossy(magic)),
            ));
        }
        let version = self.u16()?;
        if version != VERSION {
            return Err(Error::format(4, format!("unsupported version {version}")));
        }
        Ok(())
    }

    fn finish(&self) -> Result<()> {
        if self.pos != self.bytes.len() {
            return Err(Error::format(self.pos as u64, "trailing bytes"));
        }
        Ok(())
    }
}

/// Encodes with `bit_depth` 32 (normalized floats), which round-trips exactly.
pub fn encode_raster(raster: &Raster) -> Vec<u8> {
    let mut out = Vec::with_capacity(17 + 3 * raster.channels() + 4 * raster.data.len());
    out.extend_from_slice(RASTER_MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(raster.height as u32).to_le_bytes());
    out.extend_from_slice(&(raster.width as u32).to_le_bytes());
    out.extend_from_slice(&(raster.channels() as u16).to_le_bytes());
    out.push(32);
    for tag in &raster.bands {
        let (code, index) = tag.code();
        out.push(code);
        out.extend_from_slice(&index.to_le_bytes());
    }
    for v in &raster.data {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

/// Decodes a raster container. `tags`, when given, replace the stored band
/// tags and must match the channel count.
pub fn decode_raster(bytes: &[u8], tags: Option<&[BandTag]>) -> Result<Raster> {
    let mut r = Reader::new(bytes);
    r.header(RASTER_MAGIC)?;
    let height = r.u32()? as usize;
    let width = r.u32()? as usize;
    let channels = r.u16()? as usize;
    if height == 0 || width == 0 || channels == 0 {
        return Err(Error::format(6, format!("zero extent {height}×{width}×{channels}")));
    }
    let depth_at = r.pos as u64;
    let depth = r.u8()?;
    let mut bands = Vec::with_capacity(channels);
    for _ in 0..channels {
        let at = r.pos as u64;
        let code = r.u8()?;
        let index = r.u16()?;
        bands.push(
            BandTag::from_code(code, index)
                .ok_or_else(|| Error::format(at, format!("unknown band tag code {code}")))?,
        );
    }
    let n = height * width * channels;
    let data_at = r.pos as u64;
    let data: Vec<f32> = match depth {
        8 => r.take(n)?.iter().map(|&v| v as f32 / 255.0).collect(),
        16 => r
            .take(2 * n)?
            .chunks_exact(2)
            .map(|b| u16::from_le_bytes([b[0], b[1]]) as f32 / 65535.0)
            .collect(),
        32 => r
            .take(4 * n)?
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
            .collect(),
        other => return Err(Error::format(depth_at, format!("unsupported bit depth {other}"))),
    };
    r.finish()?;
    if data.iter().any(|v| !(0.0..=1.0).contains(v)) {
        return Err(Error::format(data_at, "sample outside [0, 1]"));
    }
    let raster = Raster {
        height,
        width,
        bands,
        data,
    };
    match tags {
        Some(tags) => raster.with_bands(tags.to_vec()),
        None => Ok(raster),
    }
}

pub fn save_raster(raster: &Raster, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, encode_raster(raster))?;
    Ok(())
}

pub fn load_raster(path: impl AsRef<Path>, tags: Option<&[BandTag]>) -> Result<Raster> {
    decode_raster(&fs::read(path)?, tags)
}

pub fn encode_labels(labels: &LabelMap) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + labels.labels.len());
    out.extend_from_slice(LABEL_MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(labels.height as u32).to_le_bytes());
    out.extend_from_slice(&(labels.width as u32).to_le_bytes());
    out.extend_from_slice(&(labels.n_classes as u16).to_le_bytes());
    out.extend_from_slice(&labels.labels);
    out
}

pub fn decode_labels(bytes: &[u8]) -> Result<LabelMap> {
    let mut r = Reader::new(bytes);
    r.header(LABEL_MAGIC)?;
    let height = r.u32()? as usize;
    let width = r.u32()? as usize;
    let n_classes = r.u16()? as usize;
    let data_at = r.pos as u64;
    let labels = r.take(height * width)?.to_vec();
    r.finish()?;
    LabelMap::new(height, width, n_classes, labels).map_err(|e| Error::format(data_at, e.to_string()))
}

pub fn save_labels(labels: &LabelMap, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, encode_labels(labels))?;
    Ok(())
}

pub fn load_labels(path: impl AsRef<Path>) -> Result<LabelMap> {
    decode_labels(&fs::read(path)?)
}

// ---- prediction output ---------------------------------------------------------

/// ISPRS-style colours for the first six classes: impervious, building,
/// low vegetation, tree, car, clutter.
const BASE_PALETTE: [[u8; 3]; 6] = [
    [255, 255, 255],
    [0, 0, 255],
    [0, 255, 255],
    [0, 255, 0],
    [255, 255, 0],
    [255, 0, 0],
];

/// RGB palette with one distinct colour per class.
pub fn palette(n_classes: usize) -> Vec<[u8; 3]> {
    (0..n_classes)
        .map(|k| match BASE_PALETTE.get(k) {
            Some(&c) => c,
            None => {
                // golden-ratio hue walk for extra classes
                let j = (k - BASE_PALETTE.len()) as u32;
                let v = j.wrapping_mul(0x9E37_79B9);
                [(v >> 24) as u8 | 1, (v >> 16) as u8, (v >> 8) as u8 & 0xFE]
            }
        })
        .collect()
}

pub fn write_palette_png(labels: &LabelMap, path: impl AsRef<Path>) -> Result<()> {
    let file = fs::File::create(path)?;
    let mut encoder = png::Encoder::new(
        std::io::BufWriter::new(file),
        labels.width as u32,
        labels.height as u32,
    );
    encoder.set_color(png::ColorType::Indexed);
    encoder.set_depth(png::BitDepth::Eight);
    encoder.set_palette(palette(labels.n_classes).concat());
    let mut writer = encoder
        .write_header()
        .map_err(|e| Error::Io(std::io::Error::other(e)))?;
    writer
        .write_image_data(&labels.labels)
        .map_err(|e| Error::Io(std::io::Error::other(e)))?;
    Ok(())
}

/// Writes the label container at `path` and an indexed-colour PNG next to
/// it (same stem, `.png`).
pub fn save_prediction(labels: &LabelMap, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    save_labels(labels, path)?;
    write_palette_png(labels, path.with_extension("png"))
}
