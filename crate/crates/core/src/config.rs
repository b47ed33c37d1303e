//! Run configuration.
//!
//! Files hold flat `section.key = value` lines (TOML dotted keys), e.g.
//!
//! ```text
//! indices = ["ndvi"]
//! model.n_classes = 6
//! lwped.levels = 2
//! fusion.mode = "adaptive"
//! ```
//!
//! Unknown keys are rejected. Overrides of the form `key=value` are applied
//! on top of the file; bare words are read as strings.

use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use toml::{Table, Value};

use crate::error::{Error, Result};
use crate::fusion::FusionMode;
use crate::index::{CustomIndex, IndexSpec};
use crate::raster::{BandTag, DEFAULT_BANDS};
use crate::space::SpaceEncoderConfig;
use crate::wave::PhaseMode;
use crate::wavelet::PadMode;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Deserialize, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Branch {
    Space,
    Wave,
    Index,
}

/// How stored detail coefficients enter the decoder.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Deserialize, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum DetailSkip {
    #[default]
    Identity,
    /// A per-level channel map, initialized to the identity.
    Learned,
}

#[derive(Clone, Debug, PartialEq, Deserialize, Serialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub n_classes: usize,
    /// Tile extent the model is built for; also the inference window.
    pub tile: usize,
    /// Feature channels carried through the pyramid.
    pub width: usize,
    pub branches: Vec<Branch>,
    pub seed: u64,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self {
            n_classes: 6,
            tile: 32,
            width: 16,
            branches: vec![Branch::Space, Branch::Wave, Branch::Index],
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Deserialize, Serialize)]
#[serde(default, deny_unknown_fields)]
pub struct LwpedSection {
    pub levels: usize,
    pub pad: PadMode,
    pub detail_skip: DetailSkip,
}

impl Default for LwpedSection {
    fn default() -> Self {
        Self {
            levels: 2,
            pad: PadMode::None,
            detail_skip: DetailSkip::Identity,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Deserialize, Serialize)]
#[serde(default, deny_unknown_fields)]
pub struct WaveSection {
    pub blocks: usize,
    pub dim: usize,
    pub phase: PhaseMode,
}

impl Default for WaveSection {
    fn default() -> Self {
        Self {
            blocks: 2,
            dim: 32,
            phase: PhaseMode::Content,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Deserialize, Serialize)]
#[serde(default, deny_unknown_fields)]
pub struct SpaceSection {
    pub patch: usize,
    pub dim: usize,
    pub heads: usize,
    pub layers: usize,
}

impl Default for SpaceSection {
    fn default() -> Self {
        let d = SpaceEncoderConfig::default();
        Self {
            patch: d.patch,
            dim: d.dim,
            heads: d.heads,
            layers: d.layers,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Deserialize, Serialize)]
#[serde(default, deny_unknown_fields)]
pub struct FusionSection {
    pub mode: FusionMode,
}

#[derive(Clone, Debug, PartialEq, Deserialize, Serialize)]
#[serde(default, deny_unknown_fields)]
pub struct AttnSection {
    pub reduction: usize,
}

impl Default for AttnSection {
    fn default() -> Self {
        Self { reduction: 4 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Deserialize, Serialize)]
#[serde(default, deny_unknown_fields)]
pub struct Ablation {
    /// Restore resolution through the inverse pyramid; nearest-neighbour
    /// upsampling otherwise.
    pub inverse_wave_block: bool,
    pub channel_attention: bool,
}

impl Default for Ablation {
    fn default() -> Self {
        Self {
            inverse_wave_block: true,
            channel_attention: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Deserialize, Serialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub poly_power: f64,
    pub seed: u64,
    /// Weight of each branch's own cross-entropy term.
    pub aux_weight: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 2000,
            batch: 4,
            lr: 1e-3,
            weight_decay: 0.01,
            poly_power: 0.9,
            seed: 0,
            aux_weight: 0.4,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("train.lr must be positive, got {}", self.lr)));
        }
        if self.batch == 0 {
            return Err(Error::Config("train.batch must be positive".into()));
        }
        if self.weight_decay < 0.0 || self.poly_power < 0.0 || self.aux_weight < 0.0 {
            return Err(Error::Config(
                "train.weight_decay, train.poly_power and train.aux_weight must be non-negative".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Deserialize, Serialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub n_samples: usize,
    pub size: usize,
    pub noise: f64,
    /// Many small regions, so most pixels sit near a class boundary.
    pub boundary_dense: bool,
    pub seed: u64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            n_samples: 64,
            size: 32,
            noise: 0.03,
            boundary_dense: false,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Deserialize, Serialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    /// Band order the model reads; rasters are reordered to match.
    pub bands: Vec<String>,
    pub indices: Vec<String>,
    pub custom: Vec<CustomIndex>,
    pub model: ModelSection,
    pub lwped: LwpedSection,
    pub wave: WaveSection,
    pub space: SpaceSection,
    pub fusion: FusionSection,
    pub attn: AttnSection,
    pub ablation: Ablation,
    pub train: TrainConfig,
    pub data: DataConfig,
}

impl Default for Config {
    fn default() -> Self {
        Self {
            bands: DEFAULT_BANDS.iter().map(|b| b.to_string()).collect(),
            indices: vec!["ndvi".into()],
            custom: Vec::new(),
            model: ModelSection::default(),
            lwped: LwpedSection::default(),
            wave: WaveSection::default(),
            space: SpaceSection::default(),
            fusion: FusionSection::default(),
            attn: AttnSection::default(),
            ablation: Ablation::default(),
            train: TrainConfig::default(),
            data: DataConfig::default(),
        }
    }
}

impl FromStr for Config {
    type Err = Error;

    fn from_str(text: &str) -> Result<Self> {
        Self::parse_with(text, &[])
    }
}

impl Config {
    /// Parses `text`, then applies `key=value` overrides in order.
    pub fn parse_with(text: &str, overrides: &[String]) -> Result<Self> {
        let mut table: Table = text
            .parse()
            .map_err(|e: toml::de::Error| Error::Config(e.message().to_string()))?;
        for item in overrides {
            apply_override(&mut table, item)?;
        }
        let cfg: Config = table
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>, overrides: &[String]) -> Result<Self> {
        Self::parse_with(&std::fs::read_to_string(path)?, overrides)
    }

    pub fn with_overrides(&self, overrides: &[String]) -> Result<Self> {
        Self::parse_with(&self.to_flat_string(), overrides)
    }

    /// One `section.key = value` line per setting.
    pub fn to_flat_string(&self) -> String {
        let table = Table::try_from(self).expect("config serializes to a table");
        let mut out = String::new();
        flatten(&table, "", &mut out);
        out
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_flat_string())?;
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.model_config()?;
        self.train.validate()?;
        if self.data.size < 16 || self.data.size % 2 != 0 {
            return Err(Error::Config(format!(
                "data.size must be even and at least 16, got {}",
                self.data.size
            )));
        }
        Ok(())
    }

    pub fn index_specs(&self) -> Result<Vec<IndexSpec>> {
        let mut specs = self
            .indices
            .iter()
            .map(|name| IndexSpec::named(name))
            .collect::<Result<Vec<_>>>()?;
        for c in &self.custom {
            specs.push(IndexSpec::custom(c.a.parse::<BandTag>()?, c.b.parse::<BandTag>()?));
        }
        Ok(specs)
    }

    pub fn model_config(&self) -> Result<ModelConfig> {
        let m = &self.model;
        let has = |b: Branch| m.branches.contains(&b);
        let cfg = ModelConfig {
            bands: self
                .bands
                .iter()
                .map(|b| b.parse::<BandTag>())
                .collect::<Result<Vec<_>>>()?,
            n_classes: m.n_classes,
            tile: m.tile,
            width: m.width,
            levels: self.lwped.levels,
            pad: self.lwped.pad,
            detail_skip: self.lwped.detail_skip,
            space: has(Branch::Space).then_some(SpaceEncoderConfig {
                patch: self.space.patch,
                dim: self.space.dim,
                heads: self.space.heads,
                layers: self.space.layers,
            }),
            wave: has(Branch::Wave).then_some(WaveConfig {
                blocks: self.wave.blocks,
                dim: self.wave.dim,
                phase: self.wave.phase,
            }),
            indices: if has(Branch::Index) {
                self.index_specs()?
            } else {
                Vec::new()
            },
            fusion: self.fusion.mode,
            reduction: self.attn.reduction,
            ablation: self.ablation,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

fn parse_value(raw: &str) -> Value {
    let raw = raw.trim();
    format!("v = {raw}")
        .parse::<Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| Value::String(raw.to_string()))
}

fn apply_override(table: &mut Table, item: &str) -> Result<()> {
    let (key, value) = item
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override {item:?} is not key=value")))?;
    let parts: Vec<&str> = key.trim().split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(Error::Config(format!("bad override key {key:?}")));
    }
    let (last, sections) = parts.split_last().expect("split yields at least one part");
    let mut cur = table;
    for s in sections {
        let entry = cur.entry(s.to_string()).or_insert_with(|| Value::Table(Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("{s:?} in {key:?} is not a section")))?;
    }
    cur.insert(last.to_string(), parse_value(value));
    Ok(())
}

fn flatten(table: &Table, prefix: &str, out: &mut String) {
    for (k, v) in table {
        let key = if prefix.is_empty() {
            k.clone()
        } else {
            format!("{prefix}.{k}")
        };
        match v {
            Value::Table(t) => flatten(t, &key, out),
            _ => out.push_str(&format!("{key} = {v}\n")),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct WaveConfig {
    pub blocks: usize,
    pub dim: usize,
    pub phase: PhaseMode,
}

/// Everything needed to build a model; a `None` branch is disabled.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub bands: Vec<BandTag>,
    pub n_classes: usize,
    pub tile: usize,
    pub width: usize,
    pub levels: usize,
    pub pad: PadMode,
    pub detail_skip: DetailSkip,
    pub space: Option<SpaceEncoderConfig>,
    pub wave: Option<WaveConfig>,
    pub indices: Vec<IndexSpec>,
    pub fusion: FusionMode,
    pub reduction: usize,
    pub ablation: Ablation,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Config::default()
            .model_config()
            .expect("default configuration is valid")
    }
}

impl ModelConfig {
    pub fn n_domains(&self) -> usize {
        self.space.is_some() as usize + self.wave.is_some() as usize + self.indices.len()
    }

    /// Extents of the coarsest pyramid band for a `tile`×`tile` input.
    pub fn coarse_extent(&self) -> usize {
        let mut e = self.tile;
        for _ in 0..self.levels {
            e = e.div_ceil(2);
        }
        e
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.n_domains() == 0 {
            return bad("at least one branch must be enabled (model.branches, indices)".into());
        }
        if self.bands.is_empty() {
            return bad("bands must not be empty".into());
        }
        for (i, b) in self.bands.iter().enumerate() {
            if self.bands[..i].contains(b) {
                return bad(format!("band {b} listed twice"));
            }
        }
        for spec in &self.indices {
            for tag in [spec.a, spec.b] {
                if !self.bands.contains(&tag) {
                    return bad(format!("index {spec} needs band {tag}, not among {:?}", self.bands));
                }
            }
        }
        if !(2..=256).contains(&self.n_classes) {
            return bad(format!("model.n_classes must be in 2..=256, got {}", self.n_classes));
        }
        let learned = self.space.is_some() || self.wave.is_some();
        if learned {
            if self.levels == 0 {
                return bad("lwped.levels must be at least 1".into());
            }
            if self.width == 0 || self.tile == 0 {
                return bad("model.width and model.tile must be positive".into());
            }
            if self.pad == PadMode::None && self.tile % (1 << self.levels) != 0 {
                return bad(format!(
                    "model.tile {} is not divisible by 2^{} (set lwped.pad = \"reflect\")",
                    self.tile, self.levels
                ));
            }
            if self.reduction == 0 || self.width % self.reduction != 0 {
                return bad(format!(
                    "model.width {} is not divisible by attn.reduction {}",
                    self.width, self.reduction
                ));
            }
        }
        if let Some(s) = &self.space {
            s.validate()?;
            let e = self.coarse_extent();
            if e % s.patch != 0 {
                return bad(format!(
                    "coarse grid {e}×{e} does not split into space.patch {} patches",
                    s.patch
                ));
            }
        }
        if let Some(w) = &self.wave {
            if w.dim == 0 {
                return bad("wave.dim must be positive".into());
            }
        }
        Ok(())
    }
}
