//! End-to-end wiring of the domains and the fusion head.
//!
//! ```text
//! raster ─┬─ index maps (full res) ─ gate ─ affine head ─ softmax ──────┐
//!         └─ stem ─ pyramid ─ ll ─┬─ space encoder ─┐                   ├─ weighted vote
//!                                 └─ wave blocks ───┴─ ll + Δ ─ decode ─ gate ─ head ─ softmax
//! ```
//!
//! Each learned domain adds its output to the coarsest low-pass band and is
//! restored to full resolution with the stored detail bands, or by
//! nearest-neighbour upsampling when the inverse pyramid is switched off.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{ParamId, ParamStore, Tape, Var};
use crate::config::{DetailSkip, ModelConfig};
use crate::element::Element;
use crate::error::{Error, Result};
use crate::fusion::{fuse, superpose_soft_graph, ChannelAttention, FusionMode, FusionState};
use crate::index::{index_feature, IndexHead, IndexSpec};
use crate::layers::Linear;
use crate::metrics::{evaluate_maps, MetricsReport};
use crate::raster::{tile_origins, LabelMap, Raster, TileSpec};
use crate::space::SpaceBranch;
use crate::tensor::Tensor;
use crate::wave::WaveBranch;
use crate::wavelet::{crop_index, decode_pyramid_graph, encode_pyramid_graph, WaveletPyramid};

/// Reflectances are shifted and scaled by these before the stem.
pub const INPUT_CENTER: f64 = 0.5;
pub const INPUT_GAIN: f64 = 4.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DomainKind {
    Space,
    Wave,
    Index(IndexSpec),
}

impl std::fmt::Display for DomainKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            DomainKind::Space => f.write_str("space"),
            DomainKind::Wave => f.write_str("wave"),
            DomainKind::Index(spec) => write!(f, "index:{spec}"),
        }
    }
}

#[derive(Clone, Debug)]
enum Encoder {
    Space(SpaceBranch),
    Wave(WaveBranch),
}

#[derive(Clone, Debug)]
struct LearnedDomain {
    kind: DomainKind,
    encoder: Encoder,
    /// Per pyramid level, finest first; empty for identity skips.
    detail_maps: Vec<Linear>,
    attention: Option<ChannelAttention>,
    head: Linear,
}

#[derive(Clone, Debug)]
struct IndexDomain {
    spec: IndexSpec,
    attention: Option<ChannelAttention>,
    head: IndexHead,
}

/// Tensors fed to the model for one tile.
#[derive(Clone, Debug)]
pub struct ModelInput<T> {
    /// `[C×H×W]` bands in the model's order.
    pub image: Tensor<T>,
    /// One `[1×H×W]` map per configured index.
    pub indices: Vec<Tensor<T>>,
}

impl<T: Element> ModelInput<T> {
    pub fn extents(&self) -> (usize, usize) {
        (self.image.shape()[1], self.image.shape()[2])
    }
}

#[derive(Clone, Debug)]
pub struct DomainOutput {
    pub kind: DomainKind,
    /// Coarse-grid features before resolution is restored.
    pub coarse: Option<Var>,
    pub logits: Var,
    pub probs: Var,
}

#[derive(Clone, Debug)]
pub struct ForwardPass {
    pub domains: Vec<DomainOutput>,
    /// Fused class distribution, `[K×H×W]`.
    pub fused: Var,
    /// Domain weight logits as used by the fusion.
    pub lambda: Var,
}

#[derive(Clone, Debug)]
pub struct Model<T> {
    pub config: ModelConfig,
    pub store: ParamStore<T>,
    stem: Option<Linear>,
    learned: Vec<LearnedDomain>,
    indexed: Vec<IndexDomain>,
    lambda: ParamId,
}

impl<T: Element> Model<T> {
    pub fn build(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let width = config.width;
        let has_learned = config.space.is_some() || config.wave.is_some();
        let stem = if has_learned {
            Some(Linear::new(&mut store, "stem", config.bands.len(), width, true, &mut rng)?)
        } else {
            None
        };
        let coarse = config.coarse_extent();

        let mut learned = Vec::new();
        let mut add_learned = |store: &mut ParamStore<T>,
                               rng: &mut ChaCha8Rng,
                               kind: DomainKind,
                               encoder: Encoder|
         -> Result<()> {
            let name = kind.to_string();
            let detail_maps = if config.detail_skip == DetailSkip::Learned && config.ablation.inverse_wave_block {
                (0..config.levels)
                    .map(|l| {
                        let map = Linear::zeros(store, &format!("{name}.detail{l}"), width, width, false)?;
                        *store.value_mut(map.weight) = Tensor::eye(width);
                        Ok(map)
                    })
                    .collect::<Result<Vec<_>>>()?
            } else {
                Vec::new()
            };
            let attention = if config.ablation.channel_attention {
                Some(ChannelAttention::new(store, &format!("{name}.attn"), width, config.reduction, rng)?)
            } else {
                None
            };
            let head = Linear::new(store, &format!("{name}.head"), width, config.n_classes, true, rng)?;
            learned.push(LearnedDomain {
                kind,
                encoder,
                detail_maps,
                attention,
                head,
            });
            Ok(())
        };
        if let Some(space) = config.space {
            let enc = SpaceBranch::new(&mut store, "space", width, (coarse, coarse), space, &mut rng)?;
            add_learned(&mut store, &mut rng, DomainKind::Space, Encoder::Space(enc))?;
        }
        if let Some(wave) = config.wave {
            let enc = WaveBranch::new(
                &mut store,
                "wave",
                width,
                (coarse, coarse),
                wave.dim,
                wave.blocks,
                wave.phase,
                &mut rng,
            )?;
            add_learned(&mut store, &mut rng, DomainKind::Wave, Encoder::Wave(enc))?;
        }

        let mut indexed = Vec::new();
        for (i, &spec) in config.indices.iter().enumerate() {
            let name = format!("index{i}");
            let attention = if config.ablation.channel_attention {
                Some(ChannelAttention::new(&mut store, &format!("{name}.attn"), 1, 1, &mut rng)?)
            } else {
                None
            };
            let head = IndexHead::new(&mut store, &format!("{name}.head"), config.n_classes, &mut rng)?;
            indexed.push(IndexDomain { spec, attention, head });
        }
        let lambda = store.add("fusion.lambda", Tensor::zeros([config.n_domains()]))?;
        Ok(Self {
            config: config.clone(),
            store,
            stem,
            learned,
            indexed,
            lambda,
        })
    }

    pub fn domain_kinds(&self) -> Vec<DomainKind> {
        self.learned
            .iter()
            .map(|d| d.kind)
            .chain(self.indexed.iter().map(|d| DomainKind::Index(d.spec)))
            .collect()
    }

    pub fn lambda_id(&self) -> ParamId {
        self.lambda
    }

    /// Current domain weights, `softmax` of the stored logits.
    pub fn lambda_weights(&self) -> Vec<f64> {
        crate::fusion::softmax_f64(self.store.value(self.lambda).data())
    }

    /// Same model with parameters converted to `U`.
    pub fn cast<U: Element>(&self) -> Model<U> {
        Model {
            config: self.config.clone(),
            store: self.store.cast(),
            stem: self.stem.clone(),
            learned: self.learned.clone(),
            indexed: self.indexed.clone(),
            lambda: self.lambda,
        }
    }

    /// Reorders bands and computes the configured indices.
    pub fn prepare(&self, raster: &Raster) -> Result<ModelInput<T>> {
        let mut reordered = Vec::with_capacity(raster.height() * raster.width() * self.config.bands.len());
        let picks = self
            .config
            .bands
            .iter()
            .map(|&tag| {
                raster.band_index(tag).ok_or_else(|| {
                    Error::contract(format!("model needs band {tag}, raster has {:?}", raster.bands()))
                })
            })
            .collect::<Result<Vec<_>>>()?;
        for px in raster.data().chunks(raster.channels()) {
            reordered.extend(picks.iter().map(|&b| px[b]));
        }
        let image = Raster::new(raster.height(), raster.width(), self.config.bands.clone(), reordered)?.to_chw();
        let indices = self
            .indexed
            .iter()
            .map(|d| Ok(index_feature(&d.spec.compute(raster)?)))
            .collect::<Result<Vec<_>>>()?;
        Ok(ModelInput { image, indices })
    }

    pub fn forward(&self, tape: &mut Tape<T>, input: &ModelInput<T>) -> Result<ForwardPass> {
        self.forward_with(tape, &self.store, input)
    }

    /// Forward pass reading parameters from `store`, which must have been
    /// built alongside this model.
    pub fn forward_with(&self, tape: &mut Tape<T>, store: &ParamStore<T>, input: &ModelInput<T>) -> Result<ForwardPass> {
        let (h, w) = input.extents();
        let cfg = &self.config;
        if !self.learned.is_empty() && (h, w) != (cfg.tile, cfg.tile) {
            return Err(Error::contract(format!(
                "model is built for {0}×{0} tiles, got {h}×{w}",
                cfg.tile
            )));
        }
        if input.indices.len() != self.indexed.len() {
            return Err(Error::contract(format!(
                "expected {} index maps, got {}",
                self.indexed.len(),
                input.indices.len()
            )));
        }
        let mut domains = Vec::new();

        if let Some(stem) = &self.stem {
            let image = tape.constant(input.image.map(|v| (v - T::of(INPUT_CENTER)) * T::of(INPUT_GAIN)));
            let features = stem.forward_channels(tape, store, image)?;
            let pyramid = encode_pyramid_graph(tape, features, cfg.levels, cfg.pad)?;
            let ll = pyramid.coarsest().ll;
            for d in &self.learned {
                let delta = match &d.encoder {
                    Encoder::Space(b) => b.forward(tape, store, ll)?,
                    Encoder::Wave(b) => b.forward(tape, store, ll)?,
                };
                let coarse = tape.add(ll, delta)?;
                let full = self.restore(tape, store, d, &pyramid, coarse)?;
                let gated = match &d.attention {
                    Some(a) => a.forward(tape, store, full)?,
                    None => full,
                };
                let logits = d.head.forward_channels(tape, store, gated)?;
                let probs = tape.softmax(logits, 0)?;
                domains.push(DomainOutput {
                    kind: d.kind,
                    coarse: Some(coarse),
                    logits,
                    probs,
                });
            }
        }

        for (d, map) in self.indexed.iter().zip(&input.indices) {
            if map.shape() != [1, h, w] {
                return Err(Error::dims("index map", map.shape(), &[1, h, w]));
            }
            let x = tape.constant(map.clone());
            let gated = match &d.attention {
                Some(a) => a.forward(tape, store, x)?,
                None => x,
            };
            let logits = d.head.forward(tape, store, gated)?;
            let probs = tape.softmax(logits, 0)?;
            domains.push(DomainOutput {
                kind: DomainKind::Index(d.spec),
                coarse: None,
                logits,
                probs,
            });
        }

        let lambda = match cfg.fusion {
            FusionMode::Adaptive => tape.param(store, self.lambda),
            FusionMode::Average | FusionMode::Majority => tape.constant(Tensor::zeros([domains.len()])),
        };
        let probs: Vec<Var> = domains.iter().map(|d| d.probs).collect();
        let fused = superpose_soft_graph(tape, &probs, lambda)?;
        Ok(ForwardPass { domains, fused, lambda })
    }

    fn restore(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        d: &LearnedDomain,
        pyramid: &WaveletPyramid<Var>,
        coarse: Var,
    ) -> Result<Var> {
        let cfg = &self.config;
        if cfg.ablation.inverse_wave_block {
            return decode_pyramid_graph(tape, pyramid, coarse, |tape, level, band| match d.detail_maps.get(level) {
                Some(map) => map.forward_channels(tape, store, band),
                None => Ok(band),
            });
        }
        // A band at depth L carries 2^L times the image scale.
        let factor = 1usize << cfg.levels;
        let up = tape.upsample_nearest(coarse, factor, T::of(1.0 / factor as f64))?;
        let shape = tape.shape(up).to_vec();
        let (h, w) = pyramid.original_extents;
        if (shape[1], shape[2]) == (h, w) {
            Ok(up)
        } else {
            tape.gather(up, crop_index(shape[0], (shape[1], shape[2]), (h, w)), [shape[0], h, w], "crop")
        }
    }

    fn fusion_state(&self, tape: &Tape<T>, pass: &ForwardPass) -> Result<FusionState<T>> {
        FusionState::new(
            pass.domains.iter().map(|d| tape.value(d.probs).clone()).collect(),
            tape.value(pass.lambda).clone(),
        )
    }

    /// Label map for one tile, fused according to the configured mode.
    pub fn predict(&self, input: &ModelInput<T>) -> Result<LabelMap> {
        let mut tape = Tape::new();
        let pass = self.forward(&mut tape, input)?;
        fuse(&self.fusion_state(&tape, &pass)?, self.config.fusion)
    }

    /// Argmax of a single domain's distribution.
    pub fn predict_domain(&self, input: &ModelInput<T>, domain: usize) -> Result<LabelMap> {
        let mut tape = Tape::new();
        let pass = self.forward(&mut tape, input)?;
        let d = pass
            .domains
            .get(domain)
            .ok_or_else(|| Error::contract(format!("model has no domain {domain}")))?;
        let probs = tape.value(d.probs).clone();
        crate::fusion::superpose(&FusionState::uniform(vec![probs])?)
    }

    /// Sliding-window prediction over a raster of any size at least one
    /// tile. Overlapping windows average their per-domain distributions
    /// before fusion.
    pub fn predict_raster(&self, raster: &Raster, stride: usize) -> Result<LabelMap> {
        let tile = self.config.tile;
        let (h, w) = (raster.height(), raster.width());
        if self.learned.is_empty() {
            return self.predict(&self.prepare(raster)?);
        }
        let spec = TileSpec::new(tile, stride)?;
        if h < tile || w < tile {
            return Err(Error::contract(format!("raster {h}×{w} is smaller than the {tile}×{tile} window")));
        }
        let k = self.config.n_classes;
        let n_domains = self.config.n_domains();
        let mut sums = vec![vec![0.0f64; k * h * w]; n_domains];
        let mut hits = vec![0u32; h * w];
        let mut lambda = None;
        for (r0, c0) in tile_origins(h, w, spec)? {
            let input = self.prepare(&raster.crop(r0, c0, tile, tile)?)?;
            let mut tape = Tape::new();
            let pass = self.forward(&mut tape, &input)?;
            for (acc, d) in sums.iter_mut().zip(&pass.domains) {
                let p = tape.value(d.probs).data();
                for c in 0..k {
                    for r in 0..tile {
                        for col in 0..tile {
                            acc[(c * h + r0 + r) * w + c0 + col] += p[(c * tile + r) * tile + col].f64();
                        }
                    }
                }
            }
            for r in 0..tile {
                for col in 0..tile {
                    hits[(r0 + r) * w + c0 + col] += 1;
                }
            }
            lambda.get_or_insert_with(|| tape.value(pass.lambda).clone());
        }
        let probs = sums
            .into_iter()
            .map(|acc| {
                Tensor::from_fn([k, h, w], |i| T::of(acc[i] / hits[i % (h * w)] as f64))
            })
            .collect();
        let state = FusionState::new(probs, lambda.expect("at least one window"))?;
        fuse(&state, self.config.fusion)
    }

    pub fn evaluate(&self, data: &[(Raster, LabelMap)]) -> Result<MetricsReport> {
        let stride = (self.config.tile / 2).max(1);
        let preds = data
            .iter()
            .map(|(r, _)| self.predict_raster(r, stride))
            .collect::<Result<Vec<_>>>()?;
        evaluate_maps(preds.iter().zip(data.iter().map(|(_, l)| l)), self.config.n_classes)
    }

    /// Overall accuracy of one domain's own argmax on tile-sized samples.
    pub fn domain_accuracy(&self, data: &[(Raster, LabelMap)], domain: usize) -> Result<f64> {
        let preds = data
            .iter()
            .map(|(r, _)| self.predict_domain(&self.prepare(r)?, domain))
            .collect::<Result<Vec<_>>>()?;
        Ok(evaluate_maps(preds.iter().zip(data.iter().map(|(_, l)| l)), self.config.n_classes)?.oa)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::{Ablation, Config};
    use crate::synth::synth_dataset;

    fn cfg(overrides: &[&str]) -> ModelConfig {
        let o: Vec<String> = overrides.iter().map(|s| s.to_string()).collect();
        Config::default().with_overrides(&o).unwrap().model_config().unwrap()
    }

    #[test]
    fn default_model_shapes() {
        let model = Model::<f64>::build(&ModelConfig::default(), 0).unwrap();
        let (raster, _) = synth_dataset(0, 1, 32).unwrap().remove(0);
        let input = model.prepare(&raster).unwrap();
        let mut tape = Tape::new();
        let pass = model.forward(&mut tape, &input).unwrap();
        assert_eq!(pass.domains.len(), 3);
        for d in &pass.domains {
            assert_eq!(tape.shape(d.probs), &[6, 32, 32]);
        }
        assert_eq!(tape.shape(pass.fused), &[6, 32, 32]);
        let fused = tape.value(pass.fused);
        for px in 0..1024 {
            let s: f64 = (0..6).map(|c| fused.data()[c * 1024 + px]).sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
        assert_eq!(model.lambda_weights(), vec![1.0 / 3.0; 3]);
    }

    #[test]
    fn index_only_model() {
        let c = cfg(&["model.branches=[\"index\"]"]);
        let model = Model::<f64>::build(&c, 0).unwrap();
        assert_eq!(model.domain_kinds(), vec![DomainKind::Index(IndexSpec::NDVI)]);
        let (raster, _) = synth_dataset(0, 1, 16).unwrap().remove(0);
        let input = model.prepare(&raster).unwrap();
        let mut tape = Tape::new();
        let pass = model.forward(&mut tape, &input).unwrap();
        assert_eq!(tape.shape(pass.fused), &[6, 16, 16]);
        // single domain with unit weight
        assert_eq!(tape.value(pass.fused), tape.value(pass.domains[0].probs));
        let ops = tape.trace();
        assert!(!ops.contains(&"dwt2") && !ops.contains(&"idwt2"));
    }

    #[test]
    fn upsampling_switch_only_changes_restoration() {
        let with = cfg(&[]);
        let without = ModelConfig {
            ablation: Ablation {
                inverse_wave_block: false,
                ..with.ablation
            },
            ..with.clone()
        };
        let a = Model::<f64>::build(&with, 3).unwrap();
        let b = Model::<f64>::build(&without, 3).unwrap();
        assert_eq!(
            a.store.iter().map(|p| &p.value).collect::<Vec<_>>(),
            b.store.iter().map(|p| &p.value).collect::<Vec<_>>()
        );
        let (raster, _) = synth_dataset(1, 1, 32).unwrap().remove(0);
        let input = a.prepare(&raster).unwrap();
        let (mut ta, mut tb) = (Tape::new(), Tape::new());
        let pa = a.forward(&mut ta, &input).unwrap();
        let pb = b.forward(&mut tb, &input).unwrap();
        let strip = |t: &Tape<f64>, drop: &[&str]| -> Vec<&'static str> {
            t.trace().into_iter().filter(|op| !drop.contains(op)).collect()
        };
        assert_eq!(strip(&ta, &["idwt2"]), strip(&tb, &["upsample_nearest"]));
        assert!(ta.trace().contains(&"idwt2") && !tb.trace().contains(&"idwt2"));
        for (da, db) in pa.domains.iter().zip(&pb.domains) {
            if let (Some(ca), Some(cb)) = (da.coarse, db.coarse) {
                assert_eq!(ta.value(ca), tb.value(cb));
            }
        }
    }

    #[test]
    fn nearest_path_equals_decode_without_details() {
        // Zeroing every detail band makes the inverse pyramid a scaled
        // nearest-neighbour upsampler.
        let c = cfg(&["lwped.detail_skip=learned", "model.branches=[\"wave\"]", "indices=[]"]);
        let mut model = Model::<f64>::build(&c, 5).unwrap();
        for p in model.store.iter_mut() {
            if p.name.contains(".detail") {
                p.value.data_mut().fill(0.0);
            }
        }
        let nn = Model::<f64> {
            config: ModelConfig {
                ablation: Ablation {
                    inverse_wave_block: false,
                    ..c.ablation
                },
                ..c.clone()
            },
            ..model.clone()
        };
        let (raster, _) = synth_dataset(2, 1, 32).unwrap().remove(0);
        let input = model.prepare(&raster).unwrap();
        let (mut ta, mut tb) = (Tape::new(), Tape::new());
        let pa = model.forward(&mut ta, &input).unwrap();
        let pb = nn.forward(&mut tb, &input).unwrap();
        let diff = ta.value(pa.fused).max_abs_diff(tb.value(pb.fused)).unwrap();
        assert!(diff < 1e-12, "{diff}");
    }

    #[test]
    fn rejects_wrong_tile_and_missing_bands() {
        let model = Model::<f64>::build(&ModelConfig::default(), 0).unwrap();
        let (raster, _) = synth_dataset(0, 1, 16).unwrap().remove(0);
        let input = model.prepare(&raster).unwrap();
        assert!(matches!(model.forward(&mut Tape::new(), &input), Err(Error::Contract(_))));
        let rgb = Raster::new(2, 2, vec![crate::raster::BandTag::Red], vec![0.5; 4]).unwrap();
        assert!(matches!(model.prepare(&rgb), Err(Error::Contract(_))));
    }

    #[test]
    fn sliding_window_covers_large_raster() {
        let model = Model::<f32>::build(&ModelConfig::default(), 0).unwrap();
        let (raster, _) = synth_dataset(0, 1, 48).unwrap().remove(0);
        let pred = model.predict_raster(&raster, 16).unwrap();
        assert_eq!((pred.height(), pred.width()), (48, 48));
        let one = model.predict(&model.prepare(&raster.crop(0, 0, 32, 32).unwrap()).unwrap()).unwrap();
        assert_eq!(model.predict_raster(&raster.crop(0, 0, 32, 32).unwrap(), 16).unwrap(), one);
    }
}
