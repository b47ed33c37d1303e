//! Band-ratio indices computed at the raster's native resolution, and the
//! learnable per-pixel projection that turns one into class logits.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::autodiff::{ParamId, ParamStore, Tape, Var};
use crate::element::Element;
use crate::error::{Error, Result};
use crate::raster::{BandTag, Raster};
use crate::tensor::Tensor;

/// Denominator guard; a pixel with `a + b == 0` maps to 0.
pub const EPSILON: f64 = 1e-8;

/// Which bands an index contrasts: `(a − b) / (a + b)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct IndexSpec {
    pub name: IndexName,
    pub a: BandTag,
    pub b: BandTag,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum IndexName {
    Ndvi,
    Ndwi,
    Custom,
}

impl IndexSpec {
    pub const NDVI: IndexSpec = IndexSpec {
        name: IndexName::Ndvi,
        a: BandTag::Nir,
        b: BandTag::Red,
    };

    pub const NDWI: IndexSpec = IndexSpec {
        name: IndexName::Ndwi,
        a: BandTag::Green,
        b: BandTag::Nir,
    };

    pub fn custom(a: BandTag, b: BandTag) -> Self {
        Self {
            name: IndexName::Custom,
            a,
            b,
        }
    }

    pub fn named(name: &str) -> Result<Self> {
        match name.trim().to_ascii_lowercase().as_str() {
            "ndvi" => Ok(Self::NDVI),
            "ndwi" => Ok(Self::NDWI),
            other => Err(Error::Config(format!(
                "unknown index {other:?}; use a custom band pair instead"
            ))),
        }
    }

    pub fn compute(&self, raster: &Raster) -> Result<IndexMap> {
        let band = |tag: BandTag| {
            raster.band(tag).ok_or_else(|| {
                Error::contract(format!("{self} needs a {tag} band, raster has {:?}", raster.bands()))
            })
        };
        let mut map = normalized_difference(&band(self.a)?, &band(self.b)?)?;
        map.spec = *self;
        Ok(map)
    }
}

impl fmt::Display for IndexSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.name {
            IndexName::Ndvi => f.write_str("ndvi"),
            IndexName::Ndwi => f.write_str("ndwi"),
            IndexName::Custom => write!(f, "nd({},{})", self.a, self.b),
        }
    }
}

/// Config entry `custom = [{a="nir", b="green"}]`.
#[derive(Clone, Debug, PartialEq, Eq, Deserialize, Serialize)]
pub struct CustomIndex {
    pub a: String,
    pub b: String,
}

/// Index values in `[−1, 1]` at the source raster's extents.
#[derive(Clone, Debug, PartialEq)]
pub struct IndexMap {
    pub spec: IndexSpec,
    pub values: Tensor<f32>,
}

impl IndexMap {
    pub fn height(&self) -> usize {
        self.values.shape()[0]
    }

    pub fn width(&self) -> usize {
        self.values.shape()[1]
    }
}

/// Pointwise `(a − b) / (a + b + ε)`, clamped to `[−1, 1]`.
pub fn normalized_difference(a: &Tensor<f32>, b: &Tensor<f32>) -> Result<IndexMap> {
    if a.shape() != b.shape() || a.rank() != 2 {
        return Err(Error::dims("normalized_difference", a.shape(), b.shape()));
    }
    if a.data().iter().chain(b.data()).any(|&v| v < 0.0) {
        return Err(Error::contract("normalized difference needs non-negative bands"));
    }
    let values = a.zip_map(b, |x, y| {
        let (x, y) = (x as f64, y as f64);
        ((x - y) / (x + y + EPSILON)).clamp(-1.0, 1.0) as f32
    })?;
    Ok(IndexMap {
        spec: IndexSpec::custom(BandTag::Other(0), BandTag::Other(1)),
        values,
    })
}

/// Per-pixel affine map from one index value to `n_classes` logits.
#[derive(Clone, Debug)]
pub struct IndexHead {
    pub weight: ParamId,
    pub bias: ParamId,
    pub n_classes: usize,
}

impl IndexHead {
    /// Fan-in uniform weight, zero bias.
    pub fn new<T: Element>(
        store: &mut ParamStore<T>,
        name: &str,
        n_classes: usize,
        rng: &mut rand_chacha::ChaCha8Rng,
    ) -> Result<Self> {
        let weight = store.add(
            format!("{name}.weight"),
            crate::layers::fan_in_uniform(&[n_classes, 1], 1, rng),
        )?;
        let bias = store.add(format!("{name}.bias"), Tensor::zeros([n_classes]))?;
        Ok(Self {
            weight,
            bias,
            n_classes,
        })
    }

    /// `[1×H×W]` index feature → `[K×H×W]` logits.
    pub fn forward<T: Element>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, index: Var) -> Result<Var> {
        index_logits(tape, store, self, index)
    }
}

pub fn index_logits<T: Element>(
    tape: &mut Tape<T>,
    store: &ParamStore<T>,
    head: &IndexHead,
    index: Var,
) -> Result<Var> {
    let shape = tape.shape(index).to_vec();
    let (h, w) = match shape.as_slice() {
        [1, h, w] => (*h, *w),
        _ => return Err(Error::contract(format!("index feature must be [1×H×W], got {shape:?}"))),
    };
    let flat = tape.reshape(index, [1, h * w])?;
    let wv = tape.param(store, head.weight);
    let bv = tape.param(store, head.bias);
    let logits = tape.matmul(wv, flat)?;
    let logits = tape.add_channel_bias(logits, bv)?;
    tape.reshape(logits, [head.n_classes, h, w])
}

/// Index map as a `[1×H×W]` tensor.
pub fn index_feature<T: Element>(map: &IndexMap) -> Tensor<T> {
    Tensor::from_parts(
        vec![1, map.height(), map.width()],
        map.values.data().iter().map(|&v| T::of(v as f64)).collect(),
    )
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;
    use rand::SeedableRng;

    use super::*;

    fn plane(v: &[f32], w: usize) -> Tensor<f32> {
        Tensor::new([v.len() / w, w], v.to_vec()).unwrap()
    }

    #[test]
    fn hand_values() {
        let eq = normalized_difference(&plane(&[0.3, 0.7], 2), &plane(&[0.3, 0.7], 2)).unwrap();
        assert_eq!(eq.values.data(), &[0.0, 0.0]);
        let third = normalized_difference(&plane(&[0.5], 1), &plane(&[0.25], 1)).unwrap();
        assert!((third.values.item() as f64 - 1.0 / 3.0).abs() < 1e-7);
        let zero = normalized_difference(&plane(&[0.0], 1), &plane(&[0.0], 1)).unwrap();
        assert_eq!(zero.values.item(), 0.0);
        assert!(normalized_difference(&plane(&[0.0, 1.0], 2), &plane(&[0.0, 1.0], 1)).is_err());
    }

    proptest! {
        #[test]
        fn bounded_and_antisymmetric(pairs in prop::collection::vec((0.0f32..=1.0, 0.0f32..=1.0), 1..64)) {
            let a: Vec<f32> = pairs.iter().map(|p| p.0).collect();
            let b: Vec<f32> = pairs.iter().map(|p| p.1).collect();
            let n = a.len();
            let ab = normalized_difference(&plane(&a, n), &plane(&b, n)).unwrap();
            let ba = normalized_difference(&plane(&b, n), &plane(&a, n)).unwrap();
            for (x, y) in ab.values.data().iter().zip(ba.values.data()) {
                prop_assert!(x.abs() <= 1.0);
                prop_assert_eq!(*x, -*y);
            }
        }
    }

    #[test]
    fn ndvi_needs_nir_and_red() {
        let r = Raster::new(1, 1, vec![BandTag::Green, BandTag::Blue], vec![0.1, 0.2]).unwrap();
        assert!(matches!(IndexSpec::NDVI.compute(&r), Err(Error::Contract(_))));
    }

    #[test]
    fn zero_projection_gives_uniform_distribution() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        let head = IndexHead::new(&mut store, "idx", 6, &mut rng).unwrap();
        store.value_mut(head.weight).data_mut().fill(0.0);
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::from_fn([1, 3, 5], |i| i as f64 / 15.0));
        let logits = head.forward(&mut tape, &store, x).unwrap();
        assert_eq!(tape.shape(logits), &[6, 3, 5]);
        let p = tape.softmax(logits, 0).unwrap();
        assert!(tape.value(p).data().iter().all(|&v| (v - 1.0 / 6.0).abs() < 1e-15));
    }

    /// Two classes with logits `[0, w·x + b]`: the decision flips at `x = −b/w`.
    #[test]
    fn decision_threshold() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        let head = IndexHead::new(&mut store, "idx", 2, &mut rng).unwrap();
        store.value_mut(head.weight).data_mut().copy_from_slice(&[0.0, 4.0]);
        store.value_mut(head.bias).data_mut().copy_from_slice(&[0.0, -1.2]);
        let threshold = 1.2 / 4.0;
        let xs: Vec<f64> = (0..20).map(|i| -0.95 + i as f64 * 0.1).collect();
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::from_f64([1, 1, xs.len()], &xs).unwrap());
        let logits = head.forward(&mut tape, &store, x).unwrap();
        let v = tape.value(logits).data();
        for (i, &ndvi) in xs.iter().enumerate() {
            let veg = v[xs.len() + i] > v[i];
            assert_eq!(veg, ndvi > threshold, "ndvi {ndvi}");
        }
    }
}
