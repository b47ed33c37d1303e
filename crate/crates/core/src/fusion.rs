//! Channel gating of feature maps and the weighted vote that merges the
//! per-domain class distributions.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{ParamId, ParamStore, Tape, Var};
use crate::element::Element;
use crate::error::{Error, Result};
use crate::layers::fan_in_uniform;
use crate::raster::LabelMap;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Deserialize, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum FusionMode {
    /// Learned domain weights.
    #[default]
    Adaptive,
    /// Uniform weights over the domain distributions.
    Average,
    /// Per-pixel mode of the domain argmaxes.
    Majority,
}

/// Squeeze-and-excite gate: `x ⊙ σ(W_expand · relu(W_reduce · mean(x)))`.
#[derive(Clone, Debug)]
pub struct ChannelAttention {
    pub channels: usize,
    pub reduction: usize,
    pub reduce: ParamId,
    pub expand: ParamId,
}

impl ChannelAttention {
    pub fn new<T: Element>(
        store: &mut ParamStore<T>,
        name: &str,
        channels: usize,
        reduction: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        if reduction == 0 || channels % reduction != 0 {
            return Err(Error::contract(format!(
                "{channels} channels are not divisible by reduction {reduction}"
            )));
        }
        let hidden = channels / reduction;
        Ok(Self {
            channels,
            reduction,
            reduce: store.add(format!("{name}.reduce"), fan_in_uniform(&[hidden, channels], channels, rng))?,
            expand: store.add(format!("{name}.expand"), fan_in_uniform(&[channels, hidden], hidden, rng))?,
        })
    }

    /// Per-channel gate in `(0, 1)`, shape `[C]`.
    pub fn gate<T: Element>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let c = self.channels;
        if tape.shape(x).first() != Some(&c) {
            return Err(Error::contract(format!(
                "channel attention built for {c} channels, got {:?}",
                tape.shape(x)
            )));
        }
        let mean = channel_mean(tape, x)?;
        let mean = tape.reshape(mean, [c, 1])?;
        let reduce = tape.param(store, self.reduce);
        let hidden = tape.matmul(reduce, mean)?;
        let hidden = tape.relu(hidden);
        let expand = tape.param(store, self.expand);
        let logits = tape.matmul(expand, hidden)?;
        let gate = tape.sigmoid(logits);
        tape.reshape(gate, [c])
    }

    pub fn forward<T: Element>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let gate = self.gate(tape, store, x)?;
        tape.scale_channels(x, gate)
    }
}

/// Spatial average of each channel: `[C×H×W]` → `[C]`.
pub fn channel_mean<T: Element>(tape: &mut Tape<T>, x: Var) -> Result<Var> {
    tape.channel_mean(x)
}

pub fn channel_attend<T: Element>(
    tape: &mut Tape<T>,
    store: &ParamStore<T>,
    weights: &ChannelAttention,
    x: Var,
) -> Result<Var> {
    weights.forward(tape, store, x)
}

/// Per-domain class distributions `[K×H×W]` and the free logits of the
/// domain weights.
#[derive(Clone, Debug)]
pub struct FusionState<T> {
    pub domain_probs: Vec<Tensor<T>>,
    pub lambda_logits: Tensor<T>,
}

impl<T: Element> FusionState<T> {
    pub fn new(domain_probs: Vec<Tensor<T>>, lambda_logits: Tensor<T>) -> Result<Self> {
        let first = domain_probs
            .first()
            .ok_or_else(|| Error::contract("fusion needs at least one domain"))?;
        if first.rank() != 3 {
            return Err(Error::contract(format!(
                "domain probabilities must be [K×H×W], got {:?}",
                first.shape()
            )));
        }
        if let Some(bad) = domain_probs.iter().find(|p| p.shape() != first.shape()) {
            return Err(Error::dims("fusion", first.shape(), bad.shape()));
        }
        if lambda_logits.shape() != [domain_probs.len()] {
            return Err(Error::dims("fusion weights", lambda_logits.shape(), &[domain_probs.len()]));
        }
        Ok(Self {
            domain_probs,
            lambda_logits,
        })
    }

    /// Equal weights for every domain.
    pub fn uniform(domain_probs: Vec<Tensor<T>>) -> Result<Self> {
        let n = domain_probs.len().max(1);
        Self::new(domain_probs, Tensor::zeros([n]))
    }

    /// `softmax(lambda_logits)` in `f64`.
    pub fn weights(&self) -> Vec<f64> {
        softmax_f64(self.lambda_logits.data())
    }

    fn extents(&self) -> (usize, usize, usize) {
        let s = self.domain_probs[0].shape();
        (s[0], s[1], s[2])
    }

    fn with_logits(&self, lambda_logits: Tensor<T>) -> Self {
        Self {
            domain_probs: self.domain_probs.clone(),
            lambda_logits,
        }
    }
}

pub fn softmax_f64<T: Element>(logits: &[T]) -> Vec<f64> {
    let max = logits.iter().map(|v| v.f64()).fold(f64::NEG_INFINITY, f64::max);
    let exp: Vec<f64> = logits.iter().map(|v| (v.f64() - max).exp()).collect();
    let total: f64 = exp.iter().sum();
    exp.into_iter().map(|e| e / total).collect()
}

/// Index of the largest value; the lowest index wins ties.
pub fn argmax_lowest(values: impl IntoIterator<Item = f64>) -> usize {
    let mut best = (0, f64::NEG_INFINITY);
    for (i, v) in values.into_iter().enumerate() {
        if v > best.1 {
            best = (i, v);
        }
    }
    best.0
}

fn weighted_sum<T: Element>(state: &FusionState<T>) -> Vec<f64> {
    let lambda = state.weights();
    let mut acc = vec![0.0; state.domain_probs[0].len()];
    for (probs, &l) in state.domain_probs.iter().zip(&lambda) {
        for (a, &p) in acc.iter_mut().zip(probs.data()) {
            *a += l * p.f64();
        }
    }
    acc
}

fn argmax_classes(values: &[f64], k: usize, h: usize, w: usize) -> Result<LabelMap> {
    let n = h * w;
    let labels = (0..n)
        .map(|i| argmax_lowest((0..k).map(|c| values[c * n + i])) as u8)
        .collect();
    LabelMap::new(h, w, k, labels)
}

/// Per-pixel argmax of `Σ λ_d · probs_d`.
pub fn superpose<T: Element>(state: &FusionState<T>) -> Result<LabelMap> {
    let (k, h, w) = state.extents();
    argmax_classes(&weighted_sum(state), k, h, w)
}

/// `Σ λ_d · probs_d` itself, `[K×H×W]`.
pub fn superpose_soft<T: Element>(state: &FusionState<T>) -> Tensor<T> {
    let shape = state.domain_probs[0].shape().to_vec();
    Tensor::from_parts(shape, weighted_sum(state).into_iter().map(T::of).collect())
}

/// Differentiable [`superpose_soft`]: gradients reach every domain and the
/// weight logits.
pub fn superpose_soft_graph<T: Element>(tape: &mut Tape<T>, probs: &[Var], lambda_logits: Var) -> Result<Var> {
    if tape.shape(lambda_logits) != [probs.len()] {
        return Err(Error::dims("superpose_soft", tape.shape(lambda_logits), &[probs.len()]));
    }
    let lambda = tape.softmax(lambda_logits, 0)?;
    let mut out: Option<Var> = None;
    for (d, &p) in probs.iter().enumerate() {
        if tape.shape(p) != tape.shape(probs[0]) {
            return Err(Error::dims("superpose_soft", tape.shape(probs[0]), tape.shape(p)));
        }
        let weight = tape.gather(lambda, vec![d], Vec::<usize>::new(), "domain_weight")?;
        let term = tape.mul(p, weight)?;
        out = Some(match out {
            Some(acc) => tape.add(acc, term)?,
            None => term,
        });
    }
    out.ok_or_else(|| Error::contract("fusion needs at least one domain"))
}

/// Per-pixel mode of the domain argmaxes; the lowest class id wins ties.
pub fn vote_majority<T: Element>(state: &FusionState<T>) -> Result<LabelMap> {
    let (k, h, w) = state.extents();
    let n = h * w;
    let mut labels = Vec::with_capacity(n);
    let mut counts = vec![0usize; k];
    for i in 0..n {
        counts.fill(0);
        for probs in &state.domain_probs {
            let d = probs.data();
            counts[argmax_lowest((0..k).map(|c| d[c * n + i].f64()))] += 1;
        }
        labels.push(argmax_lowest(counts.iter().map(|&c| c as f64)) as u8);
    }
    LabelMap::new(h, w, k, labels)
}

/// [`superpose`] with every domain weighted equally.
pub fn vote_average<T: Element>(state: &FusionState<T>) -> Result<LabelMap> {
    let n = state.domain_probs.len();
    superpose(&state.with_logits(Tensor::zeros([n])))
}

/// Dispatches on the fusion mode; adaptive uses the state's weights.
pub fn fuse<T: Element>(state: &FusionState<T>, mode: FusionMode) -> Result<LabelMap> {
    match mode {
        FusionMode::Adaptive => superpose(state),
        FusionMode::Average => vote_average(state),
        FusionMode::Majority => vote_majority(state),
    }
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};

    use super::*;
    use crate::gradcheck::{check_block, GradCheckOptions};

    fn rand_probs(k: usize, h: usize, w: usize, rng: &mut ChaCha8Rng) -> Tensor<f64> {
        let n = h * w;
        let raw: Vec<f64> = (0..k * n).map(|_| rng.random_range(0.01..1.0)).collect();
        Tensor::from_fn([k, h, w], |i| {
            let px = i % n;
            raw[i] / (0..k).map(|c| raw[c * n + px]).sum::<f64>()
        })
    }

    fn one_pixel(p: &[f64]) -> Tensor<f64> {
        Tensor::from_f64([p.len(), 1, 1], p).unwrap()
    }

    #[test]
    fn channel_mean_hand_case() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::from_f64([1, 2, 2], &[1., 2., 3., 4.]).unwrap());
        let m = channel_mean(&mut tape, x).unwrap();
        assert_eq!(tape.value(m).data(), &[2.5]);
    }

    #[test]
    fn zero_gate_halves_input() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::<f64>::new();
        let ca = ChannelAttention::new(&mut store, "ca", 4, 2, &mut rng).unwrap();
        store.value_mut(ca.reduce).data_mut().fill(0.0);
        store.value_mut(ca.expand).data_mut().fill(0.0);
        let x = Tensor::from_fn([4, 3, 3], |_| rng.random_range(-1.0..1.0));
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let y = channel_attend(&mut tape, &store, &ca, xv).unwrap();
        assert_eq!(tape.value(y), &x.map(|v| 0.5 * v));
    }

    #[test]
    fn gate_is_spatially_uniform() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::<f64>::new();
        let ca = ChannelAttention::new(&mut store, "ca", 4, 2, &mut rng).unwrap();
        let x = Tensor::from_fn([4, 3, 3], |_| rng.random_range(0.5..1.0));
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let g = ca.gate(&mut tape, &store, xv).unwrap();
        assert!(tape.value(g).data().iter().all(|&v| v > 0.0 && v < 1.0));
        let y = ca.forward(&mut tape, &store, xv).unwrap();
        let y = tape.value(y);
        for c in 0..4 {
            let r0 = y.data()[c * 9] / x.data()[c * 9];
            for i in 1..9 {
                assert!((y.data()[c * 9 + i] / x.data()[c * 9 + i] - r0).abs() < 1e-12);
            }
        }
        let wrong = tape.constant(Tensor::zeros([3, 2, 2]));
        assert!(matches!(ca.forward(&mut tape, &store, wrong), Err(Error::Contract(_))));
    }

    #[test]
    fn attention_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut store = ParamStore::<f64>::new();
        let ca = ChannelAttention::new(&mut store, "ca", 4, 2, &mut rng).unwrap();
        let x = Tensor::from_fn([4, 3, 3], |_| rng.random_range(-1.0..1.0));
        let report = check_block("channel_attend", &store, &[x], GradCheckOptions::default(), |t, s, v| {
            ca.forward(t, s, v[0])
        })
        .unwrap();
        assert!(report.passes(1e-4), "{report:?}");
    }

    #[test]
    fn weighted_vote_hand_case() {
        let a = one_pixel(&[0.9, 0.1]);
        let b = one_pixel(&[0.2, 0.8]);
        // softmax(ln 0.3, ln 0.7) = (0.3, 0.7)
        let logits = Tensor::from_f64([2], &[0.3f64.ln(), 0.7f64.ln()]).unwrap();
        let state = FusionState::new(vec![a, b], logits).unwrap();
        let soft = superpose_soft(&state);
        assert!((soft.data()[0] - 0.41).abs() < 1e-12 && (soft.data()[1] - 0.59).abs() < 1e-12);
        assert_eq!(superpose(&state).unwrap().labels(), &[1]);
    }

    #[test]
    fn single_and_identical_domains() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let p = rand_probs(4, 3, 5, &mut rng);
        let solo = FusionState::new(vec![p.clone()], Tensor::from_f64([1], &[2.0]).unwrap()).unwrap();
        let own = argmax_classes(&p.data().iter().map(|v| v.f64()).collect::<Vec<_>>(), 4, 3, 5).unwrap();
        assert_eq!(superpose(&solo).unwrap(), own);

        let same = FusionState::new(vec![p.clone(), p.clone(), p], Tensor::from_f64([3], &[0.3, -2.0, 1.0]).unwrap())
            .unwrap();
        assert_eq!(superpose(&same).unwrap(), own);
        assert_eq!(vote_majority(&same).unwrap(), own);
        assert_eq!(vote_average(&same).unwrap(), own);
    }

    #[test]
    fn majority_rules() {
        let on = |c: usize| {
            let mut p = vec![0.0; 6];
            p[c] = 1.0;
            one_pixel(&p)
        };
        let three = FusionState::uniform(vec![on(2), on(2), on(5)]).unwrap();
        assert_eq!(vote_majority(&three).unwrap().labels(), &[2]);
        let two = FusionState::uniform(vec![on(3), on(1)]).unwrap();
        assert_eq!(vote_majority(&two).unwrap().labels(), &[1]);
    }

    #[test]
    fn soft_vote_with_one_hot_weights() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let a = rand_probs(3, 2, 2, &mut rng);
        let b = rand_probs(3, 2, 2, &mut rng);
        let state = FusionState::new(vec![a, b.clone()], Tensor::from_f64([2], &[-1e3, 0.0]).unwrap()).unwrap();
        assert!(superpose_soft(&state).max_abs_diff(&b).unwrap() < 1e-300);
    }

    #[test]
    fn lambda_logits_receive_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let a = rand_probs(3, 2, 2, &mut rng);
        let b = rand_probs(3, 2, 2, &mut rng);
        let mut store = ParamStore::<f64>::new();
        let lambda = store.add("lambda", Tensor::from_f64([2], &[0.2, -0.1]).unwrap()).unwrap();
        let labels = [0, 1, 2, 0];
        let mut tape = Tape::new();
        let (pa, pb) = (tape.constant(a.clone()), tape.constant(b.clone()));
        let l = tape.param(&store, lambda);
        let fused = superpose_soft_graph(&mut tape, &[pa, pb], l).unwrap();
        let loss = tape.cross_entropy(fused, &labels).unwrap();
        tape.backward(loss, &mut store).unwrap();
        assert!(store.grad(lambda).data().iter().all(|&g| g.abs() > 1e-6));

        let report = check_block("superpose_soft", &store, &[a, b], GradCheckOptions::default(), |t, s, v| {
            let l = t.param(s, lambda);
            superpose_soft_graph(t, v, l)
        })
        .unwrap();
        assert!(report.passes(1e-4), "{report:?}");
    }

    proptest! {
        #[test]
        fn fused_output_is_distribution(seed in 0u64..1000, logits in prop::collection::vec(-5.0f64..5.0, 3)) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let probs = (0..3).map(|_| rand_probs(4, 3, 3, &mut rng)).collect();
            let state = FusionState::new(probs, Tensor::from_f64([3], &logits).unwrap()).unwrap();
            let soft = superpose_soft(&state);
            for px in 0..9 {
                let s: f64 = (0..4).map(|c| soft.data()[c * 9 + px]).sum();
                prop_assert!((s - 1.0).abs() < 1e-6);
            }
            let w = state.weights();
            prop_assert!(w.iter().all(|&v| v > 0.0));
            prop_assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }

        #[test]
        fn vote_is_shift_invariant(seed in 0u64..1000, logits in prop::collection::vec(-3.0f64..3.0, 3), shift in -50.0f64..50.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let probs: Vec<_> = (0..3).map(|_| rand_probs(5, 4, 4, &mut rng)).collect();
            let a = FusionState::new(probs.clone(), Tensor::from_f64([3], &logits).unwrap()).unwrap();
            let shifted: Vec<f64> = logits.iter().map(|v| v + shift).collect();
            let b = FusionState::new(probs, Tensor::from_f64([3], &shifted).unwrap()).unwrap();
            prop_assert_eq!(superpose(&a).unwrap(), superpose(&b).unwrap());
        }
    }

    #[test]
    fn average_equals_uniform_superpose() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let probs: Vec<_> = (0..4).map(|_| rand_probs(6, 8, 8, &mut rng)).collect();
        let uniform = FusionState::new(probs.clone(), Tensor::full([4], 0.7)).unwrap();
        let skewed = FusionState::new(probs, Tensor::from_f64([4], &[3.0, 0.0, -1.0, 2.0]).unwrap()).unwrap();
        assert_eq!(vote_average(&skewed).unwrap(), superpose(&uniform).unwrap());
    }

    #[test]
    fn extent_mismatch_is_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let a = rand_probs(3, 2, 2, &mut rng);
        let b = rand_probs(3, 2, 3, &mut rng);
        assert!(matches!(FusionState::uniform(vec![a, b]), Err(Error::Dimension { .. })));
    }
}
