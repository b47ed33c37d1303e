//! Central finite-difference checks of tape gradients in 64-bit.
//!
//! A block is any closure that records a computation on a tape from a
//! parameter store and a list of inputs. The scalar probed is
//! `Σ out ⊙ R` for a fixed random `R`, so every output element contributes.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{ParamStore, Tape, Var};
use crate::config::Config;
use crate::error::Result;
use crate::fusion::{superpose_soft_graph, ChannelAttention};
use crate::index::IndexHead;
use crate::model::Model;
use crate::space::AttentionBlock;
use crate::synth::synth_dataset;
use crate::tensor::Tensor;
use crate::wave::{PhaseMode, WaveBlock};

/// Gradients smaller than this are compared absolutely.
pub const REL_FLOOR: f64 = 1e-3;

#[derive(Clone, Copy, Debug)]
pub struct GradCheckOptions {
    pub step: f64,
    /// Elements probed per tensor; larger tensors are strided.
    pub max_elements: usize,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            step: 1e-4,
            max_elements: 48,
            seed: 0x5eed,
        }
    }
}

#[derive(Clone, Debug)]
pub struct GradReport {
    pub block: String,
    pub max_rel_error: f64,
    /// Tensor and element holding the largest error.
    pub worst: String,
    pub checked: usize,
}

impl GradReport {
    pub fn passes(&self, tolerance: f64) -> bool {
        self.max_rel_error <= tolerance
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// Compares tape gradients with respect to every parameter in `store` and
/// every input against central differences.
pub fn check_block<F>(
    name: &str,
    store: &ParamStore<f64>,
    inputs: &[Tensor<f64>],
    opts: GradCheckOptions,
    block: F,
) -> Result<GradReport>
where
    F: Fn(&mut Tape<f64>, &ParamStore<f64>, &[Var]) -> Result<Var>,
{
    let shape = {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|x| tape.input(x.clone())).collect();
        let out = block(&mut tape, store, &vars)?;
        tape.shape(out).to_vec()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let weights = Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0));

    let probe = |tape: &mut Tape<f64>, out: Var| -> Result<Var> {
        let r = tape.constant(weights.clone());
        let prod = tape.mul(out, r)?;
        Ok(tape.sum(prod))
    };
    let eval = |store: &ParamStore<f64>, inputs: &[Tensor<f64>]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|x| tape.constant(x.clone())).collect();
        let out = block(&mut tape, store, &vars)?;
        let loss = probe(&mut tape, out)?;
        Ok(tape.value(loss).item())
    };

    let mut grads_store = store.clone();
    grads_store.zero_grad();
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|x| tape.input(x.clone())).collect();
    let out = block(&mut tape, &grads_store, &vars)?;
    let loss = probe(&mut tape, out)?;
    tape.backward(loss, &mut grads_store)?;
    let input_grads = tape.gradients(loss)?;

    let mut report = GradReport {
        block: name.to_string(),
        max_rel_error: 0.0,
        worst: String::new(),
        checked: 0,
    };
    let mut record = |label: String, analytic: f64, numeric: f64| {
        let err = relative_error(analytic, numeric);
        report.checked += 1;
        if err > report.max_rel_error || report.worst.is_empty() {
            report.max_rel_error = err.max(report.max_rel_error);
            report.worst = label;
        }
    };

    let h = opts.step;
    let mut probe_store = store.clone();
    for id in store.ids() {
        let len = store.value(id).len();
        for i in sample(len, opts.max_elements) {
            let orig = store.value(id).data()[i];
            probe_store.value_mut(id).data_mut()[i] = orig + h;
            let up = eval(&probe_store, inputs)?;
            probe_store.value_mut(id).data_mut()[i] = orig - h;
            let down = eval(&probe_store, inputs)?;
            probe_store.value_mut(id).data_mut()[i] = orig;
            let analytic = grads_store.grad(id).data()[i];
            record(format!("{}[{i}]", store.get(id).name), analytic, (up - down) / (2.0 * h));
        }
    }

    let mut probe_inputs = inputs.to_vec();
    for (k, var) in vars.iter().enumerate() {
        let analytic = input_grads.get(*var).cloned();
        for i in sample(inputs[k].len(), opts.max_elements) {
            let orig = inputs[k].data()[i];
            probe_inputs[k].data_mut()[i] = orig + h;
            let up = eval(store, &probe_inputs)?;
            probe_inputs[k].data_mut()[i] = orig - h;
            let down = eval(store, &probe_inputs)?;
            probe_inputs[k].data_mut()[i] = orig;
            let a = analytic.as_ref().map_or(0.0, |g| g.data()[i]);
            record(format!("input{k}[{i}]"), a, (up - down) / (2.0 * h));
        }
    }
    Ok(report)
}

fn uniform(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(shape.to_vec(), |_| rng.random_range(-1.0..1.0))
}

/// Checks every learnable block plus the full model on a 16×16 tile.
pub fn block_suite(opts: GradCheckOptions) -> Result<Vec<GradReport>> {
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut reports = Vec::new();

    let mut store = ParamStore::new();
    let block = WaveBlock::new(&mut store, "wave", 4, 3, PhaseMode::Content, &mut rng)?;
    for p in store.iter_mut().filter(|p| p.name.ends_with("phase_proj")) {
        p.value = uniform(p.value.shape(), &mut rng);
    }
    let x = uniform(&[4, 3], &mut rng);
    reports.push(check_block("wave_block", &store, &[x], opts, |t, s, v| block.forward(t, s, v[0]))?);

    let mut store = ParamStore::new();
    let block = AttentionBlock::new(&mut store, "mhsa", 8, 2, &mut rng)?;
    let x = uniform(&[4, 8], &mut rng);
    reports.push(check_block("mhsa_block", &store, &[x], opts, |t, s, v| block.forward(t, s, v[0]))?);

    let mut store = ParamStore::new();
    let attn = ChannelAttention::new(&mut store, "attn", 4, 2, &mut rng)?;
    let x = uniform(&[4, 3, 3], &mut rng);
    reports.push(check_block("channel_attend", &store, &[x], opts, |t, s, v| attn.forward(t, s, v[0]))?);

    let mut store = ParamStore::new();
    let lambda = store.add("lambda", uniform(&[3], &mut rng))?;
    let probs: Vec<Tensor<f64>> = (0..3)
        .map(|_| {
            let logits = uniform(&[3, 2, 2], &mut rng);
            let mut t = Tape::new();
            let v = t.constant(logits);
            let p = t.softmax(v, 0).expect("rank 3");
            t.value(p).clone()
        })
        .collect();
    reports.push(check_block("superpose_soft", &store, &probs, opts, |t, s, v| {
        let l = t.param(s, lambda);
        superpose_soft_graph(t, v, l)
    })?);

    let mut store = ParamStore::new();
    let head = IndexHead::new(&mut store, "index", 6, &mut rng)?;
    let x = uniform(&[1, 4, 4], &mut rng);
    reports.push(check_block("index_logits", &store, &[x], opts, |t, s, v| head.forward(t, s, v[0]))?);

    let cfg = Config::default()
        .with_overrides(&["model.tile=16".into(), "space.patch=2".into(), "model.width=8".into(), "wave.dim=8".into()])?
        .model_config()?;
    let model = Model::<f64>::build(&cfg, opts.seed)?;
    let (raster, _) = synth_dataset(opts.seed, 1, 16)?.remove(0);
    let input = model.prepare(&raster)?;
    reports.push(check_block("full_model_16x16", &model.store, &[], opts, |t, s, _| {
        Ok(model.forward_with(t, s, &input)?.fused)
    })?);
    Ok(reports)
}

fn sample(len: usize, max: usize) -> Vec<usize> {
    if len <= max {
        return (0..len).collect();
    }
    let stride = len as f64 / max as f64;
    (0..max).map(|k| (k as f64 * stride) as usize).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn catches_a_wrong_gradient() {
        let mut store = ParamStore::<f64>::new();
        let w = store.add("w", Tensor::from_f64([2, 2], &[0.3, -0.2, 0.5, 0.9]).unwrap()).unwrap();
        let x = Tensor::from_f64([2, 3], &[0.1, 0.2, -0.4, 1.0, 0.5, -0.7]).unwrap();
        let good = check_block("mm", &store, &[x.clone()], GradCheckOptions::default(), |t, s, v| {
            let wv = t.param(s, w);
            let y = t.matmul(wv, v[0])?;
            Ok(t.sigmoid(y))
        })
        .unwrap();
        assert!(good.passes(1e-6), "{good:?}");
        assert_eq!(good.checked, 10);

        // relu at its kink: the central difference sees slope 1/2.
        let kink = Tensor::from_f64([1, 2], &[0.0, 1.0]).unwrap();
        let bad = check_block("relu", &ParamStore::new(), &[kink], GradCheckOptions::default(), |t, _, v| {
            Ok(t.relu(v[0]))
        })
        .unwrap();
        assert!(!bad.passes(1e-4));
        assert_eq!(bad.worst, "input0[0]");
    }

    #[test]
    fn suite_passes() {
        for r in block_suite(GradCheckOptions::default()).unwrap() {
            assert!(r.passes(1e-4), "{r:?}");
        }
    }

    #[test]
    fn strided_sampling_stays_in_range() {
        let s = sample(1000, 48);
        assert_eq!(s.len(), 48);
        assert!(s.windows(2).all(|w| w[0] < w[1]) && *s.last().unwrap() < 1000);
    }
}
