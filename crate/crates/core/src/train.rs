//! Mini-batch training with AdamW and polynomial learning-rate decay.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{ParamStore, Tape, Var};
use crate::config::TrainConfig;
use crate::element::Element;
use crate::error::{Error, Result};
use crate::model::{ForwardPass, Model, ModelInput};
use crate::raster::LabelMap;
use crate::synth::Sample;
use crate::tensor::Tensor;

/// `base · (1 − step/steps)^power`.
pub fn poly_lr(base: f64, step: usize, steps: usize, power: f64) -> f64 {
    if steps == 0 {
        return base;
    }
    base * (1.0 - step as f64 / steps as f64).max(0.0).powf(power)
}

/// Adam with decoupled weight decay. Moments are kept in `f64`.
#[derive(Clone, Debug)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    step: i32,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamW {
    pub fn new<T: Element>(store: &ParamStore<T>, weight_decay: f64) -> Self {
        let zeros: Vec<Vec<f64>> = store.iter().map(|p| vec![0.0; p.value.len()]).collect();
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn update<T: Element>(&mut self, store: &mut ParamStore<T>, lr: f64) {
        self.step += 1;
        let c1 = 1.0 - self.beta1.powi(self.step);
        let c2 = 1.0 - self.beta2.powi(self.step);
        for ((p, m), v) in store.iter_mut().zip(&mut self.m).zip(&mut self.v) {
            let grad = p.grad.data();
            for (i, w) in p.value.data_mut().iter_mut().enumerate() {
                let g = grad[i].f64();
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g * g;
                let step = (m[i] / c1) / ((v[i] / c2).sqrt() + self.eps);
                let x = w.f64();
                *w = T::of(x - lr * (step + self.weight_decay * x));
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainReport {
    /// Mean batch loss per step.
    pub losses: Vec<f64>,
    /// Domain weights after training.
    pub lambda: Vec<f64>,
}

/// Cross-entropy of the fused distribution plus `aux_weight` times each
/// domain's own cross-entropy.
pub fn training_loss<T: Element>(
    tape: &mut Tape<T>,
    pass: &ForwardPass,
    labels: &[usize],
    aux_weight: f64,
) -> Result<Var> {
    let mut loss = tape.cross_entropy(pass.fused, labels)?;
    if aux_weight > 0.0 {
        for d in &pass.domains {
            let aux = tape.cross_entropy(d.probs, labels)?;
            let aux = tape.scale(aux, T::of(aux_weight));
            loss = tape.add(loss, aux)?;
        }
    }
    Ok(loss)
}

struct Prepared<T> {
    input: ModelInput<T>,
    labels: Vec<usize>,
}

fn check_labels(labels: &LabelMap, n_classes: usize) -> Result<()> {
    if labels.n_classes() > n_classes {
        return Err(Error::contract(format!(
            "labels use {} classes, model has {n_classes}",
            labels.n_classes()
        )));
    }
    Ok(())
}

/// Trains `model` in place. Zero steps leave it untouched.
pub fn train<T: Element>(model: &mut Model<T>, data: &[Sample], cfg: &TrainConfig) -> Result<TrainReport> {
    train_with_progress(model, data, cfg, |_, _| {})
}

/// [`train`] calling `progress(step, loss)` after every step.
pub fn train_with_progress<T: Element>(
    model: &mut Model<T>,
    data: &[Sample],
    cfg: &TrainConfig,
    mut progress: impl FnMut(usize, f64),
) -> Result<TrainReport> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::contract("training needs at least one sample"));
    }
    let prepared = data
        .iter()
        .map(|(raster, labels)| {
            check_labels(labels, model.config.n_classes)?;
            Ok(Prepared {
                input: model.prepare(raster)?,
                labels: labels.as_indices(),
            })
        })
        .collect::<Result<Vec<_>>>()?;

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = Vec::new();
    let mut opt = AdamW::new(&model.store, cfg.weight_decay);
    let mut losses = Vec::with_capacity(cfg.steps);
    let scale = T::of(1.0 / cfg.batch as f64);

    for step in 0..cfg.steps {
        model.store.zero_grad();
        let mut total = 0.0;
        for _ in 0..cfg.batch {
            if order.is_empty() {
                order = (0..prepared.len()).collect();
                order.shuffle(&mut rng);
            }
            let sample = &prepared[order.pop().expect("refilled above")];
            let mut tape = Tape::new();
            let pass = model.forward(&mut tape, &sample.input)?;
            let loss = training_loss(&mut tape, &pass, &sample.labels, cfg.aux_weight)?;
            let value = tape.value(loss).item().f64();
            if !value.is_finite() {
                let parts: Vec<String> = pass
                    .domains
                    .iter()
                    .map(|d| format!("{}: finite probabilities {}", d.kind, tape.value(d.probs).all_finite()))
                    .collect();
                return Err(Error::NonFiniteLoss {
                    step,
                    detail: format!("loss {value}; {}", parts.join(", ")),
                });
            }
            total += value;
            let scaled = tape.scale(loss, scale);
            tape.backward(scaled, &mut model.store)?;
        }
        let lr = poly_lr(cfg.lr, step, cfg.steps, cfg.poly_power);
        opt.update(&mut model.store, lr);
        let mean = total / cfg.batch as f64;
        losses.push(mean);
        progress(step, mean);
    }
    Ok(TrainReport {
        losses,
        lambda: model.lambda_weights(),
    })
}

/// Fused-output loss on every sample, without updating anything.
pub fn mean_loss<T: Element>(model: &Model<T>, data: &[Sample], aux_weight: f64) -> Result<f64> {
    let mut total = 0.0;
    for (raster, labels) in data {
        let mut tape = Tape::new();
        let pass = model.forward(&mut tape, &model.prepare(raster)?)?;
        let loss = training_loss(&mut tape, &pass, &labels.as_indices(), aux_weight)?;
        total += tape.value(loss).item().f64();
    }
    Ok(total / data.len().max(1) as f64)
}

/// Replaces every parameter with NaN; used to exercise the loss guard.
pub fn poison<T: Element>(store: &mut ParamStore<T>) {
    for p in store.iter_mut() {
        p.value = Tensor::full(p.value.shape().to_vec(), T::nan());
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::write_checkpoint;
    use crate::config::{Config, ModelConfig};
    use crate::synth::synth_dataset;

    fn small_cfg(extra: &[&str]) -> ModelConfig {
        let mut o = vec!["model.tile=16".to_string(), "space.patch=2".to_string(), "wave.dim=8".to_string()];
        o.extend(extra.iter().map(|s| s.to_string()));
        Config::default().with_overrides(&o).unwrap().model_config().unwrap()
    }

    fn tcfg(steps: usize, batch: usize) -> TrainConfig {
        TrainConfig {
            steps,
            batch,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn poly_schedule() {
        assert_eq!(poly_lr(1e-3, 0, 100, 0.9), 1e-3);
        assert_eq!(poly_lr(1e-3, 100, 100, 0.9), 0.0);
        assert!((poly_lr(1.0, 50, 100, 1.0) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn adamw_first_step_moves_by_lr() {
        let mut store = ParamStore::<f64>::new();
        let id = store.add("w", Tensor::from_f64([2], &[1.0, -1.0]).unwrap()).unwrap();
        store.get_mut(id).grad = Tensor::from_f64([2], &[0.5, -2.0]).unwrap();
        let mut opt = AdamW::new(&store, 0.0);
        opt.update(&mut store, 0.1);
        let v = store.value(id).data();
        assert!((v[0] - 0.9).abs() < 1e-6 && (v[1] + 0.9).abs() < 1e-6);

        // decay alone shrinks towards zero by lr·wd
        let mut opt = AdamW::new(&store, 0.5);
        store.get_mut(id).grad = Tensor::zeros([2]);
        let before = store.value(id).clone();
        opt.update(&mut store, 0.1);
        assert!((store.value(id).data()[0] - before.data()[0] * 0.95).abs() < 1e-12);
    }

    #[test]
    fn zero_steps_leave_model_unchanged() {
        let c = small_cfg(&[]);
        let mut model = Model::<f32>::build(&c, 1).unwrap();
        let before = model.store.clone();
        let data = synth_dataset(0, 2, 16).unwrap();
        let report = train(&mut model, &data, &tcfg(0, 2)).unwrap();
        assert!(report.losses.is_empty());
        let (mut a, mut b) = (Vec::new(), Vec::new());
        write_checkpoint(&before, &mut a).unwrap();
        write_checkpoint(&model.store, &mut b).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn loss_decreases_over_first_steps() {
        let c = small_cfg(&[]);
        let mut model = Model::<f64>::build(&c, 2).unwrap();
        let data = synth_dataset(3, 4, 16).unwrap();
        let report = train(&mut model, &data, &tcfg(10, 4)).unwrap();
        assert!(report.losses.windows(2).all(|w| w[1] < w[0]), "{:?}", report.losses);
    }

    #[test]
    fn nan_loss_names_the_step() {
        let c = small_cfg(&[]);
        let mut model = Model::<f64>::build(&c, 2).unwrap();
        poison(&mut model.store);
        let data = synth_dataset(3, 1, 16).unwrap();
        match train(&mut model, &data, &tcfg(3, 1)) {
            Err(Error::NonFiniteLoss { step, .. }) => assert_eq!(step, 0),
            other => panic!("expected a non-finite loss error, got {other:?}"),
        }
    }

    #[test]
    fn fixed_seed_reproduces_final_loss() {
        let c = small_cfg(&[]);
        let data = synth_dataset(4, 3, 16).unwrap();
        let run = || {
            let mut model = Model::<f64>::build(&c, 9).unwrap();
            train(&mut model, &data, &tcfg(5, 2)).unwrap()
        };
        let (a, b) = (run(), run());
        assert!((a.losses[4] - b.losses[4]).abs() <= 1e-6);
        assert_eq!(a, b);
    }

    /// An index computed from one band against itself is constant, so its
    /// domain cannot help and its weight should fall.
    #[test]
    fn weight_moves_away_from_uninformative_domain() {
        let c = small_cfg(&["model.branches=[\"index\"]", "custom=[{a=\"blue\", b=\"blue\"}]"]);
        let mut model = Model::<f64>::build(&c, 0).unwrap();
        let data = synth_dataset(5, 4, 16).unwrap();
        let report = train(
            &mut model,
            &data,
            &TrainConfig {
                steps: 150,
                batch: 4,
                lr: 1e-2,
                ..TrainConfig::default()
            },
        )
        .unwrap();
        assert!(report.lambda[0] > 0.55, "{:?}", report.lambda);
    }
}
