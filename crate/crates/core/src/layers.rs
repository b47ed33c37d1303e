//! Small parameterized layers shared by the branches.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{ParamId, ParamStore, Tape, Var};
use crate::element::Element;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Uniform in `±1/√fan_in`, drawn in `f64` so both precisions share values.
pub fn fan_in_uniform<T: Element>(shape: &[usize], fan_in: usize, rng: &mut ChaCha8Rng) -> Tensor<T> {
    let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
    Tensor::from_fn(shape.to_vec(), |_| T::of(rng.random_range(-bound..bound)))
}

/// Affine map `x·Wᵀ + b` with `W` stored `[out×in]`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub inputs: usize,
    pub outputs: usize,
}

impl Linear {
    pub fn new<T: Element>(
        store: &mut ParamStore<T>,
        name: &str,
        inputs: usize,
        outputs: usize,
        bias: bool,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let weight = store.add(
            format!("{name}.weight"),
            fan_in_uniform(&[outputs, inputs], inputs, rng),
        )?;
        let bias = if bias {
            Some(store.add(format!("{name}.bias"), Tensor::zeros([outputs]))?)
        } else {
            None
        };
        Ok(Self {
            weight,
            bias,
            inputs,
            outputs,
        })
    }

    pub fn zeros<T: Element>(
        store: &mut ParamStore<T>,
        name: &str,
        inputs: usize,
        outputs: usize,
        bias: bool,
    ) -> Result<Self> {
        let weight = store.add(format!("{name}.weight"), Tensor::zeros([outputs, inputs]))?;
        let bias = if bias {
            Some(store.add(format!("{name}.bias"), Tensor::zeros([outputs]))?)
        } else {
            None
        };
        Ok(Self {
            weight,
            bias,
            inputs,
            outputs,
        })
    }

    /// Rows of `x: [n×in]` → `[n×out]`.
    pub fn forward<T: Element>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let w = tape.param(store, self.weight);
        let y = tape.matmul_nt(x, w)?;
        match self.bias {
            Some(b) => {
                let b = tape.param(store, b);
                tape.add_bias(y, b)
            }
            None => Ok(y),
        }
    }

    /// Pixelwise map over the channel axis: `[in×H×W]` → `[out×H×W]`.
    pub fn forward_channels<T: Element>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        x: Var,
    ) -> Result<Var> {
        let shape = tape.shape(x).to_vec();
        if shape.first() != Some(&self.inputs) {
            return Err(Error::dims("pixelwise linear", &shape, &[self.inputs]));
        }
        let rest: Vec<usize> = shape[1..].to_vec();
        let n: usize = rest.iter().product();
        let flat = tape.reshape(x, [self.inputs, n])?;
        let w = tape.param(store, self.weight);
        let mut y = tape.matmul(w, flat)?;
        if let Some(b) = self.bias {
            let b = tape.param(store, b);
            y = tape.add_channel_bias(y, b)?;
        }
        let mut out_shape = vec![self.outputs];
        out_shape.extend(rest);
        tape.reshape(y, out_shape)
    }
}

/// Learnable scale/shift for standardization over the last axis.
#[derive(Clone, Debug)]
pub struct Norm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl Norm {
    pub const EPS: f64 = 1e-5;

    pub fn new<T: Element>(store: &mut ParamStore<T>, name: &str, dim: usize) -> Result<Self> {
        Ok(Self {
            gamma: store.add(format!("{name}.gamma"), Tensor::full([dim], T::one()))?,
            beta: store.add(format!("{name}.beta"), Tensor::zeros([dim]))?,
        })
    }

    pub fn forward<T: Element>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let g = tape.param(store, self.gamma);
        let b = tape.param(store, self.beta);
        tape.layer_norm(x, g, b, T::of(Self::EPS))
    }
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;

    use super::*;

    #[test]
    fn channel_linear_is_pixelwise() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::<f64>::new();
        let lin = Linear::new(&mut store, "l", 3, 2, true, &mut rng).unwrap();
        store.value_mut(lin.bias.unwrap()).data_mut().copy_from_slice(&[0.5, -1.0]);
        let x = Tensor::from_fn([3, 2, 2], |i| i as f64);
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let y = lin.forward_channels(&mut tape, &store, xv).unwrap();
        assert_eq!(tape.shape(y), &[2, 2, 2]);
        let w = store.value(lin.weight);
        for o in 0..2 {
            for p in 0..4 {
                let want: f64 = (0..3).map(|c| w.at(&[o, c]) * x.data()[c * 4 + p]).sum::<f64>()
                    + [0.5, -1.0][o];
                assert!((tape.value(y).data()[o * 4 + p] - want).abs() < 1e-14);
            }
        }
    }
}
