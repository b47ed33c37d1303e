//! Phase-aware token mixing. Each token is read as a wave whose amplitude
//! is the magnitude of the features and whose phase is estimated from the
//! token; tokens are mixed through the real and imaginary parts separately.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{ParamId, ParamStore, Tape, Var};
use crate::element::Element;
use crate::error::{Error, Result};
use crate::layers::{fan_in_uniform, Linear, Norm};
use crate::tensor::Tensor;

/// Where token phases come from.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Deserialize, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum PhaseMode {
    /// Linear projection of each token's channels.
    #[default]
    Content,
    /// One free phase per token and channel.
    Static,
}

/// Wave form of `[n×d]` tokens.
#[derive(Clone, Copy, Debug)]
pub struct WaveToken<X = Var> {
    pub amplitude: X,
    pub phase: X,
    pub real: X,
    pub imag: X,
}

impl WaveToken<Var> {
    pub fn values<T: Element>(&self, tape: &Tape<T>) -> WaveToken<Tensor<T>> {
        WaveToken {
            amplitude: tape.value(self.amplitude).clone(),
            phase: tape.value(self.phase).clone(),
            real: tape.value(self.real).clone(),
            imag: tape.value(self.imag).clone(),
        }
    }
}

/// Splits `x` into `|x|` and the given phase, with `real = |x|·cos θ` and
/// `imag = |x|·sin θ`.
pub fn wave_from_phase<T: Element>(tape: &mut Tape<T>, x: Var, phase: Var) -> Result<WaveToken> {
    if tape.shape(x) != tape.shape(phase) {
        return Err(Error::dims("to_wave", tape.shape(x), tape.shape(phase)));
    }
    let amplitude = tape.abs(x);
    let cos = tape.cos(phase);
    let sin = tape.sin(phase);
    let real = tape.mul(amplitude, cos)?;
    let imag = tape.mul(amplitude, sin)?;
    Ok(WaveToken {
        amplitude,
        phase,
        real,
        imag,
    })
}

/// Content-dependent phase: `θ = x · Pᵀ` with `P: [d×d]`.
pub fn to_wave<T: Element>(tape: &mut Tape<T>, x: Var, phase_proj: Var) -> Result<WaveToken> {
    let phase = tape.matmul_nt(x, phase_proj)?;
    wave_from_phase(tape, x, phase)
}

/// Per-token channel map `x_j ↦ W x_j` for `x: [n×d]`, `W: [d×d]`.
pub fn channel_fc<T: Element>(tape: &mut Tape<T>, x: Var, weight: Var) -> Result<Var> {
    tape.matmul_nt(x, weight)
}

/// `u_j = Σ_k W_t[j,k]·real_k + W_i[j,k]·imag_k` with `W_t, W_i: [n×n]`.
pub fn token_mix<T: Element>(tape: &mut Tape<T>, w: &WaveToken, w_real: Var, w_imag: Var) -> Result<Var> {
    let a = tape.matmul(w_real, w.real)?;
    let b = tape.matmul(w_imag, w.imag)?;
    tape.add(a, b)
}

#[derive(Clone, Debug)]
pub enum PhaseSource {
    Content(ParamId),
    Static(ParamId),
}

/// `y = x + token_mix(wave(norm(x)))`, then `z = y + channel_fc(norm(y))`.
#[derive(Clone, Debug)]
pub struct WaveBlock {
    pub tokens: usize,
    pub dim: usize,
    pub norm_mix: Norm,
    pub phase: PhaseSource,
    pub w_real: ParamId,
    pub w_imag: ParamId,
    pub norm_channel: Norm,
    pub w_channel: ParamId,
}

impl WaveBlock {
    /// Phases start at zero, so a fresh block is a plain linear mixer.
    pub fn new<T: Element>(
        store: &mut ParamStore<T>,
        name: &str,
        tokens: usize,
        dim: usize,
        mode: PhaseMode,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let norm_mix = Norm::new(store, &format!("{name}.norm_mix"), dim)?;
        let phase = match mode {
            PhaseMode::Content => {
                PhaseSource::Content(store.add(format!("{name}.phase_proj"), Tensor::zeros([dim, dim]))?)
            }
            PhaseMode::Static => {
                PhaseSource::Static(store.add(format!("{name}.phase"), Tensor::zeros([tokens, dim]))?)
            }
        };
        let w_real = store.add(format!("{name}.w_real"), fan_in_uniform(&[tokens, tokens], tokens, rng))?;
        let w_imag = store.add(format!("{name}.w_imag"), fan_in_uniform(&[tokens, tokens], tokens, rng))?;
        let norm_channel = Norm::new(store, &format!("{name}.norm_channel"), dim)?;
        let w_channel = store.add(format!("{name}.w_channel"), fan_in_uniform(&[dim, dim], dim, rng))?;
        Ok(Self {
            tokens,
            dim,
            norm_mix,
            phase,
            w_real,
            w_imag,
            norm_channel,
            w_channel,
        })
    }

    pub fn wave<T: Element>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, x: Var) -> Result<WaveToken> {
        match self.phase {
            PhaseSource::Content(p) => {
                let p = tape.param(store, p);
                to_wave(tape, x, p)
            }
            PhaseSource::Static(p) => {
                let p = tape.param(store, p);
                wave_from_phase(tape, x, p)
            }
        }
    }

    pub fn forward<T: Element>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        if tape.shape(x) != [self.tokens, self.dim] {
            return Err(Error::dims("wave_block", tape.shape(x), &[self.tokens, self.dim]));
        }
        let normed = self.norm_mix.forward(tape, store, x)?;
        let wave = self.wave(tape, store, normed)?;
        let wt = tape.param(store, self.w_real);
        let wi = tape.param(store, self.w_imag);
        let mixed = token_mix(tape, &wave, wt, wi)?;
        let y = tape.add(x, mixed)?;
        let normed = self.norm_channel.forward(tape, store, y)?;
        let wc = tape.param(store, self.w_channel);
        let z = channel_fc(tape, normed, wc)?;
        tape.add(y, z)
    }
}

pub fn wave_block<T: Element>(tape: &mut Tape<T>, store: &ParamStore<T>, block: &WaveBlock, x: Var) -> Result<Var> {
    block.forward(tape, store, x)
}

/// Wave blocks over the pixels of a `[C×h×w]` feature map, one token per
/// pixel, projected to `dim` channels and back.
#[derive(Clone, Debug)]
pub struct WaveBranch {
    pub channels: usize,
    pub grid: (usize, usize),
    pub embed: Linear,
    pub blocks: Vec<WaveBlock>,
    pub unembed: Linear,
}

impl WaveBranch {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Element>(
        store: &mut ParamStore<T>,
        name: &str,
        channels: usize,
        grid: (usize, usize),
        dim: usize,
        depth: usize,
        mode: PhaseMode,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let tokens = grid.0 * grid.1;
        let embed = Linear::new(store, &format!("{name}.embed"), channels, dim, true, rng)?;
        let blocks = (0..depth)
            .map(|i| WaveBlock::new(store, &format!("{name}.block{i}"), tokens, dim, mode, rng))
            .collect::<Result<Vec<_>>>()?;
        let unembed = Linear::new(store, &format!("{name}.unembed"), dim, channels, true, rng)?;
        Ok(Self {
            channels,
            grid,
            embed,
            blocks,
            unembed,
        })
    }

    pub fn forward<T: Element>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let (c, (h, w)) = (self.channels, self.grid);
        if tape.shape(x) != [c, h, w] {
            return Err(Error::contract(format!(
                "wave branch built for a {c}×{h}×{w} grid, got {:?}",
                tape.shape(x)
            )));
        }
        let flat = tape.reshape(x, [c, h * w])?;
        let tokens = tape.transpose(flat)?;
        let mut t = self.embed.forward(tape, store, tokens)?;
        for block in &self.blocks {
            t = block.forward(tape, store, t)?;
        }
        let t = self.unembed.forward(tape, store, t)?;
        let back = tape.transpose(t)?;
        tape.reshape(back, [c, h, w])
    }
}
