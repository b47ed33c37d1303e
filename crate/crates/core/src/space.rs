//! Patch-embedding self-attention encoder over a `[C×h×w]` feature grid.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{ParamId, ParamStore, Tape, Var};
use crate::element::Element;
use crate::error::{Error, Result};
use crate::layers::{fan_in_uniform, Linear, Norm};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SpaceEncoderConfig {
    pub patch: usize,
    pub dim: usize,
    pub heads: usize,
    pub layers: usize,
}

impl Default for SpaceEncoderConfig {
    fn default() -> Self {
        Self {
            patch: 4,
            dim: 32,
            heads: 2,
            layers: 2,
        }
    }
}

impl SpaceEncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.patch == 0 || self.dim == 0 || self.heads == 0 {
            return Err(Error::Config("space.patch, space.dim and space.heads must be positive".into()));
        }
        if self.dim % self.heads != 0 {
            return Err(Error::Config(format!(
                "space.dim {} is not divisible by space.heads {}",
                self.dim, self.heads
            )));
        }
        Ok(())
    }
}

/// Flat indices that cut `[C×H×W]` into `[n × C·p·p]` patch rows, patches
/// in row-major order and features ordered channel, row, column.
pub fn patch_index(c: usize, h: usize, w: usize, p: usize) -> Vec<usize> {
    let (gh, gw) = (h / p, w / p);
    let mut index = Vec::with_capacity(c * h * w);
    for py in 0..gh {
        for px in 0..gw {
            for ch in 0..c {
                for dy in 0..p {
                    for dx in 0..p {
                        index.push((ch * h + py * p + dy) * w + px * p + dx);
                    }
                }
            }
        }
    }
    index
}

/// Inverse of [`patch_index`]: for each `[C×H×W]` position, where it sits
/// in the `[n × C·p·p]` patch rows.
pub fn fold_index(c: usize, h: usize, w: usize, p: usize) -> Vec<usize> {
    let mut index = vec![0; c * h * w];
    for (row_pos, src) in patch_index(c, h, w, p).into_iter().enumerate() {
        index[src] = row_pos;
    }
    index
}

#[derive(Clone, Debug)]
pub struct PatchEmbed {
    pub channels: usize,
    pub grid: (usize, usize),
    pub patch: usize,
    pub proj: Linear,
    pub position: ParamId,
}

impl PatchEmbed {
    pub fn new<T: Element>(
        store: &mut ParamStore<T>,
        name: &str,
        channels: usize,
        grid: (usize, usize),
        patch: usize,
        dim: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        if patch == 0 || grid.0 % patch != 0 || grid.1 % patch != 0 {
            return Err(Error::contract(format!(
                "a {}×{} grid does not split into {patch}×{patch} patches",
                grid.0, grid.1
            )));
        }
        let n = (grid.0 / patch) * (grid.1 / patch);
        let proj = Linear::new(store, &format!("{name}.proj"), channels * patch * patch, dim, true, rng)?;
        let position = store.add(
            format!("{name}.position"),
            Tensor::from_fn([n, dim], |_| T::of(0.02 * rng.random_range(-1.0..1.0))),
        )?;
        Ok(Self {
            channels,
            grid,
            patch,
            proj,
            position,
        })
    }

    pub fn tokens(&self) -> usize {
        (self.grid.0 / self.patch) * (self.grid.1 / self.patch)
    }

    pub fn forward<T: Element>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let (c, (h, w), p) = (self.channels, self.grid, self.patch);
        if tape.shape(x) != [c, h, w] {
            return Err(Error::contract(format!(
                "patch embedding built for {c}×{h}×{w}, got {:?}",
                tape.shape(x)
            )));
        }
        let rows = tape.gather(x, patch_index(c, h, w, p), [self.tokens(), c * p * p], "patchify")?;
        let t = self.proj.forward(tape, store, rows)?;
        let pos = tape.param(store, self.position);
        tape.add(t, pos)
    }
}

pub fn patch_embed<T: Element>(
    tape: &mut Tape<T>,
    store: &ParamStore<T>,
    embed: &PatchEmbed,
    x: Var,
) -> Result<Var> {
    embed.forward(tape, store, x)
}

/// Pre-norm multi-head self-attention followed by a pre-norm feed-forward
/// layer, each with a residual connection.
#[derive(Clone, Debug)]
pub struct AttentionBlock {
    pub dim: usize,
    pub heads: usize,
    pub norm_attn: Norm,
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub out_weight: ParamId,
    pub out_bias: ParamId,
    pub norm_ff: Norm,
    pub ff_in: Linear,
    pub ff_out: Linear,
}

/// Block output plus each head's `[n×n]` attention matrix.
#[derive(Clone, Debug)]
pub struct AttentionOutput {
    pub output: Var,
    pub attention: Vec<Var>,
}

impl AttentionBlock {
    pub fn new<T: Element>(
        store: &mut ParamStore<T>,
        name: &str,
        dim: usize,
        heads: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        if heads == 0 || dim % heads != 0 {
            return Err(Error::contract(format!("{dim} channels do not split into {heads} heads")));
        }
        Ok(Self {
            dim,
            heads,
            norm_attn: Norm::new(store, &format!("{name}.norm_attn"), dim)?,
            query: Linear::new(store, &format!("{name}.query"), dim, dim, true, rng)?,
            key: Linear::new(store, &format!("{name}.key"), dim, dim, true, rng)?,
            value: Linear::new(store, &format!("{name}.value"), dim, dim, true, rng)?,
            out_weight: store.add(format!("{name}.out.weight"), fan_in_uniform(&[dim, dim], dim, rng))?,
            out_bias: store.add(format!("{name}.out.bias"), Tensor::zeros([dim]))?,
            norm_ff: Norm::new(store, &format!("{name}.norm_ff"), dim)?,
            ff_in: Linear::new(store, &format!("{name}.ff_in"), dim, 2 * dim, true, rng)?,
            ff_out: Linear::new(store, &format!("{name}.ff_out"), 2 * dim, dim, true, rng)?,
        })
    }

    pub fn forward<T: Element>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        Ok(self.forward_with_attention(tape, store, x)?.output)
    }

    pub fn forward_with_attention<T: Element>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        x: Var,
    ) -> Result<AttentionOutput> {
        let shape = tape.shape(x).to_vec();
        if shape.len() != 2 || shape[1] != self.dim {
            return Err(Error::dims("mhsa_block", &shape, &[shape.first().copied().unwrap_or(0), self.dim]));
        }
        let n = shape[0];
        let dh = self.dim / self.heads;
        let scale = T::of(1.0 / (dh as f64).sqrt());

        let normed = self.norm_attn.forward(tape, store, x)?;
        let q = self.query.forward(tape, store, normed)?;
        let k = self.key.forward(tape, store, normed)?;
        let v = self.value.forward(tape, store, normed)?;
        let wo = tape.param(store, self.out_weight);

        let mut attention = Vec::with_capacity(self.heads);
        let mut mixed: Option<Var> = None;
        for head in 0..self.heads {
            let cols = |rows: usize, width: usize| -> Vec<usize> {
                (0..rows)
                    .flat_map(|r| (head * dh..(head + 1) * dh).map(move |c| r * width + c))
                    .collect()
            };
            let qh = tape.gather(q, cols(n, self.dim), [n, dh], "head_slice")?;
            let kh = tape.gather(k, cols(n, self.dim), [n, dh], "head_slice")?;
            let vh = tape.gather(v, cols(n, self.dim), [n, dh], "head_slice")?;
            let scores = tape.matmul_nt(qh, kh)?;
            let scores = tape.scale(scores, scale);
            let attn = tape.softmax(scores, 1)?;
            attention.push(attn);
            let oh = tape.matmul(attn, vh)?;
            let wo_h = tape.gather(wo, cols(self.dim, self.dim), [self.dim, dh], "head_slice")?;
            let proj = tape.matmul_nt(oh, wo_h)?;
            mixed = Some(match mixed {
                Some(acc) => tape.add(acc, proj)?,
                None => proj,
            });
        }
        let bo = tape.param(store, self.out_bias);
        let attended = tape.add_bias(mixed.expect("at least one head"), bo)?;
        let y = tape.add(x, attended)?;

        let normed = self.norm_ff.forward(tape, store, y)?;
        let hidden = self.ff_in.forward(tape, store, normed)?;
        let hidden = tape.relu(hidden);
        let ff = self.ff_out.forward(tape, store, hidden)?;
        let output = tape.add(y, ff)?;
        Ok(AttentionOutput { output, attention })
    }
}

pub fn mhsa_block<T: Element>(
    tape: &mut Tape<T>,
    store: &ParamStore<T>,
    block: &AttentionBlock,
    tokens: Var,
) -> Result<Var> {
    block.forward(tape, store, tokens)
}

/// Patch embedding, attention blocks, and a per-token linear map back to
/// the patch pixels of the input grid.
#[derive(Clone, Debug)]
pub struct SpaceBranch {
    pub config: SpaceEncoderConfig,
    pub embed: PatchEmbed,
    pub blocks: Vec<AttentionBlock>,
    pub norm: Norm,
    pub unpatch: Linear,
}

impl SpaceBranch {
    pub fn new<T: Element>(
        store: &mut ParamStore<T>,
        name: &str,
        channels: usize,
        grid: (usize, usize),
        config: SpaceEncoderConfig,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        config.validate()?;
        let embed = PatchEmbed::new(store, &format!("{name}.embed"), channels, grid, config.patch, config.dim, rng)?;
        let blocks = (0..config.layers)
            .map(|i| AttentionBlock::new(store, &format!("{name}.block{i}"), config.dim, config.heads, rng))
            .collect::<Result<Vec<_>>>()?;
        let norm = Norm::new(store, &format!("{name}.norm"), config.dim)?;
        let p = config.patch;
        let unpatch = Linear::new(store, &format!("{name}.unpatch"), config.dim, channels * p * p, true, rng)?;
        Ok(Self {
            config,
            embed,
            blocks,
            norm,
            unpatch,
        })
    }

    /// Token features after the last block, `[n×dim]`.
    pub fn encode<T: Element>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let mut t = self.embed.forward(tape, store, x)?;
        for block in &self.blocks {
            t = block.forward(tape, store, t)?;
        }
        self.norm.forward(tape, store, t)
    }

    /// `[C×h×w]` → `[C×h×w]`.
    pub fn forward<T: Element>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let t = self.encode(tape, store, x)?;
        let rows = self.unpatch.forward(tape, store, t)?;
        let (c, (h, w), p) = (self.embed.channels, self.embed.grid, self.embed.patch);
        tape.gather(rows, fold_index(c, h, w, p), [c, h, w], "unpatchify")
    }
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;

    use super::*;
    use crate::gradcheck::{check_block, GradCheckOptions};

    fn rand_t(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
        Tensor::from_fn(shape.to_vec(), |_| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn patch_counts_and_divisibility() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::<f64>::new();
        let pe = PatchEmbed::new(&mut store, "pe", 3, (8, 8), 4, 6, &mut rng).unwrap();
        assert_eq!(pe.tokens(), 4);
        let mut tape = Tape::new();
        let x = tape.constant(rand_t(&[3, 8, 8], &mut rng));
        let y = pe.forward(&mut tape, &store, x).unwrap();
        assert_eq!(tape.shape(y), &[4, 6]);
        assert!(matches!(
            PatchEmbed::new(&mut ParamStore::<f64>::new(), "pe", 3, (8, 6), 4, 6, &mut rng),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn zero_image_gives_positions() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::<f64>::new();
        let pe = PatchEmbed::new(&mut store, "pe", 2, (4, 4), 2, 3, &mut rng).unwrap();
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros([2, 4, 4]));
        let y = pe.forward(&mut tape, &store, x).unwrap();
        assert_eq!(tape.value(y), store.value(pe.position));
    }

    #[test]
    fn one_hot_pixel_selects_weight_column() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::<f64>::new();
        let (c, p, dim) = (2, 2, 5);
        let pe = PatchEmbed::new(&mut store, "pe", c, (4, 4), p, dim, &mut rng).unwrap();
        store.value_mut(pe.position).data_mut().fill(0.0);
        // channel 1, row 3, col 2: patch (1,1), offset (1,0)
        let mut img = Tensor::<f64>::zeros([c, 4, 4]);
        img.data_mut()[16 + 3 * 4 + 2] = 1.0;
        let mut tape = Tape::new();
        let x = tape.constant(img);
        let y = pe.forward(&mut tape, &store, x).unwrap();
        let y = tape.value(y);
        let w = store.value(pe.proj.weight);
        let feature = p * p + p;
        for d in 0..dim {
            assert_eq!(y.at(&[3, d]), w.at(&[d, feature]));
            assert_eq!(y.at(&[0, d]), 0.0);
        }
    }

    #[test]
    fn fold_inverts_patchify() {
        let x = Tensor::<f64>::from_fn([3, 8, 4], |i| i as f64);
        let mut tape = Tape::new();
        let v = tape.constant(x.clone());
        let rows = tape.gather(v, patch_index(3, 8, 4, 2), [8, 12], "patchify").unwrap();
        let back = tape.gather(rows, fold_index(3, 8, 4, 2), [3, 8, 4], "unpatchify").unwrap();
        assert_eq!(tape.value(back), &x);
    }

    fn block_attention(n: usize, x: Tensor<f64>) -> Vec<Tensor<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut store = ParamStore::<f64>::new();
        let block = AttentionBlock::new(&mut store, "a", 8, 2, &mut rng).unwrap();
        let mut tape = Tape::new();
        let xv = tape.constant(x);
        let out = block.forward_with_attention(&mut tape, &store, xv).unwrap();
        assert_eq!(tape.shape(out.output), &[n, 8]);
        out.attention.iter().map(|a| tape.value(*a).clone()).collect()
    }

    #[test]
    fn attention_rows_are_distributions() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for a in block_attention(6, rand_t(&[6, 8], &mut rng)) {
            for row in a.data().chunks(6) {
                assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
                assert!(row.iter().all(|&v| v > 0.0));
            }
        }
    }

    #[test]
    fn single_and_identical_tokens() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for a in block_attention(1, rand_t(&[1, 8], &mut rng)) {
            assert_eq!(a.data(), &[1.0]);
        }
        let row = rand_t(&[1, 8], &mut rng);
        let same = Tensor::from_fn([5, 8], |i| row.data()[i % 8]);
        for a in block_attention(5, same) {
            assert!(a.data().iter().all(|&v| (v - 0.2).abs() < 1e-15));
        }
    }

    #[test]
    fn permutation_equivariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut store = ParamStore::<f64>::new();
        let block = AttentionBlock::new(&mut store, "a", 8, 2, &mut rng).unwrap();
        let x = rand_t(&[4, 8], &mut rng);
        let perm = [3usize, 1, 0, 2];
        let xp = Tensor::from_fn([4, 8], |i| x.data()[perm[i / 8] * 8 + i % 8]);
        let mut tape = Tape::new();
        let (a, b) = (tape.constant(x), tape.constant(xp));
        let ya = block.forward(&mut tape, &store, a).unwrap();
        let yb = block.forward(&mut tape, &store, b).unwrap();
        let (ya, yb) = (tape.value(ya), tape.value(yb));
        for i in 0..32 {
            assert!((yb.data()[i] - ya.data()[perm[i / 8] * 8 + i % 8]).abs() < 1e-13);
        }
    }

    #[test]
    fn block_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut store = ParamStore::<f64>::new();
        let block = AttentionBlock::new(&mut store, "a", 8, 2, &mut rng).unwrap();
        let x = rand_t(&[4, 8], &mut rng);
        let report = check_block("mhsa_block", &store, &[x], GradCheckOptions::default(), |t, s, v| {
            block.forward(t, s, v[0])
        })
        .unwrap();
        assert!(report.passes(1e-4), "{report:?}");
    }

    #[test]
    fn branch_keeps_grid() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut store = ParamStore::<f64>::new();
        let cfg = SpaceEncoderConfig {
            patch: 2,
            dim: 8,
            heads: 2,
            layers: 1,
        };
        let branch = SpaceBranch::new(&mut store, "s", 3, (4, 6), cfg, &mut rng).unwrap();
        let mut tape = Tape::new();
        let x = tape.constant(rand_t(&[3, 4, 6], &mut rng));
        let y = branch.forward(&mut tape, &store, x).unwrap();
        assert_eq!(tape.shape(y), &[3, 4, 6]);
        let bad = SpaceEncoderConfig { heads: 3, ..cfg };
        assert!(matches!(bad.validate(), Err(Error::Config(_))));
    }
}
