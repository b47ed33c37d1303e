use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use iswsst::autodiff::{ParamStore, Tape};
use iswsst::fusion::{superpose, superpose_soft, vote_average, vote_majority, ChannelAttention, FusionState};
use iswsst::index::IndexHead;
use iswsst::raster::{decode_labels, decode_raster, encode_labels, encode_raster, tile_origins, BandTag, LabelMap, Raster, TileSpec};
use iswsst::space::{AttentionBlock, SpaceBranch, SpaceEncoderConfig};
use iswsst::wave::{token_mix, wave_from_phase};
use iswsst::wavelet::{dwt2, dwt2_matrix_packed, decode_pyramid, encode_pyramid, idwt2, pack_subbands, PadMode};
use iswsst::Tensor;

/// Deterministic fill from a short pattern, so shrinking stays meaningful.
fn tensor(shape: &[usize], values: &[f64]) -> Tensor<f64> {
    Tensor::from_fn(shape.to_vec(), |i| values[i % values.len()] * (1.0 + (i / values.len()) as f64 * 0.37).sin())
}

fn values() -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-10.0f64..10.0, 1..64)
}

fn chacha(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    // ---- autodiff ----

    #[test]
    fn softmax_rows_sum_to_one(extent in 1usize..1000, rows in 1usize..4, v in prop::collection::vec(-700.0f64..700.0, 1..50)) {
        let x = tensor(&[rows, extent], &v);
        let mut tape = Tape::new();
        let xv = tape.input(x);
        let s = tape.softmax(xv, 1).unwrap();
        let out = tape.value(s);
        for r in 0..rows {
            let sum: f64 = out.data()[r * extent..(r + 1) * extent].iter().sum();
            prop_assert!((sum - 1.0).abs() <= 1e-6);
        }
    }

    #[test]
    fn backward_is_repeatable(seed in 0u64..500, n in 1usize..6) {
        let mut store = ParamStore::new();
        let block = AttentionBlock::new(&mut store, "a", 4, 2, &mut chacha(seed)).unwrap();
        let x = Tensor::from_fn([n, 4], |i| ((i as f64) * 0.7 + seed as f64).sin());
        let mut grads = Vec::new();
        for _ in 0..2 {
            store.zero_grad();
            let mut tape = Tape::new();
            let xv = tape.input(x.clone());
            let y = block.forward(&mut tape, &store, xv).unwrap();
            let loss = tape.sum(y);
            tape.backward(loss, &mut store).unwrap();
            grads.push(store.iter().map(|p| p.grad.clone()).collect::<Vec<_>>());
        }
        prop_assert_eq!(&grads[0], &grads[1]);
    }

    // ---- raster ----

    #[test]
    fn tiles_cover_the_image(h in 1usize..80, w in 1usize..80, window in 1usize..40, stride_frac in 0.0f64..1.0) {
        prop_assume!(window <= h && window <= w);
        let stride = ((window as f64 * stride_frac).ceil() as usize).max(1);
        let spec = TileSpec::new(window, stride).unwrap();
        let origins = tile_origins(h, w, spec).unwrap();
        prop_assert_eq!(&origins, &tile_origins(h, w, spec).unwrap());
        let mut covered = vec![false; h * w];
        for (r0, c0) in origins {
            prop_assert!(r0 + window <= h && c0 + window <= w);
            for r in r0..r0 + window {
                for c in c0..c0 + window {
                    covered[r * w + c] = true;
                }
            }
        }
        prop_assert!(covered.iter().all(|&c| c));
    }

    #[test]
    fn containers_round_trip(h in 1usize..20, w in 1usize..20, c in 1usize..5, bits in prop::collection::vec(0u32..0x3f80_0000, 1..40), k in 1usize..=256) {
        let data: Vec<f32> = (0..h * w * c).map(|i| f32::from_bits(bits[i % bits.len()])).collect();
        let bands: Vec<BandTag> = (0..c).map(|i| BandTag::Other(i as u16)).collect();
        let raster = Raster::new(h, w, bands, data).unwrap();
        let back = decode_raster(&encode_raster(&raster), None).unwrap();
        prop_assert!(back.data().iter().zip(raster.data()).all(|(a, b)| a.to_bits() == b.to_bits()));
        prop_assert_eq!(back.bands(), raster.bands());
        let labels = LabelMap::new(h, w, k, (0..h * w).map(|i| (i % k) as u8).collect()).unwrap();
        prop_assert_eq!(decode_labels(&encode_labels(&labels)).unwrap(), labels);
    }

    // ---- index ----

    #[test]
    fn index_logits_keep_resolution(h in 1usize..40, w in 1usize..40, k in 2usize..8, seed in 0u64..100) {
        let mut store = ParamStore::<f64>::new();
        let head = IndexHead::new(&mut store, "i", k, &mut chacha(seed)).unwrap();
        let mut tape = Tape::new();
        let x = tape.input(Tensor::zeros([1, h, w]));
        let y = head.forward(&mut tape, &store, x).unwrap();
        prop_assert_eq!(tape.shape(y), &[k, h, w]);
    }

    // ---- wavelet ----

    #[test]
    fn pyramid_reconstructs(c in 1usize..4, hh in 1usize..20, hw in 1usize..20, levels in 1usize..3, v in values()) {
        let (h, w) = (hh * 4, hw * 4);
        let x = tensor(&[c, h, w], &v);
        let p = encode_pyramid(&x, levels, PadMode::None).unwrap();
        prop_assert!(decode_pyramid(&p, &p.coarsest().ll).unwrap().max_abs_diff(&x).unwrap() <= 1e-9);
        let energy: f64 = p.coarsest().ll.sum_squares()
            + p.levels.iter().map(|l| l.lh.sum_squares() + l.hl.sum_squares() + l.hh.sum_squares()).sum::<f64>();
        prop_assert!((energy - x.sum_squares()).abs() <= 1e-9 * x.sum_squares().max(1e-300));
    }

    #[test]
    fn reflect_padding_reconstructs_odd_extents(h in 3usize..30, w in 3usize..30, levels in 1usize..3, v in values()) {
        let x = tensor(&[2, h, w], &v);
        let p = encode_pyramid(&x, levels, PadMode::Reflect).unwrap();
        prop_assert!(decode_pyramid(&p, &p.coarsest().ll).unwrap().max_abs_diff(&x).unwrap() <= 1e-9);
    }

    #[test]
    fn dwt_is_linear(a in -3.0f64..3.0, b in -3.0f64..3.0, v in values(), u in values(), n in 1usize..16) {
        let (x, y) = (tensor(&[2, 2 * n, 2 * n], &v), tensor(&[2, 2 * n, 2 * n], &u));
        let combo = x.zip_map(&y, |p, q| a * p + b * q).unwrap();
        let (dx, dy, dc) = (dwt2(&x).unwrap(), dwt2(&y).unwrap(), dwt2(&combo).unwrap());
        for ((px, py), pc) in dx.parts().into_iter().zip(dy.parts()).zip(dc.parts()) {
            let expected = px.zip_map(py, |p, q| a * p + b * q).unwrap();
            prop_assert!(pc.max_abs_diff(&expected).unwrap() <= 1e-10);
        }
    }

    #[test]
    fn channels_transform_independently(c in 2usize..5, n in 1usize..12, v in values()) {
        let x = tensor(&[c, 2 * n, 2 * n], &v);
        let whole = dwt2(&x).unwrap();
        let plane = 4 * n * n;
        for ch in 0..c {
            let single = Tensor::new([1, 2 * n, 2 * n], x.data()[ch * plane..(ch + 1) * plane].to_vec()).unwrap();
            let alone = dwt2(&single).unwrap();
            for (p, q) in whole.parts().into_iter().zip(alone.parts()) {
                let band = n * n;
                prop_assert_eq!(&p.data()[ch * band..(ch + 1) * band], q.data());
            }
        }
        prop_assert!(idwt2(&whole).unwrap().max_abs_diff(&x).unwrap() <= 1e-10);
    }

    #[test]
    fn matrix_form_matches_filters(n in 4usize..=32, v in values()) {
        let x = tensor(&[1, 2 * n, 2 * n], &v);
        let packed = dwt2_matrix_packed(&x).unwrap();
        prop_assert!(packed.max_abs_diff(&pack_subbands(&dwt2(&x).unwrap()).unwrap()).unwrap() <= 1e-10);
    }

    // ---- wave ----

    #[test]
    fn amplitude_nonnegative_and_mixing_linear(n in 1usize..6, d in 1usize..6, v in values(), p in values(), wv in values()) {
        let x = tensor(&[n, d], &v);
        let phase = tensor(&[n, d], &p);
        let (wt, wi) = (tensor(&[n, n], &wv), tensor(&[n, n], &p));
        let run = |x: Tensor<f64>| {
            let mut tape = Tape::new();
            let xv = tape.input(x);
            let pv = tape.constant(phase.clone());
            let tok = wave_from_phase(&mut tape, xv, pv).unwrap();
            let amp = tape.value(tok.amplitude).clone();
            let (a, b) = (tape.constant(wt.clone()), tape.constant(wi.clone()));
            let u = token_mix(&mut tape, &tok, a, b).unwrap();
            (amp, tape.value(u).clone())
        };
        let (amp, u) = run(x.clone());
        prop_assert!(amp.data().iter().all(|&a| a >= 0.0));
        let (_, u2) = run(x.map(|v| 2.0 * v));
        prop_assert!(u2.max_abs_diff(&u.map(|v| 2.0 * v)).unwrap() <= 1e-10);
    }

    // ---- space ----

    #[test]
    fn attention_rows_are_distributions(n in 1usize..10, seed in 0u64..200) {
        let mut store = ParamStore::<f64>::new();
        let block = AttentionBlock::new(&mut store, "a", 8, 2, &mut chacha(seed)).unwrap();
        let mut tape = Tape::new();
        let x = tape.input(Tensor::from_fn([n, 8], |i| ((i * 31 + seed as usize) as f64).sin()));
        let out = block.forward_with_attention(&mut tape, &store, x).unwrap();
        prop_assert_eq!(out.attention.len(), 2);
        for a in out.attention {
            let a = tape.value(a);
            for r in 0..n {
                let s: f64 = a.data()[r * n..(r + 1) * n].iter().sum();
                prop_assert!((s - 1.0).abs() <= 1e-6);
            }
        }
    }

    #[test]
    fn attention_is_permutation_equivariant(n in 2usize..8, seed in 0u64..200, shift in 1usize..7) {
        let mut store = ParamStore::<f64>::new();
        let block = AttentionBlock::new(&mut store, "a", 4, 2, &mut chacha(seed)).unwrap();
        let x = Tensor::from_fn([n, 4], |i| ((i * 17 + seed as usize) as f64).cos());
        let perm: Vec<usize> = (0..n).map(|i| (i + shift) % n).collect();
        let permute = |t: &Tensor<f64>| Tensor::from_fn([n, 4], |i| t.data()[perm[i / 4] * 4 + i % 4]);
        let run = |x: Tensor<f64>| {
            let mut tape = Tape::new();
            let xv = tape.input(x);
            let y = block.forward(&mut tape, &store, xv).unwrap();
            tape.value(y).clone()
        };
        let a = permute(&run(x.clone()));
        let b = run(permute(&x));
        prop_assert!(a.max_abs_diff(&b).unwrap() <= 1e-12);
    }

    #[test]
    fn space_branch_keeps_extents(gh in 1usize..4, gw in 1usize..4, c in 1usize..4, seed in 0u64..50) {
        let cfg = SpaceEncoderConfig { patch: 2, dim: 8, heads: 2, layers: 1 };
        let grid = (2 * gh, 2 * gw);
        let mut store = ParamStore::<f64>::new();
        let branch = SpaceBranch::new(&mut store, "s", c, grid, cfg, &mut chacha(seed)).unwrap();
        let mut tape = Tape::new();
        let x = tape.input(Tensor::from_fn([c, grid.0, grid.1], |i| (i as f64).sin()));
        let y = branch.forward(&mut tape, &store, x).unwrap();
        prop_assert_eq!(tape.shape(y), &[c, grid.0, grid.1]);
    }

    // ---- fusion ----

    #[test]
    fn gates_stay_inside_unit_interval(c in 1usize..5, seed in 0u64..200, scale in 0.0f64..20.0) {
        let mut store = ParamStore::<f64>::new();
        let attn = ChannelAttention::new(&mut store, "c", 4 * c, 4, &mut chacha(seed)).unwrap();
        let mut tape = Tape::new();
        let x = tape.input(Tensor::from_fn([4 * c, 3, 3], |i| scale * ((i + seed as usize) as f64).sin()));
        let g = attn.gate(&mut tape, &store, x).unwrap();
        prop_assert!(tape.value(g).data().iter().all(|&v| v > 0.0 && v < 1.0));
    }

    #[test]
    fn zero_gate_weights_halve_the_input(c in 1usize..5, seed in 0u64..100) {
        let mut store = ParamStore::<f64>::new();
        let attn = ChannelAttention::new(&mut store, "c", 2 * c, 2, &mut chacha(seed)).unwrap();
        for p in store.iter_mut() {
            p.value = Tensor::zeros(p.value.shape().to_vec());
        }
        let x = Tensor::from_fn([2 * c, 2, 3], |i| (i as f64).cos());
        let mut tape = Tape::new();
        let xv = tape.input(x.clone());
        let y = attn.forward(&mut tape, &store, xv).unwrap();
        prop_assert_eq!(tape.value(y), &x.map(|v| 0.5 * v));
    }

    #[test]
    fn identical_domains_agree_under_every_rule(d in 1usize..5, k in 2usize..6, hw in 1usize..30, v in prop::collection::vec(0.0f64..1.0, 2..60), logits in prop::collection::vec(-4.0f64..4.0, 4)) {
        let raw = Tensor::from_fn([k, 1, hw], |i| v[i % v.len()] + 1e-3 * (i % 7) as f64);
        let probs = Tensor::from_fn([k, 1, hw], |i| {
            let px = i % hw;
            let total: f64 = (0..k).map(|c| raw.data()[c * hw + px]).sum();
            raw.data()[i] / total
        });
        let state = FusionState::new(vec![probs; d], Tensor::new([d], logits[..d].to_vec()).unwrap()).unwrap();
        let a = superpose(&state).unwrap();
        prop_assert_eq!(&a, &vote_majority(&state).unwrap());
        prop_assert_eq!(&a, &vote_average(&state).unwrap());
        let soft = superpose_soft(&state);
        for px in 0..hw {
            let s: f64 = (0..k).map(|c| soft.data()[c * hw + px]).sum();
            prop_assert!((s - 1.0).abs() <= 1e-6);
        }
    }
}
