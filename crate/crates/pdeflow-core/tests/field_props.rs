//! Property tests over the unified representation: token-count formulas,
//! patchify/unpatchify bijection, masked-channel nullity, and
//! variable-order independence of canonicalize.

use pdeflow_core::field::{canonicalize, patchify, unpatchify, ChannelVocabulary, DimType, PatchSize};
use pdeflow_core::tensor::Tensor;
use proptest::prelude::*;

fn small_patch() -> impl Strategy<Value = PatchSize> {
    (1usize..=3, 1usize..=4, 1usize..=3, 1usize..=3)
        .prop_map(|(t, h, w, d)| PatchSize::new(t, h, w, d).unwrap())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn token_count_and_vector_length_formulas(
        patch in small_patch(),
        t_mult in 1usize..=3,
        h_mult in 1usize..=4,
        w_mult in 1usize..=3,
        d_mult in 1usize..=2,
        c in 1usize..=3,
    ) {
        let shape = [patch.t * t_mult, patch.h * h_mult, patch.w * w_mult, patch.d * d_mult, c];
        let n: usize = shape.iter().product();
        let field = pdeflow_core::field::Unified4DField {
            data: Tensor::from_vec(&shape, (0..n).map(|i| i as f64).collect()),
            mask: vec![true; c],
            dim_type: DimType::Three,
            patch,
            native_shape: pdeflow_core::field::NativeShape {
                t: shape[0],
                spatial: vec![shape[1], shape[2], shape[3]],
            },
        };
        let toks = patchify(&field, patch).unwrap();
        prop_assert_eq!(toks.len(), t_mult * h_mult * w_mult * d_mult);
        prop_assert_eq!(toks.vec_len(), patch.volume() * c);
        // bijection
        let back = unpatchify(&toks, &field.meta()).unwrap();
        prop_assert_eq!(back.data, field.data);
    }

    #[test]
    fn masked_channels_are_identically_zero(
        names in proptest::sample::subsequence(
            vec!["Vx", "Vy", "rho", "p", "water_depth"], 1..=4),
        t in 1usize..=4,
        x in 2usize..=24,
        seed in 0u64..1000,
    ) {
        use rand::prelude::*;
        let vocab = ChannelVocabulary::default();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let ck = names.len();
        let raw = Tensor::from_vec(&[t, x, ck], (0..t * x * ck).map(|_| rng.random::<f64>()).collect());
        let var_names: Vec<String> = names.iter().map(|s| s.to_string()).collect();
        let f = canonicalize(&raw, &var_names, DimType::One, &vocab, PatchSize::default()).unwrap();
        let c = f.c_max();
        for (i, &v) in f.data.data().iter().enumerate() {
            if !f.mask[i % c] {
                prop_assert_eq!(v, 0.0);
            }
        }
        prop_assert_eq!(f.mask.iter().filter(|&&m| m).count(), ck);
    }

    #[test]
    fn canonicalize_is_variable_order_independent(
        perm_seed in 0u64..1000,
        t in 1usize..=3,
        x in 2usize..=16,
    ) {
        use rand::prelude::*;
        let vocab = ChannelVocabulary::default();
        let names = ["Vx", "rho", "p"];
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(perm_seed);
        let raw: Vec<f64> = (0..t * x * 3).map(|_| rng.random::<f64>()).collect();
        let raw_t = Tensor::from_vec(&[t, x, 3], raw.clone());
        let base_names: Vec<String> = names.iter().map(|s| s.to_string()).collect();
        let base = canonicalize(&raw_t, &base_names, DimType::One, &vocab, PatchSize::default()).unwrap();

        // shuffle var_names together with the raw channel axis
        let mut order: Vec<usize> = (0..3).collect();
        order.shuffle(&mut rng);
        let shuf_names: Vec<String> = order.iter().map(|&i| names[i].to_string()).collect();
        let mut shuf_raw = vec![0.0f64; raw.len()];
        for cell in 0..t * x {
            for (j, &src) in order.iter().enumerate() {
                shuf_raw[cell * 3 + j] = raw[cell * 3 + src];
            }
        }
        let shuf_t = Tensor::from_vec(&[t, x, 3], shuf_raw);
        let shuffled = canonicalize(&shuf_t, &shuf_names, DimType::One, &vocab, PatchSize::default()).unwrap();
        prop_assert_eq!(base.data, shuffled.data);
        prop_assert_eq!(base.mask, shuffled.mask);
    }

    #[test]
    fn rope_isometry_and_shift_invariance(
        seed in 0u64..10_000,
    ) {
        use pdeflow_core::rope::{rope_attention_scores, rope_rotate, RopeConfig};
        use rand::prelude::*;
        let cfg = RopeConfig::with_equal_split(16).unwrap();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let q: Vec<f64> = (0..16).map(|_| rng.random::<f64>() - 0.5).collect();
        let k: Vec<f64> = (0..16).map(|_| rng.random::<f64>() - 0.5).collect();
        let cq = [rng.random_range(0..64), rng.random_range(0..64), rng.random_range(0..64), rng.random_range(0..64)];
        let ck = [rng.random_range(0..64), rng.random_range(0..64), rng.random_range(0..64), rng.random_range(0..64)];
        let delta = [rng.random_range(-32..32), rng.random_range(-32..32), rng.random_range(-32..32), rng.random_range(-32..32)];
        let rq = rope_rotate(&q, cq, &cfg).unwrap();
        let nq: f64 = q.iter().map(|v| v * v).sum::<f64>().sqrt();
        let nrq: f64 = rq.iter().map(|v| v * v).sum::<f64>().sqrt();
        prop_assert!((nq - nrq).abs() < 1e-6 * nq.max(1.0));
        let s0 = rope_attention_scores(&q, &k, cq, ck, &cfg).unwrap();
        let cq2 = [cq[0] + delta[0], cq[1] + delta[1], cq[2] + delta[2], cq[3] + delta[3]];
        let ck2 = [ck[0] + delta[0], ck[1] + delta[1], ck[2] + delta[2], ck[3] + delta[3]];
        let s1 = rope_attention_scores(&q, &k, cq2, ck2, &cfg).unwrap();
        prop_assert!((s0 - s1).abs() < 1e-5);
    }

    #[test]
    fn participation_ratio_bounds(
        evals in proptest::collection::vec(0.0f64..10.0, 1..32),
    ) {
        use pdeflow_core::effdim::participation_ratio;
        prop_assume!(evals.iter().any(|&l| l > 0.0));
        let pr = participation_ratio(&evals).unwrap();
        prop_assert!(pr >= 1.0 - 1e-12);
        prop_assert!(pr <= evals.len() as f64 + 1e-12);
    }
}
