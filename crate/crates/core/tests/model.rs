use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use splm_core::config::{AdaptiveBase, MaskActivation, MaskMode};
use splm_core::gradcheck_suite::randomize_params;
use splm_core::{FilterVariant, Gpt, Graph, ModelConfig};

fn tiny(variant: FilterVariant) -> ModelConfig {
    let mut c = ModelConfig { n_layers: 2, d_model: 8, d_ff: 16, n_heads: 2, context_len: 64, head_hidden: 16, ..ModelConfig::paper() }
        .with_variant(variant);
    c.filter.channels = 8;
    c.filter.kernel_len = 5;
    c.filter.scales = vec![3, 7];
    c.filter.mask.dim = 8;
    c.filter.mask.heads = 2;
    c.filter.mask.d_ff = 16;
    c
}

fn tokens(r: &mut ChaCha8Rng, n: usize) -> Vec<usize> {
    (0..n).map(|_| r.random_range(0..27)).collect()
}

#[test]
fn logits_before_a_perturbation_are_bit_identical() {
    for variant in FilterVariant::ALL {
        let mut m = Gpt::<f64>::new(tiny(variant), 3).unwrap();
        randomize_params(&mut m.store, 3);
        let mut r = ChaCha8Rng::seed_from_u64(17);
        for _ in 0..10 {
            let a = tokens(&mut r, 64);
            let pos = r.random_range(0..63);
            let mut b = a.clone();
            b[pos + 1] = (b[pos + 1] + 1 + r.random_range(0..25)) % 27;
            for t in b.iter_mut().skip(pos + 2) {
                *t = r.random_range(0..27);
            }
            let (la, lb) = (m.logits(&a, 1).unwrap(), m.logits(&b, 1).unwrap());
            let n = (pos + 1) * 27;
            assert!(la[..n].iter().zip(&lb[..n]).all(|(x, y)| x.to_bits() == y.to_bits()), "{variant} leaks at {pos}");
            assert_ne!(la[n..], lb[n..]);
        }
    }
}

#[test]
fn fresh_filtered_models_equal_the_baseline_bit_for_bit() {
    let mut r = ChaCha8Rng::seed_from_u64(1);
    let toks = tokens(&mut r, 2 * 32);
    let base = Gpt::<f64>::new(tiny(FilterVariant::None), 9).unwrap().logits(&toks, 2).unwrap();
    // combine mode scales the mask by mix weights that start at zero
    for variant in [FilterVariant::SingleScale, FilterVariant::MultiScale, FilterVariant::TokenAdaptive] {
        {
            let mode = MaskMode::Combine;
            let mut cfg = tiny(variant);
            cfg.filter.mask.mode = mode;
            let m = Gpt::<f64>::new(cfg, 9).unwrap();
            let out = m.logits(&toks, 2).unwrap();
            assert!(base.iter().zip(&out).all(|(a, b)| a.to_bits() == b.to_bits()), "{variant} {mode}");
        }
    }
}

#[test]
fn zeroing_trained_mix_weights_restores_the_baseline() {
    let mut r = ChaCha8Rng::seed_from_u64(2);
    let toks = tokens(&mut r, 32);
    let mut base = Gpt::<f64>::new(tiny(FilterVariant::None), 4).unwrap();
    randomize_params(&mut base.store, 4);
    for variant in [FilterVariant::SingleScale, FilterVariant::MultiScale] {
        let mut m = Gpt::<f64>::new(tiny(variant), 4).unwrap();
        randomize_params(&mut m.store, 4);
        // copy the shared parameters across, then silence the filters
        for p in base.store.iter() {
            let id = m.store.by_name(&p.name).unwrap();
            m.store.set(id, p.tensor.data()).unwrap();
        }
        for site in m.sites.clone() {
            let mix = site.mix.unwrap();
            let n = m.store.get(mix).len();
            m.store.set(mix, &vec![0.0; n]).unwrap();
        }
        assert_eq!(m.logits(&toks, 1).unwrap(), base.logits(&toks, 1).unwrap(), "{variant}");
    }
}

#[test]
fn shared_parameters_match_across_variants() {
    let base = Gpt::<f64>::new(tiny(FilterVariant::None), 5).unwrap();
    for variant in FilterVariant::ALL {
        let m = Gpt::<f64>::new(tiny(variant), 5).unwrap();
        for p in base.store.iter() {
            assert_eq!(m.store.get(m.store.by_name(&p.name).unwrap()).data(), p.tensor.data());
        }
    }
}

#[test]
fn seeds_reproduce_and_differ() {
    let a = Gpt::<f64>::new(tiny(FilterVariant::TokenAdaptive), 1).unwrap();
    let b = Gpt::<f64>::new(tiny(FilterVariant::TokenAdaptive), 1).unwrap();
    let c = Gpt::<f64>::new(tiny(FilterVariant::TokenAdaptive), 2).unwrap();
    let vals = |m: &Gpt<f64>| m.store.iter().flat_map(|p| p.tensor.data().to_vec()).collect::<Vec<_>>();
    assert_eq!(vals(&a), vals(&b));
    assert_ne!(vals(&a), vals(&c));
}

fn baseline_formula(c: &ModelConfig) -> usize {
    let (d, f, v, h, l) = (c.d_model, c.d_ff, c.vocab, c.head_hidden, c.context_len);
    let block = 4 * d + 4 * (d * d + d) + (d * f + f) + (f * d + d);
    v * d + l * d + c.n_layers * block + 2 * d + (d * h + h) + (h * v + v)
}

#[test]
fn parameter_counts_follow_the_formula() {
    let paper = ModelConfig::paper();
    let base = Gpt::<f32>::new(paper.clone(), 0).unwrap();
    assert_eq!(base.param_count(), baseline_formula(&paper));
    assert_eq!(base.param_count(), 1_942_171);

    let single = Gpt::<f32>::new(paper.clone().with_variant(FilterVariant::SingleScale), 0).unwrap();
    assert_eq!(single.param_count() - base.param_count(), 8 * (144 * 7 + 144));
    assert_eq!(single.filter_param_count(), 9216);

    let multi = Gpt::<f32>::new(paper.clone().with_variant(FilterVariant::MultiScale), 0).unwrap();
    assert_eq!(multi.filter_param_count(), 8 * (36 * (3 + 7 + 15 + 31) + 144));
    assert_eq!(multi.filter_param_count(), 17280);
    assert!((multi.filter_param_count() as f64) < 0.01 * base.param_count() as f64);

    let adaptive = Gpt::<f32>::new(paper.clone().with_variant(FilterVariant::TokenAdaptive), 0).unwrap();
    let (m, k, e, ff, ctx) = (144, 7, 32, 128, 256);
    let decoder = (m * e + e) + ctx * e + (4 * e + 4 * (e * e + e) + e * ff + ff + ff * e + e) + 2 * e + (e * m + m);
    assert_eq!(adaptive.filter_param_count(), 8 * (m * k + decoder));
}

#[test]
fn fresh_model_predicts_uniformly() {
    let mut r = ChaCha8Rng::seed_from_u64(8);
    for variant in FilterVariant::ALL {
        let m = Gpt::<f64>::new(tiny(variant), 1).unwrap();
        let toks = tokens(&mut r, 64);
        let nll = m.nll(&toks, &tokens(&mut r, 64), 2).unwrap();
        assert!((nll - 27f64.ln()).abs() < 1e-9, "{variant}: {nll}");
    }
}

#[test]
fn adaptive_mask_options_build_and_run() {
    let mut r = ChaCha8Rng::seed_from_u64(5);
    let toks = tokens(&mut r, 16);
    for base in [AdaptiveBase::SingleScale, AdaptiveBase::MultiScale] {
        for act in [MaskActivation::Linear, MaskActivation::Sigmoid] {
            for positional in [false, true] {
                let mut cfg = tiny(FilterVariant::TokenAdaptive);
                cfg.filter.adaptive_base = base;
                cfg.filter.mask.activation = act;
                cfg.filter.mask.positional = positional;
                let mut m = Gpt::<f64>::new(cfg, 2).unwrap();
                randomize_params(&mut m.store, 2);
                let out = m.logits(&toks, 1).unwrap();
                assert!(out.iter().all(|v| v.is_finite()));
            }
        }
    }
}

#[test]
fn mask_decoder_gets_gradient_after_one_step() {
    use splm_core::{Adam, AdamConfig};
    let mut m = Gpt::<f64>::new(tiny(FilterVariant::TokenAdaptive), 6).unwrap();
    let mut r = ChaCha8Rng::seed_from_u64(6);
    let toks = tokens(&mut r, 32);
    let targets = tokens(&mut r, 32);
    let mut opt = Adam::new(&m.store, AdamConfig { lr: 1e-2, warmup: 0, ..Default::default() });
    let decoder_ids = m.sites[0].mask.as_ref().unwrap().param_ids();
    let grads = |m: &mut Gpt<f64>| {
        let mut g = Graph::new();
        let p = m.bind(&mut g);
        let y = m.forward(&mut g, &p, &toks, 1, None).unwrap();
        let loss = g.cross_entropy(y, &targets).unwrap();
        g.backward(loss).unwrap();
        m.store.zero_grads();
        m.store.collect_grads(&g, &p);
    };
    // the output layer starts at zero, so the first step only moves the head
    grads(&mut m);
    opt.step(&mut m.store);
    grads(&mut m);
    for &id in &decoder_ids {
        let grad = m.store.get(id).grad.as_ref().unwrap();
        assert!(grad.iter().map(|v| v * v).sum::<f64>() > 0.0, "{} has zero gradient", m.store.name(id));
    }
}
