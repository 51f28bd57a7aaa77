//! Finite-difference checks over every primitive and every composite block.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use splm_autodiff::{grad_check_detailed, CheckOptions, Difference, GradCheck, Graph, Tensor, Var};

use crate::config::{FilterVariant, ModelConfig};
use crate::dct::{DctBasis, DctSite};
use crate::error::Result;
use crate::filter::FilterSite;
use crate::gpt::Gpt;
use crate::layers::Block;
use crate::params::{Bound, ParamStore};

pub const PRIMITIVE_TOL: f64 = 1e-6;
pub const COMPOSITE_TOL: f64 = 1e-4;
/// Primitive inputs stay clear of kinks, so a wide Richardson step is safe.
const EPS: f64 = 1e-3;
/// Composites cross ReLU kinks at random; a narrow step makes that rare and
/// the kink test catches the rest.
const COMPOSITE_EPS: f64 = 1e-5;
const HEAD_EPS: f64 = 1e-4;
const KINK_THRESHOLD: f64 = 1e-3;
/// Denominator floor for composites, where some gradients vanish analytically.
pub const COMPOSITE_FLOOR: f64 = 1e-5;
/// Below this, finite-difference roundoff dominates at `EPS`.
pub const PRIMITIVE_FLOOR: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq)]
pub struct CheckResult {
    pub name: String,
    pub composite: bool,
    pub seeds: usize,
    pub max_rel_error: f64,
    pub tolerance: f64,
    /// Denominator floor of the relative error.
    pub floor: f64,
    pub coordinates: usize,
    /// Coordinates skipped because the difference stencil crossed a kink.
    pub kinks: usize,
}

/// At most this share of coordinates may be skipped as kinks.
pub const MAX_KINK_SHARE: f64 = 0.01;

impl CheckResult {
    pub fn passed(&self) -> bool {
        self.max_rel_error < self.tolerance && (self.kinks as f64) <= MAX_KINK_SHARE * self.coordinates as f64
    }
}

type AdResult<T> = splm_autodiff::Result<T>;

fn ad(e: crate::Error) -> splm_autodiff::Error {
    match e {
        crate::Error::Tape(e) => e,
        other => splm_autodiff::Error::InvalidArgument(other.to_string()),
    }
}

/// Random values with magnitude in `[0.05, 1)`, clear of ReLU kinks.
fn rand_tensor(r: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let v: f64 = r.random_range(0.05..1.0);
            if r.random_bool(0.5) {
                v
            } else {
                -v
            }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).expect("shape matches")
}

fn primitive_options() -> CheckOptions {
    CheckOptions { eps: EPS, floor: PRIMITIVE_FLOOR, difference: Difference::Richardson, kink_threshold: None }
}

/// Held to the primitive tolerance, but with a ReLU inside.
fn head_options() -> CheckOptions {
    CheckOptions { eps: HEAD_EPS, kink_threshold: Some(KINK_THRESHOLD), ..primitive_options() }
}

fn composite_options() -> CheckOptions {
    CheckOptions {
        eps: COMPOSITE_EPS,
        floor: COMPOSITE_FLOOR,
        difference: Difference::Central,
        kink_threshold: Some(KINK_THRESHOLD),
    }
}

fn weighted_sum(g: &mut Graph<f64>, y: Var, r: &mut ChaCha8Rng) -> AdResult<Var> {
    let w: Vec<f64> = (0..g.value(y).len()).map(|_| r.random_range(0.5..1.5)).collect();
    let w = g.constant(g.shape(y).to_vec(), w)?;
    let p = g.mul(y, w)?;
    Ok(g.sum(p))
}

type Primitive<'a> = &'a dyn Fn(&mut Graph<f64>, &[Var]) -> AdResult<Var>;

fn primitive(seed: u64, inputs: &[Tensor<f64>], f: Primitive) -> Result<GradCheck> {
    Ok(grad_check_detailed(
        |g, v| {
            let y = f(g, v)?;
            let mut r = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
            weighted_sum(g, y, &mut r)
        },
        inputs,
        &primitive_options(),
    )?)
}

struct Case {
    name: &'static str,
    run: Box<dyn Fn(u64) -> Result<GradCheck>>,
}

fn primitive_cases() -> Vec<Case> {
    fn case(name: &'static str, shapes: &'static [&'static [usize]], f: impl Fn(&mut Graph<f64>, &[Var], &mut ChaCha8Rng) -> AdResult<Var> + 'static) -> Case {
        Case {
            name,
            run: Box::new(move |seed| {
                let mut r = ChaCha8Rng::seed_from_u64(seed);
                let inputs: Vec<Tensor<f64>> = shapes.iter().map(|s| rand_tensor(&mut r, s)).collect();
                let aux_seed: u64 = r.random();
                let f = &f;
                primitive(seed, &inputs, &move |g, v| f(g, v, &mut ChaCha8Rng::seed_from_u64(aux_seed)))
            }),
        }
    }
    vec![
        case("add_sub_mul_scale", &[&[3, 4], &[3, 4]], |g, v, _| {
            let a = g.add(v[0], v[1])?;
            let b = g.sub(a, v[1])?;
            let c = g.mul(b, v[1])?;
            Ok(g.scale(c, 1.5))
        }),
        case("row_broadcasts", &[&[2, 3, 4], &[4], &[4]], |g, v, _| {
            let a = g.add_row(v[0], v[1])?;
            g.mul_row(a, v[2])
        }),
        case("relu", &[&[10]], |g, v, _| Ok(g.relu(v[0]))),
        case("sigmoid", &[&[10]], |g, v, _| Ok(g.sigmoid(v[0]))),
        case("matmul", &[&[2, 3, 4], &[4, 5]], |g, v, _| g.matmul(v[0], v[1])),
        case("batched_matmul", &[&[2, 3, 4], &[2, 4, 5], &[2, 5, 4]], |g, v, _| {
            let a = g.bmm(v[0], v[1], false)?;
            let b = g.bmm(v[0], v[2], true)?;
            let (a, b) = (g.sum(a), g.sum(b));
            g.add(a, b)
        }),
        case("softmax", &[&[2, 5, 5]], |g, v, _| g.softmax(v[0], false)),
        case("softmax_causal", &[&[2, 5, 5]], |g, v, _| g.softmax(v[0], true)),
        case("layer_norm", &[&[3, 6], &[6], &[6]], |g, v, _| g.layer_norm(v[0], v[1], v[2], 1e-5)),
        case("embedding", &[&[5, 3]], |g, v, _| g.embedding(v[0], &[4, 0, 4, 2])),
        case("cross_entropy_27", &[&[4, 27]], |g, v, r| {
            let t: Vec<usize> = (0..4).map(|_| r.random_range(0..27)).collect();
            g.cross_entropy(v[0], &t)
        }),
        case("huber", &[&[12]], |g, v, _| {
            // |x| < 1, so residuals against 0 stay quadratic and against 3 stay linear
            let t: Vec<f64> = (0..12).map(|i| if i % 2 == 0 { 0.0 } else { 3.0 }).collect();
            g.huber(v[0], &t, 1.5)
        }),
        case("reshape_permute_reduce", &[&[2, 3, 4]], |g, v, _| {
            let p = g.permute(v[0], &[2, 0, 1])?;
            let r = g.reshape(p, &[4, 6])?;
            let s = g.sum_axis(r, 1)?;
            let m = g.mean_axis(v[0], 1)?;
            let (m, s) = (g.mean(m), g.sum(s));
            g.add(m, s)
        }),
        case("causal_conv1d", &[&[3, 8], &[5]], |g, v, _| g.causal_conv1d(v[0], v[1])),
        case("conv_bank", &[&[2, 8], &[10]], |g, v, _| g.conv_bank(v[0], v[1], &[2, 3, 5])),
        case("filter_bank_mix", &[&[2, 8], &[10], &[3]], |g, v, _| {
            // row 0 and positive taps keep every response above the ReLU kink, row 1 below it
            let sq = g.mul(v[0], v[0])?;
            let sign = g.constant(vec![2, 8], [[1.0; 8], [-1.0; 8]].concat())?;
            let off = g.constant(vec![2, 8], [[0.1; 8], [-0.1; 8]].concat())?;
            let x = g.mul(sq, sign)?;
            let x = g.add(x, off)?;
            let k = g.mul(v[1], v[1])?;
            let shift = g.constant(vec![10], vec![0.1; 10])?;
            let k = g.add(k, shift)?;
            g.filter_bank_mix(x, k, v[2], &[2, 3, 5])
        }),
        case("dropout", &[&[10]], |g, v, r| {
            let keep: Vec<bool> = (0..10).map(|_| r.random_bool(0.7)).collect();
            g.dropout(v[0], &keep, 0.3)
        }),
    ]
}

/// Overwrites every parameter with `U(-0.5, 0.5)` (gains with `1 + U(-0.3, 0.3)`)
/// so no path is switched off by a zero initialisation.
pub fn randomize_params(store: &mut ParamStore<f64>, seed: u64) {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    for p in store.iter_mut() {
        let gain = p.name.ends_with(".gamma");
        for v in p.tensor.data_mut() {
            *v = if gain { 1.0 + r.random_range(-0.3..0.3) } else { r.random_range(-0.5..0.5) };
        }
    }
}

fn store_inputs(store: &ParamStore<f64>) -> Vec<Tensor<f64>> {
    store.iter().map(|p| p.tensor.clone()).collect()
}

/// Checks gradients of `loss` with respect to every parameter of `store` plus `extra` inputs.
fn params_check(
    store: &ParamStore<f64>,
    extra: &[Tensor<f64>],
    opts: &CheckOptions,
    loss: impl Fn(&mut Graph<f64>, &Bound, &[Var]) -> Result<Var>,
) -> Result<GradCheck> {
    let n = store.len();
    let mut inputs = store_inputs(store);
    inputs.extend_from_slice(extra);
    Ok(grad_check_detailed(
        |g, v| {
            let bound = Bound::from_vars(v[..n].to_vec());
            loss(g, &bound, &v[n..]).map_err(ad)
        },
        &inputs,
        opts,
    )?)
}

fn toy_model(variant: FilterVariant, seed: u64) -> Result<Gpt<f64>> {
    let mut cfg = ModelConfig { n_layers: 1, d_model: 4, d_ff: 8, n_heads: 2, context_len: 8, head_hidden: 8, ..ModelConfig::paper() }
        .with_variant(variant);
    cfg.filter.channels = 4;
    cfg.filter.kernel_len = 3;
    cfg.filter.scales = vec![2, 3];
    cfg.filter.mask.dim = 4;
    cfg.filter.mask.heads = 2;
    cfg.filter.mask.d_ff = 8;
    let mut m = Gpt::new(cfg, seed)?;
    randomize_params(&mut m.store, seed);
    Ok(m)
}

fn site_case(variant: FilterVariant, seed: u64) -> Result<GradCheck> {
    let m = toy_model(variant, seed)?;
    let site = m.sites[0].clone();
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let x = rand_tensor(&mut r, &[2, 8, 4]);
    let ws: u64 = r.random();
    params_check(&m.store, &[x], &composite_options(), |g, p, v| {
        let y = site.apply(g, p, v[0])?;
        Ok(weighted_sum(g, y, &mut ChaCha8Rng::seed_from_u64(ws))?)
    })
}

fn model_case(variant: FilterVariant, seed: u64) -> Result<GradCheck> {
    let m = toy_model(variant, seed)?;
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let tokens: Vec<usize> = (0..16).map(|_| r.random_range(0..27)).collect();
    let targets: Vec<usize> = (0..16).map(|_| r.random_range(0..27)).collect();
    params_check(&m.store, &[], &composite_options(), |g, p, _| {
        let y = m.forward(g, p, &tokens, 2, None)?;
        Ok(g.cross_entropy(y, &targets)?)
    })
}

fn composite_cases() -> Vec<(Case, f64, f64)> {
    let c = |name, tol, run: Box<dyn Fn(u64) -> Result<GradCheck>>| {
        let floor = if tol == PRIMITIVE_TOL { PRIMITIVE_FLOOR } else { COMPOSITE_FLOOR };
        (Case { name, run }, tol, floor)
    };
    vec![
        c("filter_fixed_block", COMPOSITE_TOL, Box::new(|s| site_case(FilterVariant::SingleScale, s))),
        c("filter_multiscale_block", COMPOSITE_TOL, Box::new(|s| site_case(FilterVariant::MultiScale, s))),
        c("filter_adaptive_block", COMPOSITE_TOL, Box::new(|s| site_case(FilterVariant::TokenAdaptive, s))),
        c(
            "decoder_block",
            COMPOSITE_TOL,
            Box::new(|s| {
                let mut store = ParamStore::new(s);
                let b = Block::new(&mut store, "b", 4, 2, 8, true)?;
                randomize_params(&mut store, s);
                let mut r = ChaCha8Rng::seed_from_u64(s);
                let x = rand_tensor(&mut r, &[2, 5, 4]);
                params_check(&store, &[x], &composite_options(), |g, p, v| {
                    let y = b.forward(g, p, v[0], &mut None)?;
                    Ok(weighted_sum(g, y, &mut ChaCha8Rng::seed_from_u64(s))?)
                })
            }),
        ),
        c(
            "lm_head_l4",
            PRIMITIVE_TOL,
            Box::new(|s| {
                let m = toy_model(FilterVariant::None, s)?;
                let mut r = ChaCha8Rng::seed_from_u64(s);
                let h = rand_tensor(&mut r, &[1, 4, 4]);
                let targets: Vec<usize> = (0..4).map(|_| r.random_range(0..27)).collect();
                params_check(&m.store, &[h], &head_options(), |g, p, v| {
                    let y = m.lm_head(g, p, v[0])?;
                    Ok(g.cross_entropy(y, &targets)?)
                })
            }),
        ),
        c(
            "spectral_reweight_weights",
            PRIMITIVE_TOL,
            Box::new(|s| {
                let mut store = ParamStore::new(s);
                let site = DctSite::new(&mut store, "d", 16, true)?;
                randomize_params(&mut store, s);
                let basis = DctBasis::new(16)?;
                let mut r = ChaCha8Rng::seed_from_u64(s);
                let x = rand_tensor(&mut r, &[2, 16, 3]);
                params_check(&store, &[x], &primitive_options(), |g, p, v| {
                    let y = site.apply(g, p, &basis, v[0])?;
                    Ok(weighted_sum(g, y, &mut ChaCha8Rng::seed_from_u64(s))?)
                })
            }),
        ),
        c("toy_model_baseline", COMPOSITE_TOL, Box::new(|s| model_case(FilterVariant::None, s))),
        c("toy_model_single_scale", COMPOSITE_TOL, Box::new(|s| model_case(FilterVariant::SingleScale, s))),
        c("toy_model_multi_scale", COMPOSITE_TOL, Box::new(|s| model_case(FilterVariant::MultiScale, s))),
        c("toy_model_token_adaptive", COMPOSITE_TOL, Box::new(|s| model_case(FilterVariant::TokenAdaptive, s))),
    ]
}

fn run_case(case: &Case, composite: bool, tol: f64, floor: f64, seeds: usize, base: u64) -> Result<CheckResult> {
    let mut r = CheckResult {
        name: case.name.to_string(),
        composite,
        seeds,
        max_rel_error: 0.0,
        tolerance: tol,
        floor,
        coordinates: 0,
        kinks: 0,
    };
    for i in 0..seeds {
        let c = (case.run)(base.wrapping_add(i as u64))?;
        r.max_rel_error = r.max_rel_error.max(c.max_rel_error);
        r.coordinates += c.coordinates;
        r.kinks += c.kinks;
    }
    Ok(r)
}

/// Runs every primitive over `primitive_seeds` seeds and every composite over
/// `composite_seeds` seeds, starting from `base_seed`.
pub fn run_suite(primitive_seeds: usize, composite_seeds: usize, base_seed: u64) -> Result<Vec<CheckResult>> {
    let mut out = Vec::new();
    for case in primitive_cases() {
        out.push(run_case(&case, false, PRIMITIVE_TOL, PRIMITIVE_FLOOR, primitive_seeds, base_seed)?);
    }
    for (case, tol, floor) in composite_cases() {
        out.push(run_case(&case, true, tol, floor, composite_seeds, base_seed)?);
    }
    Ok(out)
}

/// Fixed-width pass/fail table.
pub fn format_report(results: &[CheckResult]) -> String {
    let mut s = format!(
        "{:<28} {:>9} {:>5} {:>12} {:>9} {:>7} {:>11}  result\n",
        "check", "kind", "seeds", "max_rel_err", "tol", "floor", "kinks"
    );
    for r in results {
        s.push_str(&format!(
            "{:<28} {:>9} {:>5} {:>12.3e} {:>9.0e} {:>7.0e} {:>11}  {}\n",
            r.name,
            if r.composite { "composite" } else { "primitive" },
            r.seeds,
            r.max_rel_error,
            r.tolerance,
            r.floor,
            format!("{}/{}", r.kinks, r.coordinates),
            if r.passed() { "PASS" } else { "FAIL" }
        ));
    }
    s
}

/// Sites of a toy model, exposed for callers that want the same fixtures.
pub fn toy_sites(variant: FilterVariant, seed: u64) -> Result<(Gpt<f64>, Vec<FilterSite>)> {
    let m = toy_model(variant, seed)?;
    let sites = m.sites.clone();
    Ok((m, sites))
}
