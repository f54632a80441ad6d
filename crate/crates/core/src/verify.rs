//! Registered finite-difference checks for every differentiable operation
//! and for the denoising loss of a one-level model.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::autodiff::{finite_diff_check, DiffMode, GradCheck};
use crate::autodiff::{Graph, Var};
use crate::diffusion::loss::{ldm_loss, Conditioned, NoiseDraw};
use crate::diffusion::schedule::NoiseSchedule;
use crate::diffusion::text::{self, Vocabulary};
use crate::diffusion::unet::{UNet, UNetConfig};
use crate::tensor::{Result as TResult, Tensor, TensorError};

pub const TOLERANCE: f64 = 1e-4;
pub const STEP: f64 = 1e-6;

type Expr = Box<dyn Fn(&mut Graph<f64>, Var) -> TResult<Var>>;

/// One registered gradient: an expression of a single input and the point
/// it is checked at.
pub struct GradientCase {
    pub name: &'static str,
    pub at: Tensor<f64>,
    expr: Expr,
}

#[derive(Debug, Clone, Serialize)]
pub struct GradientResult {
    pub name: &'static str,
    pub max_rel_error: f64,
    pub passed: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct GradientReport {
    pub results: Vec<GradientResult>,
    pub seconds: f64,
}

impl GradientReport {
    pub fn all_passed(&self) -> bool {
        self.results.iter().all(|r| r.passed)
    }

    pub fn worst(&self) -> f64 {
        self.results.iter().map(|r| r.max_rel_error).fold(0.0, f64::max)
    }
}

fn rand_tensor(dims: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(dims, |_| rng.gen_range(-1.0..1.0))
}

/// `sum(y * r)` for a fixed random `r`, so every output element matters.
fn project(g: &mut Graph<f64>, y: Var, seed: u64) -> TResult<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let r = g.constant(rand_tensor(g.dims(y), &mut rng));
    let p = g.mul(y, r)?;
    Ok(g.sum(p))
}

fn case(name: &'static str, at: Tensor<f64>, f: impl Fn(&mut Graph<f64>, Var) -> TResult<Var> + 'static) -> GradientCase {
    GradientCase { name, at, expr: Box::new(move |g, x| {
        let y = f(g, x)?;
        project(g, y, 99)
    }) }
}

fn lift(e: crate::error::Error) -> TensorError {
    TensorError::Contract(e.to_string())
}

/// Every graph operation, each with respect to each of its inputs.
pub fn op_cases() -> Vec<GradientCase> {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let mut r = |d: &[usize]| rand_tensor(d, &mut rng);
    let (a23, b34, b23, v3) = (r(&[2, 3]), r(&[3, 4]), r(&[2, 3]), r(&[3]));
    let (bm_a, bm_b) = (r(&[2, 3, 4]), r(&[2, 4, 2]));
    let (img, w3, bias4) = (r(&[2, 3, 6, 6]), r(&[4, 3, 3, 3]), r(&[4]));
    let (gn_x, gn_g, gn_b) = (r(&[2, 4, 3, 3]), r(&[4]), r(&[4]));
    let (ln_x, ln_g, ln_b) = (r(&[3, 5]), r(&[5]), r(&[5]));
    let table = r(&[6, 4]);
    let logits = r(&[4, 5]);

    let mut cases = vec![
        case("add.lhs", a23.clone(), { let b = b23.clone(); move |g, x| { let c = g.constant(b.clone()); g.add(x, c) } }),
        case("add.broadcast_rhs", v3.clone(), { let a = a23.clone(); move |g, x| { let c = g.constant(a.clone()); g.add(c, x) } }),
        case("sub.rhs", b23.clone(), { let a = a23.clone(); move |g, x| { let c = g.constant(a.clone()); g.sub(c, x) } }),
        case("mul.lhs", a23.clone(), { let b = b23.clone(); move |g, x| { let c = g.constant(b.clone()); g.mul(x, c) } }),
        case("mul.broadcast_rhs", v3.clone(), { let a = a23.clone(); move |g, x| { let c = g.constant(a.clone()); g.mul(c, x) } }),
        case("affine", a23.clone(), |g, x| Ok(g.affine(x, 2.5, -0.5))),
        case("scale", a23.clone(), |g, x| Ok(g.scale(x, -1.7))),
        case("square", a23.clone(), |g, x| g.square(x)),
        case("silu", a23.clone(), |g, x| Ok(g.silu(x))),
        case("matmul.lhs", a23.clone(), { let b = b34.clone(); move |g, x| { let c = g.constant(b.clone()); g.matmul(x, c) } }),
        case("matmul.rhs", b34.clone(), { let a = a23.clone(); move |g, x| { let c = g.constant(a.clone()); g.matmul(c, x) } }),
        case("batch_matmul.lhs", bm_a.clone(), { let b = bm_b.clone(); move |g, x| { let c = g.constant(b.clone()); g.batch_matmul(x, c) } }),
        case("batch_matmul.rhs", bm_b.clone(), { let a = bm_a.clone(); move |g, x| { let c = g.constant(a.clone()); g.batch_matmul(c, x) } }),
        case("conv2d.stride1.input", img.clone(), { let w = w3.clone(); let b = bias4.clone(); move |g, x| {
            let (w, b) = (g.constant(w.clone()), g.constant(b.clone()));
            g.conv2d(x, w, Some(b), 1, 1)
        } }),
        case("conv2d.stride1.weight", w3.clone(), { let i = img.clone(); move |g, w| { let x = g.constant(i.clone()); g.conv2d(x, w, None, 1, 1) } }),
        case("conv2d.stride1.bias", bias4.clone(), { let i = img.clone(); let w = w3.clone(); move |g, b| {
            let (x, w) = (g.constant(i.clone()), g.constant(w.clone()));
            g.conv2d(x, w, Some(b), 1, 1)
        } }),
        case("conv2d.stride2.input", img.clone(), { let w = w3.clone(); move |g, x| { let w = g.constant(w.clone()); g.conv2d(x, w, None, 2, 1) } }),
        case("conv2d.stride2.weight", w3.clone(), { let i = img.clone(); move |g, w| { let x = g.constant(i.clone()); g.conv2d(x, w, None, 2, 1) } }),
        case("upsample2x", gn_x.clone(), |g, x| g.upsample2x(x)),
        case("group_norm.input", gn_x.clone(), { let (ga, be) = (gn_g.clone(), gn_b.clone()); move |g, x| {
            let (ga, be) = (g.constant(ga.clone()), g.constant(be.clone()));
            g.group_norm(x, 2, Some(ga), Some(be))
        } }),
        case("group_norm.gamma", gn_g.clone(), { let xi = gn_x.clone(); move |g, ga| { let x = g.constant(xi.clone()); g.group_norm(x, 2, Some(ga), None) } }),
        case("group_norm.beta", gn_b.clone(), { let xi = gn_x.clone(); move |g, be| { let x = g.constant(xi.clone()); g.group_norm(x, 2, None, Some(be)) } }),
        case("layer_norm.input", ln_x.clone(), { let (ga, be) = (ln_g.clone(), ln_b.clone()); move |g, x| {
            let (ga, be) = (g.constant(ga.clone()), g.constant(be.clone()));
            g.layer_norm(x, Some(ga), Some(be))
        } }),
        case("layer_norm.gamma", ln_g.clone(), { let xi = ln_x.clone(); move |g, ga| { let x = g.constant(xi.clone()); g.layer_norm(x, Some(ga), None) } }),
        case("layer_norm.beta", ln_b.clone(), { let xi = ln_x.clone(); move |g, be| { let x = g.constant(xi.clone()); g.layer_norm(x, None, Some(be)) } }),
        case("softmax.rows", logits.clone(), |g, x| g.softmax(x, 1)),
        case("softmax.columns", logits.clone(), |g, x| g.softmax(x, 0)),
        case("embedding", table.clone(), |g, t| g.embedding(t, &[3, 0, 3, 5])),
        case("reshape", bm_a.clone(), |g, x| g.reshape(x, &[4, 6])),
        case("permute", gn_x.clone(), |g, x| g.permute(x, &[0, 2, 3, 1])),
        case("transpose", a23.clone(), |g, x| g.transpose(x)),
        case("concat.axis0", a23.clone(), { let b = b23.clone(); move |g, x| { let c = g.constant(b.clone()); g.concat(&[x, c, x], 0) } }),
        case("concat.axis1", gn_x.clone(), { let o = gn_x.clone(); move |g, x| { let c = g.constant(o.clone()); g.concat(&[c, x], 1) } }),
        case("sum_axis", bm_a.clone(), |g, x| g.sum_axis(x, 1)),
        case("mean_axis", bm_a.clone(), |g, x| g.mean_axis(x, 2)),
    ];
    cases.push(GradientCase { name: "sum", at: a23.clone(), expr: Box::new(|g, x| { let s = g.square(x)?; Ok(g.sum(s)) }) });
    cases.push(GradientCase { name: "mean", at: a23.clone(), expr: Box::new(|g, x| { let s = g.square(x)?; Ok(g.mean(s)) }) });
    cases.push(GradientCase { name: "cross_entropy", at: logits, expr: Box::new(|g, x| g.cross_entropy(x, &[1, 4, 0, 2])) });
    cases
}

/// Denoising loss of [`UNetConfig::tiny`] with respect to one key and one
/// value projection and the clean image.
pub fn ldm_cases() -> Vec<GradientCase> {
    let net = UNet::new(UNetConfig::tiny()).expect("tiny config is valid");
    let vocab = Vocabulary::default();
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    let params = net.init_params::<f64, _>(vocab.len(), &mut rng).expect("init");
    let sched = NoiseSchedule::linear(10, 1e-3, 0.2).expect("schedule");
    let x0 = Tensor::from_fn(&[2, 3, 8, 8], |_| rng.gen_range(0.1..0.9));
    let draw = NoiseDraw::<f64>::sample(x0.dims(), sched.len(), &mut rng);
    let prompt = vocab.encode("a photo of sks person").expect("known words");

    let loss_with = |swap: Option<&'static str>| {
        let (net, params, sched, x0, draw, prompt) = (net.clone(), params.clone(), sched.clone(), x0.clone(), draw.clone(), prompt.clone());
        move |g: &mut Graph<f64>, probe: Var| -> TResult<Var> {
            let mut bound = params.bind(g, |_| false);
            let x = match swap {
                Some(name) => {
                    bound.rebind(name, probe).map_err(lift)?;
                    g.constant(x0.clone())
                }
                None => probe,
            };
            let context = text::context_var(g, &bound, &prompt).map_err(lift)?;
            let model = Conditioned { net: &net, bound: &bound, context, sched: &sched };
            ldm_loss(g, &model, x, &sched, &draw).map_err(lift)
        }
    };
    let kv = |name: &'static str| GradientCase {
        name,
        at: params.expect(name).expect("bound").clone(),
        expr: Box::new(loss_with(Some(name))),
    };
    vec![
        kv("mid.attn.to_k"),
        kv("mid.attn.to_v"),
        kv("down.0.attn.to_k"),
        kv("up.0.attn.to_v"),
        GradientCase { name: "ldm_loss.x0", at: x0.clone(), expr: Box::new(loss_with(None)) },
    ]
}

pub fn registry() -> Vec<GradientCase> {
    let mut all = op_cases();
    all.extend(ldm_cases());
    all
}

pub fn check(case: &GradientCase) -> TResult<GradCheck> {
    finite_diff_check(&case.expr, &case.at, STEP, DiffMode::Central)
}

/// Runs every registered case in 64-bit arithmetic.
pub fn run_gradient_suite() -> TResult<GradientReport> {
    let start = Instant::now();
    let mut results = Vec::new();
    for c in registry() {
        let r = check(&c)?;
        results.push(GradientResult { name: c.name, max_rel_error: r.max_rel_error, passed: r.max_rel_error < TOLERANCE });
    }
    Ok(GradientReport { results, seconds: start.elapsed().as_secs_f64() })
}
