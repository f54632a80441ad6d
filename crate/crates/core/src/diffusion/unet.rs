//! Text-conditioned U-Net noise predictor with cross-attention blocks.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::diffusion::params::{Bound, Params};
use crate::diffusion::schedule::NoiseSchedule;
use crate::diffusion::text::{self, EMBEDDING};
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct UNetConfig {
    pub image_channels: usize,
    pub image_size: usize,
    /// Channel width per resolution level; each level after the first halves
    /// the spatial size.
    pub channels: Vec<usize>,
    /// Text-context width `d`.
    pub context_dim: usize,
    /// Attention inner width `d_a`.
    pub attn_dim: usize,
    pub time_dim: usize,
    pub temb_dim: usize,
    pub groups: usize,
}

impl Default for UNetConfig {
    fn default() -> Self {
        Self {
            image_channels: 3,
            image_size: 32,
            channels: vec![32, 64],
            context_dim: 32,
            attn_dim: 32,
            time_dim: 32,
            temb_dim: 64,
            groups: 8,
        }
    }
}

impl UNetConfig {
    /// Single-level configuration used for gradient verification.
    pub fn tiny() -> Self {
        Self {
            image_channels: 3,
            image_size: 8,
            channels: vec![8],
            context_dim: 6,
            attn_dim: 4,
            time_dim: 8,
            temb_dim: 8,
            groups: 2,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels.is_empty() {
            return Err(Error::Config("model.channels must list at least one level".into()));
        }
        if self.image_size % (1 << (self.channels.len() - 1)) != 0 {
            return Err(Error::Config(format!(
                "image_size {} not divisible across {} levels",
                self.image_size,
                self.channels.len()
            )));
        }
        if self.channels.iter().any(|&c| c == 0 || c % self.groups != 0) {
            return Err(Error::Config(format!(
                "every channel width must be a positive multiple of groups={}",
                self.groups
            )));
        }
        if self.time_dim % 2 != 0 || self.time_dim == 0 {
            return Err(Error::Config("time_dim must be even and positive".into()));
        }
        if self.attn_dim == 0 || self.context_dim == 0 || self.temb_dim == 0 {
            return Err(Error::Config("attention, context and temb widths must be positive".into()));
        }
        Ok(())
    }
}

/// Names of one cross-attention block's parameters.
#[derive(Debug, Clone)]
pub struct AttnNames {
    pub norm_gamma: String,
    pub norm_beta: String,
    pub to_q: String,
    pub to_k: String,
    pub to_v: String,
    pub out_w: String,
    pub out_b: String,
}

impl AttnNames {
    fn new(prefix: &str) -> Self {
        let p = format!("{prefix}.attn");
        Self {
            norm_gamma: format!("{p}.norm.gamma"),
            norm_beta: format!("{p}.norm.beta"),
            to_q: format!("{p}.to_q"),
            to_k: format!("{p}.to_k"),
            to_v: format!("{p}.to_v"),
            out_w: format!("{p}.to_out.weight"),
            out_b: format!("{p}.to_out.bias"),
        }
    }
}

/// Graph handles of the projections used by [`cross_attention`].
#[derive(Debug, Clone, Copy)]
pub struct AttnVars {
    pub to_q: Var,
    pub to_k: Var,
    pub to_v: Var,
    pub out_w: Var,
    pub out_b: Option<Var>,
}

/// `softmax(Q K^T / sqrt(d_a)) V W_out + b` with `Q = f W_Q`, `K = c W_K`,
/// `V = c W_V`. `f` is `(h*w) x l`, `c` is `s x d`. Returns the projected
/// output and the attention weights.
pub fn cross_attention<S: Real>(g: &mut Graph<S>, f: Var, c: Var, p: AttnVars) -> Result<(Var, Var)> {
    let d_a = g.dims(p.to_q)[1];
    if g.dims(p.to_k)[1] != d_a || g.dims(p.to_v)[1] != d_a {
        return Err(crate::tensor::TensorError::Shape {
            op: "cross_attention",
            lhs: g.dims(p.to_q).to_vec(),
            rhs: g.dims(p.to_k).to_vec(),
        }
        .into());
    }
    let q = g.matmul(f, p.to_q)?;
    let k = g.matmul(c, p.to_k)?;
    let v = g.matmul(c, p.to_v)?;
    let kt = g.transpose(k)?;
    let logits = g.matmul(q, kt)?;
    let logits = g.scale(logits, S::one() / S::from_usize(d_a).unwrap().sqrt());
    let weights = g.softmax(logits, 1)?;
    let attended = g.matmul(weights, v)?;
    let mut out = g.matmul(attended, p.out_w)?;
    if let Some(b) = p.out_b {
        out = g.add(out, b)?;
    }
    Ok((out, weights))
}

/// Sinusoidal embedding of integer timesteps, `[B, dim]`.
pub fn timestep_embedding<S: Real>(t: &[usize], dim: usize) -> Tensor<S> {
    let half = dim / 2;
    let mut out = Vec::with_capacity(t.len() * dim);
    for &step in t {
        let mut row = vec![0.0f64; dim];
        for i in 0..half {
            let freq = (-(10000f64.ln()) * i as f64 / half as f64).exp();
            let arg = step as f64 * freq;
            row[i] = arg.sin();
            row[half + i] = arg.cos();
        }
        out.extend(row.into_iter().map(S::from_f64c));
    }
    Tensor::new(vec![t.len(), dim], out).unwrap()
}

struct Init<'r, S, R> {
    p: Params<S>,
    rng: &'r mut R,
    temb_dim: usize,
    context_dim: usize,
    attn_dim: usize,
}

impl<S: Real, R: Rng> Init<'_, S, R> {
    fn normal(&mut self, name: &str, dims: &[usize], std: f64) -> Result<()> {
        let rng = &mut *self.rng;
        let t = Tensor::from_fn(dims, |_| {
            let z: f64 = StandardNormal.sample(rng);
            S::from_f64c(z * std)
        });
        self.p.insert(name, t)
    }

    fn constant(&mut self, name: &str, dims: &[usize], v: f64) -> Result<()> {
        self.p.insert(name, Tensor::full(dims, S::from_f64c(v)))
    }

    fn conv(&mut self, name: &str, cin: usize, cout: usize, k: usize) -> Result<()> {
        let std = 1.0 / ((cin * k * k) as f64).sqrt();
        self.normal(&format!("{name}.weight"), &[cout, cin, k, k], std)?;
        self.constant(&format!("{name}.bias"), &[cout], 0.0)
    }

    fn linear(&mut self, name: &str, din: usize, dout: usize) -> Result<()> {
        self.normal(&format!("{name}.weight"), &[din, dout], 1.0 / (din as f64).sqrt())?;
        self.constant(&format!("{name}.bias"), &[dout], 0.0)
    }

    fn norm(&mut self, name: &str, ch: usize) -> Result<()> {
        self.constant(&format!("{name}.gamma"), &[ch], 1.0)?;
        self.constant(&format!("{name}.beta"), &[ch], 0.0)
    }

    fn res(&mut self, prefix: &str, cin: usize, cout: usize) -> Result<()> {
        self.norm(&format!("{prefix}.norm1"), cin)?;
        self.conv(&format!("{prefix}.conv1"), cin, cout, 3)?;
        self.linear(&format!("{prefix}.temb"), self.temb_dim, cout)?;
        self.norm(&format!("{prefix}.norm2"), cout)?;
        self.conv(&format!("{prefix}.conv2"), cout, cout, 3)?;
        if cin != cout {
            self.conv(&format!("{prefix}.skip"), cin, cout, 1)?;
        }
        Ok(())
    }

    fn attn(&mut self, prefix: &str, ch: usize) -> Result<()> {
        let n = AttnNames::new(prefix);
        let (d, da) = (self.context_dim, self.attn_dim);
        self.constant(&n.norm_gamma, &[ch], 1.0)?;
        self.constant(&n.norm_beta, &[ch], 0.0)?;
        self.normal(&n.to_q, &[ch, da], 1.0 / (ch as f64).sqrt())?;
        self.normal(&n.to_k, &[d, da], 1.0 / (d as f64).sqrt())?;
        self.normal(&n.to_v, &[d, da], 1.0 / (d as f64).sqrt())?;
        self.normal(&n.out_w, &[da, ch], 1.0 / (da as f64).sqrt())?;
        self.constant(&n.out_b, &[ch], 0.0)
    }
}

/// Architecture description; parameters live in a separate [`Params`].
#[derive(Debug, Clone)]
pub struct UNet {
    pub config: UNetConfig,
}

struct Ctx<'a, S> {
    g: &'a mut Graph<S>,
    p: &'a Bound,
    groups: usize,
}

impl<S: Real> Ctx<'_, S> {
    fn var(&self, name: &str) -> Result<Var> {
        self.p.var(name)
    }

    fn conv(&mut self, prefix: &str, x: Var, stride: usize) -> Result<Var> {
        let w = self.var(&format!("{prefix}.weight"))?;
        let b = self.var(&format!("{prefix}.bias"))?;
        let pad = self.g.dims(w)[2] / 2;
        Ok(self.g.conv2d(x, w, Some(b), stride, pad)?)
    }

    fn linear(&mut self, prefix: &str, x: Var) -> Result<Var> {
        let w = self.var(&format!("{prefix}.weight"))?;
        let b = self.var(&format!("{prefix}.bias"))?;
        let y = self.g.matmul(x, w)?;
        Ok(self.g.add(y, b)?)
    }

    fn norm(&mut self, prefix: &str, x: Var) -> Result<Var> {
        let gamma = self.var(&format!("{prefix}.gamma"))?;
        let beta = self.var(&format!("{prefix}.beta"))?;
        Ok(self.g.group_norm(x, self.groups, Some(gamma), Some(beta))?)
    }

    fn res_block(&mut self, prefix: &str, x: Var, temb: Var) -> Result<Var> {
        let h = self.norm(&format!("{prefix}.norm1"), x)?;
        let h = self.g.silu(h);
        let h = self.conv(&format!("{prefix}.conv1"), h, 1)?;
        let cout = self.g.dims(h)[1];
        let te = self.g.silu(temb);
        let te = self.linear(&format!("{prefix}.temb"), te)?;
        let b = self.g.dims(te)[0];
        let te = self.g.reshape(te, &[b, cout, 1, 1])?;
        let h = self.g.add(h, te)?;
        let h = self.norm(&format!("{prefix}.norm2"), h)?;
        let h = self.g.silu(h);
        let h = self.conv(&format!("{prefix}.conv2"), h, 1)?;
        let skip_name = format!("{prefix}.skip");
        let skip = if self.p.get(&format!("{skip_name}.weight")).is_some() {
            self.conv(&skip_name, x, 1)?
        } else {
            x
        };
        Ok(self.g.add(skip, h)?)
    }

    fn attn_block(&mut self, prefix: &str, x: Var, c: Var) -> Result<Var> {
        let n = AttnNames::new(prefix);
        let d = self.g.dims(x).to_vec();
        let (b, ch, h, w) = (d[0], d[1], d[2], d[3]);
        let gamma = self.var(&n.norm_gamma)?;
        let beta = self.var(&n.norm_beta)?;
        let hn = self.g.group_norm(x, self.groups, Some(gamma), Some(beta))?;
        let f = self.g.permute(hn, &[0, 2, 3, 1])?;
        let f = self.g.reshape(f, &[b * h * w, ch])?;
        let vars = AttnVars {
            to_q: self.var(&n.to_q)?,
            to_k: self.var(&n.to_k)?,
            to_v: self.var(&n.to_v)?,
            out_w: self.var(&n.out_w)?,
            out_b: Some(self.var(&n.out_b)?),
        };
        let (o, _) = cross_attention(self.g, f, c, vars)?;
        let o = self.g.reshape(o, &[b, h, w, ch])?;
        let o = self.g.permute(o, &[0, 3, 1, 2])?;
        Ok(self.g.add(x, o)?)
    }
}

impl UNet {
    pub fn new(config: UNetConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self { config })
    }

    /// Fresh parameters, including a `vocab_len x d` text embedding table.
    pub fn init_params<S: Real, R: Rng>(&self, vocab_len: usize, rng: &mut R) -> Result<Params<S>> {
        let c = &self.config;
        let mut init = Init {
            p: Params::new(),
            rng,
            temb_dim: c.temb_dim,
            context_dim: c.context_dim,
            attn_dim: c.attn_dim,
        };
        init.normal(EMBEDDING, &[vocab_len, c.context_dim], 1.0)?;
        init.linear("time.lin1", c.time_dim, c.temb_dim)?;
        init.linear("time.lin2", c.temb_dim, c.temb_dim)?;
        init.conv("conv_in", c.image_channels, c.channels[0], 3)?;

        let levels = c.channels.len();
        let mut cin = c.channels[0];
        for (i, &ch) in c.channels.iter().enumerate() {
            init.res(&format!("down.{i}.res"), cin, ch)?;
            init.attn(&format!("down.{i}"), ch)?;
            if i + 1 < levels {
                init.conv(&format!("down.{i}.downsample"), ch, ch, 3)?;
            }
            cin = ch;
        }
        init.res("mid.res", cin, cin)?;
        init.attn("mid", cin)?;
        for i in (0..levels).rev() {
            let ch = c.channels[i];
            init.res(&format!("up.{i}.res"), cin + ch, ch)?;
            init.attn(&format!("up.{i}"), ch)?;
            cin = ch;
            if i > 0 {
                init.conv(&format!("up.{i}.upsample"), ch, c.channels[i - 1], 3)?;
                cin = c.channels[i - 1];
            }
        }
        init.norm("out.norm", cin)?;
        init.conv("out.conv", cin, c.image_channels, 3)?;
        Ok(init.p)
    }

    /// Predicted noise for model-space `x_t` (`[B, C, H, W]`), per-sample
    /// timesteps `t`, and a shared `s x d` context.
    ///
    /// The network output `F` enters as `sqrt(1 - ab_t) x_t + sqrt(ab_t) F`,
    /// so `F` is a velocity and a near-zero `F` predicts a mid-grey `x0`
    /// rather than amplifying its error by `1 / sqrt(ab_t)` at high `t`.
    pub fn forward<S: Real>(
        &self,
        g: &mut Graph<S>,
        bound: &Bound,
        x_t: Var,
        t: &[usize],
        context: Var,
        sched: &NoiseSchedule,
    ) -> Result<Var> {
        let c = &self.config;
        let xd = g.dims(x_t).to_vec();
        if xd.len() != 4 || xd[1] != c.image_channels || xd[0] != t.len() {
            return Err(Error::Config(format!(
                "input dims {xd:?} do not match {} channels and {} timesteps",
                c.image_channels,
                t.len()
            )));
        }
        for &step in t {
            sched.check_step(step)?;
        }
        let cd = g.dims(context).to_vec();
        if cd.len() != 2 || cd[0] == 0 {
            return Err(Error::Config("context must hold at least one token".into()));
        }
        let mut ctx = Ctx {
            g,
            p: bound,
            groups: c.groups,
        };
        let temb = ctx.g.constant(timestep_embedding(t, c.time_dim));
        let temb = ctx.linear("time.lin1", temb)?;
        let temb = ctx.g.silu(temb);
        let temb = ctx.linear("time.lin2", temb)?;

        let levels = c.channels.len();
        let mut h = ctx.conv("conv_in", x_t, 1)?;
        let mut skips = Vec::with_capacity(levels);
        for i in 0..levels {
            h = ctx.res_block(&format!("down.{i}.res"), h, temb)?;
            h = ctx.attn_block(&format!("down.{i}"), h, context)?;
            skips.push(h);
            if i + 1 < levels {
                h = ctx.conv(&format!("down.{i}.downsample"), h, 2)?;
            }
        }
        h = ctx.res_block("mid.res", h, temb)?;
        h = ctx.attn_block("mid", h, context)?;
        for i in (0..levels).rev() {
            h = ctx.g.concat(&[h, skips[i]], 1)?;
            h = ctx.res_block(&format!("up.{i}.res"), h, temb)?;
            h = ctx.attn_block(&format!("up.{i}"), h, context)?;
            if i > 0 {
                h = ctx.g.upsample2x(h)?;
                h = ctx.conv(&format!("up.{i}.upsample"), h, 1)?;
            }
        }
        h = ctx.norm("out.norm", h)?;
        h = ctx.g.silu(h);
        let v = ctx.conv("out.conv", h, 1)?;

        let coef = |f: fn(f64) -> f64| {
            Tensor::new(vec![t.len(), 1, 1, 1], t.iter().map(|&s| S::from_f64c(f(sched.alpha_bar[s]))).collect())
        };
        let skip = ctx.g.constant(coef(|ab| (1.0 - ab).sqrt())?);
        let gain = ctx.g.constant(coef(|ab| ab.sqrt())?);
        let xs = ctx.g.mul(x_t, skip)?;
        let vs = ctx.g.mul(v, gain)?;
        Ok(ctx.g.add(xs, vs)?)
    }

    /// Forward pass without gradient tracking.
    pub fn predict<S: Real>(
        &self,
        params: &Params<S>,
        prompt: &[usize],
        x_t: &Tensor<S>,
        t: &[usize],
        sched: &NoiseSchedule,
    ) -> Result<Tensor<S>> {
        let mut g = Graph::new();
        let bound = params.bind(&mut g, |_| false);
        let ctx = text::context_var(&mut g, &bound, prompt)?;
        let x = g.constant(x_t.clone());
        let y = self.forward(&mut g, &bound, x, t, ctx, sched)?;
        Ok(g.value(y).clone())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(dims: &[usize], seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(dims, |_| rng.gen_range(-1.0..1.0))
    }

    fn attention(f: &Tensor<f64>, c: &Tensor<f64>, seed: u64) -> (Tensor<f64>, Tensor<f64>, [Tensor<f64>; 4]) {
        let (l, d, da) = (f.dims()[1], c.dims()[1], 3);
        let w = [rand_tensor(&[l, da], seed), rand_tensor(&[d, da], seed + 1), rand_tensor(&[d, da], seed + 2), rand_tensor(&[da, l], seed + 3)];
        let mut g = Graph::new();
        let (fv, cv) = (g.constant(f.clone()), g.constant(c.clone()));
        let vars = AttnVars {
            to_q: g.constant(w[0].clone()),
            to_k: g.constant(w[1].clone()),
            to_v: g.constant(w[2].clone()),
            out_w: g.constant(w[3].clone()),
            out_b: None,
        };
        let (o, a) = cross_attention(&mut g, fv, cv, vars).unwrap();
        (g.value(o).clone(), g.value(a).clone(), w)
    }

    fn dot_rows(a: &Tensor<f64>, i: usize, m: &Tensor<f64>, j: usize) -> f64 {
        // row i of `a` times column j of `m`
        let k = a.dims()[1];
        (0..k).map(|r| a.data()[i * k + r] * m.data()[r * m.dims()[1] + j]).sum()
    }

    #[test]
    fn attention_matches_scalar_loops() {
        let f = rand_tensor(&[5, 4], 1);
        let c = rand_tensor(&[3, 6], 2);
        let (out, weights, [wq, wk, wv, wo]) = attention(&f, &c, 10);
        let da = 3;
        for p in 0..5 {
            let q: Vec<f64> = (0..da).map(|j| dot_rows(&f, p, &wq, j)).collect();
            let logits: Vec<f64> = (0..3)
                .map(|s| (0..da).map(|j| q[j] * dot_rows(&c, s, &wk, j)).sum::<f64>() / (da as f64).sqrt())
                .collect();
            let m = logits.iter().cloned().fold(f64::MIN, f64::max);
            let z: f64 = logits.iter().map(|v| (v - m).exp()).sum();
            let a: Vec<f64> = logits.iter().map(|v| (v - m).exp() / z).collect();
            let mixed: Vec<f64> = (0..da).map(|j| (0..3).map(|s| a[s] * dot_rows(&c, s, &wv, j)).sum()).collect();
            for o in 0..4 {
                let want: f64 = (0..da).map(|j| mixed[j] * wo.data()[j * 4 + o]).sum();
                assert!((out.data()[p * 4 + o] - want).abs() < 1e-12);
            }
            for s in 0..3 {
                assert!((weights.data()[p * 3 + s] - a[s]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn attention_rows_sum_to_one() {
        for seed in 0..5 {
            let (_, w, _) = attention(&rand_tensor(&[7, 4], seed), &rand_tensor(&[5, 6], seed + 50), seed);
            for row in w.data().chunks(5) {
                assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn single_token_context_gives_its_value_everywhere() {
        let c = rand_tensor(&[1, 6], 3);
        let (out, w, [_, _, wv, wo]) = attention(&rand_tensor(&[4, 4], 4), &c, 20);
        assert!(w.data().iter().all(|&v| v == 1.0));
        let v: Vec<f64> = (0..3).map(|j| dot_rows(&c, 0, &wv, j)).collect();
        for p in 0..4 {
            for o in 0..4 {
                let want: f64 = (0..3).map(|j| v[j] * wo.data()[j * 4 + o]).sum();
                assert!((out.data()[p * 4 + o] - want).abs() < 1e-12);
            }
        }
    }

    fn tiny() -> (UNet, Params<f64>, NoiseSchedule) {
        let net = UNet::new(UNetConfig::tiny()).unwrap();
        let p = net.init_params::<f64, _>(25, &mut ChaCha8Rng::seed_from_u64(7)).unwrap();
        (net, p, NoiseSchedule::linear(10, 1e-3, 0.2).unwrap())
    }

    #[test]
    fn output_has_input_dims_and_is_deterministic() {
        let (net, p, sched) = tiny();
        let x = rand_tensor(&[3, 3, 8, 8], 5);
        let a = net.predict(&p, &[0, 1, 2], &x, &[0, 4, 9], &sched).unwrap();
        let b = net.predict(&p, &[0, 1, 2], &x, &[0, 4, 9], &sched).unwrap();
        assert_eq!(a.dims(), x.dims());
        assert_eq!(a, b);
    }

    #[test]
    fn zero_output_layer_leaves_only_the_skip() {
        let (net, mut p, sched) = tiny();
        for name in ["out.conv.weight", "out.conv.bias"] {
            p.get_mut(name).unwrap().data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        let x = rand_tensor(&[2, 3, 8, 8], 6);
        let t = [3, 8];
        let y = net.predict(&p, &[1], &x, &t, &sched).unwrap();
        let per = 3 * 64;
        for (i, (&yv, &xv)) in y.data().iter().zip(x.data()).enumerate() {
            let k = (1.0 - sched.alpha_bar[t[i / per]]).sqrt();
            assert!((yv - k * xv).abs() < 1e-12);
        }
    }

    #[test]
    fn batch_order_is_equivariant() {
        let (net, p, sched) = tiny();
        let x = rand_tensor(&[3, 3, 8, 8], 8);
        let t = [1, 5, 9];
        let y = net.predict(&p, &[2, 3], &x, &t, &sched).unwrap();
        let perm = [2, 0, 1];
        let xp = x.select_outer(&perm).unwrap();
        let tp: Vec<usize> = perm.iter().map(|&i| t[i]).collect();
        let yp = net.predict(&p, &[2, 3], &xp, &tp, &sched).unwrap();
        let want = y.select_outer(&perm).unwrap();
        for (a, b) in yp.data().iter().zip(want.data()) {
            assert!((a - b).abs() < 1e-10);
        }
    }

    #[test]
    fn bad_inputs_are_rejected() {
        let (net, p, sched) = tiny();
        let x = rand_tensor(&[1, 3, 8, 8], 9);
        assert!(net.predict(&p, &[0], &x, &[10], &sched).is_err());
        assert!(net.predict(&p, &[0], &x, &[0, 1], &sched).is_err());
        assert!(net.predict(&p, &[0], &rand_tensor(&[1, 2, 8, 8], 1), &[0], &sched).is_err());
        assert!(UNet::new(UNetConfig { image_size: 7, channels: vec![4, 8], ..UNetConfig::tiny() }).is_err());
    }

    #[test]
    fn key_value_subset_names_every_block() {
        let (net, p, _) = tiny();
        let kv = p.select(crate::diffusion::params::ParamSubset::KvCrossAttention);
        let blocks = 2 * net.config.channels.len() + 1;
        assert_eq!(kv.len(), 2 * blocks);
        assert!(kv.iter().all(|n| n.ends_with(".attn.to_k") || n.ends_with(".attn.to_v")));
    }
}
