use crate::tensor::Real;

pub(crate) fn split_axis(d: &[usize], axis: usize) -> (usize, usize, usize) {
    (
        d[..axis].iter().product(),
        d[axis],
        d[axis + 1..].iter().product(),
    )
}

fn strides(d: &[usize]) -> Vec<usize> {
    let mut s = vec![1; d.len()];
    for i in (0..d.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * d[i + 1];
    }
    s
}

/// Right-aligned broadcasting between two operands.
pub(crate) struct Broadcast {
    pub out_dims: Vec<usize>,
    same: bool,
    sa: Vec<usize>,
    sb: Vec<usize>,
}

impl Broadcast {
    pub fn new(a: &[usize], b: &[usize]) -> Option<Self> {
        if a == b {
            return Some(Self {
                out_dims: a.to_vec(),
                same: true,
                sa: vec![],
                sb: vec![],
            });
        }
        let n = a.len().max(b.len());
        let pad = |d: &[usize]| {
            let mut p = vec![1; n - d.len()];
            p.extend_from_slice(d);
            p
        };
        let (pa, pb) = (pad(a), pad(b));
        let mut out = Vec::with_capacity(n);
        for i in 0..n {
            match (pa[i], pb[i]) {
                (x, y) if x == y => out.push(x),
                (1, y) => out.push(y),
                (x, 1) => out.push(x),
                _ => return None,
            }
        }
        let bstrides = |p: &[usize]| {
            let s = strides(p);
            p.iter()
                .zip(&out)
                .zip(s)
                .map(|((&e, &o), s)| if e == 1 && o != 1 { 0 } else { s })
                .collect::<Vec<_>>()
        };
        Some(Self {
            sa: bstrides(&pa),
            sb: bstrides(&pb),
            out_dims: out,
            same: false,
        })
    }

    /// Calls `f(out_index, a_offset, b_offset)` for every output element.
    fn for_each(&self, mut f: impl FnMut(usize, usize, usize)) {
        let n = self.out_dims.len();
        let last = self.out_dims[n - 1];
        let (la, lb) = (self.sa[n - 1], self.sb[n - 1]);
        let outer: usize = self.out_dims[..n - 1].iter().product();
        let mut idx = vec![0usize; n - 1];
        let (mut ao, mut bo) = (0usize, 0usize);
        let mut i = 0;
        for _ in 0..outer {
            for j in 0..last {
                f(i, ao + j * la, bo + j * lb);
                i += 1;
            }
            // advance odometer over leading axes
            for ax in (0..n - 1).rev() {
                idx[ax] += 1;
                ao += self.sa[ax];
                bo += self.sb[ax];
                if idx[ax] < self.out_dims[ax] {
                    break;
                }
                ao -= self.sa[ax] * idx[ax];
                bo -= self.sb[ax] * idx[ax];
                idx[ax] = 0;
            }
        }
    }

    pub fn apply<S: Real>(&self, a: &[S], b: &[S], f: impl Fn(S, S) -> S) -> Vec<S> {
        if self.same {
            return a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect();
        }
        let mut out = vec![S::zero(); self.out_dims.iter().product()];
        self.for_each(|i, ao, bo| out[i] = f(a[ao], b[bo]));
        out
    }

    pub fn reduce_lhs<S: Real>(&self, g: &[S], ga: &mut [S], f: impl Fn(S) -> S) {
        if self.same {
            ga.iter_mut().zip(g).for_each(|(o, &v)| *o += f(v));
            return;
        }
        self.for_each(|i, ao, _| ga[ao] += f(g[i]));
    }

    pub fn reduce_rhs<S: Real>(&self, g: &[S], gb: &mut [S], f: impl Fn(S) -> S) {
        if self.same {
            gb.iter_mut().zip(g).for_each(|(o, &v)| *o += f(v));
            return;
        }
        self.for_each(|i, _, bo| gb[bo] += f(g[i]));
    }

    pub fn reduce_lhs_mul<S: Real>(&self, g: &[S], b: &[S], ga: &mut [S]) {
        if self.same {
            for ((o, &v), &y) in ga.iter_mut().zip(g).zip(b) {
                *o += v * y;
            }
            return;
        }
        self.for_each(|i, ao, bo| ga[ao] += g[i] * b[bo]);
    }

    pub fn reduce_rhs_mul<S: Real>(&self, g: &[S], a: &[S], gb: &mut [S]) {
        if self.same {
            for ((o, &v), &x) in gb.iter_mut().zip(g).zip(a) {
                *o += v * x;
            }
            return;
        }
        self.for_each(|i, ao, bo| gb[bo] += g[i] * a[ao]);
    }
}

pub(crate) fn permute<S: Real>(d: &[usize], src: &[S], axes: &[usize]) -> (Vec<usize>, Vec<S>) {
    let in_strides = strides(d);
    let out_dims: Vec<usize> = axes.iter().map(|&a| d[a]).collect();
    let st: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
    let n = out_dims.len();
    let mut out = Vec::with_capacity(src.len());
    let mut idx = vec![0usize; n];
    let mut off = 0usize;
    for _ in 0..src.len() {
        out.push(src[off]);
        for ax in (0..n).rev() {
            idx[ax] += 1;
            off += st[ax];
            if idx[ax] < out_dims[ax] {
                break;
            }
            off -= st[ax] * idx[ax];
            idx[ax] = 0;
        }
    }
    (out_dims, out)
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct ConvGeom {
    n: usize,
    ci: usize,
    h: usize,
    w: usize,
    co: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
}

impl ConvGeom {
    pub fn new(x: &[usize], w: &[usize], stride: usize, pad: usize) -> Option<Self> {
        let (hp, wp) = (x[2] + 2 * pad, x[3] + 2 * pad);
        if hp < w[2] || wp < w[3] || stride == 0 {
            return None;
        }
        Some(Self {
            n: x[0],
            ci: x[1],
            h: x[2],
            w: x[3],
            co: w[0],
            kh: w[2],
            kw: w[3],
            stride,
            pad,
            ho: (hp - w[2]) / stride + 1,
            wo: (wp - w[3]) / stride + 1,
        })
    }

    pub fn out_dims(&self) -> Vec<usize> {
        vec![self.n, self.co, self.ho, self.wo]
    }

    fn k(&self) -> usize {
        self.ci * self.kh * self.kw
    }

    fn p(&self) -> usize {
        self.ho * self.wo
    }

    fn pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad == 0
    }

    fn im2col<S: Real>(&self, x: &[S], col: &mut [S]) {
        let (h, w, ho, wo, s) = (self.h as isize, self.w as isize, self.ho, self.wo, self.stride as isize);
        let pad = self.pad as isize;
        for c in 0..self.ci {
            let plane = &x[c * self.h * self.w..(c + 1) * self.h * self.w];
            for ki in 0..self.kh {
                for kj in 0..self.kw {
                    let row = &mut col[((c * self.kh + ki) * self.kw + kj) * ho * wo..][..ho * wo];
                    for oy in 0..ho {
                        let iy = oy as isize * s + ki as isize - pad;
                        let dst = &mut row[oy * wo..(oy + 1) * wo];
                        if iy < 0 || iy >= h {
                            dst.iter_mut().for_each(|v| *v = S::zero());
                            continue;
                        }
                        let src = &plane[iy as usize * self.w..(iy as usize + 1) * self.w];
                        for (ox, d) in dst.iter_mut().enumerate() {
                            let ix = ox as isize * s + kj as isize - pad;
                            *d = if ix < 0 || ix >= w { S::zero() } else { src[ix as usize] };
                        }
                    }
                }
            }
        }
    }

    fn col2im<S: Real>(&self, col: &[S], gx: &mut [S]) {
        let (h, w, ho, wo, s) = (self.h as isize, self.w as isize, self.ho, self.wo, self.stride as isize);
        let pad = self.pad as isize;
        for c in 0..self.ci {
            let plane = &mut gx[c * self.h * self.w..(c + 1) * self.h * self.w];
            for ki in 0..self.kh {
                for kj in 0..self.kw {
                    let row = &col[((c * self.kh + ki) * self.kw + kj) * ho * wo..][..ho * wo];
                    for oy in 0..ho {
                        let iy = oy as isize * s + ki as isize - pad;
                        if iy < 0 || iy >= h {
                            continue;
                        }
                        let dst = &mut plane[iy as usize * self.w..(iy as usize + 1) * self.w];
                        for ox in 0..wo {
                            let ix = ox as isize * s + kj as isize - pad;
                            if ix >= 0 && ix < w {
                                dst[ix as usize] += row[oy * wo + ox];
                            }
                        }
                    }
                }
            }
        }
    }
}

pub(crate) fn conv2d_forward<S: Real>(geo: &ConvGeom, x: &[S], w: &[S], bias: Option<&[S]>) -> Vec<S> {
    let (k, p, co) = (geo.k(), geo.p(), geo.co);
    let in_sz = geo.ci * geo.h * geo.w;
    let mut out = vec![S::zero(); geo.n * co * p];
    let mut col = if geo.pointwise() { Vec::new() } else { vec![S::zero(); k * p] };
    for n in 0..geo.n {
        let xs = &x[n * in_sz..(n + 1) * in_sz];
        let cols: &[S] = if geo.pointwise() {
            xs
        } else {
            geo.im2col(xs, &mut col);
            &col
        };
        let o = &mut out[n * co * p..(n + 1) * co * p];
        if let Some(b) = bias {
            for (c, &bc) in b.iter().enumerate() {
                o[c * p..(c + 1) * p].iter_mut().for_each(|v| *v = bc);
            }
        }
        let beta = if bias.is_some() { S::one() } else { S::zero() };
        S::gemm(co, k, p, S::one(), w, k as isize, 1, cols, p as isize, 1, beta, o, p as isize, 1);
    }
    out
}

pub(crate) fn conv2d_bias_grad<S: Real>(geo: &ConvGeom, g: &[S], gb: &mut [S]) {
    let p = geo.p();
    for n in 0..geo.n {
        for c in 0..geo.co {
            gb[c] += g[(n * geo.co + c) * p..(n * geo.co + c + 1) * p].iter().copied().sum::<S>();
        }
    }
}

pub(crate) fn conv2d_backward<S: Real>(
    geo: &ConvGeom,
    x: &[S],
    w: &[S],
    g: &[S],
    mut gx: Option<&mut [S]>,
    mut gw: Option<&mut [S]>,
) {
    let (k, p, co) = (geo.k(), geo.p(), geo.co);
    let in_sz = geo.ci * geo.h * geo.w;
    let mut col = if geo.pointwise() || gw.is_none() { Vec::new() } else { vec![S::zero(); k * p] };
    let mut dcol = if geo.pointwise() || gx.is_none() { Vec::new() } else { vec![S::zero(); k * p] };
    for n in 0..geo.n {
        let gn = &g[n * co * p..(n + 1) * co * p];
        if let Some(gw) = gw.as_deref_mut() {
            let xs = &x[n * in_sz..(n + 1) * in_sz];
            let cols: &[S] = if geo.pointwise() {
                xs
            } else {
                geo.im2col(xs, &mut col);
                &col
            };
            // gw += gn . cols^T
            S::gemm(co, p, k, S::one(), gn, p as isize, 1, cols, 1, p as isize, S::one(), gw, k as isize, 1);
        }
        if let Some(gx) = gx.as_deref_mut() {
            let gxs = &mut gx[n * in_sz..(n + 1) * in_sz];
            if geo.pointwise() {
                S::gemm(k, co, p, S::one(), w, 1, k as isize, gn, p as isize, 1, S::one(), gxs, p as isize, 1);
            } else {
                S::gemm(k, co, p, S::one(), w, 1, k as isize, gn, p as isize, 1, S::zero(), &mut dcol, p as isize, 1);
                geo.col2im(&dcol, gxs);
            }
        }
    }
}
