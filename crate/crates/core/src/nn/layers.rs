use rand::Rng;

use super::{gemm, Act, Grads, Init, MatMut, MatRef, ParamId, ParamStore, Scalar};

#[derive(Debug, Clone)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub cin: usize,
    pub cout: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: usize,
        stride: usize,
        zero_init: bool,
        rng: &mut R,
    ) -> Self {
        let fan_in = cin * kernel * kernel;
        let init = if zero_init { Init::Zeros } else { Init::FanInUniform(fan_in) };
        let weight = store.add(format!("{name}.weight"), &[cout, cin, kernel, kernel], init, rng);
        let bias = store.add(format!("{name}.bias"), &[cout], Init::Zeros, rng);
        Self {
            weight,
            bias,
            cin,
            cout,
            kernel,
            stride,
            pad: kernel / 2,
        }
    }

    pub fn out_hw(&self, h: usize, w: usize) -> (usize, usize) {
        (
            (h + 2 * self.pad - self.kernel) / self.stride + 1,
            (w + 2 * self.pad - self.kernel) / self.stride + 1,
        )
    }

    fn is_pointwise(&self) -> bool {
        self.kernel == 1 && self.stride == 1 && self.pad == 0
    }

    /// Output columns `[lo, hi)` whose tap `kx` lands inside a row of width `w`.
    fn valid_ox(&self, kx: usize, w: usize, ow: usize) -> (usize, usize) {
        let (s, p) = (self.stride, self.pad);
        let lo = if kx >= p { 0 } else { (p - kx).div_ceil(s) };
        let hi = if w + p > kx { ((w + p - kx - 1) / s + 1).min(ow) } else { 0 };
        (lo, hi.max(lo))
    }

    fn im2col<T: Scalar>(&self, x: &[T], h: usize, w: usize, col: &mut [T]) {
        let (oh, ow) = self.out_hw(h, w);
        let k = self.kernel;
        let (s, p) = (self.stride, self.pad);
        let ohw = oh * ow;
        for ci in 0..self.cin {
            let plane = &x[ci * h * w..(ci + 1) * h * w];
            for ky in 0..k {
                for kx in 0..k {
                    let (lo, hi) = self.valid_ox(kx, w, ow);
                    let row = &mut col[((ci * k + ky) * k + kx) * ohw..][..ohw];
                    for oy in 0..oh {
                        let dst = &mut row[oy * ow..(oy + 1) * ow];
                        let iy = (oy * s + ky).wrapping_sub(p);
                        if iy >= h {
                            dst.fill(T::zero());
                            continue;
                        }
                        let src = &plane[iy * w..(iy + 1) * w];
                        dst[..lo].fill(T::zero());
                        dst[hi..].fill(T::zero());
                        if hi > lo {
                            let ix0 = lo * s + kx - p;
                            if s == 1 {
                                dst[lo..hi].copy_from_slice(&src[ix0..ix0 + hi - lo]);
                            } else {
                                for (j, d) in dst[lo..hi].iter_mut().enumerate() {
                                    *d = src[ix0 + j * s];
                                }
                            }
                        }
                    }
                }
            }
        }
    }

    fn col2im<T: Scalar>(&self, col: &[T], h: usize, w: usize, dx: &mut [T]) {
        let (oh, ow) = self.out_hw(h, w);
        let k = self.kernel;
        let (s, p) = (self.stride, self.pad);
        let ohw = oh * ow;
        for ci in 0..self.cin {
            let plane = &mut dx[ci * h * w..(ci + 1) * h * w];
            for ky in 0..k {
                for kx in 0..k {
                    let (lo, hi) = self.valid_ox(kx, w, ow);
                    if hi == lo {
                        continue;
                    }
                    let ix0 = lo * s + kx - p;
                    let row = &col[((ci * k + ky) * k + kx) * ohw..][..ohw];
                    for oy in 0..oh {
                        let iy = (oy * s + ky).wrapping_sub(p);
                        if iy >= h {
                            continue;
                        }
                        let dst = &mut plane[iy * w..(iy + 1) * w];
                        let src = &row[oy * ow + lo..oy * ow + hi];
                        for (j, &g) in src.iter().enumerate() {
                            let d = &mut dst[ix0 + j * s];
                            *d = *d + g;
                        }
                    }
                }
            }
        }
    }

    pub fn forward<T: Scalar>(&self, p: &ParamStore<T>, x: &Act<T>) -> Act<T> {
        assert_eq!(x.c, self.cin, "conv input channels");
        let (oh, ow) = self.out_hw(x.h, x.w);
        let ohw = oh * ow;
        let ckk = self.cin * self.kernel * self.kernel;
        let (wt, b) = (p.get(self.weight), p.get(self.bias));
        let mut y = Act::zeros(x.n, self.cout, oh, ow);
        let mut col = if self.is_pointwise() { Vec::new() } else { vec![T::zero(); ckk * ohw] };
        for i in 0..x.n {
            let xs = x.sample(i);
            let cols: &[T] = if self.is_pointwise() {
                xs
            } else {
                self.im2col(xs, x.h, x.w, &mut col);
                &col
            };
            let ys = y.sample_mut(i);
            for (co, row) in ys.chunks_exact_mut(ohw).enumerate() {
                row.fill(b[co]);
            }
            gemm(
                T::one(),
                MatRef::new(wt, self.cout, ckk),
                MatRef::new(cols, ckk, ohw),
                T::one(),
                MatMut::new(ys, self.cout, ohw),
            );
        }
        y
    }

    /// Accumulates weight/bias gradients; returns ∂L/∂x when `need_dx`.
    pub fn backward<T: Scalar>(
        &self,
        p: &ParamStore<T>,
        g: &mut Grads<T>,
        x: &Act<T>,
        dy: &Act<T>,
        need_dx: bool,
    ) -> Option<Act<T>> {
        let (oh, ow) = self.out_hw(x.h, x.w);
        assert_eq!((dy.n, dy.c, dy.h, dy.w), (x.n, self.cout, oh, ow), "conv grad shape");
        let ohw = oh * ow;
        let ckk = self.cin * self.kernel * self.kernel;
        let wt = p.get(self.weight);
        let mut dx = need_dx.then(|| Act::zeros(x.n, x.c, x.h, x.w));
        let mut col = if self.is_pointwise() { Vec::new() } else { vec![T::zero(); ckk * ohw] };
        let mut dcol = if self.is_pointwise() || !need_dx { Vec::new() } else { vec![T::zero(); ckk * ohw] };
        for i in 0..x.n {
            let dys = dy.sample(i);
            {
                let db = g.get_mut(self.bias);
                for (co, row) in dys.chunks_exact(ohw).enumerate() {
                    db[co] = db[co] + row.iter().copied().sum::<T>();
                }
            }
            let xs = x.sample(i);
            let cols: &[T] = if self.is_pointwise() {
                xs
            } else {
                self.im2col(xs, x.h, x.w, &mut col);
                &col
            };
            gemm(
                T::one(),
                MatRef::new(dys, self.cout, ohw),
                MatRef::new(cols, ckk, ohw).t(),
                T::one(),
                MatMut::new(g.get_mut(self.weight), self.cout, ckk),
            );
            if let Some(dx) = dx.as_mut() {
                let dxs = dx.sample_mut(i);
                if self.is_pointwise() {
                    gemm(
                        T::one(),
                        MatRef::new(wt, self.cout, ckk).t(),
                        MatRef::new(dys, self.cout, ohw),
                        T::zero(),
                        MatMut::new(dxs, ckk, ohw),
                    );
                } else {
                    gemm(
                        T::one(),
                        MatRef::new(wt, self.cout, ckk).t(),
                        MatRef::new(dys, self.cout, ohw),
                        T::zero(),
                        MatMut::new(&mut dcol, ckk, ohw),
                    );
                    self.col2im(&dcol, x.h, x.w, dxs);
                }
            }
        }
        dx
    }
}

#[derive(Debug, Clone)]
pub struct GroupNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub channels: usize,
    pub groups: usize,
    pub eps: f64,
}

#[derive(Debug, Clone)]
pub struct GroupNormCache<T> {
    xhat: Act<T>,
    rstd: Vec<T>,
}

impl GroupNorm {
    pub fn new<T: Scalar, R: Rng>(store: &mut ParamStore<T>, name: &str, channels: usize, groups: usize, rng: &mut R) -> Self {
        assert!(groups > 0 && channels.is_multiple_of(groups), "groups must divide channels");
        let gamma = store.add(format!("{name}.gamma"), &[channels], Init::Ones, rng);
        let beta = store.add(format!("{name}.beta"), &[channels], Init::Zeros, rng);
        Self {
            gamma,
            beta,
            channels,
            groups,
            eps: 1e-5,
        }
    }

    pub fn forward<T: Scalar>(&self, p: &ParamStore<T>, x: &Act<T>) -> (Act<T>, GroupNormCache<T>) {
        assert_eq!(x.c, self.channels, "group norm channels");
        let (gamma, beta) = (p.get(self.gamma), p.get(self.beta));
        let cpg = self.channels / self.groups;
        let hw = x.h * x.w;
        let glen = cpg * hw;
        let inv_n = T::from_f64_lossy(1.0 / glen as f64);
        let eps = T::from_f64_lossy(self.eps);
        let mut y = Act::zeros(x.n, x.c, x.h, x.w);
        let mut xhat = Act::zeros(x.n, x.c, x.h, x.w);
        let mut rstd = Vec::with_capacity(x.n * self.groups);
        for i in 0..x.n {
            for gi in 0..self.groups {
                let off = i * x.sample_len() + gi * glen;
                let xs = &x.data[off..off + glen];
                let mean = xs.iter().copied().sum::<T>() * inv_n;
                let var = xs.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_n;
                let r = T::one() / (var + eps).sqrt();
                rstd.push(r);
                for (j, &v) in xs.iter().enumerate() {
                    let c = gi * cpg + j / hw;
                    let xh = (v - mean) * r;
                    xhat.data[off + j] = xh;
                    y.data[off + j] = xh * gamma[c] + beta[c];
                }
            }
        }
        (y, GroupNormCache { xhat, rstd })
    }

    pub fn backward<T: Scalar>(&self, p: &ParamStore<T>, g: &mut Grads<T>, cache: &GroupNormCache<T>, dy: &Act<T>) -> Act<T> {
        let gamma = p.get(self.gamma);
        let xhat = &cache.xhat;
        let cpg = self.channels / self.groups;
        let hw = xhat.h * xhat.w;
        let glen = cpg * hw;
        let n_t = T::from_f64_lossy(glen as f64);
        let mut dgamma = vec![T::zero(); self.channels];
        let mut dbeta = vec![T::zero(); self.channels];
        let mut dx = Act::zeros(xhat.n, xhat.c, xhat.h, xhat.w);
        let mut dxhat = vec![T::zero(); glen];
        for i in 0..xhat.n {
            for gi in 0..self.groups {
                let off = i * xhat.sample_len() + gi * glen;
                let r = cache.rstd[i * self.groups + gi];
                let mut sum_d = T::zero();
                let mut sum_dx = T::zero();
                for j in 0..glen {
                    let c = gi * cpg + j / hw;
                    let d = dy.data[off + j];
                    let xh = xhat.data[off + j];
                    dgamma[c] = dgamma[c] + d * xh;
                    dbeta[c] = dbeta[c] + d;
                    let dh = d * gamma[c];
                    dxhat[j] = dh;
                    sum_d = sum_d + dh;
                    sum_dx = sum_dx + dh * xh;
                }
                let k = r / n_t;
                for j in 0..glen {
                    dx.data[off + j] = k * (n_t * dxhat[j] - sum_d - xhat.data[off + j] * sum_dx);
                }
            }
        }
        for (a, b) in g.get_mut(self.gamma).iter_mut().zip(dgamma) {
            *a = *a + b;
        }
        for (a, b) in g.get_mut(self.beta).iter_mut().zip(dbeta) {
            *a = *a + b;
        }
        dx
    }
}

/// Row-wise affine map `y = x·Wᵀ + b` over `rows × in` matrices.
#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub fan_in: usize,
    pub fan_out: usize,
}

impl Linear {
    pub fn new<T: Scalar, R: Rng>(store: &mut ParamStore<T>, name: &str, fan_in: usize, fan_out: usize, rng: &mut R) -> Self {
        let weight = store.add(format!("{name}.weight"), &[fan_out, fan_in], Init::FanInUniform(fan_in), rng);
        let bias = Some(store.add(format!("{name}.bias"), &[fan_out], Init::Zeros, rng));
        Self {
            weight,
            bias,
            fan_in,
            fan_out,
        }
    }

    /// For maps whose bias would be redundant downstream (attention keys).
    pub fn without_bias<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        rng: &mut R,
    ) -> Self {
        let weight = store.add(format!("{name}.weight"), &[fan_out, fan_in], Init::FanInUniform(fan_in), rng);
        Self {
            weight,
            bias: None,
            fan_in,
            fan_out,
        }
    }

    pub fn forward<T: Scalar>(&self, p: &ParamStore<T>, x: &[T], rows: usize) -> Vec<T> {
        assert_eq!(x.len(), rows * self.fan_in, "linear input size");
        let mut y: Vec<T> = match self.bias {
            Some(b) => (0..rows).flat_map(|_| p.get(b).iter().copied()).collect(),
            None => vec![T::zero(); rows * self.fan_out],
        };
        gemm(
            T::one(),
            MatRef::new(x, rows, self.fan_in),
            MatRef::new(p.get(self.weight), self.fan_out, self.fan_in).t(),
            T::one(),
            MatMut::new(&mut y, rows, self.fan_out),
        );
        y
    }

    pub fn backward<T: Scalar>(&self, p: &ParamStore<T>, g: &mut Grads<T>, x: &[T], dy: &[T], rows: usize) -> Vec<T> {
        if let Some(b) = self.bias {
            let db = g.get_mut(b);
            for row in dy.chunks_exact(self.fan_out) {
                for (a, &d) in db.iter_mut().zip(row) {
                    *a = *a + d;
                }
            }
        }
        gemm(
            T::one(),
            MatRef::new(dy, rows, self.fan_out).t(),
            MatRef::new(x, rows, self.fan_in),
            T::one(),
            MatMut::new(g.get_mut(self.weight), self.fan_out, self.fan_in),
        );
        let mut dx = vec![T::zero(); rows * self.fan_in];
        gemm(
            T::one(),
            MatRef::new(dy, rows, self.fan_out),
            MatRef::new(p.get(self.weight), self.fan_out, self.fan_in),
            T::zero(),
            MatMut::new(&mut dx, rows, self.fan_in),
        );
        dx
    }
}

#[inline]
fn sigmoid<T: Scalar>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

pub fn silu<T: Scalar>(x: &[T]) -> Vec<T> {
    x.iter().map(|&v| v * sigmoid(v)).collect()
}

/// `dy · d/dx[x·σ(x)]`, with `x` the forward input.
pub fn silu_backward<T: Scalar>(x: &[T], dy: &[T]) -> Vec<T> {
    x.iter()
        .zip(dy)
        .map(|(&v, &d)| {
            let s = sigmoid(v);
            d * s * (T::one() + v * (T::one() - s))
        })
        .collect()
}

pub fn concat_channels<T: Scalar>(a: &Act<T>, b: &Act<T>) -> Act<T> {
    assert_eq!((a.n, a.h, a.w), (b.n, b.h, b.w), "concat spatial shape");
    let mut out = Act::zeros(a.n, a.c + b.c, a.h, a.w);
    for i in 0..a.n {
        let la = a.sample_len();
        let dst = out.sample_mut(i);
        dst[..la].copy_from_slice(a.sample(i));
        dst[la..].copy_from_slice(b.sample(i));
    }
    out
}

pub fn split_channels<T: Scalar>(x: &Act<T>, first: usize) -> (Act<T>, Act<T>) {
    let mut a = Act::zeros(x.n, first, x.h, x.w);
    let mut b = Act::zeros(x.n, x.c - first, x.h, x.w);
    let la = a.sample_len();
    for i in 0..x.n {
        let src = x.sample(i);
        a.sample_mut(i).copy_from_slice(&src[..la]);
        b.sample_mut(i).copy_from_slice(&src[la..]);
    }
    (a, b)
}

pub fn upsample_nearest2x<T: Scalar>(x: &Act<T>) -> Act<T> {
    let (h2, w2) = (x.h * 2, x.w * 2);
    let mut out = Act::zeros(x.n, x.c, h2, w2);
    for (src, dst) in x.data.chunks_exact(x.h * x.w).zip(out.data.chunks_exact_mut(h2 * w2)) {
        for y in 0..h2 {
            for xx in 0..w2 {
                dst[y * w2 + xx] = src[(y / 2) * x.w + xx / 2];
            }
        }
    }
    out
}

pub fn upsample_nearest2x_backward<T: Scalar>(dy: &Act<T>) -> Act<T> {
    let (h, w) = (dy.h / 2, dy.w / 2);
    let mut dx = Act::zeros(dy.n, dy.c, h, w);
    for (src, dst) in dy.data.chunks_exact(dy.h * dy.w).zip(dx.data.chunks_exact_mut(h * w)) {
        for y in 0..dy.h {
            for xx in 0..dy.w {
                let d = &mut dst[(y / 2) * w + xx / 2];
                *d = *d + src[y * dy.w + xx];
            }
        }
    }
    dx
}

/// Space-to-depth: `c×h×w → (c·f²)×(h/f)×(w/f)`.
pub fn pixel_unshuffle<T: Scalar>(x: &Act<T>, f: usize) -> Act<T> {
    assert!(x.h.is_multiple_of(f) && x.w.is_multiple_of(f), "unshuffle factor must divide size");
    let (oh, ow) = (x.h / f, x.w / f);
    let mut out = Act::zeros(x.n, x.c * f * f, oh, ow);
    for i in 0..x.n {
        let src = x.sample(i);
        let dst = out.sample_mut(i);
        for c in 0..x.c {
            for y in 0..x.h {
                for xx in 0..x.w {
                    let oc = (c * f + y % f) * f + xx % f;
                    dst[(oc * oh + y / f) * ow + xx / f] = src[(c * x.h + y) * x.w + xx];
                }
            }
        }
    }
    out
}

/// Inverse of [`pixel_unshuffle`]; also its own adjoint's inverse, so it doubles as the backward pass.
pub fn pixel_shuffle<T: Scalar>(x: &Act<T>, f: usize) -> Act<T> {
    assert!(x.c.is_multiple_of(f * f), "shuffle factor must divide channels");
    let c = x.c / (f * f);
    let (h, w) = (x.h * f, x.w * f);
    let mut out = Act::zeros(x.n, c, h, w);
    for i in 0..x.n {
        let src = x.sample(i);
        let dst = out.sample_mut(i);
        for ch in 0..c {
            for y in 0..h {
                for xx in 0..w {
                    let ic = (ch * f + y % f) * f + xx % f;
                    dst[(ch * h + y) * w + xx] = src[(ic * x.h + y / f) * x.w + xx / f];
                }
            }
        }
    }
    out
}
