use rand::Rng;

use super::{gemm, Act, Conv2d, Grads, GroupNorm, GroupNormCache, Linear, MatMut, MatRef, ParamStore, Scalar};

/// `len × dim` token matrix, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenSeq<T> {
    pub len: usize,
    pub dim: usize,
    pub data: Vec<T>,
}

impl<T: Scalar> TokenSeq<T> {
    pub fn new(len: usize, dim: usize, data: Vec<T>) -> Self {
        assert_eq!(data.len(), len * dim, "token matrix size");
        Self { len, dim, data }
    }
}

/// Residual cross-attention from spatial features (queries) to a token
/// sequence (keys/values).
#[derive(Debug, Clone)]
pub struct CrossAttention {
    norm: GroupNorm,
    to_q: Conv2d,
    to_k: Linear,
    to_v: Linear,
    to_out: Conv2d,
    channels: usize,
    heads: usize,
}

pub struct CrossAttentionCache<T> {
    norm: GroupNormCache<T>,
    xn: Act<T>,
    q: Act<T>,
    tokens: Vec<TokenSeq<T>>,
    keys: Vec<Vec<T>>,
    values: Vec<Vec<T>>,
    /// Per sample, per head: `len × positions` attention weights.
    weights: Vec<Vec<Vec<T>>>,
    attended: Act<T>,
}

impl CrossAttention {
    pub fn new<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        name: &str,
        channels: usize,
        token_dim: usize,
        heads: usize,
        groups: usize,
        rng: &mut R,
    ) -> Self {
        assert!(heads > 0 && channels.is_multiple_of(heads), "heads must divide channels");
        Self {
            norm: GroupNorm::new(store, &format!("{name}.norm"), channels, groups, rng),
            to_q: Conv2d::new(store, &format!("{name}.to_q"), channels, channels, 1, 1, false, rng),
            to_k: Linear::without_bias(store, &format!("{name}.to_k"), token_dim, channels, rng),
            to_v: Linear::new(store, &format!("{name}.to_v"), token_dim, channels, rng),
            to_out: Conv2d::new(store, &format!("{name}.to_out"), channels, channels, 1, 1, false, rng),
            channels,
            heads,
        }
    }

    fn head_dim(&self) -> usize {
        self.channels / self.heads
    }

    pub fn forward<T: Scalar>(
        &self,
        p: &ParamStore<T>,
        x: &Act<T>,
        tokens: &[&TokenSeq<T>],
    ) -> (Act<T>, CrossAttentionCache<T>) {
        assert_eq!(tokens.len(), x.n, "one token sequence per sample");
        let (c, dh, pos) = (self.channels, self.head_dim(), x.h * x.w);
        let scale = T::from_f64_lossy(1.0 / (dh as f64).sqrt());
        let (xn, norm) = self.norm.forward(p, x);
        let q = self.to_q.forward(p, &xn);
        let mut attended = Act::zeros(x.n, c, x.h, x.w);
        let mut keys = Vec::with_capacity(x.n);
        let mut values = Vec::with_capacity(x.n);
        let mut weights = Vec::with_capacity(x.n);
        for (i, tok) in tokens.iter().enumerate() {
            let l = tok.len;
            let k = self.to_k.forward(p, &tok.data, l);
            let v = self.to_v.forward(p, &tok.data, l);
            let qs = q.sample(i);
            let os = attended.sample_mut(i);
            let mut per_head = Vec::with_capacity(self.heads);
            for hd in 0..self.heads {
                let mut s = vec![T::zero(); l * pos];
                gemm(
                    scale,
                    MatRef::strided(&k[hd * dh..], l, dh, c, 1),
                    MatRef::new(&qs[hd * dh * pos..(hd + 1) * dh * pos], dh, pos),
                    T::zero(),
                    MatMut::new(&mut s, l, pos),
                );
                softmax_columns(&mut s, l, pos);
                gemm(
                    T::one(),
                    MatRef::strided(&v[hd * dh..], l, dh, c, 1).t(),
                    MatRef::new(&s, l, pos),
                    T::zero(),
                    MatMut::new(&mut os[hd * dh * pos..(hd + 1) * dh * pos], dh, pos),
                );
                per_head.push(s);
            }
            keys.push(k);
            values.push(v);
            weights.push(per_head);
        }
        let mut y = self.to_out.forward(p, &attended);
        y.add_assign(x);
        let cache = CrossAttentionCache {
            norm,
            xn,
            q,
            tokens: tokens.iter().map(|t| (*t).clone()).collect(),
            keys,
            values,
            weights,
            attended,
        };
        (y, cache)
    }

    /// Returns `(∂L/∂x, ∂L/∂tokens)`.
    pub fn backward<T: Scalar>(
        &self,
        p: &ParamStore<T>,
        g: &mut Grads<T>,
        cache: &CrossAttentionCache<T>,
        dy: &Act<T>,
    ) -> (Act<T>, Vec<Vec<T>>) {
        let (c, dh) = (self.channels, self.head_dim());
        let pos = dy.h * dy.w;
        let scale = T::from_f64_lossy(1.0 / (dh as f64).sqrt());
        let d_att = self
            .to_out
            .backward(p, g, &cache.attended, dy, true)
            .expect("dx requested");
        let mut dq = Act::zeros(dy.n, c, dy.h, dy.w);
        let mut dtokens = Vec::with_capacity(dy.n);
        for i in 0..dy.n {
            let l = cache.tokens[i].len;
            let (k, v) = (&cache.keys[i], &cache.values[i]);
            let qs = cache.q.sample(i);
            let dos = d_att.sample(i);
            let dqs = dq.sample_mut(i);
            let mut dk = vec![T::zero(); l * c];
            let mut dv = vec![T::zero(); l * c];
            for hd in 0..self.heads {
                let a = &cache.weights[i][hd];
                let do_h = &dos[hd * dh * pos..(hd + 1) * dh * pos];
                // dA = V_h · dO_h
                let mut da = vec![T::zero(); l * pos];
                gemm(
                    T::one(),
                    MatRef::strided(&v[hd * dh..], l, dh, c, 1),
                    MatRef::new(do_h, dh, pos),
                    T::zero(),
                    MatMut::new(&mut da, l, pos),
                );
                // dV_h += A · dO_hᵀ
                gemm(
                    T::one(),
                    MatRef::new(a, l, pos),
                    MatRef::new(do_h, dh, pos).t(),
                    T::one(),
                    MatMut::strided(&mut dv[hd * dh..], l, dh, c, 1),
                );
                // softmax backward, column-wise
                for j in 0..pos {
                    let mut dot = T::zero();
                    for r in 0..l {
                        dot = dot + a[r * pos + j] * da[r * pos + j];
                    }
                    for r in 0..l {
                        da[r * pos + j] = a[r * pos + j] * (da[r * pos + j] - dot);
                    }
                }
                let ds = da;
                gemm(
                    scale,
                    MatRef::new(&ds, l, pos),
                    MatRef::new(&qs[hd * dh * pos..(hd + 1) * dh * pos], dh, pos).t(),
                    T::one(),
                    MatMut::strided(&mut dk[hd * dh..], l, dh, c, 1),
                );
                gemm(
                    scale,
                    MatRef::strided(&k[hd * dh..], l, dh, c, 1).t(),
                    MatRef::new(&ds, l, pos),
                    T::zero(),
                    MatMut::new(&mut dqs[hd * dh * pos..(hd + 1) * dh * pos], dh, pos),
                );
            }
            let tok = &cache.tokens[i];
            let mut dt = self.to_k.backward(p, g, &tok.data, &dk, l);
            let dt_v = self.to_v.backward(p, g, &tok.data, &dv, l);
            for (a, b) in dt.iter_mut().zip(dt_v) {
                *a = *a + b;
            }
            dtokens.push(dt);
        }
        let dxn = self.to_q.backward(p, g, &cache.xn, &dq, true).expect("dx requested");
        let mut dx = self.norm.backward(p, g, &cache.norm, &dxn);
        dx.add_assign(dy);
        (dx, dtokens)
    }
}

/// Softmax over rows, independently for each column of a `rows × cols` matrix.
fn softmax_columns<T: Scalar>(s: &mut [T], rows: usize, cols: usize) {
    for j in 0..cols {
        let mut m = T::neg_infinity();
        for r in 0..rows {
            m = m.max(s[r * cols + j]);
        }
        let mut z = T::zero();
        for r in 0..rows {
            let e = (s[r * cols + j] - m).exp();
            s[r * cols + j] = e;
            z = z + e;
        }
        for r in 0..rows {
            s[r * cols + j] = s[r * cols + j] / z;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn loss(att: &CrossAttention, p: &ParamStore<f64>, x: &Act<f64>, toks: &[TokenSeq<f64>], probe: &[f64]) -> f64 {
        let refs: Vec<&TokenSeq<f64>> = toks.iter().collect();
        att.forward(p, x, &refs).0.data.iter().zip(probe).map(|(a, b)| a * b).sum()
    }

    #[test]
    fn gradients_match_central_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let mut store = ParamStore::<f64>::new();
        let att = CrossAttention::new(&mut store, "a", 4, 3, 2, 2, &mut rng);
        let x = Act::from_vec(2, 4, 3, 3, (0..72).map(|_| rng.random_range(-1.0..1.0)).collect());
        let toks = vec![
            TokenSeq::new(2, 3, (0..6).map(|_| rng.random_range(-1.0..1.0)).collect()),
            TokenSeq::new(3, 3, (0..9).map(|_| rng.random_range(-1.0..1.0)).collect()),
        ];
        let probe: Vec<f64> = (0..72).map(|_| rng.random_range(-1.0..1.0)).collect();
        let refs: Vec<&TokenSeq<f64>> = toks.iter().collect();
        let (_, cache) = att.forward(&store, &x, &refs);
        let mut g = store.zero_grads();
        let (dx, dt) = att.backward(&store, &mut g, &cache, &Act::from_vec(2, 4, 3, 3, probe.clone()));
        let h = 1e-6;
        let close = |fd: f64, a: f64| (fd - a).abs() <= 1e-6 * fd.abs().max(a.abs()).max(1.0);
        for j in 0..72 {
            let mut xp = x.clone();
            xp.data[j] += h;
            let up = loss(&att, &store, &xp, &toks, &probe);
            xp.data[j] -= 2.0 * h;
            let down = loss(&att, &store, &xp, &toks, &probe);
            assert!(close((up - down) / (2.0 * h), dx.data[j]), "x[{j}]");
        }
        for (s, tok) in toks.iter().enumerate() {
            for j in 0..tok.data.len() {
                let mut tp = toks.clone();
                tp[s].data[j] += h;
                let up = loss(&att, &store, &x, &tp, &probe);
                tp[s].data[j] -= 2.0 * h;
                let down = loss(&att, &store, &x, &tp, &probe);
                assert!(close((up - down) / (2.0 * h), dt[s][j]), "tok[{s}][{j}]");
            }
        }
        for id in 0..store.len() {
            for j in 0..store.get(id).len() {
                let mut sp = store.clone();
                sp.get_mut(id)[j] += h;
                let up = loss(&att, &sp, &x, &toks, &probe);
                sp.get_mut(id)[j] -= 2.0 * h;
                let down = loss(&att, &sp, &x, &toks, &probe);
                assert!(close((up - down) / (2.0 * h), g.get(id)[j]), "{}[{j}]", store.entries()[id].name);
            }
        }
    }

    #[test]
    fn single_zero_token_gives_constant_update() {
        let mut rng = ChaCha8Rng::seed_from_u64(22);
        let mut store = ParamStore::<f64>::new();
        let att = CrossAttention::new(&mut store, "a", 4, 3, 2, 2, &mut rng);
        for id in [att.to_v.bias.unwrap(), att.to_out.bias] {
            for b in store.get_mut(id) {
                *b = rng.random_range(-1.0..1.0);
            }
        }
        let x = Act::from_vec(1, 4, 2, 2, (0..16).map(|_| rng.random_range(-1.0..1.0)).collect());
        let zero = TokenSeq::new(1, 3, vec![0.0; 3]);
        let (y, _) = att.forward(&store, &x, &[&zero]);
        // y − x must be the same at every spatial position
        for ch in 0..4 {
            let d0 = y.data[ch * 4] - x.data[ch * 4];
            for j in 1..4 {
                assert!((y.data[ch * 4 + j] - x.data[ch * 4 + j] - d0).abs() < 1e-12);
            }
        }
        // continuity in the token scale
        let dir = [0.3, -0.7, 1.1];
        let mut prev = f64::INFINITY;
        for s in [1e-1, 1e-2, 1e-3, 1e-4] {
            let tok = TokenSeq::new(1, 3, dir.iter().map(|d| d * s).collect());
            let (ys, _) = att.forward(&store, &x, &[&tok]);
            let diff = ys.data.iter().zip(&y.data).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            assert!(diff < prev);
            prev = diff;
        }
        assert!(prev < 1e-3);
    }
}
