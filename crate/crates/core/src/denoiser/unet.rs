use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{ConditioningBundle, MorphologyTokens, PatchEmbedder, TaskMode, VPredictor};
use crate::codec::ImageRgb;
use crate::diffusion::LatentGrid;
use crate::error::{Error, Result};
use crate::nn::{
    concat_channels, pixel_shuffle, pixel_unshuffle, silu, silu_backward, split_channels, upsample_nearest2x,
    upsample_nearest2x_backward, Act, Conv2d, CrossAttention, CrossAttentionCache, Grads, GroupNorm, GroupNormCache,
    Init, Linear, ParamId, ParamStore, Scalar, TokenSeq,
};

/// Architecture hyperparameters; immutable once a network is built.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct UnetConfig {
    pub latent_channels: usize,
    pub base_width: usize,
    /// Number of 2× downsamplings inside the U-Net body.
    pub levels: usize,
    pub token_dim: usize,
    pub heads: usize,
    pub norm_groups: usize,
    /// Space-to-depth factor applied to the input before the first convolution.
    pub patch: usize,
    pub time_dim: usize,
    /// Tile size of the morphology embedder.
    pub embed_patch: usize,
    pub embed_seed: u64,
}

impl Default for UnetConfig {
    fn default() -> Self {
        Self {
            latent_channels: 3,
            base_width: 32,
            levels: 2,
            token_dim: 64,
            heads: 4,
            norm_groups: 8,
            patch: 2,
            time_dim: 64,
            embed_patch: 16,
            embed_seed: 0x5eed,
        }
    }
}

impl UnetConfig {
    pub fn width(&self, level: usize) -> usize {
        if level == 0 {
            self.base_width
        } else {
            2 * self.base_width
        }
    }

    /// Spatial sizes must be multiples of this.
    pub fn size_multiple(&self) -> usize {
        self.patch << self.levels
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.latent_channels > 0
            && self.base_width > 0
            && self.token_dim > 0
            && self.heads > 0
            && self.norm_groups > 0
            && self.patch > 0
            && self.time_dim > 0
            && self.embed_patch > 0
            && self.base_width.is_multiple_of(self.norm_groups)
            && self.base_width.is_multiple_of(self.heads)
            && self.base_width.is_multiple_of(2);
        if !ok {
            return Err(Error::invalid(format!("inconsistent architecture {self:?}")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
struct ResBlock {
    norm1: GroupNorm,
    conv1: Conv2d,
    temb: Linear,
    norm2: GroupNorm,
    conv2: Conv2d,
    skip: Option<Conv2d>,
}

struct ResCache<T> {
    x: Act<T>,
    norm1: GroupNormCache<T>,
    a1: Act<T>,
    s1: Act<T>,
    norm2: GroupNormCache<T>,
    a2: Act<T>,
    s2: Act<T>,
}

fn map_act<T: Scalar>(x: &Act<T>, f: impl Fn(&[T]) -> Vec<T>) -> Act<T> {
    Act::from_vec(x.n, x.c, x.h, x.w, f(&x.data))
}

impl ResBlock {
    #[allow(clippy::too_many_arguments)]
    fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        cin: usize,
        cout: usize,
        time_dim: usize,
        groups: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        Self {
            norm1: GroupNorm::new(store, &format!("{name}.norm1"), cin, groups, rng),
            conv1: Conv2d::new(store, &format!("{name}.conv1"), cin, cout, 3, 1, false, rng),
            temb: Linear::new(store, &format!("{name}.temb"), time_dim, cout, rng),
            norm2: GroupNorm::new(store, &format!("{name}.norm2"), cout, groups, rng),
            conv2: Conv2d::new(store, &format!("{name}.conv2"), cout, cout, 3, 1, false, rng),
            skip: (cin != cout).then(|| Conv2d::new(store, &format!("{name}.skip"), cin, cout, 1, 1, false, rng)),
        }
    }

    fn forward<T: Scalar>(&self, p: &ParamStore<T>, x: Act<T>, temb: &[T]) -> (Act<T>, ResCache<T>) {
        let (a1, norm1) = self.norm1.forward(p, &x);
        let s1 = map_act(&a1, silu);
        let mut h = self.conv1.forward(p, &s1);
        let tp = self.temb.forward(p, temb, x.n);
        let hw = h.h * h.w;
        for (i, sample) in h.data.chunks_exact_mut(h.c * hw).enumerate() {
            for (c, plane) in sample.chunks_exact_mut(hw).enumerate() {
                let b = tp[i * self.temb.fan_out + c];
                plane.iter_mut().for_each(|v| *v = *v + b);
            }
        }
        let (a2, norm2) = self.norm2.forward(p, &h);
        let s2 = map_act(&a2, silu);
        let mut out = self.conv2.forward(p, &s2);
        match &self.skip {
            Some(skip) => out.add_assign(&skip.forward(p, &x)),
            None => out.add_assign(&x),
        }
        let cache = ResCache {
            x,
            norm1,
            a1,
            s1,
            norm2,
            a2,
            s2,
        };
        (out, cache)
    }

    /// Returns `(∂L/∂x, ∂L/∂temb)`.
    fn backward<T: Scalar>(
        &self,
        p: &ParamStore<T>,
        g: &mut Grads<T>,
        cache: &ResCache<T>,
        temb: &[T],
        dout: &Act<T>,
    ) -> (Act<T>, Vec<T>) {
        let n = dout.n;
        let ds2 = self.conv2.backward(p, g, &cache.s2, dout, true).expect("dx");
        let da2 = map_act(&ds2, |d| silu_backward(&cache.a2.data, d));
        let dh = self.norm2.backward(p, g, &cache.norm2, &da2);
        let hw = dh.h * dh.w;
        let dtp: Vec<T> = dh.data.chunks_exact(hw).map(|plane| plane.iter().copied().sum()).collect();
        let dtemb = self.temb.backward(p, g, temb, &dtp, n);
        let ds1 = self.conv1.backward(p, g, &cache.s1, &dh, true).expect("dx");
        let da1 = map_act(&ds1, |d| silu_backward(&cache.a1.data, d));
        let mut dx = self.norm1.backward(p, g, &cache.norm1, &da1);
        match &self.skip {
            Some(skip) => dx.add_assign(&skip.backward(p, g, &cache.x, dout, true).expect("dx")),
            None => dx.add_assign(dout),
        }
        (dx, dtemb)
    }
}

#[derive(Debug, Clone)]
struct DownLevel {
    res: ResBlock,
    attn: CrossAttention,
    down: Conv2d,
}

#[derive(Debug, Clone)]
struct UpLevel {
    up: Conv2d,
    res: ResBlock,
    attn: CrossAttention,
}

#[derive(Debug, Clone)]
struct Layers {
    time1: Linear,
    time2: Linear,
    conv_in: Conv2d,
    down: Vec<DownLevel>,
    mid_res: ResBlock,
    mid_attn: CrossAttention,
    /// Indexed by level; executed from the deepest level upward.
    up: Vec<UpLevel>,
    norm_out: GroupNorm,
    conv_out: Conv2d,
    generation_token: ParamId,
}

/// Where a sample's cross-attention tokens come from.
#[derive(Debug, Clone)]
pub enum TokenSource<T> {
    /// The learned generation token (receives gradient).
    Generation,
    Fixed(TokenSeq<T>),
}

/// One forward batch; all tensors `n × latent_channels × H × W`.
#[derive(Debug, Clone)]
pub struct UnetBatch<T> {
    pub z_t: Act<T>,
    pub structural: Act<T>,
    pub timesteps: Vec<f64>,
    pub tokens: Vec<TokenSource<T>>,
}

struct DownCache<T> {
    res: ResCache<T>,
    attn: CrossAttentionCache<T>,
    skip: Act<T>,
}

struct UpCache<T> {
    up_in: Act<T>,
    res: ResCache<T>,
    attn: CrossAttentionCache<T>,
}

pub struct UnetCache<T> {
    n: usize,
    generation: Vec<bool>,
    sinus: Vec<T>,
    t1: Vec<T>,
    s_t1: Vec<T>,
    t2: Vec<T>,
    temb: Vec<T>,
    x_in: Act<T>,
    down: Vec<DownCache<T>>,
    mid_res: ResCache<T>,
    mid_attn: CrossAttentionCache<T>,
    up: Vec<UpCache<T>>,
    norm_out: GroupNormCache<T>,
    out_a: Act<T>,
    out_s: Act<T>,
}

#[derive(Debug, Clone)]
pub struct Unet<T> {
    config: UnetConfig,
    layers: Layers,
    params: ParamStore<T>,
}

fn sinusoidal<T: Scalar>(timesteps: &[f64], dim: usize) -> Vec<T> {
    let half = dim / 2;
    let mut out = Vec::with_capacity(timesteps.len() * dim);
    for &t in timesteps {
        let freqs = (0..half).map(|i| (-(10000f64.ln()) * i as f64 / half as f64).exp());
        let args: Vec<f64> = freqs.map(|f| t * f).collect();
        out.extend(args.iter().map(|a| T::from_f64_lossy(a.sin())));
        out.extend(args.iter().map(|a| T::from_f64_lossy(a.cos())));
    }
    out
}

impl<T: Scalar> Unet<T> {
    /// Fan-in uniform initialization; the output projection starts at zero
    /// unless `zero_init_output` is false.
    pub fn new(config: UnetConfig, seed: u64, zero_init_output: bool) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut s = ParamStore::new();
        let cfg = &config;
        let g = cfg.norm_groups;
        let in_ch = 2 * cfg.latent_channels * cfg.patch * cfg.patch;
        let out_ch = cfg.latent_channels * cfg.patch * cfg.patch;
        let time1 = Linear::new(&mut s, "time.fc1", cfg.base_width, cfg.time_dim, &mut rng);
        let time2 = Linear::new(&mut s, "time.fc2", cfg.time_dim, cfg.time_dim, &mut rng);
        let conv_in = Conv2d::new(&mut s, "conv_in", in_ch, cfg.width(0), 3, 1, false, &mut rng);
        let mut down = Vec::with_capacity(cfg.levels);
        for l in 0..cfg.levels {
            let w = cfg.width(l);
            down.push(DownLevel {
                res: ResBlock::new(&mut s, &format!("down{l}.res"), w, w, cfg.time_dim, g, &mut rng),
                attn: CrossAttention::new(&mut s, &format!("down{l}.attn"), w, cfg.token_dim, cfg.heads, g, &mut rng),
                down: Conv2d::new(&mut s, &format!("down{l}.down"), w, cfg.width(l + 1), 3, 2, false, &mut rng),
            });
        }
        let wm = cfg.width(cfg.levels);
        let mid_res = ResBlock::new(&mut s, "mid.res", wm, wm, cfg.time_dim, g, &mut rng);
        let mid_attn = CrossAttention::new(&mut s, "mid.attn", wm, cfg.token_dim, cfg.heads, g, &mut rng);
        let mut up = Vec::with_capacity(cfg.levels);
        for l in 0..cfg.levels {
            let w = cfg.width(l);
            up.push(UpLevel {
                up: Conv2d::new(&mut s, &format!("up{l}.up"), cfg.width(l + 1), w, 3, 1, false, &mut rng),
                res: ResBlock::new(&mut s, &format!("up{l}.res"), 2 * w, w, cfg.time_dim, g, &mut rng),
                attn: CrossAttention::new(&mut s, &format!("up{l}.attn"), w, cfg.token_dim, cfg.heads, g, &mut rng),
            });
        }
        let norm_out = GroupNorm::new(&mut s, "norm_out", cfg.width(0), g, &mut rng);
        let conv_out = Conv2d::new(&mut s, "conv_out", cfg.width(0), out_ch, 3, 1, zero_init_output, &mut rng);
        let generation_token = s.add("generation_token", &[1, cfg.token_dim], Init::Normal(1.0), &mut rng);
        Ok(Self {
            config,
            layers: Layers {
                time1,
                time2,
                conv_in,
                down,
                mid_res,
                mid_attn,
                up,
                norm_out,
                conv_out,
                generation_token,
            },
            params: s,
        })
    }

    pub fn config(&self) -> &UnetConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    pub fn parameter_count(&self) -> usize {
        self.params.num_scalars()
    }

    pub fn cast<U: Scalar>(&self) -> Unet<U> {
        Unet {
            config: self.config,
            layers: self.layers.clone(),
            params: self.params.cast(),
        }
    }

    /// Replaces every parameter value by name; shapes and names must match exactly.
    pub fn load_params(&mut self, named: Vec<(String, Vec<usize>, Vec<T>)>) -> Result<()> {
        if named.len() != self.params.len() {
            return Err(Error::data(format!(
                "expected {} tensors, found {}",
                self.params.len(),
                named.len()
            )));
        }
        for (entry, (name, shape, value)) in self.params.entries_mut().iter_mut().zip(named) {
            if entry.name != name || entry.shape != shape {
                return Err(Error::data(format!(
                    "tensor {name} {shape:?} does not match {} {:?}",
                    entry.name, entry.shape
                )));
            }
            entry.value = value;
        }
        Ok(())
    }

    pub fn generation_token(&self) -> MorphologyTokens {
        let v = self.params.get(self.layers.generation_token);
        MorphologyTokens::new(1, self.config.token_dim, v.iter().map(|x| x.as_f64()).collect())
            .expect("generation token has the configured shape")
    }

    pub fn embedder(&self) -> Result<PatchEmbedder> {
        PatchEmbedder::new(self.config.token_dim, self.config.embed_patch, self.config.embed_seed)
    }

    fn check_batch(&self, b: &UnetBatch<T>) -> Result<()> {
        let c = self.config.latent_channels;
        let z = &b.z_t;
        let m = self.config.size_multiple();
        if z.c != c || !z.same_shape(&b.structural) {
            return Err(Error::ShapeMismatch {
                expected: vec![z.n, c, z.h, z.w],
                got: vec![b.structural.n, b.structural.c, b.structural.h, b.structural.w],
            });
        }
        if !z.h.is_multiple_of(m) || !z.w.is_multiple_of(m) {
            return Err(Error::invalid(format!("latent size {}x{} must be a multiple of {m}", z.h, z.w)));
        }
        if b.timesteps.len() != z.n || b.tokens.len() != z.n {
            return Err(Error::invalid("batch needs one timestep and one token source per sample"));
        }
        for tok in &b.tokens {
            if let TokenSource::Fixed(seq) = tok {
                if seq.dim != self.config.token_dim || seq.len == 0 {
                    return Err(Error::invalid(format!(
                        "token sequence {}x{} incompatible with token dim {}",
                        seq.len, seq.dim, self.config.token_dim
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn forward(&self, batch: &UnetBatch<T>) -> Result<(Act<T>, UnetCache<T>)> {
        self.check_batch(batch)?;
        let (p, l, cfg) = (&self.params, &self.layers, &self.config);
        let n = batch.z_t.n;
        let gen_tok = TokenSeq::new(1, cfg.token_dim, p.get(l.generation_token).to_vec());
        let generation: Vec<bool> = batch.tokens.iter().map(|t| matches!(t, TokenSource::Generation)).collect();
        let tokens: Vec<&TokenSeq<T>> = batch
            .tokens
            .iter()
            .map(|t| match t {
                TokenSource::Generation => &gen_tok,
                TokenSource::Fixed(seq) => seq,
            })
            .collect();

        let sinus = sinusoidal::<T>(&batch.timesteps, cfg.base_width);
        let t1 = l.time1.forward(p, &sinus, n);
        let s_t1 = silu(&t1);
        let t2 = l.time2.forward(p, &s_t1, n);
        let temb = silu(&t2);

        let x_in = pixel_unshuffle(&concat_channels(&batch.z_t, &batch.structural), cfg.patch);
        let mut h = l.conv_in.forward(p, &x_in);
        let mut down = Vec::with_capacity(cfg.levels);
        for lvl in &l.down {
            let (r, res) = lvl.res.forward(p, h, &temb);
            let (a, attn) = lvl.attn.forward(p, &r, &tokens);
            h = lvl.down.forward(p, &a);
            down.push(DownCache { res, attn, skip: a });
        }
        let (r, mid_res) = l.mid_res.forward(p, h, &temb);
        let (mut h, mid_attn) = l.mid_attn.forward(p, &r, &tokens);
        let mut up = Vec::with_capacity(cfg.levels);
        for (lvl, dc) in l.up.iter().zip(&down).rev() {
            let up_in = upsample_nearest2x(&h);
            let u = lvl.up.forward(p, &up_in);
            let (r, res) = lvl.res.forward(p, concat_channels(&u, &dc.skip), &temb);
            let (a, attn) = lvl.attn.forward(p, &r, &tokens);
            h = a;
            up.push(UpCache { up_in, res, attn });
        }
        let (out_a, norm_out) = l.norm_out.forward(p, &h);
        let out_s = map_act(&out_a, silu);
        let o = l.conv_out.forward(p, &out_s);
        let v = pixel_shuffle(&o, cfg.patch);
        if !v.all_finite() {
            return Err(Error::Numerical("non-finite denoiser output".into()));
        }
        let cache = UnetCache {
            n,
            generation,
            sinus,
            t1,
            s_t1,
            t2,
            temb,
            x_in,
            down,
            mid_res,
            mid_attn,
            up,
            norm_out,
            out_a,
            out_s,
        };
        Ok((v, cache))
    }

    /// Gradients of `Σ dv ⊙ v̂` with respect to every parameter.
    pub fn backward(&self, cache: &UnetCache<T>, dv: &Act<T>) -> Grads<T> {
        let (p, l, cfg) = (&self.params, &self.layers, &self.config);
        let n = cache.n;
        let mut g = p.zero_grads();
        let mut dtemb = vec![T::zero(); n * cfg.time_dim];
        let mut dtok: Vec<Vec<T>> = vec![vec![T::zero(); cfg.token_dim]; n];
        let add = |acc: &mut Vec<T>, d: Vec<T>| acc.iter_mut().zip(d).for_each(|(a, b)| *a = *a + b);
        let add_tokens = |acc: &mut Vec<Vec<T>>, d: Vec<Vec<T>>, gen: &[bool]| {
            for ((a, d), &is_gen) in acc.iter_mut().zip(d).zip(gen) {
                if is_gen {
                    a.iter_mut().zip(d).for_each(|(x, y)| *x = *x + y);
                }
            }
        };

        let d_o = pixel_unshuffle(dv, cfg.patch);
        let d_s = l.conv_out.backward(p, &mut g, &cache.out_s, &d_o, true).expect("dx");
        let d_a = map_act(&d_s, |d| silu_backward(&cache.out_a.data, d));
        let mut dh = l.norm_out.backward(p, &mut g, &cache.norm_out, &d_a);

        let mut dskips: Vec<Option<Act<T>>> = (0..cfg.levels).map(|_| None).collect();
        for (k, uc) in cache.up.iter().enumerate().rev() {
            let lvl_idx = k_to_level(k, cfg.levels);
            let lvl = &l.up[lvl_idx];
            let (dr, dt) = lvl.attn.backward(p, &mut g, &uc.attn, &dh);
            add_tokens(&mut dtok, dt, &cache.generation);
            let (dc, de) = lvl.res.backward(p, &mut g, &uc.res, &cache.temb, &dr);
            add(&mut dtemb, de);
            let (du, dskip) = split_channels(&dc, cfg.width(lvl_idx));
            dskips[lvl_idx] = Some(dskip);
            let dup = lvl.up.backward(p, &mut g, &uc.up_in, &du, true).expect("dx");
            dh = upsample_nearest2x_backward(&dup);
        }

        let (dr, dt) = l.mid_attn.backward(p, &mut g, &cache.mid_attn, &dh);
        add_tokens(&mut dtok, dt, &cache.generation);
        let (dx, de) = l.mid_res.backward(p, &mut g, &cache.mid_res, &cache.temb, &dr);
        add(&mut dtemb, de);
        dh = dx;

        for (lvl_idx, (lvl, dc)) in l.down.iter().zip(&cache.down).enumerate().rev() {
            let mut dskip = lvl.down.backward(p, &mut g, &dc.skip, &dh, true).expect("dx");
            if let Some(extra) = dskips[lvl_idx].take() {
                dskip.add_assign(&extra);
            }
            let (dr, dt) = lvl.attn.backward(p, &mut g, &dc.attn, &dskip);
            add_tokens(&mut dtok, dt, &cache.generation);
            let (dx, de) = lvl.res.backward(p, &mut g, &dc.res, &cache.temb, &dr);
            add(&mut dtemb, de);
            dh = dx;
        }
        l.conv_in.backward(p, &mut g, &cache.x_in, &dh, false);

        let dt2 = silu_backward(&cache.t2, &dtemb);
        let ds_t1 = l.time2.backward(p, &mut g, &cache.s_t1, &dt2, n);
        let dt1 = silu_backward(&cache.t1, &ds_t1);
        l.time1.backward(p, &mut g, &cache.sinus, &dt1, n);

        let gt = g.get_mut(l.generation_token);
        for (d, &is_gen) in dtok.iter().zip(&cache.generation) {
            if is_gen {
                gt.iter_mut().zip(d).for_each(|(a, &b)| *a = *a + b);
            }
        }
        g
    }

    fn token_source(&self, cond: &ConditioningBundle) -> TokenSource<T> {
        match cond.mode() {
            TaskMode::Generation => TokenSource::Generation,
            TaskMode::Translation => {
                let t = cond.tokens();
                TokenSource::Fixed(TokenSeq::new(
                    t.count(),
                    t.dim(),
                    t.data().iter().map(|&v| T::from_f64_lossy(v)).collect(),
                ))
            }
        }
    }

    /// Assembles a batch from latents (all of one shape) and their conditioning.
    pub fn make_batch(&self, z_t: &[LatentGrid], timesteps: &[f64], conds: &[&ConditioningBundle]) -> Result<UnetBatch<T>> {
        let first = z_t.first().ok_or_else(|| Error::invalid("empty batch"))?;
        let [c, h, w] = first.shape();
        let mut zd = Vec::with_capacity(z_t.len() * first.len());
        let mut sd = Vec::with_capacity(z_t.len() * first.len());
        for (z, cond) in z_t.iter().zip(conds) {
            first.ensure_same_shape(z)?;
            z.ensure_same_shape(cond.structural_latent())?;
            zd.extend(z.data().iter().map(|&v| T::from_f64_lossy(v)));
            sd.extend(cond.structural_latent().data().iter().map(|&v| T::from_f64_lossy(v)));
        }
        Ok(UnetBatch {
            z_t: Act::from_vec(z_t.len(), c, h, w, zd),
            structural: Act::from_vec(z_t.len(), c, h, w, sd),
            timesteps: timesteps.to_vec(),
            tokens: conds.iter().map(|c| self.token_source(c)).collect(),
        })
    }
}

/// Up caches are stored in execution order (deepest level first).
fn k_to_level(k: usize, levels: usize) -> usize {
    levels - 1 - k
}

/// Samples per forward pass when predicting for long lists.
const PREDICT_CHUNK: usize = 32;

impl<T: Scalar> VPredictor for Unet<T> {
    fn predict_v_batch(&self, z_t: &[LatentGrid], t: usize, conds: &[&ConditioningBundle]) -> Result<Vec<LatentGrid>> {
        if z_t.len() != conds.len() {
            return Err(Error::invalid("one conditioning bundle per latent"));
        }
        let mut out = Vec::with_capacity(z_t.len());
        for (zs, cs) in z_t.chunks(PREDICT_CHUNK).zip(conds.chunks(PREDICT_CHUNK)) {
            let batch = self.make_batch(zs, &vec![t as f64; zs.len()], cs)?;
            let (v, _) = self.forward(&batch)?;
            for i in 0..v.n {
                out.push(LatentGrid::new(
                    v.c,
                    v.h,
                    v.w,
                    v.sample(i).iter().map(|x| x.as_f64()).collect(),
                )?);
            }
        }
        Ok(out)
    }

    fn generation_conditioning(&self, latent_shape: [usize; 3]) -> Result<ConditioningBundle> {
        ConditioningBundle::generation(self.generation_token(), latent_shape)
    }

    fn translation_conditioning(&self, source: &ImageRgb, structural_latent: LatentGrid) -> Result<ConditioningBundle> {
        ConditioningBundle::translation(structural_latent, self.embedder()?.embed(source)?)
    }
}
