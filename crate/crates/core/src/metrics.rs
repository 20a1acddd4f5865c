//! SSIM, molecular retrieval accuracy, Fréchet and kernel feature distances.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::codec::ImageRgb;
use crate::denoiser::PatchEmbedder;
use crate::error::{Error, Result};

const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;

fn gaussian_window() -> [f64; SSIM_WINDOW] {
    let r = (SSIM_WINDOW / 2) as f64;
    let mut w = [0.0; SSIM_WINDOW];
    for (i, v) in w.iter_mut().enumerate() {
        let x = i as f64 - r;
        *v = (-x * x / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let s: f64 = w.iter().sum();
    w.map(|v| v / s)
}

/// Separable Gaussian filter over valid positions only.
fn filter_valid(img: &[f64], w: usize, h: usize, k: &[f64; SSIM_WINDOW]) -> Vec<f64> {
    let (ow, oh) = (w - SSIM_WINDOW + 1, h - SSIM_WINDOW + 1);
    let mut rows = vec![0.0; ow * h];
    for y in 0..h {
        for x in 0..ow {
            rows[y * ow + x] = (0..SSIM_WINDOW).map(|i| k[i] * img[y * w + x + i]).sum();
        }
    }
    let mut out = vec![0.0; ow * oh];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = (0..SSIM_WINDOW).map(|i| k[i] * rows[(y + i) * ow + x]).sum();
        }
    }
    out
}

/// Single-scale SSIM on 601 luma (data range 255), mean over valid windows.
pub fn ssim(a: &ImageRgb, b: &ImageRgb) -> Result<f64> {
    if (a.width(), a.height()) != (b.width(), b.height()) {
        return Err(Error::ShapeMismatch {
            expected: vec![a.height(), a.width()],
            got: vec![b.height(), b.width()],
        });
    }
    ssim_gray(&a.luma(), &b.luma(), a.width(), a.height())
}

pub fn ssim_gray(x: &[f64], y: &[f64], w: usize, h: usize) -> Result<f64> {
    if w < SSIM_WINDOW || h < SSIM_WINDOW {
        return Err(Error::invalid(format!("SSIM needs at least {SSIM_WINDOW}x{SSIM_WINDOW} pixels, got {w}x{h}")));
    }
    if x.len() != w * h || y.len() != w * h {
        return Err(Error::ShapeMismatch {
            expected: vec![h, w],
            got: vec![x.len(), y.len()],
        });
    }
    let k = gaussian_window();
    let c1 = (0.01f64 * 255.0).powi(2);
    let c2 = (0.03f64 * 255.0).powi(2);
    let prod = |p: &[f64], q: &[f64]| p.iter().zip(q).map(|(a, b)| a * b).collect::<Vec<_>>();
    let mx = filter_valid(x, w, h, &k);
    let my = filter_valid(y, w, h, &k);
    let mxx = filter_valid(&prod(x, x), w, h, &k);
    let myy = filter_valid(&prod(y, y), w, h, &k);
    let mxy = filter_valid(&prod(x, y), w, h, &k);
    let mut total = 0.0;
    for i in 0..mx.len() {
        let (ux, uy) = (mx[i], my[i]);
        let vx = mxx[i] - ux * ux;
        let vy = myy[i] - uy * uy;
        let cov = mxy[i] - ux * uy;
        total += ((2.0 * ux * uy + c1) * (2.0 * cov + c2)) / ((ux * ux + uy * uy + c1) * (vx + vy + c2));
    }
    Ok(total / mx.len() as f64)
}

/// Identified embedding vectors of one uniform dimension.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingSet {
    ids: Vec<u64>,
    vectors: Vec<Vec<f64>>,
}

impl EmbeddingSet {
    pub fn new(ids: Vec<u64>, vectors: Vec<Vec<f64>>) -> Result<Self> {
        if ids.len() != vectors.len() {
            return Err(Error::invalid(format!("{} ids for {} vectors", ids.len(), vectors.len())));
        }
        if let Some(first) = vectors.first() {
            let d = first.len();
            if d == 0 || vectors.iter().any(|v| v.len() != d) {
                return Err(Error::invalid("embedding vectors must share a positive dimension"));
            }
        }
        if vectors.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::Numerical("non-finite embedding value".into()));
        }
        Ok(Self { ids, vectors })
    }

    /// Ids `0..n`.
    pub fn from_vectors(vectors: Vec<Vec<f64>>) -> Result<Self> {
        Self::new((0..vectors.len() as u64).collect(), vectors)
    }

    pub fn len(&self) -> usize {
        self.vectors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.vectors.first().map_or(0, Vec::len)
    }

    pub fn ids(&self) -> &[u64] {
        &self.ids
    }

    pub fn vectors(&self) -> &[Vec<f64>] {
        &self.vectors
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn check_pair(a: &EmbeddingSet, b: &EmbeddingSet, min_n: usize) -> Result<()> {
    if a.dim() != b.dim() {
        return Err(Error::ShapeMismatch {
            expected: vec![a.dim()],
            got: vec![b.dim()],
        });
    }
    if a.len() < min_n || b.len() < min_n {
        return Err(Error::invalid(format!("need at least {min_n} embeddings per set")));
    }
    Ok(())
}

/// Fraction of `i` whose best cosine match among all `gt` is `gt_i`. Ties go
/// to the lowest index, so a tie only counts as a hit when `i` is that index.
pub fn mra(pred: &EmbeddingSet, gt: &EmbeddingSet) -> Result<f64> {
    check_pair(pred, gt, 2)?;
    if pred.ids != gt.ids {
        return Err(Error::invalid("prediction and ground-truth ids are not aligned"));
    }
    let norm = |v: &[f64]| dot(v, v).sqrt();
    let gt_norms: Vec<f64> = gt.vectors.iter().map(|v| norm(v)).collect();
    if gt_norms.contains(&0.0) || pred.vectors.iter().any(|v| norm(v) == 0.0) {
        return Err(Error::invalid("MRA undefined for zero-norm embeddings"));
    }
    let mut hits = 0usize;
    for (i, p) in pred.vectors.iter().enumerate() {
        let pn = norm(p);
        let mut best = (0usize, f64::NEG_INFINITY);
        for (j, (g, gn)) in gt.vectors.iter().zip(&gt_norms).enumerate() {
            let c = dot(p, g) / (pn * gn);
            if c > best.1 {
                best = (j, c);
            }
        }
        hits += (best.0 == i) as usize;
    }
    Ok(hits as f64 / pred.len() as f64)
}

fn mean_and_cov(s: &EmbeddingSet) -> (DVector<f64>, DMatrix<f64>) {
    let (n, d) = (s.len(), s.dim());
    let x = DMatrix::from_fn(n, d, |i, j| s.vectors[i][j]);
    let mu = DVector::from_fn(d, |j, _| x.column(j).sum() / n as f64);
    let centred = DMatrix::from_fn(n, d, |i, j| x[(i, j)] - mu[j]);
    let cov = centred.transpose() * &centred / (n as f64 - 1.0);
    (mu, cov)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FrechetResult {
    pub distance: f64,
    /// Magnitude of negative eigenvalues clamped to zero, relative to the trace.
    pub clamped_fraction: f64,
    /// Fewer samples than dimensions: covariances are rank-deficient.
    pub underdetermined: bool,
}

/// Symmetric PSD square root via eigendecomposition, clamping negative eigenvalues.
fn sqrt_psd(m: &DMatrix<f64>) -> (DMatrix<f64>, f64) {
    let sym = (m + m.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let clamped: f64 = eig.eigenvalues.iter().filter(|&&l| l < 0.0).map(|l| -l).sum();
    let roots = eig.eigenvalues.map(|l| l.max(0.0).sqrt());
    let v = &eig.eigenvectors;
    (v * DMatrix::from_diagonal(&roots) * v.transpose(), clamped)
}

/// ‖μa − μb‖² + tr(Σa + Σb − 2(ΣaΣb)^½), with tr((ΣaΣb)^½) computed as
/// tr((Σa^½ Σb Σa^½)^½).
pub fn frechet_distance_detailed(fa: &EmbeddingSet, fb: &EmbeddingSet) -> Result<FrechetResult> {
    check_pair(fa, fb, 2)?;
    let (ma, ca) = mean_and_cov(fa);
    let (mb, cb) = mean_and_cov(fb);
    let (ra, clamp_a) = sqrt_psd(&ca);
    let inner = &ra * &cb * &ra;
    let sym = (&inner + inner.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let clamp_b: f64 = eig.eigenvalues.iter().filter(|&&l| l < 0.0).map(|l| -l).sum();
    let tr_sqrt: f64 = eig.eigenvalues.iter().map(|l| l.max(0.0).sqrt()).sum();
    let trace = ca.trace() + cb.trace();
    let diff = (&ma - &mb).norm_squared();
    let distance = (diff + trace - 2.0 * tr_sqrt).max(0.0);
    Ok(FrechetResult {
        distance,
        clamped_fraction: if trace > 0.0 { (clamp_a + clamp_b) / trace } else { 0.0 },
        underdetermined: fa.len().min(fb.len()) <= fa.dim(),
    })
}

pub fn frechet_distance(fa: &EmbeddingSet, fb: &EmbeddingSet) -> Result<f64> {
    Ok(frechet_distance_detailed(fa, fb)?.distance)
}

fn poly_kernel(x: &[f64], y: &[f64], d: f64) -> f64 {
    (dot(x, y) / d + 1.0).powi(3)
}

fn mmd2_unbiased(x: &[Vec<f64>], y: &[Vec<f64>]) -> f64 {
    let m = x.len() as f64;
    let d = x[0].len() as f64;
    let within = |s: &[Vec<f64>]| {
        let mut acc = 0.0;
        for i in 0..s.len() {
            for j in 0..s.len() {
                if i != j {
                    acc += poly_kernel(&s[i], &s[j], d);
                }
            }
        }
        acc / (m * (m - 1.0))
    };
    let mut cross = 0.0;
    for a in x {
        for b in y {
            cross += poly_kernel(a, b, d);
        }
    }
    within(x) + within(y) - 2.0 * cross / (m * m)
}

/// Unbiased polynomial-kernel MMD² averaged over disjoint contiguous subsets
/// of size `min(subset_size, n)`, using `min(max_subsets, n / size)` of them
/// (at least one); `n` is the smaller set size.
pub fn kernel_distance_with(fa: &EmbeddingSet, fb: &EmbeddingSet, subset_size: usize, max_subsets: usize) -> Result<f64> {
    check_pair(fa, fb, 2)?;
    if subset_size < 2 || max_subsets == 0 {
        return Err(Error::invalid("kernel distance needs subsets of at least 2 and one subset"));
    }
    let n = fa.len().min(fb.len());
    let m = subset_size.min(n);
    let count = (n / m).clamp(1, max_subsets);
    let total: f64 = (0..count)
        .map(|s| mmd2_unbiased(&fa.vectors[s * m..(s + 1) * m], &fb.vectors[s * m..(s + 1) * m]))
        .sum();
    Ok(total / count as f64)
}

pub fn kernel_distance(fa: &EmbeddingSet, fb: &EmbeddingSet) -> Result<f64> {
    kernel_distance_with(fa, fb, 100, 10)
}

/// Evaluation embedder: seeded patch projection, tokens mean-pooled.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EmbedderSpec {
    pub dim: usize,
    pub patch: usize,
    pub seed: u64,
}

impl Default for EmbedderSpec {
    fn default() -> Self {
        Self {
            dim: 64,
            patch: 16,
            seed: 0xe7a1,
        }
    }
}

impl EmbedderSpec {
    pub fn id(&self) -> String {
        format!("patch-projection-meanpool/d{}/p{}/s{}", self.dim, self.patch, self.seed)
    }

    pub fn build(&self) -> Result<PatchEmbedder> {
        PatchEmbedder::new(self.dim, self.patch, self.seed)
    }
}

pub fn embed_for_eval(img: &ImageRgb, spec: &EmbedderSpec) -> Result<Vec<f64>> {
    Ok(spec.build()?.embed(img)?.mean_pooled())
}

pub fn embed_all(images: &[ImageRgb], ids: &[u64], spec: &EmbedderSpec) -> Result<EmbeddingSet> {
    let e = spec.build()?;
    let vectors = images
        .iter()
        .map(|img| Ok(e.embed(img)?.mean_pooled()))
        .collect::<Result<Vec<_>>>()?;
    EmbeddingSet::new(ids.to_vec(), vectors)
}

/// Embedder and kernel-distance settings for an evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MetricsConfig {
    pub embedder: EmbedderSpec,
    pub kid_subset_size: usize,
    pub kid_max_subsets: usize,
}

impl Default for MetricsConfig {
    fn default() -> Self {
        Self {
            embedder: EmbedderSpec::default(),
            kid_subset_size: 100,
            kid_max_subsets: 10,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub ssim_mean: f64,
    pub mra: f64,
    pub frechet: f64,
    pub kernel_distance: f64,
    pub n_samples: usize,
    pub embedder: String,
    pub config_hash: String,
    pub tool_version: String,
    #[serde(default)]
    pub config: serde_json::Value,
}

/// Scores predictions against aligned ground truth; returns the report and
/// per-sample SSIM.
pub fn evaluate(
    pred: &[ImageRgb],
    gt: &[ImageRgb],
    ids: &[u64],
    cfg: &MetricsConfig,
    prov: &crate::config::Provenance,
) -> Result<(MetricsReport, Vec<f64>)> {
    let spec = &cfg.embedder;
    if pred.len() != gt.len() || pred.len() != ids.len() {
        return Err(Error::invalid("prediction, ground truth and ids must align"));
    }
    if pred.is_empty() {
        return Err(Error::invalid("nothing to evaluate"));
    }
    let per_sample = pred.iter().zip(gt).map(|(p, g)| ssim(p, g)).collect::<Result<Vec<_>>>()?;
    let ep = embed_all(pred, ids, spec)?;
    let eg = embed_all(gt, ids, spec)?;
    let report = MetricsReport {
        ssim_mean: per_sample.iter().sum::<f64>() / per_sample.len() as f64,
        mra: mra(&ep, &eg)?,
        frechet: frechet_distance(&ep, &eg)?,
        kernel_distance: kernel_distance_with(&ep, &eg, cfg.kid_subset_size, cfg.kid_max_subsets)?,
        n_samples: pred.len(),
        embedder: spec.id(),
        config_hash: prov.config_hash.clone(),
        tool_version: prov.tool_version.clone(),
        config: serde_json::Value::Null,
    };
    Ok((report, per_sample))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn gray(n: usize, mut f: impl FnMut(usize, usize) -> u8) -> ImageRgb {
        let mut img = ImageRgb::filled(n, n, [0, 0, 0]);
        for y in 0..n {
            for x in 0..n {
                let v = f(x, y);
                img.set(x, y, [v, v, v]);
            }
        }
        img
    }

    fn checker() -> ImageRgb {
        gray(32, |x, y| if ((x / 4) + (y / 4)) % 2 == 0 { 40 } else { 215 })
    }

    fn box_blur(img: &ImageRgb) -> ImageRgb {
        let n = img.width() as isize;
        gray(n as usize, |x, y| {
            let mut s = 0u32;
            for dy in -1..=1 {
                for dx in -1..=1 {
                    let yy = (y as isize + dy).clamp(0, n - 1) as usize;
                    let xx = (x as isize + dx).clamp(0, n - 1) as usize;
                    s += img.get(xx, yy)[0] as u32;
                }
            }
            ((2 * s + 9) / 18) as u8
        })
    }

    fn gaussian_set(rng: &mut ChaCha8Rng, n: usize, d: usize, shift: f64) -> EmbeddingSet {
        EmbeddingSet::from_vectors(
            (0..n)
                .map(|_| (0..d).map(|_| shift + rng.sample::<f64, _>(StandardNormal)).collect())
                .collect(),
        )
        .unwrap()
    }

    fn pseudo(n: usize, d: usize, shift: f64, scale: f64, reverse: bool) -> EmbeddingSet {
        let v = (0..n)
            .map(|i| {
                let mut row: Vec<f64> = (0..d)
                    .map(|j| {
                        shift
                            + scale
                                * (((i * 7 + j * 13 + 1) as f64) * 0.37).sin()
                                * (((i + 3 * j) as f64) * 1.1).cos()
                    })
                    .collect();
                if reverse {
                    row.reverse();
                }
                row
            })
            .collect();
        EmbeddingSet::from_vectors(v).unwrap()
    }

    #[test]
    fn ssim_identity_and_negative() {
        let c = checker();
        assert!((ssim(&c, &c).unwrap() - 1.0).abs() < 1e-12);
        let neg = gray(32, |x, y| 255 - c.get(x, y)[0]);
        assert!(ssim(&c, &neg).unwrap() < 0.0);
        assert!(ssim(&gray(10, |_, _| 0), &gray(10, |_, _| 0)).is_err());
        assert!(ssim(&gray(16, |_, _| 0), &gray(12, |_, _| 0)).is_err());
    }

    /// Golden from scikit-image `structural_similarity` (Gaussian weights,
    /// population covariance, data range 255) on the same pair.
    #[test]
    fn ssim_matches_reference_implementation() {
        let c = checker();
        let v = ssim(&c, &box_blur(&c)).unwrap();
        assert!((v - 0.6705218096051646).abs() < 1e-10, "{v}");
    }

    #[test]
    fn mra_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let g = gaussian_set(&mut rng, 50, 8, 0.0);
        assert_eq!(mra(&g, &g).unwrap(), 1.0);
        let gt = EmbeddingSet::from_vectors(vec![vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        let swapped = EmbeddingSet::from_vectors(vec![vec![0.0, 1.0], vec![1.0, 0.0]]).unwrap();
        assert_eq!(mra(&swapped, &gt).unwrap(), 0.0);
        let zero = EmbeddingSet::from_vectors(vec![vec![0.0, 0.0], vec![1.0, 0.0]]).unwrap();
        assert!(mra(&zero, &gt).is_err());
        let other_ids = EmbeddingSet::new(vec![5, 6], gt.vectors.clone()).unwrap();
        assert!(mra(&other_ids, &gt).is_err());
    }

    #[test]
    fn mra_tie_goes_to_lowest_index() {
        let gt = EmbeddingSet::from_vectors(vec![vec![1.0, 0.0], vec![2.0, 0.0], vec![0.0, 1.0]]).unwrap();
        let pred = EmbeddingSet::from_vectors(vec![vec![1.0, 0.0], vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        // Index 1 ties with index 0 and loses.
        assert!((mra(&pred, &gt).unwrap() - 2.0 / 3.0).abs() < 1e-15);
    }

    /// Simulation oracle: exchangeable random embeddings give MRA ≈ 1/n.
    #[test]
    fn mra_chance_baseline() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let n = 1000;
        let (mut total, reps) = (0.0, 5);
        for _ in 0..reps {
            let a = gaussian_set(&mut rng, n, 64, 0.0);
            let b = gaussian_set(&mut rng, n, 64, 0.0);
            total += mra(&a, &b).unwrap();
        }
        let mean = total / reps as f64;
        let p = 1.0 / n as f64;
        let sd = (p * (1.0 - p) / (n * reps) as f64).sqrt();
        assert!((mean - p).abs() <= 3.0 * sd, "{mean}");
    }

    #[test]
    fn frechet_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = gaussian_set(&mut rng, 200, 6, 0.0);
        assert!(frechet_distance(&a, &a).unwrap().abs() < 1e-6);
        let pa = EmbeddingSet::from_vectors(vec![vec![1.0, 2.0]; 5]).unwrap();
        let pb = EmbeddingSet::from_vectors(vec![vec![4.0, -2.0]; 5]).unwrap();
        assert!((frechet_distance(&pa, &pb).unwrap() - 25.0).abs() < 1e-12);
        let short = EmbeddingSet::from_vectors(vec![vec![1.0, 2.0]]).unwrap();
        assert!(frechet_distance(&short, &pb).is_err());
    }

    /// Golden from a 40-digit mpmath evaluation (general matrix sqrtm of ΣaΣb).
    #[test]
    fn frechet_matches_extended_precision_oracle() {
        let a = pseudo(40, 4, 0.0, 1.0, false);
        let b = pseudo(40, 4, 0.5, 1.5, true);
        let v = frechet_distance(&a, &b).unwrap();
        let golden = 1.264_541_132_093_036_8;
        assert!((v - golden).abs() <= 1e-4 * golden, "{v}");
        assert!((v - golden).abs() <= 1e-9, "{v}");
    }

    /// Denman–Beavers iteration for (ΣaΣb)^½ as an independent in-test route.
    #[test]
    fn frechet_agrees_with_denman_beavers() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let a = gaussian_set(&mut rng, 300, 5, 0.0);
        let b = gaussian_set(&mut rng, 300, 5, 0.3);
        let (ma, ca) = mean_and_cov(&a);
        let (mb, cb) = mean_and_cov(&b);
        let prod = &ca * &cb;
        let (mut y, mut z) = (prod.clone(), DMatrix::<f64>::identity(5, 5));
        for _ in 0..60 {
            let yi = y.clone().try_inverse().unwrap();
            let zi = z.clone().try_inverse().unwrap();
            y = (&y + zi) * 0.5;
            z = (&z + yi) * 0.5;
        }
        let oracle = (&ma - &mb).norm_squared() + ca.trace() + cb.trace() - 2.0 * y.trace();
        let v = frechet_distance(&a, &b).unwrap();
        assert!((v - oracle).abs() <= 1e-9 * oracle.max(1.0), "{v} vs {oracle}");
    }

    #[test]
    fn kernel_distance_examples() {
        let a = pseudo(40, 4, 0.0, 1.0, false);
        let b = pseudo(40, 4, 0.5, 1.5, true);
        let v = kernel_distance_with(&a, &b, 10, 10).unwrap();
        let golden = 0.713_168_546_893_880_9;
        assert!((v - golden).abs() <= 1e-4 * golden && (v - golden).abs() < 1e-10, "{v}");

        let pa = EmbeddingSet::from_vectors(vec![vec![1.0, 1.0]; 10]).unwrap();
        let pb = EmbeddingSet::from_vectors(vec![vec![-1.0, 2.0]; 10]).unwrap();
        assert!(kernel_distance(&pa, &pb).unwrap() > 0.0);

        // Same distribution: within noise of zero.
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let vals: Vec<f64> = (0..20)
            .map(|_| {
                let x = gaussian_set(&mut rng, 200, 8, 0.0);
                let y = gaussian_set(&mut rng, 200, 8, 0.0);
                kernel_distance(&x, &y).unwrap()
            })
            .collect();
        let mean = vals.iter().sum::<f64>() / vals.len() as f64;
        let sd = (vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (vals.len() - 1) as f64).sqrt();
        assert!(vals[0].abs() < 3.0 * sd, "{} vs sd {sd}", vals[0]);
    }

    #[test]
    fn eval_embedder_properties() {
        let spec = EmbedderSpec::default();
        assert!(embed_for_eval(&ImageRgb::filled(64, 64, [120, 30, 200]), &spec)
            .unwrap()
            .iter()
            .all(|&v| v == 0.0));
        let sp = crate::synth::SynthParams::default();
        let a = crate::synth::generate_pair(&sp, 0).unwrap().target;
        let b = crate::synth::generate_pair(&sp, 1).unwrap().target;
        let (ea, eb) = (embed_for_eval(&a, &spec).unwrap(), embed_for_eval(&b, &spec).unwrap());
        assert_eq!(ea, embed_for_eval(&a, &spec).unwrap());
        let cos = dot(&ea, &eb) / (dot(&ea, &ea) * dot(&eb, &eb)).sqrt();
        assert!(cos < 1.0 - 1e-6, "{cos}");
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn ssim_is_symmetric(seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a = gray(16, |_, _| rng.random());
            let b = gray(16, |x, y| a.get(x, y)[0].wrapping_add((x * y) as u8));
            prop_assert!((ssim(&a, &b).unwrap() - ssim(&b, &a).unwrap()).abs() <= 1e-12);
        }

        #[test]
        fn mra_ignores_positive_rescaling(seed in 0u64..1000, k in -8i32..8) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a = gaussian_set(&mut rng, 30, 6, 0.0);
            let b = gaussian_set(&mut rng, 30, 6, 0.0);
            let s = 2f64.powi(k);
            let scaled = EmbeddingSet::from_vectors(
                a.vectors().iter().map(|v| v.iter().map(|x| x * s).collect()).collect()
            ).unwrap();
            prop_assert_eq!(mra(&a, &b).unwrap(), mra(&scaled, &b).unwrap());
        }

        #[test]
        fn distances_are_symmetric(seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a = gaussian_set(&mut rng, 40, 4, 0.0);
            let b = gaussian_set(&mut rng, 40, 4, 0.5);
            let (f1, f2) = (frechet_distance(&a, &b).unwrap(), frechet_distance(&b, &a).unwrap());
            prop_assert!((f1 - f2).abs() <= 1e-9 * f1.max(1.0));
            let (k1, k2) = (kernel_distance(&a, &b).unwrap(), kernel_distance(&b, &a).unwrap());
            prop_assert!((k1 - k2).abs() <= 1e-12 * k1.abs().max(1.0));
        }
    }
}
