use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::MorphologyTokens;
use crate::codec::ImageRgb;
use crate::error::{Error, Result};

/// Tiles an image into `patch × patch` squares, standardizes each tile and
/// projects it with a fixed seeded Gaussian matrix.
///
/// Standardization removes each channel's tile mean and divides by the pooled
/// deviation, so a tile of one flat colour maps to the zero token while the
/// colour of structures relative to their surroundings is kept.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchEmbedder {
    token_dim: usize,
    patch: usize,
    seed: u64,
    /// `token_dim × (3·patch²)`
    projection: Vec<f64>,
}

impl PatchEmbedder {
    pub fn new(token_dim: usize, patch: usize, seed: u64) -> Result<Self> {
        if token_dim == 0 || patch == 0 {
            return Err(Error::invalid("token dimension and patch size must be positive"));
        }
        let fan_in = 3 * patch * patch;
        let scale = 1.0 / (fan_in as f64).sqrt();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let projection = (0..token_dim * fan_in)
            .map(|_| scale * rng.sample::<f64, _>(StandardNormal))
            .collect();
        Ok(Self {
            token_dim,
            patch,
            seed,
            projection,
        })
    }

    pub fn token_dim(&self) -> usize {
        self.token_dim
    }

    pub fn patch(&self) -> usize {
        self.patch
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn embed(&self, img: &ImageRgb) -> Result<MorphologyTokens> {
        let p = self.patch;
        if !img.width().is_multiple_of(p) || !img.height().is_multiple_of(p) {
            return Err(Error::invalid(format!(
                "patch {p} does not divide image size {}x{}",
                img.width(),
                img.height()
            )));
        }
        let fan_in = 3 * p * p;
        let (tiles_x, tiles_y) = (img.width() / p, img.height() / p);
        let mut data = Vec::with_capacity(tiles_x * tiles_y * self.token_dim);
        let mut tile = vec![0.0; fan_in];
        for ty in 0..tiles_y {
            for tx in 0..tiles_x {
                for y in 0..p {
                    for x in 0..p {
                        let rgb = img.get(tx * p + x, ty * p + y);
                        for k in 0..3 {
                            tile[(y * p + x) * 3 + k] = rgb[k] as f64;
                        }
                    }
                }
                let mut var = 0.0;
                for k in 0..3 {
                    let mean = tile.iter().skip(k).step_by(3).sum::<f64>() / (p * p) as f64;
                    for v in tile.iter_mut().skip(k).step_by(3) {
                        *v -= mean;
                        var += *v * *v;
                    }
                }
                var /= fan_in as f64;
                if var <= 1e-12 {
                    data.extend(std::iter::repeat_n(0.0, self.token_dim));
                    continue;
                }
                let inv = 1.0 / var.sqrt();
                tile.iter_mut().for_each(|v| *v *= inv);
                for row in self.projection.chunks_exact(fan_in) {
                    data.push(row.iter().zip(&tile).map(|(a, b)| a * b).sum());
                }
            }
        }
        MorphologyTokens::new(tiles_x * tiles_y, self.token_dim, data)
    }
}

pub fn embed_morphology(img: &ImageRgb, token_dim: usize, patch: usize, seed: u64) -> Result<MorphologyTokens> {
    PatchEmbedder::new(token_dim, patch, seed)?.embed(img)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn striped(w: usize, h: usize) -> ImageRgb {
        let mut img = ImageRgb::filled(w, h, [0, 0, 0]);
        for y in 0..h {
            for x in 0..w {
                let v = ((x * 37 + y * 11) % 256) as u8;
                img.set(x, y, [v, v / 2, 255 - v]);
            }
        }
        img
    }

    #[test]
    fn token_count_follows_tiling() {
        let t = embed_morphology(&striped(64, 64), 8, 16, 1).unwrap();
        assert_eq!((t.count(), t.dim()), (16, 8));
        assert!(embed_morphology(&striped(60, 64), 8, 16, 1).is_err());
    }

    #[test]
    fn constant_image_maps_to_zero_tokens() {
        for rgb in [[90, 90, 90], [200, 40, 120]] {
            let t = embed_morphology(&ImageRgb::filled(32, 32, rgb), 8, 16, 1).unwrap();
            assert!(t.data().iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn tokens_ignore_uniform_gain_but_see_structure_colour() {
        let mut a = ImageRgb::filled(16, 16, [200, 200, 200]);
        let mut b = a.clone();
        let mut dim = ImageRgb::filled(16, 16, [100, 100, 100]);
        for y in 4..9 {
            for x in 4..9 {
                a.set(x, y, [120, 60, 20]);
                dim.set(x, y, [60, 30, 10]);
                b.set(x, y, [60, 80, 160]);
            }
        }
        let e = |img: &ImageRgb| embed_morphology(img, 8, 16, 3).unwrap();
        let (ta, tdim, tb) = (e(&a), e(&dim), e(&b));
        let close = ta.data().iter().zip(tdim.data()).all(|(x, y)| (x - y).abs() < 1e-9);
        assert!(close);
        assert!(ta.data().iter().zip(tb.data()).any(|(x, y)| (x - y).abs() > 1e-3));
    }

    #[test]
    fn fixed_seed_is_bit_identical() {
        let img = striped(32, 32);
        let a = embed_morphology(&img, 16, 8, 42).unwrap();
        let b = embed_morphology(&img, 16, 8, 42).unwrap();
        assert_eq!(a, b);
        let c = embed_morphology(&img, 16, 8, 43).unwrap();
        assert_ne!(a, c);
    }
}
