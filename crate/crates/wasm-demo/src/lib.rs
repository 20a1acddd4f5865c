//! Browser demo: schedule curves, η ramps and synthetic stain pairs.
//! Everything runs client-side; `www/index.html` draws the results on canvases.

use staindiff::schedule::{make_linear_schedule, rescale_zero_terminal_snr, trailing_timesteps, EtaSchedule};
use staindiff::synth::{generate_pair, SynthParams};
use wasm_bindgen::prelude::*;

fn js_err(e: staindiff::Error) -> JsValue {
    JsValue::from_str(&e.to_string())
}

/// √ᾱ_t for t = 1..=T, with or without the zero-terminal-SNR rescale.
#[wasm_bindgen]
pub fn sqrt_alpha_bar_curve(num_timesteps: usize, beta_start: f64, beta_end: f64, zero_terminal: bool) -> Result<Vec<f64>, JsValue> {
    let mut s = make_linear_schedule(num_timesteps, beta_start, beta_end).map_err(js_err)?;
    if zero_terminal {
        s = rescale_zero_terminal_snr(&s).map_err(js_err)?;
    }
    Ok(s.alpha_bars().iter().map(|a| a.sqrt()).collect())
}

/// Timesteps visited by a trailing plan, highest first.
#[wasm_bindgen]
pub fn trailing_plan(num_timesteps: usize, steps: usize) -> Result<Vec<u32>, JsValue> {
    let plan = trailing_timesteps(num_timesteps, steps).map_err(js_err)?;
    Ok(plan.steps().iter().map(|&t| t as u32).collect())
}

/// η per denoising step; `start < 0` means the constant schedule η = |start|.
#[wasm_bindgen]
pub fn eta_curve(start: f64, steps: usize) -> Result<Vec<f64>, JsValue> {
    let e = if start < 0.0 { EtaSchedule::constant(-start) } else { EtaSchedule::cosine(start) }.map_err(js_err)?;
    (0..steps).map(|i| e.at_step(i, steps).map_err(js_err)).collect()
}

/// A synthetic pair as one RGBA strip: source on the left, target on the right.
#[wasm_bindgen]
pub struct PairView {
    width: usize,
    height: usize,
    rgba: Vec<u8>,
    expressions: Vec<f64>,
}

#[wasm_bindgen]
impl PairView {
    #[wasm_bindgen(getter)]
    pub fn width(&self) -> usize {
        self.width
    }

    #[wasm_bindgen(getter)]
    pub fn height(&self) -> usize {
        self.height
    }

    pub fn rgba(&self) -> Vec<u8> {
        self.rgba.clone()
    }

    /// Per-nucleus expression levels in [0, 1].
    pub fn expressions(&self) -> Vec<f64> {
        self.expressions.clone()
    }
}

#[wasm_bindgen]
pub fn synth_pair(seed: u64, index: u64, exposure_min: f64, exposure_max: f64) -> Result<PairView, JsValue> {
    let sp = SynthParams {
        seed,
        exposure_min,
        exposure_max,
        ..SynthParams::default()
    };
    sp.validate().map_err(js_err)?;
    let pair = generate_pair(&sp, index).map_err(js_err)?;
    let (w, h) = (pair.source.width(), pair.source.height());
    let mut rgba = Vec::with_capacity(2 * w * h * 4);
    for y in 0..h {
        for img in [&pair.source, &pair.target] {
            for x in 0..w {
                let [r, g, b] = img.get(x, y);
                rgba.extend_from_slice(&[r, g, b, 255]);
            }
        }
    }
    Ok(PairView {
        width: 2 * w,
        height: h,
        rgba,
        expressions: pair.nuclei.iter().map(|n| n.expression).collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn curves_have_expected_ends() {
        let z = sqrt_alpha_bar_curve(1000, 1e-4, 0.02, true).unwrap();
        assert_eq!(z.len(), 1000);
        assert_eq!(*z.last().unwrap(), 0.0);
        let plain = sqrt_alpha_bar_curve(1000, 1e-4, 0.02, false).unwrap();
        assert!(*plain.last().unwrap() > 0.0);
        assert!((z[0] - plain[0]).abs() < 1e-12);
        assert_eq!(trailing_plan(1000, 4).unwrap(), vec![1000, 750, 500, 250]);
    }

    #[test]
    fn eta_ramp_and_constant() {
        let e = eta_curve(0.2, 3).unwrap();
        assert!((e[0] - 0.2).abs() < 1e-12 && (e[1] - 0.6).abs() < 1e-12 && (e[2] - 1.0).abs() < 1e-12);
        assert_eq!(eta_curve(-0.5, 4).unwrap(), vec![0.5; 4]);
    }

    #[test]
    fn pair_strip_layout() {
        let v = synth_pair(3, 0, 0.3, 1.25).unwrap();
        assert_eq!((v.width(), v.height()), (128, 64));
        assert_eq!(v.rgba().len(), 128 * 64 * 4);
        assert!(!v.expressions().is_empty());
        assert!(v.expressions().iter().all(|e| (0.0..=1.0).contains(e)));
    }
}
