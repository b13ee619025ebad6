//! Browser bindings. Images cross the boundary as 224 x 224 RGBA byte
//! arrays, the layout of `ImageData` on a canvas.

use wasm_bindgen::prelude::*;

use mfclip::eval::{apply_perturbation, PerturbKind, PerturbSpec, LEVELS};
use mfclip::nn::Tensor;
use mfclip::patch::{check_patch_size, patch_scores, select_richest, GlcmParams};
use mfclip::srm::SrmFilterBank;
use mfclip::synthetic::{fake_label, synthetic_image};

pub const SIDE: usize = 224;

pub fn rgba_to_tensor(rgba: &[u8], side: usize) -> Result<Tensor, String> {
    if rgba.len() != side * side * 4 {
        return Err(format!("expected {} RGBA bytes, got {}", side * side * 4, rgba.len()));
    }
    let mut data = vec![0.0; 3 * side * side];
    for (i, px) in rgba.chunks_exact(4).enumerate() {
        for c in 0..3 {
            data[c * side * side + i] = px[c] as f64 / 255.0;
        }
    }
    Tensor::new(&[3, side, side], data).map_err(|e| e.to_string())
}

pub fn tensor_to_rgba(t: &Tensor) -> Vec<u8> {
    let (h, w) = (t.shape()[1], t.shape()[2]);
    let d = t.data();
    let mut out = Vec::with_capacity(h * w * 4);
    for i in 0..h * w {
        for c in 0..3 {
            out.push((d[c * h * w + i].clamp(0.0, 1.0) * 255.0).round() as u8);
        }
        out.push(255);
    }
    out
}

/// Residual channels mapped from `[-q, q]` to bytes, one filter per channel.
pub fn residual_to_rgba(res: &Tensor, q: f64) -> Vec<u8> {
    let mut scaled = res.clone();
    for v in scaled.data_mut() {
        *v = (*v + q) / (2.0 * q);
    }
    tensor_to_rgba(&scaled)
}

/// A synthetic face. With `fake`, a checker/noise signature of the given
/// amplitude is added to one quadrant.
#[wasm_bindgen]
pub fn synthetic_face(seed: u32, fake: bool, amplitude: f64) -> Vec<u8> {
    let label = fake.then(|| fake_label(seed as usize));
    tensor_to_rgba(&synthetic_image(seed as u64, label, amplitude.clamp(0.0, 1.0)).pixels)
}

#[wasm_bindgen]
pub struct PatchReport {
    index: usize,
    row: usize,
    col: usize,
    p: usize,
    homogeneity: f64,
    scores: Vec<f64>,
    residual: Vec<u8>,
}

#[wasm_bindgen]
impl PatchReport {
    #[wasm_bindgen(getter)]
    pub fn index(&self) -> usize {
        self.index
    }
    #[wasm_bindgen(getter)]
    pub fn row(&self) -> usize {
        self.row
    }
    #[wasm_bindgen(getter)]
    pub fn col(&self) -> usize {
        self.col
    }
    #[wasm_bindgen(getter)]
    pub fn p(&self) -> usize {
        self.p
    }
    #[wasm_bindgen(getter)]
    pub fn homogeneity(&self) -> f64 {
        self.homogeneity
    }
    /// GLCM homogeneity of every tile, row-major.
    #[wasm_bindgen(getter)]
    pub fn scores(&self) -> Vec<f64> {
        self.scores.clone()
    }
    /// SRM residual of the selected tile as `p x p` RGBA.
    #[wasm_bindgen(getter)]
    pub fn residual(&self) -> Vec<u8> {
        self.residual.clone()
    }
}

pub fn analyze(rgba: &[u8], p: usize) -> Result<PatchReport, String> {
    let img = rgba_to_tensor(rgba, SIDE)?;
    check_patch_size(p, SIDE, SIDE).map_err(|e| e.to_string())?;
    let params = GlcmParams::default();
    let scores = patch_scores(&img, p, &params).map_err(|e| e.to_string())?;
    let best = select_richest(&img, p, &params).map_err(|e| e.to_string())?;
    let bank = SrmFilterBank::default();
    let residual = residual_to_rgba(&bank.extract(&best.pixels), bank.q());
    Ok(PatchReport {
        index: best.index,
        row: best.coords.0,
        col: best.coords.1,
        p,
        homogeneity: best.homogeneity,
        scores,
        residual,
    })
}

/// Scores the image's tiles, picks the richest and returns its SRM residual.
#[wasm_bindgen]
pub fn richest_patch(rgba: &[u8], p: usize) -> Result<PatchReport, JsError> {
    analyze(rgba, p).map_err(|e| JsError::new(&e))
}

pub fn corrupt(rgba: &[u8], kind: &str, level: usize, seed: u32) -> Result<Vec<u8>, String> {
    let img = rgba_to_tensor(rgba, SIDE)?;
    let kind: PerturbKind = kind.parse().map_err(|e: mfclip::Error| e.to_string())?;
    if level >= LEVELS {
        return Err(format!("level must be below {LEVELS}"));
    }
    let out = apply_perturbation(&img, PerturbSpec { kind, level }, seed as u64).map_err(|e| e.to_string())?;
    Ok(tensor_to_rgba(&out))
}

/// Applies one corruption of the robustness suite.
#[wasm_bindgen]
pub fn perturb(rgba: &[u8], kind: &str, level: usize, seed: u32) -> Result<Vec<u8>, JsError> {
    corrupt(rgba, kind, level, seed).map_err(|e| JsError::new(&e))
}

/// Names accepted by [`perturb`].
#[wasm_bindgen]
pub fn perturbation_kinds() -> Vec<String> {
    PerturbKind::ALL.iter().map(|k| k.name().to_string()).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rgba_round_trip() {
        let rgba = synthetic_face(4, true, 0.5);
        let t = rgba_to_tensor(&rgba, SIDE).unwrap();
        assert_eq!(tensor_to_rgba(&t), rgba);
    }

    #[test]
    fn level_zero_is_identity() {
        let rgba = synthetic_face(1, false, 0.0);
        for k in perturbation_kinds() {
            assert_eq!(corrupt(&rgba, &k, 0, 7).unwrap(), rgba, "{k}");
        }
    }

    #[test]
    fn analysis_finds_the_signed_quadrant() {
        let rgba = synthetic_face(11, true, 1.0);
        let q = synthetic_image(11, Some(fake_label(11)), 1.0).quadrant.unwrap();
        let r = analyze(&rgba, 112).unwrap();
        assert_eq!(r.index, q);
        assert_eq!(r.scores.len(), 4);
        assert_eq!(r.residual.len(), 112 * 112 * 4);
    }

    #[test]
    fn bad_inputs_are_reported() {
        assert!(analyze(&[0; 10], 112).is_err());
        let rgba = synthetic_face(0, false, 0.0);
        assert!(analyze(&rgba, 100).is_err());
        assert!(corrupt(&rgba, "sepia", 1, 0).is_err());
        assert!(corrupt(&rgba, "blur", 6, 0).is_err());
    }
}
