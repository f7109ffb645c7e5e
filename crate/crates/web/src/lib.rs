//! Browser demo: phantom slice viewer, exact McNemar test and the detection
//! summary row, compiled to WebAssembly.

use aisdet::eval::{mcnemar_exact, round_f64_half_up, FormattedRow, MatchCounts, McNemarInput};
use aisdet::phantom::{generate_case, PhantomCase, PhantomConfig};
use aisdet::volume::{BoundingBox2D, WindowSettings};
use wasm_bindgen::prelude::*;

fn js_err(e: impl std::fmt::Display) -> JsError {
    JsError::new(&e.to_string())
}

#[wasm_bindgen]
pub struct PhantomViewer {
    case: PhantomCase,
}

#[wasm_bindgen]
impl PhantomViewer {
    #[wasm_bindgen(constructor)]
    pub fn new(seed: u64, index: usize) -> Result<PhantomViewer, JsError> {
        let cfg = PhantomConfig { seed, ..PhantomConfig::default() };
        Ok(Self { case: generate_case(&cfg, index).map_err(js_err)? })
    }

    #[wasm_bindgen(getter)]
    pub fn case_id(&self) -> String {
        self.case.case_id.clone()
    }

    #[wasm_bindgen(getter)]
    pub fn width(&self) -> usize {
        self.case.volume.nx()
    }

    #[wasm_bindgen(getter)]
    pub fn height(&self) -> usize {
        self.case.volume.ny()
    }

    #[wasm_bindgen(getter)]
    pub fn depth(&self) -> usize {
        self.case.volume.nz()
    }

    /// Lesion boxes as `[[z, x_min, y_min, x_max, y_max], ...]`.
    pub fn lesions_json(&self) -> String {
        let rows: Vec<[f64; 5]> = self.case.lesions.iter().flat_map(|l| &l.boxes).map(|b| [b.z as f64, b.x_min, b.y_min, b.x_max, b.y_max]).collect();
        serde_json::to_string(&rows).expect("plain numbers serialize")
    }

    /// RGBA pixels of slice `z` through the given HU window, with lesion boxes
    /// in green and confounders in orange.
    pub fn render(&self, z: usize, center: f32, width: f32, outlines: bool) -> Result<Vec<u8>, JsError> {
        let vol = &self.case.volume;
        if z >= vol.nz() {
            return Err(JsError::new(&format!("slice {z} outside 0..{}", vol.nz())));
        }
        if width <= 0.0 {
            return Err(JsError::new("window width must be positive"));
        }
        let window = WindowSettings { center, width };
        let (w, h) = (vol.nx(), vol.ny());
        let mut px = Vec::with_capacity(w * h * 4);
        for &hu in vol.slice(z) {
            let g = (window.map(hu as f32) * 255.0).round() as u8;
            px.extend_from_slice(&[g, g, g, 255]);
        }
        if outlines {
            for b in self.case.lesions.iter().flat_map(|l| &l.boxes).filter(|b| b.z == z) {
                outline(&mut px, w, h, b, [60, 220, 90]);
            }
            for b in self.case.confounders.iter().filter(|b| b.z == z) {
                outline(&mut px, w, h, b, [250, 150, 40]);
            }
        }
        Ok(px)
    }
}

fn outline(px: &mut [u8], w: usize, h: usize, b: &BoundingBox2D, rgb: [u8; 3]) {
    let Some(c) = b.clip(w, h) else { return };
    let (x0, y0) = (c.x_min.floor() as usize, c.y_min.floor() as usize);
    let (x1, y1) = ((c.x_max.ceil() as usize).min(w) - 1, (c.y_max.ceil() as usize).min(h) - 1);
    let mut put = |x: usize, y: usize| px[(y * w + x) * 4..][..3].copy_from_slice(&rgb);
    for x in x0..=x1 {
        put(x, y0);
        put(x, y1);
    }
    for y in y0..=y1 {
        put(x0, y);
        put(x1, y);
    }
}

/// Exact two-sided McNemar p-value for discordant counts `b` and `c`.
#[wasm_bindgen]
pub fn mcnemar(b: u32, c: u32) -> f64 {
    mcnemar_exact(McNemarInput { b: b as u64, c: c as u64 })
}

/// The p-value rounded half-up to four decimals.
#[wasm_bindgen]
pub fn mcnemar_printed(b: u32, c: u32) -> String {
    round_f64_half_up(mcnemar(b, c), 4).to_string()
}

/// Sensitivity %, FPC, precision % and F1 at the published precision, as JSON.
#[wasm_bindgen]
pub fn summary_row(tp: u32, fp: u32, fn_: u32, cases: u32) -> Result<String, JsError> {
    let counts = MatchCounts::new(tp as usize, fp as usize, fn_ as usize, cases as usize);
    let r = FormattedRow::from_counts("row", &counts).map_err(js_err)?;
    Ok(serde_json::json!({
        "sensitivity_pct": r.sensitivity_pct.to_string(),
        "fpc": r.fpc.to_string(),
        "precision_pct": r.precision_pct.to_string(),
        "f1": r.f1.to_string(),
    })
    .to_string())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn render_size_and_outline() {
        let v = PhantomViewer::new(20240611, 0).unwrap();
        let z = v.case.lesions.first().map(|l| l.boxes[0].z).unwrap_or(0);
        let px = v.render(z, 40.0, 80.0, true).unwrap();
        assert_eq!(px.len(), v.width() * v.height() * 4);
        if !v.case.lesions.is_empty() {
            assert!(px.chunks(4).any(|p| p[..3] == [60, 220, 90]));
        }
        let plain = v.render(z, 40.0, 80.0, false).unwrap();
        assert!(plain.chunks(4).all(|p| p[0] == p[1] && p[1] == p[2]));
    }

    #[test]
    fn published_values() {
        assert_eq!(mcnemar(6, 0), 0.03125);
        assert_eq!(mcnemar_printed(6, 0), "0.0313");
        let row: serde_json::Value = serde_json::from_str(&summary_row(28, 62, 47, 49).unwrap()).unwrap();
        assert_eq!(row["fpc"], "1.265");
        assert_eq!(row["f1"], "0.339");
    }
}
