//! Browser demo: renders signal images, DTW alignments and cross-attention
//! maps for synthetic actions.

use sigshot::attention::{self, CsaParams};
use sigshot::dtw::{self, DtwMode};
use sigshot::encoder;
use sigshot::sig::{self, ImageKind, SignalImage};
use sigshot::skeleton::{self, default_ntu_topology, SkeletonSequence};
use sigshot::Mat;
use wasm_bindgen::prelude::*;

/// An RGBA bitmap plus one scalar summary.
#[wasm_bindgen]
#[derive(Debug, Clone)]
pub struct Picture {
    width: usize,
    height: usize,
    rgba: Vec<u8>,
    value: f64,
}

#[wasm_bindgen]
impl Picture {
    #[wasm_bindgen(getter)]
    pub fn width(&self) -> usize {
        self.width
    }

    #[wasm_bindgen(getter)]
    pub fn height(&self) -> usize {
        self.height
    }

    /// Row-major RGBA bytes, ready for `ImageData`.
    pub fn rgba(&self) -> Vec<u8> {
        self.rgba.clone()
    }

    /// DTW distance or attention entropy, depending on the producer.
    #[wasm_bindgen(getter)]
    pub fn value(&self) -> f64 {
        self.value
    }
}

/// Instance `instance` of class `class_id`; the class motion depends only on
/// `(class_id, seed)`.
fn action(class_id: u32, seed: u64, instance: u64, frames: usize, speed: f64) -> Result<SkeletonSequence, String> {
    let spec = skeleton::random_class_spec(class_id, seed);
    let noise_seed = seed ^ (u64::from(class_id) << 32) ^ instance;
    skeleton::synth_action(&spec, frames, speed, 0.01, noise_seed).map_err(|e| e.to_string())
}

fn image(seq: &SkeletonSequence, kind: ImageKind, height: usize, width: usize) -> Result<SignalImage, String> {
    let topo = default_ntu_topology();
    let out = match kind {
        ImageKind::Position => sig::resize_bilinear(&sig::position_image(seq), height, width),
        ImageKind::Orientation => sig::orientation_image(seq, &topo).and_then(|o| sig::resize_bilinear(&o, height, width)),
        ImageKind::Fused => sig::orientation_image(seq, &topo)
            .and_then(|o| sig::early_fuse(&sig::position_image(seq), &o, height, width)),
    };
    out.map_err(|e| e.to_string())
}

fn kind_from(name: &str) -> Result<ImageKind, String> {
    match name {
        "position" => Ok(ImageKind::Position),
        "orientation" => Ok(ImageKind::Orientation),
        "fused" => Ok(ImageKind::Fused),
        other => Err(format!("unknown feature {other:?}")),
    }
}

/// Dark blue to yellow.
fn colour(t: f64) -> [u8; 4] {
    let t = if t.is_finite() { t.clamp(0.0, 1.0) } else { 1.0 };
    let lerp = |a: f64, b: f64| (a + (b - a) * t).round() as u8;
    [lerp(20.0, 250.0), lerp(30.0, 230.0), lerp(90.0, 40.0), 255]
}

fn heatmap(m: &Mat, transform: impl Fn(f64) -> f64) -> Vec<u8> {
    let vals: Vec<f64> = m.values().iter().map(|&v| transform(v)).filter(|v| v.is_finite()).collect();
    let lo = vals.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let span = if hi > lo { hi - lo } else { 1.0 };
    m.values().iter().flat_map(|&v| colour((transform(v) - lo) / span)).collect()
}

pub fn render_action_impl(
    class_id: u32,
    seed: u64,
    frames: usize,
    speed: f64,
    feature: &str,
    height: usize,
    width: usize,
) -> Result<Picture, String> {
    let img = image(&action(class_id, seed, 0, frames, speed)?, kind_from(feature)?, height, width)?;
    Ok(Picture {
        width: img.width(),
        height: img.height(),
        rgba: img.to_rgba(),
        value: f64::NAN,
    })
}

pub fn align_actions_impl(
    class_a: u32,
    class_b: u32,
    seed: u64,
    frames: usize,
    speed_b: f64,
) -> Result<Picture, String> {
    let a = image(&action(class_a, seed, 0, frames, 1.0)?, ImageKind::Position, 25, frames)?;
    let b = image(&action(class_b, seed, 1, frames, speed_b)?, ImageKind::Position, 25, frames)?;
    let cost = dtw::local_costs(&encoder::image_columns(&a), &encoder::image_columns(&b)).map_err(|e| e.to_string())?;
    let warp = dtw::dtw(&cost, 1, DtwMode::Hard).map_err(|e| e.to_string())?;
    let mut rgba = heatmap(&warp.cumulative, |v| (1.0 + v).ln());
    for &(i, j) in warp.path.as_deref().unwrap_or_default() {
        let k = 4 * (i * frames + j);
        rgba[k..k + 4].copy_from_slice(&[230, 30, 40, 255]);
    }
    Ok(Picture {
        width: frames,
        height: frames,
        rgba,
        value: warp.normalized_distance(),
    })
}

pub fn attention_map_impl(class_a: u32, class_b: u32, seed: u64, frames: usize, size: usize) -> Result<Picture, String> {
    let (d, hidden) = (16, 32);
    let a = image(&action(class_a, seed, 0, frames, 1.0)?, ImageKind::Position, size, size)?;
    let b = image(&action(class_b, seed, 1, frames, 1.0)?, ImageKind::Position, size, size)?;
    let enc = encoder::init_params(seed, size, hidden, d).map_err(|e| e.to_string())?;
    let rq = encoder::encode(&a, &enc).map_err(|e| e.to_string())?;
    let rp = encoder::encode(&b, &enc).map_err(|e| e.to_string())?;
    let csa = CsaParams::init(seed, d, false, 1.0);
    let att = attention::cross_attend(&rq, &rp, &csa).map_err(|e| e.to_string())?;
    let w = &att.query_weights;
    let entropy = -w.values().iter().filter(|&&p| p > 0.0).map(|&p| p * p.ln()).sum::<f64>() / w.rows() as f64;
    Ok(Picture {
        width: w.cols(),
        height: w.rows(),
        rgba: heatmap(w, |v| v),
        value: entropy,
    })
}

/// Signal image of a synthetic action; `feature` is position, orientation or fused.
#[wasm_bindgen]
pub fn render_action(
    class_id: u32,
    seed: u32,
    frames: usize,
    speed: f64,
    feature: &str,
    height: usize,
    width: usize,
) -> Result<Picture, JsValue> {
    render_action_impl(class_id, seed.into(), frames, speed, feature, height, width).map_err(|e| JsValue::from_str(&e))
}

/// Cumulative DTW table between two actions' position columns, with the
/// warping path drawn in red; `value` is the normalized distance.
#[wasm_bindgen]
pub fn align_actions(class_a: u32, class_b: u32, seed: u32, frames: usize, speed_b: f64) -> Result<Picture, JsValue> {
    align_actions_impl(class_a, class_b, seed.into(), frames, speed_b).map_err(|e| JsValue::from_str(&e))
}

/// Query-side cross-attention weights of an untrained encoder; `value` is
/// the mean row entropy.
#[wasm_bindgen]
pub fn attention_map(class_a: u32, class_b: u32, seed: u32, frames: usize, size: usize) -> Result<Picture, JsValue> {
    attention_map_impl(class_a, class_b, seed.into(), frames, size).map_err(|e| JsValue::from_str(&e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pictures_have_consistent_sizes() {
        for f in ["position", "orientation", "fused"] {
            let p = render_action_impl(3, 1, 40, 1.0, f, 32, 48).unwrap();
            assert_eq!((p.width, p.height, p.rgba.len()), (48, 32, 48 * 32 * 4));
        }
        assert!(render_action_impl(3, 1, 40, 1.0, "depth", 32, 32).is_err());
        let a = attention_map_impl(1, 2, 5, 40, 16).unwrap();
        assert_eq!((a.width, a.height, a.rgba.len()), (16, 16, 16 * 16 * 4));
    }

    #[test]
    fn alignment_path_spans_the_table() {
        let p = align_actions_impl(4, 4, 9, 30, 0.5).unwrap();
        assert_eq!(p.rgba.len(), 30 * 30 * 4);
        assert!(p.value >= 0.0);
        let red = |i: usize, j: usize| p.rgba[4 * (i * 30 + j)..4 * (i * 30 + j) + 3] == [230, 30, 40];
        assert!(red(0, 0) && red(29, 29));
    }
}
