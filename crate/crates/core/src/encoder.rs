//! Column-wise encoder from a signal image to a temporal representation.
//!
//! Every image column (one time step, `H′·3` bytes scaled to `[0, 1]`) goes
//! through the same two-layer map `W2·relu(W1·col + b1) + b2`, so an image of
//! width `W′` becomes an `W′×d` representation whose row `t` depends only on
//! column `t`.

use crate::autodiff::{self, Tape, Var};
use crate::linalg::Mat;
use crate::rng;
use crate::sig::SignalImage;
use rand::Rng as _;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EncoderError {
    #[error("image is {got:?} but the encoder expects height {expected}")]
    ShapeMismatch { expected: usize, got: (usize, usize) },
    #[error("encoder dimensions must be >= 1")]
    InvalidDims,
    #[error(transparent)]
    Autodiff(#[from] autodiff::AutodiffError),
}

/// An `m×d` matrix: one feature row per time step.
#[derive(Debug, Clone, PartialEq)]
pub struct Representation(Mat);

impl Representation {
    pub fn new(m: Mat) -> Self {
        Self(m)
    }

    /// Temporal length.
    pub fn m(&self) -> usize {
        self.0.rows()
    }

    /// Feature dimension.
    pub fn d(&self) -> usize {
        self.0.cols()
    }

    pub fn matrix(&self) -> &Mat {
        &self.0
    }

    pub fn into_matrix(self) -> Mat {
        self.0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderParams {
    /// `h × 3H′`
    pub w1: Mat,
    /// `1 × h`
    pub b1: Mat,
    /// `d × h`
    pub w2: Mat,
    /// `1 × d`
    pub b2: Mat,
}

impl EncoderParams {
    /// Input image height `H′`.
    pub fn image_height(&self) -> usize {
        self.w1.cols() / 3
    }

    pub fn hidden(&self) -> usize {
        self.w1.rows()
    }

    pub fn dim(&self) -> usize {
        self.w2.rows()
    }

    pub fn validate(&self) -> Result<(), EncoderError> {
        let h = self.hidden();
        let ok = self.w1.cols().is_multiple_of(3)
            && self.w1.cols() > 0
            && self.b1.shape() == (1, h)
            && self.w2.cols() == h
            && self.b2.shape() == (1, self.dim())
            && [&self.w1, &self.b1, &self.w2, &self.b2].iter().all(|m| m.is_finite());
        if ok {
            Ok(())
        } else {
            Err(EncoderError::InvalidDims)
        }
    }

    pub fn tensors(&self) -> [&Mat; 4] {
        [&self.w1, &self.b1, &self.w2, &self.b2]
    }

    pub fn tensors_mut(&mut self) -> [&mut Mat; 4] {
        [&mut self.w1, &mut self.b1, &mut self.w2, &mut self.b2]
    }
}

fn xavier(r: &mut rng::Rng, rows: usize, cols: usize) -> Mat {
    let bound = (6.0 / (rows + cols) as f64).sqrt();
    Mat::from_fn(rows, cols, |_, _| r.random_range(-bound..=bound))
}

/// Xavier-uniform weights and zero biases for image height `image_height`,
/// `hidden` units and `dim` output features.
pub fn init_params(
    seed: u64,
    image_height: usize,
    hidden: usize,
    dim: usize,
) -> Result<EncoderParams, EncoderError> {
    if image_height == 0 || hidden == 0 || dim == 0 {
        return Err(EncoderError::InvalidDims);
    }
    let mut r = rng::rng_from_seed(seed);
    let w1 = xavier(&mut r, hidden, 3 * image_height);
    let w2 = xavier(&mut r, dim, hidden);
    Ok(EncoderParams {
        w1,
        b1: Mat::zeros(1, hidden),
        w2,
        b2: Mat::zeros(1, dim),
    })
}

/// The image as a `W×3H` matrix: row `t` is column `t` of the image with
/// entries ordered `(row, channel)` and scaled by `1/255`.
pub fn image_columns(img: &SignalImage) -> Mat {
    let (h, w) = (img.height(), img.width());
    Mat::from_fn(w, 3 * h, |t, k| f64::from(img.get(k / 3, t, k % 3)) / 255.0)
}

/// Tape handles of one encoder's parameters.
#[derive(Debug, Clone, Copy)]
pub struct EncoderVars {
    pub w1: Var,
    pub b1: Var,
    pub w2: Var,
    pub b2: Var,
}

impl EncoderVars {
    pub fn register(tape: &mut Tape, p: &EncoderParams, trainable: bool) -> Self {
        Self {
            w1: tape.leaf(p.w1.clone(), trainable),
            b1: tape.leaf(p.b1.clone(), trainable),
            w2: tape.leaf(p.w2.clone(), trainable),
            b2: tape.leaf(p.b2.clone(), trainable),
        }
    }

    pub fn all(&self) -> [Var; 4] {
        [self.w1, self.b1, self.w2, self.b2]
    }
}

/// Records the encoder on `tape` for a `W×3H′` column matrix.
pub fn encode_on_tape(tape: &mut Tape, columns: Var, p: &EncoderVars) -> autodiff::Result<Var> {
    let w1t = tape.transpose(p.w1)?;
    let pre = tape.matmul(columns, w1t)?;
    let pre = tape.add_row_bias(pre, p.b1)?;
    let hidden = tape.relu(pre)?;
    let w2t = tape.transpose(p.w2)?;
    let out = tape.matmul(hidden, w2t)?;
    tape.add_row_bias(out, p.b2)
}

fn check_image(img: &SignalImage, p: &EncoderParams) -> Result<(), EncoderError> {
    if img.height() != p.image_height() {
        return Err(EncoderError::ShapeMismatch {
            expected: p.image_height(),
            got: (img.height(), img.width()),
        });
    }
    Ok(())
}

/// Encodes one image; `m` equals the image width.
pub fn encode(img: &SignalImage, p: &EncoderParams) -> Result<Representation, EncoderError> {
    check_image(img, p)?;
    let mut tape = Tape::new();
    let vars = EncoderVars::register(&mut tape, p, false);
    let cols = tape.constant(image_columns(img));
    let out = encode_on_tape(&mut tape, cols, &vars)?;
    Ok(Representation(tape.value(out).clone()))
}

/// Records `img` as a constant on `tape` and encodes it.
pub fn encode_image_on_tape(
    tape: &mut Tape,
    img: &SignalImage,
    p: &EncoderParams,
    vars: &EncoderVars,
) -> Result<Var, EncoderError> {
    check_image(img, p)?;
    let cols = tape.constant(image_columns(img));
    Ok(encode_on_tape(tape, cols, vars)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::grad_check;
    use crate::sig::ImageKind;

    #[test]
    fn zero_image_zero_biases_is_zero() {
        let p = init_params(1, 8, 5, 4).unwrap();
        let img = SignalImage::filled(8, 6, ImageKind::Position, 0).unwrap();
        let r = encode(&img, &p).unwrap();
        assert_eq!(r.matrix(), &Mat::zeros(6, 4));
    }

    #[test]
    fn default_shape() {
        let p = init_params(1, 32, 32, 16).unwrap();
        let img = SignalImage::filled(32, 32, ImageKind::Fused, 90).unwrap();
        let r = encode(&img, &p).unwrap();
        assert_eq!((r.m(), r.d()), (32, 16));
        let tall = SignalImage::filled(30, 32, ImageKind::Fused, 90).unwrap();
        assert!(matches!(encode(&tall, &p), Err(EncoderError::ShapeMismatch { .. })));
    }

    #[test]
    fn column_locality() {
        let p = init_params(4, 6, 8, 5).unwrap();
        let px: Vec<u8> = (0..6 * 7 * 3).map(|k| (k * 37 % 256) as u8).collect();
        let a = SignalImage::new(6, 7, ImageKind::Position, px.clone()).unwrap();
        let mut px2 = px;
        for row in 0..6 {
            px2[(row * 7 + 3) * 3 + 1] ^= 0x5a;
        }
        let b = SignalImage::new(6, 7, ImageKind::Position, px2).unwrap();
        let (ra, rb) = (encode(&a, &p).unwrap(), encode(&b, &p).unwrap());
        for t in 0..7 {
            if t == 3 {
                assert_ne!(ra.matrix().row(t), rb.matrix().row(t));
            } else {
                assert_eq!(ra.matrix().row(t), rb.matrix().row(t));
            }
        }
    }

    #[test]
    fn init_is_deterministic_and_bounded() {
        let a = init_params(9, 4, 6, 3).unwrap();
        assert_eq!(a, init_params(9, 4, 6, 3).unwrap());
        assert_ne!(a, init_params(10, 4, 6, 3).unwrap());
        assert!(a.b1.values().iter().chain(a.b2.values()).all(|&v| v == 0.0));
        let b1 = (6.0 / (6.0 + 12.0f64)).sqrt();
        let b2 = (6.0 / (3.0 + 6.0f64)).sqrt();
        assert!(a.w1.values().iter().all(|v| v.abs() <= b1));
        assert!(a.w2.values().iter().all(|v| v.abs() <= b2));
        assert!(matches!(init_params(1, 0, 2, 2), Err(EncoderError::InvalidDims)));
    }

    #[test]
    fn encoder_gradients_match_finite_differences() {
        let mut p = init_params(3, 4, 5, 3).unwrap();
        p.b1 = Mat::from_fn(1, 5, |_, c| 0.05 * c as f64 - 0.1);
        p.b2 = Mat::from_fn(1, 3, |_, c| 0.2 - 0.1 * c as f64);
        let px: Vec<u8> = (0..4 * 6 * 3).map(|k| (k * 53 % 256) as u8).collect();
        let img = SignalImage::new(4, 6, ImageKind::Position, px).unwrap();
        let cols = image_columns(&img);
        let r = grad_check(
            |t, v| {
                let x = t.constant(cols.clone());
                let vars = EncoderVars {
                    w1: v[0],
                    b1: v[1],
                    w2: v[2],
                    b2: v[3],
                };
                let out = encode_on_tape(t, x, &vars)?;
                let sq = t.mul_self(out)?;
                t.mean(sq)
            },
            &[p.w1, p.b1, p.w2, p.b2],
            1e-5,
        )
        .unwrap();
        assert!(r.max_relative_error < 1e-4, "{r:?}");
    }
}
