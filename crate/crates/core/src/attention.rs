//! Cross-attention between a query and a support representation.
//!
//! ```text
//! R̂q = softmax_rows((Rq·M1qᵀ)(Rp·M2qᵀ)ᵀ / √d) · (Rq·M3qᵀ)
//! R̂p = softmax_rows((Rp·M1pᵀ)(Rq·M2pᵀ)ᵀ / √d) · (Rp·M3pᵀ)
//! ```
//!
//! The `d×d` matrices act on the feature axis. Both sides are computed from
//! the original representations. The attention matrix of one side is
//! `mq×mp` and multiplies that side's own `m×d` values, so both inputs must
//! share their temporal length.

use crate::autodiff::{self, Tape, Var};
use crate::encoder::Representation;
use crate::linalg::Mat;
use crate::rng;
use rand::Rng as _;
use serde::{Deserialize, Serialize};
use std::fmt::Write as _;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AttentionError {
    #[error("representation shapes {query:?} and {support:?} are incompatible with d = {d}")]
    DimMismatch {
        query: (usize, usize),
        support: (usize, usize),
        d: usize,
    },
    #[error("matrices differ in shape: {0:?} vs {1:?}")]
    ShapeMismatch((usize, usize), (usize, usize)),
    #[error(transparent)]
    Autodiff(#[from] autodiff::AutodiffError),
}

/// `M1, M2, M3` for one side.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionSide {
    pub m1: Mat,
    pub m2: Mat,
    pub m3: Mat,
}

impl AttentionSide {
    pub fn identity(d: usize) -> Self {
        Self {
            m1: Mat::identity(d),
            m2: Mat::identity(d),
            m3: Mat::identity(d),
        }
    }

    fn tensors_mut(&mut self) -> [&mut Mat; 3] {
        [&mut self.m1, &mut self.m2, &mut self.m3]
    }

    fn tensors(&self) -> [&Mat; 3] {
        [&self.m1, &self.m2, &self.m3]
    }
}

/// Query-side and support-side transforms. `support: None` ties the support
/// side to the query-side matrices.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CsaParams {
    pub query: AttentionSide,
    pub support: Option<AttentionSide>,
}

impl CsaParams {
    pub fn identity(d: usize, tied: bool) -> Self {
        Self {
            query: AttentionSide::identity(d),
            support: (!tied).then(|| AttentionSide::identity(d)),
        }
    }

    /// Identity plus uniform noise in `±scale/√d`, seeded.
    pub fn init(seed: u64, d: usize, tied: bool, scale: f64) -> Self {
        let mut r = rng::rng_from_seed(seed);
        let bound = scale / (d as f64).sqrt();
        let mut side = || AttentionSide {
            m1: Mat::identity(d).add(&Mat::from_fn(d, d, |_, _| r.random_range(-bound..=bound))),
            m2: Mat::identity(d).add(&Mat::from_fn(d, d, |_, _| r.random_range(-bound..=bound))),
            m3: Mat::identity(d).add(&Mat::from_fn(d, d, |_, _| r.random_range(-bound..=bound))),
        };
        let query = side();
        let support = (!tied).then(side);
        Self { query, support }
    }

    pub fn d(&self) -> usize {
        self.query.m1.rows()
    }

    pub fn is_tied(&self) -> bool {
        self.support.is_none()
    }

    pub fn support_side(&self) -> &AttentionSide {
        self.support.as_ref().unwrap_or(&self.query)
    }

    pub fn tensors(&self) -> Vec<&Mat> {
        let mut v: Vec<&Mat> = self.query.tensors().to_vec();
        if let Some(s) = &self.support {
            v.extend(s.tensors());
        }
        v
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Mat> {
        let mut v: Vec<&mut Mat> = self.query.tensors_mut().into_iter().collect();
        if let Some(s) = &mut self.support {
            v.extend(s.tensors_mut());
        }
        v
    }

    pub fn validate(&self) -> Result<(), AttentionError> {
        let d = self.d();
        for m in self.tensors() {
            if m.shape() != (d, d) {
                return Err(AttentionError::ShapeMismatch(m.shape(), (d, d)));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy)]
pub struct SideVars {
    pub m1: Var,
    pub m2: Var,
    pub m3: Var,
}

/// Tape handles of [`CsaParams`].
#[derive(Debug, Clone, Copy)]
pub struct CsaVars {
    pub query: SideVars,
    pub support: SideVars,
}

impl CsaVars {
    pub fn register(tape: &mut Tape, p: &CsaParams, trainable: bool) -> Self {
        let mut side = |s: &AttentionSide| SideVars {
            m1: tape.leaf(s.m1.clone(), trainable),
            m2: tape.leaf(s.m2.clone(), trainable),
            m3: tape.leaf(s.m3.clone(), trainable),
        };
        let query = side(&p.query);
        let support = match &p.support {
            Some(s) => side(s),
            None => query,
        };
        Self { query, support }
    }

    /// Distinct handles, in the order of [`CsaParams::tensors`].
    pub fn all(&self, tied: bool) -> Vec<Var> {
        let q = self.query;
        let mut v = vec![q.m1, q.m2, q.m3];
        if !tied {
            let s = self.support;
            v.extend([s.m1, s.m2, s.m3]);
        }
        v
    }
}

/// Outputs of one cross-attention step, as tape handles.
#[derive(Debug, Clone, Copy)]
pub struct AttendedVars {
    pub query: Var,
    pub support: Var,
    pub query_weights: Var,
    pub support_weights: Var,
}

fn attend_side(tape: &mut Tape, own: Var, other: Var, m: &SideVars, d: usize) -> autodiff::Result<(Var, Var)> {
    let m1t = tape.transpose(m.m1)?;
    let m2t = tape.transpose(m.m2)?;
    let m3t = tape.transpose(m.m3)?;
    let keys_own = tape.matmul(own, m1t)?;
    let keys_other = tape.matmul(other, m2t)?;
    let other_t = tape.transpose(keys_other)?;
    let scores = tape.matmul(keys_own, other_t)?;
    let scores = tape.scale(scores, 1.0 / (d as f64).sqrt())?;
    let weights = tape.softmax_rows(scores)?;
    let values = tape.matmul(own, m3t)?;
    let out = tape.matmul(weights, values)?;
    Ok((out, weights))
}

/// Records cross-attention on `tape`.
pub fn cross_attend_on_tape(
    tape: &mut Tape,
    rq: Var,
    rp: Var,
    p: &CsaVars,
) -> Result<AttendedVars, AttentionError> {
    let (sq, sp) = (tape.shape(rq), tape.shape(rp));
    let d = tape.shape(p.query.m1).0;
    if sq.1 != d || sp.1 != d || sq.0 != sp.0 || sq.0 == 0 {
        return Err(AttentionError::DimMismatch {
            query: sq,
            support: sp,
            d,
        });
    }
    let (query, query_weights) = attend_side(tape, rq, rp, &p.query, d)?;
    let (support, support_weights) = attend_side(tape, rp, rq, &p.support, d)?;
    Ok(AttendedVars {
        query,
        support,
        query_weights,
        support_weights,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct CrossAttention {
    pub query: Representation,
    pub support: Representation,
    /// Query-side softmax matrix (`mq×mp`).
    pub query_weights: Mat,
    /// Support-side softmax matrix (`mp×mq`).
    pub support_weights: Mat,
}

pub fn cross_attend(
    rq: &Representation,
    rp: &Representation,
    p: &CsaParams,
) -> Result<CrossAttention, AttentionError> {
    p.validate()?;
    let mut tape = Tape::new();
    let vars = CsaVars::register(&mut tape, p, false);
    let q = tape.constant(rq.matrix().clone());
    let s = tape.constant(rp.matrix().clone());
    let out = cross_attend_on_tape(&mut tape, q, s, &vars)?;
    Ok(CrossAttention {
        query: Representation::new(tape.value(out.query).clone()),
        support: Representation::new(tape.value(out.support).clone()),
        query_weights: tape.value(out.query_weights).clone(),
        support_weights: tape.value(out.support_weights).clone(),
    })
}

/// `‖a − b‖_F`.
pub fn frobenius_distance(a: &Mat, b: &Mat) -> Result<f64, AttentionError> {
    if a.shape() != b.shape() {
        return Err(AttentionError::ShapeMismatch(a.shape(), b.shape()));
    }
    Ok(a.sub(b).frobenius_norm())
}

/// Headerless CSV grid of an attention matrix.
pub fn weights_csv(w: &Mat) -> String {
    let mut s = String::new();
    for r in 0..w.rows() {
        let line: Vec<String> = w.row(r).iter().map(|v| format!("{v}")).collect();
        let _ = writeln!(s, "{}", line.join(","));
    }
    s
}

/// 8-bit PGM (P5) heatmap, each row scaled by its own maximum.
pub fn weights_pgm(w: &Mat) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n255\n", w.cols(), w.rows()).into_bytes();
    for r in 0..w.rows() {
        let row = w.row(r);
        let max = row.iter().cloned().fold(0.0, f64::max);
        for &v in row {
            let px = if max > 0.0 { (255.0 * v / max + 0.5).floor() } else { 0.0 };
            out.push(px.clamp(0.0, 255.0) as u8);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::grad_check;

    fn rand_mat(seed: u64, rows: usize, cols: usize) -> Mat {
        let mut r = rng::rng_from_seed(seed);
        Mat::from_fn(rows, cols, |_, _| r.random_range(-1.0..1.0))
    }

    #[test]
    fn single_row_identity_is_a_no_op() {
        let rq = Representation::new(Mat::from_rows(&[[0.3, -1.0, 2.0]]));
        let rp = Representation::new(Mat::from_rows(&[[5.0, 0.1, -0.7]]));
        let out = cross_attend(&rq, &rp, &CsaParams::identity(3, false)).unwrap();
        assert_eq!(out.query_weights, Mat::scalar(1.0));
        assert_eq!(out.query, rq);
        assert_eq!(out.support, rp);
    }

    #[test]
    fn symmetric_inputs_give_symmetric_outputs() {
        let r = Representation::new(rand_mat(1, 5, 4));
        let p = CsaParams::init(3, 4, true, 0.5);
        let out = cross_attend(&r, &r, &p).unwrap();
        assert_eq!(out.query, out.support);
    }

    #[test]
    fn attention_rows_are_stochastic() {
        let p = CsaParams::init(5, 6, false, 1.0);
        for seed in 0..10 {
            let rq = Representation::new(rand_mat(seed, 7, 6).scale(3.0));
            let rp = Representation::new(rand_mat(seed + 100, 7, 6).scale(3.0));
            let out = cross_attend(&rq, &rp, &p).unwrap();
            for w in [&out.query_weights, &out.support_weights] {
                for r in 0..w.rows() {
                    let total: f64 = w.row(r).iter().sum();
                    assert!((total - 1.0).abs() < 1e-9);
                    assert!(w.row(r).iter().all(|&v| v > 0.0 && v < 1.0));
                }
            }
        }
    }

    #[test]
    fn mismatched_lengths_are_rejected() {
        let rq = Representation::new(rand_mat(1, 4, 3));
        let rp = Representation::new(rand_mat(2, 5, 3));
        assert!(matches!(
            cross_attend(&rq, &rp, &CsaParams::identity(3, true)),
            Err(AttentionError::DimMismatch { .. })
        ));
        let rp = Representation::new(rand_mat(2, 4, 2));
        assert!(cross_attend(&rq, &rp, &CsaParams::identity(3, true)).is_err());
    }

    #[test]
    fn frobenius_examples() {
        let z = Mat::zeros(1, 2);
        assert_eq!(frobenius_distance(&z, &z).unwrap(), 0.0);
        assert_eq!(frobenius_distance(&Mat::from_rows(&[[1.0, 0.0]]), &z).unwrap(), 1.0);
        assert_eq!(frobenius_distance(&Mat::from_rows(&[[3.0, 4.0]]), &z).unwrap(), 5.0);
    }

    #[test]
    fn all_six_matrices_pass_grad_check() {
        let p = CsaParams::init(8, 3, false, 0.8);
        let rq = rand_mat(10, 4, 3);
        let rp = rand_mat(11, 4, 3);
        let params: Vec<Mat> = p.tensors().into_iter().cloned().collect();
        let r = grad_check(
            |t, v| {
                let vars = CsaVars {
                    query: SideVars { m1: v[0], m2: v[1], m3: v[2] },
                    support: SideVars { m1: v[3], m2: v[4], m3: v[5] },
                };
                let q = t.constant(rq.clone());
                let s = t.constant(rp.clone());
                let out = cross_attend_on_tape(t, q, s, &vars).map_err(|e| match e {
                    AttentionError::Autodiff(a) => a,
                    other => panic!("{other}"),
                })?;
                let diff = t.sub(out.query, out.support)?;
                t.frobenius_norm(diff)
            },
            &params,
            1e-5,
        )
        .unwrap();
        assert!(r.max_relative_error < 1e-4, "{r:?}");
    }

    #[test]
    fn pgm_is_row_max_scaled() {
        let w = Mat::from_rows(&[[0.25, 0.75], [0.5, 0.5]]);
        let pgm = weights_pgm(&w);
        assert!(pgm.starts_with(b"P5\n2 2\n255\n"));
        assert_eq!(&pgm[pgm.len() - 4..], &[85, 255, 255, 255]);
    }
}
