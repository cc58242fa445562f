//! Cumulative-distance dynamic time warping.
//!
//! `Ψ(i,j) = E(i,j) + min{Ψ(i−τ,j−τ), Ψ(i−τ,j), Ψ(i,j−τ)}`, with the virtual
//! boundary `Ψ = 0` when both indices fall before the start and `Ψ = +∞`
//! when exactly one does. For `τ = 1` this is textbook DTW with
//! `Ψ(0,0) = E(0,0)`. Soft mode replaces `min` by
//! [`softmin3`](crate::autodiff::softmin3).
//!
//! Indices are 0-based throughout.

use crate::autodiff::{softmin3, softmin3_weights};
use crate::linalg::Mat;
use serde::{Deserialize, Serialize};
use std::fmt::Write as _;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DtwError {
    #[error("step size tau must be at least 1, got {0}")]
    InvalidTau(usize),
    #[error("soft-min temperature must be positive, got {0}")]
    InvalidGamma(f64),
    #[error("terminal cell is unreachable with tau = {tau} on a {rows}x{cols} table")]
    Unreachable { tau: usize, rows: usize, cols: usize },
    #[error("cost matrix must be non-empty, finite and non-negative")]
    InvalidCost,
    #[error("feature dimension mismatch: {0} vs {1}")]
    DimMismatch(usize, usize),
    #[error("brute-force enumeration is limited to 8x8, got {0}x{1}")]
    TooLarge(usize, usize),
    #[error("invalid warping path: {0}")]
    InvalidPath(String),
}

pub type Result<T> = std::result::Result<T, DtwError>;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "mode")]
pub enum DtwMode {
    Hard,
    Soft { gamma: f64 },
}

impl DtwMode {
    fn validate(self) -> Result<()> {
        match self {
            DtwMode::Soft { gamma } if !(gamma > 0.0) => Err(DtwError::InvalidGamma(gamma)),
            _ => Ok(()),
        }
    }
}

/// Pairwise frame costs `E(i, j)`: finite and non-negative.
#[derive(Debug, Clone, PartialEq)]
pub struct CostMatrix(Mat);

impl CostMatrix {
    pub fn new(m: Mat) -> Result<Self> {
        if m.is_empty() || m.values().iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(DtwError::InvalidCost);
        }
        Ok(Self(m))
    }

    pub fn matrix(&self) -> &Mat {
        &self.0
    }

    pub fn rows(&self) -> usize {
        self.0.rows()
    }

    pub fn cols(&self) -> usize {
        self.0.cols()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct WarpResult {
    /// The filled table Ψ (may hold `+∞` in cells no path reaches).
    pub cumulative: Mat,
    /// Ψ at the terminal cell.
    pub distance: f64,
    /// Argmin path from start to terminal cell; hard mode only.
    pub path: Option<Vec<(usize, usize)>>,
}

impl WarpResult {
    /// Distance divided by the longer sequence length.
    pub fn normalized_distance(&self) -> f64 {
        self.distance / self.cumulative.rows().max(self.cumulative.cols()) as f64
    }
}

/// Squared Euclidean distance between every query row and support row.
pub fn local_costs(query: &Mat, support: &Mat) -> Result<CostMatrix> {
    if query.cols() != support.cols() {
        return Err(DtwError::DimMismatch(query.cols(), support.cols()));
    }
    let e = Mat::from_fn(query.rows(), support.rows(), |i, j| {
        query
            .row(i)
            .iter()
            .zip(support.row(j))
            .map(|(a, b)| (a - b) * (a - b))
            .sum()
    });
    CostMatrix::new(e)
}

#[inline]
fn table_at(psi: &Mat, i: isize, j: isize) -> f64 {
    match (i < 0, j < 0) {
        (true, true) => 0.0,
        (true, false) | (false, true) => f64::INFINITY,
        (false, false) => psi[(i as usize, j as usize)],
    }
}

/// The three predecessor values of cell `(i, j)`: diagonal, vertical, horizontal.
#[inline]
fn predecessors(psi: &Mat, i: usize, j: usize, tau: usize) -> [f64; 3] {
    let (i, j, t) = (i as isize, j as isize, tau as isize);
    [
        table_at(psi, i - t, j - t),
        table_at(psi, i - t, j),
        table_at(psi, i, j - t),
    ]
}

/// Fills Ψ row-major.
pub fn cumulative_table(cost: &Mat, tau: usize, mode: DtwMode) -> Result<Mat> {
    if tau < 1 {
        return Err(DtwError::InvalidTau(tau));
    }
    mode.validate()?;
    let (rows, cols) = cost.shape();
    let mut psi = Mat::zeros(rows, cols);
    for i in 0..rows {
        for j in 0..cols {
            let [d, v, h] = predecessors(&psi, i, j, tau);
            let best = match mode {
                DtwMode::Hard => d.min(v).min(h),
                DtwMode::Soft { gamma } => softmin3(d, v, h, gamma),
            };
            psi[(i, j)] = cost[(i, j)] + best;
        }
    }
    Ok(psi)
}

pub(crate) fn terminal_distance(psi: &Mat) -> Result<f64> {
    let (rows, cols) = psi.shape();
    let d = psi[(rows - 1, cols - 1)];
    if d.is_finite() {
        Ok(d)
    } else {
        Err(DtwError::Unreachable { tau: 0, rows, cols })
    }
}

/// Walks back from the terminal cell choosing the cheapest predecessor;
/// ties prefer diagonal, then vertical, then horizontal.
fn backtrack(psi: &Mat, tau: usize) -> Vec<(usize, usize)> {
    let (rows, cols) = psi.shape();
    let (mut i, mut j) = (rows as isize - 1, cols as isize - 1);
    let t = tau as isize;
    let mut path = vec![(i as usize, j as usize)];
    loop {
        let cands = [(i - t, j - t), (i - t, j), (i, j - t)];
        let mut best = cands[0];
        let mut best_val = table_at(psi, best.0, best.1);
        for &c in &cands[1..] {
            let v = table_at(psi, c.0, c.1);
            if v < best_val {
                best = c;
                best_val = v;
            }
        }
        if best.0 < 0 || best.1 < 0 {
            break;
        }
        (i, j) = best;
        path.push((i as usize, j as usize));
    }
    path.reverse();
    path
}

/// Runs DTW on `cost` with step size `tau`.
pub fn dtw(cost: &CostMatrix, tau: usize, mode: DtwMode) -> Result<WarpResult> {
    let cumulative = cumulative_table(cost.matrix(), tau, mode)?;
    let distance = terminal_distance(&cumulative).map_err(|_| DtwError::Unreachable {
        tau,
        rows: cost.rows(),
        cols: cost.cols(),
    })?;
    let path = matches!(mode, DtwMode::Hard).then(|| backtrack(&cumulative, tau));
    Ok(WarpResult {
        cumulative,
        distance,
        path,
    })
}

/// `∂Ψ(end)/∂E` for a table produced by [`cumulative_table`].
///
/// Soft mode runs the adjoint recursion backwards over the table: each cell
/// receives the gradient of its successors weighted by the soft-min weight it
/// carried in their update. Hard mode returns the indicator of the argmin path.
pub fn cost_gradient(cost: &Mat, psi: &Mat, tau: usize, mode: DtwMode) -> Mat {
    let (rows, cols) = cost.shape();
    match mode {
        DtwMode::Hard => {
            let mut g = Mat::zeros(rows, cols);
            for (i, j) in backtrack(psi, tau) {
                g[(i, j)] = 1.0;
            }
            g
        }
        DtwMode::Soft { gamma } => {
            let mut g = Mat::zeros(rows, cols);
            g[(rows - 1, cols - 1)] = 1.0;
            for i in (0..rows).rev() {
                for j in (0..cols).rev() {
                    if i == rows - 1 && j == cols - 1 {
                        continue;
                    }
                    let here = psi[(i, j)];
                    if !here.is_finite() {
                        continue;
                    }
                    let mut total = 0.0;
                    // (i, j) is the diagonal, vertical and horizontal
                    // predecessor of these successors respectively.
                    for (si, sj) in [(i + tau, j + tau), (i + tau, j), (i, j + tau)] {
                        if si >= rows || sj >= cols {
                            continue;
                        }
                        let gs = g[(si, sj)];
                        if gs == 0.0 {
                            continue;
                        }
                        let soft = psi[(si, sj)] - cost[(si, sj)];
                        total += gs * ((soft - here) / gamma).exp();
                    }
                    g[(i, j)] = total;
                }
            }
            g
        }
    }
}

/// Soft-min weights of one cell's predecessors, exposed for inspection.
pub fn cell_weights(cost: &Mat, psi: &Mat, i: usize, j: usize, tau: usize, gamma: f64) -> [f64; 3] {
    let preds = predecessors(psi, i, j, tau);
    softmin3_weights(preds, psi[(i, j)] - cost[(i, j)], gamma)
}

/// Minimum path cost over every monotone path from `(0,0)` to the terminal
/// cell with unit steps, by exhaustive enumeration (`τ = 1` only).
pub fn brute_force_dtw(cost: &CostMatrix) -> Result<f64> {
    let (rows, cols) = (cost.rows(), cost.cols());
    if rows > 8 || cols > 8 {
        return Err(DtwError::TooLarge(rows, cols));
    }
    fn walk(e: &Mat, i: usize, j: usize, acc: f64, best: &mut f64) {
        let acc = acc + e[(i, j)];
        let (rows, cols) = e.shape();
        if i == rows - 1 && j == cols - 1 {
            if acc < *best {
                *best = acc;
            }
            return;
        }
        if i + 1 < rows {
            walk(e, i + 1, j, acc, best);
        }
        if j + 1 < cols {
            walk(e, i, j + 1, acc, best);
        }
        if i + 1 < rows && j + 1 < cols {
            walk(e, i + 1, j + 1, acc, best);
        }
    }
    let mut best = f64::INFINITY;
    walk(cost.matrix(), 0, 0, 0.0, &mut best);
    Ok(best)
}

/// Query and support rows paired along a warping path.
#[derive(Debug, Clone, PartialEq)]
pub struct AlignedRows {
    pub pairs: Vec<(usize, usize)>,
    /// `L×d`: row `k` is query row `pairs[k].0`.
    pub query: Mat,
    /// `L×d`: row `k` is support row `pairs[k].1`.
    pub support: Mat,
}

impl AlignedRows {
    /// `L×2d` stack of paired rows `[q_i | p_j]`.
    pub fn stacked(&self) -> Mat {
        let d = self.query.cols();
        Mat::from_fn(self.pairs.len(), 2 * d, |r, c| {
            if c < d {
                self.query[(r, c)]
            } else {
                self.support[(r, c - d)]
            }
        })
    }
}

/// Checks that `path` is a monotone warping path with step size `tau` that
/// ends at `(rows−1, cols−1)` and starts inside the first `tau×tau` block.
pub fn validate_path(path: &[(usize, usize)], rows: usize, cols: usize, tau: usize) -> Result<()> {
    let bad = |msg: String| Err(DtwError::InvalidPath(msg));
    let (Some(&first), Some(&last)) = (path.first(), path.last()) else {
        return bad("empty path".into());
    };
    if first.0 >= tau || first.1 >= tau {
        return bad(format!("starts at {first:?}"));
    }
    if last != (rows - 1, cols - 1) {
        return bad(format!("ends at {last:?}, expected {:?}", (rows - 1, cols - 1)));
    }
    for w in path.windows(2) {
        let (di, dj) = (w[1].0.wrapping_sub(w[0].0), w[1].1.wrapping_sub(w[0].1));
        if !matches!((di, dj), (d, 0) | (0, d) if d == tau) && !(di == tau && dj == tau) {
            return bad(format!("illegal step {:?} -> {:?}", w[0], w[1]));
        }
    }
    Ok(())
}

/// Pairs the rows of the attended query and support representations along a
/// hard-mode warping path.
pub fn updated_representations(
    query: &Mat,
    support: &Mat,
    path: &[(usize, usize)],
    tau: usize,
) -> Result<AlignedRows> {
    if query.cols() != support.cols() {
        return Err(DtwError::DimMismatch(query.cols(), support.cols()));
    }
    validate_path(path, query.rows(), support.rows(), tau)?;
    let d = query.cols();
    Ok(AlignedRows {
        pairs: path.to_vec(),
        query: Mat::from_fn(path.len(), d, |r, c| query[(path[r].0, c)]),
        support: Mat::from_fn(path.len(), d, |r, c| support[(path[r].1, c)]),
    })
}

/// `i,j` CSV of a warping path.
pub fn path_csv(path: &[(usize, usize)]) -> String {
    let mut s = String::from("i,j\n");
    for (i, j) in path {
        let _ = writeln!(s, "{i},{j}");
    }
    s
}

/// The cumulative table as a headerless CSV grid; unreachable cells print `inf`.
pub fn table_csv(psi: &Mat) -> String {
    let mut s = String::new();
    for r in 0..psi.rows() {
        let line: Vec<String> = psi.row(r).iter().map(|v| format!("{v}")).collect();
        s.push_str(&line.join(","));
        s.push('\n');
    }
    s
}
