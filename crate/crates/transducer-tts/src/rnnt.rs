//! Transducer lattice: exact loss via log-space forward-backward, analytic
//! gradient through the softmax, and Viterbi alignment extraction.
//!
//! Axis convention: the lattice spans text positions i (length N, advanced
//! by ⟨blank⟩) and code frames j (length T, advanced by emitting a target
//! token). A complete path goes (0,0) → (N,T), always finishing with the
//! blank out of (N−1, T), so it contains exactly N blanks and T emits.

use ndarray::Array2;

use crate::util::log_add_exp;
use crate::{Error, Result};

/// Log-probabilities over V real tokens plus ⟨blank⟩ at index V, one row per
/// lattice cell (i, j), stored row-major as `i·(T+1) + j`.
#[derive(Debug, Clone)]
pub struct JointLogProbGrid {
    logp: Array2<f64>,
    n: usize,
    t: usize,
}

impl JointLogProbGrid {
    /// Wrap pre-normalized rows; rejects rows whose log-sum-exp is off by
    /// more than 1e-3.
    pub fn new(logp: Array2<f64>, n: usize, t: usize) -> Result<Self> {
        if n == 0 {
            return Err(Error::Validation("joint grid needs N ≥ 1".into()));
        }
        if logp.nrows() != n * (t + 1) || logp.ncols() < 2 {
            return Err(Error::Validation(format!(
                "joint grid shape {}×{} does not match N={n}, T={t}",
                logp.nrows(),
                logp.ncols()
            )));
        }
        for (r, row) in logp.rows().into_iter().enumerate() {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            if !max.is_finite() {
                return Err(Error::Validation(format!("joint grid row {r} has no mass")));
            }
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            if lse.abs() > 1e-3 {
                return Err(Error::Validation(format!(
                    "joint grid row {r} unnormalized (log-sum-exp {lse:.2e})"
                )));
            }
        }
        Ok(JointLogProbGrid { logp, n, t })
    }

    /// Row-wise log-softmax of raw logits; always normalized by construction.
    pub fn from_logits(logits: &Array2<f64>, n: usize, t: usize) -> Result<Self> {
        if n == 0 {
            return Err(Error::Validation("joint grid needs N ≥ 1".into()));
        }
        if logits.nrows() != n * (t + 1) || logits.ncols() < 2 {
            return Err(Error::Validation(format!(
                "joint logits shape {}×{} does not match N={n}, T={t}",
                logits.nrows(),
                logits.ncols()
            )));
        }
        let mut logp = logits.clone();
        for mut row in logp.rows_mut() {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            row.mapv_inplace(|v| v - lse);
        }
        Ok(JointLogProbGrid { logp, n, t })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn t(&self) -> usize {
        self.t
    }

    /// Vocabulary size V excluding blank.
    pub fn vocab(&self) -> usize {
        self.logp.ncols() - 1
    }

    pub fn blank(&self) -> usize {
        self.logp.ncols() - 1
    }

    pub fn logp(&self, i: usize, j: usize, v: usize) -> f64 {
        self.logp[[i * (self.t + 1) + j, v]]
    }

    pub fn raw(&self) -> &Array2<f64> {
        &self.logp
    }

    fn check_target(&self, target: &[usize]) -> Result<()> {
        if target.len() != self.t {
            return Err(Error::Validation(format!(
                "target length {} does not match grid T={}",
                target.len(),
                self.t
            )));
        }
        if let Some(&bad) = target.iter().find(|&&v| v >= self.vocab()) {
            return Err(Error::Validation(format!(
                "target token {bad} outside vocabulary {}",
                self.vocab()
            )));
        }
        Ok(())
    }
}

/// Forward/backward log-probabilities over the (N+1)×(T+1) node grid.
#[derive(Debug, Clone)]
pub struct Lattice {
    pub alpha: Array2<f64>,
    pub beta: Array2<f64>,
    /// Total log-probability of all alignments (from α; β agrees within 1e-6).
    pub total: f64,
    pub n: usize,
    pub t: usize,
}

/// Monotonic alignment: `path` over symbols 'b' (blank, advance text) and
/// 'e' (emit one code frame), plus the induced frame→text-position map.
#[derive(Debug, Clone, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct AlignmentPath {
    pub path: String,
    pub frame_to_pos: Vec<usize>,
}

impl AlignmentPath {
    pub fn from_path(path: String) -> Result<Self> {
        let frame_to_pos = frame_map(&path)?;
        Ok(AlignmentPath { path, frame_to_pos })
    }

    pub fn blanks(&self) -> usize {
        self.path.bytes().filter(|&b| b == b'b').count()
    }

    pub fn emits(&self) -> usize {
        self.path.bytes().filter(|&b| b == b'e').count()
    }
}

/// `f(j)` = number of blanks preceding the j-th emit. Paths must be
/// non-empty, contain only 'b'/'e', and end with a blank.
pub fn frame_map(path: &str) -> Result<Vec<usize>> {
    if !path.ends_with('b') {
        return Err(Error::Validation(format!(
            "alignment path {path:?} must end with a blank"
        )));
    }
    let mut f = Vec::new();
    let mut blanks = 0usize;
    for c in path.chars() {
        match c {
            'b' => blanks += 1,
            'e' => f.push(blanks),
            other => {
                return Err(Error::Validation(format!(
                    "alignment path contains invalid symbol {other:?}"
                )))
            }
        }
    }
    Ok(f)
}

/// Exact −log Σ_paths P(path) with the forward-backward lattice.
pub fn rnnt_loss(grid: &JointLogProbGrid, target: &[usize]) -> Result<(f64, Lattice)> {
    grid.check_target(target)?;
    let (n, t) = (grid.n, grid.t);
    let blank = grid.blank();
    let ninf = f64::NEG_INFINITY;

    let mut alpha = Array2::from_elem((n + 1, t + 1), ninf);
    alpha[[0, 0]] = 0.0;
    for i in 0..=n {
        for j in 0..=t {
            if i == 0 && j == 0 {
                continue;
            }
            let mut acc = ninf;
            if i > 0 {
                acc = log_add_exp(acc, alpha[[i - 1, j]] + grid.logp(i - 1, j, blank));
            }
            if j > 0 && i < n {
                acc = log_add_exp(acc, alpha[[i, j - 1]] + grid.logp(i, j - 1, target[j - 1]));
            }
            alpha[[i, j]] = acc;
        }
    }

    let mut beta = Array2::from_elem((n + 1, t + 1), ninf);
    beta[[n, t]] = 0.0;
    for i in (0..=n).rev() {
        for j in (0..=t).rev() {
            if i == n && j == t {
                continue;
            }
            let mut acc = ninf;
            if i < n {
                acc = log_add_exp(acc, grid.logp(i, j, blank) + beta[[i + 1, j]]);
            }
            if j < t && i < n {
                acc = log_add_exp(acc, grid.logp(i, j, target[j]) + beta[[i, j + 1]]);
            }
            beta[[i, j]] = acc;
        }
    }

    let total = alpha[[n, t]];
    if !total.is_finite() {
        return Err(Error::Validation(
            "no alignment path has nonzero probability".into(),
        ));
    }
    debug_assert!(
        (total - beta[[0, 0]]).abs() <= 1e-6 * total.abs().max(1.0),
        "alpha/beta totals diverge: {total} vs {}",
        beta[[0, 0]]
    );
    Ok((-total, Lattice { alpha, beta, total, n, t }))
}

/// Gradient of `rnnt_loss` with respect to the raw logits behind `grid`,
/// same layout as the grid. Derived from transition occupancies:
/// ∂loss/∂logit[i][j][u] = p[i][j][u]·occ(i,j) − occ(i,j,u).
pub fn rnnt_grad(grid: &JointLogProbGrid, target: &[usize], lattice: &Lattice) -> Result<Array2<f64>> {
    grid.check_target(target)?;
    if lattice.n != grid.n || lattice.t != grid.t {
        return Err(Error::Validation(format!(
            "lattice dims {}×{} do not match grid N={}, T={}",
            lattice.n, lattice.t, grid.n, grid.t
        )));
    }
    let (n, t) = (grid.n, grid.t);
    let blank = grid.blank();
    let z = lattice.total;
    let mut dlogits = Array2::zeros(grid.logp.raw_dim());
    for i in 0..n {
        for j in 0..=t {
            let row = i * (t + 1) + j;
            let a = lattice.alpha[[i, j]];
            if a == f64::NEG_INFINITY {
                continue;
            }
            let occ_b = (a + grid.logp(i, j, blank) + lattice.beta[[i + 1, j]] - z).exp();
            let occ_e = if j < t {
                (a + grid.logp(i, j, target[j]) + lattice.beta[[i, j + 1]] - z).exp()
            } else {
                0.0
            };
            let occ = occ_b + occ_e;
            if occ == 0.0 {
                continue;
            }
            let mut drow = dlogits.row_mut(row);
            for v in 0..grid.logp.ncols() {
                drow[v] = grid.logp(i, j, v).exp() * occ;
            }
            drow[blank] -= occ_b;
            if j < t {
                drow[target[j]] -= occ_e;
            }
        }
    }
    Ok(dlogits)
}

/// Viterbi max-probability path; exact ties prefer blank (advance text).
pub fn best_path(grid: &JointLogProbGrid, target: &[usize]) -> Result<AlignmentPath> {
    grid.check_target(target)?;
    let (n, t) = (grid.n, grid.t);
    let blank = grid.blank();
    let ninf = f64::NEG_INFINITY;

    // omega[i][j]: best log-prob of completing (i,j) → (N,T)
    let mut omega = Array2::from_elem((n + 1, t + 1), ninf);
    omega[[n, t]] = 0.0;
    for i in (0..=n).rev() {
        for j in (0..=t).rev() {
            if i == n && j == t {
                continue;
            }
            let mut best = ninf;
            if i < n {
                best = best.max(grid.logp(i, j, blank) + omega[[i + 1, j]]);
            }
            if j < t && i < n {
                best = best.max(grid.logp(i, j, target[j]) + omega[[i, j + 1]]);
            }
            omega[[i, j]] = best;
        }
    }
    if !omega[[0, 0]].is_finite() {
        return Err(Error::Validation(
            "no alignment path has nonzero probability".into(),
        ));
    }

    // Greedy forward walk; choosing blank whenever it ties keeps the text
    // cursor moving as early as possible.
    let (mut i, mut j) = (0usize, 0usize);
    let mut path = String::with_capacity(n + t);
    while i < n || j < t {
        let blank_score = if i < n { grid.logp(i, j, blank) + omega[[i + 1, j]] } else { ninf };
        let emit_score = if j < t && i < n {
            grid.logp(i, j, target[j]) + omega[[i, j + 1]]
        } else {
            ninf
        };
        if blank_score >= emit_score {
            path.push('b');
            i += 1;
        } else {
            path.push('e');
            j += 1;
        }
    }
    AlignmentPath::from_path(path)
}

/// Test oracle: every monotonic path with its exact log-probability.
/// Refuses instances with N+T > 12.
pub fn enumerate_paths(grid: &JointLogProbGrid, target: &[usize]) -> Result<Vec<(String, f64)>> {
    grid.check_target(target)?;
    let (n, t) = (grid.n, grid.t);
    if n + t > 12 {
        return Err(Error::Validation(format!(
            "enumeration guard: N+T = {} exceeds 12",
            n + t
        )));
    }
    let blank = grid.blank();
    let mut out = Vec::new();
    let mut stack = vec![(0usize, 0usize, String::new(), 0.0f64)];
    while let Some((i, j, path, lp)) = stack.pop() {
        if i == n && j == t {
            out.push((path, lp));
            continue;
        }
        if i < n {
            let mut p = path.clone();
            p.push('b');
            stack.push((i + 1, j, p, lp + grid.logp(i, j, blank)));
        }
        if j < t && i < n {
            let mut p = path;
            p.push('e');
            stack.push((i, j + 1, p, lp + grid.logp(i, j, target[j])));
        }
    }
    Ok(out)
}
