//! Lanczos iteration for the largest eigenpairs of a symmetric operator.
//!
//! Full reorthogonalization (two-pass classical Gram–Schmidt through BLAS
//! gemv), convergence by the β·|s_last| Ritz residual bound, deflation by
//! locking converged pairs, and restarts from the best unconverged Ritz
//! vector. A short probe pass on the orthogonal complement guards against
//! missed copies of degenerate eigenvalues before the result is accepted.

use crate::error::{Error, Result};
use crate::linalg;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Symmetric linear operator given by its matrix-vector product.
pub trait SymOp {
    fn dim(&self) -> usize;
    fn apply(&self, x: &[f64], y: &mut [f64]);
}

#[derive(Debug, Clone)]
pub struct LanczosOpts {
    /// Residual tolerance ‖Av − θv‖ for accepting a Ritz pair. The operators
    /// used here have unit-scale spectra, so this is effectively relative.
    pub tol: f64,
    /// Seed for start vectors; fixed so runs are reproducible.
    pub seed: u64,
    /// Matrix-vector product budget; 0 picks an automatic budget.
    pub max_matvecs: usize,
    /// Ritz analysis interval, in Lanczos steps.
    pub check_every: usize,
}

impl Default for LanczosOpts {
    fn default() -> Self {
        LanczosOpts { tol: 1e-10, seed: 0x53ed_c0de, max_matvecs: 0, check_every: 24 }
    }
}

const BREAKDOWN_TOL: f64 = 1e-13;

struct Workspace {
    n: usize,
    /// Column-major basis: locked vectors first, then the active Krylov block.
    basis: Vec<f64>,
    coeff: Vec<f64>,
}

impl Workspace {
    fn col(&self, c: usize) -> &[f64] {
        &self.basis[c * self.n..(c + 1) * self.n]
    }

    fn push(&mut self, v: &[f64]) {
        self.basis.extend_from_slice(v);
    }

    fn truncate_cols(&mut self, c: usize) {
        self.basis.truncate(c * self.n);
    }

    /// Two-pass classical Gram–Schmidt of `w` against the first `cols` columns.
    fn orthogonalize(&mut self, cols: usize, w: &mut [f64]) {
        if cols == 0 {
            return;
        }
        self.coeff.resize(cols, 0.0);
        for _ in 0..2 {
            linalg::gemv_t(&self.basis, self.n, cols, w, &mut self.coeff);
            linalg::gemv_n_sub(&self.basis, self.n, cols, &self.coeff, w);
        }
    }
}

fn random_unit(n: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let v: Vec<f64> = (0..n).map(|_| rng.sample::<f64, _>(rand_distr::StandardNormal)).collect();
    let nrm = linalg::norm2(&v);
    v.into_iter().map(|x| x / nrm).collect()
}

/// Computes the `m` algebraically largest eigenpairs of `op`.
///
/// Returns eigenvalues in descending order and the matching orthonormal
/// eigenvectors as a column-major n×m slice.
pub fn lanczos_top(op: &dyn SymOp, m: usize, opts: &LanczosOpts) -> Result<(Vec<f64>, Vec<f64>)> {
    let n = op.dim();
    if m == 0 || m > n {
        return Err(Error::OutOfRange(format!("requested m={m} eigenpairs of an n={n} operator")));
    }
    let budget = if opts.max_matvecs > 0 {
        opts.max_matvecs
    } else {
        (4 * n).min(30 * m + 2000).max((2 * n).min(800))
    };
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut ws = Workspace { n, basis: Vec::new(), coeff: Vec::new() };
    let mut locked_vals: Vec<f64> = Vec::new();
    let mut alpha: Vec<f64> = Vec::new();
    let mut beta: Vec<f64> = Vec::new();
    let mut w = vec![0.0f64; n];
    let mut matvecs = 0usize;
    let mut stalls = 0usize;
    let mut probes = 0usize;
    let mut target = m;
    let mut restart: Option<Vec<f64>> = None;

    'rounds: loop {
        let locked = locked_vals.len();
        if locked >= target {
            // All requested pairs are locked; probe the orthogonal complement
            // for a stray eigenvalue that should displace the current m-th.
            if locked >= n || probes >= m + 8 {
                break;
            }
            probes += 1;
            let m_th = {
                let mut v = locked_vals.clone();
                v.sort_by(|a, b| b.total_cmp(a));
                v[m - 1]
            };
            match probe_complement(op, &mut ws, locked, &mut rng, &mut matvecs) {
                Some(theta) if theta > m_th + (100.0 * opts.tol).max(1e-9) => {
                    target = locked + 1;
                }
                _ => break,
            }
            continue 'rounds;
        }

        // Fresh start vector, orthogonal to everything locked.
        let mut v = restart.take().unwrap_or_else(|| random_unit(n, &mut rng));
        ws.truncate_cols(locked);
        ws.orthogonalize(locked, &mut v);
        let nrm = linalg::norm2(&v);
        if nrm < 1e-8 {
            v = random_unit(n, &mut rng);
            ws.orthogonalize(locked, &mut v);
        }
        let nrm = linalg::norm2(&v);
        if nrm < 1e-8 {
            return Err(Error::ConvergenceFailure(
                "could not produce a start vector orthogonal to the locked subspace".into(),
            ));
        }
        for x in v.iter_mut() {
            *x /= nrm;
        }
        ws.push(&v);
        alpha.clear();
        beta.clear();

        let m_rem = target - locked;
        let cap = (n - locked).min((6 * m_rem + 300).max(200));
        let mut next_check = opts.check_every.min(cap);

        loop {
            let j = alpha.len();
            op.apply(ws.col(locked + j), &mut w);
            matvecs += 1;
            let a_j = linalg::dot(&w, ws.col(locked + j));
            alpha.push(a_j);
            {
                let vj = ws.col(locked + j);
                for i in 0..n {
                    w[i] -= a_j * vj[i];
                }
            }
            if j > 0 {
                let b_prev = beta[j - 1];
                let vp = ws.col(locked + j - 1);
                for i in 0..n {
                    w[i] -= b_prev * vp[i];
                }
            }
            ws.orthogonalize(locked + j + 1, &mut w);
            let b_j = linalg::norm2(&w);
            let breakdown = b_j <= BREAKDOWN_TOL;
            if !breakdown {
                beta.push(b_j);
                let inv = 1.0 / b_j;
                let scaled: Vec<f64> = w.iter().map(|x| x * inv).collect();
                ws.push(&scaled);
            }

            let dim = alpha.len();
            let out_of_budget = matvecs >= budget;
            if !(breakdown || dim >= next_check || dim >= cap || out_of_budget) {
                continue;
            }

            // Ritz analysis of the current tridiagonal block.
            let (theta, s) = linalg::eigh_tridiagonal(&alpha, &beta[..dim - 1], true)?;
            let s = s.expect("vectors requested");
            let factor = if breakdown { 0.0 } else { beta[dim - 1] };
            let resid = |i: usize| factor * s[i * dim + (dim - 1)].abs();
            // Candidate pairs: the top of the Ritz spectrum (descending).
            let take = m_rem.min(dim);
            let top_ids: Vec<usize> = (0..dim).rev().take(take).collect();
            let all_top_converged = top_ids.iter().all(|&i| resid(i) <= opts.tol);

            if !(all_top_converged || breakdown || dim >= cap || out_of_budget) {
                next_check = dim + opts.check_every;
                continue;
            }

            let sel: Vec<usize> = top_ids.iter().copied().filter(|&i| resid(i) <= opts.tol).collect();
            // Best unconverged Ritz vector seeds the next round.
            let carry = top_ids.iter().copied().find(|&i| resid(i) > opts.tol);

            // Assemble Ritz vectors Y = V S for the selected columns plus the
            // carry vector, before the active block is discarded.
            let picked: Vec<usize> = sel.iter().copied().chain(carry).collect();
            let mut y = vec![0.0f64; n * picked.len()];
            if !picked.is_empty() {
                let mut s_sel = vec![0.0f64; dim * picked.len()];
                for (c, &i) in picked.iter().enumerate() {
                    s_sel[c * dim..(c + 1) * dim].copy_from_slice(&s[i * dim..(i + 1) * dim]);
                }
                let active = &ws.basis[locked * n..(locked + dim) * n];
                linalg::gemm(active, n, dim, &s_sel, picked.len(), &mut y);
            }

            ws.truncate_cols(locked);
            for (c, &i) in sel.iter().enumerate() {
                locked_vals.push(theta[i]);
                ws.push(&y[c * n..(c + 1) * n]);
            }
            restart = carry.map(|_| y[sel.len() * n..(sel.len() + 1) * n].to_vec());

            if sel.is_empty() {
                stalls += 1;
            } else {
                stalls = 0;
            }
            if locked_vals.len() < target {
                if out_of_budget {
                    return Err(Error::ConvergenceFailure(format!(
                        "matvec budget {budget} exhausted with {} of {target} pairs converged",
                        locked_vals.len()
                    )));
                }
                if stalls >= 6 {
                    return Err(Error::ConvergenceFailure(format!(
                        "no Ritz pair converged in {stalls} consecutive restarts (tol={})",
                        opts.tol
                    )));
                }
            }
            continue 'rounds;
        }
    }

    // Final selection: the m largest locked values, descending.
    let locked = locked_vals.len();
    let mut order: Vec<usize> = (0..locked).collect();
    order.sort_by(|&a, &b| locked_vals[b].total_cmp(&locked_vals[a]));
    order.truncate(m);
    let values: Vec<f64> = order.iter().map(|&i| locked_vals[i]).collect();
    let mut vectors = vec![0.0f64; n * m];
    for (c, &i) in order.iter().enumerate() {
        vectors[c * n..(c + 1) * n].copy_from_slice(ws.col(i));
    }
    Ok((values, vectors))
}

/// Short Lanczos pass on the complement of the locked subspace; returns the
/// largest Ritz value found there, if the complement is non-trivial.
fn probe_complement(
    op: &dyn SymOp,
    ws: &mut Workspace,
    locked: usize,
    rng: &mut ChaCha8Rng,
    matvecs: &mut usize,
) -> Option<f64> {
    let n = ws.n;
    let steps = (n - locked).min(16);
    if steps == 0 {
        return None;
    }
    ws.truncate_cols(locked);
    let mut v = random_unit(n, rng);
    ws.orthogonalize(locked, &mut v);
    let nrm = linalg::norm2(&v);
    if nrm < 1e-10 {
        ws.truncate_cols(locked);
        return None;
    }
    for x in v.iter_mut() {
        *x /= nrm;
    }
    ws.push(&v);
    let mut alpha = Vec::with_capacity(steps);
    let mut beta = Vec::new();
    let mut w = vec![0.0f64; n];
    for j in 0..steps {
        op.apply(ws.col(locked + j), &mut w);
        *matvecs += 1;
        let a_j = linalg::dot(&w, ws.col(locked + j));
        alpha.push(a_j);
        let vj = ws.col(locked + j);
        for i in 0..n {
            w[i] -= a_j * vj[i];
        }
        if j > 0 {
            let b_prev = beta[j - 1];
            let vp = ws.col(locked + j - 1);
            for i in 0..n {
                w[i] -= b_prev * vp[i];
            }
        }
        ws.orthogonalize(locked + j + 1, &mut w);
        let b_j = linalg::norm2(&w);
        if b_j <= BREAKDOWN_TOL || j + 1 == steps {
            break;
        }
        beta.push(b_j);
        let inv = 1.0 / b_j;
        let scaled: Vec<f64> = w.iter().map(|x| x * inv).collect();
        ws.push(&scaled);
    }
    ws.truncate_cols(locked);
    let dim = alpha.len();
    let (theta, _) = linalg::eigh_tridiagonal(&alpha, &beta[..dim - 1], false).ok()?;
    theta.last().copied()
}
