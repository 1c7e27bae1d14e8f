//! Spectrum of the Markov matrix P = D⁻¹W with D-orthonormal right
//! eigenvectors.
//!
//! Everything is computed through the symmetric similar matrix
//! B = D^{-1/2} W D^{-1/2}: its orthonormal eigenvectors u_k convert to right
//! eigenvectors ψ_k = D^{-1/2} u_k of P, which satisfy ψ_kᵀ D ψ_j = δ_kj for
//! free. `markov_spectrum` is the iterative (Lanczos) route for the top of
//! the spectrum, `full_spectrum` the dense LAPACK route used as its oracle
//! and for small problems.

use crate::error::{Error, Result};
use crate::graph::{AffinityGraph, CsrMatrix};
use crate::lanczos::{self, LanczosOpts, SymOp};
use crate::linalg;
use ndarray::{Array2, ArrayView1};
use std::fmt::Write as _;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

/// Cap on the dense eigendecomposition path.
pub const DENSE_CAP: usize = 3000;

/// Top-m eigenpairs of P = D⁻¹W: eigenvalues descending, right eigenvectors
/// D-orthonormal, degrees copied from the source graph.
#[derive(Debug, Clone)]
pub struct EigenSystem {
    eigenvalues: Vec<f64>,
    /// n×m; column k is ψ_k.
    eigenvectors: Array2<f64>,
    degrees: Vec<f64>,
}

impl EigenSystem {
    pub fn n(&self) -> usize {
        self.eigenvectors.nrows()
    }

    pub fn m(&self) -> usize {
        self.eigenvalues.len()
    }

    pub fn eigenvalues(&self) -> &[f64] {
        &self.eigenvalues
    }

    pub fn eigenvalue(&self, k: usize) -> f64 {
        self.eigenvalues[k]
    }

    /// ψ_k as a column view.
    pub fn psi(&self, k: usize) -> ArrayView1<'_, f64> {
        self.eigenvectors.column(k)
    }

    pub fn eigenvectors(&self) -> &Array2<f64> {
        &self.eigenvectors
    }

    pub fn degrees(&self) -> &[f64] {
        &self.degrees
    }

    /// Keeps only the leading `m` pairs.
    pub fn truncate(mut self, m: usize) -> EigenSystem {
        assert!(m >= 1 && m <= self.m());
        self.eigenvalues.truncate(m);
        let kept = self.eigenvectors.slice(ndarray::s![.., ..m]).to_owned();
        self.eigenvectors = kept;
        self
    }

    /// max_{k,j} |ψ_kᵀ D ψ_j − δ_kj|.
    pub fn d_ortho_residual(&self) -> f64 {
        let (n, m) = (self.n(), self.m());
        // Column-major copies of Ψ and DΨ for one gemm.
        let mut psi = vec![0.0f64; n * m];
        let mut dpsi = vec![0.0f64; n * m];
        for k in 0..m {
            for x in 0..n {
                let v = self.eigenvectors[[x, k]];
                psi[k * n + x] = v;
                dpsi[k * n + x] = v * self.degrees[x];
            }
        }
        let mut gram = vec![0.0f64; m * m];
        // gram = Ψᵀ (DΨ): compute column by column with gemv.
        for j in 0..m {
            let (head, tail) = gram.split_at_mut(j * m);
            let _ = head;
            linalg::gemv_t(&psi, n, m, &dpsi[j * n..(j + 1) * n], &mut tail[..m]);
        }
        let mut worst = 0.0f64;
        for k in 0..m {
            for j in 0..m {
                let expect = if k == j { 1.0 } else { 0.0 };
                worst = worst.max((gram[j * m + k] - expect).abs());
            }
        }
        worst
    }

    /// CSV layout: `n,m`, then the eigenvalue row, then n rows of m entries.
    pub fn write_csv<P: AsRef<Path>>(&self, path: P) -> Result<()> {
        let mut out = String::new();
        writeln!(out, "{},{}", self.n(), self.m()).unwrap();
        let vals: Vec<String> = self.eigenvalues.iter().map(|v| format!("{v:.17e}")).collect();
        writeln!(out, "{}", vals.join(",")).unwrap();
        for x in 0..self.n() {
            let row: Vec<String> =
                (0..self.m()).map(|k| format!("{:.17e}", self.eigenvectors[[x, k]])).collect();
            writeln!(out, "{}", row.join(",")).unwrap();
        }
        let mut f = std::fs::File::create(path)?;
        f.write_all(out.as_bytes())?;
        Ok(())
    }

    pub fn read_csv<P: AsRef<Path>>(path: P, degrees: Vec<f64>) -> Result<Self> {
        let f = std::fs::File::open(path)?;
        let mut lines = BufReader::new(f).lines();
        let header = lines.next().ok_or(Error::Empty("eigensystem csv"))??;
        let mut it = header.split(',');
        let n: usize = it
            .next()
            .and_then(|t| t.trim().parse().ok())
            .ok_or_else(|| Error::Parse("eigensystem header".into()))?;
        let m: usize = it
            .next()
            .and_then(|t| t.trim().parse().ok())
            .ok_or_else(|| Error::Parse("eigensystem header".into()))?;
        if degrees.len() != n {
            return Err(Error::SizeMismatch { expected: n, got: degrees.len() });
        }
        let parse_row = |line: &str| -> Result<Vec<f64>> {
            line.split(',')
                .map(|t| t.trim().parse::<f64>().map_err(|e| Error::Parse(e.to_string())))
                .collect()
        };
        let vals = parse_row(&lines.next().ok_or(Error::Empty("eigenvalue row"))??)?;
        if vals.len() != m {
            return Err(Error::SizeMismatch { expected: m, got: vals.len() });
        }
        let mut vecs = Array2::zeros((n, m));
        for x in 0..n {
            let row = parse_row(&lines.next().ok_or(Error::Empty("eigenvector row"))??)?;
            if row.len() != m {
                return Err(Error::SizeMismatch { expected: m, got: row.len() });
            }
            for k in 0..m {
                vecs[[x, k]] = row[k];
            }
        }
        Ok(EigenSystem { eigenvalues: vals, eigenvectors: vecs, degrees })
    }
}

struct MarkovOp<'a> {
    w: &'a CsrMatrix,
    dinv_sqrt: Vec<f64>,
}

impl SymOp for MarkovOp<'_> {
    fn dim(&self) -> usize {
        self.w.n()
    }
    fn apply(&self, x: &[f64], y: &mut [f64]) {
        let n = self.w.n();
        let z: Vec<f64> = (0..n).map(|i| x[i] * self.dinv_sqrt[i]).collect();
        self.w.matvec(&z, y);
        for i in 0..n {
            y[i] *= self.dinv_sqrt[i];
        }
    }
}

impl EigenSystem {
    pub(crate) fn from_parts(
        eigenvalues: Vec<f64>,
        eigenvectors: Array2<f64>,
        degrees: Vec<f64>,
    ) -> EigenSystem {
        EigenSystem { eigenvalues, eigenvectors, degrees }
    }
}

/// Deterministic sign: the first entry of largest magnitude is positive.
pub(crate) fn fix_signs(vecs: &mut Array2<f64>) {
    for k in 0..vecs.ncols() {
        let col = vecs.column(k);
        let mut best = 0usize;
        let mut best_abs = col[0].abs();
        for (x, v) in col.iter().enumerate().skip(1) {
            if v.abs() > best_abs {
                best = x;
                best_abs = v.abs();
            }
        }
        if vecs[[best, k]] < 0.0 {
            vecs.column_mut(k).mapv_inplace(|v| -v);
        }
    }
}

fn assemble(
    values: Vec<f64>,
    u_colmajor: &[f64],
    dinv_sqrt: &[f64],
    degrees: Vec<f64>,
) -> EigenSystem {
    let n = degrees.len();
    let m = values.len();
    let mut vecs = Array2::zeros((n, m));
    for k in 0..m {
        for x in 0..n {
            vecs[[x, k]] = u_colmajor[k * n + x] * dinv_sqrt[x];
        }
    }
    fix_signs(&mut vecs);
    EigenSystem { eigenvalues: values, eigenvectors: vecs, degrees }
}

fn dinv_sqrt_of(g: &AffinityGraph) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(g.n());
    for (x, &d) in g.degrees().iter().enumerate() {
        if !(d > 0.0) {
            return Err(Error::NonPositiveDegree(x));
        }
        out.push(1.0 / d.sqrt());
    }
    Ok(out)
}

/// Iterative top-m eigenpairs via Lanczos on B = D^{-1/2} W D^{-1/2}.
pub fn markov_spectrum(g: &AffinityGraph, m: usize) -> Result<EigenSystem> {
    markov_spectrum_with(g, m, &LanczosOpts::default())
}

pub fn markov_spectrum_with(g: &AffinityGraph, m: usize, opts: &LanczosOpts) -> Result<EigenSystem> {
    let n = g.n();
    if m < 1 || m > n {
        return Err(Error::OutOfRange(format!("m={m} outside 1..={n}")));
    }
    let dinv_sqrt = dinv_sqrt_of(g)?;
    let op = MarkovOp { w: g.weights(), dinv_sqrt };
    let (values, u) = lanczos::lanczos_top(&op, m, opts)?;
    Ok(assemble(values, &u, &op.dinv_sqrt, g.degrees().to_vec()))
}

/// Dense full spectrum (all n pairs) with the default size cap.
pub fn full_spectrum(g: &AffinityGraph) -> Result<EigenSystem> {
    full_spectrum_capped(g, DENSE_CAP)
}

pub fn full_spectrum_capped(g: &AffinityGraph, cap: usize) -> Result<EigenSystem> {
    let n = g.n();
    if n > cap {
        return Err(Error::TooLarge { n, cap });
    }
    let dinv_sqrt = dinv_sqrt_of(g)?;
    let mut b = vec![0.0f64; n * n];
    for i in 0..n {
        let (cols, vals) = g.weights().row(i);
        for (c, v) in cols.iter().zip(vals) {
            let j = *c as usize;
            b[j * n + i] = v * dinv_sqrt[i] * dinv_sqrt[j];
        }
    }
    let vals_asc = linalg::eigh_inplace(&mut b, n)?;
    // Reverse to descending order.
    let values: Vec<f64> = vals_asc.iter().rev().copied().collect();
    let mut u = vec![0.0f64; n * n];
    for k in 0..n {
        let src = n - 1 - k;
        u[k * n..(k + 1) * n].copy_from_slice(&b[src * n..(src + 1) * n]);
    }
    Ok(assemble(values, &u, &dinv_sqrt, g.degrees().to_vec()))
}

/// Δ = min_{k ∈ I, j ∉ I} |λ_k − λ_j| over the computed pairs, with
/// I = {1..i_size}. Implemented literally over all pairs.
pub fn i_eigen_gap(es: &EigenSystem, i_size: usize) -> Result<f64> {
    if i_size < 1 || i_size >= es.m() {
        return Err(Error::OutOfRange(format!(
            "i_size={i_size} must satisfy 1 <= i_size < m={}",
            es.m()
        )));
    }
    let mut gap = f64::INFINITY;
    for k in 0..i_size {
        for j in i_size..es.m() {
            gap = gap.min((es.eigenvalue(k) - es.eigenvalue(j)).abs());
        }
    }
    Ok(gap)
}

/// First-order rates of eigenvalues (and optionally eigenvectors) under a
/// symmetric perturbation Ẇ with induced degree rate Ḋ = diag(d_dot).
#[derive(Debug, Clone)]
pub struct VariationRates {
    /// dλ_k/dt = ψ_kᵀ(Ẇ − λ_k Ḋ)ψ_k.
    pub lambda_dot: Vec<f64>,
    /// dψ_k/dt columns; present only when requested and all gaps clear the floor.
    pub psi_dot: Option<Array2<f64>>,
}

/// Hadamard variation rates. The eigenvector equation sums over every other
/// eigenpair, so `want_psi_dot` requires the full spectrum; pairs closer than
/// `gap_floor` make the rate undefined and are reported as `NearCrossing`.
pub fn hadamard_rates(
    es: &EigenSystem,
    w_dot: &CsrMatrix,
    d_dot: &[f64],
    want_psi_dot: bool,
    gap_floor: f64,
) -> Result<VariationRates> {
    let (n, m) = (es.n(), es.m());
    if w_dot.n() != n {
        return Err(Error::SizeMismatch { expected: n, got: w_dot.n() });
    }
    if d_dot.len() != n {
        return Err(Error::SizeMismatch { expected: n, got: d_dot.len() });
    }
    if want_psi_dot && m < n {
        return Err(Error::OutOfRange(
            "eigenvector rates need the full spectrum (m == n)".into(),
        ));
    }

    let mut lambda_dot = Vec::with_capacity(m);
    let mut w_psi: Vec<Vec<f64>> = Vec::with_capacity(m);
    for k in 0..m {
        let psi_k: Vec<f64> = es.psi(k).to_vec();
        let mut wp = vec![0.0f64; n];
        w_dot.matvec(&psi_k, &mut wp);
        let quad_w = linalg::dot(&psi_k, &wp);
        let quad_d: f64 = (0..n).map(|x| d_dot[x] * psi_k[x] * psi_k[x]).sum();
        lambda_dot.push(quad_w - es.eigenvalue(k) * quad_d);
        w_psi.push(wp);
    }

    if !want_psi_dot {
        return Ok(VariationRates { lambda_dot, psi_dot: None });
    }

    let mut skipped: Vec<(usize, usize)> = Vec::new();
    let mut psi_dot = Array2::zeros((n, m));
    for k in 0..m {
        let lam_k = es.eigenvalue(k);
        let psi_k = es.psi(k);
        let d_quad_kk: f64 = (0..n).map(|x| d_dot[x] * psi_k[x] * psi_k[x]).sum();
        for x in 0..n {
            psi_dot[[x, k]] = -0.5 * d_quad_kk * psi_k[x];
        }
        for j in 0..m {
            if j == k {
                continue;
            }
            let gap = lam_k - es.eigenvalue(j);
            if gap.abs() < gap_floor {
                if k < j {
                    skipped.push((k, j));
                }
                continue;
            }
            let psi_j = es.psi(j);
            let mut num = 0.0;
            for x in 0..n {
                num += psi_j[x] * (w_psi[k][x] - lam_k * d_dot[x] * psi_k[x]);
            }
            let coef = num / gap;
            for x in 0..n {
                psi_dot[[x, k]] += coef * psi_j[x];
            }
        }
    }
    if !skipped.is_empty() {
        return Err(Error::NearCrossing(skipped));
    }
    Ok(VariationRates { lambda_dot, psi_dot: Some(psi_dot) })
}
