//! Affinity graphs: construction, block splitting, deformation, and simple
//! measurements (volume, degree bounds, cross-block connection strength).
//!
//! Weights are held in a symmetric CSR layout (both (i,j) and (j,i) stored)
//! with the degree vector cached. The deformation W(t) = W₀ + t·E linearly
//! interpolates between the block-disconnected graph and the observed one.

use crate::error::{Error, Result};
use ndarray::{Array2, ArrayView2};
use std::fmt::Write as _;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

/// Sparse symmetric matrix in CSR form. Column indices within each row are
/// strictly increasing.
#[derive(Debug, Clone)]
pub struct CsrMatrix {
    n: usize,
    row_ptr: Vec<usize>,
    col_idx: Vec<u32>,
    values: Vec<f64>,
}

impl CsrMatrix {
    /// Builds from per-row entry lists; entries within a row need not be sorted
    /// but must not repeat.
    pub fn from_rows(n: usize, mut rows: Vec<Vec<(u32, f64)>>) -> Self {
        assert_eq!(rows.len(), n);
        let nnz: usize = rows.iter().map(|r| r.len()).sum();
        let mut row_ptr = Vec::with_capacity(n + 1);
        let mut col_idx = Vec::with_capacity(nnz);
        let mut values = Vec::with_capacity(nnz);
        row_ptr.push(0);
        for row in rows.iter_mut() {
            row.sort_unstable_by_key(|e| e.0);
            for &(j, v) in row.iter() {
                col_idx.push(j);
                values.push(v);
            }
            row_ptr.push(col_idx.len());
        }
        CsrMatrix { n, row_ptr, col_idx, values }
    }

    pub fn zero(n: usize) -> Self {
        CsrMatrix { n, row_ptr: vec![0; n + 1], col_idx: Vec::new(), values: Vec::new() }
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    pub fn row(&self, i: usize) -> (&[u32], &[f64]) {
        let (a, b) = (self.row_ptr[i], self.row_ptr[i + 1]);
        (&self.col_idx[a..b], &self.values[a..b])
    }

    /// Entry (i, j); zero if absent.
    pub fn get(&self, i: usize, j: usize) -> f64 {
        let (cols, vals) = self.row(i);
        match cols.binary_search(&(j as u32)) {
            Ok(pos) => vals[pos],
            Err(_) => 0.0,
        }
    }

    pub fn row_sums(&self) -> Vec<f64> {
        (0..self.n).map(|i| self.row(i).1.iter().sum()).collect()
    }

    /// y = A x
    pub fn matvec(&self, x: &[f64], y: &mut [f64]) {
        debug_assert!(x.len() == self.n && y.len() == self.n);
        for i in 0..self.n {
            let (cols, vals) = self.row(i);
            let mut acc = 0.0;
            for (c, v) in cols.iter().zip(vals) {
                acc += v * x[*c as usize];
            }
            y[i] = acc;
        }
    }

    /// Quadratic form xᵀ A y.
    pub fn bilinear(&self, x: &[f64], y: &[f64]) -> f64 {
        let mut acc = 0.0;
        for i in 0..self.n {
            let (cols, vals) = self.row(i);
            let mut s = 0.0;
            for (c, v) in cols.iter().zip(vals) {
                s += v * y[*c as usize];
            }
            acc += x[i] * s;
        }
        acc
    }

    pub fn to_dense(&self) -> Array2<f64> {
        let mut a = Array2::zeros((self.n, self.n));
        for i in 0..self.n {
            let (cols, vals) = self.row(i);
            for (c, v) in cols.iter().zip(vals) {
                a[[i, *c as usize]] = *v;
            }
        }
        a
    }

    fn is_symmetric(&self, tol: f64) -> bool {
        for i in 0..self.n {
            let (cols, vals) = self.row(i);
            for (c, v) in cols.iter().zip(vals) {
                if (v - self.get(*c as usize, i)).abs() > tol {
                    return false;
                }
            }
        }
        true
    }
}

/// Node assignment: the large unstructured block vs one of K sub-clusters.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Label {
    Background,
    Cluster(u32),
}

/// Background/cluster partition of the node set. Cluster indices run 1..=K
/// and each must occur; both blocks must be non-empty.
#[derive(Debug, Clone)]
pub struct Partition {
    labels: Vec<Label>,
    k: u32,
}

impl Partition {
    pub fn new(labels: Vec<Label>) -> Result<Self> {
        let k = labels
            .iter()
            .map(|l| match l {
                Label::Cluster(j) => *j,
                Label::Background => 0,
            })
            .max()
            .unwrap_or(0);
        if k == 0 {
            return Err(Error::BadFraction("partition has no cluster nodes".into()));
        }
        let mut seen = vec![false; k as usize + 1];
        let mut n_background = 0usize;
        for l in &labels {
            match l {
                Label::Background => n_background += 1,
                Label::Cluster(j) => {
                    if *j == 0 {
                        return Err(Error::OutOfRange("cluster index 0; indices start at 1".into()));
                    }
                    seen[*j as usize] = true;
                }
            }
        }
        if let Some(j) = (1..=k).find(|j| !seen[*j as usize]) {
            return Err(Error::OutOfRange(format!("cluster index {j} has no nodes")));
        }
        if n_background == 0 {
            return Err(Error::BadFraction("partition has no background nodes".into()));
        }
        Ok(Partition { labels, k })
    }

    /// Single-cluster partition from a boolean mask (true = cluster).
    pub fn from_truth(truth: &[bool]) -> Result<Self> {
        Self::new(
            truth
                .iter()
                .map(|&t| if t { Label::Cluster(1) } else { Label::Background })
                .collect(),
        )
    }

    /// From integer ids: 0 = background, 1..=K = cluster index.
    pub fn from_cluster_ids(ids: &[u32]) -> Result<Self> {
        Self::new(
            ids.iter()
                .map(|&j| if j == 0 { Label::Background } else { Label::Cluster(j) })
                .collect(),
        )
    }

    pub fn n(&self) -> usize {
        self.labels.len()
    }

    pub fn k(&self) -> u32 {
        self.k
    }

    pub fn label(&self, x: usize) -> Label {
        self.labels[x]
    }

    pub fn is_cluster(&self, x: usize) -> bool {
        matches!(self.labels[x], Label::Cluster(_))
    }

    /// |C|, the number of cluster nodes.
    pub fn cluster_count(&self) -> usize {
        self.labels.iter().filter(|l| matches!(l, Label::Cluster(_))).count()
    }

    /// δ = |C| / n.
    pub fn delta(&self) -> f64 {
        self.cluster_count() as f64 / self.n() as f64
    }

    pub fn cluster_nodes(&self) -> Vec<usize> {
        (0..self.n()).filter(|&x| self.is_cluster(x)).collect()
    }

    pub fn background_nodes(&self) -> Vec<usize> {
        (0..self.n()).filter(|&x| !self.is_cluster(x)).collect()
    }

    pub fn nodes_of(&self, j: u32) -> Vec<usize> {
        (0..self.n())
            .filter(|&x| self.labels[x] == Label::Cluster(j))
            .collect()
    }

    /// Truth mask (true = cluster) for metric computations.
    pub fn truth_mask(&self) -> Vec<bool> {
        self.labels.iter().map(|l| matches!(l, Label::Cluster(_))).collect()
    }
}

/// Symmetric nonnegative affinity matrix with cached positive degrees.
#[derive(Debug, Clone)]
pub struct AffinityGraph {
    mat: CsrMatrix,
    degrees: Vec<f64>,
}

impl AffinityGraph {
    /// Validating constructor: symmetry, nonnegativity, positive degrees.
    pub fn new(mat: CsrMatrix) -> Result<Self> {
        if let Some((i, _)) = mat.values.iter().enumerate().find(|(_, v)| **v < 0.0) {
            let row = mat.row_ptr.partition_point(|&p| p <= i) - 1;
            return Err(Error::OutOfRange(format!("negative weight in row {row}")));
        }
        if !mat.is_symmetric(0.0) {
            return Err(Error::DimensionMismatch("weight matrix is not symmetric".into()));
        }
        Self::new_unchecked(mat)
    }

    /// Skips the symmetry scan; for construction paths that are symmetric by
    /// build. Degrees are still computed and checked positive.
    pub(crate) fn new_unchecked(mat: CsrMatrix) -> Result<Self> {
        let degrees = mat.row_sums();
        if let Some(x) = degrees.iter().position(|&d| !(d > 0.0)) {
            return Err(Error::NonPositiveDegree(x));
        }
        Ok(AffinityGraph { mat, degrees })
    }

    pub fn n(&self) -> usize {
        self.mat.n
    }

    pub fn weights(&self) -> &CsrMatrix {
        &self.mat
    }

    pub fn weight(&self, x: usize, y: usize) -> f64 {
        self.mat.get(x, y)
    }

    pub fn degrees(&self) -> &[f64] {
        &self.degrees
    }

    pub fn degree(&self, x: usize) -> f64 {
        self.degrees[x]
    }

    /// Serializes to a triplet file: header `n nnz`, then `i j w` lines with
    /// i ≤ j, each symmetric entry stored once.
    pub fn write_triplets<P: AsRef<Path>>(&self, path: P) -> Result<()> {
        let mut upper = 0usize;
        for i in 0..self.n() {
            let (cols, _) = self.mat.row(i);
            upper += cols.iter().filter(|&&j| j as usize >= i).count();
        }
        let mut out = String::new();
        writeln!(out, "{} {}", self.n(), upper).unwrap();
        for i in 0..self.n() {
            let (cols, vals) = self.mat.row(i);
            for (c, v) in cols.iter().zip(vals) {
                if *c as usize >= i {
                    writeln!(out, "{} {} {:.17e}", i, c, v).unwrap();
                }
            }
        }
        let mut f = std::fs::File::create(path)?;
        f.write_all(out.as_bytes())?;
        Ok(())
    }

    pub fn read_triplets<P: AsRef<Path>>(path: P) -> Result<Self> {
        let f = std::fs::File::open(path)?;
        let mut lines = BufReader::new(f).lines();
        let header = lines
            .next()
            .ok_or(Error::Empty("triplet file"))??;
        let mut it = header.split_whitespace();
        let n: usize = it
            .next()
            .and_then(|t| t.parse().ok())
            .ok_or_else(|| Error::Parse("triplet header: expected `n nnz`".into()))?;
        let nnz: usize = it
            .next()
            .and_then(|t| t.parse().ok())
            .ok_or_else(|| Error::Parse("triplet header: expected `n nnz`".into()))?;
        let mut rows: Vec<Vec<(u32, f64)>> = vec![Vec::new(); n];
        let mut count = 0usize;
        for line in lines {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let mut it = line.split_whitespace();
            let parse_err = || Error::Parse(format!("bad triplet line: {line:?}"));
            let i: usize = it.next().and_then(|t| t.parse().ok()).ok_or_else(parse_err)?;
            let j: usize = it.next().and_then(|t| t.parse().ok()).ok_or_else(parse_err)?;
            let w: f64 = it.next().and_then(|t| t.parse().ok()).ok_or_else(parse_err)?;
            if i > j {
                return Err(Error::Parse(format!("triplet entries must have i <= j, got {i} {j}")));
            }
            if j >= n {
                return Err(Error::IndexOutOfRange { index: j, n });
            }
            rows[i].push((j as u32, w));
            if i != j {
                rows[j].push((i as u32, w));
            }
            count += 1;
        }
        if count != nnz {
            return Err(Error::Parse(format!("triplet header says {nnz} entries, found {count}")));
        }
        AffinityGraph::new(CsrMatrix::from_rows(n, rows))
    }
}

/// Additive split of a graph into its block-diagonal part and the cross-block
/// remainder: w0 + e reproduces the original weights exactly.
#[derive(Debug, Clone)]
pub struct DeformationPair {
    pub w0: AffinityGraph,
    pub e: CsrMatrix,
}

/// Squared Euclidean distance between rows i and j.
fn dist2(points: &ArrayView2<f64>, i: usize, j: usize) -> f64 {
    let (a, b) = (points.row(i), points.row(j));
    a.iter().zip(b.iter()).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Self-tuning affinity: W(x,y) = exp(−‖x−y‖² / (σ_x σ_y)) where σ_x is the
/// distance from x to its k_st-th nearest neighbor. With `dense` all pairs are
/// kept; otherwise edges are restricted to the union of the k_nn lists (an
/// edge survives if either endpoint lists the other). The diagonal is 1.
///
/// Nearest-neighbor ties break toward the lower node index.
pub fn build_affinity(
    points: ArrayView2<f64>,
    k_nn: usize,
    k_st: usize,
    dense: bool,
) -> Result<AffinityGraph> {
    let n = points.nrows();
    if n < 2 {
        return Err(Error::OutOfRange(format!("need at least 2 points, got {n}")));
    }
    if k_st < 1 || k_st >= n {
        return Err(Error::OutOfRange(format!("k_st={k_st} must satisfy 1 <= k_st < n={n}")));
    }
    if !dense && !(k_st <= k_nn && k_nn < n) {
        return Err(Error::OutOfRange(format!(
            "k_nn={k_nn} must satisfy k_st={k_st} <= k_nn < n={n}"
        )));
    }

    // Pass 1: per-point scale (and neighbor lists for the sparse path).
    let mut sigma = vec![0.0f64; n];
    let mut knn: Vec<Vec<u32>> = if dense { Vec::new() } else { vec![Vec::new(); n] };
    let mut order: Vec<(f64, u32)> = Vec::with_capacity(n - 1);
    for i in 0..n {
        order.clear();
        for j in 0..n {
            if j != i {
                order.push((dist2(&points, i, j), j as u32));
            }
        }
        order.sort_unstable_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        let s2 = order[k_st - 1].0;
        if s2 == 0.0 {
            return Err(Error::ZeroScale(i));
        }
        sigma[i] = s2.sqrt();
        if !dense {
            knn[i] = order[..k_nn].iter().map(|e| e.1).collect();
        }
    }

    // Pass 2: kernel values on the selected pattern.
    let mat = if dense {
        let mut row_ptr = Vec::with_capacity(n + 1);
        let mut col_idx = Vec::with_capacity(n * n);
        let mut values = Vec::with_capacity(n * n);
        row_ptr.push(0);
        for i in 0..n {
            for j in 0..n {
                col_idx.push(j as u32);
                values.push(if i == j {
                    1.0
                } else {
                    (-dist2(&points, i, j) / (sigma[i] * sigma[j])).exp()
                });
            }
            row_ptr.push(col_idx.len());
        }
        CsrMatrix { n, row_ptr, col_idx, values }
    } else {
        let mut rows: Vec<Vec<u32>> = vec![Vec::new(); n];
        for i in 0..n {
            rows[i].push(i as u32);
            for &j in &knn[i] {
                rows[i].push(j);
                rows[j as usize].push(i as u32);
            }
        }
        let entries = rows
            .into_iter()
            .enumerate()
            .map(|(i, mut cols)| {
                cols.sort_unstable();
                cols.dedup();
                cols.into_iter()
                    .map(|j| {
                        let v = if j as usize == i {
                            1.0
                        } else {
                            (-dist2(&points, i, j as usize) / (sigma[i] * sigma[j as usize])).exp()
                        };
                        (j, v)
                    })
                    .collect()
            })
            .collect();
        CsrMatrix::from_rows(n, entries)
    };

    AffinityGraph::new_unchecked(mat)
}

/// Splits into the block-diagonal part (background-to-background plus
/// cluster-to-cluster) and the cross-block part.
pub fn split_blocks(g: &AffinityGraph, part: &Partition) -> Result<DeformationPair> {
    if part.n() != g.n() {
        return Err(Error::SizeMismatch { expected: g.n(), got: part.n() });
    }
    let n = g.n();
    let mut w0_rows: Vec<Vec<(u32, f64)>> = vec![Vec::new(); n];
    let mut e_rows: Vec<Vec<(u32, f64)>> = vec![Vec::new(); n];
    for i in 0..n {
        let ci = part.is_cluster(i);
        let (cols, vals) = g.weights().row(i);
        for (c, v) in cols.iter().zip(vals) {
            if part.is_cluster(*c as usize) == ci {
                w0_rows[i].push((*c, *v));
            } else {
                e_rows[i].push((*c, *v));
            }
        }
    }
    let w0 = AffinityGraph::new_unchecked(CsrMatrix::from_rows(n, w0_rows))?;
    let e = CsrMatrix::from_rows(n, e_rows);
    Ok(DeformationPair { w0, e })
}

/// W(t) = W₀ + t·E. Degrees are recomputed; they are nondecreasing in t since
/// E is entrywise nonnegative.
pub fn deform(pair: &DeformationPair, t: f64) -> Result<AffinityGraph> {
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::OutOfRange(format!("deformation time t={t} outside [0, 1]")));
    }
    let n = pair.w0.n();
    let w0 = pair.w0.weights();
    let e = &pair.e;
    let nnz = w0.nnz() + e.nnz();
    let mut row_ptr = Vec::with_capacity(n + 1);
    let mut col_idx = Vec::with_capacity(nnz);
    let mut values = Vec::with_capacity(nnz);
    row_ptr.push(0);
    for i in 0..n {
        let (c0, v0) = w0.row(i);
        let (c1, v1) = e.row(i);
        // Merge two strictly-increasing column lists; patterns are disjoint
        // but the merge does not rely on that.
        let (mut a, mut b) = (0usize, 0usize);
        while a < c0.len() || b < c1.len() {
            if b >= c1.len() || (a < c0.len() && c0[a] < c1[b]) {
                col_idx.push(c0[a]);
                values.push(v0[a]);
                a += 1;
            } else if a >= c0.len() || c1[b] < c0[a] {
                col_idx.push(c1[b]);
                values.push(t * v1[b]);
                b += 1;
            } else {
                col_idx.push(c0[a]);
                values.push(v0[a] + t * v1[b]);
                a += 1;
                b += 1;
            }
        }
        row_ptr.push(col_idx.len());
    }
    AffinityGraph::new_unchecked(CsrMatrix { n, row_ptr, col_idx, values })
}

/// C = Σ_{x∈B, y∈C} W(x,y): total cross-block weight, each unordered pair
/// counted once.
pub fn connection_strength(g: &AffinityGraph, part: &Partition) -> Result<f64> {
    if part.n() != g.n() {
        return Err(Error::SizeMismatch { expected: g.n(), got: part.n() });
    }
    let mut total = 0.0;
    for x in 0..g.n() {
        if part.is_cluster(x) {
            continue;
        }
        let (cols, vals) = g.weights().row(x);
        for (c, v) in cols.iter().zip(vals) {
            if part.is_cluster(*c as usize) {
                total += v;
            }
        }
    }
    Ok(total)
}

/// (min degree, max degree).
pub fn degree_bounds(g: &AffinityGraph) -> (f64, f64) {
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for &d in g.degrees() {
        lo = lo.min(d);
        hi = hi.max(d);
    }
    (lo, hi)
}

/// ν(A) = Σ_{x∈A} d(x).
pub fn volume(g: &AffinityGraph, subset: &[usize]) -> Result<f64> {
    let mut acc = 0.0;
    for &x in subset {
        if x >= g.n() {
            return Err(Error::IndexOutOfRange { index: x, n: g.n() });
        }
        acc += g.degree(x);
    }
    Ok(acc)
}
