//! The spectral embedding norm S(x) = Σ_{k∈I} f(λ_k) ψ_k(x)², detection by
//! quantile thresholding, |I| sweeps, and eigenvector selection.
//!
//! I is always the leading i_size indices in descending eigenvalue order.
//! With the constant weight, S is invariant to orthogonal rotations of the
//! eigenvector columns inside I, which is what makes it robust to the
//! eigenvector swaps that happen at near-crossings.

use crate::error::{Error, Result};
use crate::eval::{self, Metrics};
use crate::spectral::EigenSystem;
use std::fmt;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;

/// Spectral weight f(λ) applied inside the sum; f(1) = 1 for every variant.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum WeightSpec {
    /// f(λ) = 1: the plain embedding norm.
    Constant,
    /// f(λ) = λ^p, the diffusion-distance weighting.
    Power(f64),
    /// f(λ) = exp(−(1−λ)·s), the heat-kernel-signature weighting.
    Heat(f64),
}

impl WeightSpec {
    pub fn eval(&self, lambda: f64) -> f64 {
        match *self {
            WeightSpec::Constant => 1.0,
            WeightSpec::Power(p) => lambda.powf(p),
            WeightSpec::Heat(s) => (-(1.0 - lambda) * s).exp(),
        }
    }

    /// f′(λ), used by the weighted norm evolution equation.
    pub fn deriv(&self, lambda: f64) -> f64 {
        match *self {
            WeightSpec::Constant => 0.0,
            WeightSpec::Power(p) => p * lambda.powf(p - 1.0),
            WeightSpec::Heat(s) => s * (-(1.0 - lambda) * s).exp(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            WeightSpec::Power(p) if !(p > 0.0) => {
                Err(Error::OutOfRange(format!("power weight needs p > 0, got {p}")))
            }
            WeightSpec::Heat(s) if !(s > 0.0) => {
                Err(Error::OutOfRange(format!("heat weight needs s > 0, got {s}")))
            }
            _ => Ok(()),
        }
    }
}

impl fmt::Display for WeightSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            WeightSpec::Constant => write!(f, "constant"),
            WeightSpec::Power(p) => write!(f, "power:{p}"),
            WeightSpec::Heat(s) => write!(f, "heat:{s}"),
        }
    }
}

impl FromStr for WeightSpec {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        let spec = if s.eq_ignore_ascii_case("constant") {
            WeightSpec::Constant
        } else if let Some(p) = s.strip_prefix("power:") {
            WeightSpec::Power(p.parse().map_err(|_| Error::Parse(format!("bad power: {s}")))?)
        } else if let Some(t) = s.strip_prefix("heat:") {
            WeightSpec::Heat(t.parse().map_err(|_| Error::Parse(format!("bad heat: {s}")))?)
        } else {
            return Err(Error::Parse(format!(
                "unknown weight {s:?}; expected constant, power:<p>, or heat:<s>"
            )));
        };
        spec.validate()?;
        Ok(spec)
    }
}

/// Per-node norm values plus the detection state once a threshold is set.
#[derive(Debug, Clone)]
pub struct NormResult {
    pub s: Vec<f64>,
    pub i_size: usize,
    pub weight: WeightSpec,
    pub threshold: Option<f64>,
    /// true = cluster; present once `detect` has run.
    pub predicted: Option<Vec<bool>>,
}

/// S(x) = Σ_{k=1..i_size} f(λ_k) ψ_k(x)².
pub fn embedding_norm(es: &EigenSystem, i_size: usize, weight: WeightSpec) -> Result<NormResult> {
    if i_size < 1 || i_size > es.m() {
        return Err(Error::OutOfRange(format!(
            "i_size={i_size} outside 1..={} computed pairs",
            es.m()
        )));
    }
    weight.validate()?;
    let n = es.n();
    let mut s = vec![0.0f64; n];
    let vecs = es.eigenvectors();
    for k in 0..i_size {
        let f = weight.eval(es.eigenvalue(k));
        for x in 0..n {
            let v = vecs[[x, k]];
            s[x] += f * v * v;
        }
    }
    Ok(NormResult { s, i_size, weight, threshold: None, predicted: None })
}

/// Thresholds at the empirical q-quantile of S; nodes strictly above τ are
/// predicted as cluster.
pub fn detect(mut nr: NormResult, quantile_q: f64) -> Result<NormResult> {
    if !(0.0 < quantile_q && quantile_q < 1.0) {
        return Err(Error::OutOfRange(format!("quantile q={quantile_q} outside (0, 1)")));
    }
    let tau = eval::empirical_quantile(&nr.s, quantile_q)?;
    nr.predicted = Some(nr.s.iter().map(|&v| v > tau).collect());
    nr.threshold = Some(tau);
    Ok(nr)
}

/// One sweep row; `degenerate` marks i_size values where the F1 denominator
/// vanished (the sweep keeps going).
#[derive(Debug, Clone)]
pub struct SweepRow {
    pub i_size: usize,
    pub f1: f64,
    pub precision: f64,
    pub recall: f64,
    pub degenerate: bool,
}

/// Detection quality for every i_size in [i_min, i_max].
pub fn sweep_i(
    es: &EigenSystem,
    i_min: usize,
    i_max: usize,
    weight: WeightSpec,
    quantile_q: f64,
    truth: &[bool],
) -> Result<Vec<SweepRow>> {
    if i_min < 1 || i_min > i_max || i_max > es.m() {
        return Err(Error::OutOfRange(format!(
            "sweep range {i_min}..={i_max} outside 1..={}",
            es.m()
        )));
    }
    if truth.len() != es.n() {
        return Err(Error::SizeMismatch { expected: es.n(), got: truth.len() });
    }
    let n = es.n();
    let vecs = es.eigenvectors();
    // The weight of each index is fixed, so consecutive i_size values differ
    // by one rank-one term; sweep with a running prefix sum.
    let mut s = vec![0.0f64; n];
    for k in 0..i_min - 1 {
        let f = weight.eval(es.eigenvalue(k));
        for x in 0..n {
            s[x] += f * vecs[[x, k]] * vecs[[x, k]];
        }
    }
    let mut rows = Vec::with_capacity(i_max - i_min + 1);
    for i_size in i_min..=i_max {
        let k = i_size - 1;
        let f = weight.eval(es.eigenvalue(k));
        for x in 0..n {
            s[x] += f * vecs[[x, k]] * vecs[[x, k]];
        }
        let tau = eval::empirical_quantile(&s, quantile_q)?;
        let predicted: Vec<bool> = s.iter().map(|&v| v > tau).collect();
        let m: Metrics = eval::f1_score(&predicted, truth)?;
        rows.push(SweepRow {
            i_size,
            f1: m.f1,
            precision: m.precision,
            recall: m.recall,
            degenerate: m.degenerate,
        });
    }
    Ok(rows)
}

/// Eigenvector selection at the node of maximal norm: returns the `count`
/// indices k maximizing |ψ_k(x_max)|, descending by that magnitude. Ties on
/// the argmax go to the lowest node index.
pub fn select_eigvecs(es: &EigenSystem, nr: &NormResult, count: usize) -> Result<Vec<usize>> {
    if count < 1 || count > es.m() {
        return Err(Error::OutOfRange(format!("count={count} outside 1..={}", es.m())));
    }
    if nr.s.len() != es.n() {
        return Err(Error::SizeMismatch { expected: es.n(), got: nr.s.len() });
    }
    let mut x_max = 0usize;
    for (x, &v) in nr.s.iter().enumerate() {
        if v > nr.s[x_max] {
            x_max = x;
        }
    }
    let mut order: Vec<usize> = (0..es.m()).collect();
    order.sort_by(|&a, &b| {
        es.psi(b)[x_max]
            .abs()
            .total_cmp(&es.psi(a)[x_max].abs())
            .then(a.cmp(&b))
    });
    order.truncate(count);
    Ok(order)
}

/// CSV layout: header `node,s,predicted`; the predicted column is empty until
/// `detect` has run.
pub fn write_norm_csv<P: AsRef<Path>>(nr: &NormResult, path: P) -> Result<()> {
    let mut out = String::from("node,s,predicted\n");
    for (x, &v) in nr.s.iter().enumerate() {
        match &nr.predicted {
            Some(p) => out.push_str(&format!("{},{:.17e},{}\n", x, v, p[x] as u8)),
            None => out.push_str(&format!("{},{:.17e},\n", x, v)),
        }
    }
    let mut f = std::fs::File::create(path)?;
    f.write_all(out.as_bytes())?;
    Ok(())
}

/// Renders S onto an H×W canvas as an 8-bit PGM: min-max normalized values
/// placed at the patch centers, zero elsewhere.
pub fn render_norm_pgm<P: AsRef<Path>>(
    nr: &NormResult,
    centers: &[(usize, usize)],
    height: usize,
    width: usize,
    path: P,
) -> Result<()> {
    if centers.len() != nr.s.len() {
        return Err(Error::SizeMismatch { expected: nr.s.len(), got: centers.len() });
    }
    let lo = nr.s.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = nr.s.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = if hi > lo { hi - lo } else { 1.0 };
    let mut canvas = vec![0u8; height * width];
    for (&(r, c), &v) in centers.iter().zip(&nr.s) {
        if r >= height || c >= width {
            return Err(Error::IndexOutOfRange { index: r.max(c), n: height.max(width) });
        }
        canvas[r * width + c] = (255.0 * (v - lo) / span).round().clamp(0.0, 255.0) as u8;
    }
    crate::io::write_pgm8(path, &canvas, height, width)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{AffinityGraph, CsrMatrix};
    use crate::spectral::full_spectrum;

    fn random_graph(n: usize, seed: u64) -> AffinityGraph {
        let mut s = seed | 1;
        let mut rnd = move || {
            s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            ((s >> 11) as f64) / ((1u64 << 53) as f64)
        };
        let mut rows: Vec<Vec<(u32, f64)>> = vec![Vec::new(); n];
        for i in 0..n {
            rows[i].push((i as u32, 1.0));
            for j in 0..i {
                if rnd() < 0.5 {
                    let w = 0.1 + rnd();
                    rows[i].push((j as u32, w));
                    rows[j].push((i as u32, w));
                }
            }
        }
        AffinityGraph::new(CsrMatrix::from_rows(n, rows)).unwrap()
    }

    #[test]
    fn full_sum_gives_inverse_degree() {
        let g = random_graph(25, 17);
        let es = full_spectrum(&g).unwrap();
        let nr = embedding_norm(&es, 25, WeightSpec::Constant).unwrap();
        for x in 0..25 {
            let expect = 1.0 / g.degree(x);
            assert!((nr.s[x] - expect).abs() < 1e-8 * expect, "node {x}");
        }
    }

    #[test]
    fn single_index_norm_is_constant_inverse_volume() {
        let g = random_graph(20, 23);
        let es = full_spectrum(&g).unwrap();
        let nr = embedding_norm(&es, 1, WeightSpec::Constant).unwrap();
        let total: f64 = g.degrees().iter().sum();
        for x in 0..20 {
            assert!((nr.s[x] - 1.0 / total).abs() < 1e-10, "node {x}: {}", nr.s[x]);
        }
    }

    #[test]
    fn norm_monotone_in_i_size_for_constant_weight() {
        let g = random_graph(18, 3);
        let es = full_spectrum(&g).unwrap();
        let mut prev = vec![0.0; 18];
        for i_size in 1..=18 {
            let nr = embedding_norm(&es, i_size, WeightSpec::Constant).unwrap();
            for x in 0..18 {
                assert!(nr.s[x] >= prev[x] - 1e-15);
            }
            prev = nr.s;
        }
    }

    #[test]
    fn heat_weight_collapses_to_constant() {
        let g = random_graph(22, 9);
        let es = full_spectrum(&g).unwrap();
        let a = embedding_norm(&es, 10, WeightSpec::Constant).unwrap();
        let b = embedding_norm(&es, 10, WeightSpec::Heat(1e-6)).unwrap();
        let worst = a
            .s
            .iter()
            .zip(&b.s)
            .map(|(x, y)| (x - y).abs())
            .fold(0.0f64, f64::max);
        assert!(worst < 1e-5, "heat(1e-6) deviates by {worst}");
    }

    #[test]
    fn detect_quantile_and_strictness() {
        let nr = NormResult {
            s: vec![1.0, 2.0, 3.0, 4.0],
            i_size: 1,
            weight: WeightSpec::Constant,
            threshold: None,
            predicted: None,
        };
        let out = detect(nr, 0.5).unwrap();
        assert_eq!(out.threshold, Some(2.5));
        assert_eq!(out.predicted.unwrap(), vec![false, false, true, true]);

        // Constant vector: strict inequality keeps everything below.
        let flat = NormResult {
            s: vec![7.0; 5],
            i_size: 1,
            weight: WeightSpec::Constant,
            threshold: None,
            predicted: None,
        };
        let out = detect(flat, 0.9).unwrap();
        assert!(out.predicted.unwrap().iter().all(|p| !p));

        let nr = NormResult {
            s: vec![1.0],
            i_size: 1,
            weight: WeightSpec::Constant,
            threshold: None,
            predicted: None,
        };
        assert!(detect(nr, 1.0).is_err());
    }

    #[test]
    fn detect_count_respects_quantile_semantics() {
        for seed in 0..20u64 {
            let mut s = seed | 1;
            let mut rnd = move || {
                s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                ((s >> 11) as f64) / ((1u64 << 53) as f64)
            };
            let n = 37 + (seed as usize % 40);
            let values: Vec<f64> = (0..n).map(|_| rnd()).collect();
            let q = 0.8;
            let nr = NormResult {
                s: values,
                i_size: 1,
                weight: WeightSpec::Constant,
                threshold: None,
                predicted: None,
            };
            let out = detect(nr, q).unwrap();
            let above = out.predicted.unwrap().iter().filter(|&&p| p).count();
            assert!(above as f64 <= n as f64 * (1.0 - q) + 1.0);
        }
    }

    #[test]
    fn sweep_matches_single_calls_and_flags_degenerate() {
        let g = random_graph(30, 31);
        let es = full_spectrum(&g).unwrap();
        let truth: Vec<bool> = (0..30).map(|x| x % 7 == 0).collect();
        let rows = sweep_i(&es, 2, 12, WeightSpec::Constant, 0.8, &truth).unwrap();
        assert_eq!(rows.len(), 11);
        for row in &rows {
            let nr = embedding_norm(&es, row.i_size, WeightSpec::Constant).unwrap();
            let nr = detect(nr, 0.8).unwrap();
            let m = crate::eval::f1_score(nr.predicted.as_ref().unwrap(), &truth).unwrap();
            assert!((row.f1 - m.f1).abs() < 1e-12, "i_size {}", row.i_size);
        }

        let no_truth = vec![false; 30];
        let rows = sweep_i(&es, 2, 5, WeightSpec::Constant, 0.8, &no_truth).unwrap();
        assert!(rows.iter().all(|r| r.f1 == 0.0 && r.degenerate));
    }

    #[test]
    fn select_is_permutation_at_full_count() {
        let g = random_graph(15, 41);
        let es = full_spectrum(&g).unwrap();
        let nr = embedding_norm(&es, 5, WeightSpec::Constant).unwrap();
        let mut sel = select_eigvecs(&es, &nr, 15).unwrap();
        sel.sort_unstable();
        assert_eq!(sel, (0..15).collect::<Vec<_>>());
    }

    #[test]
    fn weight_spec_parsing() {
        assert_eq!("constant".parse::<WeightSpec>().unwrap(), WeightSpec::Constant);
        assert_eq!("power:2".parse::<WeightSpec>().unwrap(), WeightSpec::Power(2.0));
        assert_eq!("heat:0.5".parse::<WeightSpec>().unwrap(), WeightSpec::Heat(0.5));
        assert!("power:-1".parse::<WeightSpec>().is_err());
        assert!("banana".parse::<WeightSpec>().is_err());
        for w in [WeightSpec::Constant, WeightSpec::Power(2.0), WeightSpec::Heat(0.25)] {
            assert!((w.eval(1.0) - 1.0).abs() < 1e-15);
            assert_eq!(w.to_string().parse::<WeightSpec>().unwrap(), w);
        }
    }
}
