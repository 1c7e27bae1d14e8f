//! Reproducible synthetic datasets: the circle-plus-clusters point cloud and
//! the striped anomaly image with patch extraction.
//!
//! All randomness flows through a seeded ChaCha8 stream, so regenerating with
//! the same seed is bitwise identical.

use crate::error::{Error, Result};
use crate::eval;
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use std::io::{BufWriter, Write};
use std::path::Path;

/// n feature vectors with optional ground truth (true = cluster/anomaly) and
/// per-point sub-cluster ids (0 = background).
#[derive(Debug, Clone)]
pub struct PointCloud {
    pub points: Array2<f64>,
    pub truth: Option<Vec<bool>>,
    pub cluster_id: Option<Vec<u32>>,
}

impl PointCloud {
    pub fn n(&self) -> usize {
        self.points.nrows()
    }

    pub fn dim(&self) -> usize {
        self.points.ncols()
    }

    /// Row subset in the given index order.
    pub fn subset(&self, idx: &[usize]) -> PointCloud {
        let mut pts = Array2::zeros((idx.len(), self.dim()));
        for (r, &i) in idx.iter().enumerate() {
            pts.row_mut(r).assign(&self.points.row(i));
        }
        PointCloud {
            points: pts,
            truth: self.truth.as_ref().map(|t| idx.iter().map(|&i| t[i]).collect()),
            cluster_id: self.cluster_id.as_ref().map(|c| idx.iter().map(|&i| c[i]).collect()),
        }
    }

    /// CSV with a header row: feature columns f0..f{d-1}, then optional
    /// `truth` (0/1) and `cluster_id` columns.
    pub fn write_csv<P: AsRef<Path>>(&self, path: P) -> Result<()> {
        let mut f = BufWriter::new(std::fs::File::create(path)?);
        let mut header: Vec<String> = (0..self.dim()).map(|j| format!("f{j}")).collect();
        if self.truth.is_some() {
            header.push("truth".into());
        }
        if self.cluster_id.is_some() {
            header.push("cluster_id".into());
        }
        writeln!(f, "{}", header.join(","))?;
        for i in 0..self.n() {
            let mut fields: Vec<String> =
                self.points.row(i).iter().map(|v| format!("{v:.17e}")).collect();
            if let Some(t) = &self.truth {
                fields.push((t[i] as u8).to_string());
            }
            if let Some(c) = &self.cluster_id {
                fields.push(c[i].to_string());
            }
            writeln!(f, "{}", fields.join(","))?;
        }
        Ok(())
    }

    /// Reads either the headered layout written by `write_csv` or a plain
    /// headerless numeric CSV (all columns features, except that a final
    /// integer 0/1 column named by nothing can be claimed via `truth` later).
    pub fn read_csv<P: AsRef<Path>>(path: P) -> Result<PointCloud> {
        let text = std::fs::read_to_string(path)?;
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        let first = lines.next().ok_or(Error::Empty("point cloud csv"))?;
        let headered = first.split(',').any(|t| t.trim().parse::<f64>().is_err());

        let mut feature_cols: Vec<usize> = Vec::new();
        let mut truth_col: Option<usize> = None;
        let mut cluster_col: Option<usize> = None;
        let mut data_lines: Vec<&str> = Vec::new();
        if headered {
            for (j, name) in first.split(',').enumerate() {
                match name.trim() {
                    "truth" => truth_col = Some(j),
                    "cluster_id" => cluster_col = Some(j),
                    _ => feature_cols.push(j),
                }
            }
        } else {
            feature_cols = (0..first.split(',').count()).collect();
            data_lines.push(first);
        }
        data_lines.extend(lines);
        if data_lines.is_empty() {
            return Err(Error::Empty("point cloud csv has a header but no rows"));
        }

        let ncols = feature_cols.len() + truth_col.is_some() as usize + cluster_col.is_some() as usize;
        let n = data_lines.len();
        let mut points = Array2::zeros((n, feature_cols.len()));
        let mut truth = truth_col.map(|_| Vec::with_capacity(n));
        let mut cluster = cluster_col.map(|_| Vec::with_capacity(n));
        for (i, line) in data_lines.iter().enumerate() {
            let fields: Vec<&str> = line.split(',').collect();
            if fields.len() != ncols {
                return Err(Error::DimensionMismatch(format!(
                    "row {} has {} fields, expected {ncols}",
                    i + 1,
                    fields.len()
                )));
            }
            for (c, &j) in feature_cols.iter().enumerate() {
                points[[i, c]] = fields[j]
                    .trim()
                    .parse()
                    .map_err(|e| Error::Parse(format!("row {}: {e}", i + 1)))?;
            }
            if let (Some(t), Some(j)) = (&mut truth, truth_col) {
                let v: i64 = fields[j]
                    .trim()
                    .parse()
                    .map_err(|e| Error::Parse(format!("row {} truth: {e}", i + 1)))?;
                t.push(v != 0);
            }
            if let (Some(cl), Some(j)) = (&mut cluster, cluster_col) {
                cl.push(
                    fields[j]
                        .trim()
                        .parse()
                        .map_err(|e| Error::Parse(format!("row {} cluster_id: {e}", i + 1)))?,
                );
            }
        }
        Ok(PointCloud { points, truth, cluster_id: cluster })
    }
}

/// Default radial position of cluster centers, relative to the unit circle.
/// Slightly off the circle: far enough that each cluster forms its own
/// weakly-connected blob instead of dissolving into the background ring,
/// close enough to stay "near the circle".
pub const DEFAULT_CENTER_RADIUS: f64 = 1.15;

/// Background points near the unit circle plus K Gaussian sub-clusters with
/// centers equally spaced at angles 2πj/K on a circle of radius
/// `center_radius`. round(δ·n) points are cluster points, split as evenly as
/// possible (remainder to the first clusters).
pub fn gen_circle_clusters(
    n: usize,
    k_clusters: usize,
    delta: f64,
    eps_b: f64,
    eps_c: f64,
    center_radius: f64,
    seed: u64,
) -> Result<PointCloud> {
    if !(0.0 < delta && delta < 1.0) {
        return Err(Error::BadFraction(format!("delta={delta} outside (0, 1)")));
    }
    if k_clusters == 0 {
        return Err(Error::OutOfRange("k_clusters must be at least 1".into()));
    }
    let n_c = (delta * n as f64).round() as usize;
    if n_c == 0 {
        return Err(Error::BadFraction(format!("round(delta*n) = 0 for delta={delta}, n={n}")));
    }
    if n_c >= n {
        return Err(Error::BadFraction(format!("round(delta*n) = {n_c} leaves no background")));
    }
    if n_c < k_clusters {
        return Err(Error::BadFraction(format!(
            "{n_c} cluster points cannot cover {k_clusters} clusters"
        )));
    }
    let n_b = n - n_c;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut points = Array2::zeros((n, 2));
    let mut truth = vec![false; n];
    let mut cluster_id = vec![0u32; n];

    for i in 0..n_b {
        let theta: f64 = rng.gen::<f64>() * std::f64::consts::TAU;
        let nx: f64 = rng.sample(StandardNormal);
        let ny: f64 = rng.sample(StandardNormal);
        points[[i, 0]] = theta.cos() + eps_b * nx;
        points[[i, 1]] = theta.sin() + eps_b * ny;
    }
    let base = n_c / k_clusters;
    let rem = n_c % k_clusters;
    let mut row = n_b;
    for j in 0..k_clusters {
        let size = base + (j < rem) as usize;
        let angle = std::f64::consts::TAU * j as f64 / k_clusters as f64;
        let (cx, cy) = (center_radius * angle.cos(), center_radius * angle.sin());
        for _ in 0..size {
            let nx: f64 = rng.sample(StandardNormal);
            let ny: f64 = rng.sample(StandardNormal);
            points[[row, 0]] = cx + eps_c * nx;
            points[[row, 1]] = cy + eps_c * ny;
            truth[row] = true;
            cluster_id[row] = (j + 1) as u32;
            row += 1;
        }
    }
    Ok(PointCloud { points, truth: Some(truth), cluster_id: Some(cluster_id) })
}

/// Striped background with a Gaussian anomaly bump, on [−1,1]².
#[derive(Debug, Clone)]
pub struct SyntheticImage {
    /// stripes + bump, pointwise.
    pub pixels: Array2<f64>,
    /// The anomaly term alone, kept for labeling.
    pub bump: Array2<f64>,
}

fn stripe_term(x: f64, y: f64) -> f64 {
    1.0 + 0.5 * ((0.05 * x + y + 1.5).powi(2) * std::f64::consts::TAU).cos()
}

fn bump_term(x: f64, y: f64) -> f64 {
    0.6 * (-(x * x + y * y) / (2.0 * 0.05 * 0.05)).exp()
}

/// Samples the image formula on a resolution×resolution grid over [−1,1]²
/// (endpoints included). Pixel (i, j) is the value at (x_j, y_i).
pub fn gen_stripe_image(resolution: usize) -> Result<SyntheticImage> {
    if resolution < 32 {
        return Err(Error::OutOfRange(format!("resolution {resolution} below minimum 32")));
    }
    let r = resolution;
    let coord = |k: usize| -1.0 + 2.0 * k as f64 / (r - 1) as f64;
    let mut pixels = Array2::zeros((r, r));
    let mut bump = Array2::zeros((r, r));
    for i in 0..r {
        let y = coord(i);
        for j in 0..r {
            let x = coord(j);
            let b = bump_term(x, y);
            bump[[i, j]] = b;
            pixels[[i, j]] = stripe_term(x, y) + b;
        }
    }
    Ok(SyntheticImage { pixels, bump })
}

/// All patch×patch windows at offsets 0, stride, 2·stride, … that fit fully
/// inside the image, flattened row-major into points of dimension patch².
/// Returns the patch centers as (row, col) pixel coordinates.
pub fn extract_patches(
    img: &SyntheticImage,
    patch: usize,
    stride: usize,
) -> Result<(PointCloud, Vec<(usize, usize)>)> {
    let (h, w) = img.pixels.dim();
    if patch == 0 || stride == 0 {
        return Err(Error::OutOfRange("patch and stride must be positive".into()));
    }
    if patch > h || patch > w {
        return Err(Error::PatchTooLarge { patch, h, w });
    }
    let rows = (h - patch) / stride + 1;
    let cols = (w - patch) / stride + 1;
    let mut points = Array2::zeros((rows * cols, patch * patch));
    let mut centers = Vec::with_capacity(rows * cols);
    let mut p = 0usize;
    for r in 0..rows {
        let top = r * stride;
        for c in 0..cols {
            let left = c * stride;
            let mut d = 0usize;
            for di in 0..patch {
                for dj in 0..patch {
                    points[[p, d]] = img.pixels[[top + di, left + dj]];
                    d += 1;
                }
            }
            centers.push((top + patch / 2, left + patch / 2));
            p += 1;
        }
    }
    Ok((PointCloud { points, truth: None, cluster_id: None }, centers))
}

/// Labels a patch as a true outlier iff the bump value at its center exceeds
/// the (1 − delta_target)-quantile of bump values over all centers.
pub fn label_patches(
    img: &SyntheticImage,
    centers: &[(usize, usize)],
    delta_target: f64,
) -> Result<Vec<bool>> {
    if !(0.0..1.0).contains(&delta_target) {
        return Err(Error::BadFraction(format!("delta_target={delta_target} outside [0, 1)")));
    }
    let vals: Vec<f64> = centers.iter().map(|&(r, c)| img.bump[[r, c]]).collect();
    let tau = eval::empirical_quantile(&vals, 1.0 - delta_target)?;
    Ok(vals.into_iter().map(|v| v > tau).collect())
}

/// Uniform subsample without replacement; indices returned ascending.
pub fn subsample_indices(n: usize, k: usize, rng: &mut ChaCha8Rng) -> Result<Vec<usize>> {
    if k > n {
        return Err(Error::OutOfRange(format!("cannot sample {k} of {n}")));
    }
    let mut idx = rand::seq::index::sample(rng, n, k).into_vec();
    idx.sort_unstable();
    Ok(idx)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stripe_formula_values() {
        // At (0,0) the stripe phase is 1.5²·2π = 4.5π, whose cosine is 0, and
        // the bump contributes its full 0.6.
        assert!((stripe_term(0.0, 0.0) + bump_term(0.0, 0.0) - 1.6).abs() < 1e-15);
        // Far field: the bump (~1e-174) vanishes below the stripe term's ulp,
        // so the pixel equals the stripe term exactly.
        assert!(bump_term(1.0, 1.0) < 1e-170);
        assert_eq!(stripe_term(1.0, 1.0) + bump_term(1.0, 1.0), stripe_term(1.0, 1.0));
        assert!((stripe_term(1.0, 1.0) - 0.5000616837591696).abs() < 1e-15);
    }

    #[test]
    fn stripe_image_statistics_match_reference() {
        // min/max/mean cross-checked against an external evaluation of the
        // same formula on the same grid.
        let img = gen_stripe_image(200).unwrap();
        let lo = img.pixels.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = img.pixels.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mean = img.pixels.iter().sum::<f64>() / (200.0 * 200.0);
        assert!((lo - 0.50000002835194346).abs() < 1e-12);
        assert!((hi - 1.7726238001250119).abs() < 1e-12);
        assert!((mean - 0.97314951363294999).abs() < 1e-10);
        // Construction identity: pixels == stripes + bump pointwise.
        let corner = img.pixels[[0, 0]] - img.bump[[0, 0]];
        assert!((corner - stripe_term(-1.0, -1.0)).abs() < 1e-15);
    }

    #[test]
    fn image_resolution_floor() {
        assert!(matches!(gen_stripe_image(16), Err(Error::OutOfRange(_))));
    }

    #[test]
    fn patch_counts() {
        let img = gen_stripe_image(200).unwrap();
        let (cloud, centers) = extract_patches(&img, 9, 3).unwrap();
        assert_eq!(cloud.n(), 4096);
        assert_eq!(cloud.dim(), 81);
        assert_eq!(centers.len(), 4096);
        assert_eq!(centers[0], (4, 4));
        assert_eq!(centers[4095], (4 + 63 * 3, 4 + 63 * 3));

        // patch == image size: exactly one patch.
        let tiny = gen_stripe_image(32).unwrap();
        let (one, _) = extract_patches(&tiny, 32, 3).unwrap();
        assert_eq!(one.n(), 1);

        assert!(matches!(
            extract_patches(&tiny, 33, 1),
            Err(Error::PatchTooLarge { .. })
        ));
    }

    #[test]
    fn small_enumeration_patch_grid() {
        // 5×5 image, patch 3, stride 1: offsets {0,1,2}² = 9 patches.
        let img = SyntheticImage { pixels: Array2::zeros((5, 5)), bump: Array2::zeros((5, 5)) };
        let (cloud, centers) = extract_patches(&img, 3, 1).unwrap();
        assert_eq!(cloud.n(), 9);
        let expect: Vec<(usize, usize)> =
            (0..3).flat_map(|r| (0..3).map(move |c| (r + 1, c + 1))).collect();
        assert_eq!(centers, expect);
    }

    #[test]
    fn patch_count_formula_holds() {
        for res in [32usize, 47, 64] {
            let img = gen_stripe_image(res).unwrap();
            for patch in [3usize, 9, 15] {
                for stride in [1usize, 2, 3, 5] {
                    let (cloud, _) = extract_patches(&img, patch, stride).unwrap();
                    let per = (res - patch) / stride + 1;
                    assert_eq!(cloud.n(), per * per, "res={res} patch={patch} stride={stride}");
                }
            }
        }
    }

    #[test]
    fn labels_match_reference_count() {
        let img = gen_stripe_image(200).unwrap();
        let (_, centers) = extract_patches(&img, 9, 3).unwrap();
        let labels = label_patches(&img, &centers, 0.01).unwrap();
        // 41 positives out of 4096 at delta 0.01, frozen from an external
        // evaluation of the same quantile rule.
        assert_eq!(labels.iter().filter(|&&l| l).count(), 41);

        // delta_target = 0 puts the threshold at the bump maximum.
        let none = label_patches(&img, &centers, 0.0).unwrap();
        assert!(none.iter().all(|&l| !l));
    }

    #[test]
    fn labels_invariant_under_center_shuffle() {
        let img = gen_stripe_image(64).unwrap();
        let (_, centers) = extract_patches(&img, 9, 3).unwrap();
        let labels = label_patches(&img, &centers, 0.05).unwrap();
        let mut shuffled: Vec<(usize, usize)> = centers.clone();
        shuffled.reverse();
        let labels_rev = label_patches(&img, &shuffled, 0.05).unwrap();
        for (i, &(_r, _c)) in shuffled.iter().enumerate() {
            assert_eq!(labels_rev[i], labels[centers.len() - 1 - i]);
        }
    }

    #[test]
    fn circle_cloud_shape_and_determinism() {
        let a = gen_circle_clusters(500, 3, 0.1, 0.01, 0.02, DEFAULT_CENTER_RADIUS, 42).unwrap();
        let b = gen_circle_clusters(500, 3, 0.1, 0.01, 0.02, DEFAULT_CENTER_RADIUS, 42).unwrap();
        assert_eq!(a.points, b.points);
        assert_eq!(a.truth, b.truth);
        assert_eq!(a.cluster_id, b.cluster_id);

        let truth = a.truth.as_ref().unwrap();
        assert_eq!(truth.iter().filter(|&&t| t).count(), 50);
        let ids = a.cluster_id.as_ref().unwrap();
        for j in 1..=3u32 {
            let size = ids.iter().filter(|&&c| c == j).count();
            assert!((16..=17).contains(&size), "cluster {j} has {size} nodes");
        }

        let c = gen_circle_clusters(500, 3, 0.1, 0.01, 0.02, DEFAULT_CENTER_RADIUS, 43).unwrap();
        assert_ne!(a.points, c.points);
    }

    #[test]
    fn circle_cloud_background_hugs_circle() {
        let pc = gen_circle_clusters(5000, 1, 0.01, 0.01, 0.02, DEFAULT_CENTER_RADIUS, 7).unwrap();
        let truth = pc.truth.as_ref().unwrap();
        let mut close = 0usize;
        let mut total = 0usize;
        for i in 0..pc.n() {
            if truth[i] {
                continue;
            }
            total += 1;
            let r = (pc.points[[i, 0]].powi(2) + pc.points[[i, 1]].powi(2)).sqrt();
            if (r - 1.0).abs() <= 6.0 * 0.01 {
                close += 1;
            }
        }
        assert!(close as f64 / total as f64 > 0.9999, "{close}/{total}");
    }

    #[test]
    fn degenerate_fractions_rejected() {
        assert!(matches!(
            gen_circle_clusters(100, 1, 0.001, 0.01, 0.02, DEFAULT_CENTER_RADIUS, 1),
            Err(Error::BadFraction(_))
        ));
        assert!(matches!(
            gen_circle_clusters(100, 1, 1.0, 0.01, 0.02, DEFAULT_CENTER_RADIUS, 1),
            Err(Error::BadFraction(_))
        ));
        assert!(matches!(
            gen_circle_clusters(100, 5, 0.02, 0.01, 0.02, DEFAULT_CENTER_RADIUS, 1),
            Err(Error::BadFraction(_))
        ));
    }

    #[test]
    fn cloud_csv_roundtrip() {
        let pc = gen_circle_clusters(40, 2, 0.1, 0.01, 0.02, DEFAULT_CENTER_RADIUS, 5).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("pc.csv");
        pc.write_csv(&path).unwrap();
        let back = PointCloud::read_csv(&path).unwrap();
        assert_eq!(back.n(), pc.n());
        assert_eq!(back.truth, pc.truth);
        assert_eq!(back.cluster_id, pc.cluster_id);
        for i in 0..pc.n() {
            for j in 0..2 {
                assert_eq!(back.points[[i, j]], pc.points[[i, j]]);
            }
        }

        // Headerless numeric CSV: every column is a feature.
        std::fs::write(&path, "1.0,2.0\n3.0,4.0\n").unwrap();
        let plain = PointCloud::read_csv(&path).unwrap();
        assert_eq!(plain.n(), 2);
        assert_eq!(plain.dim(), 2);
        assert!(plain.truth.is_none());
    }

    #[test]
    fn subsample_is_deterministic_and_sorted() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let a = subsample_indices(100, 30, &mut rng).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let b = subsample_indices(100, 30, &mut rng).unwrap();
        assert_eq!(a, b);
        assert!(a.windows(2).all(|w| w[0] < w[1]));
        assert!(subsample_indices(5, 6, &mut rng).is_err());
    }
}
