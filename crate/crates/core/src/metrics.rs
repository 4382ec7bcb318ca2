//! Sample-quality and denoising metrics.

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::seq::index::sample as sample_indices;
use serde::{Deserialize, Serialize};

use crate::error::{config_err, Error, Result};
use crate::linalg::{psd_eigen, psd_sqrt};
use crate::mixture::{GaussianMixture, SubspaceEmbedding};
use crate::rng::NoiseStream;

pub const PSNR_CAP_DB: f64 = 300.0;
pub const MAX_TRANSPORT_POINTS: usize = 2048;
pub const MAX_TRANSPORT_DIM: usize = 8;
/// Cap on the ground cost of the bounded variant: test functions bounded by 1
/// can separate two points by at most 2.
pub const TRANSPORT_COST_CAP: f64 = 2.0;

/// Monte-Carlo mean with its standard error.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Estimate {
    pub mean: f64,
    pub std_err: f64,
}

impl Estimate {
    pub fn from_samples(values: &[f64]) -> Self {
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = if values.len() > 1 {
            values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)
        } else {
            0.0
        };
        Self { mean, std_err: (var / n).sqrt() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Psnr {
    pub db: f64,
    /// The error was zero (or below the cap) and `db` holds the cap.
    pub capped: bool,
}

/// `-10 log10 |x - x_hat|^2`, with no per-coordinate normalisation.
pub fn psnr(x: &DVector<f64>, x_hat: &DVector<f64>) -> Result<Psnr> {
    if x.len() != x_hat.len() {
        return config_err("psnr needs vectors of equal length");
    }
    let err = (x - x_hat).norm_squared();
    let db = -10.0 * err.log10();
    if db.is_nan() {
        return Err(Error::Domain("psnr of non-finite input".into()));
    }
    Ok(if db >= PSNR_CAP_DB { Psnr { db: PSNR_CAP_DB, capped: true } } else { Psnr { db, capped: false } })
}

/// Squared 2-Wasserstein distance between two Gaussians (Bures form).
pub fn gaussian_w2_squared(m1: &DVector<f64>, c1: &DMatrix<f64>, m2: &DVector<f64>, c2: &DMatrix<f64>) -> Result<f64> {
    let d = m1.len();
    if m2.len() != d || c1.shape() != (d, d) || c2.shape() != (d, d) {
        return config_err("gaussian_w2: dimension mismatch");
    }
    for c in [c1, c2] {
        psd_eigen(c, 1e-10 * (1.0 + c.amax()))?;
    }
    let r2 = psd_sqrt(c2)?;
    let mut inner = &r2 * c1 * &r2;
    inner = (&inner + inner.transpose()) * 0.5;
    let cross = psd_eigen(&inner, f64::INFINITY)?.0.iter().map(|v| v.sqrt()).sum::<f64>();
    Ok(((m1 - m2).norm_squared() + c1.trace() + c2.trace() - 2.0 * cross).max(0.0))
}

pub fn gaussian_w2(m1: &DVector<f64>, c1: &DMatrix<f64>, m2: &DVector<f64>, c2: &DMatrix<f64>) -> Result<f64> {
    Ok(gaussian_w2_squared(m1, c1, m2, c2)?.sqrt())
}

/// Optimal assignment with dual potentials certifying optimality:
/// `row_potential[i] + col_potential[j] <= cost[i][j]` with equality on the
/// chosen pairs.
#[derive(Debug, Clone, PartialEq)]
pub struct Assignment {
    pub row_to_col: Vec<usize>,
    pub total_cost: f64,
    pub row_potential: Vec<f64>,
    pub col_potential: Vec<f64>,
}

/// Exact minimum-cost perfect matching on a square cost matrix by shortest
/// augmenting paths with potentials, `O(n^3)`.
pub fn solve_assignment(cost: &DMatrix<f64>) -> Result<Assignment> {
    let n = cost.nrows();
    if cost.ncols() != n {
        return config_err("assignment needs a square cost matrix");
    }
    if cost.iter().any(|c| !c.is_finite()) {
        return Err(Error::Domain("assignment costs must be finite".into()));
    }
    // 1-based arrays; column 0 is a virtual source.
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut matched = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        matched[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = matched[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=n {
                if used[j] {
                    continue;
                }
                let cur = cost[(i0 - 1, j - 1)] - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[matched[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if matched[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            matched[j0] = matched[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut row_to_col = vec![0; n];
    for j in 1..=n {
        row_to_col[matched[j] - 1] = j - 1;
    }
    let total_cost = row_to_col.iter().enumerate().map(|(i, j)| cost[(i, *j)]).sum();
    Ok(Assignment { row_to_col, total_cost, row_potential: u[1..].to_vec(), col_potential: v[1..].to_vec() })
}

fn lex_less(a: &[DVector<f64>], b: &[DVector<f64>]) -> bool {
    let order = a.iter().flat_map(|p| p.iter()).zip(b.iter().flat_map(|p| p.iter())).map(|(x, y)| x.total_cmp(y));
    order.into_iter().find(|o| o.is_ne()) == Some(std::cmp::Ordering::Less)
}

/// Mean matched cost, summed in sorted order so swapping the two sets
/// gives a bitwise identical value.
fn matched_mean(cost: &DMatrix<f64>) -> Result<f64> {
    let plan = solve_assignment(cost)?;
    let mut costs: Vec<f64> = plan.row_to_col.iter().enumerate().map(|(i, &j)| cost[(i, j)]).collect();
    costs.sort_by(f64::total_cmp);
    Ok(costs.iter().sum::<f64>() / costs.len() as f64)
}

/// Raw and capped projected 1-Wasserstein distances.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProjectedW1 {
    pub raw: f64,
    /// Ground cost `min(|a - b|, 2)`.
    pub capped: f64,
    /// Points per set after subsampling.
    pub n: usize,
}

/// Projects both sets onto the subspace coordinates and computes empirical
/// 1-Wasserstein distances. Sets may differ in size by up to 2x; the larger
/// is then subsampled without replacement using `subsample_seed`.
pub fn projected_w1(
    a: &[DVector<f64>],
    b: &[DVector<f64>],
    embedding: &SubspaceEmbedding,
    subsample_seed: u64,
) -> Result<ProjectedW1> {
    let k = embedding.intrinsic_dim();
    if k > MAX_TRANSPORT_DIM {
        return Err(Error::Unsupported(format!("projected W1 supports k <= {MAX_TRANSPORT_DIM}, got {k}")));
    }
    if a.is_empty() || b.is_empty() {
        return config_err("sample sets must be nonempty");
    }
    let (small, large) = if a.len() <= b.len() { (a, b) } else { (b, a) };
    if large.len() > 2 * small.len() {
        return config_err(format!("sample sizes {} and {} differ by more than 2x", a.len(), b.len()));
    }
    let n = small.len();
    if n > MAX_TRANSPORT_POINTS {
        return Err(Error::Unsupported(format!("projected W1 supports n <= {MAX_TRANSPORT_POINTS}, got {n}")));
    }
    let picked: Vec<&DVector<f64>> = if large.len() == n {
        large.iter().collect()
    } else {
        let mut rng = NoiseStream::new(subsample_seed).rng(0);
        let mut idx = sample_indices(&mut rng, large.len(), n).into_vec();
        idx.sort_unstable();
        idx.into_iter().map(|i| &large[i]).collect()
    };
    let mut pa: Vec<DVector<f64>> = small.iter().map(|x| embedding.coordinates(x)).collect();
    let mut pb: Vec<DVector<f64>> = picked.iter().map(|x| embedding.coordinates(x)).collect();
    // Fixed roles for equal-size sets, so ties resolve the same way either
    // way round.
    if a.len() == b.len() && lex_less(&pb, &pa) {
        std::mem::swap(&mut pa, &mut pb);
    }
    if pa.iter().chain(&pb).any(|p| p.iter().any(|v| !v.is_finite())) {
        return Err(Error::Domain("sample coordinates must be finite".into()));
    }

    let raw = if k == 1 {
        let mut xa: Vec<f64> = pa.iter().map(|p| p[0]).collect();
        let mut xb: Vec<f64> = pb.iter().map(|p| p[0]).collect();
        xa.sort_by(f64::total_cmp);
        xb.sort_by(f64::total_cmp);
        xa.iter().zip(&xb).map(|(x, y)| (x - y).abs()).sum::<f64>() / n as f64
    } else {
        let cost = DMatrix::from_fn(n, n, |i, j| (&pa[i] - &pb[j]).norm());
        matched_mean(&cost)?
    };
    let capped_cost = DMatrix::from_fn(n, n, |i, j| (&pa[i] - &pb[j]).norm().min(TRANSPORT_COST_CAP));
    let capped = matched_mean(&capped_cost)?;
    Ok(ProjectedW1 { raw, capped, n })
}

/// `E |X - P(X + sigma Z)|` for `X ~ model`, `P` the orthogonal projection
/// onto the model's support.
pub fn early_stop_gap(model: &GaussianMixture, sigma: f64, n_mc: usize, seed: u64) -> Result<Estimate> {
    if !(sigma >= 0.0 && sigma.is_finite()) {
        return config_err("sigma must be nonnegative");
    }
    if n_mc == 0 {
        return config_err("need at least one draw");
    }
    let support = model.support();
    let d = model.ambient_dim();
    let stream = NoiseStream::new(seed);
    let xs = model.sample(n_mc, seed);
    let vals: Vec<f64> = xs
        .iter()
        .enumerate()
        .map(|(i, x)| {
            let y = x + stream.normal(i as u64 + 1, d) * sigma;
            (x - support.project(&y)).norm()
        })
        .collect();
    Ok(Estimate::from_samples(&vals))
}

/// Counts of samples whose nearest component mean (in the component's own
/// Mahalanobis metric on the support) lies within `radius`; the last entry
/// counts the misses.
pub fn component_hits(model: &GaussianMixture, samples: &[DVector<f64>], radius: f64) -> Result<Vec<usize>> {
    let support = model.support();
    let vars = model.support_variances();
    let centres: Vec<DVector<f64>> = model.means().iter().map(|m| support.coordinates(m)).collect();
    let mut counts = vec![0; model.n_components() + 1];
    for x in samples {
        let c = support.coordinates(x);
        let mut best = (f64::INFINITY, model.n_components());
        for (i, m) in centres.iter().enumerate() {
            let mut dist2 = 0.0;
            for j in 0..c.len() {
                let diff = c[j] - m[j];
                dist2 += if vars[j] > 0.0 { diff * diff / vars[j] } else if diff == 0.0 { 0.0 } else { f64::INFINITY };
            }
            if dist2 < best.0 {
                best = (dist2, i);
            }
        }
        let slot = if best.0.sqrt() <= radius { best.1 } else { model.n_components() };
        counts[slot] += 1;
    }
    Ok(counts)
}

/// Writes `rows` under `header` as CSV at `path`, and `metadata` as JSON at
/// `path.json`.
pub fn write_table(path: impl AsRef<Path>, header: &[&str], rows: &[Vec<String>], metadata: &serde_json::Value) -> Result<()> {
    let path = path.as_ref();
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(header)?;
    for r in rows {
        if r.len() != header.len() {
            return config_err("table row length does not match header");
        }
        w.write_record(r)?;
    }
    w.flush()?;
    let mut side = path.as_os_str().to_owned();
    side.push(".json");
    std::fs::write(side, serde_json::to_string_pretty(metadata)?)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dv(v: &[f64]) -> DVector<f64> {
        DVector::from_column_slice(v)
    }

    #[test]
    fn psnr_cases() {
        let z = DVector::zeros(3);
        assert_eq!(psnr(&z, &dv(&[1.0, 0.0, 0.0])).unwrap().db, 0.0);
        assert!((psnr(&z, &dv(&[6.0, 8.0, 0.0])).unwrap().db + 20.0).abs() < 1e-12);
        let same = psnr(&z, &z).unwrap();
        assert!(same.capped && same.db == PSNR_CAP_DB);
        let mut prev = f64::INFINITY;
        for e in 1..50 {
            let v = psnr(&z, &dv(&[e as f64 * 0.1, 0.0, 0.0])).unwrap().db;
            assert!(v < prev);
            prev = v;
        }
    }

    #[test]
    fn w2_examples() {
        let d = 5;
        let z = DVector::zeros(d);
        let i = DMatrix::identity(d, d);
        let w = gaussian_w2_squared(&z, &i, &z, &(&i * 4.0)).unwrap();
        assert!((w - d as f64).abs() < 1e-12);
        assert!(gaussian_w2_squared(&z, &i, &z, &i).unwrap() < 1e-14);
        let bad = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, -1.0]);
        assert!(gaussian_w2(&DVector::zeros(2), &bad, &DVector::zeros(2), &DMatrix::identity(2, 2)).is_err());
    }

    #[test]
    fn w2_diagonal_matches_coordinatewise_oracle() {
        let m1 = dv(&[0.1, -1.0, 2.0]);
        let m2 = dv(&[0.0, 0.5, 1.0]);
        let v1 = [0.5, 2.0, 0.0];
        let v2 = [1.5, 0.3, 0.7];
        let c1 = DMatrix::from_diagonal(&dv(&v1));
        let c2 = DMatrix::from_diagonal(&dv(&v2));
        let oracle: f64 = (0..3).map(|j| (m1[j] - m2[j]).powi(2) + (v1[j].sqrt() - v2[j].sqrt()).powi(2)).sum();
        let w = gaussian_w2_squared(&m1, &c1, &m2, &c2).unwrap();
        assert!((w - oracle).abs() < 1e-10);
        let back = gaussian_w2_squared(&m2, &c2, &m1, &c1).unwrap();
        assert!((w - back).abs() < 1e-10);
    }

    fn brute_force(cost: &DMatrix<f64>) -> f64 {
        fn rec(cost: &DMatrix<f64>, row: usize, used: &mut Vec<bool>, acc: f64, best: &mut f64) {
            let n = cost.nrows();
            if row == n {
                *best = best.min(acc);
                return;
            }
            for j in 0..n {
                if !used[j] {
                    used[j] = true;
                    rec(cost, row + 1, used, acc + cost[(row, j)], best);
                    used[j] = false;
                }
            }
        }
        let mut best = f64::INFINITY;
        rec(cost, 0, &mut vec![false; cost.nrows()], 0.0, &mut best);
        best
    }

    #[test]
    fn assignment_matches_brute_force() {
        let mut rng = NoiseStream::new(3).rng(0);
        use rand::Rng;
        for n in 1..=7 {
            for _ in 0..5 {
                let cost = DMatrix::from_fn(n, n, |_, _| rng.random::<f64>() * 10.0);
                let a = solve_assignment(&cost).unwrap();
                assert!((a.total_cost - brute_force(&cost)).abs() < 1e-10);
                let mut cols = a.row_to_col.clone();
                cols.sort_unstable();
                assert_eq!(cols, (0..n).collect::<Vec<_>>());
            }
        }
    }

    #[test]
    fn assignment_potentials_certify_optimality() {
        let mut rng = NoiseStream::new(8).rng(0);
        use rand::Rng;
        let n = 60;
        let cost = DMatrix::from_fn(n, n, |_, _| rng.random::<f64>());
        let a = solve_assignment(&cost).unwrap();
        for i in 0..n {
            for j in 0..n {
                assert!(a.row_potential[i] + a.col_potential[j] <= cost[(i, j)] + 1e-12);
            }
        }
        let dual: f64 = a.row_potential.iter().chain(&a.col_potential).sum();
        assert!((dual - a.total_cost).abs() < 1e-9);
    }

    #[test]
    fn w1_trivial_cases() {
        let emb1 = SubspaceEmbedding::zero_padding(1, 3).unwrap();
        let r = projected_w1(&[DVector::zeros(3)], &[dv(&[1.0, 5.0, 5.0])], &emb1, 0).unwrap();
        assert_eq!(r.raw, 1.0);
        assert_eq!(r.capped, 1.0);
        let emb2 = SubspaceEmbedding::zero_padding(2, 3).unwrap();
        let set: Vec<DVector<f64>> = (0..10).map(|i| dv(&[i as f64, -(i as f64), 0.3])).collect();
        assert_eq!(projected_w1(&set, &set, &emb2, 0).unwrap().raw, 0.0);
        let far = vec![dv(&[10.0, 0.0, 0.0])];
        let r = projected_w1(&[DVector::zeros(3)], &far, &emb2, 0).unwrap();
        assert_eq!((r.raw, r.capped), (10.0, 2.0));
    }

    #[test]
    fn w1_guards() {
        let emb = SubspaceEmbedding::zero_padding(9, 10).unwrap();
        let x = vec![DVector::zeros(10)];
        assert!(matches!(projected_w1(&x, &x, &emb, 0), Err(Error::Unsupported(_))));
        let emb = SubspaceEmbedding::zero_padding(2, 2).unwrap();
        let big: Vec<DVector<f64>> = (0..2049).map(|i| dv(&[i as f64, 0.0])).collect();
        assert!(matches!(projected_w1(&big, &big, &emb, 0), Err(Error::Unsupported(_))));
        let three: Vec<DVector<f64>> = (0..3).map(|i| dv(&[i as f64, 0.0])).collect();
        assert!(projected_w1(&three[..1], &three, &emb, 0).is_err());
        let r = projected_w1(&three[..2], &three, &emb, 4).unwrap();
        assert_eq!(r.n, 2);
    }

    #[test]
    fn early_stop_gap_at_zero_noise() {
        let m = GaussianMixture::uniform(vec![DVector::zeros(2)], DMatrix::identity(2, 2))
            .unwrap()
            .embed(&SubspaceEmbedding::random(2, 40, 2).unwrap())
            .unwrap();
        assert!(early_stop_gap(&m, 0.0, 100, 1).unwrap().mean < 1e-12);
        let e = early_stop_gap(&m, 0.3, 4000, 1).unwrap();
        // sigma * E chi_2 = sigma * sqrt(pi / 2)
        let exact = 0.3 * (std::f64::consts::PI / 2.0).sqrt();
        assert!((e.mean - exact).abs() < 3.0 * e.std_err + 1e-12);
    }

    #[test]
    fn hits_count_misses() {
        let m = GaussianMixture::uniform(vec![dv(&[2.0, 0.0]), dv(&[-2.0, 0.0])], DMatrix::identity(2, 2) * 0.01).unwrap();
        let counts = component_hits(&m, &[dv(&[2.05, 0.0]), dv(&[-2.0, 0.1]), dv(&[0.0, 0.0])], 3.0).unwrap();
        assert_eq!(counts, vec![1, 1, 1]);
    }

    #[test]
    fn table_writes_sidecar() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("t.csv");
        write_table(&p, &["a", "b"], &[vec!["1".into(), "2".into()]], &serde_json::json!({"seed": 3})).unwrap();
        assert_eq!(std::fs::read_to_string(&p).unwrap(), "a,b\n1,2\n");
        assert!(std::fs::read_to_string(dir.path().join("t.csv.json")).unwrap().contains("\"seed\": 3"));
    }
}
