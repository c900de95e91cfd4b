//! Evaluation and loss functions on point sets and diagonal Gaussians.
//!
//! The differentiable versions of [`chamfer`] and [`gaussian_kl`] live on the
//! tape ([`crate::diff::Tape::chamfer`], [`crate::diff::Tape::gaussian_kl`]);
//! the functions here are the plain evaluators used for reporting.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{dist2, Point, PointCloud};
use crate::mvpgen::CompletionSample;

/// Default F-score threshold, in normalised model units.
pub const FSCORE_TAU: f64 = 0.01;

/// Report column order: the eight conventional categories followed by the
/// eight added ones.
pub const CATEGORIES: [&str; 16] = [
    "airplane",
    "cabinet",
    "car",
    "chair",
    "lamp",
    "sofa",
    "table",
    "watercraft",
    "bed",
    "bench",
    "bookshelf",
    "bus",
    "guitar",
    "motorbike",
    "pistol",
    "skateboard",
];

pub const LOGVAR_MIN: f64 = -10.0;
pub const LOGVAR_MAX: f64 = 10.0;

/// Diagonal Gaussian `N(mean, diag(exp(logvar)))`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GaussianParams {
    mean: Vec<f64>,
    logvar: Vec<f64>,
}

impl GaussianParams {
    /// Log-variances are clamped to `[LOGVAR_MIN, LOGVAR_MAX]`.
    pub fn new(mean: Vec<f64>, logvar: Vec<f64>) -> Result<Self> {
        if mean.len() != logvar.len() {
            return Err(Error::contract("gaussian mean and log-variance lengths differ"));
        }
        if mean.iter().chain(&logvar).any(|v| !v.is_finite()) {
            return Err(Error::contract("gaussian parameters must be finite"));
        }
        let logvar = logvar.into_iter().map(|v| v.clamp(LOGVAR_MIN, LOGVAR_MAX)).collect();
        Ok(Self { mean, logvar })
    }

    /// `N(0, I)` in `dim` dimensions.
    pub fn standard(dim: usize) -> Self {
        Self {
            mean: vec![0.0; dim],
            logvar: vec![0.0; dim],
        }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    pub fn logvar(&self) -> &[f64] {
        &self.logvar
    }

    pub fn std(&self) -> Vec<f64> {
        self.logvar.iter().map(|l| (0.5 * l).exp()).collect()
    }
}

fn nearest_dist2(p: &Point, set: &[Point]) -> f64 {
    set.iter().map(|q| dist2(p, q)).fold(f64::INFINITY, f64::min)
}

/// Symmetric squared Chamfer distance.
pub fn chamfer(p: &PointCloud, q: &PointCloud) -> Result<f64> {
    chamfer_points(p.points(), q.points())
}

pub fn chamfer_points(p: &[Point], q: &[Point]) -> Result<f64> {
    if p.is_empty() || q.is_empty() {
        return Err(Error::contract("chamfer distance of an empty cloud"));
    }
    let fwd: f64 = p.iter().map(|x| nearest_dist2(x, q)).sum::<f64>() / p.len() as f64;
    let bwd: f64 = q.iter().map(|y| nearest_dist2(y, p)).sum::<f64>() / q.len() as f64;
    Ok(fwd + bwd)
}

/// One-directional mean squared distance from `p` to its nearest points in `q`.
pub fn directed_chamfer(p: &[Point], q: &[Point]) -> Result<f64> {
    if p.is_empty() || q.is_empty() {
        return Err(Error::contract("chamfer distance of an empty cloud"));
    }
    Ok(p.iter().map(|x| nearest_dist2(x, q)).sum::<f64>() / p.len() as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FScore {
    pub f: f64,
    pub precision: f64,
    pub recall: f64,
}

fn fraction_within(a: &[Point], b: &[Point], tau2: f64) -> f64 {
    let hits = a.iter().filter(|x| nearest_dist2(x, b) < tau2).count();
    hits as f64 / a.len() as f64
}

/// Precision (predicted points closer than `tau` to the ground truth),
/// recall (the converse) and their harmonic mean.
pub fn fscore(pred: &PointCloud, gt: &PointCloud, tau: f64) -> Result<FScore> {
    fscore_points(pred.points(), gt.points(), tau)
}

pub fn fscore_points(pred: &[Point], gt: &[Point], tau: f64) -> Result<FScore> {
    if !(tau > 0.0) {
        return Err(Error::contract(format!("fscore threshold must be positive, got {tau}")));
    }
    if pred.is_empty() || gt.is_empty() {
        return Err(Error::contract("fscore of an empty cloud"));
    }
    let tau2 = tau * tau;
    let precision = fraction_within(pred, gt, tau2);
    let recall = fraction_within(gt, pred, tau2);
    let f = if precision + recall > 0.0 {
        2.0 * precision * recall / (precision + recall)
    } else {
        0.0
    };
    Ok(FScore { f, precision, recall })
}

/// `KL[q || p]`, summed over dimensions.
pub fn gaussian_kl(q: &GaussianParams, p: &GaussianParams) -> Result<f64> {
    if q.dim() != p.dim() {
        return Err(Error::contract(format!(
            "gaussian_kl: dimensions {} and {} differ",
            q.dim(),
            p.dim()
        )));
    }
    Ok((0..q.dim())
        .map(|i| {
            let diff = q.mean[i] - p.mean[i];
            let dl = q.logvar[i] - p.logvar[i];
            0.5 * (dl.exp() - dl + diff * diff * (-p.logvar[i]).exp() - 1.0)
        })
        .sum())
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CategoryMetrics {
    pub cd_e4: f64,
    pub fscore: f64,
    pub count: usize,
}

/// Mean Chamfer distance (times 1e4) and F-score, overall and per category.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub cd_e4: f64,
    pub fscore_1pct: f64,
    pub count: usize,
    pub per_category: BTreeMap<String, CategoryMetrics>,
    /// Categories outside [`CATEGORIES`]; still scored.
    pub unknown_categories: Vec<String>,
}

/// Scores aligned `(prediction, ground truth, category)` triples with
/// threshold `tau`.
pub fn evaluate_pairs<'a, I>(pairs: I, tau: f64) -> Result<MetricReport>
where
    I: IntoIterator<Item = (&'a [Point], &'a [Point], &'a str)>,
{
    let mut report = MetricReport::default();
    let mut sums: BTreeMap<String, (f64, f64, usize)> = BTreeMap::new();
    let (mut cd_total, mut f_total) = (0.0, 0.0);
    for (pred, gt, cat) in pairs {
        let cd = chamfer_points(pred, gt)? * 1e4;
        let f = fscore_points(pred, gt, tau)?.f;
        cd_total += cd;
        f_total += f;
        report.count += 1;
        let e = sums.entry(cat.to_string()).or_default();
        e.0 += cd;
        e.1 += f;
        e.2 += 1;
    }
    if report.count > 0 {
        report.cd_e4 = cd_total / report.count as f64;
        report.fscore_1pct = f_total / report.count as f64;
    }
    for (cat, (cd, f, n)) in sums {
        if !CATEGORIES.contains(&cat.as_str()) {
            report.unknown_categories.push(cat.clone());
        }
        report.per_category.insert(
            cat,
            CategoryMetrics {
                cd_e4: cd / n as f64,
                fscore: f / n as f64,
                count: n,
            },
        );
    }
    Ok(report)
}

/// Scores predictions against the ground truth of `gts` at resolution
/// multiple `multiple` (1, 2, 4 or 8) with `tau = FSCORE_TAU`.
pub fn evaluate_dataset(preds: &[PointCloud], gts: &[CompletionSample], multiple: usize) -> Result<MetricReport> {
    if preds.len() != gts.len() {
        return Err(Error::contract(format!(
            "{} predictions for {} samples",
            preds.len(),
            gts.len()
        )));
    }
    let mut pairs = Vec::with_capacity(preds.len());
    for (p, s) in preds.iter().zip(gts) {
        let gt = s
            .complete_at(multiple)
            .ok_or_else(|| Error::contract(format!("sample {} has no {multiple}x ground truth", s.model_id)))?;
        pairs.push((p.points(), gt.points(), s.category.as_str()));
    }
    evaluate_pairs(pairs, FSCORE_TAU)
}

impl MetricReport {
    /// Column order used by [`format_tables`]: known categories first, then
    /// any unknown ones.
    fn columns(reports: &[(&str, &MetricReport)]) -> Vec<String> {
        let mut cols: Vec<String> = CATEGORIES.iter().map(|s| s.to_string()).collect();
        for (_, r) in reports {
            for c in &r.unknown_categories {
                if !cols.contains(c) {
                    cols.push(c.clone());
                }
            }
        }
        cols
    }
}

/// Tab-separated tables, one row per method and one column per category plus
/// the average: first Chamfer distance times 1e4, then F-score.
/// Categories without samples print `-`.
pub fn format_tables(reports: &[(&str, &MetricReport)]) -> (String, String) {
    let cols = MetricReport::columns(reports);
    let header = format!("method\t{}\tavg\n", cols.join("\t"));
    let mut cd = header.clone();
    let mut f1 = header;
    for (name, r) in reports {
        let _ = write!(cd, "{name}");
        let _ = write!(f1, "{name}");
        for c in &cols {
            match r.per_category.get(c) {
                Some(m) => {
                    let _ = write!(cd, "\t{:.2}", m.cd_e4);
                    let _ = write!(f1, "\t{:.3}", m.fscore);
                }
                None => {
                    cd.push_str("\t-");
                    f1.push_str("\t-");
                }
            }
        }
        let _ = writeln!(cd, "\t{:.2}", r.cd_e4);
        let _ = writeln!(f1, "\t{:.3}", r.fscore_1pct);
    }
    (cd, f1)
}

#[cfg(test)]
mod tests {
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    use super::*;
    use crate::geometry::Role;

    fn cloud(pts: Vec<Point>) -> PointCloud {
        PointCloud::new(pts, Role::Fine).unwrap()
    }

    fn random_points(rng: &mut ChaCha8Rng, n: usize) -> Vec<Point> {
        (0..n)
            .map(|_| [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)])
            .collect()
    }

    /// Straight double loop, written independently of `chamfer_points`.
    fn chamfer_oracle(p: &[Point], q: &[Point]) -> f64 {
        let mut a = 0.0;
        for x in p {
            let mut best = f64::MAX;
            for y in q {
                let d = (x[0] - y[0]).powi(2) + (x[1] - y[1]).powi(2) + (x[2] - y[2]).powi(2);
                if d < best {
                    best = d;
                }
            }
            a += best;
        }
        let mut b = 0.0;
        for y in q {
            let mut best = f64::MAX;
            for x in p {
                let d = (x[0] - y[0]).powi(2) + (x[1] - y[1]).powi(2) + (x[2] - y[2]).powi(2);
                if d < best {
                    best = d;
                }
            }
            b += best;
        }
        a / p.len() as f64 + b / q.len() as f64
    }

    #[test]
    fn chamfer_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let p = random_points(&mut rng, 16);
        let q = random_points(&mut rng, 24);
        assert_eq!(chamfer_points(&p, &p).unwrap(), 0.0);
        let single = chamfer(&cloud(vec![[0.0; 3]]), &cloud(vec![[1.0, 0.0, 0.0]])).unwrap();
        assert_eq!(single, 2.0);
        assert!((chamfer_points(&p, &q).unwrap() - chamfer_oracle(&p, &q)).abs() < 1e-12);
        assert!(chamfer_points(&p, &[]).is_err());
    }

    #[test]
    fn fscore_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let p = random_points(&mut rng, 20);
        let s = fscore_points(&p, &p, 1e-6).unwrap();
        assert_eq!((s.f, s.precision, s.recall), (1.0, 1.0, 1.0));
        let far: Vec<Point> = p.iter().map(|x| [x[0] + 10.0, x[1], x[2]]).collect();
        let s = fscore_points(&p, &far, 0.01).unwrap();
        assert_eq!((s.f, s.precision, s.recall), (0.0, 0.0, 0.0));
        // hand enumeration: 0 matches, 0.5 does not; the single gt point is matched
        let s = fscore_points(&[[0.0; 3], [0.5, 0.0, 0.0]], &[[0.0; 3]], 0.1).unwrap();
        assert_eq!(s.precision, 0.5);
        assert_eq!(s.recall, 1.0);
        assert!((s.f - 2.0 / 3.0).abs() < 1e-15);
        assert!(fscore_points(&p, &p, 0.0).is_err());
    }

    #[test]
    fn fscore_monotone_in_tau() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let p = random_points(&mut rng, 40);
        let q = random_points(&mut rng, 30);
        let mut prev = f64::INFINITY;
        for tau in [2.0, 1.0, 0.5, 0.3, 0.2, 0.1, 0.05, 0.01] {
            let f = fscore_points(&p, &q, tau).unwrap().f;
            assert!(f <= prev);
            prev = f;
        }
    }

    #[test]
    fn kl_examples() {
        let q = GaussianParams::new(vec![1.0, 0.0], vec![0.0, 0.0]).unwrap();
        let p = GaussianParams::standard(2);
        assert_eq!(gaussian_kl(&q, &q).unwrap(), 0.0);
        assert!((gaussian_kl(&q, &p).unwrap() - 0.5).abs() < 1e-15);

        // closed form both ways for diag(4, 1) against N(0, I):
        // KL(q||p) = 0.5 (4 - 1 - ln 4) , KL(p||q) = 0.5 (1/4 - 1 + ln 4)
        let wide = GaussianParams::new(vec![0.0, 0.0], vec![4f64.ln(), 0.0]).unwrap();
        let fwd = gaussian_kl(&wide, &p).unwrap();
        let rev = gaussian_kl(&p, &wide).unwrap();
        assert!((fwd - 0.5 * (3.0 - 4f64.ln())).abs() < 1e-14);
        assert!((rev - 0.5 * (0.25 - 1.0 + 4f64.ln())).abs() < 1e-14);
        assert!(fwd > 0.0 && rev > 0.0 && (fwd - rev).abs() > 0.1);
        assert!(gaussian_kl(&q, &GaussianParams::standard(3)).is_err());
    }

    #[test]
    fn kl_matches_monte_carlo() {
        let q = GaussianParams::new(vec![1.0, 0.0], vec![0.0, 0.0]).unwrap();
        let p = GaussianParams::standard(2);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let n = 1_000_000;
        let (mut s, mut s2) = (0.0, 0.0);
        for _ in 0..n {
            // log q(z) - log p(z) for z ~ q
            let mut lr = 0.0;
            for d in 0..2 {
                let (sq, sp) = ((0.5 * q.logvar()[d]).exp(), (0.5 * p.logvar()[d]).exp());
                let e: f64 = rng.sample(StandardNormal);
                let z = q.mean()[d] + sq * e;
                let zp = (z - p.mean()[d]) / sp;
                lr += -0.5 * e * e - sq.ln() + 0.5 * zp * zp + sp.ln();
            }
            s += lr;
            s2 += lr * lr;
        }
        let mean = s / n as f64;
        let se = ((s2 / n as f64 - mean * mean) / n as f64).sqrt();
        let exact = gaussian_kl(&q, &p).unwrap();
        assert!((exact - 0.5).abs() < 1e-14);
        assert!((mean - exact).abs() < 3.0 * se, "mc {mean} +- {se}");
    }

    #[test]
    fn logvar_is_clamped() {
        let g = GaussianParams::new(vec![0.0, 0.0], vec![-50.0, 50.0]).unwrap();
        assert_eq!(g.logvar(), &[LOGVAR_MIN, LOGVAR_MAX]);
    }

    #[test]
    fn report_perfect_and_half() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let a = random_points(&mut rng, 10);
        let far: Vec<Point> = a.iter().map(|x| [x[0] + 10.0, x[1], x[2]]).collect();
        let perfect = evaluate_pairs([(a.as_slice(), a.as_slice(), "chair")], FSCORE_TAU).unwrap();
        assert_eq!(perfect.cd_e4, 0.0);
        assert_eq!(perfect.fscore_1pct, 1.0);
        let half = evaluate_pairs(
            [(a.as_slice(), a.as_slice(), "chair"), (far.as_slice(), a.as_slice(), "mug")],
            FSCORE_TAU,
        )
        .unwrap();
        assert_eq!(half.fscore_1pct, 0.5);
        assert_eq!(half.unknown_categories, vec!["mug".to_string()]);
        assert_eq!(half.per_category["mug"].count, 1);
    }

    #[test]
    fn table_layout_follows_category_order() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let a = random_points(&mut rng, 8);
        let r = evaluate_pairs([(a.as_slice(), a.as_slice(), "bus")], FSCORE_TAU).unwrap();
        let (cd, f1) = format_tables(&[("model", &r)]);
        let header: Vec<&str> = cd.lines().next().unwrap().split('\t').collect();
        assert_eq!(header.len(), 18);
        assert_eq!(&header[1..17], &CATEGORIES);
        assert_eq!(header[17], "avg");
        let row: Vec<&str> = f1.lines().nth(1).unwrap().split('\t').collect();
        assert_eq!(row[12], "1.000");
        assert_eq!(row[1], "-");
    }
}
