use crate::error::{bail, Result};
use crate::model::Image;
use nalgebra::{DMatrix, DVector, SymmetricEigen};

fn check_pair(a: &Image, b: &Image) -> Result<()> {
    if !a.same_shape(b) {
        bail!(
            Shape,
            "images differ in shape: {}x{}x{} vs {}x{}x{}",
            a.height(),
            a.width(),
            a.channels(),
            b.height(),
            b.width(),
            b.channels()
        );
    }
    Ok(())
}

pub fn mse(a: &Image, b: &Image) -> Result<f64> {
    check_pair(a, b)?;
    let n = a.pixels().len() as f64;
    Ok(a.pixels().iter().zip(b.pixels()).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / n)
}

/// `10·log10(peak² / MSE)`; identical images give `+∞`.
pub fn psnr(a: &Image, b: &Image, peak: f64) -> Result<f64> {
    if !(peak > 0.0) {
        bail!(Parameter, "psnr peak must be positive, got {peak}");
    }
    let m = mse(a, b)?;
    if m == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (peak * peak / m).log10())
}

pub const SSIM_WINDOW: usize = 8;

/// Mean SSIM over non-overlapping 8×8 windows of every channel. Window
/// statistics use population (1/N) moments. Trailing rows or columns that do
/// not fill a window are ignored.
pub fn ssim(a: &Image, b: &Image, peak: f64) -> Result<f64> {
    check_pair(a, b)?;
    if !(peak > 0.0) {
        bail!(Parameter, "ssim peak must be positive, got {peak}");
    }
    let w = SSIM_WINDOW;
    if a.height() < w || a.width() < w {
        bail!(Shape, "ssim needs images of at least {w}x{w}, got {}x{}", a.height(), a.width());
    }
    let c1 = (0.01 * peak).powi(2);
    let c2 = (0.03 * peak).powi(2);
    let n = (w * w) as f64;
    let mut total = 0.0;
    let mut count = 0usize;
    for c in 0..a.channels() {
        for y0 in (0..=a.height() - w).step_by(w) {
            for x0 in (0..=a.width() - w).step_by(w) {
                let (mut sa, mut sb) = (0.0, 0.0);
                for y in y0..y0 + w {
                    for x in x0..x0 + w {
                        sa += a.get(y, x, c);
                        sb += b.get(y, x, c);
                    }
                }
                let (ma, mb) = (sa / n, sb / n);
                let (mut va, mut vb, mut cov) = (0.0, 0.0, 0.0);
                for y in y0..y0 + w {
                    for x in x0..x0 + w {
                        let (da, db) = (a.get(y, x, c) - ma, b.get(y, x, c) - mb);
                        va += da * da;
                        vb += db * db;
                        cov += da * db;
                    }
                }
                let (va, vb, cov) = (va / n, vb / n, cov / n);
                total += ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
                count += 1;
            }
        }
    }
    Ok(total / count as f64)
}

/// Mean and unbiased covariance of a feature set.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureStats {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
    pub n: usize,
}

impl FeatureStats {
    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn from_features(rows: &[Vec<f64>]) -> Result<Self> {
        let mut acc = FeatureAccumulator::default();
        for r in rows {
            acc.push(r)?;
        }
        acc.finish()
    }
}

/// Streaming mean and co-moment (Welford); partial accumulators merge
/// exactly as if their inputs had been pushed into one.
#[derive(Clone, Debug, Default)]
pub struct FeatureAccumulator {
    n: usize,
    mean: Option<DVector<f64>>,
    m2: Option<DMatrix<f64>>,
}

impl FeatureAccumulator {
    pub fn push(&mut self, x: &[f64]) -> Result<()> {
        let x = DVector::from_column_slice(x);
        if let Some(m) = &self.mean {
            if m.len() != x.len() {
                bail!(Shape, "feature of dimension {} pushed into a {}-dimensional set", x.len(), m.len());
            }
        }
        if x.iter().any(|v| !v.is_finite()) {
            bail!(Numeric, "non-finite feature value");
        }
        self.n += 1;
        let mean = self.mean.get_or_insert_with(|| DVector::zeros(x.len()));
        let m2 = self.m2.get_or_insert_with(|| DMatrix::zeros(x.len(), x.len()));
        let d_old = &x - &*mean;
        *mean += &d_old / self.n as f64;
        let d_new = &x - &*mean;
        *m2 += &d_old * d_new.transpose();
        Ok(())
    }

    pub fn merge(&mut self, other: &FeatureAccumulator) -> Result<()> {
        let (Some(mb), Some(m2b)) = (&other.mean, &other.m2) else {
            return Ok(());
        };
        let (Some(ma), Some(m2a)) = (&mut self.mean, &mut self.m2) else {
            *self = other.clone();
            return Ok(());
        };
        if ma.len() != mb.len() {
            bail!(Shape, "cannot merge feature sets of dimension {} and {}", ma.len(), mb.len());
        }
        let (na, nb) = (self.n as f64, other.n as f64);
        let n = na + nb;
        let delta = mb - &*ma;
        *m2a += m2b + &delta * delta.transpose() * (na * nb / n);
        *ma += delta * (nb / n);
        self.n += other.n;
        Ok(())
    }

    pub fn count(&self) -> usize {
        self.n
    }

    pub fn finish(&self) -> Result<FeatureStats> {
        match (&self.mean, &self.m2) {
            (Some(mean), Some(m2)) if self.n >= 2 => {
                let mut cov = m2 / (self.n as f64 - 1.0);
                // exact symmetry despite rounding in the rank-one updates
                cov = (&cov + cov.transpose()) * 0.5;
                Ok(FeatureStats { mean: mean.clone(), cov, n: self.n })
            }
            _ => bail!(Contract, "feature statistics need at least 2 samples, got {}", self.n),
        }
    }
}

const FRECHET_EPS: f64 = 1e-6;

fn eigen(m: DMatrix<f64>) -> Result<SymmetricEigen<f64, nalgebra::Dyn>> {
    match SymmetricEigen::try_new(m, 1e-15, 10_000) {
        Some(e) => Ok(e),
        None => bail!(Numeric, "eigendecomposition did not converge"),
    }
}

/// `‖μ1 − μ2‖² + Tr(Σ1 + Σ2 − 2(Σ1Σ2)^{1/2})` with `1e-6·I` added to both
/// covariances. The trace of the matrix root is taken from the eigenvalues
/// of the symmetric `Σ1^{1/2} Σ2 Σ1^{1/2}`.
pub fn frechet_distance(s1: &FeatureStats, s2: &FeatureStats) -> Result<f64> {
    if s1.dim() != s2.dim() {
        bail!(Shape, "feature dimensions differ: {} vs {}", s1.dim(), s2.dim());
    }
    let d = s1.dim();
    let eye = DMatrix::<f64>::identity(d, d) * FRECHET_EPS;
    let a = &s1.cov + &eye;
    let b = &s2.cov + &eye;
    let ea = eigen(a.clone())?;
    let root = &ea.eigenvectors
        * DMatrix::from_diagonal(&ea.eigenvalues.map(|v| v.max(0.0).sqrt()))
        * ea.eigenvectors.transpose();
    let mut m = &root * &b * &root;
    m = (&m + m.transpose()) * 0.5;
    let tr_root: f64 = eigen(m)?.eigenvalues.iter().map(|v| v.max(0.0).sqrt()).sum();
    let dm = &s1.mean - &s2.mean;
    Ok(dm.norm_squared() + a.trace() + b.trace() - 2.0 * tr_root)
}

/// Lowercased, trimmed, inner whitespace collapsed.
pub fn normalize_answer(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ").to_lowercase()
}

/// Fraction of exact matches after [`normalize_answer`].
pub fn answer_accuracy<A: AsRef<str>, B: AsRef<str>>(preds: &[A], golds: &[B]) -> Result<f64> {
    if preds.len() != golds.len() {
        bail!(Shape, "{} predictions for {} answers", preds.len(), golds.len());
    }
    if preds.is_empty() {
        bail!(Contract, "accuracy of an empty answer list");
    }
    let hits = preds
        .iter()
        .zip(golds)
        .filter(|(p, g)| normalize_answer(p.as_ref()) == normalize_answer(g.as_ref()))
        .count();
    Ok(hits as f64 / preds.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn flat(v: f64) -> Image {
        Image::filled(16, 16, 1, v).unwrap()
    }

    #[test]
    fn psnr_closed_forms() {
        assert_eq!(psnr(&flat(0.3), &flat(0.3), 1.0).unwrap(), f64::INFINITY);
        assert!((psnr(&flat(0.0), &flat(0.1), 1.0).unwrap() - 20.0).abs() < 1e-9);
        assert!((psnr(&flat(0.0), &flat(0.5), 1.0).unwrap() - 6.020599913279624).abs() < 1e-12);
        assert!(psnr(&flat(0.0), &Image::filled(8, 8, 1, 0.0).unwrap(), 1.0).is_err());
    }

    #[test]
    fn ssim_constant_images() {
        // value from a standalone scalar evaluation of the SSIM formula
        assert!((ssim(&flat(0.0), &flat(1.0), 1.0).unwrap() - 9.999000099990002e-05).abs() < 1e-15);
        assert_eq!(ssim(&flat(0.4), &flat(0.4), 1.0).unwrap(), 1.0);
        assert!(ssim(&Image::filled(4, 4, 1, 0.0).unwrap(), &Image::filled(4, 4, 1, 0.0).unwrap(), 1.0).is_err());
    }

    #[test]
    fn accuracy_rules() {
        assert_eq!(answer_accuracy(&["Yes "], &["yes"]).unwrap(), 1.0);
        assert_eq!(answer_accuracy(&["a  b", "c"], &["a b", "d"]).unwrap(), 0.5);
        assert_eq!(answer_accuracy(&["x", "y"], &["p", "q"]).unwrap(), 0.0);
        assert!(answer_accuracy(&["x"], &["p", "q"]).is_err());
        assert!(answer_accuracy::<&str, &str>(&[], &[]).is_err());
    }

    #[test]
    fn frechet_closed_forms() {
        let d = 3;
        let s = |mu: Vec<f64>, var: f64| FeatureStats {
            mean: DVector::from_vec(mu),
            cov: DMatrix::identity(d, d) * var,
            n: 10,
        };
        let a = s(vec![0.0; 3], 1.0);
        assert!(frechet_distance(&a, &a).unwrap().abs() < 1e-8);
        let b = s(vec![1.0, 0.0, 0.0], 1.0);
        assert!((frechet_distance(&a, &b).unwrap() - 1.0).abs() < 1e-8);
        let c = s(vec![0.0; 3], 4.0);
        // commuting closed form on the regularized covariances
        let eps: f64 = 1e-6;
        let closed = d as f64 * (4.0 + 1.0 + 2.0 * eps - 2.0 * ((4.0 + eps) * (1.0 + eps)).sqrt());
        assert!((frechet_distance(&c, &a).unwrap() - closed).abs() < 1e-9);
        assert!((frechet_distance(&c, &a).unwrap() - d as f64).abs() < 1e-5);
        assert!(frechet_distance(&a, &FeatureStats { mean: DVector::zeros(2), cov: DMatrix::identity(2, 2), n: 2 }).is_err());
    }

    #[test]
    fn accumulator_needs_two() {
        let mut acc = FeatureAccumulator::default();
        acc.push(&[1.0, 2.0]).unwrap();
        assert!(acc.finish().is_err());
        assert!(acc.push(&[1.0]).is_err());
        acc.push(&[1.0, 2.0]).unwrap();
        let s = acc.finish().unwrap();
        assert_eq!(s.cov, DMatrix::zeros(2, 2));
    }
}
