//! Sandwich covariance estimators, Wald tests and confidence intervals.
//!
//! All covariances are evaluated at the orthogonalized point φ̂⁰ and carried
//! to the canonical parametrization through (Â⁰, Ĝ⁰). Sums run over observed
//! cells only, and the leading sample size is the number of observed cells of
//! the item (|N_j|) or subject (|Q_i|).

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::identification::CanonicalFit;
use crate::linalg::{inverse, symmetrize};
use crate::model::{cell_loglik, predictor_matrix, Dataset, LinkFamily};
use crate::par::{map_range, Execution};
use crate::special::{chisq_sf, normal_quantile, two_sided_p};

/// First and second derivatives of every cell at the fitted predictor.
#[derive(Debug, Clone, PartialEq)]
pub struct CellWeights {
    /// l̂′_ij; zero on unobserved cells.
    pub d1: DMatrix<f64>,
    /// l̂″_ij; zero on unobserved cells.
    pub d2: DMatrix<f64>,
    /// Rows (Û⁰_i, X_i).
    pub z0: DMatrix<f64>,
}

fn fit_families<'a>(canon: &'a CanonicalFit, data: &'a Dataset) -> &'a [LinkFamily] {
    if canon.raw.families.len() == data.q() {
        &canon.raw.families
    } else {
        data.families()
    }
}

pub fn cell_weights(canon: &CanonicalFit, data: &Dataset) -> Result<CellWeights> {
    canon.ortho.check_against(data)?;
    let (n, q, k) = (data.n(), data.q(), canon.k());
    let fams = fit_families(canon, data);
    let w = predictor_matrix(&canon.ortho, data.x());
    let mut d1 = DMatrix::zeros(n, q);
    let mut d2 = DMatrix::zeros(n, q);
    for j in 0..q {
        for &i in data.item_observed(j) {
            let t = cell_loglik(&fams[j], data.y()[(i, j)], w[(i, j)]);
            d1[(i, j)] = t.d1;
            d2[(i, j)] = t.d2;
        }
    }
    let mut z0 = DMatrix::zeros(n, k + data.p());
    z0.columns_mut(0, k).copy_from(&canon.ortho.u);
    z0.columns_mut(k, data.p()).copy_from(data.x());
    Ok(CellWeights { d1, d2, z0 })
}

/// Σ_rows d2·zzᵀ and Σ_rows d1²·zzᵀ over the rows of `z` listed in `rows`.
fn moments(z: &DMatrix<f64>, rows: &[usize], d1: impl Fn(usize) -> f64, d2: impl Fn(usize) -> f64) -> (DMatrix<f64>, DMatrix<f64>) {
    let d = z.ncols();
    let mut h = DMatrix::zeros(d, d);
    let mut m = DMatrix::zeros(d, d);
    for &r in rows {
        let zr = z.row(r);
        let (a1, a2) = (d1(r), d2(r));
        let a1sq = a1 * a1;
        for a in 0..d {
            for b in 0..=a {
                let zz = zr[a] * zr[b];
                h[(a, b)] += a2 * zz;
                m[(a, b)] += a1sq * zz;
            }
        }
    }
    for a in 0..d {
        for b in 0..a {
            h[(b, a)] = h[(a, b)];
            m[(b, a)] = m[(a, b)];
        }
    }
    (h, m)
}

fn check_item(j: usize, canon: &CanonicalFit, data: &Dataset) -> Result<()> {
    if j >= data.q() {
        return Err(Error::Index(format!("item {j} outside 0..{}", data.q())));
    }
    let need = canon.k() + data.p();
    if data.item_observed(j).len() <= need {
        return Err(Error::Singular { what: "item with too few observed responses", index: j });
    }
    Ok(())
}

/// Σ̂*_{β,j} (p×p): covariance of √|N_j|(β̂*_j − β*_j).
pub fn sigma_beta(j: usize, canon: &CanonicalFit, weights: &CellWeights, data: &Dataset) -> Result<DMatrix<f64>> {
    check_item(j, canon, data)?;
    let (k, p) = (canon.k(), data.p());
    let rows = data.item_observed(j);
    let (h, m) = moments(&weights.z0, rows, |i| weights.d1[(i, j)], |i| weights.d2[(i, j)]);
    let hx_inv = inverse(&h.view((k, k), (p, p)).clone_owned())
        .ok_or(Error::Singular { what: "covariate information of item", index: j })?;
    let mxx = m.view((k, k), (p, p)).clone_owned();
    let mut s = &hx_inv * mxx * &hx_inv;
    if k > 0 {
        let hu_inv = inverse(&h.view((0, 0), (k, k)).clone_owned())
            .ok_or(Error::Singular { what: "factor information of item", index: j })?;
        let muu = m.view((0, 0), (k, k)).clone_owned();
        let mux = m.view((0, k), (k, p)).clone_owned();
        let a0 = &canon.a0;
        let cross = a0.transpose() * &hu_inv * &mux * &hx_inv;
        s -= &cross;
        s -= cross.transpose();
        s += a0.transpose() * &hu_inv * muu * &hu_inv * a0;
    }
    Ok(symmetrize(&(s * rows.len() as f64)))
}

/// Σ̂*_{γ,j} (K×K): covariance of √|N_j|(γ̂*_j − γ*_j).
pub fn sigma_gamma(j: usize, canon: &CanonicalFit, weights: &CellWeights, data: &Dataset) -> Result<DMatrix<f64>> {
    check_item(j, canon, data)?;
    let k = canon.k();
    let rows = data.item_observed(j);
    let u0 = weights.z0.columns(0, k).clone_owned();
    let (h, m) = moments(&u0, rows, |i| weights.d1[(i, j)], |i| weights.d2[(i, j)]);
    let h_inv = inverse(&h).ok_or(Error::Singular { what: "factor information of item", index: j })?;
    let g_inv = inverse(&canon.g0).ok_or_else(|| Error::RankDeficient("G⁰ is singular".into()))?;
    let inner = &h_inv * m * &h_inv * rows.len() as f64;
    Ok(symmetrize(&(&g_inv * inner * g_inv.transpose())))
}

/// Σ̂*_{u,i} (K×K): covariance of √|Q_i|(Û*_i − U*_i).
pub fn sigma_u(i: usize, canon: &CanonicalFit, weights: &CellWeights, data: &Dataset) -> Result<DMatrix<f64>> {
    if i >= data.n() {
        return Err(Error::Index(format!("subject {i} outside 0..{}", data.n())));
    }
    let k = canon.k();
    let cols = data.subject_observed(i);
    if cols.len() < k {
        return Err(Error::Singular { what: "subject with too few observed responses", index: i });
    }
    let (h, m) = moments(&canon.ortho.gamma, cols, |j| weights.d1[(i, j)], |j| weights.d2[(i, j)]);
    let h_inv = inverse(&h).ok_or(Error::Singular { what: "loading information of subject", index: i })?;
    let inner = &h_inv * m * &h_inv * cols.len() as f64;
    Ok(symmetrize(&(canon.g0.transpose() * inner * &canon.g0)))
}

/// z = √n·β̂/σ̂ and its two-sided normal p-value.
pub fn wald_test(estimate: f64, variance: f64, n_obs: usize) -> Result<(f64, f64)> {
    if !(variance > 0.0) || !variance.is_finite() {
        return Err(Error::Numerical(format!("Wald test needs a positive variance, got {variance}")));
    }
    let z = (n_obs as f64).sqrt() * estimate / variance.sqrt();
    Ok((z, two_sided_p(z)))
}

/// β̂ ∓ Φ⁻¹(1 − (1 − level)/2)·σ̂/√n.
pub fn confidence_interval(estimate: f64, variance: f64, n_obs: usize, level: f64) -> Result<(f64, f64)> {
    if !(level > 0.0 && level < 1.0) {
        return Err(Error::Config(format!("confidence level must lie in (0, 1), got {level}")));
    }
    if !(variance >= 0.0) || n_obs == 0 {
        return Err(Error::Numerical(format!("invalid variance {variance} or sample size {n_obs}")));
    }
    let half = normal_quantile(1.0 - (1.0 - level) / 2.0) * (variance / n_obs as f64).sqrt();
    Ok((estimate - half, estimate + half))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GroupTest {
    pub statistic: f64,
    pub df: usize,
    pub pvalue: f64,
}

/// Σ_{j∈items} z_js² against a chi-square with |items| degrees of freedom.
pub fn group_chisq_from_z(z: &[f64]) -> Result<GroupTest> {
    if z.is_empty() {
        return Err(Error::Config("group test needs at least one item".into()));
    }
    let statistic: f64 = z.iter().map(|v| v * v).sum();
    Ok(GroupTest { statistic, df: z.len(), pvalue: chisq_sf(statistic, z.len() as f64) })
}

/// Group test over `items` for covariate `s` (1-based column of B).
pub fn group_chisq_test(items: &[usize], s: usize, report: &InferenceReport) -> Result<GroupTest> {
    if s == 0 || s > report.z.ncols() {
        return Err(Error::Index(format!("covariate {s} outside 1..={}", report.z.ncols())));
    }
    let mut z = Vec::with_capacity(items.len());
    for &j in items {
        if j >= report.z.nrows() {
            return Err(Error::Index(format!("item {j} outside 0..{}", report.z.nrows())));
        }
        let v = report.z[(j, s - 1)];
        if !v.is_finite() {
            return Err(Error::Singular { what: "group test item without inference", index: j });
        }
        z.push(v);
    }
    group_chisq_from_z(&z)
}

/// Inference for every item, covariate and subject. Entries of items whose
/// covariance is unavailable are NaN and listed in `unavailable_items`.
#[derive(Debug, Clone, PartialEq)]
pub struct InferenceReport {
    pub level: f64,
    pub sigma_beta: Vec<Option<DMatrix<f64>>>,
    pub sigma_gamma: Vec<Option<DMatrix<f64>>>,
    pub sigma_u: Vec<Option<DMatrix<f64>>>,
    /// q×p* canonical covariate effects β̂*_js (s ≥ 1).
    pub estimate: DMatrix<f64>,
    /// σ̂/√|N_j|.
    pub se: DMatrix<f64>,
    pub z: DMatrix<f64>,
    pub pvalues: DMatrix<f64>,
    pub pvalues_bonferroni: DMatrix<f64>,
    pub ci_lower: DMatrix<f64>,
    pub ci_upper: DMatrix<f64>,
    /// n×K standard errors of Û*_ik, √(Σ_u[k,k]/|Q_i|).
    pub u_se: DMatrix<f64>,
    /// q×K standard errors of γ̂*_jk.
    pub gamma_se: DMatrix<f64>,
    pub n_observed: Vec<usize>,
    pub unavailable_items: Vec<(usize, String)>,
    pub unavailable_subjects: Vec<(usize, String)>,
}

impl InferenceReport {
    pub fn is_partial(&self) -> bool {
        !self.unavailable_items.is_empty()
    }

    /// Level-`level` interval for Û*_ik.
    pub fn factor_interval(&self, canon: &CanonicalFit, i: usize, k: usize) -> (f64, f64) {
        let half = normal_quantile(1.0 - (1.0 - self.level) / 2.0) * self.u_se[(i, k)];
        (canon.u_star[(i, k)] - half, canon.u_star[(i, k)] + half)
    }
}

pub fn infer(canon: &CanonicalFit, data: &Dataset, level: f64, exec: Execution) -> Result<InferenceReport> {
    if !(level > 0.0 && level < 1.0) {
        return Err(Error::Config(format!("confidence level must lie in (0, 1), got {level}")));
    }
    let weights = cell_weights(canon, data)?;
    let (n, q, p, k) = (data.n(), data.q(), data.p(), canon.k());
    let ps = p - 1;
    let items = map_range(exec, q, |j| {
        let sb = sigma_beta(j, canon, &weights, data);
        let sg = if k > 0 { sigma_gamma(j, canon, &weights, data).map(Some) } else { Ok(None) };
        (sb, sg)
    });
    let subjects = map_range(exec, n, |i| if k > 0 { sigma_u(i, canon, &weights, data).ok() } else { None });

    let nan = || DMatrix::from_element(q, ps, f64::NAN);
    let mut report = InferenceReport {
        level,
        sigma_beta: Vec::with_capacity(q),
        sigma_gamma: Vec::with_capacity(q),
        sigma_u: Vec::with_capacity(n),
        estimate: canon.b_star.columns(1, ps).clone_owned(),
        se: nan(),
        z: nan(),
        pvalues: nan(),
        pvalues_bonferroni: nan(),
        ci_lower: nan(),
        ci_upper: nan(),
        u_se: DMatrix::from_element(n, k, f64::NAN),
        gamma_se: DMatrix::from_element(q, k, f64::NAN),
        n_observed: (0..q).map(|j| data.item_observed(j).len()).collect(),
        unavailable_items: Vec::new(),
        unavailable_subjects: Vec::new(),
    };
    let m = (q * ps).max(1) as f64;
    for (j, (sb, sg)) in items.into_iter().enumerate() {
        let nj = report.n_observed[j];
        match sb {
            Ok(cov) => {
                for s in 1..p {
                    let est = canon.b_star[(j, s)];
                    let var = cov[(s, s)];
                    report.se[(j, s - 1)] = (var.max(0.0) / nj as f64).sqrt();
                    if let Ok((z, pv)) = wald_test(est, var, nj) {
                        report.z[(j, s - 1)] = z;
                        report.pvalues[(j, s - 1)] = pv;
                        report.pvalues_bonferroni[(j, s - 1)] = (m * pv).min(1.0);
                    }
                    if let Ok((lo, hi)) = confidence_interval(est, var.max(0.0), nj, level) {
                        report.ci_lower[(j, s - 1)] = lo;
                        report.ci_upper[(j, s - 1)] = hi;
                    }
                }
                report.sigma_beta.push(Some(cov));
            }
            Err(e) => {
                report.unavailable_items.push((j, e.to_string()));
                report.sigma_beta.push(None);
            }
        }
        match sg {
            Ok(Some(cov)) => {
                for c in 0..k {
                    report.gamma_se[(j, c)] = (cov[(c, c)].max(0.0) / nj as f64).sqrt();
                }
                report.sigma_gamma.push(Some(cov));
            }
            Ok(None) => report.sigma_gamma.push(None),
            Err(e) => {
                if report.unavailable_items.last().map(|u| u.0) != Some(j) {
                    report.unavailable_items.push((j, e.to_string()));
                }
                report.sigma_gamma.push(None);
            }
        }
    }
    for (i, su) in subjects.into_iter().enumerate() {
        let qi = data.subject_observed(i).len() as f64;
        match &su {
            Some(cov) => {
                for c in 0..k {
                    report.u_se[(i, c)] = (cov[(c, c)].max(0.0) / qi).sqrt();
                }
            }
            None if k > 0 => report.unavailable_subjects.push((i, "singular loading information".into())),
            None => {}
        }
        report.sigma_u.push(su);
    }
    Ok(report)
}
