//! Canonical representative of a fit: centered factors orthogonal in the
//! scaled sense, and covariate effects of minimal ℓ1 norm.
//!
//! The likelihood is invariant under
//! `(Γ, U, B) → (ΓG⁻ᵀ, (U + XAᵀ)G, B − ΓA)`. The canonical point picks `A`
//! by a least-absolute-deviation regression of each covariate column of B̂ on
//! Γ̂, centers the factors with the intercept column of `A`, and picks `G` so
//! that `n⁻¹U*ᵀU* = q⁻¹Γ*ᵀΓ*` is diagonal with descending entries.

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::estimation::{fit_from, fit_joint_mle, in_box, FitConfig, RawFit};
use crate::linalg::{inverse, max_abs, sym_eigen_desc, sym_sqrt};
use crate::model::{predictor_matrix, Dataset, ParameterSet};
use crate::par::{map_range, Execution};

/// Below this eigenvalue gap the scaling is flagged as degenerate.
pub const EIGEN_GAP_TOL: f64 = 1e-10;

const IRLS_DELTA: f64 = 1e-8;
const IRLS_MAX_ITER: usize = 200;
const IRLS_REL_TOL: f64 = 1e-10;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransformPair {
    /// K×p; column 0 centers the factors, the rest is the ℓ1 rotation.
    pub a: DMatrix<f64>,
    pub g: DMatrix<f64>,
    /// Eigenvalues ϱ̂_k, descending.
    pub eigenvalues: Vec<f64>,
    /// Smallest gap between adjacent eigenvalues (`None` when K ≤ 1).
    pub eigen_gap: Option<f64>,
}

/// How far a canonical fit is from the identification conditions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConditionReport {
    /// max_k |n⁻¹ Σ_i U*_ik|.
    pub centering_residual: f64,
    /// Largest off-diagonal entry of either second-moment matrix relative to its diagonal.
    pub off_diagonal: f64,
    /// Largest relative difference between the two diagonals.
    pub diagonal_mismatch: f64,
    /// max |raw predictor − canonical predictor|.
    pub predictor_gap: f64,
    pub eigen_gap: Option<f64>,
    /// Covariates whose ℓ1 rotation has a flat direction.
    pub l1_nonunique: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CanonicalFit {
    pub raw: RawFit,
    pub transform: TransformPair,
    pub gamma_star: DMatrix<f64>,
    pub u_star: DMatrix<f64>,
    pub b_star: DMatrix<f64>,
    /// Intermediate point with Û⁰ᵀX = 0 and matched, diagonal second moments.
    pub ortho: ParameterSet,
    /// (A⁰, G⁰) taking `ortho` to the canonical point.
    pub a0: DMatrix<f64>,
    pub g0: DMatrix<f64>,
    /// max |B* − B*⁰| where B*⁰ is rebuilt from `ortho` by its own ℓ1 rotation.
    pub ortho_route_gap: Option<f64>,
    pub condition_report: ConditionReport,
    pub warnings: Vec<String>,
    pub refine_rounds_done: usize,
}

impl CanonicalFit {
    pub fn params(&self) -> ParameterSet {
        ParameterSet {
            gamma: self.gamma_star.clone(),
            u: self.u_star.clone(),
            b: self.b_star.clone(),
        }
    }

    pub fn k(&self) -> usize {
        self.gamma_star.ncols()
    }
}

/// Result of the column-wise least-absolute-deviation problem.
#[derive(Debug, Clone, PartialEq)]
pub struct L1Rotation {
    /// K×p* matrix; column s minimizes Σ_j |b_js − aᵀγ_j|.
    pub a_c: DMatrix<f64>,
    pub objectives: Vec<f64>,
    /// Columns where the minimizer is not unique.
    pub nonunique: Vec<usize>,
    pub warnings: Vec<String>,
}

fn lad_objective(gamma: &DMatrix<f64>, b: &DVector<f64>, a: &DVector<f64>) -> f64 {
    (b - gamma * a).iter().map(|r| r.abs()).sum()
}

fn weighted_ls(gamma: &DMatrix<f64>, b: &DVector<f64>, w: &[f64]) -> Option<DVector<f64>> {
    let k = gamma.ncols();
    let mut lhs = DMatrix::zeros(k, k);
    let mut rhs = DVector::zeros(k);
    for j in 0..gamma.nrows() {
        let g = gamma.row(j).transpose();
        lhs += &g * g.transpose() * w[j];
        rhs += &g * (w[j] * b[j]);
    }
    let scale = lhs.amax().max(1e-300);
    lhs += DMatrix::identity(k, k) * (1e-12 * scale);
    lhs.cholesky().map(|c| c.solve(&rhs))
}

fn lad_irls(gamma: &DMatrix<f64>, b: &DVector<f64>) -> DVector<f64> {
    let q = gamma.nrows();
    let Some(mut a) = weighted_ls(gamma, b, &vec![1.0; q]) else {
        return DVector::zeros(gamma.ncols());
    };
    for _ in 0..IRLS_MAX_ITER {
        let r = b - gamma * &a;
        let w: Vec<f64> = r.iter().map(|v| 1.0 / (v * v + IRLS_DELTA * IRLS_DELTA).sqrt()).collect();
        let Some(next) = weighted_ls(gamma, b, &w) else { break };
        let change = (&next - &a).norm() / a.norm().max(1e-12);
        a = next;
        if change < IRLS_REL_TOL {
            break;
        }
    }
    a
}

fn k_subsets(m: usize, k: usize) -> Vec<Vec<usize>> {
    let mut out = Vec::new();
    let mut cur: Vec<usize> = (0..k).collect();
    if k > m {
        return out;
    }
    loop {
        out.push(cur.clone());
        let mut i = k;
        loop {
            if i == 0 {
                return out;
            }
            i -= 1;
            if cur[i] != i + m - k {
                break;
            }
        }
        cur[i] += 1;
        for t in i + 1..k {
            cur[t] = cur[t - 1] + 1;
        }
    }
}

/// Moves to the best vertex (K zero residuals) of the piecewise-linear objective.
fn lad_polish(gamma: &DMatrix<f64>, b: &DVector<f64>, start: DVector<f64>) -> DVector<f64> {
    let (q, k) = gamma.shape();
    let mut best = start;
    let mut best_f = lad_objective(gamma, b, &best);
    if k == 1 {
        for j in 0..q {
            let g = gamma[(j, 0)];
            if g == 0.0 {
                continue;
            }
            let cand = DVector::from_element(1, b[j] / g);
            let f = lad_objective(gamma, b, &cand);
            if f < best_f {
                best = cand;
                best_f = f;
            }
        }
        return best;
    }
    let pool = (k + 4).min(q);
    for _ in 0..50 {
        let r = b - gamma * &best;
        let mut order: Vec<usize> = (0..q).collect();
        order.sort_by(|&x, &y| r[x].abs().partial_cmp(&r[y].abs()).unwrap_or(std::cmp::Ordering::Equal).then(x.cmp(&y)));
        let rows = &order[..pool];
        let mut improved = false;
        for subset in k_subsets(pool, k) {
            let idx: Vec<usize> = subset.iter().map(|&t| rows[t]).collect();
            let m = DMatrix::from_fn(k, k, |r, c| gamma[(idx[r], c)]);
            let rhs = DVector::from_iterator(k, idx.iter().map(|&j| b[j]));
            let Some(cand) = m.lu().solve(&rhs) else { continue };
            if !cand.iter().all(|v| v.is_finite()) {
                continue;
            }
            let f = lad_objective(gamma, b, &cand);
            if f < best_f - 1e-15 * best_f.abs().max(1.0) {
                best = cand;
                best_f = f;
                improved = true;
            }
        }
        if !improved {
            break;
        }
    }
    best
}

/// One-sided directional derivative of Σ_j |b_j − aᵀγ_j| at `a` along `d`.
fn lad_directional(gamma: &DMatrix<f64>, r: &DVector<f64>, zero: &[bool], d: &DVector<f64>) -> f64 {
    let mut s = 0.0;
    for j in 0..gamma.nrows() {
        let gd = gamma.row(j).dot(&d.transpose());
        if zero[j] {
            s += gd.abs();
        } else {
            s -= r[j].signum() * gd;
        }
    }
    s
}

/// True when the objective is flat along some tested direction at `a`.
fn lad_is_flat(gamma: &DMatrix<f64>, b: &DVector<f64>, a: &DVector<f64>) -> bool {
    let (q, k) = gamma.shape();
    let r = b - gamma * a;
    let scale = b.amax().max(gamma.amax()).max(1.0);
    let zero: Vec<bool> = r.iter().map(|v| v.abs() <= 1e-9 * scale).collect();
    let mut dirs = Vec::new();
    for c in 0..k {
        let mut e = DVector::zeros(k);
        e[c] = 1.0;
        dirs.push(e);
    }
    if k >= 2 {
        let mut tight: Vec<usize> = (0..q).filter(|&j| zero[j]).collect();
        tight.truncate(k + 6);
        for subset in k_subsets(tight.len(), k - 1) {
            let m = DMatrix::from_fn(k - 1, k, |r, c| gamma[(tight[subset[r]], c)]);
            let (vals, vecs) = sym_eigen_desc(&(m.transpose() * &m));
            // rank k − 1: the last eigenvector spans the null space
            if vals[k - 2] > 1e-10 * vals[0].max(1e-300) {
                dirs.push(vecs.column(k - 1).clone_owned());
            }
        }
    }
    let tol = 1e-10 * scale * q as f64;
    dirs.iter().any(|d| {
        let n = d.norm();
        if n == 0.0 {
            return false;
        }
        let d = d / n;
        lad_directional(gamma, &r, &zero, &d) <= tol || lad_directional(gamma, &r, &zero, &(-&d)) <= tol
    })
}

/// Column-wise least-absolute-deviation fit of `b_c` (q×p*) on `gamma` (q×K).
pub fn solve_l1_rotation(gamma: &DMatrix<f64>, b_c: &DMatrix<f64>) -> Result<L1Rotation> {
    let (q, k) = gamma.shape();
    if b_c.nrows() != q {
        return Err(Error::Dimension(format!("Γ has {q} rows, B has {}", b_c.nrows())));
    }
    if q < k {
        return Err(Error::Dimension(format!("need q ≥ K, got q = {q}, K = {k}")));
    }
    let ps = b_c.ncols();
    let mut a_c = DMatrix::zeros(k, ps);
    let mut objectives = Vec::with_capacity(ps);
    let mut nonunique = Vec::new();
    let mut warnings = Vec::new();
    for s in 0..ps {
        let b = b_c.column(s).clone_owned();
        if k == 0 {
            objectives.push(b.iter().map(|v| v.abs()).sum());
            continue;
        }
        let a = if b.iter().all(|v| *v == 0.0) {
            DVector::zeros(k)
        } else {
            let start = lad_irls(gamma, &b);
            let zero = DVector::zeros(k);
            let start = if lad_objective(gamma, &b, &zero) < lad_objective(gamma, &b, &start) { zero } else { start };
            lad_polish(gamma, &b, start)
        };
        if lad_is_flat(gamma, &b, &a) {
            nonunique.push(s);
            warnings.push(format!("ℓ1 rotation for covariate {} has a non-unique minimizer", s + 1));
        }
        objectives.push(lad_objective(gamma, &b, &a));
        a_c.set_column(s, &a);
    }
    Ok(L1Rotation { a_c, objectives, nonunique, warnings })
}

/// Scaling G with `n⁻¹(UG)ᵀ(UG) = q⁻¹(ΓG⁻ᵀ)ᵀ(ΓG⁻ᵀ) = diag(ϱ^{1/2})`.
///
/// `S = (q⁻¹ΓᵀΓ)^{1/2}`, `n⁻¹·S·UᵀU·S = VϱVᵀ` (descending, each eigenvector's
/// largest entry positive), `G = S·V·ϱ^{−1/4}`.
pub fn compute_scaling(gamma: &DMatrix<f64>, u_plus: &DMatrix<f64>) -> Result<(DMatrix<f64>, DVector<f64>, f64)> {
    let (q, k) = gamma.shape();
    let n = u_plus.nrows();
    if u_plus.ncols() != k {
        return Err(Error::Dimension(format!("Γ has {k} columns, U has {}", u_plus.ncols())));
    }
    if k == 0 {
        return Ok((DMatrix::zeros(0, 0), DVector::zeros(0), f64::INFINITY));
    }
    let gram_g = gamma.transpose() * gamma / q as f64;
    let s = sym_sqrt(&gram_g)?;
    let (gv, _) = sym_eigen_desc(&gram_g);
    if gv[k - 1] <= 1e-14 * gv[0].max(1e-300) {
        return Err(Error::RankDeficient("loadings are not of full column rank".into()));
    }
    let m = &s * (u_plus.transpose() * u_plus) * &s / n as f64;
    let (vals, vecs) = sym_eigen_desc(&m);
    if vals[k - 1] <= 1e-14 * vals[0].max(1e-300) || vals[k - 1] <= 0.0 {
        return Err(Error::RankDeficient("factor second moment is singular".into()));
    }
    let gap = (1..k).map(|i| vals[i - 1] - vals[i]).fold(f64::INFINITY, f64::min);
    let d = DMatrix::from_diagonal(&vals.map(|v| v.powf(-0.25)));
    Ok((&s * &vecs * d, vals, gap))
}

fn xtx_inverse(x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let xtx = x.transpose() * x;
    xtx.cholesky()
        .map(|c| c.inverse())
        .ok_or_else(|| Error::RankDeficient("design matrix XᵀX is singular".into()))
}

struct Orthogonalized {
    params: ParameterSet,
    a_x: DMatrix<f64>,
    g: DMatrix<f64>,
    eigen_gap: f64,
}

fn orthogonalize_parts(params: &ParameterSet, x: &DMatrix<f64>) -> Result<Orthogonalized> {
    let a_x = params.u.transpose() * x * xtx_inverse(x)?;
    let u_res = &params.u - x * a_x.transpose();
    let (g, _, gap) = compute_scaling(&params.gamma, &u_res)?;
    let out = params.transform(x, &(-&a_x), &g)?;
    Ok(Orthogonalized { params: out, a_x, g, eigen_gap: gap })
}

/// φ̂⁰: factors residualized on X, then scaled to matched diagonal second moments.
pub fn orthogonalize(raw: &RawFit, x: &DMatrix<f64>) -> Result<ParameterSet> {
    Ok(orthogonalize_parts(&raw.params, x)?.params)
}

/// (A, G) taking `params` to the canonical point, plus ℓ1 diagnostics.
fn canonical_transform(params: &ParameterSet, x: &DMatrix<f64>) -> Result<(TransformPair, L1Rotation)> {
    let (n, p) = x.shape();
    let k = params.k();
    let b_c = params.b.columns(1, p - 1).clone_owned();
    let l1 = solve_l1_rotation(&params.gamma, &b_c)?;
    let x_c = x.columns(1, p - 1);
    let shifted = &params.u + x_c * l1.a_c.transpose();
    let mut a = DMatrix::zeros(k, p);
    for c in 0..k {
        a[(c, 0)] = -shifted.column(c).sum() / n as f64;
    }
    a.columns_mut(1, p - 1).copy_from(&l1.a_c);
    let u_plus = &params.u + x * a.transpose();
    let (g, vals, gap) = compute_scaling(&params.gamma, &u_plus)?;
    Ok((
        TransformPair {
            a,
            g,
            eigenvalues: vals.iter().copied().collect(),
            eigen_gap: gap.is_finite().then_some(gap),
        },
        l1,
    ))
}

pub fn condition_report(
    raw: &ParameterSet,
    canonical: &ParameterSet,
    x: &DMatrix<f64>,
    eigen_gap: Option<f64>,
    l1_nonunique: Vec<usize>,
) -> ConditionReport {
    let (n, q, k) = (canonical.u.nrows() as f64, canonical.gamma.nrows() as f64, canonical.k());
    let mut centering = 0.0f64;
    for c in 0..k {
        centering = centering.max((canonical.u.column(c).sum() / n).abs());
    }
    let mu = canonical.u.transpose() * &canonical.u / n;
    let mg = canonical.gamma.transpose() * &canonical.gamma / q;
    let mut off = 0.0f64;
    let mut mismatch = 0.0f64;
    let scale_u = (0..k).map(|c| mu[(c, c)].abs()).fold(0.0, f64::max).max(1e-300);
    let scale_g = (0..k).map(|c| mg[(c, c)].abs()).fold(0.0, f64::max).max(1e-300);
    for a in 0..k {
        for b in 0..k {
            if a != b {
                off = off.max(mu[(a, b)].abs() / scale_u).max(mg[(a, b)].abs() / scale_g);
            }
        }
        mismatch = mismatch.max((mu[(a, a)] - mg[(a, a)]).abs() / mu[(a, a)].abs().max(mg[(a, a)].abs()).max(1e-300));
    }
    let gap = max_abs(&(predictor_matrix(raw, x) - predictor_matrix(canonical, x)));
    ConditionReport {
        centering_residual: centering,
        off_diagonal: off,
        diagonal_mismatch: mismatch,
        predictor_gap: gap,
        eigen_gap,
        l1_nonunique,
    }
}

/// Maps a raw fit to its canonical representative.
pub fn finalize(raw: &RawFit, data: &Dataset) -> Result<CanonicalFit> {
    raw.params.check_against(data)?;
    let x = data.x();
    let mut warnings = Vec::new();
    if !raw.converged {
        warnings.push(format!("estimation stopped after {} iterations without converging", raw.n_iter));
    }
    let (transform, l1) = canonical_transform(&raw.params, x)?;
    warnings.extend(l1.warnings.iter().cloned());
    if let Some(gap) = transform.eigen_gap.filter(|g| *g < EIGEN_GAP_TOL) {
        warnings.push(format!("degenerate scaling: eigenvalue gap {gap:.3e}"));
    }
    let canonical = raw.params.transform(x, &transform.a, &transform.g)?;

    let orth = orthogonalize_parts(&raw.params, x)?;
    if orth.eigen_gap < EIGEN_GAP_TOL {
        warnings.push(format!("degenerate orthogonal scaling: eigenvalue gap {:.3e}", orth.eigen_gap));
    }
    // (A⁰, G⁰) composed so that ortho → canonical exactly
    let g_orth_inv = inverse(&orth.g).ok_or_else(|| Error::RankDeficient("orthogonalizing scaling is singular".into()))?;
    let a0 = orth.g.transpose() * (&orth.a_x + &transform.a);
    let g0 = &g_orth_inv * &transform.g;
    let ortho_route_gap = match canonical_transform(&orth.params, x) {
        Ok((t0, _)) => Some(max_abs(&(&orth.params.b - &orth.params.gamma * &t0.a - &canonical.b))),
        Err(_) => None,
    };

    let report = condition_report(&raw.params, &canonical, x, transform.eigen_gap, l1.nonunique.clone());
    Ok(CanonicalFit {
        raw: raw.clone(),
        transform,
        gamma_star: canonical.gamma,
        u_star: canonical.u,
        b_star: canonical.b,
        ortho: orth.params,
        a0,
        g0,
        ortho_route_gap,
        condition_report: report,
        warnings,
        refine_rounds_done: 0,
    })
}

/// Joint MLE, canonicalization and `refine_rounds` rounds of re-maximization
/// from the canonical point.
pub fn fit_canonical(data: &Dataset, config: &FitConfig) -> Result<CanonicalFit> {
    let raw = fit_joint_mle(data, config)?;
    let mut canon = finalize(&raw, data)?;
    for round in 0..config.refine_rounds {
        let start = canon.params();
        if !in_box(&start, data.x(), config.box_d) {
            canon.warnings.push(format!(
                "refinement round {} skipped: canonical point lies outside the box",
                round + 1
            ));
            break;
        }
        let mut refit = fit_from(data, start, config)?;
        refit.start_index = raw.start_index;
        refit.start_objectives = raw.start_objectives.clone();
        let warnings = std::mem::take(&mut canon.warnings);
        canon = finalize(&refit, data)?;
        for w in warnings {
            if !canon.warnings.contains(&w) && !w.starts_with("estimation stopped") {
                canon.warnings.push(w);
            }
        }
        canon.refine_rounds_done = round + 1;
    }
    Ok(canon)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Condition1Verdict {
    /// Exact verdict (K = 1).
    Holds,
    /// No violating direction among the sampled ones (K ≥ 2).
    HoldsSampled,
    Fails,
    /// Some direction sits on the boundary of the inequality.
    Undetermined,
}

impl Condition1Verdict {
    pub fn label(self) -> &'static str {
        match self {
            Condition1Verdict::Holds => "holds",
            Condition1Verdict::HoldsSampled => "holds (sampled)",
            Condition1Verdict::Fails => "fails",
            Condition1Verdict::Undetermined => "undetermined",
        }
    }
}

/// Checks the minimal-ℓ1 condition for every covariate column of `b`
/// (q×p, column 0 = intercepts, which is skipped):
/// `Σ_{β_js=0} |vᵀγ_j| > Σ_{β_js≠0} sign(β_js)·vᵀγ_j` for all unit v.
pub fn check_condition1_minimal_l1(
    gamma: &DMatrix<f64>,
    b: &DMatrix<f64>,
    n_directions: usize,
    seed: u64,
) -> Result<Vec<Condition1Verdict>> {
    let (q, k) = gamma.shape();
    if b.nrows() != q {
        return Err(Error::Dimension(format!("Γ has {q} rows, B has {}", b.nrows())));
    }
    if n_directions < 2 * k {
        return Err(Error::Config(format!("need at least {} directions, got {n_directions}", 2 * k)));
    }
    if b.ncols() == 0 {
        return Ok(Vec::new());
    }
    let mut dirs: Vec<DVector<f64>> = Vec::new();
    for c in 0..k {
        let mut e = DVector::zeros(k);
        e[c] = 1.0;
        dirs.push(e.clone());
        dirs.push(-e);
    }
    if k >= 2 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        while dirs.len() < 2 * k + n_directions {
            let v = DVector::from_fn(k, |_, _| StandardNormal.sample(&mut rng));
            let nv: f64 = v.norm();
            if nv > 1e-12 {
                dirs.push(v / nv);
            }
        }
    }
    let scale = gamma.amax().max(1e-300) * q as f64;
    let mut out = Vec::with_capacity(b.ncols() - 1);
    for s in 1..b.ncols() {
        let mut verdict = if k == 1 { Condition1Verdict::Holds } else { Condition1Verdict::HoldsSampled };
        for v in &dirs {
            let mut lhs = 0.0;
            let mut rhs = 0.0;
            for j in 0..q {
                let gv = gamma.row(j).transpose().dot(v);
                let beta = b[(j, s)];
                if beta == 0.0 {
                    lhs += gv.abs();
                } else {
                    rhs += beta.signum() * gv;
                }
            }
            let margin = lhs - rhs;
            if margin < -1e-12 * scale {
                verdict = Condition1Verdict::Fails;
                break;
            }
            if margin <= 1e-12 * scale {
                verdict = Condition1Verdict::Undetermined;
            }
        }
        out.push(verdict);
    }
    Ok(out)
}

/// Column reordering with sign flips: column k of `m·P` is `signs[k]·m[:, perm[k]]`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SignedPermutation {
    pub perm: Vec<usize>,
    pub signs: Vec<i8>,
}

impl SignedPermutation {
    pub fn identity(k: usize) -> Self {
        Self { perm: (0..k).collect(), signs: vec![1; k] }
    }

    pub fn matrix(&self) -> DMatrix<f64> {
        let k = self.perm.len();
        let mut p = DMatrix::zeros(k, k);
        for (dst, &src) in self.perm.iter().enumerate() {
            p[(src, dst)] = self.signs[dst] as f64;
        }
        p
    }

    pub fn apply(&self, m: &DMatrix<f64>) -> DMatrix<f64> {
        let mut out = DMatrix::zeros(m.nrows(), self.perm.len());
        for (dst, &src) in self.perm.iter().enumerate() {
            out.set_column(dst, &(m.column(src) * self.signs[dst] as f64));
        }
        out
    }
}

fn column_correlation(a: &DMatrix<f64>, b: &DMatrix<f64>, what: &str) -> Result<DMatrix<f64>> {
    let n = a.nrows() as f64;
    let center = |m: &DMatrix<f64>, name: &str| -> Result<DMatrix<f64>> {
        let mut c = m.clone();
        for k in 0..m.ncols() {
            let mean = m.column(k).sum() / n;
            c.column_mut(k).add_scalar_mut(-mean);
            let sd = c.column(k).norm();
            if sd <= 1e-12 * m.column(k).amax().max(1e-300) || sd == 0.0 {
                return Err(Error::ZeroVariance(format!("{name} column {k} of {what}")));
            }
            c.column_mut(k).unscale_mut(sd);
        }
        Ok(c)
    };
    let ca = center(a, "estimate")?;
    let cb = center(b, "reference")?;
    Ok(ca.transpose() * cb)
}

/// Signed permutation P making `est·P` best match `reference`: greedy matching
/// on absolute column correlation, signs making each correlation positive.
pub fn align_to_reference(est: &DMatrix<f64>, reference: &DMatrix<f64>) -> Result<SignedPermutation> {
    if est.shape() != reference.shape() {
        return Err(Error::Dimension(format!("{:?} vs {:?}", est.shape(), reference.shape())));
    }
    let k = est.ncols();
    if k > 8 {
        return Err(Error::Config(format!("alignment supports K ≤ 8, got {k}")));
    }
    if k == 0 {
        return Ok(SignedPermutation::identity(0));
    }
    let corr = column_correlation(est, reference, "alignment")?;
    let mut perm = vec![usize::MAX; k];
    let mut signs = vec![1i8; k];
    let mut used_est = vec![false; k];
    for _ in 0..k {
        let mut best = (0, 0, -1.0);
        for a in 0..k {
            if used_est[a] {
                continue;
            }
            for r in 0..k {
                if perm[r] != usize::MAX {
                    continue;
                }
                let v = corr[(a, r)].abs();
                if v > best.2 {
                    best = (a, r, v);
                }
            }
        }
        let (a, r, _) = best;
        used_est[a] = true;
        perm[r] = a;
        signs[r] = if corr[(a, r)] < 0.0 { -1 } else { 1 };
    }
    Ok(SignedPermutation { perm, signs })
}

/// Runs the ℓ1 rotation for many coefficient matrices at once.
pub fn solve_l1_rotation_batch(
    exec: Execution,
    gamma: &DMatrix<f64>,
    columns: &[DMatrix<f64>],
) -> Vec<Result<L1Rotation>> {
    map_range(exec, columns.len(), |i| solve_l1_rotation(gamma, &columns[i]))
}
