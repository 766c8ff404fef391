//! Joint maximum likelihood by alternating block-Newton updates.
//!
//! Each outer iteration updates every item block (γ_j, β_j) with U fixed,
//! then every subject block U_i with (Γ, B) fixed. Every block update is a
//! damped Newton iteration with step shrinking that only accepts points that
//! do not increase the block objective and that stay inside the box
//! `‖φ‖_max ≤ D`, `max |w_ij| ≤ D`. An optional over-relaxed step along the
//! last outer displacement is kept only when it lowers the objective inside
//! the box, so the objective trace stays monotone.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::spd_solve;
use crate::model::{cell_derivs, cell_value, predictor_matrix, Dataset, FamilyKind, LinkFamily, ParameterSet};
use crate::par::{map_range, mix_seed, Execution};
use crate::special::normal_quantile;

const MAX_SHRINKS: usize = 40;
const DECREMENT_TOL: f64 = 1e-13;
const ETA_START: f64 = 2.0;
const ETA_GROWTH: f64 = 1.5;
const ETA_MAX: f64 = 64.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FitConfig {
    /// Number of latent factors.
    pub k: usize,
    /// Bound D on every parameter and every linear predictor.
    pub box_d: f64,
    /// Threshold on ‖ΔM‖_F / √(nq) between outer iterations.
    pub tol: f64,
    pub max_iter: usize,
    pub n_starts: usize,
    pub seed: u64,
    /// Newton iterations per block and half-step.
    pub newton_max_steps: usize,
    /// Step shrink factor used when a Newton step is rejected.
    pub newton_damping: f64,
    /// Re-maximization rounds from the canonical point.
    pub refine_rounds: usize,
    pub execution: Execution,
    /// Closed-form update of the (pooled) gaussian variance after every outer iteration.
    pub update_sigma2: bool,
    /// Over-relaxed step along the last outer-iteration displacement, kept
    /// only when it lowers −L and stays in the box.
    pub extrapolate: bool,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self {
            k: 2,
            box_d: 10.0,
            tol: 1e-5,
            max_iter: 500,
            n_starts: 5,
            seed: 0,
            newton_max_steps: 5,
            newton_damping: 0.5,
            refine_rounds: 1,
            execution: Execution::Parallel,
            update_sigma2: false,
            extrapolate: true,
        }
    }
}

impl FitConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.box_d >= 1.0 && self.box_d.is_finite()) {
            return Err(Error::Config(format!("box_d must be ≥ 1, got {}", self.box_d)));
        }
        if !(self.tol > 0.0) {
            return Err(Error::Config(format!("tol must be positive, got {}", self.tol)));
        }
        if self.max_iter == 0 || self.n_starts == 0 || self.newton_max_steps == 0 {
            return Err(Error::Config("max_iter, n_starts and newton_max_steps must be ≥ 1".into()));
        }
        if !(self.newton_damping > 0.0 && self.newton_damping < 1.0) {
            return Err(Error::Config(format!(
                "newton_damping must lie in (0, 1), got {}",
                self.newton_damping
            )));
        }
        Ok(())
    }
}

/// Unconstrained joint MLE.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RawFit {
    pub params: ParameterSet,
    /// Attained −L (mean over observed cells).
    pub objective: f64,
    pub n_iter: usize,
    pub converged: bool,
    pub start_index: usize,
    /// −L at the starting point and after every half-step.
    pub objective_trace: Vec<f64>,
    /// Final objective of every start; `None` for failed starts.
    pub start_objectives: Vec<Option<f64>>,
    /// Gaussian variances after the optional σ² update, else the input families.
    pub families: Vec<LinkFamily>,
}

/// ‖ΔM‖_F / √(nq) with M = UΓᵀ + XBᵀ.
pub fn convergence_metric(prev: &ParameterSet, curr: &ParameterSet, x: &DMatrix<f64>) -> f64 {
    let d = predictor_matrix(curr, x) - predictor_matrix(prev, x);
    let cells = (d.nrows() * d.ncols()).max(1) as f64;
    d.norm() / cells.sqrt()
}

/// Observed cells of one block: design rows, fixed offsets, responses and
/// families. `hidden` holds the design and offsets of the unobserved cells,
/// which only enter the predictor bound.
struct Block<'a> {
    z: DMatrix<f64>,
    offset: DVector<f64>,
    y: Vec<f64>,
    fam: Vec<&'a LinkFamily>,
    hidden: Option<(DMatrix<f64>, DVector<f64>)>,
}

impl Block<'_> {
    fn predictor(&self, theta: &DVector<f64>) -> DVector<f64> {
        &self.z * theta + &self.offset
    }

    fn hidden_max(&self, theta: &DVector<f64>) -> f64 {
        match &self.hidden {
            Some((z, o)) if z.nrows() > 0 => (z * theta + o).amax(),
            _ => 0.0,
        }
    }

    fn feasible(&self, w: &DVector<f64>, theta: &DVector<f64>, d: f64) -> bool {
        w.amax() <= d && self.hidden_max(theta) <= d
    }

    fn objective_at(&self, w: &DVector<f64>) -> f64 {
        let mut s = 0.0;
        for r in 0..self.y.len() {
            s -= cell_value(self.fam[r], self.y[r], w[r]);
        }
        s
    }

    /// Damped Newton on the block objective −Σ l(w) inside the box.
    fn newton(&self, theta0: &DVector<f64>, cfg: &FitConfig) -> Result<DVector<f64>> {
        let d = cfg.box_d;
        let dim = theta0.len();
        let mut theta = theta0.map(|v| v.clamp(-d, d));
        if dim == 0 || self.y.is_empty() {
            return Ok(theta);
        }
        let mut w = self.predictor(&theta);
        if !self.feasible(&w, &theta, d) {
            // the clamped start left the box; keep the incoming point
            theta = theta0.clone();
            w = self.predictor(&theta);
        }
        let mut f = self.objective_at(&w);
        if !f.is_finite() {
            return Err(Error::Numerical("non-finite block objective".into()));
        }
        for _ in 0..cfg.newton_max_steps {
            let rows = self.y.len();
            let mut d1 = DVector::zeros(rows);
            let mut zw = self.z.clone();
            for r in 0..rows {
                let (g, h) = cell_derivs(self.fam[r], self.y[r], w[r]);
                d1[r] = g;
                zw.row_mut(r).scale_mut(-h);
            }
            let grad = self.z.tr_mul(&d1);
            let hess = self.z.tr_mul(&zw);
            let Some(step) = spd_solve(&hess, &grad) else {
                break;
            };
            if !step.iter().all(|v| v.is_finite()) || step.amax() == 0.0 {
                break;
            }
            // predicted Newton decrease is already at rounding level
            if 0.5 * grad.dot(&step) <= DECREMENT_TOL * f.abs().max(1.0) {
                break;
            }
            let mut t = 1.0;
            let mut accepted = None;
            for _ in 0..MAX_SHRINKS {
                let cand = (&theta + &step * t).map(|v| v.clamp(-d, d));
                let wc = self.predictor(&cand);
                if self.feasible(&wc, &cand, d) {
                    let fc = self.objective_at(&wc);
                    if fc <= f {
                        accepted = Some((cand, wc, fc));
                        break;
                    }
                }
                t *= cfg.newton_damping;
            }
            let Some((cand, wc, fc)) = accepted else {
                break;
            };
            let moved = (&cand - &theta).amax();
            let gain = f - fc;
            theta = cand;
            w = wc;
            f = fc;
            if moved < 1e-12 || gain <= 1e-14 * f.abs().max(1.0) {
                break;
            }
        }
        Ok(theta)
    }
}

fn item_block<'a>(u: &DMatrix<f64>, data: &'a Dataset, j: usize) -> Block<'a> {
    let obs = data.item_observed(j);
    let (k, p) = (u.ncols(), data.p());
    let z = DMatrix::from_fn(obs.len(), k + p, |r, c| {
        let i = obs[r];
        if c < k {
            u[(i, c)]
        } else {
            data.x()[(i, c - k)]
        }
    });
    let hidden = (obs.len() < data.n()).then(|| {
        let rows: Vec<usize> = (0..data.n()).filter(|&i| !data.mask()[(i, j)]).collect();
        let zh = DMatrix::from_fn(rows.len(), k + p, |r, c| {
            let i = rows[r];
            if c < k {
                u[(i, c)]
            } else {
                data.x()[(i, c - k)]
            }
        });
        (zh, DVector::zeros(rows.len()))
    });
    Block {
        z,
        offset: DVector::zeros(obs.len()),
        y: obs.iter().map(|&i| data.y()[(i, j)]).collect(),
        fam: vec![&data.families()[j]; obs.len()],
        hidden,
    }
}

fn subject_block<'a>(gamma: &DMatrix<f64>, b: &DMatrix<f64>, data: &'a Dataset, i: usize) -> Block<'a> {
    let obs = data.subject_observed(i);
    let z = DMatrix::from_fn(obs.len(), gamma.ncols(), |r, c| gamma[(obs[r], c)]);
    let xi = data.x().row(i);
    let offset = DVector::from_iterator(obs.len(), obs.iter().map(|&j| b.row(j).dot(&xi)));
    let hidden = (obs.len() < data.q()).then(|| {
        let cols: Vec<usize> = (0..data.q()).filter(|&j| !data.mask()[(i, j)]).collect();
        let zh = DMatrix::from_fn(cols.len(), gamma.ncols(), |r, c| gamma[(cols[r], c)]);
        let oh = DVector::from_iterator(cols.len(), cols.iter().map(|&j| b.row(j).dot(&xi)));
        (zh, oh)
    });
    Block {
        z,
        offset,
        y: obs.iter().map(|&j| data.y()[(i, j)]).collect(),
        fam: obs.iter().map(|&j| &data.families()[j]).collect(),
        hidden,
    }
}

/// Item half-step: maximizes every column's observed log-likelihood over
/// (γ_j, β_j) with U fixed. Returns the updated (Γ, B).
pub fn update_item_blocks(
    u: &DMatrix<f64>,
    data: &Dataset,
    current: &ParameterSet,
    config: &FitConfig,
) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    let (q, k, p) = (data.q(), current.k(), data.p());
    if u.shape() != (data.n(), k) {
        return Err(Error::Dimension(format!("U is {:?}, expected {:?}", u.shape(), (data.n(), k))));
    }
    current.check_against(data)?;
    let rows = map_range(config.execution, q, |j| {
        let block = item_block(u, data, j);
        let theta0 = DVector::from_iterator(
            k + p,
            current.gamma.row(j).iter().chain(current.b.row(j).iter()).copied(),
        );
        block.newton(&theta0, config)
    });
    let mut gamma = DMatrix::zeros(q, k);
    let mut b = DMatrix::zeros(q, p);
    for (j, row) in rows.into_iter().enumerate() {
        let theta = row?;
        for c in 0..k {
            gamma[(j, c)] = theta[c];
        }
        for s in 0..p {
            b[(j, s)] = theta[k + s];
        }
    }
    Ok((gamma, b))
}

/// Subject half-step: maximizes every row's observed log-likelihood over U_i
/// with (Γ, B) fixed.
pub fn update_subject_blocks(
    gamma: &DMatrix<f64>,
    b: &DMatrix<f64>,
    data: &Dataset,
    current: &ParameterSet,
    config: &FitConfig,
) -> Result<DMatrix<f64>> {
    let (n, k) = (data.n(), current.k());
    if gamma.shape() != (data.q(), k) || b.shape() != (data.q(), data.p()) {
        return Err(Error::Dimension("loadings or coefficients do not match the data".into()));
    }
    current.check_against(data)?;
    let rows = map_range(config.execution, n, |i| {
        let block = subject_block(gamma, b, data, i);
        let theta0 = current.u.row(i).transpose();
        block.newton(&theta0, config)
    });
    let mut u = DMatrix::zeros(n, k);
    for (i, row) in rows.into_iter().enumerate() {
        let theta = row?;
        for c in 0..k {
            u[(i, c)] = theta[c];
        }
    }
    Ok(u)
}

/// −L: negative mean log-likelihood over observed cells, summed column by column.
pub(crate) fn objective(params: &ParameterSet, data: &Dataset, exec: Execution) -> f64 {
    let cols = map_range(exec, data.q(), |j| {
        let fam = &data.families()[j];
        let mut s = 0.0;
        for &i in data.item_observed(j) {
            let w = params.gamma.row(j).dot(&params.u.row(i)) + params.b.row(j).dot(&data.x().row(i));
            s -= cell_value(fam, data.y()[(i, j)], w);
        }
        s
    });
    cols.iter().sum::<f64>() / data.n_observed() as f64
}

fn glm_intercept(fam: &LinkFamily, mean: f64) -> f64 {
    const EPS: f64 = 1e-3;
    match fam.kind {
        FamilyKind::Logistic => {
            let m = mean.clamp(EPS, 1.0 - EPS);
            (m / (1.0 - m)).ln()
        }
        FamilyKind::Probit => normal_quantile(mean.clamp(EPS, 1.0 - EPS)),
        FamilyKind::Gaussian => mean,
        FamilyKind::Poisson => mean.max(EPS).ln(),
    }
}

/// Random start: Γ, U uniform on [−a, a] with a = min(1, D/(2K)), intercepts
/// from per-item GLM fits clamped so that every |w_ij| ≤ D, slopes zero.
pub(crate) fn initial_point(data: &Dataset, config: &FitConfig, start: usize) -> ParameterSet {
    let k = config.k;
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(config.seed, start as u64));
    let a = if k == 0 { 0.0 } else { (config.box_d / (2.0 * k as f64)).min(1.0) };
    let mut params = ParameterSet::zeros(data.n(), data.q(), data.p(), k);
    if k > 0 {
        params.gamma = DMatrix::from_fn(data.q(), k, |_, _| rng.random_range(-a..=a));
        params.u = DMatrix::from_fn(data.n(), k, |_, _| rng.random_range(-a..=a));
    }
    let bound = config.box_d - k as f64 * a * a;
    for j in 0..data.q() {
        let obs = data.item_observed(j);
        let mean = obs.iter().map(|&i| data.y()[(i, j)]).sum::<f64>() / obs.len().max(1) as f64;
        params.b[(j, 0)] = glm_intercept(&data.families()[j], mean).clamp(-bound, bound);
    }
    params
}

/// True when every parameter and every linear predictor lies within the box.
pub(crate) fn in_box(params: &ParameterSet, x: &DMatrix<f64>, d: f64) -> bool {
    params.max_abs() <= d && predictor_matrix(params, x).amax() <= d
}

/// Pooled residual variance over all observed gaussian cells.
fn sigma2_update(params: &ParameterSet, data: &Dataset) -> Vec<LinkFamily> {
    let mut rss = 0.0;
    let mut count = 0usize;
    for j in 0..data.q() {
        if data.families()[j].kind != FamilyKind::Gaussian {
            continue;
        }
        for &i in data.item_observed(j) {
            let w = params.gamma.row(j).dot(&params.u.row(i)) + params.b.row(j).dot(&data.x().row(i));
            rss += (data.y()[(i, j)] - w).powi(2);
            count += 1;
        }
    }
    let mut fams = data.families().to_vec();
    if count > 0 {
        let sigma2 = (rss / count as f64).max(1e-8);
        for fam in fams.iter_mut().filter(|f| f.kind == FamilyKind::Gaussian) {
            fam.sigma2 = sigma2;
        }
    }
    fams
}

/// prev + η·(curr − prev) in every parameter block.
fn extrapolated(prev: &ParameterSet, curr: &ParameterSet, eta: f64) -> ParameterSet {
    let step = |a: &DMatrix<f64>, b: &DMatrix<f64>| a + (b - a) * eta;
    ParameterSet { gamma: step(&prev.gamma, &curr.gamma), u: step(&prev.u, &curr.u), b: step(&prev.b, &curr.b) }
}

/// Alternating maximization from a given point (which must lie in the box).
pub fn fit_from(data: &Dataset, start: ParameterSet, config: &FitConfig) -> Result<RawFit> {
    config.validate()?;
    start.check_against(data)?;
    if !in_box(&start, data.x(), config.box_d) {
        return Err(Error::Numerical("starting point violates the box constraint".into()));
    }
    let mut work = data.clone();
    let mut params = start;
    let mut f = objective(&params, &work, config.execution);
    if !f.is_finite() {
        return Err(Error::Numerical("non-finite objective at the starting point".into()));
    }
    let mut trace = vec![f];
    let mut converged = false;
    let mut n_iter = 0;
    let mut eta = ETA_START;
    for _ in 0..config.max_iter {
        n_iter += 1;
        let prev = params.clone();
        let (gamma, b) = update_item_blocks(&params.u, &work, &params, config)?;
        params.gamma = gamma;
        params.b = b;
        f = objective(&params, &work, config.execution);
        trace.push(f);
        let u = update_subject_blocks(&params.gamma, &params.b, &work, &params, config)?;
        params.u = u;
        f = objective(&params, &work, config.execution);
        trace.push(f);
        if !f.is_finite() {
            return Err(Error::Numerical("objective diverged".into()));
        }
        if config.extrapolate {
            let trial = extrapolated(&prev, &params, eta);
            let ft = if in_box(&trial, work.x(), config.box_d) {
                objective(&trial, &work, config.execution)
            } else {
                f64::INFINITY
            };
            if ft < f {
                params = trial;
                f = ft;
                trace.push(f);
                eta = (eta * ETA_GROWTH).min(ETA_MAX);
            } else {
                eta = ETA_START;
            }
        }
        if config.update_sigma2 {
            work = work.with_families(sigma2_update(&params, &work))?;
            f = objective(&params, &work, config.execution);
        }
        if convergence_metric(&prev, &params, work.x()) < config.tol {
            converged = true;
            break;
        }
    }
    Ok(RawFit {
        params,
        objective: f,
        n_iter,
        converged,
        start_index: 0,
        objective_trace: trace,
        start_objectives: vec![Some(f)],
        families: work.families().to_vec(),
    })
}

/// Best of `n_starts` random starts of the alternating maximization.
pub fn fit_joint_mle(data: &Dataset, config: &FitConfig) -> Result<RawFit> {
    config.validate()?;
    if config.k > data.n().min(data.q()) {
        return Err(Error::Config(format!(
            "K = {} exceeds min(n, q) = {}",
            config.k,
            data.n().min(data.q())
        )));
    }
    let runs = map_range(config.execution, config.n_starts, |s| {
        fit_from(data, initial_point(data, config, s), config)
    });
    let start_objectives: Vec<Option<f64>> = runs
        .iter()
        .map(|r| r.as_ref().ok().map(|f| f.objective))
        .collect();
    let mut best: Option<(usize, RawFit)> = None;
    for (s, run) in runs.into_iter().enumerate() {
        let Ok(fit) = run else { continue };
        let better = match &best {
            None => true,
            Some((_, b)) => fit.objective < b.objective - 1e-12,
        };
        if better {
            best = Some((s, fit));
        }
    }
    let (s, mut fit) = best.ok_or(Error::AllStartsFailed(config.n_starts))?;
    fit.start_index = s;
    fit.start_objectives = start_objectives;
    Ok(fit)
}
