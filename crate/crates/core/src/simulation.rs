//! Data-generating process and replicated power, type-I error and factor
//! coverage studies.

use std::time::Instant;

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::estimation::{FitConfig, RawFit};
use crate::identification::{align_to_reference, finalize, fit_canonical};
use crate::inference::infer;
use crate::model::{predictor_matrix, Dataset, FamilyKind, LinkFamily, ParameterSet};
use crate::par::{map_range, mix_seed, Execution};
use crate::special::{normal_cdf, normal_quantile};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Pattern {
    /// Covariate s affects items 5s−4, …, 5s.
    Sparse,
    /// Covariate s affects the (s mod 5)-th fifth of the items.
    Dense,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SimConfig {
    pub n: usize,
    pub q: usize,
    pub p_star: usize,
    pub k: usize,
    /// Correlation decay τ of the joint (U, X) covariance τ^|a−b|.
    pub tau: f64,
    /// Size of the nonzero covariate effects.
    pub rho: f64,
    pub pattern: Pattern,
    pub family: LinkFamily,
    pub missing_rate: f64,
    pub n_reps: usize,
    pub alpha: f64,
    pub seed: u64,
    pub fit: FitConfig,
    /// Parallelism across replications.
    pub execution: Execution,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            n: 1000,
            q: 100,
            p_star: 5,
            k: 2,
            tau: 0.5,
            rho: 0.5,
            pattern: Pattern::Sparse,
            family: LinkFamily::logistic(),
            missing_rate: 0.0,
            n_reps: 100,
            alpha: 0.05,
            seed: 2024,
            fit: FitConfig::default(),
            execution: Execution::Parallel,
        }
    }
}

/// Names accepted by [`SimConfig::preset`].
pub const PRESETS: &[&str] = &["paper-fig3-desk", "paper-fig3-null", "coverage-desk", "missing-desk", "smoke"];

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n == 0 || self.q == 0 || self.k == 0 || self.n_reps == 0 {
            return Err(Error::Config("n, q, K and n_reps must be positive".into()));
        }
        if self.q % self.k != 0 {
            return Err(Error::Config(format!("q = {} is not divisible by K = {}", self.q, self.k)));
        }
        if !(0.0..1.0).contains(&self.tau) {
            return Err(Error::Config(format!("tau must lie in [0, 1), got {}", self.tau)));
        }
        if !(0.0..1.0).contains(&self.missing_rate) {
            return Err(Error::Config(format!("missing_rate must lie in [0, 1), got {}", self.missing_rate)));
        }
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(Error::Config(format!("alpha must lie in (0, 1), got {}", self.alpha)));
        }
        gen_coeffs(self).map(|_| ())
    }

    /// Built-in study settings; see [`PRESETS`].
    pub fn preset(name: &str) -> Result<Self> {
        let base = Self {
            fit: FitConfig { k: 2, n_starts: 1, ..FitConfig::default() },
            ..Self::default()
        };
        match name {
            "paper-fig3-desk" => Ok(base),
            "paper-fig3-null" => Ok(Self { rho: 0.0, ..base }),
            "coverage-desk" => Ok(Self { n: 2000, tau: 0.0, ..base }),
            "missing-desk" => Ok(Self { n: 2000, missing_rate: 0.5, ..base }),
            "smoke" => Ok(Self { n: 200, q: 20, p_star: 2, n_reps: 4, ..base }),
            _ => Err(Error::Config(format!("unknown preset '{name}' (known: {})", PRESETS.join(", ")))),
        }
    }
}

fn stream(rep_seed: u64, tag: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(mix_seed(rep_seed, tag))
}

/// Design X (n×(p*+1), leading ones) and true factors U (n×K), drawn jointly
/// from N(0, Σ) with Σ_ab = τ^|a−b| over (U, X^c).
pub fn gen_design(cfg: &SimConfig, rep_seed: u64) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    let d = cfg.k + cfg.p_star;
    let sigma = DMatrix::from_fn(d, d, |a, b| cfg.tau.powi((a as i32 - b as i32).abs()));
    let chol = sigma
        .cholesky()
        .ok_or_else(|| Error::Numerical("design covariance is not positive definite".into()))?;
    let l = chol.l();
    let mut rng = stream(rep_seed, 0);
    let z: DMatrix<f64> = DMatrix::from_fn(cfg.n, d, |_, _| StandardNormal.sample(&mut rng));
    let joint = z * l.transpose();
    let u = joint.columns(0, cfg.k).clone_owned();
    let mut x = DMatrix::from_element(cfg.n, cfg.p_star + 1, 1.0);
    x.columns_mut(1, cfg.p_star).copy_from(&joint.columns(cfg.k, cfg.p_star));
    Ok((x, u))
}

/// Block loadings: column k holds Uniform[0.5, 1.5] draws on its q/K rows.
pub fn gen_loadings(cfg: &SimConfig, rep_seed: u64) -> DMatrix<f64> {
    let mut rng = stream(rep_seed, 1);
    let block = cfg.q / cfg.k;
    DMatrix::from_fn(cfg.q, cfg.k, |j, c| {
        let v: f64 = rng.random_range(0.5..=1.5);
        if j / block == c {
            v
        } else {
            0.0
        }
    })
}

/// Coefficients with zero intercepts and ρ on the pattern's support.
pub fn gen_coeffs(cfg: &SimConfig) -> Result<DMatrix<f64>> {
    let (q, ps) = (cfg.q, cfg.p_star);
    let mut b = DMatrix::zeros(q, ps + 1);
    for s in 1..=ps {
        let rows = match cfg.pattern {
            Pattern::Sparse => {
                if q < 5 * ps {
                    return Err(Error::Config(format!("sparse pattern needs q ≥ 5·p* = {}, got {q}", 5 * ps)));
                }
                5 * s - 5..5 * s
            }
            Pattern::Dense => {
                if q % 5 != 0 {
                    return Err(Error::Config(format!("dense pattern needs q divisible by 5, got {q}")));
                }
                let r = s % 5;
                r * q / 5..(r + 1) * q / 5
            }
        };
        for j in rows {
            b[(j, s)] = cfg.rho;
        }
    }
    Ok(b)
}

/// Responses drawn cell by cell at w = UΓᵀ + XBᵀ, with a full mask.
pub fn gen_responses(
    family: &LinkFamily,
    params: &ParameterSet,
    x: &DMatrix<f64>,
    rep_seed: u64,
) -> Result<(DMatrix<f64>, DMatrix<bool>)> {
    let w = predictor_matrix(params, x);
    let mut rng = stream(rep_seed, 2);
    let mut y = DMatrix::zeros(w.nrows(), w.ncols());
    // column-major fill keeps the draw order fixed
    for j in 0..w.ncols() {
        for i in 0..w.nrows() {
            let wij = w[(i, j)];
            y[(i, j)] = match family.kind {
                FamilyKind::Logistic => (rng.random::<f64>() < 1.0 / (1.0 + (-wij).exp())) as u8 as f64,
                FamilyKind::Probit => (rng.random::<f64>() < normal_cdf(wij)) as u8 as f64,
                FamilyKind::Gaussian => {
                    let e: f64 = StandardNormal.sample(&mut rng);
                    wij + family.sigma2.sqrt() * e
                }
                FamilyKind::Poisson => {
                    let lambda = wij.exp();
                    Poisson::new(lambda)
                        .map_err(|e| Error::Numerical(format!("poisson rate {lambda}: {e}")))?
                        .sample(&mut rng)
                }
            };
        }
    }
    Ok((y, DMatrix::from_element(w.nrows(), w.ncols(), true)))
}

/// Drops each observed cell independently with probability `rate`.
pub fn apply_missingness(mask: &DMatrix<bool>, rate: f64, rep_seed: u64) -> DMatrix<bool> {
    if rate <= 0.0 {
        return mask.clone();
    }
    let mut rng = stream(rep_seed, 3);
    let mut out = mask.clone();
    for j in 0..mask.ncols() {
        for i in 0..mask.nrows() {
            let drop = rng.random::<f64>() < rate;
            out[(i, j)] = mask[(i, j)] && !drop;
        }
    }
    out
}

/// One simulated dataset with its generating parameters.
#[derive(Debug, Clone)]
pub struct Replicate {
    pub data: Dataset,
    pub truth: ParameterSet,
}

pub fn gen_replicate(cfg: &SimConfig, rep_seed: u64) -> Result<Replicate> {
    let (x, u) = gen_design(cfg, rep_seed)?;
    let truth = ParameterSet { gamma: gen_loadings(cfg, rep_seed), u, b: gen_coeffs(cfg)? };
    let (y, mask) = gen_responses(&cfg.family, &truth, &x, rep_seed)?;
    let mask = apply_missingness(&mask, cfg.missing_rate, rep_seed);
    let data = Dataset::new(y, mask, x, vec![cfg.family; cfg.q])?;
    Ok(Replicate { data, truth })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RepSummary {
    pub rep: usize,
    pub seed: u64,
    /// Rejection rate over the zero entries of B (None when there are none).
    pub type1: Option<f64>,
    /// Rejection rate over the nonzero entries of B.
    pub power: Option<f64>,
    /// Fraction of (i, k) whose interval covers the canonical true factor.
    pub coverage: Option<f64>,
    pub converged: bool,
    pub iters: usize,
    pub seconds: f64,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudyReport {
    pub config: SimConfig,
    pub type1_mean: Option<f64>,
    pub power_mean: Option<f64>,
    pub coverage_mean: Option<f64>,
    pub coverage_sd: Option<f64>,
    pub failures: usize,
    pub per_rep: Vec<RepSummary>,
    pub wallclock: f64,
}

impl StudyReport {
    /// Copy with every timing field zeroed, for reproducibility comparisons.
    pub fn without_timing(&self) -> Self {
        let mut r = self.clone();
        r.wallclock = 0.0;
        for rep in &mut r.per_rep {
            rep.seconds = 0.0;
        }
        r
    }

    /// Per-replication table with columns rep, type1, power, coverage, converged, iters, seconds.
    pub fn write_csv<W: std::io::Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["rep", "type1", "power", "coverage", "converged", "iters", "seconds"])?;
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        for r in &self.per_rep {
            w.write_record([
                r.rep.to_string(),
                opt(r.type1),
                opt(r.power),
                opt(r.coverage),
                r.converged.to_string(),
                r.iters.to_string(),
                r.seconds.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

fn truth_canonical(rep: &Replicate) -> Result<DMatrix<f64>> {
    let raw = RawFit {
        params: rep.truth.clone(),
        objective: 0.0,
        n_iter: 0,
        converged: true,
        start_index: 0,
        objective_trace: Vec::new(),
        start_objectives: Vec::new(),
        families: rep.data.families().to_vec(),
    };
    Ok(finalize(&raw, &rep.data)?.u_star)
}

fn run_rep(cfg: &SimConfig, rep: usize) -> RepSummary {
    let seed = mix_seed(cfg.seed, rep as u64);
    let start = Instant::now();
    let mut summary = RepSummary {
        rep,
        seed,
        type1: None,
        power: None,
        coverage: None,
        converged: false,
        iters: 0,
        seconds: 0.0,
        error: None,
    };
    let outcome = (|| -> Result<()> {
        let replicate = gen_replicate(cfg, seed)?;
        let data = &replicate.data;
        let fit_cfg = FitConfig { k: cfg.k, seed, ..cfg.fit.clone() };
        let canon = fit_canonical(data, &fit_cfg)?;
        summary.converged = canon.raw.converged;
        summary.iters = canon.raw.n_iter;
        let report = infer(&canon, data, 1.0 - cfg.alpha, fit_cfg.execution)?;

        let (mut null_n, mut null_rej, mut alt_n, mut alt_rej) = (0usize, 0usize, 0usize, 0usize);
        for j in 0..cfg.q {
            for s in 1..=cfg.p_star {
                let pv = report.pvalues[(j, s - 1)];
                if !pv.is_finite() {
                    continue;
                }
                let reject = pv < cfg.alpha;
                if replicate.truth.b[(j, s)] == 0.0 {
                    null_n += 1;
                    null_rej += reject as usize;
                } else {
                    alt_n += 1;
                    alt_rej += reject as usize;
                }
            }
        }
        summary.type1 = (null_n > 0).then(|| null_rej as f64 / null_n as f64);
        summary.power = (alt_n > 0).then(|| alt_rej as f64 / alt_n as f64);

        let target = truth_canonical(&replicate)?;
        let perm = align_to_reference(&canon.u_star, &target)?;
        let crit = normal_quantile(1.0 - cfg.alpha / 2.0);
        let (mut hits, mut total) = (0usize, 0usize);
        for i in 0..cfg.n {
            for (dst, &src) in perm.perm.iter().enumerate() {
                let se = report.u_se[(i, src)];
                if !se.is_finite() {
                    continue;
                }
                let est = perm.signs[dst] as f64 * canon.u_star[(i, src)];
                total += 1;
                hits += ((est - target[(i, dst)]).abs() <= crit * se) as usize;
            }
        }
        summary.coverage = (total > 0).then(|| hits as f64 / total as f64);
        Ok(())
    })();
    if let Err(e) = outcome {
        summary.error = Some(e.to_string());
    }
    summary.seconds = start.elapsed().as_secs_f64();
    summary
}

fn mean_sd(v: &[f64]) -> (Option<f64>, Option<f64>) {
    if v.is_empty() {
        return (None, None);
    }
    let m = v.iter().sum::<f64>() / v.len() as f64;
    let sd = if v.len() > 1 {
        (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (v.len() - 1) as f64).sqrt()
    } else {
        0.0
    };
    (Some(m), Some(sd))
}

/// Runs `n_reps` independent replications of generate → fit → canonicalize → infer.
pub fn run_study(cfg: &SimConfig) -> Result<StudyReport> {
    cfg.validate()?;
    let start = Instant::now();
    let per_rep = map_range(cfg.execution, cfg.n_reps, |rep| run_rep(cfg, rep));
    let failures = per_rep.iter().filter(|r| r.error.is_some()).count();
    if failures * 5 > cfg.n_reps {
        return Err(Error::StudyFailed { failures, total: cfg.n_reps });
    }
    let ok: Vec<&RepSummary> = per_rep.iter().filter(|r| r.error.is_none()).collect();
    let collect = |f: fn(&RepSummary) -> Option<f64>| ok.iter().filter_map(|r| f(r)).collect::<Vec<f64>>();
    let (type1_mean, _) = mean_sd(&collect(|r| r.type1));
    let (power_mean, _) = mean_sd(&collect(|r| r.power));
    let (coverage_mean, coverage_sd) = mean_sd(&collect(|r| r.coverage));
    Ok(StudyReport {
        config: cfg.clone(),
        type1_mean,
        power_mean,
        coverage_mean,
        coverage_sd,
        failures,
        per_rep,
        wallclock: start.elapsed().as_secs_f64(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(n: usize, q: usize, p_star: usize, k: usize) -> SimConfig {
        SimConfig { n, q, p_star, k, ..SimConfig::default() }
    }

    #[test]
    fn design_independent_at_tau_zero() {
        for seed in 0..3 {
            let c = SimConfig { tau: 0.0, ..cfg(10_000, 10, 3, 2) };
            let (x, u) = gen_design(&c, seed).unwrap();
            assert_eq!(x.shape(), (10_000, 4));
            assert_eq!(u.shape(), (10_000, 2));
            assert!(x.column(0).iter().all(|&v| v == 1.0));
            let cross = u.transpose() * x.columns(1, 3) / 10_000.0;
            assert!(cross.amax() < 4.0 / 100.0);
        }
    }

    #[test]
    fn design_adjacent_correlation() {
        let c = SimConfig { tau: 0.5, ..cfg(10_000, 10, 3, 2) };
        let (x, u) = gen_design(&c, 7).unwrap();
        let mut joint = DMatrix::zeros(10_000, 5);
        joint.columns_mut(0, 2).copy_from(&u);
        joint.columns_mut(2, 3).copy_from(&x.columns(1, 3));
        for a in 0..4 {
            let (ca, cb) = (joint.column(a), joint.column(a + 1));
            let (ma, mb) = (ca.mean(), cb.mean());
            let cov: f64 = ca.iter().zip(cb.iter()).map(|(p, q)| (p - ma) * (q - mb)).sum::<f64>();
            let va: f64 = ca.iter().map(|p| (p - ma).powi(2)).sum();
            let vb: f64 = cb.iter().map(|p| (p - mb).powi(2)).sum();
            assert!((cov / (va * vb).sqrt() - 0.5).abs() < 0.05);
        }
    }

    #[test]
    fn loading_blocks() {
        let g = gen_loadings(&cfg(10, 4, 0, 2), 1);
        for j in 0..4 {
            let on = j / 2;
            assert!((0.5..=1.5).contains(&g[(j, on)]));
            assert_eq!(g[(j, 1 - on)], 0.0);
        }
        let g = gen_loadings(&cfg(10, 100, 5, 2), 3);
        for c in 0..2 {
            assert_eq!(g.column(c).iter().filter(|v| **v != 0.0).count(), 50);
        }
    }

    #[test]
    fn coefficient_patterns() {
        let b = gen_coeffs(&cfg(10, 100, 5, 2)).unwrap();
        assert!(b.column(0).iter().all(|&v| v == 0.0));
        let rows: Vec<usize> = (0..100).filter(|&j| b[(j, 1)] != 0.0).collect();
        assert_eq!(rows, vec![0, 1, 2, 3, 4]);
        assert_eq!(b[(7, 2)], 0.5);
        let dense = gen_coeffs(&SimConfig { pattern: Pattern::Dense, ..cfg(10, 100, 5, 2) }).unwrap();
        for s in 1..=5 {
            assert_eq!(dense.column(s).iter().filter(|v| **v != 0.0).count(), 20);
        }
        let zero = gen_coeffs(&SimConfig { rho: 0.0, ..cfg(10, 100, 5, 2) }).unwrap();
        assert_eq!(zero, DMatrix::zeros(100, 6));
        assert!(gen_coeffs(&cfg(10, 20, 5, 2)).is_err());
    }

    #[test]
    fn response_and_missingness_rates() {
        let params = ParameterSet::zeros(1000, 100, 1, 1);
        let x = DMatrix::from_element(1000, 1, 1.0);
        let (y, mask) = gen_responses(&LinkFamily::logistic(), &params, &x, 5).unwrap();
        assert!((y.mean() - 0.5).abs() < 0.02);
        assert!(mask.iter().all(|&m| m));
        assert_eq!(apply_missingness(&mask, 0.0, 1), mask);
        let thinned = apply_missingness(&mask, 0.86, 1);
        let frac = thinned.iter().filter(|&&m| m).count() as f64 / 1e5;
        assert!((frac - 0.14).abs() < 0.01);
    }

    #[test]
    fn sparse_truth_satisfies_condition1() {
        let c = cfg(10, 100, 5, 2);
        let verdicts = crate::identification::check_condition1_minimal_l1(
            &gen_loadings(&c, 1),
            &gen_coeffs(&c).unwrap(),
            64,
            0,
        )
        .unwrap();
        assert!(verdicts.iter().all(|v| *v == crate::identification::Condition1Verdict::HoldsSampled));
    }

    #[test]
    fn smoke_study_is_deterministic() {
        let c = SimConfig { n_reps: 3, execution: Execution::Sequential, ..SimConfig::preset("smoke").unwrap() };
        let a = run_study(&c).unwrap();
        let b = run_study(&SimConfig { execution: Execution::Parallel, ..c.clone() }).unwrap();
        assert_eq!(a.per_rep.len(), 3);
        assert_eq!(a.without_timing().per_rep, b.without_timing().per_rep);
        assert!(a.type1_mean.is_some() && a.power_mean.is_some());
        let null = run_study(&SimConfig { rho: 0.0, n_reps: 2, ..c }).unwrap();
        assert!(null.power_mean.is_none());
        assert!(null.type1_mean.is_some());
        let mut buf = Vec::new();
        null.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("rep,type1,power,coverage,converged,iters,seconds\n"));
        assert_eq!(text.lines().count(), 3);
    }
}
