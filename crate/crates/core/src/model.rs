//! Data model, linear predictor and per-cell log-likelihoods.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use statrs::function::gamma::ln_gamma;

use crate::error::{Error, Result};
use crate::special::{log_normal_cdf, probit_hazard};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FamilyKind {
    Logistic,
    Probit,
    Gaussian,
    Poisson,
}

impl FamilyKind {
    pub fn name(self) -> &'static str {
        match self {
            FamilyKind::Logistic => "logistic",
            FamilyKind::Probit => "probit",
            FamilyKind::Gaussian => "gaussian",
            FamilyKind::Poisson => "poisson",
        }
    }
}

/// Response family of one item. `sigma2` is only read for the gaussian family.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LinkFamily {
    pub kind: FamilyKind,
    #[serde(default = "default_sigma2")]
    pub sigma2: f64,
}

fn default_sigma2() -> f64 {
    1.0
}

impl LinkFamily {
    pub fn logistic() -> Self {
        Self { kind: FamilyKind::Logistic, sigma2: 1.0 }
    }

    pub fn probit() -> Self {
        Self { kind: FamilyKind::Probit, sigma2: 1.0 }
    }

    pub fn poisson() -> Self {
        Self { kind: FamilyKind::Poisson, sigma2: 1.0 }
    }

    pub fn gaussian(sigma2: f64) -> Result<Self> {
        if !(sigma2 > 0.0 && sigma2.is_finite()) {
            return Err(Error::Config(format!("gaussian variance must be positive, got {sigma2}")));
        }
        Ok(Self { kind: FamilyKind::Gaussian, sigma2 })
    }

    /// Parses `logistic`, `probit`, `poisson`, `gaussian` or `gaussian:<sigma2>`.
    pub fn parse(s: &str) -> Result<Self> {
        let s = s.trim().to_ascii_lowercase();
        let (name, arg) = match s.split_once(':') {
            Some((a, b)) => (a.to_string(), Some(b.to_string())),
            None => (s.clone(), None),
        };
        match (name.as_str(), arg) {
            ("logistic" | "logit", None) => Ok(Self::logistic()),
            ("probit", None) => Ok(Self::probit()),
            ("poisson", None) => Ok(Self::poisson()),
            ("gaussian" | "normal", None) => Self::gaussian(1.0),
            ("gaussian" | "normal", Some(v)) => {
                let sigma2 = v
                    .parse::<f64>()
                    .map_err(|_| Error::Config(format!("bad gaussian variance '{v}'")))?;
                Self::gaussian(sigma2)
            }
            _ => Err(Error::Config(format!("unknown family '{s}'"))),
        }
    }

    pub fn in_support(&self, y: f64) -> bool {
        if !y.is_finite() {
            return false;
        }
        match self.kind {
            FamilyKind::Logistic | FamilyKind::Probit => y == 0.0 || y == 1.0,
            FamilyKind::Poisson => y >= 0.0 && y.fract() == 0.0,
            FamilyKind::Gaussian => true,
        }
    }
}

/// Log-likelihood of one cell together with its first two derivatives in w.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LoglikTriple {
    pub value: f64,
    pub d1: f64,
    pub d2: f64,
}

fn log1p_exp(w: f64) -> f64 {
    if w > 0.0 {
        w + (-w).exp().ln_1p()
    } else {
        w.exp().ln_1p()
    }
}

fn sigmoid(w: f64) -> f64 {
    if w >= 0.0 {
        1.0 / (1.0 + (-w).exp())
    } else {
        let e = w.exp();
        e / (1.0 + e)
    }
}

/// Cell log-likelihood without the support check (callers validated `y`).
#[inline]
pub(crate) fn cell_loglik(family: &LinkFamily, y: f64, w: f64) -> LoglikTriple {
    match family.kind {
        FamilyKind::Logistic => {
            let s = sigmoid(w);
            LoglikTriple {
                value: w * y - log1p_exp(w),
                d1: y - s,
                d2: -s * (1.0 - s),
            }
        }
        FamilyKind::Probit => {
            // y = 0 is the y = 1 case mirrored at −w.
            let v = if y == 1.0 { w } else { -w };
            let sign = if y == 1.0 { 1.0 } else { -1.0 };
            let (lambda, lambda_plus_v) = probit_hazard(v);
            LoglikTriple {
                value: log_normal_cdf(v),
                d1: sign * lambda,
                d2: -lambda * lambda_plus_v,
            }
        }
        FamilyKind::Gaussian => {
            let r = y - w;
            LoglikTriple {
                value: -r * r / (2.0 * family.sigma2),
                d1: r / family.sigma2,
                d2: -1.0 / family.sigma2,
            }
        }
        FamilyKind::Poisson => {
            let e = w.exp();
            LoglikTriple {
                value: y * w - e - ln_gamma(y + 1.0),
                d1: y - e,
                d2: -e,
            }
        }
    }
}

/// (l′, l″) without the log-likelihood value.
#[inline]
pub(crate) fn cell_derivs(family: &LinkFamily, y: f64, w: f64) -> (f64, f64) {
    match family.kind {
        FamilyKind::Logistic => {
            let s = sigmoid(w);
            (y - s, -s * (1.0 - s))
        }
        FamilyKind::Poisson => {
            let e = w.exp();
            (y - e, -e)
        }
        _ => {
            let t = cell_loglik(family, y, w);
            (t.d1, t.d2)
        }
    }
}

/// Value-only cell log-likelihood, used inside line searches.
#[inline]
pub(crate) fn cell_value(family: &LinkFamily, y: f64, w: f64) -> f64 {
    match family.kind {
        FamilyKind::Logistic => w * y - log1p_exp(w),
        FamilyKind::Probit => log_normal_cdf(if y == 1.0 { w } else { -w }),
        FamilyKind::Gaussian => {
            let r = y - w;
            -r * r / (2.0 * family.sigma2)
        }
        FamilyKind::Poisson => y * w - w.exp() - ln_gamma(y + 1.0),
    }
}

pub fn loglik_triple(family: &LinkFamily, y: f64, w: f64) -> Result<LoglikTriple> {
    if !family.in_support(y) {
        return Err(Error::Support { value: y, family: family.kind.name() });
    }
    if !w.is_finite() {
        return Err(Error::Numerical(format!("non-finite linear predictor {w}")));
    }
    Ok(cell_loglik(family, y, w))
}

/// Responses, missingness mask, design matrix (leading intercept column) and
/// per-item families.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    y: DMatrix<f64>,
    mask: DMatrix<bool>,
    x: DMatrix<f64>,
    families: Vec<LinkFamily>,
    item_obs: Vec<Vec<usize>>,
    subject_obs: Vec<Vec<usize>>,
    n_observed: usize,
}

impl Dataset {
    /// Builds a dataset and checks every invariant, including that each item
    /// and each subject has at least one observed response.
    pub fn new(
        y: DMatrix<f64>,
        mask: DMatrix<bool>,
        x: DMatrix<f64>,
        families: Vec<LinkFamily>,
    ) -> Result<Self> {
        Self::from_parts(y, mask, x, families, true)
    }

    /// Dataset with every cell observed.
    pub fn complete(y: DMatrix<f64>, x: DMatrix<f64>, families: Vec<LinkFamily>) -> Result<Self> {
        let mask = DMatrix::from_element(y.nrows(), y.ncols(), true);
        Self::new(y, mask, x, families)
    }

    /// Like [`Dataset::new`], but `require_coverage = false` skips the
    /// "every row and column observed at least once" check.
    pub fn from_parts(
        mut y: DMatrix<f64>,
        mask: DMatrix<bool>,
        x: DMatrix<f64>,
        families: Vec<LinkFamily>,
        require_coverage: bool,
    ) -> Result<Self> {
        let (n, q) = y.shape();
        if n == 0 || q == 0 {
            return Err(Error::Dimension("empty response matrix".into()));
        }
        if mask.shape() != (n, q) {
            return Err(Error::Dimension(format!(
                "mask is {:?}, responses are {:?}",
                mask.shape(),
                (n, q)
            )));
        }
        if x.nrows() != n || x.ncols() == 0 {
            return Err(Error::Dimension(format!(
                "design matrix is {:?}, expected {} rows and an intercept column",
                x.shape(),
                n
            )));
        }
        if families.len() != q {
            return Err(Error::Dimension(format!("{} families for {} items", families.len(), q)));
        }
        if x.column(0).iter().any(|&v| v != 1.0) {
            return Err(Error::Dimension("first design column must be all ones".into()));
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::Dimension("design matrix has non-finite entries".into()));
        }
        let mut item_obs = vec![Vec::new(); q];
        let mut subject_obs = vec![Vec::new(); n];
        let mut n_observed = 0;
        for j in 0..q {
            for i in 0..n {
                if mask[(i, j)] {
                    let v = y[(i, j)];
                    if !families[j].in_support(v) {
                        return Err(Error::Domain {
                            row: i,
                            col: j,
                            value: v,
                            family: families[j].kind.name(),
                        });
                    }
                    item_obs[j].push(i);
                    subject_obs[i].push(j);
                    n_observed += 1;
                } else {
                    y[(i, j)] = 0.0;
                }
            }
        }
        if require_coverage {
            if let Some(j) = item_obs.iter().position(|v| v.is_empty()) {
                return Err(Error::Dimension(format!("item {j} has no observed responses")));
            }
            if let Some(i) = subject_obs.iter().position(|v| v.is_empty()) {
                return Err(Error::Dimension(format!("subject {i} has no observed responses")));
            }
        }
        Ok(Self { y, mask, x, families, item_obs, subject_obs, n_observed })
    }

    pub fn n(&self) -> usize {
        self.y.nrows()
    }
    pub fn q(&self) -> usize {
        self.y.ncols()
    }
    pub fn p(&self) -> usize {
        self.x.ncols()
    }
    /// Number of covariates excluding the intercept.
    pub fn p_star(&self) -> usize {
        self.x.ncols() - 1
    }
    pub fn y(&self) -> &DMatrix<f64> {
        &self.y
    }
    pub fn mask(&self) -> &DMatrix<bool> {
        &self.mask
    }
    pub fn x(&self) -> &DMatrix<f64> {
        &self.x
    }
    pub fn families(&self) -> &[LinkFamily] {
        &self.families
    }
    /// Subjects with an observed response to item `j`.
    pub fn item_observed(&self, j: usize) -> &[usize] {
        &self.item_obs[j]
    }
    /// Items observed for subject `i`.
    pub fn subject_observed(&self, i: usize) -> &[usize] {
        &self.subject_obs[i]
    }
    pub fn n_observed(&self) -> usize {
        self.n_observed
    }
    pub fn is_complete(&self) -> bool {
        self.n_observed == self.n() * self.q()
    }

    /// Copy with a replaced mask (used by missingness simulation).
    pub fn with_mask(&self, mask: DMatrix<bool>) -> Result<Self> {
        Self::new(self.y.clone(), mask, self.x.clone(), self.families.clone())
    }

    /// Copy with new per-item families, re-validating the responses.
    pub fn with_families(&self, families: Vec<LinkFamily>) -> Result<Self> {
        Self::from_parts(self.y.clone(), self.mask.clone(), self.x.clone(), families, true)
    }
}

/// Loadings Γ (q×K), factors U (n×K) and coefficients B (q×p, column 0 = intercepts).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParameterSet {
    pub gamma: DMatrix<f64>,
    pub u: DMatrix<f64>,
    pub b: DMatrix<f64>,
}

impl ParameterSet {
    pub fn new(gamma: DMatrix<f64>, u: DMatrix<f64>, b: DMatrix<f64>) -> Result<Self> {
        if gamma.ncols() != u.ncols() {
            return Err(Error::Dimension(format!(
                "Γ has {} factors, U has {}",
                gamma.ncols(),
                u.ncols()
            )));
        }
        if gamma.nrows() != b.nrows() {
            return Err(Error::Dimension(format!("Γ has {} items, B has {}", gamma.nrows(), b.nrows())));
        }
        let p = Self { gamma, u, b };
        if !p.is_finite() {
            return Err(Error::Numerical("non-finite parameter entries".into()));
        }
        Ok(p)
    }

    pub fn zeros(n: usize, q: usize, p: usize, k: usize) -> Self {
        Self {
            gamma: DMatrix::zeros(q, k),
            u: DMatrix::zeros(n, k),
            b: DMatrix::zeros(q, p),
        }
    }

    pub fn k(&self) -> usize {
        self.gamma.ncols()
    }

    pub fn is_finite(&self) -> bool {
        self.gamma.iter().chain(self.u.iter()).chain(self.b.iter()).all(|v| v.is_finite())
    }

    pub fn check_against(&self, data: &Dataset) -> Result<()> {
        if self.u.nrows() != data.n() || self.gamma.nrows() != data.q() || self.b.ncols() != data.p() {
            return Err(Error::Dimension(format!(
                "parameters (n={}, q={}, p={}) do not match data (n={}, q={}, p={})",
                self.u.nrows(),
                self.gamma.nrows(),
                self.b.ncols(),
                data.n(),
                data.q(),
                data.p()
            )));
        }
        Ok(())
    }

    /// Largest absolute entry over Γ, U and B.
    pub fn max_abs(&self) -> f64 {
        self.gamma
            .iter()
            .chain(self.u.iter())
            .chain(self.b.iter())
            .fold(0.0f64, |m, v| m.max(v.abs()))
    }

    /// (ΓG⁻ᵀ, (U + XAᵀ)G, B − ΓA), the transformation class under which the
    /// likelihood is invariant.
    pub fn transform(&self, x: &DMatrix<f64>, a: &DMatrix<f64>, g: &DMatrix<f64>) -> Result<Self> {
        let g_inv = crate::linalg::inverse(g)
            .ok_or_else(|| Error::RankDeficient("transformation G is singular".into()))?;
        Ok(Self {
            gamma: &self.gamma * g_inv.transpose(),
            u: (&self.u + x * a.transpose()) * g,
            b: &self.b - &self.gamma * a,
        })
    }
}

/// w_ij = γ_jᵀU_i + β_jᵀX_i.
pub fn linear_predictor(params: &ParameterSet, data: &Dataset, i: usize, j: usize) -> Result<f64> {
    if i >= data.n() || j >= data.q() {
        return Err(Error::Index(format!(
            "cell ({i}, {j}) outside {}×{}",
            data.n(),
            data.q()
        )));
    }
    params.check_against(data)?;
    let factor: f64 = (0..params.k()).map(|k| params.gamma[(j, k)] * params.u[(i, k)]).sum();
    let cov: f64 = (0..data.p()).map(|s| params.b[(j, s)] * data.x()[(i, s)]).sum();
    Ok(factor + cov)
}

/// n×q matrix UΓᵀ + XBᵀ.
pub fn predictor_matrix(params: &ParameterSet, x: &DMatrix<f64>) -> DMatrix<f64> {
    &params.u * params.gamma.transpose() + x * params.b.transpose()
}

/// Mean log-likelihood over observed cells.
pub fn observed_loglik(params: &ParameterSet, data: &Dataset) -> Result<f64> {
    params.check_against(data)?;
    if data.n_observed() == 0 {
        return Err(Error::EmptyMask);
    }
    let w = predictor_matrix(params, data.x());
    Ok(sum_observed(&w, data) / data.n_observed() as f64)
}

/// Σ over observed cells of l_ij(w_ij), summed item by item.
pub(crate) fn sum_observed(w: &DMatrix<f64>, data: &Dataset) -> f64 {
    let mut total = 0.0;
    for j in 0..data.q() {
        let fam = &data.families()[j];
        let mut col = 0.0;
        for &i in data.item_observed(j) {
            col += cell_value(fam, data.y()[(i, j)], w[(i, j)]);
        }
        total += col;
    }
    total
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn all_families() -> Vec<(LinkFamily, Vec<f64>)> {
        vec![
            (LinkFamily::logistic(), vec![0.0, 1.0]),
            (LinkFamily::probit(), vec![0.0, 1.0]),
            (LinkFamily::gaussian(1.0).unwrap(), vec![-1.3, 0.7, 2.0]),
            (LinkFamily::gaussian(2.5).unwrap(), vec![0.4]),
            (LinkFamily::poisson(), vec![0.0, 1.0, 3.0, 7.0]),
        ]
    }

    #[test]
    fn logistic_at_zero() {
        let t = loglik_triple(&LinkFamily::logistic(), 1.0, 0.0).unwrap();
        assert!((t.value + std::f64::consts::LN_2).abs() < 1e-15);
        assert!((t.d1 - 0.5).abs() < 1e-15);
        assert!((t.d2 + 0.25).abs() < 1e-15);
    }

    #[test]
    fn gaussian_perfect_fit() {
        let t = loglik_triple(&LinkFamily::gaussian(1.0).unwrap(), 1.7, 1.7).unwrap();
        assert_eq!(t.value, 0.0);
        assert_eq!(t.d1, 0.0);
        assert_eq!(t.d2, -1.0);
    }

    #[test]
    fn probit_at_zero_against_fd_oracle() {
        let fam = LinkFamily::probit();
        let t = loglik_triple(&fam, 0.0, 0.0).unwrap();
        assert!((t.value - 0.5f64.ln()).abs() < 1e-15);
        assert!((t.d1 + 0.797_884_560_802_865_4).abs() < 1e-12);
        // central difference of d1 with an independent pdf/cdf evaluation
        let h = 1e-5;
        let d1 = |w: f64| {
            use statrs::distribution::{Continuous, ContinuousCDF, Normal};
            let nd = Normal::standard();
            -nd.pdf(w) / (1.0 - nd.cdf(w))
        };
        let fd = (d1(h) - d1(-h)) / (2.0 * h);
        assert!((t.d2 - fd).abs() < 1e-8, "{} vs {}", t.d2, fd);
        assert!((t.d2 + 2.0 / std::f64::consts::PI).abs() < 1e-12);
    }

    #[test]
    fn support_violations() {
        assert!(matches!(
            loglik_triple(&LinkFamily::logistic(), 2.0, 0.0),
            Err(Error::Support { .. })
        ));
        assert!(loglik_triple(&LinkFamily::poisson(), 1.5, 0.0).is_err());
        assert!(loglik_triple(&LinkFamily::poisson(), -1.0, 0.0).is_err());
        assert!(loglik_triple(&LinkFamily::gaussian(1.0).unwrap(), -3.0, 0.0).is_ok());
    }

    #[test]
    fn derivatives_match_finite_differences_on_grid() {
        let h = 1e-5;
        for (fam, ys) in all_families() {
            for &y in &ys {
                for step in 0..=64 {
                    let w = -8.0 + 0.25 * step as f64;
                    let t = cell_loglik(&fam, y, w);
                    let fd1 = (cell_value(&fam, y, w + h) - cell_value(&fam, y, w - h)) / (2.0 * h);
                    let fd2 = (cell_loglik(&fam, y, w + h).d1 - cell_loglik(&fam, y, w - h).d1) / (2.0 * h);
                    let e1 = (t.d1 - fd1).abs() / t.d1.abs().max(1.0);
                    let e2 = (t.d2 - fd2).abs() / t.d2.abs().max(1.0);
                    assert!(e1 < 1e-6, "{:?} y={y} w={w}: d1 {} vs {}", fam.kind, t.d1, fd1);
                    assert!(e2 < 1e-6, "{:?} y={y} w={w}: d2 {} vs {}", fam.kind, t.d2, fd2);
                    assert!(t.d2 < 0.0);
                }
            }
        }
    }

    #[test]
    fn predictor_examples() {
        let x = DMatrix::from_row_slice(1, 2, &[1.0, 2.0]);
        let data = Dataset::complete(DMatrix::from_element(1, 1, 1.0), x, vec![LinkFamily::logistic()]).unwrap();
        let zero = ParameterSet::zeros(1, 1, 2, 2);
        assert_eq!(linear_predictor(&zero, &data, 0, 0).unwrap(), 0.0);

        let mut intercept = zero.clone();
        intercept.b[(0, 0)] = 2.5;
        assert_eq!(linear_predictor(&intercept, &data, 0, 0).unwrap(), 2.5);

        let p = ParameterSet::new(
            DMatrix::from_row_slice(1, 2, &[1.0, 2.0]),
            DMatrix::from_row_slice(1, 2, &[3.0, -1.0]),
            DMatrix::from_row_slice(1, 2, &[0.5, 1.0]),
        )
        .unwrap();
        assert_eq!(linear_predictor(&p, &data, 0, 0).unwrap(), 3.5);
        assert!(matches!(linear_predictor(&p, &data, 1, 0), Err(Error::Index(_))));
    }

    #[test]
    fn observed_loglik_single_cells() {
        let x = DMatrix::from_element(1, 1, 1.0);
        let data = Dataset::complete(DMatrix::from_element(1, 1, 1.0), x, vec![LinkFamily::logistic()]).unwrap();
        let v = observed_loglik(&ParameterSet::zeros(1, 1, 1, 0), &data).unwrap();
        assert!((v + 0.693_147_180_559_945_3).abs() < 1e-15);

        // one observed cell out of six
        let y = DMatrix::from_row_slice(2, 3, &[1.0, 0.0, 1.0, 0.0, 1.0, 1.0]);
        let mut mask = DMatrix::from_element(2, 3, false);
        mask[(1, 2)] = true;
        let x = DMatrix::from_element(2, 1, 1.0);
        let fams = vec![LinkFamily::logistic(); 3];
        let data = Dataset::from_parts(y, mask, x, fams.clone(), false).unwrap();
        let mut params = ParameterSet::zeros(2, 3, 1, 0);
        params.b[(2, 0)] = 0.3;
        let v = observed_loglik(&params, &data).unwrap();
        let cell = cell_value(&LinkFamily::logistic(), 1.0, 0.3);
        assert_eq!(v, cell);

        let empty = Dataset::from_parts(
            DMatrix::zeros(2, 3),
            DMatrix::from_element(2, 3, false),
            DMatrix::from_element(2, 1, 1.0),
            fams,
            false,
        )
        .unwrap();
        assert!(matches!(observed_loglik(&params, &empty), Err(Error::EmptyMask)));
    }

    #[test]
    fn dataset_validation() {
        let x = DMatrix::from_element(2, 1, 1.0);
        let y = DMatrix::from_row_slice(2, 2, &[0.0, 2.0, 1.0, 1.0]);
        let err = Dataset::complete(y, x.clone(), vec![LinkFamily::logistic(); 2]).unwrap_err();
        assert!(matches!(err, Error::Domain { row: 0, col: 1, .. }));

        let bad_x = DMatrix::from_element(2, 1, 2.0);
        assert!(Dataset::complete(DMatrix::zeros(2, 2), bad_x, vec![LinkFamily::logistic(); 2]).is_err());

        let mut mask = DMatrix::from_element(2, 2, true);
        mask[(0, 0)] = false;
        mask[(1, 0)] = false;
        assert!(Dataset::new(DMatrix::zeros(2, 2), mask, x, vec![LinkFamily::logistic(); 2]).is_err());
    }

    fn random_gaussian_instance(seed: u64) -> (Dataset, ParameterSet) {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let (n, q, p, k) = (5, 4, 2, 2);
        let mut x = DMatrix::from_fn(n, p, |_, _| rng.random_range(-1.0..1.0));
        x.column_mut(0).fill(1.0);
        let y = DMatrix::from_fn(n, q, |_, _| rng.random_range(-2.0..2.0));
        let mask = DMatrix::from_fn(n, q, |i, j| (i + 2 * j) % 3 != 0 || i == j);
        let data = Dataset::new(y, mask, x, vec![LinkFamily::gaussian(1.3).unwrap(); q]).unwrap();
        let params = ParameterSet::new(
            DMatrix::from_fn(q, k, |_, _| rng.random_range(-1.0..1.0)),
            DMatrix::from_fn(n, k, |_, _| rng.random_range(-1.0..1.0)),
            DMatrix::from_fn(q, p, |_, _| rng.random_range(-1.0..1.0)),
        )
        .unwrap();
        (data, params)
    }

    #[test]
    fn observed_loglik_matches_double_loop_oracle() {
        for seed in 0..5 {
            let (data, params) = random_gaussian_instance(seed);
            let mut sum = 0.0;
            let mut count = 0;
            for i in 0..data.n() {
                for j in 0..data.q() {
                    if !data.mask()[(i, j)] {
                        continue;
                    }
                    let mut w = 0.0;
                    for k in 0..params.k() {
                        w += params.gamma[(j, k)] * params.u[(i, k)];
                    }
                    for s in 0..data.p() {
                        w += params.b[(j, s)] * data.x()[(i, s)];
                    }
                    let r = data.y()[(i, j)] - w;
                    sum += -r * r / (2.0 * 1.3);
                    count += 1;
                }
            }
            let v = observed_loglik(&params, &data).unwrap();
            assert!((v - sum / count as f64).abs() < 1e-12);
        }
    }

    proptest! {
        #[test]
        fn loglik_invariant_under_transformations(
            seed in 0u64..1000,
            g in proptest::collection::vec(-1.0f64..1.0, 4),
            a in proptest::collection::vec(-2.0f64..2.0, 4),
        ) {
            let (data, params) = random_gaussian_instance(seed);
            let mut gm = DMatrix::from_row_slice(2, 2, &g);
            gm[(0, 0)] += 2.0;
            gm[(1, 1)] += 2.0;
            let am = DMatrix::from_row_slice(2, 2, &a);
            let moved = params.transform(data.x(), &am, &gm).unwrap();
            let before = observed_loglik(&params, &data).unwrap();
            let after = observed_loglik(&moved, &data).unwrap();
            prop_assert!((before - after).abs() < 1e-10);
        }
    }
}
