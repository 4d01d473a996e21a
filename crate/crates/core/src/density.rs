//! Self-consistent densities of deformed Wigner-type ensembles.
//!
//! The central object is the vector Dyson equation
//!
//! ```text
//!   -1/m_i(z) = z - a_i + (S m)_i,       Im z > 0,
//! ```
//!
//! whose solution with Im m_i > 0 is the self-consistent Green's function.
//! The averaged trace <m> is the Stieltjes transform of the self-consistent
//! density of states, recovered on the real axis by extrapolating
//! Im <m(E + i eta)> / pi through a geometric eta ladder.

use std::sync::{Arc, OnceLock};

use num_complex::Complex64;

use crate::config::NumericConfig;
use crate::error::{CuspError, Result};

/// Entry-variance structure of the ensemble.
#[derive(Clone, Debug)]
pub enum VarianceProfile {
    /// s_ij = c / N for all pairs.
    Flat(f64),
    /// Full symmetric N x N variance matrix, row-major.
    Full(Vec<f64>),
}

/// Symmetry class of the matrix ensemble.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SymmetryClass {
    /// Real symmetric (beta = 1).
    Orthogonal,
    /// Complex Hermitian (beta = 2).
    Unitary,
}

impl SymmetryClass {
    pub fn beta(self) -> u8 {
        match self {
            SymmetryClass::Orthogonal => 1,
            SymmetryClass::Unitary => 2,
        }
    }
}

/// A deformed Wigner-type ensemble: H = diag(a) + W with E w_ij^2 = s_ij.
#[derive(Clone, Debug)]
pub struct EnsembleSpec {
    pub a: Vec<f64>,
    pub variance: VarianceProfile,
    pub symmetry: SymmetryClass,
}

impl EnsembleSpec {
    pub fn n(&self) -> usize {
        self.a.len()
    }

    /// Zero expectation, flat variance c/N.
    pub fn wigner(n: usize, c: f64, symmetry: SymmetryClass) -> Self {
        Self { a: vec![0.0; n], variance: VarianceProfile::Flat(c), symmetry }
    }

    /// diag(+1,...,+1,-1,...,-1) with flat variance c/N. `plus` entries of +1.
    pub fn two_valued(n: usize, plus: usize, c: f64, symmetry: SymmetryClass) -> Self {
        assert!(plus <= n);
        let mut a = vec![1.0; plus];
        a.extend(std::iter::repeat(-1.0).take(n - plus));
        Self { a, variance: VarianceProfile::Flat(c), symmetry }
    }

    /// The reference ensemble diag(+-1) + sqrt(1 - alpha/sqrt(N)) * G.
    pub fn reference(n: usize, alpha: f64, symmetry: SymmetryClass) -> Result<Self> {
        let c = 1.0 - alpha / (n as f64).sqrt();
        if c <= 0.0 {
            return Err(CuspError::InvalidSpec(format!(
                "alpha = {alpha} removes all variance at N = {n}"
            )));
        }
        Ok(Self::two_valued(n, n / 2, c, symmetry))
    }

    /// Scaled asymmetric two-point ensemble: a_i = scale * (+1 with weight p),
    /// flat variance c/N.
    pub fn asymmetric(n: usize, p: f64, scale: f64, c: f64, symmetry: SymmetryClass) -> Self {
        let plus = (p * n as f64).round() as usize;
        let mut a = vec![scale; plus.min(n)];
        a.extend(std::iter::repeat(-scale).take(n - plus.min(n)));
        Self { a, variance: VarianceProfile::Flat(c), symmetry }
    }

    /// Distinct expectation values with multiplicities, in index order.
    pub fn distinct_a(&self) -> Vec<(f64, f64)> {
        let n = self.n() as f64;
        let mut pairs: Vec<(f64, f64)> = Vec::new();
        for &v in &self.a {
            match pairs.iter_mut().find(|(w, _)| *w == v) {
                Some((_, m)) => *m += 1.0 / n,
                None => pairs.push((v, 1.0 / n)),
            }
        }
        pairs
    }

    pub fn validate(&self, cfg: &NumericConfig) -> Result<()> {
        let n = self.n();
        if n == 0 {
            return Err(CuspError::InvalidSpec("empty expectation vector".into()));
        }
        if let Some(bad) = self.a.iter().find(|v| !v.is_finite() || v.abs() > cfg.entry_bound) {
            return Err(CuspError::InvalidSpec(format!("expectation entry {bad} out of bounds")));
        }
        match &self.variance {
            VarianceProfile::Flat(c) => {
                if !c.is_finite() || *c < cfg.flatness_floor {
                    return Err(CuspError::InvalidSpec(format!("flat variance {c} below floor")));
                }
            }
            VarianceProfile::Full(s) => {
                if s.len() != n * n {
                    return Err(CuspError::InvalidSpec("variance matrix has wrong size".into()));
                }
                let floor = cfg.flatness_floor / n as f64;
                for i in 0..n {
                    for j in 0..i {
                        if (s[i * n + j] - s[j * n + i]).abs() > 1e-14 {
                            return Err(CuspError::InvalidSpec("variance matrix not symmetric".into()));
                        }
                    }
                    if s[i * n..(i + 1) * n].iter().any(|v| *v < floor) {
                        return Err(CuspError::InvalidSpec("variance entry below flatness floor".into()));
                    }
                }
            }
        }
        Ok(())
    }

    fn apply_s(&self, m: &[Complex64]) -> Vec<Complex64> {
        let n = self.n();
        match &self.variance {
            VarianceProfile::Flat(c) => {
                let mean = m.iter().sum::<Complex64>() / n as f64;
                vec![*c * mean; n]
            }
            VarianceProfile::Full(s) => (0..n)
                .map(|i| (0..n).map(|j| s[i * n + j] * m[j]).sum())
                .collect(),
        }
    }
}

/// A solved Dyson equation at one spectral parameter.
#[derive(Clone, Debug)]
pub struct GreenVector {
    pub z: Complex64,
    pub m: Vec<Complex64>,
    /// Sup-norm of 1/m_i + z - a_i + (Sm)_i.
    pub residual: f64,
}

impl GreenVector {
    pub fn average(&self) -> Complex64 {
        self.m.iter().sum::<Complex64>() / self.m.len() as f64
    }
}

fn dyson_defect(spec: &EnsembleSpec, z: Complex64, m: &[Complex64]) -> f64 {
    let sm = spec.apply_s(m);
    m.iter()
        .zip(&spec.a)
        .zip(&sm)
        .map(|((mi, ai), si)| (1.0 / mi + z - ai + si).norm())
        .fold(0.0, f64::max)
}

/// Scalar Dyson solve for a flat variance profile: with s_ij = c/N the
/// self-energy collapses to c <m>, so the unknown is the single average.
fn solve_flat(
    pairs: &[(f64, f64)],
    c: f64,
    z: Complex64,
    seed: Option<Complex64>,
    cfg: &NumericConfig,
) -> Result<Complex64> {
    let f = |s: Complex64| -> Complex64 {
        pairs.iter().map(|&(a, w)| -w / (z - a + c * s)).sum()
    };
    let mut s = seed.unwrap_or_else(|| {
        let guess: Complex64 = f(Complex64::new(0.0, 1.0));
        if guess.im > 0.0 { guess } else { Complex64::new(0.0, 1.0) }
    });
    if s.im <= 0.0 {
        s = Complex64::new(0.0, 1.0);
    }
    let mut defect = (f(s) - s).norm();
    for _ in 0..cfg.max_iter {
        if defect < cfg.newton_switch {
            break;
        }
        s = s + cfg.damping * (f(s) - s);
        if s.im <= 0.0 {
            s = Complex64::new(s.re, 1e-12);
        }
        defect = (f(s) - s).norm();
    }
    // Newton on F(s) = s - f(s); F'(s) = 1 - c * sum w/(z-a+cs)^2.
    for _ in 0..cfg.max_iter {
        let fs = f(s);
        let defect = (fs - s).norm();
        if defect <= cfg.dyson_tol * 0.1 {
            return Ok(s);
        }
        let deriv: Complex64 = pairs
            .iter()
            .map(|&(a, w)| {
                let d = z - a + c * s;
                w * c / (d * d)
            })
            .sum();
        let fprime = Complex64::new(1.0, 0.0) - deriv;
        let step = (fs - s) / fprime;
        let mut cand = s + step;
        // halve the Newton step until the defect decreases and Im stays positive
        let mut shrink = 0;
        while shrink < 60 {
            if cand.im > 0.0 && (f(cand) - cand).norm() < defect {
                break;
            }
            cand = s + (cand - s) * 0.5;
            shrink += 1;
        }
        if shrink == 60 {
            // damped fallback
            cand = s + cfg.damping * (fs - s);
            if cand.im <= 0.0 {
                cand = Complex64::new(cand.re, 1e-300_f64.max(s.im * 0.5));
            }
        }
        s = cand;
    }
    let defect = (f(s) - s).norm();
    if defect <= cfg.dyson_tol {
        Ok(s)
    } else {
        Err(CuspError::NonConvergence(format!(
            "flat Dyson solve stalled at defect {defect:.3e} for z = {z}"
        )))
    }
}

fn solve_full(spec: &EnsembleSpec, z: Complex64, cfg: &NumericConfig) -> Result<Vec<Complex64>> {
    use ndarray::{Array1, Array2};
    use ndarray_linalg::Solve;

    let n = spec.n();
    let mut m: Vec<Complex64> = spec
        .a
        .iter()
        .map(|&a| {
            let d = z - a;
            let cand = -1.0 / d;
            if cand.im > 0.0 { cand } else { Complex64::new(0.0, 1.0) }
        })
        .collect();
    let f = |m: &[Complex64]| -> Vec<Complex64> {
        let sm = spec.apply_s(m);
        m.iter()
            .zip(&spec.a)
            .zip(&sm)
            .map(|((_, ai), si)| -1.0 / (z - ai + si))
            .collect()
    };
    let mut defect = dyson_defect(spec, z, &m);
    let mut iter = 0;
    while defect > cfg.newton_switch && iter < cfg.max_iter {
        let fm = f(&m);
        for (mi, fi) in m.iter_mut().zip(fm) {
            *mi += cfg.damping * (fi - *mi);
            if mi.im <= 0.0 {
                *mi = Complex64::new(mi.re, 1e-12);
            }
        }
        defect = dyson_defect(spec, z, &m);
        iter += 1;
    }
    let s = match &spec.variance {
        VarianceProfile::Full(s) => s,
        VarianceProfile::Flat(_) => unreachable!(),
    };
    for _ in 0..cfg.max_iter {
        defect = dyson_defect(spec, z, &m);
        if defect <= cfg.dyson_tol * 0.1 {
            return Ok(m);
        }
        // Newton: J_ij = -delta_ij / m_i^2 + s_ij, residual F_i = 1/m_i + z - a_i + (Sm)_i.
        let sm = spec.apply_s(&m);
        let mut jac = Array2::<Complex64>::zeros((n, n));
        let mut rhs = Array1::<Complex64>::zeros(n);
        for i in 0..n {
            for j in 0..n {
                jac[[i, j]] = Complex64::new(s[i * n + j], 0.0);
            }
            jac[[i, i]] -= 1.0 / (m[i] * m[i]);
            rhs[i] = -(1.0 / m[i] + z - spec.a[i] + sm[i]);
        }
        let delta = jac
            .solve(&rhs)
            .map_err(|e| CuspError::NonConvergence(format!("Dyson Newton solve failed: {e}")))?;
        let mut scale = 1.0;
        let mut accepted = false;
        for _ in 0..60 {
            let cand: Vec<Complex64> =
                m.iter().zip(delta.iter()).map(|(mi, d)| mi + scale * d).collect();
            if cand.iter().all(|v| v.im > 0.0) && dyson_defect(spec, z, &cand) < defect {
                m = cand;
                accepted = true;
                break;
            }
            scale *= 0.5;
        }
        if !accepted {
            let fm = f(&m);
            for (mi, fi) in m.iter_mut().zip(fm) {
                *mi += cfg.damping * (fi - *mi);
                if mi.im <= 0.0 {
                    *mi = Complex64::new(mi.re, 1e-12);
                }
            }
        }
    }
    defect = dyson_defect(spec, z, &m);
    if defect <= cfg.dyson_tol {
        Ok(m)
    } else {
        Err(CuspError::NonConvergence(format!(
            "full Dyson solve stalled at defect {defect:.3e} for z = {z}"
        )))
    }
}

/// Averaged trace of the solved Dyson equation together with its z-derivative,
/// obtained by implicit differentiation of the fixed-point equation.
pub fn solve_dyson_average(
    spec: &EnsembleSpec,
    z: Complex64,
    cfg: &NumericConfig,
) -> Result<(Complex64, Complex64)> {
    if z.im <= 0.0 {
        return Err(CuspError::DomainError(format!("Im z must be positive, got {z}")));
    }
    match &spec.variance {
        VarianceProfile::Flat(c) => {
            let pairs = spec.distinct_a();
            let s = solve_flat(&pairs, *c, z, None, cfg)?;
            let s2: Complex64 = pairs
                .iter()
                .map(|&(a, w)| {
                    let d = z - a + *c * s;
                    w / (d * d)
                })
                .sum();
            let prime = s2 / (Complex64::new(1.0, 0.0) - *c * s2);
            Ok((s, prime))
        }
        VarianceProfile::Full(s_mat) => {
            use ndarray::{Array1, Array2};
            use ndarray_linalg::Solve;
            let n = spec.n();
            let m = solve_full(spec, z, cfg)?;
            let mut jac = Array2::<Complex64>::zeros((n, n));
            let mut rhs = Array1::<Complex64>::zeros(n);
            for i in 0..n {
                for j in 0..n {
                    jac[[i, j]] = Complex64::new(s_mat[i * n + j], 0.0);
                }
                jac[[i, i]] -= 1.0 / (m[i] * m[i]);
                rhs[i] = Complex64::new(-1.0, 0.0);
            }
            let dm = jac
                .solve(&rhs)
                .map_err(|e| CuspError::NonConvergence(format!("derivative solve failed: {e}")))?;
            let avg = m.iter().sum::<Complex64>() / n as f64;
            let avg_prime = dm.iter().sum::<Complex64>() / n as f64;
            Ok((avg, avg_prime))
        }
    }
}

/// Solve the Dyson equation at one spectral parameter with Im z > 0.
pub fn solve_dyson(spec: &EnsembleSpec, z: Complex64, cfg: &NumericConfig) -> Result<GreenVector> {
    if z.im <= 0.0 {
        return Err(CuspError::DomainError(format!("Im z must be positive, got {z}")));
    }
    spec.validate(cfg)?;
    let m = match &spec.variance {
        VarianceProfile::Flat(c) => {
            let pairs = spec.distinct_a();
            let s = solve_flat(&pairs, *c, z, None, cfg)?;
            spec.a.iter().map(|&a| -1.0 / (z - a + *c * s)).collect::<Vec<_>>()
        }
        VarianceProfile::Full(_) => solve_full(spec, z, cfg)?,
    };
    if m.iter().any(|v| v.im <= 0.0) {
        return Err(CuspError::NonConvergence(format!("non-Herglotz solution at z = {z}")));
    }
    if m.iter().any(|v| v.norm() > cfg.green_bound) {
        return Err(CuspError::InvalidSpec(format!(
            "self-consistent Green's function exceeds bound {} at z = {z}",
            cfg.green_bound
        )));
    }
    let residual = dyson_defect(spec, z, &m);
    if residual > cfg.dyson_tol {
        return Err(CuspError::NonConvergence(format!(
            "residual {residual:.3e} above tolerance at z = {z}"
        )));
    }
    Ok(GreenVector { z, m, residual })
}

/// Richardson extrapolation of f(eta) -> f(0) on a ratio-1/2 geometric ladder.
/// `values[k]` corresponds to eta_k = eta_min * 2^(rungs-1-k), largest first.
pub(crate) fn richardson(values: &[f64]) -> f64 {
    let k = values.len();
    let mut tab: Vec<f64> = values.to_vec();
    for j in 1..k {
        let w = (2f64).powi(j as i32);
        for i in (j..k).rev() {
            tab[i] = (w * tab[i] - tab[i - 1]) / (w - 1.0);
        }
    }
    tab[k - 1]
}

/// Extrapolated density at energy `e` from a Stieltjes evaluator.
pub fn density_at(
    m_eval: &dyn Fn(Complex64) -> Result<Complex64>,
    e: f64,
    eta_min: f64,
    rungs: usize,
) -> Result<f64> {
    let mut vals = Vec::with_capacity(rungs);
    for k in 0..rungs {
        let eta = eta_min * (2f64).powi((rungs - 1 - k) as i32);
        let m = m_eval(Complex64::new(e, eta))?;
        vals.push(m.im / std::f64::consts::PI);
    }
    Ok(richardson(&vals).max(0.0))
}

pub type StieltjesFn = dyn Fn(Complex64) -> Result<Complex64> + Send + Sync;

/// A sampled density with an attached Stieltjes evaluator and its z-derivative.
///
/// The grid stores a piecewise-linear interpolant of the absolutely continuous
/// part; `atoms` carries point masses (used for initial data of the free
/// convolution and for far-field padding of particle systems). The derivative
/// is what makes Newton iterations on subordination equations robust near
/// cusps, so every constructor wires an exact one where available.
#[derive(Clone)]
pub struct DensityProfile {
    pub grid: Vec<f64>,
    pub rho: Vec<f64>,
    pub atoms: Vec<(f64, f64)>,
    pub total_mass: f64,
    stieltjes: Arc<StieltjesFn>,
    stieltjes_prime: Arc<StieltjesFn>,
    cumulative: Arc<OnceLock<Vec<f64>>>,
}

impl std::fmt::Debug for DensityProfile {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("DensityProfile")
            .field("grid_len", &self.grid.len())
            .field("atoms", &self.atoms.len())
            .field("total_mass", &self.total_mass)
            .finish()
    }
}

fn check_grid(grid: &[f64]) {
    assert!(grid.windows(2).all(|w| w[1] > w[0]), "grid must be strictly increasing");
}

/// Closed-form integral of a linear density panel against 1/(x - z).
fn panel_stieltjes(x0: f64, x1: f64, r0: f64, r1: f64, z: Complex64) -> Complex64 {
    let b = (r1 - r0) / (x1 - x0);
    let log_term = if z.im != 0.0 {
        ((x1 - z) / (x0 - z)).ln()
    } else {
        // real z outside (x0, x1): both factors share a sign
        Complex64::new(((x1 - z.re) / (x0 - z.re)).abs().ln(), 0.0)
    };
    b * (x1 - x0) + (r0 - b * (x0 - z)) * log_term
}

/// Principal-value panel integral for real z strictly inside [x0, x1].
fn panel_stieltjes_pv(x0: f64, x1: f64, r0: f64, r1: f64, e: f64) -> f64 {
    let b = (r1 - r0) / (x1 - x0);
    let a_at_e = r0 + b * (e - x0);
    b * (x1 - x0) + a_at_e * ((x1 - e).abs() / (x0 - e).abs()).ln()
}

/// Closed-form integral of a linear density panel against 1/(x - z)^2.
fn panel_stieltjes_prime(x0: f64, x1: f64, r0: f64, r1: f64, z: Complex64) -> Complex64 {
    let b = (r1 - r0) / (x1 - x0);
    let log_term = if z.im != 0.0 {
        ((x1 - z) / (x0 - z)).ln()
    } else {
        Complex64::new(((x1 - z.re) / (x0 - z.re)).abs().ln(), 0.0)
    };
    b * log_term + (r0 - b * (x0 - z)) * (1.0 / (x0 - z) - 1.0 / (x1 - z))
}

impl DensityProfile {
    /// Grid-backed profile; the Stieltjes evaluator integrates the interpolant.
    pub fn from_grid(grid: Vec<f64>, rho: Vec<f64>) -> Self {
        Self::from_grid_atoms(grid, rho, Vec::new())
    }

    pub fn from_grid_atoms(grid: Vec<f64>, rho: Vec<f64>, atoms: Vec<(f64, f64)>) -> Self {
        check_grid(&grid);
        assert_eq!(grid.len(), rho.len());
        let mass = trapezoid(&grid, &rho) + atoms.iter().map(|(_, w)| w).sum::<f64>();
        let (g, r, at) = (grid.clone(), rho.clone(), atoms.clone());
        let stieltjes: Arc<StieltjesFn> = Arc::new(move |z| grid_stieltjes(&g, &r, &at, z));
        let (g, r, at) = (grid.clone(), rho.clone(), atoms.clone());
        let stieltjes_prime: Arc<StieltjesFn> = Arc::new(move |z| grid_stieltjes_prime(&g, &r, &at, z));
        Self {
            grid,
            rho,
            atoms,
            total_mass: mass,
            stieltjes,
            stieltjes_prime,
            cumulative: Arc::new(OnceLock::new()),
        }
    }

    /// Grid-backed profile with exact external evaluators (e.g. a Dyson solve).
    pub fn with_evaluator(
        grid: Vec<f64>,
        rho: Vec<f64>,
        total_mass: f64,
        eval: Arc<StieltjesFn>,
        eval_prime: Arc<StieltjesFn>,
    ) -> Self {
        check_grid(&grid);
        assert_eq!(grid.len(), rho.len());
        Self {
            grid,
            rho,
            atoms: Vec::new(),
            total_mass,
            stieltjes: eval,
            stieltjes_prime: eval_prime,
            cumulative: Arc::new(OnceLock::new()),
        }
    }

    /// Purely atomic measure.
    pub fn from_atoms(atoms: Vec<(f64, f64)>) -> Self {
        let mass = atoms.iter().map(|(_, w)| w).sum();
        let at = atoms.clone();
        let stieltjes: Arc<StieltjesFn> = Arc::new(move |z| grid_stieltjes(&[], &[], &at, z));
        let at = atoms.clone();
        let stieltjes_prime: Arc<StieltjesFn> = Arc::new(move |z| grid_stieltjes_prime(&[], &[], &at, z));
        Self {
            grid: Vec::new(),
            rho: Vec::new(),
            atoms,
            total_mass: mass,
            stieltjes,
            stieltjes_prime,
            cumulative: Arc::new(OnceLock::new()),
        }
    }

    /// Semicircle density of the given variance, with its closed-form transform
    /// m(z) = (-z + sqrt(z^2 - 4v)) / (2v). The grid is cosine-graded so the
    /// square-root edges integrate cleanly.
    pub fn semicircle(variance: f64, points: usize) -> Self {
        assert!(variance > 0.0);
        let edge = 2.0 * variance.sqrt();
        let n = points.max(16);
        let grid: Vec<f64> = (0..n)
            .map(|i| -edge * (std::f64::consts::PI * i as f64 / (n - 1) as f64).cos())
            .collect();
        let rho: Vec<f64> = grid
            .iter()
            .map(|&x| {
                let d: f64 = 4.0 * variance - x * x;
                if d > 0.0 { d.sqrt() / (2.0 * std::f64::consts::PI * variance) } else { 0.0 }
            })
            .collect();
        let v = variance;
        let eval: Arc<StieltjesFn> = Arc::new(move |z| Ok(semicircle_m(v, z)));
        let eval_prime: Arc<StieltjesFn> = Arc::new(move |z| {
            let disc = (z * z - 4.0 * v).sqrt();
            let root = if (disc * z.conj()).re >= 0.0 { disc } else { -disc };
            Ok((-1.0 + z / root) / (2.0 * v))
        });
        let mut p = Self::with_evaluator(grid, rho, 1.0, eval, eval_prime);
        p.total_mass = 1.0;
        p
    }

    /// Evaluate the attached Stieltjes transform.
    pub fn stieltjes(&self, z: Complex64) -> Result<Complex64> {
        (self.stieltjes)(z)
    }

    /// Evaluate d/dz of the attached Stieltjes transform.
    pub fn stieltjes_prime(&self, z: Complex64) -> Result<Complex64> {
        (self.stieltjes_prime)(z)
    }

    pub fn stieltjes_arc(&self) -> Arc<StieltjesFn> {
        self.stieltjes.clone()
    }

    pub fn stieltjes_prime_arc(&self) -> Arc<StieltjesFn> {
        self.stieltjes_prime.clone()
    }

    /// Linear interpolation of the sampled density (0 outside the grid hull).
    pub fn rho_at(&self, e: f64) -> f64 {
        if self.grid.is_empty() {
            return 0.0;
        }
        let n = self.grid.len();
        if e <= self.grid[0] || e >= self.grid[n - 1] {
            return 0.0;
        }
        let idx = match self.grid.binary_search_by(|g| g.partial_cmp(&e).unwrap()) {
            Ok(i) => return self.rho[i],
            Err(i) => i,
        };
        let (x0, x1) = (self.grid[idx - 1], self.grid[idx]);
        let (r0, r1) = (self.rho[idx - 1], self.rho[idx]);
        r0 + (r1 - r0) * (e - x0) / (x1 - x0)
    }

    /// Cumulative mass of the interpolant from the left end of the grid,
    /// excluding atoms (cached).
    pub(crate) fn cumulative(&self) -> &[f64] {
        self.cumulative.get_or_init(|| {
            let mut c = Vec::with_capacity(self.grid.len());
            let mut acc = 0.0;
            c.push(0.0);
            for i in 1..self.grid.len() {
                acc += 0.5 * (self.rho[i] + self.rho[i - 1]) * (self.grid[i] - self.grid[i - 1]);
                c.push(acc);
            }
            c
        })
    }

    /// Mass of the measure on (-inf, e].
    pub fn mass_below(&self, e: f64) -> f64 {
        let atom_mass: f64 = self.atoms.iter().filter(|(p, _)| *p <= e).map(|(_, w)| w).sum();
        if self.grid.is_empty() {
            return atom_mass;
        }
        let n = self.grid.len();
        let cum = self.cumulative();
        let grid_mass = if e <= self.grid[0] {
            0.0
        } else if e >= self.grid[n - 1] {
            cum[n - 1]
        } else {
            let idx = self.grid.partition_point(|g| *g < e);
            let (x0, x1) = (self.grid[idx - 1], self.grid[idx]);
            let (r0, r1) = (self.rho[idx - 1], self.rho[idx]);
            let t = e - x0;
            let b = (r1 - r0) / (x1 - x0);
            cum[idx - 1] + r0 * t + 0.5 * b * t * t
        };
        grid_mass + atom_mass
    }

    pub fn grid_hull(&self) -> Option<(f64, f64)> {
        if self.grid.is_empty() {
            None
        } else {
            Some((self.grid[0], *self.grid.last().unwrap()))
        }
    }
}

pub fn trapezoid(grid: &[f64], rho: &[f64]) -> f64 {
    grid.windows(2)
        .zip(rho.windows(2))
        .map(|(x, r)| 0.5 * (r[0] + r[1]) * (x[1] - x[0]))
        .sum()
}

pub(crate) fn semicircle_m(variance: f64, z: Complex64) -> Complex64 {
    // branch with Im m > 0 on the upper half-plane
    let disc = (z * z - 4.0 * variance).sqrt();
    let root = if (disc * z.conj()).re >= 0.0 { disc } else { -disc };
    (-z + root) / (2.0 * variance)
}

fn grid_stieltjes(grid: &[f64], rho: &[f64], atoms: &[(f64, f64)], z: Complex64) -> Result<Complex64> {
    if z.im < 0.0 {
        return Err(CuspError::DomainError("lower half-plane evaluation".into()));
    }
    let mut total = Complex64::new(0.0, 0.0);
    if z.im == 0.0 {
        // only legal strictly outside the grid hull and away from atoms
        if !grid.is_empty() && z.re > grid[0] && z.re < grid[grid.len() - 1] {
            return Err(CuspError::SingularEvaluation(z.re));
        }
    }
    for i in 1..grid.len() {
        total += panel_stieltjes(grid[i - 1], grid[i], rho[i - 1], rho[i], z);
    }
    for &(p, w) in atoms {
        let d = p - z;
        if d.norm() == 0.0 {
            return Err(CuspError::SingularEvaluation(p));
        }
        total += w / d;
    }
    Ok(total)
}

fn grid_stieltjes_prime(
    grid: &[f64],
    rho: &[f64],
    atoms: &[(f64, f64)],
    z: Complex64,
) -> Result<Complex64> {
    if z.im < 0.0 {
        return Err(CuspError::DomainError("lower half-plane evaluation".into()));
    }
    if z.im == 0.0 && !grid.is_empty() && z.re > grid[0] && z.re < grid[grid.len() - 1] {
        return Err(CuspError::SingularEvaluation(z.re));
    }
    let mut total = Complex64::new(0.0, 0.0);
    for i in 1..grid.len() {
        total += panel_stieltjes_prime(grid[i - 1], grid[i], rho[i - 1], rho[i], z);
    }
    for &(p, w) in atoms {
        let d = p - z;
        if d.norm() == 0.0 {
            return Err(CuspError::SingularEvaluation(p));
        }
        total += w / (d * d);
    }
    Ok(total)
}

/// Stieltjes transform of a sampled profile at z (upper half-plane, or real z
/// strictly outside the support).
pub fn stieltjes_of_profile(profile: &DensityProfile, z: Complex64) -> Result<Complex64> {
    grid_stieltjes(&profile.grid, &profile.rho, &profile.atoms, z)
}

/// Principal-value transform at a real energy inside the support.
pub fn stieltjes_of_profile_pv(profile: &DensityProfile, e: f64) -> Result<f64> {
    let grid = &profile.grid;
    let rho = &profile.rho;
    let n = grid.len();
    let mut total = 0.0;
    let mut i = 1;
    while i < n {
        let (x0, x1) = (grid[i - 1], grid[i]);
        let (r0, r1) = (rho[i - 1], rho[i]);
        let h = x1 - x0;
        let b = (r1 - r0) / h;
        if e > x0 + 1e-12 * h && e < x1 - 1e-12 * h {
            total += panel_stieltjes_pv(x0, x1, r0, r1, e);
            i += 1;
        } else if (e - x1).abs() <= 1e-12 * h && i + 1 < n {
            // e sits on an interior node: the log singularities of the two
            // adjacent panels cancel against each other
            let (x2, r2) = (grid[i + 1], rho[i + 1]);
            let b_right = (r2 - r1) / (x2 - x1);
            total += b * (e - x0) + b_right * (x2 - e) + r1 * ((x2 - e) / (e - x0)).abs().ln();
            i += 2;
        } else if (e - x0).abs() <= 1e-12 * h || (e - x1).abs() <= 1e-12 * h {
            // e on a boundary node of the grid: finite only if the density
            // vanishes there
            let r_at = if (e - x0).abs() <= 1e-12 * h { r0 } else { r1 };
            if r_at != 0.0 {
                return Err(CuspError::SingularEvaluation(e));
            }
            total += b * h;
            i += 1;
        } else {
            total += panel_stieltjes(x0, x1, r0, r1, Complex64::new(e, 0.0)).re;
            i += 1;
        }
    }
    for &(p, w) in &profile.atoms {
        if p == e {
            return Err(CuspError::SingularEvaluation(p));
        }
        total += w / (p - e);
    }
    Ok(total)
}

/// Build a sampled density profile from any Stieltjes evaluator by eta-ladder
/// extrapolation on an adaptively refined grid.
pub fn density_from_stieltjes(
    m_eval: Arc<StieltjesFn>,
    m_eval_prime: Arc<StieltjesFn>,
    window: (f64, f64),
    resolution: f64,
    total_mass: f64,
    cfg: &NumericConfig,
) -> Result<DensityProfile> {
    if !(window.1 > window.0) {
        return Err(CuspError::DomainError("empty window".into()));
    }
    if resolution <= 0.0 {
        return Err(CuspError::DomainError("resolution must be positive".into()));
    }
    let eta_min = resolution / 10.0;
    let rho_of = |e: f64| density_at(&*m_eval, e, eta_min, cfg.ladder_rungs);

    // coarse pass
    let coarse = resolution * 4.0;
    let n0 = (((window.1 - window.0) / coarse).ceil() as usize).clamp(8, 100_000) + 1;
    let mut grid: Vec<f64> = (0..n0)
        .map(|i| window.0 + (window.1 - window.0) * i as f64 / (n0 - 1) as f64)
        .collect();
    let mut rho: Vec<f64> = Vec::with_capacity(grid.len());
    for &e in &grid {
        rho.push(rho_of(e)?);
    }

    // refine cells with a large density jump until spacing reaches `resolution/4`
    let max_rho = rho.iter().cloned().fold(0.0, f64::max).max(1e-300);
    let min_h = resolution / 4.0;
    for _pass in 0..6 {
        let mut new_grid = Vec::with_capacity(grid.len() * 2);
        let mut new_rho = Vec::with_capacity(grid.len() * 2);
        let mut refined = false;
        for i in 0..grid.len() - 1 {
            new_grid.push(grid[i]);
            new_rho.push(rho[i]);
            let h = grid[i + 1] - grid[i];
            if h > min_h && (rho[i + 1] - rho[i]).abs() > 0.02 * max_rho {
                let mid = 0.5 * (grid[i] + grid[i + 1]);
                new_grid.push(mid);
                new_rho.push(rho_of(mid)?);
                refined = true;
            }
        }
        new_grid.push(*grid.last().unwrap());
        new_rho.push(*rho.last().unwrap());
        grid = new_grid;
        rho = new_rho;
        if !refined {
            break;
        }
    }
    Ok(DensityProfile::with_evaluator(grid, rho, total_mass, m_eval, m_eval_prime))
}

/// Self-consistent density of states of an ensemble on a window.
pub fn scdos(
    spec: &EnsembleSpec,
    window: (f64, f64),
    resolution: f64,
    cfg: &NumericConfig,
) -> Result<DensityProfile> {
    spec.validate(cfg)?;
    let spec_arc = Arc::new(spec.clone());
    let cfg_arc = Arc::new(cfg.clone());
    let (s, c) = (spec_arc.clone(), cfg_arc.clone());
    let eval: Arc<StieltjesFn> = Arc::new(move |z| solve_dyson_average(&s, z, &c).map(|p| p.0));
    let eval_prime: Arc<StieltjesFn> =
        Arc::new(move |z| solve_dyson_average(&spec_arc, z, &cfg_arc).map(|p| p.1));
    density_from_stieltjes(eval, eval_prime, window, resolution, 1.0, cfg)
}

/// Locate the support intervals of a density evaluator inside a window by
/// threshold bisection on an extrapolated eta ladder.
pub fn support_intervals(
    m_eval: &dyn Fn(Complex64) -> Result<Complex64>,
    window: (f64, f64),
    cfg: &NumericConfig,
) -> Result<Vec<(f64, f64)>> {
    let eta = cfg.feature_eta;
    let rho_of = |e: f64| density_at(m_eval, e, eta, cfg.feature_rungs);
    let thr = cfg.density_floor * (window.1 - window.0).max(1.0);
    let n = 201;
    let xs: Vec<f64> = (0..n)
        .map(|i| window.0 + (window.1 - window.0) * i as f64 / (n - 1) as f64)
        .collect();
    let mut inside: Vec<bool> = Vec::with_capacity(n);
    for &x in &xs {
        inside.push(rho_of(x)? > thr);
    }
    let bisect = |mut lo: f64, mut hi: f64, lo_in: bool| -> Result<f64> {
        // invariant: state flips between lo and hi
        while hi - lo > cfg.edge_xtol {
            let mid = 0.5 * (lo + hi);
            if (rho_of(mid)? > thr) == lo_in {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        Ok(0.5 * (lo + hi))
    };
    let mut intervals = Vec::new();
    let mut open: Option<f64> = None;
    for i in 0..n {
        match (open, inside[i]) {
            (None, true) => {
                let left = if i == 0 { xs[0] } else { bisect(xs[i - 1], xs[i], false)? };
                open = Some(left);
            }
            (Some(left), false) => {
                let right = bisect(xs[i - 1], xs[i], true)?;
                intervals.push((left, right));
                open = None;
            }
            _ => {}
        }
    }
    if let Some(left) = open {
        intervals.push((left, xs[n - 1]));
    }
    Ok(intervals)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg() -> NumericConfig {
        NumericConfig::default()
    }

    #[test]
    fn semicircle_average_at_i() {
        // closed form: m(i) = (-i + sqrt(-1 - 4)) / 2 = i (sqrt(5) - 1) / 2
        let spec = EnsembleSpec::wigner(64, 1.0, SymmetryClass::Orthogonal);
        let g = solve_dyson(&spec, Complex64::new(0.0, 1.0), &cfg()).unwrap();
        let expect = (5f64.sqrt() - 1.0) / 2.0;
        let avg = g.average();
        assert!((avg.re).abs() < 1e-12);
        assert!((avg.im - expect).abs() < 1e-12, "got {avg}");
        assert!(g.residual <= 1e-12);
    }

    #[test]
    fn semicircle_density_at_zero() {
        let spec = EnsembleSpec::wigner(32, 1.0, SymmetryClass::Orthogonal);
        let c = cfg();
        let eval = |z: Complex64| solve_dyson(&spec, z, &c).map(|g| g.average());
        let rho0 = density_at(&eval, 0.0, 1e-5, 8).unwrap();
        assert!(
            (rho0 - 1.0 / std::f64::consts::PI).abs() < 1e-7,
            "rho(0) = {rho0}"
        );
    }

    #[test]
    fn large_z_normalisation() {
        let spec = EnsembleSpec::two_valued(10, 5, 0.7, SymmetryClass::Unitary);
        let z = Complex64::new(0.0, 1e3);
        let g = solve_dyson(&spec, z, &cfg()).unwrap();
        let expect = -1.0 / z;
        assert!((g.average() - expect).norm() < 1e-5);
    }

    #[test]
    fn herglotz_everywhere() {
        let spec = EnsembleSpec::two_valued(50, 25, 1.0, SymmetryClass::Orthogonal);
        for &re in &[-2.0, -0.5, 0.0, 0.9, 2.5] {
            for &im in &[1e-8, 1e-4, 0.1, 10.0] {
                let g = solve_dyson(&spec, Complex64::new(re, im), &cfg()).unwrap();
                assert!(g.m.iter().all(|m| m.im > 0.0));
            }
        }
    }

    #[test]
    fn full_variance_profile_matches_flat() {
        let n = 24;
        let c = 0.8;
        let mut s = vec![0.0; n * n];
        for v in s.iter_mut() {
            *v = c / n as f64;
        }
        let a: Vec<f64> = (0..n).map(|i| if i < n / 2 { 1.0 } else { -1.0 }).collect();
        let full = EnsembleSpec { a: a.clone(), variance: VarianceProfile::Full(s), symmetry: SymmetryClass::Orthogonal };
        let flat = EnsembleSpec { a, variance: VarianceProfile::Flat(c), symmetry: SymmetryClass::Orthogonal };
        let z = Complex64::new(0.3, 1e-3);
        let gf = solve_dyson(&full, z, &cfg()).unwrap();
        let gl = solve_dyson(&flat, z, &cfg()).unwrap();
        assert!((gf.average() - gl.average()).norm() < 1e-9);
    }

    #[test]
    fn zero_variance_is_rejected() {
        let spec = EnsembleSpec::wigner(8, 0.0, SymmetryClass::Orthogonal);
        let err = solve_dyson(&spec, Complex64::new(0.0, 1.0), &cfg()).unwrap_err();
        assert!(matches!(err, CuspError::InvalidSpec(_)));
    }

    #[test]
    fn lower_half_plane_rejected() {
        let spec = EnsembleSpec::wigner(8, 1.0, SymmetryClass::Orthogonal);
        assert!(solve_dyson(&spec, Complex64::new(0.0, -1.0), &cfg()).is_err());
    }

    #[test]
    fn scdos_semicircle_support() {
        let spec = EnsembleSpec::wigner(16, 1.0, SymmetryClass::Orthogonal);
        let c = cfg();
        let profile = scdos(&spec, (-3.0, 3.0), 1e-2, &c).unwrap();
        assert!((profile.rho_at(0.0) - 1.0 / std::f64::consts::PI).abs() < 1e-4);
        let spec2 = spec.clone();
        let c2 = c.clone();
        let eval = move |z: Complex64| solve_dyson(&spec2, z, &c2).map(|g| g.average());
        let mut sharp = c.clone();
        sharp.feature_eta = 1e-8;
        let iv = support_intervals(&eval, (-3.0, 3.0), &sharp).unwrap();
        assert_eq!(iv.len(), 1);
        assert!((iv[0].0 + 2.0).abs() < 1e-4, "left edge {}", iv[0].0);
        assert!((iv[0].1 - 2.0).abs() < 1e-4, "right edge {}", iv[0].1);
    }

    #[test]
    fn profile_mass_and_stieltjes() {
        let p = DensityProfile::semicircle(1.0, 4001);
        let grid_mass = trapezoid(&p.grid, &p.rho);
        assert!((grid_mass - 1.0).abs() < 1e-6);
        // quadrature against the interpolant reproduces the closed form
        let z = Complex64::new(0.0, 1.0);
        let quad = stieltjes_of_profile(&p, z).unwrap();
        let exact = semicircle_m(1.0, z);
        assert!((quad - exact).norm() < 1e-6, "quad {quad} exact {exact}");
    }

    #[test]
    fn atom_stieltjes() {
        let p = DensityProfile::from_atoms(vec![(0.0, 1.0)]);
        let z = Complex64::new(0.0, 2.0);
        let m = stieltjes_of_profile(&p, z).unwrap();
        // 1/(0 - 2i) = i/2
        assert!((m - Complex64::new(0.0, 0.5)).norm() < 1e-15);
        let large = Complex64::new(0.0, 1e3);
        assert!((stieltjes_of_profile(&p, large).unwrap() - (-1.0 / large)).norm() < 1e-9);
    }

    #[test]
    fn pv_mode_and_singular_error() {
        let p = DensityProfile::semicircle(1.0, 8001);
        // inside the support the plain transform must refuse real z
        assert!(matches!(
            stieltjes_of_profile(&p, Complex64::new(0.5, 0.0)),
            Err(CuspError::SingularEvaluation(_))
        ));
        // PV value: Re m(E) for the semicircle is -E/2 inside the support
        let pv = stieltjes_of_profile_pv(&p, 0.5).unwrap();
        assert!((pv + 0.25).abs() < 1e-4, "pv {pv}");
    }

    #[test]
    fn mass_below_interpolates() {
        let p = DensityProfile::from_grid(vec![0.0, 1.0], vec![1.0, 1.0]);
        assert!((p.mass_below(0.25) - 0.25).abs() < 1e-15);
        assert!((p.mass_below(2.0) - 1.0).abs() < 1e-15);
    }

    #[test]
    fn richardson_kills_linear_term() {
        // f(eta) = 3 + 2 eta + eta^2
        let rungs = 6;
        let eta_min = 1e-3;
        let vals: Vec<f64> = (0..rungs)
            .map(|k| {
                let eta = eta_min * (2f64).powi((rungs - 1 - k) as i32);
                3.0 + 2.0 * eta + eta * eta
            })
            .collect();
        assert!((richardson(&vals) - 3.0).abs() < 1e-12);
    }
}
