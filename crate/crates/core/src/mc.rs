//! Monte-Carlo sampling of deformed Wigner-type matrices and statistical
//! comparison of rescaled near-cusp eigenvalues against kernel predictions
//! (complex Hermitian) or against a second ensemble (real symmetric).

use ndarray::Array2;
use ndarray_linalg::{EigValsh, UPLO};
use num_complex::Complex64;
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::config::{McConfig, PearceyConfig};
use crate::density::{EnsembleSpec, SymmetryClass, VarianceProfile};
use crate::error::{CuspError, Result};
use crate::scflow::CuspReport;

/// Entry distribution of the Wigner-type part.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MatrixLaw {
    Gaussian,
    /// Centered +-sqrt(s_ij) coin flips: bounded moments, maximally
    /// non-Gaussian.
    BernoulliMixture,
}

/// One diagonalised sample.
#[derive(Clone, Debug)]
pub struct RunRecord {
    pub spec: EnsembleSpec,
    pub seed: u64,
    pub t_gauss: f64,
    pub law: MatrixLaw,
    pub eigenvalues: Vec<f64>,
}

fn s_entry(spec: &EnsembleSpec, i: usize, j: usize) -> f64 {
    match &spec.variance {
        VarianceProfile::Flat(c) => c / spec.n() as f64,
        VarianceProfile::Full(s) => s[i * spec.n() + j],
    }
}

fn draw_real(rng: &mut ChaCha8Rng, law: MatrixLaw, variance: f64) -> f64 {
    match law {
        MatrixLaw::Gaussian => {
            let g: f64 = rng.sample(StandardNormal);
            g * variance.sqrt()
        }
        MatrixLaw::BernoulliMixture => {
            if rng.random::<bool>() {
                variance.sqrt()
            } else {
                -variance.sqrt()
            }
        }
    }
}

/// Sample H = diag(a) + W + sqrt(t_gauss) G and diagonalise.
///
/// Off-diagonal variances follow the spec profile; diagonal variance is
/// 2 s_ii in the real symmetric class and s_ii (real entry) in the complex
/// Hermitian class. G is a standard Gaussian matrix of the same class.
pub fn sample(spec: &EnsembleSpec, seed: u64, t_gauss: f64, law: MatrixLaw) -> Result<RunRecord> {
    let n = spec.n();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let eigenvalues = match spec.symmetry {
        SymmetryClass::Orthogonal => {
            let mut h = Array2::<f64>::zeros((n, n));
            for i in 0..n {
                for j in i..n {
                    let s = s_entry(spec, i, j);
                    let mut v = if i == j {
                        spec.a[i] + draw_real(&mut rng, law, 2.0 * s)
                    } else {
                        draw_real(&mut rng, law, s)
                    };
                    if t_gauss > 0.0 {
                        let g: f64 = rng.sample(StandardNormal);
                        let gv = if i == j { 2.0 / n as f64 } else { 1.0 / n as f64 };
                        v += (t_gauss * gv).sqrt() * g;
                    }
                    h[[i, j]] = v;
                    h[[j, i]] = v;
                }
            }
            h.eigvalsh(UPLO::Upper)
                .map_err(|e| CuspError::EigenFailure(format!("{e}")))?
                .to_vec()
        }
        SymmetryClass::Unitary => {
            let mut h = Array2::<Complex64>::zeros((n, n));
            for i in 0..n {
                for j in i..n {
                    let s = s_entry(spec, i, j);
                    let mut v = if i == j {
                        Complex64::new(spec.a[i] + draw_real(&mut rng, law, s), 0.0)
                    } else {
                        Complex64::new(
                            draw_real(&mut rng, law, s / 2.0),
                            draw_real(&mut rng, law, s / 2.0),
                        )
                    };
                    if t_gauss > 0.0 {
                        let gr: f64 = rng.sample(StandardNormal);
                        if i == j {
                            v += (t_gauss / n as f64).sqrt() * gr;
                        } else {
                            let gi: f64 = rng.sample(StandardNormal);
                            let half = (t_gauss / (2.0 * n as f64)).sqrt();
                            v += Complex64::new(half * gr, half * gi);
                        }
                    }
                    h[[i, j]] = v;
                    h[[j, i]] = v.conj();
                }
            }
            h.eigvalsh(UPLO::Upper)
                .map_err(|e| CuspError::EigenFailure(format!("{e}")))?
                .to_vec()
        }
    };
    Ok(RunRecord { spec: spec.clone(), seed, t_gauss, law, eigenvalues })
}

/// Independent seeds across workers: worker k derives its stream from
/// (base_seed, k) through the splittable generator.
pub fn sample_many(
    spec: &EnsembleSpec,
    base_seed: u64,
    count: usize,
    t_gauss: f64,
    law: MatrixLaw,
) -> Result<Vec<RunRecord>> {
    (0..count)
        .into_par_iter()
        .map(|k| {
            let seed = derived_seed(base_seed, k as u64);
            sample(spec, seed, t_gauss, law)
        })
        .collect()
}

pub fn derived_seed(base: u64, k: u64) -> u64 {
    let mut x = base ^ k.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

/// Histogram of pooled rescaled eigenvalues x = gamma N^(3/4) (lambda - b).
#[derive(Clone, Debug)]
pub struct RescaledStatistics {
    pub samples: Vec<f64>,
    pub window: f64,
    pub bin_edges: Vec<f64>,
    pub counts: Vec<u64>,
    pub records: usize,
}

/// Pool and bin the rescaled eigenvalues of a family of records.
pub fn rescale(
    records: &[RunRecord],
    cusp: &CuspReport,
    window: f64,
    cfg: &McConfig,
) -> Result<RescaledStatistics> {
    if records.is_empty() {
        return Err(CuspError::EmptyWindow);
    }
    let n = records[0].spec.n();
    let scale = cusp.gamma * (n as f64).powf(0.75);
    let mut samples = Vec::new();
    for r in records {
        for &l in &r.eigenvalues {
            let x = scale * (l - cusp.b);
            if x.abs() <= window {
                samples.push(x);
            }
        }
    }
    if samples.is_empty() {
        return Err(CuspError::EmptyWindow);
    }
    samples.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let bins = ((samples.len() as f64 / cfg.min_bin_count).floor() as usize)
        .clamp(cfg.min_bins, cfg.max_bins);
    let bin_edges: Vec<f64> =
        (0..=bins).map(|k| -window + 2.0 * window * k as f64 / bins as f64).collect();
    let mut counts = vec![0u64; bins];
    for &x in &samples {
        let k = (((x + window) / (2.0 * window) * bins as f64) as usize).min(bins - 1);
        counts[k] += 1;
    }
    Ok(RescaledStatistics { samples, window, bin_edges, counts, records: records.len() })
}

#[derive(Clone, Debug)]
pub struct BinReport {
    pub center: f64,
    pub observed: f64,
    pub expected: f64,
    pub z: f64,
}

#[derive(Clone, Debug)]
pub struct PearceyComparison {
    pub bins: Vec<BinReport>,
    pub max_abs_z: f64,
    pub chi2: f64,
    pub dof: usize,
    pub p_value: f64,
}

/// Per-bin Poisson z-scores and a chi-squared statistic of the empirical
/// density against the equal-time kernel diagonal at the given parameter.
pub fn compare_to_pearcey(
    stats: &RescaledStatistics,
    alpha: f64,
    tol: f64,
    pcfg: &PearceyConfig,
) -> Result<PearceyComparison> {
    let mut bins = Vec::with_capacity(stats.counts.len());
    let mut chi2 = 0.0;
    let mut max_abs_z: f64 = 0.0;
    for (k, &c) in stats.counts.iter().enumerate() {
        let (a, b) = (stats.bin_edges[k], stats.bin_edges[k + 1]);
        let mid = 0.5 * (a + b);
        // Simpson over the bin
        let ka = crate::pearcey::kernel(alpha, alpha, a, a, tol, pcfg)?.value.re;
        let km = crate::pearcey::kernel(alpha, alpha, mid, mid, tol, pcfg)?.value.re;
        let kb = crate::pearcey::kernel(alpha, alpha, b, b, tol, pcfg)?.value.re;
        let expected = stats.records as f64 * (b - a) * (ka + 4.0 * km + kb) / 6.0;
        let z = (c as f64 - expected) / expected.max(1e-12).sqrt();
        chi2 += z * z;
        max_abs_z = max_abs_z.max(z.abs());
        bins.push(BinReport { center: mid, observed: c as f64, expected, z });
    }
    let dof = stats.counts.len().saturating_sub(1).max(1);
    let p_value = chi2_sf(chi2, dof as f64);
    Ok(PearceyComparison { bins, max_abs_z, chi2, dof, p_value })
}

#[derive(Clone, Debug)]
pub struct TwoSampleReport {
    pub max_abs_z: f64,
    pub ks_stat: f64,
    pub ks_p: f64,
}

/// Two-sample comparison: per-bin z-scores on the shared binning and a
/// Kolmogorov-Smirnov test on the pooled points.
pub fn compare_two_ensembles(a: &RescaledStatistics, b: &RescaledStatistics) -> Result<TwoSampleReport> {
    if a.samples.is_empty() || b.samples.is_empty() {
        return Err(CuspError::EmptyWindow);
    }
    // per-bin z on the binning of `a`, rescaling b's totals
    let ratio = a.samples.len() as f64 / b.samples.len() as f64;
    let bins = a.counts.len();
    let mut counts_b = vec![0u64; bins];
    for &x in &b.samples {
        if x.abs() <= a.window {
            let k = (((x + a.window) / (2.0 * a.window) * bins as f64) as usize).min(bins - 1);
            counts_b[k] += 1;
        }
    }
    let mut max_abs_z: f64 = 0.0;
    for k in 0..bins {
        let na = a.counts[k] as f64;
        let nb = counts_b[k] as f64;
        let var = na + ratio * ratio * nb;
        if var > 0.0 {
            let z = (na - ratio * nb) / var.sqrt();
            max_abs_z = max_abs_z.max(z.abs());
        }
    }
    // two-sample KS on the sorted samples
    let (xs, ys) = (&a.samples, &b.samples);
    let (mut i, mut j) = (0usize, 0usize);
    let mut d: f64 = 0.0;
    while i < xs.len() && j < ys.len() {
        if xs[i] <= ys[j] {
            i += 1;
        } else {
            j += 1;
        }
        let fa = i as f64 / xs.len() as f64;
        let fb = j as f64 / ys.len() as f64;
        d = d.max((fa - fb).abs());
    }
    let ne = (xs.len() * ys.len()) as f64 / (xs.len() + ys.len()) as f64;
    let lambda = (ne.sqrt() + 0.12 + 0.11 / ne.sqrt()) * d;
    Ok(TwoSampleReport { max_abs_z, ks_stat: d, ks_p: ks_q(lambda) })
}

/// Eigenvalues of the same matrix observed along successive independent
/// Gaussian increments H, H + sqrt(t1) G1, H + sqrt(t1) G1 + sqrt(t2-t1) G2, ...
pub fn multi_time_snapshot(
    spec: &EnsembleSpec,
    base_seed: u64,
    taus: &[f64],
    law: MatrixLaw,
) -> Result<Vec<RunRecord>> {
    if taus.windows(2).any(|w| w[1] < w[0]) {
        return Err(CuspError::DomainError("times must be nondecreasing".into()));
    }
    let n = spec.n();
    // base Wigner-type part
    let base = sample_matrix_entries(spec, base_seed, law);
    let mut records = Vec::with_capacity(taus.len());
    let mut increment_acc: Option<Vec<Complex64>> = None;
    let mut prev_tau = 0.0;
    for (k, &tau) in taus.iter().enumerate() {
        let dt = tau - prev_tau;
        if dt > 0.0 || increment_acc.is_none() {
            let inc_seed = derived_seed(base_seed, 1_000_000 + k as u64);
            let inc = gaussian_entries(spec.symmetry, n, inc_seed);
            let acc = increment_acc.get_or_insert_with(|| vec![Complex64::new(0.0, 0.0); n * n]);
            if dt > 0.0 {
                for (a, g) in acc.iter_mut().zip(&inc) {
                    *a += dt.sqrt() * g;
                }
            }
        }
        let acc = increment_acc.as_ref().unwrap();
        let eigenvalues = diagonalise_sum(spec, &base, acc)?;
        records.push(RunRecord { spec: spec.clone(), seed: base_seed, t_gauss: tau, law, eigenvalues });
        prev_tau = tau;
    }
    Ok(records)
}

/// Entries of diag(a) + W as a dense complex matrix (imaginary parts zero in
/// the real class).
fn sample_matrix_entries(spec: &EnsembleSpec, seed: u64, law: MatrixLaw) -> Vec<Complex64> {
    let n = spec.n();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut h = vec![Complex64::new(0.0, 0.0); n * n];
    for i in 0..n {
        for j in i..n {
            let s = s_entry(spec, i, j);
            let v = match spec.symmetry {
                SymmetryClass::Orthogonal => {
                    if i == j {
                        Complex64::new(spec.a[i] + draw_real(&mut rng, law, 2.0 * s), 0.0)
                    } else {
                        Complex64::new(draw_real(&mut rng, law, s), 0.0)
                    }
                }
                SymmetryClass::Unitary => {
                    if i == j {
                        Complex64::new(spec.a[i] + draw_real(&mut rng, law, s), 0.0)
                    } else {
                        Complex64::new(
                            draw_real(&mut rng, law, s / 2.0),
                            draw_real(&mut rng, law, s / 2.0),
                        )
                    }
                }
            };
            h[i * n + j] = v;
            h[j * n + i] = v.conj();
        }
    }
    h
}

/// Standard Gaussian matrix of unit time for the class (GOE: E g_ij^2 = 1/N
/// off-diagonal, 2/N diagonal; GUE: E |g_ij|^2 = 1/N, real diagonal).
fn gaussian_entries(symmetry: SymmetryClass, n: usize, seed: u64) -> Vec<Complex64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut g = vec![Complex64::new(0.0, 0.0); n * n];
    for i in 0..n {
        for j in i..n {
            let v = match symmetry {
                SymmetryClass::Orthogonal => {
                    let x: f64 = rng.sample(StandardNormal);
                    let var = if i == j { 2.0 / n as f64 } else { 1.0 / n as f64 };
                    Complex64::new(var.sqrt() * x, 0.0)
                }
                SymmetryClass::Unitary => {
                    if i == j {
                        let x: f64 = rng.sample(StandardNormal);
                        Complex64::new((1.0 / n as f64).sqrt() * x, 0.0)
                    } else {
                        let xr: f64 = rng.sample(StandardNormal);
                        let xi: f64 = rng.sample(StandardNormal);
                        let half = (1.0 / (2.0 * n as f64)).sqrt();
                        Complex64::new(half * xr, half * xi)
                    }
                }
            };
            g[i * n + j] = v;
            g[j * n + i] = v.conj();
        }
    }
    g
}

fn diagonalise_sum(spec: &EnsembleSpec, a: &[Complex64], b: &[Complex64]) -> Result<Vec<f64>> {
    let n = spec.n();
    match spec.symmetry {
        SymmetryClass::Orthogonal => {
            let mut h = Array2::<f64>::zeros((n, n));
            for i in 0..n {
                for j in 0..n {
                    h[[i, j]] = a[i * n + j].re + b[i * n + j].re;
                }
            }
            Ok(h.eigvalsh(UPLO::Upper)
                .map_err(|e| CuspError::EigenFailure(format!("{e}")))?
                .to_vec())
        }
        SymmetryClass::Unitary => {
            let mut h = Array2::<Complex64>::zeros((n, n));
            for i in 0..n {
                for j in 0..n {
                    h[[i, j]] = a[i * n + j] + b[i * n + j];
                }
            }
            Ok(h.eigvalsh(UPLO::Upper)
                .map_err(|e| CuspError::EigenFailure(format!("{e}")))?
                .to_vec())
        }
    }
}

/// Kolmogorov distribution tail Q(lambda) = 2 sum (-1)^(k-1) exp(-2 k^2 lambda^2).
pub fn ks_q(lambda: f64) -> f64 {
    if lambda < 1e-3 {
        return 1.0;
    }
    let mut q = 0.0;
    let mut sign = 1.0;
    for k in 1..200 {
        let term = (-2.0 * (k as f64) * (k as f64) * lambda * lambda).exp();
        q += sign * term;
        sign = -sign;
        if term < 1e-16 {
            break;
        }
    }
    (2.0 * q).clamp(0.0, 1.0)
}

/// Regularized lower incomplete gamma P(a, x).
fn gamma_p(a: f64, x: f64) -> f64 {
    if x <= 0.0 {
        return 0.0;
    }
    let ln_gamma_a = ln_gamma(a);
    if x < a + 1.0 {
        // series
        let mut term = 1.0 / a;
        let mut sum = term;
        let mut k = a;
        for _ in 0..500 {
            k += 1.0;
            term *= x / k;
            sum += term;
            if term.abs() < sum.abs() * 1e-16 {
                break;
            }
        }
        (sum.ln() + a * x.ln() - x - ln_gamma_a).exp()
    } else {
        // continued fraction for Q, P = 1 - Q
        let mut b = x + 1.0 - a;
        let mut c = 1e300;
        let mut d = 1.0 / b;
        let mut h = d;
        for i in 1..500 {
            let an = -(i as f64) * (i as f64 - a);
            b += 2.0;
            d = an * d + b;
            if d.abs() < 1e-300 {
                d = 1e-300;
            }
            c = b + an / c;
            if c.abs() < 1e-300 {
                c = 1e-300;
            }
            d = 1.0 / d;
            let delta = d * c;
            h *= delta;
            if (delta - 1.0).abs() < 1e-16 {
                break;
            }
        }
        1.0 - (a * x.ln() - x - ln_gamma_a).exp() * h
    }
}

fn ln_gamma(x: f64) -> f64 {
    // Lanczos
    const G: [f64; 9] = [
        0.999_999_999_999_809_93,
        676.520_368_121_885_1,
        -1_259.139_216_722_402_8,
        771.323_428_777_653_13,
        -176.615_029_162_140_6,
        12.507_343_278_686_905,
        -0.138_571_095_265_720_12,
        9.984_369_578_019_572e-6,
        1.505_632_735_149_311_6e-7,
    ];
    if x < 0.5 {
        let pi = std::f64::consts::PI;
        pi.ln() - (pi * x).sin().ln() - ln_gamma(1.0 - x)
    } else {
        let x = x - 1.0;
        let mut a = G[0];
        let t = x + 7.5;
        for (i, &g) in G.iter().enumerate().skip(1) {
            a += g / (x + i as f64);
        }
        0.5 * (2.0 * std::f64::consts::PI).ln() + (x + 0.5) * t.ln() - t + a.ln()
    }
}

/// Chi-squared survival function with k degrees of freedom.
pub fn chi2_sf(x: f64, k: f64) -> f64 {
    (1.0 - gamma_p(0.5 * k, 0.5 * x)).clamp(0.0, 1.0)
}

/// One-sample Kolmogorov distance between sorted samples and a CDF.
pub fn ks_distance_to_cdf(sorted: &[f64], cdf: &dyn Fn(f64) -> f64) -> f64 {
    let n = sorted.len() as f64;
    let mut d: f64 = 0.0;
    for (k, &x) in sorted.iter().enumerate() {
        let f = cdf(x);
        d = d.max((f - k as f64 / n).abs());
        d = d.max(((k + 1) as f64 / n - f).abs());
    }
    d
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::density::EnsembleSpec;

    #[test]
    fn statistics_helpers() {
        // chi-squared table values
        assert!((chi2_sf(10.0, 10.0) - 0.4405).abs() < 1e-3);
        assert!((chi2_sf(18.307, 10.0) - 0.05).abs() < 1e-3);
        assert!(chi2_sf(0.0, 5.0) == 1.0);
        // Kolmogorov tail values
        assert!((ks_q(1.36) - 0.0505).abs() < 2e-3);
        assert!((ks_q(0.5) - 0.9639).abs() < 1e-3);
    }

    #[test]
    fn determinism_and_n1() {
        let spec = EnsembleSpec::wigner(1, 1.0, SymmetryClass::Orthogonal);
        let a = sample(&spec, 7, 0.0, MatrixLaw::Gaussian).unwrap();
        let b = sample(&spec, 7, 0.0, MatrixLaw::Gaussian).unwrap();
        assert_eq!(a.eigenvalues, b.eigenvalues);
        // N = 1: the eigenvalue is a_1 + w_11 (variance 2/N here)
        let spec1 = EnsembleSpec { a: vec![3.0], ..spec };
        let r = sample(&spec1, 11, 0.0, MatrixLaw::Gaussian).unwrap();
        assert_eq!(r.eigenvalues.len(), 1);
        assert!((r.eigenvalues[0] - 3.0).abs() < 6.0);
    }

    #[test]
    fn rescale_is_the_stated_linear_map() {
        let spec = EnsembleSpec::wigner(4, 1.0, SymmetryClass::Orthogonal);
        let rec = RunRecord {
            spec,
            seed: 0,
            t_gauss: 0.0,
            law: MatrixLaw::Gaussian,
            eigenvalues: vec![-0.2, -0.1, 0.1, 0.2],
        };
        let cfg = McConfig::default();
        let cusp = |b: f64, gamma: f64| CuspReport {
            kind: crate::scflow::CuspKind::ExactCusp,
            b,
            gamma,
            t_star: 0.0,
            alpha_pearcey: 0.0,
        };
        let s1 = rescale(std::slice::from_ref(&rec), &cusp(0.0, 1.0), 1e6, &cfg).unwrap();
        let s2 = rescale(std::slice::from_ref(&rec), &cusp(0.0, 2.0), 1e6, &cfg).unwrap();
        for (x1, x2) in s1.samples.iter().zip(&s2.samples) {
            assert!((2.0 * x1 - x2).abs() < 1e-12);
        }
        // shifting b translates all samples by -gamma N^(3/4) delta
        let delta = 0.05;
        let s3 = rescale(std::slice::from_ref(&rec), &cusp(delta, 1.0), 1e6, &cfg).unwrap();
        let shift = 4f64.powf(0.75) * delta;
        for (x1, x3) in s1.samples.iter().zip(&s3.samples) {
            assert!((x1 - shift - x3).abs() < 1e-12);
        }
        // empty window errors
        assert!(matches!(
            rescale(&[rec], &cusp(100.0, 1.0), 1.0, &cfg),
            Err(CuspError::EmptyWindow)
        ));
    }

    #[test]
    fn goe_matches_semicircle_law() {
        // mean empirical spectral distribution vs the semicircle CDF
        let n = 500usize;
        let spec = EnsembleSpec::wigner(n, 1.0, SymmetryClass::Orthogonal);
        let records = sample_many(&spec, 2024, 100, 0.0, MatrixLaw::Gaussian).unwrap();
        let mut all: Vec<f64> = records.iter().flat_map(|r| r.eigenvalues.clone()).collect();
        all.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let cdf = |x: f64| -> f64 {
            if x <= -2.0 {
                0.0
            } else if x >= 2.0 {
                1.0
            } else {
                0.5 + (x * (4.0 - x * x).sqrt() / 4.0 + (x / 2.0).asin()) / std::f64::consts::PI
            }
        };
        let d = ks_distance_to_cdf(&all, &cdf);
        assert!(d < 0.02, "Kolmogorov distance to the semicircle {d}");
    }

    #[test]
    fn two_step_composition_matches_single_shot() {
        // H + sqrt(t2) G  vs  (H + sqrt(t1) G1) + sqrt(t2 - t1) G2 agree in law:
        // compare tr H^2 and tr H^4 over seeds within 3 sigma
        let n = 60usize;
        let spec = EnsembleSpec::two_valued(n, 30, 1.0, SymmetryClass::Orthogonal);
        let trials = 160;
        let (t1, t2) = (0.04, 0.1);
        let mut m2 = (Vec::new(), Vec::new());
        let mut m4 = (Vec::new(), Vec::new());
        for k in 0..trials {
            let one = sample(&spec, derived_seed(9, k), t2, MatrixLaw::Gaussian).unwrap();
            let snaps =
                multi_time_snapshot(&spec, derived_seed(10, k), &[t1, t2], MatrixLaw::Gaussian)
                    .unwrap();
            let two = &snaps[1];
            m2.0.push(one.eigenvalues.iter().map(|l| l * l).sum::<f64>() / n as f64);
            m2.1.push(two.eigenvalues.iter().map(|l| l * l).sum::<f64>() / n as f64);
            m4.0.push(one.eigenvalues.iter().map(|l| l.powi(4)).sum::<f64>() / n as f64);
            m4.1.push(two.eigenvalues.iter().map(|l| l.powi(4)).sum::<f64>() / n as f64);
        }
        let zcheck = |a: &[f64], b: &[f64]| {
            let ma = a.iter().sum::<f64>() / a.len() as f64;
            let mb = b.iter().sum::<f64>() / b.len() as f64;
            let va = a.iter().map(|x| (x - ma) * (x - ma)).sum::<f64>() / (a.len() - 1) as f64;
            let vb = b.iter().map(|x| (x - mb) * (x - mb)).sum::<f64>() / (b.len() - 1) as f64;
            (ma - mb).abs() / (va / a.len() as f64 + vb / b.len() as f64).sqrt()
        };
        assert!(zcheck(&m2.0, &m2.1) < 3.0, "tr H^2 deviates");
        assert!(zcheck(&m4.0, &m4.1) < 3.0, "tr H^4 deviates");
    }

    #[test]
    fn multi_time_structure() {
        let spec = EnsembleSpec::two_valued(24, 12, 1.0, SymmetryClass::Unitary);
        // all-zero times: identical spectra
        let snaps = multi_time_snapshot(&spec, 5, &[0.0, 0.0, 0.0], MatrixLaw::Gaussian).unwrap();
        assert_eq!(snaps[0].eigenvalues, snaps[1].eigenvalues);
        assert_eq!(snaps[1].eigenvalues, snaps[2].eigenvalues);
        // increments decorrelate: spectra at different times differ
        let snaps = multi_time_snapshot(&spec, 5, &[0.0, 0.05], MatrixLaw::Gaussian).unwrap();
        assert_ne!(snaps[0].eigenvalues, snaps[1].eigenvalues);
        // decreasing times rejected
        assert!(multi_time_snapshot(&spec, 5, &[0.1, 0.0], MatrixLaw::Gaussian).is_err());
    }

    #[test]
    fn self_comparison_passes_ks() {
        let n = 80usize;
        let spec = EnsembleSpec::two_valued(n, 40, 1.0, SymmetryClass::Orthogonal);
        let ra = sample_many(&spec, 1, 40, 0.0, MatrixLaw::Gaussian).unwrap();
        let rb = sample_many(&spec, 2, 40, 0.0, MatrixLaw::Gaussian).unwrap();
        let cusp = CuspReport {
            kind: crate::scflow::CuspKind::ExactCusp,
            b: 0.0,
            gamma: 1.0,
            t_star: 0.0,
            alpha_pearcey: 0.0,
        };
        let cfg = McConfig::default();
        let sa = rescale(&ra, &cusp, 3.0, &cfg).unwrap();
        let sb = rescale(&rb, &cusp, 3.0, &cfg).unwrap();
        let rep = compare_two_ensembles(&sa, &sb).unwrap();
        assert!(rep.ks_p > 0.01, "self comparison failed: p = {}", rep.ks_p);
    }
}
