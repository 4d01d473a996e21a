//! Quantiles, semiquantiles, counting functions, fluctuation scales, and the
//! quantile-linear interpolation between two near-cusp densities.
//!
//! Quantiles are always measured from a feature reference point (a gap edge
//! or the implicit minimum): gamma_i carries signed mass i/N between the
//! reference point and itself. Semiquantiles use (i - 1/2)/N for i >= 1 and
//! (i + 1/2)/N for i <= -1; index 0 does not exist for them.
//!
//! The interpolation of two densities is defined through the inverse counting
//! functions: phi_alpha = alpha phi_x + (1 - alpha) phi_y, which makes every
//! quantile of the interpolated density the convex combination of the input
//! quantiles, and forces the harmonic combination rule on the density itself.

use crate::config::NumericConfig;
use crate::density::DensityProfile;
use crate::error::{CuspError, Result};
use crate::scflow::{CuspKind, FeatureRecord};

/// Signed mass between `base` and `base + e`.
pub fn counting(rho: &DensityProfile, base: f64, e: f64, _cfg: &NumericConfig) -> Result<f64> {
    let (lo, hi) = profile_hull(rho)?;
    let target = base + e;
    if base < lo - 1e-12 || base > hi + 1e-12 || target < lo - 1e-12 || target > hi + 1e-12 {
        return Err(CuspError::OutOfRange(format!(
            "counting interval [{base}, {target}] leaves the profile hull [{lo}, {hi}]"
        )));
    }
    Ok(rho.mass_below(target) - rho.mass_below(base))
}

fn profile_hull(rho: &DensityProfile) -> Result<(f64, f64)> {
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    if let Some((a, b)) = rho.grid_hull() {
        lo = lo.min(a);
        hi = hi.max(b);
    }
    for &(p, _) in &rho.atoms {
        lo = lo.min(p);
        hi = hi.max(p);
    }
    if lo.is_finite() && hi.is_finite() {
        Ok((lo, hi))
    } else {
        Err(CuspError::OutOfRange("empty profile".into()))
    }
}

/// Solve for the signed offset E with mass(base, base+E) = target.
fn solve_mass(rho: &DensityProfile, base: f64, target: f64) -> Result<f64> {
    let (lo_h, hi_h) = profile_hull(rho)?;
    // margin so atoms sitting exactly on the hull count as reachable
    let lo_h = lo_h - 1e-9 * (1.0 + lo_h.abs());
    let hi_h = hi_h + 1e-9 * (1.0 + hi_h.abs());
    let m_base = rho.mass_below(base);
    let mut want = m_base + target;
    let m_lo = rho.mass_below(lo_h);
    let m_hi = rho.mass_below(hi_h);
    // absorb quadrature roundoff for queries of (nearly) the entire mass;
    // interior quantiles are far from this clamp
    let slack = 1e-6 * (1.0 + target.abs());
    if want < m_lo - slack || want > m_hi + slack {
        return Err(CuspError::OutOfRange(format!(
            "requested mass {target} from base {base} exceeds the available range"
        )));
    }
    want = want.clamp(m_lo, m_hi);
    let (mut lo, mut hi) = (lo_h, hi_h);
    for _ in 0..220 {
        let mid = 0.5 * (lo + hi);
        if rho.mass_below(mid) < want {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo <= 8.0 * f64::EPSILON * (1.0 + mid.abs()) {
            break;
        }
    }
    Ok(0.5 * (lo + hi) - base)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum QuantileMode {
    Quantile,
    Semiquantile,
}

/// Shifted (semi)quantile gamma_i relative to `base`.
pub fn quantile(
    rho: &DensityProfile,
    base: f64,
    i: i64,
    n: usize,
    mode: QuantileMode,
) -> Result<f64> {
    let n_f = n as f64;
    let target = match (mode, i) {
        (QuantileMode::Quantile, 0) => return Ok(0.0),
        (QuantileMode::Quantile, _) => i as f64 / n_f,
        (QuantileMode::Semiquantile, 0) => {
            return Err(CuspError::DomainError("semiquantiles are not defined for i = 0".into()))
        }
        (QuantileMode::Semiquantile, i) if i >= 1 => (i as f64 - 0.5) / n_f,
        (QuantileMode::Semiquantile, i) => (i as f64 + 0.5) / n_f,
    };
    solve_mass(rho, base, target)
}

/// Quantiles and semiquantiles over an index range, with invariants attached.
#[derive(Clone, Debug)]
pub struct QuantileSet {
    pub base_point: f64,
    pub indices: Vec<i64>,
    pub gamma_hat: Vec<f64>,
    pub gamma_star: Vec<f64>,
    pub n: usize,
}

pub fn quantile_set(
    rho: &DensityProfile,
    base: f64,
    indices: &[i64],
    n: usize,
) -> Result<QuantileSet> {
    let mut gamma_hat = Vec::with_capacity(indices.len());
    let mut gamma_star = Vec::with_capacity(indices.len());
    for &i in indices {
        gamma_hat.push(quantile(rho, base, i, n, QuantileMode::Quantile)?);
        if i == 0 {
            gamma_star.push(f64::NAN);
        } else {
            gamma_star.push(quantile(rho, base, i, n, QuantileMode::Semiquantile)?);
        }
    }
    Ok(QuantileSet { base_point: base, indices: indices.to_vec(), gamma_hat, gamma_star, n })
}

/// Half-width around tau capturing mass 1/N.
#[derive(Clone, Copy, Debug)]
pub struct FluctuationScale {
    pub tau: f64,
    pub eta_f: f64,
}

/// Support intervals of a sampled profile (threshold on the stored samples).
pub fn profile_support(rho: &DensityProfile, floor: f64) -> Vec<(f64, f64)> {
    let mut out = Vec::new();
    let mut open: Option<f64> = None;
    for i in 0..rho.grid.len() {
        let inside = rho.rho[i] > floor;
        match (open, inside) {
            (None, true) => open = Some(rho.grid[i]),
            (Some(s), false) => {
                out.push((s, rho.grid[i - 1]));
                open = None;
            }
            _ => {}
        }
    }
    if let Some(s) = open {
        out.push((s, *rho.grid.last().unwrap()));
    }
    out
}

/// Fluctuation scale of the density around tau; outside the support the value
/// at the nearest edge is used (left edge wins ties).
pub fn fluctuation_scale(
    rho: &DensityProfile,
    tau: f64,
    n: usize,
    cfg: &NumericConfig,
) -> Result<FluctuationScale> {
    let (lo_h, hi_h) = profile_hull(rho)?;
    if tau < lo_h - 1e-12 || tau > hi_h + 1e-12 {
        return Err(CuspError::OutOfRange(format!("tau = {tau} outside the profile hull")));
    }
    let floor = cfg.density_floor * (hi_h - lo_h).max(1.0);
    let support = profile_support(rho, floor);
    let inside = support.iter().any(|&(a, b)| tau >= a && tau <= b);
    let probe = if inside {
        tau
    } else {
        // snap to the nearest support edge, preferring the left one at a tie
        let mut best = (f64::INFINITY, tau);
        for &(a, b) in &support {
            for &edge in &[a, b] {
                let d = (edge - tau).abs();
                if d < best.0 - 1e-15 {
                    best = (d, edge);
                }
            }
        }
        best.1
    };
    let target = 1.0 / n as f64;
    let span = hi_h - lo_h;
    let mass_around = |eta: f64| {
        rho.mass_below((probe + eta).min(hi_h)) - rho.mass_below((probe - eta).max(lo_h))
    };
    if mass_around(span) < target - 1e-13 {
        return Err(CuspError::OutOfRange("profile carries less than 1/N of mass".into()));
    }
    let (mut lo, mut hi) = (0.0, span);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if mass_around(mid) < target {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo <= 4.0 * f64::EPSILON * (1.0 + mid.abs()) {
            break;
        }
    }
    Ok(FluctuationScale { tau, eta_f: 0.5 * (lo + hi) })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum InterpMode {
    /// Interpolate around matched gap edges (pre-cusp).
    GapEdges,
    /// Interpolate around matched implicit minima (post-cusp).
    MinCenters,
}

/// Reference data for one side of an interpolation.
#[derive(Clone, Debug)]
pub struct SideData {
    pub profile: DensityProfile,
    /// Right reference point: e+ in gap mode, the implicit minimum otherwise.
    pub base_plus: f64,
    /// Left gap edge (gap mode only).
    pub base_minus: Option<f64>,
}

impl SideData {
    pub fn from_feature(profile: DensityProfile, feature: &FeatureRecord) -> Result<Self> {
        match feature {
            FeatureRecord::Gap(g) => Ok(Self {
                profile,
                base_plus: g.e_plus,
                base_minus: Some(g.e_minus),
            }),
            FeatureRecord::Min(m) => {
                Ok(Self { profile, base_plus: m.location_implicit, base_minus: None })
            }
            FeatureRecord::Cusp(c) => Ok(Self { profile, base_plus: c.b, base_minus: None }),
        }
    }
}

/// The alpha-interpolating density of two matched profiles.
#[derive(Clone, Debug)]
pub struct InterpolatingDensity {
    pub alpha: f64,
    pub mode: InterpMode,
    pub x: SideData,
    pub y: SideData,
    /// Interpolated right reference point (e+ or the minimum).
    pub base_bar: f64,
    /// Interpolated left gap edge (gap mode).
    pub base_minus_bar: Option<f64>,
    /// Largest mass offset on which the interpolating map was validated.
    pub delta_ss: f64,
    /// Materialised interpolated density in absolute coordinates.
    pub rho_alpha: DensityProfile,
}

fn feature_kind(f: &FeatureRecord) -> CuspKind {
    match f {
        FeatureRecord::Gap(_) => CuspKind::SmallGap,
        FeatureRecord::Min(_) => CuspKind::NonzeroMin,
        FeatureRecord::Cusp(_) => CuspKind::ExactCusp,
    }
}

/// Build the interpolating density. Both features must be of the same kind.
pub fn interpolate(
    rho_x: &DensityProfile,
    feat_x: &FeatureRecord,
    rho_y: &DensityProfile,
    feat_y: &FeatureRecord,
    alpha: f64,
    cfg: &NumericConfig,
) -> Result<InterpolatingDensity> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(CuspError::DomainError(format!("alpha = {alpha} outside [0, 1]")));
    }
    if feature_kind(feat_x) != feature_kind(feat_y) {
        return Err(CuspError::KindMismatch);
    }
    let mode = match feat_x {
        FeatureRecord::Gap(_) => InterpMode::GapEdges,
        _ => InterpMode::MinCenters,
    };
    let x = SideData::from_feature(rho_x.clone(), feat_x)?;
    let y = SideData::from_feature(rho_y.clone(), feat_y)?;
    let base_bar = alpha * x.base_plus + (1.0 - alpha) * y.base_plus;
    let base_minus_bar = match (x.base_minus, y.base_minus) {
        (Some(a), Some(b)) => Some(alpha * a + (1.0 - alpha) * b),
        _ => None,
    };

    // limit of invertibility: mass reachable inside both sampled grid hulls
    // (point masses outside the grid, e.g. ghost padding, do not extend the
    // window), with margin
    let reach = |side: &SideData, sign: f64| -> Result<f64> {
        let (lo, hi) = side
            .profile
            .grid_hull()
            .ok_or_else(|| CuspError::OutOfRange("profile has no sampled grid".into()))?;
        let from = if sign > 0.0 {
            side.base_plus
        } else {
            side.base_minus.unwrap_or(side.base_plus)
        };
        let to = if sign > 0.0 { hi } else { lo };
        Ok((side.profile.mass_below(to) - side.profile.mass_below(from)).abs())
    };
    let delta_ss = 0.9
        * [reach(&x, 1.0)?, reach(&y, 1.0)?, reach(&x, -1.0)?, reach(&y, -1.0)?]
            .into_iter()
            .fold(f64::INFINITY, f64::min);
    if !(delta_ss > 0.0) {
        return Err(CuspError::NonInvertible);
    }

    let interp = InterpolatingDensity {
        alpha,
        mode,
        x,
        y,
        base_bar,
        base_minus_bar,
        delta_ss,
        rho_alpha: DensityProfile::from_grid(vec![0.0, 1.0], vec![0.0, 0.0]), // placeholder
    };
    let rho_alpha = interp.materialise(400, cfg)?;
    Ok(InterpolatingDensity { rho_alpha, ..interp })
}

impl InterpolatingDensity {
    fn side_phi(&self, side: &SideData, s: f64) -> Result<f64> {
        // signed mass offset from the right base (positive side) or从 the
        // left base in gap mode (negative side)
        let base = if s >= 0.0 || self.mode == InterpMode::MinCenters {
            side.base_plus
        } else {
            side.base_minus.unwrap()
        };
        solve_mass(&side.profile, base, s)
    }

    /// Interpolated inverse counting function (signed mass -> offset from the
    /// corresponding interpolated reference point).
    pub fn phi_alpha(&self, s: f64) -> Result<f64> {
        if s.abs() > self.delta_ss {
            return Err(CuspError::OutOfRange(format!(
                "mass offset {s} beyond the validated window {}",
                self.delta_ss
            )));
        }
        let px = self.side_phi(&self.x, s)?;
        let py = self.side_phi(&self.y, s)?;
        Ok(self.alpha * px + (1.0 - self.alpha) * py)
    }

    /// Absolute position of the interpolated point at signed mass s.
    pub fn position(&self, s: f64) -> Result<f64> {
        let base = if s >= 0.0 || self.mode == InterpMode::MinCenters {
            self.base_bar
        } else {
            self.base_minus_bar.unwrap()
        };
        Ok(base + self.phi_alpha(s)?)
    }

    /// Interpolated density value at signed mass s (harmonic combination).
    pub fn rho_at_mass(&self, s: f64) -> Result<f64> {
        let px = self.side_phi(&self.x, s)?;
        let py = self.side_phi(&self.y, s)?;
        let bx = if s >= 0.0 || self.mode == InterpMode::MinCenters {
            self.x.base_plus
        } else {
            self.x.base_minus.unwrap()
        };
        let by = if s >= 0.0 || self.mode == InterpMode::MinCenters {
            self.y.base_plus
        } else {
            self.y.base_minus.unwrap()
        };
        let rx = self.x.profile.rho_at(bx + px);
        let ry = self.y.profile.rho_at(by + py);
        if rx <= 0.0 || ry <= 0.0 {
            return Ok(0.0);
        }
        Ok(1.0 / (self.alpha / rx + (1.0 - self.alpha) / ry))
    }

    /// Interpolated (semi)quantile, as an offset from the right reference
    /// point (or from the minimum in min mode).
    pub fn quantile(&self, i: i64, n: usize, mode: QuantileMode) -> Result<f64> {
        let n_f = n as f64;
        let s = match (mode, i) {
            (QuantileMode::Quantile, 0) => return Ok(0.0),
            (QuantileMode::Quantile, _) => i as f64 / n_f,
            (QuantileMode::Semiquantile, 0) => {
                return Err(CuspError::DomainError("semiquantiles are not defined for i = 0".into()))
            }
            (QuantileMode::Semiquantile, i) if i >= 1 => (i as f64 - 0.5) / n_f,
            (QuantileMode::Semiquantile, i) => (i as f64 + 0.5) / n_f,
        };
        if self.mode == InterpMode::GapEdges && s < 0.0 {
            // negative indices sit left of the gap: offset from e+ includes
            // the interpolated gap width
            let off = self.phi_alpha(s)?;
            let width = self.base_bar - self.base_minus_bar.unwrap();
            Ok(off - width)
        } else {
            self.phi_alpha(s)
        }
    }

    /// Sample the interpolated density on a graded mass grid and return it as
    /// an ordinary profile in absolute coordinates.
    fn materialise(&self, per_side: usize, _cfg: &NumericConfig) -> Result<DensityProfile> {
        let mut pts: Vec<(f64, f64)> = Vec::with_capacity(2 * per_side + 2);
        for k in 1..=per_side {
            let u = k as f64 / per_side as f64;
            let s = self.delta_ss * u.powf(4.0 / 3.0);
            for &sign in &[-1.0, 1.0] {
                let ss = sign * s;
                let pos = self.position(ss)?;
                let val = self.rho_at_mass(ss)?;
                pts.push((pos, val));
            }
        }
        match self.mode {
            InterpMode::GapEdges => {
                pts.push((self.base_bar, 0.0));
                pts.push((self.base_minus_bar.unwrap(), 0.0));
            }
            InterpMode::MinCenters => {
                let rx = self.x.profile.rho_at(self.x.base_plus);
                let ry = self.y.profile.rho_at(self.y.base_plus);
                let val = if rx > 0.0 && ry > 0.0 {
                    1.0 / (self.alpha / rx + (1.0 - self.alpha) / ry)
                } else {
                    0.0
                };
                pts.push((self.base_bar, val));
            }
        }
        pts.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
        pts.dedup_by(|a, b| (a.0 - b.0).abs() < 1e-15);
        let (grid, rho): (Vec<f64>, Vec<f64>) = pts.into_iter().unzip();
        Ok(DensityProfile::from_grid(grid, rho))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scflow::{GapRecord, MinRecord};
    use crate::shape::{model_profile, ShapeModel};

    fn cfg() -> NumericConfig {
        NumericConfig::default()
    }

    const SQRT3: f64 = 1.732_050_807_568_877_2;

    fn cusp_profile(gamma: f64) -> DensityProfile {
        model_profile(&ShapeModel::Cusp { gamma }, 0.2, 6000).unwrap()
    }

    #[test]
    fn counting_zero_and_closed_form() {
        let c = cfg();
        let p = cusp_profile(1.0);
        assert_eq!(counting(&p, 0.0, 0.0, &c).unwrap(), 0.0);
        // closed form: n(E) = 3 sqrt(3) E^(4/3) / (8 pi)
        let e = 1e-2f64;
        let expect = 3.0 * SQRT3 / (8.0 * std::f64::consts::PI) * e.powf(4.0 / 3.0);
        let got = counting(&p, 0.0, e, &c).unwrap();
        assert!((got / expect - 1.0).abs() < 1e-5, "n({e}) = {got}, oracle {expect}");
        // spot value from the oracle
        assert!((expect - 4.4537e-4).abs() < 1e-7);
        assert!(matches!(counting(&p, 0.0, 1.0, &c), Err(CuspError::OutOfRange(_))));
    }

    #[test]
    fn edge_counting_branches() {
        // n(E) ~ E^(3/2)/Delta^(1/6) below the crossover at E ~ Delta,
        // and ~ E^(4/3) above it
        let c = cfg();
        let delta = 1e-4;
        let p = model_profile(&ShapeModel::Edge { delta, gamma: 1.0 }, 0.2, 20000).unwrap();
        let expo = |e1: f64, e2: f64| -> f64 {
            let n1 = counting(&p, 0.0, e1, &c).unwrap();
            let n2 = counting(&p, 0.0, e2, &c).unwrap();
            (n2 / n1).ln() / (e2 / e1).ln()
        };
        let low = expo(delta / 50.0, delta / 10.0);
        let high = expo(delta * 50.0, delta * 500.0);
        assert!((low - 1.5).abs() < 0.05, "small-side exponent {low}");
        assert!((high - 4.0 / 3.0).abs() < 0.05, "large-side exponent {high}");
    }

    #[test]
    fn quantile_closed_form_and_roundtrip() {
        let c = cfg();
        let p = cusp_profile(1.0);
        let n = 1_000_000usize;
        // oracle from inverting the closed-form counting function
        let coeff = (8.0 * std::f64::consts::PI / (3.0 * SQRT3)).powf(0.75);
        let i = 100i64;
        let oracle = coeff * (i as f64 / n as f64).powf(0.75);
        let got = quantile(&p, 0.0, i, n, QuantileMode::Quantile).unwrap();
        assert!((got / oracle - 1.0).abs() < 1e-4, "gamma_100 = {got}, oracle {oracle}");
        assert!((oracle - 3.2616e-3).abs() < 5e-7, "oracle constant {oracle}");
        // roundtrip through the counting function
        for &j in &[1i64, 7, 100, -3, -250] {
            let g = quantile(&p, 0.0, j, n, QuantileMode::Quantile).unwrap();
            let back = counting(&p, 0.0, g, &c).unwrap();
            assert!(
                (back - j as f64 / n as f64).abs() < 1e-10,
                "roundtrip i={j}: {back}"
            );
        }
        assert_eq!(quantile(&p, 0.0, 0, n, QuantileMode::Quantile).unwrap(), 0.0);
    }

    #[test]
    fn quantile_exponent_law() {
        let p = cusp_profile(1.0);
        let n = 1_000_000usize;
        let mut pts = Vec::new();
        for k in 0..12 {
            let i = (10.0f64 * (100.0f64).powf(k as f64 / 11.0)).round() as i64;
            let g = quantile(&p, 0.0, i, n, QuantileMode::Quantile).unwrap();
            pts.push(((i as f64).ln(), g.ln()));
        }
        let slope = fit_line(&pts).0;
        assert!((slope - 0.75).abs() < 0.02, "quantile exponent {slope}");
    }

    fn fit_line(pts: &[(f64, f64)]) -> (f64, f64) {
        let n = pts.len() as f64;
        let sx: f64 = pts.iter().map(|p| p.0).sum();
        let sy: f64 = pts.iter().map(|p| p.1).sum();
        let sxx: f64 = pts.iter().map(|p| p.0 * p.0).sum();
        let sxy: f64 = pts.iter().map(|p| p.0 * p.1).sum();
        let slope = (n * sxy - sx * sy) / (n * sxx - sx * sx);
        ((slope), (sy - slope * sx) / n)
    }

    #[test]
    fn semiquantile_ordering() {
        let p = cusp_profile(1.3);
        let n = 100_000usize;
        let set = quantile_set(&p, 0.0, &[-40, -5, -1, 1, 5, 40], n).unwrap();
        for (k, &i) in set.indices.iter().enumerate() {
            let star = set.gamma_star[k];
            let hat = set.gamma_hat[k];
            if i >= 1 {
                let prev = quantile(&p, 0.0, i - 1, n, QuantileMode::Quantile).unwrap();
                assert!(star > prev && star < hat, "i={i}");
            } else {
                let next = quantile(&p, 0.0, i + 1, n, QuantileMode::Quantile).unwrap();
                assert!(star > hat && star < next, "i={i}");
            }
            // the semiquantile never sits at a support edge
            assert!(p.rho_at(star) > 0.0);
        }
        assert!(matches!(
            quantile(&p, 0.0, 0, n, QuantileMode::Semiquantile),
            Err(CuspError::DomainError(_))
        ));
    }

    #[test]
    fn fluctuation_scale_uniform_and_cusp() {
        let c = cfg();
        // uniform density c0 on [0,1]: eta_f = 1/(2 c0 N)
        let grid: Vec<f64> = (0..101).map(|i| i as f64 / 100.0).collect();
        let rho = vec![0.4; 101];
        let uni = DensityProfile::from_grid(grid, rho);
        let n = 1000usize;
        let fs = fluctuation_scale(&uni, 0.5, n, &c).unwrap();
        assert!((fs.eta_f - 1.0 / (2.0 * 0.4 * n as f64)).abs() < 1e-9);

        // at an exact cusp eta_f(gamma_i) ~ i^(-1/4) N^(-3/4)
        let p = cusp_profile(1.0);
        let n = 1_000_000usize;
        let mut pts = Vec::new();
        for k in 0..10 {
            let i = (10.0f64 * (100.0f64).powf(k as f64 / 9.0)).round() as i64;
            let g = quantile(&p, 0.0, i, n, QuantileMode::Quantile).unwrap();
            let fs = fluctuation_scale(&p, g, n, &c).unwrap();
            pts.push(((i as f64).ln(), fs.eta_f.ln()));
        }
        let slope = fit_line(&pts).0;
        assert!((slope + 0.25).abs() < 0.02, "eta_f exponent {slope}");
    }

    #[test]
    fn fluctuation_scale_small_minimum() {
        let c = cfg();
        let rho_min = 5e-2;
        let p = model_profile(&ShapeModel::Min { rho_min, gamma: 1.0 }, 0.2, 6000).unwrap();
        // the flat-bottom regime needs rho_min >> N^(-1/4)
        let n = 1_000_000_000_000usize;
        let fs = fluctuation_scale(&p, 0.0, n, &c).unwrap();
        let expect = 1.0 / (2.0 * n as f64 * rho_min);
        assert!((fs.eta_f / expect - 1.0).abs() < 0.05, "eta_f {} vs {expect}", fs.eta_f);
    }

    #[test]
    fn fluctuation_scale_snaps_to_edge_outside_support() {
        let c = cfg();
        let delta = 1e-2;
        let p = model_profile(&ShapeModel::Edge { delta, gamma: 1.0 }, 0.2, 8000).unwrap();
        let inside_gap = fluctuation_scale(&p, -delta / 2.0, 1000, &c).unwrap();
        let at_edge = fluctuation_scale(&p, 0.0, 1000, &c).unwrap();
        assert!(
            (inside_gap.eta_f - at_edge.eta_f).abs() < 1e-6,
            "{} vs {}",
            inside_gap.eta_f,
            at_edge.eta_f
        );
    }

    fn gap_pair(delta_x: f64, delta_y: f64) -> (DensityProfile, FeatureRecord, DensityProfile, FeatureRecord) {
        let px = model_profile(&ShapeModel::Edge { delta: delta_x, gamma: 1.0 }, 0.2, 6000).unwrap();
        let py = model_profile(&ShapeModel::Edge { delta: delta_y, gamma: 1.2 }, 0.2, 6000).unwrap();
        let fx = FeatureRecord::Gap(GapRecord { e_minus: -delta_x, e_plus: 0.0, delta: delta_x });
        let fy = FeatureRecord::Gap(GapRecord { e_minus: -delta_y, e_plus: 0.0, delta: delta_y });
        (px, fx, py, fy)
    }

    #[test]
    fn interpolation_endpoints_and_convexity() {
        let c = cfg();
        let (px, fx, py, fy) = gap_pair(1e-3, 2.5e-3);
        let n = 10_000usize;
        // alpha = 1 reproduces the x side pointwise
        let i1 = interpolate(&px, &fx, &py, &fy, 1.0, &c).unwrap();
        for &s in &[1e-4, 1e-3, 5e-3, -1e-3] {
            let pos = i1.position(s).unwrap();
            let val = i1.rho_at_mass(s).unwrap();
            assert!((val - px.rho_at(pos)).abs() < 1e-10, "s={s}");
        }
        // quantile convexity against independently computed side quantiles
        for &alpha in &[0.0, 0.25, 0.5, 0.75, 1.0] {
            let interp = interpolate(&px, &fx, &py, &fy, alpha, &c).unwrap();
            for &i in &[1i64, 3, 17, 120] {
                let gx = quantile(&px, 0.0, i, n, QuantileMode::Quantile).unwrap();
                let gy = quantile(&py, 0.0, i, n, QuantileMode::Quantile).unwrap();
                let expect = alpha * gx + (1.0 - alpha) * gy;
                let got = interp.quantile(i, n, QuantileMode::Quantile).unwrap();
                let spacing = 1.0 / (n as f64 * interp.rho_at_mass(i as f64 / n as f64).unwrap());
                assert!(
                    (got - expect).abs() <= 1e-9 * spacing,
                    "alpha={alpha} i={i}: {got} vs {expect} (spacing {spacing})"
                );
            }
        }
    }

    #[test]
    fn interpolation_degenerate_and_mismatch() {
        let c = cfg();
        let (px, fx, py, fy) = gap_pair(1e-3, 1e-3);
        // rho_x = rho_y: interpolation is the common profile for every alpha
        let interp = interpolate(&px, &fx, &px, &fx, 0.37, &c).unwrap();
        for &s in &[1e-4, 1e-3, 4e-3] {
            let pos = interp.position(s).unwrap();
            assert!((interp.rho_at_mass(s).unwrap() - px.rho_at(pos)).abs() < 1e-12);
        }
        // kind mismatch is rejected
        let fmin = FeatureRecord::Min(MinRecord { location: 0.0, location_implicit: 0.0, height: 0.1 });
        assert!(matches!(
            interpolate(&px, &fx, &py, &fmin, 0.5, &c),
            Err(CuspError::KindMismatch)
        ));
        let _ = fy;
    }

    #[test]
    fn interpolated_density_is_one_third_hoelder() {
        let c = cfg();
        let (px, fx, py, fy) = gap_pair(1e-3, 2.5e-3);
        let interp = interpolate(&px, &fx, &py, &fy, 0.5, &c).unwrap();
        let p = &interp.rho_alpha;
        let mut max_ratio: f64 = 0.0;
        for k in (0..p.grid.len()).step_by(7) {
            for l in (k + 1..p.grid.len()).step_by(11) {
                let dx = (p.grid[l] - p.grid[k]).abs();
                if dx > 1e-12 {
                    let r = (p.rho[l] - p.rho[k]).abs() / dx.powf(1.0 / 3.0);
                    max_ratio = max_ratio.max(r);
                }
            }
        }
        // the cusp constant sqrt(3) gamma^(4/3) / (2 pi) is ~0.3 for these
        // slopes; allow generous headroom but demand boundedness
        assert!(max_ratio < 3.0, "Hoelder ratio {max_ratio}");
    }

    #[test]
    fn interpolated_derivative_bound_trend() {
        // |rho'| <= C / (rho (rho + Delta^(1/3))) with C stable across alpha
        let c = cfg();
        let (px, fx, py, fy) = gap_pair(1e-3, 2.5e-3);
        let mut consts = Vec::new();
        for &alpha in &[0.2, 0.5, 0.8] {
            let interp = interpolate(&px, &fx, &py, &fy, alpha, &c).unwrap();
            let p = &interp.rho_alpha;
            let delta = interp.base_bar - interp.base_minus_bar.unwrap();
            let mut cmax: f64 = 0.0;
            for k in 1..p.grid.len() - 1 {
                if p.rho[k] > 1e-4 && p.grid[k] > interp.base_bar {
                    let dr = (p.rho[k + 1] - p.rho[k - 1]) / (p.grid[k + 1] - p.grid[k - 1]);
                    let bound = p.rho[k] * (p.rho[k] + delta.powf(1.0 / 3.0));
                    cmax = cmax.max(dr.abs() * bound);
                }
            }
            consts.push(cmax);
        }
        let cmin = consts.iter().cloned().fold(f64::INFINITY, f64::min);
        let cmax = consts.iter().cloned().fold(0.0, f64::max);
        assert!(cmax / cmin < 3.0, "constants {consts:?}");
        assert!(cmax < 1.0, "absolute scale {cmax}");
    }

    #[test]
    fn quantile_gap_two_branch_law() {
        // |gamma_i - gamma_j| ~ max of the two branch laws; test the exponents
        // in i at fixed j on a small-gap profile
        let delta = 1e-4;
        let p = model_profile(&ShapeModel::Edge { delta, gamma: 1.0 }, 0.2, 20000).unwrap();
        let n = 1_000_000usize;
        // deep branch: i, j << N Delta^(3/2)-scale indices: spacing exponent in
        // the first branch is |i-j| (i+j)^(-1/3); shallow branch (i+j)^(-1/4)
        let probe = |i: i64| quantile(&p, 0.0, i, n, QuantileMode::Quantile).unwrap();
        let n_delta = (n as f64 * delta.powf(1.5) / 1.0) as i64; // crossover index scale
        let mut low_pts = Vec::new();
        let mut high_pts = Vec::new();
        for k in 0..8 {
            let base = (2.0f64.powf(k as f64) * 2.0) as i64;
            if base < n_delta.max(4) {
                let d = (probe(base + 1) - probe(base)).abs();
                low_pts.push(((base as f64).ln(), d.ln()));
            }
            let base_hi = ((n_delta.max(2) as f64) * 16.0 * 2.0f64.powf(k as f64)) as i64;
            let d = (probe(base_hi + 1) - probe(base_hi)).abs();
            high_pts.push(((base_hi as f64).ln(), d.ln()));
        }
        if low_pts.len() >= 3 {
            let slope = fit_line(&low_pts).0;
            assert!((slope + 1.0 / 3.0).abs() < 0.06, "gap-branch spacing exponent {slope}");
        }
        let slope_hi = fit_line(&high_pts).0;
        assert!((slope_hi + 0.25).abs() < 0.04, "cusp-branch spacing exponent {slope_hi}");
    }
}
