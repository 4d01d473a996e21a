use serde::{Deserialize, Serialize};

/// Tolerances and iteration limits for the density / flow solvers.
///
/// Defaults are the values the rest of the crate is calibrated against;
/// the CLI exposes each of them as a flag.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct NumericConfig {
    /// Sup-norm defect accepted for a solved Dyson equation.
    pub dyson_tol: f64,
    /// Damping factor of the fixed-point iteration.
    pub damping: f64,
    /// Defect below which the solver switches from damped iteration to Newton.
    pub newton_switch: f64,
    pub max_iter: usize,
    /// Bound check on |m_i|; exceeding it signals an invalid spec.
    pub green_bound: f64,
    /// Flatness floor: requires N * s_ij >= this.
    pub flatness_floor: f64,
    /// Bound on |a_i|.
    pub entry_bound: f64,
    /// Rungs of the geometric eta ladder used for density extrapolation.
    pub ladder_rungs: usize,
    /// Smallest eta of the ladder used for feature location (edges, minima).
    pub feature_eta: f64,
    pub feature_rungs: usize,
    /// Density threshold (relative to window scale) separating support from gap.
    pub density_floor: f64,
    /// Bisection tolerance for edge positions.
    pub edge_xtol: f64,
    /// Defect accepted for the subordination equation of the free convolution.
    pub subordination_tol: f64,
    /// Time-bracket width at which the cusp-time bisection stops.
    pub tstar_tol: f64,
    /// Log-log fit window (in distance from the feature) for slope extraction.
    pub fit_window: (f64, f64),
    pub fit_points: usize,
    /// Allowed deviation of the fitted exponent from 1/3.
    pub exponent_slack: f64,
    /// Residual tie margin when classifying a profile against the shape models.
    pub classify_tie: f64,
    /// RMS residual above which classification is rejected.
    pub classify_reject: f64,
    /// Quantile bisection tolerance, relative to the local spacing.
    pub quantile_rtol: f64,
}

impl Default for NumericConfig {
    fn default() -> Self {
        Self {
            dyson_tol: 1e-12,
            damping: 0.5,
            newton_switch: 1e-3,
            max_iter: 400,
            green_bound: 1e8,
            flatness_floor: 1e-10,
            entry_bound: 1e3,
            ladder_rungs: 8,
            feature_eta: 1e-10,
            feature_rungs: 8,
            density_floor: 1e-8,
            edge_xtol: 1e-9,
            subordination_tol: 1e-10,
            tstar_tol: 1e-8,
            fit_window: (1e-4, 1e-2),
            fit_points: 25,
            exponent_slack: 0.05,
            classify_tie: 0.05,
            classify_reject: 0.10,
            quantile_rtol: 1e-12,
        }
    }
}

/// Exponents and step-control knobs of the particle dynamics.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DbmConfig {
    /// t_end ~ N^(-1/2 + omega1).
    pub omega_1: f64,
    /// Interaction cutoff scale ell = N^omega_ell.
    pub omega_ell: f64,
    /// Inner mean-field regime extends to N^omega_a.
    pub omega_a: f64,
    /// i_star = N^(1/2 + c_star * omega1).
    pub c_star: f64,
    /// Ghost particles sit at +- (ghost_offset_factor * spectral diameter).
    pub ghost_offset_factor: f64,
    /// dt is chosen so that max |drift| * dt <= dt_safety * min gap.
    pub dt_safety: f64,
    pub max_halvings: u32,
    /// Imaginary regularisation of the interpolated Stieltjes transform at the edge.
    pub edge_epsilon: f64,
    /// Margin enforced between the exponent hierarchy omega1 << omega_ell << omega_a.
    pub exponent_margin: f64,
    /// Nodes of the time grid on which the drift shift functions are tabulated.
    pub shift_nodes: usize,
}

impl Default for DbmConfig {
    fn default() -> Self {
        Self {
            omega_1: 0.1,
            omega_ell: 0.15,
            omega_a: 0.3,
            c_star: 2.0,
            ghost_offset_factor: 1e6,
            dt_safety: 0.1,
            max_halvings: 30,
            edge_epsilon: 1e-12,
            exponent_margin: 0.05,
            shift_nodes: 33,
        }
    }
}

/// Contour-quadrature parameters of the Pearcey kernel evaluator.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PearceyConfig {
    /// Gauss-Legendre nodes per panel.
    pub nodes_per_panel: usize,
    /// Initial number of geometric panels per ray.
    pub panels: usize,
    pub max_refine: usize,
    /// Ray truncation solves R^4/4 - |b| R^2/2 - |x| R = decay_exponent.
    pub decay_exponent: f64,
    /// Rightward displacement of the vertical contour.
    pub shift: f64,
    /// Parameter hull accepted without revalidating the truncation radius.
    pub hull: f64,
}

impl Default for PearceyConfig {
    fn default() -> Self {
        Self {
            nodes_per_panel: 64,
            panels: 8,
            max_refine: 6,
            decay_exponent: 37.0,
            shift: 0.1,
            hull: 50.0,
        }
    }
}

/// Monte-Carlo harness parameters.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct McConfig {
    /// Histogram bins are sized so the expected count per bin is at least this.
    pub min_bin_count: f64,
    pub max_bins: usize,
    pub min_bins: usize,
}

impl Default for McConfig {
    fn default() -> Self {
        Self { min_bin_count: 30.0, max_bins: 64, min_bins: 4 }
    }
}
