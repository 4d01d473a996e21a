//! The extended Pearcey kernel by double contour integration.
//!
//! ```text
//!   K(a, b; x, y) = (2 pi i)^{-2} Int_X dz Int_P dw
//!                     exp(-w^4/4 + b w^2/2 - y w + z^4/4 - a z^2/2 + x z) / (w - z)
//!                   - 1_{b > a} exp(-(y-x)^2 / (2(b-a))) / sqrt(2 pi (b-a))
//! ```
//!
//! X consists of the four diagonal rays through the origin (inward from
//! infinity at angles pi/4 and -3pi/4, outward at -pi/4 and 3pi/4); P is the
//! upward vertical line. The two contours cross at the origin, which makes
//! the naive product quadrature singular, so P is shifted right by sigma and
//! the poles swept across on the two right-hand rays are compensated exactly
//! by a one-dimensional correction integral. The compensated value is
//! sigma-independent, which `shift_invariance_check` verifies numerically.

use num_complex::Complex64;

use crate::config::PearceyConfig;
use crate::error::{CuspError, Result};

/// Gauss-Legendre nodes and weights on [-1, 1].
pub(crate) fn gauss_legendre(n: usize) -> (Vec<f64>, Vec<f64>) {
    let mut nodes = vec![0.0; n];
    let mut weights = vec![0.0; n];
    for k in 0..(n + 1) / 2 {
        // Newton from the Chebyshev estimate
        let mut x = (std::f64::consts::PI * (k as f64 + 0.75) / (n as f64 + 0.5)).cos();
        for _ in 0..100 {
            let (mut p0, mut p1) = (1.0f64, x);
            for j in 2..=n {
                let p2 = ((2 * j - 1) as f64 * x * p1 - (j - 1) as f64 * p0) / j as f64;
                p0 = p1;
                p1 = p2;
            }
            let dp = n as f64 * (x * p1 - p0) / (x * x - 1.0);
            let dx = p1 / dp;
            x -= dx;
            if dx.abs() < 1e-15 {
                break;
            }
        }
        let (mut p0, mut p1) = (1.0f64, x);
        for j in 2..=n {
            let p2 = ((2 * j - 1) as f64 * x * p1 - (j - 1) as f64 * p0) / j as f64;
            p0 = p1;
            p1 = p2;
        }
        let dp = n as f64 * (x * p1 - p0) / (x * x - 1.0);
        let w = 2.0 / ((1.0 - x * x) * dp * dp);
        nodes[k] = -x;
        nodes[n - 1 - k] = x;
        weights[k] = w;
        weights[n - 1 - k] = w;
    }
    (nodes, weights)
}

/// Contour geometry for one kernel evaluation.
#[derive(Clone, Debug)]
pub struct ContourSpec {
    pub radius: f64,
    pub nodes_per_ray: usize,
    pub shift: f64,
}

impl ContourSpec {
    /// Truncation radius from R^4/4 - |b| R^2/2 - |x| R = decay, so the
    /// integrand magnitude at the ray end is below e^(-decay).
    pub fn for_parameters(alpha: f64, beta: f64, x: f64, y: f64, cfg: &PearceyConfig) -> Result<Self> {
        let hull = cfg.hull;
        for &(v, name) in &[(alpha, "alpha"), (beta, "beta"), (x, "x"), (y, "y")] {
            if !v.is_finite() || v.abs() > hull {
                return Err(CuspError::HullViolation(format!("{name} = {v} exceeds |.| <= {hull}")));
            }
        }
        let b = alpha.abs().max(beta.abs());
        let c = x.abs().max(y.abs());
        let mut r: f64 = (4.0 * cfg.decay_exponent).powf(0.25) + b.sqrt() + 1.0;
        for _ in 0..200 {
            let f = r.powi(4) / 4.0 - b * r * r / 2.0 - c * r - cfg.decay_exponent;
            let df = r.powi(3) - b * r - c;
            let step = f / df;
            r -= step;
            if step.abs() < 1e-12 {
                break;
            }
        }
        if !(cfg.shift < r / 10.0) {
            return Err(CuspError::HullViolation(format!(
                "shift {} not small against the truncation radius {r}",
                cfg.shift
            )));
        }
        Ok(Self { radius: r, nodes_per_ray: cfg.nodes_per_panel, shift: cfg.shift })
    }
}

/// One evaluated kernel entry with a quadrature-convergence estimate.
#[derive(Clone, Copy, Debug)]
pub struct KernelValue {
    pub alpha: f64,
    pub beta: f64,
    pub x: f64,
    pub y: f64,
    pub value: Complex64,
    pub est_error: f64,
}

fn exp_z(alpha: f64, x: f64, z: Complex64) -> Complex64 {
    (z * z * z * z / 4.0 - alpha * z * z / 2.0 + x * z).exp()
}

fn exp_w(beta: f64, y: f64, w: Complex64) -> Complex64 {
    (-w * w * w * w / 4.0 + beta * w * w / 2.0 - y * w).exp()
}

/// Panel boundaries on [0, r]: geometric toward the origin, with an optional
/// mirrored refinement cluster around a crossing point. The mirrored cluster
/// keeps the node set symmetric about the crossing, so the odd part of the
/// integrable 1/(w - z) singularity cancels in the product quadrature.
fn panel_edges(r: f64, coarse: usize, cross: Option<f64>) -> Vec<f64> {
    let mut edges = vec![0.0, r];
    for k in 1..coarse {
        edges.push(r / (2f64).powi(k as i32));
    }
    if let Some(ts) = cross {
        let c = ts * 0.5;
        edges.retain(|&e| e <= ts - c + 1e-300 || e >= ts + c - 1e-300 || e == 0.0);
        let levels = 9usize;
        edges.push(ts);
        for j in 0..=levels {
            let d = c / (2f64).powi(j as i32);
            edges.push(ts - d);
            edges.push(ts + d);
        }
    }
    edges.retain(|&e| (0.0..=r).contains(&e));
    edges.sort_by(|a, b| a.partial_cmp(b).unwrap());
    edges.dedup_by(|a, b| (*a - *b).abs() < 1e-15 * r);
    edges
}

/// GL nodes over the panels, each panel uniformly split `split` times.
fn line_nodes(edges: &[f64], split: usize, gl: &(Vec<f64>, Vec<f64>)) -> Vec<(f64, f64)> {
    let mut out = Vec::with_capacity((edges.len() - 1) * split * gl.0.len());
    for p in 0..edges.len() - 1 {
        for s in 0..split {
            let a = edges[p] + (edges[p + 1] - edges[p]) * s as f64 / split as f64;
            let b = edges[p] + (edges[p + 1] - edges[p]) * (s + 1) as f64 / split as f64;
            let mid = 0.5 * (a + b);
            let half = 0.5 * (b - a);
            for (t, w) in gl.0.iter().zip(&gl.1) {
                out.push((mid + half * t, half * w));
            }
        }
    }
    out
}

fn double_integral(
    alpha: f64,
    beta: f64,
    x: f64,
    y: f64,
    spec: &ContourSpec,
    split: usize,
) -> Complex64 {
    let gl = gauss_legendre(spec.nodes_per_ray);
    let r = spec.radius;
    let sigma = spec.shift;
    let t_cross = sigma * 2f64.sqrt();
    let e_pi4 = Complex64::from_polar(1.0, std::f64::consts::FRAC_PI_4);
    let e_mpi4 = Complex64::from_polar(1.0, -std::f64::consts::FRAC_PI_4);
    let coarse = 8usize;

    // the four rays as (direction d, sign of the dt measure, crossing
    // refinement), each parametrised z = d t with t > 0:
    //   inbound from +inf e^{i pi/4}:  dz = d dt, t decreasing  -> -d
    //   outbound to +inf e^{-i pi/4}:  t increasing             -> +d
    //   inbound from -inf e^{i pi/4}:  z = -e^{i pi/4} t, t decreasing -> -d
    //   outbound to -inf e^{-i pi/4}:  t increasing             -> +d
    let rays: [(Complex64, f64, Option<f64>); 4] = [
        (e_pi4, -1.0, Some(t_cross)),
        (e_mpi4, 1.0, Some(t_cross)),
        (-e_pi4, -1.0, None),
        (-e_mpi4, 1.0, None),
    ];
    let mut zs: Vec<(Complex64, Complex64)> = Vec::new();
    for &(dir, sign, cross) in &rays {
        let edges = panel_edges(r, coarse, cross);
        for (t, w) in line_nodes(&edges, split, &gl) {
            let z = dir * t;
            zs.push((z, dir * (sign * w) * exp_z(alpha, x, z)));
        }
    }

    // vertical line Re w = sigma, upward; crossings at u = +-sigma
    let edges = panel_edges(r, coarse, Some(sigma));
    let mut ws: Vec<(Complex64, Complex64)> = Vec::new();
    for (u, w) in line_nodes(&edges, split, &gl) {
        for &s in &[1.0f64, -1.0] {
            let wpt = Complex64::new(sigma, s * u);
            ws.push((wpt, Complex64::new(0.0, w) * exp_w(beta, y, wpt)));
        }
    }

    let mut total = Complex64::new(0.0, 0.0);
    for &(z, fz) in &zs {
        let mut inner = Complex64::new(0.0, 0.0);
        for &(w, fw) in &ws {
            inner += fw / (w - z);
        }
        total += fz * inner;
    }
    let two_pi_i = Complex64::new(0.0, 2.0 * std::f64::consts::PI);
    total / (two_pi_i * two_pi_i)
}

/// Poles swept when the vertical contour moves from 0+ to sigma: the residues
/// sit on the two right-hand rays at radii up to sigma*sqrt(2). Their total
/// contribution reduces to a line integral of exp((b-a) z^2/2 + (x-y) z);
/// adding it back recovers the through-origin value, which is the one the
/// beta > alpha Gaussian subtraction is calibrated against (that subtraction
/// is the same sweep carried across the whole wedge).
fn sweep_correction(alpha: f64, beta: f64, x: f64, y: f64, sigma: f64, gl_n: usize) -> f64 {
    let gl = gauss_legendre(gl_n);
    let hi = sigma * 2f64.sqrt();
    let e_pi4 = Complex64::from_polar(1.0, std::f64::consts::FRAC_PI_4);
    let mut acc = 0.0;
    let half = 0.5 * hi;
    for (t, w) in gl.0.iter().zip(&gl.1) {
        let s = half + half * t;
        let z = s * e_pi4;
        let g = ((beta - alpha) * z * z / 2.0 + (x - y) * z).exp();
        acc += w * half * (e_pi4 * g).im;
    }
    acc / std::f64::consts::PI
}

/// Evaluate the extended Pearcey kernel with panel-doubling convergence control.
pub fn kernel(
    alpha: f64,
    beta: f64,
    x: f64,
    y: f64,
    tol: f64,
    cfg: &PearceyConfig,
) -> Result<KernelValue> {
    if tol < 1e-10 {
        return Err(CuspError::DomainError(format!("tolerance {tol} below the supported 1e-10")));
    }
    let spec = ContourSpec::for_parameters(alpha, beta, x, y, cfg)?;
    let sweep = sweep_correction(alpha, beta, x, y, spec.shift, 2 * cfg.nodes_per_panel);
    let gaussian = if beta > alpha {
        let var = beta - alpha;
        ((y - x) * (x - y) / (2.0 * var)).exp() / (2.0 * std::f64::consts::PI * var).sqrt()
    } else {
        0.0
    };
    let mut split = 1usize;
    let mut prev = double_integral(alpha, beta, x, y, &spec, split);
    for _ in 0..cfg.max_refine {
        split *= 2;
        let next = double_integral(alpha, beta, x, y, &spec, split);
        let est_error = (next - prev).norm();
        if est_error <= tol {
            let value = next + sweep - gaussian;
            return Ok(KernelValue { alpha, beta, x, y, value, est_error });
        }
        prev = next;
    }
    Err(CuspError::NonConvergence(format!(
        "kernel quadrature not converged to {tol} at panel split {split}"
    )))
}

/// Maximum pairwise deviation of the kernel across a list of contour shifts.
pub fn shift_invariance_check(
    alpha: f64,
    beta: f64,
    x: f64,
    y: f64,
    sigmas: &[f64],
    tol: f64,
    cfg: &PearceyConfig,
) -> Result<f64> {
    let mut values = Vec::with_capacity(sigmas.len());
    for &s in sigmas {
        let mut c = cfg.clone();
        c.shift = s;
        values.push(kernel(alpha, beta, x, y, tol, &c)?.value);
    }
    let mut dev: f64 = 0.0;
    for i in 0..values.len() {
        for j in i + 1..values.len() {
            dev = dev.max((values[i] - values[j]).norm());
        }
    }
    Ok(dev)
}

/// Determinantal k-point function det(K(alpha_i, alpha_j; x_i, x_j)).
pub fn kpoint(alphas: &[f64], xs: &[f64], tol: f64, cfg: &PearceyConfig) -> Result<f64> {
    let k = alphas.len();
    if k == 0 || xs.len() != k {
        return Err(CuspError::DomainError("alphas and xs must match and be nonempty".into()));
    }
    if alphas.windows(2).any(|w| w[1] < w[0]) {
        return Err(CuspError::DomainError("alphas must be nondecreasing (time order)".into()));
    }
    let mut mat = vec![Complex64::new(0.0, 0.0); k * k];
    for i in 0..k {
        for j in 0..k {
            mat[i * k + j] = kernel(alphas[i], alphas[j], xs[i], xs[j], tol, cfg)?.value;
        }
    }
    // LU with partial pivoting
    let mut det = Complex64::new(1.0, 0.0);
    for col in 0..k {
        let mut pivot = col;
        for row in col + 1..k {
            if mat[row * k + col].norm() > mat[pivot * k + col].norm() {
                pivot = row;
            }
        }
        if mat[pivot * k + col].norm() == 0.0 {
            return Ok(0.0);
        }
        if pivot != col {
            for j in 0..k {
                mat.swap(col * k + j, pivot * k + j);
            }
            det = -det;
        }
        let d = mat[col * k + col];
        det *= d;
        for row in col + 1..k {
            let f = mat[row * k + col] / d;
            for j in col..k {
                let v = mat[col * k + j];
                mat[row * k + j] -= f * v;
            }
        }
    }
    if det.im.abs() > 10.0 * tol * (1.0 + det.re.abs()) {
        return Err(CuspError::NonConvergence(format!(
            "k-point determinant has residual imaginary part {det}"
        )));
    }
    Ok(det.re)
}
