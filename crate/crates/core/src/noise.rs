//! Deterministic dyadic Brownian increments for coupled particle systems.
//!
//! Every increment over a dyadic sub-interval of a top-level step is a pure
//! function of (seed, particle id, epoch, level, index): top-level increments
//! are drawn directly, children are obtained by the midpoint bridge
//!
//! ```text
//!   dW_left = dW/2 + n,   dW_right = dW/2 - n,   n ~ N(0, h/4),
//! ```
//!
//! with the bridge draw keyed by the parent interval. Two consequences the
//! integrators rely on: coupled systems see identical increments per particle
//! id regardless of how either system subdivides its steps, and re-running a
//! trajectory with the same seed reproduces it bit for bit.

fn splitmix(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    let mut z = x;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn to_unit(x: u64) -> f64 {
    ((x >> 11) as f64 + 0.5) / (1u64 << 53) as f64
}

#[derive(Clone, Debug)]
pub struct BrownianLattice {
    pub seed: u64,
}

impl BrownianLattice {
    pub fn new(seed: u64) -> Self {
        Self { seed }
    }

    /// Standard normal keyed by (particle, epoch, level, index).
    fn gauss(&self, particle: i64, epoch: u32, level: u32, idx: u64) -> f64 {
        let mut s = splitmix(self.seed ^ 0x5851_f42d_4c95_7f2d);
        s = splitmix(s ^ (particle as u64).wrapping_mul(0xa076_1d64_78bd_642f));
        s = splitmix(s ^ ((epoch as u64) << 32 | level as u64));
        s = splitmix(s ^ idx);
        let u1 = to_unit(s);
        let u2 = to_unit(splitmix(s));
        (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
    }

    /// Brownian increment over the dyadic interval (level, idx) of a top step
    /// of length `dt_top` within the given epoch.
    pub fn increment(&self, particle: i64, epoch: u32, dt_top: f64, level: u32, idx: u64) -> f64 {
        if level == 0 {
            return dt_top.sqrt() * self.gauss(particle, epoch, 0, idx);
        }
        let parent = self.increment(particle, epoch, dt_top, level - 1, idx >> 1);
        let h_parent = dt_top / (2f64).powi(level as i32 - 1);
        let bridge = 0.5 * h_parent.sqrt() * self.gauss(particle, epoch, level, idx >> 1);
        if idx & 1 == 0 {
            0.5 * parent + bridge
        } else {
            0.5 * parent - bridge
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn children_sum_to_parent() {
        let lat = BrownianLattice::new(42);
        for level in 0..8 {
            for idx in 0..16u64 {
                let parent = lat.increment(3, 0, 0.5, level, idx);
                let left = lat.increment(3, 0, 0.5, level + 1, 2 * idx);
                let right = lat.increment(3, 0, 0.5, level + 1, 2 * idx + 1);
                assert!((left + right - parent).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn deterministic_and_particle_independent() {
        let a = BrownianLattice::new(7);
        let b = BrownianLattice::new(7);
        assert_eq!(a.increment(5, 1, 0.25, 3, 9), b.increment(5, 1, 0.25, 3, 9));
        assert_ne!(a.increment(5, 1, 0.25, 3, 9), a.increment(6, 1, 0.25, 3, 9));
        assert_ne!(a.increment(5, 1, 0.25, 3, 9), BrownianLattice::new(8).increment(5, 1, 0.25, 3, 9));
    }

    #[test]
    fn increments_have_brownian_moments() {
        let lat = BrownianLattice::new(11);
        let dt = 0.37;
        let n = 20_000;
        let mut sum = 0.0;
        let mut sum2 = 0.0;
        for idx in 0..n {
            let v = lat.increment(1, 0, dt, 0, idx);
            sum += v;
            sum2 += v * v;
        }
        let mean = sum / n as f64;
        let var = sum2 / n as f64 - mean * mean;
        assert!(mean.abs() < 0.01, "mean {mean}");
        assert!((var / dt - 1.0).abs() < 0.03, "var/dt {}", var / dt);
    }
}
