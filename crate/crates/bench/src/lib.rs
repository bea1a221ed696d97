//! Shared fixtures for the pipeline benchmarks.

use cct_core::{GridSpec, Smib, SmibParams};
use nalgebra::DVector;

/// SMIB at the given inertia with the usual limits.
pub fn smib(m: f64) -> (Smib, DVector<f64>) {
    let params = SmibParams {
        pm: 0.5,
        m,
        delta_max: 0.8,
        omega_max: 0.6,
        ..SmibParams::default()
    };
    (Smib::new(params), params.param_vector())
}

pub fn grid(n: usize) -> GridSpec {
    GridSpec {
        x1_range: (-3.0, 1.0),
        x2_range: (-1.5, 1.0),
        nx: n,
        ny: n,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use cct_core::{compute_cct, CctOptions, InstabilityMode};

    #[test]
    fn fixtures_cover_both_modes() {
        let opts = CctOptions::default();
        let (s, p) = smib(0.1);
        assert_eq!(compute_cct(&s, &p, &opts).unwrap().mode, InstabilityMode::Mode1FaultHitsBoundary);
        let (s, p) = smib(0.3);
        assert_eq!(compute_cct(&s, &p, &opts).unwrap().mode, InstabilityMode::Mode2PostHitsBoundary);
        assert_eq!(grid(4).nx * grid(4).ny, 16);
    }
}
