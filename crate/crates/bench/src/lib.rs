//! Fixtures shared by the criterion benchmarks in `benches/`.

use gibbs_mple::{simulate, Configuration, ModelSpec, SamplerConfig, Theta, Window};

pub fn lj_spec() -> ModelSpec {
    ModelSpec::lennard_jones(0.5).expect("valid range")
}

pub fn lj_theta() -> Theta {
    Theta::new(vec![-1.0, 0.5, 0.2]).expect("finite")
}

/// Equilibrium LJ pattern on `[0, side]^2`.
pub fn lj_pattern(side: f64, seed: u64) -> Configuration {
    let w = Window::square(side).expect("positive side");
    let sc = SamplerConfig::default_for(&lj_spec(), &lj_theta(), &w, seed);
    simulate(&lj_spec(), &lj_theta(), &w, &sc).expect("sampler").0
}
