//! Bundled model configurations, one per volatility family.

use crate::error::{Error, Result};
use crate::func::ScalarFn;
use crate::kernels::KernelSpec;
use crate::model::{DriftSpec, ModelSpec, StateFn, VolatilitySpec, DEFAULT_STEPS};
use crate::toymodel::toy_model_spec;
use crate::volmap::{AuxSpec, Family, UMap, VolProcessSpec};

pub const PRESET_NAMES: [&str; 6] = ["bs_const", "toy_sabr", "rough_gauss", "frac_heston", "mixed_demo", "reflected_ou"];

fn scalar_model(name: &str, vol: VolProcessSpec, sigma: ScalarFn, rho: f64) -> ModelSpec {
    ModelSpec {
        name: Some(name.into()),
        horizon: 1.0,
        n_steps: DEFAULT_STEPS,
        m: 1,
        vol,
        drift: DriftSpec::Rate,
        volatility: VolatilitySpec::Scalar(StateFn::new(sigma)),
        correlation: None,
        rho: Some(rho),
        s0: vec![1.0],
        rate: 0.0,
        assumption_b: true,
        sigma_may_vanish: false,
    }
}

/// Constant volatility `σ₀ = 0.2`, `r = 0`, `T = 1`.
pub fn bs_const() -> ModelSpec {
    let vol = VolProcessSpec::gaussian(vec![0.0], vec![vec![Some(KernelSpec::Brownian)]]);
    scalar_model("bs_const", vol, ScalarFn::Constant { c: 0.2 }, 0.0)
}

/// `σ(t, u) = e^{-t/2 + u}` driven by an independent Brownian motion.
pub fn toy_sabr() -> ModelSpec {
    toy_model_spec(1.0, DEFAULT_STEPS)
}

/// Riemann–Liouville `H = 0.3` Gaussian driver, `σ = 0.2 e^u`, `ρ = -0.7`.
pub fn rough_gauss() -> ModelSpec {
    let vol = VolProcessSpec::gaussian(vec![0.0], vec![vec![Some(KernelSpec::RiemannLiouville { hurst: 0.3 })]]);
    scalar_model("rough_gauss", vol, ScalarFn::Exp { scale: 0.2, rate: 1.0 }, -0.7)
}

/// CIR variance `dV = 1.5(0.04 - V)dt + 0.3√V dB`, fractionally integrated with a
/// Riemann–Liouville `H = 0.3` kernel on top of `y = 0.04`; `σ = √u`, `ρ = -0.5`.
pub fn frac_heston() -> ModelSpec {
    let (kappa, theta, eta) = (1.5, 0.04, 0.3);
    let vol = VolProcessSpec {
        family: Family::FractionalNongaussian,
        d: 1,
        m: 1,
        y: vec![0.04],
        noise_kernels: vec![],
        drift_kernels: vec![Some(KernelSpec::RiemannLiouville { hurst: 0.3 })],
        u_maps: vec![Some(UMap { map: ScalarFn::PositivePart, component: 0 })],
        aux: vec![AuxSpec {
            v0: theta,
            drift: ScalarFn::Affine { a: kappa * theta, b: -kappa },
            dispersion: ScalarFn::SqrtPositive { scale: eta },
            driver: 0,
            full_truncation: true,
        }],
        volterra: vec![],
        reflect: false,
    };
    scalar_model("frac_heston", vol, ScalarFn::SqrtPositive { scale: 1.0 }, -0.5)
}

/// Gaussian Riemann–Liouville `H = 0.4` part plus the integral of an Ornstein–Uhlenbeck
/// auxiliary process; `σ = 0.2 e^u`, `ρ = -0.3`.
pub fn mixed_demo() -> ModelSpec {
    let vol = VolProcessSpec {
        family: Family::Mixed,
        d: 1,
        m: 1,
        y: vec![0.0],
        noise_kernels: vec![vec![Some(KernelSpec::RiemannLiouville { hurst: 0.4 })]],
        drift_kernels: vec![Some(KernelSpec::Brownian)],
        u_maps: vec![Some(UMap { map: ScalarFn::Identity, component: 0 })],
        aux: vec![AuxSpec {
            v0: 0.0,
            drift: ScalarFn::Affine { a: 0.0, b: -1.0 },
            dispersion: ScalarFn::Constant { c: 0.5 },
            driver: 0,
            full_truncation: false,
        }],
        volterra: vec![],
        reflect: false,
    };
    scalar_model("mixed_demo", vol, ScalarFn::Exp { scale: 0.2, rate: 1.0 }, -0.3)
}

/// Ornstein–Uhlenbeck process `dZ = (0.1 - Z)dt + 0.3 dB` reflected at 0, started at 0.1;
/// `σ = 0.1 + u`, `ρ = -0.3`.
pub fn reflected_ou() -> ModelSpec {
    let vol = VolProcessSpec {
        family: Family::ReflectedDiffusion,
        d: 1,
        m: 1,
        y: vec![0.1],
        noise_kernels: vec![],
        drift_kernels: vec![],
        u_maps: vec![],
        aux: vec![AuxSpec {
            v0: 0.1,
            drift: ScalarFn::Affine { a: 0.1, b: -1.0 },
            dispersion: ScalarFn::Constant { c: 0.3 },
            driver: 0,
            full_truncation: false,
        }],
        volterra: vec![],
        reflect: false,
    };
    let mut s = scalar_model("reflected_ou", vol, ScalarFn::Affine { a: 0.1, b: 1.0 }, -0.3);
    s.assumption_b = false;
    s
}

pub fn preset(name: &str) -> Result<ModelSpec> {
    match name {
        "bs_const" => Ok(bs_const()),
        "toy_sabr" => Ok(toy_sabr()),
        "rough_gauss" => Ok(rough_gauss()),
        "frac_heston" => Ok(frac_heston()),
        "mixed_demo" => Ok(mixed_demo()),
        "reflected_ou" => Ok(reflected_ou()),
        _ => Err(Error::InvalidModel(format!("unknown preset {name:?}; available: {}", PRESET_NAMES.join(", ")))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Model;

    #[test]
    fn presets_compile_and_round_trip() {
        for name in PRESET_NAMES {
            let spec = preset(name).unwrap();
            Model::new(&spec).unwrap();
            let js = serde_json::to_string(&spec).unwrap();
            let back: ModelSpec = serde_json::from_str(&js).unwrap();
            assert_eq!(serde_json::to_string(&back).unwrap(), js, "{name}");
        }
        assert!(preset("nope").is_err());
    }
}
