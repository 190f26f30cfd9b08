//! One-dimensional quadrature for integrands with algebraic endpoint singularities.
//!
//! The integrand receives the distances to both endpoints, so values close to
//! an endpoint are never formed by cancellation. Each half of the interval is
//! mapped through `x = y^p` with `p = 1/(1+γ)` when the integrand behaves like
//! `x^γ`, `γ < 0`, which removes the leading singularity before tanh-sinh
//! quadrature is applied.

use quadrature::double_exponential;

/// Integrates `g(da, db)` over an interval of length `len`, where `da` and
/// `db` are the distances to the left and right endpoints. `ga` and `gb` are
/// the leading power exponents of `g` at each end (use 0 for regular ends).
pub fn integrate_endpoints<G>(g: G, len: f64, ga: f64, gb: f64, tol: f64) -> f64
where
    G: Fn(f64, f64) -> f64,
{
    if len <= 0.0 {
        return 0.0;
    }
    let half = 0.5 * len;
    let left = half_integral(|x| g(x, len - x), half, ga, tol);
    let right = half_integral(|x| g(len - x, x), half, gb, tol);
    left + right
}

/// Integrates `h(x)` over `[0, width]` where `h ~ x^gamma` near 0.
pub fn half_integral<H>(h: H, width: f64, gamma: f64, tol: f64) -> f64
where
    H: Fn(f64) -> f64,
{
    if width <= 0.0 {
        return 0.0;
    }
    if gamma >= 0.0 {
        return double_exponential::integrate(&h, 0.0, width, tol).integral;
    }
    let p = 1.0 / (1.0 + gamma);
    let ymax = width.powf(1.0 / p);
    double_exponential::integrate(
        |y: f64| {
            if y <= 0.0 {
                return 0.0;
            }
            let x = y.powf(p);
            h(x) * p * y.powf(p - 1.0)
        },
        0.0,
        ymax,
        tol,
    )
    .integral
}

/// Plain tanh-sinh integral of a smooth integrand on `[a, b]`.
pub fn integrate<F: Fn(f64) -> f64>(f: F, a: f64, b: f64, tol: f64) -> f64 {
    if b <= a {
        return 0.0;
    }
    double_exponential::integrate(f, a, b, tol).integral
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn power_singularity_left() {
        let v = half_integral(|x| x.powf(-0.9), 1.0, -0.9, 1e-13);
        assert!((v - 10.0).abs() < 1e-9, "{v}");
    }

    #[test]
    fn both_ends_singular() {
        // Beta(0.6, 0.3) integrand.
        let v = integrate_endpoints(|a, b| a.powf(-0.4) * b.powf(-0.7), 1.0, -0.4, -0.7, 1e-13);
        let exact = statrs::function::beta::beta(0.6, 0.3);
        assert!((v - exact).abs() < 1e-9 * exact, "{v} vs {exact}");
    }

    #[test]
    fn smooth_integrand() {
        let v = integrate(|x| x.exp(), 0.0, 1.0, 1e-14);
        assert!((v - (1f64.exp() - 1.0)).abs() < 1e-13);
    }
}
