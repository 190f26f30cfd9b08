//! Named scalar coefficient functions with analytic derivatives.

use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

/// Scalar closure supplied from Rust code; never serialized.
#[derive(Clone)]
pub struct CustomFn(pub Arc<dyn Fn(f64) -> f64 + Send + Sync>);

impl fmt::Debug for CustomFn {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("CustomFn(..)")
    }
}

/// Scalar map `R → R` used for drifts, dispersions, `U` maps and volatility shapes.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(tag = "form", rename_all = "snake_case")]
pub enum ScalarFn {
    Zero,
    Constant { c: f64 },
    /// `a + b x`
    Affine { a: f64, b: f64 },
    /// `scale · sqrt(max(x, 0))`
    SqrtPositive { scale: f64 },
    /// `scale · exp(rate · x)`
    Exp { scale: f64, rate: f64 },
    Identity,
    Abs,
    Square,
    PositivePart,
    #[serde(skip)]
    Custom(CustomFn),
}

impl ScalarFn {
    pub fn custom<F: Fn(f64) -> f64 + Send + Sync + 'static>(f: F) -> Self {
        ScalarFn::Custom(CustomFn(Arc::new(f)))
    }

    #[inline]
    pub fn eval(&self, x: f64) -> f64 {
        match self {
            ScalarFn::Zero => 0.0,
            ScalarFn::Constant { c } => *c,
            ScalarFn::Affine { a, b } => a + b * x,
            ScalarFn::SqrtPositive { scale } => scale * x.max(0.0).sqrt(),
            ScalarFn::Exp { scale, rate } => scale * (rate * x).exp(),
            ScalarFn::Identity => x,
            ScalarFn::Abs => x.abs(),
            ScalarFn::Square => x * x,
            ScalarFn::PositivePart => x.max(0.0),
            ScalarFn::Custom(f) => (f.0)(x),
        }
    }

    /// Derivative; one-sided conventions at kinks, central differences for closures.
    #[inline]
    pub fn deriv(&self, x: f64) -> f64 {
        match self {
            ScalarFn::Zero | ScalarFn::Constant { .. } => 0.0,
            ScalarFn::Affine { b, .. } => *b,
            ScalarFn::SqrtPositive { scale } => {
                if x > 0.0 {
                    0.5 * scale / x.sqrt()
                } else {
                    0.0
                }
            }
            ScalarFn::Exp { scale, rate } => scale * rate * (rate * x).exp(),
            ScalarFn::Identity => 1.0,
            ScalarFn::Abs => x.signum(),
            ScalarFn::Square => 2.0 * x,
            ScalarFn::PositivePart => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            ScalarFn::Custom(f) => {
                let h = 1e-6 * x.abs().max(1.0);
                ((f.0)(x + h) - (f.0)(x - h)) / (2.0 * h)
            }
        }
    }

    pub fn is_zero(&self) -> bool {
        matches!(self, ScalarFn::Zero) || matches!(self, ScalarFn::Constant { c } if *c == 0.0)
    }

    pub fn is_custom(&self) -> bool {
        matches!(self, ScalarFn::Custom(_))
    }

    /// True when the map is constant in its argument.
    pub fn is_constant(&self) -> bool {
        matches!(self, ScalarFn::Zero | ScalarFn::Constant { .. })
            || matches!(self, ScalarFn::Affine { b, .. } | ScalarFn::Exp { rate: b, .. } if *b == 0.0)
    }

    /// Whether the map can return zero somewhere.
    pub fn may_vanish(&self) -> bool {
        match self {
            ScalarFn::Constant { c } => *c == 0.0,
            ScalarFn::Affine { a, b } => *b != 0.0 || *a == 0.0,
            ScalarFn::Exp { scale, .. } => *scale == 0.0,
            _ => true,
        }
    }
}
