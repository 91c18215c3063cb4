//! Coordinate-wise compressive bijections applied to observations before the
//! policy and critic see them. Costs and shaping always use raw states.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::environments::State;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum TransformKind {
    #[serde(rename = "id", alias = "identity")]
    Identity,
    #[serde(rename = "ss", alias = "symsqrt")]
    SymSqrt,
    #[default]
    #[serde(rename = "sl", alias = "symloge")]
    SymLoge,
    #[serde(rename = "sig", alias = "symsigmoid")]
    SymSigmoid,
}

impl TransformKind {
    pub const ALL: [TransformKind; 4] = [
        TransformKind::Identity,
        TransformKind::SymSqrt,
        TransformKind::SymLoge,
        TransformKind::SymSigmoid,
    ];

    pub fn label(self) -> &'static str {
        match self {
            TransformKind::Identity => "id",
            TransformKind::SymSqrt => "ss",
            TransformKind::SymLoge => "sl",
            TransformKind::SymSigmoid => "sig",
        }
    }
}

impl fmt::Display for TransformKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

impl FromStr for TransformKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "id" | "identity" => Ok(TransformKind::Identity),
            "ss" | "symsqrt" => Ok(TransformKind::SymSqrt),
            "sl" | "symloge" => Ok(TransformKind::SymLoge),
            "sig" | "symsigmoid" => Ok(TransformKind::SymSigmoid),
            other => Err(Error::Config(format!("unknown state transform `{other}`"))),
        }
    }
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Forward map. `symsigmoid` jumps at 0 (value 0 there, limit ½ from the
/// right), which only the empty-queue coordinate ever hits.
pub fn apply_transform(kind: TransformKind, x: f64) -> Result<f64> {
    if !x.is_finite() {
        return Err(Error::Contract(format!("transform input must be finite, got {x}")));
    }
    Ok(forward(kind, x))
}

fn forward(kind: TransformKind, x: f64) -> f64 {
    let a = x.abs();
    match kind {
        TransformKind::Identity => x,
        TransformKind::SymSqrt => sign(x) * ((a + 1.0).sqrt() - 1.0),
        TransformKind::SymLoge => sign(x) * a.ln_1p(),
        TransformKind::SymSigmoid => sign(x) / (1.0 + (-a).exp()),
    }
}

/// Transforms queues then flags, coordinate by coordinate.
pub fn transform_state(kind: TransformKind, state: &State) -> Vec<f64> {
    state.features().map(|x| forward(kind, x)).collect()
}

pub fn inverse_transform(kind: TransformKind, y: f64) -> Result<f64> {
    if !y.is_finite() {
        return Err(Error::Domain(format!("cannot invert non-finite value {y}")));
    }
    let a = y.abs();
    let x = match kind {
        TransformKind::Identity => y,
        TransformKind::SymSqrt => sign(y) * ((a + 1.0) * (a + 1.0) - 1.0),
        TransformKind::SymLoge => sign(y) * a.exp_m1(),
        TransformKind::SymSigmoid => {
            if a == 0.0 {
                0.0
            } else if a <= 0.5 || a >= 1.0 {
                return Err(Error::Domain(format!("{y} is outside the range of symsigmoid")));
            } else {
                sign(y) * (a / (1.0 - a)).ln()
            }
        }
    };
    Ok(x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    #[test]
    fn forward_examples() {
        assert_eq!(apply_transform(TransformKind::SymSqrt, 3.0).unwrap(), 1.0);
        assert_eq!(apply_transform(TransformKind::SymLoge, 0.0).unwrap(), 0.0);
        assert_abs_diff_eq!(
            apply_transform(TransformKind::SymLoge, std::f64::consts::E - 1.0).unwrap(),
            1.0,
            epsilon = 1e-15
        );
        for kind in TransformKind::ALL {
            assert_eq!(apply_transform(kind, 0.0).unwrap(), 0.0);
        }
        assert!(matches!(apply_transform(TransformKind::SymLoge, f64::NAN), Err(Error::Contract(_))));
        assert!(apply_transform(TransformKind::SymSqrt, f64::INFINITY).is_err());
    }

    #[test]
    fn state_examples() {
        let s = State::new(vec![5, 2], vec![1, 0]);
        assert_eq!(transform_state(TransformKind::Identity, &s), vec![5.0, 2.0, 1.0, 0.0]);
        let z = State::new(vec![0, 0], vec![0, 0]);
        assert_eq!(transform_state(TransformKind::SymLoge, &z), vec![0.0; 4]);
        let big = State::queues_only(vec![10_000, 0]);
        let out = transform_state(TransformKind::SymSqrt, &big);
        // √10001 − 1
        assert_abs_diff_eq!(out[0], 99.004_999_875_006_25, epsilon = 1e-9);
        assert_eq!(out[1], 0.0);
    }

    #[test]
    fn inverse_examples() {
        assert_eq!(inverse_transform(TransformKind::SymSqrt, 1.0).unwrap(), 3.0);
        assert_eq!(inverse_transform(TransformKind::SymLoge, 0.0).unwrap(), 0.0);
        // 1/(1+e^{-x}) = 0.75  ⇔  e^{-x} = 1/3
        assert_abs_diff_eq!(
            inverse_transform(TransformKind::SymSigmoid, 0.75).unwrap(),
            3f64.ln(),
            epsilon = 1e-12
        );
        for bad in [1.0, -1.0, 0.3, 1.5] {
            assert!(matches!(inverse_transform(TransformKind::SymSigmoid, bad), Err(Error::Domain(_))));
        }
    }

    #[test]
    fn labels_round_trip() {
        for kind in TransformKind::ALL {
            assert_eq!(kind.label().parse::<TransformKind>().unwrap(), kind);
        }
        assert!("log".parse::<TransformKind>().is_err());
    }

    fn round_trip_ok(kind: TransformKind, x: f64) -> bool {
        let back = inverse_transform(kind, forward(kind, x)).unwrap();
        (x - back).abs() <= 1e-9 * x.abs().max(1.0)
    }

    proptest! {
        #[test]
        fn odd_symmetry(x in -1e6f64..1e6) {
            for kind in TransformKind::ALL {
                prop_assert_eq!(forward(kind, -x), -forward(kind, x));
            }
        }

        #[test]
        fn strictly_increasing_on_positive(a in 1e-3f64..1e4, b in 1e-3f64..1e4) {
            prop_assume!(a < b);
            for kind in [TransformKind::Identity, TransformKind::SymSqrt, TransformKind::SymLoge] {
                prop_assert!(forward(kind, a) < forward(kind, b));
            }
            // symsigmoid saturates in floating point; order is strict while it has resolution
            if b < 30.0 {
                prop_assert!(forward(TransformKind::SymSigmoid, a) < forward(TransformKind::SymSigmoid, b));
            }
        }

        #[test]
        fn round_trip_wide(x in -1e6f64..1e6) {
            prop_assert!(round_trip_ok(TransformKind::SymSqrt, x));
            prop_assert!(round_trip_ok(TransformKind::SymLoge, x));
            prop_assert!(round_trip_ok(TransformKind::Identity, x));
        }

        #[test]
        fn round_trip_sigmoid(x in -18.5f64..18.5) {
            prop_assert!(round_trip_ok(TransformKind::SymSigmoid, x));
        }

        /// Near saturation σ(x) is stored within half an ulp of 1, so the
        /// recovered x can only be as good as ε·eˣ.
        #[test]
        fn round_trip_sigmoid_saturated(x in 18.5f64..20.0, negative in any::<bool>()) {
            let x = if negative { -x } else { x };
            let back = inverse_transform(TransformKind::SymSigmoid, forward(TransformKind::SymSigmoid, x)).unwrap();
            prop_assert!((x - back).abs() <= f64::EPSILON * x.abs().exp());
        }

        #[test]
        fn compressive(a in 0f64..1e5, b in 0f64..1e5) {
            for kind in [TransformKind::SymSqrt, TransformKind::SymLoge, TransformKind::SymSigmoid] {
                if a > 0.0 && b > 0.0 || kind != TransformKind::SymSigmoid {
                    prop_assert!((forward(kind, b) - forward(kind, a)).abs() <= (b - a).abs() + 1e-12);
                }
            }
        }
    }
}
