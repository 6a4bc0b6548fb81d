//! Input parameter space and the raw <-> unit-cube coordinate maps.
//!
//! All internal work happens on `[-1, 1]^d`; raw units only appear at the
//! simulator boundary and in reports.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParameterDef {
    pub name: String,
    pub min: f64,
    pub max: f64,
}

impl ParameterDef {
    pub fn new(name: impl Into<String>, min: f64, max: f64) -> Self {
        ParameterDef {
            name: name.into(),
            min,
            max,
        }
    }

    fn half_width(&self) -> f64 {
        0.5 * (self.max - self.min)
    }
}

/// Ordered, validated list of simulator inputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<ParameterDef>", into = "Vec<ParameterDef>")]
pub struct ParameterSpace {
    params: Vec<ParameterDef>,
}

impl TryFrom<Vec<ParameterDef>> for ParameterSpace {
    type Error = Error;

    fn try_from(params: Vec<ParameterDef>) -> Result<Self> {
        ParameterSpace::new(params)
    }
}

impl From<ParameterSpace> for Vec<ParameterDef> {
    fn from(space: ParameterSpace) -> Self {
        space.params
    }
}

impl ParameterSpace {
    pub fn new(params: Vec<ParameterDef>) -> Result<Self> {
        if params.is_empty() {
            return Err(Error::config("parameters", "at least one parameter is required"));
        }
        for (k, p) in params.iter().enumerate() {
            if p.name.trim().is_empty() {
                return Err(Error::config(format!("parameters[{k}].name"), "must not be empty"));
            }
            if params[..k].iter().any(|q| q.name == p.name) {
                return Err(Error::config(
                    format!("parameters.{}", p.name),
                    "duplicate parameter name",
                ));
            }
            if !(p.min.is_finite() && p.max.is_finite()) || p.min >= p.max {
                return Err(Error::config(
                    format!("parameters.{}", p.name),
                    format!("min ({}) must be strictly less than max ({})", p.min, p.max),
                ));
            }
        }
        Ok(ParameterSpace { params })
    }

    /// The unit cube itself, with generic names `x0, x1, ...`.
    pub fn unit(dim: usize) -> Self {
        ParameterSpace::new(
            (0..dim)
                .map(|k| ParameterDef::new(format!("x{k}"), -1.0, 1.0))
                .collect(),
        )
        .expect("unit space is valid for dim >= 1")
    }

    pub fn dimension(&self) -> usize {
        self.params.len()
    }

    pub fn params(&self) -> &[ParameterDef] {
        &self.params
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.iter().map(|p| p.name.as_str())
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.params.iter().position(|p| p.name == name)
    }

    fn check_len(&self, len: usize, context: &str) -> Result<()> {
        if len != self.dimension() {
            return Err(Error::Dimension {
                context: context.to_string(),
                expected: self.dimension(),
                found: len,
            });
        }
        Ok(())
    }

    /// Maps raw coordinates onto `[-1, 1]`. Bounds are inclusive.
    pub fn to_unit(&self, raw: &[f64]) -> Result<Vec<f64>> {
        self.check_len(raw.len(), "raw point")?;
        self.params
            .iter()
            .zip(raw)
            .map(|(p, &v)| {
                if !(v >= p.min && v <= p.max) {
                    return Err(Error::OutOfBounds {
                        name: p.name.clone(),
                        value: v,
                        min: p.min,
                        max: p.max,
                    });
                }
                Ok(((v - p.min) / p.half_width() - 1.0).clamp(-1.0, 1.0))
            })
            .collect()
    }

    /// Inverse of [`to_unit`](Self::to_unit).
    pub fn from_unit(&self, unit: &[f64]) -> Result<Vec<f64>> {
        self.check_len(unit.len(), "unit point")?;
        self.params
            .iter()
            .zip(unit)
            .map(|(p, &u)| {
                if !(-1.0..=1.0).contains(&u) {
                    return Err(Error::OutOfBounds {
                        name: p.name.clone(),
                        value: u,
                        min: -1.0,
                        max: 1.0,
                    });
                }
                Ok((p.min + (u + 1.0) * p.half_width()).clamp(p.min, p.max))
            })
            .collect()
    }
}

pub fn in_unit_cube(x: &[f64]) -> bool {
    x.iter().all(|v| (-1.0..=1.0).contains(v))
}

/// The seventeen inputs and ranges of the galaxy-formation study, in table order.
pub fn galform_space() -> ParameterSpace {
    let rows: [(&str, f64, f64); 17] = [
        ("vhotdisk", 100.0, 550.0),
        ("vhotburst", 100.0, 550.0),
        ("alphahot", 2.0, 3.7),
        ("alphareheat", 0.2, 1.2),
        ("epsilonStar", 10.0, 1000.0),
        ("alphastar", -3.2, -0.3),
        ("yield", 0.02, 0.05),
        ("tdisk", 0.0, 1.0),
        ("stabledisk", 0.65, 0.95),
        ("alphacool", 0.2, 1.2),
        ("epsilonSMBHEddington", 0.004, 0.05),
        ("taumrg", 0.8, 2.7),
        ("fellip", 0.1, 0.35),
        ("fburst", 0.01, 0.15),
        ("FSMBH", 0.001, 0.01),
        ("VCUT", 20.0, 50.0),
        ("ZCUT", 6.0, 9.0),
    ];
    ParameterSpace::new(
        rows.iter()
            .map(|&(n, lo, hi)| ParameterDef::new(n, lo, hi))
            .collect(),
    )
    .expect("static table is valid")
}
