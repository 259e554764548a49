//! Pointwise constitutive relations: diffusivity interpolation, the quintic
//! smooth step, the double-well potential and the excipient mixture rule.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Scalar physical constants shared by every excipient and phase.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PhysicsConstants {
    pub d_solvent: f64,
    pub d_solid: f64,
    pub c_sat: f64,
    pub rho_s: f64,
    /// Interface thickness.
    pub eps_t: f64,
    /// Double-well barrier height.
    pub w: f64,
    /// Interface mobility.
    pub m_phi: f64,
    /// Steepness of the distance-to-phase projection.
    pub mu: f64,
}

/// Transport constants at their published values; interface width, mobility
/// and projection steepness set so the interface spans a few elements of a
/// 32x32 to 75x75 unit-square mesh (see [`PhysicsConstants::published`]).
impl Default for PhysicsConstants {
    fn default() -> Self {
        Self {
            eps_t: 0.03,
            m_phi: 3e-7,
            mu: 0.03 * std::f64::consts::SQRT_2,
            ..Self::published()
        }
    }
}

impl PhysicsConstants {
    /// The literal published set. On a unit domain its interface is far
    /// thinner than any practical element, and the double-well barrier pins
    /// the front: nothing dissolves.
    pub fn published() -> Self {
        Self {
            d_solvent: 1e-6,
            d_solid: 5e-11,
            c_sat: 1.0,
            rho_s: 5.0,
            eps_t: 1e-4,
            w: 140.0,
            m_phi: 2e-3,
            mu: 1e-4,
        }
    }

    /// Width of the equilibrium tanh profile, `sqrt(2) eps_t`.
    pub fn interface_width(&self) -> f64 {
        std::f64::consts::SQRT_2 * self.eps_t
    }

    pub fn validate(&self) -> Result<()> {
        let named = [
            ("d_solvent", self.d_solvent),
            ("d_solid", self.d_solid),
            ("c_sat", self.c_sat),
            ("rho_s", self.rho_s),
            ("eps_t", self.eps_t),
            ("w", self.w),
            ("m_phi", self.m_phi),
            ("mu", self.mu),
        ];
        let mut problems = Vec::new();
        for (name, v) in named {
            if !(v.is_finite() && v > 0.0) {
                problems.push(format!("constants.{name} must be positive (got {v})"));
            }
        }
        if self.d_solid > 1e-2 * self.d_solvent {
            problems.push(format!(
                "constants.d_solid ({}) must not exceed 1e-2 * d_solvent ({})",
                self.d_solid, self.d_solvent
            ));
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(problems.join("; ")))
        }
    }
}

/// One excipient entry: display metadata plus its dissolution rate constant.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Excipient {
    pub name: String,
    #[serde(default)]
    pub color: String,
    pub k: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExcipientLibrary {
    pub materials: Vec<Excipient>,
}

impl ExcipientLibrary {
    pub fn new(materials: Vec<Excipient>) -> Result<Self> {
        let lib = Self { materials };
        lib.validate()?;
        Ok(lib)
    }

    /// Five-material library with the published rate constants.
    pub fn standard() -> Self {
        let entries = [
            ("pink", "#FF2FA3", 0.1e-4),
            ("blue", "#00C2FF", 0.5e-4),
            ("green", "#8BE000", 1.0e-4),
            ("yellow", "#FFC700", 5.0e-4),
            ("white", "#FFFFFF", 0.0),
        ];
        Self {
            materials: entries
                .iter()
                .map(|(n, c, k)| Excipient {
                    name: n.to_string(),
                    color: c.to_string(),
                    k: *k,
                })
                .collect(),
        }
    }

    /// A single excipient with rate `k`.
    pub fn single(k: f64) -> Self {
        Self {
            materials: vec![Excipient {
                name: "solid".into(),
                color: "#808080".into(),
                k,
            }],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.materials.is_empty() {
            return Err(Error::Config("excipient library must not be empty".into()));
        }
        for m in &self.materials {
            if !(m.k.is_finite() && m.k >= 0.0) {
                return Err(Error::Config(format!(
                    "excipient '{}' has invalid rate constant {}",
                    m.name, m.k
                )));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.materials.len()
    }

    pub fn is_empty(&self) -> bool {
        self.materials.is_empty()
    }

    pub fn rates(&self) -> Vec<f64> {
        self.materials.iter().map(|m| m.k).collect()
    }

    pub fn names(&self) -> Vec<&str> {
        self.materials.iter().map(|m| m.name.as_str()).collect()
    }
}

/// Quintic smooth step `h(phi) = phi^3 (10 - 15 phi + 6 phi^2)`. No clamping.
#[inline]
pub fn smooth_step(phi: f64) -> f64 {
    phi * phi * phi * (10.0 - 15.0 * phi + 6.0 * phi * phi)
}

#[inline]
pub fn smooth_step_derivative(phi: f64) -> f64 {
    30.0 * phi * phi * (1.0 - phi) * (1.0 - phi)
}

#[inline]
pub fn diffusivity(phi: f64, constants: &PhysicsConstants) -> f64 {
    constants.d_solvent + (constants.d_solid - constants.d_solvent) * smooth_step(phi)
}

#[inline]
pub fn diffusivity_derivative(phi: f64, constants: &PhysicsConstants) -> f64 {
    (constants.d_solid - constants.d_solvent) * smooth_step_derivative(phi)
}

/// Linear mixture `sum_s gamma_s k_s`.
pub fn dissolution_rate(gamma: &[f64], library: &ExcipientLibrary) -> Result<f64> {
    if gamma.len() != library.len() {
        return Err(Error::Config(format!(
            "material fraction vector has {} entries but the library has {}",
            gamma.len(),
            library.len()
        )));
    }
    Ok(gamma
        .iter()
        .zip(&library.materials)
        .map(|(g, m)| g * m.k)
        .sum())
}

/// Double-well potential `W phi^2 (1 - phi)^2`.
#[inline]
pub fn potential(phi: f64, w: f64) -> f64 {
    w * phi * phi * (1.0 - phi) * (1.0 - phi)
}

#[inline]
pub fn potential_derivative(phi: f64, w: f64) -> f64 {
    2.0 * w * phi * (1.0 - phi) * (1.0 - 2.0 * phi)
}

#[inline]
pub fn potential_second_derivative(phi: f64, w: f64) -> f64 {
    2.0 * w * (1.0 - 6.0 * phi + 6.0 * phi * phi)
}
