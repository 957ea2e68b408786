//! Hard-concrete gates: stretched, clamped concrete variables whose medians
//! reach exact zeros, plus the closed-form probability of a gate being active.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{sigmoid, Tape, Var};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GateConstants {
    /// Lower stretch bound, `< 0`.
    pub gamma: f64,
    /// Upper stretch bound, `> 1`.
    pub zeta: f64,
    /// Concrete temperature.
    pub temperature: f64,
}

impl Default for GateConstants {
    fn default() -> Self {
        GateConstants {
            gamma: -0.1,
            zeta: 1.1,
            temperature: 2.0 / 3.0,
        }
    }
}

impl GateConstants {
    pub fn validate(&self) -> Result<()> {
        if !(self.gamma < 0.0 && self.zeta > 1.0 && self.temperature > 0.0) {
            return Err(Error::Config(format!(
                "gate constants need gamma < 0 < 1 < zeta and temperature > 0, got {self:?}"
            )));
        }
        Ok(())
    }

    /// Added to `log_phi` before the sigmoid in the active-probability formula.
    pub fn l0_offset(&self) -> f64 {
        -self.temperature * (-self.gamma / self.zeta).ln()
    }

    /// Largest `log_phi` whose median gate is exactly zero.
    pub fn zero_threshold(&self) -> f64 {
        self.temperature * logit(-self.gamma / (self.zeta - self.gamma))
    }

    /// Smallest `log_phi` whose median gate is exactly one.
    pub fn one_threshold(&self) -> f64 {
        self.temperature * logit((1.0 - self.gamma) / (self.zeta - self.gamma))
    }

    fn stretch(&self, s: f64) -> f64 {
        s * (self.zeta - self.gamma) + self.gamma
    }
}

/// Latent parameters of one structured mask vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GateGroup {
    pub log_phi: Vec<f64>,
    pub constants: GateConstants,
}

impl GateGroup {
    pub fn new(log_phi: Vec<f64>, constants: GateConstants) -> Result<Self> {
        constants.validate()?;
        if let Some(bad) = log_phi.iter().find(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!("non-finite gate latent {bad}")));
        }
        Ok(GateGroup { log_phi, constants })
    }

    /// Initializes `len` latents so each gate is active with `target_active_prob`.
    pub fn init<R: Rng + ?Sized>(
        len: usize,
        target_active_prob: f64,
        noise_std: f64,
        constants: GateConstants,
        rng: &mut R,
    ) -> Result<Self> {
        let log_phi = init_log_phi(len, target_active_prob, noise_std, &constants, rng)?;
        GateGroup::new(log_phi, constants)
    }

    pub fn len(&self) -> usize {
        self.log_phi.len()
    }

    pub fn is_empty(&self) -> bool {
        self.log_phi.is_empty()
    }

    /// Deterministic median gate values.
    pub fn median(&self) -> Vec<f64> {
        let c = &self.constants;
        self.log_phi
            .iter()
            .map(|&lp| c.stretch(sigmoid(lp / c.temperature)).clamp(0.0, 1.0))
            .collect()
    }

    /// Reparameterized sample from uniform noise `u ∈ (0,1)`.
    pub fn sample(&self, u: &[f64]) -> Result<Vec<f64>> {
        if u.len() != self.len() {
            return Err(Error::Dimension {
                op: "sample_gate",
                lhs: vec![self.len()],
                rhs: vec![u.len()],
            });
        }
        let c = &self.constants;
        u.iter()
            .zip(&self.log_phi)
            .map(|(&u, &lp)| {
                if !(u > 0.0 && u < 1.0) {
                    return Err(Error::Domain(format!("uniform noise {u} outside (0,1)")));
                }
                let raw = sigmoid((u.ln() - (1.0 - u).ln() + lp) / c.temperature);
                Ok(c.stretch(raw).clamp(0.0, 1.0))
            })
            .collect()
    }

    pub fn sample_with<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        let u: Vec<f64> = (0..self.len())
            .map(|_| loop {
                let v: f64 = rng.random();
                if v > 0.0 {
                    break v;
                }
            })
            .collect();
        self.sample(&u).expect("noise drawn inside (0,1)")
    }

    /// Closed-form `P(z != 0)` for each gate.
    pub fn expected_active_prob(&self) -> Vec<f64> {
        let off = self.constants.l0_offset();
        self.log_phi.iter().map(|&lp| sigmoid(lp + off)).collect()
    }
}

/// Gaussian latents centred so that `P(z != 0) = target_active_prob`.
pub fn init_log_phi<R: Rng + ?Sized>(
    len: usize,
    target_active_prob: f64,
    noise_std: f64,
    constants: &GateConstants,
    rng: &mut R,
) -> Result<Vec<f64>> {
    if !(target_active_prob > 0.0 && target_active_prob < 1.0) {
        return Err(Error::Domain(format!(
            "target active probability {target_active_prob} outside (0,1)"
        )));
    }
    if !(noise_std >= 0.0) {
        return Err(Error::Domain(format!("noise std {noise_std} must be >= 0")));
    }
    let mean = logit(target_active_prob) - constants.l0_offset();
    if noise_std == 0.0 {
        return Ok(vec![mean; len]);
    }
    let normal = Normal::new(mean, noise_std).map_err(|e| Error::Domain(e.to_string()))?;
    Ok((0..len).map(|_| normal.sample(rng)).collect())
}

/// Fraction of entries that are exactly zero.
pub fn exact_zero_fraction(z: &[f64]) -> f64 {
    if z.is_empty() {
        return 0.0;
    }
    z.iter().filter(|&&v| v == 0.0).count() as f64 / z.len() as f64
}

pub fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

/// Median gates recorded on a tape; `log_phi` may be any shape.
pub fn median_gate_var(tape: &mut Tape, log_phi: Var, c: &GateConstants) -> Var {
    let scaled = tape.scale(log_phi, 1.0 / c.temperature);
    let s = tape.sigmoid(scaled);
    let stretched = tape.scale(s, c.zeta - c.gamma);
    let shifted = tape.add_scalar(stretched, c.gamma);
    tape.clamp01(shifted)
}

/// Active probabilities recorded on a tape.
pub fn expected_active_var(tape: &mut Tape, log_phi: Var, c: &GateConstants) -> Var {
    let shifted = tape.add_scalar(log_phi, c.l0_offset());
    tape.sigmoid(shifted)
}
