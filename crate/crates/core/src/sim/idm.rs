use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Intelligent driver model parameters.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IdmParams {
    /// Desired speed `v_d` (m/s).
    pub desired_speed: f64,
    /// Safe time gap `T` (s).
    pub time_gap: f64,
    /// Minimum standstill gap `s0` (m).
    pub min_gap: f64,
    /// Acceleration exponent `δ`.
    pub exponent: i32,
    /// Maximum acceleration `a` (m/s²).
    pub max_accel: f64,
    /// Comfortable deceleration `b` (m/s², positive).
    pub comfort_decel: f64,
}

impl Default for IdmParams {
    fn default() -> Self {
        IdmParams {
            desired_speed: 15.0,
            time_gap: 1.0,
            min_gap: 5.0,
            exponent: 4,
            max_accel: 1.5,
            comfort_decel: 2.0,
        }
    }
}

impl IdmParams {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            self.desired_speed,
            self.time_gap,
            self.min_gap,
            self.max_accel,
            self.comfort_decel,
        ];
        if positive.iter().any(|&x| !(x > 0.0 && x.is_finite())) || self.exponent < 1 {
            return Err(Error::Config(format!(
                "IDM parameters must be positive: {self:?}"
            )));
        }
        Ok(())
    }

    /// Desired dynamic gap `s*(v, Δv)`.
    pub fn desired_gap(&self, v: f64, dv: f64) -> f64 {
        let dynamic =
            v * self.time_gap + v * dv / (2.0 * (self.max_accel * self.comfort_decel).sqrt());
        self.min_gap + dynamic.max(0.0)
    }

    /// Unclamped IDM acceleration.
    ///
    /// `dv` is own speed minus the leader's; a free road is `gap = +∞`,
    /// `dv = 0`.
    pub fn accel(&self, v: f64, dv: f64, gap: f64) -> Result<f64> {
        if gap <= 0.0 || gap.is_nan() {
            return Err(Error::DegenerateGap(gap));
        }
        let free = (v / self.desired_speed).powi(self.exponent);
        let interaction = if gap.is_infinite() {
            0.0
        } else {
            (self.desired_gap(v, dv) / gap).powi(2)
        };
        Ok(self.max_accel * (1.0 - free - interaction))
    }
}
