use serde::{Deserialize, Serialize};

/// Polynomial fuel-rate surrogate (ml/s).
///
/// `rate = max(idle, c0 + c1·v + c2·v² + c3·v³ + max(0, a)·v·(d0 + d1·v))`
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FuelParams {
    pub idle: f64,
    pub c0: f64,
    pub c1: f64,
    pub c2: f64,
    pub c3: f64,
    pub d0: f64,
    pub d1: f64,
}

impl Default for FuelParams {
    fn default() -> Self {
        FuelParams {
            idle: 0.333,
            c0: 0.3,
            c1: 0.02,
            c2: 0.0,
            c3: 0.00025,
            d0: 0.05,
            d1: 0.002,
        }
    }
}

impl FuelParams {
    pub fn rate(&self, v: f64, a: f64) -> f64 {
        let cruise = self.c0 + v * (self.c1 + v * (self.c2 + v * self.c3));
        let traction = a.max(0.0) * v * (self.d0 + self.d1 * v);
        (cruise + traction).max(self.idle)
    }
}
