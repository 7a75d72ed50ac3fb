use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::connectivity::densify;
use crate::convnet::{Network, NewConnectionInit};
use crate::error::{Error, Result};
use crate::tensor::Scalar;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Growth {
    #[default]
    Double,
    None,
}

/// Connection density that starts at `initial_density` and doubles every
/// `period` steps until every connection is active.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DensifySchedule {
    pub initial_density: f64,
    pub period: u64,
    #[serde(default)]
    pub growth: Growth,
}

impl DensifySchedule {
    pub fn new(initial_density: f64, period: u64) -> Result<Self> {
        let s = DensifySchedule {
            initial_density,
            period,
            growth: Growth::Double,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.initial_density > 0.0 && self.initial_density <= 1.0) {
            return Err(Error::Config(format!(
                "initial_density must lie in (0, 1], got {}",
                self.initial_density
            )));
        }
        if self.period == 0 {
            return Err(Error::Config("densify period must be >= 1".into()));
        }
        Ok(())
    }

    /// Number of doublings until the density saturates at 1.
    pub fn doublings_to_full(&self) -> u32 {
        let mut d = self.initial_density;
        let mut k = 0;
        while d < 1.0 {
            d *= 2.0;
            k += 1;
        }
        k
    }
}

/// `min(1, d0 · 2^⌊step/T⌋)`.
pub fn target_density(schedule: &DensifySchedule, step: u64) -> f64 {
    match schedule.growth {
        Growth::None => schedule.initial_density,
        Growth::Double => {
            let k = (step / schedule.period).min(64) as i32;
            (schedule.initial_density * 2f64.powi(k)).min(1.0)
        }
    }
}

/// Grows every conv mask to at least the scheduled density, choosing new
/// connections uniformly among the inactive ones. Returns whether any mask
/// changed.
pub fn apply_densification<T: Scalar, R: Rng + ?Sized>(
    net: &mut Network<T>,
    schedule: &DensifySchedule,
    step: u64,
    init: NewConnectionInit,
    rng: &mut R,
) -> Result<bool> {
    let target = target_density(schedule, step);
    let mut changed = false;
    for layer in net.conv_layers_mut() {
        let mask = layer.mask();
        let cap = mask.capacity();
        let want = if target >= 1.0 {
            cap
        } else {
            crate::connectivity::ceil_guarded(target * cap as f64).min(cap)
        };
        let have = mask.count();
        if want > have {
            let grown = densify(mask, want - have, rng);
            layer.grow(grown, init, rng)?;
            changed = true;
        }
    }
    Ok(changed)
}
