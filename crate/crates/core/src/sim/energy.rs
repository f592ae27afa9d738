//! First-order radio model.

use std::fmt;
use std::ops::{Add, AddAssign, Sub};

/// Energy in integer femtojoules so ledger sums reconcile without rounding drift.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Energy(u64);

const FJ_PER_J: f64 = 1e15;

impl Energy {
    pub const ZERO: Energy = Energy(0);

    /// Rounds to the nearest femtojoule; negative or NaN input maps to zero.
    pub fn from_joules(j: f64) -> Self {
        if j.is_nan() || j <= 0.0 {
            return Energy(0);
        }
        Energy((j * FJ_PER_J).round() as u64)
    }

    pub fn from_femtojoules(fj: u64) -> Self {
        Energy(fj)
    }

    pub fn femtojoules(self) -> u64 {
        self.0
    }

    pub fn joules(self) -> f64 {
        self.0 as f64 / FJ_PER_J
    }

    pub fn saturating_sub(self, other: Energy) -> Energy {
        Energy(self.0.saturating_sub(other.0))
    }
}

impl Add for Energy {
    type Output = Energy;
    fn add(self, rhs: Energy) -> Energy {
        Energy(self.0 + rhs.0)
    }
}

impl AddAssign for Energy {
    fn add_assign(&mut self, rhs: Energy) {
        self.0 += rhs.0;
    }
}

impl Sub for Energy {
    type Output = Energy;
    fn sub(self, rhs: Energy) -> Energy {
        Energy(self.0 - rhs.0)
    }
}

impl std::iter::Sum for Energy {
    fn sum<I: Iterator<Item = Energy>>(iter: I) -> Energy {
        iter.fold(Energy::ZERO, Add::add)
    }
}

impl fmt::Display for Energy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:.12}", self.joules())
    }
}

/// Radio constants. Units are SI: J/bit, J/bit/m², J/bit/m⁴, J.
#[derive(Debug, Clone, PartialEq)]
pub struct EnergyParams {
    pub e_elec: f64,
    pub eps_fs: f64,
    pub eps_mp: f64,
    pub e_da: f64,
    pub initial_energy: f64,
    pub death_threshold: f64,
}

impl Default for EnergyParams {
    fn default() -> Self {
        Self {
            e_elec: 50e-9,
            eps_fs: 10e-12,
            eps_mp: 1.3e-15,
            e_da: 5e-9,
            initial_energy: 0.5,
            death_threshold: 0.0,
        }
    }
}

impl EnergyParams {
    /// Free-space / multipath crossover distance.
    pub fn d0(&self) -> f64 {
        (self.eps_fs / self.eps_mp).sqrt()
    }

    pub fn validate(&self) -> Result<(), String> {
        let fields = [
            ("e_elec", self.e_elec),
            ("eps_fs", self.eps_fs),
            ("eps_mp", self.eps_mp),
            ("e_da", self.e_da),
            ("initial_energy", self.initial_energy),
            ("death_threshold", self.death_threshold),
        ];
        for (name, v) in fields {
            if !v.is_finite() || v < 0.0 {
                return Err(format!("energy.{name} must be a finite value >= 0"));
            }
        }
        if self.eps_mp == 0.0 {
            return Err("energy.eps_mp must be > 0".into());
        }
        if self.initial_energy <= self.death_threshold {
            return Err("energy.initial_energy must exceed energy.death_threshold".into());
        }
        Ok(())
    }
}

/// Costs are rounded to whole femtojoules, the unit the ledger counts in.
fn quantize(j: f64) -> f64 {
    Energy::from_joules(j).joules()
}

pub fn tx_energy(params: &EnergyParams, bits: u64, d: f64) -> f64 {
    let k = bits as f64;
    let amp = if d < params.d0() {
        params.eps_fs * k * d * d
    } else {
        params.eps_mp * k * d.powi(4)
    };
    quantize(params.e_elec * k + amp)
}

pub fn rx_energy(params: &EnergyParams, bits: u64) -> f64 {
    quantize(params.e_elec * bits as f64)
}

/// Cost of folding one incoming payload of `bits` into an aggregate.
pub fn aggregation_energy(params: &EnergyParams, bits: u64) -> f64 {
    quantize(params.e_da * bits as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn spot_values() {
        let p = EnergyParams::default();
        assert_eq!(tx_energy(&p, 1000, 50.0), 7.5e-5);
        assert_eq!(rx_energy(&p, 1000), 5e-5);
        assert_eq!(aggregation_energy(&p, 4000), 2e-5);
        assert_eq!(tx_energy(&p, 0, 300.0), 0.0);
        assert_eq!(rx_energy(&p, 0), 0.0);
    }

    #[test]
    fn branches_meet_at_crossover() {
        let p = EnergyParams::default();
        let d0 = p.d0();
        assert!((d0 - 87.705_801_930_702_92).abs() < 1e-9);
        let k = 4000.0;
        let fs = p.e_elec * k + p.eps_fs * k * d0 * d0;
        let mp = p.e_elec * k + p.eps_mp * k * d0.powi(4);
        assert!((fs - mp).abs() <= 1e-12 * fs);
    }

    #[test]
    fn reception_is_cheaper_than_transmission() {
        let p = EnergyParams::default();
        for bits in [1, 200, 4000] {
            for d in [0.5, 10.0, 87.0, 88.0, 250.0] {
                assert!(rx_energy(&p, bits) < tx_energy(&p, bits, d));
            }
        }
    }

    #[test]
    fn femtojoule_conversion() {
        assert_eq!(Energy::from_joules(0.5).femtojoules(), 500_000_000_000_000);
        assert_eq!(Energy::from_joules(-1.0), Energy::ZERO);
        assert_eq!(Energy::from_joules(7.5e-5).joules(), 7.5e-5);
    }
}
