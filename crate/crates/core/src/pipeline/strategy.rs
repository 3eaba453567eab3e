//! Strategy names of the form `(Min|Mean)-LSM-k[-PS-x]`.

use std::fmt;
use std::str::FromStr;

use crate::error::{invalid, BasnError, Result};
use crate::fusion::FusionStrategy;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StrategyName {
    pub fusion: FusionStrategy,
    pub lsm_k: u8,
    /// Permutative straddling bpp budget.
    pub ps_limit_bpp: Option<f64>,
}

impl StrategyName {
    pub fn parse(s: &str) -> Result<Self> {
        let bad = || invalid(format!("strategy {s:?} does not match (Min|Mean)-LSM-k[-PS-x]"));
        let parts: Vec<&str> = s.split('-').collect();
        let fusion = match parts.first().map(|p| p.to_ascii_lowercase()).as_deref() {
            Some("min") => FusionStrategy::Min,
            Some("mean") => FusionStrategy::Mean,
            _ => return Err(bad()),
        };
        if parts.len() != 3 && parts.len() != 5 {
            return Err(bad());
        }
        if !parts[1].eq_ignore_ascii_case("lsm") {
            return Err(bad());
        }
        let lsm_k: u8 = parts[2].parse().map_err(|_| bad())?;
        let ps_limit_bpp = if parts.len() == 5 {
            if !parts[3].eq_ignore_ascii_case("ps") {
                return Err(bad());
            }
            let x: f64 = parts[4].parse().map_err(|_| bad())?;
            if !x.is_finite() || x <= 0.0 {
                return Err(invalid(format!("PS limit in {s:?} must be positive")));
            }
            Some(x)
        } else {
            None
        };
        Ok(Self {
            fusion,
            lsm_k,
            ps_limit_bpp,
        })
    }
}

impl FromStr for StrategyName {
    type Err = BasnError;

    fn from_str(s: &str) -> Result<Self> {
        Self::parse(s)
    }
}

impl fmt::Display for StrategyName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}-LSM-{}", self.fusion.name(), self.lsm_k)?;
        if let Some(x) = self.ps_limit_bpp {
            write!(f, "-PS-{x}")?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_and_prints_canonical_names() {
        for s in ["Min-LSM-0", "Mean-LSM-1", "Mean-LSM-2-PS-0.8", "Min-LSM-1-PS-1.2"] {
            assert_eq!(StrategyName::parse(s).unwrap().to_string(), s);
        }
        let n: StrategyName = "mean-lsm-1-ps-1".parse().unwrap();
        assert_eq!(n.to_string(), "Mean-LSM-1-PS-1");
    }

    #[test]
    fn rejects_malformed_names() {
        for s in ["", "Max-LSM-1", "Min-LSM", "Min-LSM-x", "Min-LSM-1-PS", "Min-LSM-1-PS-0", "Min-LSM-1-XX-1.0", "Min-LSM-300"] {
            assert!(StrategyName::parse(s).is_err(), "{s}");
        }
    }
}
