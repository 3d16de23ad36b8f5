//! Budget lists such as `64,128,2%,0.5%`.
//!
//! Percentages are kept as exact decimals and resolve against the prompt
//! length as `floor(pct · L_p)`, never below one token.

use std::fmt;
use std::str::FromStr;

use kvevict_core::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BudgetSpec {
    Tokens(usize),
    /// `numer / denom` percent.
    Percent { numer: u64, denom: u64 },
}

impl BudgetSpec {
    pub fn resolve(self, prompt_len: usize) -> usize {
        match self {
            BudgetSpec::Tokens(n) => n,
            BudgetSpec::Percent { numer, denom } => {
                let t = (numer as u128 * prompt_len as u128) / (denom as u128 * 100);
                (t as usize).max(1)
            }
        }
    }
}

impl fmt::Display for BudgetSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match *self {
            BudgetSpec::Tokens(n) => write!(f, "{n}"),
            BudgetSpec::Percent { numer, denom } => {
                let scale = denom.ilog10() as usize;
                if denom == 1 {
                    write!(f, "{numer}%")
                } else {
                    write!(f, "{}.{:0scale$}%", numer / denom, numer % denom)
                }
            }
        }
    }
}

impl FromStr for BudgetSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Error> {
        let bad = || Error::InvalidConfig(format!("invalid budget {s:?}"));
        let s = s.trim();
        let Some(pct) = s.strip_suffix('%') else {
            let n: usize = s.parse().map_err(|_| bad())?;
            if n == 0 {
                return Err(Error::InvalidConfig("budget must be >= 1 token".into()));
            }
            return Ok(BudgetSpec::Tokens(n));
        };
        let digits = |d: &str| !d.is_empty() && d.bytes().all(|b| b.is_ascii_digit());
        let (int, frac) = match pct.split_once('.') {
            Some((i, f)) if digits(f) => (i, f),
            Some(_) => return Err(bad()),
            None => (pct, ""),
        };
        if !digits(int) || frac.len() > 6 {
            return Err(bad());
        }
        let denom = 10u64.pow(frac.len() as u32);
        let numer: u64 = format!("{int}{frac}").parse().map_err(|_| bad())?;
        if numer == 0 || numer > 100 * denom {
            return Err(Error::InvalidConfig(format!("percent budget {s:?} must be in (0, 100]")));
        }
        Ok(BudgetSpec::Percent { numer, denom })
    }
}

pub fn parse_budget_list(s: &str) -> Result<Vec<BudgetSpec>, Error> {
    let list: Vec<BudgetSpec> = s
        .split(',')
        .filter(|p| !p.trim().is_empty())
        .map(str::parse)
        .collect::<Result<_, _>>()?;
    if list.is_empty() {
        return Err(Error::InvalidConfig("budget list is empty".into()));
    }
    Ok(list)
}
