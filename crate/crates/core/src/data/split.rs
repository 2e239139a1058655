use std::fmt;
use std::ops::RangeInclusive;
use std::str::FromStr;

use crate::encodings::Timestamp;
use crate::error::{Error, Result};

/// Year ranges mapped to split names.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SplitRules {
    pub rules: Vec<(String, RangeInclusive<i32>)>,
}

impl SplitRules {
    pub fn new(rules: Vec<(String, RangeInclusive<i32>)>) -> Result<Self> {
        let r = SplitRules { rules };
        for (i, (a, ra)) in r.rules.iter().enumerate() {
            for (b, rb) in &r.rules[i + 1..] {
                if ra.start() <= rb.end() && rb.start() <= ra.end() {
                    return Err(Error::invalid(format!("split {a} overlaps split {b}")));
                }
            }
        }
        Ok(r)
    }

    /// 2014–2018 train, 2019 held out.
    pub fn pretrain() -> Self {
        Self::pretrain_with(2014..=2018)
    }

    /// `train_years` for training and the following year held out.
    pub fn pretrain_with(train_years: RangeInclusive<i32>) -> Self {
        let eval = train_years.end() + 1;
        SplitRules { rules: vec![("train".into(), train_years), ("eval".into(), eval..=eval)] }
    }

    /// 2020–2021 train, 2022 validation, 2023–2024 test.
    pub fn finetune() -> Self {
        SplitRules {
            rules: vec![
                ("train".into(), 2020..=2021),
                ("validation".into(), 2022..=2022),
                ("test".into(), 2023..=2024),
            ],
        }
    }

    pub fn years(&self) -> impl Iterator<Item = i32> + '_ {
        self.rules.iter().flat_map(|(_, r)| r.clone())
    }

    pub fn split_for_year(&self, year: i32) -> Result<&str> {
        self.rules
            .iter()
            .find(|(_, r)| r.contains(&year))
            .map(|(n, _)| n.as_str())
            .ok_or(Error::UncoveredYear(year))
    }
}

pub fn assign_split<'a>(t: &Timestamp, rules: &'a SplitRules) -> Result<&'a str> {
    rules.split_for_year(t.year())
}

/// `a-b` or a single year.
pub fn parse_year_range(s: &str) -> Result<RangeInclusive<i32>> {
    let bad = || Error::Malformed { what: "year range", detail: s.to_string() };
    let (a, b) = s.trim().split_once('-').unwrap_or((s.trim(), s.trim()));
    let (a, b): (i32, i32) = (a.trim().parse().map_err(|_| bad())?, b.trim().parse().map_err(|_| bad())?);
    if a > b {
        return Err(bad());
    }
    Ok(a..=b)
}

/// One `name years` pair per line, e.g. `validation 2022`; `#` starts a comment.
impl FromStr for SplitRules {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let mut rules = Vec::new();
        for line in s.lines() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (name, years) = line
                .split_once(char::is_whitespace)
                .ok_or_else(|| Error::Malformed { what: "split rule", detail: line.to_string() })?;
            rules.push((name.to_string(), parse_year_range(years)?));
        }
        SplitRules::new(rules)
    }
}

impl fmt::Display for SplitRules {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (n, r) in &self.rules {
            writeln!(f, "{n} {}-{}", r.start(), r.end())?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn year_lookup() {
        let ft = SplitRules::finetune();
        let pt = SplitRules::pretrain();
        let t = |y| Timestamp::from_calendar(y, 180, 0, 0).unwrap();
        assert_eq!(assign_split(&t(2022), &ft).unwrap(), "validation");
        assert_eq!(assign_split(&t(2016), &pt).unwrap(), "train");
        assert_eq!(assign_split(&t(2019), &pt).unwrap(), "eval");
        assert!(matches!(assign_split(&t(1999), &ft), Err(Error::UncoveredYear(1999))));
        assert!(assign_split(&t(1999), &pt).is_err());
    }

    #[test]
    fn pretrain_and_finetune_years_are_disjoint() {
        let pt: Vec<i32> = SplitRules::pretrain().years().collect();
        assert!(SplitRules::finetune().years().all(|y| !pt.contains(&y)));
    }

    #[test]
    fn parse_round_trip() {
        let r: SplitRules = "train 2020-2021\nvalidation 2022 # held out\ntest 2023-2024\n".parse().unwrap();
        assert_eq!(r, SplitRules::finetune());
        assert_eq!(r.to_string().parse::<SplitRules>().unwrap(), r);
        assert!("a 2020-2022\nb 2022".parse::<SplitRules>().is_err());
        assert!("a 20x0".parse::<SplitRules>().is_err());
    }
}
