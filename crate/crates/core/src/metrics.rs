//! Recognition metrics: unweighted and weighted average recall, accuracy
//! per lighting condition and per class.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use num_bigint::BigInt;
use num_rational::BigRational;
use num_traits::ToPrimitive;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Condition {
    Normal,
    Overexposure,
    #[serde(rename = "lowlight")]
    LowLight,
    #[serde(rename = "hdr")]
    Hdr,
}

impl Condition {
    pub const ALL: [Condition; 4] = [
        Condition::Normal,
        Condition::Overexposure,
        Condition::LowLight,
        Condition::Hdr,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Condition::Normal => "normal",
            Condition::Overexposure => "overexposure",
            Condition::LowLight => "lowlight",
            Condition::Hdr => "hdr",
        }
    }
}

impl fmt::Display for Condition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Condition {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let key: String = s.chars().filter(|c| c.is_ascii_alphanumeric()).collect();
        match key.to_ascii_lowercase().as_str() {
            "normal" => Ok(Condition::Normal),
            "overexposure" => Ok(Condition::Overexposure),
            "lowlight" => Ok(Condition::LowLight),
            "hdr" => Ok(Condition::Hdr),
            _ => Err(Error::data(format!("unknown lighting condition `{s}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct EvalRecord {
    pub true_class: usize,
    pub predicted_class: usize,
    pub condition: Condition,
}

impl EvalRecord {
    pub fn new(true_class: usize, predicted_class: usize, condition: Condition) -> Self {
        Self {
            true_class,
            predicted_class,
            condition,
        }
    }

    pub fn correct(&self) -> bool {
        self.true_class == self.predicted_class
    }
}

fn non_empty(records: &[EvalRecord]) -> Result<()> {
    if records.is_empty() {
        Err(Error::contract("metrics need at least one record"))
    } else {
        Ok(())
    }
}

/// `(correct, total)` keyed by true class.
fn class_tallies(records: &[EvalRecord]) -> BTreeMap<usize, (usize, usize)> {
    let mut tally = BTreeMap::new();
    for r in records {
        let e = tally.entry(r.true_class).or_insert((0, 0));
        e.0 += usize::from(r.correct());
        e.1 += 1;
    }
    tally
}

fn ratio(num: usize, den: usize) -> BigRational {
    BigRational::new(BigInt::from(num), BigInt::from(den))
}

fn nearest_f64(r: &BigRational) -> f64 {
    r.to_f64().expect("ratio in [0, 1]")
}

/// Fraction of correct predictions, exact.
pub fn war_exact(records: &[EvalRecord]) -> Result<BigRational> {
    non_empty(records)?;
    let correct = records.iter().filter(|r| r.correct()).count();
    Ok(ratio(correct, records.len()))
}

/// Mean recall over the classes that occur as true labels, exact.
pub fn uar_exact(records: &[EvalRecord]) -> Result<BigRational> {
    non_empty(records)?;
    let tally = class_tallies(records);
    let sum: BigRational = tally.values().map(|&(c, n)| ratio(c, n)).sum();
    Ok(sum / BigInt::from(tally.len()))
}

/// [`war_exact`] rounded once to the nearest `f64`.
pub fn war(records: &[EvalRecord]) -> Result<f64> {
    war_exact(records).map(|r| nearest_f64(&r))
}

/// [`uar_exact`] rounded once to the nearest `f64`; equal to [`war`] bit
/// for bit whenever every class has the same number of records.
pub fn uar(records: &[EvalRecord]) -> Result<f64> {
    uar_exact(records).map(|r| nearest_f64(&r))
}

/// Recall of every class that occurs as a true label.
pub fn per_class(records: &[EvalRecord]) -> BTreeMap<usize, f64> {
    class_tallies(records)
        .into_iter()
        .map(|(k, (c, n))| (k, c as f64 / n as f64))
        .collect()
}

/// Accuracy within each condition; conditions without records are absent.
pub fn condition_accuracy(records: &[EvalRecord]) -> BTreeMap<Condition, f64> {
    let mut tally: BTreeMap<Condition, (usize, usize)> = BTreeMap::new();
    for r in records {
        let e = tally.entry(r.condition).or_default();
        e.0 += usize::from(r.correct());
        e.1 += 1;
    }
    tally
        .into_iter()
        .map(|(k, (c, n))| (k, c as f64 / n as f64))
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub war: f64,
    pub uar: f64,
    pub per_condition: BTreeMap<Condition, f64>,
    pub per_class: BTreeMap<usize, f64>,
}

impl MetricsReport {
    pub fn from_records(records: &[EvalRecord]) -> Result<Self> {
        Ok(Self {
            war: war(records)?,
            uar: uar(records)?,
            per_condition: condition_accuracy(records),
            per_class: per_class(records),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rec(t: usize, p: usize) -> EvalRecord {
        EvalRecord::new(t, p, Condition::Normal)
    }

    #[test]
    fn hand_computed_two_class_case() {
        let r = [rec(0, 0), rec(0, 0), rec(0, 1), rec(1, 1)];
        assert_eq!(uar(&r).unwrap(), 5.0 / 6.0);
        assert_eq!(uar_exact(&r).unwrap(), BigRational::new(5.into(), 6.into()));
        assert_eq!(war(&r).unwrap(), 0.75);
    }

    #[test]
    fn trivial_cases() {
        let all = [rec(0, 0), rec(3, 3), rec(6, 6)];
        assert_eq!(uar(&all).unwrap(), 1.0);
        assert_eq!(war(&all).unwrap(), 1.0);
        assert_eq!(uar(&[rec(2, 0), rec(2, 1)]).unwrap(), 0.0);
        assert!(matches!(uar(&[]), Err(Error::Contract(_))));
        assert!(matches!(war(&[]), Err(Error::Contract(_))));
        let cond = condition_accuracy(&all);
        assert_eq!(cond.len(), 1);
        assert_eq!(cond[&Condition::Normal], 1.0);
    }

    #[test]
    fn condition_tally_matches_hand_count() {
        use Condition::*;
        let r = [
            EvalRecord::new(0, 0, Normal),
            EvalRecord::new(1, 0, Normal),
            EvalRecord::new(2, 2, LowLight),
            EvalRecord::new(3, 3, LowLight),
            EvalRecord::new(4, 1, LowLight),
            EvalRecord::new(5, 0, Hdr),
        ];
        let c = condition_accuracy(&r);
        assert_eq!(c[&Normal], 0.5);
        assert_eq!(c[&LowLight], 2.0 / 3.0);
        assert_eq!(c[&Hdr], 0.0);
        assert!(!c.contains_key(&Overexposure));
    }

    #[test]
    fn random_guessing_approaches_chance() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (n, j) = (20_000usize, 7usize);
        let r: Vec<_> = (0..n)
            .map(|_| rec(rng.gen_range(0..j), rng.gen_range(0..j)))
            .collect();
        let p = 1.0 / j as f64;
        let sigma = (p * (1.0 - p) / n as f64).sqrt();
        assert!((war(&r).unwrap() - p).abs() < 3.0 * sigma);
    }

    #[test]
    fn report_json_shape() {
        let r = [
            EvalRecord::new(0, 0, Condition::Hdr),
            EvalRecord::new(1, 0, Condition::LowLight),
        ];
        let v = serde_json::to_value(MetricsReport::from_records(&r).unwrap()).unwrap();
        assert_eq!(v["war"], 0.5);
        assert_eq!(v["per_condition"]["hdr"], 1.0);
        assert_eq!(v["per_condition"]["lowlight"], 0.0);
        assert_eq!(v["per_class"]["1"], 0.0);
    }

    #[test]
    fn condition_names_round_trip() {
        for c in Condition::ALL {
            assert_eq!(c.as_str().parse::<Condition>().unwrap(), c);
        }
        assert_eq!(
            "Low-Light".parse::<Condition>().unwrap(),
            Condition::LowLight
        );
        assert!("dusk".parse::<Condition>().is_err());
    }

    fn records() -> impl Strategy<Value = Vec<EvalRecord>> {
        prop::collection::vec((0usize..5, 0usize..5, 0usize..4), 1..60).prop_map(|v| {
            v.into_iter()
                .map(|(t, p, c)| EvalRecord::new(t, p, Condition::ALL[c]))
                .collect()
        })
    }

    proptest! {
        #[test]
        fn war_ignores_order(mut r in records(), seed in any::<u64>()) {
            let before = war(&r).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            for i in (1..r.len()).rev() {
                r.swap(i, rng.gen_range(0..=i));
            }
            prop_assert_eq!(before, war(&r).unwrap());
        }

        #[test]
        fn uar_ignores_class_duplication(r in records(), copies in 1usize..4) {
            let cls = r[0].true_class;
            let mut dup = r.clone();
            for x in r.iter().filter(|x| x.true_class == cls) {
                for _ in 0..copies {
                    dup.push(*x);
                }
            }
            prop_assert_eq!(uar(&r).unwrap(), uar(&dup).unwrap());
        }

        #[test]
        fn balanced_classes_make_uar_equal_war(preds in prop::collection::vec(0usize..4, 12)) {
            let r: Vec<_> = preds.iter().enumerate().map(|(i, &p)| rec(i % 4, p)).collect();
            prop_assert_eq!(uar(&r).unwrap().to_bits(), war(&r).unwrap().to_bits());
        }

        #[test]
        fn metrics_stay_in_unit_interval(r in records()) {
            for v in [uar(&r).unwrap(), war(&r).unwrap()] {
                prop_assert!((0.0..=1.0).contains(&v));
            }
        }
    }
}
