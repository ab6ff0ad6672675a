//! Real/synthetic dataset mixing under source and positive/negative ratios.

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::sample::{Manifest, SmokeSample};
use crate::error::{Error, Result};

/// A ratio `a:b` of two non-negative integers, not both zero.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct Ratio {
    pub left: u32,
    pub right: u32,
}

impl Ratio {
    pub fn new(left: u32, right: u32) -> Result<Self> {
        if left == 0 && right == 0 {
            return Err(Error::invalid("ratio 0:0 is undefined"));
        }
        Ok(Self { left, right })
    }

    pub const fn one_to_one() -> Self {
        Self { left: 1, right: 1 }
    }

    /// Left share of `total`, rounded to the nearest integer.
    fn left_share(&self, total: usize) -> usize {
        let sum = (self.left + self.right) as u128;
        ((total as u128 * self.left as u128 * 2 + sum) / (2 * sum)) as usize
    }
}

impl fmt::Display for Ratio {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}", self.left, self.right)
    }
}

impl FromStr for Ratio {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let (a, b) = s
            .split_once(':')
            .ok_or_else(|| Error::invalid(format!("ratio {s:?} is not of the form a:b")))?;
        let parse = |v: &str| {
            v.trim()
                .parse::<u32>()
                .map_err(|e| Error::invalid(format!("ratio {s:?}: {e}")))
        };
        Ratio::new(parse(a)?, parse(b)?)
    }
}

impl TryFrom<String> for Ratio {
    type Error = Error;
    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<Ratio> for String {
    fn from(r: Ratio) -> String {
        r.to_string()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct Plan {
    real_pos: usize,
    real_neg: usize,
    synth_pos: usize,
    synth_neg: usize,
}

struct Pools<'a> {
    real_pos: Vec<&'a SmokeSample>,
    real_neg: Vec<&'a SmokeSample>,
    synth_pos: Vec<&'a SmokeSample>,
    synth_neg: Vec<&'a SmokeSample>,
}

impl<'a> Pools<'a> {
    fn new(real: &'a Manifest, synthetic: &'a Manifest) -> Self {
        let (real_pos, real_neg) = real.records.iter().partition(|r| r.is_positive());
        let (synth_pos, synth_neg) = synthetic.records.iter().partition(|r| r.is_positive());
        Self {
            real_pos,
            real_neg,
            synth_pos,
            synth_neg,
        }
    }

    /// Allocation for exactly `total` records, or the most deficient category.
    fn plan(
        &self,
        total: usize,
        real_synth: Ratio,
        pos_neg: Ratio,
    ) -> std::result::Result<Plan, (String, usize, usize)> {
        let n_real = real_synth.left_share(total);
        let n_synth = total - n_real;
        let n_pos = pos_neg.left_share(total);
        let n_neg = total - n_pos;
        let (rp, rn, sp, sn) = (
            self.real_pos.len(),
            self.real_neg.len(),
            self.synth_pos.len(),
            self.synth_neg.len(),
        );

        // A nonzero side of either ratio must receive at least one record.
        if real_synth.left > 0 && n_real == 0 {
            return Err(("real".into(), 1, 0));
        }
        if pos_neg.left > 0 && n_pos == 0 {
            return Err(("positive".into(), 1, 0));
        }
        if real_synth.right > 0 && n_synth == 0 {
            return Err(("synthetic".into(), 1, 0));
        }
        if pos_neg.right > 0 && n_neg == 0 {
            return Err(("negative".into(), 1, 0));
        }
        if n_real > rp + rn {
            return Err(("real".into(), n_real, rp + rn));
        }
        if n_synth > sp + sn {
            return Err(("synthetic".into(), n_synth, sp + sn));
        }
        if n_neg > rn + sn {
            return Err(("negative".into(), n_neg, rn + sn));
        }
        if n_pos > rp + sp {
            return Err(("positive".into(), n_pos, rp + sp));
        }

        // real_neg = x fixes the other three counts.
        let lo = [
            0,
            n_real.saturating_sub(rp),
            n_neg.saturating_sub(sn),
            n_neg.saturating_sub(n_synth),
        ]
        .into_iter()
        .max()
        .unwrap();
        let hi = [rn, n_real, n_neg, (sp + n_neg).saturating_sub(n_synth)]
            .into_iter()
            .min()
            .unwrap();
        if lo > hi {
            return Err(if hi == rn {
                ("real negative".into(), lo, rn)
            } else if lo == n_real.saturating_sub(rp) {
                ("real positive".into(), n_real - hi, rp)
            } else {
                ("synthetic positive".into(), n_synth + lo - n_neg, sp)
            });
        }
        // Negatives come from the real side whenever possible.
        let real_neg = hi;
        Ok(Plan {
            real_pos: n_real - real_neg,
            real_neg,
            synth_pos: n_synth + real_neg - n_neg,
            synth_neg: n_neg - real_neg,
        })
    }
}

/// Mixes real and synthetic samples.
///
/// Records without a smoke mask are negatives. With `total = None` the largest
/// feasible output is produced; with `Some(n)` exactly `n` records are produced
/// or a capacity error names the deficient category. Both ratios are honored
/// to within one record and the output is shuffled deterministically by `seed`.
pub fn mix_datasets(
    real: &Manifest,
    synthetic: &Manifest,
    ratio_real_synth: Ratio,
    ratio_pos_neg: Ratio,
    seed: u64,
    total: Option<usize>,
) -> Result<Manifest> {
    let pools = Pools::new(real, synthetic);
    let plan = match total {
        Some(n) => pools.plan(n, ratio_real_synth, ratio_pos_neg).map_err(
            |(category, needed, available)| Error::Capacity {
                category,
                needed,
                available,
            },
        )?,
        None => {
            let max = real.len() + synthetic.len();
            let found = (1..=max)
                .rev()
                .find_map(|n| pools.plan(n, ratio_real_synth, ratio_pos_neg).ok());
            match found {
                Some(p) => p,
                None => {
                    let (category, needed, available) = pools
                        .plan(max.max(1), ratio_real_synth, ratio_pos_neg)
                        .err()
                        .unwrap_or(("any".into(), 1, 0));
                    return Err(Error::Capacity {
                        category,
                        needed,
                        available,
                    });
                }
            }
        }
    };

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut take = |pool: &[&SmokeSample], n: usize| -> Vec<SmokeSample> {
        let mut idx: Vec<usize> = (0..pool.len()).collect();
        idx.shuffle(&mut rng);
        let mut chosen: Vec<usize> = idx.into_iter().take(n).collect();
        chosen.sort_unstable();
        chosen.into_iter().map(|i| pool[i].clone()).collect()
    };
    let mut out =
        Vec::with_capacity(plan.real_pos + plan.real_neg + plan.synth_pos + plan.synth_neg);
    out.extend(take(&pools.real_pos, plan.real_pos));
    out.extend(take(&pools.real_neg, plan.real_neg));
    out.extend(take(&pools.synth_pos, plan.synth_pos));
    out.extend(take(&pools.synth_neg, plan.synth_neg));
    out.shuffle(&mut rng);
    Ok(Manifest::new(out))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{Source, Split};

    fn records(prefix: &str, n: usize, source: Source, positive: bool) -> Vec<SmokeSample> {
        (0..n)
            .map(|i| SmokeSample {
                id: format!("{prefix}{i:03}"),
                image_path: format!("{prefix}{i:03}.png").into(),
                mask_path: positive.then(|| format!("{prefix}{i:03}_mask.png").into()),
                caption: "c".into(),
                source,
                split: Split::Train,
            })
            .collect()
    }

    #[test]
    fn ratio_parsing() {
        assert_eq!("3:2".parse::<Ratio>().unwrap(), Ratio::new(3, 2).unwrap());
        assert!("0:0".parse::<Ratio>().is_err());
        assert!("12".parse::<Ratio>().is_err());
    }

    #[test]
    fn one_to_one_both_ways() {
        let real = Manifest::new(records("bg", 100, Source::Background, false));
        let synth = Manifest::new(records("s", 100, Source::Synthetic, true));
        let out = mix_datasets(
            &real,
            &synth,
            Ratio::one_to_one(),
            Ratio::one_to_one(),
            7,
            None,
        )
        .unwrap();
        assert_eq!(out.len(), 200);
        let n_synth = out
            .records
            .iter()
            .filter(|r| r.source == Source::Synthetic)
            .count();
        assert_eq!(n_synth, 100);
        let n_pos = out.records.iter().filter(|r| r.is_positive()).count();
        assert_eq!(n_pos, 100);
    }

    #[test]
    fn degenerate_ratio_takes_only_real() {
        let mut real = records("r", 40, Source::Real, true);
        real.extend(records("bg", 40, Source::Background, false));
        let synth = Manifest::new(records("s", 50, Source::Synthetic, true));
        let out = mix_datasets(
            &Manifest::new(real),
            &synth,
            Ratio::new(1, 0).unwrap(),
            Ratio::one_to_one(),
            1,
            None,
        )
        .unwrap();
        assert_eq!(out.len(), 80);
        assert!(out.records.iter().all(|r| r.source != Source::Synthetic));
    }

    #[test]
    fn deterministic_under_seed() {
        let real = Manifest::new(records("bg", 30, Source::Background, false));
        let synth = Manifest::new(records("s", 30, Source::Synthetic, true));
        let a = mix_datasets(
            &real,
            &synth,
            Ratio::one_to_one(),
            Ratio::one_to_one(),
            5,
            None,
        )
        .unwrap();
        let b = mix_datasets(
            &real,
            &synth,
            Ratio::one_to_one(),
            Ratio::one_to_one(),
            5,
            None,
        )
        .unwrap();
        assert_eq!(a.to_jsonl().unwrap(), b.to_jsonl().unwrap());
        let c = mix_datasets(
            &real,
            &synth,
            Ratio::one_to_one(),
            Ratio::one_to_one(),
            6,
            None,
        )
        .unwrap();
        assert_ne!(a.to_jsonl().unwrap(), c.to_jsonl().unwrap());
    }

    #[test]
    fn capacity_error_names_category() {
        let real = Manifest::new(records("r", 10, Source::Real, true));
        let synth = Manifest::new(records("s", 10, Source::Synthetic, true));
        let err = mix_datasets(
            &real,
            &synth,
            Ratio::one_to_one(),
            Ratio::one_to_one(),
            0,
            Some(20),
        )
        .unwrap_err();
        match err {
            Error::Capacity { category, .. } => assert_eq!(category, "negative"),
            other => panic!("unexpected {other:?}"),
        }
        let err = mix_datasets(
            &real,
            &synth,
            Ratio::one_to_one(),
            Ratio::one_to_one(),
            0,
            None,
        )
        .unwrap_err();
        assert!(matches!(err, Error::Capacity { .. }));
    }

    #[test]
    fn ratios_within_one_record() {
        let mut real = records("r", 37, Source::Real, true);
        real.extend(records("bg", 53, Source::Background, false));
        let synth = Manifest::new(records("s", 41, Source::Synthetic, true));
        let out = mix_datasets(
            &Manifest::new(real),
            &synth,
            Ratio::new(2, 1).unwrap(),
            Ratio::new(1, 1).unwrap(),
            3,
            None,
        )
        .unwrap();
        let n = out.len() as f64;
        let n_real = out
            .records
            .iter()
            .filter(|r| r.source != Source::Synthetic)
            .count() as f64;
        let n_pos = out.records.iter().filter(|r| r.is_positive()).count() as f64;
        assert!((n_real - n * 2.0 / 3.0).abs() <= 1.0);
        assert!((n_pos - n / 2.0).abs() <= 1.0);
        let mut ids: Vec<_> = out.records.iter().map(|r| &r.id).collect();
        ids.sort();
        ids.dedup();
        assert_eq!(ids.len(), out.len());
    }
}
