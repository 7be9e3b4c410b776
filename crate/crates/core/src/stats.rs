//! Order statistics and the rank-sum test used by the analytics layer.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::numeric::Scalar;

fn total_cmp<T: Scalar>(a: &T, b: &T) -> Ordering {
    a.partial_cmp(b).unwrap_or(Ordering::Equal)
}

/// Arithmetic mean; `None` for an empty slice.
pub fn mean<T: Scalar>(values: &[T]) -> Option<T> {
    if values.is_empty() {
        return None;
    }
    let sum = values.iter().fold(T::zero(), |acc, &v| acc + v);
    Some(sum / T::lit(values.len() as f64))
}

pub fn max<T: Scalar>(values: &[T]) -> Option<T> {
    values.iter().copied().reduce(|a, b| if b > a { b } else { a })
}

pub fn min<T: Scalar>(values: &[T]) -> Option<T> {
    values.iter().copied().reduce(|a, b| if b < a { b } else { a })
}

/// k-th smallest element (0-based) by selection, without sorting the input.
fn kth<T: Scalar>(scratch: &mut [T], k: usize) -> T {
    let (_, v, _) = scratch.select_nth_unstable_by(k, total_cmp);
    *v
}

/// Median; even counts average the two central values.
pub fn median<T: Scalar>(values: &[T]) -> Option<T> {
    let n = values.len();
    if n == 0 {
        return None;
    }
    let mut scratch = values.to_vec();
    if n % 2 == 1 {
        Some(kth(&mut scratch, n / 2))
    } else {
        let hi = kth(&mut scratch, n / 2);
        // after selection everything left of n/2 is <= hi
        let lo = max(&scratch[..n / 2]).expect("non-empty");
        Some((lo + hi) / T::lit(2.0))
    }
}

/// Quantile with linear interpolation between closest ranks, position
/// `(n - 1) * p` in the sorted data. `p` is clamped to `[0, 1]`.
pub fn quantile<T: Scalar>(values: &[T], p: f64) -> Option<T> {
    let n = values.len();
    if n == 0 {
        return None;
    }
    let p = p.clamp(0.0, 1.0);
    let pos = (n - 1) as f64 * p;
    let lo_idx = pos.floor() as usize;
    let frac = pos - lo_idx as f64;
    let mut scratch = values.to_vec();
    let lo = kth(&mut scratch, lo_idx);
    if frac == 0.0 || lo_idx + 1 >= n {
        return Some(lo);
    }
    let hi = min(&scratch[lo_idx + 1..]).expect("non-empty");
    Some(lo + T::lit(frac) * (hi - lo))
}

/// Five-number summary for boxplot rendering.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FiveNumber<T> {
    pub min: T,
    pub q1: T,
    pub median: T,
    pub q3: T,
    pub max: T,
}

impl<T: Scalar> FiveNumber<T> {
    pub fn of(values: &[T]) -> Option<Self> {
        Some(FiveNumber {
            min: min(values)?,
            q1: quantile(values, 0.25)?,
            median: median(values)?,
            q3: quantile(values, 0.75)?,
            max: max(values)?,
        })
    }
}

/// Direction of the alternative hypothesis in [`rank_sum`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Alternative {
    /// The second sample tends to be larger than the first.
    Greater,
    /// The second sample tends to be smaller than the first.
    Less,
    TwoSided,
}

/// Outcome of a Mann-Whitney rank-sum test.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RankSum<T> {
    /// U statistic of the second sample: number of (first, second) pairs in
    /// which the second value is larger, ties counting one half.
    pub u: T,
    pub p_value: T,
    pub exact: bool,
}

/// Largest combined sample size for which the exact null distribution is
/// enumerated.
const EXACT_LIMIT: usize = 40;

/// Mann-Whitney U test comparing `second` against `first`.
///
/// Uses the exact permutation distribution when there are no ties and the
/// combined size is small, otherwise the normal approximation with tie and
/// continuity corrections. Returns `None` when either sample is empty.
pub fn rank_sum<T: Scalar>(first: &[T], second: &[T], alt: Alternative) -> Option<RankSum<T>> {
    let n1 = first.len();
    let n2 = second.len();
    if n1 == 0 || n2 == 0 {
        return None;
    }
    let mut pooled: Vec<(T, usize)> = first
        .iter()
        .map(|&v| (v, 0))
        .chain(second.iter().map(|&v| (v, 1)))
        .collect();
    pooled.sort_by(|a, b| total_cmp(&a.0, &b.0));

    // midranks, 1-based
    let n = pooled.len();
    let mut ranks = vec![0.0f64; n];
    let mut tie_term = 0.0f64;
    let mut i = 0;
    while i < n {
        let mut j = i + 1;
        while j < n && pooled[j].0 == pooled[i].0 {
            j += 1;
        }
        let avg = (i + j + 1) as f64 / 2.0;
        for r in &mut ranks[i..j] {
            *r = avg;
        }
        let t = (j - i) as f64;
        tie_term += t * t * t - t;
        i = j;
    }
    let rank_second: f64 = pooled
        .iter()
        .zip(&ranks)
        .filter(|((_, g), _)| *g == 1)
        .map(|(_, r)| r)
        .sum();
    let u2 = rank_second - (n2 * (n2 + 1)) as f64 / 2.0;
    let total_pairs = (n1 * n2) as f64;

    let has_ties = tie_term > 0.0;
    let (p, exact) = if !has_ties && n <= EXACT_LIMIT {
        let dist = u_distribution(n1, n2);
        let total: f64 = dist.iter().sum();
        let u = u2.round() as usize;
        let upper: f64 = dist[u..].iter().sum::<f64>() / total;
        let lower: f64 = dist[..=u].iter().sum::<f64>() / total;
        let p = match alt {
            Alternative::Greater => upper,
            Alternative::Less => lower,
            Alternative::TwoSided => (2.0 * upper.min(lower)).min(1.0),
        };
        (p, true)
    } else {
        let mean_u = total_pairs / 2.0;
        let nf = n as f64;
        let var = (n1 * n2) as f64 / 12.0 * ((nf + 1.0) - tie_term / (nf * (nf - 1.0)));
        if var <= 0.0 {
            (1.0, false)
        } else {
            let sd = var.sqrt();
            let p = match alt {
                Alternative::Greater => upper_tail((u2 - mean_u - 0.5) / sd),
                Alternative::Less => upper_tail((mean_u - u2 - 0.5) / sd),
                Alternative::TwoSided => {
                    let z = ((u2 - mean_u).abs() - 0.5).max(0.0) / sd;
                    (2.0 * upper_tail(z)).min(1.0)
                }
            };
            (p, false)
        }
    };
    Some(RankSum { u: T::lit(u2), p_value: T::lit(p), exact })
}

/// Frequencies of U = 0..=n1*n2 under the null hypothesis, by the standard
/// recurrence over the largest pooled element.
fn u_distribution(n1: usize, n2: usize) -> Vec<f64> {
    // table[a][b] = distribution for sizes (a, b)
    let mut table: Vec<Vec<Vec<f64>>> = vec![vec![Vec::new(); n2 + 1]; n1 + 1];
    for a in 0..=n1 {
        for b in 0..=n2 {
            table[a][b] = if a == 0 || b == 0 {
                vec![1.0]
            } else {
                let mut d = vec![0.0; a * b + 1];
                // largest element from the second sample: it beats all `a`
                for (u, f) in table[a][b - 1].iter().enumerate() {
                    d[u + a] += f;
                }
                for (u, f) in table[a - 1][b].iter().enumerate() {
                    d[u] += f;
                }
                d
            };
        }
    }
    std::mem::take(&mut table[n1][n2])
}

/// Standard normal upper tail probability.
fn upper_tail(z: f64) -> f64 {
    0.5 * erfc(z / std::f64::consts::SQRT_2)
}

/// Complementary error function (Numerical Recipes Chebyshev fit, relative
/// error below 1.2e-7).
fn erfc(x: f64) -> f64 {
    let z = x.abs();
    let t = 1.0 / (1.0 + 0.5 * z);
    let poly = -z * z - 1.265_512_23
        + t * (1.000_023_68
            + t * (0.374_091_96
                + t * (0.096_784_18
                    + t * (-0.186_288_06
                        + t * (0.278_868_07
                            + t * (-1.135_203_98
                                + t * (1.488_515_87 + t * (-0.822_152_23 + t * 0.170_872_77))))))));
    let r = t * poly.exp();
    if x >= 0.0 {
        r
    } else {
        2.0 - r
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sorted(v: &[f64]) -> Vec<f64> {
        let mut s = v.to_vec();
        s.sort_by(|a, b| a.partial_cmp(b).unwrap());
        s
    }

    #[test]
    fn median_even_is_mean_of_central_pair() {
        assert_eq!(median(&[4.0, 1.0, 3.0, 2.0]), Some(2.5));
        assert_eq!(median(&[5.0f32]), Some(5.0));
        assert_eq!(median::<f64>(&[]), None);
    }

    #[test]
    fn quantile_interpolates_between_ranks() {
        let v = [1.0, 2.0, 3.0, 4.0, 5.0];
        assert_eq!(quantile(&v, 0.25), Some(2.0));
        assert_eq!(quantile(&[1.0, 2.0, 3.0, 4.0], 0.25), Some(1.75));
        assert_eq!(quantile(&v, 1.0), Some(5.0));
    }

    #[test]
    fn five_number_of_single_value_is_degenerate() {
        let f = FiveNumber::of(&[7.5]).unwrap();
        assert_eq!(f, FiveNumber { min: 7.5, q1: 7.5, median: 7.5, q3: 7.5, max: 7.5 });
    }

    #[test]
    fn exact_distribution_counts_all_arrangements() {
        // C(6,3) = 20 arrangements
        let d = u_distribution(3, 3);
        assert_eq!(d.iter().sum::<f64>(), 20.0);
        assert_eq!(d, vec![1.0, 1.0, 2.0, 3.0, 3.0, 3.0, 3.0, 2.0, 1.0, 1.0]);
    }

    #[test]
    fn exact_matches_brute_force_permutations() {
        // enumerate every split of 7 distinct values into 3 + 4
        let first = [1.3, 4.0, 6.1];
        let second = [2.2, 5.5, 7.0, 8.4];
        let observed = rank_sum(&first, &second, Alternative::Greater).unwrap();
        let pooled: Vec<f64> = first.iter().chain(&second).copied().collect();
        let u_of = |sec: &[f64], fst: &[f64]| -> usize {
            sec.iter().map(|s| fst.iter().filter(|f| s > f).count()).sum()
        };
        let u_obs = u_of(&second, &first);
        let (mut total, mut extreme) = (0, 0);
        for mask in 0u32..(1 << 7) {
            if mask.count_ones() != 4 {
                continue;
            }
            let sec: Vec<f64> = (0..7).filter(|i| mask & (1 << i) != 0).map(|i| pooled[i]).collect();
            let fst: Vec<f64> = (0..7).filter(|i| mask & (1 << i) == 0).map(|i| pooled[i]).collect();
            total += 1;
            if u_of(&sec, &fst) >= u_obs {
                extreme += 1;
            }
        }
        assert!(observed.exact);
        assert_eq!(observed.u, u_obs as f64);
        assert!((observed.p_value - extreme as f64 / total as f64).abs() < 1e-12);
    }

    #[test]
    fn complete_separation_three_by_three() {
        let r = rank_sum(&[1.0, 2.0, 3.0], &[4.0, 5.0, 6.0], Alternative::Greater).unwrap();
        assert_eq!(r.p_value, 0.05);
        let r = rank_sum(&[1.0f64, 2.0, 3.0], &[4.0, 5.0, 6.0], Alternative::TwoSided).unwrap();
        assert!((r.p_value - 0.1).abs() < 1e-12);
    }

    #[test]
    fn ties_fall_back_to_normal_approximation() {
        let r = rank_sum(&[1.0, 1.0, 2.0, 2.0], &[2.0, 3.0, 3.0, 4.0], Alternative::Greater).unwrap();
        assert!(!r.exact);
        assert!(r.p_value > 0.0 && r.p_value < 0.1);
        let same = rank_sum(&[1.0, 1.0], &[1.0, 1.0], Alternative::TwoSided).unwrap();
        assert_eq!(same.p_value, 1.0);
    }

    #[test]
    fn erfc_reference_points() {
        assert!((erfc(0.0) - 1.0).abs() < 1e-7);
        assert!((upper_tail(1.959_963_985) - 0.025).abs() < 1e-6);
    }

    proptest::proptest! {
        #[test]
        fn quantiles_agree_with_full_sort(v in proptest::collection::vec(-1e6f64..1e6, 1..60), p in 0.0f64..=1.0) {
            let s = sorted(&v);
            let pos = (s.len() - 1) as f64 * p;
            let lo = pos.floor() as usize;
            let frac = pos - lo as f64;
            let expect = if frac == 0.0 { s[lo] } else { s[lo] + frac * (s[lo + 1] - s[lo]) };
            proptest::prop_assert_eq!(quantile(&v, p), Some(expect));
        }
    }
}
