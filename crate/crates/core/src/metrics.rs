//! Rank correlation and report emission.

use std::cmp::Ordering;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::Serialize;
use thiserror::Error;

use crate::partition::LidProfile;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("length mismatch ({0} vs {1})")]
    LengthMismatch(usize, usize),
    #[error("need at least 2 items, got {0}")]
    TooShort(usize),
    #[error("input contains NaN")]
    NaN,
    #[error("all values tied; correlation undefined")]
    AllTied,
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

fn check(a: &[f64], b: &[f64]) -> Result<(), MetricsError> {
    if a.len() != b.len() {
        return Err(MetricsError::LengthMismatch(a.len(), b.len()));
    }
    if a.len() < 2 {
        return Err(MetricsError::TooShort(a.len()));
    }
    if a.iter().chain(b).any(|v| v.is_nan()) {
        return Err(MetricsError::NaN);
    }
    Ok(())
}

fn cmp(x: f64, y: f64) -> Ordering {
    x.partial_cmp(&y).expect("NaN rejected")
}

/// Number of unordered pairs within runs of equal adjacent keys.
fn tied_pairs<T>(sorted: &[T], eq: impl Fn(&T, &T) -> bool) -> u64 {
    let mut total = 0u64;
    let mut run = 1u64;
    for w in sorted.windows(2) {
        if eq(&w[0], &w[1]) {
            run += 1;
        } else {
            total += run * (run - 1) / 2;
            run = 1;
        }
    }
    total + run * (run - 1) / 2
}

/// Sorts `v` in place and returns the number of inversions (strictly
/// decreasing pairs).
fn merge_count(v: &mut [f64], buf: &mut Vec<f64>) -> u64 {
    let n = v.len();
    if n < 2 {
        return 0;
    }
    let mid = n / 2;
    let mut swaps = merge_count(&mut v[..mid], buf) + merge_count(&mut v[mid..], buf);
    buf.clear();
    let (mut i, mut j) = (0, mid);
    while i < mid && j < n {
        if cmp(v[j], v[i]) == Ordering::Less {
            buf.push(v[j]);
            swaps += (mid - i) as u64;
            j += 1;
        } else {
            buf.push(v[i]);
            i += 1;
        }
    }
    buf.extend_from_slice(&v[i..mid]);
    buf.extend_from_slice(&v[j..n]);
    v.copy_from_slice(buf);
    swaps
}

/// Kendall's tau-b. Equals tau-a when neither list has ties.
pub fn kendall_tau(a: &[f64], b: &[f64]) -> Result<f64, MetricsError> {
    check(a, b)?;
    let n = a.len() as u64;
    let mut pairs: Vec<(f64, f64)> = a.iter().copied().zip(b.iter().copied()).collect();
    pairs.sort_by(|p, q| cmp(p.0, q.0).then(cmp(p.1, q.1)));
    let ties_a = tied_pairs(&pairs, |p, q| p.0 == q.0);
    let ties_ab = tied_pairs(&pairs, |p, q| p.0 == q.0 && p.1 == q.1);
    let mut ys: Vec<f64> = pairs.iter().map(|p| p.1).collect();
    let mut buf = Vec::with_capacity(ys.len());
    let discordant = merge_count(&mut ys, &mut buf);
    let ties_b = tied_pairs(&ys, |p, q| p == q);
    let total = n * (n - 1) / 2;
    if ties_a == total || ties_b == total {
        return Err(MetricsError::AllTied);
    }
    let numer = total as f64 - ties_a as f64 - ties_b as f64 + ties_ab as f64 - 2.0 * discordant as f64;
    let denom = ((total - ties_a) as f64 * (total - ties_b) as f64).sqrt();
    Ok((numer / denom).clamp(-1.0, 1.0))
}

/// 1-based ranks with ties sharing their average rank.
pub fn average_ranks(x: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..x.len()).collect();
    idx.sort_by(|&i, &j| cmp(x[i], x[j]).then(i.cmp(&j)));
    let mut ranks = vec![0.0; x.len()];
    let mut start = 0;
    while start < idx.len() {
        let mut end = start + 1;
        while end < idx.len() && x[idx[end]] == x[idx[start]] {
            end += 1;
        }
        let avg = (start + end + 1) as f64 / 2.0;
        for &i in &idx[start..end] {
            ranks[i] = avg;
        }
        start = end;
    }
    ranks
}

/// Spearman's rho as the Pearson correlation of average ranks.
pub fn spearman_rho(a: &[f64], b: &[f64]) -> Result<f64, MetricsError> {
    check(a, b)?;
    let (ra, rb) = (average_ranks(a), average_ranks(b));
    let n = ra.len() as f64;
    let mean = (n + 1.0) / 2.0;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in ra.iter().zip(&rb) {
        sab += (x - mean) * (y - mean);
        saa += (x - mean) * (x - mean);
        sbb += (y - mean) * (y - mean);
    }
    if saa == 0.0 || sbb == 0.0 {
        return Err(MetricsError::AllTied);
    }
    Ok((sab / (saa * sbb).sqrt()).clamp(-1.0, 1.0))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CorrelationReport {
    pub kendall: f64,
    pub spearman: f64,
    pub n: usize,
}

pub fn correlation_report(a: &[f64], b: &[f64]) -> Result<CorrelationReport, MetricsError> {
    Ok(CorrelationReport { kendall: kendall_tau(a, b)?, spearman: spearman_rho(a, b)?, n: a.len() })
}

/// Correlation of `predicted` vs `truth` over the `k` items with the highest
/// true score (ties by index). `None` uses every item.
pub fn top_k_correlation(
    predicted: &[f64],
    truth: &[f64],
    k: Option<usize>,
) -> Result<CorrelationReport, MetricsError> {
    check(predicted, truth)?;
    let mut idx: Vec<usize> = (0..truth.len()).collect();
    idx.sort_by(|&i, &j| cmp(truth[j], truth[i]).then(i.cmp(&j)));
    idx.truncate(k.unwrap_or(idx.len()));
    let p: Vec<f64> = idx.iter().map(|&i| predicted[i]).collect();
    let t: Vec<f64> = idx.iter().map(|&i| truth[i]).collect();
    correlation_report(&p, &t)
}

/// `name,relative_depth,lid` rows; depth is `l/(L-1)`, or 0 when `L = 1`.
pub fn profile_csv(profiles: &[(String, LidProfile)]) -> Result<String, MetricsError> {
    let mut out = String::from("name,relative_depth,lid\n");
    let len = profiles.first().map_or(0, |p| p.1.len());
    for (name, p) in profiles {
        if p.len() != len {
            return Err(MetricsError::LengthMismatch(len, p.len()));
        }
        for (l, v) in p.values().iter().enumerate() {
            let depth = if len > 1 { l as f64 / (len - 1) as f64 } else { 0.0 };
            let _ = writeln!(out, "{},{depth},{v}", csv_field(name));
        }
    }
    Ok(out)
}

pub fn emit_profile_csv(profiles: &[(String, LidProfile)], path: impl AsRef<Path>) -> Result<(), MetricsError> {
    fs::write(path, profile_csv(profiles)?)?;
    Ok(())
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kendall_examples() {
        assert_eq!(kendall_tau(&[1.0, 2.0, 3.0], &[1.0, 2.0, 3.0]).unwrap(), 1.0);
        assert_eq!(kendall_tau(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]).unwrap(), -1.0);
        let t = kendall_tau(&[1.0, 2.0, 3.0, 4.0], &[1.0, 3.0, 2.0, 4.0]).unwrap();
        assert!((t - 2.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn kendall_tau_b_with_ties() {
        // scipy.stats.kendalltau([1,1,2,3], [1,2,2,3]) = 0.8
        let t = kendall_tau(&[1.0, 1.0, 2.0, 3.0], &[1.0, 2.0, 2.0, 3.0]).unwrap();
        assert!((t - 0.8).abs() < 1e-12);
    }

    #[test]
    fn spearman_examples() {
        assert_eq!(spearman_rho(&[1.0, 2.0, 3.0], &[1.0, 3.0, 2.0]).unwrap(), 0.5);
        assert_eq!(spearman_rho(&[4.0, 5.0, 9.0], &[4.0, 5.0, 9.0]).unwrap(), 1.0);
        assert_eq!(spearman_rho(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]).unwrap(), -1.0);
    }

    #[test]
    fn average_ranks_ties() {
        assert_eq!(average_ranks(&[10.0, 20.0, 10.0, 5.0]), vec![2.5, 4.0, 2.5, 1.0]);
    }

    #[test]
    fn correlation_errors() {
        assert!(matches!(kendall_tau(&[1.0], &[1.0]), Err(MetricsError::TooShort(1))));
        assert!(matches!(kendall_tau(&[1.0, 2.0], &[1.0]), Err(MetricsError::LengthMismatch(2, 1))));
        assert!(matches!(kendall_tau(&[1.0, 1.0], &[1.0, 2.0]), Err(MetricsError::AllTied)));
        assert!(matches!(spearman_rho(&[1.0, 2.0], &[3.0, 3.0]), Err(MetricsError::AllTied)));
        assert!(matches!(spearman_rho(&[1.0, f64::NAN], &[3.0, 2.0]), Err(MetricsError::NaN)));
    }

    #[test]
    fn top_k_selects_by_truth() {
        let truth = [90.0, 10.0, 80.0, 70.0, 20.0];
        let pred = [3.0, 100.0, 2.0, 1.0, -5.0];
        let r = top_k_correlation(&pred, &truth, Some(3)).unwrap();
        assert_eq!(r.n, 3);
        assert_eq!(r.kendall, 1.0);
    }

    #[test]
    fn profile_csv_depths() {
        let p = vec![("net".to_string(), LidProfile::new(vec![10.0, 40.0, 20.0]).unwrap())];
        assert_eq!(profile_csv(&p).unwrap(), "name,relative_depth,lid\nnet,0,10\nnet,0.5,40\nnet,1,20\n");
        assert_eq!(profile_csv(&[]).unwrap(), "name,relative_depth,lid\n");
        let one = vec![("a,b".to_string(), LidProfile::new(vec![7.5]).unwrap())];
        assert_eq!(profile_csv(&one).unwrap(), "name,relative_depth,lid\n\"a,b\",0,7.5\n");
        let mixed = vec![p[0].clone(), one[0].clone()];
        assert!(matches!(profile_csv(&mixed), Err(MetricsError::LengthMismatch(3, 1))));
    }
}
