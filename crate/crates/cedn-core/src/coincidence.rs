//! Windowed two-fold coincidence counting over timetag streams and assembly
//! of the full user-pair coincidence matrix.
//!
//! Matching is greedy nearest-neighbor in time order: each event pairs at
//! most once, and when several partners fall inside the window the closest
//! one (earlier on ties) wins. This is the usual timetagger semantics and
//! keeps counts bounded by min(singles).

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{CednError, Result};
use crate::source::TimetagStream;
use crate::topology::{classify_link, LinkClass, NetworkTopology, UserId};

/// Matching window: events pair iff |t_a - t_b - offset| <= width/2.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CoincidenceWindow {
    pub width_ps: u64,
    #[serde(default)]
    pub offset_ps: i64,
}

impl CoincidenceWindow {
    pub fn new(width_ps: u64) -> Result<Self> {
        if width_ps == 0 {
            return Err(CednError::InvalidInput("window width must be > 0".into()));
        }
        Ok(Self {
            width_ps,
            offset_ps: 0,
        })
    }

    pub fn with_offset(mut self, offset_ps: i64) -> Self {
        self.offset_ps = offset_ps;
        self
    }
}

/// Result of counting one stream pair.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CoincidenceStats {
    pub coincidences: u64,
    pub singles_a: u64,
    pub singles_b: u64,
    /// Expected chance coincidences: singles_a * singles_b * width / duration.
    pub accidental_estimate: f64,
}

/// Count coincidences between two sorted streams of equal duration.
pub fn count_coincidences(
    a: &TimetagStream,
    b: &TimetagStream,
    w: CoincidenceWindow,
) -> Result<CoincidenceStats> {
    if a.duration_ps != b.duration_ps {
        return Err(CednError::Data(format!(
            "streams have different durations ({} vs {} ps)",
            a.duration_ps, b.duration_ps
        )));
    }
    let half = (w.width_ps / 2) as i128;
    let at: Vec<i128> = a.events().iter().map(|e| e.time_ps as i128).collect();
    let bt: Vec<i128> = b
        .events()
        .iter()
        .map(|e| e.time_ps as i128 + w.offset_ps as i128)
        .collect();

    let mut matched = vec![false; bt.len()];
    let mut j_start = 0usize;
    let mut coincidences = 0u64;
    for &ta in &at {
        let lo = ta - half;
        let hi = ta + half;
        while j_start < bt.len() && (matched[j_start] || bt[j_start] < lo) {
            j_start += 1;
        }
        let mut best: Option<(usize, i128)> = None;
        let mut j = j_start;
        while j < bt.len() && bt[j] <= hi {
            if !matched[j] {
                let d = (bt[j] - ta).abs();
                if best.map_or(true, |(_, bd)| d < bd) {
                    best = Some((j, d));
                }
            }
            j += 1;
        }
        if let Some((jb, _)) = best {
            matched[jb] = true;
            coincidences += 1;
        }
    }

    let duration_s = a.duration_s();
    let width_s = w.width_ps as f64 * 1e-12;
    Ok(CoincidenceStats {
        coincidences,
        singles_a: at.len() as u64,
        singles_b: bt.len() as u64,
        accidental_estimate: at.len() as f64 * bt.len() as f64 * width_s / duration_s,
    })
}

/// Coincidence counts over all unordered user pairs. The diagonal is zero by
/// definition: a stream is never matched against itself.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CoincidenceMatrix {
    n: usize,
    counts: Vec<u64>,
    pub duration_s: f64,
    pub window: CoincidenceWindow,
}

impl CoincidenceMatrix {
    pub fn n_users(&self) -> usize {
        self.n
    }

    pub fn count(&self, u: UserId, v: UserId) -> u64 {
        self.counts[u.0 as usize * self.n + v.0 as usize]
    }

    /// Poisson error bar of one entry.
    pub fn error(&self, u: UserId, v: UserId) -> f64 {
        (self.count(u, v) as f64).sqrt()
    }

    pub fn rate_hz(&self, u: UserId, v: UserId) -> f64 {
        self.count(u, v) as f64 / self.duration_s
    }

    /// Square CSV of raw counts.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("user");
        for v in 0..self.n {
            out.push_str(&format!(",{v}"));
        }
        out.push('\n');
        for u in 0..self.n {
            out.push_str(&format!("{u}"));
            for v in 0..self.n {
                out.push_str(&format!(",{}", self.counts[u * self.n + v]));
            }
            out.push('\n');
        }
        out
    }

    /// Long-form table of the unordered pairs.
    pub fn to_long_csv(&self, topology: &NetworkTopology) -> String {
        let mut out = String::from("user_a,user_b,class,count,rate_hz,error_counts\n");
        for u in 0..self.n {
            for v in u + 1..self.n {
                let (ua, uv) = (UserId(u as u8), UserId(v as u8));
                let class = classify_link(topology, ua, uv).expect("valid link");
                let count = self.count(ua, uv);
                out.push_str(&format!(
                    "{u},{v},{class},{count},{:.6},{:.6}\n",
                    count as f64 / self.duration_s,
                    (count as f64).sqrt()
                ));
            }
        }
        out
    }
}

/// Count all unordered pairs of the supplied streams.
pub fn coincidence_matrix(
    streams: &[TimetagStream],
    w: CoincidenceWindow,
) -> Result<CoincidenceMatrix> {
    let Some(first) = streams.first() else {
        return Err(CednError::Data("no streams supplied".into()));
    };
    if streams.iter().any(|s| s.duration_ps != first.duration_ps) {
        return Err(CednError::Data(
            "streams have inconsistent durations".into(),
        ));
    }
    let n = streams.len();
    let pairs: Vec<(usize, usize)> = (0..n)
        .flat_map(|u| ((u + 1)..n).map(move |v| (u, v)))
        .collect();
    let counted: Vec<((usize, usize), u64)> = pairs
        .par_iter()
        .map(|&(u, v)| {
            let stats = count_coincidences(&streams[u], &streams[v], w)
                .expect("durations checked above");
            ((u, v), stats.coincidences)
        })
        .collect();
    let mut counts = vec![0u64; n * n];
    for ((u, v), c) in counted {
        counts[u * n + v] = c;
        counts[v * n + u] = c;
    }
    Ok(CoincidenceMatrix {
        n,
        counts,
        duration_s: first.duration_s(),
        window: w,
    })
}

/// Per-class mean link rates with propagated Poisson errors.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LinkRateSummary {
    pub mean_intra_hz: f64,
    pub mean_intra_err_hz: f64,
    pub mean_inter_hz: f64,
    pub mean_inter_err_hz: f64,
    /// Mean over every unordered pair, both classes.
    pub mean_all_hz: f64,
    pub mean_all_err_hz: f64,
    pub intra_links: usize,
    pub inter_links: usize,
}

/// Class means over all links of each class (zero-count links included).
pub fn link_rate_summary(
    matrix: &CoincidenceMatrix,
    topology: &NetworkTopology,
) -> Result<LinkRateSummary> {
    if matrix.n_users() != topology.total_users() {
        return Err(CednError::Data(format!(
            "matrix covers {} users, topology has {}",
            matrix.n_users(),
            topology.total_users()
        )));
    }
    let mut sums = [0.0f64; 2];
    let mut links = [0usize; 2];
    for u in 0..matrix.n_users() {
        for v in u + 1..matrix.n_users() {
            let (ua, uv) = (UserId(u as u8), UserId(v as u8));
            let idx = match classify_link(topology, ua, uv)? {
                LinkClass::Intra => 0,
                LinkClass::Inter => 1,
            };
            sums[idx] += matrix.count(ua, uv) as f64;
            links[idx] += 1;
        }
    }
    let t = matrix.duration_s;
    let mean = |sum: f64, n: usize| sum / n as f64 / t;
    let err = |sum: f64, n: usize| sum.sqrt() / n as f64 / t;
    Ok(LinkRateSummary {
        mean_intra_hz: mean(sums[0], links[0]),
        mean_intra_err_hz: err(sums[0], links[0]),
        mean_inter_hz: mean(sums[1], links[1]),
        mean_inter_err_hz: err(sums[1], links[1]),
        mean_all_hz: mean(sums[0] + sums[1], links[0] + links[1]),
        mean_all_err_hz: err(sums[0] + sums[1], links[0] + links[1]),
        intra_links: links[0],
        inter_links: links[1],
    })
}

/// Fraction of true coincidences that survive the window cut when both
/// detections carry independent Gaussian jitter of the given sigma: the
/// timestamp difference is normal with sigma*sqrt(2).
pub fn gaussian_window_acceptance(width_ps: u64, jitter_sigma_ps: f64) -> f64 {
    if jitter_sigma_ps <= 0.0 {
        return 1.0;
    }
    let half = (width_ps / 2) as f64;
    // P(|N(0, sigma*sqrt(2))| <= half) = erf(half / (2 sigma))
    erf(half / (2.0 * jitter_sigma_ps))
}

/// Abramowitz & Stegun 7.1.26, |error| < 1.5e-7.
fn erf(x: f64) -> f64 {
    let sign = if x < 0.0 { -1.0 } else { 1.0 };
    let x = x.abs();
    let t = 1.0 / (1.0 + 0.3275911 * x);
    let y = 1.0
        - (((((1.061405429 * t - 1.453152027) * t) + 1.421413741) * t - 0.284496736) * t
            + 0.254829592)
            * t
            * (-x * x).exp();
    sign * y
}

/// Scan the relative delay over `[-max_offset, +max_offset]` in `step` ps and
/// return the offset maximizing coincidences (smallest offset on ties).
/// Useful to align externally recorded streams before counting.
pub fn scan_delay_offset(
    a: &TimetagStream,
    b: &TimetagStream,
    width_ps: u64,
    max_offset_ps: u64,
    step_ps: u64,
) -> Result<(i64, u64)> {
    if step_ps == 0 {
        return Err(CednError::InvalidInput("offset scan step must be > 0".into()));
    }
    let base = CoincidenceWindow::new(width_ps)?;
    let mut best: Option<(i64, u64)> = None;
    let mut offset = -(max_offset_ps as i64);
    while offset <= max_offset_ps as i64 {
        let stats = count_coincidences(a, b, base.with_offset(offset))?;
        let better = match best {
            None => true,
            Some((_, c)) => stats.coincidences > c,
        };
        if better {
            best = Some((offset, stats.coincidences));
        }
        offset += step_ps as i64;
    }
    Ok(best.expect("at least one offset scanned"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::source::{EventOrigin, TimetagEvent};
    use rand::rngs::SmallRng;
    use rand::{Rng, SeedableRng};

    fn stream(user: u8, duration: u64, times: &[u64]) -> TimetagStream {
        TimetagStream::new(
            UserId(user),
            duration,
            times
                .iter()
                .map(|&t| TimetagEvent {
                    time_ps: t,
                    origin: EventOrigin::Signal,
                })
                .collect(),
        )
        .unwrap()
    }

    fn poisson_stream(user: u8, rate_hz: f64, duration_s: f64, seed: u64) -> TimetagStream {
        let duration_ps = (duration_s * 1e12) as u64;
        let mut rng = SmallRng::seed_from_u64(seed);
        let n = (rate_hz * duration_s) as usize;
        let mut times: Vec<u64> = (0..n).map(|_| rng.random_range(0..=duration_ps)).collect();
        times.sort_unstable();
        stream(user, duration_ps, &times)
    }

    #[test]
    fn single_event_inside_window() {
        let a = stream(0, 10_000, &[1000]);
        let b = stream(1, 10_000, &[1200]);
        let w = CoincidenceWindow::new(500).unwrap();
        assert_eq!(count_coincidences(&a, &b, w).unwrap().coincidences, 1);
    }

    #[test]
    fn single_event_outside_window() {
        let a = stream(0, 10_000, &[1000]);
        let b = stream(1, 10_000, &[2000]);
        let w = CoincidenceWindow::new(500).unwrap();
        assert_eq!(count_coincidences(&a, &b, w).unwrap().coincidences, 0);
    }

    #[test]
    fn offset_shifts_the_window() {
        let a = stream(0, 10_000, &[1000]);
        let b = stream(1, 10_000, &[2000]);
        let w = CoincidenceWindow::new(500).unwrap().with_offset(-1000);
        assert_eq!(count_coincidences(&a, &b, w).unwrap().coincidences, 1);
    }

    #[test]
    fn counting_is_symmetric() {
        let a = poisson_stream(0, 50_000.0, 0.5, 1);
        let b = poisson_stream(1, 60_000.0, 0.5, 2);
        let w = CoincidenceWindow::new(2000).unwrap();
        let ab = count_coincidences(&a, &b, w).unwrap();
        let ba = count_coincidences(&b, &a, w).unwrap();
        assert_eq!(ab.coincidences, ba.coincidences);
        assert!(ab.coincidences <= ab.singles_a.min(ab.singles_b));
    }

    #[test]
    fn widening_never_decreases_counts() {
        for seed in 0..20 {
            let a = poisson_stream(0, 80_000.0, 0.2, seed);
            let b = poisson_stream(1, 90_000.0, 0.2, seed + 1000);
            let mut last = 0;
            for width in [100, 500, 1000, 5000, 20_000, 100_000] {
                let w = CoincidenceWindow::new(width).unwrap();
                let c = count_coincidences(&a, &b, w).unwrap().coincidences;
                assert!(c >= last, "seed {seed}: width {width} gave {c} < {last}");
                last = c;
            }
        }
    }

    #[test]
    fn accidental_rate_law() {
        let (r1, r2, dur) = (40_000.0, 50_000.0, 20.0);
        let a = poisson_stream(0, r1, dur, 11);
        let b = poisson_stream(1, r2, dur, 12);
        let width_ps = 10_000u64;
        let w = CoincidenceWindow::new(width_ps).unwrap();
        let stats = count_coincidences(&a, &b, w).unwrap();
        let expected = r1 * r2 * (width_ps as f64 * 1e-12) * dur;
        let sigma = expected.sqrt();
        assert!(
            (stats.coincidences as f64 - expected).abs() < 3.0 * sigma,
            "got {}, expected {expected} +- {sigma}",
            stats.coincidences
        );
        // The built-in estimate agrees with the analytic law.
        assert!((stats.accidental_estimate - expected).abs() < 0.1 * expected);
    }

    #[test]
    fn greedy_matching_pairs_each_event_once() {
        // One a event between two b events: only one match.
        let a = stream(0, 10_000, &[1000]);
        let b = stream(1, 10_000, &[900, 1100]);
        let w = CoincidenceWindow::new(1000).unwrap();
        assert_eq!(count_coincidences(&a, &b, w).unwrap().coincidences, 1);
        // Nearest wins: a at 1000 takes b at 990 over b at 1100.
        let a = stream(0, 10_000, &[1000, 1101]);
        let b = stream(1, 10_000, &[990, 1100]);
        let stats = count_coincidences(&a, &b, w).unwrap();
        assert_eq!(stats.coincidences, 2);
    }

    #[test]
    fn mismatched_duration_is_a_data_error() {
        let a = stream(0, 10_000, &[1000]);
        let b = stream(1, 20_000, &[1000]);
        let w = CoincidenceWindow::new(500).unwrap();
        assert!(matches!(
            count_coincidences(&a, &b, w),
            Err(CednError::Data(_))
        ));
    }

    #[test]
    fn matrix_diagonal_is_zero_and_symmetric() {
        let streams: Vec<TimetagStream> = (0..4)
            .map(|u| poisson_stream(u, 30_000.0, 0.5, u as u64 + 50))
            .collect();
        let w = CoincidenceWindow::new(5000).unwrap();
        let m = coincidence_matrix(&streams, w).unwrap();
        for u in 0..4 {
            assert_eq!(m.count(UserId(u), UserId(u)), 0);
            for v in 0..4 {
                assert_eq!(m.count(UserId(u), UserId(v)), m.count(UserId(v), UserId(u)));
            }
        }
    }

    #[test]
    fn summary_of_uniform_matrix() {
        // Hand-built matrix: every pair has the same count c over time T.
        let t = NetworkTopology::paper_default();
        let c = 120u64;
        let n = 24;
        let mut counts = vec![0u64; n * n];
        for u in 0..n {
            for v in 0..n {
                if u != v {
                    counts[u * n + v] = c;
                }
            }
        }
        let m = CoincidenceMatrix {
            n,
            counts,
            duration_s: 60.0,
            window: CoincidenceWindow::new(300).unwrap(),
        };
        let s = link_rate_summary(&m, &t).unwrap();
        let expected = c as f64 / 60.0;
        for mean in [s.mean_intra_hz, s.mean_inter_hz, s.mean_all_hz] {
            assert!((mean - expected).abs() < 1e-12);
        }
        assert_eq!(s.intra_links, 84);
        assert_eq!(s.inter_links, 192);
    }

    #[test]
    fn offset_scan_finds_the_shift() {
        let base: Vec<u64> = (0..2000u64).map(|i| 1_000_000 + i * 450_000).collect();
        let shifted: Vec<u64> = base.iter().map(|t| t + 7_000).collect();
        let duration = 2_000_000_000u64;
        let a = stream(0, duration, &base);
        let b = stream(1, duration, &shifted);
        let (best, count) = scan_delay_offset(&a, &b, 200, 10_000, 100).unwrap();
        assert_eq!(best, -7_000);
        assert_eq!(count, 2000);
    }
}
