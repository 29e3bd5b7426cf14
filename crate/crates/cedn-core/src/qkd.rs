//! Time-bin key post-processing: frame/slot/bin sifting of timetag streams,
//! raw key extraction from slot labels, error rates, and secure-rate
//! reporting per network link.
//!
//! A frame holds four slots (two key bits each) of three bins. Both sides
//! keep the events whose frame number and bin number agree; the slot labels
//! of those events form the raw keys. The secure fraction uses a
//! symbol-entropy bound with a configurable reconciliation inefficiency and
//! finite-size deduction; the capacity function is pluggable so a tighter
//! bound can be substituted.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{CednError, Result};
use crate::source::TimetagStream;
use crate::topology::{classify_link, LinkClass, NetworkTopology, StateKind, UserId};

pub const SLOTS_PER_FRAME: usize = 4;
pub const BINS_PER_SLOT: usize = 3;

/// Arrival-time encoding grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FrameConfig {
    pub bin_width_ps: u64,
}

impl FrameConfig {
    pub fn new(bin_width_ps: u64) -> Result<Self> {
        if bin_width_ps == 0 {
            return Err(CednError::InvalidInput("bin width must be > 0".into()));
        }
        Ok(Self { bin_width_ps })
    }

    /// Bin width optimized per network state: 300 ps (intra), 150 ps (inter),
    /// 100 ps (all). Custom states use the widest.
    pub fn for_state(kind: StateKind) -> Self {
        let bin_width_ps = default_bin_width_ps(kind);
        Self { bin_width_ps }
    }

    pub fn slot_width_ps(&self) -> u64 {
        self.bin_width_ps * BINS_PER_SLOT as u64
    }

    pub fn frame_length_ps(&self) -> u64 {
        self.bin_width_ps * (BINS_PER_SLOT * SLOTS_PER_FRAME) as u64
    }
}

pub fn default_bin_width_ps(kind: StateKind) -> u64 {
    match kind {
        StateKind::Intra => 300,
        StateKind::Inter => 150,
        StateKind::All => 100,
        StateKind::Custom => 300,
    }
}

/// Grid address of one detection.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct BinAssignment {
    pub frame: u64,
    pub slot: u8,
    pub bin: u8,
}

/// Map each event onto (frame, slot, bin).
pub fn assign_bins(stream: &TimetagStream, cfg: FrameConfig) -> Vec<BinAssignment> {
    let frame_len = cfg.frame_length_ps();
    let slot_len = cfg.slot_width_ps();
    stream
        .events()
        .iter()
        .map(|e| {
            let t = e.time_ps;
            let pos = t % frame_len;
            BinAssignment {
                frame: t / frame_len,
                slot: (pos / slot_len) as u8,
                bin: ((pos / cfg.bin_width_ps) % BINS_PER_SLOT as u64) as u8,
            }
        })
        .collect()
}

/// One sifted coincidence: equal frame and bin on both sides.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct SiftedPair {
    pub frame: u64,
    pub slot_a: u8,
    pub slot_b: u8,
    pub bin: u8,
}

/// Sifting outcome with diagnostics.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SiftResult {
    pub pairs: Vec<SiftedPair>,
    /// Frames dropped because one side held more than one event.
    pub discarded_frames: u64,
    /// Set when either stream violates the sparsity assumption
    /// (singles rate x frame length should be well below 1).
    pub sparsity_warning: Option<String>,
}

/// Keep events sharing frame and bin number. Frames holding more than one
/// event on either side are discarded as ambiguous.
pub fn sift(a: &TimetagStream, b: &TimetagStream, cfg: FrameConfig) -> Result<SiftResult> {
    if a.duration_ps != b.duration_ps {
        return Err(CednError::Data(format!(
            "streams have different durations ({} vs {} ps)",
            a.duration_ps, b.duration_ps
        )));
    }
    let frame_len_s = cfg.frame_length_ps() as f64 * 1e-12;
    let occupancy = a.rate_hz().max(b.rate_hz()) * frame_len_s;
    let sparsity_warning = (occupancy > 0.1).then(|| {
        format!(
            "mean frame occupancy {occupancy:.3} is not far below 1; sifting statistics degrade"
        )
    });

    let aa = assign_bins(a, cfg);
    let bb = assign_bins(b, cfg);
    let mut pairs = Vec::new();
    let mut discarded = 0u64;
    let (mut i, mut j) = (0usize, 0usize);
    while i < aa.len() && j < bb.len() {
        let fa = aa[i].frame;
        let fb = bb[j].frame;
        if fa < fb {
            i += 1;
            continue;
        }
        if fb < fa {
            j += 1;
            continue;
        }
        // Shared frame: bound each side's group.
        let i_end = aa[i..].iter().take_while(|x| x.frame == fa).count() + i;
        let j_end = bb[j..].iter().take_while(|x| x.frame == fa).count() + j;
        if i_end - i == 1 && j_end - j == 1 {
            if aa[i].bin == bb[j].bin {
                pairs.push(SiftedPair {
                    frame: fa,
                    slot_a: aa[i].slot,
                    slot_b: bb[j].slot,
                    bin: aa[i].bin,
                });
            }
        } else {
            discarded += 1;
        }
        i = i_end;
        j = j_end;
    }
    Ok(SiftResult {
        pairs,
        discarded_frames: discarded,
        sparsity_warning,
    })
}

/// Two key bits per sifted event from each side's own slot label, in order.
pub fn raw_key(sifted: &[SiftedPair]) -> (Vec<u8>, Vec<u8>) {
    let mut key_a = Vec::with_capacity(sifted.len() * 2);
    let mut key_b = Vec::with_capacity(sifted.len() * 2);
    for p in sifted {
        key_a.push((p.slot_a >> 1) & 1);
        key_a.push(p.slot_a & 1);
        key_b.push((p.slot_b >> 1) & 1);
        key_b.push(p.slot_b & 1);
    }
    (key_a, key_b)
}

/// Mismatch fractions at bit and two-bit-symbol granularity.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct QberStats {
    pub bit_error_rate: f64,
    pub symbol_error_rate: f64,
}

pub fn qber(key_a: &[u8], key_b: &[u8]) -> Result<QberStats> {
    if key_a.len() != key_b.len() {
        return Err(CednError::Data(format!(
            "key lengths differ ({} vs {})",
            key_a.len(),
            key_b.len()
        )));
    }
    if key_a.len() % 2 != 0 {
        return Err(CednError::Data(
            "keys must hold whole 2-bit symbols".into(),
        ));
    }
    if key_a.is_empty() {
        return Ok(QberStats {
            bit_error_rate: 0.0,
            symbol_error_rate: 0.0,
        });
    }
    let bit_errors = key_a
        .iter()
        .zip(key_b)
        .filter(|(x, y)| x != y)
        .count();
    let symbol_errors = key_a
        .chunks_exact(2)
        .zip(key_b.chunks_exact(2))
        .filter(|(x, y)| x != y)
        .count();
    Ok(QberStats {
        bit_error_rate: bit_errors as f64 / key_a.len() as f64,
        symbol_error_rate: symbol_errors as f64 / (key_a.len() / 2) as f64,
    })
}

/// Row-stochastic symbol confusion matrix: `rows[a][b]` = P(B = b | A = a).
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ConfusionMatrix {
    rows: [[f64; 4]; 4],
}

impl ConfusionMatrix {
    pub fn new(rows: [[f64; 4]; 4]) -> Result<Self> {
        for (i, row) in rows.iter().enumerate() {
            if row.iter().any(|p| !(0.0..=1.0).contains(p)) {
                return Err(CednError::InvalidInput(format!(
                    "confusion row {i} has probabilities outside [0, 1]"
                )));
            }
            let sum: f64 = row.iter().sum();
            if (sum - 1.0).abs() > 1e-9 {
                return Err(CednError::InvalidInput(format!(
                    "confusion row {i} sums to {sum}, expected 1"
                )));
            }
        }
        Ok(Self { rows })
    }

    pub fn identity() -> Self {
        let mut rows = [[0.0; 4]; 4];
        for (i, row) in rows.iter_mut().enumerate() {
            row[i] = 1.0;
        }
        Self { rows }
    }

    pub fn uniform() -> Self {
        Self {
            rows: [[0.25; 4]; 4],
        }
    }

    /// Normalize observed symbol counts; rows without observations become
    /// uniform (maximally uncertain).
    pub fn from_counts(counts: &[[u64; 4]; 4]) -> Self {
        let mut rows = [[0.25; 4]; 4];
        for (i, c) in counts.iter().enumerate() {
            let total: u64 = c.iter().sum();
            if total > 0 {
                for (j, &n) in c.iter().enumerate() {
                    rows[i][j] = n as f64 / total as f64;
                }
            }
        }
        Self { rows }
    }

    pub fn rows(&self) -> &[[f64; 4]; 4] {
        &self.rows
    }

    /// Conditional symbol entropy H(A|B) in bits, taking A uniform.
    pub fn conditional_entropy_bits(&self) -> f64 {
        let mut joint = [[0.0f64; 4]; 4];
        for a in 0..4 {
            for b in 0..4 {
                joint[a][b] = self.rows[a][b] * 0.25;
            }
        }
        let h = |p: f64| if p > 0.0 { -p * p.log2() } else { 0.0 };
        let h_joint: f64 = joint.iter().flatten().copied().map(h).sum();
        let h_b: f64 = (0..4)
            .map(|b| h((0..4).map(|a| joint[a][b]).sum()))
            .sum();
        h_joint - h_b
    }
}

/// Knobs of the stand-in secure-fraction bound.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SecureRateParams {
    /// Reconciliation inefficiency f >= 1.
    pub reconciliation_efficiency: f64,
    /// Finite-size deduction in bits per symbol.
    pub finite_size_delta: f64,
}

impl Default for SecureRateParams {
    fn default() -> Self {
        Self {
            reconciliation_efficiency: 1.2,
            finite_size_delta: 0.0,
        }
    }
}

impl SecureRateParams {
    pub fn validate(&self) -> Result<()> {
        if self.reconciliation_efficiency < 1.0 {
            return Err(CednError::Config(format!(
                "reconciliation efficiency {} < 1 would beat the Shannon limit",
                self.reconciliation_efficiency
            )));
        }
        if self.finite_size_delta < 0.0 || !self.finite_size_delta.is_finite() {
            return Err(CednError::Config(format!(
                "finite-size deduction {} must be >= 0",
                self.finite_size_delta
            )));
        }
        Ok(())
    }
}

/// Secure bits per second from the raw bit rate and the observed confusion:
/// raw/2 symbols per second, each worth max(0, 2 - f*H(A|B) - delta) bits.
pub fn secure_rate(
    raw_rate_bps: f64,
    confusion: &ConfusionMatrix,
    params: &SecureRateParams,
) -> Result<f64> {
    params.validate()?;
    let h = confusion.conditional_entropy_bits();
    let per_symbol =
        (2.0 - params.reconciliation_efficiency * h - params.finite_size_delta).max(0.0);
    Ok(raw_rate_bps / 2.0 * per_symbol)
}

/// QKD performance of one link.
#[derive(Debug, Clone, Serialize)]
pub struct QkdLinkReport {
    pub user_a: UserId,
    pub user_b: UserId,
    pub class: LinkClass,
    pub raw_rate_bps: f64,
    /// Bit-level QBER of the raw keys.
    pub qber: f64,
    pub symbol_error_rate: f64,
    pub confusion_counts: [[u64; 4]; 4],
    pub secure_rate_bps: f64,
    pub duration_s: f64,
    pub sifted_events: u64,
    pub discarded_frames: u64,
    pub finite_size_applied: bool,
    pub sparsity_warning: bool,
}

/// Per-state QKD report over the measured links.
#[derive(Debug, Clone, Serialize)]
pub struct QkdNetworkReport {
    pub state: StateKind,
    pub bin_width_ps: u64,
    pub links: Vec<QkdLinkReport>,
}

/// Analysis settings for a network QKD run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QkdConfig {
    pub frame: FrameConfig,
    pub params: SecureRateParams,
    /// Links with fewer sifted events report zero secure rate: way too few
    /// symbols to certify anything in a finite-size setting.
    pub min_sifted_events: u64,
    /// Users whose pairwise links are analyzed; None means all users.
    pub selected_users: Option<Vec<UserId>>,
}

impl QkdConfig {
    pub fn for_state(kind: StateKind) -> Self {
        Self {
            frame: FrameConfig::for_state(kind),
            params: SecureRateParams::default(),
            min_sifted_events: 10,
            selected_users: None,
        }
    }
}

/// Analyze every requested link of one network state.
pub fn qkd_network_report(
    streams: &[TimetagStream],
    topology: &NetworkTopology,
    state: StateKind,
    cfg: &QkdConfig,
) -> Result<QkdNetworkReport> {
    cfg.params.validate()?;
    if streams.len() != topology.total_users() {
        return Err(CednError::Data(format!(
            "{} streams for {} users",
            streams.len(),
            topology.total_users()
        )));
    }
    let users: Vec<UserId> = match &cfg.selected_users {
        Some(sel) => {
            for &u in sel {
                if u.0 as usize >= streams.len() {
                    return Err(CednError::Config(format!("selected user {u} out of range")));
                }
            }
            sel.clone()
        }
        None => topology.users().collect(),
    };
    let pairs: Vec<(UserId, UserId)> = users
        .iter()
        .enumerate()
        .flat_map(|(i, &u)| users[i + 1..].iter().map(move |&v| (u, v)))
        .collect();

    let links: Result<Vec<QkdLinkReport>> = pairs
        .par_iter()
        .map(|&(u, v)| analyze_link(streams, topology, u, v, cfg))
        .collect();
    Ok(QkdNetworkReport {
        state,
        bin_width_ps: cfg.frame.bin_width_ps,
        links: links?,
    })
}

fn analyze_link(
    streams: &[TimetagStream],
    topology: &NetworkTopology,
    u: UserId,
    v: UserId,
    cfg: &QkdConfig,
) -> Result<QkdLinkReport> {
    let a = &streams[u.0 as usize];
    let b = &streams[v.0 as usize];
    let sifted = sift(a, b, cfg.frame)?;
    let duration_s = a.duration_s();

    let mut confusion_counts = [[0u64; 4]; 4];
    for p in &sifted.pairs {
        confusion_counts[p.slot_a as usize][p.slot_b as usize] += 1;
    }
    let (key_a, key_b) = raw_key(&sifted.pairs);
    let errors = qber(&key_a, &key_b)?;
    let n_sifted = sifted.pairs.len() as u64;
    let raw_rate_bps = 2.0 * n_sifted as f64 / duration_s;

    let starved = n_sifted < cfg.min_sifted_events;
    let secure_rate_bps = if starved {
        0.0
    } else {
        let confusion = ConfusionMatrix::from_counts(&confusion_counts);
        secure_rate(raw_rate_bps, &confusion, &cfg.params)?
    };

    Ok(QkdLinkReport {
        user_a: u,
        user_b: v,
        class: classify_link(topology, u, v)?,
        raw_rate_bps,
        qber: errors.bit_error_rate,
        symbol_error_rate: errors.symbol_error_rate,
        confusion_counts,
        secure_rate_bps,
        duration_s,
        sifted_events: n_sifted,
        discarded_frames: sifted.discarded_frames,
        finite_size_applied: cfg.params.finite_size_delta > 0.0 || starved,
        sparsity_warning: sifted.sparsity_warning.is_some(),
    })
}

impl QkdNetworkReport {
    /// Mean secure rate over links that produced a key.
    pub fn mean_secure_over_positive_bps(&self) -> f64 {
        let positive: Vec<f64> = self
            .links
            .iter()
            .map(|l| l.secure_rate_bps)
            .filter(|&s| s > 0.0)
            .collect();
        if positive.is_empty() {
            0.0
        } else {
            positive.iter().sum::<f64>() / positive.len() as f64
        }
    }

    pub fn links_with_key(&self) -> usize {
        self.links.iter().filter(|l| l.secure_rate_bps > 0.0).count()
    }

    pub fn to_csv(&self) -> String {
        let mut out =
            String::from("user_a,user_b,class,raw_bps,qber,secure_bps,duration_s\n");
        for l in &self.links {
            out.push_str(&format!(
                "{},{},{},{:.6},{:.6},{:.6},{:.3}\n",
                l.user_a, l.user_b, l.class, l.raw_rate_bps, l.qber, l.secure_rate_bps, l.duration_s
            ));
        }
        out
    }
}
