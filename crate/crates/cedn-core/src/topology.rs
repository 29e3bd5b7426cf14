//! Analytic model of the chip: interferometer output state as a function of
//! phase, the source-to-subnet wiring, and the exact per-pair routing
//! probability matrix over all users.
//!
//! A pair source unit (BSGU) is a balanced MZI whose phase sets the
//! superposition between a "bunch" output (both photons of a pair leave the
//! same port) and a "split" output (the photons leave different ports). Each
//! port feeds a passive splitting unit (PBSU) that distributes photons
//! uniformly over one subnet's users. Mixing between different sources is
//! incoherent, so everything downstream of the branch choice is classical
//! probability.

use serde::{Deserialize, Serialize};
use std::f64::consts::{FRAC_PI_2, FRAC_PI_4, PI};

use crate::error::{CednError, Result};

/// A user index, `0..topology.total_users()`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct UserId(pub u8);

impl std::fmt::Display for UserId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// Port pair of one source unit: which subnet each output feeds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BsguWiring {
    pub up: usize,
    pub down: usize,
}

/// Chip layout: subnets of equal size, each fed by exactly two source ports.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetworkTopology {
    subnet_count: usize,
    users_per_subnet: usize,
    /// One entry per BSGU, index = source id.
    wiring: Vec<BsguWiring>,
}

impl NetworkTopology {
    /// Ring layout: source `k` feeds subnets `k` (up) and `k+1 mod n` (down).
    ///
    /// For three subnets this is the unique arrangement (up to relabeling)
    /// in which the split branches connect every subnet pair.
    pub fn ring(subnet_count: usize, users_per_subnet: usize) -> Result<Self> {
        let wiring = (0..subnet_count)
            .map(|k| BsguWiring {
                up: k,
                down: (k + 1) % subnet_count,
            })
            .collect();
        Self::new(subnet_count, users_per_subnet, wiring)
    }

    /// The default chip: 3 subnets of 8 users, ring wiring.
    pub fn paper_default() -> Self {
        Self::ring(3, 8).expect("default ring layout is valid")
    }

    pub fn new(
        subnet_count: usize,
        users_per_subnet: usize,
        wiring: Vec<BsguWiring>,
    ) -> Result<Self> {
        let t = Self {
            subnet_count,
            users_per_subnet,
            wiring,
        };
        t.validate()?;
        Ok(t)
    }

    fn validate(&self) -> Result<()> {
        if self.subnet_count < 2 {
            return Err(CednError::Topology(format!(
                "need at least 2 subnets, got {}",
                self.subnet_count
            )));
        }
        if self.users_per_subnet == 0 {
            return Err(CednError::Topology("users_per_subnet must be > 0".into()));
        }
        if self.total_users() > u8::MAX as usize + 1 {
            return Err(CednError::Topology(format!(
                "{} users exceed the 256-user id space",
                self.total_users()
            )));
        }
        let mut ports_per_subnet = vec![0usize; self.subnet_count];
        let mut pair_cover = vec![0usize; self.subnet_count * self.subnet_count];
        for (k, w) in self.wiring.iter().enumerate() {
            for port in [w.up, w.down] {
                if port >= self.subnet_count {
                    return Err(CednError::Topology(format!(
                        "source {k} port feeds unknown subnet {port}"
                    )));
                }
                ports_per_subnet[port] += 1;
            }
            if w.up == w.down {
                return Err(CednError::Topology(format!(
                    "source {k} feeds subnet {} on both ports",
                    w.up
                )));
            }
            let (a, b) = (w.up.min(w.down), w.up.max(w.down));
            pair_cover[a * self.subnet_count + b] += 1;
        }
        for (s, &n) in ports_per_subnet.iter().enumerate() {
            if n != 2 {
                return Err(CednError::Topology(format!(
                    "subnet {s} receives {n} source ports, expected 2"
                )));
            }
        }
        for a in 0..self.subnet_count {
            for b in a + 1..self.subnet_count {
                let n = pair_cover[a * self.subnet_count + b];
                if n != 1 {
                    return Err(CednError::Topology(format!(
                        "subnet pair ({a},{b}) covered by {n} sources, expected exactly 1"
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn subnet_count(&self) -> usize {
        self.subnet_count
    }

    pub fn users_per_subnet(&self) -> usize {
        self.users_per_subnet
    }

    pub fn bsgu_count(&self) -> usize {
        self.wiring.len()
    }

    pub fn total_users(&self) -> usize {
        self.subnet_count * self.users_per_subnet
    }

    pub fn wiring(&self) -> &[BsguWiring] {
        &self.wiring
    }

    pub fn subnet_of(&self, user: UserId) -> usize {
        user.0 as usize / self.users_per_subnet
    }

    /// Nth user of a subnet.
    pub fn user(&self, subnet: usize, index: usize) -> UserId {
        debug_assert!(subnet < self.subnet_count && index < self.users_per_subnet);
        UserId((subnet * self.users_per_subnet + index) as u8)
    }

    pub fn users(&self) -> impl Iterator<Item = UserId> + '_ {
        (0..self.total_users()).map(|u| UserId(u as u8))
    }

    fn check_user(&self, u: UserId) -> Result<()> {
        if (u.0 as usize) < self.total_users() {
            Ok(())
        } else {
            Err(CednError::InvalidInput(format!(
                "user {u} out of range 0..{}",
                self.total_users()
            )))
        }
    }

    /// The source whose split branch connects the two subnets, if any.
    pub fn bsgu_linking(&self, subnet_a: usize, subnet_b: usize) -> Option<usize> {
        self.wiring.iter().position(|w| {
            (w.up == subnet_a && w.down == subnet_b) || (w.up == subnet_b && w.down == subnet_a)
        })
    }
}

/// Whether a user pair lives inside one subnet or spans two.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LinkClass {
    Intra,
    Inter,
}

impl std::fmt::Display for LinkClass {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            LinkClass::Intra => write!(f, "intra"),
            LinkClass::Inter => write!(f, "inter"),
        }
    }
}

/// Classify the unordered link (u, v).
pub fn classify_link(topology: &NetworkTopology, u: UserId, v: UserId) -> Result<LinkClass> {
    topology.check_user(u)?;
    topology.check_user(v)?;
    if u == v {
        return Err(CednError::InvalidInput(format!(
            "link ({u},{v}) is not a pair of distinct users"
        )));
    }
    if topology.subnet_of(u) == topology.subnet_of(v) {
        Ok(LinkClass::Intra)
    } else {
        Ok(LinkClass::Inter)
    }
}

/// Per-source interferometer phases, radians.
///
/// Branch probabilities are π-periodic in the phase, so settings are kept in
/// the canonical range `[0, π)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct PhaseSettings {
    phi: Vec<f64>,
}

impl PhaseSettings {
    pub fn new(phi: Vec<f64>) -> Result<Self> {
        if let Some(bad) = phi.iter().find(|p| !p.is_finite()) {
            return Err(CednError::InvalidInput(format!(
                "phase {bad} is not finite"
            )));
        }
        Ok(Self {
            phi: phi.into_iter().map(|p| p.rem_euclid(PI)).collect(),
        })
    }

    pub fn uniform(phi: f64, count: usize) -> Result<Self> {
        Self::new(vec![phi; count])
    }

    pub fn phases(&self) -> &[f64] {
        &self.phi
    }

    pub fn len(&self) -> usize {
        self.phi.len()
    }

    pub fn is_empty(&self) -> bool {
        self.phi.is_empty()
    }
}

/// Which phase value produces the bunch output.
///
/// The interference model used here has bunch at phase 0; the operating
/// convention of a given chip may invert that (bunch at π/2). The named
/// network states consult this constant, so either convention can be selected
/// from configuration without touching the model.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PhaseConvention {
    /// Bunch at phase 0, split at π/2 (the model's literal convention).
    #[default]
    BunchAtZero,
    /// Bunch at π/2, split at 0.
    SplitAtZero,
}

/// The three operating topologies plus free-phase operation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StateKind {
    Intra,
    Inter,
    All,
    Custom,
}

impl std::fmt::Display for StateKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            StateKind::Intra => write!(f, "intra"),
            StateKind::Inter => write!(f, "inter"),
            StateKind::All => write!(f, "all"),
            StateKind::Custom => write!(f, "custom"),
        }
    }
}

impl std::str::FromStr for StateKind {
    type Err = CednError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "intra" => Ok(StateKind::Intra),
            "inter" => Ok(StateKind::Inter),
            "all" => Ok(StateKind::All),
            "custom" => Ok(StateKind::Custom),
            other => Err(CednError::InvalidInput(format!(
                "unknown network state '{other}' (expected intra|inter|all|custom)"
            ))),
        }
    }
}

/// A named network state together with the concrete phase triple realizing it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkState {
    pub kind: StateKind,
    pub phases: PhaseSettings,
}

impl NetworkState {
    /// Phase realizing a named state under the given convention.
    pub fn named_phase(kind: StateKind, convention: PhaseConvention) -> f64 {
        match (kind, convention) {
            (StateKind::Intra, PhaseConvention::BunchAtZero) => 0.0,
            (StateKind::Inter, PhaseConvention::BunchAtZero) => FRAC_PI_2,
            (StateKind::Intra, PhaseConvention::SplitAtZero) => FRAC_PI_2,
            (StateKind::Inter, PhaseConvention::SplitAtZero) => 0.0,
            (StateKind::All, _) => FRAC_PI_4,
            (StateKind::Custom, _) => 0.0,
        }
    }

    pub fn named(kind: StateKind, convention: PhaseConvention, bsgu_count: usize) -> Self {
        let phi = Self::named_phase(kind, convention);
        Self {
            kind,
            phases: PhaseSettings::uniform(phi, bsgu_count).expect("named phases are finite"),
        }
    }

    pub fn custom(phases: PhaseSettings) -> Self {
        Self {
            kind: StateKind::Custom,
            phases,
        }
    }
}

/// Branch amplitudes and probabilities of one source at a given phase.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BsguOutput {
    pub amp_bunch: f64,
    pub amp_split: f64,
    pub p_bunch: f64,
    pub p_split: f64,
}

/// Amplitudes this close to zero are rounding artifacts of the irrational
/// phase constants (cos of the f64 nearest to π/2 is ~6e-17) and are snapped
/// so that zero-probability branches stay exactly zero.
const AMP_SNAP: f64 = 1e-15;

/// Branch superposition of one source: amplitude cos φ on bunch, sin φ on split.
pub fn bsgu_output(phi: f64) -> Result<BsguOutput> {
    if !phi.is_finite() {
        return Err(CednError::InvalidInput(format!(
            "phase {phi} is not finite"
        )));
    }
    let (s, c) = phi.sin_cos();
    let amp_bunch = if c.abs() < AMP_SNAP { 0.0 } else { c };
    let amp_split = if s.abs() < AMP_SNAP { 0.0 } else { s };
    let p_bunch = amp_bunch * amp_bunch;
    Ok(BsguOutput {
        amp_bunch,
        amp_split,
        p_bunch,
        p_split: 1.0 - p_bunch,
    })
}

/// Per-generated-pair landing probabilities over user pairs.
///
/// `entry(u, v)` for `u != v` is the probability that one photon of a pair
/// arrives at `u` and the other at `v` (unordered); `entry(u, u)` is the
/// probability both photons land on `u`. Entries sum to 1 over unordered
/// pairs plus the diagonal.
#[derive(Debug, Clone, PartialEq)]
pub struct RoutingMatrix {
    n: usize,
    entries: Vec<f64>,
}

impl RoutingMatrix {
    pub fn n_users(&self) -> usize {
        self.n
    }

    pub fn entry(&self, u: UserId, v: UserId) -> f64 {
        self.entries[u.0 as usize * self.n + v.0 as usize]
    }

    /// Sum over unordered pairs plus the diagonal.
    pub fn total_probability(&self) -> f64 {
        let mut total = 0.0;
        for u in 0..self.n {
            for v in u..self.n {
                total += self.entries[u * self.n + v];
            }
        }
        total
    }

    /// Unordered pairs with strictly positive probability.
    pub fn active_link_count(&self) -> usize {
        let mut count = 0;
        for u in 0..self.n {
            for v in u + 1..self.n {
                if self.entries[u * self.n + v] > 0.0 {
                    count += 1;
                }
            }
        }
        count
    }

    /// Mean entry over all unordered pairs of the given class (zero entries included).
    pub fn class_mean(&self, topology: &NetworkTopology, class: LinkClass) -> f64 {
        let mut sum = 0.0;
        let mut count = 0usize;
        for u in 0..self.n {
            for v in u + 1..self.n {
                let c = classify_link(topology, UserId(u as u8), UserId(v as u8))
                    .expect("distinct valid users");
                if c == class {
                    sum += self.entries[u * self.n + v];
                    count += 1;
                }
            }
        }
        sum / count as f64
    }

    /// Mean entry over unordered pairs with strictly positive probability.
    pub fn active_mean(&self) -> f64 {
        let mut sum = 0.0;
        let mut count = 0usize;
        for u in 0..self.n {
            for v in u + 1..self.n {
                let e = self.entries[u * self.n + v];
                if e > 0.0 {
                    sum += e;
                    count += 1;
                }
            }
        }
        if count == 0 {
            0.0
        } else {
            sum / count as f64
        }
    }

    /// Mean entry over all unordered pairs.
    pub fn overall_mean(&self) -> f64 {
        let mut sum = 0.0;
        let mut count = 0usize;
        for u in 0..self.n {
            for v in u + 1..self.n {
                sum += self.entries[u * self.n + v];
                count += 1;
            }
        }
        sum / count as f64
    }

    /// Expected photons arriving at `u` per generated pair (diagonal counts twice).
    pub fn photon_marginal(&self, u: UserId) -> f64 {
        let ui = u.0 as usize;
        let mut m = 0.0;
        for v in 0..self.n {
            let e = self.entries[ui * self.n + v];
            m += if v == ui { 2.0 * e } else { e };
        }
        m
    }

    /// Square CSV: header row/column are user ids, cells carry 12 significant digits.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("user");
        for v in 0..self.n {
            out.push_str(&format!(",{v}"));
        }
        out.push('\n');
        for u in 0..self.n {
            out.push_str(&format!("{u}"));
            for v in 0..self.n {
                out.push_str(&format!(",{:.11e}", self.entries[u * self.n + v]));
            }
            out.push('\n');
        }
        out
    }
}

/// Exact routing matrix for the given phases, one per source.
///
/// Uses the closed form over branch classes: a bunch branch deposits both
/// photons uniformly over one subnet (port chosen 50/50), a split branch
/// deposits one photon in each wired subnet (assignment 50/50), and each
/// photon lands uniformly over its subnet's users. The source is chosen
/// uniformly per generated pair.
pub fn pair_routing_matrix(
    topology: &NetworkTopology,
    phases: &PhaseSettings,
) -> Result<RoutingMatrix> {
    if phases.len() != topology.bsgu_count() {
        return Err(CednError::Topology(format!(
            "{} phases supplied for {} sources",
            phases.len(),
            topology.bsgu_count()
        )));
    }
    let s_count = topology.subnet_count();
    let n_per = topology.users_per_subnet() as f64;
    let bsgu_weight = 1.0 / topology.bsgu_count() as f64;

    // Probability mass per branch class, before the uniform user landing.
    let mut bunch_mass = vec![0.0f64; s_count];
    let mut split_mass = vec![0.0f64; s_count * s_count]; // indexed by (min, max)
    for (w, &phi) in topology.wiring().iter().zip(phases.phases()) {
        let out = bsgu_output(phi)?;
        bunch_mass[w.up] += bsgu_weight * out.p_bunch * 0.5;
        bunch_mass[w.down] += bsgu_weight * out.p_bunch * 0.5;
        let (a, b) = (w.up.min(w.down), w.up.max(w.down));
        split_mass[a * s_count + b] += bsgu_weight * out.p_split;
    }

    let n = topology.total_users();
    let mut entries = vec![0.0f64; n * n];
    let per_landing = 1.0 / (n_per * n_per);
    for u in 0..n {
        let su = u / topology.users_per_subnet();
        for v in u..n {
            let sv = v / topology.users_per_subnet();
            let e = if su == sv {
                if u == v {
                    bunch_mass[su] * per_landing
                } else {
                    bunch_mass[su] * 2.0 * per_landing
                }
            } else {
                split_mass[su * s_count + sv] * per_landing
            };
            entries[u * n + v] = e;
            entries[v * n + u] = e;
        }
    }
    Ok(RoutingMatrix { n, entries })
}

/// Number of unordered user pairs that can share a photon pair in this state.
pub fn link_counts(topology: &NetworkTopology, state: &NetworkState) -> Result<usize> {
    Ok(pair_routing_matrix(topology, &state.phases)?.active_link_count())
}
