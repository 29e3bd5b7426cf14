//! Per-photon loss budgets in dB, end-to-end link transmittance, and
//! what-if analysis of component improvements.
//!
//! Components compose additively in dB per photon path; the pair (link)
//! transmittance is the product of the two photons' linear transmittances.

use serde::{Deserialize, Serialize};

use crate::error::{CednError, Result};

/// Which photon path a component sits on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossSide {
    Signal,
    Idler,
    Both,
}

/// One attenuating element of a photon path.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComponentLoss {
    pub name: String,
    /// Attenuation in dB, positive.
    pub db: f64,
    /// How many of these the photon traverses.
    #[serde(default = "default_count")]
    pub count: u32,
}

fn default_count() -> u32 {
    1
}

impl ComponentLoss {
    pub fn new(name: impl Into<String>, db: f64) -> Self {
        Self {
            name: name.into(),
            db,
            count: 1,
        }
    }

    fn validate(&self) -> Result<()> {
        if !self.db.is_finite() || self.db < 0.0 {
            return Err(CednError::Config(format!(
                "component '{}' has invalid loss {} dB (must be finite and >= 0)",
                self.name, self.db
            )));
        }
        Ok(())
    }
}

/// Transmittance breakdown of one link.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LinkTransmittance {
    pub signal_db: f64,
    pub idler_db: f64,
    pub total_db: f64,
    /// Linear transmittance of each photon.
    pub per_photon: (f64, f64),
    /// Probability both photons of a pair survive.
    pub pair: f64,
}

fn db_to_linear(db: f64) -> f64 {
    10f64.powf(-db / 10.0)
}

/// dB equivalent of a detection efficiency, so detector losses can be folded
/// into a budget when a single composed chain is wanted.
pub fn efficiency_to_db(efficiency: f64) -> Result<f64> {
    if !(efficiency > 0.0 && efficiency <= 1.0) {
        return Err(CednError::Config(format!(
            "efficiency {efficiency} outside (0, 1]"
        )));
    }
    Ok(-10.0 * efficiency.log10())
}

/// Component chains for the two photons of a link.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LinkBudget {
    signal: Vec<ComponentLoss>,
    idler: Vec<ComponentLoss>,
}

impl LinkBudget {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, component: ComponentLoss, side: LossSide) -> Result<()> {
        component.validate()?;
        match side {
            LossSide::Signal => self.signal.push(component),
            LossSide::Idler => self.idler.push(component),
            LossSide::Both => {
                self.signal.push(component.clone());
                self.idler.push(component);
            }
        }
        Ok(())
    }

    pub fn with(mut self, name: &str, db: f64, side: LossSide) -> Result<Self> {
        self.push(ComponentLoss::new(name, db), side)?;
        Ok(self)
    }

    pub fn signal_components(&self) -> &[ComponentLoss] {
        &self.signal
    }

    pub fn idler_components(&self) -> &[ComponentLoss] {
        &self.idler
    }

    pub fn signal_db(&self) -> f64 {
        self.signal.iter().map(|c| c.db * c.count as f64).sum()
    }

    pub fn idler_db(&self) -> f64 {
        self.idler.iter().map(|c| c.db * c.count as f64).sum()
    }

    /// Remove every component with this name from both sides, returning how
    /// many instances were dropped.
    pub fn remove(&mut self, name: &str) -> usize {
        let before = self.signal.len() + self.idler.len();
        self.signal.retain(|c| c.name != name);
        self.idler.retain(|c| c.name != name);
        before - self.signal.len() - self.idler.len()
    }

    pub fn contains(&self, name: &str) -> bool {
        self.signal.iter().chain(&self.idler).any(|c| c.name == name)
    }
}

/// Compose a budget into per-photon and pair transmittances.
pub fn link_transmittance(budget: &LinkBudget) -> LinkTransmittance {
    let signal_db = budget.signal_db();
    let idler_db = budget.idler_db();
    let t1 = db_to_linear(signal_db);
    let t2 = db_to_linear(idler_db);
    LinkTransmittance {
        signal_db,
        idler_db,
        total_db: signal_db + idler_db,
        per_photon: (t1, t2),
        pair: t1 * t2,
    }
}

/// Replace the dB value of named components and report the pair-rate multiplier.
///
/// Every instance of a named component (on either side) takes the new value.
/// The multiplier is new pair transmittance over old, i.e. the factor by which
/// coincidence and key rates scale.
pub fn what_if(budget: &LinkBudget, modifications: &[(String, f64)]) -> Result<WhatIfReport> {
    let mut modified = budget.clone();
    for (name, new_db) in modifications {
        if !modified.contains(name) {
            return Err(CednError::Config(format!(
                "unknown component '{name}' in what-if modification"
            )));
        }
        if !new_db.is_finite() || *new_db < 0.0 {
            return Err(CednError::Config(format!(
                "invalid replacement loss {new_db} dB for '{name}'"
            )));
        }
        for c in modified
            .signal
            .iter_mut()
            .chain(modified.idler.iter_mut())
            .filter(|c| c.name == *name)
        {
            c.db = *new_db;
        }
    }
    let old = link_transmittance(budget);
    let new = link_transmittance(&modified);
    Ok(WhatIfReport {
        rate_multiplier: db_to_linear(new.total_db - old.total_db),
        old,
        new,
    })
}

/// Outcome of a what-if budget modification.
#[derive(Debug, Clone, Serialize)]
pub struct WhatIfReport {
    /// Factor applied to pair (coincidence, key) rates.
    pub rate_multiplier: f64,
    pub old: LinkTransmittance,
    pub new: LinkTransmittance,
}

/// Wavelength-dependent coupling loss table with linear interpolation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CouplingCurve {
    /// (wavelength nm, loss dB), strictly increasing in wavelength.
    knots: Vec<(f64, f64)>,
}

/// Signal channel wavelength (ITU C27, 192.7 THz).
pub const SIGNAL_WAVELENGTH_NM: f64 = 1555.75;
/// Idler channel wavelength (ITU C35, 193.5 THz).
pub const IDLER_WAVELENGTH_NM: f64 = 1549.32;
/// Pump wavelength (ITU C31, 193.1 THz).
pub const PUMP_WAVELENGTH_NM: f64 = 1552.52;

impl CouplingCurve {
    pub fn new(knots: Vec<(f64, f64)>) -> Result<Self> {
        if knots.len() < 2 {
            return Err(CednError::Config(
                "coupling curve needs at least 2 knots".into(),
            ));
        }
        if !knots.windows(2).all(|w| w[0].0 < w[1].0) {
            return Err(CednError::Config(
                "coupling curve wavelengths must be strictly increasing".into(),
            ));
        }
        Ok(Self { knots })
    }

    /// Measured grating-coupler curve of the fabricated chip: the optimum
    /// shifted to 1580 nm (~4.5 dB) leaving ~6 dB at the pair wavelengths.
    pub fn chip_default() -> Self {
        Self::new(vec![
            (IDLER_WAVELENGTH_NM, 6.0),
            (SIGNAL_WAVELENGTH_NM, 6.0),
            (1580.0, 4.5),
        ])
        .expect("default curve is valid")
    }

    pub fn knots(&self) -> &[(f64, f64)] {
        &self.knots
    }
}

/// Coupling loss in dB at a wavelength inside the tabulated range.
pub fn coupling_at(curve: &CouplingCurve, wavelength_nm: f64) -> Result<f64> {
    let knots = &curve.knots;
    let (lo, hi) = (knots[0].0, knots[knots.len() - 1].0);
    if !(wavelength_nm >= lo && wavelength_nm <= hi) {
        return Err(CednError::Range(format!(
            "wavelength {wavelength_nm} nm outside table range [{lo}, {hi}]"
        )));
    }
    let i = knots.partition_point(|k| k.0 <= wavelength_nm);
    if i == 0 {
        return Ok(knots[0].1);
    }
    if i == knots.len() {
        return Ok(knots[knots.len() - 1].1);
    }
    let (x0, y0) = knots[i - 1];
    let (x1, y1) = knots[i];
    if wavelength_nm == x0 {
        return Ok(y0);
    }
    Ok(y0 + (y1 - y0) * (wavelength_nm - x0) / (x1 - x0))
}

/// Splitting ratio of the subnet distribution stage, expressed in dB per
/// photon: a 2x2 mixer (1/2) followed by a 1x4 splitter (1/4).
pub fn subnet_splitting_db() -> (f64, f64) {
    (10.0 * 2f64.log10(), 10.0 * 4f64.log10())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn empty_budget_is_lossless() {
        let t = link_transmittance(&LinkBudget::new());
        assert_eq!(t.per_photon, (1.0, 1.0));
        assert_eq!(t.pair, 1.0);
        assert_eq!(t.total_db, 0.0);
    }

    #[test]
    fn three_db_both_sides_quarters_the_pair_rate() {
        let b = LinkBudget::new().with("half", 3.0, LossSide::Both).unwrap();
        let t = link_transmittance(&b);
        assert_relative_eq!(t.per_photon.0, 0.501187, epsilon = 1e-6);
        assert!((t.pair - 0.25).abs() < 1.5e-3);
    }

    /// The full measured chain: grating 6, splitting 3+6, fiber 1.25,
    /// filter 2, fiber coupler 3, dispersion 3, detector-equivalent 2.22 dB
    /// per photon, about 26.5 dB per photon and 53 dB per link.
    #[test]
    fn measured_chain_totals() {
        let (mix_db, split_db) = subnet_splitting_db();
        let det_db = efficiency_to_db(0.6).unwrap();
        let b = LinkBudget::new()
            .with("grating_coupler", 6.0, LossSide::Both)
            .unwrap()
            .with("subnet_mixer", mix_db, LossSide::Both)
            .unwrap()
            .with("subnet_splitter", split_db, LossSide::Both)
            .unwrap()
            .with("fiber", 1.25, LossSide::Both)
            .unwrap()
            .with("filter", 2.0, LossSide::Both)
            .unwrap()
            .with("fiber_coupler", 3.0, LossSide::Both)
            .unwrap()
            .with("dispersion", 3.0, LossSide::Both)
            .unwrap()
            .with("detector", det_db, LossSide::Both)
            .unwrap();
        let t = link_transmittance(&b);
        assert!((t.signal_db - 26.5).abs() < 0.1, "got {}", t.signal_db);
        assert!((t.total_db - 53.0).abs() < 0.2, "got {}", t.total_db);
    }

    #[test]
    fn what_if_identity() {
        let b = LinkBudget::new()
            .with("grating_coupler", 6.0, LossSide::Both)
            .unwrap();
        let r = what_if(&b, &[]).unwrap();
        assert_relative_eq!(r.rate_multiplier, 1.0, epsilon = 1e-12);
    }

    #[test]
    fn what_if_grating_improvement_is_ten_fold() {
        let b = LinkBudget::new()
            .with("grating_coupler", 6.0, LossSide::Both)
            .unwrap()
            .with("fiber", 1.25, LossSide::Both)
            .unwrap();
        let r = what_if(&b, &[("grating_coupler".into(), 1.0)]).unwrap();
        assert_relative_eq!(r.rate_multiplier, 10.0, epsilon = 1e-9);
    }

    #[test]
    fn what_if_halved_fiber_loss_one_side() {
        let mut b = LinkBudget::new();
        b.push(ComponentLoss::new("fiber_signal", 1.25), LossSide::Signal)
            .unwrap();
        b.push(ComponentLoss::new("fiber_idler", 1.25), LossSide::Idler)
            .unwrap();
        let r = what_if(&b, &[("fiber_signal".into(), 0.625)]).unwrap();
        assert_relative_eq!(r.rate_multiplier, 10f64.powf(0.0625), epsilon = 1e-9);
    }

    #[test]
    fn what_if_unknown_component_is_config_error() {
        let b = LinkBudget::new()
            .with("grating_coupler", 6.0, LossSide::Both)
            .unwrap();
        assert!(matches!(
            what_if(&b, &[("laser".into(), 1.0)]),
            Err(CednError::Config(_))
        ));
    }

    #[test]
    fn coupling_curve_lookup() {
        let c = CouplingCurve::chip_default();
        assert_relative_eq!(coupling_at(&c, 1580.0).unwrap(), 4.5, epsilon = 1e-12);
        assert_relative_eq!(
            coupling_at(&c, SIGNAL_WAVELENGTH_NM).unwrap(),
            6.0,
            epsilon = 1e-12
        );
        assert_relative_eq!(
            coupling_at(&c, IDLER_WAVELENGTH_NM).unwrap(),
            6.0,
            epsilon = 1e-12
        );
        // Interpolation halfway between the signal knot and the 1580 nm knot.
        let mid = 0.5 * (SIGNAL_WAVELENGTH_NM + 1580.0);
        assert_relative_eq!(coupling_at(&c, mid).unwrap(), 5.25, epsilon = 1e-9);
        assert!(matches!(
            coupling_at(&c, 1500.0),
            Err(CednError::Range(_))
        ));
    }

    #[test]
    fn component_order_does_not_matter() {
        let a = LinkBudget::new()
            .with("x", 1.5, LossSide::Both)
            .unwrap()
            .with("y", 4.25, LossSide::Both)
            .unwrap();
        let b = LinkBudget::new()
            .with("y", 4.25, LossSide::Both)
            .unwrap()
            .with("x", 1.5, LossSide::Both)
            .unwrap();
        assert_eq!(link_transmittance(&a).pair, link_transmittance(&b).pair);
    }

    #[test]
    fn splitting_a_component_preserves_transmittance() {
        let whole = LinkBudget::new().with("z", 7.0, LossSide::Both).unwrap();
        let split = LinkBudget::new()
            .with("z1", 2.75, LossSide::Both)
            .unwrap()
            .with("z2", 4.25, LossSide::Both)
            .unwrap();
        assert_relative_eq!(
            link_transmittance(&whole).pair,
            link_transmittance(&split).pair,
            epsilon = 1e-12
        );
    }

    #[test]
    fn adding_components_never_increases_transmittance() {
        let mut b = LinkBudget::new();
        let mut last = link_transmittance(&b).pair;
        for i in 0..10 {
            b.push(
                ComponentLoss::new(format!("c{i}"), 0.5 * i as f64),
                LossSide::Signal,
            )
            .unwrap();
            let t = link_transmittance(&b).pair;
            assert!(t <= last);
            last = t;
        }
    }

    #[test]
    fn negative_loss_is_rejected() {
        let mut b = LinkBudget::new();
        assert!(matches!(
            b.push(ComponentLoss::new("gain", -1.0), LossSide::Both),
            Err(CednError::Config(_))
        ));
    }
}
