//! Parametric electrode models for the seven health states.
//!
//! An electrode is a lossy line between two probe-contact pads. Cracks are
//! lumped insertions placed evenly along the line; photodegradation scales
//! the line's series resistance and shunt conductance. All lumped values
//! are calibration constants: the nominal (variation-free) model of each
//! class hits its DC resistance target exactly.

use std::fmt;
use std::str::FromStr;

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::network::{Element, LineParams, Lumped, NetworkDescription, NetworkError, DEFAULT_Z0};
use crate::rng::{derive_seed, rng_from_seed, tags};
use crate::touchstone::SweepRecord;

pub const N_CLASSES: usize = 7;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum DefectLabel {
    Normal,
    M1,
    M2,
    M3,
    P1,
    P2,
    P3,
}

impl DefectLabel {
    pub const ALL: [DefectLabel; N_CLASSES] = [
        DefectLabel::Normal,
        DefectLabel::M1,
        DefectLabel::M2,
        DefectLabel::M3,
        DefectLabel::P1,
        DefectLabel::P2,
        DefectLabel::P3,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            DefectLabel::Normal => "Normal",
            DefectLabel::M1 => "M1",
            DefectLabel::M2 => "M2",
            DefectLabel::M3 => "M3",
            DefectLabel::P1 => "P1",
            DefectLabel::P2 => "P2",
            DefectLabel::P3 => "P3",
        }
    }

    /// Number of cracks for the mechanical classes.
    pub fn crack_count(self) -> usize {
        match self {
            DefectLabel::M1 => 1,
            DefectLabel::M2 => 3,
            DefectLabel::M3 => 5,
            _ => 0,
        }
    }

    /// UV exposure in hours for the photodegradation classes.
    pub fn exposure_hours(self) -> f64 {
        match self {
            DefectLabel::P1 => 150.0,
            DefectLabel::P2 => 500.0,
            DefectLabel::P3 => 1000.0,
            _ => 0.0,
        }
    }

    /// Mean DC resistance of the class in ohms.
    pub fn dc_target(self) -> f64 {
        match self {
            DefectLabel::Normal => 49.5,
            DefectLabel::M1 => 50.0,
            DefectLabel::M2 => 50.1,
            DefectLabel::M3 => 53.2,
            DefectLabel::P1 => 49.8,
            // No measured value exists; midway between P1 and P3.
            DefectLabel::P2 => 52.45,
            DefectLabel::P3 => 55.1,
        }
    }
}

impl fmt::Display for DefectLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for DefectLabel {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        Self::ALL
            .iter()
            .find(|l| l.name().eq_ignore_ascii_case(s))
            .copied()
            .ok_or_else(|| format!("unknown class `{s}`"))
    }
}

/// Linear frequency sweep.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepSpec {
    pub f_start_hz: f64,
    pub f_stop_hz: f64,
    pub n_points: usize,
}

impl Default for SweepSpec {
    fn default() -> Self {
        Self { f_start_hz: 100e6, f_stop_hz: 4.5e9, n_points: 201 }
    }
}

impl SweepSpec {
    pub fn validate(&self) -> Result<(), String> {
        if !(self.f_start_hz > 0.0) {
            return Err("f_start_hz must be positive".into());
        }
        if !(self.f_start_hz < self.f_stop_hz) || !self.f_stop_hz.is_finite() {
            return Err("f_start_hz must be below a finite f_stop_hz".into());
        }
        if self.n_points < 2 {
            return Err("n_points must be at least 2".into());
        }
        Ok(())
    }

    pub fn frequencies(&self) -> Vec<f64> {
        let step = (self.f_stop_hz - self.f_start_hz) / (self.n_points - 1) as f64;
        (0..self.n_points)
            .map(|i| if i + 1 == self.n_points { self.f_stop_hz } else { self.f_start_hz + step * i as f64 })
            .collect()
    }
}

/// Calibration constants of the electrode family.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ElectrodeParams {
    /// Series contact resistance of each probe pad.
    pub contact_r: f64,
    pub pad_l: f64,
    pub pad_c: f64,
    pub line_length_m: f64,
    /// Number of equal line segments; crack positions fall on segment joints.
    pub segments: usize,
    pub line_l_per_m: f64,
    pub line_c_per_m: f64,
    pub line_g_per_m: f64,
    /// Crack branch inductance (current crowding around the cut).
    pub crack_l: f64,
    /// Gap capacitance across the crack faces.
    pub crack_c: f64,
    /// Loss in series with the gap capacitance.
    pub crack_gap_r: f64,
    /// Shunt-conductance growth per 1000 h of exposure.
    pub conductance_beta: f64,
    /// Relative standard deviation of per-element manufacturing variation.
    pub variation_sigma: f64,
}

impl Default for ElectrodeParams {
    fn default() -> Self {
        Self {
            contact_r: 0.75,
            pad_l: 0.2e-9,
            pad_c: 0.1e-12,
            line_length_m: 0.02,
            segments: 12,
            line_l_per_m: 4.0e-7,
            line_c_per_m: 1.11e-10,
            line_g_per_m: 0.05,
            crack_l: 0.5e-9,
            crack_c: 4.0e-12,
            crack_gap_r: 20.0,
            conductance_beta: 15.0,
            variation_sigma: 0.02,
        }
    }
}

impl ElectrodeParams {
    /// Total line resistance of an undamaged electrode.
    fn base_line_r(&self) -> f64 {
        DefectLabel::Normal.dc_target() - 2.0 * self.contact_r
    }

    /// Series resistance of one crack for a mechanical class.
    pub fn crack_r(&self, label: DefectLabel) -> f64 {
        match label.crack_count() {
            0 => 0.0,
            n => (label.dc_target() - DefectLabel::Normal.dc_target()) / n as f64,
        }
    }

    /// Line-resistance scale factor `1 + alpha * h / 1000` of a
    /// photodegradation class; alpha is fitted to the class DC target.
    pub fn resistance_scale(&self, label: DefectLabel) -> f64 {
        if label.exposure_hours() == 0.0 {
            return 1.0;
        }
        (label.dc_target() - 2.0 * self.contact_r) / self.base_line_r()
    }

    pub fn conductance_scale(&self, label: DefectLabel) -> f64 {
        1.0 + self.conductance_beta * label.exposure_hours() / 1000.0
    }

    pub fn validate(&self) -> Result<(), String> {
        let positive = [
            self.pad_l,
            self.pad_c,
            self.line_length_m,
            self.line_l_per_m,
            self.line_c_per_m,
            self.crack_l,
            self.crack_c,
        ];
        if positive.iter().any(|v| !(*v > 0.0)) {
            return Err("lumped and line constants must be positive".into());
        }
        if self.contact_r < 0.0 || self.line_g_per_m < 0.0 || self.crack_gap_r < 0.0 {
            return Err("resistances and conductances must be non-negative".into());
        }
        if !(self.base_line_r() > 0.0) {
            return Err("contact resistance exceeds the Normal DC target".into());
        }
        if self.segments == 0 || self.segments % 12 != 0 {
            return Err("segments must be a positive multiple of 12".into());
        }
        if !(0.0..0.2).contains(&self.variation_sigma) {
            return Err("variation_sigma must lie in [0, 0.2)".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ElectrodeModel {
    pub description: NetworkDescription,
    pub label: DefectLabel,
    /// `None` for the nominal, variation-free model.
    pub variation_seed: Option<u64>,
}

fn pad(params: &ElectrodeParams) -> [Element; 2] {
    [
        Element::ShuntAdmittance(Lumped::Capacitor(params.pad_c)),
        Element::SeriesImpedance(Lumped::Series(vec![
            Lumped::Resistor(params.contact_r),
            Lumped::Inductor(params.pad_l),
        ])),
    ]
}

fn crack(params: &ElectrodeParams, r: f64) -> Element {
    Element::SeriesImpedance(Lumped::Parallel(vec![
        Lumped::Series(vec![Lumped::Resistor(r), Lumped::Inductor(params.crack_l)]),
        Lumped::Series(vec![Lumped::Resistor(params.crack_gap_r), Lumped::Capacitor(params.crack_c)]),
    ]))
}

/// Variation-free cascade of a class.
fn nominal_description(params: &ElectrodeParams, label: DefectLabel) -> NetworkDescription {
    let n = params.segments;
    let seg_len = params.line_length_m / n as f64;
    let segment = LineParams {
        r_per_m: params.base_line_r() / params.line_length_m * params.resistance_scale(label),
        l_per_m: params.line_l_per_m,
        g_per_m: params.line_g_per_m * params.conductance_scale(label),
        c_per_m: params.line_c_per_m,
        length_m: seg_len,
    };
    let cracks = label.crack_count();
    let crack_after: Vec<usize> = (1..=cracks).map(|k| k * n / (cracks + 1)).collect();
    let crack_r = params.crack_r(label);

    let [pad_c, pad_series] = pad(params);
    let mut elements = vec![pad_c.clone(), pad_series.clone()];
    for i in 1..=n {
        elements.push(Element::TransmissionLine(segment.clone()));
        if crack_after.contains(&i) {
            elements.push(crack(params, crack_r));
        }
    }
    elements.push(pad_series);
    elements.push(pad_c);
    NetworkDescription::new(elements)
}

fn perturb(desc: &mut NetworkDescription, sigma: f64, seed: u64) {
    if sigma == 0.0 {
        return;
    }
    let mut rng = rng_from_seed(derive_seed(seed, &[tags::VARIATION]));
    let normal = Normal::new(0.0, sigma).expect("finite sigma");
    let mut scale = |v: f64| v * (1.0 + normal.sample(&mut rng));
    for e in &mut desc.elements {
        match e {
            Element::SeriesImpedance(z) | Element::ShuntAdmittance(z) => z.map_values(&mut scale),
            Element::TransmissionLine(line) => {
                line.r_per_m = scale(line.r_per_m);
                line.l_per_m = scale(line.l_per_m);
                line.g_per_m = scale(line.g_per_m);
                line.c_per_m = scale(line.c_per_m);
            }
        }
    }
}

/// Builds a class model with per-element multiplicative variation drawn
/// from `variation_seed`.
pub fn electrode_model(label: DefectLabel, variation_seed: u64) -> ElectrodeModel {
    electrode_model_with(&ElectrodeParams::default(), label, Some(variation_seed))
}

pub fn nominal_model(label: DefectLabel) -> ElectrodeModel {
    electrode_model_with(&ElectrodeParams::default(), label, None)
}

pub fn electrode_model_with(
    params: &ElectrodeParams,
    label: DefectLabel,
    variation_seed: Option<u64>,
) -> ElectrodeModel {
    let mut description = nominal_description(params, label);
    if let Some(seed) = variation_seed {
        perturb(&mut description, params.variation_sigma, seed);
    }
    ElectrodeModel { description, label, variation_seed }
}

/// End-to-end DC resistance: capacitors open, inductors shorted.
pub fn dc_resistance(m: &ElectrodeModel) -> f64 {
    m.description.dc_resistance()
}

pub fn sweep_response(m: &ElectrodeModel, spec: &SweepSpec) -> Result<SweepRecord, NetworkError> {
    let freqs = spec.frequencies();
    let s = freqs.iter().map(|&f| m.description.s_at(f, DEFAULT_Z0)).collect::<Result<Vec<_>, _>>()?;
    Ok(SweepRecord { freqs_hz: freqs, s, z0_ohm: DEFAULT_Z0 })
}
