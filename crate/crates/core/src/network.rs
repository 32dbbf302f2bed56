//! Two-port network algebra.
//!
//! Networks are composed as chains of ABCD (transmission) matrices and only
//! converted to scattering parameters at the port boundary.

use std::f64::consts::PI;
use std::ops::Mul;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Reference impedance used throughout unless stated otherwise.
pub const DEFAULT_Z0: f64 = 50.0;

const ZERO: Complex64 = Complex64::new(0.0, 0.0);
const ONE: Complex64 = Complex64::new(1.0, 0.0);

#[derive(Debug, Error, PartialEq)]
pub enum NetworkError {
    #[error("cascade of zero elements")]
    EmptyCascade,
    #[error("degenerate network: A + B/z0 + C*z0 + D = 0 at z0 = {z0}")]
    Degenerate { z0: f64 },
    #[error("S21 = 0: scattering matrix has no chain-parameter form")]
    NonInvertible,
    #[error("reference impedance must be positive, got {0}")]
    BadReference(f64),
}

/// Complex 2x2 scattering matrix.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SMatrix {
    pub s11: Complex64,
    pub s12: Complex64,
    pub s21: Complex64,
    pub s22: Complex64,
}

impl SMatrix {
    pub fn new(s11: Complex64, s12: Complex64, s21: Complex64, s22: Complex64) -> Self {
        Self { s11, s12, s21, s22 }
    }

    /// Ideal thru: no reflection, full transmission.
    pub fn thru() -> Self {
        Self::new(ZERO, ONE, ONE, ZERO)
    }

    pub fn entries(&self) -> [Complex64; 4] {
        [self.s11, self.s12, self.s21, self.s22]
    }
}

/// Chain (ABCD) matrix at a single frequency. `b` is in ohms, `c` in siemens.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Abcd {
    pub a: Complex64,
    pub b: Complex64,
    pub c: Complex64,
    pub d: Complex64,
}

impl Abcd {
    pub fn new(a: Complex64, b: Complex64, c: Complex64, d: Complex64) -> Self {
        Self { a, b, c, d }
    }

    pub fn identity() -> Self {
        Self::new(ONE, ZERO, ZERO, ONE)
    }

    pub fn series(z: Complex64) -> Self {
        Self::new(ONE, z, ZERO, ONE)
    }

    pub fn shunt(y: Complex64) -> Self {
        Self::new(ONE, ZERO, y, ONE)
    }

    /// Uniform line section with characteristic impedance `zc` and total
    /// complex electrical length `gamma_len` (propagation constant times length).
    pub fn line(zc: Complex64, gamma_len: Complex64) -> Self {
        let ch = gamma_len.cosh();
        let sh = gamma_len.sinh();
        Self::new(ch, zc * sh, sh / zc, ch)
    }

    pub fn det(&self) -> Complex64 {
        self.a * self.d - self.b * self.c
    }

    pub fn max_abs_diff(&self, other: &Abcd) -> f64 {
        [self.a - other.a, self.b - other.b, self.c - other.c, self.d - other.d]
            .iter()
            .map(|z| z.norm())
            .fold(0.0, f64::max)
    }
}

impl Mul for Abcd {
    type Output = Abcd;

    fn mul(self, r: Abcd) -> Abcd {
        Abcd::new(
            self.a * r.a + self.b * r.c,
            self.a * r.b + self.b * r.d,
            self.c * r.a + self.d * r.c,
            self.c * r.b + self.d * r.d,
        )
    }
}

/// Left-to-right product of chain matrices.
pub fn cascade(ms: &[Abcd]) -> Result<Abcd, NetworkError> {
    let (first, rest) = ms.split_first().ok_or(NetworkError::EmptyCascade)?;
    Ok(rest.iter().fold(*first, |acc, m| acc * *m))
}

pub fn s_from_abcd(m: &Abcd, z0: f64) -> Result<SMatrix, NetworkError> {
    if !(z0 > 0.0) {
        return Err(NetworkError::BadReference(z0));
    }
    let bz = m.b / z0;
    let cz = m.c * z0;
    let den = m.a + bz + cz + m.d;
    if den.norm() == 0.0 || !den.norm().is_finite() {
        return Err(NetworkError::Degenerate { z0 });
    }
    Ok(SMatrix {
        s11: (m.a + bz - cz - m.d) / den,
        s12: 2.0 * m.det() / den,
        s21: 2.0 / den,
        s22: (-m.a + bz - cz + m.d) / den,
    })
}

pub fn abcd_from_s(s: &SMatrix, z0: f64) -> Result<Abcd, NetworkError> {
    if !(z0 > 0.0) {
        return Err(NetworkError::BadReference(z0));
    }
    if s.s21.norm() == 0.0 {
        return Err(NetworkError::NonInvertible);
    }
    let two_s21 = 2.0 * s.s21;
    let cross = s.s12 * s.s21;
    Ok(Abcd {
        a: ((ONE + s.s11) * (ONE - s.s22) + cross) / two_s21,
        b: z0 * ((ONE + s.s11) * (ONE + s.s22) - cross) / two_s21,
        c: ((ONE - s.s11) * (ONE - s.s22) - cross) / (two_s21 * z0),
        d: ((ONE - s.s11) * (ONE + s.s22) + cross) / two_s21,
    })
}

/// A two-terminal lumped impedance built from ideal R, L and C parts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Lumped {
    Resistor(f64),
    Inductor(f64),
    Capacitor(f64),
    Series(Vec<Lumped>),
    Parallel(Vec<Lumped>),
}

impl Lumped {
    pub fn impedance(&self, f_hz: f64) -> Complex64 {
        let w = 2.0 * PI * f_hz;
        match self {
            Lumped::Resistor(r) => Complex64::new(*r, 0.0),
            Lumped::Inductor(l) => Complex64::new(0.0, w * l),
            Lumped::Capacitor(c) => Complex64::new(0.0, -1.0 / (w * c)),
            Lumped::Series(parts) => parts.iter().map(|p| p.impedance(f_hz)).sum(),
            Lumped::Parallel(parts) => {
                let y: Complex64 = parts.iter().map(|p| p.impedance(f_hz).inv()).sum();
                y.inv()
            }
        }
    }

    pub fn admittance(&self, f_hz: f64) -> Complex64 {
        self.impedance(f_hz).inv()
    }

    /// Resistance with capacitors open and inductors shorted. Infinite when
    /// no DC path exists.
    pub fn dc_resistance(&self) -> f64 {
        match self {
            Lumped::Resistor(r) => *r,
            Lumped::Inductor(_) => 0.0,
            Lumped::Capacitor(_) => f64::INFINITY,
            Lumped::Series(parts) => parts.iter().map(Lumped::dc_resistance).sum(),
            Lumped::Parallel(parts) => {
                let rs: Vec<f64> = parts.iter().map(Lumped::dc_resistance).collect();
                if rs.iter().any(|&r| r == 0.0) {
                    return 0.0;
                }
                let g: f64 = rs.iter().filter(|r| r.is_finite()).map(|r| 1.0 / r).sum();
                if g == 0.0 {
                    f64::INFINITY
                } else {
                    1.0 / g
                }
            }
        }
    }

    /// Applies `f` to every component value, in depth-first order.
    pub fn map_values(&mut self, f: &mut impl FnMut(f64) -> f64) {
        match self {
            Lumped::Resistor(v) | Lumped::Inductor(v) | Lumped::Capacitor(v) => *v = f(*v),
            Lumped::Series(parts) | Lumped::Parallel(parts) => parts.iter_mut().for_each(|p| p.map_values(f)),
        }
    }
}

/// Distributed RLGC line, parameters per metre.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LineParams {
    pub r_per_m: f64,
    pub l_per_m: f64,
    pub g_per_m: f64,
    pub c_per_m: f64,
    pub length_m: f64,
}

impl LineParams {
    /// Characteristic impedance and propagation constant at `f_hz`.
    pub fn zc_gamma(&self, f_hz: f64) -> (Complex64, Complex64) {
        let w = 2.0 * PI * f_hz;
        let z = Complex64::new(self.r_per_m, w * self.l_per_m);
        let y = Complex64::new(self.g_per_m, w * self.c_per_m);
        let zc = (z / y).sqrt();
        let gamma = (z * y).sqrt();
        (zc, gamma)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Element {
    SeriesImpedance(Lumped),
    ShuntAdmittance(Lumped),
    TransmissionLine(LineParams),
}

/// Chain matrix of a single element at `f_hz` (must be positive).
pub fn element_abcd(e: &Element, f_hz: f64) -> Abcd {
    match e {
        Element::SeriesImpedance(z) => Abcd::series(z.impedance(f_hz)),
        Element::ShuntAdmittance(y) => Abcd::shunt(y.admittance(f_hz)),
        Element::TransmissionLine(line) => {
            let (zc, gamma) = line.zc_gamma(f_hz);
            Abcd::line(zc, gamma * line.length_m)
        }
    }
}

impl Element {
    /// Contribution to the end-to-end DC resistance of the signal path.
    /// Shunt branches return to the ground conductor and do not contribute.
    pub fn dc_series_resistance(&self) -> f64 {
        match self {
            Element::SeriesImpedance(z) => z.dc_resistance(),
            Element::ShuntAdmittance(_) => 0.0,
            Element::TransmissionLine(line) => line.r_per_m * line.length_m,
        }
    }
}

/// Ordered cascade of two-port elements, port 1 first.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct NetworkDescription {
    pub elements: Vec<Element>,
}

impl NetworkDescription {
    pub fn new(elements: Vec<Element>) -> Self {
        Self { elements }
    }

    pub fn abcd_at(&self, f_hz: f64) -> Result<Abcd, NetworkError> {
        let ms: Vec<Abcd> = self.elements.iter().map(|e| element_abcd(e, f_hz)).collect();
        cascade(&ms)
    }

    pub fn s_at(&self, f_hz: f64, z0: f64) -> Result<SMatrix, NetworkError> {
        s_from_abcd(&self.abcd_at(f_hz)?, z0)
    }

    pub fn dc_resistance(&self) -> f64 {
        self.elements.iter().map(Element::dc_series_resistance).sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn c(re: f64, im: f64) -> Complex64 {
        Complex64::new(re, im)
    }

    #[test]
    fn zero_series_impedance_is_identity() {
        let e = Element::SeriesImpedance(Lumped::Resistor(0.0));
        assert_eq!(element_abcd(&e, 1e9), Abcd::identity());
    }

    #[test]
    fn shunt_admittance_matrix() {
        let e = Element::ShuntAdmittance(Lumped::Resistor(50.0));
        let m = element_abcd(&e, 2e9);
        assert!(m.max_abs_diff(&Abcd::new(c(1., 0.), c(0., 0.), c(0.02, 0.), c(1., 0.))) < 1e-15);
    }

    #[test]
    fn quarter_wave_lossless_line() {
        let m = Abcd::line(c(50.0, 0.0), c(0.0, PI / 2.0));
        let expect = Abcd::new(c(0., 0.), c(0., 50.), c(0., 0.02), c(0., 0.));
        assert!(m.max_abs_diff(&expect) < 1e-12, "{m:?}");
    }

    #[test]
    fn rlgc_quarter_wave_matches_closed_form() {
        // Lossless line with Zc = 50 and a quarter wavelength at 1 GHz.
        let v = 2.0e8;
        let line = LineParams {
            r_per_m: 0.0,
            l_per_m: 50.0 / v,
            g_per_m: 0.0,
            c_per_m: 1.0 / (50.0 * v),
            length_m: v / 1e9 / 4.0,
        };
        let m = element_abcd(&Element::TransmissionLine(line), 1e9);
        let expect = Abcd::new(c(0., 0.), c(0., 50.), c(0., 0.02), c(0., 0.));
        assert!(m.max_abs_diff(&expect) < 1e-9, "{m:?}");
    }

    #[test]
    fn cascade_rules() {
        assert_eq!(cascade(&[]), Err(NetworkError::EmptyCascade));
        let id = cascade(&[Abcd::identity(), Abcd::identity()]).unwrap();
        assert_eq!(id, Abcd::identity());
        let z1 = c(10.0, 3.0);
        let z2 = c(-2.0, 7.5);
        let m = cascade(&[Abcd::series(z1), Abcd::series(z2)]).unwrap();
        assert!(m.max_abs_diff(&Abcd::series(z1 + z2)) < 1e-14);
    }

    #[test]
    fn s_of_simple_networks() {
        let s = s_from_abcd(&Abcd::identity(), 50.0).unwrap();
        assert!(s.s11.norm() < 1e-15 && (s.s21 - 1.0).norm() < 1e-15);

        let s = s_from_abcd(&Abcd::series(c(100.0, 0.0)), 50.0).unwrap();
        assert!((s.s11 - 0.5).norm() < 1e-15);
        assert!((s.s21 - 0.5).norm() < 1e-15);

        let s = s_from_abcd(&Abcd::shunt(c(0.02, 0.0)), 50.0).unwrap();
        assert!((s.s11 + 1.0 / 3.0).norm() < 1e-15);
        assert!((s.s21 - 2.0 / 3.0).norm() < 1e-15);
    }

    #[test]
    fn degenerate_and_non_invertible() {
        let m = Abcd::new(c(1., 0.), c(-50., 0.), c(0., 0.), c(0., 0.));
        assert!(matches!(s_from_abcd(&m, 50.0), Err(NetworkError::Degenerate { .. })));
        let s = SMatrix::new(c(1., 0.), ZERO, ZERO, c(1., 0.));
        assert_eq!(abcd_from_s(&s, 50.0), Err(NetworkError::NonInvertible));
        assert!(matches!(s_from_abcd(&Abcd::identity(), 0.0), Err(NetworkError::BadReference(_))));
    }

    #[test]
    fn abcd_round_trip_examples() {
        let m = abcd_from_s(&SMatrix::thru(), 50.0).unwrap();
        assert!(m.max_abs_diff(&Abcd::identity()) < 1e-15);
        let series = Abcd::series(c(100.0, 0.0));
        let back = abcd_from_s(&s_from_abcd(&series, 50.0).unwrap(), 50.0).unwrap();
        assert!(back.max_abs_diff(&series) < 1e-8 * 100.0);
    }

    #[test]
    fn lumped_dc_resistance() {
        let crack = Lumped::Parallel(vec![
            Lumped::Series(vec![Lumped::Resistor(0.5), Lumped::Inductor(1e-9)]),
            Lumped::Series(vec![Lumped::Resistor(20.0), Lumped::Capacitor(1e-12)]),
        ]);
        assert_eq!(crack.dc_resistance(), 0.5);
        assert_eq!(Lumped::Capacitor(1e-12).dc_resistance(), f64::INFINITY);
        let par = Lumped::Parallel(vec![Lumped::Resistor(100.0), Lumped::Resistor(100.0)]);
        assert!((par.dc_resistance() - 50.0).abs() < 1e-12);
        let net = NetworkDescription::new(vec![Element::SeriesImpedance(Lumped::Resistor(10.0))]);
        assert_eq!(net.dc_resistance(), 10.0);
    }
}
