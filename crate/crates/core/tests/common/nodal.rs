//! Nodal-analysis solver for two-port ladders, independent of the chain
//! matrices used by the library.

use std::f64::consts::PI;

use num_complex::Complex64 as C;
use sparamdx_core::network::{Element, Lumped, NetworkDescription, SMatrix};

pub fn z_of(l: &Lumped, w: f64) -> C {
    match l {
        Lumped::Resistor(r) => C::new(*r, 0.0),
        Lumped::Inductor(h) => C::new(0.0, w * h),
        Lumped::Capacitor(f) => C::new(0.0, -1.0 / (w * f)),
        Lumped::Series(p) => p.iter().map(|x| z_of(x, w)).sum(),
        Lumped::Parallel(p) => C::new(1.0, 0.0) / p.iter().map(|x| C::new(1.0, 0.0) / z_of(x, w)).sum::<C>(),
    }
}

fn solve(mut a: Vec<Vec<C>>, mut b: Vec<C>) -> Vec<C> {
    let n = b.len();
    for col in 0..n {
        let piv = (col..n).max_by(|&i, &j| a[i][col].norm().total_cmp(&a[j][col].norm())).unwrap();
        a.swap(col, piv);
        b.swap(col, piv);
        for r in col + 1..n {
            let f = a[r][col] / a[col][col];
            for c in col..n {
                let t = a[col][c];
                a[r][c] -= f * t;
            }
            let t = b[col];
            b[r] -= f * t;
        }
    }
    let mut x = vec![C::new(0.0, 0.0); n];
    for r in (0..n).rev() {
        let s: C = (r + 1..n).map(|c| a[r][c] * x[c]).sum();
        x[r] = (b[r] - s) / a[r][r];
    }
    x
}

/// S-parameters by modified nodal analysis.
pub fn nodal_s(desc: &NetworkDescription, f: f64, z0: f64) -> SMatrix {
    let w = 2.0 * PI * f;
    // stamps: (node_i, node_j, admittance) with usize::MAX meaning ground
    let mut stamps: Vec<(usize, usize, C)> = Vec::new();
    let mut node = 0usize;
    for e in &desc.elements {
        match e {
            Element::ShuntAdmittance(l) => stamps.push((node, usize::MAX, C::new(1.0, 0.0) / z_of(l, w))),
            Element::SeriesImpedance(l) => {
                stamps.push((node, node + 1, C::new(1.0, 0.0) / z_of(l, w)));
                node += 1;
            }
            Element::TransmissionLine(p) => {
                let z = C::new(p.r_per_m, w * p.l_per_m);
                let y = C::new(p.g_per_m, w * p.c_per_m);
                let zc = (z / y).sqrt();
                let gl = (z * y).sqrt() * p.length_m;
                // pi-equivalent of the exact line
                let series = zc * gl.sinh();
                let shunt = (gl / 2.0).tanh() / zc;
                stamps.push((node, node + 1, C::new(1.0, 0.0) / series));
                stamps.push((node, usize::MAX, shunt));
                stamps.push((node + 1, usize::MAX, shunt));
                node += 1;
            }
        }
    }
    let n = node + 1;
    let mut y = vec![vec![C::new(0.0, 0.0); n]; n];
    for (i, j, g) in stamps {
        y[i][i] += g;
        if j != usize::MAX {
            y[j][j] += g;
            y[i][j] -= g;
            y[j][i] -= g;
        }
    }
    let gt = C::new(1.0 / z0, 0.0);
    y[0][0] += gt;
    y[n - 1][n - 1] += gt;
    let drive = |port: usize| {
        let mut rhs = vec![C::new(0.0, 0.0); n];
        rhs[port] = C::new(2.0 / z0, 0.0);
        let v = solve(y.clone(), rhs);
        (v[0], v[n - 1])
    };
    let (v1, v2) = drive(0);
    let (u1, u2) = drive(n - 1);
    let one = C::new(1.0, 0.0);
    SMatrix::new(v1 - one, u1, v2, u2 - one)
}

pub fn max_diff(a: &SMatrix, b: &SMatrix) -> f64 {
    a.entries().iter().zip(b.entries()).map(|(x, y)| (x - y).norm()).fold(0.0, f64::max)
}

pub fn passive(s: &SMatrix) -> bool {
    // I - S^H S must be positive semidefinite
    let e = s.entries();
    let (s11, s12, s21, s22) = (e[0], e[1], e[2], e[3]);
    let m11 = 1.0 - s11.norm_sqr() - s21.norm_sqr();
    let m22 = 1.0 - s12.norm_sqr() - s22.norm_sqr();
    let m12 = -(s11.conj() * s12 + s21.conj() * s22);
    m11 >= -1e-9 && m22 >= -1e-9 && m11 * m22 - m12.norm_sqr() >= -1e-9
}
