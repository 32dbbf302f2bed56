//! Independent check of the chain-matrix algebra: every network is also
//! solved by nodal analysis with both ports terminated in the reference
//! impedance.

mod common;

use common::nodal::{max_diff, nodal_s, passive};
use proptest::prelude::*;
use sparamdx_core::defects::{electrode_model, nominal_model, DefectLabel, SweepSpec};
use sparamdx_core::network::{abcd_from_s, s_from_abcd, Element, LineParams, Lumped, NetworkDescription};

fn lumped() -> impl Strategy<Value = Lumped> {
    let leaf = prop_oneof![
        (0.1f64..200.0).prop_map(Lumped::Resistor),
        (1e-11f64..1e-8).prop_map(Lumped::Inductor),
        (1e-14f64..1e-11).prop_map(Lumped::Capacitor),
    ];
    leaf.prop_recursive(2, 6, 3, |inner| {
        prop_oneof![
            prop::collection::vec(inner.clone(), 1..3).prop_map(Lumped::Series),
            prop::collection::vec(inner, 1..3).prop_map(Lumped::Parallel),
        ]
    })
}

fn element() -> impl Strategy<Value = Element> {
    prop_oneof![
        lumped().prop_map(Element::SeriesImpedance),
        lumped().prop_map(Element::ShuntAdmittance),
        (0.0f64..5000.0, 1e-7f64..1e-6, 0.0f64..1.0, 5e-11f64..3e-10, 1e-4f64..0.02).prop_map(|(r, l, g, c, len)| {
            Element::TransmissionLine(LineParams { r_per_m: r, l_per_m: l, g_per_m: g, c_per_m: c, length_m: len })
        }),
    ]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn cascade_matches_nodal_analysis(
        elements in prop::collection::vec(element(), 1..8),
        f in 1e6f64..1e10,
    ) {
        let desc = NetworkDescription::new(elements);
        let chain = desc.s_at(f, 50.0).unwrap();
        let nodal = nodal_s(&desc, f, 50.0);
        prop_assert!(max_diff(&chain, &nodal) < 1e-8, "{chain:?} vs {nodal:?}");
        prop_assert!((chain.s12 - chain.s21).norm() < 1e-12);
        prop_assert!(passive(&chain));
    }

    #[test]
    fn abcd_s_round_trip(elements in prop::collection::vec(element(), 1..6), f in 1e7f64..5e9) {
        let desc = NetworkDescription::new(elements);
        let m = desc.abcd_at(f).unwrap();
        let s = s_from_abcd(&m, 50.0).unwrap();
        let back = abcd_from_s(&s, 50.0).unwrap();
        let scale = [m.a, m.b, m.c, m.d].iter().map(|v| v.norm()).fold(1.0, f64::max);
        prop_assert!(back.max_abs_diff(&m) <= 1e-9 * scale);
    }
}

#[test]
fn electrode_models_match_nodal_analysis() {
    let spec = SweepSpec::default();
    let freqs = spec.frequencies();
    for label in DefectLabel::ALL {
        for model in [nominal_model(label), electrode_model(label, 99)] {
            for &f in freqs.iter().step_by(20) {
                let chain = model.description.s_at(f, 50.0).unwrap();
                let nodal = nodal_s(&model.description, f, 50.0);
                assert!(max_diff(&chain, &nodal) < 1e-9, "{label} at {f}");
                assert!(passive(&chain));
                assert!((chain.s12 - chain.s21).norm() < 1e-12);
            }
        }
    }
}
