//! Cross-method and trajectory-level checks of the generic solver.

mod common;

use common::*;
use liaison_core::constraints::{differentiated_form, lift_holonomic_to_pfaffian, ConstraintSet};
use liaison_core::dynamics::DissipativeForce;
use liaison_core::reactions::ReactionModel;
use liaison_core::solver::{
    check_procedure1, reduce_parametric, samples_with_accelerations, simulate, ConstraintBlock,
    IntegratorConfig, Method, Scenario,
};
use nalgebra::DVector;

const G: f64 = 9.81;

#[test]
fn multiplier_and_parametric_pendulum_agree() {
    let scenario = {
        let mut s = pendulum_scenario(G, 2.0, 3.0, 1e-3);
        s.sample_stride = 10;
        s
    };
    let record = simulate(&scenario).unwrap();

    let embedding = pendulum_embedding();
    let (reduced, reduced_d) =
        reduce_parametric(&scenario.system, &scenario.dissipation, &embedding);
    let reduced_scenario = Scenario {
        system: reduced,
        dissipation: reduced_d,
        blocks: vec![],
        q0: DVector::from_vec(vec![0.0]),
        v0: DVector::from_vec(vec![2.0]),
        t_end: 3.0,
        config: scenario.config,
        sample_stride: 10,
    };
    let reduced_record = simulate(&reduced_scenario).unwrap();

    assert_eq!(record.len(), reduced_record.len());
    let mut worst = 0.0f64;
    for i in 0..record.len() {
        let y = reduced_record.qs[i][0];
        let q_embedded = DVector::from_vec(vec![y.sin(), -y.cos()]);
        worst = worst.max((record.qs[i].clone() - q_embedded).amax());
    }
    assert!(worst <= 1e-6, "sup deviation {worst}");
}

#[test]
fn drift_grows_monotonically_without_stabilization() {
    let mut scenario = pendulum_scenario(G, 2.0, 10.0, 1e-2);
    scenario.config.projection = false;
    scenario.config.baumgarte = None;
    let record = simulate(&scenario).unwrap();
    // windowed max residual over ten windows must strictly increase
    let windows = 10;
    let per = record.len() / windows;
    let mut peaks = Vec::new();
    for w in 0..windows {
        let lo = w * per;
        let hi = ((w + 1) * per).min(record.len());
        let peak = (lo..hi)
            .map(|i| record.residual_norm(i))
            .fold(0.0f64, f64::max);
        peaks.push(peak);
    }
    for w in 1..windows {
        assert!(
            peaks[w] > peaks[w - 1],
            "drift not monotone: {peaks:?}"
        );
    }
    assert!(peaks[windows - 1] > 10.0 * peaks[1].max(1e-300));
}

#[test]
fn baumgarte_bounds_the_drift() {
    let mut free = pendulum_scenario(G, 2.0, 10.0, 1e-2);
    free.config.projection = false;
    let unstabilized = simulate(&free).unwrap().summary().max_residual;

    let mut damped = pendulum_scenario(G, 2.0, 10.0, 1e-2);
    damped.config.projection = false;
    damped.config.baumgarte = Some(IntegratorConfig::default_baumgarte());
    let stabilized = simulate(&damped).unwrap().summary().max_residual;

    assert!(
        stabilized < unstabilized / 10.0,
        "baumgarte {stabilized} vs free {unstabilized}"
    );
}

#[test]
fn ideal_and_vakonomic_knife_edge_separate() {
    let ideal = simulate(&knife_edge_scenario(ReactionModel::IdealDalembert, 0.0, 5.0)).unwrap();
    let vak = simulate(&knife_edge_scenario(ReactionModel::Vakonomic, 1.0, 5.0)).unwrap();
    let d = (ideal.qs.last().unwrap() - vak.qs.last().unwrap()).norm();
    assert!(d > 1e-2, "divergence {d}");
    // both maintain their velocity-level constraint
    assert!(ideal.summary().max_residual <= 1e-8);
    assert!(vak.summary().max_residual <= 1e-8);
}

#[test]
fn appell_chetaev_matches_ideal_on_pfaffian_sets() {
    // For constraints linear in the velocities the two laws share the same
    // reaction direction, so the motions coincide.
    let ideal = simulate(&knife_edge_scenario(ReactionModel::IdealDalembert, 0.0, 3.0)).unwrap();
    let ac = simulate(&knife_edge_scenario(ReactionModel::AppellChetaev, 0.0, 3.0)).unwrap();
    let d = (ideal.qs.last().unwrap() - ac.qs.last().unwrap()).amax();
    assert!(d <= 1e-10, "deviation {d}");
}

#[test]
fn lifted_holonomic_under_vakonomic_coincides_with_ideal() {
    // The curl of an exact form vanishes, so the vakonomic reaction of a
    // lifted holonomic set reduces to the ideal direction and the motions
    // agree; only the multiplier bookkeeping differs.
    let ideal = {
        let mut s = pendulum_scenario(G, 2.0, 5.0, 1e-3);
        s.sample_stride = 100;
        s
    };
    let ideal_record = simulate(&ideal).unwrap();

    let lifted = match circle_constraint(1.0) {
        ConstraintSet::Holonomic(h) => lift_holonomic_to_pfaffian(&h),
        _ => unreachable!(),
    };
    let mut vak = pendulum_scenario(G, 2.0, 5.0, 1e-3);
    vak.sample_stride = 100;
    vak.blocks = vec![ConstraintBlock::vakonomic(
        ConstraintSet::Pfaffian(lifted),
        DVector::from_vec(vec![1.0]),
    )];
    let vak_record = simulate(&vak).unwrap();
    let d = (ideal_record.qs.last().unwrap() - vak_record.qs.last().unwrap()).norm();
    assert!(d <= 1e-9, "divergence {d}");
    // the rate of the vakonomic multiplier matches minus the ideal one
    for i in 0..ideal_record.len() {
        let lambda = ideal_record.multipliers[i][0].values[0];
        let mu_dot = vak_record.multipliers[i][0].rates.as_ref().unwrap()[0];
        assert!((lambda + mu_dot).abs() <= 1e-9);
    }
}

#[test]
fn pendulum_procedure1_defect_equals_reaction() {
    let scenario = {
        let mut s = pendulum_scenario(G, 2.0, 2.0, 1e-3);
        s.sample_stride = 50;
        s
    };
    let record = simulate(&scenario).unwrap();
    let samples = samples_with_accelerations(&scenario, &record).unwrap();
    let report = check_procedure1(
        &scenario.system,
        &scenario.dissipation,
        &samples,
        &[circle_constraint(1.0)],
    );
    assert!(!report.is_special_solution(1e-10));
    // the unconstrained defect reproduces the recorded reaction covector
    for (i, el) in report.euler_lagrange_residuals.iter().enumerate() {
        assert!((el - &record.reactions[i]).amax() <= 1e-8);
    }
    // a librating pendulum always carries a nonzero reaction somewhere
    assert!(report.max_euler_lagrange > 1.0);
}

#[test]
fn charged_particle_kinetic_energy_is_conserved() {
    let record = simulate(&charged_particle_scenario(1.0, 10.0, 1e-3)).unwrap();
    let summary = record.summary();
    assert!(summary.energy_drift <= 1e-6, "drift {}", summary.energy_drift);
    // circular orbit of radius 1
    let q = record.qs.last().unwrap();
    let t = *record.times.last().unwrap();
    assert!((q[0] - t.sin()).abs() <= 1e-6);
}

#[test]
fn differentiated_form_consistent_along_trajectory() {
    let scenario = {
        let mut s = pendulum_scenario(G, 2.0, 2.0, 1e-3);
        s.sample_stride = 20;
        s
    };
    let record = simulate(&scenario).unwrap();
    let samples = samples_with_accelerations(&scenario, &record).unwrap();
    let set = circle_constraint(1.0);
    for s in &samples {
        let (a_mat, b) = differentiated_form(&set, &s.q, &s.v).unwrap();
        let defect = (&a_mat * &s.a - b).amax();
        assert!(defect <= 1e-7, "defect {defect} at t = {}", s.t);
    }
}

#[test]
fn explicit_euler_is_first_order_and_worse() {
    let mut rk = pendulum_scenario(G, 2.0, 1.0, 1e-3);
    rk.sample_stride = 1000;
    let mut euler = pendulum_scenario(G, 2.0, 1.0, 1e-3);
    euler.sample_stride = 1000;
    euler.config.method = Method::ExplicitEuler;
    let mut fine = pendulum_scenario(G, 2.0, 1.0, 1e-5);
    fine.sample_stride = 100000;
    let q_rk = simulate(&rk).unwrap().qs.last().unwrap().clone();
    let q_euler = simulate(&euler).unwrap().qs.last().unwrap().clone();
    let q_ref = simulate(&fine).unwrap().qs.last().unwrap().clone();
    let e_rk = (q_rk - &q_ref).norm();
    let e_euler = (q_euler - &q_ref).norm();
    assert!(e_euler > 100.0 * e_rk, "euler {e_euler} rk {e_rk}");
}

#[test]
fn mixed_constraint_families_are_stacked() {
    // Free particle in 3-D with one holonomic plane and one Pfaffian row.
    use liaison_core::constraints::HolonomicConstraints;
    use liaison_core::dynamics::{build_natural_lagrangian, NaturalSystemSpec};
    use liaison_core::manifold::MetricField;
    use nalgebra::DMatrix;
    use std::sync::Arc;

    let spec = NaturalSystemSpec::kinetic_only(MetricField::constant(DMatrix::identity(3, 3)));
    let plane_row = DMatrix::from_row_slice(1, 3, &[0.0, 0.0, 1.0]);
    let plane_row2 = plane_row.clone();
    let plane = ConstraintSet::Holonomic(
        HolonomicConstraints::new_analytic(
            3,
            1,
            Arc::new(move |q: &DVector<f64>| &plane_row2 * q),
            {
                let plane_row = plane_row.clone();
                Arc::new(move |_q| plane_row.clone())
            },
            Arc::new(|_q| vec![DMatrix::zeros(3, 3)]),
        )
        .unwrap(),
    );
    let pfaffian = ConstraintSet::Pfaffian(
        liaison_core::constraints::PfaffianConstraints::homogeneous(
            3,
            1,
            Arc::new(|q: &DVector<f64>| {
                DMatrix::from_row_slice(1, 3, &[q[1].cos(), 1.0, 0.0])
            }),
            Arc::new(|q: &DVector<f64>| {
                let mut d = DMatrix::zeros(3, 3);
                d[(0, 1)] = -q[1].sin();
                vec![d]
            }),
        )
        .unwrap(),
    );
    let scenario = Scenario {
        system: build_natural_lagrangian(&spec),
        dissipation: DissipativeForce::zero(3),
        blocks: vec![
            ConstraintBlock::new(plane, ReactionModel::IdealDalembert),
            ConstraintBlock::new(pfaffian, ReactionModel::IdealDalembert),
        ],
        q0: DVector::zeros(3),
        v0: DVector::from_vec(vec![1.0, -1.0, 0.0]),
        t_end: 2.0,
        config: IntegratorConfig::default(),
        sample_stride: 20,
    };
    let record = simulate(&scenario).unwrap();
    let summary = record.summary();
    assert!(summary.max_residual <= 1e-8);
    assert!(summary.max_normalized_power <= 1e-9);
}
