//! Generic-vs-structured cross-validation and balance-law checks for the
//! affine body.

use std::sync::Arc;

use liaison_core::affine::generic::{
    moment_from_generalized, q_to_state, state_to_q, to_generic_scenario,
};
use liaison_core::affine::{
    balance_report, momenta, simulate_affine, AffineBodyModel, AffineBodyState, ConstraintVariant,
    ForceLaw,
};
use liaison_core::solver::{simulate, IntegratorConfig};
use nalgebra::{DMatrix, DVector};

fn spring_model(n: usize, stiffness: f64) -> AffineBodyModel<f64> {
    let g = DMatrix::identity(n, n);
    let eta = DMatrix::identity(n, n);
    let g1 = g.clone();
    let eta1 = eta.clone();
    let g2 = g.clone();
    let eta2 = eta.clone();
    let n_dim = n;
    AffineBodyModel {
        spatial_dim: n,
        mass: 1.0,
        inertia: DMatrix::identity(n, n),
        spatial_metric: g,
        material_metric: eta,
        force: ForceLaw::Potential {
            value: Arc::new(move |_r, phi: &DMatrix<f64>| {
                let c = phi.transpose() * &g1 * phi - &eta1;
                0.25 * stiffness * (&c * &c).trace()
            }),
            grad_r: Arc::new(move |_r, _phi| DVector::zeros(n_dim)),
            grad_phi: Arc::new(move |_r, phi: &DMatrix<f64>| {
                let c = phi.transpose() * &g2 * phi - &eta2;
                &g2 * phi * c * stiffness
            }),
        },
    }
}

fn free_model(n: usize, inertia: DMatrix<f64>) -> AffineBodyModel<f64> {
    AffineBodyModel::euclidean(n, 1.0, inertia, ForceLaw::None).unwrap()
}

fn rotating_state_2d(w: f64) -> AffineBodyState<f64> {
    let mut s = AffineBodyState::reference(2);
    s.phidot = DMatrix::from_row_slice(2, 2, &[0.0, -w, w, 0.0]);
    s
}

fn cross_validate(
    model: &AffineBodyModel<f64>,
    variant: ConstraintVariant,
    s0: &AffineBodyState<f64>,
    t_end: f64,
    tol: f64,
) {
    let cfg = IntegratorConfig {
        step: 1e-3,
        ..IntegratorConfig::default()
    };
    let structured = simulate_affine(model, variant, s0, &cfg, t_end, 10).unwrap();
    let mut scenario = to_generic_scenario(model, variant, s0, t_end, cfg).unwrap();
    scenario.sample_stride = 10;
    let generic = simulate(&scenario).unwrap();
    assert_eq!(structured.len(), generic.len());
    let mut worst = 0.0f64;
    for i in 0..structured.len() {
        let q_structured = state_to_q(&structured.states[i]);
        worst = worst.max((generic.qs[i].clone() - q_structured).amax());
    }
    assert!(worst <= tol, "{} trace deviation {worst}", variant.name());
}

#[test]
fn generic_matches_structured_unconstrained() {
    let model = spring_model(2, 2.0);
    let mut s0 = AffineBodyState::reference(2);
    s0.phi = DMatrix::from_row_slice(2, 2, &[1.1, 0.1, -0.2, 0.9]);
    s0.phidot = DMatrix::from_row_slice(2, 2, &[0.2, -0.1, 0.3, 0.1]);
    s0.rdot = DVector::from_vec(vec![0.3, -0.1]);
    cross_validate(&model, ConstraintVariant::Unconstrained, &s0, 2.0, 1e-9);
}

#[test]
fn generic_matches_structured_rigid_2d() {
    let model = free_model(2, DMatrix::from_diagonal(&DVector::from_vec(vec![1.0, 2.0])));
    let s0 = rotating_state_2d(0.8);
    cross_validate(&model, ConstraintVariant::Rigid, &s0, 2.0, 1e-6);
}

#[test]
fn generic_matches_structured_rigid_3d() {
    let model = free_model(
        3,
        DMatrix::from_diagonal(&DVector::from_vec(vec![1.0, 2.0, 3.0])),
    );
    let mut s0 = AffineBodyState::reference(3);
    s0.phidot = DMatrix::from_row_slice(
        3,
        3,
        &[0.0, -0.1, 1.0, 0.1, 0.0, -0.2, -1.0, 0.2, 0.0],
    );
    cross_validate(&model, ConstraintVariant::Rigid, &s0, 2.0, 1e-6);
}

#[test]
fn generic_matches_structured_isochoric() {
    let model = spring_model(2, 1.5);
    let mut s0 = AffineBodyState::reference(2);
    s0.phidot = DMatrix::from_row_slice(2, 2, &[0.3, 0.1, 0.2, -0.3]);
    cross_validate(&model, ConstraintVariant::Isochoric, &s0, 2.0, 1e-6);
}

#[test]
fn generic_matches_structured_conformal() {
    let model = spring_model(2, 4.0);
    let c = 0.3f64;
    let scale = 1.2;
    let phi0 = DMatrix::from_row_slice(
        2,
        2,
        &[
            scale * c.cos(),
            -scale * c.sin(),
            scale * c.sin(),
            scale * c.cos(),
        ],
    );
    let omega0 = DMatrix::from_row_slice(2, 2, &[0.1, -0.6, 0.6, 0.1]);
    let s0 = AffineBodyState::new(
        DVector::zeros(2),
        DVector::zeros(2),
        phi0.clone(),
        &omega0 * &phi0,
    );
    cross_validate(&model, ConstraintVariant::Conformal, &s0, 2.0, 1e-6);
}

#[test]
fn generic_matches_structured_rotation_free() {
    let model = spring_model(2, 2.0);
    let mut s0 = AffineBodyState::reference(2);
    s0.phi = DMatrix::from_row_slice(2, 2, &[1.2, 0.1, 0.1, 0.9]);
    // symmetric gyration: Omega = Omega^T, phidot = Omega phi
    let omega0 = DMatrix::from_row_slice(2, 2, &[0.2, 0.3, 0.3, -0.1]);
    s0.phidot = &omega0 * &s0.phi;
    cross_validate(&model, ConstraintVariant::RotationFree, &s0, 2.0, 1e-6);
}

#[test]
fn generic_rotation_free_reaction_is_antisymmetric_moment() {
    let model = spring_model(2, 2.0);
    let mut s0 = AffineBodyState::reference(2);
    let omega0 = DMatrix::from_row_slice(2, 2, &[0.2, 0.3, 0.3, -0.1]);
    s0.phidot = omega0;
    let cfg = IntegratorConfig::default();
    let scenario =
        to_generic_scenario(&model, ConstraintVariant::RotationFree, &s0, 1.0, cfg).unwrap();
    assert_eq!(scenario.blocks.len(), 1);
    assert_eq!(scenario.blocks[0].set.count(), 1);
    let record = simulate(&scenario).unwrap();
    for i in 0..record.len() {
        let state = q_to_state(2, &record.qs[i], &record.vs[i]);
        let n_r = moment_from_generalized(&model, &state.phi, &record.reactions[i]).unwrap();
        let sym_defect = (&n_r + n_r.transpose()).amax();
        assert!(sym_defect <= 1e-9, "asymmetry defect {sym_defect}");
    }
}

#[test]
fn balance_laws_hold_along_constrained_motion() {
    let model = free_model(
        3,
        DMatrix::from_diagonal(&DVector::from_vec(vec![1.0, 2.0, 3.0])),
    );
    let mut s0 = AffineBodyState::reference(3);
    s0.phidot = DMatrix::from_row_slice(
        3,
        3,
        &[0.0, -0.3, 0.2, 0.3, 0.0, -0.8, -0.2, 0.8, 0.0],
    );
    let cfg = IntegratorConfig {
        step: 1e-4,
        ..IntegratorConfig::default()
    };
    let record = simulate_affine(&model, ConstraintVariant::Rigid, &s0, &cfg, 0.5, 1).unwrap();
    let samples: Vec<(f64, AffineBodyState<f64>)> = record
        .times
        .iter()
        .copied()
        .zip(record.states.iter().cloned())
        .collect();
    let report = balance_report(&model, &samples, Some(&record.reactions)).unwrap();
    assert!(report.linear_momentum <= 1e-6, "{report:?}");
    assert!(report.affine_spin <= 1e-6, "{report:?}");
    assert!(report.spin <= 1e-6, "{report:?}");
    assert!(report.comoving_momentum <= 1e-6, "{report:?}");
    assert!(report.comoving_spin <= 1e-6, "{report:?}");
    assert!(report.comoving_velocity <= 1e-6, "{report:?}");
    assert!(report.comoving_gyration <= 1e-6, "{report:?}");
}

#[test]
fn spin_conserved_under_symmetric_moment() {
    // constant symmetric N via a direct force law
    let n_sym = DMatrix::from_row_slice(2, 2, &[0.3, 0.1, 0.1, -0.2]);
    let n_sym2 = n_sym.clone();
    let model = AffineBodyModel {
        spatial_dim: 2,
        mass: 1.0,
        inertia: DMatrix::identity(2, 2),
        spatial_metric: DMatrix::identity(2, 2),
        material_metric: DMatrix::identity(2, 2),
        force: ForceLaw::Direct {
            force: Arc::new(|_s| DVector::zeros(2)),
            moment: Arc::new(move |_s| n_sym2.clone()),
        },
    };
    let s0 = rotating_state_2d(0.5);
    let cfg = IntegratorConfig::default();
    let record =
        simulate_affine(&model, ConstraintVariant::Unconstrained, &s0, &cfg, 5.0, 100).unwrap();
    let (_, _, s_first) = momenta(&model, &record.states[0]);
    for state in &record.states {
        let (_, _, s_now) = momenta(&model, state);
        assert!((s_now - &s_first).amax() <= 1e-6);
    }
}

#[test]
fn spin_rate_matches_moment_antisymmetry() {
    let n_total = DMatrix::from_row_slice(2, 2, &[0.3, 0.5, -0.1, -0.2]);
    let n_total2 = n_total.clone();
    let model = AffineBodyModel {
        spatial_dim: 2,
        mass: 1.0,
        inertia: DMatrix::identity(2, 2),
        spatial_metric: DMatrix::identity(2, 2),
        material_metric: DMatrix::identity(2, 2),
        force: ForceLaw::Direct {
            force: Arc::new(|_s| DVector::zeros(2)),
            moment: Arc::new(move |_s| n_total2.clone()),
        },
    };
    let s0 = rotating_state_2d(0.5);
    let cfg = IntegratorConfig {
        step: 1e-4,
        ..IntegratorConfig::default()
    };
    let record =
        simulate_affine(&model, ConstraintVariant::Unconstrained, &s0, &cfg, 0.2, 1).unwrap();
    let torque = &n_total - n_total.transpose();
    for i in 1..record.len() - 1 {
        let (_, _, s_prev) = momenta(&model, &record.states[i - 1]);
        let (_, _, s_next) = momenta(&model, &record.states[i + 1]);
        let dt = record.times[i + 1] - record.times[i - 1];
        let ds = (s_next - s_prev) / dt;
        assert!((ds - &torque).amax() <= 1e-6);
    }
}

#[test]
fn free_body_through_generic_chart_is_linear() {
    let model = free_model(2, DMatrix::identity(2, 2));
    let mut s0 = AffineBodyState::reference(2);
    s0.phidot = DMatrix::from_row_slice(2, 2, &[0.4, -0.2, 0.1, 0.3]);
    s0.rdot = DVector::from_vec(vec![1.0, -0.5]);
    let scenario = to_generic_scenario(
        &model,
        ConstraintVariant::Unconstrained,
        &s0,
        1.0,
        IntegratorConfig::default(),
    )
    .unwrap();
    let record = simulate(&scenario).unwrap();
    let t = *record.times.last().unwrap();
    let expected = state_to_q(&AffineBodyState {
        r: &s0.r + &s0.rdot * t,
        rdot: s0.rdot.clone(),
        phi: &s0.phi + &s0.phidot * t,
        phidot: s0.phidot.clone(),
    });
    assert!((record.qs.last().unwrap() - expected).amax() <= 1e-9);
}

#[test]
fn isochoric_multiplier_matches_trace_formula() {
    let model = spring_model(2, 1.5);
    let mut s0 = AffineBodyState::reference(2);
    s0.phidot = DMatrix::from_row_slice(2, 2, &[0.3, 0.1, 0.2, -0.3]);
    let cfg = IntegratorConfig::default();
    let record =
        simulate_affine(&model, ConstraintVariant::Isochoric, &s0, &cfg, 1.0, 50).unwrap();
    let g = &model.spatial_metric;
    for i in 0..record.len() {
        let n_r = &record.reactions[i];
        let lambda = (g * n_r).trace() / 2.0;
        // the reaction is exactly lambda g^{-1}
        let ginv = model.spatial_metric_inverse();
        assert!((n_r - ginv * lambda).amax() <= 1e-10);
        // and the stored multiplier coordinate is that lambda
        assert!((record.multipliers[i][0] - lambda).abs() <= 1e-10);
    }
}
