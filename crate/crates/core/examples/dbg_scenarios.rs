use liaison_core::constraints::*;
use liaison_core::dynamics::*;
use liaison_core::manifold::MetricField;
use liaison_core::reactions::ReactionModel;
use liaison_core::solver::*;
use nalgebra::{DMatrix, DVector};
use std::sync::Arc;

fn knife_edge_set() -> ConstraintSet<f64> {
    ConstraintSet::Pfaffian(
        PfaffianConstraints::homogeneous(
            3,
            1,
            Arc::new(|q: &DVector<f64>| DMatrix::from_row_slice(1, 3, &[q[2].sin(), -q[2].cos(), 0.0])),
            Arc::new(|q: &DVector<f64>| {
                let mut d = DMatrix::zeros(3, 3);
                d[(0, 2)] = q[2].cos();
                d[(1, 2)] = q[2].sin();
                vec![d]
            }),
        )
        .unwrap(),
    )
}

fn knife_scenario(model: ReactionModel, mu0: f64, t_end: f64) -> Scenario<f64> {
    let spec = NaturalSystemSpec::kinetic_only(MetricField::constant(DMatrix::identity(3, 3)));
    let block = match model {
        ReactionModel::Vakonomic => ConstraintBlock::vakonomic(knife_edge_set(), DVector::from_vec(vec![mu0])),
        m => ConstraintBlock::new(knife_edge_set(), m),
    };
    Scenario {
        system: build_natural_lagrangian(&spec),
        dissipation: DissipativeForce::zero(3),
        blocks: vec![block],
        q0: DVector::zeros(3),
        v0: DVector::from_vec(vec![1.0, 0.0, 1.0]),
        t_end,
        config: IntegratorConfig::default(),
        sample_stride: 100,
    }
}

fn main() {
    // knife edge: ideal vs vakonomic divergence at T=5
    let ideal = simulate(&knife_scenario(ReactionModel::IdealDalembert, 0.0, 5.0)).unwrap();
    let vak = simulate(&knife_scenario(ReactionModel::Vakonomic, 1.0, 5.0)).unwrap();
    let qa = ideal.qs.last().unwrap();
    let qb = vak.qs.last().unwrap();
    println!("knife divergence at T=5: {:.6}", (qa - qb).norm());
    println!("ideal last q: {:?}", qa.as_slice());
    println!("vak   last q: {:?}", qb.as_slice());
    let s = vak.summary();
    println!("vak summary: res={:.3e}", s.max_residual);

    // vakonomic force balance re-substitution check
    let scen = knife_scenario(ReactionModel::Vakonomic, 1.0, 1.0);
    let rec = simulate(&scen).unwrap();
    let mut worst = 0.0f64;
    for i in 0..rec.len() {
        let mus: Vec<DVector<f64>> = rec.multipliers[i].iter().map(|m| m.values.clone()).collect();
        let c = assemble_closure(&scen, &rec.qs[i], &rec.vs[i], &mus).unwrap();
        let el = euler_lagrange_residual(&scen.system, &scen.dissipation, &rec.qs[i], &rec.vs[i], &c.accel);
        worst = worst.max((el - &c.reaction).amax());
    }
    println!("vak force balance defect: {:.3e}", worst);

    // pendulum order study: final state error vs h
    let g = 9.81;
    let pend = |h: f64, t_end: f64| -> DVector<f64> {
        let spec = NaturalSystemSpec {
            metric: MetricField::constant(DMatrix::identity(2, 2)),
            vector_potential: None,
            scalar_potential: Some(ScalarPotential {
                value: Arc::new(move |q: &DVector<f64>| g * q[1]),
                gradient: Arc::new(move |_q| DVector::from_vec(vec![0.0, g])),
            }),
            coupling: 0.0,
        };
        let set = ConstraintSet::Holonomic(
            HolonomicConstraints::new_analytic(
                2, 1,
                Arc::new(|q: &DVector<f64>| DVector::from_vec(vec![q[0]*q[0]+q[1]*q[1]-1.0])),
                Arc::new(|q: &DVector<f64>| DMatrix::from_row_slice(1, 2, &[2.0*q[0], 2.0*q[1]])),
                Arc::new(|_q| vec![DMatrix::identity(2,2)*2.0]),
            ).unwrap(),
        );
        let scen = Scenario {
            system: build_natural_lagrangian(&spec),
            dissipation: DissipativeForce::zero(2),
            blocks: vec![ConstraintBlock::new(set, ReactionModel::IdealDalembert)],
            q0: DVector::from_vec(vec![0.0, -1.0]),
            v0: DVector::from_vec(vec![2.0, 0.0]),
            t_end,
            config: IntegratorConfig { step: h, ..IntegratorConfig::default() },
            sample_stride: usize::MAX,
        };
        let rec = simulate(&scen).unwrap();
        let mut out = rec.qs.last().unwrap().clone();
        out = out.push(rec.vs.last().unwrap()[0]);
        out = out.push(rec.vs.last().unwrap()[1]);
        out
    };
    let т = 1.0;
    let reference = pend(1e-5, т);
    let e1 = (pend(2e-3, т) - &reference).norm();
    let e2 = (pend(1e-3, т) - &reference).norm();
    println!("pendulum errors: h=2e-3 -> {:.3e}, h=1e-3 -> {:.3e}, ratio {:.1}", e1, e2, e1 / e2);
}
