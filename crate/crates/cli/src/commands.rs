//! The three CLI verbs: `run`, `compare`, and `validate`.

use std::io::Write as _;
use std::path::Path;
use std::time::Instant;

use liaison_core::affine::{check_variant_admission, simulate_affine};
use liaison_core::constraints::{
    differentiated_form, first_dependent_row, involutivity_defect, ConstraintSet,
};
use liaison_core::reactions::ReactionModel;
use liaison_core::solver::{
    reduce_parametric, simulate, ConstraintBlock, Method, Scenario, TrajectoryRecord,
};
use nalgebra::DVector;

use crate::output::{
    build_summary, fmt_f64, write_affine_trajectory, write_generic_trajectory, write_summary,
    SummaryInputs,
};
use crate::scenario::{load, load_error, parse_reaction, run_error, CliError, EmbeddingData, Loaded};

fn read_scenario(file: &Path) -> Result<Loaded, CliError> {
    let text = std::fs::read_to_string(file)
        .map_err(|e| CliError::Io(format!("{}: {e}", file.display())))?;
    load(&text)
}

fn ensure_outdir(dir: &Path) -> Result<(), CliError> {
    std::fs::create_dir_all(dir).map_err(|e| CliError::Io(format!("{}: {e}", dir.display())))
}

fn method_name(m: Method) -> &'static str {
    match m {
        Method::RungeKutta4 => "rk4",
        Method::ExplicitEuler => "euler",
    }
}

/// `run <file> -o <dir>`: integrate and write the trajectory table plus the
/// summary document.
pub fn run(file: &Path, outdir: &Path) -> Result<(), CliError> {
    let loaded = read_scenario(file)?;
    ensure_outdir(outdir)?;
    let started = Instant::now();
    match &loaded {
        Loaded::Generic {
            name,
            scenario,
            output,
            ..
        } => {
            scenario.validate().map_err(load_error)?;
            let record = simulate(scenario).map_err(run_error)?;
            let wall = started.elapsed().as_secs_f64();
            write_generic_trajectory(&outdir.join(&output.trajectory), scenario, &record)?;
            let summary = record.summary();
            let doc = build_summary(
                &SummaryInputs {
                    scenario_name: name,
                    model_name: "per-block",
                    dimension: scenario.dim(),
                    constraint_counts: scenario.blocks.iter().map(|b| b.set.count()).collect(),
                    h: scenario.config.step,
                    t_end: scenario.t_end,
                    method: method_name(scenario.config.method),
                    projection: scenario.config.projection,
                    baumgarte: scenario.config.baumgarte,
                    stride: scenario.sample_stride,
                    final_time: *record.times.last().unwrap_or(&0.0),
                    wall_time_s: wall,
                },
                &summary,
            );
            write_summary(&outdir.join(&output.summary), &doc)?;
        }
        Loaded::Affine {
            name,
            model,
            variant,
            state0,
            config,
            t_end,
            output,
        } => {
            let record = simulate_affine(model, *variant, state0, config, *t_end, output.stride)
                .map_err(run_error)?;
            let wall = started.elapsed().as_secs_f64();
            write_affine_trajectory(&outdir.join(&output.trajectory), model, &record)?;
            let summary = record.summary(model);
            let doc = build_summary(
                &SummaryInputs {
                    scenario_name: name,
                    model_name: variant.name(),
                    dimension: model.spatial_dim + model.spatial_dim * model.spatial_dim,
                    constraint_counts: vec![variant.reaction_dim(model.spatial_dim)],
                    h: config.step,
                    t_end: *t_end,
                    method: method_name(config.method),
                    projection: config.projection,
                    baumgarte: config.baumgarte,
                    stride: output.stride,
                    final_time: *record.times.last().unwrap_or(&0.0),
                    wall_time_s: wall,
                },
                &summary,
            );
            write_summary(&outdir.join(&output.summary), &doc)?;
        }
    }
    Ok(())
}

enum CompareModel {
    Reaction(ReactionModel),
    Parametric,
}

fn parse_compare_model(name: &str) -> Result<CompareModel, CliError> {
    if name == "parametric" {
        Ok(CompareModel::Parametric)
    } else {
        Ok(CompareModel::Reaction(parse_reaction(name)?))
    }
}

struct CompareTrace {
    times: Vec<f64>,
    qs: Vec<DVector<f64>>,
    reactions: Vec<DVector<f64>>,
}

fn run_under_model(
    scenario: &Scenario<f64>,
    embedding: Option<&EmbeddingData>,
    mu0_file: &[f64],
    model: &CompareModel,
) -> Result<CompareTrace, CliError> {
    match model {
        CompareModel::Parametric => {
            let data = embedding.ok_or_else(|| {
                CliError::Parse(
                    "model `parametric` needs a builtin that carries an embedding".into(),
                )
            })?;
            let (reduced, reduced_d) =
                reduce_parametric(&scenario.system, &scenario.dissipation, &data.embedding);
            data.embedding.check_at(&data.y0).map_err(load_error)?;
            let reduced_scenario = Scenario {
                system: reduced,
                dissipation: reduced_d,
                blocks: vec![],
                q0: data.y0.clone(),
                v0: data.ydot0.clone(),
                t_end: scenario.t_end,
                config: scenario.config,
                sample_stride: scenario.sample_stride,
            };
            let record = simulate(&reduced_scenario).map_err(run_error)?;
            let k = scenario.dim();
            Ok(CompareTrace {
                times: record.times.clone(),
                qs: record.qs.iter().map(|y| (data.embedding.map)(y)).collect(),
                reactions: vec![DVector::zeros(k); record.len()],
            })
        }
        CompareModel::Reaction(reaction) => {
            let mut overridden = scenario.clone();
            let mut mu_cursor = 0usize;
            for block in &mut overridden.blocks {
                if !reaction.accepts(&block.set) {
                    return Err(CliError::Parse(format!(
                        "reaction model {} does not accept {} constraints",
                        reaction.name(),
                        block.set.family_name()
                    )));
                }
                block.model = *reaction;
                if *reaction == ReactionModel::Vakonomic {
                    let m = block.set.count();
                    let mu0 = if mu0_file.len() >= mu_cursor + m {
                        DVector::from_vec(mu0_file[mu_cursor..mu_cursor + m].to_vec())
                    } else {
                        DVector::zeros(m)
                    };
                    mu_cursor += m;
                    block.mu0 = Some(mu0);
                } else {
                    block.mu0 = None;
                }
            }
            overridden.validate().map_err(load_error)?;
            let record: TrajectoryRecord<f64> = simulate(&overridden).map_err(run_error)?;
            Ok(CompareTrace {
                times: record.times.clone(),
                qs: record.qs.clone(),
                reactions: record.reactions.clone(),
            })
        }
    }
}

/// `compare <file> --model-a <name> --model-b <name> -o <dir>`: run the
/// scenario under two reaction models and emit the divergence table plus
/// both reaction traces.
pub fn compare(
    file: &Path,
    model_a: &str,
    model_b: &str,
    outdir: &Path,
) -> Result<(), CliError> {
    let loaded = read_scenario(file)?;
    let (scenario, embedding, mu0_file, name) = match &loaded {
        Loaded::Generic {
            scenario,
            embedding,
            mu0_file,
            name,
            ..
        } => (scenario, embedding.as_ref(), mu0_file.as_slice(), name),
        Loaded::Affine { .. } => {
            return Err(CliError::Parse(
                "compare works on generic scenarios; affine variants are cross-validated through \
                 their generic form"
                    .into(),
            ))
        }
    };
    ensure_outdir(outdir)?;
    let a = run_under_model(scenario, embedding, mu0_file, &parse_compare_model(model_a)?)?;
    let b = run_under_model(scenario, embedding, mu0_file, &parse_compare_model(model_b)?)?;
    if a.times.len() != b.times.len() {
        return Err(CliError::Step(
            "comparison runs produced different sample counts".into(),
        ));
    }

    let k = scenario.dim();
    let path = outdir.join("compare.csv");
    let mut out = std::fs::File::create(&path)
        .map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
    let mut header: Vec<String> = vec!["t".into(), "divergence".into()];
    header.extend((1..=k).map(|i| format!("ra{i}")));
    header.extend((1..=k).map(|i| format!("rb{i}")));
    writeln!(out, "{}", header.join(","))
        .map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
    let mut max_div = 0.0f64;
    let mut final_div = 0.0f64;
    for i in 0..a.times.len() {
        let div = (a.qs[i].clone() - &b.qs[i]).norm();
        max_div = max_div.max(div);
        final_div = div;
        let mut row = vec![fmt_f64(a.times[i]), fmt_f64(div)];
        row.extend(a.reactions[i].iter().map(|x| fmt_f64(*x)));
        row.extend(b.reactions[i].iter().map(|x| fmt_f64(*x)));
        writeln!(out, "{}", row.join(","))
            .map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
    }

    #[derive(serde::Serialize)]
    struct CompareSummary<'a> {
        scenario: &'a str,
        model_a: &'a str,
        model_b: &'a str,
        samples: usize,
        final_divergence: f64,
        max_divergence: f64,
    }
    let doc = CompareSummary {
        scenario: name,
        model_a,
        model_b,
        samples: a.times.len(),
        final_divergence: final_div,
        max_divergence: max_div,
    };
    let text = toml::to_string_pretty(&doc)
        .map_err(|e| CliError::Io(format!("compare summary serialization: {e}")))?;
    std::fs::write(outdir.join("compare_summary.toml"), text)
        .map_err(|e| CliError::Io(format!("compare_summary.toml: {e}")))?;
    println!("final divergence: {}", fmt_f64(final_div));
    Ok(())
}

/// `validate <file>`: parse, check invariants, rank and admission at the
/// initial state, and report integrability diagnostics. No integration.
pub fn validate(file: &Path, report: &mut dyn std::io::Write) -> Result<(), CliError> {
    let loaded = read_scenario(file)?;
    match &loaded {
        Loaded::Generic {
            name, scenario, ..
        } => {
            writeln!(report, "scenario: {name} (generic, dimension {})", scenario.dim()).ok();
            writeln!(
                report,
                "integrator: h = {}, t_end = {}, method = {}, projection = {}",
                scenario.config.step,
                scenario.t_end,
                method_name(scenario.config.method),
                scenario.config.projection
            )
            .ok();
            for (idx, block) in scenario.blocks.iter().enumerate() {
                writeln!(
                    report,
                    "constraint set {idx}: {} (m = {}), reaction = {}",
                    block.set.family_name(),
                    block.set.count(),
                    block.model.name()
                )
                .ok();
                // per-set rank at the initial state, naming the dependent row
                let jac = block.set.velocity_jacobian(&scenario.q0, &scenario.v0);
                if let Some(row) = first_dependent_row(&jac) {
                    return Err(CliError::Admission(format!(
                        "constraint row {} of set {idx} is linearly dependent on its predecessors",
                        row + 1
                    )));
                }
                differentiated_form(&block.set, &scenario.q0, &scenario.v0)
                    .map_err(load_error)?;
                if let ConstraintSet::Pfaffian(p) = &block.set {
                    if p.is_homogeneous() {
                        let defect =
                            involutivity_defect(p, &scenario.q0).map_err(load_error)?;
                        let class = if defect <= 1e-6 {
                            format!("integrable (defect {} <= 1e-6)", fmt_f64(defect))
                        } else {
                            format!("nonholonomic (defect = {})", fmt_f64(defect))
                        };
                        writeln!(report, "  involutivity: {class}").ok();
                    } else {
                        writeln!(report, "  involutivity: skipped (inhomogeneous system)").ok();
                    }
                }
                let r = block.set.residual(&scenario.q0, &scenario.v0).amax();
                writeln!(report, "  admission residual at t = 0: {}", fmt_f64(r)).ok();
            }
            scenario.validate().map_err(load_error)?;
            writeln!(report, "initial state: admissible").ok();
        }
        Loaded::Affine {
            name,
            model,
            variant,
            state0,
            config,
            t_end,
            ..
        } => {
            writeln!(
                report,
                "scenario: {name} (affine body, n = {}, variant = {})",
                model.spatial_dim,
                variant.name()
            )
            .ok();
            writeln!(
                report,
                "integrator: h = {}, t_end = {t_end}, method = {}, projection = {}",
                config.step,
                method_name(config.method),
                config.projection
            )
            .ok();
            writeln!(
                report,
                "reaction space dimension: {}",
                variant.reaction_dim(model.spatial_dim)
            )
            .ok();
            model.validate().map_err(load_error)?;
            check_variant_admission(model, state0, *variant, config.admission_tolerance)
                .map_err(|e| match e {
                    liaison_core::Error::Admission(m) => {
                        CliError::Admission(format!("admission failure: {m}"))
                    }
                    other => load_error(other),
                })?;
            writeln!(report, "initial state: admissible").ok();
        }
    }
    Ok(())
}

/// Used by the golden-file test harness: run and return the summary
/// metrics without touching the filesystem.
pub fn run_metrics(file: &Path) -> Result<liaison_core::solver::Summary<f64>, CliError> {
    let loaded = read_scenario(file)?;
    match &loaded {
        Loaded::Generic { scenario, .. } => {
            scenario.validate().map_err(load_error)?;
            let record = simulate(scenario).map_err(run_error)?;
            Ok(record.summary())
        }
        Loaded::Affine {
            model,
            variant,
            state0,
            config,
            t_end,
            output,
            ..
        } => {
            let record = simulate_affine(model, *variant, state0, config, *t_end, output.stride)
                .map_err(run_error)?;
            Ok(record.summary(model))
        }
    }
}

/// Re-export for integration tests that need block construction.
pub fn _block_for_tests(set: ConstraintSet<f64>, model: ReactionModel) -> ConstraintBlock<f64> {
    ConstraintBlock::new(set, model)
}
