use anyhow::{bail, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use nestnet::output::write_json;
use nestnet::verify::{gradcheck_case, orthogonality_audit, random_plan, GradcheckCase, OrthogonalityAudit};
use nestnet::{gen_spiral, NestedNetwork, NestingMode, OptimizerConfig, StagePlan, Strategy};

use crate::args::GradcheckArgs;
use crate::VerificationFailed;

const AUDIT_POINTS: usize = 600;
const AUDIT_BATCH: usize = 32;
const AUDIT_LR: f64 = 0.05;

#[derive(Debug, Serialize)]
struct FiniteDifference {
    eps: f64,
    threshold: f64,
    nets: usize,
    max_rel_error: f64,
    cases: Vec<GradcheckCase>,
}

#[derive(Debug, Serialize)]
struct Orthogonality {
    strategy: Strategy,
    plan: StagePlan,
    threshold: f64,
    audit: OrthogonalityAudit,
}

#[derive(Debug, Serialize)]
struct Report {
    seed: u64,
    finite_difference: FiniteDifference,
    orthogonality: Orthogonality,
    passed: bool,
}

pub fn run(a: GradcheckArgs) -> Result<()> {
    if a.nets == 0 || a.max_stages == 0 || a.stages == 0 {
        bail!("--nets, --max-stages and --stages must be at least 1");
    }
    if let Some(out) = &a.output {
        println!("report: {}", out.display());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(a.seed);
    let mut cases = Vec::new();
    for mode in NestingMode::ALL {
        for _ in 0..a.nets {
            let plan = random_plan(&mut rng, mode, a.max_stages);
            let net_seed: u64 = rng.random();
            cases.push(gradcheck_case(&plan, net_seed, a.eps, a.inject_wrong_sign)?);
        }
    }
    let max_rel_error = cases.iter().map(|c| c.max_rel_error).fold(0.0, f64::max);
    let fd_ok = max_rel_error <= a.fd_threshold;
    println!(
        "finite-difference: {} nets, max relative error {max_rel_error:.3e} (threshold {:.0e}) {}",
        cases.len(),
        a.fd_threshold,
        if fd_ok { "ok" } else { "FAILED" }
    );

    let plan = StagePlan::new(NestingMode::Width, a.stages, 4, 1, 3, 2);
    let mut net = NestedNetwork::build(&plan, a.seed)?;
    let data = gen_spiral(a.seed, AUDIT_POINTS, 3, 0.15)?;
    let mut config = OptimizerConfig::with_strategy(a.optimizer);
    config.priority = a.priority.clone();
    let audit = orthogonality_audit(&mut net, &data, &config, a.steps, AUDIT_BATCH, AUDIT_LR, a.seed)?;
    let projects = a.optimizer.projects();
    let orth_ok = !projects || (audit.max_cosine <= a.cos_threshold && audit.leader_unchanged);
    if audit.pairs == 0 {
        println!("orthogonality: no pairs ({} stage, {} steps)", a.stages, audit.steps);
    } else if projects {
        println!(
            "orthogonality: {} pairs over {} steps, max |cos| {:.3e} (threshold {:.0e}), leader {} {}",
            audit.pairs,
            audit.steps,
            audit.max_cosine,
            a.cos_threshold,
            if audit.leader_unchanged { "unchanged" } else { "modified" },
            if orth_ok { "ok" } else { "FAILED" }
        );
    } else {
        println!(
            "orthogonality: {} does not project; max |cos| {:.3e} over {} pairs",
            a.optimizer.name(),
            audit.max_cosine,
            audit.pairs
        );
    }

    let report = Report {
        seed: a.seed,
        finite_difference: FiniteDifference { eps: a.eps, threshold: a.fd_threshold, nets: cases.len(), max_rel_error, cases },
        orthogonality: Orthogonality { strategy: a.optimizer, plan, threshold: a.cos_threshold, audit },
        passed: fd_ok && orth_ok,
    };
    if let Some(out) = &a.output {
        write_json(out, &report)?;
    }
    if !fd_ok {
        return Err(VerificationFailed(format!("finite-difference error {max_rel_error:.3e}")).into());
    }
    if !orth_ok {
        return Err(VerificationFailed("post-projection gradients are not orthogonal".into()).into());
    }
    Ok(())
}
