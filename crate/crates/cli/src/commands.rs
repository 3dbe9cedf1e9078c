use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use serde::Serialize;

use nestnet::output::{write_atomic, write_json};
use nestnet::runtime::{curves_csv, oracle_curve, AnytimePredictions, CurvePoint, SweepInputs};
use nestnet::train::{train_seed, Summary};
use nestnet::{
    sweep as run_sweep, tradeoff_curve, Checkpoint, CsvSchema, DataConfig, Dataset, DeadlineSweep,
    Independent, NestedNetwork, OptimizerConfig, StagePlan, Strategy, TrainConfig,
};

use crate::args::{CurvesArgs, EvalArgs, InspectArgs, Overrides, SweepArgs, TrainArgs};

pub fn resolve_config(path: Option<&Path>, o: &Overrides) -> Result<TrainConfig> {
    let mut c = match path {
        Some(p) => TrainConfig::load(p)?,
        None => TrainConfig::default(),
    };
    if let Some(v) = o.plan {
        c.plan.mode = v;
    }
    if let Some(v) = o.stages {
        c.plan.num_stages = v;
    }
    if let Some(v) = o.width {
        c.plan.base_width = v;
    }
    if let Some(v) = o.depth {
        c.plan.base_depth = v;
    }
    if let Some(v) = o.optimizer {
        c.optimizer.strategy = v;
    }
    if let Some(v) = &o.priority {
        c.optimizer.priority = Some(v.clone());
    }
    if let Some(v) = o.combine {
        c.optimizer.combine = Some(v);
    }
    if let Some(v) = o.norm_constant {
        c.optimizer.norm_constant = v;
    }
    if let Some(v) = &o.loss_weights {
        c.optimizer.loss_weights = v.clone();
    }
    if let Some(v) = o.momentum {
        c.optimizer.momentum = v;
    }
    if let Some(v) = o.epochs {
        c.epochs = v;
    }
    if let Some(v) = o.batch_size {
        c.batch_size = v;
    }
    if let Some(v) = o.lr_start {
        c.schedule.start = v;
    }
    if let Some(v) = o.lr_end {
        c.schedule.end = v;
    }
    if let Some(v) = o.lr_decay {
        c.schedule.decay = v;
    }
    if let Some(v) = &o.seeds {
        c.seeds = v.clone();
    }
    if let (Some(train), Some(val)) = (&o.train_csv, &o.val_csv) {
        c.data = DataConfig::Csv { train: train.clone(), val: val.clone(), schema: CsvSchema::default() };
    }
    if let Some(v) = o.classes {
        c.plan.num_classes = v;
    }
    let spiral_only = o.data_seed.is_some()
        || o.train_points.is_some()
        || o.val_points.is_some()
        || o.noise.is_some()
        || o.turns.is_some()
        || o.radius.is_some();
    match &mut c.data {
        DataConfig::Spiral { seed, train, val, classes, noise, turns, radius } => {
            *seed = o.data_seed.unwrap_or(*seed);
            *train = o.train_points.unwrap_or(*train);
            *val = o.val_points.unwrap_or(*val);
            *classes = o.classes.unwrap_or(*classes);
            *noise = o.noise.unwrap_or(*noise);
            *turns = o.turns.unwrap_or(*turns);
            *radius = o.radius.unwrap_or(*radius);
        }
        DataConfig::Csv { schema, .. } => {
            if o.classes.is_some() {
                schema.num_classes = o.classes;
            }
        }
        DataConfig::Idx { .. } => {}
    }
    if spiral_only && !matches!(c.data, DataConfig::Spiral { .. }) {
        bail!("spiral data flags given but the data source is not a spiral");
    }
    c.validate()?;
    Ok(c)
}

fn run_dir(root: &Path, name: Option<&str>, strategy: Strategy) -> PathBuf {
    if let Some(name) = name {
        return root.join(name);
    }
    let stamp = chrono::Local::now().format("%Y%m%d-%H%M%S");
    let base = format!("{stamp}-{}", strategy.name());
    let mut dir = root.join(&base);
    let mut i = 2;
    while dir.exists() {
        dir = root.join(format!("{base}-{i}"));
        i += 1;
    }
    dir
}

pub fn train(a: TrainArgs) -> Result<()> {
    let config = resolve_config(a.config.as_deref(), &a.overrides)?;
    let (train_set, val_set) = config.data.load()?;
    let dir = run_dir(&a.out, a.run_name.as_deref(), config.optimizer.strategy);
    let config_path = dir.join("config.toml");
    let summary_path = dir.join("summary.json");
    println!("run directory: {}", dir.display());
    println!("config: {}", config_path.display());
    println!("summary: {}", summary_path.display());
    for seed in &config.seeds {
        println!("history: {}", dir.join(format!("history_seed{seed}.csv")).display());
        println!("checkpoint: {}", dir.join(format!("checkpoint_seed{seed}.json")).display());
    }
    if a.independents {
        println!("independents: {}", dir.join("independents").display());
    }

    write_atomic(&config_path, config.to_toml()?.as_bytes())?;
    let report = match nestnet::train(&config, a.parallel) {
        Ok(r) => r,
        Err(failure) => {
            for h in &failure.partial {
                h.write_csv(&dir.join(format!("history_seed{}.csv", h.seed)))?;
            }
            return Err(failure.into());
        }
    };
    for run in &report.runs {
        let seed = run.history.seed;
        run.history.write_csv(&dir.join(format!("history_seed{seed}.csv")))?;
        Checkpoint::from_run(run, &config).save(&dir.join(format!("checkpoint_seed{seed}.json")))?;
    }
    report.summary.write_json(&summary_path)?;
    print_summary(&report.summary);

    if a.independents {
        let seed = config.seeds[0];
        for stage in 1..=config.plan.num_stages {
            let mut ind = config.clone();
            ind.plan = config.plan.standalone_plan(stage);
            ind.optimizer = OptimizerConfig::with_strategy(Strategy::Sgd);
            ind.seeds = vec![seed];
            let run = train_seed(&ind, &train_set, &val_set, seed)?;
            let path = dir.join("independents").join(format!("stage{stage}.json"));
            Checkpoint::from_run(&run, &ind).save(&path)?;
            println!("independent stage {stage}: val error {:.4}", run.history.final_val_error[0]);
        }
    }
    Ok(())
}

fn print_summary(s: &Summary) {
    for st in &s.stages {
        let std = st.std_error.map_or_else(String::new, |v| format!(" ± {v:.4}"));
        println!("stage {}: {} MACs, val error {:.4}{std}", st.stage, st.macs, st.mean_error);
    }
}

/// Checkpoint, its network and the validation split it was trained against.
struct Loaded {
    ckpt: Checkpoint,
    net: NestedNetwork,
    val: Dataset,
}

fn load_checkpoint(path: &Path) -> Result<Loaded> {
    let ckpt = Checkpoint::load(path)?;
    let net = ckpt.network()?;
    let config = ckpt
        .config
        .as_ref()
        .ok_or_else(|| anyhow!("{}: checkpoint records no data source", path.display()))?;
    let (_, val) = config.data.load()?;
    if val.input_dim() != net.plan().input_dim {
        bail!("{}: data has {} features, network expects {}", path.display(), val.input_dim(), net.plan().input_dim);
    }
    Ok(Loaded { ckpt, net, val })
}

#[derive(Debug, Serialize)]
struct EvalStage {
    stage: usize,
    cumulative_macs: u64,
    flops: u64,
    error: f64,
}

#[derive(Debug, Serialize)]
struct EvalReport {
    plan: StagePlan,
    seed: u64,
    examples: usize,
    stages: Vec<EvalStage>,
}

pub fn eval(a: EvalArgs) -> Result<()> {
    if let Some(out) = &a.output {
        eprintln!("report: {}", out.display());
    }
    let Loaded { ckpt, net, val } = load_checkpoint(&a.checkpoint)?;
    let errors = nestnet::evaluate(&net, &val)?;
    let stages = errors
        .iter()
        .enumerate()
        .map(|(i, &error)| {
            let stage = i + 1;
            Ok(EvalStage { stage, cumulative_macs: net.cumulative_macs(stage)?, flops: net.flops(stage)?, error })
        })
        .collect::<Result<_>>()?;
    let report = EvalReport { plan: ckpt.plan.clone(), seed: ckpt.rng.seed, examples: val.len(), stages };
    print!("{}", String::from_utf8(nestnet::output::to_json(&report)?)?);
    if let Some(out) = &a.output {
        write_json(out, &report)?;
    }
    Ok(())
}

/// Single-stage checkpoints named `stage<N>.json`, in stage order.
fn load_independents(dir: &Path, val: &Dataset) -> Result<Vec<Independent>> {
    let mut found = Vec::new();
    for entry in fs::read_dir(dir).with_context(|| format!("reading {}", dir.display()))? {
        let path = entry?.path();
        let stage = path
            .file_name()
            .and_then(|n| n.to_str())
            .and_then(|n| n.strip_prefix("stage")?.strip_suffix(".json")?.parse::<usize>().ok());
        if let Some(stage) = stage {
            found.push((stage, path));
        }
    }
    if found.is_empty() {
        bail!("{}: no stage<N>.json checkpoints", dir.display());
    }
    found.sort();
    found
        .into_iter()
        .map(|(_, path)| {
            let net = Checkpoint::load(&path)?.network()?;
            if net.plan().input_dim != val.input_dim() {
                bail!("{}: input size does not match the data", path.display());
            }
            Ok(Independent::from_net(&net, val)?)
        })
        .collect()
}

fn load_baseline(path: Option<&Path>, nested: &NestedNetwork, val: &Dataset) -> Result<AnytimePredictions> {
    match path {
        Some(p) => {
            let net = Checkpoint::load(p)?.network()?;
            if net.plan().input_dim != val.input_dim() {
                bail!("{}: input size does not match the data", p.display());
            }
            Ok(AnytimePredictions::from_net(&net, val)?)
        }
        None => Ok(AnytimePredictions::final_only(nested, val)?),
    }
}

fn out_dir(out: Option<&Path>, checkpoint: &Path) -> PathBuf {
    out.map(Path::to_path_buf)
        .unwrap_or_else(|| checkpoint.parent().map(Path::to_path_buf).unwrap_or_default())
}

pub fn sweep(a: SweepArgs) -> Result<()> {
    let Loaded { ckpt, net, val } = load_checkpoint(&a.checkpoint)?;
    let dir = out_dir(a.out.as_deref(), &a.checkpoint);
    let csv_path = dir.join(format!("sweep_seed{}.csv", ckpt.rng.seed));
    let json_path = dir.join(format!("sweep_seed{}.json", ckpt.rng.seed));
    println!("sweep: {}", csv_path.display());
    println!("sweep: {}", json_path.display());

    let nested = AnytimePredictions::from_net(&net, &val)?;
    let baseline = load_baseline(a.baseline.as_deref(), &net, &val)?;
    let independents = a.independents.as_deref().map(|d| load_independents(d, &val)).transpose()?;
    let deadlines = match a.budgets {
        Some(mut b) => {
            b.sort_by(f64::total_cmp);
            DeadlineSweep::new(b)?
        }
        None => DeadlineSweep::default_for(nested.costs.total()),
    };
    let inputs = SweepInputs {
        nested: &nested,
        baseline: Some(&baseline),
        independents: independents.as_deref(),
        labels: val.labels(),
        num_classes: net.plan().num_classes,
    };
    let report = run_sweep(inputs, &deadlines, a.seed)?;
    report.write(&csv_path, &json_path)?;
    for r in &report.rows {
        let d = r.deadline_macs.map_or_else(|| "inf".to_string(), |d| format!("{d:.0}"));
        println!("{:<17} deadline {:>12}  error {:.4}", r.scheme.name(), d, r.error);
    }
    Ok(())
}

#[derive(Debug, Serialize)]
struct Curve<'a> {
    series: &'a str,
    points: &'a [CurvePoint],
}

pub fn curves(a: CurvesArgs) -> Result<()> {
    let Loaded { ckpt, net, val } = load_checkpoint(&a.checkpoint)?;
    let dir = out_dir(a.out.as_deref(), &a.checkpoint);
    let csv_path = dir.join(format!("curves_seed{}.csv", ckpt.rng.seed));
    let json_path = dir.join(format!("curves_seed{}.json", ckpt.rng.seed));
    println!("curves: {}", csv_path.display());
    println!("curves: {}", json_path.display());

    let labels = val.labels();
    let nested = tradeoff_curve(&AnytimePredictions::from_net(&net, &val)?, labels);
    let baseline = match &a.baseline {
        Some(p) => Some(tradeoff_curve(&load_baseline(Some(p), &net, &val)?, labels)),
        None => None,
    };
    let independent = match &a.independents {
        Some(d) => Some(oracle_curve(&load_independents(d, &val)?, labels)),
        None => None,
    };
    let mut series: Vec<(&str, &[CurvePoint])> = vec![("nested", &nested)];
    if let Some(b) = &baseline {
        series.push(("baseline", b));
    }
    if let Some(i) = &independent {
        series.push(("independent", i));
    }
    write_atomic(&csv_path, &curves_csv(&series)?)?;
    let json: Vec<Curve> = series.iter().map(|&(series, points)| Curve { series, points }).collect();
    write_json(&json_path, &json)?;
    for (name, points) in &series {
        for p in *points {
            println!("{name:<12} stage {}  {:>10} MACs  error {:.4}", p.stage, p.macs, p.error);
        }
    }
    Ok(())
}

#[derive(Debug, Serialize)]
struct InspectStage {
    stage: usize,
    width: usize,
    depth: usize,
    layers: Vec<usize>,
    head_layer: usize,
    visible_params: usize,
    flops: u64,
    cumulative_macs: u64,
}

#[derive(Debug, Serialize)]
struct InspectReport {
    plan: StagePlan,
    params: usize,
    pruned_weights: usize,
    stages: Vec<InspectStage>,
}

pub fn inspect(a: InspectArgs) -> Result<()> {
    let net = match &a.checkpoint {
        Some(p) => Checkpoint::load(p)?.network()?,
        None => {
            let mut plan = StagePlan::default();
            plan.mode = a.plan.unwrap_or(plan.mode);
            plan.num_stages = a.stages.unwrap_or(plan.num_stages);
            plan.base_width = a.width.unwrap_or(plan.base_width);
            plan.base_depth = a.depth.unwrap_or(plan.base_depth);
            plan.num_classes = a.classes.unwrap_or(plan.num_classes);
            plan.input_dim = a.input_dim.unwrap_or(plan.input_dim);
            NestedNetwork::with_params(&plan, None)?
        }
    };
    let plan = net.plan().clone();
    let stages = (1..=plan.num_stages)
        .map(|s| {
            Ok(InspectStage {
                stage: s,
                width: plan.stage_width(s),
                depth: plan.stage_depth(s),
                layers: plan.stage_layers(s),
                head_layer: plan.head_layer(s),
                visible_params: net.stage_dim(s),
                flops: net.flops(s)?,
                cumulative_macs: net.cumulative_macs(s)?,
            })
        })
        .collect::<Result<_>>()?;
    let report = InspectReport { params: net.num_params(), pruned_weights: net.pruned_weight_count(), plan, stages };
    print!("{}", String::from_utf8(nestnet::output::to_json(&report)?)?);
    Ok(())
}
