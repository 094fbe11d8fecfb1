use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use anyhow::{anyhow, bail, Context, Result};
use log::info;

use boxrec::autodiff::{op_gradient_suite_with, FdReport, InjectedFault};
use boxrec::datasets::{chronological_split, filter_min_activity_with, load_log, read_bundle, write_bundle, LogFormat, DEFAULT_RATIOS};
use boxrec::encoder::load_checkpoint;
use boxrec::evaluation::{evaluate, point_baseline, score_all, ReportMeta};
use boxrec::export::{box_rows, format_boxes, format_items, item_rows, Pca};
use boxrec::geometry::{BoxMode, DistanceParams};
use boxrec::synthetic::{generate_box_world, WorldSpec};
use boxrec::training::{fit, loss_gradient_check, trace_line, TrainConfig};

use crate::{Command, Dims, EvaluateArgs, ExportArgs, ExportWhat, GradCheckArgs, PrepareArgs, RecommendArgs, SynthArgs, TrainArgs};

/// Raised when a gradient check finds a mismatch.
#[derive(Debug)]
struct GradCheckFailed(String);

impl std::fmt::Display for GradCheckFailed {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "gradient check failed: {}", self.0)
    }
}

impl std::error::Error for GradCheckFailed {}

/// 1 usage, 2 data, 3 numeric fault.
pub fn exit_code(err: &anyhow::Error) -> u8 {
    if err.chain().any(|e| e.is::<GradCheckFailed>()) {
        return 3;
    }
    match err.chain().find_map(|e| e.downcast_ref::<boxrec::Error>()) {
        Some(e) if e.is_numeric() => 3,
        Some(boxrec::Error::InvalidArgument(_)) => 1,
        _ => 2,
    }
}

pub fn run(command: Command) -> Result<()> {
    match command {
        Command::Prepare(a) => prepare(a),
        Command::Train(a) => train(a),
        Command::Evaluate(a) => evaluate_cmd(a),
        Command::Recommend(a) => recommend(a),
        Command::Export(a) => export(a),
        Command::GradCheck(a) => grad_check(a),
        Command::Synth(a) => synth(a),
    }
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn prepare(a: PrepareArgs) -> Result<()> {
    let format = match &a.format {
        Some(f) => f.parse::<LogFormat>()?,
        None => LogFormat::from_path(&a.input),
    };
    let mut resolved = String::new();
    writeln!(resolved, "input={}", a.input.display())?;
    writeln!(resolved, "format={format:?}")?;
    match a.rating_threshold {
        Some(t) => writeln!(resolved, "rating_threshold={t}")?,
        None => writeln!(resolved, "rating_threshold=none")?,
    }
    writeln!(resolved, "min_user_activity={}", a.min_user_activity)?;
    writeln!(resolved, "min_item_activity={}", a.min_item_activity)?;
    info!("prepare:\n{resolved}");

    let log = load_log(&a.input, format, a.rating_threshold)?;
    let filtered = filter_min_activity_with(log, a.min_user_activity, a.min_item_activity)?;
    let (split, report) = chronological_split(&filtered, DEFAULT_RATIOS)?;
    if report.excluded_users > 0 {
        info!("{} users with fewer than 3 interactions left out", report.excluded_users);
    }
    write_bundle(&a.out, &split)?;
    write_file(&a.out.join("prepare.txt"), &resolved)?;
    print!("{}", split.stats());
    Ok(())
}

fn train(a: TrainArgs) -> Result<()> {
    let mut config = TrainConfig::default();
    if let Some(path) = &a.config {
        let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        config
            .apply_kv_text(&text)
            .with_context(|| format!("in {}", path.display()))?;
    }
    let flags = [
        ("mode", &a.mode),
        ("boxes", &a.boxes),
        ("gamma", &a.gamma),
        ("epochs", &a.epochs),
        ("seed", &a.seed),
        ("ablation", &a.ablation),
        ("pooling", &a.pooling),
    ];
    for (key, value) in flags {
        if let Some(v) = value {
            config.set(key, v)?;
        }
    }
    for kv in &a.overrides {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| boxrec::Error::InvalidArgument(format!("expected key=value, got `{kv}`")))?;
        config.set(k.trim(), v.trim())?;
    }
    config.validate()?;
    info!("resolved config:\n{}", config.to_kv());

    let split = read_bundle(&a.data)?;
    let outcome = fit(&split, &config, Some(&a.out))?;
    for s in &outcome.trace {
        println!("{}", trace_line(s));
    }
    info!("wrote {}", a.out.join("model.ckpt").display());
    Ok(())
}

fn dataset_name(path: &Path) -> String {
    path.file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| path.display().to_string())
}

fn evaluate_cmd(a: EvaluateArgs) -> Result<()> {
    let model = load_checkpoint(&a.checkpoint)?;
    let split = read_bundle(&a.data)?;
    let mut meta = ReportMeta::for_model(&dataset_name(&a.data), &model, a.seed);
    info!(
        "evaluate: checkpoint={} data={} ks={:?} point_baseline={}",
        a.checkpoint.display(),
        a.data.display(),
        a.ks,
        a.point_baseline
    );
    let report = if a.point_baseline {
        meta.mode = "point".into();
        evaluate(&point_baseline(&model), &split, &a.ks, meta)?
    } else {
        evaluate(&model, &split, &a.ks, meta)?
    };
    print!("{}", report.table());
    if let Some(path) = &a.json {
        write_file(path, &report.to_json())?;
    }
    Ok(())
}

fn recommend(a: RecommendArgs) -> Result<()> {
    let model = load_checkpoint(&a.checkpoint)?;
    let split = read_bundle(&a.data)?;
    let user = split
        .users
        .internal(&a.user)
        .ok_or_else(|| boxrec::Error::Data(format!("unknown user id `{}`", a.user)))?;
    if a.k == 0 {
        bail!(boxrec::Error::InvalidArgument("k must be positive".into()));
    }
    for (item, d) in score_all(&model, &split, user)?.into_iter().take(a.k) {
        let id = split.items.external(item).ok_or_else(|| anyhow!("item {item} missing from vocabulary"))?;
        println!("{id}\t{d:.6}");
    }
    Ok(())
}

fn export(a: ExportArgs) -> Result<()> {
    let model = load_checkpoint(&a.checkpoint)?;
    let items = item_rows(&model);
    let pca = match a.pca {
        Some(dims) => {
            let rows: Vec<Vec<f64>> = items.iter().map(|(_, v)| v.clone()).collect();
            Some(Pca::fit(&rows, dims)?)
        }
        None => None,
    };
    let text = match a.what {
        ExportWhat::Items => {
            let names = match &a.data {
                Some(dir) => Some(read_bundle(dir)?),
                None => None,
            };
            let rows: Vec<(String, Vec<f64>)> = items
                .into_iter()
                .map(|(i, v)| {
                    let id = names
                        .as_ref()
                        .and_then(|s| s.items.external(i))
                        .map_or_else(|| i.to_string(), str::to_string);
                    (id, v)
                })
                .collect();
            format_items(&rows, pca.as_ref())
        }
        ExportWhat::Boxes => {
            let dir = a
                .data
                .as_ref()
                .ok_or_else(|| boxrec::Error::InvalidArgument("--what boxes needs --data".into()))?;
            let split = read_bundle(dir)?;
            format_boxes(&box_rows(&model, &split)?, pca.as_ref())
        }
    };
    match &a.out {
        Some(path) => write_file(path, &text),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn summary(name: &str, r: &FdReport) -> String {
    format!(
        "{name}: checked {} skipped {} failed {} max_rel {:.2e}",
        r.checked(),
        r.skipped(),
        r.failed(),
        r.max_rel_error()
    )
}

fn grad_check(a: GradCheckArgs) -> Result<()> {
    let Dims::Toy = a.dims;
    let fault = a.inject_fault.then_some(InjectedFault::TanhBackwardSign);
    let mut failures = Vec::new();
    for (name, report) in op_gradient_suite_with(a.seed, a.step, a.tolerance, fault)? {
        println!("{}", summary(name, &report));
        if !report.passed() {
            failures.push(format!("{name} (params {:?})", report.failed_params()));
        }
    }
    if !a.inject_fault {
        for (mode, boxes) in [(BoxMode::Single, 1), (BoxMode::Concentric, 2), (BoxMode::Independent, 2)] {
            for gamma in [0.0, 0.5] {
                for additional in [false, true] {
                    let distance = DistanceParams::new(gamma, 200.0, additional)?;
                    let report = loss_gradient_check(mode, boxes, distance, a.seed, a.step, a.tolerance)?;
                    let name = format!("loss[{mode} M={boxes} gamma={gamma} additional={additional}]");
                    println!("{}", summary(&name, &report));
                    if !report.passed() {
                        failures.push(format!("{name} (params {:?})", report.failed_params()));
                    }
                }
            }
        }
    }
    if failures.is_empty() {
        println!("all gradient checks passed");
        Ok(())
    } else {
        Err(GradCheckFailed(failures.join(", ")).into())
    }
}

fn synth(a: SynthArgs) -> Result<()> {
    let mut spec = WorldSpec::new(a.users, a.items, a.d0, a.boxes_per_user, a.noise, a.seed);
    if let Some(p) = a.switch_prob {
        spec.switch_prob = p;
    }
    let mut resolved = String::new();
    writeln!(resolved, "users={}", spec.n_users)?;
    writeln!(resolved, "items={}", spec.n_items)?;
    writeln!(resolved, "d0={}", spec.d0)?;
    writeln!(resolved, "boxes_per_user={}", spec.boxes_per_user)?;
    writeln!(resolved, "noise={}", spec.noise)?;
    writeln!(resolved, "seed={}", spec.seed)?;
    writeln!(resolved, "center_range={}", spec.center_range)?;
    writeln!(resolved, "offset_range={},{}", spec.offset_range.0, spec.offset_range.1)?;
    writeln!(resolved, "min_positives={}", spec.min_positives)?;
    writeln!(resolved, "switch_prob={}", spec.switch_prob)?;
    info!("synth:\n{resolved}");
    let world = generate_box_world(&spec)?;
    world.write(&a.out)?;
    write_file(&a.out.join("synth.txt"), &resolved)?;
    print!("{}", world.split()?.stats());
    Ok(())
}
