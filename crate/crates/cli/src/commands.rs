use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use log::info;
use serde_json::json;

use so3pdf::bench::{time_inference, write_timings, write_timings_csv};
use so3pdf::infer::{
    default_link_radius, evaluate_distribution, extract_modes_or_whole, refine_pose, AscentConfig,
    PoseDistribution,
};
use so3pdf::metrics::{log_likelihood_exact, record_metrics, summarize, write_record_csv, EvalRecord};
use so3pdf::model::checkpoint::{load_checkpoint, save_checkpoint, CheckpointMeta};
use so3pdf::model::ImplicitDensityModel;
use so3pdf::so3grid::{generate_grid, read_rotation_file, write_rotation_file, EquivolumetricGrid, NON_GRID_LEVEL};
use so3pdf::symsol::{
    full_ground_truth, generate_dataset_with_dim, orbit, read_dataset, sampled_group, write_dataset,
    DatasetRecord, SymmetryKind, DEFAULT_ORBIT_SAMPLES,
};
use so3pdf::train::{train_with, write_loss_trace, RunConfig};
use so3pdf::viz::{render, CanonicalAxis, VizConfig};
use so3pdf::{Error, Rotation};

use crate::args::*;
use crate::UsageError;

pub fn run(command: Command) -> Result<()> {
    match command {
        Command::Grid(GridCommand::Gen(a)) => grid_gen(a),
        Command::Synth(a) => synth(a),
        Command::Orbit(a) => orbit_dump(a),
        Command::Train(a) => train(*a),
        Command::Eval(a) => eval(a),
        Command::Predict(a) => predict(a),
        Command::Viz(a) => viz(a),
        Command::Bench(a) => bench(a),
    }
}

fn grid_gen(a: GridGenArgs) -> Result<()> {
    let grid = generate_grid(a.level)?;
    grid.save(&a.out)?;
    info!("wrote {} rotations (level {}) to {}", grid.len(), a.level, a.out.display());
    Ok(())
}

fn synth(a: SynthArgs) -> Result<()> {
    let kind: SymmetryKind = a.kind.parse()?;
    if a.noise < 0.0 || a.dim == 0 {
        return Err(UsageError("--noise must be >= 0 and --dim > 0".into()).into());
    }
    let data = generate_dataset_with_dim(kind, a.n, a.noise, a.seed, a.dim);
    write_dataset(&a.out, &data)?;
    info!(
        "wrote {} {} records (noise {}, seed {}, dim {}) to {}",
        a.n,
        kind.name(),
        a.noise,
        a.seed,
        a.dim,
        a.out.display()
    );
    Ok(())
}

fn parse_quaternion(s: &str) -> Result<Rotation> {
    let parts: Vec<f64> = s
        .split(',')
        .map(|p| p.trim().parse::<f64>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|_| UsageError(format!("bad quaternion `{s}`")))?;
    let q: [f64; 4] = parts
        .try_into()
        .map_err(|_| UsageError(format!("quaternion needs 4 components, got `{s}`")))?;
    Ok(Rotation::try_from_quaternion(q)?)
}

fn orbit_dump(a: OrbitArgs) -> Result<()> {
    let kind: SymmetryKind = a.kind.parse()?;
    let gt = parse_quaternion(&a.quaternion)?;
    let group = sampled_group(kind, a.samples)?;
    let rotations = orbit(&gt, &group);
    write_rotation_file(&a.out, NON_GRID_LEVEL, &rotations)?;
    info!("wrote {} orbit rotations to {}", rotations.len(), a.out.display());
    Ok(())
}

fn check_descriptor_dims(data: &[DatasetRecord], dim: usize, path: &Path) -> Result<()> {
    if let Some((i, r)) = data.iter().enumerate().find(|(_, r)| r.descriptor.len() != dim) {
        return Err(Error::Format {
            path: path.to_path_buf(),
            msg: format!("record {i} has {} descriptor values, model expects {dim}", r.descriptor.len()),
        }
        .into());
    }
    Ok(())
}

fn sibling(path: &Path, ext: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(ext);
    PathBuf::from(s)
}

fn train(a: TrainArgs) -> Result<()> {
    let mut cfg = RunConfig::default();
    for (k, v) in a.overrides() {
        cfg.set(k, v)?;
    }
    cfg.validate()?;
    let data = read_dataset(&a.data)?;
    if data.is_empty() {
        return Err(Error::Format {
            path: a.data.clone(),
            msg: "dataset is empty".into(),
        }
        .into());
    }
    check_descriptor_dims(&data, cfg.model.descriptor_dim, &a.data)?;
    let echo = cfg.to_key_values();
    info!("training on {} records with {:?}", data.len(), echo);
    let mut model = ImplicitDensityModel::new(cfg.model.clone())?;
    let every = a.log_every.max(1);
    let trace = train_with(&mut model, &data, &cfg.train, |row| {
        if row.step % every == 0 || row.step + 1 == cfg.train.total_steps {
            info!("step {} lr {:.3e} loss {:.5}", row.step, row.lr, row.loss);
        }
    })?;
    let mut meta = CheckpointMeta::for_model(&model, cfg.train.total_steps as u64);
    meta.extra = json!({ "config": echo, "data": a.data.display().to_string() });
    save_checkpoint(&a.out, &model, &meta)?;
    let trace_path = a.trace.unwrap_or_else(|| sibling(&a.out, ".loss.csv"));
    write_loss_trace(&trace_path, &trace)?;
    info!("wrote {} and {}", a.out.display(), trace_path.display());
    Ok(())
}

fn load_model(path: &Path) -> Result<(ImplicitDensityModel, CheckpointMeta)> {
    load_checkpoint(path).with_context(|| format!("loading checkpoint {}", path.display()))
}

fn eval(a: EvalArgs) -> Result<()> {
    if a.topk == Some(0) {
        return Err(UsageError("--topk must be >= 1".into()).into());
    }
    let (model, meta) = load_model(&a.ckpt)?;
    let mut data = read_dataset(&a.data)?;
    if let Some(n) = a.limit {
        data.truncate(n);
    }
    check_descriptor_dims(&data, meta.descriptor_dim, &a.data)?;
    let grid = generate_grid(a.grid_level)?;
    let link = a.link_radius.unwrap_or_else(|| default_link_radius(&grid));
    let ascent = AscentConfig {
        steps: a.ascent_steps,
        step_size: a.step_size,
        ..AscentConfig::default()
    };
    let k_max = a.topk.unwrap_or(0);
    let mut rows = Vec::with_capacity(data.len());
    for (i, rec) in data.iter().enumerate() {
        let dist = evaluate_distribution(&model, &rec.descriptor, &grid)?;
        let start = grid.rotations()[dist.argmax()];
        let prediction = if ascent.steps == 0 {
            start
        } else {
            *refine_pose(&model, &rec.descriptor, start, &ascent)?.0.last().unwrap()
        };
        let modes = extract_modes_or_whole(&dist, &grid, a.floor, link)?;
        let record = EvalRecord {
            distribution: dist,
            gt_annotated: rec.gt_rotation,
            gt_full: full_ground_truth(rec, DEFAULT_ORBIT_SAMPLES),
        };
        let mut row = record_metrics(&record, &grid, &prediction, &modes, k_max);
        if a.ll_mode == LlMode::Exact {
            row.log_likelihood = log_likelihood_exact(&model, &rec.descriptor, &grid, &rec.gt_rotation)?;
            row.floored = false;
        }
        rows.push(row);
        if (i + 1) % 100 == 0 {
            info!("scored {}/{}", i + 1, data.len());
        }
    }
    let mut config: BTreeMap<String, String> = BTreeMap::new();
    let mut put = |k: &str, v: String| {
        config.insert(k.to_string(), v);
    };
    put("ckpt", a.ckpt.display().to_string());
    put("data", a.data.display().to_string());
    put("records", data.len().to_string());
    put("grid_level", a.grid_level.to_string());
    put("ascent_steps", a.ascent_steps.to_string());
    put("step_size", a.step_size.to_string());
    put("floor", a.floor.to_string());
    put("link_radius", link.to_string());
    put("ll_mode", format!("{:?}", a.ll_mode).to_lowercase());
    put("topk", k_max.to_string());
    put("topk_threshold", a.topk_threshold.to_string());
    put("model", serde_json::to_string(&meta)?);
    let report = summarize(&rows, a.topk_threshold, config);
    report.write_json(&a.report)?;
    let csv = a.errors_csv.unwrap_or_else(|| a.report.with_extension("csv"));
    let lls: Vec<f64> = rows.iter().map(|r| r.log_likelihood).collect();
    let errs: Vec<f64> = rows.iter().map(|r| r.error.to_degrees()).collect();
    write_record_csv(&csv, &lls, &errs)?;
    info!(
        "avg_log_likelihood {:.4}, median error {:.2} deg, spread {}",
        report.avg_log_likelihood,
        report.median_error_deg,
        report.spread_deg.map_or("n/a".into(), |s| format!("{s:.2} deg"))
    );
    Ok(())
}

fn read_descriptor(path: &Path) -> Result<Vec<f64>> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let value: serde_json::Value = serde_json::from_str(text.lines().find(|l| !l.trim().is_empty()).unwrap_or(""))
        .map_err(|e| Error::Format {
            path: path.to_path_buf(),
            msg: e.to_string(),
        })?;
    let arr = match &value {
        serde_json::Value::Object(o) => o.get("d"),
        v => Some(v),
    };
    arr.and_then(|v| v.as_array())
        .and_then(|a| a.iter().map(|x| x.as_f64()).collect::<Option<Vec<f64>>>())
        .ok_or_else(|| {
            Error::Format {
                path: path.to_path_buf(),
                msg: "expected a JSON array of numbers or an object with `d`".into(),
            }
            .into()
        })
}

fn predict(a: PredictArgs) -> Result<()> {
    let (model, meta) = load_model(&a.ckpt)?;
    let d = read_descriptor(&a.descriptor)?;
    if d.len() != meta.descriptor_dim {
        return Err(Error::Format {
            path: a.descriptor.clone(),
            msg: format!("{} values, model expects {}", d.len(), meta.descriptor_dim),
        }
        .into());
    }
    let grid = generate_grid(a.grid_level)?;
    let dist = evaluate_distribution(&model, &d, &grid)?;
    let start = grid.rotations()[dist.argmax()];
    let ascent = AscentConfig {
        steps: a.ascent_steps,
        step_size: a.step_size,
        ..AscentConfig::default()
    };
    let pose = if ascent.steps == 0 {
        start
    } else {
        *refine_pose(&model, &d, start, &ascent)?.0.last().unwrap()
    };
    let link = a.link_radius.unwrap_or_else(|| default_link_radius(&grid));
    let modes = extract_modes_or_whole(&dist, &grid, a.floor, link)?;
    let stdout = std::io::stdout();
    let mut out = stdout.lock();
    serde_json::to_writer(&mut out, &json!({ "pose": pose.quaternion() }))?;
    out.write_all(b"\n")?;
    modes.write_json_lines(&mut out)?;
    out.flush()?;
    if let Some(p) = &a.dist_out {
        dist.save(p)?;
        info!("wrote distribution to {}", p.display());
    }
    Ok(())
}

fn load_grid(path: &Path) -> Result<EquivolumetricGrid> {
    Ok(EquivolumetricGrid::load(path)?)
}

fn viz(a: VizArgs) -> Result<()> {
    let axis: CanonicalAxis = a.axis.parse()?;
    let dist = PoseDistribution::load(&a.dist)?;
    let grid = load_grid(&a.grid)?;
    if dist.len() != grid.len() {
        return Err(Error::Format {
            path: a.dist.clone(),
            msg: format!("{} cells, grid {} has {}", dist.len(), a.grid.display(), grid.len()),
        }
        .into());
    }
    let ground_truth = match &a.gt {
        Some(p) => Some(read_rotation_file(p)?.1),
        None => None,
    };
    let config = VizConfig {
        canonical_axis: axis,
        size_scale: a.size_scale,
        density_floor: a.floor,
        width: a.width,
        ground_truth,
    };
    render(&dist, &grid, &config, &a.out)?;
    info!("wrote {}", a.out.display());
    Ok(())
}

fn bench(a: BenchArgs) -> Result<()> {
    let (model, meta) = load_model(&a.ckpt)?;
    let descriptor = vec![0.0; meta.descriptor_dim];
    let mut rows = Vec::new();
    for &level in &a.levels {
        let (t, _) = time_inference(&model, &descriptor, level, a.reps)?;
        info!(
            "level {} ({} cells): {:.4} s median, {:.2} fps",
            level, t.cells, t.median_seconds, t.frames_per_second
        );
        rows.push(t);
    }
    match &a.csv {
        Some(p) => write_timings_csv(p, &rows)?,
        None => write_timings(std::io::stdout().lock(), &rows)?,
    }
    Ok(())
}
