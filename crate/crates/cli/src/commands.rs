//! Command implementations.

use std::fs;
use std::path::{Path, PathBuf};

use biscc::datamodel::{generate_synthetic, load_dataset, save_dataset, Dataset};
use biscc::localize::{
    co_scene_false_positive_rate, dataset_pseudo_precision, evaluate_map, ground_truth_of, localize_videos,
    read_detections, write_detections, write_map_report, MapReport,
};
use biscc::network::ModelParams;
use biscc::trainer::{
    evaluate_model, iterate, train_baseline_from, write_metrics, BranchState, IterateRun, MetricsRow, StepRecord,
};
use biscc::augment::CtgReduce;

use crate::config::{RunConfig, CONFIG_FILE};
use crate::error::{CliError, Result};
use crate::outdir::OutDir;
use crate::svg::{trace_chart, Series};

pub const DATASET_FILE: &str = "dataset.bscc";
pub const METRICS_FILE: &str = "metrics.csv";
pub const ITERATIONS_FILE: &str = "iterations.csv";
pub const DETECTIONS_FILE: &str = "detections.csv";
pub const MAP_FILE: &str = "map.csv";
pub const SWEEP_FILE: &str = "sweep.csv";
pub const SUMMARY_FILE: &str = "summary.csv";

const LOG_EVERY: usize = 100;

/// Flags shared by every command.
#[derive(Clone, Debug)]
pub struct Common {
    pub config: Option<PathBuf>,
    pub seed: Option<u64>,
    pub out: PathBuf,
    pub force: bool,
}

impl Common {
    fn resolve(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        if let Some(seed) = self.seed {
            cfg.set_seed(seed);
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Attaches `path` to bare I/O failures.
fn at(path: &Path) -> impl Fn(biscc::Error) -> CliError + '_ {
    move |e| match e {
        biscc::Error::Io(source) => CliError::io(path, source),
        other => CliError::Core(other),
    }
}

fn checkpoint_name(branch: &str, role: &str) -> String {
    format!("{branch}.{role}.ckpt")
}

fn write_config(out: &mut OutDir, cfg: &RunConfig) -> Result<()> {
    let path = out.file(CONFIG_FILE);
    fs::write(&path, cfg.to_toml()).map_err(|e| CliError::io(path, e))
}

fn save_state(out: &mut OutDir, branch: &str, state: &BranchState) -> Result<()> {
    for (role, params) in [("student", &state.student), ("teacher", &state.teacher)] {
        let path = out.file(&checkpoint_name(branch, role));
        params.save(&path).map_err(at(&path))?;
    }
    Ok(())
}

fn copy_dataset(out: &mut OutDir, src: &Path) -> Result<()> {
    let dst = out.file(DATASET_FILE);
    fs::copy(src, &dst).map_err(|e| CliError::io(dst, e))?;
    Ok(())
}

/// Loads the dataset and makes the config describe it.
fn load_input_dataset(cfg: &mut RunConfig, path: &Path) -> Result<Dataset> {
    let d = load_dataset(path).map_err(at(path))?;
    cfg.data = d.spec.clone();
    cfg.inputs.dataset = Some(path.to_path_buf());
    Ok(d)
}

fn load_model(path: &Path, dataset: &Dataset) -> Result<ModelParams> {
    let m = ModelParams::load(path).map_err(at(path))?;
    if m.shape.feature_dim != dataset.feature_dim() || m.shape.num_classes != dataset.num_classes() {
        return Err(CliError::usage(format!(
            "checkpoint {} does not match the dataset ({} features, {} classes)",
            path.display(),
            dataset.feature_dim(),
            dataset.num_classes()
        )));
    }
    Ok(m)
}

fn log_step(iteration: usize, r: &StepRecord) {
    if r.step.is_multiple_of(LOG_EVERY) {
        log::info!("iteration {iteration} step {}: loss {:.4}", r.step, r.losses.total);
    }
}

pub fn gen_data(common: &Common) -> Result<()> {
    let cfg = common.resolve()?;
    let dataset = generate_synthetic(&cfg.data)?;
    let mut out = OutDir::prepare(&common.out, common.force)?;
    save_dataset(&dataset, out.file(DATASET_FILE))?;
    write_config(&mut out, &cfg)?;
    out.commit();
    println!(
        "wrote {} train and {} test videos to {}",
        dataset.train.len(),
        dataset.test.len(),
        common.out.display()
    );
    Ok(())
}

pub fn train_baseline(common: &Common, data: &Path) -> Result<()> {
    let mut cfg = common.resolve()?;
    let dataset = load_input_dataset(&mut cfg, data)?;
    let mut out = OutDir::prepare(&common.out, common.force)?;
    write_config(&mut out, &cfg)?;
    copy_dataset(&mut out, data)?;
    let init = BranchState::init(
        biscc::network::ModelShape::new(dataset.feature_dim(), dataset.num_classes()),
        cfg.train.seed,
    );
    let run = train_baseline_from(&dataset, &cfg.train, init, cfg.train.steps_per_iteration, |r| log_step(1, r))?;
    let q = dataset_pseudo_precision(&run.state.student, &dataset.train, cfg.train.gamma)?;
    let map = evaluate_model(&run.state.student, &dataset, &cfg.localize)?;
    let last = run.history.len().saturating_sub(1);
    let rows: Vec<MetricsRow> = run
        .history
        .iter()
        .enumerate()
        .map(|(i, r)| MetricsRow {
            record: *r,
            q: (i == last).then_some(q),
            map50: (i == last).then(|| map.at(0.5).unwrap_or(0.0)),
        })
        .collect();
    write_metrics(out.file(METRICS_FILE), &rows)?;
    save_state(&mut out, "baseline", &run.state)?;
    out.commit();
    println!("baseline: q={q:.4} test mAP avg={:.4}", map.average);
    Ok(())
}

fn iterate_rows(run: &IterateRun, steps: usize) -> Vec<MetricsRow> {
    run.history
        .iter()
        .enumerate()
        .map(|(i, r)| {
            let report = (steps > 0 && (i + 1) % steps == 0)
                .then(|| run.reports.get((i + 1) / steps - 1))
                .flatten();
            MetricsRow {
                record: *r,
                q: report.map(|x| x.q),
                map50: report.map(|x| x.map50),
            }
        })
        .collect()
}

fn write_iterations(path: &Path, run: &IterateRun) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(biscc::Error::from)?;
    let io = |e: csv::Error| CliError::Core(e.into());
    w.write_record(["iteration", "q", "map50", "map_avg"]).map_err(io)?;
    for r in &run.reports {
        w.write_record([
            r.iteration.to_string(),
            format!("{:.6}", r.q),
            format!("{:.6}", r.map50),
            format!("{:.6}", r.map_avg),
        ])
        .map_err(io)?;
    }
    w.flush().map_err(|e| CliError::io(path, e))
}

/// Runs every iteration and writes checkpoints and logs into `dir`.
fn run_training(out: &mut OutDir, cfg: &RunConfig, dataset: &Dataset, tag: &str) -> Result<IterateRun> {
    let run = iterate(dataset, &cfg.train, &cfg.localize, |it, r| {
        if r.step % LOG_EVERY == 0 {
            log::info!("{tag}iteration {it} step {}: loss {:.4}", r.step, r.losses.total);
        }
    })?;
    write_metrics(out.file(METRICS_FILE), &iterate_rows(&run, cfg.train.steps_per_iteration))?;
    write_iterations(&out.file(ITERATIONS_FILE), &run)?;
    save_state(out, "baseline", &run.baseline)?;
    save_state(out, "original", &run.original)?;
    if let Some(aug) = &run.augmented {
        save_state(out, "augmented", aug)?;
    }
    Ok(run)
}

pub fn train(common: &Common, data: &Path) -> Result<()> {
    let mut cfg = common.resolve()?;
    let dataset = load_input_dataset(&mut cfg, data)?;
    let mut out = OutDir::prepare(&common.out, common.force)?;
    write_config(&mut out, &cfg)?;
    copy_dataset(&mut out, data)?;
    let run = run_training(&mut out, &cfg, &dataset, "")?;
    out.commit();
    for r in &run.reports {
        println!(
            "iteration {}: q={:.4} mAP@0.5={:.4} mAP avg={:.4}",
            r.iteration, r.q, r.map50, r.map_avg
        );
    }
    Ok(())
}

pub fn localize(common: &Common, data: &Path, checkpoint: &Path) -> Result<()> {
    let mut cfg = common.resolve()?;
    let dataset = load_input_dataset(&mut cfg, data)?;
    cfg.inputs.checkpoint = Some(checkpoint.to_path_buf());
    let model = load_model(checkpoint, &dataset)?;
    let dets = localize_videos(&model, &dataset.test, &cfg.localize)?;
    let mut out = OutDir::prepare(&common.out, common.force)?;
    write_config(&mut out, &cfg)?;
    write_detections(out.file(DETECTIONS_FILE), &dets)?;
    out.commit();
    println!("{} detections over {} test videos", dets.len(), dataset.test.len());
    Ok(())
}

pub fn eval(common: &Common, data: &Path, detections: &Path) -> Result<()> {
    let mut cfg = common.resolve()?;
    let dataset = load_input_dataset(&mut cfg, data)?;
    cfg.inputs.detections = Some(detections.to_path_buf());
    let dets = read_detections(detections).map_err(at(detections))?;
    let report = evaluate_map(
        &dets,
        &ground_truth_of(&dataset.test),
        dataset.num_classes(),
        &cfg.eval.iou_thresholds,
    );
    let mut out = OutDir::prepare(&common.out, common.force)?;
    write_config(&mut out, &cfg)?;
    write_map_report(out.file(MAP_FILE), &report)?;
    out.commit();
    for (t, m) in &report.per_threshold {
        println!("mAP@{t:.2} = {m:.4}");
    }
    println!("mAP avg = {:.4}", report.average);
    Ok(())
}

/// A parameter `sweep` can vary.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SweepParam {
    Alpha,
    Gamma,
    K,
    CtgMode,
}

impl SweepParam {
    pub fn name(self) -> &'static str {
        match self {
            SweepParam::Alpha => "alpha",
            SweepParam::Gamma => "gamma",
            SweepParam::K => "k",
            SweepParam::CtgMode => "ctg_mode",
        }
    }

    /// Applies `value` to a copy of `base`.
    pub fn apply(self, base: &RunConfig, value: &str) -> Result<RunConfig> {
        let mut cfg = base.clone();
        let bad = || CliError::usage(format!("invalid {} value '{value}'", self.name()));
        match self {
            SweepParam::Alpha => cfg.train.alpha = value.parse().map_err(|_| bad())?,
            SweepParam::Gamma => cfg.train.gamma = value.parse().map_err(|_| bad())?,
            SweepParam::K => cfg.train.variants = value.parse().map_err(|_| bad())?,
            SweepParam::CtgMode => {
                cfg.train.ctg_mode = match value {
                    "max" => CtgReduce::Max,
                    "avg" => CtgReduce::Avg,
                    _ => return Err(bad()),
                }
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

struct SweepRow {
    value: String,
    q: f64,
    map: MapReport,
}

fn sweep_one(dir: &Path, cfg: &RunConfig, dataset: &Dataset, tag: &str) -> Result<SweepRow> {
    // Each run owns its directory; the parent OutDir handles cleanup.
    let mut out = OutDir::prepare(dir, true)?;
    write_config(&mut out, cfg)?;
    let run = run_training(&mut out, cfg, dataset, tag)?;
    let map = evaluate_model(&run.original.student, dataset, &cfg.localize)?;
    let q = run.reports.last().map_or(0.0, |r| r.q);
    out.commit();
    Ok(SweepRow {
        value: String::new(),
        q,
        map,
    })
}

pub fn sweep(common: &Common, data: &Path, param: SweepParam, values: &[String]) -> Result<()> {
    let mut cfg = common.resolve()?;
    let dataset = load_input_dataset(&mut cfg, data)?;
    if values.is_empty() {
        return Err(CliError::usage("sweep needs at least one value"));
    }
    let configs = values
        .iter()
        .map(|v| param.apply(&cfg, v))
        .collect::<Result<Vec<_>>>()?;
    let mut out = OutDir::prepare(&common.out, common.force)?;
    write_config(&mut out, &cfg)?;
    let dirs = values
        .iter()
        .map(|v| out.subdir(&format!("{}={v}", param.name())))
        .collect::<Result<Vec<_>>>()?;
    let workers = std::thread::available_parallelism().map_or(1, |n| n.get()).min(values.len());
    let mut results: Vec<Option<Result<SweepRow>>> = (0..values.len()).map(|_| None).collect();
    for chunk_start in (0..values.len()).step_by(workers) {
        let chunk_end = (chunk_start + workers).min(values.len());
        std::thread::scope(|s| {
            let handles: Vec<_> = (chunk_start..chunk_end)
                .map(|i| {
                    let (dir, c, d) = (&dirs[i], &configs[i], &dataset);
                    let tag = format!("{}={}: ", param.name(), values[i]);
                    s.spawn(move || sweep_one(dir, c, d, &tag))
                })
                .collect();
            for (i, h) in (chunk_start..chunk_end).zip(handles) {
                results[i] = Some(h.join().unwrap_or_else(|_| Err(CliError::usage("sweep worker panicked"))));
            }
        });
    }
    let mut rows = Vec::with_capacity(values.len());
    for (v, r) in values.iter().zip(results) {
        let mut row = r.expect("every sweep value ran")?;
        row.value = v.clone();
        rows.push(row);
    }
    let path = out.file(SWEEP_FILE);
    let mut w = csv::Writer::from_path(&path).map_err(biscc::Error::from)?;
    let io = |e: csv::Error| CliError::Core(e.into());
    let mut header = vec!["param".to_string(), "value".to_string(), "q".to_string()];
    header.extend(rows[0].map.per_threshold.iter().map(|(t, _)| format!("map@{t:.2}")));
    header.push("map_avg".into());
    w.write_record(&header).map_err(io)?;
    for r in &rows {
        let mut rec = vec![param.name().to_string(), r.value.clone(), format!("{:.6}", r.q)];
        rec.extend(r.map.per_threshold.iter().map(|(_, m)| format!("{m:.6}")));
        rec.push(format!("{:.6}", r.map.average));
        w.write_record(&rec).map_err(io)?;
        println!("{}={}: mAP avg={:.4}", param.name(), r.value, r.map.average);
    }
    w.flush().map_err(|e| CliError::io(&path, e))?;
    out.commit();
    Ok(())
}

fn safe_file_stem(id: &str) -> String {
    id.chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' })
        .collect()
}

/// Max over action classes of the row-softmaxed background-suppressed
/// T-CAM, per segment.
fn action_confidence(model: &ModelParams, x: &biscc::autodiff::Tensor2) -> Result<Vec<f64>> {
    let p = model.infer(x)?.s_bar.softmax_rows();
    let actions = model.shape.num_classes;
    Ok((0..p.rows())
        .map(|t| p.row_slice(t)[..actions].iter().copied().fold(0.0, f64::max))
        .collect())
}

/// Evenly spaced picks of `k` out of `n`.
fn sample_indices(n: usize, k: usize) -> Vec<usize> {
    let k = k.min(n);
    (0..k).map(|i| i * n / k).collect()
}

pub fn report(common: &Common, run_dir: &Path) -> Result<()> {
    let mut cfg = common.resolve()?;
    let data_path = run_dir.join(DATASET_FILE);
    let dataset = load_input_dataset(&mut cfg, &data_path)?;
    cfg.inputs.run = Some(run_dir.to_path_buf());
    let baseline = load_model(&run_dir.join(checkpoint_name("baseline", "student")), &dataset)?;
    let original_path = run_dir.join(checkpoint_name("original", "student"));
    let biscc = if original_path.exists() {
        Some(load_model(&original_path, &dataset)?)
    } else {
        None
    };

    let mut out = OutDir::prepare(&common.out, common.force)?;
    write_config(&mut out, &cfg)?;

    let summary_path = out.file(SUMMARY_FILE);
    let mut w = csv::Writer::from_path(&summary_path).map_err(biscc::Error::from)?;
    let io = |e: csv::Error| CliError::Core(e.into());
    w.write_record(["model", "map@0.30", "map@0.50", "map@0.70", "map_avg", "co_scene_fp", "q"])
        .map_err(io)?;
    let models: Vec<(&str, &ModelParams)> = std::iter::once(("baseline", &baseline))
        .chain(biscc.as_ref().map(|m| ("biscc", m)))
        .collect();
    for (name, m) in &models {
        let map = evaluate_model(m, &dataset, &cfg.localize)?;
        let fp = co_scene_false_positive_rate(m, &dataset.test, cfg.train.gamma)?;
        let q = dataset_pseudo_precision(m, &dataset.train, cfg.train.gamma)?;
        let mut rec = vec![name.to_string()];
        rec.extend(map.per_threshold.iter().map(|(_, v)| format!("{v:.6}")));
        rec.push(format!("{:.6}", map.average));
        rec.push(fp.map(|f| format!("{f:.6}")).unwrap_or_default());
        rec.push(format!("{q:.6}"));
        w.write_record(&rec).map_err(io)?;
    }
    w.flush().map_err(|e| CliError::io(&summary_path, e))?;

    let primary = biscc.as_ref().unwrap_or(&baseline);
    let picks = sample_indices(dataset.test.len(), cfg.report.videos);
    for &i in &picks {
        let v = &dataset.test[i];
        let pair = primary.infer(&v.features)?;
        let attention: Vec<f64> = (0..pair.a.rows()).map(|t| pair.a.row_slice(t)[0]).collect();
        let base_conf = action_confidence(&baseline, &v.features)?;
        let mut series = vec![Series {
            name: "attention",
            color: "#1f77b4",
            dashed: false,
            values: &attention,
        }];
        let bi_conf = match &biscc {
            Some(m) => Some(action_confidence(m, &v.features)?),
            None => None,
        };
        if let Some(c) = &bi_conf {
            series.push(Series {
                name: "Bi-SCC action",
                color: "#d62728",
                dashed: false,
                values: c,
            });
        }
        series.push(Series {
            name: "baseline action",
            color: "#7f7f7f",
            dashed: true,
            values: &base_conf,
        });
        let title = format!("{} (T={})", v.id, v.len());
        let svg = trace_chart(&title, v.len(), &v.gt_segments, &v.co_scene_segments, &series);
        let path = out.file(&format!("trace_{}.svg", safe_file_stem(&v.id)));
        fs::write(&path, svg).map_err(|e| CliError::io(path, e))?;
    }
    out.commit();
    println!("wrote {} traces and {SUMMARY_FILE} to {}", picks.len(), common.out.display());
    Ok(())
}
