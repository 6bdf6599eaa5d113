//! Command-line front end: dataset generation, prior fitting, training,
//! evaluation, prior scoring, matching inspection and SVG reports.

mod svg;

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context};
use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use crate::consistency::StrategyRegistry;
use crate::data::{generate_dataset, load_dataset, save_dataset, split_labeled, strong_augment, weak_augment, Scene, SceneConfig};
use crate::matching::match_instances;
use crate::metrics::{mean_scores, MetricReport};
use crate::model::{predict, Checkpoint};
use crate::priors::{extract_all_features, fit_kde, score_instance, BandwidthRule, PriorBank};
use crate::raster::{InstanceLabelMap, Tensor};
use crate::trainer::{derive_seed, evaluate_checkpoint, read_run_log, write_run_log, TrainConfig, Trainer};
use crate::wbis::segment_instances;

#[derive(Debug, Parser)]
#[command(name = "ircr", version, about = "Semi-supervised nuclei instance segmentation toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic scene dataset.
    GenData(GenDataArgs),
    /// Fit the morphological prior bank on a dataset's ground truth.
    FitPriors(FitPriorsArgs),
    /// Train a student/teacher pair.
    Train(TrainArgs),
    /// Evaluate a checkpoint's student on a dataset.
    Eval(EvalArgs),
    /// Score instances against a prior bank.
    Score(ScoreArgs),
    /// Match teacher and student instances on one scene.
    MatchDebug(MatchDebugArgs),
    /// Plot run logs and evaluation results.
    Report(ReportArgs),
}

#[derive(Debug, Args)]
struct GenDataArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    n_scenes: usize,
    #[arg(long, default_value_t = 64)]
    size: usize,
    /// Largest overlap between two nuclei, as a fraction of the smaller one.
    #[arg(long, default_value_t = 0.2)]
    overlap: f64,
    #[arg(long, default_value_t = 6)]
    min_nuclei: usize,
    #[arg(long, default_value_t = 14)]
    max_nuclei: usize,
    #[arg(long, default_value_t = 0.05)]
    noise: f64,
    /// Fraction of scenes flagged as labeled in the manifest.
    #[arg(long, default_value_t = 1.0)]
    labeled_ratio: f64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct FitPriorsArgs {
    #[arg(long)]
    data: PathBuf,
    /// `auto` (Silverman) or a fixed bandwidth in normalized units.
    #[arg(long, default_value = "auto")]
    bandwidth: String,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[arg(long)]
    data: PathBuf,
    /// Output directory for the checkpoint, run log and config snapshot.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
    /// Prior bank file, required by prior-weighted strategies.
    #[arg(long)]
    priors: Option<PathBuf>,
    /// Consistency strategy name.
    #[arg(long)]
    consistency: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    labeled_ratio: Option<f64>,
    #[arg(long)]
    lr: Option<f64>,
}

#[derive(Debug, Args)]
struct EvalArgs {
    /// Checkpoint directory.
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
    /// Metrics CSV.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct ScoreArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    priors: PathBuf,
    /// Score the student's predicted instances instead of the ground truth.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    config: Option<PathBuf>,
    /// Only this scene id.
    #[arg(long)]
    scene: Option<usize>,
    /// Likelihood threshold; defaults to the config value.
    #[arg(long)]
    tau: Option<f64>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct MatchDebugArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    scene: usize,
    #[arg(long)]
    config: Option<PathBuf>,
    /// Radius factor; defaults to the config value.
    #[arg(long)]
    r_factor: Option<f64>,
    /// Seed of the weak and strong views.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Directory for `match.csv` and `match.svg`.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct ReportArgs {
    /// `LABEL=path` of a run log CSV; repeatable.
    #[arg(long = "run-log")]
    run_logs: Vec<String>,
    /// `LABEL=path` of an eval CSV, the label being the labeled ratio;
    /// repeatable.
    #[arg(long = "eval")]
    evals: Vec<String>,
    #[arg(long)]
    out: PathBuf,
}

/// Removes outputs this invocation created unless it is committed.
struct Outputs {
    created: Vec<PathBuf>,
    committed: bool,
}

impl Outputs {
    fn new() -> Self {
        Self {
            created: Vec::new(),
            committed: false,
        }
    }

    /// Registers `path`; only paths absent before the command are removed
    /// on failure.
    fn claim(&mut self, path: &Path) -> PathBuf {
        if !path.exists() {
            self.created.push(path.to_path_buf());
        }
        path.to_path_buf()
    }

    fn commit(mut self) {
        self.committed = true;
    }
}

impl Drop for Outputs {
    fn drop(&mut self) {
        if self.committed {
            return;
        }
        for p in self.created.iter().rev() {
            let res = if p.is_dir() {
                fs::remove_dir_all(p)
            } else {
                fs::remove_file(p)
            };
            if res.is_ok() {
                log::info!("removed partial output {}", p.display());
            }
        }
    }
}

/// Writes via a sibling temp file so a failed write leaves nothing behind.
fn write_atomic(path: &Path, contents: &[u8]) -> anyhow::Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    fs::write(&tmp, contents).with_context(|| format!("writing {}", tmp.display()))?;
    fs::rename(&tmp, path).with_context(|| format!("renaming into {}", path.display()))
}

fn csv_bytes<T: Serialize>(rows: &[T]) -> anyhow::Result<Vec<u8>> {
    let mut wr = csv::Writer::from_writer(Vec::new());
    for r in rows {
        wr.serialize(r)?;
    }
    Ok(wr.into_inner().map_err(|e| anyhow!("{e}"))?)
}

fn load_config(path: Option<&Path>) -> anyhow::Result<TrainConfig> {
    match path {
        Some(p) => Ok(TrainConfig::from_ini_file(p)?),
        None => Ok(TrainConfig::default()),
    }
}

fn ensure_parent(path: &Path, outputs: &mut Outputs) -> anyhow::Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        if !parent.exists() {
            outputs.claim(parent);
            fs::create_dir_all(parent).with_context(|| format!("creating {}", parent.display()))?;
        }
    }
    Ok(())
}

fn gen_data(a: GenDataArgs) -> anyhow::Result<()> {
    let cfg = SceneConfig {
        size: a.size,
        count_range: (a.min_nuclei, a.max_nuclei),
        overlap_fraction: a.overlap,
        noise_sigma: a.noise,
        seed: a.seed,
        ..SceneConfig::default()
    };
    cfg.validate()?;
    let mut outputs = Outputs::new();
    let out = outputs.claim(&a.out);
    let scenes = generate_dataset(&cfg, a.n_scenes)?;
    let scenes = if a.labeled_ratio < 1.0 && !scenes.is_empty() {
        let (mut l, u) = split_labeled(&scenes, a.labeled_ratio, a.seed)?;
        l.extend(u);
        l.sort_by_key(|s| s.id);
        l
    } else {
        scenes
    };
    save_dataset(&out, &scenes)?;
    log::info!("wrote {} scenes to {}", scenes.len(), out.display());
    outputs.commit();
    Ok(())
}

fn fit_priors(a: FitPriorsArgs) -> anyhow::Result<()> {
    let rule: BandwidthRule = a.bandwidth.parse()?;
    let scenes = load_dataset(&a.data)?;
    let mut samples = Vec::new();
    for s in &scenes {
        samples.extend(extract_all_features(&s.gt_labels, &s.h_channel)?);
    }
    let bank = fit_kde(&samples, rule)?;
    let mut outputs = Outputs::new();
    ensure_parent(&a.out, &mut outputs)?;
    let out = outputs.claim(&a.out);
    let tmp = out.with_extension("partial");
    outputs.claim(&tmp);
    bank.save(&tmp)?;
    fs::rename(&tmp, &out).with_context(|| format!("renaming into {}", out.display()))?;
    log::info!("prior bank of {} instances written to {}", samples.len(), out.display());
    outputs.commit();
    Ok(())
}

fn train(a: TrainArgs) -> anyhow::Result<()> {
    let mut cfg = load_config(a.config.as_deref())?;
    if let Some(c) = a.consistency {
        cfg.consistency = c;
    }
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    if let Some(e) = a.epochs {
        cfg.epochs = e;
    }
    if let Some(r) = a.labeled_ratio {
        cfg.labeled_ratio = Some(r);
    }
    if let Some(lr) = a.lr {
        cfg.lr = lr;
    }
    cfg.validate()?;
    let bank = a.priors.as_deref().map(PriorBank::load).transpose()?;
    let scenes = load_dataset(&a.data)?;
    let registry = StrategyRegistry::with_defaults();

    let mut outputs = Outputs::new();
    let out = outputs.claim(&a.out);
    fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
    let ckpt_dir = outputs.claim(&out.join("checkpoint"));
    let log_path = outputs.claim(&out.join("run_log.csv"));
    let cfg_path = outputs.claim(&out.join("config.ini"));
    let trainer = Trainer::new(cfg.clone(), &registry, bank.as_ref())?.with_dump_dir(out.join("nonfinite"));
    let result = trainer.run(&scenes)?;
    result.checkpoint.save(&ckpt_dir)?;
    write_run_log(&log_path, &result.log)?;
    write_atomic(&cfg_path, cfg.to_ini_string().as_bytes())?;
    if let Some(last) = result.log.last() {
        log::info!("finished at step {} with L_total {:.4}", last.step, last.total);
    }
    outputs.commit();
    Ok(())
}

#[derive(Serialize)]
struct EvalRow {
    scene_id: String,
    aji: String,
    dice: String,
    f1_obj: String,
    tp: String,
    fp: String,
    #[serde(rename = "fn")]
    fn_: String,
}

fn eval_rows(reports: &[(usize, MetricReport)]) -> Vec<EvalRow> {
    let mut rows: Vec<EvalRow> = reports
        .iter()
        .map(|(id, r)| EvalRow {
            scene_id: id.to_string(),
            aji: r.aji.to_string(),
            dice: r.dice.to_string(),
            f1_obj: r.f1_obj.to_string(),
            tp: r.tp.to_string(),
            fp: r.fp.to_string(),
            fn_: r.fn_.to_string(),
        })
        .collect();
    let only: Vec<MetricReport> = reports.iter().map(|(_, r)| r.clone()).collect();
    let sum = |f: fn(&MetricReport) -> usize| only.iter().map(f).sum::<usize>().to_string();
    rows.push(match mean_scores(&only) {
        Some((aji, dice, f1)) => EvalRow {
            scene_id: "mean".into(),
            aji: aji.to_string(),
            dice: dice.to_string(),
            f1_obj: f1.to_string(),
            tp: sum(|r| r.tp),
            fp: sum(|r| r.fp),
            fn_: sum(|r| r.fn_),
        },
        None => EvalRow {
            scene_id: "mean".into(),
            aji: "no scenes".into(),
            dice: "no scenes".into(),
            f1_obj: "no scenes".into(),
            tp: "0".into(),
            fp: "0".into(),
            fn_: "0".into(),
        },
    });
    rows
}

fn eval(a: EvalArgs) -> anyhow::Result<()> {
    let cfg = load_config(a.config.as_deref())?;
    let ckpt = Checkpoint::load(&a.checkpoint)?;
    let scenes = load_dataset(&a.data)?;
    let reports = evaluate_checkpoint(&ckpt, &cfg.model, &scenes, &cfg.wbis)?;
    let pairs: Vec<(usize, MetricReport)> = reports.into_iter().map(|r| (r.scene_id, r.report)).collect();
    let mut outputs = Outputs::new();
    ensure_parent(&a.out, &mut outputs)?;
    let out = outputs.claim(&a.out);
    write_atomic(&out, &csv_bytes(&eval_rows(&pairs))?)?;
    if let Some((aji, dice, f1)) = mean_scores(&pairs.iter().map(|p| p.1.clone()).collect::<Vec<_>>()) {
        log::info!("mean AJI {aji:.4}, Dice {dice:.4}, F1 {f1:.4} over {} scenes", pairs.len());
    }
    outputs.commit();
    Ok(())
}

#[derive(Serialize)]
struct ScoreRow {
    scene_id: usize,
    instance_id: usize,
    area: f64,
    solidity: f64,
    circularity: f64,
    intensity: f64,
    extent: f64,
    p: f64,
    kept: bool,
}

fn predicted_instances(ckpt: &Checkpoint, cfg: &TrainConfig, image: &Tensor) -> anyhow::Result<InstanceLabelMap> {
    let out = predict(&ckpt.student, image)?;
    Ok(segment_instances(&out.boundary_map(), &out.hv, &cfg.wbis)?)
}

fn select_scenes(scenes: Vec<Scene>, id: Option<usize>) -> anyhow::Result<Vec<Scene>> {
    match id {
        None => Ok(scenes),
        Some(id) => {
            let found: Vec<Scene> = scenes.into_iter().filter(|s| s.id == id).collect();
            if found.is_empty() {
                bail!("no scene with id {id}");
            }
            Ok(found)
        }
    }
}

fn score(a: ScoreArgs) -> anyhow::Result<()> {
    let cfg = load_config(a.config.as_deref())?;
    let tau = a.tau.unwrap_or(cfg.piac.tau);
    let bank = PriorBank::load(&a.priors)?;
    let ckpt = a.checkpoint.as_deref().map(Checkpoint::load).transpose()?;
    let scenes = select_scenes(load_dataset(&a.data)?, a.scene)?;
    let mut rows = Vec::new();
    for s in &scenes {
        let labels = match &ckpt {
            Some(c) => predicted_instances(c, &cfg, &s.image)?,
            None => s.gt_labels.clone(),
        };
        for (i, z) in extract_all_features(&labels, &s.h_channel)?.iter().enumerate() {
            let p = score_instance(&bank, z);
            rows.push(ScoreRow {
                scene_id: s.id,
                instance_id: i + 1,
                area: z.area,
                solidity: z.solidity,
                circularity: z.circularity,
                intensity: z.intensity,
                extent: z.extent,
                p,
                kept: p >= tau,
            });
        }
    }
    let mut outputs = Outputs::new();
    ensure_parent(&a.out, &mut outputs)?;
    let out = outputs.claim(&a.out);
    write_atomic(&out, &csv_bytes(&rows)?)?;
    outputs.commit();
    Ok(())
}

#[derive(Serialize)]
struct MatchRow {
    status: &'static str,
    teacher_id: Option<u32>,
    student_id: Option<u32>,
    teacher_row: Option<f64>,
    teacher_col: Option<f64>,
    student_row: Option<f64>,
    student_col: Option<f64>,
    distance: Option<f64>,
    threshold: Option<f64>,
}

fn match_debug(a: MatchDebugArgs) -> anyhow::Result<()> {
    let cfg = load_config(a.config.as_deref())?;
    let r_factor = a.r_factor.unwrap_or(cfg.r_factor);
    let ckpt = Checkpoint::load(&a.checkpoint)?;
    let scene = select_scenes(load_dataset(&a.data)?, Some(a.scene))?.remove(0);
    let weak = weak_augment(&scene, derive_seed(&[a.seed, 1]));
    let strong = strong_augment(&scene, derive_seed(&[a.seed, 2]));
    let instances = |params, view: &crate::data::Augmented| -> anyhow::Result<InstanceLabelMap> {
        let out = predict(params, &view.scene.image)?;
        let f = view.transform.inverse().apply_features(&out.features())?;
        let hv = Tensor::stack(&[&f.channel(2)?, &f.channel(3)?])?;
        Ok(segment_instances(&f.channel(1)?, &hv, &cfg.wbis)?)
    };
    let t_map = instances(&ckpt.teacher, &weak)?;
    let s_map = instances(&ckpt.student, &strong)?;
    let m = match_instances(&t_map, &s_map, r_factor)?;
    let (tc, sc) = (t_map.centroids(), s_map.centroids());
    let (ta, sa) = (t_map.areas(), s_map.areas());
    let rho = |area: usize| (area as f64 / std::f64::consts::PI).sqrt();
    let pair_row = |status, p: &crate::matching::MatchPair| {
        let (t, s) = (p.teacher as usize - 1, p.student as usize - 1);
        MatchRow {
            status,
            teacher_id: Some(p.teacher),
            student_id: Some(p.student),
            teacher_row: Some(tc[t].0),
            teacher_col: Some(tc[t].1),
            student_row: Some(sc[s].0),
            student_col: Some(sc[s].1),
            distance: Some(p.distance),
            threshold: Some(r_factor * 0.5 * (rho(ta[t]) + rho(sa[s]))),
        }
    };
    let mut rows: Vec<MatchRow> = m.pairs.iter().map(|p| pair_row("matched", p)).collect();
    rows.extend(m.rejected.iter().map(|p| pair_row("rejected", p)));
    for &t in &m.unmatched_teacher {
        if m.rejected.iter().any(|p| p.teacher == t) {
            continue;
        }
        let c = tc[t as usize - 1];
        rows.push(MatchRow {
            status: "unmatched_teacher",
            teacher_id: Some(t),
            student_id: None,
            teacher_row: Some(c.0),
            teacher_col: Some(c.1),
            student_row: None,
            student_col: None,
            distance: None,
            threshold: None,
        });
    }
    for &s in &m.unmatched_student {
        if m.rejected.iter().any(|p| p.student == s) {
            continue;
        }
        let c = sc[s as usize - 1];
        rows.push(MatchRow {
            status: "unmatched_student",
            teacher_id: None,
            student_id: Some(s),
            teacher_row: None,
            teacher_col: None,
            student_row: Some(c.0),
            student_col: Some(c.1),
            distance: None,
            threshold: None,
        });
    }

    let scale = 8.0;
    let (h, w) = (scene.gt_labels.height(), scene.gt_labels.width());
    let mut doc = svg::Doc::new(w as f64 * scale, h as f64 * scale + 24.0);
    let img = scene.image.plane(0);
    for r in 0..h {
        for c in 0..w {
            let g = (img[r * w + c].clamp(0.0, 1.0) * 255.0).round() as u8;
            doc.rect(c as f64 * scale, r as f64 * scale, scale, scale, &format!("#{g:02x}{g:02x}{g:02x}"));
        }
    }
    let at = |(r, c): (f64, f64)| ((c + 0.5) * scale, (r + 0.5) * scale);
    for row in &rows {
        let t = row.teacher_row.zip(row.teacher_col).map(at);
        let s = row.student_row.zip(row.student_col).map(at);
        if let (Some(t), Some(s)) = (t, s) {
            let (color, dashed) = if row.status == "matched" { ("#2ca02c", false) } else { ("#d62728", true) };
            doc.line(t.0, t.1, s.0, s.1, color, dashed);
        }
        if let Some(t) = t {
            doc.circle(t.0, t.1, 5.0, svg::color(0), "none");
        }
        if let Some(s) = s {
            doc.circle(s.0, s.1, 3.0, svg::color(1), svg::color(1));
        }
    }
    doc.text(
        4.0,
        h as f64 * scale + 17.0,
        12.0,
        "start",
        &format!(
            "scene {}: {} matched, {} rejected, teacher o / student *, r_factor {r_factor}",
            scene.id,
            m.pairs.len(),
            m.rejected.len()
        ),
    );

    let mut outputs = Outputs::new();
    let out = outputs.claim(&a.out);
    fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
    let csv_path = outputs.claim(&out.join("match.csv"));
    let svg_path = outputs.claim(&out.join("match.svg"));
    write_atomic(&csv_path, &csv_bytes(&rows)?)?;
    write_atomic(&svg_path, doc.finish().as_bytes())?;
    outputs.commit();
    Ok(())
}

fn labeled_path(spec: &str) -> anyhow::Result<(String, PathBuf)> {
    let (label, path) = spec
        .split_once('=')
        .ok_or_else(|| anyhow!("expected LABEL=path, got `{spec}`"))?;
    Ok((label.to_string(), PathBuf::from(path)))
}

/// Mean AJI, Dice and F1 from the `mean` row of an eval CSV.
fn read_eval_means(path: &Path) -> anyhow::Result<[f64; 3]> {
    let mut rd = csv::Reader::from_path(path).with_context(|| format!("reading {}", path.display()))?;
    for rec in rd.records() {
        let rec = rec?;
        if rec.get(0) == Some("mean") {
            let get = |i: usize| -> anyhow::Result<f64> {
                rec.get(i)
                    .and_then(|v| v.parse().ok())
                    .ok_or_else(|| anyhow!("{}: mean row has no value in column {i}", path.display()))
            };
            return Ok([get(1)?, get(2)?, get(3)?]);
        }
    }
    bail!("{}: no `mean` row", path.display())
}

fn report(a: ReportArgs) -> anyhow::Result<()> {
    if a.run_logs.is_empty() && a.evals.is_empty() {
        bail!("nothing to report: pass --run-log and/or --eval");
    }
    let mut curves = Vec::new();
    for spec in &a.run_logs {
        let (label, path) = labeled_path(spec)?;
        let rows = read_run_log(&path)?;
        let cols: [(&str, fn(&crate::trainer::RunLogRow) -> f64); 4] = [
            ("L_total", |r| r.total),
            ("L_sup", |r| r.sup),
            ("L_miac", |r| r.miac),
            ("L_piac", |r| r.piac),
        ];
        for (name, f) in cols {
            curves.push(svg::Series {
                label: format!("{label} {name}"),
                points: rows.iter().map(|r| (r.step as f64, f(r))).collect(),
            });
        }
    }
    let mut bars = Vec::new();
    for spec in &a.evals {
        let (label, path) = labeled_path(spec)?;
        bars.push((label, read_eval_means(&path)?));
    }

    let mut outputs = Outputs::new();
    let out = outputs.claim(&a.out);
    fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
    if !curves.is_empty() {
        let p = outputs.claim(&out.join("loss_curves.svg"));
        write_atomic(&p, svg::line_plot("Training losses", "step", &curves).as_bytes())?;
    }
    if !bars.is_empty() {
        let p = outputs.claim(&out.join("metrics.svg"));
        let cats: Vec<String> = bars.iter().map(|b| b.0.clone()).collect();
        let vals: Vec<Vec<f64>> = bars.iter().map(|b| b.1.to_vec()).collect();
        write_atomic(
            &p,
            svg::bar_chart("Test metrics by labeled ratio", &cats, &["AJI", "Dice", "F1"], &vals).as_bytes(),
        )?;
    }
    outputs.commit();
    Ok(())
}

fn init_logging() {
    let env = env_logger::Env::new().filter_or("IRCR_LOG", "warn");
    let _ = env_logger::Builder::from_env(env).format_timestamp(None).try_init();
}

/// Parses `argv` (program name first), runs the subcommand and returns the
/// process exit code: 0 on success, 1 on a runtime error, 2 on bad usage.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    init_logging();
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    let result = match cli.command {
        Command::GenData(a) => gen_data(a),
        Command::FitPriors(a) => fit_priors(a),
        Command::Train(a) => train(a),
        Command::Eval(a) => eval(a),
        Command::Score(a) => score(a),
        Command::MatchDebug(a) => match_debug(a),
        Command::Report(a) => report(a),
    };
    match result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e:#}");
            1
        }
    }
}
