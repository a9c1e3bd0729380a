//! One function per subcommand. Each returns the metrics recorded in its
//! stage file together with the list of files it wrote.

use std::path::PathBuf;

use plugin_se::downstream::{evaluate, Downstream, Task, TaskDescriptor};
use plugin_se::enhancer::{enhance, train_enhancer, MaskEnhancer};
use plugin_se::gate::{
    grid_search_gate, optimize_gate, sweep_gate, uniform_grid, GateProblem, GateWeight, TraceEntry,
};
use plugin_se::losses::{artifact_energy, si_sdr_db};
use plugin_se::predictor::{
    run_inference, train_predictor, GateSource, GateTargetTable, PredictorCheckpoint, Provenance, TargetRow,
    WeightPredictor,
};
use plugin_se::signal::{make_corpus, read_wav, write_wav, Batch, Waveform};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::artifacts::{corpus_checksum, write_bytes, CorpusManifest, RunDir, StageRecord, ARTIFACT_FORMAT_VERSION};
use crate::config::{ExperimentConfig, TargetSource};
use crate::error::CliError;

pub struct Context {
    /// Config with stage seeds resolved.
    pub cfg: ExperimentConfig,
    pub config_sha256: String,
    pub run: RunDir,
}

pub struct StageOutput {
    pub metrics: Value,
    pub files: Vec<PathBuf>,
}

fn csv_error(e: csv::Error) -> CliError {
    CliError::Io(std::io::Error::other(e))
}

fn write_csv(path: &std::path::Path, header: &[&str], rows: impl IntoIterator<Item = Vec<String>>) -> Result<(), CliError> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(header).map_err(csv_error)?;
    for r in rows {
        w.write_record(&r).map_err(csv_error)?;
    }
    let bytes = w.into_inner().map_err(|e| CliError::Io(std::io::Error::other(e.to_string())))?;
    write_bytes(path, &bytes)
}

fn save_wav(path: &std::path::Path, w: &Waveform) -> Result<(), CliError> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    Ok(write_wav(path, w)?)
}

fn mean(v: impl IntoIterator<Item = f64>) -> f64 {
    let (s, n) = v.into_iter().fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        0.0
    } else {
        s / n as f64
    }
}

pub fn synth(ctx: &Context) -> Result<StageOutput, CliError> {
    let mut files = Vec::new();
    let mut metrics = serde_json::Map::new();
    for (split, cfg) in [("train", &ctx.cfg.corpus.train), ("eval", &ctx.cfg.corpus.eval)] {
        let batch = make_corpus(cfg)?;
        let manifest = CorpusManifest {
            format_version: ARTIFACT_FORMAT_VERSION,
            config: cfg.clone(),
            items: batch.len(),
            sha256: corpus_checksum(&batch),
        };
        let path = ctx.run.corpus_manifest(split);
        ctx.run.store(&path, &manifest)?;
        files.push(path);
        metrics.insert(
            split.to_string(),
            json!({
                "items": batch.len(),
                "sha256": manifest.sha256,
                "mean_input_si_sdr_db": mean(batch.items().iter().map(|i| si_sdr_db(i.mix.samples(), i.clean.samples()))),
            }),
        );
        if split == "eval" {
            for (i, it) in batch.items().iter().enumerate() {
                for (name, w) in [("clean", &it.clean), ("noise", &it.noise), ("mix", &it.mix)] {
                    let p = ctx.run.path(format!("corpus/wav/eval_{i:04}_{name}.wav"));
                    save_wav(&p, w)?;
                    files.push(p);
                }
            }
        }
    }
    Ok(StageOutput { metrics: Value::Object(metrics), files })
}

#[derive(Debug, Clone, Copy, Serialize)]
struct EnhancementStats {
    input_si_sdr_db: f64,
    output_si_sdr_db: f64,
    artifact_energy: f64,
}

fn enhancement_stats(e: &MaskEnhancer, batch: &Batch) -> Result<EnhancementStats, CliError> {
    let mut out = Vec::with_capacity(batch.len());
    for it in batch.items() {
        out.push(enhance(e, &it.mix)?);
    }
    let items = batch.items();
    Ok(EnhancementStats {
        input_si_sdr_db: mean(items.iter().map(|i| si_sdr_db(i.mix.samples(), i.clean.samples()))),
        output_si_sdr_db: mean(out.iter().zip(items).map(|(o, i)| si_sdr_db(o.samples(), i.clean.samples()))),
        artifact_energy: mean(
            out.iter()
                .zip(items)
                .map(|(o, i)| artifact_energy(o.samples(), i.clean.samples(), i.noise.samples(), false)),
        ),
    })
}

pub fn train_enhancer_cmd(ctx: &Context) -> Result<StageOutput, CliError> {
    let sec = &ctx.cfg.enhancer;
    let train = ctx.run.load_corpus("train")?;
    let eval = ctx.run.load_corpus("eval")?;
    let ds = sec.cm_downstream.map(|d| ctx.run.load_downstream(d)).transpose()?;
    let init = MaskEnhancer::new(sec.stft, &sec.hidden, sec.train.seed)?;
    let (model, curve) = train_enhancer(init, &train, sec.loss, ds.as_ref(), &sec.train)?;
    let path = ctx.run.enhancer();
    ctx.run.store(&path, &model.to_checkpoint())?;
    let curve_path = ctx.run.path("enhancer_curve.csv");
    write_csv(&curve_path, &["epoch", "loss"], curve.points.iter().map(|(e, l)| vec![e.to_string(), l.to_string()]))?;
    let stats = enhancement_stats(&model, &eval)?;
    Ok(StageOutput {
        metrics: json!({
            "loss": sec.loss,
            "final_loss": curve.points.last().map(|p| p.1),
            "curve_non_increasing_5pct": curve.is_non_increasing(0.05),
            "eval": stats,
        }),
        files: vec![path, curve_path],
    })
}

pub fn train_downstream_cmd(ctx: &Context) -> Result<StageOutput, CliError> {
    let train = ctx.run.load_corpus("train")?;
    let eval = ctx.run.load_corpus("eval")?;
    let mut files = Vec::new();
    let mut metrics = Vec::new();
    for sec in &ctx.cfg.downstream {
        let d = sec.descriptor();
        let model = plugin_se::downstream::train_downstream(d, &train, &sec.train)?;
        let path = ctx.run.downstream(d);
        ctx.run.store(&path, &model.to_checkpoint())?;
        files.push(path);
        let clean = evaluate(&model, &eval, &eval.cleans())?;
        let noisy = evaluate(&model, &eval, &eval.mixes())?;
        metrics.push(json!({
            "descriptor": d.to_string(),
            "train_clean_accuracy": model.clean_accuracy(),
            "eval_clean_accuracy": clean.accuracy,
            "eval_noisy_accuracy": noisy.accuracy,
            "eval_noisy_kl_to_clean": noisy.mean_kl_to_clean,
        }));
    }
    Ok(StageOutput { metrics: Value::Array(metrics), files })
}

fn downstream_for(ctx: &Context, d: TaskDescriptor) -> Result<Downstream, CliError> {
    Ok(if d.task() == Task::Se { Downstream::Identity } else { Downstream::Model(ctx.run.load_downstream(d)?) })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GateRun {
    pub descriptor: TaskDescriptor,
    pub w_star: f64,
    pub best_loss: f64,
    pub oracle_w: f64,
    pub oracle_loss: f64,
    pub oracle_agrees: bool,
    pub trace: Vec<TraceEntry>,
}

pub fn optimize_gate_cmd(ctx: &Context) -> Result<StageOutput, CliError> {
    let eval = ctx.run.load_corpus("eval")?;
    let enhancer = ctx.run.load_enhancer()?;
    let problem = GateProblem::new(&enhancer, &eval)?;
    let mut runs = Vec::new();
    for d in ctx.cfg.gate_descriptors() {
        let ds = downstream_for(ctx, d)?;
        let opt = optimize_gate(&problem, &ds, &ctx.cfg.gate.optimizer)?;
        let (grid_w, grid_loss) = grid_search_gate(&problem, &ds, ctx.cfg.gate.oracle_step)?;
        runs.push(GateRun {
            descriptor: d,
            w_star: opt.w_star.value(),
            best_loss: opt.best_loss,
            oracle_w: grid_w.value(),
            oracle_loss: grid_loss,
            oracle_agrees: (opt.w_star.value() - grid_w.value()).abs() <= 0.02,
            trace: opt.trace,
        });
    }
    let table = GateTargetTable::from_rows(
        runs.iter()
            .map(|r| TargetRow {
                descriptor: r.descriptor,
                w_star: GateWeight::clamped(r.w_star),
                provenance: Provenance::Optimized,
            })
            .collect(),
    )?;
    let targets = ctx.run.gate_targets();
    ctx.run.store(&targets, &table)?;
    let traces = ctx.run.gate_traces();
    ctx.run.store(&traces, &runs)?;
    let csv_path = ctx.run.path("gate/targets.csv");
    write_csv(
        &csv_path,
        &["task", "task_id", "noise_injection", "w_star", "best_loss", "oracle_w", "oracle_loss", "oracle_agrees"],
        runs.iter().map(|r| {
            vec![
                r.descriptor.task().name().to_string(),
                r.descriptor.task_id().to_string(),
                r.descriptor.noise_injection().to_string(),
                r.w_star.to_string(),
                r.best_loss.to_string(),
                r.oracle_w.to_string(),
                r.oracle_loss.to_string(),
                r.oracle_agrees.to_string(),
            ]
        }),
    )?;
    let metrics = runs
        .iter()
        .map(|r| {
            json!({
                "descriptor": r.descriptor.to_string(),
                "w_star": r.w_star,
                "oracle_w": r.oracle_w,
                "oracle_agrees": r.oracle_agrees,
            })
        })
        .collect();
    Ok(StageOutput { metrics: Value::Array(metrics), files: vec![targets, traces, csv_path] })
}

pub fn sweep_cmd(ctx: &Context) -> Result<StageOutput, CliError> {
    let eval = ctx.run.load_corpus("eval")?;
    let enhancer = ctx.run.load_enhancer()?;
    let grid = uniform_grid(ctx.cfg.gate.sweep_points);
    let descriptors = ctx.cfg.gate_descriptors();
    let models = descriptors.iter().map(|&d| downstream_for(ctx, d)).collect::<Result<Vec<_>, _>>()?;
    let mut files = Vec::new();
    let mut metrics = Vec::new();
    for &snr in &ctx.cfg.gate.sweep_snr_db {
        let batch = eval.at_snr(snr)?;
        let problem = GateProblem::new(&enhancer, &batch)?;
        for (d, ds) in descriptors.iter().zip(&models) {
            let curve = sweep_gate(&problem, ds, &grid)?;
            let tag = if d.noise_injection() { "ni" } else { "clean" };
            let path = ctx.run.path(format!("sweeps/{}_{tag}_snr{snr}.csv", d.task().name()));
            let mut buf = Vec::new();
            curve.write_csv(&mut buf)?;
            write_bytes(&path, &buf)?;
            files.push(path);
            metrics.push(json!({
                "descriptor": d.to_string(),
                "snr_db": snr,
                "argmin_w": curve.argmin().map(|p| p.w.value()),
                "accuracy_w0": curve.points.first().and_then(|p| p.accuracy),
                "accuracy_w1": curve.points.last().and_then(|p| p.accuracy),
            }));
        }
    }
    Ok(StageOutput { metrics: Value::Array(metrics), files })
}

fn target_table(ctx: &Context) -> Result<GateTargetTable, CliError> {
    match ctx.cfg.predictor.targets {
        TargetSource::Reference => Ok(GateTargetTable::reference()),
        TargetSource::Optimized => ctx.run.load(&ctx.run.gate_targets(), "optimize-gate"),
    }
}

pub fn train_predictor_cmd(ctx: &Context) -> Result<StageOutput, CliError> {
    let table = target_table(ctx)?;
    let trained = train_predictor(&table, &ctx.cfg.predictor.train)?;
    let path = ctx.run.predictor();
    ctx.run.store(&path, &trained.predictor.to_checkpoint(Some(trained.final_mse)))?;
    let hist = ctx.run.path("predictor_history.csv");
    write_csv(&hist, &["epoch", "mse"], trained.history.iter().enumerate().map(|(e, m)| vec![e.to_string(), m.to_string()]))?;
    let rows = table
        .rows()
        .iter()
        .map(|r| {
            Ok(json!({
                "descriptor": r.descriptor.to_string(),
                "target": r.w_star.value(),
                "predicted": trained.predictor.predict(r.descriptor)?.value(),
            }))
        })
        .collect::<Result<Vec<_>, CliError>>()?;
    Ok(StageOutput {
        metrics: json!({ "targets": ctx.cfg.predictor.targets, "final_mse": trained.final_mse, "rows": rows }),
        files: vec![path, hist],
    })
}

pub fn infer_cmd(ctx: &Context) -> Result<StageOutput, CliError> {
    let sec = &ctx.cfg.infer;
    let task = TaskDescriptor::of(sec.task, sec.noise_injection);
    let enhancer = ctx.run.load_enhancer()?;
    let ck: PredictorCheckpoint = ctx.run.load(&ctx.run.predictor(), "train-predictor")?;
    let predictor = WeightPredictor::from_checkpoint(&ck)?;
    let ds = downstream_for(ctx, task)?;

    let (x, reference) = match &sec.input {
        Some(path) => (read_wav(path)?, None),
        None => {
            let eval = ctx.run.load_corpus("eval")?;
            let item = eval.items().get(sec.item).ok_or_else(|| {
                CliError::Config(format!("infer.item {} outside the eval corpus ({} items)", sec.item, eval.len()))
            })?;
            let it = item.remixed(sec.snr_db)?;
            (it.mix.clone(), Some(Batch::new(vec![it])?))
        }
    };
    let out = run_inference(&x, task, &enhancer, &ds, GateSource::Predicted(&predictor))?;
    let dir = ctx.run.path("infer");
    let enhanced = dir.join("enhanced.wav");
    let mixed = dir.join("mixed.wav");
    save_wav(&enhanced, &out.enhanced)?;
    save_wav(&mixed, &out.mixed)?;

    let mut metrics = json!({
        "task": task.to_string(),
        "w_hat": out.w_hat.value(),
        "samples": x.len(),
        "frames": out.output.as_ref().map(|d| d.frames()),
    });
    if let Some(dist) = &out.output {
        let probs = dist.probs();
        let mean_post: Vec<f64> = (0..probs.ncols()).map(|c| probs.column(c).mean().unwrap_or(0.0)).collect();
        metrics["mean_posterior"] = json!(mean_post);
    }
    if let Some(batch) = &reference {
        let clean = &batch.items()[0].clean;
        let score = |w: &Waveform| si_sdr_db(w.samples(), clean.samples());
        metrics["si_sdr_db"] = json!({
            "input": score(&x),
            "enhanced": score(&out.enhanced),
            "mixed": score(&out.mixed),
        });
        if let Downstream::Model(m) = &ds {
            let mut acc = serde_json::Map::new();
            for (name, gate) in [
                ("predicted", GateSource::Predicted(&predictor)),
                ("w0", GateSource::Fixed(GateWeight::ENHANCED)),
                ("w1", GateSource::Fixed(GateWeight::PASSTHROUGH)),
            ] {
                let o = run_inference(&x, task, &enhancer, &ds, gate)?;
                let d = o.output.expect("model downstream yields a distribution");
                acc.insert(name.to_string(), json!(plugin_se::downstream::accuracy_of(m, batch, &[d])?));
            }
            metrics["accuracy"] = Value::Object(acc);
        }
    }
    let result = dir.join("result.json");
    ctx.run.store(&result, &metrics)?;
    Ok(StageOutput { metrics, files: vec![enhanced, mixed, result] })
}

#[derive(Debug, Clone, Serialize)]
struct OrderingCheck {
    task: Task,
    w_star_noise_injected: f64,
    w_star_clean: f64,
    ordering_holds: bool,
}

pub fn report_cmd(ctx: &Context) -> Result<StageOutput, CliError> {
    let table: GateTargetTable = ctx.run.load(&ctx.run.gate_targets(), "optimize-gate")?;
    let mut ordering = Vec::new();
    for &task in &ctx.cfg.report.ordering_tasks {
        if let (Some(ni), Some(clean)) =
            (table.get(TaskDescriptor::of(task, true)), table.get(TaskDescriptor::of(task, false)))
        {
            ordering.push(OrderingCheck {
                task,
                w_star_noise_injected: ni.value(),
                w_star_clean: clean.value(),
                ordering_holds: ni.value() > clean.value(),
            });
        }
    }
    let mut stages = Vec::new();
    for name in STAGES.iter().filter(|s| **s != "report") {
        let p = ctx.run.stage(name);
        if p.exists() {
            stages.push(ctx.run.load::<StageRecord>(&p, "report")?);
        }
    }
    let stale: Vec<&str> =
        stages.iter().filter(|s| s.config_sha256 != ctx.config_sha256).map(|s| s.stage.as_str()).collect();
    let report = json!({
        "format_version": ARTIFACT_FORMAT_VERSION,
        "config_sha256": ctx.config_sha256,
        "root_seed": ctx.cfg.seed,
        "resolved_seeds": {
            "corpus_train": ctx.cfg.corpus.train.seed,
            "corpus_eval": ctx.cfg.corpus.eval.seed,
            "enhancer": ctx.cfg.enhancer.train.seed,
            "downstream": ctx.cfg.downstream.iter().map(|d| json!({"descriptor": d.descriptor().to_string(), "seed": d.train.seed})).collect::<Vec<_>>(),
            "predictor": ctx.cfg.predictor.train.seed,
        },
        "gate_targets": table,
        "ordering": ordering,
        "all_orderings_hold": !ordering.is_empty() && ordering.iter().all(|o| o.ordering_holds),
        "stages_from_other_configs": stale,
        "stages": stages,
    });
    let json_path = ctx.run.path("report.json");
    ctx.run.store(&json_path, &report)?;

    let mut rows = vec![
        vec!["run".into(), "config_sha256".into(), ctx.config_sha256.clone()],
        vec!["run".into(), "root_seed".into(), ctx.cfg.seed.to_string()],
    ];
    for r in table.rows() {
        rows.push(vec!["gate_target".into(), r.descriptor.to_string(), r.w_star.value().to_string()]);
    }
    for o in &ordering {
        rows.push(vec!["ordering".into(), o.task.name().into(), o.ordering_holds.to_string()]);
    }
    for s in &stages {
        rows.push(vec!["wall_clock_s".into(), s.stage.clone(), s.wall_clock_s.to_string()]);
    }
    let csv_path = ctx.run.path("report.csv");
    write_csv(&csv_path, &["section", "key", "value"], rows)?;
    Ok(StageOutput {
        metrics: json!({ "ordering": report["ordering"], "all_orderings_hold": report["all_orderings_hold"] }),
        files: vec![json_path, csv_path],
    })
}

pub const STAGES: [&str; 8] =
    ["synth", "train-enhancer", "train-downstream", "optimize-gate", "sweep", "train-predictor", "infer", "report"];
