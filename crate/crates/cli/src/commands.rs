//! Subcommand implementations. Each writes its outputs plus a resolved
//! config echo and a manifest into one run directory.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use mind_core::checkpoint::{self, CheckpointMeta};
use mind_core::data::{self, generate};
use mind_core::nn::Parameterized;
use mind_core::trainer::{
    self, ablation_csv, build_ensemble, evaluate_student, evaluate_ume, run_ablation, run_student, train_teacher,
    utilization_sweep, AblationTeachers, StudentData, StudentReport, Teachers, TrainLog,
};
use mind_core::{Dataset, Modality, Regime, TeacherEnsemble, UnimodalModel};
use rayon::prelude::*;
use serde::Serialize;
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use crate::config::RunConfig;
use crate::svg::{utilization_chart, Panel};

pub const DATASET_FILE: &str = "dataset.mind";
pub const STUDENT_FILE: &str = "student.ckpt";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const FAILURE_FILE: &str = "failure.json";

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().fold(String::with_capacity(64), |mut s, b| {
        let _ = write!(s, "{b:02x}");
        s
    })
}

/// Files written by one command, with their digests.
pub struct RunDir {
    dir: PathBuf,
    files: BTreeMap<String, String>,
}

impl RunDir {
    pub fn create(dir: &Path) -> Result<Self> {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        let stale = dir.join(FAILURE_FILE);
        if stale.exists() {
            fs::remove_file(&stale)?;
        }
        Ok(Self {
            dir: dir.to_path_buf(),
            files: BTreeMap::new(),
        })
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    pub fn write(&mut self, name: &str, bytes: impl AsRef<[u8]>) -> Result<()> {
        let bytes = bytes.as_ref();
        fs::write(self.path(name), bytes).with_context(|| format!("writing {name}"))?;
        self.files.insert(name.to_string(), sha256_hex(bytes));
        Ok(())
    }

    pub fn write_json(&mut self, name: &str, value: &impl Serialize) -> Result<()> {
        let mut text = serde_json::to_string_pretty(value)?;
        text.push('\n');
        self.write(name, text)
    }

    /// Writes the manifest last, so its presence marks a complete run.
    pub fn finish(mut self, command: &str, config: &RunConfig, dataset_sha256: Option<&str>, summary: Value) -> Result<Value> {
        self.write_json("config.json", config)?;
        let manifest = json!({
            "command": command,
            "status": "ok",
            "schema_version": config.schema_version,
            "seed": config.seed,
            "dataset_sha256": dataset_sha256,
            "outputs": self.files,
            "summary": summary,
        });
        let mut text = serde_json::to_string_pretty(&manifest)?;
        text.push('\n');
        fs::write(self.path(MANIFEST_FILE), text)?;
        Ok(manifest)
    }
}

/// Records a failed command in `dir/failure.json`.
pub fn write_failure(dir: &Path, command: &str, error: &anyhow::Error) -> Result<()> {
    fs::create_dir_all(dir)?;
    let stale = dir.join(MANIFEST_FILE);
    if stale.exists() {
        fs::remove_file(stale)?;
    }
    let failure = json!({
        "command": command,
        "status": "failed",
        "error": format!("{error:#}"),
    });
    fs::write(dir.join(FAILURE_FILE), serde_json::to_string_pretty(&failure)? + "\n")?;
    Ok(())
}

/// Loads a dataset and makes it the authority on data shape in `config`.
fn load_data(path: &Path, config: &mut RunConfig) -> Result<(Dataset, String)> {
    let bytes = fs::read(path).with_context(|| format!("reading dataset {}", path.display()))?;
    let ds = data::decode(&bytes).with_context(|| format!("decoding dataset {}", path.display()))?;
    config.data = ds.config.clone();
    config.data.seed = config.seed;
    Ok((ds, sha256_hex(&bytes)))
}

pub fn gen_data(config: &RunConfig, out: &Path) -> Result<Value> {
    let ds = generate(&config.data)?;
    let bytes = data::encode(&ds);
    let mut run = RunDir::create(out)?;
    run.write(DATASET_FILE, &bytes)?;
    let mut table = String::from("split,n,has_A,has_B,positive_rate\n");
    for (name, split) in ds.splits() {
        let n = split.len();
        let cols = split.y.shape()[1];
        let rates: Vec<String> = (0..cols)
            .map(|j| {
                let pos = split.y.column(j).iter().sum::<f64>();
                if n == 0 { String::new() } else { format!("{:.4}", pos / n as f64) }
            })
            .collect();
        writeln!(table, "{name},{n},{},{},{}", split.has_a(), split.has_b(), rates.join(";"))?;
    }
    print!("{table}");
    run.write("summary.csv", &table)?;
    let sha = sha256_hex(&bytes);
    let summary = json!({
        "dims": { "a": config.data.dim_a, "b": [config.data.seq_len, config.data.dim_b], "outputs": config.data.task.outputs() },
        "splits": ds.splits().iter().map(|(n, s)| (n.to_string(), s.len())).collect::<BTreeMap<_, _>>(),
    });
    run.finish("gen-data", config, Some(&sha), summary)
}

/// A teacher checkpoint found in a teacher directory.
pub struct LoadedTeacher {
    pub name: String,
    pub model: UnimodalModel,
    pub meta: CheckpointMeta,
}

pub fn load_teachers(dir: &Path) -> Result<Vec<LoadedTeacher>> {
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)
        .with_context(|| format!("reading teacher directory {}", dir.display()))?
        .map(|e| e.map(|e| e.path()))
        .collect::<Result<_, _>>()?;
    paths.retain(|p| p.extension().is_some_and(|e| e == "ckpt"));
    paths.sort();
    paths
        .into_iter()
        .map(|p| {
            let (model, meta) = checkpoint::load_unimodal(&p).with_context(|| format!("loading {}", p.display()))?;
            let name = p.file_stem().expect("has a file name").to_string_lossy().into_owned();
            Ok(LoadedTeacher { name, model, meta })
        })
        .collect()
}

/// The top-`k` teachers of a modality by validation AUROC.
fn ensemble(teachers: &[LoadedTeacher], modality: Modality, k: usize) -> Result<TeacherEnsemble> {
    let candidates: Vec<(UnimodalModel, f64)> = teachers
        .iter()
        .filter(|t| t.model.modality == modality)
        .map(|t| (t.model.clone(), t.meta.val_auroc.unwrap_or(f64::NEG_INFINITY)))
        .collect();
    build_ensemble(modality, &candidates, k)
        .with_context(|| format!("building the modality-{} teacher ensemble (k = {k})", modality.label()))
}

pub fn train_teachers(config: &mut RunConfig, out: &Path, data_path: &Path, only: Option<Modality>) -> Result<Value> {
    let (ds, sha) = load_data(data_path, config)?;
    let config = &*config;
    let modalities: Vec<Modality> = match only {
        Some(m) => vec![m],
        None => vec![Modality::A, Modality::B],
    };
    let jobs: Vec<(Modality, usize)> = modalities
        .iter()
        .flat_map(|&m| config.teachers.depths.iter().map(move |&d| (m, d)))
        .collect();
    let task = ds.config.task;
    let trained: Vec<(Modality, usize, UnimodalModel, TrainLog)> = jobs
        .par_iter()
        .map(|&(m, depth)| {
            let (train, val) = ds.pool(m);
            let spec = config.teacher_spec(m, depth);
            let (model, log) = train_teacher(m, &spec, task, train, val, &config.teacher_train(m, depth))
                .with_context(|| format!("training modality-{} teacher of depth {depth}", m.label()))?;
            eprintln!(
                "teacher {}_d{depth}: best epoch {} of {}, val AUROC {:.4}",
                m.label(),
                log.best_epoch,
                log.stopped_epoch,
                log.best_val_auroc
            );
            Ok((m, depth, model, log))
        })
        .collect::<Result<_>>()?;

    let mut run = RunDir::create(out)?;
    for (m, depth, model, log) in &trained {
        let name = format!("{}_d{depth}", m.label());
        let seed = config.teacher_train(*m, *depth).seed;
        run.write(&format!("{name}.ckpt"), checkpoint::encode_unimodal(model, seed, log.best_epoch, Some(log.best_val_auroc)))?;
        run.write(&format!("{name}_epochs.csv"), log.epochs_csv())?;
    }

    // The leaderboard covers every checkpoint in the directory, including
    // ones from an earlier single-modality invocation.
    let all = load_teachers(out)?;
    let mut board: Vec<&LoadedTeacher> = all.iter().collect();
    board.sort_by(|a, b| {
        let va = a.meta.val_auroc.unwrap_or(f64::NEG_INFINITY);
        let vb = b.meta.val_auroc.unwrap_or(f64::NEG_INFINITY);
        vb.total_cmp(&va).then(a.name.cmp(&b.name))
    });
    let mut csv = String::from("rank,name,modality,depth,params,best_epoch,val_auroc,test_auroc\n");
    for (i, t) in board.iter().enumerate() {
        let test = trainer::unimodal_auroc(&t.model, &ds.paired_test)?;
        writeln!(
            csv,
            "{},{},{},{},{},{},{},{test}",
            i + 1,
            t.name,
            t.model.modality.label(),
            t.model.encoder.spec.depth(),
            t.model.num_params(),
            t.meta.epoch,
            t.meta.val_auroc.map_or(String::new(), |v| v.to_string()),
        )?;
    }
    print!("{csv}");
    run.write("leaderboard.csv", &csv)?;
    let summary = json!({
        "teachers": trained.iter().map(|(m, d, model, log)| json!({
            "name": format!("{}_d{d}", m.label()),
            "params": model.num_params(),
            "best_epoch": log.best_epoch,
            "stopped_epoch": log.stopped_epoch,
            "val_auroc": log.best_val_auroc,
        })).collect::<Vec<_>>(),
    });
    run.finish("train-teachers", config, Some(&sha), summary)
}

fn param_counts(student: usize, a: &TeacherEnsemble, b: &TeacherEnsemble) -> Value {
    let total = a.num_params() + b.num_params();
    json!({
        "student": student,
        "teacher_ensemble_a": a.num_params(),
        "teacher_ensemble_b": b.num_params(),
        "teacher_ensembles_total": total,
        "student_to_teachers_ratio": student as f64 / total as f64,
    })
}

fn best_metrics(report: &StudentReport) -> Value {
    let head = |r: &mind_core::MetricsReport| json!({ "auroc": r.macro_auroc.value, "auprc": r.macro_auprc.value });
    json!({
        "fusion": head(&report.fusion),
        "head_a": report.head_a.as_ref().map(head),
        "head_b": report.head_b.as_ref().map(head),
    })
}

fn ensure_defined(report: &StudentReport, what: &str) -> Result<()> {
    if !report.all_defined() {
        bail!("{what}: some test metrics are undefined (a label lacks positives or negatives)");
    }
    Ok(())
}

pub fn train_student(
    config: &mut RunConfig,
    out: &Path,
    data_path: &Path,
    teacher_dir: &Path,
    regime: Option<Regime>,
) -> Result<Value> {
    if let Some(r) = regime {
        config.student.train.regime = r;
    }
    let (ds, sha) = load_data(data_path, config)?;
    let config = &*config;
    let teachers = load_teachers(teacher_dir)?;
    let train = &config.student.train;
    let regime = train.regime;
    let k = if regime == Regime::Ume { 1 } else { config.teachers.k };
    let (need_a, need_b) = regime.teachers_needed(&train.weights);
    let ens_a = ensemble(&teachers, Modality::A, k);
    let ens_b = ensemble(&teachers, Modality::B, k);
    for (need, ens, m) in [(need_a, &ens_a, Modality::A), (need_b, &ens_b, Modality::B)] {
        if let (true, Err(e)) = (need, ens) {
            bail!(
                "regime `{}` ({}) needs a modality-{} teacher ensemble: {e:#}",
                regime.name(),
                regime.loss_row(),
                m.label()
            );
        }
    }
    let data = StudentData {
        spec_a: &config.student_spec(Modality::A),
        spec_b: &config.student_spec(Modality::B),
        task: ds.config.task,
        train: &ds.paired_train,
        val: &ds.paired_val,
        test: &ds.paired_test,
    };
    let n_boot = config.evaluation.n_bootstrap;
    let mut run = RunDir::create(out)?;
    let (report, student_params, log) = if regime == Regime::Ume {
        let a = ens_a.as_ref().map_err(|e| anyhow::anyhow!("{e:#}"))?;
        let b = ens_b.as_ref().map_err(|e| anyhow::anyhow!("{e:#}"))?;
        let report = evaluate_ume(a, b, &ds.paired_test, n_boot, config.seed)?;
        (report, a.num_params() + b.num_params(), None)
    } else {
        let t = Teachers {
            a: ens_a.as_ref().ok().filter(|_| need_a),
            b: ens_b.as_ref().ok().filter(|_| need_b),
        };
        let (model, result) = run_student(data, t, train, n_boot)?;
        run.write(
            STUDENT_FILE,
            checkpoint::encode_fusion(&model, train.seed, result.log.best_epoch, Some(result.log.best_val_auroc)),
        )?;
        run.write("epochs.csv", result.log.epochs_csv())?;
        run.write("batches.csv", result.log.batches_csv())?;
        if regime.has_unimodal_heads() {
            run.write("utilization.csv", result.log.utilization_csv())?;
        }
        (result.report, result.model_params, Some(result.log))
    };
    run.write_json("report.json", &report)?;
    run.write("report.csv", report.table_csv())?;
    print!("{}", report.table_csv());
    ensure_defined(&report, "train-student")?;
    let params = match (&ens_a, &ens_b) {
        (Ok(a), Ok(b)) => param_counts(student_params, a, b),
        _ => json!({ "student": student_params }),
    };
    let summary = json!({
        "regime": regime.name(),
        "loss": regime.loss_row(),
        "weights": train.weights,
        "best_epoch": log.as_ref().map(|l| l.best_epoch),
        "stopped_epoch": log.as_ref().map(|l| l.stopped_epoch),
        "best_val_auroc": log.as_ref().map(|l| l.best_val_auroc),
        "test": best_metrics(&report),
        "param_counts": params,
    });
    run.finish("train-student", config, Some(&sha), summary)
}

pub fn evaluate(config: &mut RunConfig, out: &Path, data_path: &Path, runs: &[PathBuf]) -> Result<Value> {
    if runs.is_empty() {
        bail!("evaluate needs at least one --run directory");
    }
    let (ds, sha) = load_data(data_path, config)?;
    let config = &*config;
    let mut names: Vec<String> = Vec::new();
    let mut reports = Vec::new();
    for dir in runs {
        let manifest: Value = serde_json::from_str(
            &fs::read_to_string(dir.join(MANIFEST_FILE)).with_context(|| format!("reading {}/{MANIFEST_FILE}", dir.display()))?,
        )?;
        let regime: Regime = manifest["summary"]["regime"]
            .as_str()
            .context("run manifest lacks summary.regime")?
            .parse()
            .map_err(anyhow::Error::msg)?;
        let ckpt = dir.join(STUDENT_FILE);
        if !ckpt.exists() {
            bail!("{} has no {STUDENT_FILE} (regime `{}` trains no model)", dir.display(), regime.name());
        }
        let (model, _) = checkpoint::load_fusion(&ckpt)?;
        let report = evaluate_student(&model, regime, &ds.paired_test, config.evaluation.n_bootstrap, config.seed)?;
        let base = dir.file_name().map_or("run".into(), |n| n.to_string_lossy().into_owned());
        let mut name = base.clone();
        let mut i = 2;
        while names.contains(&name) {
            name = format!("{base}_{i}");
            i += 1;
        }
        names.push(name);
        reports.push(report);
    }
    let mut run = RunDir::create(out)?;
    let mut csv = String::from("label");
    for n in &names {
        write!(csv, ",{n}_auroc,{n}_auprc")?;
    }
    csv.push('\n');
    for j in 0..ds.config.task.outputs() {
        write!(csv, "{j}")?;
        for r in &reports {
            write!(csv, ",{},{}", r.fusion.per_label_auroc[j], r.fusion.per_label_auprc[j])?;
        }
        csv.push('\n');
    }
    print!("{csv}");
    run.write("labelwise.csv", &csv)?;
    let by_name: BTreeMap<&String, &StudentReport> = names.iter().zip(&reports).collect();
    run.write_json("evaluation.json", &by_name)?;
    for (n, r) in names.iter().zip(&reports) {
        ensure_defined(r, &format!("evaluate {n}"))?;
    }
    let summary = json!({
        "runs": names.iter().zip(&reports).map(|(n, r)| (n.clone(), best_metrics(r))).collect::<BTreeMap<_, _>>(),
    });
    run.finish("evaluate", config, Some(&sha), summary)
}

struct AllTeachers {
    ens_a: TeacherEnsemble,
    ens_b: TeacherEnsemble,
    best_a: TeacherEnsemble,
    best_b: TeacherEnsemble,
}

fn all_teachers(config: &RunConfig, dir: &Path) -> Result<AllTeachers> {
    let t = load_teachers(dir)?;
    Ok(AllTeachers {
        ens_a: ensemble(&t, Modality::A, config.teachers.k)?,
        ens_b: ensemble(&t, Modality::B, config.teachers.k)?,
        best_a: ensemble(&t, Modality::A, 1)?,
        best_b: ensemble(&t, Modality::B, 1)?,
    })
}

pub fn ablate(config: &mut RunConfig, out: &Path, data_path: &Path, teacher_dir: &Path) -> Result<Value> {
    let (ds, sha) = load_data(data_path, config)?;
    let config = &*config;
    let t = all_teachers(config, teacher_dir)?;
    let data = StudentData {
        spec_a: &config.student_spec(Modality::A),
        spec_b: &config.student_spec(Modality::B),
        task: ds.config.task,
        train: &ds.paired_train,
        val: &ds.paired_val,
        test: &ds.paired_test,
    };
    let teachers = AblationTeachers {
        ensemble_a: &t.ens_a,
        ensemble_b: &t.ens_b,
        best_a: &t.best_a,
        best_b: &t.best_b,
    };
    let rows = run_ablation(data, teachers, &config.student.train, config.student.tuned_omega, config.evaluation.n_bootstrap)?;
    let mut run = RunDir::create(out)?;
    for r in &rows {
        run.write(&format!("setting{}_epochs.csv", r.setting), r.result.log.epochs_csv())?;
        if r.regime.has_unimodal_heads() {
            run.write(&format!("setting{}_utilization.csv", r.setting), r.result.log.utilization_csv())?;
        }
    }
    let table = ablation_csv(&rows);
    print!("{table}");
    run.write("ablation.csv", &table)?;
    let detail: Vec<Value> = rows
        .iter()
        .map(|r| {
            json!({
                "setting": r.setting,
                "label": r.label,
                "regime": r.regime,
                "omega": r.omega,
                "ensemble": r.ensemble,
                "best_epoch": r.result.log.best_epoch,
                "stopped_epoch": r.result.log.stopped_epoch,
                "best_val_auroc": r.result.log.best_val_auroc,
                "report": r.result.report,
            })
        })
        .collect();
    run.write_json("ablation.json", &detail)?;
    for r in &rows {
        ensure_defined(&r.result.report, &format!("ablation setting {}", r.setting))?;
    }
    let student = rows.first().map_or(0, |r| r.result.model_params);
    let summary = json!({
        "tuned_omega": config.student.tuned_omega,
        "fusion_auroc": rows.iter().map(|r| r.fusion_auroc()).collect::<Vec<_>>(),
        "param_counts": param_counts(student, &t.ens_a, &t.ens_b),
    });
    run.finish("ablate", config, Some(&sha), summary)
}

pub fn sweep(config: &mut RunConfig, out: &Path, data_path: &Path, teacher_dir: &Path) -> Result<Value> {
    let (ds, sha) = load_data(data_path, config)?;
    let config = &*config;
    let t = all_teachers(config, teacher_dir)?;
    let data = StudentData {
        spec_a: &config.student_spec(Modality::A),
        spec_b: &config.student_spec(Modality::B),
        task: ds.config.task,
        train: &ds.paired_train,
        val: &ds.paired_val,
        test: &ds.paired_test,
    };
    let teachers = Teachers {
        a: Some(&t.ens_a),
        b: Some(&t.ens_b),
    };
    let rows = utilization_sweep(
        data,
        teachers,
        &config.student.train,
        &config.student.sweep_omegas,
        config.evaluation.n_bootstrap,
    )?;
    let mut run = RunDir::create(out)?;
    let mut table = String::from("omega_a,omega_b,mean_abs_d_util,mean_u_A,mean_u_B,best_epoch,auroc_AB,auroc_A,auroc_B\n");
    for (i, r) in rows.iter().enumerate() {
        let u = &r.result.log.utilization;
        let mean = |f: fn(&trainer::UtilizationRow) -> f64| {
            if u.is_empty() { String::new() } else { (u.iter().map(f).sum::<f64>() / u.len() as f64).to_string() }
        };
        let rep = &r.result.report;
        let head = |m: Option<&mind_core::MetricsReport>| m.map_or(String::new(), |m| m.macro_auroc.value.to_string());
        writeln!(
            table,
            "{},{},{},{},{},{},{},{},{}",
            r.omega.0,
            r.omega.1,
            r.result.log.mean_abs_d_util().map_or(String::new(), |v| v.to_string()),
            mean(|x| x.u_a),
            mean(|x| x.u_b),
            r.result.log.best_epoch,
            rep.fusion.macro_auroc.value,
            head(rep.head_a.as_ref()),
            head(rep.head_b.as_ref()),
        )?;
        run.write(&format!("trace{}.csv", i + 1), r.result.log.utilization_csv())?;
    }
    print!("{table}");
    run.write("sweep.csv", &table)?;
    let panels: Vec<Panel<'_>> = rows
        .iter()
        .map(|r| Panel {
            title: format!("w = ({}, {})", r.omega.0, r.omega.1),
            rows: &r.result.log.utilization,
            best_epoch: r.result.log.best_epoch,
        })
        .collect();
    run.write("utilization.svg", utilization_chart(&panels))?;
    for r in &rows {
        ensure_defined(&r.result.report, &format!("sweep point {:?}", r.omega))?;
    }
    let summary = json!({
        "omegas": config.student.sweep_omegas,
        "mean_abs_d_util": rows.iter().map(|r| r.result.log.mean_abs_d_util()).collect::<Vec<_>>(),
    });
    run.finish("utilization-sweep", config, Some(&sha), summary)
}
