use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use log::info;
use schemata_core::checkpoint::{load_checkpoint, load_checkpoint_for, save_checkpoint};
use schemata_core::data::{
    load_dataset, load_kb, load_vocabulary, save_dataset, save_kb, save_vocabulary, Vocabulary,
};
use schemata_core::evaluation::{
    pkg_link_predict, predict, report_from_predictions, RecallReport, ScenePrediction,
};
use schemata_core::gradcheck::run_suite;
use schemata_core::model::Model;
use schemata_core::srg::SceneInput;
use schemata_core::synth::{synth_generate, SynthParams, SynthWorldSpec};
use schemata_core::training::{resolve_kb, Trainer};
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::{
    write_err, CliError, EvalArgs, ExportArgs, GradcheckArgs, LinkArgs, ReportFormat, SchemaKind,
    SynthArgs, TrainArgs,
};

fn runtime(path: &Path, e: impl std::fmt::Display) -> CliError {
    CliError::Runtime(format!("{}: {e}", path.display()))
}

/// Writes to `path`, or to `fallback` when no path is given.
fn with_output(
    path: Option<&Path>,
    fallback: &mut dyn Write,
    f: impl FnOnce(&mut dyn Write) -> std::io::Result<()>,
) -> Result<(), CliError> {
    match path {
        Some(p) => {
            let file = fs::File::create(p).map_err(|e| runtime(p, e))?;
            let mut w = BufWriter::new(file);
            f(&mut w).and_then(|_| w.flush()).map_err(|e| runtime(p, e))
        }
        None => f(fallback).map_err(write_err),
    }
}

fn load_scenes(
    path: &Path,
    vocab: &Vocabulary,
    dim: usize,
) -> Result<Vec<SceneInput<f32>>, CliError> {
    let records = load_dataset(path, vocab, Some(dim))?;
    Ok(records
        .iter()
        .map(|r| SceneInput::from_record(r, vocab, dim))
        .collect::<Result<_, _>>()?)
}

fn default_log_path(out: &Path) -> PathBuf {
    let mut s = out.as_os_str().to_owned();
    s.push(".log.jsonl");
    PathBuf::from(s)
}

pub fn train(args: TrainArgs, out: &mut dyn Write) -> Result<(), CliError> {
    let mut cfg = match &args.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    cfg.apply_overrides(&args.set)?;
    // Dedicated flags win over both the file and --set.
    macro_rules! flag {
        ($($field:ident),*) => {$(
            if let Some(v) = args.$field.clone() {
                cfg.$field = v.into();
            }
        )*};
    }
    flag!(data, vocab, kb, out, log, seed, epochs, lr, assimilations);

    let vocab_path = cfg
        .vocab
        .clone()
        .ok_or_else(|| CliError::Usage("train needs a vocabulary (--vocab)".into()))?;
    let out_path = cfg
        .out
        .clone()
        .ok_or_else(|| CliError::Usage("train needs a checkpoint path (--out)".into()))?;
    if cfg.data.is_none() && cfg.kb.is_none() {
        return Err(CliError::Usage("train needs --data, --kb or both".into()));
    }
    let model_cfg = cfg.model();
    let train_cfg = cfg.train();
    model_cfg.validate()?;
    train_cfg.validate()?;

    let vocab = load_vocabulary(&vocab_path)?;
    let scenes = match &cfg.data {
        Some(p) => load_scenes(p, &vocab, model_cfg.dim)?,
        None => Vec::new(),
    };
    let kb = match &cfg.kb {
        Some(p) => resolve_kb(&load_kb(p, &vocab)?, &vocab)?,
        None => Vec::new(),
    };
    info!(
        "training on {} scenes and {} triples for {} epochs",
        scenes.len(),
        kb.len(),
        train_cfg.epochs
    );

    let mut model = Model::<f32>::new(
        model_cfg,
        vocab.objects().len(),
        vocab.predicates().len(),
        train_cfg.seed,
    )?;
    let mut trainer = Trainer::new(&model, train_cfg)?;
    let log_path = cfg
        .log
        .clone()
        .unwrap_or_else(|| default_log_path(&out_path));
    let mut log = BufWriter::new(fs::File::create(&log_path).map_err(|e| runtime(&log_path, e))?);
    let mut log_error = None;
    trainer.fit(&mut model, &scenes, &kb, |r| {
        let line = serde_json::to_string(r).expect("reports serialise");
        info!("{line}");
        if log_error.is_none() {
            log_error = writeln!(log, "{line}").err();
        }
    })?;
    if let Some(e) = log_error {
        return Err(runtime(&log_path, e));
    }
    log.flush().map_err(|e| runtime(&log_path, e))?;
    save_checkpoint(&out_path, &model, &vocab, trainer.steps())?;
    writeln!(out, "wrote {}", out_path.display()).map_err(write_err)?;
    Ok(())
}

fn predict_parallel(
    model: &Model<f32>,
    scenes: &[SceneInput<f32>],
    args: &EvalArgs,
) -> Result<Vec<ScenePrediction<f32>>, CliError> {
    let batch = args.batch_size.max(1);
    let workers = args.workers.max(1);
    let n_batches = scenes.len().div_ceil(batch);
    // Whole batches per worker keep the batching identical to a serial run.
    let per_worker = n_batches.div_ceil(workers).max(1) * batch;
    if workers == 1 || scenes.len() <= batch {
        return Ok(predict(
            model,
            scenes,
            args.task,
            args.assimilations,
            batch,
        )?);
    }
    let results = std::thread::scope(|s| {
        let handles: Vec<_> = scenes
            .chunks(per_worker)
            .map(|chunk| {
                s.spawn(move || predict(model, chunk, args.task, args.assimilations, batch))
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("evaluation worker panicked"))
            .collect::<Vec<_>>()
    });
    let mut out = Vec::with_capacity(scenes.len());
    for r in results {
        out.extend(r?);
    }
    Ok(out)
}

fn metric_columns(r: &RecallReport) -> Vec<(String, f64)> {
    let mut cols: Vec<(String, f64)> =
        r.k.iter()
            .zip(&r.recall)
            .map(|(k, v)| (format!("R@{k}"), *v))
            .collect();
    cols.extend(
        r.k.iter()
            .zip(&r.mean_recall)
            .map(|(k, v)| (format!("mR@{k}"), *v)),
    );
    cols
}

pub fn eval(args: EvalArgs, out: &mut dyn Write) -> Result<(), CliError> {
    if args.k.is_empty() || args.k.contains(&0) {
        return Err(CliError::Usage("--k needs positive values".into()));
    }
    let ckpt = match &args.vocab {
        Some(p) => load_checkpoint_for(&args.ckpt, &load_vocabulary(p)?)?,
        None => load_checkpoint(&args.ckpt)?,
    };
    let scenes = load_scenes(&args.data, &ckpt.vocab, ckpt.model.dim())?;
    let preds = predict_parallel(&ckpt.model, &scenes, &args)?;
    let reports = report_from_predictions(
        &scenes,
        &preds,
        args.task,
        args.constrained,
        &args.k,
        ckpt.model.n_predicate_classes,
    )?;

    match args.format {
        ReportFormat::Json => {
            for r in &reports {
                let line = serde_json::to_string(r).expect("reports serialise");
                writeln!(out, "{line}").map_err(write_err)?;
            }
        }
        ReportFormat::Text => {
            for r in &reports {
                let mode = if r.constrained {
                    "constrained"
                } else {
                    "unconstrained"
                };
                writeln!(
                    out,
                    "{} {mode} step {} ({} images)",
                    r.task, r.step, r.images
                )
                .map_err(write_err)?;
                let cols = metric_columns(r);
                let header: Vec<String> = cols.iter().map(|(n, _)| format!("{n:>8}")).collect();
                let values: Vec<String> = cols
                    .iter()
                    .map(|(_, v)| format!("{:>8.2}", 100.0 * v))
                    .collect();
                writeln!(out, "{}\n{}\n", header.join(" "), values.join(" ")).map_err(write_err)?;
            }
        }
    }
    if let Some(path) = &args.csv {
        let mut w = csv::Writer::from_path(path).map_err(|e| runtime(path, e))?;
        let mut header = vec!["step".to_string()];
        if let Some(r) = reports.first() {
            header.extend(metric_columns(r).into_iter().map(|(n, _)| n));
        }
        w.write_record(&header).map_err(|e| runtime(path, e))?;
        for r in &reports {
            let mut row = vec![r.step.to_string()];
            row.extend(metric_columns(r).into_iter().map(|(_, v)| v.to_string()));
            w.write_record(&row).map_err(|e| runtime(path, e))?;
        }
        w.flush().map_err(|e| runtime(path, e))?;
    }
    Ok(())
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct PairQuery {
    head: String,
    tail: String,
}

#[derive(Serialize)]
struct LinkRow<'a> {
    head: &'a str,
    tail: &'a str,
    rank: usize,
    predicate: &'a str,
    score: f64,
}

pub fn link_predict(args: LinkArgs, out: &mut dyn Write) -> Result<(), CliError> {
    let ckpt = load_checkpoint(&args.ckpt)?;
    let vocab = &ckpt.vocab;
    let text = fs::read_to_string(&args.pairs).map_err(|e| {
        let msg = format!("{}: {e}", args.pairs.display());
        if e.kind() == std::io::ErrorKind::NotFound {
            CliError::Usage(msg)
        } else {
            CliError::Runtime(msg)
        }
    })?;
    let mut queries = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let at = |m: String| CliError::Usage(format!("{}:{}: {m}", args.pairs.display(), i + 1));
        let q: PairQuery =
            serde_json::from_str(line).map_err(|e| at(format!("malformed pair: {e}")))?;
        let index = |name: &str| {
            vocab
                .object_index(name)
                .ok_or_else(|| at(format!("unknown object label {name:?}")))
        };
        queries.push((index(&q.head)?, index(&q.tail)?, q));
    }
    let mut rows = Vec::new();
    for (h, t, q) in &queries {
        for (rank, (p, score)) in pkg_link_predict(&ckpt.model, *h, *t, args.top)?
            .into_iter()
            .enumerate()
        {
            let row = LinkRow {
                head: &q.head,
                tail: &q.tail,
                rank: rank + 1,
                predicate: &vocab.predicates()[p],
                score,
            };
            rows.push(serde_json::to_string(&row).expect("rows serialise"));
        }
    }
    with_output(args.out.as_deref(), out, |w| {
        for r in &rows {
            writeln!(w, "{r}")?;
        }
        Ok(())
    })
}

/// Schema matrix with a class column, one row per class in vocabulary order.
pub fn schema_csv(
    ckpt: &schemata_core::checkpoint::Checkpoint,
    what: SchemaKind,
) -> Result<Vec<u8>, CliError> {
    let (bank, names) = match what {
        SchemaKind::ObjectSchema => (ckpt.model.schemata.objects, ckpt.vocab.objects()),
        SchemaKind::PredicateSchema => (ckpt.model.schemata.predicates, ckpt.vocab.predicates()),
    };
    let m = ckpt.model.params.get(bank);
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["class".to_string()];
    header.extend((0..m.cols()).map(|j| format!("e{j}")));
    let fail = |e: csv::Error| CliError::Runtime(format!("csv: {e}"));
    w.write_record(&header).map_err(fail)?;
    for (i, name) in names.iter().enumerate() {
        let mut row = vec![name.clone()];
        row.extend(m.row(i).iter().map(|v| v.to_string()));
        w.write_record(&row).map_err(fail)?;
    }
    w.into_inner()
        .map_err(|e| CliError::Runtime(format!("csv: {e}")))
}

pub fn export(args: ExportArgs, out: &mut dyn Write) -> Result<(), CliError> {
    let ckpt = load_checkpoint(&args.ckpt)?;
    let bytes = schema_csv(&ckpt, args.what)?;
    with_output(args.out.as_deref(), out, |w| w.write_all(&bytes))
}

fn read_synth_spec(path: &Path) -> Result<(Option<SynthParams>, Option<SynthWorldSpec>), CliError> {
    let text = fs::read_to_string(path)
        .map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
    let bad = |e: &dyn std::fmt::Display| CliError::Usage(format!("{}: {e}", path.display()));
    let is_json =
        path.extension().is_some_and(|e| e == "json") || text.trim_start().starts_with('{');
    if !is_json {
        return Ok((Some(toml::from_str(&text).map_err(|e| bad(&e))?), None));
    }
    let value: serde_json::Value = serde_json::from_str(&text).map_err(|e| bad(&e))?;
    if value.get("pkg").is_some() {
        Ok((
            None,
            Some(serde_json::from_value(value).map_err(|e| bad(&e))?),
        ))
    } else {
        Ok((
            Some(serde_json::from_value(value).map_err(|e| bad(&e))?),
            None,
        ))
    }
}

pub fn synth(args: SynthArgs, out: &mut dyn Write) -> Result<(), CliError> {
    let (params, world) = match &args.spec {
        Some(p) => read_synth_spec(p)?,
        None => (Some(SynthParams::default()), None),
    };
    let world = match (params, world) {
        (Some(mut p), _) => {
            macro_rules! flag {
                ($($arg:ident => $field:ident),*) => {$(
                    if let Some(v) = args.$arg {
                        p.$field = v;
                    }
                )*};
            }
            flag!(
                seed => seed,
                object_classes => n_object_classes,
                predicate_classes => n_predicate_classes,
                dim => dim,
                train_scenes => train_scenes,
                test_scenes => test_scenes,
                noise => feature_noise,
                occlusion => occlusion_rate
            );
            p.world()?
        }
        (None, Some(mut w)) => {
            if args.object_classes.is_some()
                || args.predicate_classes.is_some()
                || args.dim.is_some()
            {
                return Err(CliError::Usage(
                    "class counts and width are fixed by a complete world description".into(),
                ));
            }
            macro_rules! flag {
                ($($arg:ident => $field:ident),*) => {$(
                    if let Some(v) = args.$arg {
                        w.$field = v;
                    }
                )*};
            }
            flag!(
                seed => seed,
                train_scenes => train_scenes,
                test_scenes => test_scenes,
                noise => feature_noise,
                occlusion => occlusion_rate
            );
            w
        }
        (None, None) => unreachable!("knobs or a world are always read"),
    };
    let data = synth_generate(&world)?;
    let dir = &args.out;
    fs::create_dir_all(dir).map_err(|e| runtime(dir, e))?;
    save_vocabulary(&dir.join("vocab.json"), &data.vocab)?;
    save_dataset(&dir.join("train.jsonl"), &data.train)?;
    save_dataset(&dir.join("test.jsonl"), &data.test)?;
    save_kb(&dir.join("kb.jsonl"), &data.kb)?;
    let world_path = dir.join("world.json");
    fs::write(
        &world_path,
        serde_json::to_string(&world).expect("world serialises") + "\n",
    )
    .map_err(|e| runtime(&world_path, e))?;
    writeln!(
        out,
        "wrote {} train and {} test scenes, {} triples to {}",
        data.train.len(),
        data.test.len(),
        data.kb.len(),
        dir.display()
    )
    .map_err(write_err)
}

pub fn gradcheck(args: GradcheckArgs, out: &mut dyn Write) -> Result<(), CliError> {
    let results = run_suite(args.seed, args.inject_fault)?;
    let width = results
        .iter()
        .map(|r| r.name.len())
        .max()
        .unwrap_or(4)
        .max(5);
    writeln!(
        out,
        "{:<width$}  {:>12}  {:>8}  result",
        "check", "max_rel_err", "tol"
    )
    .map_err(write_err)?;
    for r in &results {
        let verdict = if r.passed { "PASS" } else { "FAIL" };
        writeln!(
            out,
            "{:<width$}  {:>12.3e}  {:>8.0e}  {verdict}",
            r.name, r.max_rel_err, r.tol
        )
        .map_err(write_err)?;
    }
    let failed: Vec<&str> = results
        .iter()
        .filter(|r| !r.passed)
        .map(|r| r.name.as_str())
        .collect();
    if failed.is_empty() {
        Ok(())
    } else {
        Err(CliError::Runtime(format!(
            "gradient check failed: {}",
            failed.join(", ")
        )))
    }
}
