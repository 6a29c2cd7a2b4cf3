use std::path::{Path, PathBuf};

use molgnn::molgraph::io::{load_split, load_vocab, write_split};
use molgnn::molgraph::{load_conformer_dataset, load_graph_dataset, make_new_splits, Dataset, FeatureVocab, SplitSpec};
use molgnn::train::{
    deterministic_forced_by_env, ensemble_average, fit, load_checkpoint, read_predictions, save_checkpoint,
    write_predictions, MetricsWriter, ModelKind, PredictionRow, TrainState,
};
use molgnn::verify::{run_suite, Suite, VerifyOptions};

use crate::config::{Overrides, RunConfig};
use crate::error::{CliError, CliResult};
use crate::manifest::ManifestBuilder;

fn load_dataset(graphs: &Path, conformers: Option<&Path>, vocab: Option<FeatureVocab>) -> CliResult<Dataset> {
    let (graphs_list, vocab) = load_graph_dataset(graphs, vocab)?;
    let sets = conformers
        .map(|p| load_conformer_dataset(p, &graphs_list))
        .transpose()?;
    let mut data = Dataset::new(graphs_list, vocab)?;
    if let Some(sets) = sets {
        data = data.with_conformers(sets);
    }
    Ok(data)
}

fn create_dir(dir: &Path) -> CliResult<()> {
    std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))
}

/// `<file>.manifest.json` next to a single output file.
fn sidecar(out: &Path) -> PathBuf {
    let mut name = out.file_name().unwrap_or_default().to_os_string();
    name.push(".manifest.json");
    out.with_file_name(name)
}

/// Every split id must exist; training and validation ids need targets.
fn check_split(data: &Dataset, split: &SplitSpec) -> CliResult<()> {
    for (part, ids, need_target) in [
        ("train", &split.train, true),
        ("valid", &split.valid, true),
        ("test", &split.test, false),
    ] {
        for id in ids {
            let g = data
                .get(id)
                .map_err(|_| molgnn::Error::Invalid(format!("{part} id `{id}` is not in the graphs file")))?;
            if need_target && g.target.is_none() {
                return Err(molgnn::Error::Invalid(format!("{part} id `{id}` has no target")).into());
            }
        }
    }
    Ok(())
}

pub struct PrepareSplitsArgs {
    pub graphs: Option<PathBuf>,
    pub base_split: PathBuf,
    pub folds: usize,
    pub seed: u64,
    pub out: PathBuf,
}

pub fn prepare_splits(args: PrepareSplitsArgs) -> CliResult<()> {
    if args.folds == 0 {
        return Err(CliError::Usage("--folds must be at least 1".into()));
    }
    let mut manifest = ManifestBuilder::start("prepare-splits");
    manifest.seed(args.seed).input(&args.base_split);
    let base = load_split(&args.base_split)?;
    if let Some(g) = &args.graphs {
        let data = load_dataset(g, None, None)?;
        check_split(&data, &base)?;
        manifest.input(g);
    }
    let folds = make_new_splits(&base, args.folds, args.seed)?;
    create_dir(&args.out)?;
    for (k, fold) in folds.iter().enumerate() {
        let path = args.out.join(format!("fold-{k}.json"));
        write_split(&path, fold)?;
        manifest.output(&path);
        eprintln!(
            "{}: {} train / {} valid / {} test",
            path.display(),
            fold.train.len(),
            fold.valid.len(),
            fold.test.len()
        );
    }
    manifest.config(&serde_json::json!({ "folds": args.folds, "seed": args.seed }))?;
    manifest.note("folds", folds.len());
    manifest.finish(&args.out.join("manifest.json"))?;
    Ok(())
}

pub struct TrainArgs {
    pub model: ModelKind,
    pub graphs: PathBuf,
    pub conformers: Option<PathBuf>,
    pub split: PathBuf,
    pub config: Option<PathBuf>,
    pub vocab: Option<PathBuf>,
    pub out: PathBuf,
    pub overrides: Overrides,
    pub quiet: bool,
}

pub fn train(args: TrainArgs) -> CliResult<()> {
    if args.model == ModelKind::ThreeD && args.conformers.is_none() {
        return Err(CliError::Usage("--model 3d requires --conformers".into()));
    }
    let mut cfg = match &args.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::defaults(args.model),
    };
    if cfg.kind() != args.model {
        return Err(CliError::Usage(format!(
            "--model {} but the config describes a {} model",
            args.model,
            cfg.kind()
        )));
    }
    args.overrides.apply(&mut cfg);
    if deterministic_forced_by_env() {
        cfg.train.deterministic = true;
    }
    cfg.train.validate()?;

    let mut manifest = ManifestBuilder::start("train");
    manifest.input(&args.graphs).input(&args.split);
    for p in [&args.conformers, &args.config, &args.vocab].into_iter().flatten() {
        manifest.input(p);
    }
    let vocab = args.vocab.as_deref().map(load_vocab).transpose()?;
    let data = load_dataset(&args.graphs, args.conformers.as_deref(), vocab)?;
    let split = load_split(&args.split)?;
    check_split(&data, &split)?;

    create_dir(&args.out)?;
    let best_path = args.out.join("best.ckpt");
    let final_path = args.out.join("final.ckpt");
    let metrics_path = args.out.join("metrics.jsonl");

    let mut state = TrainState::new(cfg.model.clone(), cfg.train.clone(), &data)?;
    if args.model == ModelKind::ThreeD {
        let missing = split
            .train
            .iter()
            .filter(|id| data.conformers_of(id).is_empty())
            .count();
        if missing > 0 {
            manifest.warn(format!(
                "{missing} training molecules have no conformers and were skipped"
            ));
        }
        manifest.note("train_without_conformers", missing);
    }
    let mut metrics = MetricsWriter::create(&metrics_path)?;
    let quiet = args.quiet;
    let history = fit(&mut state, &data, &split, |rec, st, improved| {
        metrics.write(rec)?;
        if improved {
            save_checkpoint(st, &best_path)?;
        }
        if !quiet {
            let valid = rec.valid_mae.map_or("-".to_string(), |v| format!("{v:.5}"));
            eprintln!(
                "epoch {:>4}  lr {:.2e}  train {:.5}  valid {valid}{}",
                rec.epoch,
                rec.lr,
                rec.train_mae,
                if improved { "  *" } else { "" }
            );
        }
        Ok(())
    })?;
    save_checkpoint(&state, &final_path)?;
    if split.valid.is_empty() {
        std::fs::copy(&final_path, &best_path).map_err(|e| CliError::io(&best_path, e))?;
        manifest.warn("split has no validation ids; best.ckpt is the final model");
    }

    manifest
        .seed(cfg.train.seed)
        .deterministic(cfg.train.deterministic)
        .config(&cfg)?
        .output(&best_path)
        .output(&final_path)
        .output(&metrics_path);
    manifest.note("epochs", history.len());
    if let Some(best) = state.best_valid_mae {
        manifest.note("best_valid_mae", best);
    }
    manifest.finish(&args.out.join("manifest.json"))?;
    Ok(())
}

pub struct PredictArgs {
    pub checkpoint: PathBuf,
    pub graphs: PathBuf,
    pub conformers: Option<PathBuf>,
    pub ids: PathBuf,
    pub out: PathBuf,
    pub batch_size: usize,
}

/// One id per line; blank lines and `#` comments are ignored.
pub fn read_ids(path: &Path) -> CliResult<Vec<String>> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    Ok(text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .map(String::from)
        .collect())
}

pub fn predict(args: PredictArgs) -> CliResult<()> {
    if args.batch_size == 0 {
        return Err(CliError::Usage("--batch-size must be at least 1".into()));
    }
    let state = load_checkpoint(&args.checkpoint)?;
    let model = state.model;
    if model.kind() == ModelKind::ThreeD && args.conformers.is_none() {
        return Err(CliError::Usage("a 3d checkpoint requires --conformers".into()));
    }
    let mut manifest = ManifestBuilder::start("predict");
    manifest.input(&args.checkpoint).input(&args.graphs).input(&args.ids);
    if let Some(c) = &args.conformers {
        manifest.input(c);
    }
    let data = load_dataset(&args.graphs, args.conformers.as_deref(), Some(model.vocab().clone()))?;
    let ids = read_ids(&args.ids)?;
    if let Some(bad) = ids.iter().find(|id| !data.contains(id)) {
        return Err(molgnn::Error::Invalid(format!("unknown molecule id `{bad}`")).into());
    }
    let refs: Vec<&str> = ids.iter().map(String::as_str).collect();
    let preds = model.predict_ids(&data, &refs, args.batch_size)?;
    let rows: Vec<PredictionRow> = ids
        .iter()
        .zip(preds)
        .map(|(id, pred)| PredictionRow { id: id.clone(), pred })
        .collect();
    write_predictions(&args.out, &rows)?;

    let empty = rows.iter().filter(|r| r.pred.is_none()).count();
    if empty > 0 {
        manifest.warn(format!(
            "{empty} molecules have no conformers; their pred field is empty"
        ));
        eprintln!("warning: {empty} molecules without conformers left empty");
    }
    manifest
        .config(&serde_json::json!({ "model": model.config(), "batch_size": args.batch_size }))?
        .output(&args.out);
    manifest.note("rows", rows.len()).note("empty_predictions", empty);
    manifest.finish(&sidecar(&args.out))?;
    Ok(())
}

pub fn ensemble(inputs: &[PathBuf], out: &Path) -> CliResult<()> {
    if inputs.is_empty() {
        return Err(CliError::Usage("--inputs needs at least one file".into()));
    }
    let mut manifest = ManifestBuilder::start("ensemble");
    let tables = inputs
        .iter()
        .map(|p| {
            manifest.input(p);
            read_predictions(p)
        })
        .collect::<molgnn::Result<Vec<_>>>()?;
    let averaged = ensemble_average(&tables)?;
    let rows: Vec<PredictionRow> = averaged
        .into_iter()
        .map(|(id, v)| PredictionRow { id, pred: Some(v) })
        .collect();
    write_predictions(out, &rows)?;
    manifest.output(out);
    manifest.note("members", inputs.len()).note("rows", rows.len());
    manifest.finish(&sidecar(out))?;
    Ok(())
}

pub fn verify(suites: &[Suite], seed: u64, corrupt_gradients: bool) -> CliResult<()> {
    let opts = VerifyOptions {
        seed,
        corrupt_gradients,
    };
    let mut failed = 0;
    for &suite in suites {
        let report = run_suite(suite, &opts)?;
        println!("{report}");
        failed += report.failures().count();
        if report.checks.is_empty() {
            failed += 1;
        }
    }
    if failed > 0 {
        return Err(CliError::ChecksFailed(failed));
    }
    Ok(())
}
