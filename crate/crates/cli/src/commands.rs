use std::collections::HashMap;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use chrono::Utc;
use pkg_core::backend::cache::{self, ResponseCache};
use pkg_core::backend::BackendRole;
use pkg_core::corpus::{self, TrainingManifest};
use pkg_core::eval::{self, EvalOptions, MetricReport, ReportFormat};
use pkg_core::guide::{self, Backends, StrategyKind};
use pkg_core::retrieval::{self, InvertedIndex};
use pkg_core::{DatasetSplit, GuidingStrategy, Prediction, SplitName, TaskKind};

use crate::config::{require_existing, PipelineConfig};
use crate::CliError;

pub const PREDICTIONS_FILE: &str = "predictions.jsonl";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const REPORT_STEM: &str = "report";

fn runtime(context: &str) -> impl FnOnce(io::Error) -> CliError + '_ {
    move |e| CliError::Runtime(format!("{context}: {e}"))
}

fn strategy_dir(kind: StrategyKind) -> String {
    kind.as_str().to_ascii_lowercase()
}

/// Creates `<output>/<name>-<timestamp>`, suffixing a counter on collision.
fn create_run_dir(output: &Path, name: &str) -> Result<PathBuf, CliError> {
    fs::create_dir_all(output).map_err(runtime("creating output directory"))?;
    let stamp = Utc::now().format("%Y%m%dT%H%M%S%.3fZ");
    let mut dir = output.join(format!("{name}-{stamp}"));
    let mut n = 1;
    while dir.exists() {
        dir = output.join(format!("{name}-{stamp}-{n}"));
        n += 1;
    }
    fs::create_dir(&dir).map_err(runtime("creating run directory"))?;
    Ok(dir)
}

/// Points `<output>/<link>` at `dir`, replacing any previous link.
fn update_link(output: &Path, link: &str, dir: &Path) -> Result<(), CliError> {
    let at = output.join(link);
    if at.symlink_metadata().is_ok() {
        fs::remove_file(&at).map_err(runtime("replacing link"))?;
    }
    let target = dir.file_name().map(PathBuf::from).unwrap_or_else(|| dir.to_path_buf());
    #[cfg(unix)]
    std::os::unix::fs::symlink(&target, &at).map_err(runtime("creating link"))?;
    #[cfg(windows)]
    std::os::windows::fs::symlink_dir(&target, &at).map_err(runtime("creating link"))?;
    Ok(())
}

fn load_split(cfg: &PipelineConfig, split: SplitName) -> Result<DatasetSplit, CliError> {
    let path = cfg.dataset_path(split)?;
    corpus::load_dataset(path, cfg.task_kind, split).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
}

pub fn cmd_prepare(cfg: &PipelineConfig) -> Result<(), CliError> {
    let templates = cfg.load_templates()?;
    let split = load_split(cfg, SplitName::Train)?;
    let mut triples = corpus::build_triples_with(&split, &templates).map_err(|e| CliError::Config(e.to_string()))?;
    let from_records = triples.len();
    let mut dropped = 0;
    if let Some(p) = &cfg.passages {
        let texts = corpus::load_passage_texts(p).map_err(|e| CliError::Config(e.to_string()))?;
        let (extra, d) = corpus::derive_passage_triples(&texts);
        triples.extend(extra);
        dropped = d;
    }
    if triples.is_empty() {
        return Err(CliError::Config("nothing to export: no triples were produced".into()));
    }

    let dir = create_run_dir(&cfg.output_dir, "prepare")?;
    let path = dir.join("training.json");
    corpus::export_training_file(&triples, &path, &TrainingManifest::for_task(cfg.task_kind))
        .map_err(|e| CliError::Runtime(e.to_string()))?;
    update_link(&cfg.output_dir, "prepare-latest", &dir)?;

    println!(
        "exported {} triples ({} from records, {} from passages, {} passages dropped) to {}",
        triples.len(),
        from_records,
        triples.len() - from_records,
        dropped,
        path.display()
    );
    for t in triples.iter().take(3) {
        println!("---\ninstruction: {}\ninput: {}\noutput: {}", t.instruction, t.input, t.output);
    }
    Ok(())
}

pub fn cmd_index(cfg: &PipelineConfig) -> Result<(), CliError> {
    let passages_path = cfg
        .passages
        .as_deref()
        .ok_or_else(|| CliError::Config("index needs a `passages` file".into()))?;
    let passages = retrieval::load_passages(passages_path).map_err(|e| CliError::Config(e.to_string()))?;
    let index = retrieval::build_index(&passages).map_err(|e| CliError::Config(e.to_string()))?;

    let path = match &cfg.index_path {
        Some(p) => {
            if let Some(parent) = p.parent() {
                fs::create_dir_all(parent).map_err(runtime("creating index directory"))?;
            }
            p.clone()
        }
        None => {
            let dir = create_run_dir(&cfg.output_dir, "index")?;
            update_link(&cfg.output_dir, "index-latest", &dir)?;
            dir.join("index.pkgi")
        }
    };
    index.save(&path).map_err(|e| CliError::Runtime(e.to_string()))?;
    println!(
        "indexed {} passages, avg length {:.2} tokens, saved to {}",
        index.doc_count,
        index.avg_doc_length,
        path.display()
    );
    Ok(())
}

pub fn cmd_run(cfg: &PipelineConfig, resume: bool) -> Result<(), CliError> {
    let split = load_split(cfg, cfg.eval_split)?;
    let templates = cfg.load_templates()?;
    let llm_cfg = cfg
        .llm_backend
        .as_ref()
        .ok_or_else(|| CliError::Config("`llm_backend` is required for run".into()))?;
    let pkg_cfg = match (cfg.strategy, &cfg.pkg_backend) {
        (StrategyKind::Pkg, None) => return Err(CliError::Config("the Pkg strategy needs `pkg_backend`".into())),
        (_, p) => p.as_ref(),
    };
    let strategy = match cfg.strategy {
        StrategyKind::Direct => GuidingStrategy::Direct,
        StrategyKind::Pkg => GuidingStrategy::Pkg,
        StrategyKind::CoT => GuidingStrategy::CoT,
        StrategyKind::GenRead => GuidingStrategy::GenRead,
        StrategyKind::Retrieval => {
            let path = cfg.resolved_index_path();
            require_existing(Some(&path), "index (run `pkg index` first or set index_path)")?;
            let index = InvertedIndex::load(&path).map_err(|e| CliError::Config(e.to_string()))?;
            GuidingStrategy::Retrieval {
                index: Arc::new(index),
                top_n: cfg.top_n,
                params: cfg.bm25_params(),
            }
        }
    };

    let name = strategy_dir(cfg.strategy);
    let latest = cfg.output_dir.join(format!("{name}-latest"));
    let previous: HashMap<String, Prediction> = if resume {
        if !latest.is_dir() {
            return Err(CliError::Config(format!("nothing to resume: {} does not exist", latest.display())));
        }
        let p = latest.join(PREDICTIONS_FILE);
        if p.exists() {
            guide::read_predictions(&p)
                .map_err(|e| CliError::Config(e.to_string()))?
                .into_iter()
                .filter(|p| p.error.is_none() && p.strategy == cfg.strategy)
                .map(|p| (p.record_id.clone(), p))
                .collect()
        } else {
            HashMap::new()
        }
    } else {
        HashMap::new()
    };

    let cache = match &cfg.cache_path {
        Some(p) => {
            if let Some(parent) = p.parent() {
                fs::create_dir_all(parent).map_err(runtime("creating cache directory"))?;
            }
            Some(Arc::new(ResponseCache::open(p).map_err(runtime("opening response cache"))?))
        }
        None => None,
    };
    let backends = Backends {
        pkg: pkg_cfg
            .map(|c| c.build(BackendRole::PkgModule, cache.as_ref()))
            .transpose()?,
        llm: llm_cfg.build(BackendRole::BlackBoxLlm, cache.as_ref())?,
    };

    let pending = DatasetSplit {
        task_kind: split.task_kind,
        split_name: split.split_name,
        records: split
            .records
            .iter()
            .filter(|r| !previous.contains_key(&r.id))
            .cloned()
            .collect(),
    };
    let run = guide::run_pipeline(
        &pending,
        &strategy,
        &backends,
        &templates,
        &cfg.generation,
        cfg.max_in_flight,
    )
    .map_err(|e| CliError::Config(e.to_string()))?;

    let mut fresh: HashMap<String, Prediction> = run.answers.iter().map(|a| (a.record_id.clone(), a.into())).collect();
    let merged: Vec<Prediction> = split
        .records
        .iter()
        .filter_map(|r| fresh.remove(&r.id).or_else(|| previous.get(&r.id).cloned()))
        .collect();

    let dir = if resume {
        fs::canonicalize(&latest).map_err(runtime("resolving resumed run"))?
    } else {
        create_run_dir(&cfg.output_dir, &name)?
    };
    guide::write_predictions(&dir.join(PREDICTIONS_FILE), &merged).map_err(|e| CliError::Runtime(e.to_string()))?;
    let manifest = serde_json::to_vec_pretty(&run.manifest).expect("manifest serializes");
    fs::write(dir.join(MANIFEST_FILE), manifest).map_err(runtime("writing manifest"))?;
    update_link(&cfg.output_dir, &format!("{name}-latest"), &dir)?;
    update_link(&cfg.output_dir, "latest", &dir)?;

    let m = &run.manifest;
    println!(
        "{}: {} records run, {} reused, {} failed; llm calls {} (cache hits {}), pkg calls {} (cache hits {}); output {}",
        cfg.strategy,
        pending.records.len(),
        split.records.len() - pending.records.len(),
        m.failures.len(),
        m.llm_network_calls,
        m.llm_cache_hits,
        m.pkg_network_calls,
        m.pkg_cache_hits,
        dir.display()
    );

    let failed_fraction = m.failures.len() as f64 / split.records.len().max(1) as f64;
    if failed_fraction > cfg.failure_budget {
        return Err(CliError::Budget(format!(
            "{} of {} records failed, above the failure budget of {}; rerun with `run --resume` to retry them",
            m.failures.len(),
            split.records.len(),
            cfg.failure_budget
        )));
    }
    Ok(())
}

pub fn cmd_eval(cfg: &PipelineConfig, predictions: Option<&Path>, opts: EvalOptions) -> Result<MetricReport, CliError> {
    let path = predictions
        .map(Path::to_path_buf)
        .unwrap_or_else(|| cfg.output_dir.join("latest").join(PREDICTIONS_FILE));
    require_existing(Some(&path), "predictions")?;
    let split = load_split(cfg, cfg.eval_split)?;

    let preds = guide::read_predictions(&path).map_err(|e| CliError::Scoring(e.to_string()))?;
    let report = if cfg.task_kind == TaskKind::ScienceMCQ {
        eval::sciqa_breakdown(&preds, &split, opts)
    } else {
        eval::accuracy(&preds, &split, opts)
    }
    .map_err(|e| CliError::Scoring(e.to_string()))?;

    let dir = path.parent().unwrap_or(Path::new("."));
    for format in ReportFormat::ALL {
        let out = dir.join(format!("{REPORT_STEM}.{}", format.extension()));
        eval::emit_report(&report, format, &out).map_err(|e| CliError::Runtime(e.to_string()))?;
    }
    print!("{}", eval::render_markdown(&report));
    println!(
        "accuracy {:.4} ({}/{}), {} unparsed; reports in {}",
        report.overall,
        report.correct,
        report.total,
        report.n_unparsed,
        dir.display()
    );
    Ok(report)
}

pub fn cmd_report(cfg: &PipelineConfig, reports: &[PathBuf]) -> Result<String, CliError> {
    let paths: Vec<PathBuf> = if reports.is_empty() {
        StrategyKind::ALL
            .iter()
            .map(|k| {
                cfg.output_dir
                    .join(format!("{}-latest", strategy_dir(*k)))
                    .join(format!("{REPORT_STEM}.json"))
            })
            .filter(|p| p.exists())
            .collect()
    } else {
        for p in reports {
            require_existing(Some(p), "report")?;
        }
        reports.to_vec()
    };
    if paths.is_empty() {
        return Err(CliError::Config(format!(
            "no reports given and none found under {}",
            cfg.output_dir.display()
        )));
    }
    let loaded = paths
        .iter()
        .map(|p| eval::load_report(p).map_err(|e| CliError::Scoring(e.to_string())))
        .collect::<Result<Vec<_>, _>>()?;
    let table = eval::comparison_table(&loaded);

    let dir = create_run_dir(&cfg.output_dir, "report")?;
    fs::write(dir.join("comparison.md"), &table).map_err(runtime("writing comparison"))?;
    update_link(&cfg.output_dir, "report-latest", &dir)?;
    print!("{table}");
    Ok(table)
}

pub fn cmd_compact_cache(cfg: &PipelineConfig) -> Result<(), CliError> {
    let path = cfg
        .cache_path
        .as_deref()
        .ok_or_else(|| CliError::Config("no `cache_path` configured".into()))?;
    require_existing(Some(path), "cache_path")?;
    let (before, after) = cache::compact(path).map_err(runtime("compacting cache"))?;
    println!("cache records: {before} before, {after} after");
    Ok(())
}
