//! The `train` command: builds or resumes a session, runs one stage and
//! writes checkpoints plus a loss history.

use std::io::Write;
use std::path::{Path, PathBuf};

use bokeh_core::features::FeatureExtractor;
use bokeh_core::trainer::{summarize, ExtractorKind, Session, StepRecord, TrainConfig};
use bokeh_core::Error;
use serde::Serialize;

use crate::ckpt::{load_checkpoint, save_checkpoint};
use crate::config::load_config;
use crate::dataset::{load_pairs, read_cleaning_list, DatasetSpec, Split};
use crate::error::{AppError, Result};

pub fn build_extractor(cfg: &TrainConfig) -> Result<FeatureExtractor<f32>> {
    Ok(match cfg.extractor {
        ExtractorKind::Desk => FeatureExtractor::desk(cfg.extractor_seed),
        ExtractorKind::Identity => FeatureExtractor::identity(),
        ExtractorKind::Pretrained => {
            if cfg.extractor_weights.is_empty() {
                return Err(AppError::Config { path: "<config>".into(), reason: "extractor = \"pretrained\" needs extractor_weights".into() });
            }
            let weights = load_checkpoint(Path::new(&cfg.extractor_weights))?;
            FeatureExtractor::vgg19_relu5_4(|name| weights.arrays.get(name).cloned())?
        }
    })
}

#[derive(Clone, Debug)]
pub struct TrainArgs {
    pub stage: u8,
    pub config: Option<PathBuf>,
    pub data: PathBuf,
    pub split: Split,
    pub cleaning: Option<PathBuf>,
    pub resume: Option<PathBuf>,
    pub out: PathBuf,
}

#[derive(Serialize)]
struct HistoryLine<'a> {
    stage: u8,
    epoch: u64,
    step: u64,
    total: f64,
    terms: &'a std::collections::BTreeMap<String, f64>,
    critic: Vec<&'a std::collections::BTreeMap<String, f64>>,
    warnings: &'a [String],
}

/// Written next to the checkpoint as `<out>.history.jsonl`; resumed runs append.
pub fn history_path(out: &Path) -> PathBuf {
    let mut s = out.as_os_str().to_owned();
    s.push(".history.jsonl");
    PathBuf::from(s)
}

fn append_history(path: &Path, records: &[StepRecord]) -> Result<()> {
    let mut f = std::fs::OpenOptions::new().create(true).append(true).open(path).map_err(|e| AppError::io(path, e))?;
    for r in records {
        let line = HistoryLine {
            stage: r.stage,
            epoch: r.epoch,
            step: r.step,
            total: r.generator.total,
            terms: &r.generator.per_term,
            critic: r.critic.iter().map(|c| &c.per_term).collect(),
            warnings: &r.warnings,
        };
        writeln!(f, "{}", serde_json::to_string(&line).expect("history serializes")).map_err(|e| AppError::io(path, e))?;
    }
    Ok(())
}

/// Runs the requested stage to the end of its schedule. Returns the number of steps taken.
pub fn run_train(args: &TrainArgs, log: &mut dyn Write) -> Result<u64> {
    let mut spec = DatasetSpec::new(&args.data, args.split);
    if let Some(p) = &args.cleaning {
        spec.cleaning_list = Some(read_cleaning_list(p)?);
    }
    let (samples, report) = load_pairs(&spec)?;
    let _ = writeln!(log, "loaded {} pairs ({} skipped, {} cleaned)", report.loaded.len(), report.skipped.len(), report.cleaned.len());
    for (id, why) in &report.skipped {
        let _ = writeln!(log, "  skipped {id}: {why}");
    }
    let mut session = match &args.resume {
        Some(path) => {
            let ckpt = load_checkpoint(path)?;
            let cfg = TrainConfig::from_checkpoint(&ckpt)?;
            if args.config.is_some() {
                let _ = writeln!(log, "note: --config ignored, resuming with the configuration stored in {}", path.display());
            }
            Session::from_checkpoint(&ckpt, samples, build_extractor(&cfg)?)?
        }
        None => {
            let cfg = match &args.config {
                Some(p) => load_config(p, &TrainConfig::default())?,
                None => TrainConfig::default(),
            };
            let fx = build_extractor(&cfg)?;
            Session::new(cfg, samples, fx)?
        }
    };
    match (args.stage, session.stage) {
        (1, 1) | (2, 2) => {}
        (2, 1) => session.begin_stage2(),
        (1, 2) => return Err(AppError::Usage("checkpoint is already in stage 2; use --stage 2".into())),
        (s, _) => return Err(AppError::Usage(format!("--stage must be 1 or 2, got {s}"))),
    }
    let history = history_path(&args.out);
    if let Some(dir) = history.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| AppError::io(dir, e))?;
    }
    if args.resume.is_none() {
        std::fs::write(&history, b"").map_err(|e| AppError::io(&history, e))?;
    }
    let chunk = match session.config.schedule.checkpoint_every {
        0 => u64::MAX,
        n => n,
    };
    let mut taken = 0;
    while session.remaining() > 0 {
        let records = match session.run(chunk) {
            Ok(r) => r,
            Err(e @ Error::NonFinite { .. }) => {
                let mut diag = session.checkpoint();
                diag.meta.insert("abort_reason".into(), e.to_string());
                let mut path = args.out.clone().into_os_string();
                path.push(".diag");
                save_checkpoint(Path::new(&path), &diag)?;
                let _ = writeln!(log, "aborted: {e}; diagnostic checkpoint written to {}", Path::new(&path).display());
                return Err(e.into());
            }
            Err(e) => return Err(e.into()),
        };
        taken += records.len() as u64;
        append_history(&history, &records)?;
        save_checkpoint(&args.out, &session.checkpoint())?;
        let means = summarize(&records);
        let _ = writeln!(
            log,
            "stage {} step {}/{}: mean loss {:.5}",
            session.stage,
            session.step,
            session.stage_steps(),
            means.get("generator.total").copied().unwrap_or(f64::NAN)
        );
        for r in &records {
            for w in &r.warnings {
                let _ = writeln!(log, "warning at step {}: {w}", r.step);
            }
        }
    }
    save_checkpoint(&args.out, &session.checkpoint())?;
    Ok(taken)
}
