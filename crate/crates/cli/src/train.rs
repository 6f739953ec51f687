use std::fmt;
use std::fs::{File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use anyhow::{Context, Result};
use clap::Args;
use unetdr::losses::LossKind;
use unetdr::preprocess::{list_cases, read_case};
use unetdr::trainer::{
    fold_data, k_fold_split, load_checkpoint, preprocess_cases, resume, save_checkpoint, train_stage1_with, train_stage2_with, Checkpoint, EpochEvent, Fold,
    TrainError, TrainOutcome,
};
use unetdr::volume::Volume;

use crate::config::Settings;

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Dataset root holding `case_*` directories.
    #[arg(long, value_name = "DIR")]
    data: PathBuf,
    /// Output root; fold k writes to `DIR/fold_k/`.
    #[arg(long, value_name = "DIR")]
    out: PathBuf,
    /// Training stage.
    #[arg(long, value_parser = clap::value_parser!(u8).range(1..=2))]
    stage: u8,
    /// Train only this fold (0-based); all folds otherwise.
    #[arg(long, value_name = "K")]
    fold: Option<usize>,
    /// Stage-2 loss. Stage 1 always uses Dice.
    #[arg(long, value_parser = ["dice", "tversky"])]
    loss: Option<String>,
    /// Checkpoint to continue from. Stage 2 starts from a stage-1
    /// checkpoint; a checkpoint of the requested stage resumes that run.
    /// A directory stands for `DIR/fold_k/stage1_best.ckpt` (stage 2) or
    /// `DIR/fold_k/stage1_last.ckpt` (stage 1) for every fold.
    #[arg(long, value_name = "CKPT")]
    resume: Option<PathBuf>,
    /// Maximum stage-1 epochs, or the exact number of stage-2 epochs.
    #[arg(long, value_name = "N")]
    epochs: Option<usize>,
    /// Seed for fold split, initialization, shuffling and augmentation.
    #[arg(long, value_name = "S")]
    seed: Option<u64>,
    /// Folds trained concurrently.
    #[arg(long, value_name = "J")]
    jobs: Option<usize>,
    /// Override one setting, as in the config file.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

/// Invalid flag combination; reported with exit status 2.
#[derive(Debug)]
pub struct UsageError(pub String);

impl fmt::Display for UsageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

pub fn best_path(dir: &Path, stage: u8) -> PathBuf {
    dir.join(format!("stage{stage}_best.ckpt"))
}

pub fn last_path(dir: &Path, stage: u8) -> PathBuf {
    dir.join(format!("stage{stage}_last.ckpt"))
}

fn log_path(dir: &Path, stage: u8) -> PathBuf {
    dir.join(format!("stage{stage}.log"))
}

fn apply_flags(args: &TrainArgs, settings: &mut Settings) -> Result<()> {
    for kv in &args.set {
        let (k, v) = kv.split_once('=').ok_or_else(|| usage(format!("--set expects KEY=VALUE, got {kv:?}")))?;
        settings.set(k.trim(), v.trim())?;
    }
    if let Some(seed) = args.seed {
        settings.set("seed", &seed.to_string())?;
    }
    if let Some(jobs) = args.jobs {
        settings.jobs = jobs;
    }
    if let Some(n) = args.epochs {
        match args.stage {
            1 => settings.train.stage1_max_epochs = n,
            _ => settings.train.stage2_epochs = n,
        }
    }
    if let Some(loss) = &args.loss {
        let kind: LossKind = loss.parse()?;
        if args.stage == 1 && kind != LossKind::Dice {
            return Err(usage("stage 1 trains with the Dice loss; --loss tversky applies to stage 2"));
        }
        settings.train.loss.kind = kind;
    }
    if args.stage == 2 && args.resume.is_none() {
        return Err(usage("stage 2 needs --resume with a stage-1 checkpoint"));
    }
    if settings.jobs == 0 {
        return Err(usage("--jobs must be at least 1"));
    }
    settings.train.validate()?;
    settings.model.validate()?;
    Ok(())
}

fn load_cases(root: &Path) -> Result<Vec<(String, Volume)>> {
    list_cases(root)?
        .into_iter()
        .map(|entry| {
            let v = read_case(&entry.dir).with_context(|| format!("reading case {}", entry.id))?;
            Ok((entry.id, v))
        })
        .collect()
}

/// Checkpoint a fold starts from, if any.
fn resume_source(args: &TrainArgs, fold: usize, single_fold: bool) -> Result<Option<PathBuf>> {
    let Some(path) = &args.resume else { return Ok(None) };
    if path.is_dir() {
        let dir = path.join(format!("fold_{fold}"));
        return Ok(Some(match args.stage {
            1 => last_path(&dir, 1),
            _ => best_path(&dir, 1),
        }));
    }
    if !single_fold {
        return Err(usage("a --resume file applies to one fold; add --fold or pass a directory"));
    }
    Ok(Some(path.clone()))
}

struct FoldLog {
    file: File,
    dir: PathBuf,
    fold: usize,
}

impl FoldLog {
    fn on_epoch(&mut self, e: &EpochEvent<'_>) -> Result<(), TrainError> {
        let io = |err: std::io::Error| TrainError::Data(format!("writing training output: {err}"));
        writeln!(self.file, "{}", e.record).map_err(io)?;
        self.file.flush().map_err(io)?;
        eprintln!("[fold {}] {}", self.fold, e.record);
        save_checkpoint(e.last, &last_path(&self.dir, e.record.stage))?;
        if e.improved {
            save_checkpoint(e.best, &best_path(&self.dir, e.record.stage))?;
        }
        Ok(())
    }
}

fn train_fold(args: &TrainArgs, settings: &Settings, cases: &[(String, Volume)], fold: &Fold, k: usize, single_fold: bool) -> Result<String> {
    let dir = args.out.join(format!("fold_{k}"));
    std::fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    let data = fold_data(cases, fold, settings.flips)?;
    let source = resume_source(args, k, single_fold)?;
    let start = match &source {
        Some(p) => Some(load_checkpoint(p).with_context(|| format!("loading {}", p.display()))?),
        None => None,
    };
    let continuing = start.as_ref().is_some_and(|c| c.stage == args.stage);
    let log = log_path(&dir, args.stage);
    let file = if continuing {
        OpenOptions::new().append(true).create(true).open(&log)
    } else {
        File::create(&log)
    }
    .with_context(|| format!("opening {}", log.display()))?;
    let mut logger = FoldLog { file, dir: dir.clone(), fold: k };
    let mut on_epoch = |e: &EpochEvent<'_>| logger.on_epoch(e);
    let (model, train) = (&settings.model, &settings.train);
    let outcome: TrainOutcome = match (args.stage, start) {
        (1, None) => train_stage1_with(&data, model, train, &mut on_epoch)?,
        (2, Some(c)) if c.stage == 1 => train_stage2_with(&c, &data, model, train, &mut on_epoch)?,
        (s, Some(last)) if last.stage == s => {
            let source = source.expect("checkpoint came from a path");
            let best_file = best_path(source.parent().unwrap_or(Path::new(".")), s);
            let best: Checkpoint =
                load_checkpoint(&best_file).with_context(|| format!("resuming needs the best checkpoint next to the last one: {}", best_file.display()))?;
            resume(&last, &best, &data, train, &mut on_epoch)?
        }
        (s, Some(c)) => return Err(usage(format!("cannot run stage {s} from a stage-{} checkpoint", c.stage))),
        (_, None) => unreachable!("stage 2 without --resume is rejected earlier"),
    };
    save_checkpoint(&outcome.last, &last_path(&dir, args.stage))?;
    save_checkpoint(&outcome.best, &best_path(&dir, args.stage))?;
    Ok(format!(
        "fold={k} stage={} epochs={} best_epoch={} best_val_dsc={} loss={}",
        args.stage,
        outcome.last.epoch,
        outcome.best.best_epoch,
        outcome.best.best_val_dsc,
        outcome.best.loss.kind.as_str()
    ))
}

pub fn train(args: &TrainArgs, mut settings: Settings) -> Result<()> {
    apply_flags(args, &mut settings)?;
    let raw = load_cases(&args.data)?;
    let ids: Vec<String> = raw.iter().map(|(id, _)| id.clone()).collect();
    let folds = k_fold_split(&ids, settings.train.folds, settings.train.seed)?;
    let selected: Vec<usize> = match args.fold {
        Some(k) if k >= folds.len() => return Err(usage(format!("--fold {k} is out of range; there are {} folds", folds.len()))),
        Some(k) => vec![k],
        None => (0..folds.len()).collect(),
    };
    std::fs::create_dir_all(&args.out).with_context(|| format!("creating {}", args.out.display()))?;
    let mut listing = String::new();
    for (k, f) in folds.iter().enumerate() {
        listing.push_str(&format!("fold={k} train={} val={}\n", f.train.join(","), f.val.join(",")));
    }
    std::fs::write(args.out.join("folds.txt"), listing)?;
    let cases = preprocess_cases(&raw, &settings.train.preprocess)?;
    eprintln!(
        "stage {}: {} cases, folds {:?}, {} job(s)",
        args.stage,
        cases.len(),
        selected,
        settings.jobs.min(selected.len())
    );

    let single = selected.len() == 1;
    let next = AtomicUsize::new(0);
    let results: Mutex<Vec<(usize, Result<String>)>> = Mutex::new(Vec::new());
    std::thread::scope(|scope| {
        for _ in 0..settings.jobs.min(selected.len()) {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                let Some(&k) = selected.get(i) else { break };
                let r = train_fold(args, &settings, &cases, &folds[k], k, single);
                results.lock().expect("result lock").push((k, r));
            });
        }
    });
    let mut results = results.into_inner().expect("result lock");
    results.sort_by_key(|(k, _)| *k);
    let mut first_error = None;
    for (k, r) in results {
        match r {
            Ok(summary) => println!("{summary}"),
            Err(e) => {
                eprintln!("error: fold {k}: {e:#}");
                first_error.get_or_insert(e);
            }
        }
    }
    first_error.map_or(Ok(()), Err)
}
