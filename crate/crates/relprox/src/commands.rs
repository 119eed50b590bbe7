//! The five subcommands as library functions. Each writes its outputs under
//! the configured output directory and reports failures through [`CliError`].

use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use relprox_core::gradcheck::{check_all_losses, GradCheckReport};
use relprox_core::metrics::{det_points, report, sample_pairs, EvalReport};
use relprox_core::synth::{generate_corpus, Corpus, Split, SyntheticUtterance};
use relprox_core::train::{Model, TrainConfig, TrainState};

use crate::ablation::{
    ablation_rows, directional_checks, render_table, run_ablation, run_one, OrderingCheck, RowResult,
};
use crate::checkpoint;
use crate::config::ExperimentConfig;
use crate::corpus_io::{read_corpus, write_corpus};
use crate::error::{CliError, IoContext, Result};
use crate::metrics_log::{append_eval, write_det, MetricsLog};

/// Command-line values that take precedence over the config file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub out_dir: Option<PathBuf>,
    /// Replaces the training (initialization and sampling) seed.
    pub seed: Option<u64>,
    pub deterministic: Option<bool>,
}

pub fn load_config(path: &Path, o: &Overrides) -> Result<ExperimentConfig> {
    let mut cfg = ExperimentConfig::load(path)?;
    if let Some(out) = &o.out_dir {
        cfg.out_dir = out.clone();
    }
    if let Some(seed) = o.seed {
        cfg.train.seed = seed;
    }
    if let Some(d) = o.deterministic {
        cfg.deterministic = d;
    }
    Ok(cfg)
}

/// Worker threads: `RELPROX_THREADS` if set to a positive integer, else the machine's cores.
pub fn thread_count() -> usize {
    std::env::var("RELPROX_THREADS")
        .ok()
        .and_then(|v| v.trim().parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
}

fn ensure_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).at(dir)
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).at(path)
}

pub fn gen_data(cfg: &ExperimentConfig, force: bool) -> Result<PathBuf> {
    let corpus = generate_corpus(&cfg.corpus)?;
    let dir = cfg.corpus_dir();
    ensure_dir(&dir)?;
    write_corpus(&dir, &corpus, force)?;
    Ok(dir)
}

pub fn load_corpus(cfg: &ExperimentConfig) -> Result<Corpus> {
    let dir = cfg.corpus_dir();
    if !dir.join(crate::corpus_io::MANIFEST).exists() {
        return Err(CliError::io(
            &dir,
            std::io::Error::new(std::io::ErrorKind::NotFound, "no corpus here; run gen-data first"),
        ));
    }
    read_corpus(&dir)
}

/// Runs the gradient suite and writes `gradcheck.txt`. A failing suite is
/// returned as an error after the report is written.
pub fn gradcheck(cfg: &ExperimentConfig) -> Result<GradCheckReport> {
    let report = check_all_losses(&cfg.gradcheck)?;
    ensure_dir(&cfg.out_dir)?;
    let s = report.settings;
    let mut text = format!(
        "# h={} rel_tol={} abs_tol={} kink_factor={} max_excluded={} seeds={:?}\n",
        s.h, s.rel_tol, s.abs_tol, s.kink_factor, s.max_excluded_fraction, cfg.gradcheck.seeds
    );
    for line in report.lines() {
        text.push_str(&line);
        text.push('\n');
    }
    write_text(&cfg.out_dir.join("gradcheck.txt"), &text)?;
    if !report.passed() {
        let failed: Vec<String> = report
            .entries
            .iter()
            .filter(|e| !e.passed)
            .map(|e| match e.worst {
                Some((m, a, n)) => format!("{} (coordinate {m}: analytic {a:e}, numeric {n:e})", e.name),
                None => e.name.clone(),
            })
            .collect();
        return Err(CliError::Check(format!("gradient check failed: {}", failed.join("; "))));
    }
    Ok(report)
}

#[derive(Debug, Clone, Default)]
pub struct TrainOptions {
    pub force: bool,
    pub resume: Option<PathBuf>,
    pub skip_gradcheck: bool,
}

pub fn checkpoint_path(out_dir: &Path, epoch: u32) -> PathBuf {
    out_dir.join("checkpoints").join(format!("epoch_{epoch:04}.ckpt"))
}

/// Highest-epoch checkpoint under `out_dir`.
pub fn latest_checkpoint(out_dir: &Path) -> Result<PathBuf> {
    let dir = out_dir.join("checkpoints");
    let mut best: Option<PathBuf> = None;
    for entry in fs::read_dir(&dir).at(&dir)? {
        let path = entry.at(&dir)?.path();
        let is_ckpt = path.extension().is_some_and(|e| e == "ckpt")
            && path.file_name().and_then(|n| n.to_str()).is_some_and(|n| n.starts_with("epoch_"));
        if is_ckpt && best.as_ref().is_none_or(|b| path > *b) {
            best = Some(path);
        }
    }
    best.ok_or_else(|| {
        CliError::io(&dir, std::io::Error::new(std::io::ErrorKind::NotFound, "no checkpoints; run train first"))
    })
}

/// Fields that must agree for a resumed run to continue the original one.
fn resumable(a: &TrainConfig, b: &TrainConfig) -> bool {
    let strip = |c: &TrainConfig| TrainConfig { epochs: 0, checkpoint_every: 0, ..c.clone() };
    strip(a) == strip(b)
}

/// Trains per the config, writing `metrics.csv` and checkpoints as it goes.
/// Outputs of completed epochs are kept if a later epoch fails.
pub fn train(cfg: &ExperimentConfig, opts: &TrainOptions, log: &mut dyn FnMut(&str)) -> Result<TrainState> {
    if !opts.skip_gradcheck {
        let r = gradcheck(cfg)?;
        log(&format!("gradcheck passed ({} losses)", r.entries.len()));
    }
    let corpus = load_corpus(cfg)?;
    let out = &cfg.out_dir;
    let metrics_path = out.join("metrics.csv");
    let (mut state, keep) = match &opts.resume {
        Some(path) => {
            let (state, saved) = checkpoint::load(path, &corpus)?;
            if !resumable(&saved, &cfg.train) {
                return Err(CliError::Config(format!(
                    "{} was trained with a different configuration; only epochs and checkpoint_every may change",
                    path.display()
                )));
            }
            log(&format!("resuming from {} at epoch {}", path.display(), state.epoch));
            let epoch = state.epoch;
            (state, Some(epoch))
        }
        None => {
            if metrics_path.exists() && !opts.force {
                return Err(CliError::Config(format!(
                    "{} already holds a training run; pass --force to overwrite",
                    out.display()
                )));
            }
            let ckpt_dir = out.join("checkpoints");
            if ckpt_dir.exists() {
                fs::remove_dir_all(&ckpt_dir).at(&ckpt_dir)?;
            }
            (TrainState::init(&corpus, &cfg.train)?, None)
        }
    };
    ensure_dir(out)?;
    write_text(&out.join("config.toml"), &cfg.to_toml())?;
    let mut metrics = MetricsLog::open(&metrics_path, keep)?;
    if keep.is_none() {
        checkpoint::save(&checkpoint_path(out, 0), &state, &cfg.train)?;
    }
    let every = cfg.train.checkpoint_every;
    let last = cfg.train.epochs;
    while state.epoch < last {
        let row = state.train_epoch(&corpus, &cfg.train)?;
        log(&format!(
            "epoch {:>3} step {:>6} lr {:.3e} loss {:.5} dev AP {:.2}% EER {:.2}%",
            row.epoch,
            row.step,
            row.lr,
            row.loss_total,
            100.0 * row.dev_ap,
            100.0 * row.dev_eer
        ));
        metrics.append(&row)?;
        if (every > 0 && row.epoch % every == 0) || row.epoch == last {
            checkpoint::save(&checkpoint_path(out, row.epoch), &state, &cfg.train)?;
        }
    }
    Ok(state)
}

pub fn parse_split(s: &str) -> Result<Split> {
    match s {
        "train" => Ok(Split::Train),
        "dev" => Ok(Split::Dev),
        "test" => Ok(Split::Test),
        other => Err(CliError::Config(format!("unknown split {other:?}; expected train, dev or test"))),
    }
}

#[derive(Debug, Clone, serde::Serialize)]
pub struct EvalOutput {
    pub checkpoint: PathBuf,
    pub split: Split,
    pub epoch: u32,
    pub report: EvalReport,
}

/// Scores `split` with a model and returns the report and the DET points.
pub fn evaluate_model(
    model: &Model,
    corpus: &Corpus,
    split: Split,
    eval: &relprox_core::train::EvalConfig,
) -> Result<(EvalReport, Vec<relprox_core::metrics::DetPoint>)> {
    let utterances: Vec<&SyntheticUtterance> = corpus.utterances.iter().filter(|u| u.split == split).collect();
    let classes = corpus.class_ids(split);
    let (ae, labels, te) = model.embed_split(&utterances, &classes)?;
    let pairs = sample_pairs(&ae, &labels, &classes, &te, eval.n_pos, eval.n_neg, eval.seed)?;
    Ok((report(&pairs), det_points(&pairs)))
}

pub fn eval(cfg: &ExperimentConfig, checkpoint: Option<&Path>, split: Split) -> Result<EvalOutput> {
    let corpus = load_corpus(cfg)?;
    let path = match checkpoint {
        Some(p) => p.to_path_buf(),
        None => latest_checkpoint(&cfg.out_dir)?,
    };
    let (state, _) = checkpoint::load(&path, &corpus)?;
    let (report, det) = evaluate_model(&state.model, &corpus, split, &cfg.eval)?;
    let out = EvalOutput { checkpoint: path.clone(), split, epoch: state.epoch, report };
    ensure_dir(&cfg.out_dir)?;
    let name = split.as_str();
    let json = serde_json::to_string_pretty(&out).expect("report serializes") + "\n";
    write_text(&cfg.out_dir.join(format!("eval_{name}.json")), &json)?;
    write_det(&cfg.out_dir.join(format!("det_{name}.csv")), &det)?;
    append_eval(&cfg.out_dir.join("eval.csv"), &path.display().to_string(), name, cfg.eval.seed, &report)?;
    Ok(out)
}

#[derive(Debug, Clone, serde::Serialize)]
pub struct AblationOutput {
    pub rows: Vec<RowResult>,
    pub checks: Vec<OrderingCheck>,
    pub table: String,
}

impl AblationOutput {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }
}

/// Trains every ablation row over the configured seeds on a pool of
/// [`thread_count`] workers, then writes `ablation.txt` and `ablation.json`.
pub fn ablate(cfg: &ExperimentConfig, log: &mut dyn FnMut(&str)) -> Result<AblationOutput> {
    let corpus = load_corpus(cfg)?;
    let rows = ablation_rows(cfg.ablate.term_weight);
    let seeds = &cfg.ablate.seeds;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(thread_count())
        .build()
        .map_err(|e| CliError::Check(format!("thread pool: {e}")))?;
    log(&format!("ablation: {} rows x {} seeds on {} threads", rows.len(), seeds.len(), pool.current_num_threads()));
    let results = run_ablation(&rows, seeds, |jobs| {
        pool.install(|| jobs.par_iter().map(|&(w, s)| run_one(&corpus, &cfg.train, w, s, &cfg.eval)).collect())
    });
    let checks = directional_checks(&results);
    let mut table = render_table(&results, seeds);
    table.push_str("Directional checks\n");
    for c in &checks {
        table.push_str(&c.line());
        table.push('\n');
    }
    let out = AblationOutput { rows: results, checks, table };
    ensure_dir(&cfg.out_dir)?;
    write_text(&cfg.out_dir.join("ablation.txt"), &out.table)?;
    let json = serde_json::to_string_pretty(&out).expect("ablation serializes") + "\n";
    write_text(&cfg.out_dir.join("ablation.json"), &json)?;
    Ok(out)
}
