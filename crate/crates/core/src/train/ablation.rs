//! Loss-mode ablation: every (mode, seed) pair trained from the same
//! seed-determined initialisation, evaluated with and without flip
//! post-processing, then reduced to per-mode medians across seeds.

use std::io::Write;
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Instant;

use super::{evaluate, train, TrainConfig};
use crate::data::StereoSample;
use crate::error::{Error, Result};
use crate::losses::LossMode;
use crate::metrics::{aggregate, DepthMetrics, MetricRow};
use crate::network::{init_params, ModelConfig};

#[derive(Clone, Debug, PartialEq)]
pub struct AblationConfig {
    pub modes: Vec<LossMode>,
    pub seeds: Vec<u64>,
    /// Shared settings; `mode` and `seed` are overridden per run.
    pub train: TrainConfig,
    pub model: ModelConfig,
    /// Worker threads; each run stays on one thread, so results do not
    /// depend on this.
    pub threads: usize,
}

impl Default for AblationConfig {
    fn default() -> Self {
        AblationConfig {
            modes: LossMode::ALL.to_vec(),
            seeds: vec![1, 2, 3],
            train: TrainConfig::default(),
            model: ModelConfig::default(),
            threads: 1,
        }
    }
}

impl AblationConfig {
    pub fn validate(&self) -> Result<()> {
        if self.modes.is_empty() || self.seeds.is_empty() {
            return Err(Error::Config(
                "ablation needs at least one mode and one seed".into(),
            ));
        }
        if self.threads == 0 {
            return Err(Error::Config("ablation needs at least one thread".into()));
        }
        self.train.validate()?;
        self.model.validate()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunResult {
    pub mode: LossMode,
    pub seed: u64,
    /// Mean over the eval set without post-processing.
    pub plain: MetricRow,
    /// Mean over the eval set with flip post-processing.
    pub pp: MetricRow,
    /// Mean total loss of the last epoch.
    pub final_loss: f64,
    pub seconds: f64,
}

/// Median across seeds of each metric, for one mode and pp setting.
#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    pub mode: LossMode,
    pub pp: bool,
    pub depth: DepthMetrics,
    pub semantic_accuracy: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationOutcome {
    /// Mode-major, then seed, in config order.
    pub runs: Vec<RunResult>,
    /// Per mode: the plain row, then the pp row.
    pub rows: Vec<AblationRow>,
}

impl AblationOutcome {
    pub fn row(&self, mode: LossMode, pp: bool) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.mode == mode && r.pp == pp)
    }
}

/// Median; the mean of the two middle values for even counts.
pub fn median(values: &[f64]) -> Option<f64> {
    if values.is_empty() || values.iter().any(|v| v.is_nan()) {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Some(if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    })
}

fn median_row(mode: LossMode, pp: bool, rows: &[&MetricRow]) -> AblationRow {
    let columns: Vec<[f64; 7]> = rows.iter().map(|r| r.depth.values()).collect();
    let m =
        |k: usize| median(&columns.iter().map(|c| c[k]).collect::<Vec<_>>()).unwrap_or(f64::NAN);
    let sem: Vec<f64> = rows.iter().filter_map(|r| r.semantic_accuracy).collect();
    AblationRow {
        mode,
        pp,
        depth: DepthMetrics {
            abs_rel: m(0),
            sq_rel: m(1),
            rmse: m(2),
            rmse_log: m(3),
            delta1: m(4),
            delta2: m(5),
            delta3: m(6),
        },
        semantic_accuracy: median(&sem),
    }
}

fn run_dir_name(mode: LossMode, seed: u64) -> String {
    format!("{}_seed{seed}", mode.as_str().replace('+', "_"))
}

fn run_one(
    cfg: &AblationConfig,
    mode: LossMode,
    seed: u64,
    train_set: &[StereoSample],
    eval_set: &[StereoSample],
    out_dir: Option<&Path>,
) -> Result<RunResult> {
    let started = Instant::now();
    let tc = TrainConfig {
        mode,
        seed,
        eval_interval: 0,
        ..cfg.train.clone()
    };
    let params = init_params(&cfg.model, seed)?;
    let dir = out_dir.map(|d| d.join(run_dir_name(mode, seed)));
    let outcome = train(&tc, params, train_set, &[], dir.as_deref())?;
    let mean = |pp: bool| -> Result<MetricRow> {
        let rows = evaluate(&outcome.params, eval_set, &tc.eval, pp)?;
        aggregate(&rows, "mean").ok_or_else(|| Error::Manifest("evaluation set is empty".into()))
    };
    let (plain, pp) = (mean(false)?, mean(true)?);
    log::info!(
        "{mode} seed {seed}: abs_rel {:.4} (pp {:.4}) in {:.0}s",
        plain.depth.abs_rel,
        pp.depth.abs_rel,
        started.elapsed().as_secs_f64()
    );
    Ok(RunResult {
        mode,
        seed,
        plain,
        pp,
        final_loss: outcome
            .log
            .records
            .last()
            .map_or(f64::NAN, |r| r.loss.total),
        seconds: started.elapsed().as_secs_f64(),
    })
}

/// Trains every (mode, seed) pair on a pool of `cfg.threads` workers. With
/// `out_dir`, each run writes its checkpoint and logs to its own
/// subdirectory.
pub fn run_ablation(
    cfg: &AblationConfig,
    train_set: &[StereoSample],
    eval_set: &[StereoSample],
    out_dir: Option<&Path>,
) -> Result<AblationOutcome> {
    cfg.validate()?;
    if eval_set.is_empty() {
        return Err(Error::Manifest("evaluation set is empty".into()));
    }
    let jobs: Vec<(LossMode, u64)> = cfg
        .modes
        .iter()
        .flat_map(|&m| cfg.seeds.iter().map(move |&s| (m, s)))
        .collect();
    let next = AtomicUsize::new(0);
    let results: Mutex<Vec<Option<Result<RunResult>>>> =
        Mutex::new((0..jobs.len()).map(|_| None).collect());
    std::thread::scope(|scope| {
        for _ in 0..cfg.threads.min(jobs.len()) {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                let Some(&(mode, seed)) = jobs.get(i) else {
                    break;
                };
                let r = run_one(cfg, mode, seed, train_set, eval_set, out_dir);
                let failed = r.is_err();
                results
                    .lock()
                    .expect("no worker panics while holding the lock")[i] = Some(r);
                if failed {
                    // later jobs are skipped; the first error is reported
                    next.store(jobs.len(), Ordering::Relaxed);
                }
            });
        }
    });

    let mut runs = Vec::with_capacity(jobs.len());
    for r in results
        .into_inner()
        .expect("workers have exited")
        .into_iter()
        .flatten()
    {
        runs.push(r?);
    }
    let mut rows = Vec::with_capacity(2 * cfg.modes.len());
    for &mode in &cfg.modes {
        let of_mode: Vec<&RunResult> = runs.iter().filter(|r| r.mode == mode).collect();
        for pp in [false, true] {
            let metric_rows: Vec<&MetricRow> = of_mode
                .iter()
                .map(|r| if pp { &r.pp } else { &r.plain })
                .collect();
            rows.push(median_row(mode, pp, &metric_rows));
        }
    }
    Ok(AblationOutcome { runs, rows })
}

pub const TABLE_HEADER: &str =
    "mode,pp,abs_rel,sq_rel,rmse,rmse_log,delta1,delta2,delta3,semantic_accuracy";

/// One line per (mode, pp): the medians across seeds.
pub fn write_table_csv<W: Write>(w: &mut W, rows: &[AblationRow]) -> std::io::Result<()> {
    writeln!(w, "{TABLE_HEADER}")?;
    for r in rows {
        write!(w, "{},{}", r.mode, if r.pp { "yes" } else { "no" })?;
        for v in r.depth.values() {
            write!(w, ",{v:.6}")?;
        }
        match r.semantic_accuracy {
            Some(a) => writeln!(w, ",{a:.6}")?,
            None => writeln!(w, ",")?,
        }
    }
    Ok(())
}

/// One line per run, both evaluation settings.
pub fn write_runs_csv<W: Write>(w: &mut W, runs: &[RunResult]) -> std::io::Result<()> {
    writeln!(
        w,
        "mode,seed,abs_rel,abs_rel_pp,delta1,delta1_pp,semantic_accuracy,final_loss,seconds"
    )?;
    for r in runs {
        writeln!(
            w,
            "{},{},{:.6},{:.6},{:.6},{:.6},{},{:.6},{:.1}",
            r.mode,
            r.seed,
            r.plain.depth.abs_rel,
            r.pp.depth.abs_rel,
            r.plain.depth.delta1,
            r.pp.depth.delta1,
            r.plain
                .semantic_accuracy
                .map_or(String::new(), |a| format!("{a:.6}")),
            r.final_loss,
            r.seconds
        )?;
    }
    Ok(())
}
