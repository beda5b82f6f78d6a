//! Augmentation ablation: every compression augmentation over several seeds.
//! The first task does not depend on the augmentation, so it is trained
//! once per seed and shared by all modes.

use std::path::Path;

use rayon::prelude::*;

use crate::config::Config;
use crate::error::{Error, Result};
use crate::mixaug::AugMode;
use crate::report::{write_run, AblationCell, AblationTable, RunSummary};
use crate::trainer::{median_epoch_seconds, Phase, Session, StepReport};

/// Worker count from `FECIL_THREADS`, else the available cores.
pub fn thread_budget() -> usize {
    std::env::var("FECIL_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
}

pub struct AblationRun {
    pub seed: u64,
    pub mode: AugMode,
    pub reports: Vec<StepReport>,
}

fn seed_runs(base: &Config, seed: u64, modes: &[AugMode]) -> Result<Vec<AblationRun>> {
    let mut cfg = base.clone();
    cfg.run.seed = seed;
    let session = Session::new(cfg)?;
    let (state, first) = session.bootstrap()?;
    modes
        .iter()
        .map(|&mode| {
            let (_, rest) = session.with_aug(mode).finish(state.clone(), None)?;
            let mut reports = vec![first.clone()];
            reports.extend(rest);
            Ok(AblationRun { seed, mode, reports })
        })
        .collect()
}

/// Run the matrix; seeds run in parallel on up to `threads` workers. Each
/// run's outputs go to `out/seed{s}_{mode}/` when `out` is given.
pub fn run_ablation(
    base: &Config,
    seeds: &[u64],
    modes: &[AugMode],
    threads: usize,
    out: Option<&Path>,
) -> Result<(AblationTable, Vec<AblationRun>)> {
    if seeds.is_empty() || modes.is_empty() {
        return Err(Error::invalid("run_ablation", "need at least one seed and one mode"));
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads.max(1))
        .build()
        .map_err(|e| Error::invalid("run_ablation", e.to_string()))?;
    let per_seed: Vec<Result<Vec<AblationRun>>> = pool.install(|| seeds.par_iter().map(|&s| seed_runs(base, s, modes)).collect());
    let mut runs = Vec::new();
    for r in per_seed {
        runs.extend(r?);
    }
    let mut cells = Vec::new();
    for run in &runs {
        let summary = RunSummary::new(&run.reports, run.seed, base.dataset.seed, run.mode, base.run.record_epoch_time)?;
        if let Some(dir) = out {
            write_run(
                &dir.join(format!("seed{}_{}", run.seed, run.mode)),
                &summary,
                &run.reports,
                base.run.record_epoch_time,
            )?;
        }
        let times: Vec<_> = run.reports.iter().flat_map(|r| r.epochs.iter().cloned()).collect();
        cells.push(AblationCell {
            seed: run.seed,
            mode: run.mode,
            avg: summary.compact.avg_top1,
            last: summary.compact.last_top1,
            compress_epoch_s: median_epoch_seconds(&times, Phase::Compress).ok(),
        });
    }
    Ok((
        AblationTable {
            modes: modes.to_vec(),
            seeds: seeds.to_vec(),
            cells,
        },
        runs,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tiny_matrix_shares_the_first_step() {
        let mut c = Config::default();
        c.dataset.num_classes = 4;
        c.dataset.train_per_class = 12;
        c.dataset.test_per_class = 4;
        c.dataset.image_side = 8;
        c.protocol.steps = 2;
        c.train.epochs_expand = 1;
        c.train.epochs_compress = 1;
        c.train.batch_size = 8;
        c.memory.size = Some(8);
        c.model.width = 4;
        c.model.blocks_per_stage = 1;
        let modes = [AugMode::None, AugMode::RCutmix];
        let (table, runs) = run_ablation(&c, &[0, 1], &modes, 2, None).unwrap();
        assert_eq!(table.cells.len(), 4);
        assert_eq!(runs.len(), 4);
        for s in 0..2 {
            let a = runs.iter().find(|r| r.seed == s && r.mode == AugMode::None).unwrap();
            let b = runs.iter().find(|r| r.seed == s && r.mode == AugMode::RCutmix).unwrap();
            assert_eq!(a.reports[0].compact, b.reports[0].compact);
        }
    }
}
