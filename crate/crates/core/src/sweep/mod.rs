//! Seeded grids over `(eps_train, eps_cal, eps_test)`.
//!
//! A model is trained once per `(eps_train, seed)` job, calibrated once per
//! `eps_cal`, and evaluated at every paired `eps_test`. Jobs run on a rayon
//! pool; the output is sorted so it does not depend on scheduling.

mod config;
mod report;
mod theory_check;

use std::cmp::Ordering;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use config::{
    ConformalSpec, DataSpec, GridSpec, ModelSpec, OutputSpec, SweepConfig, TestGrid, TheorySpec, TrainSpec,
};
pub use report::{
    check_band, config_summaries, read_records_csv, summarize, write_failures_csv, write_records_csv, write_summary_json, BandPoint,
    BandReport, BandRun, ConfigSummary, SweepSummary, RECORD_HEADER,
};
pub use theory_check::{run_theory_check, CoverageCheck, TheoryCheckReport};

use crate::attack::Epsilon;
use crate::conformal::{calibrate, evaluate};
use crate::dataio::{split_dataset, LabeledDataset, SplitIndices};
use crate::error::{Error, Result};
use crate::model::Classifier;
use crate::seed;
use crate::train::{accuracy, train};

/// One `(eps_train, eps_cal, eps_test, seed)` grid point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentRecord {
    pub dataset: String,
    pub eps_train: Epsilon,
    pub eps_cal: Epsilon,
    pub eps_test: Epsilon,
    pub seed: u64,
    pub coverage: f64,
    pub mean_set_size: f64,
    pub q_hat: f64,
    /// Clean top-1 accuracy on the test split.
    pub clean_acc: f64,
    /// Top-1 accuracy on the test split attacked at `eps_test`.
    pub adv_acc: f64,
}

impl ExperimentRecord {
    pub fn grid_key(&self) -> (Epsilon, Epsilon, Epsilon, u64) {
        (self.eps_train, self.eps_cal, self.eps_test, self.seed)
    }
}

/// Grid order: `eps_train`, `eps_cal`, `eps_test`, then seed.
pub fn grid_order(a: &ExperimentRecord, b: &ExperimentRecord) -> Ordering {
    let eps = |x: Epsilon, y: Epsilon| x.value().total_cmp(&y.value());
    eps(a.eps_train, b.eps_train)
        .then(eps(a.eps_cal, b.eps_cal))
        .then(eps(a.eps_test, b.eps_test))
        .then(a.seed.cmp(&b.seed))
}

/// A `(eps_train, seed)` job that produced no records.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JobFailure {
    pub eps_train: Epsilon,
    pub seed: u64,
    pub error: String,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct SweepOutcome {
    pub records: Vec<ExperimentRecord>,
    pub failures: Vec<JobFailure>,
}

/// Seed for everything in one run: split, initialisation, batch order and
/// the conformal uniforms. Shared across `eps_train` so grid points of one
/// seed see the same split.
pub fn run_seed(master: u64, seed: u64) -> u64 {
    seed::derive(master, &[seed::tag::RUN, seed])
}

/// Split, initial model and run seed for `seed`.
pub fn prepare_run(cfg: &SweepConfig, ds: &LabeledDataset, seed: u64) -> Result<(u64, SplitIndices, Classifier)> {
    let rs = run_seed(cfg.sweep.master_seed, seed);
    let split = split_dataset(ds, cfg.data.fractions(), rs)?;
    let init = Classifier::init(ds.dim(), cfg.model.hidden, ds.num_classes(), rs)?;
    Ok((rs, split, init))
}

fn run_job(cfg: &SweepConfig, ds: &LabeledDataset, dataset: &str, eps_train: Epsilon, seed: u64) -> Result<Vec<ExperimentRecord>> {
    let grid = &cfg.sweep;
    let (rs, split, init) = prepare_run(cfg, ds, seed)?;
    let model = train(&init, ds, &split.train, &cfg.train.config(grid.attack(eps_train), rs))?;
    let clean_acc = accuracy(&model, ds, &split.test, &grid.attack(Epsilon::ZERO))?;

    let mut adv_acc: Vec<(Epsilon, f64)> = Vec::new();
    let mut records = Vec::new();
    for &eps_cal in &grid.eps_cal {
        let cal = calibrate(
            &model,
            ds,
            &split.cal,
            cfg.conformal.alpha,
            cfg.conformal.score,
            &grid.attack(eps_cal),
            rs,
        )?;
        for &eps_test in grid.test_grid(eps_cal)? {
            let attack = grid.attack(eps_test);
            let acc = match adv_acc.iter().find(|(e, _)| *e == eps_test) {
                Some(&(_, a)) => a,
                None => {
                    let a = accuracy(&model, ds, &split.test, &attack)?;
                    adv_acc.push((eps_test, a));
                    a
                }
            };
            let ev = evaluate(&model, ds, &split.test, &cal, &attack, rs)?;
            records.push(ExperimentRecord {
                dataset: dataset.to_owned(),
                eps_train,
                eps_cal,
                eps_test,
                seed,
                coverage: ev.coverage,
                mean_set_size: ev.mean_set_size,
                q_hat: cal.q_hat,
                clean_acc,
                adv_acc: acc,
            });
        }
    }
    Ok(records)
}

/// Run the grid on an already loaded dataset.
pub fn run_sweep_on(cfg: &SweepConfig, ds: &LabeledDataset) -> Result<SweepOutcome> {
    cfg.validate()?;
    let dataset = cfg.data.id();
    let jobs: Vec<(Epsilon, u64)> = cfg
        .sweep
        .eps_train
        .iter()
        .flat_map(|&e| cfg.sweep.seeds.iter().map(move |&s| (e, s)))
        .collect();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.sweep.workers)
        .build()
        .map_err(|e| Error::Config(format!("cannot start worker pool: {e}")))?;
    let results: Vec<(Epsilon, u64, Result<Vec<ExperimentRecord>>)> = pool.install(|| {
        jobs.par_iter()
            .map(|&(e, s)| (e, s, run_job(cfg, ds, &dataset, e, s)))
            .collect()
    });

    let mut outcome = SweepOutcome::default();
    for (eps_train, seed, result) in results {
        match result {
            Ok(records) => outcome.records.extend(records),
            Err(e) => outcome.failures.push(JobFailure {
                eps_train,
                seed,
                error: e.to_string(),
            }),
        }
    }
    outcome.records.sort_by(grid_order);
    Ok(outcome)
}

/// Load the configured dataset and run the grid.
pub fn run_sweep(cfg: &SweepConfig) -> Result<SweepOutcome> {
    cfg.validate()?;
    let ds = cfg.data.load()?;
    run_sweep_on(cfg, &ds)
}
