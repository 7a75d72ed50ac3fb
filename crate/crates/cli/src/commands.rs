use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use chansparse::connectivity::{
    full_masks, match_budget, ArchSpec, ConnectivityMask, TransformKind, TransformSpec,
};
use chansparse::convnet::{arch_cost, checkpoint, cost_report, CostReport, Network};
use chansparse::equivalence::{
    equivalence_class_size, permute_network, verify_equivalence, PermutationSet,
};
use chansparse::rng::{self, Stream};
use chansparse::tensor::Scalar;
use chansparse::training::{
    train, Dataset, DensifySchedule, EvalPoint, Precision, RunRecord, TrainConfig,
};
use chansparse::Error;
use serde::{Deserialize, Serialize};

use crate::config::{load_dataset, ExperimentConfig};
use crate::output::{write_csv, write_json, JsonLines};
use crate::CliError;

pub(crate) fn lib_err(e: Error) -> CliError {
    match e {
        Error::Config(_) | Error::Arch(_) | Error::UnreachableBudget { .. } => {
            CliError::Config(e.to_string())
        }
        Error::Checkpoint(_) | Error::Idx { .. } => CliError::Artifact(e.to_string()),
        _ => CliError::Runtime(e.to_string()),
    }
}

/// Command-line overrides applied on top of a config file.
#[derive(Clone, Debug, Default)]
pub struct Overrides {
    pub out: Option<PathBuf>,
    pub seeds: Option<Vec<u64>>,
    pub threads: Option<usize>,
    pub precision: Option<Precision>,
}

impl Overrides {
    pub fn apply(&self, cfg: &mut ExperimentConfig) {
        if let Some(o) = &self.out {
            cfg.output_dir = o.clone();
        }
        if let Some(s) = &self.seeds {
            cfg.seeds = s.clone();
        }
        if let Some(t) = self.threads {
            cfg.threads = t;
        }
        if let Some(p) = self.precision {
            cfg.train.precision = p;
        }
    }
}

/// Runs `f` over `jobs` on `threads` workers. Results keep job order; the
/// first failing job (in job order) decides the error.
pub fn run_pool<J, R, F>(jobs: &[J], threads: usize, f: F) -> Result<Vec<R>, CliError>
where
    J: Sync,
    R: Send,
    F: Fn(&J) -> Result<R, CliError> + Sync,
{
    let next = AtomicUsize::new(0);
    let slots: Mutex<Vec<Option<Result<R, CliError>>>> =
        Mutex::new((0..jobs.len()).map(|_| None).collect());
    std::thread::scope(|s| {
        for _ in 0..threads.clamp(1, jobs.len().max(1)) {
            s.spawn(|| loop {
                let k = next.fetch_add(1, Ordering::Relaxed);
                if k >= jobs.len() {
                    break;
                }
                let r = f(&jobs[k]);
                slots.lock().unwrap()[k] = Some(r);
            });
        }
    });
    slots
        .into_inner()
        .unwrap()
        .into_iter()
        .map(|r| r.expect("every job ran"))
        .collect()
}

/// Everything a finished run produced.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunOutcome {
    pub name: String,
    pub seed: u64,
    pub transform: TransformSpec,
    pub cost: CostReport,
    pub record: RunRecord,
}

struct RunJob<'a> {
    name: String,
    arch: &'a ArchSpec,
    transform: TransformSpec,
    seed: u64,
}

fn run_generic<T: Scalar>(
    job: &RunJob,
    train_cfg: &TrainConfig,
    schedule: Option<&DensifySchedule>,
    data: &(Dataset, Dataset),
    out_dir: &Path,
) -> Result<RunOutcome, CliError> {
    let (arch, masks) = job.transform.realize(job.arch).map_err(lib_err)?;
    let mut net = Network::<T>::new(&arch, masks, job.seed).map_err(lib_err)?;
    let cfg = TrainConfig {
        seed: job.seed,
        ..train_cfg.clone()
    };
    let mut lines = JsonLines::create(&out_dir.join("runs").join(format!("{}.jsonl", job.name)))?;
    let mut write_err = None;
    let record = train(
        &mut net,
        &data.0,
        &data.1,
        &cfg,
        schedule,
        &mut |p: &EvalPoint| {
            if let Err(e) = lines.push(p) {
                write_err.get_or_insert(e);
            }
        },
    )
    .map_err(lib_err)?;
    if let Some(e) = write_err {
        return Err(e);
    }
    lines.finish()?;
    let ckpt_dir = out_dir.join("checkpoints");
    std::fs::create_dir_all(&ckpt_dir)
        .map_err(|e| CliError::Runtime(format!("{}: {e}", ckpt_dir.display())))?;
    checkpoint::save(&net, &ckpt_dir.join(format!("{}.ckpt", job.name))).map_err(lib_err)?;
    Ok(RunOutcome {
        name: job.name.clone(),
        seed: job.seed,
        transform: job.transform.clone(),
        cost: cost_report(&net),
        record,
    })
}

fn run_job(
    job: &RunJob,
    cfg: &ExperimentConfig,
    schedule: Option<&DensifySchedule>,
    data: &(Dataset, Dataset),
) -> Result<RunOutcome, CliError> {
    match cfg.train.precision {
        Precision::F32 => run_generic::<f32>(job, &cfg.train, schedule, data, &cfg.output_dir),
        Precision::F64 => run_generic::<f64>(job, &cfg.train, schedule, data, &cfg.output_dir),
    }
}

/// Row of the `train` and `incremental` summary CSV.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainRow {
    pub run: String,
    pub kind: String,
    pub alpha: f64,
    pub seed: u64,
    pub params: u64,
    pub madds: u64,
    pub steps: u64,
    pub density: f64,
    pub accuracy: f64,
}

/// Row of the per-evaluation curve CSV.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurveRow {
    pub run: String,
    pub seed: u64,
    pub step: u64,
    pub epoch: usize,
    pub density: f64,
    pub params: u64,
    pub madds: u64,
    pub train_loss: f64,
    pub test_accuracy: f64,
}

#[derive(Serialize)]
struct Report<'a, R: Serialize> {
    command: &'a str,
    config: &'a ExperimentConfig,
    results: R,
}

fn finish_runs(
    command: &str,
    cfg: &ExperimentConfig,
    outcomes: &[RunOutcome],
) -> Result<Vec<TrainRow>, CliError> {
    let mut rows: Vec<TrainRow> = outcomes
        .iter()
        .map(|o| {
            let last = o.record.points.last();
            TrainRow {
                run: o.name.clone(),
                kind: o.transform.kind.label().to_string(),
                alpha: o.transform.alpha,
                seed: o.seed,
                params: o.cost.total_params,
                madds: o.cost.total_madds,
                steps: o.record.steps,
                density: last.map_or(0.0, |p| p.density),
                accuracy: o.record.final_accuracy(),
            }
        })
        .collect();
    rows.sort_by(|a, b| (&a.run, a.seed).cmp(&(&b.run, b.seed)));
    let curve: Vec<CurveRow> = outcomes
        .iter()
        .flat_map(|o| {
            o.record.points.iter().map(|p| CurveRow {
                run: o.name.clone(),
                seed: o.seed,
                step: p.step,
                epoch: p.epoch,
                density: p.density,
                params: p.params,
                madds: p.madds,
                train_loss: p.train_loss,
                test_accuracy: p.test_accuracy,
            })
        })
        .collect();
    write_csv(&cfg.output_dir.join("results.csv"), &rows)?;
    write_csv(&cfg.output_dir.join("curve.csv"), &curve)?;
    write_json(
        &cfg.output_dir.join("report.json"),
        &Report {
            command,
            config: cfg,
            results: outcomes,
        },
    )?;
    Ok(rows)
}

fn prepare(cfg: &ExperimentConfig) -> Result<(ArchSpec, (Dataset, Dataset)), CliError> {
    cfg.validate()?;
    let arch = cfg.arch()?;
    let data = load_dataset(&cfg.dataset)?;
    let i = arch.input;
    if (data.0.channels, data.0.height, data.0.width) != (i.channels, i.height, i.width) {
        return Err(CliError::Config(format!(
            "dataset items are {}x{}x{} but the architecture expects {}x{}x{}",
            data.0.channels, data.0.height, data.0.width, i.channels, i.height, i.width
        )));
    }
    if data.0.classes != arch.classes {
        return Err(CliError::Config(format!(
            "dataset has {} classes but the architecture has {}",
            data.0.classes, arch.classes
        )));
    }
    Ok((arch, data))
}

fn seeded_runs<'a>(cfg: &ExperimentConfig, arch: &'a ArchSpec, prefix: &str) -> Vec<RunJob<'a>> {
    cfg.seeds
        .iter()
        .map(|&seed| RunJob {
            name: format!("{prefix}-seed{seed}"),
            arch,
            transform: TransformSpec {
                seed,
                ..cfg.transform.clone()
            },
            seed,
        })
        .collect()
}

/// One training run per seed.
pub fn cmd_train(cfg: &ExperimentConfig) -> Result<Vec<RunOutcome>, CliError> {
    let (arch, data) = prepare(cfg)?;
    let jobs = seeded_runs(cfg, &arch, cfg.transform.kind.label());
    let outcomes = run_pool(&jobs, cfg.threads, |j| run_job(j, cfg, None, &data))?;
    finish_runs("train", cfg, &outcomes)?;
    Ok(outcomes)
}

/// Random sparse start at the schedule's initial density, keeping the
/// configured sampler and the run seed.
pub fn initial_transform(schedule: &DensifySchedule, base: &TransformSpec) -> TransformSpec {
    TransformSpec {
        sampler: base.sampler,
        ..TransformSpec::sparse_random(schedule.initial_density, base.seed)
    }
}

/// Training with incremental densification, one run per seed.
pub fn cmd_incremental(cfg: &ExperimentConfig) -> Result<Vec<RunOutcome>, CliError> {
    let schedule = cfg
        .densify
        .clone()
        .ok_or_else(|| CliError::Config("incremental needs a densify schedule".into()))?;
    let (arch, data) = prepare(cfg)?;
    let mut jobs = seeded_runs(cfg, &arch, "incremental");
    for j in &mut jobs {
        j.transform = initial_transform(&schedule, &j.transform);
    }
    let outcomes = run_pool(&jobs, cfg.threads, |j| {
        run_job(j, cfg, Some(&schedule), &data)
    })?;
    finish_runs("incremental", cfg, &outcomes)?;
    Ok(outcomes)
}

/// Row of the sweep CSV. Unreachable budgets leave the measured columns empty.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub kind: String,
    pub budget: f64,
    pub alpha: Option<f64>,
    pub params: Option<u64>,
    pub madds: Option<u64>,
    pub seed: u64,
    pub accuracy: Option<f64>,
    pub status: String,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SweepOutcome {
    pub rows: Vec<SweepRow>,
    pub runs: Vec<RunOutcome>,
}

/// Dense conv-parameter count that sweep budgets are fractions of.
pub fn dense_conv_params(arch: &ArchSpec) -> Result<u64, CliError> {
    let masks = full_masks(arch).map_err(lib_err)?;
    Ok(arch_cost(arch, &masks).map_err(lib_err)?.conv_params())
}

fn realized_key(arch: &ArchSpec, spec: &TransformSpec, seed: u64) -> Result<String, CliError> {
    let (a, masks) = spec.realize(arch).map_err(lib_err)?;
    let pairs: Vec<Vec<[usize; 2]>> = masks.iter().map(ConnectivityMask::pairs).collect();
    Ok(format!(
        "{}|{}|{seed}",
        serde_json::to_string(&a).expect("arch serializes"),
        serde_json::to_string(&pairs).expect("pairs serialize")
    ))
}

/// Budget-matched sweep over transform kinds, budgets and seeds.
///
/// Runs whose realized network (architecture, masks and seed) coincides
/// with an earlier one are trained once and reported under both rows; at
/// budget 1 both kinds realize the dense network.
pub fn cmd_sweep(cfg: &ExperimentConfig) -> Result<SweepOutcome, CliError> {
    let sweep = cfg
        .sweep
        .clone()
        .ok_or_else(|| CliError::Config("sweep needs a `sweep` section with budgets".into()))?;
    let (arch, data) = prepare(cfg)?;
    let dense = dense_conv_params(&arch)?;

    struct Planned {
        kind: TransformKind,
        budget: f64,
        seed: u64,
        job: Option<usize>,
    }
    let mut planned = Vec::new();
    let mut jobs: Vec<RunJob> = Vec::new();
    let mut seen: HashMap<String, usize> = HashMap::new();
    for &kind in &sweep.kinds {
        for &budget in &sweep.budgets {
            for &seed in &cfg.seeds {
                let target = (budget * dense as f64).round() as u64;
                let job = match match_budget(&arch, target, kind, seed) {
                    Ok(spec) => {
                        let key = realized_key(&arch, &spec, seed)?;
                        let next = jobs.len();
                        let k = *seen.entry(key).or_insert(next);
                        if k == next {
                            jobs.push(RunJob {
                                name: format!("{}-b{budget}-seed{seed}", kind.label()),
                                arch: &arch,
                                transform: spec,
                                seed,
                            });
                        }
                        Some(k)
                    }
                    Err(Error::UnreachableBudget { target, minimum }) => {
                        eprintln!(
                            "warning: {} budget {budget} ({target} params) is unreachable; \
                             the smallest network has {minimum}",
                            kind.label()
                        );
                        None
                    }
                    Err(e) => return Err(lib_err(e)),
                };
                planned.push(Planned {
                    kind,
                    budget,
                    seed,
                    job,
                });
            }
        }
    }
    let runs = run_pool(&jobs, cfg.threads, |j| run_job(j, cfg, None, &data))?;
    let mut rows: Vec<SweepRow> = planned
        .iter()
        .map(|p| match p.job {
            Some(k) => {
                let r = &runs[k];
                SweepRow {
                    kind: p.kind.label().to_string(),
                    budget: p.budget,
                    alpha: Some(r.transform.alpha),
                    params: Some(r.cost.total_params),
                    madds: Some(r.cost.total_madds),
                    seed: p.seed,
                    accuracy: Some(r.record.final_accuracy()),
                    status: "ok".into(),
                }
            }
            None => SweepRow {
                kind: p.kind.label().to_string(),
                budget: p.budget,
                alpha: None,
                params: None,
                madds: None,
                seed: p.seed,
                accuracy: None,
                status: "unreachable".into(),
            },
        })
        .collect();
    sort_sweep_rows(&mut rows);
    write_csv(&cfg.output_dir.join("results.csv"), &rows)?;
    let outcome = SweepOutcome { rows, runs };
    write_json(
        &cfg.output_dir.join("report.json"),
        &Report {
            command: "sweep",
            config: cfg,
            results: &outcome,
        },
    )?;
    Ok(outcome)
}

/// Sorted by kind, then descending params (unreachable rows last, by
/// descending budget), then seed.
pub fn sort_sweep_rows(rows: &mut [SweepRow]) {
    rows.sort_by(|a, b| {
        a.kind
            .cmp(&b.kind)
            .then_with(|| match (a.params, b.params) {
                (Some(x), Some(y)) => y.cmp(&x),
                (Some(_), None) => std::cmp::Ordering::Less,
                (None, Some(_)) => std::cmp::Ordering::Greater,
                (None, None) => b.budget.total_cmp(&a.budget),
            })
            .then_with(|| b.budget.total_cmp(&a.budget))
            .then_with(|| a.seed.cmp(&b.seed))
    });
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VerifyReport {
    pub trials: usize,
    pub tol: f64,
    pub max_abs_diff: f64,
    pub pass: bool,
    pub hidden_sizes: Vec<usize>,
    /// Decimal string; the value overflows every machine integer.
    pub equivalence_class_size: String,
}

/// Where `verify` gets its network from.
pub enum VerifySource<'a> {
    Checkpoint(&'a Path),
    Fresh {
        arch: &'a ArchSpec,
        transform: &'a TransformSpec,
        seed: u64,
    },
}

#[derive(Clone, Debug)]
pub struct VerifyOptions {
    pub trials: usize,
    pub tol: f64,
    pub batch: usize,
    pub seed: u64,
    pub precision: Precision,
}

impl Default for VerifyOptions {
    fn default() -> Self {
        VerifyOptions {
            trials: 5,
            tol: 1e-5,
            batch: 8,
            seed: 0,
            precision: Precision::F32,
        }
    }
}

fn verify_generic<T: Scalar>(
    src: &VerifySource,
    opts: &VerifyOptions,
) -> Result<VerifyReport, CliError> {
    let net: Network<T> = match src {
        VerifySource::Checkpoint(p) => {
            if !p.is_file() {
                return Err(CliError::Config(format!(
                    "checkpoint {} does not exist",
                    p.display()
                )));
            }
            checkpoint::load(p).map_err(|e| CliError::Artifact(e.to_string()))?
        }
        VerifySource::Fresh {
            arch,
            transform,
            seed,
        } => Network::from_transform(arch, transform, *seed).map_err(lib_err)?,
    };
    let sizes = net.arch().hidden_conv_sizes();
    let mut rng = rng::stream(opts.seed, Stream::Verify);
    let perms = PermutationSet::random(&sizes, &mut rng);
    let twin = permute_network(&net, &perms).map_err(lib_err)?;
    let r = verify_equivalence(&net, &twin, opts.trials, opts.batch, opts.tol, opts.seed)
        .map_err(lib_err)?;
    Ok(VerifyReport {
        trials: r.trials,
        tol: r.tol,
        max_abs_diff: r.max_abs_diff,
        pass: r.pass,
        equivalence_class_size: equivalence_class_size(net.arch()).to_string(),
        hidden_sizes: sizes,
    })
}

/// Builds a randomly permuted twin and compares logits.
pub fn cmd_verify(src: &VerifySource, opts: &VerifyOptions) -> Result<VerifyReport, CliError> {
    match opts.precision {
        Precision::F32 => verify_generic::<f32>(src, opts),
        Precision::F64 => verify_generic::<f64>(src, opts),
    }
}

/// Per-layer and total cost of `arch` under `transform`.
pub fn cmd_cost(arch: &ArchSpec, transform: &TransformSpec) -> Result<CostReport, CliError> {
    let (a, masks) = transform.realize(arch).map_err(lib_err)?;
    arch_cost(&a, &masks).map_err(lib_err)
}
