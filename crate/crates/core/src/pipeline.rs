//! End-to-end orchestration: training, detection, ablation and sweeps.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use crate::adnm::{masks_for_windows, reconstruction_error, train_autoencoder, MaskMatrix};
use crate::bundle::{ModelBundle, Network, NetworkObjective};
use crate::config::{Mode, RunConfig, Sweep};
use crate::data::{load_series, slice_windows, synthetic_benchmark, MultivariateSeries, Normalizer, SliceMode};
use crate::denoiser::{train_network, Denoiser, DenoiserConfig, EpochStats, Objective, TrainConfig};
use crate::diffusion::{reconstruct, NoiseSchedule};
use crate::error::{Error, Result};
use crate::eval::{anomaly_score, assemble_scores, flag, point_adjust, select_threshold, EvalCounts, Metrics};
use crate::stats::welch_t_test;
use crate::tensor::Tensor;

/// Progress sink for human-readable status lines.
pub type Progress<'a> = &'a mut dyn FnMut(&str);

pub const BUNDLE_FILE: &str = "model.bundle";
pub const REPORT_FILE: &str = "report.csv";
pub const SUMMARY_FILE: &str = "summary.txt";
pub const TIMINGS_FILE: &str = "timings.txt";
pub const TRAIN_LOG_FILE: &str = "train_log.csv";

/// SplitMix64 finalizer; derives independent stream seeds from the run seed.
pub fn derive_seed(seed: u64, stream: u64) -> u64 {
    let mut z = seed
        .wrapping_add(stream.wrapping_mul(0x9e37_79b9_7f4a_7c15))
        .wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

const AE_STREAM: u64 = 1;
const NETWORK_STREAM: u64 = 2;
const DETECT_STREAM: u64 = 3;

#[derive(Clone, Debug)]
pub struct Datasets {
    pub train: MultivariateSeries,
    pub test: MultivariateSeries,
}

/// Reads the configured CSV files, or generates the synthetic benchmark.
pub fn load_datasets(cfg: &RunConfig) -> Result<Datasets> {
    match (&cfg.train_path, &cfg.test_path) {
        (Some(train), Some(test)) => Ok(Datasets {
            train: load_series(train, None)?,
            test: load_series(test, cfg.test_labels_path.as_deref())?,
        }),
        _ => {
            let (train, test) = synthetic_benchmark(
                cfg.synth_channels,
                cfg.synth_train_len,
                cfg.synth_test_len,
                cfg.anomaly_ratio,
                &cfg.synth_kinds,
                cfg.data_seed,
            )?;
            Ok(Datasets { train, test })
        }
    }
}

pub fn schedule_for(cfg: &RunConfig) -> Result<NoiseSchedule> {
    NoiseSchedule::linear(cfg.steps, cfg.beta1, cfg.beta_t, cfg.reverse_variance)
}

#[derive(Clone, Debug)]
pub struct TrainRecord {
    pub ae_losses: Vec<f64>,
    pub initial_loss: Option<(f64, f64)>,
    pub epochs: Vec<EpochStats>,
    pub best_epoch: Option<usize>,
    pub seconds: f64,
}

/// Normalizes, windows, fits the autoencoder, builds masks and trains the
/// network the mode calls for.
pub fn train_model(cfg: &RunConfig, train: &MultivariateSeries, progress: Progress<'_>) -> Result<(ModelBundle, TrainRecord)> {
    let start = Instant::now();
    let normalizer = Normalizer::fit(train)?;
    let series = normalizer.apply(train)?;
    let windows = slice_windows(&series, cfg.window_size, SliceMode::Train)?;
    progress(&format!(
        "mode {}: {} training windows of {}×{}",
        cfg.mode,
        windows.len(),
        cfg.window_size,
        series.channels()
    ));

    let ae = train_autoencoder(&windows, cfg.ae_epochs, cfg.ae_lr, derive_seed(cfg.seed, AE_STREAM))?;
    progress(&format!(
        "autoencoder mse {:.6} -> {:.6}",
        ae.loss_history[0],
        ae.loss_history.last().copied().unwrap_or(f64::NAN)
    ));

    let masks = match cfg.mode {
        Mode::Full => masks_for_windows(&ae.params, &windows, cfg.anomaly_ratio, cfg.rho, cfg.mask_cap)?,
        _ => vec![MaskMatrix::none(cfg.window_size); windows.len()],
    };
    let schedule = schedule_for(cfg)?;
    let net_cfg = DenoiserConfig {
        window: cfg.window_size,
        channels: series.channels(),
        d_model: cfg.d_model,
        heads: cfg.heads,
        layers: cfg.layers,
        ffn: cfg.ffn,
    };
    let train_cfg = TrainConfig {
        lr: cfg.lr,
        batch: cfg.batch,
        max_epochs: cfg.max_epochs,
        patience: cfg.patience,
    };
    let objective = match cfg.mode {
        Mode::Full | Mode::NoAdnm => Some((Objective::Noise(&schedule), NetworkObjective::Noise)),
        Mode::Transformer => Some((Objective::Reconstruction, NetworkObjective::Reconstruction)),
        Mode::NoDdt => None,
    };
    let mut record = TrainRecord {
        ae_losses: ae.loss_history.clone(),
        initial_loss: None,
        epochs: Vec::new(),
        best_epoch: None,
        seconds: 0.0,
    };
    let network = match objective {
        None => None,
        Some((objective, kind)) => {
            let outcome = train_network(
                &windows,
                &masks,
                objective,
                net_cfg,
                &train_cfg,
                derive_seed(cfg.seed, NETWORK_STREAM),
                |s| {
                    progress(&format!(
                        "epoch {:>3}  train {:.6}  val {:.6}",
                        s.epoch, s.train_loss, s.val_loss
                    ))
                },
            )?;
            progress(&format!("kept weights from epoch {}", outcome.best_epoch));
            record.initial_loss = Some((outcome.initial_train_loss, outcome.initial_val_loss));
            record.epochs = outcome.history;
            record.best_epoch = Some(outcome.best_epoch);
            Some(Network {
                objective: kind,
                params: outcome.params,
            })
        }
    };
    record.seconds = start.elapsed().as_secs_f64();
    Ok((
        ModelBundle {
            config: cfg.clone(),
            normalizer,
            schedule,
            autoencoder: ae.params,
            network,
            masks,
        },
        record,
    ))
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Timings {
    pub normalize: f64,
    pub mask: f64,
    pub reconstruct: f64,
    pub evaluate: f64,
    pub total: f64,
}

#[derive(Clone, Debug)]
pub struct DetectionReport {
    pub mode: Mode,
    pub scores: Vec<f64>,
    pub threshold: f64,
    pub raw: Vec<bool>,
    pub adjusted: Vec<bool>,
    pub labels: Option<Vec<bool>>,
    pub counts: Option<EvalCounts>,
    pub metrics: Option<Metrics>,
    pub timings: Timings,
}

fn seconds_since(t: Instant) -> f64 {
    t.elapsed().as_secs_f64()
}

/// Scores every timestamp of `test` with the bundled model, thresholds the
/// scores at the configured anomaly ratio and evaluates against labels.
pub fn detect(cfg: &RunConfig, bundle: &ModelBundle, test: &MultivariateSeries) -> Result<DetectionReport> {
    if bundle.config.mode != cfg.mode {
        return Err(Error::ModeMismatch {
            bundle: bundle.config.mode.to_string(),
            requested: cfg.mode.to_string(),
        });
    }
    let total = Instant::now();
    let mut timings = Timings::default();

    let t0 = Instant::now();
    let series = bundle.normalizer.apply(test)?;
    let window = bundle.config.window_size;
    let windows = slice_windows(&series, window, SliceMode::Infer)?;
    timings.normalize = seconds_since(t0);

    let t0 = Instant::now();
    let masks = match cfg.mode {
        Mode::Full => masks_for_windows(&bundle.autoencoder, &windows, cfg.anomaly_ratio, cfg.rho, cfg.mask_cap)?,
        _ => vec![MaskMatrix::none(window); windows.len()],
    };
    timings.mask = seconds_since(t0);

    let t0 = Instant::now();
    let network = match (&bundle.network, cfg.mode) {
        (None, Mode::NoDdt) => None,
        (Some(net), _) if cfg.mode != Mode::NoDdt => Some((net.objective, Denoiser::new(&net.params, bundle.schedule.steps())?)),
        _ => return Err(Error::Bundle(format!("bundle content does not fit mode `{}`", cfg.mode))),
    };
    let t_infer = cfg.t_infer.min(bundle.schedule.steps());
    let mut window_scores = Vec::with_capacity(windows.len());
    for (k, (x, mask)) in windows.windows.iter().zip(&masks).enumerate() {
        let scores = match &network {
            None => reconstruction_error(&bundle.autoencoder, x)?,
            Some((NetworkObjective::Reconstruction, net)) => anomaly_score(x, &net.forward(x, 0, mask)?)?,
            Some((NetworkObjective::Noise, net)) => {
                let mut mean = Tensor::zeros(x.shape());
                for sample in 0..cfg.score_samples {
                    let seed = derive_seed(derive_seed(cfg.seed, DETECT_STREAM), (k * cfg.score_samples + sample) as u64);
                    let recon = reconstruct(&bundle.schedule, net, x, mask, t_infer, seed)?;
                    mean.data_mut().iter_mut().zip(recon.data()).for_each(|(m, r)| *m += r);
                }
                let inv = 1.0 / cfg.score_samples as f64;
                mean.data_mut().iter_mut().for_each(|m| *m *= inv);
                anomaly_score(x, &mean)?
            }
        };
        window_scores.push(scores);
    }
    let scores = assemble_scores(series.len(), &windows.offsets, &window_scores)?;
    timings.reconstruct = seconds_since(t0);

    let t0 = Instant::now();
    let threshold = select_threshold(&scores, cfg.anomaly_ratio)?;
    let raw = flag(&scores, threshold);
    let labels = test.labels().map(<[bool]>::to_vec);
    let (adjusted, counts) = match &labels {
        Some(l) => {
            let adjusted = point_adjust(&raw, l)?;
            let counts = EvalCounts::tally(&adjusted, l)?;
            (adjusted, Some(counts))
        }
        None => (raw.clone(), None),
    };
    timings.evaluate = seconds_since(t0);
    timings.total = seconds_since(total);
    Ok(DetectionReport {
        mode: cfg.mode,
        scores,
        threshold,
        raw,
        adjusted,
        metrics: counts.map(|c| c.metrics()),
        labels,
        counts,
        timings,
    })
}

fn echo_comment(cfg: &RunConfig) -> String {
    cfg.echo().lines().map(|l| format!("# {l}\n")).collect()
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn ensure_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn bit(b: bool) -> u8 {
    u8::from(b)
}

impl DetectionReport {
    /// Per-timestamp rows preceded by the config echo.
    pub fn report_csv(&self, cfg: &RunConfig) -> String {
        let mut out = echo_comment(cfg);
        out.push_str("timestamp,score,raw_pred,adjusted_pred,label\n");
        for t in 0..self.scores.len() {
            let label = self.labels.as_ref().map(|l| bit(l[t]).to_string()).unwrap_or_default();
            let _ = writeln!(
                out,
                "{t},{:e},{},{},{label}",
                self.scores[t],
                bit(self.raw[t]),
                bit(self.adjusted[t])
            );
        }
        out
    }

    pub fn summary_text(&self, cfg: &RunConfig) -> String {
        let mut out = echo_comment(cfg);
        let _ = writeln!(out, "mode = {}", self.mode);
        let _ = writeln!(out, "timestamps = {}", self.scores.len());
        let _ = writeln!(out, "threshold = {:e}", self.threshold);
        let _ = writeln!(out, "flagged_raw = {}", self.raw.iter().filter(|&&b| b).count());
        match (&self.metrics, &self.counts) {
            (Some(m), Some(c)) => {
                let _ = writeln!(out, "precision = {:.6}", m.precision);
                let _ = writeln!(out, "recall = {:.6}", m.recall);
                let _ = writeln!(out, "f1 = {:.6}", m.f1);
                let _ = writeln!(out, "tp = {}\nfp = {}\nfn = {}\ntn = {}", c.tp, c.fp, c.fn_, c.tn);
            }
            _ => out.push_str("labels = unavailable\n"),
        }
        out
    }

    pub fn timings_text(&self) -> String {
        let t = &self.timings;
        format!(
            "normalize_seconds = {:.6}\nmask_seconds = {:.6}\nreconstruct_seconds = {:.6}\nevaluate_seconds = {:.6}\ntotal_seconds = {:.6}\n",
            t.normalize, t.mask, t.reconstruct, t.evaluate, t.total
        )
    }
}

fn train_log_csv(cfg: &RunConfig, record: &TrainRecord) -> String {
    let mut out = echo_comment(cfg);
    out.push_str("stage,epoch,train_loss,val_loss\n");
    for (e, l) in record.ae_losses.iter().enumerate() {
        let _ = writeln!(out, "autoencoder,{e},{l:e},");
    }
    if let Some((tr, va)) = record.initial_loss {
        let _ = writeln!(out, "network,0,{tr:e},{va:e}");
    }
    for s in &record.epochs {
        let _ = writeln!(out, "network,{},{:e},{:e}", s.epoch, s.train_loss, s.val_loss);
    }
    out
}

/// Trains and writes `model.bundle` and `train_log.csv` into `out`.
pub fn run_train(cfg: &RunConfig, out: &Path, progress: Progress<'_>) -> Result<PathBuf> {
    let data = load_datasets(cfg)?;
    let (bundle, record) = train_model(cfg, &data.train, progress)?;
    ensure_dir(out)?;
    let path = out.join(BUNDLE_FILE);
    bundle.write(&path)?;
    write_file(&out.join(TRAIN_LOG_FILE), &train_log_csv(cfg, &record))?;
    Ok(path)
}

/// Scores the test series with a saved bundle and writes the report,
/// summary and timings into `out`.
pub fn run_detect(cfg: &RunConfig, bundle_path: &Path, out: &Path) -> Result<DetectionReport> {
    let bundle = ModelBundle::read(bundle_path)?;
    if bundle.config.mode != cfg.mode {
        return Err(Error::ModeMismatch {
            bundle: bundle.config.mode.to_string(),
            requested: cfg.mode.to_string(),
        });
    }
    let data = load_datasets(cfg)?;
    let report = detect(cfg, &bundle, &data.test)?;
    ensure_dir(out)?;
    write_file(&out.join(REPORT_FILE), &report.report_csv(cfg))?;
    write_file(&out.join(SUMMARY_FILE), &report.summary_text(cfg))?;
    write_file(&out.join(TIMINGS_FILE), &report.timings_text())?;
    Ok(report)
}

/// Outcome of one train-and-detect cell.
#[derive(Clone, Debug)]
pub struct CellResult {
    pub metrics: std::result::Result<Metrics, String>,
    pub train_seconds: f64,
    pub detect_seconds: f64,
}

/// Trains and detects in memory.
pub fn run_cell(cfg: &RunConfig, data: &Datasets, progress: Progress<'_>) -> CellResult {
    let start = Instant::now();
    let trained = cfg.validate().and_then(|_| train_model(cfg, &data.train, progress));
    let train_seconds = seconds_since(start);
    match trained {
        Err(e) => CellResult {
            metrics: Err(e.to_string()),
            train_seconds,
            detect_seconds: 0.0,
        },
        Ok((bundle, _)) => match detect(cfg, &bundle, &data.test) {
            Err(e) => CellResult {
                metrics: Err(e.to_string()),
                train_seconds,
                detect_seconds: 0.0,
            },
            Ok(report) => CellResult {
                metrics: report
                    .metrics
                    .ok_or_else(|| "test labels are required for evaluation".to_string()),
                train_seconds,
                detect_seconds: report.timings.total,
            },
        },
    }
}

#[derive(Clone, Debug)]
pub struct AblationRun {
    pub mode: Mode,
    pub seed: u64,
    pub cell: CellResult,
}

#[derive(Clone, Debug)]
pub struct SweepRow {
    pub sweep: Sweep,
    pub setting: String,
    pub cell: CellResult,
}

#[derive(Clone, Debug, Default)]
pub struct AblationOutcome {
    pub runs: Vec<AblationRun>,
    pub sweeps: Vec<SweepRow>,
}

impl AblationOutcome {
    /// F1 values of successful runs of `mode`, in seed order.
    pub fn f1s(&self, mode: Mode) -> Vec<f64> {
        self.runs
            .iter()
            .filter(|r| r.mode == mode)
            .filter_map(|r| r.cell.metrics.as_ref().ok().map(|m| m.f1))
            .collect()
    }

    pub fn mean_f1(&self, mode: Mode) -> Option<f64> {
        let f = self.f1s(mode);
        (!f.is_empty()).then(|| f.iter().sum::<f64>() / f.len() as f64)
    }

    pub fn succeeded(&self) -> usize {
        self.runs.iter().filter(|r| r.cell.metrics.is_ok()).count()
            + self.sweeps.iter().filter(|r| r.cell.metrics.is_ok()).count()
    }
}

fn metric_cells(cell: &CellResult) -> String {
    match &cell.metrics {
        Ok(m) => format!("{:.6},{:.6},{:.6},{:.3},{:.3},ok", m.precision, m.recall, m.f1, cell.train_seconds, cell.detect_seconds),
        Err(e) => format!(",,,{:.3},{:.3},\"error: {}\"", cell.train_seconds, cell.detect_seconds, e.replace('"', "'")),
    }
}

/// The four modes over every ablation seed, then the configured sweeps
/// (mode `full`, first ablation seed).
pub fn run_ablation_and_sweeps(cfg: &RunConfig, progress: Progress<'_>) -> Result<AblationOutcome> {
    let data = load_datasets(cfg)?;
    let mut outcome = AblationOutcome::default();
    for &seed in &cfg.ablation_seeds {
        for mode in Mode::ALL {
            let mut c = cfg.clone();
            c.mode = mode;
            c.seed = seed;
            progress(&format!("ablation: mode {mode}, seed {seed}"));
            let cell = run_cell(&c, &data, progress);
            match &cell.metrics {
                Ok(m) => progress(&format!("  f1 {:.4}", m.f1)),
                Err(e) => progress(&format!("  failed: {e}")),
            }
            outcome.runs.push(AblationRun { mode, seed, cell });
        }
    }

    let mut base = cfg.clone();
    base.mode = Mode::Full;
    base.seed = cfg.ablation_seeds[0];
    for &sweep in &cfg.sweeps {
        let settings: Vec<(String, RunConfig)> = match sweep {
            Sweep::Window => cfg
                .sweep_windows
                .iter()
                .map(|&w| {
                    let mut c = base.clone();
                    c.window_size = w;
                    (w.to_string(), c)
                })
                .collect(),
            Sweep::Rho => cfg
                .sweep_rhos
                .iter()
                .map(|&r| {
                    let mut c = base.clone();
                    c.rho = r;
                    (r.to_string(), c)
                })
                .collect(),
            Sweep::Steps => cfg
                .sweep_steps
                .iter()
                .map(|&s| {
                    let mut c = base.clone();
                    c.t_infer = cfg.t_infer_for(s);
                    c.steps = s;
                    (s.to_string(), c)
                })
                .collect(),
        };
        for (setting, c) in settings {
            progress(&format!("sweep {sweep} = {setting}"));
            let cell = run_cell(&c, &data, progress);
            outcome.sweeps.push(SweepRow { sweep, setting, cell });
        }
    }
    if outcome.succeeded() == 0 {
        return Err(Error::invalid("every ablation and sweep run failed"));
    }
    Ok(outcome)
}

/// Writes the ablation tables, pairwise t-tests and sweep tables into `out`.
pub fn write_ablation(cfg: &RunConfig, outcome: &AblationOutcome, out: &Path) -> Result<Vec<PathBuf>> {
    ensure_dir(out)?;
    let echo = echo_comment(cfg);
    let mut written = Vec::new();

    let mut runs = echo.clone();
    runs.push_str("mode,seed,precision,recall,f1,train_seconds,detect_seconds,status\n");
    for r in &outcome.runs {
        let _ = writeln!(runs, "{},{},{}", r.mode, r.seed, metric_cells(&r.cell));
    }
    let path = out.join("ablation_runs.csv");
    write_file(&path, &runs)?;
    written.push(path);

    let mut table = echo.clone();
    table.push_str("mode,precision,recall,f1,runs\n");
    for mode in Mode::ALL {
        let ok: Vec<&Metrics> = outcome
            .runs
            .iter()
            .filter(|r| r.mode == mode)
            .filter_map(|r| r.cell.metrics.as_ref().ok())
            .collect();
        if ok.is_empty() {
            let _ = writeln!(table, "{mode},,,,0");
            continue;
        }
        let n = ok.len() as f64;
        let mean = |f: fn(&Metrics) -> f64| ok.iter().map(|m| f(m)).sum::<f64>() / n;
        let _ = writeln!(
            table,
            "{mode},{:.6},{:.6},{:.6},{}",
            mean(|m| m.precision),
            mean(|m| m.recall),
            mean(|m| m.f1),
            ok.len()
        );
    }
    let path = out.join("ablation.csv");
    write_file(&path, &table)?;
    written.push(path);

    let mut tests = echo.clone();
    tests.push_str("mode_a,mode_b,t,p\n");
    for (i, a) in Mode::ALL.iter().enumerate() {
        for b in &Mode::ALL[i + 1..] {
            match welch_t_test(&outcome.f1s(*a), &outcome.f1s(*b)) {
                Ok(r) => {
                    let _ = writeln!(tests, "{a},{b},{},{}", r.t, r.p);
                }
                Err(_) => {
                    let _ = writeln!(tests, "{a},{b},,");
                }
            }
        }
    }
    let path = out.join("ablation_ttest.csv");
    write_file(&path, &tests)?;
    written.push(path);

    for &sweep in &cfg.sweeps {
        let mut text = echo.clone();
        text.push_str("setting,precision,recall,f1,train_seconds,detect_seconds,status\n");
        for row in outcome.sweeps.iter().filter(|r| r.sweep == sweep) {
            let _ = writeln!(text, "{},{}", row.setting, metric_cells(&row.cell));
        }
        let path = out.join(format!("sweep_{sweep}.csv"));
        write_file(&path, &text)?;
        written.push(path);
    }
    Ok(written)
}

/// Writes the configured synthetic benchmark as CSV files into `out`.
pub fn run_synth(cfg: &RunConfig, out: &Path) -> Result<Vec<PathBuf>> {
    let (train, test) = synthetic_benchmark(
        cfg.synth_channels,
        cfg.synth_train_len,
        cfg.synth_test_len,
        cfg.anomaly_ratio,
        &cfg.synth_kinds,
        cfg.data_seed,
    )?;
    ensure_dir(out)?;
    let paths = [
        out.join("train.csv"),
        out.join("test.csv"),
        out.join("test_labels.txt"),
    ];
    crate::data::write_series(&train, &paths[0], None)?;
    crate::data::write_series(&test, &paths[1], Some(&paths[2]))?;
    Ok(paths.to_vec())
}
