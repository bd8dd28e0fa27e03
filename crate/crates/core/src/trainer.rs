//! Training loop, learning-rate rule, evaluation, prediction artifacts and
//! ablation grids.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use log::{info, warn};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::attention::{AttentionPattern, PeMode, RpeShare};
use crate::data::{
    labels_to_text, resample_temporal, upsample_predictions, ClassMapping, Dataset, VideoSample,
};
use crate::error::{Error, Result};
use crate::loss::{
    boundaries_at, derive_boundaries, mean_boundary_kl, total_loss, BaDistance, LossWeights,
};
use crate::metrics::{evaluate_corpus, extract_segments, EvalOptions, EvalReport};
use crate::net::{
    attention_entry_count, checkpoint, Architecture, ForwardOptions, Model, ModelConfig,
};
use crate::tensor::{Adam, AdamConfig, DropoutStreams, Tape, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub loss: LossWeights,
    pub seed: u64,
    /// Reshuffle the video order every epoch.
    pub shuffle: bool,
    /// Epochs whose mean loss rose, since the last decay, that trigger a decay.
    pub lr_decay_after: usize,
    pub lr_decay_factor: f64,
    /// Evaluate on the training set every this many epochs (0 disables).
    pub eval_every: usize,
    /// Keep the parameters of the best evaluated epoch instead of the last.
    pub keep_best: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 150,
            lr: 5e-4,
            weight_decay: 1e-5,
            loss: LossWeights::default(),
            seed: 0,
            shuffle: true,
            lr_decay_after: 3,
            lr_decay_factor: 0.5,
            eval_every: 0,
            keep_best: false,
        }
    }
}

impl TrainConfig {
    pub const KEYS: &'static [&'static str] = &[
        "epochs",
        "lr",
        "weight_decay",
        "lambda",
        "beta",
        "theta",
        "ba_distance",
        "seed",
        "shuffle",
        "lr_decay_after",
        "lr_decay_factor",
        "eval_every",
        "keep_best",
    ];

    pub fn to_pairs(&self) -> Vec<(&'static str, String)> {
        vec![
            ("epochs", self.epochs.to_string()),
            ("lr", self.lr.to_string()),
            ("weight_decay", self.weight_decay.to_string()),
            ("lambda", self.loss.lambda.to_string()),
            ("beta", self.loss.beta.to_string()),
            ("theta", self.loss.theta.to_string()),
            ("ba_distance", self.loss.ba_distance.to_string()),
            ("seed", self.seed.to_string()),
            ("shuffle", self.shuffle.to_string()),
            ("lr_decay_after", self.lr_decay_after.to_string()),
            ("lr_decay_factor", self.lr_decay_factor.to_string()),
            ("eval_every", self.eval_every.to_string()),
            ("keep_best", self.keep_best.to_string()),
        ]
    }

    /// Sets one key. Returns `Ok(false)` for keys this config does not own.
    pub fn set(&mut self, key: &str, value: &str) -> Result<bool> {
        fn num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
            v.trim()
                .parse()
                .map_err(|_| Error::config(format!("invalid value '{v}' for {key}")))
        }
        match key {
            "epochs" => self.epochs = num(key, value)?,
            "lr" => self.lr = num(key, value)?,
            "weight_decay" => self.weight_decay = num(key, value)?,
            "lambda" => self.loss.lambda = num(key, value)?,
            "beta" => self.loss.beta = num(key, value)?,
            "theta" => self.loss.theta = num(key, value)?,
            "ba_distance" => self.loss.ba_distance = value.trim().parse()?,
            "seed" => self.seed = num(key, value)?,
            "shuffle" => self.shuffle = num(key, value)?,
            "lr_decay_after" => self.lr_decay_after = num(key, value)?,
            "lr_decay_factor" => self.lr_decay_factor = num(key, value)?,
            "eval_every" => self.eval_every = num(key, value)?,
            "keep_best" => self.keep_best = num(key, value)?,
            _ => return Ok(false),
        }
        Ok(true)
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::config("epochs must be at least 1"));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::config("lr must be positive"));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::config("weight_decay must be non-negative"));
        }
        if self.lr_decay_after == 0 || !(self.lr_decay_factor > 0.0 && self.lr_decay_factor <= 1.0)
        {
            return Err(Error::config(
                "lr decay needs a positive count and a factor in (0, 1]",
            ));
        }
        if self.keep_best && self.eval_every == 0 {
            return Err(Error::config("keep_best needs eval_every > 0"));
        }
        self.loss.validate()
    }
}

/// Halves the learning rate once the epoch loss has risen `after` times
/// since the last decay. Rises need not be consecutive.
#[derive(Clone, Debug, PartialEq)]
pub struct LrSchedule {
    pub lr: f64,
    pub counter: usize,
    after: usize,
    factor: f64,
    prev: Option<f64>,
}

impl LrSchedule {
    pub fn new(lr: f64, after: usize, factor: f64) -> Self {
        LrSchedule {
            lr,
            counter: 0,
            after,
            factor,
            prev: None,
        }
    }

    /// Feeds one epoch's mean loss; returns true when the rate was decayed.
    pub fn observe(&mut self, loss: f64) -> bool {
        let rose = self.prev.is_some_and(|p| loss > p);
        self.prev = Some(loss);
        if !rose {
            return false;
        }
        self.counter += 1;
        if self.counter >= self.after {
            self.counter = 0;
            self.lr *= self.factor;
            return true;
        }
        false
    }
}

/// Mean loss terms of one epoch.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub ce: f64,
    pub tmse: f64,
    pub ba: f64,
    pub total: f64,
    /// Learning rate used during the epoch.
    pub lr: f64,
}

pub fn log_csv(rows: &[EpochLog]) -> String {
    let mut s = String::from("epoch,ce,tmse,ba,total,lr\n");
    for r in rows {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{}",
            r.epoch, r.ce, r.tmse, r.ba, r.total, r.lr
        );
    }
    s
}

pub struct TrainOutcome {
    pub model: Model,
    pub log: Vec<EpochLog>,
    /// Epoch whose parameters `model` holds.
    pub selected_epoch: usize,
}

fn check_dataset(ds: &Dataset, cfg: &ModelConfig) -> Result<()> {
    if ds.videos.is_empty() {
        return Err(Error::EmptyInput("dataset has no videos".into()));
    }
    if ds.mapping.len() != cfg.num_classes {
        return Err(Error::config(format!(
            "model has {} classes, dataset mapping {}",
            cfg.num_classes,
            ds.mapping.len()
        )));
    }
    for v in &ds.videos {
        if v.features.cols() != cfg.input_dim {
            return Err(Error::config(format!(
                "video {} has {}-dim features, model expects {}",
                v.id,
                v.features.cols(),
                cfg.input_dim
            )));
        }
        cfg.check_length(v.len())
            .map_err(|e| Error::config(format!("video {}: {e}", v.id)))?;
    }
    Ok(())
}

/// One forward/backward pass and Adam step on `video`.
fn train_step(
    model: &mut Model,
    adam: &mut Adam,
    video: &VideoSample,
    weights: &LossWeights,
    seed: u64,
) -> Result<crate::loss::LossBreakdown> {
    let mut tape = Tape::new();
    let bound = model.bind(&mut tape, true);
    let streams = DropoutStreams::new(seed, adam.steps_taken());
    let in_video = |e: Error| match e {
        Error::Numeric(m) => Error::Numeric(format!("{m} on video {}", video.id)),
        e => e,
    };
    let out = model
        .forward_bound(
            &mut tape,
            &bound,
            &video.features,
            ForwardOptions::train(streams),
        )
        .map_err(in_video)?;
    let (loss, parts) =
        total_loss(&mut tape, &out.stages, &video.labels, weights).map_err(in_video)?;
    for (term, v) in [("ce", parts.ce), ("tmse", parts.tmse), ("ba", parts.ba)] {
        if !v.is_finite() {
            return Err(Error::Numeric(format!(
                "non-finite {term} loss ({v}) on video {}",
                video.id
            )));
        }
    }
    let grads = tape.backward(loss)?;
    let mut by_name: BTreeMap<&str, Tensor> = BTreeMap::new();
    for (name, var) in &bound {
        let g = grads
            .get(*var)
            .ok_or_else(|| Error::Internal(format!("no gradient for {name}")))?;
        if !g.is_finite() {
            return Err(Error::Numeric(format!(
                "non-finite gradient for {name} on video {}",
                video.id
            )));
        }
        by_name.insert(name.as_str(), g.clone());
    }
    adam.step(
        model
            .params
            .iter_mut()
            .map(|(n, p)| (n.as_str(), p, &by_name[n.as_str()])),
    )?;
    Ok(parts)
}

/// Mean of F1@{10,25,50}, edit and accuracy, used to pick the best epoch.
fn selection_score(r: &EvalReport) -> f64 {
    let vals: Vec<f64> = r.f1.iter().map(|x| x.1).chain([r.edit, r.acc]).collect();
    vals.iter().sum::<f64>() / vals.len() as f64
}

/// Trains a freshly initialised model on `ds`.
pub fn train(ds: &Dataset, model_cfg: &ModelConfig, cfg: &TrainConfig) -> Result<TrainOutcome> {
    model_cfg.validate()?;
    let model = Model::init(model_cfg.clone(), cfg.seed)?;
    train_model(model, ds, cfg)
}

/// Continues training `model` on `ds`.
pub fn train_model(mut model: Model, ds: &Dataset, cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    check_dataset(ds, &model.config)?;
    let mut adam = Adam::new(AdamConfig {
        lr: cfg.lr,
        weight_decay: cfg.weight_decay,
        ..AdamConfig::default()
    });
    let mut schedule = LrSchedule::new(cfg.lr, cfg.lr_decay_after, cfg.lr_decay_factor);
    let mut order_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    order_rng.set_stream(1);
    let mut order: Vec<usize> = (0..ds.videos.len()).collect();
    let mut log = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(f64, usize, Model)> = None;

    for epoch in 1..=cfg.epochs {
        if cfg.shuffle {
            order.shuffle(&mut order_rng);
        }
        let mut row = EpochLog {
            epoch,
            lr: schedule.lr,
            ..Default::default()
        };
        for &i in &order {
            let parts = train_step(&mut model, &mut adam, &ds.videos[i], &cfg.loss, cfg.seed)?;
            row.ce += parts.ce;
            row.tmse += parts.tmse;
            row.ba += parts.ba;
            row.total += parts.total;
        }
        let n = ds.videos.len() as f64;
        row.ce /= n;
        row.tmse /= n;
        row.ba /= n;
        row.total /= n;
        info!(
            "epoch {epoch}: loss {:.5} (ce {:.5} tmse {:.5} ba {:.5}) lr {:.2e}",
            row.total, row.ce, row.tmse, row.ba, row.lr
        );
        log.push(row);
        if schedule.observe(row.total) {
            info!(
                "epoch {epoch}: learning rate decayed to {:.3e}",
                schedule.lr
            );
            adam.set_lr(schedule.lr);
        }
        if cfg.eval_every > 0 && epoch % cfg.eval_every == 0 {
            let report = evaluate_run(&model, ds, &EvalOptions::default())?;
            info!(
                "epoch {epoch}: train {}",
                report.table().replace('\n', "  ")
            );
            if cfg.keep_best {
                let score = selection_score(&report);
                if best.as_ref().is_none_or(|b| score > b.0) {
                    best = Some((score, epoch, model.clone()));
                }
            }
        }
    }
    let (model, selected_epoch) = match best {
        Some((_, e, m)) => (m, e),
        None => (model, cfg.epochs),
    };
    Ok(TrainOutcome {
        model,
        log,
        selected_epoch,
    })
}

/// Last-stage argmax labels for every video, in evaluation mode.
pub fn predict_all(model: &Model, ds: &Dataset) -> Result<Vec<Vec<usize>>> {
    ds.videos
        .iter()
        .map(|v| model.predict(&v.features))
        .collect()
}

/// Predicts `sample` (recorded at `source_fps`) at the model's `target_fps`
/// and repeats the labels back to the original frame count.
pub fn predict_resampled(
    model: &Model,
    sample: &VideoSample,
    source_fps: f64,
    target_fps: f64,
) -> Result<Vec<usize>> {
    let low = resample_temporal(sample, source_fps, target_fps)?;
    let factor = (source_fps / target_fps).round() as usize;
    let pred = model.predict(&low.features)?;
    Ok(upsample_predictions(&pred, factor, sample.len()))
}

pub fn evaluate_run(model: &Model, ds: &Dataset, opts: &EvalOptions) -> Result<EvalReport> {
    let preds = predict_all(model, ds)?;
    let pairs: Vec<(&[usize], &[usize])> = preds
        .iter()
        .zip(&ds.videos)
        .map(|(p, v)| (p.as_slice(), v.labels.as_slice()))
        .collect();
    evaluate_corpus(&pairs, opts)
}

/// Mean KL between boundary LADs and their priors at the last decoder
/// layer of each stage, averaged over videos. `None` for a stage where no
/// boundary has a full window.
pub fn boundary_lad_kl_per_stage(model: &Model, ds: &Dataset) -> Result<Vec<Option<f64>>> {
    let stages = model.config.num_stages();
    let mut sums = vec![(0.0, 0usize); stages];
    for v in &ds.videos {
        let mut tape = Tape::new();
        let bound = model.bind(&mut tape, false);
        let out = model.forward_bound(&mut tape, &bound, &v.features, ForwardOptions::eval())?;
        let b = derive_boundaries(&v.labels);
        for (s, acc) in out.stages.iter().zip(sums.iter_mut()) {
            let at = boundaries_at(&s.dec_last, &b, v.len())?;
            if let Some(kl) = mean_boundary_kl(&s.dec_last, &at)? {
                acc.0 += kl;
                acc.1 += 1;
            }
        }
    }
    Ok(sums
        .into_iter()
        .map(|(s, n)| (n > 0).then(|| s / n as f64))
        .collect())
}

/// [`boundary_lad_kl_per_stage`] averaged over stages.
pub fn boundary_lad_kl(model: &Model, ds: &Dataset) -> Result<Option<f64>> {
    let per: Vec<f64> = boundary_lad_kl_per_stage(model, ds)?
        .into_iter()
        .flatten()
        .collect();
    Ok((!per.is_empty()).then(|| per.iter().sum::<f64>() / per.len() as f64))
}

/// `class,start,end` rows with class names and inclusive frame bounds.
pub fn segment_csv(labels: &[usize], mapping: &ClassMapping) -> Result<String> {
    let mut s = String::from("class,start,end\n");
    for seg in extract_segments(labels) {
        let name = mapping
            .name(seg.class)
            .ok_or_else(|| Error::Domain(format!("class id {} outside the mapping", seg.class)))?;
        let _ = writeln!(s, "{name},{},{}", seg.start, seg.end);
    }
    Ok(s)
}

const PALETTE: [&str; 20] = [
    "#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f",
    "#bcbd22", "#17becf", "#aec7e8", "#ffbb78", "#98df8a", "#ff9896", "#c5b0d5", "#c49c94",
    "#f7b6d2", "#c7c7c7", "#dbdb8d", "#9edae5",
];

pub fn class_color(class: usize) -> &'static str {
    PALETTE[class % PALETTE.len()]
}

/// SVG strip of coloured segment bars: the prediction, and the ground truth
/// below it when given. The same colour means the same class.
pub fn timeline_svg(pred: &[usize], gt: Option<&[usize]>, mapping: &ClassMapping) -> String {
    const WIDTH: f64 = 1000.0;
    const BAR: f64 = 28.0;
    const LABEL: f64 = 110.0;
    let len = pred.len().max(gt.map_or(0, <[usize]>::len)).max(1);
    let scale = WIDTH / len as f64;
    let rows: Vec<(&str, &[usize])> = std::iter::once(("prediction", pred))
        .chain(gt.map(|g| ("ground truth", g)))
        .collect();
    let mut used: Vec<usize> = rows.iter().flat_map(|(_, l)| l.iter().copied()).collect();
    used.sort_unstable();
    used.dedup();
    let legend_y = 10.0 + rows.len() as f64 * (BAR + 10.0) + 6.0;
    let height = legend_y + 20.0 * used.len().div_ceil(5) as f64 + 10.0;
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{}" height="{height}" font-family="sans-serif" font-size="12">"#,
        LABEL + WIDTH + 10.0
    );
    for (r, (title, labels)) in rows.iter().enumerate() {
        let y = 10.0 + r as f64 * (BAR + 10.0);
        let _ = writeln!(
            s,
            r#"<text x="4" y="{}">{title}</text>"#,
            y + BAR / 2.0 + 4.0
        );
        for seg in extract_segments(labels) {
            let _ = writeln!(
                s,
                r#"<rect x="{:.2}" y="{y}" width="{:.2}" height="{BAR}" fill="{}"><title>{} [{}, {}]</title></rect>"#,
                LABEL + seg.start as f64 * scale,
                seg.len() as f64 * scale,
                class_color(seg.class),
                xml_escape(mapping.name(seg.class).unwrap_or("?")),
                seg.start,
                seg.end
            );
        }
    }
    for (k, &c) in used.iter().enumerate() {
        let x = LABEL + (k % 5) as f64 * (WIDTH / 5.0);
        let y = legend_y + (k / 5) as f64 * 20.0;
        let _ = writeln!(
            s,
            r#"<rect x="{x}" y="{y}" width="12" height="12" fill="{}"/><text x="{}" y="{}">{}</text>"#,
            class_color(c),
            x + 16.0,
            y + 10.0,
            xml_escape(mapping.name(c).unwrap_or("?"))
        );
    }
    s.push_str("</svg>\n");
    s
}

fn xml_escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
        .replace('"', "&quot;")
}

/// Writes `checkpoint.bin`, `log.csv` and `metrics.csv` into `dir`.
pub fn write_run(dir: &Path, outcome: &TrainOutcome, report: &EvalReport) -> Result<()> {
    fs::create_dir_all(dir)?;
    checkpoint::save(&outcome.model, dir.join("checkpoint.bin"))?;
    fs::write(dir.join("log.csv"), log_csv(&outcome.log))?;
    fs::write(dir.join("metrics.csv"), report.to_csv())?;
    Ok(())
}

/// Writes `<id>.txt` label files, `<id>.csv` segment files and `<id>.svg`
/// timelines for every video of `ds` into `dir`.
pub fn write_predictions(
    dir: &Path,
    ds: &Dataset,
    preds: &[Vec<usize>],
    with_gt: bool,
) -> Result<()> {
    fs::create_dir_all(dir)?;
    for (v, p) in ds.videos.iter().zip(preds) {
        fs::write(
            dir.join(format!("{}.txt", v.id)),
            labels_to_text(p, &ds.mapping)?,
        )?;
        fs::write(
            dir.join(format!("{}.csv", v.id)),
            segment_csv(p, &ds.mapping)?,
        )?;
        let gt = with_gt.then_some(v.labels.as_slice());
        fs::write(
            dir.join(format!("{}.svg", v.id)),
            timeline_svg(p, gt, &ds.mapping),
        )?;
    }
    Ok(())
}

/// Named ablation grids.
#[derive(Clone, Debug, PartialEq)]
pub enum Grid {
    /// Architecture × attention pattern.
    Architecture,
    /// Positional encoding kind and RPE sharing.
    PositionalEncoding,
    /// Distance measure of the boundary-aware term.
    BaDistance,
    Window(Vec<usize>),
    Heads(Vec<usize>),
    Beta(Vec<f64>),
}

impl Grid {
    pub const NAMES: &'static [&'static str] =
        &["arch", "pe", "ba_distance", "window", "heads", "beta"];

    /// Grid by name with the published value lists.
    pub fn by_name(name: &str) -> Result<Self> {
        Ok(match name {
            "arch" => Grid::Architecture,
            "pe" => Grid::PositionalEncoding,
            "ba_distance" => Grid::BaDistance,
            "window" => Grid::Window(vec![11, 31, 51, 71, 91]),
            "heads" => Grid::Heads(vec![1, 2, 4, 8]),
            "beta" => Grid::Beta(vec![0.0, 0.01, 0.02, 0.03, 0.04]),
            _ => {
                return Err(Error::config(format!(
                    "unknown grid '{name}', expected one of {}",
                    Grid::NAMES.join(", ")
                )))
            }
        })
    }

    /// One `(model, train)` configuration per cell, derived from the base.
    pub fn cells(
        &self,
        model: &ModelConfig,
        train: &TrainConfig,
    ) -> Vec<(ModelConfig, TrainConfig)> {
        let mut out = Vec::new();
        match self {
            Grid::Architecture => {
                for &arch in Architecture::ALL {
                    for &pat in AttentionPattern::ALL {
                        let mut m = model.clone();
                        m.architecture = arch;
                        m.attention.pattern = pat;
                        out.push((m, train.clone()));
                    }
                }
            }
            Grid::PositionalEncoding => {
                let rows = [
                    (PeMode::None, None),
                    (PeMode::AbsSinusoidal, None),
                    (PeMode::AbsLearnable, None),
                    (PeMode::Relative, Some(RpeShare::NoShare)),
                    (PeMode::Relative, Some(RpeShare::StageShared)),
                    (PeMode::Relative, Some(RpeShare::ScaleShared)),
                ];
                for (pe, share) in rows {
                    let mut m = model.clone();
                    m.attention.pe_mode = pe;
                    if let Some(s) = share {
                        m.attention.rpe_share = s;
                    }
                    out.push((m, train.clone()));
                }
            }
            Grid::BaDistance => {
                for &d in BaDistance::ALL {
                    let mut t = train.clone();
                    t.loss.ba_distance = d;
                    out.push((model.clone(), t));
                }
            }
            // Window and head sweeps run without RPE so every cell has the
            // same parameter count outside attention.
            Grid::Window(ws) => {
                for &w in ws {
                    let mut m = model.clone();
                    m.attention.window = w;
                    m.attention.pe_mode = PeMode::None;
                    out.push((m, train.clone()));
                }
            }
            Grid::Heads(hs) => {
                for &h in hs {
                    let mut m = model.clone();
                    m.attention.heads = h;
                    m.attention.pe_mode = PeMode::None;
                    out.push((m, train.clone()));
                }
            }
            Grid::Beta(bs) => {
                for &b in bs {
                    let mut t = train.clone();
                    t.loss.beta = b;
                    out.push((model.clone(), t));
                }
            }
        }
        out
    }
}

/// Sequence length at which attention entries are counted.
pub const ENTRY_COUNT_LEN: usize = 1024;

#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    pub model: ModelConfig,
    pub train: TrainConfig,
    /// Retained attention-score entries of one forward pass at [`ENTRY_COUNT_LEN`] frames.
    pub entries: Option<usize>,
    pub report: Option<EvalReport>,
    /// Why the cell was skipped.
    pub skipped: Option<String>,
}

/// Trains and evaluates every cell of `grid`. Cells whose configuration is
/// rejected are kept as skipped rows.
pub fn ablate(
    grid: &Grid,
    base_model: &ModelConfig,
    base_train: &TrainConfig,
    train_set: &Dataset,
    eval_set: &Dataset,
) -> Result<Vec<AblationRow>> {
    let cells = grid.cells(base_model, base_train);
    let total = cells.len();
    let mut rows = Vec::with_capacity(total);
    for (k, (m, t)) in cells.into_iter().enumerate() {
        let run = || -> Result<(usize, EvalReport)> {
            m.validate()?;
            t.validate()?;
            check_dataset(eval_set, &m)?;
            let entries = attention_entry_count(&m, ENTRY_COUNT_LEN);
            let outcome = train(train_set, &m, &t)?;
            Ok((
                entries,
                evaluate_run(&outcome.model, eval_set, &EvalOptions::default())?,
            ))
        };
        info!("ablation cell {}/{total}", k + 1);
        let row = match run() {
            Ok((entries, report)) => AblationRow {
                model: m,
                train: t,
                entries: Some(entries),
                report: Some(report),
                skipped: None,
            },
            Err(e @ (Error::Config(_) | Error::Unsupported(_))) => {
                warn!("ablation cell {} skipped: {e}", k + 1);
                AblationRow {
                    model: m,
                    train: t,
                    entries: None,
                    report: None,
                    skipped: Some(e.to_string()),
                }
            }
            Err(e) => return Err(e),
        };
        rows.push(row);
    }
    Ok(rows)
}

pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let mut s = String::from(
        "architecture,attention,pe,rpe_share,window,heads,beta,ba_distance,f1_10,f1_25,f1_50,edit,acc,entries_1024,status\n",
    );
    for r in rows {
        let a = &r.model.attention;
        let _ = write!(
            s,
            "{},{},{},{},{},{},{},{},",
            r.model.architecture,
            a.pattern,
            a.pe_mode,
            if a.pe_mode == PeMode::Relative {
                a.rpe_share.as_str()
            } else {
                ""
            },
            a.window,
            a.heads,
            r.train.loss.beta,
            r.train.loss.ba_distance
        );
        match &r.report {
            Some(rep) => {
                for t in [0.10, 0.25, 0.50] {
                    let _ = write!(s, "{:.4},", rep.f1_at(t).unwrap_or(f64::NAN));
                }
                let _ = write!(s, "{:.4},{:.4},", rep.edit, rep.acc);
            }
            None => s.push_str(",,,,,"),
        }
        let _ = write!(
            s,
            "{},",
            r.entries.map(|e| e.to_string()).unwrap_or_default()
        );
        match &r.skipped {
            None => s.push_str("ok\n"),
            Some(why) => {
                let _ = writeln!(s, "\"skipped: {}\"", why.replace('"', "'"));
            }
        }
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lr_halves_after_third_rise() {
        let mut s = LrSchedule::new(1.0, 3, 0.5);
        // Rises at epochs 3, 5 and 7.
        let losses = [5.0, 4.0, 4.5, 4.0, 4.2, 3.0, 3.5, 3.0];
        let decayed: Vec<bool> = losses.iter().map(|&l| s.observe(l)).collect();
        assert_eq!(
            decayed,
            [false, false, false, false, false, false, true, false]
        );
        assert_eq!(s.lr, 0.5);
        assert_eq!(s.counter, 0);
    }

    #[test]
    fn train_config_pairs_round_trip() {
        let c = TrainConfig {
            epochs: 7,
            lr: 1e-3,
            seed: 9,
            shuffle: false,
            loss: LossWeights {
                ba_distance: BaDistance::Js,
                ..Default::default()
            },
            ..Default::default()
        };
        let mut d = TrainConfig::default();
        for (k, v) in c.to_pairs() {
            assert!(d.set(k, &v).unwrap(), "{k}");
        }
        assert_eq!(c, d);
        assert_eq!(TrainConfig::KEYS.len(), c.to_pairs().len());
        assert!(!d.set("window", "3").unwrap());
    }

    #[test]
    fn grid_sizes() {
        let m = ModelConfig::default();
        let t = TrainConfig::default();
        assert_eq!(Grid::Architecture.cells(&m, &t).len(), 6);
        assert_eq!(Grid::PositionalEncoding.cells(&m, &t).len(), 6);
        assert_eq!(Grid::BaDistance.cells(&m, &t).len(), 4);
        for name in Grid::NAMES {
            assert!(!Grid::by_name(name).unwrap().cells(&m, &t).is_empty());
        }
        assert!(Grid::by_name("conv").is_err());
    }
}
