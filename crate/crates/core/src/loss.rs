//! Training losses: frame-wise cross-entropy, truncated MSE smoothing and the
//! boundary-aware loss on local-attention distributions.

use crate::attention::{str_enum, AttentionRecord};
use crate::error::{Error, Result};
use crate::metrics::extract_segments;
use crate::net::StageOutput;
use crate::tensor::{Tape, Tensor, Var};

/// Distance between a local-attention distribution and its prior.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum BaDistance {
    /// `KL(P‖D)` with the prior `P` first.
    Kl,
    /// Jensen–Shannon divergence, natural log.
    Js,
    /// Squared Euclidean distance.
    L2,
    /// 1-D order-1 Wasserstein distance over window offsets.
    Wasserstein,
}

str_enum!(BaDistance { Kl => "kl", Js => "js", L2 => "l2", Wasserstein => "wasserstein" });

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    /// Weight of the smoothing term.
    pub lambda: f64,
    /// Weight of the boundary-aware term.
    pub beta: f64,
    /// Truncation threshold of the smoothing term.
    pub theta: f64,
    pub ba_distance: BaDistance,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda: 0.15,
            beta: 0.02,
            theta: 4.0,
            ba_distance: BaDistance::Kl,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0 && self.beta >= 0.0) {
            return Err(Error::config("loss weights must be non-negative"));
        }
        if !(self.theta > 0.0) {
            return Err(Error::config("truncation threshold must be positive"));
        }
        Ok(())
    }
}

/// Mean over frames of `−log softmax(logits)[label]`.
pub fn ce_loss(tape: &mut Tape, logits: Var, labels: &[usize]) -> Result<Var> {
    tape.cross_entropy_from_logits(logits, labels)
}

/// Mean over `(T−1)·C` of `min(|Δ|, θ)²`, where `Δ` is the change of
/// log-probability between adjacent frames and the earlier frame is held
/// constant. Sequences shorter than two frames give 0.
pub fn tmse_loss(tape: &mut Tape, logits: Var, theta: f64) -> Result<Var> {
    let v = tape.value(logits);
    if v.shape().len() != 2 {
        return Err(Error::dim(format!(
            "tmse expects T×C logits, got {:?}",
            v.shape()
        )));
    }
    let (t, c) = (v.rows(), v.cols());
    if t < 2 {
        return Ok(tape.constant(Tensor::scalar(0.0)));
    }
    let logp = tape.log_softmax_lastdim(logits)?;
    let cur = tape.gather_rows(logp, (1..t).collect())?;
    let prev = tape.gather_rows(logp, (0..t - 1).collect())?;
    let prev = tape.detach(prev);
    let delta = tape.sub(cur, prev)?;
    let delta = tape.abs(delta);
    let delta = tape.clamp_max(delta, theta);
    let sq = tape.square(delta);
    let s = tape.sum_all(sq);
    Ok(tape.scale(s, 1.0 / ((t - 1) * c) as f64))
}

/// Start and end frames of every segment.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct BoundarySet {
    pub starts: Vec<usize>,
    pub ends: Vec<usize>,
}

pub fn derive_boundaries(labels: &[usize]) -> BoundarySet {
    let segs = extract_segments(labels);
    BoundarySet {
        starts: segs.iter().map(|s| s.start).collect(),
        ends: segs.iter().map(|s| s.end).collect(),
    }
}

impl BoundarySet {
    /// Boundaries at half resolution: `t ↦ ⌊t/2⌋`, duplicates removed.
    pub fn halved(&self) -> BoundarySet {
        let half = |v: &[usize]| {
            let mut out: Vec<usize> = v.iter().map(|t| t / 2).collect();
            out.dedup();
            out
        };
        BoundarySet {
            starts: half(&self.starts),
            ends: half(&self.ends),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PriorKind {
    Start,
    End,
}

/// Idealised local-attention distribution of a boundary frame over window
/// offsets `−r..=r`. A start frame spreads its mass over itself and later
/// frames, an end frame over earlier frames only.
pub fn prior(kind: PriorKind, window: usize) -> Result<Vec<f64>> {
    if window.is_multiple_of(2) || window < 3 {
        return Err(Error::Domain(format!(
            "prior needs an odd window of at least 3, got {window}"
        )));
    }
    let r = window / 2;
    let mut p = vec![0.0; window];
    match kind {
        PriorKind::Start => p[r..].iter_mut().for_each(|v| *v = 1.0 / (r + 1) as f64),
        PriorKind::End => p[..r].iter_mut().for_each(|v| *v = 1.0 / r as f64),
    }
    Ok(p)
}

/// Flat indices into `record.probs` of the window slots of `row`, in
/// `[head][offset]` order, or `None` when the row lacks a full window.
fn window_indices(record: &AttentionRecord, row: usize) -> Option<Vec<usize>> {
    let w = record.window;
    let r = w / 2;
    let len = record.len();
    if row < r || row + r >= len {
        return None;
    }
    let nnz = record.pattern.nnz();
    let slots: Vec<usize> = (row - r..=row + r)
        .map(|key| record.pattern.position(row, key))
        .collect::<Option<_>>()?;
    Some(
        (0..record.heads)
            .flat_map(|h| slots.iter().map(move |&s| h * nnz + s))
            .collect(),
    )
}

/// Local-attention distribution of frame `row`: its window slots averaged
/// over heads and renormalised. `None` for frames without a full window.
pub fn extract_lad(record: &AttentionRecord, row: usize) -> Option<Vec<f64>> {
    let idx = window_indices(record, row)?;
    let w = record.window;
    let vals = record.values().data();
    let mut lad = vec![0.0; w];
    for (k, &i) in idx.iter().enumerate() {
        lad[k % w] += vals[i];
    }
    let s: f64 = lad.iter().sum();
    lad.iter_mut().for_each(|v| *v /= s);
    Some(lad)
}

/// Differentiable LADs of `rows`, stacked as `rows.len() × w`.
fn lad_batch(tape: &mut Tape, record: &AttentionRecord, rows: &[usize]) -> Result<Var> {
    let (w, h, b) = (record.window, record.heads, rows.len());
    let mut idx = Vec::with_capacity(b * h * w);
    for &row in rows {
        idx.extend(
            window_indices(record, row)
                .ok_or_else(|| Error::Internal(format!("row {row} lacks a full window")))?,
        );
    }
    let slots = tape.gather_elems(record.probs, idx)?;
    let slots = tape.reshape(slots, vec![b * h, w])?;
    let mut avg = vec![0.0; b * b * h];
    for i in 0..b {
        for k in 0..h {
            avg[i * b * h + i * h + k] = 1.0 / h as f64;
        }
    }
    let avg = tape.constant(Tensor::new(vec![b, b * h], avg)?);
    let mean = tape.matmul(avg, slots)?;
    tape.normalize_lastdim(mean)
}

/// Summed distance between each row of `p` (constant priors) and `d`.
pub fn distribution_distance(tape: &mut Tape, p: Var, d: Var, kind: BaDistance) -> Result<Var> {
    match kind {
        BaDistance::Kl => tape.kl_from_probs(p, d),
        BaDistance::Js => {
            let m = tape.add(p, d)?;
            let m = tape.scale(m, 0.5);
            let a = tape.kl_from_probs(p, m)?;
            let b = tape.kl_from_probs(d, m)?;
            let s = tape.add(a, b)?;
            Ok(tape.scale(s, 0.5))
        }
        BaDistance::L2 => {
            let diff = tape.sub(d, p)?;
            let sq = tape.square(diff);
            Ok(tape.sum_all(sq))
        }
        BaDistance::Wasserstein => {
            let cd = tape.cumsum_lastdim(d);
            let cp = tape.cumsum_lastdim(p);
            let diff = tape.sub(cd, cp)?;
            let a = tape.abs(diff);
            Ok(tape.sum_all(a))
        }
    }
}

/// Anchors of one record: `(row, prior kind)` for boundary frames that have
/// a full window at the record's resolution.
pub fn ba_anchors(record: &AttentionRecord, boundaries: &BoundarySet) -> Vec<(usize, PriorKind)> {
    let starts = boundaries.starts.iter().map(|&t| (t, PriorKind::Start));
    let ends = boundaries.ends.iter().map(|&t| (t, PriorKind::End));
    starts
        .chain(ends)
        .filter(|&(t, _)| window_indices(record, t).is_some())
        .collect()
}

/// Boundary frames mapped to the resolution of `record` for a video of
/// `len` frames.
pub fn boundaries_at(
    record: &AttentionRecord,
    boundaries: &BoundarySet,
    len: usize,
) -> Result<BoundarySet> {
    if record.len() == len {
        Ok(boundaries.clone())
    } else if record.len() == len.div_ceil(2) {
        Ok(boundaries.halved())
    } else {
        Err(Error::dim(format!(
            "attention record of length {} does not match a {len}-frame video",
            record.len()
        )))
    }
}

/// Summed distance of the boundary LADs of one record to their priors, or
/// `None` when no boundary frame has a full window. `boundaries` must already
/// be at the record's resolution.
pub fn boundary_distance(
    tape: &mut Tape,
    record: &AttentionRecord,
    boundaries: &BoundarySet,
    kind: BaDistance,
) -> Result<Option<Var>> {
    let anchors = ba_anchors(record, boundaries);
    if anchors.is_empty() {
        return Ok(None);
    }
    let w = record.window;
    let start = prior(PriorKind::Start, w)?;
    let end = prior(PriorKind::End, w)?;
    let rows: Vec<usize> = anchors.iter().map(|a| a.0).collect();
    let mut priors = Vec::with_capacity(anchors.len() * w);
    for (_, k) in &anchors {
        priors.extend_from_slice(if *k == PriorKind::Start { &start } else { &end });
    }
    let d = lad_batch(tape, record, &rows)?;
    let p = tape.constant(Tensor::new(vec![anchors.len(), w], priors)?);
    distribution_distance(tape, p, d, kind).map(Some)
}

/// Boundary-aware loss of one stage: `(1/T)·Σ distance(P_t, D_t)` over the
/// boundary frames of the first encoder layer and the last decoder layer.
pub fn ba_loss(
    tape: &mut Tape,
    enc_first: &AttentionRecord,
    dec_last: &AttentionRecord,
    boundaries: &BoundarySet,
    len: usize,
    kind: BaDistance,
) -> Result<Var> {
    if len == 0 {
        return Err(Error::EmptyInput(
            "boundary-aware loss of an empty video".into(),
        ));
    }
    let mut total = None;
    for rec in [enc_first, dec_last] {
        let b = boundaries_at(rec, boundaries, len)?;
        if let Some(v) = boundary_distance(tape, rec, &b, kind)? {
            total = Some(match total {
                None => v,
                Some(t) => tape.add(t, v)?,
            });
        }
    }
    Ok(match total {
        None => tape.constant(Tensor::scalar(0.0)),
        Some(t) => tape.scale(t, 1.0 / len as f64),
    })
}

/// Per-term values of a multi-stage loss, each summed over stages.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossBreakdown {
    pub ce: f64,
    pub tmse: f64,
    pub ba: f64,
    pub total: f64,
}

/// `Σ_s CE + λ·TMSE + β·BA`. The boundary term is skipped when `β = 0`.
pub fn total_loss(
    tape: &mut Tape,
    stages: &[StageOutput],
    labels: &[usize],
    weights: &LossWeights,
) -> Result<(Var, LossBreakdown)> {
    let boundaries = derive_boundaries(labels);
    let mut parts = LossBreakdown::default();
    let mut total: Option<Var> = None;
    for s in stages {
        let ce = ce_loss(tape, s.logits, labels)?;
        let tm = tmse_loss(tape, s.logits, weights.theta)?;
        parts.ce += tape.value(ce).item();
        parts.tmse += tape.value(tm).item();
        let tm = tape.scale(tm, weights.lambda);
        let mut l = tape.add(ce, tm)?;
        if weights.beta > 0.0 {
            let ba = ba_loss(
                tape,
                &s.enc_first,
                &s.dec_last,
                &boundaries,
                labels.len(),
                weights.ba_distance,
            )?;
            parts.ba += tape.value(ba).item();
            let ba = tape.scale(ba, weights.beta);
            l = tape.add(l, ba)?;
        }
        total = Some(match total {
            None => l,
            Some(t) => tape.add(t, l)?,
        });
    }
    let total = total.ok_or_else(|| Error::EmptyInput("no stages to score".into()))?;
    parts.total = tape.value(total).item();
    Ok((total, parts))
}

/// Mean `KL(P‖D)` over the boundary LADs of `record`; `None` without anchors.
pub fn mean_boundary_kl(record: &AttentionRecord, boundaries: &BoundarySet) -> Result<Option<f64>> {
    let anchors = ba_anchors(record, boundaries);
    if anchors.is_empty() {
        return Ok(None);
    }
    let mut sum = 0.0;
    for &(row, kind) in &anchors {
        let p = prior(kind, record.window)?;
        let d = extract_lad(record, row).expect("anchor has a full window");
        sum += p
            .iter()
            .zip(&d)
            .filter(|(p, _)| **p > 0.0)
            .map(|(p, d)| p * (p / d).ln())
            .sum::<f64>();
    }
    Ok(Some(sum / anchors.len() as f64))
}
