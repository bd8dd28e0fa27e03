//! Frame accuracy, segmental edit score and segmental F1@τ.
//!
//! All scores are percentages in `[0, 100]`.

use std::fmt::Write as _;

use crate::error::{Error, Result};

/// Overlap thresholds reported by default.
pub const DEFAULT_THRESHOLDS: [f64; 3] = [0.10, 0.25, 0.50];

/// A maximal run of one class, with inclusive frame bounds.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Segment {
    pub class: usize,
    pub start: usize,
    pub end: usize,
}

impl Segment {
    pub fn len(&self) -> usize {
        self.end - self.start + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Intersection over union of the two frame ranges.
    pub fn iou(&self, other: &Segment) -> f64 {
        let lo = self.start.max(other.start);
        let hi = self.end.min(other.end);
        if hi < lo {
            return 0.0;
        }
        let inter = hi - lo + 1;
        inter as f64 / (self.len() + other.len() - inter) as f64
    }
}

/// Run-length encodes a label sequence.
pub fn extract_segments(labels: &[usize]) -> Vec<Segment> {
    let mut out: Vec<Segment> = Vec::new();
    for (t, &c) in labels.iter().enumerate() {
        match out.last_mut() {
            Some(s) if s.class == c => s.end = t,
            _ => out.push(Segment {
                class: c,
                start: t,
                end: t,
            }),
        }
    }
    out
}

/// Inverse of [`extract_segments`].
pub fn reconstruct(segments: &[Segment]) -> Vec<usize> {
    segments
        .iter()
        .flat_map(|s| std::iter::repeat_n(s.class, s.len()))
        .collect()
}

fn check_lengths(pred: &[usize], gt: &[usize]) -> Result<()> {
    if pred.len() != gt.len() {
        return Err(Error::dim(format!(
            "prediction has {} frames, ground truth {}",
            pred.len(),
            gt.len()
        )));
    }
    Ok(())
}

pub fn frame_accuracy(pred: &[usize], gt: &[usize]) -> Result<f64> {
    check_lengths(pred, gt)?;
    if gt.is_empty() {
        return Ok(100.0);
    }
    let hits = pred.iter().zip(gt).filter(|(a, b)| a == b).count();
    Ok(100.0 * hits as f64 / gt.len() as f64)
}

/// Unit-cost Levenshtein distance.
pub fn levenshtein<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0; b.len() + 1];
    for (i, x) in a.iter().enumerate() {
        cur[0] = i + 1;
        for (j, y) in b.iter().enumerate() {
            let sub = prev[j] + usize::from(x != y);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

fn kept_segments(labels: &[usize], ignored: &[usize]) -> Vec<Segment> {
    extract_segments(labels)
        .into_iter()
        .filter(|s| !ignored.contains(&s.class))
        .collect()
}

/// `100·(1 − Lev/max(|S_pred|, |S_gt|))` over segment class sequences.
pub fn edit_score(pred: &[usize], gt: &[usize], ignored: &[usize]) -> f64 {
    let p: Vec<usize> = kept_segments(pred, ignored)
        .iter()
        .map(|s| s.class)
        .collect();
    let g: Vec<usize> = kept_segments(gt, ignored).iter().map(|s| s.class).collect();
    let denom = p.len().max(g.len());
    if denom == 0 {
        return 100.0;
    }
    100.0 * (1.0 - levenshtein(&p, &g) as f64 / denom as f64)
}

/// True positives, false positives and false negatives of segment matching.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct F1Counts {
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
}

impl F1Counts {
    pub fn f1(&self) -> f64 {
        let p = if self.tp + self.fp == 0 {
            0.0
        } else {
            self.tp as f64 / (self.tp + self.fp) as f64
        };
        let r = if self.tp + self.fn_ == 0 {
            0.0
        } else {
            self.tp as f64 / (self.tp + self.fn_) as f64
        };
        if p + r == 0.0 {
            0.0
        } else {
            100.0 * 2.0 * p * r / (p + r)
        }
    }
}

impl std::ops::AddAssign for F1Counts {
    fn add_assign(&mut self, o: Self) {
        self.tp += o.tp;
        self.fp += o.fp;
        self.fn_ += o.fn_;
    }
}

/// Greedy matching in temporal order of predicted segments. Each prediction
/// takes the unmatched same-class ground-truth segment of highest IoU and is a
/// hit when that IoU reaches `threshold`.
pub fn f1_counts(pred: &[usize], gt: &[usize], threshold: f64, ignored: &[usize]) -> F1Counts {
    let p = kept_segments(pred, ignored);
    let g = kept_segments(gt, ignored);
    let mut used = vec![false; g.len()];
    let mut c = F1Counts::default();
    for s in &p {
        let best = g
            .iter()
            .enumerate()
            .filter(|(j, q)| !used[*j] && q.class == s.class)
            .map(|(j, q)| (j, s.iou(q)))
            .fold(None, |acc: Option<(usize, f64)>, x| match acc {
                Some(a) if a.1 >= x.1 => Some(a),
                _ => Some(x),
            });
        match best {
            Some((j, iou)) if iou >= threshold => {
                used[j] = true;
                c.tp += 1;
            }
            _ => c.fp += 1,
        }
    }
    c.fn_ = used.iter().filter(|u| !**u).count();
    c
}

pub fn f1_overlap(pred: &[usize], gt: &[usize], threshold: f64, ignored: &[usize]) -> f64 {
    f1_counts(pred, gt, threshold, ignored).f1()
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalOptions {
    pub thresholds: Vec<f64>,
    pub ignored: Vec<usize>,
    /// Pool TP/FP/FN over videos before computing F1; otherwise average per-video F1.
    pub pool_f1: bool,
}

impl Default for EvalOptions {
    fn default() -> Self {
        EvalOptions {
            thresholds: DEFAULT_THRESHOLDS.to_vec(),
            ignored: Vec::new(),
            pool_f1: true,
        }
    }
}

/// Scores of one video.
#[derive(Clone, Debug, PartialEq)]
pub struct VideoScores {
    pub frames: usize,
    pub correct: usize,
    pub edit: f64,
    pub counts: Vec<F1Counts>,
}

impl VideoScores {
    pub fn compute(pred: &[usize], gt: &[usize], opts: &EvalOptions) -> Result<Self> {
        check_lengths(pred, gt)?;
        Ok(VideoScores {
            frames: gt.len(),
            correct: pred.iter().zip(gt).filter(|(a, b)| a == b).count(),
            edit: edit_score(pred, gt, &opts.ignored),
            counts: opts
                .thresholds
                .iter()
                .map(|&t| f1_counts(pred, gt, t, &opts.ignored))
                .collect(),
        })
    }

    pub fn acc(&self) -> f64 {
        if self.frames == 0 {
            100.0
        } else {
            100.0 * self.correct as f64 / self.frames as f64
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub acc: f64,
    pub edit: f64,
    /// `(threshold, F1)` pairs.
    pub f1: Vec<(f64, f64)>,
    pub per_video: Vec<VideoScores>,
}

impl EvalReport {
    pub fn f1_at(&self, threshold: f64) -> Option<f64> {
        self.f1
            .iter()
            .find(|(t, _)| (t - threshold).abs() < 1e-12)
            .map(|&(_, v)| v)
    }

    /// `metric,threshold,value` rows.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("metric,threshold,value\n");
        for (t, v) in &self.f1 {
            let _ = writeln!(s, "f1,{t:.2},{v:.4}");
        }
        let _ = writeln!(s, "edit,,{:.4}", self.edit);
        let _ = writeln!(s, "acc,,{:.4}", self.acc);
        s
    }

    /// Human-readable one-line-per-metric table.
    pub fn table(&self) -> String {
        let mut s = String::new();
        for (t, v) in &self.f1 {
            let _ = writeln!(s, "F1@{:<4} {v:6.2}", format!("{:.0}", t * 100.0));
        }
        let _ = writeln!(s, "Edit    {:6.2}", self.edit);
        let _ = writeln!(s, "Acc     {:6.2}", self.acc);
        s
    }
}

pub fn evaluate(pred: &[usize], gt: &[usize], opts: &EvalOptions) -> Result<EvalReport> {
    evaluate_corpus(&[(pred, gt)], opts)
}

/// Frame-pooled accuracy, per-video averaged edit, pooled (or averaged) F1.
pub fn evaluate_corpus(videos: &[(&[usize], &[usize])], opts: &EvalOptions) -> Result<EvalReport> {
    if videos.is_empty() {
        return Err(Error::EmptyInput("no videos to evaluate".into()));
    }
    let per_video = videos
        .iter()
        .map(|(p, g)| VideoScores::compute(p, g, opts))
        .collect::<Result<Vec<_>>>()?;
    let frames: usize = per_video.iter().map(|v| v.frames).sum();
    let correct: usize = per_video.iter().map(|v| v.correct).sum();
    let acc = if frames == 0 {
        100.0
    } else {
        100.0 * correct as f64 / frames as f64
    };
    let n = per_video.len() as f64;
    let edit = per_video.iter().map(|v| v.edit).sum::<f64>() / n;
    let f1 = opts
        .thresholds
        .iter()
        .enumerate()
        .map(|(k, &t)| {
            let v = if opts.pool_f1 {
                let mut c = F1Counts::default();
                per_video.iter().for_each(|v| c += v.counts[k]);
                c.f1()
            } else {
                per_video.iter().map(|v| v.counts[k].f1()).sum::<f64>() / n
            };
            (t, v)
        })
        .collect();
    Ok(EvalReport {
        acc,
        edit,
        f1,
        per_video,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn segments_round_trip() {
        assert_eq!(
            extract_segments(&[0, 0, 1]),
            vec![
                Segment {
                    class: 0,
                    start: 0,
                    end: 1
                },
                Segment {
                    class: 1,
                    start: 2,
                    end: 2
                }
            ]
        );
        assert_eq!(extract_segments(&[0]).len(), 1);
        assert!(extract_segments(&[]).is_empty());
        let x = [2, 2, 0, 1, 1, 1, 2];
        assert_eq!(reconstruct(&extract_segments(&x)), x);
    }

    #[test]
    fn levenshtein_examples() {
        assert_eq!(levenshtein(&[0, 1, 2], &[0, 2]), 1);
        assert_eq!(levenshtein::<u8>(&[], &[1, 2]), 2);
        assert_eq!(levenshtein(b"kitten", b"sitting"), 3);
    }

    #[test]
    fn csv_has_every_metric() {
        let r = evaluate(&[0, 0, 1], &[0, 1, 1], &EvalOptions::default()).unwrap();
        let csv = r.to_csv();
        for key in ["f1,0.10,", "f1,0.25,", "f1,0.50,", "edit,,", "acc,,"] {
            assert!(csv.contains(key), "{csv}");
        }
        assert!(r.table().contains("F1@10"));
    }
}
