//! Multi-head attention over full, windowed-local and log-sparse patterns.
//!
//! Every pattern is expressed as a [`SparsePattern`] listing the keys each
//! query scores. The local and log-sparse routes run on the sparse kernels of
//! the tape, so a local layer never materialises a `T×T` matrix. The full
//! route is built from dense matrix products instead and doubles as an
//! independent reference for the sparse kernels.

use std::rc::Rc;

use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::{SparsePattern, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum AttentionPattern {
    Full,
    Local,
    LogSparse,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum PeMode {
    None,
    AbsSinusoidal,
    AbsLearnable,
    Relative,
}

/// Which layers resolve to the same relative-position table.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum RpeShare {
    /// One table per layer.
    NoShare,
    /// One table per stage.
    StageShared,
    /// One table per temporal scale, shared by all stages.
    ScaleShared,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Coder {
    Encoder,
    Decoder,
}

macro_rules! str_enum {
    ($ty:ident { $($variant:ident => $name:literal),+ $(,)? }) => {
        impl $ty {
            pub const ALL: &'static [$ty] = &[$($ty::$variant),+];

            pub fn as_str(self) -> &'static str {
                match self { $($ty::$variant => $name),+ }
            }
        }

        impl std::fmt::Display for $ty {
            fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
                f.write_str(self.as_str())
            }
        }

        impl std::str::FromStr for $ty {
            type Err = $crate::error::Error;

            fn from_str(s: &str) -> $crate::error::Result<Self> {
                match s.to_ascii_lowercase().as_str() {
                    $($name => Ok($ty::$variant),)+
                    other => Err($crate::error::Error::Config(format!(
                        "unknown {} '{other}'", stringify!($ty)
                    ))),
                }
            }
        }
    };
}
pub(crate) use str_enum;

str_enum!(AttentionPattern { Full => "full", Local => "local", LogSparse => "logsparse" });
str_enum!(PeMode {
    None => "none",
    AbsSinusoidal => "sinusoidal",
    AbsLearnable => "learnable",
    Relative => "relative",
});
str_enum!(RpeShare { NoShare => "none", StageShared => "stage", ScaleShared => "scale" });

#[derive(Clone, Debug, PartialEq)]
pub struct AttentionConfig {
    pub pattern: AttentionPattern,
    /// Window size in frames; odd.
    pub window: usize,
    pub heads: usize,
    /// Dropout on post-softmax rows, training mode only.
    pub dropout: f64,
    pub pe_mode: PeMode,
    pub rpe_share: RpeShare,
}

impl Default for AttentionConfig {
    fn default() -> Self {
        AttentionConfig {
            pattern: AttentionPattern::Local,
            window: 51,
            heads: 4,
            dropout: 0.0,
            pe_mode: PeMode::Relative,
            rpe_share: RpeShare::ScaleShared,
        }
    }
}

impl AttentionConfig {
    pub fn radius(&self) -> usize {
        self.window / 2
    }

    pub fn validate(&self, model_dim: usize) -> Result<()> {
        if self.window == 0 || self.window.is_multiple_of(2) {
            return Err(Error::config(format!(
                "window size {} must be odd and positive",
                self.window
            )));
        }
        if self.heads == 0 || !model_dim.is_multiple_of(self.heads) {
            return Err(Error::config(format!(
                "{} heads do not divide model dimension {model_dim}",
                self.heads
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::config(format!(
                "attention dropout {} not in [0, 1)",
                self.dropout
            )));
        }
        Ok(())
    }
}

/// Clamped window `[max(i-r, 0), min(i+r, T-1)]` for every query.
pub fn local_pattern(len: usize, window: usize) -> SparsePattern {
    let r = window / 2;
    let rows = (0..len)
        .map(|i| (i.saturating_sub(r)..=(i + r).min(len.saturating_sub(1))).collect())
        .collect();
    SparsePattern::from_rows(len, rows)
}

/// Key `i` plus keys at offsets `±1, ±2, ±4, …` clipped to `[0, T)`.
pub fn logsparse_pattern(len: usize) -> SparsePattern {
    let rows = (0..len)
        .map(|i| {
            let mut keys = vec![i];
            let mut off = 1;
            while off < len {
                if i >= off {
                    keys.push(i - off);
                }
                if i + off < len {
                    keys.push(i + off);
                }
                off *= 2;
            }
            keys
        })
        .collect();
    SparsePattern::from_rows(len, rows)
}

pub fn build_pattern(kind: AttentionPattern, len: usize, window: usize) -> SparsePattern {
    match kind {
        AttentionPattern::Full => SparsePattern::dense(len, len),
        AttentionPattern::Local => local_pattern(len, window),
        AttentionPattern::LogSparse => logsparse_pattern(len),
    }
}

/// Post-softmax attention rows retained from one layer.
///
/// `probs` is `heads × nnz` in the layout of `pattern`; values are taken
/// before attention dropout.
#[derive(Clone, Debug)]
pub struct AttentionRecord {
    pub pattern: Rc<SparsePattern>,
    pub heads: usize,
    pub window: usize,
    pub probs: Var,
    values: Tensor,
}

impl AttentionRecord {
    /// Wraps a `heads × nnz` tensor already on `tape`.
    pub fn new(
        tape: &Tape,
        pattern: Rc<SparsePattern>,
        heads: usize,
        window: usize,
        probs: Var,
    ) -> Result<Self> {
        let values = tape.value(probs).clone();
        if values.shape() != [heads, pattern.nnz()] {
            return Err(Error::dim(format!(
                "attention record needs {heads}×{} values, got {:?}",
                pattern.nnz(),
                values.shape()
            )));
        }
        Ok(AttentionRecord {
            pattern,
            heads,
            window,
            probs,
            values,
        })
    }

    pub fn len(&self) -> usize {
        self.pattern.n_rows()
    }

    pub fn is_empty(&self) -> bool {
        self.pattern.n_rows() == 0
    }

    /// Number of retained score entries over all heads.
    pub fn entry_count(&self) -> usize {
        self.heads * self.pattern.nnz()
    }

    pub fn valid_slots(&self, row: usize) -> usize {
        self.pattern.row_range(row).len()
    }

    pub fn row(&self, head: usize, row: usize) -> &[f64] {
        let nnz = self.pattern.nnz();
        let r = self.pattern.row_range(row);
        &self.values.data()[head * nnz + r.start..head * nnz + r.end]
    }

    pub fn values(&self) -> &Tensor {
        &self.values
    }
}

/// Relative-position bias `table[(j - i) + r, h]` for every pattern entry,
/// as a `heads × nnz` tensor. Offsets beyond the window clip to `±r`.
pub fn relative_bias(
    tape: &mut Tape,
    table: Var,
    pattern: &SparsePattern,
    heads: usize,
    window: usize,
) -> Result<Var> {
    let shape = tape.value(table).shape().to_vec();
    if shape != [window, heads] {
        return Err(Error::dim(format!(
            "relative-position table is {shape:?}, expected [{window}, {heads}]"
        )));
    }
    let r = (window / 2) as isize;
    let nnz = pattern.nnz();
    let mut idx = vec![0; heads * nnz];
    for i in 0..pattern.n_rows() {
        for e in pattern.row_range(i) {
            let off = (pattern.keys()[e] as isize - i as isize).clamp(-r, r);
            let slot = (off + r) as usize;
            for h in 0..heads {
                idx[h * nnz + e] = slot * heads + h;
            }
        }
    }
    let flat = tape.gather_elems(table, idx)?;
    tape.reshape(flat, vec![heads, nnz])
}

/// Sinusoidal absolute encoding of shape `len × dim`.
pub fn sinusoidal_encoding(len: usize, dim: usize) -> Tensor {
    let mut data = vec![0.0; len * dim];
    for t in 0..len {
        for c in 0..dim {
            let freq = 1.0 / 10000f64.powf((2 * (c / 2)) as f64 / dim as f64);
            let a = t as f64 * freq;
            data[t * dim + c] = if c % 2 == 0 { a.sin() } else { a.cos() };
        }
    }
    Tensor::new(vec![len, dim], data).expect("shape")
}

fn check_qkv(tape: &Tape, q: Var, k: Var, v: Var, heads: usize) -> Result<(usize, usize, usize)> {
    let (sq, sk, sv) = (
        tape.value(q).shape(),
        tape.value(k).shape(),
        tape.value(v).shape(),
    );
    if sq.len() != 2 || sk.len() != 2 || sv.len() != 2 {
        return Err(Error::dim("attention inputs must be matrices"));
    }
    if sk[0] != sv[0] {
        return Err(Error::dim(format!(
            "key length {} differs from value length {}",
            sk[0], sv[0]
        )));
    }
    if sq[1] != sk[1] || sq[1] != sv[1] || sq[1] % heads != 0 {
        return Err(Error::dim(format!(
            "q/k/v widths {}/{}/{} incompatible with {heads} heads",
            sq[1], sk[1], sv[1]
        )));
    }
    Ok((sq[0], sk[0], sq[1]))
}

fn attend_sparse(
    tape: &mut Tape,
    q: Var,
    k: Var,
    v: Var,
    pattern: SparsePattern,
    cfg: &AttentionConfig,
    rpe: Option<Var>,
    rng: Option<&mut ChaCha8Rng>,
) -> Result<(Var, AttentionRecord)> {
    let (_, _, d) = check_qkv(tape, q, k, v, cfg.heads)?;
    let pattern = Rc::new(pattern);
    let scale = 1.0 / ((d / cfg.heads) as f64).sqrt();
    let mut scores = tape.pattern_scores(q, k, pattern.clone(), cfg.heads, scale)?;
    if let Some(table) = rpe {
        let bias = relative_bias(tape, table, &pattern, cfg.heads, cfg.window)?;
        scores = tape.add(scores, bias)?;
    }
    let probs = tape.segment_softmax(scores, pattern.clone())?;
    let mixed = match rng {
        Some(rng) if cfg.dropout > 0.0 => tape.dropout(probs, cfg.dropout, rng)?,
        _ => probs,
    };
    let out = tape.pattern_mix(mixed, v, pattern.clone(), cfg.heads)?;
    let record = AttentionRecord {
        pattern,
        heads: cfg.heads,
        window: cfg.window,
        probs,
        values: tape.value(probs).clone(),
    };
    Ok((out, record))
}

/// Windowed attention: query `i` scores keys `max(i-r,0) ..= min(i+r,T-1)`.
///
/// With `rng` set, attention dropout is applied after the record is taken.
pub fn local_attention(
    tape: &mut Tape,
    q: Var,
    k: Var,
    v: Var,
    cfg: &AttentionConfig,
    rpe: Option<Var>,
    rng: Option<&mut ChaCha8Rng>,
) -> Result<(Var, AttentionRecord)> {
    let (tq, tk, _) = check_qkv(tape, q, k, v, cfg.heads)?;
    if tq != tk {
        return Err(Error::dim(format!(
            "local attention needs equal query/key lengths, got {tq}/{tk}"
        )));
    }
    attend_sparse(tape, q, k, v, local_pattern(tq, cfg.window), cfg, rpe, rng)
}

pub fn logsparse_attention(
    tape: &mut Tape,
    q: Var,
    k: Var,
    v: Var,
    cfg: &AttentionConfig,
    rpe: Option<Var>,
    rng: Option<&mut ChaCha8Rng>,
) -> Result<(Var, AttentionRecord)> {
    let (tq, tk, _) = check_qkv(tape, q, k, v, cfg.heads)?;
    if tq != tk {
        return Err(Error::dim(format!(
            "log-sparse attention needs equal query/key lengths, got {tq}/{tk}"
        )));
    }
    attend_sparse(tape, q, k, v, logsparse_pattern(tq), cfg, rpe, rng)
}

/// Dense `softmax(QKᵀ/√d_K)V` per head, built from matrix products.
pub fn full_attention(
    tape: &mut Tape,
    q: Var,
    k: Var,
    v: Var,
    cfg: &AttentionConfig,
    rpe: Option<Var>,
    mut rng: Option<&mut ChaCha8Rng>,
) -> Result<(Var, AttentionRecord)> {
    let (tq, tk, d) = check_qkv(tape, q, k, v, cfg.heads)?;
    let dk = d / cfg.heads;
    let pattern = Rc::new(SparsePattern::dense(tq, tk));
    let bias = match rpe {
        Some(table) => Some(relative_bias(tape, table, &pattern, cfg.heads, cfg.window)?),
        None => None,
    };
    let mut probs = Vec::with_capacity(cfg.heads);
    let mut outs = Vec::with_capacity(cfg.heads);
    for h in 0..cfg.heads {
        let qh = tape.slice_cols(q, h * dk, dk)?;
        let kh = tape.slice_cols(k, h * dk, dk)?;
        let vh = tape.slice_cols(v, h * dk, dk)?;
        let kt = tape.transpose(kh)?;
        let s = tape.matmul(qh, kt)?;
        let mut s = tape.scale(s, 1.0 / (dk as f64).sqrt());
        if let Some(b) = bias {
            let idx = (h * tq * tk..(h + 1) * tq * tk).collect();
            let bh = tape.gather_elems(b, idx)?;
            let bh = tape.reshape(bh, vec![tq, tk])?;
            s = tape.add(s, bh)?;
        }
        let p = tape.softmax_lastdim(s)?;
        probs.push(p);
        let pd = match rng.as_deref_mut() {
            Some(rng) if cfg.dropout > 0.0 => tape.dropout(p, cfg.dropout, rng)?,
            _ => p,
        };
        outs.push(tape.matmul(pd, vh)?);
    }
    let out = tape.concat_cols(&outs)?;
    let flat = tape.concat_flat(&probs);
    let probs = tape.reshape(flat, vec![cfg.heads, tq * tk])?;
    let record = AttentionRecord {
        pattern,
        heads: cfg.heads,
        window: cfg.window,
        probs,
        values: tape.value(probs).clone(),
    };
    Ok((out, record))
}

/// Dispatches on `cfg.pattern`.
pub fn attend(
    tape: &mut Tape,
    q: Var,
    k: Var,
    v: Var,
    cfg: &AttentionConfig,
    rpe: Option<Var>,
    rng: Option<&mut ChaCha8Rng>,
) -> Result<(Var, AttentionRecord)> {
    match cfg.pattern {
        AttentionPattern::Full => full_attention(tape, q, k, v, cfg, rpe, rng),
        AttentionPattern::Local => local_attention(tape, q, k, v, cfg, rpe, rng),
        AttentionPattern::LogSparse => logsparse_attention(tape, q, k, v, cfg, rpe, rng),
    }
}

/// Parameter name of the relative-position table used by one layer.
///
/// `scale` is the temporal-scale exponent the layer runs at (length `T/2^scale`).
/// With `split_coder`, scale sharing keeps encoder and decoder tables apart.
pub fn rpe_table_name(
    share: RpeShare,
    split_coder: bool,
    stage: usize,
    coder: Coder,
    layer: usize,
    scale: usize,
) -> String {
    let tag = match coder {
        Coder::Encoder => "enc",
        Coder::Decoder => "dec",
    };
    match share {
        RpeShare::NoShare => format!("stage{stage}.{tag}{layer}.rpe.w"),
        RpeShare::StageShared => format!("stage{stage}.rpe.w"),
        RpeShare::ScaleShared if split_coder => format!("rpe.{tag}.scale{scale}.w"),
        RpeShare::ScaleShared => format!("rpe.scale{scale}.w"),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn local_window_clamps_at_edges() {
        let p = local_pattern(4, 3);
        assert_eq!(p.row_keys(0), &[0, 1]);
        assert_eq!(p.row_keys(2), &[1, 2, 3]);
        assert_eq!(p.row_keys(3), &[2, 3]);
        let single = local_pattern(1, 51);
        assert_eq!(single.row_keys(0), &[0]);
    }

    #[test]
    fn logsparse_example_row() {
        let p = logsparse_pattern(9);
        assert_eq!(p.row_keys(4), &[0, 2, 3, 4, 5, 6, 8]);
        assert_eq!(logsparse_pattern(1).row_keys(0), &[0]);
    }

    #[test]
    fn config_validation() {
        let mut c = AttentionConfig {
            window: 4,
            ..Default::default()
        };
        assert!(c.validate(8).is_err());
        c.window = 5;
        c.heads = 3;
        assert!(c.validate(8).is_err());
        c.heads = 2;
        assert!(c.validate(8).is_ok());
    }

    #[test]
    fn table_names_follow_sharing_strategy() {
        use Coder::*;
        let a = rpe_table_name(RpeShare::ScaleShared, false, 0, Encoder, 2, 2);
        let b = rpe_table_name(RpeShare::ScaleShared, false, 3, Encoder, 2, 2);
        let c = rpe_table_name(RpeShare::ScaleShared, false, 1, Decoder, 3, 2);
        assert_eq!(a, b);
        assert_eq!(a, c);
        let split = rpe_table_name(RpeShare::ScaleShared, true, 1, Decoder, 3, 2);
        assert_ne!(a, split);

        let (stages, layers) = (3, 4);
        let mut names = std::collections::BTreeSet::new();
        for s in 0..stages {
            for l in 1..=layers {
                for coder in [Encoder, Decoder] {
                    names.insert(rpe_table_name(RpeShare::NoShare, false, s, coder, l, l));
                }
            }
        }
        assert_eq!(names.len(), stages * layers * 2);
    }

    #[test]
    fn parse_round_trip() {
        for p in AttentionPattern::ALL {
            assert_eq!(p.as_str().parse::<AttentionPattern>().unwrap(), *p);
        }
        assert!("diagonal".parse::<AttentionPattern>().is_err());
    }
}
