use crate::attention::{str_enum, AttentionConfig, AttentionPattern, Coder, PeMode, RpeShare};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Architecture {
    /// Encoder halves and decoder doubles the temporal length per layer.
    UTrans,
    /// No resampling; every layer runs at the input length.
    Standard,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum RefineInput {
    Probs,
    Logits,
}

str_enum!(Architecture { UTrans => "utrans", Standard => "standard" });
str_enum!(RefineInput { Probs => "probs", Logits => "logits" });

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub input_dim: usize,
    pub num_classes: usize,
    /// Refinement stages after the generation stage.
    pub refinement_stages: usize,
    /// Layers per encoder (and per decoder).
    pub layers: usize,
    pub hidden_dim: usize,
    pub ffn_dim: usize,
    pub refine_hidden_dim: usize,
    pub refine_ffn_dim: usize,
    pub input_dropout: f64,
    pub ffn_dropout: f64,
    pub attention: AttentionConfig,
    /// Keep encoder and decoder tables apart under scale sharing.
    pub rpe_split_coder: bool,
    pub architecture: Architecture,
    pub refine_input: RefineInput,
    /// Longest sequence a learnable absolute encoding can cover.
    pub max_len: usize,
}

impl ModelConfig {
    fn preset(input_dim: usize, num_classes: usize) -> Self {
        ModelConfig {
            input_dim,
            num_classes,
            refinement_stages: 3,
            layers: 5,
            hidden_dim: 128,
            ffn_dim: 128,
            refine_hidden_dim: 64,
            refine_ffn_dim: 64,
            input_dropout: 0.4,
            ffn_dropout: 0.3,
            attention: AttentionConfig {
                pattern: AttentionPattern::Local,
                window: 51,
                heads: 4,
                dropout: 0.2,
                pe_mode: PeMode::Relative,
                rpe_share: RpeShare::ScaleShared,
            },
            rpe_split_coder: false,
            architecture: Architecture::UTrans,
            refine_input: RefineInput::Probs,
            max_len: 10_000,
        }
    }

    /// Hyper-parameters used for 50Salads.
    pub fn salads50(input_dim: usize, num_classes: usize) -> Self {
        Self::preset(input_dim, num_classes)
    }

    /// Hyper-parameters used for GTEA.
    pub fn gtea(input_dim: usize, num_classes: usize) -> Self {
        let mut c = Self::preset(input_dim, num_classes);
        c.layers = 4;
        c.attention.window = 11;
        c.hidden_dim = 64;
        c.ffn_dim = 64;
        c.input_dropout = 0.5;
        c
    }

    /// Hyper-parameters used for Breakfast.
    pub fn breakfast(input_dim: usize, num_classes: usize) -> Self {
        let mut c = Self::preset(input_dim, num_classes);
        c.attention.window = 25;
        c.attention.heads = 6;
        c.hidden_dim = 192;
        c.ffn_dim = 192;
        c.refine_hidden_dim = 96;
        c.refine_ffn_dim = 96;
        c
    }

    pub fn num_stages(&self) -> usize {
        self.refinement_stages + 1
    }

    pub fn stage_hidden(&self, stage: usize) -> usize {
        if stage == 0 {
            self.hidden_dim
        } else {
            self.refine_hidden_dim
        }
    }

    pub fn stage_ffn(&self, stage: usize) -> usize {
        if stage == 0 {
            self.ffn_dim
        } else {
            self.refine_ffn_dim
        }
    }

    pub fn stage_input_dim(&self, stage: usize) -> usize {
        if stage == 0 {
            self.input_dim
        } else {
            self.num_classes
        }
    }

    /// Temporal-scale exponent a layer runs at: its sequence length is `T/2^scale`.
    pub fn layer_scale(&self, coder: Coder, layer: usize) -> usize {
        match (self.architecture, coder) {
            (Architecture::Standard, _) => 0,
            (Architecture::UTrans, Coder::Encoder) => layer,
            (Architecture::UTrans, Coder::Decoder) => self.layers - layer,
        }
    }

    /// Encoder output consumed as keys/values by decoder layer `layer`
    /// (0 is the projected stage input).
    pub fn decoder_peer(&self, layer: usize) -> usize {
        self.layers - layer
    }

    /// Shortest sequence the model accepts.
    pub fn min_length(&self) -> usize {
        match self.architecture {
            Architecture::UTrans => 1usize << self.layers.min(63),
            Architecture::Standard => 1,
        }
    }

    pub fn check_length(&self, len: usize) -> Result<()> {
        if len < self.min_length() {
            return Err(Error::config(format!(
                "too many layers for sequence length: {} layers need at least {} frames, got {len}",
                self.layers,
                self.min_length()
            )));
        }
        if self.attention.pe_mode == PeMode::AbsLearnable && len > self.max_len {
            return Err(Error::config(format!(
                "sequence of {len} frames exceeds the learnable encoding length {}",
                self.max_len
            )));
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("input_dim", self.input_dim),
            ("num_classes", self.num_classes),
            ("layers", self.layers),
            ("hidden", self.hidden_dim),
            ("ffn", self.ffn_dim),
            ("refine_hidden", self.refine_hidden_dim),
            ("refine_ffn", self.refine_ffn_dim),
            ("max_len", self.max_len),
        ];
        if let Some((name, _)) = dims.iter().find(|(_, v)| *v == 0) {
            return Err(Error::config(format!("{name} must be positive")));
        }
        self.attention.validate(self.hidden_dim)?;
        if self.refinement_stages > 0 {
            self.attention.validate(self.refine_hidden_dim)?;
        }
        for (name, p) in [
            ("input_dropout", self.input_dropout),
            ("ffn_dropout", self.ffn_dropout),
        ] {
            if !(0.0..1.0).contains(&p) {
                return Err(Error::config(format!("{name} {p} not in [0, 1)")));
            }
        }
        Ok(())
    }

    /// All settings as `(key, value)` pairs, in a fixed order.
    pub fn to_pairs(&self) -> Vec<(&'static str, String)> {
        let a = &self.attention;
        vec![
            ("input_dim", self.input_dim.to_string()),
            ("num_classes", self.num_classes.to_string()),
            ("stages", self.refinement_stages.to_string()),
            ("layers", self.layers.to_string()),
            ("window", a.window.to_string()),
            ("heads", a.heads.to_string()),
            ("hidden", self.hidden_dim.to_string()),
            ("ffn", self.ffn_dim.to_string()),
            ("refine_hidden", self.refine_hidden_dim.to_string()),
            ("refine_ffn", self.refine_ffn_dim.to_string()),
            ("input_dropout", self.input_dropout.to_string()),
            ("ffn_dropout", self.ffn_dropout.to_string()),
            ("attn_dropout", a.dropout.to_string()),
            ("architecture", self.architecture.to_string()),
            ("attention", a.pattern.to_string()),
            ("pe", a.pe_mode.to_string()),
            ("rpe_share", a.rpe_share.to_string()),
            ("rpe_split_coder", self.rpe_split_coder.to_string()),
            ("refine_input", self.refine_input.to_string()),
            ("max_len", self.max_len.to_string()),
        ]
    }

    pub const KEYS: &'static [&'static str] = &[
        "input_dim",
        "num_classes",
        "stages",
        "layers",
        "window",
        "heads",
        "hidden",
        "ffn",
        "refine_hidden",
        "refine_ffn",
        "input_dropout",
        "ffn_dropout",
        "attn_dropout",
        "architecture",
        "attention",
        "pe",
        "rpe_share",
        "rpe_split_coder",
        "refine_input",
        "max_len",
    ];

    /// Sets one key. Returns `Ok(false)` for keys this config does not own.
    pub fn set(&mut self, key: &str, value: &str) -> Result<bool> {
        fn num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
            v.trim()
                .parse()
                .map_err(|_| Error::config(format!("invalid value '{v}' for {key}")))
        }
        let a = &mut self.attention;
        match key {
            "input_dim" => self.input_dim = num(key, value)?,
            "num_classes" => self.num_classes = num(key, value)?,
            "stages" => self.refinement_stages = num(key, value)?,
            "layers" => self.layers = num(key, value)?,
            "window" => a.window = num(key, value)?,
            "heads" => a.heads = num(key, value)?,
            "hidden" => self.hidden_dim = num(key, value)?,
            "ffn" => self.ffn_dim = num(key, value)?,
            "refine_hidden" => self.refine_hidden_dim = num(key, value)?,
            "refine_ffn" => self.refine_ffn_dim = num(key, value)?,
            "input_dropout" => self.input_dropout = num(key, value)?,
            "ffn_dropout" => self.ffn_dropout = num(key, value)?,
            "attn_dropout" => a.dropout = num(key, value)?,
            "architecture" => self.architecture = value.trim().parse()?,
            "attention" => a.pattern = value.trim().parse()?,
            "pe" => a.pe_mode = value.trim().parse()?,
            "rpe_share" => a.rpe_share = value.trim().parse()?,
            "rpe_split_coder" => self.rpe_split_coder = num(key, value)?,
            "refine_input" => self.refine_input = value.trim().parse()?,
            "max_len" => self.max_len = num(key, value)?,
            _ => return Ok(false),
        }
        Ok(true)
    }
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::salads50(2048, 19)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_carry_published_hyperparameters() {
        let s = ModelConfig::salads50(2048, 19);
        assert_eq!(
            (s.refinement_stages, s.layers, s.attention.window),
            (3, 5, 51)
        );
        assert_eq!(
            (
                s.hidden_dim,
                s.ffn_dim,
                s.refine_hidden_dim,
                s.refine_ffn_dim
            ),
            (128, 128, 64, 64)
        );
        assert_eq!(s.attention.heads, 4);
        assert_eq!(
            (s.input_dropout, s.ffn_dropout, s.attention.dropout),
            (0.4, 0.3, 0.2)
        );

        let g = ModelConfig::gtea(2048, 11);
        assert_eq!(
            (g.layers, g.attention.window, g.hidden_dim, g.input_dropout),
            (4, 11, 64, 0.5)
        );

        let b = ModelConfig::breakfast(2048, 48);
        assert_eq!(
            (
                b.attention.window,
                b.attention.heads,
                b.hidden_dim,
                b.refine_hidden_dim
            ),
            (25, 6, 192, 96)
        );
    }

    #[test]
    fn pairs_round_trip_through_set() {
        let mut c = ModelConfig::gtea(16, 4);
        c.architecture = Architecture::Standard;
        c.attention.pattern = AttentionPattern::LogSparse;
        let mut d = ModelConfig::default();
        for (k, v) in c.to_pairs() {
            assert!(d.set(k, &v).unwrap(), "{k}");
        }
        assert_eq!(c, d);
        assert!(!d.set("epochs", "3").unwrap());
        assert!(d.set("layers", "many").is_err());
        assert_eq!(ModelConfig::KEYS.len(), c.to_pairs().len());
    }

    #[test]
    fn length_contract() {
        let mut c = ModelConfig::salads50(8, 3);
        c.layers = 5;
        assert!(c.check_length(31).is_err());
        assert!(c.check_length(32).is_ok());
        c.architecture = Architecture::Standard;
        assert!(c.check_length(1).is_ok());
    }
}
