use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::config::ModelConfig;
use crate::attention::{rpe_table_name, Coder, PeMode};
use crate::tensor::Tensor;

/// Named model parameters, iterated in name order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    tensors: BTreeMap<String, Tensor>,
}

#[derive(Clone, Copy)]
enum Init {
    /// `U(-1/√fan_in, 1/√fan_in)`.
    Uniform {
        fan_in: usize,
    },
    Zeros,
    Ones,
}

fn fnv1a(s: &str) -> u64 {
    s.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| {
        (h ^ b as u64).wrapping_mul(0x100_0000_01b3)
    })
}

fn layout(cfg: &ModelConfig) -> BTreeMap<String, (Vec<usize>, Init)> {
    let mut out = BTreeMap::new();
    let mut add = |name: String, shape: Vec<usize>, init: Init| {
        out.insert(name, (shape, init));
    };
    for s in 0..cfg.num_stages() {
        let (din, h, f) = (
            cfg.stage_input_dim(s),
            cfg.stage_hidden(s),
            cfg.stage_ffn(s),
        );
        let p = format!("stage{s}");
        add(
            format!("{p}.proj.w"),
            vec![din, h],
            Init::Uniform { fan_in: din },
        );
        add(
            format!("{p}.proj.b"),
            vec![h],
            Init::Uniform { fan_in: din },
        );
        add(
            format!("{p}.cls.w"),
            vec![h, cfg.num_classes],
            Init::Uniform { fan_in: h },
        );
        add(
            format!("{p}.cls.b"),
            vec![cfg.num_classes],
            Init::Uniform { fan_in: h },
        );
        if cfg.attention.pe_mode == PeMode::AbsLearnable {
            add(format!("{p}.pos.w"), vec![cfg.max_len, h], Init::Zeros);
        }
        for coder in [Coder::Encoder, Coder::Decoder] {
            let tag = if coder == Coder::Encoder {
                "enc"
            } else {
                "dec"
            };
            for l in 1..=cfg.layers {
                let lp = format!("{p}.{tag}{l}");
                add(
                    format!("{lp}.qkv.w"),
                    vec![h, 3 * h],
                    Init::Uniform { fan_in: h },
                );
                add(
                    format!("{lp}.qkv.b"),
                    vec![3 * h],
                    Init::Uniform { fan_in: h },
                );
                add(
                    format!("{lp}.ffn1.w"),
                    vec![h, f],
                    Init::Uniform { fan_in: h },
                );
                add(format!("{lp}.ffn1.b"), vec![f], Init::Uniform { fan_in: h });
                add(
                    format!("{lp}.ffn2.w"),
                    vec![f, h],
                    Init::Uniform { fan_in: f },
                );
                add(format!("{lp}.ffn2.b"), vec![h], Init::Uniform { fan_in: f });
                for n in ["norm1", "norm2"] {
                    add(format!("{lp}.{n}.w"), vec![h], Init::Ones);
                    add(format!("{lp}.{n}.b"), vec![h], Init::Zeros);
                }
                if cfg.attention.pe_mode == PeMode::Relative {
                    let name = rpe_table_name(
                        cfg.attention.rpe_share,
                        cfg.rpe_split_coder,
                        s,
                        coder,
                        l,
                        cfg.layer_scale(coder, l),
                    );
                    add(
                        name,
                        vec![cfg.attention.window, cfg.attention.heads],
                        Init::Zeros,
                    );
                }
            }
        }
    }
    out
}

impl ParamStore {
    /// Expected name → shape map for `cfg`.
    pub fn shapes(cfg: &ModelConfig) -> BTreeMap<String, Vec<usize>> {
        layout(cfg).into_iter().map(|(n, (s, _))| (n, s)).collect()
    }

    /// Draws every parameter from its own stream keyed by `(seed, name)`.
    pub fn init(cfg: &ModelConfig, seed: u64) -> Self {
        let tensors = layout(cfg)
            .into_iter()
            .map(|(name, (shape, init))| {
                let n: usize = shape.iter().product();
                let data = match init {
                    Init::Zeros => vec![0.0; n],
                    Init::Ones => vec![1.0; n],
                    Init::Uniform { fan_in } => {
                        let bound = 1.0 / (fan_in as f64).sqrt();
                        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ fnv1a(&name));
                        (0..n).map(|_| rng.random_range(-bound..bound)).collect()
                    }
                };
                let t = Tensor::new(shape, data).expect("layout shape");
                (name, t)
            })
            .collect();
        ParamStore { tensors }
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) {
        self.tensors.insert(name.into(), value);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.tensors.get_mut(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.tensors.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor)> {
        self.tensors.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.values().map(Tensor::numel).sum()
    }
}
