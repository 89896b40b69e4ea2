//! Model-side configuration shared by the backbone and the prompt engine.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderConfig {
    pub n_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub ff_hidden: usize,
    /// Number of leading layers that receive generated prompts (J).
    pub prompt_depth: usize,
    pub vocab_size: usize,
    pub max_text_len: usize,
    pub patch_dim: usize,
    pub max_patches: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            n_layers: 4,
            d_model: 64,
            n_heads: 4,
            ff_hidden: 256,
            prompt_depth: 2,
            vocab_size: 64,
            max_text_len: 16,
            patch_dim: 8,
            max_patches: 16,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.n_layers == 0 || self.d_model == 0 || self.n_heads == 0 || self.ff_hidden == 0 {
            return bad("layer count, width, heads and ff width must be positive".into());
        }
        if self.d_model % self.n_heads != 0 {
            return bad(format!("d_model {} not divisible by n_heads {}", self.d_model, self.n_heads));
        }
        if self.prompt_depth == 0 || self.prompt_depth > self.n_layers {
            return bad(format!(
                "prompt_depth {} must lie in 1..={}",
                self.prompt_depth, self.n_layers
            ));
        }
        if self.vocab_size == 0 || self.max_text_len == 0 || self.patch_dim == 0 || self.max_patches == 0 {
            return bad("vocabulary and stream sizes must be positive".into());
        }
        Ok(())
    }
}

/// How deep correlated prompts at layers 1..J are produced.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Generator {
    /// Independent free prompts per layer.
    None,
    /// A single linear map.
    Fc,
    /// Bottleneck MLP with reduction factor `r`.
    Mlp { r: usize },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ModalMode {
    Uni,
    Bi,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DynamicOp {
    Attention,
    MaxPool,
    MinPool,
    AvgPool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Variant {
    Baseline,
    MmpIndependent,
    Dcp,
}

impl Variant {
    pub const ALL: [Variant; 3] = [Variant::Baseline, Variant::MmpIndependent, Variant::Dcp];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Baseline => "baseline",
            Variant::MmpIndependent => "mmp_independent",
            Variant::Dcp => "dcp",
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "baseline" => Ok(Variant::Baseline),
            "mmp_independent" | "mmp" => Ok(Variant::MmpIndependent),
            "dcp" => Ok(Variant::Dcp),
            _ => Err(Error::Config(format!("unknown variant `{s}`"))),
        }
    }
}

impl fmt::Display for Generator {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Generator::None => f.write_str("none"),
            Generator::Fc => f.write_str("fc"),
            Generator::Mlp { r } => write!(f, "mlp{r}"),
        }
    }
}

impl FromStr for ModalMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "uni" => Ok(ModalMode::Uni),
            "bi" => Ok(ModalMode::Bi),
            _ => Err(Error::Config(format!("unknown modal mode `{s}`"))),
        }
    }
}

impl FromStr for DynamicOp {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "attention" => Ok(DynamicOp::Attention),
            "max" => Ok(DynamicOp::MaxPool),
            "min" => Ok(DynamicOp::MinPool),
            "avg" => Ok(DynamicOp::AvgPool),
            _ => Err(Error::Config(format!("unknown dynamic op `{s}`"))),
        }
    }
}

impl fmt::Display for DynamicOp {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            DynamicOp::Attention => "attention",
            DynamicOp::MaxPool => "max",
            DynamicOp::MinPool => "min",
            DynamicOp::AvgPool => "avg",
        })
    }
}

impl fmt::Display for ModalMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ModalMode::Uni => "uni",
            ModalMode::Bi => "bi",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PromptConfig {
    /// Correlated prompt rows (L_R).
    pub len_correlated: usize,
    /// Dynamic prompt rows (L_D).
    pub len_dynamic: usize,
    /// Modal-common prompt rows (L_C).
    pub len_common: usize,
    pub generator: Generator,
    pub modal_mode: ModalMode,
    pub dynamic_op: DynamicOp,
    /// Reduction factor of the dynamic generator's attention and MLP.
    pub dynamic_r: usize,
    /// Reduction factor of the modal-common projectors.
    pub common_r: usize,
}

impl Default for PromptConfig {
    fn default() -> Self {
        Self::for_variant(Variant::Dcp, 36)
    }
}

impl PromptConfig {
    /// Canonical prompt layout for a variant with `total` input-level rows.
    pub fn for_variant(variant: Variant, total: usize) -> Self {
        let base = Self {
            len_correlated: 0,
            len_dynamic: 0,
            len_common: 0,
            generator: Generator::None,
            modal_mode: ModalMode::Bi,
            dynamic_op: DynamicOp::Attention,
            dynamic_r: 16,
            common_r: 16,
        };
        match variant {
            Variant::Baseline => base,
            Variant::MmpIndependent => Self { len_correlated: total, ..base },
            Variant::Dcp => {
                let third = total / 3;
                Self {
                    len_correlated: total - 2 * third,
                    len_dynamic: third,
                    len_common: third,
                    generator: Generator::Mlp { r: 16 },
                    ..base
                }
            }
        }
    }

    pub fn total(&self) -> usize {
        self.len_correlated + self.len_dynamic + self.len_common
    }

    pub fn validate(&self) -> Result<()> {
        if let Generator::Mlp { r } = self.generator {
            if r == 0 {
                return Err(Error::Config("generator reduction factor must be positive".into()));
            }
        }
        if self.dynamic_r == 0 || self.common_r == 0 {
            return Err(Error::Config("reduction factors must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LabelMode {
    Single,
    /// Independent label bits scored with binary cross-entropy.
    Multi,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub prompts: PromptConfig,
    pub n_classes: usize,
    pub label_mode: LabelMode,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            encoder: EncoderConfig::default(),
            prompts: PromptConfig::default(),
            n_classes: 4,
            label_mode: LabelMode::Single,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.prompts.validate()?;
        if self.n_classes < 2 {
            return Err(Error::Config("need at least two classes".into()));
        }
        Ok(())
    }
}

/// `⌈width / r⌉`, the hidden width of a bottleneck.
pub fn bottleneck_width(width: usize, r: usize) -> usize {
    width.div_ceil(r)
}
