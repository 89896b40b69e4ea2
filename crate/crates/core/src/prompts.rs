//! Missing-aware prompt bank and its generators.
//!
//! Every missing type owns a disjoint set of parameters:
//!
//! * correlated prompts: a free input-level block per stream, and for layers
//!   `1..J` a block generated from the previous layer's blocks of both streams
//!   (`bi`) or of the own stream (`uni`);
//! * dynamic prompts: `L_D` learned queries attending over the embedded input,
//!   followed by `LN → MLP → LN`;
//! * modal-common prompts: one shared block projected into each stream.
//!
//! The input-level block of a stream is `[correlated₀; dynamic; common]`.

use rand::Rng;

use crate::backbone::StreamPrompts;
use crate::config::{bottleneck_width, DynamicOp, Generator, ModalMode, PromptConfig};
use crate::error::{contract_err, Result};
pub use crate::modality::{MissingType, Stream};
use crate::nn::{normal_tensor, BottleneckMlp, Init, LayerNorm, Linear};
use crate::tensor::{Graph, ParamId, ParamStore, PoolKind, Var};

/// Prompt blocks start on the scale of the token embeddings.
const PROMPT_STD: f64 = 1.0;

#[derive(Clone, Debug)]
pub enum DeepGenerator {
    Free(ParamId),
    Fc(Linear),
    Mlp(BottleneckMlp),
}

#[derive(Clone, Debug)]
enum Mixer {
    /// Single-head attention in a reduced width, queries fixed per bank entry.
    Attention { wq: Linear, wk: Linear, wv: Linear, wo: Linear },
    Pool { kind: PoolKind, fc: Linear },
}

#[derive(Clone, Debug)]
pub struct DynamicGenerator {
    queries: ParamId,
    mixer: Mixer,
    ln_in: LayerNorm,
    mlp_down: Linear,
    mlp_up: Linear,
    ln_out: LayerNorm,
}

impl DynamicGenerator {
    fn new(store: &mut ParamStore, name: &str, cfg: &PromptConfig, d: usize, rng: &mut impl Rng) -> Self {
        let queries = store.add(format!("{name}.queries"), normal_tensor(rng, &[cfg.len_dynamic, d], PROMPT_STD), true);
        let narrow = bottleneck_width(d, cfg.dynamic_r);
        let lin = |store: &mut ParamStore, rng: &mut _, n: &str, i: usize, o| {
            Linear::new(store, &format!("{name}.{n}"), i, o, Init::FanIn.std(i), true, rng)
        };
        let mixer = match cfg.dynamic_op {
            DynamicOp::Attention => Mixer::Attention {
                wq: lin(store, rng, "wq", d, narrow),
                wk: lin(store, rng, "wk", d, narrow),
                wv: lin(store, rng, "wv", d, narrow),
                wo: lin(store, rng, "wo", narrow, d),
            },
            op => Mixer::Pool {
                kind: match op {
                    DynamicOp::MaxPool => PoolKind::Max,
                    DynamicOp::MinPool => PoolKind::Min,
                    _ => PoolKind::Avg,
                },
                fc: lin(store, rng, "pool_fc", d, d),
            },
        };
        Self {
            queries,
            mixer,
            ln_in: LayerNorm::new(store, &format!("{name}.ln_in"), d, true),
            mlp_down: lin(store, rng, "mlp.down", d, narrow),
            mlp_up: lin(store, rng, "mlp.up", narrow, d),
            ln_out: LayerNorm::new(store, &format!("{name}.ln_out"), d, true),
        }
    }

    fn forward(&self, g: &mut Graph, x0: Var) -> Result<Var> {
        let queries = g.param(self.queries);
        let mixed = match &self.mixer {
            Mixer::Attention { wq, wk, wv, wo } => {
                let q = wq.forward(g, queries)?;
                let k = wk.forward(g, x0)?;
                let v = wv.forward(g, x0)?;
                let s = g.matmul_t(q, k)?;
                let s = g.scale(s, 1.0 / (wq.d_out as f64).sqrt());
                let a = g.softmax_rows(s);
                let o = g.matmul(a, v)?;
                wo.forward(g, o)?
            }
            Mixer::Pool { kind, fc } => {
                let pooled = g.pool_rows(x0, *kind)?;
                let shift = fc.forward(g, pooled)?;
                g.add_row(queries, shift)?
            }
        };
        let h = self.ln_in.forward(g, mixed)?;
        let h = self.mlp_down.forward(g, h)?;
        let h = g.gelu(h);
        let h = self.mlp_up.forward(g, h)?;
        self.ln_out.forward(g, h)
    }
}

#[derive(Clone, Debug, Default)]
pub struct StreamBank {
    pub chain0: Option<ParamId>,
    /// Generators for layers `1..J`.
    pub deep: Vec<DeepGenerator>,
    pub dynamic: Option<DynamicGenerator>,
    pub projector: Option<BottleneckMlp>,
}

#[derive(Clone, Debug, Default)]
pub struct BankEntry {
    pub text: StreamBank,
    pub image: StreamBank,
    pub common: Option<ParamId>,
}

impl BankEntry {
    pub fn stream(&self, s: Stream) -> &StreamBank {
        match s {
            Stream::Text => &self.text,
            Stream::Image => &self.image,
        }
    }
}

/// All learnable prompt parameters, one [`BankEntry`] per missing type.
#[derive(Clone, Debug)]
pub struct PromptBank {
    pub cfg: PromptConfig,
    pub d_model: usize,
    pub depth: usize,
    entries: Vec<BankEntry>,
    param_ids: Vec<Vec<ParamId>>,
    generator_ids: Vec<ParamId>,
}

/// Correlated prompts of both streams for layers `0..J`.
#[derive(Clone, Debug, Default)]
pub struct Chain {
    pub text: Vec<Var>,
    pub image: Vec<Var>,
}

impl Chain {
    pub fn stream(&self, s: Stream) -> &[Var] {
        match s {
            Stream::Text => &self.text,
            Stream::Image => &self.image,
        }
    }
}

#[derive(Clone, Debug, Default)]
pub struct AssembledPrompts {
    pub text: Option<StreamPrompts>,
    pub image: Option<StreamPrompts>,
}

impl AssembledPrompts {
    pub fn stream(&self, s: Stream) -> Option<&StreamPrompts> {
        match s {
            Stream::Text => self.text.as_ref(),
            Stream::Image => self.image.as_ref(),
        }
    }
}

fn type_index(m: MissingType) -> usize {
    match m {
        MissingType::Complete => 0,
        MissingType::MissingText => 1,
        MissingType::MissingImage => 2,
    }
}

impl PromptBank {
    pub fn new(cfg: &PromptConfig, d: usize, depth: usize, store: &mut ParamStore, rng: &mut impl Rng) -> Result<Self> {
        cfg.validate()?;
        let mut entries = Vec::new();
        let mut param_ids = Vec::new();
        let mut generator_ids = Vec::new();
        let mut track = |store: &ParamStore, from: usize| {
            generator_ids.extend((from..store.len()).map(ParamId));
        };
        for m in MissingType::ALL {
            let before = store.len();
            let mut entry = BankEntry::default();
            for s in Stream::BOTH {
                let name = format!("bank.{}.{}", m.name(), s.name());
                let mut sb = StreamBank::default();
                if cfg.len_correlated > 0 {
                    sb.chain0 = Some(store.add(
                        format!("{name}.chain0"),
                        normal_tensor(rng, &[cfg.len_correlated, d], PROMPT_STD),
                        true,
                    ));
                    let width_in = match cfg.modal_mode {
                        ModalMode::Bi => 2 * d,
                        ModalMode::Uni => d,
                    };
                    for i in 1..depth {
                        let gname = format!("{name}.deep{i}");
                        let from = store.len();
                        let generated = cfg.generator != Generator::None;
                        sb.deep.push(match cfg.generator {
                            Generator::None => DeepGenerator::Free(store.add(
                                gname,
                                normal_tensor(rng, &[cfg.len_correlated, d], PROMPT_STD),
                                true,
                            )),
                            Generator::Fc => {
                                DeepGenerator::Fc(Linear::new(store, &gname, width_in, d, Init::FanIn.std(width_in), true, rng))
                            }
                            Generator::Mlp { r } => DeepGenerator::Mlp(BottleneckMlp::new(
                                store, &gname, width_in, d, r, Init::FanIn, rng,
                            )),
                        });
                        if generated {
                            track(store, from);
                        }
                    }
                }
                if cfg.len_dynamic > 0 {
                    let from = store.len();
                    sb.dynamic = Some(DynamicGenerator::new(store, &format!("{name}.dyn"), cfg, d, rng));
                    track(store, from);
                }
                if cfg.len_common > 0 {
                    let from = store.len();
                    sb.projector =
                        Some(BottleneckMlp::new(store, &format!("{name}.proj"), d, d, cfg.common_r, Init::FanIn, rng));
                    track(store, from);
                }
                match s {
                    Stream::Text => entry.text = sb,
                    Stream::Image => entry.image = sb,
                }
            }
            if cfg.len_common > 0 {
                entry.common = Some(store.add(
                    format!("bank.{}.common", m.name()),
                    normal_tensor(rng, &[cfg.len_common, d], PROMPT_STD),
                    true,
                ));
            }
            entries.push(entry);
            param_ids.push((before..store.len()).map(ParamId).collect());
        }
        Ok(Self { cfg: cfg.clone(), d_model: d, depth, entries, param_ids, generator_ids })
    }

    pub fn entry(&self, m: MissingType) -> &BankEntry {
        &self.entries[type_index(m)]
    }

    /// Parameters owned by the entry of `m`.
    pub fn params_of(&self, m: MissingType) -> &[ParamId] {
        &self.param_ids[type_index(m)]
    }

    pub fn all_params(&self) -> Vec<ParamId> {
        self.param_ids.concat()
    }

    /// Generator tensors (correlated generators, dynamic generators,
    /// modal-common projectors) across the bank.
    pub fn generator_params(&self) -> &[ParamId] {
        &self.generator_ids
    }

    /// Correlated prompts for layers `0..J` of both streams. Depends only on
    /// the bank parameters, never on a sample.
    pub fn correlated_chain(&self, g: &mut Graph, m: MissingType) -> Result<Chain> {
        let e = self.entry(m);
        let (Some(t0), Some(i0)) = (e.text.chain0, e.image.chain0) else {
            return Ok(Chain::default());
        };
        let mut chain = Chain { text: vec![g.param(t0)], image: vec![g.param(i0)] };
        for layer in 1..self.depth {
            let (prev_t, prev_i) = (chain.text[layer - 1], chain.image[layer - 1]);
            let joint = match self.cfg.modal_mode {
                ModalMode::Bi => Some(g.concat_last_axis(prev_i, prev_t)?),
                ModalMode::Uni => None,
            };
            for s in Stream::BOTH {
                let input = joint.unwrap_or(match s {
                    Stream::Text => prev_t,
                    Stream::Image => prev_i,
                });
                let next = match &e.stream(s).deep[layer - 1] {
                    DeepGenerator::Free(p) => g.param(*p),
                    DeepGenerator::Fc(lin) => lin.forward(g, input)?,
                    DeepGenerator::Mlp(mlp) => mlp.forward(g, input)?,
                };
                match s {
                    Stream::Text => chain.text.push(next),
                    Stream::Image => chain.image.push(next),
                }
            }
        }
        Ok(chain)
    }

    /// `L_D × d` prompts conditioned on the embedded input `x0` of `stream`.
    pub fn dynamic_prompt(&self, g: &mut Graph, m: MissingType, stream: Stream, x0: Var) -> Result<Option<Var>> {
        if !m.has(stream) {
            return Err(contract_err!("no dynamic prompt for the absent {} stream under {m}", stream.name()));
        }
        match &self.entry(m).stream(stream).dynamic {
            None => Ok(None),
            Some(gen) => gen.forward(g, x0).map(Some),
        }
    }

    /// `(P^{T,C}, P^{I,C})`, both projected from the same shared block.
    pub fn common_prompts(&self, g: &mut Graph, m: MissingType) -> Result<Option<(Var, Var)>> {
        let e = self.entry(m);
        let Some(pc) = e.common else { return Ok(None) };
        let shared = g.param(pc);
        let t = e.text.projector.as_ref().expect("projector exists with common block").forward(g, shared)?;
        let i = e.image.projector.as_ref().expect("projector exists with common block").forward(g, shared)?;
        Ok(Some((t, i)))
    }

    /// Builds the prompts of every present stream. `x0_*` must be given
    /// exactly for the streams that `m` keeps.
    pub fn assemble(
        &self,
        g: &mut Graph,
        m: MissingType,
        x0_text: Option<Var>,
        x0_image: Option<Var>,
        chain: &Chain,
    ) -> Result<AssembledPrompts> {
        if x0_text.is_some() != m.has(Stream::Text) || x0_image.is_some() != m.has(Stream::Image) {
            return Err(contract_err!(
                "inputs (text: {}, image: {}) do not match missing type {m}",
                x0_text.is_some(),
                x0_image.is_some()
            ));
        }
        if self.cfg.total() == 0 {
            return Ok(AssembledPrompts::default());
        }
        let common = self.common_prompts(g, m)?;
        let mut out = AssembledPrompts::default();
        for (s, x0) in [(Stream::Text, x0_text), (Stream::Image, x0_image)] {
            let Some(x0) = x0 else { continue };
            let mut parts = Vec::with_capacity(3);
            let layers = chain.stream(s);
            if let Some(&c0) = layers.first() {
                parts.push(c0);
            }
            if let Some(dp) = self.dynamic_prompt(g, m, s, x0)? {
                parts.push(dp);
            }
            if let Some((t, i)) = common {
                parts.push(if s == Stream::Text { t } else { i });
            }
            let input = g.concat_rows(&parts)?;
            let sp = StreamPrompts { input, deep: layers.iter().skip(1).copied().collect() };
            match s {
                Stream::Text => out.text = Some(sp),
                Stream::Image => out.image = Some(sp),
            }
        }
        Ok(out)
    }
}
