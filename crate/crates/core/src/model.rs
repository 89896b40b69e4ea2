//! A frozen backbone, its prompt bank and the parameter store they share.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::backbone::{Backbone, StreamInput};
use crate::config::ModelConfig;
use crate::data::Sample;
use crate::error::{contract_err, Result};
use crate::modality::{MissingType, Stream};
use crate::prompts::{Chain, PromptBank};
use crate::tensor::{Graph, ParamStore, Var};

const BACKBONE_SALT: u64 = 0xBAC0_B0E5;
const HEAD_SALT: u64 = 0x4EAD_0001;
const BANK_SALT: u64 = 0xBA4C_0002;

#[derive(Clone, Debug)]
pub struct Model {
    pub cfg: ModelConfig,
    pub store: ParamStore,
    pub backbone: Backbone,
    pub bank: PromptBank,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ParamCensus {
    pub trainable: usize,
    pub total: usize,
}

impl ParamCensus {
    pub fn fraction(&self) -> f64 {
        self.trainable as f64 / self.total as f64
    }
}

impl Model {
    /// Backbone, head and bank draw from separate seeded streams, so two
    /// variants built with the same seed share a bit-identical backbone.
    pub fn new(cfg: ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ BACKBONE_SALT);
        let mut head_rng = ChaCha8Rng::seed_from_u64(seed ^ HEAD_SALT);
        let backbone = Backbone::new(&cfg.encoder, cfg.n_classes, &mut store, &mut rng, &mut head_rng)?;
        let mut bank_rng = ChaCha8Rng::seed_from_u64(seed ^ BANK_SALT);
        let bank = PromptBank::new(
            &cfg.prompts,
            cfg.encoder.d_model,
            cfg.encoder.prompt_depth,
            &mut store,
            &mut bank_rng,
        )?;
        Ok(Self { cfg, store, backbone, bank })
    }

    /// Logits `1×C` for `sample` routed through the prompts of `m`.
    ///
    /// `chain` may carry a correlated chain already recorded on `g` for `m`;
    /// otherwise one is built.
    pub fn forward_model(&self, g: &mut Graph, sample: &Sample, m: MissingType, chain: Option<&Chain>) -> Result<Var> {
        let routed = sample.route()?;
        if routed != m || sample.missing != m {
            return Err(contract_err!(
                "sample flagged {} with payloads of {routed} cannot use prompts of {m}",
                sample.missing
            ));
        }
        let built;
        let chain = match chain {
            Some(c) => c,
            None => {
                built = self.bank.correlated_chain(g, m)?;
                &built
            }
        };
        let text_in = sample.text.as_deref().map(StreamInput::Tokens);
        let image_in = sample.image.as_ref().map(StreamInput::Patches);
        let x_text = text_in.map(|i| self.backbone.embed(g, Stream::Text, Some(i))).transpose()?;
        let x_image = image_in.map(|i| self.backbone.embed(g, Stream::Image, Some(i))).transpose()?;
        let prompts = self.bank.assemble(g, m, x_text, x_image, chain)?;
        let mut tokens = Vec::with_capacity(2);
        for (s, x0) in [(Stream::Text, x_text), (Stream::Image, x_image)] {
            tokens.push(match x0 {
                Some(x0) => self.backbone.encode(g, s, x0, prompts.stream(s))?,
                None => self.backbone.forward_stream(g, s, None, None)?,
            });
        }
        self.backbone.classify(g, tokens[0], tokens[1])
    }

    /// Routes `sample` by its payloads and returns its logits.
    pub fn logits(&self, sample: &Sample) -> Result<Vec<f64>> {
        let mut g = Graph::new(&self.store);
        let m = sample.route()?;
        let out = self.forward_model(&mut g, sample, m, None)?;
        Ok(g.value(out).to_vec())
    }

    pub fn census(&self) -> ParamCensus {
        let trainable = self.store.trainable_ids().iter().map(|&id| self.store.get(id).numel()).sum();
        let total = self.store.ids().map(|id| self.store.get(id).numel()).sum();
        ParamCensus { trainable, total }
    }

    /// Flat little-endian bytes of every frozen parameter, in id order.
    pub fn frozen_bytes(&self) -> Vec<u8> {
        self.store
            .frozen_ids()
            .iter()
            .flat_map(|&id| self.store.get(id).data.iter().flat_map(|v| v.to_le_bytes()))
            .collect()
    }
}
