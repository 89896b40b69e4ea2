//! Frozen two-stream encoder with prompt injection.
//!
//! Each stream embeds its input, prepends a learned task token at row 0 and
//! runs `n_layers` pre-LN transformer blocks over `[prompts; features]`.
//! Row 0 of the final features, after a closing LayerNorm, is the stream's
//! task token.

use rand::Rng;

use crate::config::EncoderConfig;
use crate::data::PatchMatrix;
use crate::error::{contract_err, input_err, shape_err, Result};
use crate::modality::Stream;
use crate::nn::{normal_tensor, LayerNorm, Linear};
use crate::tensor::{Graph, ParamId, ParamStore, Tensor, Var};

#[derive(Clone, Copy, Debug)]
pub enum StreamInput<'a> {
    Tokens(&'a [usize]),
    Patches(&'a PatchMatrix),
}

#[derive(Clone, Debug)]
pub struct EncoderLayer {
    pub ln_attn: LayerNorm,
    pub qkv: Linear,
    pub proj: Linear,
    pub ln_mlp: LayerNorm,
    pub fc1: Linear,
    pub fc2: Linear,
}

impl EncoderLayer {
    fn new(store: &mut ParamStore, name: &str, cfg: &EncoderConfig, rng: &mut impl Rng) -> Self {
        let d = cfg.d_model;
        let s_d = 1.0 / (d as f64).sqrt();
        let s_ff = 1.0 / (cfg.ff_hidden as f64).sqrt();
        Self {
            ln_attn: LayerNorm::new(store, &format!("{name}.ln_attn"), d, false),
            qkv: Linear::new(store, &format!("{name}.qkv"), d, 3 * d, s_d, false, rng),
            proj: Linear::new(store, &format!("{name}.proj"), d, d, s_d, false, rng),
            ln_mlp: LayerNorm::new(store, &format!("{name}.ln_mlp"), d, false),
            fc1: Linear::new(store, &format!("{name}.fc1"), d, cfg.ff_hidden, s_d, false, rng),
            fc2: Linear::new(store, &format!("{name}.fc2"), cfg.ff_hidden, d, s_ff, false, rng),
        }
    }

    /// One pre-LN block over a `S×d` sequence.
    pub fn forward(&self, g: &mut Graph, x: Var, n_heads: usize) -> Result<Var> {
        let d = g.cols(x);
        let dh = d / n_heads;
        let h = self.ln_attn.forward(g, x)?;
        let qkv = self.qkv.forward(g, h)?;
        let mut merged: Option<Var> = None;
        for head in 0..n_heads {
            let q = g.slice_cols(qkv, head * dh, dh)?;
            let k = g.slice_cols(qkv, d + head * dh, dh)?;
            let v = g.slice_cols(qkv, 2 * d + head * dh, dh)?;
            let scores = g.matmul_t(q, k)?;
            let scores = g.scale(scores, 1.0 / (dh as f64).sqrt());
            let attn = g.softmax_rows(scores);
            let out = g.matmul(attn, v)?;
            merged = Some(match merged {
                None => out,
                Some(m) => g.concat_last_axis(m, out)?,
            });
        }
        let attn = self.proj.forward(g, merged.expect("n_heads >= 1"))?;
        let x = g.add(x, attn)?;
        let h = self.ln_mlp.forward(g, x)?;
        let h = self.fc1.forward(g, h)?;
        let h = g.gelu(h);
        let h = self.fc2.forward(g, h)?;
        g.add(x, h)
    }
}

#[derive(Clone, Debug)]
enum Embedding {
    Table(ParamId),
    Patch(Linear),
}

#[derive(Clone, Debug)]
pub struct StreamEncoder {
    pub stream: Stream,
    embedding: Embedding,
    /// `(max_len + 1) × d`; row 0 belongs to the task token.
    pub pos: ParamId,
    pub task_token: ParamId,
    pub layers: Vec<EncoderLayer>,
    pub ln_final: LayerNorm,
    max_len: usize,
}

/// Prompts handed to one stream: the input-level block and the generated
/// blocks for layers `1..J`.
#[derive(Clone, Debug)]
pub struct StreamPrompts {
    pub input: Var,
    pub deep: Vec<Var>,
}

#[derive(Clone, Debug)]
pub struct Backbone {
    pub cfg: EncoderConfig,
    pub text: StreamEncoder,
    pub image: StreamEncoder,
    /// Trainable classifier over `concat(task_text, task_image)`.
    pub head: Linear,
}

impl Backbone {
    pub fn new(
        cfg: &EncoderConfig,
        n_outputs: usize,
        store: &mut ParamStore,
        rng: &mut impl Rng,
        head_rng: &mut impl Rng,
    ) -> Result<Self> {
        cfg.validate()?;
        let text = StreamEncoder::new(store, Stream::Text, cfg, rng);
        let image = StreamEncoder::new(store, Stream::Image, cfg, rng);
        let head = Linear::new(store, "head", 2 * cfg.d_model, n_outputs, 0.02, true, head_rng);
        Ok(Self { cfg: cfg.clone(), text, image, head })
    }

    pub fn encoder(&self, stream: Stream) -> &StreamEncoder {
        match stream {
            Stream::Text => &self.text,
            Stream::Image => &self.image,
        }
    }

    /// Embeds a present stream; the task token occupies row 0.
    pub fn embed(&self, g: &mut Graph, stream: Stream, input: Option<StreamInput<'_>>) -> Result<Var> {
        let input = input.ok_or_else(|| contract_err!("cannot embed the absent {} stream", stream.name()))?;
        self.encoder(stream).embed(g, input, &self.cfg)
    }

    /// Runs layer `i` of `stream` over `[prompts; feats]`. Returns the
    /// prompt-position outputs only when `retain` is set.
    pub fn prompted_layer_forward(
        &self,
        g: &mut Graph,
        stream: Stream,
        i: usize,
        prompts: Option<Var>,
        feats: Var,
        retain: bool,
    ) -> Result<(Option<Var>, Var)> {
        let enc = self.encoder(stream);
        let layer = enc.layers.get(i).ok_or_else(|| contract_err!("layer {i} out of range"))?;
        let n_prompt = match prompts {
            Some(p) => {
                if g.cols(p) != g.cols(feats) {
                    return Err(shape_err!(
                        "prompt width {:?} differs from feature width {:?}",
                        g.shape(p),
                        g.shape(feats)
                    ));
                }
                g.rows(p)
            }
            None => 0,
        };
        let seq = match prompts {
            Some(p) => g.concat_rows(&[p, feats])?,
            None => feats,
        };
        let out = layer.forward(g, seq, self.cfg.n_heads)?;
        if n_prompt == 0 {
            return Ok((None, out));
        }
        let total = g.rows(out);
        let feats_out = g.slice_rows(out, n_prompt, total - n_prompt)?;
        let prompts_out = if retain { Some(g.slice_rows(out, 0, n_prompt)?) } else { None };
        Ok((prompts_out, feats_out))
    }

    /// Runs all layers of `stream` from the embedded `x0` and returns the
    /// `1×d` task token.
    ///
    /// Layer 0 sees the input-level block. Layers `1..J` see their generated
    /// block in place of the leading rows of the previous prompt outputs;
    /// every other row is carried forward with the features.
    pub fn encode(&self, g: &mut Graph, stream: Stream, x0: Var, prompts: Option<&StreamPrompts>) -> Result<Var> {
        let j = self.cfg.prompt_depth;
        let mut block = prompts.map(|p| p.input);
        let mut feats = x0;
        for i in 0..self.cfg.n_layers {
            if let (Some(sp), Some(prev)) = (prompts, block) {
                if i >= 1 && i < j {
                    if let Some(&deep) = sp.deep.get(i - 1) {
                        let (n_deep, n_prev) = (g.rows(deep), g.rows(prev));
                        block = Some(if n_deep >= n_prev {
                            deep
                        } else {
                            let rest = g.slice_rows(prev, n_deep, n_prev - n_deep)?;
                            g.concat_rows(&[deep, rest])?
                        });
                    }
                }
            }
            let replaced_next = match (prompts, block) {
                (Some(sp), Some(b)) if i + 1 < j => {
                    sp.deep.get(i).is_some_and(|&d| g.rows(d) >= g.rows(b))
                }
                _ => false,
            };
            let (p_out, f_out) = self.prompted_layer_forward(g, stream, i, block, feats, !replaced_next)?;
            feats = f_out;
            if !replaced_next {
                block = p_out;
            }
        }
        let token = g.slice_rows(feats, 0, 1)?;
        self.encoder(stream).ln_final.forward(g, token)
    }

    /// Embeds and encodes one stream; an absent stream yields a zero task
    /// token and runs no encoder work.
    pub fn forward_stream(
        &self,
        g: &mut Graph,
        stream: Stream,
        input: Option<StreamInput<'_>>,
        prompts: Option<&StreamPrompts>,
    ) -> Result<Var> {
        match input {
            None => Ok(g.constant(Tensor::zeros(&[1, self.cfg.d_model]))),
            Some(inp) => {
                let x0 = self.embed(g, stream, Some(inp))?;
                self.encode(g, stream, x0, prompts)
            }
        }
    }

    /// Classifier over the two task tokens.
    pub fn classify(&self, g: &mut Graph, task_text: Var, task_image: Var) -> Result<Var> {
        let joint = g.concat_last_axis(task_text, task_image)?;
        self.head.forward(g, joint)
    }
}

impl StreamEncoder {
    fn new(store: &mut ParamStore, stream: Stream, cfg: &EncoderConfig, rng: &mut impl Rng) -> Self {
        let d = cfg.d_model;
        let name = format!("backbone.{}", stream.name());
        let (embedding, max_len) = match stream {
            Stream::Text => {
                let t = store.add(format!("{name}.tokens"), normal_tensor(rng, &[cfg.vocab_size, d], 1.0), false);
                (Embedding::Table(t), cfg.max_text_len)
            }
            Stream::Image => {
                let s = 1.0 / (cfg.patch_dim as f64).sqrt();
                let lin = Linear::new(store, &format!("{name}.patch"), cfg.patch_dim, d, s, false, rng);
                (Embedding::Patch(lin), cfg.max_patches)
            }
        };
        let pos = store.add(format!("{name}.pos"), normal_tensor(rng, &[max_len + 1, d], 0.5), false);
        let task_token = store.add(format!("{name}.task"), normal_tensor(rng, &[1, d], 1.0), false);
        let layers = (0..cfg.n_layers)
            .map(|i| EncoderLayer::new(store, &format!("{name}.layer{i}"), cfg, rng))
            .collect();
        let ln_final = LayerNorm::new(store, &format!("{name}.ln_final"), d, false);
        Self { stream, embedding, pos, task_token, layers, ln_final, max_len }
    }

    fn embed(&self, g: &mut Graph, input: StreamInput<'_>, cfg: &EncoderConfig) -> Result<Var> {
        let d = cfg.d_model;
        let body = match (&self.embedding, input) {
            (Embedding::Table(table), StreamInput::Tokens(ids)) => {
                if ids.is_empty() || ids.len() > self.max_len {
                    return Err(input_err!("text length {} outside 1..={}", ids.len(), self.max_len));
                }
                if let Some(&bad) = ids.iter().find(|&&id| id >= cfg.vocab_size) {
                    return Err(input_err!("token id {bad} outside vocabulary of {}", cfg.vocab_size));
                }
                let table = g.store().get(*table);
                let mut rows = Vec::with_capacity(ids.len() * d);
                for &id in ids {
                    rows.extend_from_slice(table.row(id));
                }
                g.constant(Tensor::new(vec![ids.len(), d], rows)?)
            }
            (Embedding::Patch(lin), StreamInput::Patches(p)) => {
                if p.n_patches == 0 || p.n_patches > self.max_len {
                    return Err(input_err!("patch count {} outside 1..={}", p.n_patches, self.max_len));
                }
                if p.patch_dim != cfg.patch_dim {
                    return Err(input_err!("patch width {} differs from {}", p.patch_dim, cfg.patch_dim));
                }
                let x = g.constant(Tensor::new(vec![p.n_patches, p.patch_dim], p.data.clone())?);
                lin.forward(g, x)?
            }
            _ => return Err(contract_err!("{} stream received the wrong input kind", self.stream.name())),
        };
        let task = g.param(self.task_token);
        let seq = g.concat_rows(&[task, body])?;
        let len = g.rows(seq);
        let pos = g.param(self.pos);
        let pos = g.slice_rows(pos, 0, len)?;
        g.add(seq, pos)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn cfg() -> EncoderConfig {
        EncoderConfig {
            n_layers: 2,
            d_model: 8,
            n_heads: 2,
            ff_hidden: 12,
            prompt_depth: 2,
            vocab_size: 20,
            max_text_len: 12,
            patch_dim: 3,
            max_patches: 10,
        }
    }

    fn build(cfg: &EncoderConfig) -> (ParamStore, Backbone) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut head_rng = ChaCha8Rng::seed_from_u64(6);
        let bb = Backbone::new(cfg, 3, &mut store, &mut rng, &mut head_rng).unwrap();
        (store, bb)
    }

    #[test]
    fn embed_shapes_and_errors() {
        let c = cfg();
        let (store, bb) = build(&c);
        let mut g = Graph::new(&store);
        let x = bb.embed(&mut g, Stream::Text, Some(StreamInput::Tokens(&[1, 2, 3, 4, 5]))).unwrap();
        assert_eq!(g.shape(x), &[6, 8]);
        let p = PatchMatrix { n_patches: 4, patch_dim: 3, data: vec![0.1; 12] };
        let x = bb.embed(&mut g, Stream::Image, Some(StreamInput::Patches(&p))).unwrap();
        assert_eq!(g.shape(x), &[5, 8]);

        let input = |r: Result<Var>| matches!(r, Err(crate::Error::Input(_)));
        let contract = |r: Result<Var>| matches!(r, Err(crate::Error::Contract(_)));
        assert!(input(bb.embed(&mut g, Stream::Text, Some(StreamInput::Tokens(&[])))));
        assert!(input(bb.embed(&mut g, Stream::Text, Some(StreamInput::Tokens(&[0; 13])))));
        assert!(input(bb.embed(&mut g, Stream::Text, Some(StreamInput::Tokens(&[20])))));
        let narrow = PatchMatrix { n_patches: 2, patch_dim: 2, data: vec![0.0; 4] };
        assert!(input(bb.embed(&mut g, Stream::Image, Some(StreamInput::Patches(&narrow)))));
        assert!(contract(bb.embed(&mut g, Stream::Image, Some(StreamInput::Tokens(&[1])))));
        assert!(contract(bb.embed(&mut g, Stream::Text, None)));
    }

    #[test]
    fn prompted_layer_keeps_feature_rows() {
        let c = cfg();
        let (store, bb) = build(&c);
        let mut g = Graph::new(&store);
        let prompts = g.leaf(Tensor::filled(&[4, 8], 0.3));
        let feats = g.leaf(Tensor::filled(&[10, 8], -0.2));
        let (p, f) = bb.prompted_layer_forward(&mut g, Stream::Text, 0, Some(prompts), feats, true).unwrap();
        assert_eq!(g.shape(p.unwrap()), &[4, 8]);
        assert_eq!(g.shape(f), &[10, 8]);
        let (p, _) = bb.prompted_layer_forward(&mut g, Stream::Text, 0, Some(prompts), feats, false).unwrap();
        assert!(p.is_none());
        let wide = g.leaf(Tensor::zeros(&[2, 9]));
        assert!(bb.prompted_layer_forward(&mut g, Stream::Text, 0, Some(wide), feats, true).is_err());
        assert!(bb.prompted_layer_forward(&mut g, Stream::Text, 2, None, feats, true).is_err());
    }

    // Plain-vector reference transformer, independent of the graph.
    fn rows_ln(x: &[f64], d: usize, gamma: &[f64], beta: &[f64]) -> Vec<f64> {
        x.chunks(d)
            .flat_map(|r| {
                let mu = r.iter().sum::<f64>() / d as f64;
                let var = r.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / d as f64;
                let s = 1.0 / (var + crate::tensor::LN_EPS).sqrt();
                r.iter().enumerate().map(move |(j, v)| (v - mu) * s * gamma[j] + beta[j]).collect::<Vec<_>>()
            })
            .collect()
    }

    fn affine(x: &[f64], din: usize, w: &[f64], b: &[f64]) -> Vec<f64> {
        let dout = b.len();
        let mut out = Vec::new();
        for r in x.chunks(din) {
            for o in 0..dout {
                out.push(b[o] + (0..din).map(|i| r[i] * w[i * dout + o]).sum::<f64>());
            }
        }
        out
    }

    fn reference_layer(store: &ParamStore, l: &EncoderLayer, x: &[f64], d: usize, heads: usize) -> Vec<f64> {
        let p = |id: ParamId| store.get(id).data.as_slice();
        let s = x.len() / d;
        let dh = d / heads;
        let h = rows_ln(x, d, p(l.ln_attn.gamma), p(l.ln_attn.beta));
        let qkv = affine(&h, d, p(l.qkv.w), p(l.qkv.b));
        let mut merged = vec![0.0; s * d];
        for hd in 0..heads {
            for i in 0..s {
                let q = &qkv[i * 3 * d + hd * dh..i * 3 * d + (hd + 1) * dh];
                let mut sc: Vec<f64> = (0..s)
                    .map(|j| {
                        let k = &qkv[j * 3 * d + d + hd * dh..j * 3 * d + d + (hd + 1) * dh];
                        q.iter().zip(k).map(|(a, b)| a * b).sum::<f64>() / (dh as f64).sqrt()
                    })
                    .collect();
                let m = sc.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                sc.iter_mut().for_each(|v| *v = (*v - m).exp());
                let z: f64 = sc.iter().sum();
                for c in 0..dh {
                    merged[i * d + hd * dh + c] =
                        (0..s).map(|j| sc[j] / z * qkv[j * 3 * d + 2 * d + hd * dh + c]).sum::<f64>();
                }
            }
        }
        let attn = affine(&merged, d, p(l.proj.w), p(l.proj.b));
        let x1: Vec<f64> = x.iter().zip(&attn).map(|(a, b)| a + b).collect();
        let h = rows_ln(&x1, d, p(l.ln_mlp.gamma), p(l.ln_mlp.beta));
        let h: Vec<f64> = affine(&h, d, p(l.fc1.w), p(l.fc1.b))
            .into_iter()
            .map(|v| 0.5 * v * (1.0 + libm::erf(v / std::f64::consts::SQRT_2)))
            .collect();
        let h = affine(&h, l.fc1.d_out, p(l.fc2.w), p(l.fc2.b));
        x1.iter().zip(&h).map(|(a, b)| a + b).collect()
    }

    #[test]
    fn unprompted_encoder_matches_plain_reference() {
        let c = cfg();
        let (store, bb) = build(&c);
        let tokens = [3usize, 0, 19, 7];
        let mut g = Graph::new(&store);
        let x0 = bb.embed(&mut g, Stream::Text, Some(StreamInput::Tokens(&tokens))).unwrap();
        let got = bb.encode(&mut g, Stream::Text, x0, None).unwrap();

        let enc = bb.encoder(Stream::Text);
        let Embedding::Table(table) = enc.embedding else { unreachable!() };
        let d = c.d_model;
        let (tab, pos, task) = (store.get(table), store.get(enc.pos), store.get(enc.task_token));
        let mut x: Vec<f64> = task.data.clone();
        for &t in &tokens {
            x.extend_from_slice(tab.row(t));
        }
        x.iter_mut().zip(&pos.data).for_each(|(v, p)| *v += p);
        for l in &enc.layers {
            x = reference_layer(&store, l, &x, d, c.n_heads);
        }
        let lnf = &enc.ln_final;
        let want = rows_ln(&x[..d], d, &store.get(lnf.gamma).data, &store.get(lnf.beta).data);
        for (a, b) in g.value(got).iter().zip(&want) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
    }

    #[test]
    fn absent_stream_yields_zero_token() {
        let c = cfg();
        let (store, bb) = build(&c);
        let mut g = Graph::new(&store);
        let before = g.len();
        let z = bb.forward_stream(&mut g, Stream::Image, None, None).unwrap();
        assert_eq!(g.value(z), &[0.0; 8]);
        assert_eq!(g.len(), before + 1);
    }
}
