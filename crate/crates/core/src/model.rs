//! The seq2seq model: embeddings, encoder stack, decoder stack with causal
//! self-attention and cross-attention, and the teacher-forced loss.
//!
//! Parameters are stored in a flat name -> tensor map. Weight sharing is
//! expressed through name resolution: a shared decoder resolves its
//! self-attention and feed-forward names to the encoder's entries, so the
//! two stacks literally read and update the same storage.

use std::collections::{BTreeMap, HashMap};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::tensor::Tensor;

pub const MAX_POSITIONS_LIMIT: usize = 512;
pub const INIT_STDDEV: f64 = 0.02;

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub num_layers: usize,
    pub hidden_size: usize,
    pub filter_size: usize,
    pub num_heads: usize,
    pub input_vocab_size: usize,
    pub output_vocab_size: usize,
    pub max_positions: usize,
    pub share_encoder_decoder: bool,
    pub tie_output_to_embedding: bool,
    pub decoder_only: bool,
    /// Keep two embedding tables even when input and output vocab sizes
    /// agree (the RoBERTa-encoder + GPT-decoder arrangement).
    pub separate_embeddings: bool,
    pub dropout: f64,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hidden_size % self.num_heads != 0 {
            return Err(Error::Config(format!(
                "hidden size {} not divisible by {} heads",
                self.hidden_size, self.num_heads
            )));
        }
        if self.max_positions > MAX_POSITIONS_LIMIT {
            return Err(Error::Config(format!(
                "max_positions {} exceeds the {} limit",
                self.max_positions, MAX_POSITIONS_LIMIT
            )));
        }
        if self.share_encoder_decoder && self.input_vocab_size != self.output_vocab_size {
            return Err(Error::Config(
                "shared encoder/decoder requires identical vocabularies".into(),
            ));
        }
        if self.share_encoder_decoder && self.decoder_only {
            return Err(Error::Config(
                "decoder-only models have no encoder to share".into(),
            ));
        }
        if self.decoder_only && self.input_vocab_size != self.output_vocab_size {
            return Err(Error::Config(
                "decoder-only models read one token stream, vocabularies must match".into(),
            ));
        }
        if self.dual_embeddings() && self.share_encoder_decoder {
            return Err(Error::Config(
                "shared stacks cannot use separate embeddings".into(),
            ));
        }
        Ok(())
    }

    /// Whether the model keeps distinct input and output embedding tables.
    pub fn dual_embeddings(&self) -> bool {
        !self.decoder_only
            && (self.separate_embeddings || self.input_vocab_size != self.output_vocab_size)
    }

    pub fn head_dim(&self) -> usize {
        self.hidden_size / self.num_heads
    }

    /// The 12-layer configuration with the BERT vocabulary.
    pub fn bert_base() -> Self {
        ModelConfig {
            num_layers: 12,
            hidden_size: 768,
            filter_size: 3072,
            num_heads: 12,
            input_vocab_size: 30522,
            output_vocab_size: 30522,
            max_positions: 512,
            share_encoder_decoder: false,
            tie_output_to_embedding: true,
            decoder_only: false,
            separate_embeddings: false,
            dropout: 0.1,
        }
    }

    /// Small configuration for tests and toy training.
    pub fn toy(vocab: usize) -> Self {
        ModelConfig {
            num_layers: 2,
            hidden_size: 8,
            filter_size: 32,
            num_heads: 2,
            input_vocab_size: vocab,
            output_vocab_size: vocab,
            max_positions: 16,
            share_encoder_decoder: false,
            tie_output_to_embedding: true,
            decoder_only: false,
            separate_embeddings: false,
            dropout: 0.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Component {
    Embedding,
    Encoder,
    Decoder,
    CrossAttention,
    OutputHead,
}

#[derive(Debug, Clone)]
pub struct TensorSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub component: Component,
}

impl TensorSpec {
    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

fn push_embedding(out: &mut Vec<TensorSpec>, prefix: &str, vocab: usize, cfg: &ModelConfig) {
    let h = cfg.hidden_size;
    let spec = |name: String, shape: Vec<usize>| TensorSpec {
        name,
        shape,
        component: Component::Embedding,
    };
    out.push(spec(format!("{prefix}/word"), vec![vocab, h]));
    out.push(spec(format!("{prefix}/pos"), vec![cfg.max_positions, h]));
    out.push(spec(format!("{prefix}/type"), vec![2, h]));
    out.push(spec(format!("{prefix}/ln_g"), vec![h]));
    out.push(spec(format!("{prefix}/ln_b"), vec![h]));
}

fn push_attention(out: &mut Vec<TensorSpec>, prefix: &str, h: usize, component: Component) {
    let spec = |name: String, shape: Vec<usize>| TensorSpec {
        name,
        shape,
        component,
    };
    for p in ["q", "k", "v", "o"] {
        out.push(spec(format!("{prefix}/{p}_w"), vec![h, h]));
        out.push(spec(format!("{prefix}/{p}_b"), vec![h]));
    }
    out.push(spec(format!("{prefix}/ln_g"), vec![h]));
    out.push(spec(format!("{prefix}/ln_b"), vec![h]));
}

fn push_ffn(out: &mut Vec<TensorSpec>, prefix: &str, h: usize, f: usize, component: Component) {
    let spec = |name: String, shape: Vec<usize>| TensorSpec {
        name,
        shape,
        component,
    };
    out.push(spec(format!("{prefix}/w1"), vec![h, f]));
    out.push(spec(format!("{prefix}/b1"), vec![f]));
    out.push(spec(format!("{prefix}/w2"), vec![f, h]));
    out.push(spec(format!("{prefix}/b2"), vec![h]));
    out.push(spec(format!("{prefix}/ln_g"), vec![h]));
    out.push(spec(format!("{prefix}/ln_b"), vec![h]));
}

/// Every allocated tensor of a model under this configuration, in a stable
/// order. Shared stacks list shared storage exactly once.
pub fn tensor_inventory(cfg: &ModelConfig) -> Vec<TensorSpec> {
    let mut out = Vec::new();
    let h = cfg.hidden_size;
    let f = cfg.filter_size;

    if cfg.dual_embeddings() {
        push_embedding(&mut out, "embed_in", cfg.input_vocab_size, cfg);
        push_embedding(&mut out, "embed_out", cfg.output_vocab_size, cfg);
    } else {
        push_embedding(&mut out, "embed", cfg.output_vocab_size, cfg);
    }

    if !cfg.decoder_only {
        for i in 0..cfg.num_layers {
            push_attention(&mut out, &format!("encoder/layer_{i}/self"), h, Component::Encoder);
            push_ffn(&mut out, &format!("encoder/layer_{i}/ffn"), h, f, Component::Encoder);
        }
    }

    for i in 0..cfg.num_layers {
        if !cfg.share_encoder_decoder {
            push_attention(&mut out, &format!("decoder/layer_{i}/self"), h, Component::Decoder);
        }
        if !cfg.decoder_only {
            push_attention(
                &mut out,
                &format!("decoder/layer_{i}/cross"),
                h,
                Component::CrossAttention,
            );
        }
        if !cfg.share_encoder_decoder {
            push_ffn(&mut out, &format!("decoder/layer_{i}/ffn"), h, f, Component::Decoder);
        }
    }

    if !cfg.tie_output_to_embedding {
        out.push(TensorSpec {
            name: "output/w".into(),
            shape: vec![h, cfg.output_vocab_size],
            component: Component::OutputHead,
        });
        out.push(TensorSpec {
            name: "output/b".into(),
            shape: vec![cfg.output_vocab_size],
            component: Component::OutputHead,
        });
    }

    out
}

fn fnv1a(s: &str) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for b in s.as_bytes() {
        h ^= *b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

/// Random init for one named tensor. Seeded per tensor name so a tensor's
/// initial values do not depend on what else the model allocates.
pub fn init_tensor(name: &str, shape: &[usize], seed: u64) -> Tensor {
    if name.ends_with("ln_g") {
        Tensor::ones(shape)
    } else if name.ends_with('b') || name.ends_with("_b") || name.ends_with("b1") || name.ends_with("b2") {
        Tensor::zeros(shape)
    } else {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ fnv1a(name));
        Tensor::trunc_normal(shape, INIT_STDDEV, &mut rng)
    }
}

#[derive(Debug, Clone)]
pub struct Seq2SeqModel {
    pub config: ModelConfig,
    params: BTreeMap<String, Tensor>,
}

/// One forward construction: the op tape plus the leaf node of every
/// parameter that was touched.
pub struct ForwardPass {
    pub graph: Graph,
    pub param_nodes: HashMap<String, NodeId>,
    dropout: f64,
    dropout_rng: Option<ChaCha8Rng>,
}

impl ForwardPass {
    fn param(&mut self, model: &Seq2SeqModel, name: &str) -> NodeId {
        if let Some(id) = self.param_nodes.get(name) {
            return *id;
        }
        let tensor = model
            .params
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"))
            .clone();
        let id = self.graph.leaf(tensor);
        self.param_nodes.insert(name.to_string(), id);
        id
    }

    fn dropout(&mut self, x: NodeId) -> NodeId {
        let rate = self.dropout;
        match &mut self.dropout_rng {
            Some(rng) if rate > 0.0 => {
                use rand::Rng;
                let shape = self.graph.value(x).shape().to_vec();
                let keep = 1.0 - rate;
                let numel: usize = shape.iter().product();
                let data: Vec<f64> = (0..numel)
                    .map(|_| if rng.gen::<f64>() < keep { 1.0 / keep } else { 0.0 })
                    .collect();
                let mask = Tensor::new(shape, data).unwrap();
                self.graph.mul_const(x, mask).unwrap()
            }
            _ => x,
        }
    }
}

/// Additive attention mask: rows are query positions, columns key positions;
/// blocked entries get -inf.
fn attention_mask(q_len: usize, key_visible: impl Fn(usize, usize) -> bool, k_len: usize) -> Tensor {
    let mut data = vec![0.0; q_len * k_len];
    for i in 0..q_len {
        for j in 0..k_len {
            if !key_visible(i, j) {
                data[i * k_len + j] = f64::NEG_INFINITY;
            }
        }
    }
    Tensor::new(vec![q_len, k_len], data).unwrap()
}

impl Seq2SeqModel {
    pub fn new_random(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut params = BTreeMap::new();
        for spec in tensor_inventory(&config) {
            params.insert(spec.name.clone(), init_tensor(&spec.name, &spec.shape, seed));
        }
        Ok(Seq2SeqModel { config, params })
    }

    pub fn param(&self, name: &str) -> Option<&Tensor> {
        self.params.get(name)
    }

    pub fn param_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.params.get_mut(name)
    }

    pub fn param_names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(|s| s.as_str())
    }

    pub fn params_iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn params_iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor)> {
        self.params.iter_mut()
    }

    pub fn set_param(&mut self, name: &str, value: Tensor) -> Result<()> {
        match self.params.get_mut(name) {
            Some(slot) => {
                if slot.shape() != value.shape() {
                    return Err(Error::Incompatible(format!(
                        "tensor {name}: model shape {:?} vs {:?}",
                        slot.shape(),
                        value.shape()
                    )));
                }
                *slot = value;
                Ok(())
            }
            None => Err(Error::Incompatible(format!("no such tensor {name}"))),
        }
    }

    pub fn total_params(&self) -> usize {
        self.params.values().map(|t| t.numel()).sum()
    }

    pub fn begin_forward(&self, dropout_rng: Option<ChaCha8Rng>) -> ForwardPass {
        ForwardPass {
            graph: Graph::new(),
            param_nodes: HashMap::new(),
            dropout: self.config.dropout,
            dropout_rng,
        }
    }

    fn embed_prefix(&self, output_side: bool) -> &'static str {
        if self.config.dual_embeddings() {
            if output_side {
                "embed_out"
            } else {
                "embed_in"
            }
        } else {
            "embed"
        }
    }

    /// Token + positional + token-type(row 0) embeddings, then layer-norm.
    pub fn embed(&self, fp: &mut ForwardPass, ids: &[usize], output_side: bool) -> Result<NodeId> {
        if ids.len() > self.config.max_positions {
            return Err(Error::Length {
                len: ids.len(),
                max: self.config.max_positions,
            });
        }
        let prefix = self.embed_prefix(output_side);
        let word = fp.param(self, &format!("{prefix}/word"));
        let pos = fp.param(self, &format!("{prefix}/pos"));
        let typ = fp.param(self, &format!("{prefix}/type"));
        let ln_g = fp.param(self, &format!("{prefix}/ln_g"));
        let ln_b = fp.param(self, &format!("{prefix}/ln_b"));

        let tok = fp.graph.gather_rows(word, ids)?;
        let positions: Vec<usize> = (0..ids.len()).collect();
        let pos_e = fp.graph.gather_rows(pos, &positions)?;
        let type_e = fp.graph.gather_rows(typ, &vec![0; ids.len()])?;
        let sum = fp.graph.add_n(&[tok, pos_e, type_e])?;
        let normed = fp.graph.layer_norm(sum, ln_g, ln_b)?;
        Ok(fp.dropout(normed))
    }

    fn attention_block(
        &self,
        fp: &mut ForwardPass,
        prefix: &str,
        queries: NodeId,
        keys_values: NodeId,
        mask: &Tensor,
    ) -> Result<NodeId> {
        let h = self.config.hidden_size;
        let heads = self.config.num_heads;
        let dh = self.config.head_dim();

        let name = |p: &str| format!("{prefix}/{p}");
        let qw = fp.param(self, &name("q_w"));
        let qb = fp.param(self, &name("q_b"));
        let kw = fp.param(self, &name("k_w"));
        let kb = fp.param(self, &name("k_b"));
        let vw = fp.param(self, &name("v_w"));
        let vb = fp.param(self, &name("v_b"));
        let ow = fp.param(self, &name("o_w"));
        let ob = fp.param(self, &name("o_b"));
        let ln_g = fp.param(self, &name("ln_g"));
        let ln_b = fp.param(self, &name("ln_b"));

        let q = fp.graph.matmul(queries, qw)?;
        let q = fp.graph.add_row(q, qb)?;
        let k = fp.graph.matmul(keys_values, kw)?;
        let k = fp.graph.add_row(k, kb)?;
        let v = fp.graph.matmul(keys_values, vw)?;
        let v = fp.graph.add_row(v, vb)?;

        let mut head_outputs = Vec::with_capacity(heads);
        for head in 0..heads {
            let qh = fp.graph.slice_cols(q, head * dh, dh)?;
            let kh = fp.graph.slice_cols(k, head * dh, dh)?;
            let vh = fp.graph.slice_cols(v, head * dh, dh)?;
            let kt = fp.graph.transpose(kh);
            let scores = fp.graph.matmul(qh, kt)?;
            let scores = fp.graph.scale(scores, 1.0 / (dh as f64).sqrt());
            let scores = fp.graph.add_const(scores, mask)?;
            let weights = fp.graph.softmax_rows(scores);
            let weights = fp.dropout(weights);
            head_outputs.push(fp.graph.matmul(weights, vh)?);
        }
        let cat = fp.graph.concat_cols(&head_outputs)?;
        let out = fp.graph.matmul(cat, ow)?;
        let out = fp.graph.add_row(out, ob)?;
        let out = fp.dropout(out);
        let residual = fp.graph.add(queries, out)?;
        let _ = h;
        fp.graph.layer_norm(residual, ln_g, ln_b)
    }

    fn ffn_block(&self, fp: &mut ForwardPass, prefix: &str, x: NodeId) -> Result<NodeId> {
        let name = |p: &str| format!("{prefix}/{p}");
        let w1 = fp.param(self, &name("w1"));
        let b1 = fp.param(self, &name("b1"));
        let w2 = fp.param(self, &name("w2"));
        let b2 = fp.param(self, &name("b2"));
        let ln_g = fp.param(self, &name("ln_g"));
        let ln_b = fp.param(self, &name("ln_b"));

        let hmid = fp.graph.matmul(x, w1)?;
        let hmid = fp.graph.add_row(hmid, b1)?;
        let hmid = fp.graph.gelu(hmid);
        let out = fp.graph.matmul(hmid, w2)?;
        let out = fp.graph.add_row(out, b2)?;
        let out = fp.dropout(out);
        let residual = fp.graph.add(x, out)?;
        fp.graph.layer_norm(residual, ln_g, ln_b)
    }

    fn decoder_self_prefix(&self, layer: usize) -> String {
        if self.config.share_encoder_decoder {
            format!("encoder/layer_{layer}/self")
        } else {
            format!("decoder/layer_{layer}/self")
        }
    }

    fn decoder_ffn_prefix(&self, layer: usize) -> String {
        if self.config.share_encoder_decoder {
            format!("encoder/layer_{layer}/ffn")
        } else {
            format!("decoder/layer_{layer}/ffn")
        }
    }

    /// Bidirectional encoder over the unmasked source positions.
    pub fn encoder_forward(
        &self,
        fp: &mut ForwardPass,
        source_ids: &[usize],
        pad_mask: &[bool],
    ) -> Result<NodeId> {
        if self.config.decoder_only {
            return Err(Error::Scheme("decoder-only model has no encoder".into()));
        }
        if pad_mask.len() != source_ids.len() {
            return Err(Error::Shape("pad mask length mismatch".into()));
        }
        if !pad_mask.iter().any(|&b| b) {
            return Err(Error::DegenerateBatch("all-pad source".into()));
        }
        let mut x = self.embed(fp, source_ids, false)?;
        let len = source_ids.len();
        let mask = attention_mask(len, |_, j| pad_mask[j], len);
        for layer in 0..self.config.num_layers {
            x = self.attention_block(fp, &format!("encoder/layer_{layer}/self"), x, x, &mask)?;
            x = self.ffn_block(fp, &format!("encoder/layer_{layer}/ffn"), x)?;
        }
        Ok(x)
    }

    /// Causal decoder producing logits over the output vocabulary.
    /// `memory` must be None exactly when the model is decoder-only.
    pub fn decoder_forward(
        &self,
        fp: &mut ForwardPass,
        target_ids: &[usize],
        memory: Option<NodeId>,
        source_pad_mask: Option<&[bool]>,
    ) -> Result<NodeId> {
        match (self.config.decoder_only, memory.is_some()) {
            (true, true) => {
                return Err(Error::Scheme("decoder-only model given encoder memory".into()))
            }
            (false, false) => {
                return Err(Error::Scheme("encoder-decoder model needs memory".into()))
            }
            _ => {}
        }
        let t_len = target_ids.len();
        let mut x = self.embed(fp, target_ids, true)?;
        let causal = attention_mask(t_len, |i, j| j <= i, t_len);

        let cross_mask = match (memory, source_pad_mask) {
            (Some(mem), Some(mask)) => {
                let s_len = fp.graph.value(mem).rows();
                if mask.len() != s_len {
                    return Err(Error::Shape(format!(
                        "memory length {s_len} vs source mask length {}",
                        mask.len()
                    )));
                }
                Some(attention_mask(t_len, |_, j| mask[j], s_len))
            }
            (Some(mem), None) => {
                let s_len = fp.graph.value(mem).rows();
                Some(attention_mask(t_len, |_, _| true, s_len))
            }
            (None, _) => None,
        };

        for layer in 0..self.config.num_layers {
            x = self.attention_block(fp, &self.decoder_self_prefix(layer), x, x, &causal)?;
            if let Some(mem) = memory {
                x = self.attention_block(
                    fp,
                    &format!("decoder/layer_{layer}/cross"),
                    x,
                    mem,
                    cross_mask.as_ref().unwrap(),
                )?;
            }
            x = self.ffn_block(fp, &self.decoder_ffn_prefix(layer), x)?;
        }

        // output projection: transpose of the token embedding when tied
        if self.config.tie_output_to_embedding {
            let prefix = self.embed_prefix(true);
            let word = fp.param(self, &format!("{prefix}/word"));
            let wt = fp.graph.transpose(word);
            fp.graph.matmul(x, wt)
        } else {
            let w = fp.param(self, "output/w");
            let b = fp.param(self, "output/b");
            let logits = fp.graph.matmul(x, w)?;
            fp.graph.add_row(logits, b)
        }
    }

    /// Convenience eval-mode logits for a (source, target-prefix) pair.
    /// For decoder-only models the source is consumed as a stream prefix.
    pub fn logits_for_prefix(
        &self,
        source_ids: &[usize],
        target_prefix: &[usize],
    ) -> Result<Tensor> {
        let mut fp = self.begin_forward(None);
        let logits = if self.config.decoder_only {
            let mut stream = source_ids.to_vec();
            stream.extend_from_slice(target_prefix);
            self.decoder_forward(&mut fp, &stream, None, None)?
        } else {
            let pad_mask = vec![true; source_ids.len()];
            let memory = self.encoder_forward(&mut fp, source_ids, &pad_mask)?;
            self.decoder_forward(&mut fp, target_prefix, Some(memory), Some(&pad_mask))?
        };
        Ok(fp.graph.value(logits).clone())
    }
}

/// One teacher-forcing example: `target_in` feeds the decoder, `target_out`
/// is predicted, `loss_mask` excludes padding from the mean.
#[derive(Debug, Clone)]
pub struct LossItem {
    pub source_ids: Vec<usize>,
    pub source_mask: Vec<bool>,
    pub target_in: Vec<usize>,
    pub target_out: Vec<usize>,
    pub loss_mask: Vec<bool>,
}

impl LossItem {
    /// Build from raw (source, target) token ids, adding BOS/EOS.
    pub fn teacher_forced(source: &[usize], target: &[usize], bos: usize, eos: usize) -> Self {
        let mut full = Vec::with_capacity(target.len() + 2);
        full.push(bos);
        full.extend_from_slice(target);
        full.push(eos);
        LossItem {
            source_ids: source.to_vec(),
            source_mask: vec![true; source.len()],
            target_in: full[..full.len() - 1].to_vec(),
            target_out: full[1..].to_vec(),
            loss_mask: vec![true; full.len() - 1],
        }
    }

    /// Decoder-only stream: source tokens, then BOS, then the target;
    /// the loss covers only the positions that predict the target and EOS.
    pub fn decoder_only_stream(source: &[usize], target: &[usize], bos: usize, eos: usize) -> Self {
        let mut stream = source.to_vec();
        stream.push(bos);
        let prefix_len = stream.len();
        stream.extend_from_slice(target);
        stream.push(eos);
        let target_in = stream[..stream.len() - 1].to_vec();
        let target_out = stream[1..].to_vec();
        let mut loss_mask = vec![false; target_out.len()];
        for m in loss_mask.iter_mut().skip(prefix_len - 1) {
            *m = true;
        }
        LossItem {
            source_ids: Vec::new(),
            source_mask: Vec::new(),
            target_in,
            target_out,
            loss_mask,
        }
    }
}

/// Mean teacher-forced cross-entropy over a batch of items. Returns the
/// forward pass (for backward) and the scalar loss node.
pub fn lm_loss(
    model: &Seq2SeqModel,
    items: &[LossItem],
    dropout_rng: Option<ChaCha8Rng>,
) -> Result<(ForwardPass, NodeId)> {
    if items.is_empty() {
        return Err(Error::DegenerateBatch("empty batch".into()));
    }
    let mut fp = model.begin_forward(dropout_rng);
    let mut sums = Vec::with_capacity(items.len());
    let mut total_unmasked = 0usize;
    for item in items {
        let logits = if model.config.decoder_only {
            model.decoder_forward(&mut fp, &item.target_in, None, None)?
        } else {
            let memory = model.encoder_forward(&mut fp, &item.source_ids, &item.source_mask)?;
            model.decoder_forward(&mut fp, &item.target_in, Some(memory), Some(&item.source_mask))?
        };
        let sum = fp
            .graph
            .cross_entropy_sum(logits, &item.target_out, &item.loss_mask)?;
        total_unmasked += item.loss_mask.iter().filter(|&&b| b).count();
        sums.push(sum);
    }
    let total = fp.graph.add_n(&sums)?;
    let loss = fp.graph.scale(total, 1.0 / total_unmasked as f64);
    let value = fp.graph.value(loss).data()[0];
    if !value.is_finite() {
        return Err(Error::NonFinite("loss".into()));
    }
    Ok((fp, loss))
}
