//! Frozen cross-modal transformer stand-in.
//!
//! The language stream attends to the (fixed) video stream in each block:
//!
//! ```text
//! Q = H_L·W_q + b_q    K = H_V·W_k + b_k    V = H_V·W_v + b_v
//! X = MultiHead(Q, K, V)
//! P = LN(X + H_L)
//! O = W_2·GELU(W_1·P + b_1) + b_2
//! H_L' = LN(Adapt(O) + P)        H_V' = H_V
//! ```
//!
//! Frame `i` is scored as `⟨H_V⁰_i·W_head, mean(H_L^M)⟩ + b_head`.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::adapters::{
    init_lora_patch, init_plain_adapter, init_read_adapter, lora_weight, plain_adapter_forward, read_forward,
    CellKind, LoraPatch, LoraTarget, PlainAdapter, PromptTokens, ReadAdapter, ReadInit,
};
use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::params::{Bound, Owner, ParamId, ParamRole, ParamStore};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub d: usize,
    pub num_blocks: usize,
    pub num_heads: usize,
    pub d_in_video: usize,
    pub d_in_lang: usize,
    pub adapters_per_block: usize,
    /// Hidden width of the feedforward layer as a multiple of `d`.
    pub ffn_mult: usize,
    /// Rows in each positional table.
    pub max_len: usize,
    pub ln_eps: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d: 64,
            num_blocks: 4,
            num_heads: 4,
            d_in_video: 32,
            d_in_lang: 32,
            adapters_per_block: 1,
            ffn_mult: 4,
            max_len: 64,
            ln_eps: 1e-5,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let extents = [
            ("d", self.d),
            ("num_blocks", self.num_blocks),
            ("num_heads", self.num_heads),
            ("d_in_video", self.d_in_video),
            ("d_in_lang", self.d_in_lang),
            ("adapters_per_block", self.adapters_per_block),
            ("ffn_mult", self.ffn_mult),
            ("max_len", self.max_len),
        ];
        for (name, v) in extents {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if !self.d.is_multiple_of(self.num_heads) {
            return Err(Error::Config(format!(
                "d={} is not divisible by num_heads={}",
                self.d, self.num_heads
            )));
        }
        if !(self.ln_eps >= 0.0) {
            return Err(Error::Config(format!("ln_eps must be >= 0, got {}", self.ln_eps)));
        }
        Ok(())
    }

    pub fn head_width(&self) -> usize {
        self.d / self.num_heads
    }
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
}

#[derive(Clone, Debug)]
pub struct Norm {
    pub gain: ParamId,
    pub bias: ParamId,
}

#[derive(Clone, Debug)]
pub struct Block {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub norm1: Norm,
    pub ffn_in: Linear,
    pub ffn_out: Linear,
    pub norm2: Norm,
}

impl Block {
    pub fn param_ids(&self) -> Vec<ParamId> {
        let lin = |l: &Linear| [l.w, l.b];
        let norm = |n: &Norm| [n.gain, n.bias];
        let mut ids = Vec::with_capacity(14);
        ids.extend(lin(&self.query));
        ids.extend(lin(&self.key));
        ids.extend(lin(&self.value));
        ids.extend(norm(&self.norm1));
        ids.extend(lin(&self.ffn_in));
        ids.extend(lin(&self.ffn_out));
        ids.extend(norm(&self.norm2));
        ids
    }
}

#[derive(Clone, Debug)]
pub struct Embedding {
    pub proj: Linear,
    pub pos: ParamId,
}

/// Strategy modules grafted onto the backbone.
#[derive(Clone, Debug, Default)]
pub enum Attachment {
    #[default]
    None,
    /// `adapters_per_block` READ adapters chained on each block's `O`.
    Read(Vec<Vec<ReadAdapter>>),
    /// Two tokenwise adapters per block: after attention and after the
    /// feedforward layer.
    Adapter(Vec<[PlainAdapter; 2]>),
    Lora(Vec<Vec<LoraPatch>>),
    Prompt(PromptTokens),
}

impl Attachment {
    pub fn kind_name(&self) -> &'static str {
        match self {
            Attachment::None => "none",
            Attachment::Read(_) => "read",
            Attachment::Adapter(_) => "adapter",
            Attachment::Lora(_) => "lora",
            Attachment::Prompt(_) => "prompt",
        }
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        match self {
            Attachment::None => vec![],
            Attachment::Read(blocks) => blocks.iter().flatten().flat_map(|a| a.param_ids()).collect(),
            Attachment::Adapter(blocks) => blocks.iter().flatten().flat_map(|a| a.param_ids()).collect(),
            Attachment::Lora(blocks) => blocks.iter().flatten().flat_map(|p| p.param_ids()).collect(),
            Attachment::Prompt(p) => p.param_ids(),
        }
    }

    fn prompt_len(&self) -> usize {
        match self {
            Attachment::Prompt(p) => p.len,
            _ => 0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Backbone {
    pub cfg: ModelConfig,
    pub store: ParamStore,
    pub video_embed: Embedding,
    pub lang_embed: Embedding,
    pub blocks: Vec<Block>,
    pub head: Linear,
    pub attachment: Attachment,
}

/// Tape handles produced by one forward pass.
#[derive(Clone, Debug)]
pub struct ForwardVars {
    /// `N_V×1` frame logits.
    pub logits: Var,
    /// Per block, the video and language outputs (prompt rows excluded).
    pub pairs: Vec<(Var, Var)>,
}

#[derive(Clone, Debug)]
pub struct BlockOut {
    pub hl: Var,
    /// One `N_L×N_V` softmax matrix per head.
    pub attention: Vec<Var>,
}

fn normal(shape: &[usize], std: f64, rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::randn(shape, std, rng)
}

impl Backbone {
    /// Randomly initialized backbone with every parameter trainable.
    pub fn new(cfg: ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let d = cfg.d;
        let hidden = cfg.ffn_mult * d;

        let linear = |store: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, fan_in: usize, fan_out: usize| {
            let w = store.add(
                format!("{name}.w"),
                normal(&[fan_in, fan_out], (1.0 / fan_in as f64).sqrt(), rng),
                ParamRole::Weight,
                Owner::Backbone,
            );
            let b = store.add(format!("{name}.b"), Tensor::zeros(&[fan_out]), ParamRole::Bias, Owner::Backbone);
            Linear { w, b }
        };
        let norm = |store: &mut ParamStore, name: &str| Norm {
            gain: store.add(format!("{name}.gain"), Tensor::full(&[d], 1.0), ParamRole::NormGain, Owner::Backbone),
            bias: store.add(format!("{name}.bias"), Tensor::zeros(&[d]), ParamRole::NormBias, Owner::Backbone),
        };

        let embedding = |store: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, d_in: usize| {
            let proj = linear(store, rng, &format!("{name}.proj"), d_in, d);
            let pos = store.add(
                format!("{name}.pos"),
                normal(&[cfg.max_len, d], 0.02, rng),
                ParamRole::Positional,
                Owner::Backbone,
            );
            Embedding { proj, pos }
        };
        let video_embed = embedding(&mut store, &mut rng, "embed.video", cfg.d_in_video);
        let lang_embed = embedding(&mut store, &mut rng, "embed.lang", cfg.d_in_lang);

        let mut blocks = Vec::with_capacity(cfg.num_blocks);
        for m in 0..cfg.num_blocks {
            let p = format!("block{m}");
            blocks.push(Block {
                query: linear(&mut store, &mut rng, &format!("{p}.query"), d, d),
                key: linear(&mut store, &mut rng, &format!("{p}.key"), d, d),
                value: linear(&mut store, &mut rng, &format!("{p}.value"), d, d),
                norm1: norm(&mut store, &format!("{p}.norm1")),
                ffn_in: linear(&mut store, &mut rng, &format!("{p}.ffn_in"), d, hidden),
                ffn_out: linear(&mut store, &mut rng, &format!("{p}.ffn_out"), hidden, d),
                norm2: norm(&mut store, &format!("{p}.norm2")),
            });
        }
        let head_w = store.add(
            "head.w",
            normal(&[d, d], (1.0 / d as f64).sqrt(), &mut rng),
            ParamRole::Weight,
            Owner::Backbone,
        );
        let head_b = store.add("head.b", Tensor::zeros(&[1]), ParamRole::Bias, Owner::Backbone);

        Ok(Self {
            cfg,
            store,
            video_embed,
            lang_embed,
            blocks,
            head: Linear { w: head_w, b: head_b },
            attachment: Attachment::None,
        })
    }

    pub fn backbone_ids(&self) -> Vec<ParamId> {
        self.store
            .iter()
            .filter(|(_, p)| p.owner == Owner::Backbone)
            .map(|(id, _)| id)
            .collect()
    }

    pub fn head_ids(&self) -> Vec<ParamId> {
        vec![self.head.w, self.head.b]
    }

    pub fn freeze_backbone(&mut self) {
        for id in self.backbone_ids() {
            self.store.get_mut(id).frozen = true;
        }
    }

    pub fn total_params(&self) -> usize {
        self.store.numel()
    }

    /// SHA-256 over names, shapes and bytes of every backbone parameter.
    pub fn backbone_hash(&self) -> String {
        self.backbone_hash_excluding(&[])
    }

    /// As [`Self::backbone_hash`], skipping parameters set in `exclude`.
    pub fn backbone_hash_excluding(&self, exclude: &[bool]) -> String {
        let mut h = Sha256::new();
        let skipped = |i: usize| exclude.get(i).copied().unwrap_or(false);
        for (id, p) in self.store.iter() {
            if p.owner != Owner::Backbone || skipped(id.index()) {
                continue;
            }
            h.update(p.name.as_bytes());
            h.update([0u8]);
            for &e in p.value.shape() {
                h.update((e as u64).to_le_bytes());
            }
            for &v in p.value.data() {
                h.update(v.to_le_bytes());
            }
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }

    fn ensure_unattached(&self) -> Result<()> {
        match self.attachment {
            Attachment::None => Ok(()),
            ref a => Err(Error::Config(format!(
                "backbone already carries a {} attachment",
                a.kind_name()
            ))),
        }
    }

    pub fn attach_read(&mut self, k: usize, kind: CellKind, init: ReadInit, seed: u64) -> Result<()> {
        self.ensure_unattached()?;
        let mut all = Vec::with_capacity(self.cfg.num_blocks);
        for m in 0..self.cfg.num_blocks {
            let mut per_block = Vec::with_capacity(self.cfg.adapters_per_block);
            for j in 0..self.cfg.adapters_per_block {
                let a = ReadAdapter::new(&mut self.store, &format!("block{m}.read{j}"), self.cfg.d, k, kind)?;
                init_read_adapter(&mut self.store, &a, seed_for(seed, m, j), init);
                per_block.push(a);
            }
            all.push(per_block);
        }
        self.attachment = Attachment::Read(all);
        Ok(())
    }

    pub fn attach_adapter(&mut self, k: usize, seed: u64) -> Result<()> {
        self.ensure_unattached()?;
        let mut all = Vec::with_capacity(self.cfg.num_blocks);
        for m in 0..self.cfg.num_blocks {
            let attn = PlainAdapter::new(&mut self.store, &format!("block{m}.adapter_attn"), self.cfg.d, k)?;
            let ffn = PlainAdapter::new(&mut self.store, &format!("block{m}.adapter_ffn"), self.cfg.d, k)?;
            init_plain_adapter(&mut self.store, &attn, seed_for(seed, m, 0));
            init_plain_adapter(&mut self.store, &ffn, seed_for(seed, m, 1));
            all.push([attn, ffn]);
        }
        self.attachment = Attachment::Adapter(all);
        Ok(())
    }

    pub fn attach_lora(&mut self, rank: usize, targets: &[LoraTarget], seed: u64) -> Result<()> {
        self.ensure_unattached()?;
        if targets.is_empty() {
            return Err(Error::Config("LoRA needs at least one target projection".into()));
        }
        let mut all = Vec::with_capacity(self.cfg.num_blocks);
        for m in 0..self.cfg.num_blocks {
            let mut per_block = Vec::with_capacity(targets.len());
            for (j, &t) in targets.iter().enumerate() {
                let name = match t {
                    LoraTarget::Query => "query",
                    LoraTarget::Key => "key",
                    LoraTarget::Value => "value",
                };
                let p = LoraPatch::new(&mut self.store, &format!("block{m}.{name}"), self.cfg.d, rank, t)?;
                init_lora_patch(&mut self.store, &p, seed_for(seed, m, j));
                per_block.push(p);
            }
            all.push(per_block);
        }
        self.attachment = Attachment::Lora(all);
        Ok(())
    }

    pub fn attach_prompt(&mut self, len: usize, seed: u64) -> Result<()> {
        self.ensure_unattached()?;
        if len + 1 > self.cfg.max_len {
            return Err(Error::Config(format!("prompt length {len} leaves no room in max_len")));
        }
        let p = PromptTokens::new(&mut self.store, "prompt", len, self.cfg.d)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        *self.store.value_mut(p.video) = normal(&[len, self.cfg.d], 0.02, &mut rng);
        *self.store.value_mut(p.lang) = normal(&[len, self.cfg.d], 0.02, &mut rng);
        self.attachment = Attachment::Prompt(p);
        Ok(())
    }

    fn embed_one(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        emb: &Embedding,
        x: &Tensor,
        d_in: usize,
        what: &str,
    ) -> Result<Var> {
        if !x.is_matrix() || x.rows() == 0 {
            return Err(Error::Contract(format!("{what} features must be a nonempty matrix")));
        }
        if x.cols() != d_in {
            return Err(Error::dim("embed", x.shape(), &[x.rows(), d_in]));
        }
        let n = x.rows();
        if n > self.cfg.max_len {
            return Err(Error::dim("embed", x.shape(), &[self.cfg.max_len, d_in]));
        }
        let xv = tape.constant(x.clone());
        let h = tape.matmul(xv, bound[emb.proj.w])?;
        let h = tape.add_row(h, bound[emb.proj.b])?;
        let pos = tape.slice_rows(bound[emb.pos], 0, n)?;
        tape.add(h, pos)
    }

    /// `(H_V⁰, H_L⁰)`: linear projections plus learned positions.
    pub fn embed(&self, tape: &mut Tape, bound: &Bound, video: &Tensor, lang: &Tensor) -> Result<(Var, Var)> {
        let hv = self.embed_one(tape, bound, &self.video_embed, video, self.cfg.d_in_video, "video")?;
        let hl = self.embed_one(tape, bound, &self.lang_embed, lang, self.cfg.d_in_lang, "language")?;
        Ok((hv, hl))
    }

    fn projection(&self, tape: &mut Tape, bound: &Bound, m: usize, lin: &Linear, target: LoraTarget) -> Result<Var> {
        let w = bound[lin.w];
        if let Attachment::Lora(blocks) = &self.attachment {
            if let Some(p) = blocks[m].iter().find(|p| p.target == target) {
                return lora_weight(tape, bound, w, p);
            }
        }
        Ok(w)
    }

    /// Block `m` applied to language `hl` attending to video `hv`.
    pub fn cross_attention_block(&self, tape: &mut Tape, bound: &Bound, m: usize, hl: Var, hv: Var) -> Result<BlockOut> {
        let block = &self.blocks[m];
        let d = self.cfg.d;
        for v in [hl, hv] {
            let s = tape.value(v).shape();
            if s.len() != 2 || s[1] != d {
                return Err(Error::dim("cross_attention_block", s, &[0, d]));
            }
        }
        let wq = self.projection(tape, bound, m, &block.query, LoraTarget::Query)?;
        let wk = self.projection(tape, bound, m, &block.key, LoraTarget::Key)?;
        let wv = self.projection(tape, bound, m, &block.value, LoraTarget::Value)?;
        let q = tape.matmul(hl, wq)?;
        let q = tape.add_row(q, bound[block.query.b])?;
        let k = tape.matmul(hv, wk)?;
        let k = tape.add_row(k, bound[block.key.b])?;
        let v = tape.matmul(hv, wv)?;
        let v = tape.add_row(v, bound[block.value.b])?;

        let dh = self.cfg.head_width();
        let scale = 1.0 / (dh as f64).sqrt();
        let mut heads = Vec::with_capacity(self.cfg.num_heads);
        let mut attention = Vec::with_capacity(self.cfg.num_heads);
        for h in 0..self.cfg.num_heads {
            let (qh, kh, vh) = if self.cfg.num_heads == 1 {
                (q, k, v)
            } else {
                (
                    tape.slice_cols(q, h * dh, dh)?,
                    tape.slice_cols(k, h * dh, dh)?,
                    tape.slice_cols(v, h * dh, dh)?,
                )
            };
            let kt = tape.transpose(kh)?;
            let s = tape.matmul(qh, kt)?;
            let s = tape.scale(s, scale)?;
            let a = tape.softmax_rows(s)?;
            attention.push(a);
            heads.push(tape.matmul(a, vh)?);
        }
        let mut x = if heads.len() == 1 { heads[0] } else { tape.concat_cols(&heads)? };

        if let Attachment::Adapter(blocks) = &self.attachment {
            x = plain_adapter_forward(tape, bound, &blocks[m][0], x)?;
        }
        let res = tape.add(x, hl)?;
        let p = tape.layer_norm(res, bound[block.norm1.gain], bound[block.norm1.bias], self.cfg.ln_eps)?;

        let f = tape.matmul(p, bound[block.ffn_in.w])?;
        let f = tape.add_row(f, bound[block.ffn_in.b])?;
        let f = tape.gelu(f)?;
        let o = tape.matmul(f, bound[block.ffn_out.w])?;
        let mut o = tape.add_row(o, bound[block.ffn_out.b])?;

        match &self.attachment {
            Attachment::Read(blocks) => {
                for a in &blocks[m] {
                    o = read_forward(tape, bound, a, o)?;
                }
            }
            Attachment::Adapter(blocks) => {
                o = plain_adapter_forward(tape, bound, &blocks[m][1], o)?;
            }
            _ => {}
        }
        let res = tape.add(o, p)?;
        let hl = tape.layer_norm(res, bound[block.norm2.gain], bound[block.norm2.bias], self.cfg.ln_eps)?;
        Ok(BlockOut { hl, attention })
    }

    /// Records the full forward pass on `tape`.
    pub fn forward_vars(&self, tape: &mut Tape, bound: &Bound, video: &Tensor, lang: &Tensor) -> Result<ForwardVars> {
        let (hv0, hl0) = self.embed(tape, bound, video, lang)?;
        let n_p = self.attachment.prompt_len();
        let (mut hv, mut hl) = (hv0, hl0);
        if let Attachment::Prompt(p) = &self.attachment {
            hv = tape.concat_rows(&[bound[p.video], hv0])?;
            hl = tape.concat_rows(&[bound[p.lang], hl0])?;
        }
        let (n_v, n_l) = (video.rows(), lang.rows());
        let mut pairs = Vec::with_capacity(self.blocks.len());
        for m in 0..self.blocks.len() {
            hl = self.cross_attention_block(tape, bound, m, hl, hv)?.hl;
            if n_p == 0 {
                pairs.push((hv, hl));
            } else {
                let v = tape.slice_rows(hv, n_p, n_v)?;
                let l = tape.slice_rows(hl, n_p, n_l)?;
                pairs.push((v, l));
            }
        }
        let pooled = tape.mean_rows(hl)?;
        let frames = tape.matmul(hv0, bound[self.head.w])?;
        let pt = tape.transpose(pooled)?;
        let logits = tape.matmul(frames, pt)?;
        let logits = tape.add_row(logits, bound[self.head.b])?;
        Ok(ForwardVars { logits, pairs })
    }

    /// Frame logits with no gradient bookkeeping.
    pub fn forward(&self, video: &Tensor, lang: &Tensor) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let bound = self.store.bind(&mut tape, None);
        let out = self.forward_vars(&mut tape, &bound, video, lang)?;
        Ok(tape.value(out.logits).data().to_vec())
    }

    /// Logits plus every block's `(H_V, H_L)` values.
    pub fn forward_trace(&self, video: &Tensor, lang: &Tensor) -> Result<(Vec<f64>, Vec<(Tensor, Tensor)>)> {
        let mut tape = Tape::new();
        let bound = self.store.bind(&mut tape, None);
        let out = self.forward_vars(&mut tape, &bound, video, lang)?;
        let pairs = out
            .pairs
            .iter()
            .map(|&(v, l)| (tape.value(v).clone(), tape.value(l).clone()))
            .collect();
        Ok((tape.value(out.logits).data().to_vec(), pairs))
    }
}

fn seed_for(seed: u64, block: usize, slot: usize) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15)
        .wrapping_add((block as u64) << 16)
        .wrapping_add(slot as u64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::gelu;

    fn small_cfg(d: usize, blocks: usize, heads: usize) -> ModelConfig {
        ModelConfig {
            d,
            num_blocks: blocks,
            num_heads: heads,
            d_in_video: 3,
            d_in_lang: 2,
            ..ModelConfig::default()
        }
    }

    fn randomize_all(model: &mut Backbone, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let ids: Vec<_> = model.store.ids().collect();
        for id in ids {
            let shape = model.store.value(id).shape().to_vec();
            *model.store.value_mut(id) = Tensor::randn(&shape, 0.4, &mut rng);
        }
    }

    fn inputs(cfg: &ModelConfig, n_v: usize, n_l: usize, seed: u64) -> (Tensor, Tensor) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (
            Tensor::randn(&[n_v, cfg.d_in_video], 1.0, &mut rng),
            Tensor::randn(&[n_l, cfg.d_in_lang], 1.0, &mut rng),
        )
    }

    #[test]
    fn config_validation() {
        assert!(ModelConfig::default().validate().is_ok());
        let bad = ModelConfig {
            d: 10,
            num_heads: 4,
            ..ModelConfig::default()
        };
        assert!(matches!(bad.validate(), Err(Error::Config(_))));
        assert!(Backbone::new(ModelConfig { num_blocks: 0, ..ModelConfig::default() }, 0).is_err());
    }

    #[test]
    fn embed_examples() {
        let cfg = ModelConfig::default();
        let mut model = Backbone::new(cfg.clone(), 1).unwrap();
        let mut tape = Tape::new();
        let bound = model.store.bind(&mut tape, None);
        let (v, l) = inputs(&cfg, 12, 5, 0);
        let (hv, hl) = model.embed(&mut tape, &bound, &v, &l).unwrap();
        assert_eq!(tape.value(hv).shape(), &[12, 64]);
        assert_eq!(tape.value(hl).shape(), &[5, 64]);
        let wrong = Tensor::zeros(&[3, 7]);
        assert!(matches!(
            model.embed(&mut tape, &bound, &wrong, &l),
            Err(Error::Dimension { .. })
        ));

        for id in [model.video_embed.pos, model.lang_embed.pos] {
            let shape = model.store.value(id).shape().to_vec();
            *model.store.value_mut(id) = Tensor::zeros(&shape);
        }
        let mut tape = Tape::new();
        let bound = model.store.bind(&mut tape, None);
        let (hv, hl) = model
            .embed(&mut tape, &bound, &Tensor::zeros(&[4, 32]), &Tensor::zeros(&[2, 32]))
            .unwrap();
        assert!(tape.value(hv).data().iter().chain(tape.value(hl).data()).all(|&x| x == 0.0));

        // 1×1 input, projection picks out the single feature on column 0
        let cfg1 = ModelConfig {
            d: 4,
            num_heads: 1,
            num_blocks: 1,
            d_in_video: 1,
            d_in_lang: 1,
            ..ModelConfig::default()
        };
        let mut m1 = Backbone::new(cfg1, 2).unwrap();
        *m1.store.value_mut(m1.video_embed.proj.w) = Tensor::matrix(&[[1.0, 0.0, 0.0, 0.0]]);
        let mut tape = Tape::new();
        let bound = m1.store.bind(&mut tape, None);
        let (hv, _) = m1
            .embed(&mut tape, &bound, &Tensor::matrix(&[[2.5]]), &Tensor::matrix(&[[0.0]]))
            .unwrap();
        let pos = m1.store.value(m1.video_embed.pos).row(0).to_vec();
        let expected = [pos[0] + 2.5, pos[1], pos[2], pos[3]];
        assert_eq!(tape.value(hv).data(), &expected);
    }

    fn naive_mm(a: &[Vec<f64>], b: &[Vec<f64>]) -> Vec<Vec<f64>> {
        let n = b[0].len();
        a.iter()
            .map(|row| (0..n).map(|j| row.iter().zip(b).map(|(x, brow)| x * brow[j]).sum()).collect())
            .collect()
    }

    fn rows_of(t: &Tensor) -> Vec<Vec<f64>> {
        (0..t.rows()).map(|i| t.row(i).to_vec()).collect()
    }

    fn ln_row(x: &[f64], g: &[f64], b: &[f64], eps: f64) -> Vec<f64> {
        let n = x.len() as f64;
        let mu = x.iter().sum::<f64>() / n;
        let var = x.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / n;
        x.iter()
            .zip(g.iter().zip(b))
            .map(|(v, (g, b))| g * (v - mu) / (var + eps).sqrt() + b)
            .collect()
    }

    #[test]
    fn single_head_block_matches_flat_oracle() {
        let cfg = small_cfg(4, 1, 1);
        let mut model = Backbone::new(cfg.clone(), 3).unwrap();
        randomize_all(&mut model, 17);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let hv = Tensor::randn(&[3, 4], 1.0, &mut rng);
        let hl = Tensor::randn(&[2, 4], 1.0, &mut rng);

        let mut tape = Tape::new();
        let bound = model.store.bind(&mut tape, None);
        let (hvv, hlv) = (tape.constant(hv.clone()), tape.constant(hl.clone()));
        let out = model.cross_attention_block(&mut tape, &bound, 0, hlv, hvv).unwrap();
        let got = tape.value(out.hl).clone();

        let b = &model.blocks[0];
        let val = |id| model.store.value(id).clone();
        let lin = |x: &[Vec<f64>], l: &Linear| -> Vec<Vec<f64>> {
            let w = rows_of(&val(l.w));
            let bias = val(l.b).data().to_vec();
            naive_mm(x, &w)
                .into_iter()
                .map(|r| r.iter().zip(&bias).map(|(a, c)| a + c).collect())
                .collect()
        };
        let (hv_r, hl_r) = (rows_of(&hv), rows_of(&hl));
        let q = lin(&hl_r, &b.query);
        let k = lin(&hv_r, &b.key);
        let v = lin(&hv_r, &b.value);
        let mut expected = Vec::new();
        for (i, qi) in q.iter().enumerate() {
            let logits: Vec<f64> = k
                .iter()
                .map(|kj| qi.iter().zip(kj).map(|(a, c)| a * c).sum::<f64>() / 2.0)
                .collect();
            let mx = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = logits.iter().map(|l| (l - mx).exp()).collect();
            let z: f64 = e.iter().sum();
            let x: Vec<f64> = (0..4).map(|c| e.iter().zip(&v).map(|(w, vr)| w / z * vr[c]).sum()).collect();
            let pre: Vec<f64> = x.iter().zip(&hl_r[i]).map(|(a, c)| a + c).collect();
            let p = ln_row(&pre, val(b.norm1.gain).data(), val(b.norm1.bias).data(), cfg.ln_eps);
            let f: Vec<f64> = lin(std::slice::from_ref(&p), &b.ffn_in)[0].iter().map(|&t| gelu(t)).collect();
            let o = &lin(&[f], &b.ffn_out)[0];
            let pre: Vec<f64> = o.iter().zip(&p).map(|(a, c)| a + c).collect();
            expected.extend(ln_row(&pre, val(b.norm2.gain).data(), val(b.norm2.bias).data(), cfg.ln_eps));
        }
        for (a, e) in got.data().iter().zip(&expected) {
            assert!((a - e).abs() < 1e-12, "{a} vs {e}");
        }
    }

    #[test]
    fn singleton_video_attends_fully() {
        let cfg = small_cfg(8, 1, 2);
        let mut model = Backbone::new(cfg, 4).unwrap();
        randomize_all(&mut model, 9);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut tape = Tape::new();
        let bound = model.store.bind(&mut tape, None);
        let hv = tape.constant(Tensor::randn(&[1, 8], 1.0, &mut rng));
        let hl = tape.constant(Tensor::randn(&[3, 8], 1.0, &mut rng));
        let out = model.cross_attention_block(&mut tape, &bound, 0, hl, hv).unwrap();
        for a in out.attention {
            assert!(tape.value(a).data().iter().all(|&w| w == 1.0));
        }
    }

    #[test]
    fn attention_rows_are_distributions() {
        let cfg = ModelConfig::default();
        let mut model = Backbone::new(cfg.clone(), 5).unwrap();
        randomize_all(&mut model, 2);
        let mut tape = Tape::new();
        let bound = model.store.bind(&mut tape, None);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let hv = tape.constant(Tensor::randn(&[10, 64], 1.0, &mut rng));
        let hl = tape.constant(Tensor::randn(&[5, 64], 1.0, &mut rng));
        let out = model.cross_attention_block(&mut tape, &bound, 0, hl, hv).unwrap();
        assert_eq!(out.attention.len(), 4);
        for a in out.attention {
            let t = tape.value(a);
            for i in 0..t.rows() {
                assert!((t.row(i).iter().sum::<f64>() - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn video_stream_is_untouched_by_blocks() {
        let cfg = ModelConfig::default();
        let model = Backbone::new(cfg.clone(), 6).unwrap();
        let (v, l) = inputs(&cfg, 9, 4, 1);
        let (_, pairs) = model.forward_trace(&v, &l).unwrap();
        assert_eq!(pairs.len(), 4);
        for w in pairs.windows(2) {
            assert!(w[0].0.bitwise_eq(&w[1].0));
        }
    }

    #[test]
    fn forward_shape_and_duplicate_frames() {
        let cfg = ModelConfig::default();
        let model = Backbone::new(cfg.clone(), 7).unwrap();
        let (v, l) = inputs(&cfg, 6, 4, 2);
        let logits = model.forward(&v, &l).unwrap();
        assert_eq!(logits.len(), 6);

        // duplicate frame features, with positions made equal too
        let mut dup = Backbone::new(cfg.clone(), 7).unwrap();
        let pos = dup.video_embed.pos;
        let row0 = dup.store.value(pos).row(0).to_vec();
        let mut table = dup.store.value(pos).clone();
        for i in 0..cfg.max_len {
            table.data_mut()[i * cfg.d..(i + 1) * cfg.d].copy_from_slice(&row0);
        }
        *dup.store.value_mut(pos) = table;
        let mut v2 = v.clone();
        let r0 = v2.row(0).to_vec();
        v2.data_mut()[cfg.d_in_video..2 * cfg.d_in_video].copy_from_slice(&r0);
        let logits = dup.forward(&v2, &l).unwrap();
        assert_eq!(logits[0], logits[1]);
    }

    #[test]
    fn zero_adapters_reproduce_frozen_logits() {
        let cfg = ModelConfig::default();
        let base = Backbone::new(cfg.clone(), 8).unwrap();
        let samples: Vec<_> = (0..5).map(|s| inputs(&cfg, 8 + s as usize, 4, s)).collect();
        let reference: Vec<_> = samples.iter().map(|(v, l)| base.forward(v, l).unwrap()).collect();

        let mut with_read = base.clone();
        with_read.attach_read(4, CellKind::Gru, ReadInit::Zero, 1).unwrap();
        let mut with_plain = base.clone();
        with_plain.attach_adapter(4, 1).unwrap();
        let mut with_lora = base.clone();
        with_lora.attach_lora(4, &[LoraTarget::Query, LoraTarget::Value], 1).unwrap();
        for model in [&with_read, &with_plain, &with_lora] {
            for ((v, l), r) in samples.iter().zip(&reference) {
                let got = model.forward(v, l).unwrap();
                assert!(got.iter().zip(r).all(|(a, b)| a.to_bits() == b.to_bits()));
            }
        }
        assert!(with_read.attach_adapter(4, 0).is_err());
    }

    #[test]
    fn read_fraction_on_default_model() {
        let mut model = Backbone::new(ModelConfig::default(), 0).unwrap();
        let frozen_total = model.total_params();
        model.attach_read(4, CellKind::Rnn, ReadInit::Zero, 0).unwrap();
        let read = model.store.numel() - frozen_total;
        assert_eq!(read, 4 * 612);
        let frac = read as f64 / model.store.numel() as f64;
        assert!(frac < 0.015, "{frac}");
    }

    #[test]
    fn backbone_hash_tracks_values() {
        let a = Backbone::new(ModelConfig::default(), 1).unwrap();
        let mut b = a.clone();
        assert_eq!(a.backbone_hash(), b.backbone_hash());
        b.attach_read(4, CellKind::Rnn, ReadInit::Zero, 3).unwrap();
        assert_eq!(a.backbone_hash(), b.backbone_hash());
        let c = Backbone::new(ModelConfig::default(), 2).unwrap();
        assert_ne!(a.backbone_hash(), c.backbone_hash());
    }

    #[test]
    fn prompts_change_outputs_and_keep_frame_count() {
        let cfg = ModelConfig::default();
        let mut model = Backbone::new(cfg.clone(), 9).unwrap();
        let (v, l) = inputs(&cfg, 7, 5, 3);
        let before = model.forward(&v, &l).unwrap();
        model.attach_prompt(8, 4).unwrap();
        let (after, pairs) = model.forward_trace(&v, &l).unwrap();
        assert_eq!(after.len(), 7);
        assert_ne!(before, after);
        assert_eq!(pairs[0].0.shape(), &[7, 64]);
        assert_eq!(pairs[0].1.shape(), &[5, 64]);
    }
}
