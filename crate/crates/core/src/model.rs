//! Tiny pre-LN decoder-only transformer with LoRA on the query and value
//! projections.
//!
//! Parameters live in one flat `Vec<Tensor>` so a single optimizer can walk
//! them; [`ParamId`] names the slots. Projections are stored `[d_in, d_out]`
//! and applied as `x · W`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::{clip_grad_norm, Adam, AdamConfig, Tape, Tensor, Var};

/// Feed-forward width as a multiple of `d_model`.
pub const FFN_MULT: usize = 2;
/// LoRA scaling ratio α/r.
pub const LORA_SCALE: f32 = 2.0;
/// Standard deviation of freshly initialized LoRA `A` factors.
pub const LORA_INIT_STD: f32 = 0.02;
const EVAL_BATCH: usize = 128;
const PER_LAYER: usize = 12;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BaseModelConfig {
    pub vocab_size: usize,
    pub seq_len: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub n_classes: usize,
    pub seed: u64,
}

impl Default for BaseModelConfig {
    fn default() -> Self {
        Self {
            vocab_size: 32,
            seq_len: 16,
            d_model: 32,
            n_layers: 2,
            n_heads: 2,
            n_classes: 2,
            seed: 0,
        }
    }
}

impl BaseModelConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("vocab_size", self.vocab_size),
            ("seq_len", self.seq_len),
            ("d_model", self.d_model),
            ("n_layers", self.n_layers),
            ("n_heads", self.n_heads),
            ("n_classes", self.n_classes),
        ];
        for (key, v) in positive {
            if v == 0 {
                return Err(Error::Config {
                    key: key.into(),
                    reason: "must be at least 1".into(),
                });
            }
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return Err(Error::Config {
                key: "n_heads".into(),
                reason: format!("{} does not divide d_model {}", self.n_heads, self.d_model),
            });
        }
        Ok(())
    }

    pub fn d_ff(&self) -> usize {
        FFN_MULT * self.d_model
    }
}

/// Slot of a parameter in [`BaseModel::params`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamId {
    TokEmb,
    PosEmb,
    Ln1Gain(usize),
    Ln1Bias(usize),
    Wq(usize),
    Wk(usize),
    Wv(usize),
    Wo(usize),
    Ln2Gain(usize),
    Ln2Bias(usize),
    W1(usize),
    B1(usize),
    W2(usize),
    B2(usize),
    LnFGain,
    LnFBias,
    Head,
    LmHead,
}

impl ParamId {
    fn index(self, n_layers: usize) -> usize {
        use ParamId::*;
        let layer = |l: usize, j: usize| 2 + l * PER_LAYER + j;
        let tail = 2 + n_layers * PER_LAYER;
        match self {
            TokEmb => 0,
            PosEmb => 1,
            Ln1Gain(l) => layer(l, 0),
            Ln1Bias(l) => layer(l, 1),
            Wq(l) => layer(l, 2),
            Wk(l) => layer(l, 3),
            Wv(l) => layer(l, 4),
            Wo(l) => layer(l, 5),
            Ln2Gain(l) => layer(l, 6),
            Ln2Bias(l) => layer(l, 7),
            W1(l) => layer(l, 8),
            B1(l) => layer(l, 9),
            W2(l) => layer(l, 10),
            B2(l) => layer(l, 11),
            LnFGain => tail,
            LnFBias => tail + 1,
            Head => tail + 2,
            LmHead => tail + 3,
        }
    }

    fn all(n_layers: usize) -> Vec<(ParamId, String)> {
        use ParamId::*;
        let mut out = vec![(TokEmb, "tok_emb".to_string()), (PosEmb, "pos_emb".into())];
        for l in 0..n_layers {
            let named: [(ParamId, &str); PER_LAYER] = [
                (Ln1Gain(l), "ln1_gain"),
                (Ln1Bias(l), "ln1_bias"),
                (Wq(l), "wq"),
                (Wk(l), "wk"),
                (Wv(l), "wv"),
                (Wo(l), "wo"),
                (Ln2Gain(l), "ln2_gain"),
                (Ln2Bias(l), "ln2_bias"),
                (W1(l), "w1"),
                (B1(l), "b1"),
                (W2(l), "w2"),
                (B2(l), "b2"),
            ];
            out.extend(named.iter().map(|(p, n)| (*p, format!("layer{l}.{n}"))));
        }
        out.extend([
            (LnFGain, "lnf_gain".into()),
            (LnFBias, "lnf_bias".into()),
            (Head, "head".into()),
            (LmHead, "lm_head".into()),
        ]);
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BaseModel {
    pub config: BaseModelConfig,
    params: Vec<Tensor>,
}

/// Which attention projection a LoRA factor pair adapts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Projection {
    Q,
    V,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LoraTarget {
    pub layer: usize,
    pub projection: Projection,
    pub d_in: usize,
    pub d_out: usize,
}

/// Shapes and order of an adapter's factors; enough to unflatten a vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdapterLayout {
    pub rank: usize,
    pub alpha: f32,
    pub targets: Vec<LoraTarget>,
}

impl AdapterLayout {
    /// W_q and W_v of every layer, sorted by layer then Q before V.
    pub fn for_model(config: &BaseModelConfig, rank: usize) -> Result<Self> {
        if rank == 0 {
            return Err(Error::Config {
                key: "rank".into(),
                reason: "must be at least 1".into(),
            });
        }
        let d = config.d_model;
        let targets = (0..config.n_layers)
            .flat_map(|layer| {
                [Projection::Q, Projection::V].map(|projection| LoraTarget {
                    layer,
                    projection,
                    d_in: d,
                    d_out: d,
                })
            })
            .collect();
        Ok(Self {
            rank,
            alpha: LORA_SCALE * rank as f32,
            targets,
        })
    }

    pub fn scale(&self) -> f32 {
        self.alpha / self.rank as f32
    }

    /// P = Σ r·(d_in + d_out).
    pub fn param_count(&self) -> usize {
        self.targets
            .iter()
            .map(|t| self.rank * (t.d_in + t.d_out))
            .sum()
    }
}

/// Factors `A: r×d_in` and `B: d_out×r` per target, interleaved
/// `[A₀, B₀, A₁, B₁, …]` in layout order.
#[derive(Debug, Clone, PartialEq)]
pub struct LoraAdapter {
    pub layout: AdapterLayout,
    pub factors: Vec<Tensor>,
}

impl LoraAdapter {
    /// Gaussian `A`, zero `B`: the adapted model starts identical to the base.
    pub fn init(layout: AdapterLayout, rng: &mut Rng) -> Self {
        let r = layout.rank;
        let factors = layout
            .targets
            .iter()
            .flat_map(|t| {
                let a = Tensor::randn(rng, &[r, t.d_in], LORA_INIT_STD).with_grad();
                let b = Tensor::zeros(&[t.d_out, r]).with_grad();
                [a, b]
            })
            .collect();
        Self { layout, factors }
    }

    pub fn param_count(&self) -> usize {
        self.layout.param_count()
    }

    /// Per target: A row-major, then B row-major.
    pub fn flatten(&self) -> Vec<f32> {
        let mut out = Vec::with_capacity(self.param_count());
        for f in &self.factors {
            out.extend_from_slice(f.data());
        }
        out
    }

    pub fn unflatten(values: &[f32], layout: &AdapterLayout) -> Result<Self> {
        let expected = layout.param_count();
        if values.len() != expected {
            return Err(Error::Layout {
                expected,
                actual: values.len(),
            });
        }
        let r = layout.rank;
        let mut offset = 0;
        let mut take = |shape: [usize; 2]| {
            let n = shape[0] * shape[1];
            let t = Tensor::new(&shape, values[offset..offset + n].to_vec())
                .expect("layout shapes are valid")
                .with_grad();
            offset += n;
            t
        };
        let factors = layout
            .targets
            .iter()
            .flat_map(|t| [take([r, t.d_in]), take([t.d_out, r])])
            .collect();
        Ok(Self {
            layout: layout.clone(),
            factors,
        })
    }

    /// ΔW in the model's `[d_in, d_out]` orientation: `(α/r)·(B·A)ᵀ`.
    pub fn delta(&self, target: usize) -> Tensor {
        let tape = Tape::new();
        let a = tape.leaf(&self.factors[2 * target]);
        let b = tape.leaf(&self.factors[2 * target + 1]);
        lora_delta(a, b, self.layout.scale()).expect("factor shapes").to_tensor()
    }

    pub fn record<'t>(&self, tape: &'t Tape) -> AdapterVars<'_, 't> {
        AdapterVars {
            layout: &self.layout,
            factors: self.factors.iter().map(|f| tape.leaf(f)).collect(),
        }
    }
}

/// Adapter factors recorded on a tape.
pub struct AdapterVars<'a, 't> {
    pub layout: &'a AdapterLayout,
    pub factors: Vec<Var<'t>>,
}

fn lora_delta<'t>(a: Var<'t>, b: Var<'t>, scale: f32) -> Result<Var<'t>> {
    Ok(a.transpose()?.matmul(&b.transpose()?)?.scale(scale))
}

/// Output of a recorded forward pass over a batch of equal-length sequences.
pub struct Forward<'t> {
    /// `[batch, n_classes]`, read at the final position.
    pub logits: Var<'t>,
    /// Residual stream after each block, `[batch·len, d_model]`.
    pub hidden: Vec<Var<'t>>,
    /// Final layer norm over every position, `[batch·len, d_model]`.
    pub normed: Var<'t>,
    /// Base parameters as recorded, in slot order.
    pub params: Vec<Var<'t>>,
    pub len: usize,
}

impl BaseModel {
    pub fn init(config: BaseModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = Rng::new(config.seed);
        let (v, t, d, ff, c) = (
            config.vocab_size,
            config.seq_len,
            config.d_model,
            config.d_ff(),
            config.n_classes,
        );
        let lin = |rng: &mut Rng, i: usize, o: usize| Tensor::randn(rng, &[i, o], (i as f32).powf(-0.5));
        let mut params = Vec::new();
        for (id, _) in ParamId::all(config.n_layers) {
            use ParamId::*;
            let p = match id {
                TokEmb => Tensor::randn(&mut rng, &[v, d], 0.5),
                PosEmb => Tensor::randn(&mut rng, &[t, d], 0.1),
                Ln1Gain(_) | Ln2Gain(_) | LnFGain => Tensor::full(&[d], 1.0),
                Ln1Bias(_) | Ln2Bias(_) | LnFBias | B2(_) => Tensor::zeros(&[d]),
                Wq(_) | Wk(_) | Wv(_) => lin(&mut rng, d, d),
                Wo(_) => lin(&mut rng, d, d).scaled(0.5),
                W1(_) => lin(&mut rng, d, ff),
                B1(_) => Tensor::zeros(&[ff]),
                W2(_) => lin(&mut rng, ff, d).scaled(0.5),
                Head => lin(&mut rng, d, c),
                LmHead => lin(&mut rng, d, v),
            };
            params.push(p);
        }
        Ok(Self { config, params })
    }

    pub fn param(&self, id: ParamId) -> &Tensor {
        &self.params[id.index(self.config.n_layers)]
    }

    pub fn params(&self) -> &[Tensor] {
        &self.params
    }

    pub fn named_params(&self) -> Vec<(String, &Tensor)> {
        ParamId::all(self.config.n_layers)
            .into_iter()
            .map(|(id, name)| (name, self.param(id)))
            .collect()
    }

    /// Rebuilds a model from tensors in [`Self::named_params`] order.
    pub fn from_params(config: BaseModelConfig, params: Vec<Tensor>) -> Result<Self> {
        let reference = Self::init(config.clone())?;
        if params.len() != reference.params.len() {
            return Err(Error::Layout {
                expected: reference.params.len(),
                actual: params.len(),
            });
        }
        for (p, r) in params.iter().zip(&reference.params) {
            if p.shape() != r.shape() {
                return Err(Error::Dimension {
                    op: "base_model",
                    lhs: r.shape().to_vec(),
                    rhs: p.shape().to_vec(),
                });
            }
        }
        let params = params
            .into_iter()
            .map(|mut p| {
                p.set_requires_grad(false);
                p.zero_grad();
                p
            })
            .collect();
        Ok(Self { config, params })
    }

    /// `W + ΔW` for every adapted projection, so the adapter can be dropped.
    pub fn materialize(&self, adapter: &LoraAdapter) -> Self {
        let mut out = self.clone();
        for (i, t) in adapter.layout.targets.iter().enumerate() {
            let id = match t.projection {
                Projection::Q => ParamId::Wq(t.layer),
                Projection::V => ParamId::Wv(t.layer),
            };
            let delta = adapter.delta(i);
            let w = &mut out.params[id.index(self.config.n_layers)];
            w.data_mut()
                .iter_mut()
                .zip(delta.data())
                .for_each(|(w, d)| *w += d);
        }
        out
    }

    fn check_tokens(&self, batch: &[&[u32]]) -> Result<usize> {
        let len = batch.first().map(|s| s.len()).unwrap_or(0);
        if batch.is_empty() || len == 0 {
            return Err(Error::Input("empty batch or empty sequence".into()));
        }
        if len > self.config.seq_len {
            return Err(Error::Input(format!(
                "sequence length {len} exceeds seq_len {}",
                self.config.seq_len
            )));
        }
        for s in batch {
            if s.len() != len {
                return Err(Error::Input("sequences in a batch must share one length".into()));
            }
            if let Some(t) = s.iter().find(|&&t| t as usize >= self.config.vocab_size) {
                return Err(Error::Input(format!(
                    "token {t} outside vocabulary of {}",
                    self.config.vocab_size
                )));
            }
        }
        Ok(len)
    }

    /// Records a forward pass. Base parameters enter the tape as leaves and
    /// receive gradients only if they require them.
    pub fn forward<'t>(
        &self,
        tape: &'t Tape,
        adapter: Option<&AdapterVars<'_, 't>>,
        batch: &[&[u32]],
    ) -> Result<Forward<'t>> {
        let len = self.check_tokens(batch)?;
        let n = batch.len();
        let cfg = &self.config;
        let params: Vec<Var<'t>> = self.params.iter().map(|p| tape.leaf(p)).collect();
        let p = |id: ParamId| params[id.index(cfg.n_layers)];

        let ids: Vec<usize> = batch.iter().flat_map(|s| s.iter().map(|&t| t as usize)).collect();
        let positions: Vec<usize> = (0..n).flat_map(|_| 0..len).collect();
        let mut x = p(ParamId::TokEmb)
            .gather_rows(&ids)?
            .add(&p(ParamId::PosEmb).gather_rows(&positions)?)?;

        let mut deltas: Vec<Option<Var<'t>>> = vec![None; 2 * cfg.n_layers];
        if let Some(ad) = adapter {
            for (i, t) in ad.layout.targets.iter().enumerate() {
                let slot = 2 * t.layer + (t.projection == Projection::V) as usize;
                let d = lora_delta(ad.factors[2 * i], ad.factors[2 * i + 1], ad.layout.scale())?;
                deltas[slot] = Some(d);
            }
        }
        let adapted = |w: Var<'t>, d: Option<Var<'t>>| -> Result<Var<'t>> {
            match d {
                Some(d) => w.add(&d),
                None => Ok(w),
            }
        };

        let mut hidden = Vec::with_capacity(cfg.n_layers);
        for l in 0..cfg.n_layers {
            let h = x.layer_norm(&p(ParamId::Ln1Gain(l)), &p(ParamId::Ln1Bias(l)))?;
            let wq = adapted(p(ParamId::Wq(l)), deltas[2 * l])?;
            let wv = adapted(p(ParamId::Wv(l)), deltas[2 * l + 1])?;
            let q = h.matmul(&wq)?;
            let k = h.matmul(&p(ParamId::Wk(l)))?;
            let v = h.matmul(&wv)?;
            let att = q.causal_attention(&k, &v, n, cfg.n_heads)?;
            x = x.add(&att.matmul(&p(ParamId::Wo(l)))?)?;

            let h = x.layer_norm(&p(ParamId::Ln2Gain(l)), &p(ParamId::Ln2Bias(l)))?;
            let f = h
                .matmul(&p(ParamId::W1(l)))?
                .add_tiled(&p(ParamId::B1(l)))?
                .gelu()
                .matmul(&p(ParamId::W2(l)))?
                .add_tiled(&p(ParamId::B2(l)))?;
            x = x.add(&f)?;
            hidden.push(x);
        }

        let normed = x.layer_norm(&p(ParamId::LnFGain), &p(ParamId::LnFBias))?;
        let last: Vec<usize> = (0..n).map(|b| b * len + len - 1).collect();
        let logits = normed.gather_rows(&last)?.matmul(&p(ParamId::Head))?;
        Ok(Forward {
            logits,
            hidden,
            normed,
            params,
            len,
        })
    }

    fn batched<T>(
        &self,
        adapter: Option<&LoraAdapter>,
        batch: &[&[u32]],
        mut f: impl FnMut(&Forward<'_>, &mut Vec<T>),
    ) -> Result<Vec<T>> {
        let mut out = Vec::with_capacity(batch.len());
        for chunk in batch.chunks(EVAL_BATCH) {
            let tape = Tape::new();
            let ad = adapter.map(|a| a.record(&tape));
            let fw = self.forward(&tape, ad.as_ref(), chunk)?;
            f(&fw, &mut out);
        }
        Ok(out)
    }

    /// Classification logits, one row per sequence.
    pub fn logits(&self, adapter: Option<&LoraAdapter>, batch: &[&[u32]]) -> Result<Vec<Vec<f32>>> {
        let c = self.config.n_classes;
        self.batched(adapter, batch, |fw, out| {
            out.extend(fw.logits.value().data().chunks(c).map(<[f32]>::to_vec))
        })
    }

    pub fn predict(&self, adapter: Option<&LoraAdapter>, batch: &[&[u32]]) -> Result<Vec<usize>> {
        Ok(self.logits(adapter, batch)?.iter().map(|row| argmax(row)).collect())
    }

    /// Final-layer hidden state at the final position, per sequence.
    pub fn hidden_last(&self, adapter: Option<&LoraAdapter>, batch: &[&[u32]]) -> Result<Vec<Vec<f32>>> {
        let d = self.config.d_model;
        self.batched(adapter, batch, |fw, out| {
            let h = fw.hidden.last().expect("at least one layer").value();
            let len = fw.len;
            for row in h.data().chunks(len * d) {
                out.push(row[(len - 1) * d..].to_vec());
            }
        })
    }
}

trait Scaled {
    fn scaled(self, s: f32) -> Self;
}

impl Scaled for Tensor {
    fn scaled(mut self, s: f32) -> Self {
        self.data_mut().iter_mut().for_each(|x| *x *= s);
        self
    }
}

pub fn argmax(row: &[f32]) -> usize {
    row.iter()
        .enumerate()
        .fold((0, f32::NEG_INFINITY), |(bi, bv), (i, &v)| if v > bv { (i, v) } else { (bi, bv) })
        .0
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub lr: f32,
    pub batch: usize,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            lr: 3e-3,
            batch: 32,
            seed: 0,
        }
    }
}

/// Next-token pretraining on unlabeled sequences. The classification head is
/// never touched: it stays at its random initialization for every later stage.
pub fn pretrain(config: BaseModelConfig, corpus: &[&[u32]], opts: &PretrainConfig) -> Result<BaseModel> {
    let mut model = BaseModel::init(config)?;
    let head = ParamId::Head.index(model.config.n_layers);
    for (i, p) in model.params.iter_mut().enumerate() {
        p.set_requires_grad(i != head);
    }
    let mut adam = Adam::new(AdamConfig::with_lr(opts.lr));
    let mut rng = Rng::new(opts.seed);
    let mut order: Vec<usize> = (0..corpus.len()).collect();
    let lm = ParamId::LmHead.index(model.config.n_layers);
    for epoch in 0..opts.epochs {
        rng.shuffle(&mut order);
        for chunk in order.chunks(opts.batch.max(1)) {
            let batch: Vec<&[u32]> = chunk.iter().map(|&i| corpus[i]).collect();
            let tape = Tape::new();
            let fw = model.forward(&tape, None, &batch)?;
            let len = fw.len;
            if len < 2 {
                return Err(Error::Input("pretraining needs sequences of length ≥ 2".into()));
            }
            let rows: Vec<usize> = (0..batch.len())
                .flat_map(|b| (0..len - 1).map(move |t| b * len + t))
                .collect();
            let targets: Vec<usize> = batch
                .iter()
                .flat_map(|s| s[1..].iter().map(|&t| t as usize))
                .collect();
            let loss = fw
                .normed
                .gather_rows(&rows)?
                .matmul(&fw.params[lm])?
                .cross_entropy(&targets)?;
            if !loss.item().is_finite() {
                return Err(Error::Training {
                    epoch: epoch + 1,
                    reason: "non-finite pretraining loss".into(),
                });
            }
            let mut grads = tape.backward(loss)?;
            let taken: Vec<Option<Vec<f32>>> = fw.params.iter().map(|&v| grads.take(v)).collect();
            drop(fw);
            for (p, g) in model.params.iter_mut().zip(taken) {
                p.set_grad(g)?;
            }
            clip_grad_norm(&mut model.params, 5.0);
            adam.step(&mut model.params).map_err(|e| Error::Training {
                epoch: epoch + 1,
                reason: e.to_string(),
            })?;
        }
    }
    for p in model.params.iter_mut() {
        p.set_requires_grad(false);
        p.zero_grad();
    }
    Ok(model)
}
