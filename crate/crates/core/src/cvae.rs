//! Convolutional conditional VAE over flattened, normalized LoRA vectors.
//!
//! The encoder reads the vector as a one-channel signal of length `L_pad`
//! with the projected task vector tiled alongside it, and halves the length
//! on `⌊n/2⌋` of its layers. The decoder mirrors it with transposed
//! convolutions. Because every layer is convolutional, the parameter count
//! does not depend on the vector length.
//!
//! Sampling from the prior gives the decoder no information about where it
//! is along the sequence, so fixed sinusoidal position channels are appended
//! to its input. They add no parameters.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::harvest::NormStats;
use crate::model::AdapterLayout;
use crate::rng::Rng;
use crate::task_vector::{ConditionSource, TaskVector};
use crate::tensor::{clip_grad_norm, concat, Adam, AdamConfig, Tape, Tensor, Var};

/// Channels carrying the projected task vector.
pub const COND_CHANNELS: usize = 4;
/// Sinusoidal position channels on the decoder input (sin and cos at
/// frequencies 1, 2, 4 and 8 cycles per latent length).
pub const POS_CHANNELS: usize = 8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CvaeConfig {
    pub n_layers: usize,
    /// Channels of the first encoder layers; doubled every `widen_every` layers.
    pub base_channels: usize,
    pub max_channels: usize,
    pub widen_every: usize,
    pub kernel: usize,
    pub latent_channels: usize,
    pub kld_weight: f32,
    pub epochs: usize,
    pub lr: f32,
    pub batch: usize,
    pub logvar_clamp: f32,
    pub clip: f32,
    pub d_task: usize,
    pub d_l: usize,
}

impl Default for CvaeConfig {
    fn default() -> Self {
        Self {
            n_layers: 12,
            base_channels: 8,
            max_channels: 32,
            widen_every: 4,
            kernel: 3,
            latent_channels: 8,
            kld_weight: 0.005,
            epochs: 2000,
            lr: 1e-3,
            batch: 32,
            logvar_clamp: 8.0,
            clip: 5.0,
            d_task: 32,
            d_l: 512,
        }
    }
}

impl CvaeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_layers < 2 {
            return Err(Error::config("n_layers", "need at least 2 layers per stack"));
        }
        if self.kld_weight.is_nan() || self.kld_weight < 0.0 {
            return Err(Error::config("kld_weight", "must be non-negative"));
        }
        if self.kernel != 3 {
            return Err(Error::config("kernel", "only kernel size 3 is supported"));
        }
        for (key, v) in [
            ("base_channels", self.base_channels),
            ("max_channels", self.max_channels),
            ("widen_every", self.widen_every),
            ("latent_channels", self.latent_channels),
            ("batch", self.batch),
            ("d_task", self.d_task),
            ("d_l", self.d_l),
        ] {
            if v == 0 {
                return Err(Error::config(key, "must be at least 1"));
            }
        }
        if !(self.logvar_clamp > 0.0) {
            return Err(Error::config("logvar_clamp", "must be positive"));
        }
        Ok(())
    }

    /// Number of stride-2 layers per stack.
    pub fn halvings(&self) -> usize {
        self.n_layers / 2
    }

    /// `d_l` rounded up to a multiple of `2^halvings`.
    pub fn padded_len(&self) -> usize {
        let unit = 1usize << self.halvings();
        self.d_l.div_ceil(unit) * unit
    }

    pub fn latent_len(&self) -> usize {
        self.padded_len() >> self.halvings()
    }

    /// Latent dimensionality `C_z · L_z`.
    pub fn latent_dim(&self) -> usize {
        self.latent_channels * self.latent_len()
    }

    /// Encoder layer `i` halves the length iff it is among the first
    /// `halvings` even-indexed layers.
    pub fn encoder_strided(&self, i: usize) -> bool {
        i.is_multiple_of(2) && i < 2 * self.halvings()
    }

    /// Output channels of encoder layer `i`.
    pub fn encoder_channels(&self, i: usize) -> usize {
        let doublings = (i / self.widen_every).min(16) as u32;
        (self.base_channels << doublings).min(self.max_channels)
    }
}

/// Index of each parameter tensor in [`CvaeModel::params`].
#[derive(Debug, Clone)]
struct Slots {
    enc_cond: (usize, usize),
    enc: Vec<(usize, usize)>,
    mu: (usize, usize),
    logvar: (usize, usize),
    dec_cond: (usize, usize),
    dec: Vec<(usize, usize)>,
}

/// Parameter names and shapes in storage order.
fn param_specs(cfg: &CvaeConfig) -> Vec<(String, Vec<usize>)> {
    let n = cfg.n_layers;
    let k = cfg.kernel;
    let mut specs = vec![
        ("enc_cond.w".to_string(), vec![cfg.d_task, COND_CHANNELS]),
        ("enc_cond.b".into(), vec![COND_CHANNELS]),
    ];
    let mut c_in = 1 + COND_CHANNELS;
    for i in 0..n {
        let c_out = cfg.encoder_channels(i);
        specs.push((format!("enc{i}.w"), vec![c_out, c_in, k]));
        specs.push((format!("enc{i}.b"), vec![c_out]));
        c_in = c_out;
    }
    let cz = cfg.latent_channels;
    specs.push(("mu.w".into(), vec![cz, c_in, 1]));
    specs.push(("mu.b".into(), vec![cz]));
    specs.push(("logvar.w".into(), vec![cz, c_in, 1]));
    specs.push(("logvar.b".into(), vec![cz]));
    specs.push(("dec_cond.w".into(), vec![cfg.d_task, COND_CHANNELS]));
    specs.push(("dec_cond.b".into(), vec![COND_CHANNELS]));
    let mut c_in = cz + COND_CHANNELS + POS_CHANNELS;
    for j in 0..n {
        let mirror = n - 1 - j;
        let c_out = if mirror == 0 {
            1
        } else {
            cfg.encoder_channels(mirror - 1)
        };
        // transposed-conv kernels are stored [C_in, C_out, K]
        specs.push((format!("dec{j}.w"), vec![c_in, c_out, k]));
        specs.push((format!("dec{j}.b"), vec![c_out]));
        c_in = c_out;
    }
    specs
}

fn slots(cfg: &CvaeConfig) -> Slots {
    let n = cfg.n_layers;
    let pair = |i: usize| (i, i + 1);
    let enc_start = 2;
    let heads = enc_start + 2 * n;
    let dec_start = heads + 6;
    Slots {
        enc_cond: pair(0),
        enc: (0..n).map(|i| pair(enc_start + 2 * i)).collect(),
        mu: pair(heads),
        logvar: pair(heads + 2),
        dec_cond: pair(heads + 4),
        dec: (0..n).map(|j| pair(dec_start + 2 * j)).collect(),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LatentCode {
    /// `[N, C_z, L_z]`
    pub mu: Tensor,
    pub logvar: Tensor,
}

/// A batch of normalized vectors and their conditions.
pub struct Batch<'a> {
    pub targets: Vec<&'a [f32]>,
    pub conditions: Vec<&'a [f32]>,
}

/// Loss terms recorded on a tape.
pub struct LossParts<'t> {
    pub loss: Var<'t>,
    pub mse: Var<'t>,
    pub kl: Var<'t>,
    pub mu: Var<'t>,
    pub logvar: Var<'t>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainingPair {
    pub condition: TaskVector,
    /// Flattened adapter in raw (unnormalized) units.
    pub values: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CvaeModel {
    pub config: CvaeConfig,
    pub params: Vec<Tensor>,
    pub norm: NormStats,
    pub layout: AdapterLayout,
    pub source: ConditionSource,
}

/// Per-epoch mean loss terms.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct EpochStats {
    pub loss: f64,
    pub mse: f64,
    pub kl: f64,
}

/// Fixed `[n, POS_CHANNELS, len]` sinusoid bank.
fn position_channels(n: usize, len: usize) -> Tensor {
    let mut data = Vec::with_capacity(n * POS_CHANNELS * len);
    for _ in 0..n {
        for c in 0..POS_CHANNELS {
            let freq = (1 << (c / 2)) as f64;
            for p in 0..len {
                let angle = std::f64::consts::TAU * freq * p as f64 / len as f64;
                let v = if c % 2 == 0 { angle.sin() } else { angle.cos() };
                data.push(v as f32);
            }
        }
    }
    Tensor::new(&[n, POS_CHANNELS, len], data).expect("positive extents")
}

/// `0.5 · Σ (e^{lv} + μ² − 1 − lv)` summed over latent elements, averaged
/// over the batch (leading axis).
pub fn kl_divergence<'t>(mu: Var<'t>, logvar: Var<'t>) -> Result<Var<'t>> {
    let n = mu.shape()[0];
    Ok(logvar
        .exp()
        .add(&mu.mul(&mu)?)?
        .sub(&logvar)?
        .add_scalar(-1.0)
        .sum()
        .scale(0.5 / n as f32))
}

/// `μ + exp(½·logvar) ⊙ ε` with ε supplied by the caller.
pub fn reparameterize<'t>(mu: Var<'t>, logvar: Var<'t>, eps: &Tensor) -> Result<Var<'t>> {
    let eps = mu.tape().constant(eps.clone());
    mu.add(&logvar.scale(0.5).exp().mul(&eps)?)
}

impl CvaeModel {
    /// Fresh parameters: He-style normal kernels, zero biases, zero heads.
    pub fn init(
        config: CvaeConfig,
        norm: NormStats,
        layout: AdapterLayout,
        source: ConditionSource,
        seed: u64,
    ) -> Result<Self> {
        config.validate()?;
        if norm.dim() != config.d_l || layout.param_count() != config.d_l {
            return Err(Error::Layout {
                expected: config.d_l,
                actual: if norm.dim() != config.d_l {
                    norm.dim()
                } else {
                    layout.param_count()
                },
            });
        }
        let mut rng = Rng::new(seed);
        let n = config.n_layers;
        let params = param_specs(&config)
            .into_iter()
            .map(|(name, shape)| {
                let last_dec = name == format!("dec{}.w", n - 1);
                if name.ends_with(".b") || name.starts_with("mu.") || name.starts_with("logvar.") {
                    Tensor::zeros(&shape)
                } else if name.ends_with("cond.w") {
                    Tensor::randn(&mut rng, &shape, (shape[0] as f32).powf(-0.5))
                } else {
                    let transposed = name.starts_with("dec");
                    let fan_in = if transposed { shape[0] } else { shape[1] } * shape[2];
                    let gain = if last_dec { 1.0 } else { 2.0 };
                    Tensor::randn(&mut rng, &shape, (gain / fan_in as f32).sqrt())
                }
            })
            .collect();
        Ok(Self {
            config,
            params,
            norm,
            layout,
            source,
        })
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(Tensor::len).sum()
    }

    pub fn named_params(&self) -> Vec<(String, &Tensor)> {
        param_specs(&self.config)
            .into_iter()
            .map(|(n, _)| n)
            .zip(&self.params)
            .collect()
    }

    pub fn param_shapes(config: &CvaeConfig) -> Vec<(String, Vec<usize>)> {
        param_specs(config)
    }

    fn check_condition(&self, v: &[f32]) -> Result<()> {
        if v.len() != self.config.d_task {
            return Err(Error::Dimension {
                op: "cvae_condition",
                lhs: vec![self.config.d_task],
                rhs: vec![v.len()],
            });
        }
        Ok(())
    }

    fn condition<'t>(
        &self,
        tape: &'t Tape,
        p: &[Var<'t>],
        slot: (usize, usize),
        conditions: &[&[f32]],
        len: usize,
    ) -> Result<Var<'t>> {
        let n = conditions.len();
        let mut flat = Vec::with_capacity(n * self.config.d_task);
        for c in conditions {
            self.check_condition(c)?;
            flat.extend_from_slice(c);
        }
        let v = tape.constant(Tensor::new(&[n, self.config.d_task], flat)?);
        v.matmul(&p[slot.0])?.add_tiled(&p[slot.1])?.tile_length(len)
    }

    /// Encoder on a tape: returns `(μ, clamped logvar)`, each `[N, C_z, L_z]`.
    pub fn encode_on<'t>(
        &self,
        tape: &'t Tape,
        p: &[Var<'t>],
        targets: &[&[f32]],
        conditions: &[&[f32]],
    ) -> Result<(Var<'t>, Var<'t>)> {
        let cfg = &self.config;
        let s = slots(cfg);
        let n = targets.len();
        let l_pad = cfg.padded_len();
        let mut x = vec![0.0f32; n * l_pad];
        for (row, t) in x.chunks_mut(l_pad).zip(targets) {
            if t.len() != cfg.d_l {
                return Err(Error::Dimension {
                    op: "cvae_encode",
                    lhs: vec![cfg.d_l],
                    rhs: vec![t.len()],
                });
            }
            row[..cfg.d_l].copy_from_slice(t);
        }
        let x = tape.constant(Tensor::new(&[n, 1, l_pad], x)?);
        let cond = self.condition(tape, p, s.enc_cond, conditions, l_pad)?;
        let mut h = concat(&[x, cond], 1)?;
        for (i, &(w, b)) in s.enc.iter().enumerate() {
            let stride = if cfg.encoder_strided(i) { 2 } else { 1 };
            let y = h.conv1d(&p[w], stride, 1)?;
            let y = y.add_channel_bias(&p[b])?.gelu();
            h = if y.shape() == h.shape() { h.add(&y)? } else { y };
        }
        let head = |(w, b): (usize, usize)| -> Result<Var<'t>> {
            h.conv1d(&p[w], 1, 0)?.add_channel_bias(&p[b])
        };
        let mu = head(s.mu)?;
        let c = cfg.logvar_clamp;
        let logvar = head(s.logvar)?.clamp(-c, c);
        Ok((mu, logvar))
    }

    /// Decoder on a tape: `[N, C_z, L_z]` latents to `[N, d_l]` outputs.
    pub fn decode_on<'t>(
        &self,
        tape: &'t Tape,
        p: &[Var<'t>],
        z: Var<'t>,
        conditions: &[&[f32]],
    ) -> Result<Var<'t>> {
        let cfg = &self.config;
        let s = slots(cfg);
        let zs = z.shape();
        let (n, lz) = (zs[0], cfg.latent_len());
        if zs.len() != 3 || zs[1] != cfg.latent_channels || zs[2] != lz {
            return Err(Error::Dimension {
                op: "cvae_decode",
                lhs: vec![n, cfg.latent_channels, lz],
                rhs: zs,
            });
        }
        let cond = self.condition(tape, p, s.dec_cond, conditions, lz)?;
        let pos = tape.constant(position_channels(n, lz));
        let mut h = concat(&[z, cond, pos], 1)?;
        let last = cfg.n_layers - 1;
        for (j, &(w, b)) in s.dec.iter().enumerate() {
            let up = cfg.encoder_strided(last - j);
            let y = if up {
                h.conv_transpose1d_padded(&p[w], 2, 1, 1)?
            } else {
                h.conv_transpose1d(&p[w], 1, 1)?
            };
            let y = y.add_channel_bias(&p[b])?;
            h = if j == last {
                y
            } else {
                let y = y.gelu();
                if y.shape() == h.shape() {
                    h.add(&y)?
                } else {
                    y
                }
            };
        }
        h.narrow(2, 0, cfg.d_l)?.reshape(&[n, cfg.d_l])
    }

    /// Full objective `MSE + β·KL` with the reparameterization noise fixed
    /// to `eps` (`[N, C_z, L_z]`).
    pub fn loss_on<'t>(
        &self,
        tape: &'t Tape,
        p: &[Var<'t>],
        batch: &Batch<'_>,
        eps: &Tensor,
    ) -> Result<LossParts<'t>> {
        if batch.targets.is_empty() || batch.targets.len() != batch.conditions.len() {
            return Err(Error::Input("batch must be nonempty with one condition per target".into()));
        }
        let (mu, logvar) = self.encode_on(tape, p, &batch.targets, &batch.conditions)?;
        let z = reparameterize(mu, logvar, eps)?;
        let recon = self.decode_on(tape, p, z, &batch.conditions)?;
        let n = batch.targets.len();
        let flat: Vec<f32> = batch.targets.iter().flat_map(|t| t.iter().copied()).collect();
        let target = tape.constant(Tensor::new(&[n, self.config.d_l], flat)?);
        let mse = recon.mse(&target)?;
        let kl = kl_divergence(mu, logvar)?;
        let loss = mse.add(&kl.scale(self.config.kld_weight))?;
        Ok(LossParts {
            loss,
            mse,
            kl,
            mu,
            logvar,
        })
    }

    fn record<'t>(&self, tape: &'t Tape) -> Vec<Var<'t>> {
        self.params.iter().map(|t| tape.leaf(t)).collect()
    }

    fn latent_shape(&self, n: usize) -> [usize; 3] {
        [n, self.config.latent_channels, self.config.latent_len()]
    }

    /// Posterior parameters for one normalized vector.
    pub fn encode(&self, l: &[f32], condition: &[f32]) -> Result<LatentCode> {
        let tape = Tape::new();
        let p = self.record(&tape);
        let (mu, logvar) = self.encode_on(&tape, &p, &[l], &[condition])?;
        Ok(LatentCode {
            mu: mu.to_tensor(),
            logvar: logvar.to_tensor(),
        })
    }

    /// Decoder mean in normalized space.
    pub fn decode(&self, z: &Tensor, condition: &[f32]) -> Result<Vec<f32>> {
        let tape = Tape::new();
        let p = self.record(&tape);
        let z = tape.constant(z.clone());
        Ok(self.decode_on(&tape, &p, z, &[condition])?.data())
    }

    /// Mean reconstruction MSE (normalized space) using posterior means.
    pub fn reconstruction_mse(&self, targets: &[&[f32]], conditions: &[&[f32]]) -> Result<f64> {
        let mut total = 0.0;
        for (t, c) in targets.iter().zip(conditions) {
            let code = self.encode(t, c)?;
            let out = self.decode(&code.mu, c)?;
            total += out.iter().zip(*t).map(|(a, b)| ((a - b) as f64).powi(2)).sum::<f64>()
                / t.len() as f64;
        }
        Ok(total / targets.len().max(1) as f64)
    }

    /// Samples `z ~ N(0, I)`, decodes and undoes the normalization.
    pub fn generate(&self, condition: &TaskVector, rng: &mut Rng) -> Result<Vec<f32>> {
        if condition.source != self.source {
            return Err(Error::ConditionSource {
                expected: self.source.to_string(),
                actual: condition.source.to_string(),
            });
        }
        let z = Tensor::gaussian(rng, &self.latent_shape(1));
        let normalized = self.decode(&z, &condition.values)?;
        self.norm.invert(&normalized)
    }

    /// Generation before denormalization, for distance checks.
    pub fn generate_normalized(&self, condition: &TaskVector, rng: &mut Rng) -> Result<Vec<f32>> {
        let raw = self.generate(condition, rng)?;
        self.norm.apply(&raw)
    }
}

/// Fits the normalization, then trains with Adam. Returns the model and the
/// per-epoch loss history.
pub fn train(
    pairs: &[TrainingPair],
    config: &CvaeConfig,
    layout: &AdapterLayout,
    seed: u64,
) -> Result<(CvaeModel, Vec<EpochStats>)> {
    if pairs.len() < 2 {
        return Err(Error::Input(format!(
            "generator training needs at least 2 pairs, got {}",
            pairs.len()
        )));
    }
    let source = pairs[0].condition.source;
    if let Some(p) = pairs.iter().find(|p| p.condition.source != source) {
        return Err(Error::ConditionSource {
            expected: source.to_string(),
            actual: p.condition.source.to_string(),
        });
    }
    let norm = NormStats::fit(pairs.iter().map(|p| p.values.as_slice()))?;
    let mut rng = Rng::new(seed);
    let mut model = CvaeModel::init(config.clone(), norm, layout.clone(), source, rng.next_u64())?;
    for p in model.params.iter_mut() {
        p.set_requires_grad(true);
    }
    let normalized: Vec<Vec<f32>> = pairs
        .iter()
        .map(|p| model.norm.apply(&p.values))
        .collect::<Result<_>>()?;
    let mut adam = Adam::new(AdamConfig::with_lr(config.lr));
    let mut order: Vec<usize> = (0..pairs.len()).collect();
    let mut history = Vec::with_capacity(config.epochs);
    for epoch in 1..=config.epochs {
        rng.shuffle(&mut order);
        let mut sums = (0.0f64, 0.0f64, 0.0f64);
        for chunk in order.chunks(config.batch) {
            let batch = Batch {
                targets: chunk.iter().map(|&i| normalized[i].as_slice()).collect(),
                conditions: chunk.iter().map(|&i| pairs[i].condition.values.as_slice()).collect(),
            };
            let eps = Tensor::gaussian(&mut rng, &model.latent_shape(chunk.len()));
            let tape = Tape::new();
            let p = model.record(&tape);
            let parts = model.loss_on(&tape, &p, &batch, &eps)?;
            let loss = parts.loss.item();
            if !loss.is_finite() {
                return Err(Error::Training {
                    epoch,
                    reason: "non-finite generator loss".into(),
                });
            }
            let w = chunk.len() as f64;
            sums.0 += loss as f64 * w;
            sums.1 += parts.mse.item() as f64 * w;
            sums.2 += parts.kl.item() as f64 * w;
            let mut grads = tape.backward(parts.loss)?;
            let taken: Vec<_> = p.iter().map(|v| grads.take(*v)).collect();
            drop(p);
            for (param, g) in model.params.iter_mut().zip(taken) {
                param.set_grad(g)?;
            }
            clip_grad_norm(&mut model.params, config.clip);
            adam.step(&mut model.params).map_err(|e| Error::Training {
                epoch,
                reason: e.to_string(),
            })?;
        }
        let n = pairs.len() as f64;
        history.push(EpochStats {
            loss: sums.0 / n,
            mse: sums.1 / n,
            kl: sums.2 / n,
        });
        if epoch % 100 == 0 {
            log::debug!("cvae epoch {epoch}: loss {:.5}", sums.0 / n);
        }
    }
    for p in model.params.iter_mut() {
        p.set_requires_grad(false);
        p.zero_grad();
    }
    Ok((model, history))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{BaseModelConfig, LoraTarget, Projection};

    fn layout(d_l: usize) -> AdapterLayout {
        // one target with d_in + d_out = d_l at rank 1
        AdapterLayout {
            rank: 1,
            alpha: 2.0,
            targets: vec![LoraTarget {
                layer: 0,
                projection: Projection::Q,
                d_in: d_l / 2,
                d_out: d_l - d_l / 2,
            }],
        }
    }

    fn mini(d_l: usize) -> CvaeModel {
        let cfg = CvaeConfig {
            n_layers: 2,
            d_l,
            d_task: 3,
            ..CvaeConfig::default()
        };
        let norm = NormStats {
            mean: vec![0.0; d_l],
            std: vec![1.0; d_l],
        };
        CvaeModel::init(cfg, norm, layout(d_l), ConditionSource::SampleDerived, 1).unwrap()
    }

    #[test]
    fn padded_and_latent_lengths() {
        let cfg = CvaeConfig {
            d_l: 512,
            ..CvaeConfig::default()
        };
        assert_eq!(cfg.padded_len(), 512);
        assert_eq!(cfg.latent_len(), 8);
        let odd = CvaeConfig {
            d_l: 100,
            n_layers: 11,
            ..CvaeConfig::default()
        };
        assert_eq!(odd.padded_len(), 128);
        assert_eq!(odd.latent_len(), 4);
        assert_eq!((0..11).filter(|&i| odd.encoder_strided(i)).count(), 5);
    }

    #[test]
    fn shapes_and_zero_heads() {
        let m = mini(16);
        let code = m.encode(&[0.0; 16], &[0.0; 3]).unwrap();
        assert_eq!(code.mu.shape(), &[1, 8, 8]);
        assert_eq!(code.logvar.shape(), &[1, 8, 8]);
        assert!(code.mu.data().iter().all(|&x| x == 0.0));
        assert!(code.logvar.data().iter().all(|&x| x == 0.0));
        let out = m.decode(&code.mu, &[1.0, 0.0, 0.0]).unwrap();
        assert_eq!(out.len(), 16);
        assert_eq!(out, m.decode(&code.mu, &[1.0, 0.0, 0.0]).unwrap());
    }

    #[test]
    fn truncates_padding() {
        let m = mini(13);
        let code = m.encode(&[0.5; 13], &[0.0; 3]).unwrap();
        assert_eq!(m.decode(&code.mu, &[0.0; 3]).unwrap().len(), 13);
        assert!(m.encode(&[0.5; 12], &[0.0; 3]).is_err());
        assert!(m.encode(&[0.5; 13], &[0.0; 2]).is_err());
    }

    #[test]
    fn param_count_independent_of_length() {
        let base = BaseModelConfig::default();
        let counts: Vec<usize> = [1, 2, 4, 8]
            .iter()
            .map(|&r| {
                let layout = AdapterLayout::for_model(&base, r).unwrap();
                let p = layout.param_count();
                let cfg = CvaeConfig {
                    d_l: p,
                    ..CvaeConfig::default()
                };
                let norm = NormStats {
                    mean: vec![0.0; p],
                    std: vec![1.0; p],
                };
                CvaeModel::init(cfg, norm, layout, ConditionSource::SampleDerived, 3)
                    .unwrap()
                    .param_count()
            })
            .collect();
        assert!(counts.windows(2).all(|w| w[0] == w[1]), "{counts:?}");
    }

    #[test]
    fn kl_closed_form_examples() {
        let tape = Tape::new();
        let mu = tape.leaf(&Tensor::zeros(&[1, 2, 3]));
        let lv = tape.leaf(&Tensor::zeros(&[1, 2, 3]));
        assert_eq!(kl_divergence(mu, lv).unwrap().item(), 0.0);
        let mu = tape.leaf(&Tensor::full(&[1, 1, 1], 1.0));
        let lv = tape.leaf(&Tensor::zeros(&[1, 1, 1]));
        assert_eq!(kl_divergence(mu, lv).unwrap().item(), 0.5);
    }

    #[test]
    fn zero_noise_gives_mean_and_unit_gradient() {
        let tape = Tape::new();
        let mu = tape.leaf(&Tensor::new(&[1, 2, 2], vec![0.1, -0.2, 0.3, 0.4]).unwrap().with_grad());
        let lv = tape.leaf(&Tensor::full(&[1, 2, 2], 0.7));
        let z = reparameterize(mu, lv, &Tensor::zeros(&[1, 2, 2])).unwrap();
        assert_eq!(z.data(), mu.data());
        let g = tape.backward(z.mean()).unwrap();
        assert!(g.get(mu).unwrap().iter().all(|&x| (x - 0.25).abs() < 1e-7));
    }

    #[test]
    fn zero_kld_weight_is_pure_mse() {
        let mut m = mini(16);
        m.config.kld_weight = 0.0;
        let t = [0.3f32; 16];
        let c = [0.1f32, 0.2, 0.3];
        let batch = Batch {
            targets: vec![&t],
            conditions: vec![&c],
        };
        let tape = Tape::new();
        let p = m.record(&tape);
        let mut rng = Rng::new(2);
        let eps = Tensor::gaussian(&mut rng, &[1, 8, 8]);
        let parts = m.loss_on(&tape, &p, &batch, &eps).unwrap();
        assert_eq!(parts.loss.item(), parts.mse.item());
    }

    #[test]
    fn condition_source_mismatch_rejected() {
        let m = mini(16);
        let v = TaskVector {
            task_id: 0,
            source: ConditionSource::DescriptionDerived,
            values: vec![0.0; 3],
        };
        assert!(matches!(
            m.generate(&v, &mut Rng::new(1)),
            Err(Error::ConditionSource { .. })
        ));
    }

    #[test]
    fn invalid_config_rejected() {
        let cfg = CvaeConfig {
            n_layers: 1,
            ..CvaeConfig::default()
        };
        assert!(matches!(cfg.validate(), Err(Error::Config { .. })));
    }

    #[test]
    fn training_is_deterministic() {
        let l = layout(16);
        let mut rng = Rng::new(5);
        let pairs: Vec<TrainingPair> = (0..6)
            .map(|i| TrainingPair {
                condition: TaskVector {
                    task_id: i % 2,
                    source: ConditionSource::SampleDerived,
                    values: vec![(i % 2) as f32, 1.0, 0.0],
                },
                values: (0..16).map(|_| rng.normal_f32()).collect(),
            })
            .collect();
        let cfg = CvaeConfig {
            n_layers: 2,
            d_l: 16,
            d_task: 3,
            epochs: 5,
            batch: 4,
            ..CvaeConfig::default()
        };
        let (a, ha) = train(&pairs, &cfg, &l, 9).unwrap();
        let (b, hb) = train(&pairs, &cfg, &l, 9).unwrap();
        assert_eq!(a, b);
        assert_eq!(ha, hb);
    }
}
