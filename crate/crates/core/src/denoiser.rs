//! Conditional noise-prediction network ε_θ(x_t, t, c).
//!
//! Layout, with `C = base_channels` and constant temporal resolution `L`:
//!
//! ```text
//! [x_t ; c] (12) ─ enc1 (C) ─ enc2 (C) ─ enc3 (2C) ─ transformer (2C) ─ dec1 (C) ─ dec2 (C) ┐
//!                    └────────────────────── skip ──────────────────────────────────────────┴─ 1×1 conv (6)
//! ```
//!
//! Each encoder/decoder block is conv(k=3) → batch norm → ReLU. The time
//! embedding (2C wide) is added to enc3 directly and to enc1/enc2 through a
//! learned 2C→C projection.

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use indexmap::IndexMap;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use vimu_autodiff::checkpoint::{read_tensors, write_tensors};
use vimu_autodiff::{AttentionProjections, Graph, NormMode, Tensor, Var};

use crate::data::{NormStats, CHANNELS};
use crate::error::{Error, Result};
use crate::schedule::AxisSchedule;
use crate::sim::NoiseParams;

pub const KERNEL: usize = 3;
pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;
pub const LN_EPS: f64 = 1e-5;
pub const CHECKPOINT_KIND: &str = "vimu-denoiser";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct DenoiserConfig {
    pub base_channels: usize,
    pub heads: usize,
    pub ffn_multiplier: usize,
    pub window_len: usize,
    pub in_channels: usize,
    pub out_channels: usize,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        Self {
            base_channels: 32,
            heads: 4,
            ffn_multiplier: 4,
            window_len: 200,
            in_channels: 2 * CHANNELS,
            out_channels: CHANNELS,
        }
    }
}

impl DenoiserConfig {
    pub fn tiny(base_channels: usize, heads: usize, window_len: usize) -> Self {
        Self {
            base_channels,
            heads,
            window_len,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let c = self.base_channels;
        if c == 0 || self.heads == 0 || c % (2 * self.heads) != 0 {
            return Err(Error::Config(format!(
                "base_channels {c} must be a positive multiple of 2 x heads ({})",
                self.heads
            )));
        }
        if c < 4 {
            return Err(Error::Config(format!("base_channels {c} is below 4")));
        }
        if self.ffn_multiplier == 0 {
            return Err(Error::Config("ffn_multiplier must be positive".into()));
        }
        if self.window_len < 4 {
            return Err(Error::Config(format!("window_len {} is below 4", self.window_len)));
        }
        if self.in_channels != 2 * CHANNELS || self.out_channels != CHANNELS {
            return Err(Error::Config(format!(
                "in/out channels must be {}/{CHANNELS}, got {}/{}",
                2 * CHANNELS,
                self.in_channels,
                self.out_channels
            )));
        }
        Ok(())
    }

    /// Hidden width of the bottleneck feed-forward layer.
    pub fn ffn_width(&self) -> usize {
        2 * self.base_channels * self.ffn_multiplier
    }
}

#[derive(Clone, Copy)]
enum Init {
    HeUniform(usize),
    Zeros,
    Ones,
}

/// Every trainable tensor, in a fixed order, with its initialiser.
fn param_specs(cfg: &DenoiserConfig) -> Vec<(String, Vec<usize>, Init)> {
    let c = cfg.base_channels;
    let c2 = 2 * c;
    let f = cfg.ffn_width();
    let mut v: Vec<(String, Vec<usize>, Init)> = Vec::new();
    let linear = |v: &mut Vec<_>, name: &str, out: usize, inp: usize| {
        v.push((format!("{name}.w"), vec![out, inp], Init::HeUniform(inp)));
        v.push((format!("{name}.b"), vec![out], Init::Zeros));
    };
    linear(&mut v, "time.mlp1", c2, c);
    linear(&mut v, "time.mlp2", c2, c2);
    let conv_block = |v: &mut Vec<_>, name: &str, out: usize, inp: usize| {
        v.push((
            format!("{name}.conv.w"),
            vec![out, inp, KERNEL],
            Init::HeUniform(inp * KERNEL),
        ));
        v.push((format!("{name}.conv.b"), vec![out], Init::Zeros));
        v.push((format!("{name}.bn.gamma"), vec![out], Init::Ones));
        v.push((format!("{name}.bn.beta"), vec![out], Init::Zeros));
    };
    conv_block(&mut v, "enc1", c, cfg.in_channels);
    linear(&mut v, "enc1.time", c, c2);
    conv_block(&mut v, "enc2", c, c);
    linear(&mut v, "enc2.time", c, c2);
    conv_block(&mut v, "enc3", c2, c);
    for p in ["q", "k", "v", "o"] {
        linear(&mut v, &format!("mid.attn.{p}"), c2, c2);
    }
    let norm = |v: &mut Vec<_>, name: &str, d: usize| {
        v.push((format!("{name}.gamma"), vec![d], Init::Ones));
        v.push((format!("{name}.beta"), vec![d], Init::Zeros));
    };
    norm(&mut v, "mid.ln1", c2);
    linear(&mut v, "mid.ffn1", f, c2);
    linear(&mut v, "mid.ffn2", c2, f);
    norm(&mut v, "mid.ln2", c2);
    conv_block(&mut v, "dec1", c, c2);
    conv_block(&mut v, "dec2", c, c);
    v.push(("out.w".into(), vec![cfg.out_channels, c2, 1], Init::HeUniform(c2)));
    v.push(("out.b".into(), vec![cfg.out_channels], Init::Zeros));
    v
}

/// Batch-norm layers, in forward order.
pub const NORM_LAYERS: [&str; 5] = ["enc1", "enc2", "enc3", "dec1", "dec2"];

fn buffer_specs(cfg: &DenoiserConfig) -> Vec<(String, Vec<usize>, Init)> {
    let c = cfg.base_channels;
    let widths = [c, c, 2 * c, c, c];
    NORM_LAYERS
        .iter()
        .zip(widths)
        .flat_map(|(name, w)| {
            [
                (format!("{name}.bn.running_mean"), vec![w], Init::Zeros),
                (format!("{name}.bn.running_var"), vec![w], Init::Ones),
            ]
        })
        .collect()
}

/// Trainable parameters plus batch-norm running statistics.
#[derive(Clone, Debug, PartialEq)]
pub struct DenoiserWeights {
    pub config: DenoiserConfig,
    pub params: IndexMap<String, Tensor>,
    pub buffers: IndexMap<String, Tensor>,
}

/// He-uniform `U(±√(6/fan_in))` for conv and linear weights, zero biases,
/// unit/zero normalisation affine terms, running mean 0 and variance 1.
pub fn init_weights(config: &DenoiserConfig, seed: u64) -> Result<DenoiserWeights> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut build = |specs: Vec<(String, Vec<usize>, Init)>| -> IndexMap<String, Tensor> {
        specs
            .into_iter()
            .map(|(name, shape, init)| {
                let t = match init {
                    Init::Zeros => Tensor::zeros(&shape),
                    Init::Ones => Tensor::full(&shape, 1.0),
                    Init::HeUniform(fan_in) => {
                        let bound = (6.0 / fan_in as f64).sqrt();
                        let n = shape.iter().product();
                        let data = (0..n).map(|_| rng.random_range(-bound..bound)).collect();
                        Tensor::new(shape, data).expect("consistent shape")
                    }
                };
                (name, t)
            })
            .collect()
    };
    let params = build(param_specs(config));
    let buffers = build(buffer_specs(config));
    Ok(DenoiserWeights {
        config: *config,
        params,
        buffers,
    })
}

/// Sinusoidal embedding `[sin(t·f_j) | cos(t·f_j)]` with `f_j` log-spaced
/// from 1 down to 1/10000. Returns `[t.len(), dim]`.
pub fn timestep_embedding(t: &[usize], dim: usize) -> Tensor {
    let half = dim / 2;
    let freqs: Vec<f64> = (0..half)
        .map(|j| {
            if half > 1 {
                (-(10000f64.ln()) * j as f64 / (half - 1) as f64).exp()
            } else {
                1.0
            }
        })
        .collect();
    let mut data = vec![0.0; t.len() * dim];
    for (b, &step) in t.iter().enumerate() {
        let row = &mut data[b * dim..(b + 1) * dim];
        for (j, f) in freqs.iter().enumerate() {
            let (s, c) = (step as f64 * f).sin_cos();
            row[j] = s;
            row[half + j] = c;
        }
    }
    Tensor::new(vec![t.len(), dim], data).expect("consistent shape")
}

/// Graph handles of one forward pass.
pub struct ForwardPass {
    pub eps_hat: Var,
    /// Batch-norm outputs by layer name, for running-statistics updates.
    pub norms: Vec<(&'static str, Var)>,
}

impl DenoiserWeights {
    pub fn param_count(&self) -> usize {
        self.params.values().map(Tensor::numel).sum()
    }

    /// Registers every parameter as a trainable graph leaf.
    pub fn bind(&self, g: &mut Graph) -> IndexMap<String, Var> {
        self.params.iter().map(|(k, t)| (k.clone(), g.param(t))).collect()
    }

    /// Registers every parameter as a constant (no gradients).
    pub fn bind_constant(&self, g: &mut Graph) -> IndexMap<String, Var> {
        self.params
            .iter()
            .map(|(k, t)| (k.clone(), g.constant(t.clone())))
            .collect()
    }

    fn buffer(&self, name: &str) -> &[f64] {
        self.buffers[name].data()
    }

    /// Builds ε̂ for `x_t`, `c` (`[B, 6, L]` graph nodes) at steps `t`.
    pub fn forward(
        &self,
        g: &mut Graph,
        p: &IndexMap<String, Var>,
        x_t: Var,
        t: &[usize],
        c: Var,
        mode: NormMode,
    ) -> Result<ForwardPass> {
        let cfg = &self.config;
        let shape = g.shape(x_t).to_vec();
        let expected = [t.len(), CHANNELS, cfg.window_len];
        if shape != expected || g.shape(c) != expected {
            return Err(Error::Contract(format!(
                "denoiser expects x_t and c of shape {expected:?}, got {shape:?} and {:?}",
                g.shape(c)
            )));
        }
        let pv = |name: &str| p[name];
        let mut norms = Vec::with_capacity(NORM_LAYERS.len());

        let emb = g.constant(timestep_embedding(t, cfg.base_channels));
        let h = g.linear(emb, pv("time.mlp1.w"), pv("time.mlp1.b"))?;
        let h = g.gelu(h);
        let temb = g.linear(h, pv("time.mlp2.w"), pv("time.mlp2.b"))?;

        let mut block = |g: &mut Graph, name: &'static str, x: Var| -> Result<Var> {
            let y = g.conv1d(x, pv(&format!("{name}.conv.w")), pv(&format!("{name}.conv.b")))?;
            let y = g.batch_norm_1d(
                y,
                pv(&format!("{name}.bn.gamma")),
                pv(&format!("{name}.bn.beta")),
                (
                    self.buffer(&format!("{name}.bn.running_mean")),
                    self.buffer(&format!("{name}.bn.running_var")),
                ),
                mode,
                BN_EPS,
            )?;
            norms.push((name, y));
            Ok(g.relu(y))
        };
        let add_time = |g: &mut Graph, x: Var, name: &str| -> Result<Var> {
            let proj = g.linear(temb, pv(&format!("{name}.time.w")), pv(&format!("{name}.time.b")))?;
            Ok(g.broadcast_add(x, proj)?)
        };

        let input = g.concat(&[x_t, c], 1)?;
        let e1 = block(g, "enc1", input)?;
        let e1 = add_time(g, e1, "enc1")?;
        let e2 = block(g, "enc2", e1)?;
        let e2 = add_time(g, e2, "enc2")?;
        let e3 = block(g, "enc3", e2)?;
        let e3 = g.broadcast_add(e3, temb)?;

        let tokens = g.transpose_last2(e3)?;
        let proj = AttentionProjections {
            wq: pv("mid.attn.q.w"),
            bq: pv("mid.attn.q.b"),
            wk: pv("mid.attn.k.w"),
            bk: pv("mid.attn.k.b"),
            wv: pv("mid.attn.v.w"),
            bv: pv("mid.attn.v.b"),
            wo: pv("mid.attn.o.w"),
            bo: pv("mid.attn.o.b"),
        };
        let attn = g.multi_head_attention(tokens, &proj, cfg.heads)?;
        let z = g.add(tokens, attn)?;
        let z = g.layer_norm(z, pv("mid.ln1.gamma"), pv("mid.ln1.beta"), LN_EPS)?;
        let f = g.linear(z, pv("mid.ffn1.w"), pv("mid.ffn1.b"))?;
        let f = g.gelu(f);
        let f = g.linear(f, pv("mid.ffn2.w"), pv("mid.ffn2.b"))?;
        let z = g.add(z, f)?;
        let z = g.layer_norm(z, pv("mid.ln2.gamma"), pv("mid.ln2.beta"), LN_EPS)?;
        let z = g.transpose_last2(z)?;

        let d1 = block(g, "dec1", z)?;
        let d2 = block(g, "dec2", d1)?;
        let fused = g.concat(&[e1, d2], 1)?;
        let eps_hat = g.conv1d(fused, pv("out.w"), pv("out.b"))?;
        Ok(ForwardPass { eps_hat, norms })
    }

    /// Eval-mode ε̂ for `[B, 6, L]` inputs.
    pub fn predict(&self, x_t: &Tensor, t: &[usize], c: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let p = self.bind_constant(&mut g);
        let x = g.constant(x_t.clone());
        let c = g.constant(c.clone());
        let fp = self.forward(&mut g, &p, x, t, c, NormMode::Eval)?;
        Ok(g.value(fp.eps_hat).clone())
    }

    /// Exponential moving update of the running statistics from a
    /// train-mode pass; the variance is stored unbiased.
    pub fn update_running_stats(&mut self, g: &Graph, pass: &ForwardPass) {
        for (name, var) in &pass.norms {
            let Some((mean, var_b)) = g.batch_stats(*var) else {
                continue;
            };
            let s = g.shape(*var);
            let n = (s[0] * s[2]) as f64;
            let correction = if n > 1.0 { n / (n - 1.0) } else { 1.0 };
            let rm = self
                .buffers
                .get_mut(&format!("{name}.bn.running_mean"))
                .expect("buffer");
            for (r, m) in rm.data_mut().iter_mut().zip(mean) {
                *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * m;
            }
            let rv = self.buffers.get_mut(&format!("{name}.bn.running_var")).expect("buffer");
            for (r, v) in rv.data_mut().iter_mut().zip(var_b) {
                *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * v * correction;
            }
        }
    }

    pub fn is_finite(&self) -> bool {
        self.params.values().chain(self.buffers.values()).all(Tensor::is_finite)
    }

    /// Checks names and shapes against a freshly initialised model.
    fn check_layout(&self) -> Result<()> {
        let fresh = init_weights(&self.config, 0)?;
        for (kind, have, want) in [
            ("parameter", &self.params, &fresh.params),
            ("buffer", &self.buffers, &fresh.buffers),
        ] {
            if have.len() != want.len() {
                return Err(Error::Format(format!(
                    "checkpoint has {} {kind}s, config implies {}",
                    have.len(),
                    want.len()
                )));
            }
            for (name, t) in want {
                match have.get(name) {
                    Some(h) if h.shape() == t.shape() => {}
                    Some(h) => {
                        return Err(Error::Format(format!(
                            "{kind} {name} has shape {:?}, config implies {:?}",
                            h.shape(),
                            t.shape()
                        )))
                    }
                    None => return Err(Error::Format(format!("checkpoint lacks {kind} {name}"))),
                }
            }
        }
        Ok(())
    }
}

/// Trained network plus everything needed to sample with it.
#[derive(Clone, Debug, PartialEq)]
pub struct DenoiserCheckpoint {
    pub weights: DenoiserWeights,
    pub norm_stats: NormStats,
    /// Low-cost noise coefficients in physical units.
    pub noise_params: NoiseParams,
    pub schedule: AxisSchedule,
    /// Free-form training provenance.
    pub training: serde_json::Value,
}

#[derive(Serialize, Deserialize)]
struct CheckpointMeta {
    kind: String,
    config: DenoiserConfig,
    norm_stats: NormStats,
    noise_params: NoiseParams,
    schedule: AxisSchedule,
    #[serde(default)]
    training: serde_json::Value,
}

const BUFFER_PREFIX: &str = "buffer:";

impl DenoiserCheckpoint {
    pub fn config(&self) -> &DenoiserConfig {
        &self.weights.config
    }

    pub fn write_to<W: Write>(&self, out: W) -> Result<()> {
        let meta = CheckpointMeta {
            kind: CHECKPOINT_KIND.into(),
            config: self.weights.config,
            norm_stats: self.norm_stats.clone(),
            noise_params: self.noise_params.clone(),
            schedule: self.schedule.clone(),
            training: self.training.clone(),
        };
        let names: Vec<String> = self
            .weights
            .params
            .keys()
            .cloned()
            .chain(self.weights.buffers.keys().map(|k| format!("{BUFFER_PREFIX}{k}")))
            .collect();
        let tensors: Vec<(&str, &Tensor)> = names
            .iter()
            .zip(self.weights.params.values().chain(self.weights.buffers.values()))
            .map(|(n, t)| (n.as_str(), t))
            .collect();
        write_tensors(out, &serde_json::to_value(&meta)?, &tensors)?;
        Ok(())
    }

    pub fn read_from<R: std::io::Read>(input: R) -> Result<Self> {
        let (meta, tensors) = read_tensors(input)?;
        let meta: CheckpointMeta = serde_json::from_value(meta)?;
        if meta.kind != CHECKPOINT_KIND {
            return Err(Error::Format(format!(
                "checkpoint kind {:?} is not {CHECKPOINT_KIND}",
                meta.kind
            )));
        }
        meta.config.validate()?;
        if meta.schedule.beta.iter().any(|b| b.len() != meta.schedule.steps()) {
            return Err(Error::Format("schedule arrays do not match the step count".into()));
        }
        let mut params = IndexMap::new();
        let mut buffers = IndexMap::new();
        for (name, t) in tensors {
            match name.strip_prefix(BUFFER_PREFIX) {
                Some(b) => buffers.insert(b.to_string(), t),
                None => params.insert(name, t),
            };
        }
        let weights = DenoiserWeights {
            config: meta.config,
            params,
            buffers,
        };
        weights.check_layout()?;
        Ok(Self {
            weights,
            norm_stats: meta.norm_stats,
            noise_params: meta.noise_params,
            schedule: meta.schedule,
            training: meta.training,
        })
    }

    /// Writes to a temporary sibling and renames it into place.
    pub fn save(&self, path: &Path) -> Result<()> {
        let io = |e| Error::io(path, e);
        let tmp = path.with_extension("tmp");
        {
            let mut w = BufWriter::new(File::create(&tmp).map_err(io)?);
            self.write_to(&mut w)?;
            w.flush().map_err(io)?;
        }
        std::fs::rename(&tmp, path).map_err(io)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let f = File::open(path).map_err(|e| Error::io(path, e))?;
        Self::read_from(BufReader::new(f))
    }
}
