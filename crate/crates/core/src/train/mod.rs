//! Losses, optimizer, the alternating update and checkpoint persistence.

pub mod adam;
pub mod checkpoint;
pub mod loss;

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{augment_hflip, Batch, ImagePair};
use crate::discriminator::Discriminator;
use crate::error::{Error, Result};
use crate::generator::{Generator, ModelConfig};
use crate::params::ParamStore;
use crate::tensor::{Tape, Tensor};
use adam::{Adam, AdamConfig};
use checkpoint::{CheckpointData, CheckpointError};
use loss::{loss_discriminator, loss_generator, loss_l1};

/// Everything needed to continue training exactly where it stopped.
#[derive(Clone, Debug)]
pub struct TrainingState {
    pub config: ModelConfig,
    pub lambda_l1: f32,
    pub generator: Generator,
    pub discriminator: Option<Discriminator>,
    pub adam_g: Adam,
    pub adam_d: Option<Adam>,
    /// Completed calls to [`train_step`].
    pub step: u64,
    /// Completed calls to [`train_epoch`].
    pub epoch: u64,
    /// Drives shuffling and augmentation.
    pub rng: ChaCha8Rng,
}

/// Scalar losses of one step. `d` is absent when the discriminator is disabled.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct StepLosses {
    pub d: Option<f32>,
    pub g: f32,
    pub l1: f32,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct EpochSummary {
    pub epoch: u64,
    pub steps: u64,
    pub loss_d: Option<f32>,
    pub loss_g: f32,
    pub l1: f32,
}

impl TrainingState {
    /// Fresh networks and optimizers. The generator, discriminator and data
    /// stream draw from seeds derived from `config.seed`.
    pub fn new(config: &ModelConfig, optim: AdamConfig) -> Result<Self> {
        let generator = Generator::build(config, config.seed)?;
        let discriminator = config
            .use_discriminator
            .then(|| Discriminator::with_widths(&config.discriminator_widths, config.seed.wrapping_add(1)));
        let adam_g = Adam::new(optim, &generator.params);
        let adam_d = discriminator.as_ref().map(|d| Adam::new(optim, &d.params));
        Ok(TrainingState {
            config: config.clone(),
            lambda_l1: config.lambda_l1,
            generator,
            discriminator,
            adam_g,
            adam_d,
            step: 0,
            epoch: 0,
            rng: ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(2)),
        })
    }

    pub fn save(&mut self, path: &Path) -> Result<()> {
        let (header, tensors) = self.to_parts()?;
        checkpoint::write(path, &header, &tensors)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_checkpoint(&checkpoint::read(path)?)
    }

    fn header(&self) -> Header {
        Header {
            model: self.config.clone(),
            optim: self.adam_g.config,
            lambda_l1: self.lambda_l1,
            step: self.step,
            epoch: self.epoch,
            adam_g_t: self.adam_g.t,
            adam_d_t: self.adam_d.as_ref().map(|a| a.t),
            rng: RngState {
                seed: self.rng.get_seed().iter().map(|b| format!("{b:02x}")).collect(),
                stream: self.rng.get_stream(),
                word_pos: self.rng.get_word_pos().to_string(),
            },
        }
    }

    pub fn to_parts(&mut self) -> Result<(String, Vec<(String, Tensor)>)> {
        let header = serde_json::to_string(&self.header())?;
        let mut tensors = Vec::new();
        export_network(&mut tensors, "gen", &self.generator.params, &self.adam_g);
        tensors.extend(prefixed("gen.buffer", self.generator.buffers()));
        if let (Some(d), Some(a)) = (&self.discriminator, &self.adam_d) {
            export_network(&mut tensors, "disc", &d.params, a);
            tensors.extend(prefixed("disc.buffer", d.buffers()));
        }
        Ok((header, tensors))
    }

    pub fn from_checkpoint(data: &CheckpointData) -> Result<Self> {
        let header: Header =
            serde_json::from_str(&data.header).map_err(|e| CheckpointError::Malformed(format!("header: {e}")))?;
        let mut state = TrainingState::new(&header.model, header.optim)?;
        state.lambda_l1 = header.lambda_l1;
        state.step = header.step;
        state.epoch = header.epoch;
        import_network(
            data,
            "gen",
            &mut state.generator.params,
            &mut state.adam_g,
            header.adam_g_t,
        )?;
        state
            .generator
            .load_buffers(|n| data.tensor(&format!("gen.buffer.{n}")))?;
        if let (Some(d), Some(a)) = (&mut state.discriminator, &mut state.adam_d) {
            let t = header
                .adam_d_t
                .ok_or_else(|| CheckpointError::Malformed("missing discriminator step count".into()))?;
            import_network(data, "disc", &mut d.params, a, t)?;
            d.load_buffers(|n| data.tensor(&format!("disc.buffer.{n}")))?;
        }
        state.rng = header.rng.restore()?;
        Ok(state)
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    model: ModelConfig,
    optim: AdamConfig,
    lambda_l1: f32,
    step: u64,
    epoch: u64,
    adam_g_t: u64,
    adam_d_t: Option<u64>,
    rng: RngState,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RngState {
    /// 32 bytes as hex.
    seed: String,
    stream: u64,
    /// Decimal `u128`.
    word_pos: String,
}

impl RngState {
    fn restore(&self) -> Result<ChaCha8Rng> {
        let bad = || Error::from(CheckpointError::Malformed("invalid generator state".into()));
        if self.seed.len() != 64 {
            return Err(bad());
        }
        let mut seed = [0u8; 32];
        for (i, byte) in seed.iter_mut().enumerate() {
            *byte = u8::from_str_radix(&self.seed[2 * i..2 * i + 2], 16).map_err(|_| bad())?;
        }
        let mut rng = ChaCha8Rng::from_seed(seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos.parse().map_err(|_| bad())?);
        Ok(rng)
    }
}

fn prefixed(prefix: &str, tensors: Vec<(String, Tensor)>) -> impl Iterator<Item = (String, Tensor)> + '_ {
    tensors.into_iter().map(move |(n, t)| (format!("{prefix}.{n}"), t))
}

fn export_network(out: &mut Vec<(String, Tensor)>, prefix: &str, store: &ParamStore, adam: &Adam) {
    for ((p, m), v) in store.iter().zip(&adam.m).zip(&adam.v) {
        let shape = p.value.shape().to_vec();
        out.push((format!("{prefix}.param.{}", p.name), p.value.clone()));
        out.push((
            format!("{prefix}.adam_m.{}", p.name),
            Tensor::from_parts(shape.clone(), m.clone()),
        ));
        out.push((
            format!("{prefix}.adam_v.{}", p.name),
            Tensor::from_parts(shape, v.clone()),
        ));
    }
}

fn import_network(data: &CheckpointData, prefix: &str, store: &mut ParamStore, adam: &mut Adam, t: u64) -> Result<()> {
    store.load_named(|n| data.tensor(&format!("{prefix}.param.{n}")))?;
    for (i, p) in store.iter().enumerate() {
        for (kind, buf) in [("adam_m", &mut adam.m[i]), ("adam_v", &mut adam.v[i])] {
            let name = format!("{prefix}.{kind}.{}", p.name);
            let t = data
                .tensor(&name)
                .filter(|t| t.shape() == p.value.shape())
                .ok_or_else(|| Error::Config(format!("checkpoint lacks a matching `{name}`")))?;
            buf.copy_from_slice(t.data());
        }
    }
    adam.t = t;
    Ok(())
}

/// One discriminator update on real and detached fake pairs, then one
/// generator update. Without a discriminator only `lambda * L1` is minimized.
pub fn train_step(state: &mut TrainingState, batch: &Batch) -> Result<StepLosses> {
    let lambda = state.lambda_l1;
    let mut tape = Tape::new();
    let degraded = tape.constant(batch.degraded.clone());
    let reference = tape.constant(batch.reference.clone());
    let fake = state.generator.forward(&mut tape, degraded, true)?;

    let Some(disc) = state.discriminator.as_mut() else {
        let l1 = loss_l1(&mut tape, fake, reference)?;
        let total = tape.scale(l1, lambda);
        tape.backward_into(total, &mut [&mut state.generator.params])?;
        state.adam_g.step(&mut state.generator.params)?;
        state.step += 1;
        return Ok(StepLosses {
            d: None,
            g: tape.value(total).item(),
            l1: tape.value(l1).item(),
        });
    };
    let adam_d = state.adam_d.as_mut().expect("discriminator has an optimizer");

    let loss_d = {
        let mut d_tape = Tape::new();
        let deg = d_tape.constant(batch.degraded.clone());
        let real = d_tape.constant(batch.reference.clone());
        let detached = d_tape.constant(tape.value(fake).clone());
        let d_real = disc.score(&mut d_tape, deg, real, true)?;
        let d_fake = disc.score(&mut d_tape, deg, detached, true)?;
        let l = loss_discriminator(&mut d_tape, d_real, d_fake)?;
        d_tape.backward_into(l, &mut [&mut disc.params])?;
        adam_d.step(&mut disc.params)?;
        d_tape.value(l).item()
    };

    let d_fake = disc.score(&mut tape, degraded, fake, true)?;
    let g = loss_generator(&mut tape, d_fake, fake, reference, lambda)?;
    tape.backward_into(g.total, &mut [&mut state.generator.params])?;
    state.adam_g.step(&mut state.generator.params)?;
    state.step += 1;
    Ok(StepLosses {
        d: Some(loss_d),
        g: tape.value(g.total).item(),
        l1: tape.value(g.l1).item(),
    })
}

/// One shuffled, flip-augmented pass over `pairs`; the last batch may be short.
pub fn train_epoch(state: &mut TrainingState, pairs: &[ImagePair], batch_size: usize) -> Result<EpochSummary> {
    if pairs.is_empty() || batch_size == 0 {
        return Err(Error::Contract("an epoch needs pairs and a positive batch size".into()));
    }
    let mut order: Vec<usize> = (0..pairs.len()).collect();
    order.shuffle(&mut state.rng);
    let (mut sum_d, mut sum_g, mut sum_l1, mut steps) = (0.0f64, 0.0f64, 0.0f64, 0u64);
    let mut any_d = false;
    for chunk in order.chunks(batch_size) {
        let augmented: Vec<ImagePair> = chunk
            .iter()
            .map(|&i| augment_hflip(&pairs[i], &mut state.rng))
            .collect();
        let losses = train_step(state, &Batch::from_pairs(&augmented)?)?;
        if let Some(d) = losses.d {
            sum_d += d as f64;
            any_d = true;
        }
        sum_g += losses.g as f64;
        sum_l1 += losses.l1 as f64;
        steps += 1;
    }
    state.epoch += 1;
    let mean = |s: f64| (s / steps as f64) as f32;
    Ok(EpochSummary {
        epoch: state.epoch,
        steps,
        loss_d: any_d.then(|| mean(sum_d)),
        loss_g: mean(sum_g),
        l1: mean(sum_l1),
    })
}
