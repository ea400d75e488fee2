//! The U-shaped generator: patch embedding, an encoder of windowed-attention
//! stages joined by patch merging, a mirrored decoder with patch expanding
//! and skip fusion, and a final 4x expansion to an RGB image through tanh.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{dim_err, Error, Result};
use crate::nn::{export_stats, import_stats, BatchNorm2d, LayerNorm, Linear};
use crate::params::{trunc_normal, ParamId, ParamStore};
use crate::swin::{effective_window, swin_block, PatchEmbed, PatchExpand, PatchMerge, SwinBlockParams};
use crate::tensor::{RunningStats, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BlockKind {
    Swin,
    Conv,
}

/// Every architectural hyperparameter plus the ablation switches.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub input_size: usize,
    pub patch_size: usize,
    pub embed_dim: usize,
    pub depths: Vec<usize>,
    pub heads: Vec<usize>,
    pub window_size: usize,
    pub block_kind: BlockKind,
    pub use_discriminator: bool,
    pub discriminator_widths: Vec<usize>,
    pub lambda_l1: f32,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl ModelConfig {
    /// 64x64 inputs, small enough to train on a laptop CPU.
    pub fn desk() -> Self {
        ModelConfig {
            input_size: 64,
            patch_size: 4,
            embed_dim: 32,
            depths: vec![2, 2, 2, 2],
            heads: vec![2, 4, 4, 8],
            window_size: 4,
            block_kind: BlockKind::Swin,
            use_discriminator: true,
            discriminator_widths: vec![64, 128, 256, 512, 1],
            lambda_l1: 100.0,
            seed: 0,
        }
    }

    /// 224x224 inputs with Swin-T widths.
    pub fn full() -> Self {
        ModelConfig {
            input_size: 224,
            embed_dim: 96,
            heads: vec![3, 6, 12, 24],
            window_size: 7,
            ..Self::desk()
        }
    }

    pub fn num_stages(&self) -> usize {
        self.depths.len()
    }

    /// Token-grid side length of every encoder stage.
    pub fn stage_resolutions(&self) -> Vec<usize> {
        let first = self.input_size / self.patch_size.max(1);
        (0..self.num_stages()).map(|s| first >> s).collect()
    }

    pub fn stage_dims(&self) -> Vec<usize> {
        (0..self.num_stages()).map(|s| self.embed_dim << s).collect()
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        if self.depths.is_empty() || self.heads.len() != self.depths.len() {
            return fail(format!(
                "depths {:?} and heads {:?} must be nonempty and of equal length",
                self.depths, self.heads
            ));
        }
        if self.patch_size == 0 || self.window_size == 0 || self.embed_dim == 0 {
            return fail("patch_size, window_size and embed_dim must be positive".into());
        }
        if self.input_size == 0 || !self.input_size.is_multiple_of(self.patch_size) {
            return fail(format!(
                "input_size {} is not divisible by patch_size {}",
                self.input_size, self.patch_size
            ));
        }
        let mut res = self.input_size / self.patch_size;
        for (s, (&depth, &heads)) in self.depths.iter().zip(&self.heads).enumerate() {
            if s > 0 {
                if !res.is_multiple_of(2) {
                    return fail(format!(
                        "stage {s}: resolution {res} of the previous stage cannot be halved"
                    ));
                }
                res /= 2;
            }
            let dim = self.embed_dim << s;
            if depth == 0 {
                return fail(format!("stage {s}: depth must be at least 1"));
            }
            if self.block_kind == BlockKind::Swin {
                if heads == 0 || !dim.is_multiple_of(heads) {
                    return fail(format!("stage {s}: width {dim} is not divisible by {heads} heads"));
                }
                let (window, _) = effective_window(self.window_size, true, (res, res));
                if !res.is_multiple_of(window) {
                    return fail(format!(
                        "stage {s}: resolution {res} is not divisible by window size {window}"
                    ));
                }
            }
        }
        let w = &self.discriminator_widths;
        if w.len() < 2 || *w.last().unwrap() != 1 || w.contains(&0) {
            return fail(format!(
                "discriminator_widths {w:?} must list at least two positive widths ending in 1"
            ));
        }
        if !(self.lambda_l1.is_finite() && self.lambda_l1 >= 0.0) {
            return fail(format!(
                "lambda_l1 must be finite and nonnegative, got {}",
                self.lambda_l1
            ));
        }
        Ok(())
    }
}

/// Convolutional stand-in for a Swin block: two 3x3 conv + BN + leaky ReLU
/// layers with a residual connection, on the same token layout.
#[derive(Clone, Debug)]
pub struct ConvBlock {
    pub dim: usize,
    pub conv1: ParamId,
    pub bn1: BatchNorm2d,
    pub conv2: ParamId,
    pub bn2: BatchNorm2d,
}

pub const LEAKY_SLOPE: f32 = 0.2;

impl ConvBlock {
    pub fn new(store: &mut ParamStore, rng: &mut impl Rng, name: &str, dim: usize) -> Self {
        ConvBlock {
            dim,
            conv1: store.add(
                format!("{name}.conv1.weight"),
                trunc_normal(rng, &[dim, dim, 3, 3], 0.02),
            ),
            bn1: BatchNorm2d::new(store, &format!("{name}.bn1"), dim),
            conv2: store.add(
                format!("{name}.conv2.weight"),
                trunc_normal(rng, &[dim, dim, 3, 3], 0.02),
            ),
            bn2: BatchNorm2d::new(store, &format!("{name}.bn2"), dim),
        }
    }

    /// `[n, H*W, C]` tokens in, same shape out.
    pub fn forward(
        &mut self,
        tape: &mut Tape,
        store: &ParamStore,
        x: Var,
        height: usize,
        width: usize,
        train: bool,
    ) -> Result<Var> {
        let shape = tape.shape(x).to_vec();
        if shape.len() != 3 || shape[1] != height * width || shape[2] != self.dim {
            return Err(dim_err!(
                "conv block over {}x{}x{} got tokens {:?}",
                height,
                width,
                self.dim,
                shape
            ));
        }
        let (n, c) = (shape[0], self.dim);
        let t = tape.reshape(x, &[n, height, width, c])?;
        let img = tape.permute(t, &[0, 3, 1, 2])?;
        let mut h = img;
        for (conv, bn) in [(self.conv1, &mut self.bn1), (self.conv2, &mut self.bn2)] {
            let w = tape.param(store, conv);
            h = tape.conv2d(h, w, None, 1, 1)?;
            h = bn.forward(tape, store, h, train)?;
            h = tape.leaky_relu(h, LEAKY_SLOPE);
        }
        let out = tape.add(img, h)?;
        let out = tape.permute(out, &[0, 2, 3, 1])?;
        tape.reshape(out, &[n, height * width, c])
    }
}

#[derive(Clone, Debug)]
pub enum Block {
    Swin(SwinBlockParams),
    Conv(ConvBlock),
}

impl Block {
    fn forward(&mut self, tape: &mut Tape, store: &ParamStore, x: Var, res: usize, train: bool) -> Result<Var> {
        match self {
            Block::Swin(p) => swin_block(tape, store, x, p, res, res),
            Block::Conv(c) => c.forward(tape, store, x, res, res, train),
        }
    }
}

#[derive(Clone, Debug)]
pub struct Stage {
    pub resolution: usize,
    pub dim: usize,
    pub blocks: Vec<Block>,
}

impl Stage {
    #[allow(clippy::too_many_arguments)]
    fn new(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        name: &str,
        cfg: &ModelConfig,
        resolution: usize,
        dim: usize,
        depth: usize,
        heads: usize,
    ) -> Result<Self> {
        let mut blocks = Vec::with_capacity(depth);
        for b in 0..depth {
            let block_name = format!("{name}.block{b}");
            blocks.push(match cfg.block_kind {
                BlockKind::Swin => Block::Swin(SwinBlockParams::new(
                    store,
                    rng,
                    &block_name,
                    dim,
                    heads,
                    cfg.window_size,
                    b % 2 == 1,
                    (resolution, resolution),
                )?),
                BlockKind::Conv => Block::Conv(ConvBlock::new(store, rng, &block_name, dim)),
            });
        }
        Ok(Stage {
            resolution,
            dim,
            blocks,
        })
    }

    fn forward(&mut self, tape: &mut Tape, store: &ParamStore, mut x: Var, train: bool) -> Result<Var> {
        for block in &mut self.blocks {
            x = block.forward(tape, store, x, self.resolution, train)?;
        }
        Ok(x)
    }
}

#[derive(Clone, Debug)]
pub struct DecoderStage {
    pub expand: PatchExpand,
    /// Concatenated `[decoder, skip]` features projected back to the stage width.
    pub fuse: Linear,
    pub stage: Stage,
}

/// The generator network together with its parameters.
#[derive(Clone, Debug)]
pub struct Generator {
    pub config: ModelConfig,
    pub params: ParamStore,
    pub embed: PatchEmbed,
    pub encoder: Vec<Stage>,
    pub merges: Vec<PatchMerge>,
    pub decoder: Vec<DecoderStage>,
    pub norm: LayerNorm,
    pub final_expand: PatchExpand,
    pub head: Linear,
}

impl Generator {
    /// Deterministic initialization from `seed`.
    pub fn build(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let resolutions = cfg.stage_resolutions();
        let dims = cfg.stage_dims();
        let stages = cfg.num_stages();

        let embed = PatchEmbed::new(&mut store, &mut rng, "embed", cfg.patch_size, cfg.embed_dim);
        let mut encoder = Vec::with_capacity(stages);
        let mut merges = Vec::new();
        for s in 0..stages {
            encoder.push(Stage::new(
                &mut store,
                &mut rng,
                &format!("enc{s}"),
                cfg,
                resolutions[s],
                dims[s],
                cfg.depths[s],
                cfg.heads[s],
            )?);
            if s + 1 < stages {
                merges.push(PatchMerge::new(&mut store, &mut rng, &format!("merge{s}"), dims[s]));
            }
        }
        let mut decoder = Vec::new();
        for s in (0..stages - 1).rev() {
            let name = format!("dec{s}");
            decoder.push(DecoderStage {
                expand: PatchExpand::new(&mut store, &mut rng, &format!("{name}.up"), dims[s + 1])?,
                fuse: Linear::new(
                    &mut store,
                    &mut rng,
                    &format!("{name}.fuse"),
                    2 * dims[s],
                    dims[s],
                    true,
                ),
                stage: Stage::new(
                    &mut store,
                    &mut rng,
                    &name,
                    cfg,
                    resolutions[s],
                    dims[s],
                    cfg.depths[s],
                    cfg.heads[s],
                )?,
            });
        }
        let norm = LayerNorm::new(&mut store, "out.norm", cfg.embed_dim);
        let final_expand = PatchExpand::with_factor(
            &mut store,
            &mut rng,
            "out.up",
            cfg.embed_dim,
            cfg.embed_dim,
            cfg.patch_size,
        );
        let head = Linear::new(&mut store, &mut rng, "out.head", cfg.embed_dim, 3, true);
        let generator = Generator {
            config: cfg.clone(),
            params: store,
            embed,
            encoder,
            merges,
            decoder,
            norm,
            final_expand,
            head,
        };
        debug_assert!(generator.params.iter().all(|p| p.value.is_finite()));
        Ok(generator)
    }

    pub fn num_params(&self) -> usize {
        self.params.num_scalars()
    }

    /// `[n, 3, S, S]` in `[-1, 1]` to an image of the same shape in `(-1, 1)`.
    ///
    /// `train` only matters for the batch-norm layers of conv blocks.
    pub fn forward(&mut self, tape: &mut Tape, x: Var, train: bool) -> Result<Var> {
        let shape = tape.shape(x).to_vec();
        let size = self.config.input_size;
        if shape.len() != 4 || shape[1] != 3 || shape[2] != size || shape[3] != size {
            return Err(dim_err!(
                "generator expects [n, 3, {}, {}], got {:?}",
                size,
                size,
                shape
            ));
        }
        let n = shape[0];
        let store = &self.params;
        let mut h = self.embed.forward(tape, store, x)?;
        let mut skips = Vec::with_capacity(self.encoder.len());
        for (s, stage) in self.encoder.iter_mut().enumerate() {
            h = stage.forward(tape, store, h, train)?;
            if let Some(merge) = self.merges.get(s) {
                skips.push(h);
                h = merge.forward(tape, store, h, stage.resolution, stage.resolution)?;
            }
        }
        for dec in &mut self.decoder {
            let coarse = dec.stage.resolution / 2;
            h = dec.expand.forward(tape, store, h, coarse, coarse)?;
            let skip = skips.pop().expect("one skip per decoder stage");
            let joined = tape.concat(&[h, skip], -1)?;
            h = dec.fuse.forward(tape, store, joined)?;
            h = dec.stage.forward(tape, store, h, train)?;
        }
        let res = self.encoder[0].resolution;
        h = self.norm.forward(tape, store, h)?;
        h = self.final_expand.forward(tape, store, h, res, res)?;
        h = self.head.forward(tape, store, h)?;
        let h = tape.tanh(h);
        let h = tape.reshape(h, &[n, size, size, 3])?;
        tape.permute(h, &[0, 3, 1, 2])
    }

    /// Inference without gradient bookkeeping for the caller.
    pub fn enhance(&mut self, x: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let input = tape.constant(x.clone());
        let out = self.forward(&mut tape, input, false)?;
        Ok(tape.value(out).clone())
    }

    fn batch_norms_mut(&mut self) -> Vec<(String, &mut RunningStats)> {
        let mut out = Vec::new();
        let stages = self.encoder.len();
        for (s, stage) in self.encoder.iter_mut().enumerate() {
            collect_stats(&format!("enc{s}"), stage, &mut out);
        }
        for (i, dec) in self.decoder.iter_mut().enumerate() {
            let prefix = format!("dec{}", stages - 2 - i);
            collect_stats(&prefix, &mut dec.stage, &mut out);
        }
        out
    }

    /// Non-trainable state (batch-norm running statistics) as named tensors.
    pub fn buffers(&mut self) -> Vec<(String, Tensor)> {
        let stats = self.batch_norms_mut();
        export_stats(stats.into_iter().map(|(n, s)| (n, &*s)))
    }

    pub fn load_buffers<'a>(&mut self, lookup: impl FnMut(&str) -> Option<&'a Tensor>) -> Result<()> {
        import_stats(self.batch_norms_mut().into_iter(), lookup)
    }
}

fn collect_stats<'a>(prefix: &str, stage: &'a mut Stage, out: &mut Vec<(String, &'a mut RunningStats)>) {
    for (b, block) in stage.blocks.iter_mut().enumerate() {
        if let Block::Conv(c) = block {
            out.push((format!("{prefix}.block{b}.bn1"), &mut c.bn1.stats));
            out.push((format!("{prefix}.block{b}.bn2"), &mut c.bn2.stats));
        }
    }
}
