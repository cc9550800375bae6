//! Five-block 3D CNN shared between timepoints. Each block applies two
//! conv-BN-LeakyReLU units followed by channel recalibration (DCCA); blocks
//! 1-4 end with a 2³ max pool.

use rand::Rng;
use tafnet_nn::layers::LEAKY_SLOPE;
use tafnet_nn::{BatchNorm, Conv3d, Graph, Linear, ParamStore, Tensor, Var};

use crate::error::{Result, TafError};
use crate::volume::Volume;

pub const PREFIX: &str = "encoder.";

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderConfig {
    pub channels: [usize; 5],
    pub input_grid: usize,
    pub dcca_enabled: bool,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self { channels: [16, 32, 64, 128, 128], input_grid: 32, dcca_enabled: true }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.input_grid == 0 || self.input_grid % 16 != 0 {
            return Err(TafError::Config(format!("encoder.input_grid = {} must be a positive multiple of 16", self.input_grid)));
        }
        if self.channels.contains(&0) {
            return Err(TafError::Config("encoder.channels must be positive".into()));
        }
        Ok(())
    }

    pub fn bottleneck_side(&self) -> usize {
        self.input_grid / 16
    }

    pub fn out_channels(&self) -> usize {
        self.channels[4]
    }
}

/// Dynamic contextual channel attention: `h ⊙ σ(FC(GAP(ReLU(conv(ReLU(conv(h)))))))`.
#[derive(Clone, Debug)]
pub struct Dcca {
    pub conv1: Conv3d,
    pub conv2: Conv3d,
    pub fc: Linear,
}

impl Dcca {
    pub fn new(ps: &mut ParamStore, name: &str, channels: usize, rng: &mut impl Rng) -> Self {
        Self {
            conv1: Conv3d::new(ps, &format!("{name}.conv1"), channels, channels, 3, 1, rng),
            conv2: Conv3d::new(ps, &format!("{name}.conv2"), channels, channels, 3, 1, rng),
            fc: Linear::new(ps, &format!("{name}.fc"), channels, channels, rng),
        }
    }

    /// Channel weights `w ∈ (0,1)^C`, shape `[B, C]`.
    pub fn weights(&self, g: &mut Graph, ps: &ParamStore, h: Var) -> Result<Var> {
        let a = self.conv1.forward(g, ps, h)?;
        let a = g.relu(a);
        let a = self.conv2.forward(g, ps, a)?;
        let a = g.relu(a);
        let pooled = g.gap(a)?;
        let logits = self.fc.forward(g, ps, pooled)?;
        Ok(g.sigmoid(logits))
    }

    pub fn forward(&self, g: &mut Graph, ps: &ParamStore, h: Var) -> Result<Var> {
        let w = self.weights(g, ps, h)?;
        Ok(g.channel_scale(h, w)?)
    }
}

#[derive(Clone, Debug)]
struct Block {
    conv1: Conv3d,
    bn1: BatchNorm,
    conv2: Conv3d,
    bn2: BatchNorm,
    dcca: Option<Dcca>,
    pool: bool,
}

#[derive(Clone, Debug)]
pub struct Encoder {
    cfg: EncoderConfig,
    blocks: Vec<Block>,
}

pub struct EncoderOutput {
    /// `[B, C, s, s, s]` with `s = input_grid / 16`.
    pub bottleneck: Var,
    /// Pre-pool output of every block.
    pub skips: Vec<Var>,
}

impl Encoder {
    /// Registers parameters under `encoder.`.
    pub fn new(ps: &mut ParamStore, cfg: &EncoderConfig, rng: &mut impl Rng) -> Result<Self> {
        cfg.validate()?;
        let mut cin = 1;
        let mut blocks = Vec::with_capacity(5);
        for (i, &c) in cfg.channels.iter().enumerate() {
            let name = format!("{PREFIX}block{}", i + 1);
            blocks.push(Block {
                conv1: Conv3d::new(ps, &format!("{name}.conv1"), cin, c, 3, 1, rng),
                bn1: BatchNorm::new(ps, &format!("{name}.bn1"), c),
                conv2: Conv3d::new(ps, &format!("{name}.conv2"), c, c, 3, 1, rng),
                bn2: BatchNorm::new(ps, &format!("{name}.bn2"), c),
                dcca: cfg.dcca_enabled.then(|| Dcca::new(ps, &format!("{name}.dcca"), c, rng)),
                pool: i < 4,
            });
            cin = c;
        }
        Ok(Self { cfg: cfg.clone(), blocks })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.cfg
    }

    pub fn dcca(&self, block: usize) -> Option<&Dcca> {
        self.blocks[block].dcca.as_ref()
    }

    /// `x` must be `[B, 1, g, g, g]`.
    pub fn forward(&self, g: &mut Graph, ps: &ParamStore, x: Var) -> Result<EncoderOutput> {
        let grid = self.cfg.input_grid;
        let shape = g.value(x).shape();
        if shape.len() != 5 || shape[1] != 1 || shape[2..] != [grid, grid, grid] {
            return Err(TafError::Shape(format!("encoder expects [B, 1, {grid}, {grid}, {grid}], got {shape:?}")));
        }
        let mut h = x;
        let mut skips = Vec::with_capacity(5);
        for b in &self.blocks {
            h = b.conv1.forward(g, ps, h)?;
            h = b.bn1.forward(g, ps, h)?;
            h = g.leaky_relu(h, LEAKY_SLOPE);
            h = b.conv2.forward(g, ps, h)?;
            h = b.bn2.forward(g, ps, h)?;
            h = g.leaky_relu(h, LEAKY_SLOPE);
            if let Some(d) = &b.dcca {
                h = d.forward(g, ps, h)?;
            }
            skips.push(h);
            if b.pool {
                h = g.max_pool2(h)?;
            }
        }
        Ok(EncoderOutput { bottleneck: h, skips })
    }

    /// Eval-mode bottleneck features, one `[C, s, s, s]` tensor per volume.
    pub fn encode_volumes(&self, ps: &ParamStore, volumes: &[&Volume], batch: usize) -> Result<Vec<Tensor>> {
        let mut out = Vec::with_capacity(volumes.len());
        for chunk in volumes.chunks(batch.max(1)) {
            let x = volumes_to_tensor(chunk, self.cfg.input_grid)?;
            let mut g = Graph::new(false);
            let xv = g.input(x);
            let f = self.forward(&mut g, ps, xv)?.bottleneck;
            let t = g.value(f);
            let item_shape = t.shape()[1..].to_vec();
            for b in 0..t.batch() {
                out.push(Tensor::from_vec(&item_shape, t.item(b).to_vec())?);
            }
        }
        Ok(out)
    }
}

/// Stacks volumes into a `[B, 1, g, g, g]` tensor.
pub fn volumes_to_tensor(volumes: &[&Volume], grid: usize) -> Result<Tensor> {
    let mut data = Vec::with_capacity(volumes.len() * grid * grid * grid);
    for v in volumes {
        if v.shape() != [grid; 3] {
            return Err(TafError::Shape(format!("volume {:?} does not match grid {grid}", v.shape())));
        }
        data.extend(v.data().iter().map(|&x| x as f64));
    }
    Ok(Tensor::from_vec(&[volumes.len(), 1, grid, grid, grid], data)?)
}

/// Stacks per-item feature maps into one batch tensor.
pub fn stack(items: &[&Tensor]) -> Result<Tensor> {
    let first = items.first().ok_or_else(|| TafError::Shape("cannot stack zero tensors".into()))?;
    let mut shape = vec![items.len()];
    shape.extend_from_slice(first.shape());
    let mut data = Vec::with_capacity(items.len() * first.numel());
    for t in items {
        if t.shape() != first.shape() {
            return Err(TafError::Shape(format!("stack: {:?} vs {:?}", t.shape(), first.shape())));
        }
        data.extend_from_slice(t.data());
    }
    Ok(Tensor::from_vec(&shape, data)?)
}
