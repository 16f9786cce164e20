use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Tensor2, Var};
use crate::codec::{Reader, Writer};
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"BSCP";
pub const CHECKPOINT_VERSION: u16 = 1;

/// Layer widths of one T-CAM generation module.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ModelShape {
    pub feature_dim: usize,
    pub hidden: usize,
    pub num_classes: usize,
}

impl ModelShape {
    /// Hidden width equal to the feature width.
    pub fn new(feature_dim: usize, num_classes: usize) -> Self {
        Self {
            feature_dim,
            hidden: feature_dim,
            num_classes,
        }
    }

    /// C + 1 output columns, the last one background.
    pub fn outputs(&self) -> usize {
        self.num_classes + 1
    }

    pub fn background(&self) -> usize {
        self.num_classes
    }
}

/// Block indices into [`ModelParams::blocks`].
pub(crate) mod slot {
    pub const ATT_CONV1_W: usize = 0;
    pub const ATT_CONV1_B: usize = 1;
    pub const ATT_CONV2_W: usize = 2;
    pub const ATT_CONV2_B: usize = 3;
    pub const ATT_CONV3_W: usize = 4;
    pub const ATT_CONV3_B: usize = 5;
    pub const NL_QUERY: usize = 6;
    pub const NL_KEY: usize = 7;
    pub const NL_VALUE: usize = 8;
    pub const CLS_CONV1_W: usize = 9;
    pub const CLS_CONV1_B: usize = 10;
    pub const CLS_CONV2_W: usize = 11;
    pub const CLS_CONV2_B: usize = 12;
    pub const CLS_CONV3_W: usize = 13;
    pub const CLS_CONV3_B: usize = 14;
    pub const CLS_HEAD_W: usize = 15;
    pub const CLS_HEAD_B: usize = 16;
}

/// (name, kernel width, fan-in, rows, cols) for every block, in slot order.
fn layout(s: &ModelShape) -> Vec<(&'static str, usize, usize, usize, usize)> {
    let (f, h, o) = (s.feature_dim, s.hidden, s.outputs());
    vec![
        ("att.conv1.weight", 3, f, 3 * f, h),
        ("att.conv1.bias", 3, f, 1, h),
        ("att.conv2.weight", 3, h, 3 * h, h),
        ("att.conv2.bias", 3, h, 1, h),
        ("att.conv3.weight", 1, h, h, 1),
        ("att.conv3.bias", 1, h, 1, 1),
        ("cls.nonlocal.query", 1, f, f, f),
        ("cls.nonlocal.key", 1, f, f, f),
        ("cls.nonlocal.value", 1, f, f, f),
        ("cls.conv1.weight", 3, f, 3 * f, h),
        ("cls.conv1.bias", 3, f, 1, h),
        ("cls.conv2.weight", 3, h, 3 * h, h),
        ("cls.conv2.bias", 3, h, 1, h),
        ("cls.conv3.weight", 3, h, 3 * h, h),
        ("cls.conv3.bias", 3, h, 1, h),
        ("cls.head.weight", 1, h, h, o),
        ("cls.head.bias", 1, h, 1, o),
    ]
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamBlock {
    pub name: String,
    pub value: Tensor2,
}

/// All learnable weights of the attention unit and the classifier.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    pub shape: ModelShape,
    pub blocks: Vec<ParamBlock>,
}

/// Parameters recorded on a tape, one [`Var`] per block.
#[derive(Clone, Debug)]
pub struct BoundParams {
    pub vars: Vec<Var>,
}

impl BoundParams {
    #[inline]
    pub(crate) fn get(&self, slot: usize) -> Var {
        self.vars[slot]
    }
}

impl ModelParams {
    /// Seeded uniform initialization in `[-a, a]`, `a = sqrt(1 / (k·fan_in))`.
    pub fn init(shape: ModelShape, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let blocks = layout(&shape)
            .into_iter()
            .map(|(name, k, fan_in, rows, cols)| {
                let a = (1.0 / (k * fan_in) as f64).sqrt();
                let data = (0..rows * cols).map(|_| rng.random_range(-a..=a)).collect();
                ParamBlock {
                    name: name.to_string(),
                    value: Tensor2::from_vec(rows, cols, data).expect("layout sizes agree"),
                }
            })
            .collect();
        Self { shape, blocks }
    }

    /// Every block filled with zeros.
    pub fn zeros(shape: ModelShape) -> Self {
        let blocks = layout(&shape)
            .into_iter()
            .map(|(name, _, _, rows, cols)| ParamBlock {
                name: name.to_string(),
                value: Tensor2::zeros(rows, cols),
            })
            .collect();
        Self { shape, blocks }
    }

    pub fn num_scalars(&self) -> usize {
        self.blocks.iter().map(|b| b.value.data().len()).sum()
    }

    pub fn block(&self, name: &str) -> Option<&ParamBlock> {
        self.blocks.iter().find(|b| b.name == name)
    }

    pub fn block_mut(&mut self, name: &str) -> Option<&mut ParamBlock> {
        self.blocks.iter_mut().find(|b| b.name == name)
    }

    /// Records every block on `tape`, as differentiable leaves when
    /// `trainable`, as constants otherwise.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> Result<BoundParams> {
        let vars = self
            .blocks
            .iter()
            .map(|b| {
                if trainable {
                    tape.param(b.value.clone())
                } else {
                    tape.constant(b.value.clone())
                }
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(BoundParams { vars })
    }

    pub fn same_layout(&self, other: &ModelParams) -> bool {
        self.shape == other.shape
            && self.blocks.len() == other.blocks.len()
            && self
                .blocks
                .iter()
                .zip(&other.blocks)
                .all(|(a, b)| a.name == b.name && a.value.shape() == b.value.shape())
    }

    /// Euclidean distance between two parameter sets of the same layout.
    pub fn distance(&self, other: &ModelParams) -> f64 {
        self.blocks
            .iter()
            .zip(&other.blocks)
            .map(|(a, b)| a.value.squared_distance(&b.value))
            .sum::<f64>()
            .sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.blocks.iter().all(|b| b.value.is_finite())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::new(&CHECKPOINT_MAGIC, CHECKPOINT_VERSION);
        w.u32(self.shape.feature_dim as u32);
        w.u32(self.shape.hidden as u32);
        w.u32(self.shape.num_classes as u32);
        w.u32(self.blocks.len() as u32);
        for b in &self.blocks {
            w.str(&b.name);
            w.u32(b.value.rows() as u32);
            w.u32(b.value.cols() as u32);
            for &v in b.value.data() {
                w.f64(v);
            }
        }
        w.finish()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::open(bytes, &CHECKPOINT_MAGIC, CHECKPOINT_VERSION)?;
        let shape = ModelShape {
            feature_dim: r.u32()? as usize,
            hidden: r.u32()? as usize,
            num_classes: r.u32()? as usize,
        };
        let n = r.u32()? as usize;
        let mut blocks = Vec::with_capacity(n.min(64));
        for _ in 0..n {
            let name = r.str()?;
            let rows = r.u32()? as usize;
            let cols = r.u32()? as usize;
            let len = rows
                .checked_mul(cols)
                .ok_or_else(|| Error::Malformed("block too large".into()))?;
            let mut data = Vec::with_capacity(len.min(1 << 20));
            for _ in 0..len {
                data.push(r.f64()?);
            }
            blocks.push(ParamBlock {
                name,
                value: Tensor2::from_vec(rows, cols, data)?,
            });
        }
        r.expect_end()?;
        let params = Self { shape, blocks };
        if !params.same_layout(&ModelParams::zeros(shape)) {
            return Err(Error::Malformed("checkpoint blocks do not match the model layout".into()));
        }
        Ok(params)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}
