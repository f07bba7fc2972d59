use alloc::vec;
use alloc::vec::Vec;
use core::ops::Range;

use rand::Rng;
use rand_distr::StandardNormal;

use crate::linalg::l2_norm;
use crate::math::sqrt;
use crate::rng::{purpose, stream};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum Arch {
    FrameClassifier,
    Ctc,
    Rnnt,
}

impl Arch {
    pub fn tag(&self) -> u8 {
        match self {
            Arch::FrameClassifier => 0,
            Arch::Ctc => 1,
            Arch::Rnnt => 2,
        }
    }

    pub fn from_tag(tag: u8) -> Option<Self> {
        match tag {
            0 => Some(Arch::FrameClassifier),
            1 => Some(Arch::Ctc),
            2 => Some(Arch::Rnnt),
            _ => None,
        }
    }

    /// Layout of the flat parameter vector: blocks in storage order.
    pub fn blocks(&self) -> &'static [Block] {
        use Block::*;
        match self {
            Arch::FrameClassifier => &[OutputWeights, OutputBias],
            Arch::Ctc => &[
                InputWeights,
                RecurrentWeights,
                HiddenBias,
                OutputWeights,
                OutputBias,
            ],
            Arch::Rnnt => &[
                InputWeights,
                RecurrentWeights,
                HiddenBias,
                Embedding,
                PredictionWeights,
                PredictionBias,
                OutputWeights,
                JointPrediction,
                OutputBias,
            ],
        }
    }
}

/// Named parameter blocks, all row-major.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Block {
    /// `H × F` encoder input weights.
    InputWeights,
    /// `H × H` encoder recurrence.
    RecurrentWeights,
    /// `H` encoder bias.
    HiddenBias,
    /// `V × H` label embeddings feeding the prediction recurrence.
    Embedding,
    /// `H × H` prediction recurrence.
    PredictionWeights,
    /// `H` prediction bias.
    PredictionBias,
    /// `C × H` (or `C × F` for the frame classifier) output / joint-encoder weights.
    OutputWeights,
    /// `C × H` joint weights applied to the prediction state.
    JointPrediction,
    /// `C` output bias.
    OutputBias,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct Dims {
    /// Feature dimension `F`.
    pub input: usize,
    /// Hidden units `H` (unused by the frame classifier).
    pub hidden: usize,
    /// Token vocabulary `V`, excluding blank.
    pub vocab: usize,
}

impl Dims {
    /// Output classes `V + 1`.
    pub fn classes(&self) -> usize {
        self.vocab + 1
    }

    pub fn blank(&self) -> usize {
        self.vocab
    }

    pub(crate) fn block_len(&self, arch: Arch, block: Block) -> usize {
        let (f, h, v, c) = (self.input, self.hidden, self.vocab, self.classes());
        match block {
            Block::InputWeights => h * f,
            Block::RecurrentWeights | Block::PredictionWeights => h * h,
            Block::HiddenBias | Block::PredictionBias => h,
            Block::Embedding => v * h,
            Block::OutputWeights if arch == Arch::FrameClassifier => c * f,
            Block::OutputWeights | Block::JointPrediction => c * h,
            Block::OutputBias => c,
        }
    }

    /// Fan-in used to scale the initial weights of a block; `None` for biases.
    fn fan_in(&self, arch: Arch, block: Block) -> Option<usize> {
        match block {
            Block::InputWeights => Some(self.input),
            Block::RecurrentWeights | Block::PredictionWeights | Block::JointPrediction => {
                Some(self.hidden)
            }
            Block::Embedding => Some(1),
            Block::OutputWeights if arch == Arch::FrameClassifier => Some(self.input),
            Block::OutputWeights => Some(self.hidden),
            Block::HiddenBias | Block::PredictionBias | Block::OutputBias => None,
        }
    }
}

/// Flat, index-stable parameters. The layout is the concatenation of
/// [`Arch::blocks`] in order, each block row-major with the shape documented
/// on [`Block`].
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub arch: Arch,
    pub dims: Dims,
    pub values: Vec<f64>,
}

impl ModelParams {
    pub fn param_count(arch: Arch, dims: Dims) -> usize {
        arch.blocks().iter().map(|&b| dims.block_len(arch, b)).sum()
    }

    pub fn zeros(arch: Arch, dims: Dims) -> Result<Self> {
        check_dims(arch, dims)?;
        Ok(Self {
            arch,
            dims,
            values: vec![0.0; Self::param_count(arch, dims)],
        })
    }

    /// Gaussian weights with variance `1 / fan_in` (embeddings at unit scale
    /// times 0.5); biases zero.
    pub fn init(arch: Arch, dims: Dims, seed: u64) -> Result<Self> {
        let mut p = Self::zeros(arch, dims)?;
        let mut rng = stream(seed, purpose::INIT, u64::from(arch.tag()), 0);
        for &block in arch.blocks() {
            let range = p.range(block);
            let Some(fan_in) = dims.fan_in(arch, block) else {
                continue;
            };
            let scale = if block == Block::Embedding {
                0.5
            } else {
                1.0 / sqrt(fan_in as f64)
            };
            for v in &mut p.values[range] {
                let z: f64 = rng.sample(StandardNormal);
                *v = scale * z;
            }
        }
        Ok(p)
    }

    pub fn from_values(arch: Arch, dims: Dims, values: Vec<f64>) -> Result<Self> {
        check_dims(arch, dims)?;
        let expected = Self::param_count(arch, dims);
        if values.len() != expected {
            return Err(Error::DimensionMismatch(alloc::format!(
                "{} values, layout needs {expected}",
                values.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidConfig("parameters must be finite".into()));
        }
        Ok(Self { arch, dims, values })
    }

    pub fn range(&self, block: Block) -> Range<usize> {
        let mut start = 0;
        for &b in self.arch.blocks() {
            let len = self.dims.block_len(self.arch, b);
            if b == block {
                return start..start + len;
            }
            start += len;
        }
        0..0
    }

    pub fn block(&self, block: Block) -> &[f64] {
        &self.values[self.range(block)]
    }

    pub fn block_mut(&mut self, block: Block) -> &mut [f64] {
        let r = self.range(block);
        &mut self.values[r]
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }
}

fn check_dims(arch: Arch, dims: Dims) -> Result<()> {
    if dims.input == 0 || dims.vocab == 0 || (arch != Arch::FrameClassifier && dims.hidden == 0) {
        return Err(Error::InvalidConfig(alloc::format!(
            "invalid dims {dims:?} for {arch:?}"
        )));
    }
    Ok(())
}

/// Read-only views of every block, in one pass over the parameter vector.
pub(crate) struct Views<'a> {
    pub in_w: &'a [f64],
    pub rec_w: &'a [f64],
    pub hid_b: &'a [f64],
    pub embed: &'a [f64],
    pub pred_w: &'a [f64],
    pub pred_b: &'a [f64],
    pub out_w: &'a [f64],
    pub joint_pred: &'a [f64],
    pub out_b: &'a [f64],
}

/// Mutable views of every block of a gradient with the same layout.
pub(crate) struct ViewsMut<'a> {
    pub in_w: &'a mut [f64],
    pub rec_w: &'a mut [f64],
    pub hid_b: &'a mut [f64],
    pub embed: &'a mut [f64],
    pub pred_w: &'a mut [f64],
    pub pred_b: &'a mut [f64],
    pub out_w: &'a mut [f64],
    pub joint_pred: &'a mut [f64],
    pub out_b: &'a mut [f64],
}

pub(crate) fn views<'a>(arch: Arch, dims: Dims, values: &'a [f64]) -> Views<'a> {
    let mut v = Views {
        in_w: &[],
        rec_w: &[],
        hid_b: &[],
        embed: &[],
        pred_w: &[],
        pred_b: &[],
        out_w: &[],
        joint_pred: &[],
        out_b: &[],
    };
    let mut rest = values;
    for &b in arch.blocks() {
        let (head, tail) = rest.split_at(dims.block_len(arch, b));
        rest = tail;
        *match b {
            Block::InputWeights => &mut v.in_w,
            Block::RecurrentWeights => &mut v.rec_w,
            Block::HiddenBias => &mut v.hid_b,
            Block::Embedding => &mut v.embed,
            Block::PredictionWeights => &mut v.pred_w,
            Block::PredictionBias => &mut v.pred_b,
            Block::OutputWeights => &mut v.out_w,
            Block::JointPrediction => &mut v.joint_pred,
            Block::OutputBias => &mut v.out_b,
        } = head;
    }
    v
}

pub(crate) fn views_mut<'a>(arch: Arch, dims: Dims, values: &'a mut [f64]) -> ViewsMut<'a> {
    let mut v = ViewsMut {
        in_w: &mut [],
        rec_w: &mut [],
        hid_b: &mut [],
        embed: &mut [],
        pred_w: &mut [],
        pred_b: &mut [],
        out_w: &mut [],
        joint_pred: &mut [],
        out_b: &mut [],
    };
    let mut rest = values;
    for &b in arch.blocks() {
        let (head, tail) = core::mem::take(&mut rest).split_at_mut(dims.block_len(arch, b));
        rest = tail;
        *match b {
            Block::InputWeights => &mut v.in_w,
            Block::RecurrentWeights => &mut v.rec_w,
            Block::HiddenBias => &mut v.hid_b,
            Block::Embedding => &mut v.embed,
            Block::PredictionWeights => &mut v.pred_w,
            Block::PredictionBias => &mut v.pred_b,
            Block::OutputWeights => &mut v.out_w,
            Block::JointPrediction => &mut v.joint_pred,
            Block::OutputBias => &mut v.out_b,
        } = head;
    }
    v
}

/// Gradient with the layout of the [`ModelParams`] it was taken against.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradient(pub Vec<f64>);

impl Gradient {
    pub fn zeros(len: usize) -> Self {
        Self(vec![0.0; len])
    }

    pub fn norm(&self) -> f64 {
        l2_norm(&self.0)
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn add_assign(&mut self, other: &Gradient) {
        for (a, b) in self.0.iter_mut().zip(&other.0) {
            *a += b;
        }
    }

    pub fn add_scaled(&mut self, k: f64, other: &Gradient) {
        for (a, b) in self.0.iter_mut().zip(&other.0) {
            *a += k * b;
        }
    }

    pub fn scale(&mut self, k: f64) {
        for a in self.0.iter_mut() {
            *a *= k;
        }
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|v| v.is_finite())
    }
}
