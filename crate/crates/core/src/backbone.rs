//! Three-level 3D encoder-decoder producing per-voxel class logits and a
//! decoder feature map, plus the Mean-Teacher EMA machinery.
//!
//! Channels run 8 → 16 → 32 → 16 → 8. Decoder convolutions act at the
//! coarser level and are then upsampled trilinearly and added to the skip:
//!
//! ```text
//! e1 = silu(conv(x))                  1→8    full res
//! e2 = silu(conv(pool(e1)))           8→16   1/2
//! b  = silu(conv(pool(e2)))          16→32   1/4
//! d2 = silu(up(conv(b)) + e2)        32→16   1/2   (feature tap, D = 16)
//! d1 = silu(up(conv(d2)) + e1)       16→8    full
//! logits = conv1x1(d1)                8→2
//! ```

use serde::{Deserialize, Serialize};

use crate::error::{contract, Result};
use crate::numerics::{Graph, Rng, Tensor, Var};
use crate::volume::Mask;

pub const NUM_CLASSES: usize = 2;

/// Which decoder stage exports the feature map used for prototypes.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TapLevel {
    /// `d2`: half resolution, 16 channels.
    #[default]
    Half,
    /// `d1`: full resolution, 8 channels.
    Full,
}

impl TapLevel {
    pub fn stride(self) -> usize {
        match self {
            TapLevel::Half => 2,
            TapLevel::Full => 1,
        }
    }

    pub fn channels(self) -> usize {
        match self {
            TapLevel::Half => 16,
            TapLevel::Full => 8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvLayer {
    /// `[cout, cin, k, k, k]`
    pub weight: Tensor,
    /// `[cout]`
    pub bias: Tensor,
}

impl ConvLayer {
    fn kaiming(cin: usize, cout: usize, k: usize, gain: f64, rng: &mut Rng) -> Self {
        let fan_in = (cin * k * k * k) as f64;
        Self {
            weight: Tensor::randn(&[cout, cin, k, k, k], (gain / fan_in).sqrt(), rng).with_grad(),
            bias: Tensor::zeros(&[cout]).with_grad(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegNetParams {
    pub enc1: ConvLayer,
    pub enc2: ConvLayer,
    pub bottleneck: ConvLayer,
    pub dec2: ConvLayer,
    pub dec1: ConvLayer,
    pub head: ConvLayer,
    pub tap: TapLevel,
}

/// Bound graph handles, in [`SegNetParams::named_tensors`] order.
#[derive(Debug, Clone)]
pub struct SegNetVars<'g> {
    vars: Vec<Var<'g>>,
}

impl<'g> SegNetVars<'g> {
    pub fn all(&self) -> &[Var<'g>] {
        &self.vars
    }

    /// Handles in [`SegNetParams::named_tensors`] order.
    pub fn from_vars(vars: Vec<Var<'g>>) -> Self {
        assert_eq!(vars.len(), 2 * LAYER_NAMES.len(), "one weight and one bias per layer");
        Self { vars }
    }

    fn layer(&self, i: usize) -> (Var<'g>, Var<'g>) {
        (self.vars[2 * i], self.vars[2 * i + 1])
    }
}

#[derive(Debug, Clone, Copy)]
pub struct SegOutput<'g> {
    /// `[|C|, H, W, Z]`
    pub logits: Var<'g>,
    /// `[D, H/s, W/s, Z/s]` with `s` the tap stride.
    pub features: Var<'g>,
}

const LAYER_NAMES: [&str; 6] = ["enc1", "enc2", "bottleneck", "dec2", "dec1", "head"];

impl SegNetParams {
    pub fn init(tap: TapLevel, rng: &mut Rng) -> Self {
        Self {
            enc1: ConvLayer::kaiming(1, 8, 3, 2.0, rng),
            enc2: ConvLayer::kaiming(8, 16, 3, 2.0, rng),
            bottleneck: ConvLayer::kaiming(16, 32, 3, 2.0, rng),
            dec2: ConvLayer::kaiming(32, 16, 3, 2.0, rng),
            dec1: ConvLayer::kaiming(16, 8, 3, 2.0, rng),
            head: ConvLayer::kaiming(8, NUM_CLASSES, 1, 1.0, rng),
            tap,
        }
    }

    fn layers(&self) -> [&ConvLayer; 6] {
        [&self.enc1, &self.enc2, &self.bottleneck, &self.dec2, &self.dec1, &self.head]
    }

    fn layers_mut(&mut self) -> [&mut ConvLayer; 6] {
        [&mut self.enc1, &mut self.enc2, &mut self.bottleneck, &mut self.dec2, &mut self.dec1, &mut self.head]
    }

    pub fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        LAYER_NAMES
            .iter()
            .zip(self.layers())
            .flat_map(|(n, l)| [(format!("{n}.weight"), &l.weight), (format!("{n}.bias"), &l.bias)])
            .collect()
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        self.layers_mut().into_iter().flat_map(|l| [&mut l.weight, &mut l.bias]).collect()
    }

    pub fn feature_dim(&self) -> usize {
        self.tap.channels()
    }

    /// Copy that never records gradients.
    pub fn detached(&self) -> Self {
        let mut c = self.clone();
        for t in c.tensors_mut() {
            t.set_requires_grad(false);
            t.zero_grad();
        }
        c
    }

    pub fn bind<'g>(&self, g: &'g Graph) -> SegNetVars<'g> {
        SegNetVars { vars: self.named_tensors().iter().map(|(_, t)| g.leaf(t)).collect() }
    }

    pub fn check_input_shape(shape: &[usize]) -> Result<()> {
        if shape.len() != 4 || shape[0] != 1 || shape[1..].iter().any(|&d| d == 0 || d % 4 != 0) {
            return Err(contract(format!("segmentation input must be [1, H, W, Z] with H, W, Z divisible by 4, got {shape:?}")));
        }
        Ok(())
    }

    pub fn forward<'g>(&self, x: Var<'g>, vars: &SegNetVars<'g>) -> Result<SegOutput<'g>> {
        Self::check_input_shape(&x.shape())?;
        let conv = |v: Var<'g>, i: usize| {
            let (w, b) = vars.layer(i);
            v.conv3d(w, b)
        };
        let e1 = conv(x, 0).silu();
        let e2 = conv(e1.avg_pool2(), 1).silu();
        let b = conv(e2.avg_pool2(), 2).silu();
        let d2 = conv(b, 3).upsample2().add(e2).silu();
        let d1 = conv(d2, 4).upsample2().add(e1).silu();
        let logits = conv(d1, 5);
        let features = match self.tap {
            TapLevel::Half => d2,
            TapLevel::Full => d1,
        };
        Ok(SegOutput { logits, features })
    }
}

/// Plain-tensor forward pass: `(logits [|C|,H,W,Z], features [D,h,w,z])`.
pub fn seg_forward(volume: &Tensor, params: &SegNetParams) -> Result<(Tensor, Tensor)> {
    SegNetParams::check_input_shape(volume.shape())?;
    let g = Graph::new();
    let x = g.constant(volume.shape(), volume.data().to_vec());
    let vars = params.detached().bind(&g);
    let out = params.forward(x, &vars)?;
    Ok((out.logits.to_tensor(), out.features.to_tensor()))
}

/// EMA copy of the student, never touched by the optimizer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TeacherState {
    pub params: SegNetParams,
    pub decay: f64,
}

impl TeacherState {
    pub fn new(student: &SegNetParams, decay: f64) -> Self {
        Self { params: student.detached(), decay }
    }
}

/// `θ_t ← decay·θ_t + (1 − decay)·θ_s`, elementwise.
pub fn ema_update(teacher: &mut TeacherState, student: &SegNetParams) -> Result<()> {
    if !(0.0..=1.0).contains(&teacher.decay) {
        return Err(contract(format!("EMA decay {} outside [0, 1]", teacher.decay)));
    }
    let d = teacher.decay;
    let src = student.named_tensors();
    let dst = teacher.params.tensors_mut();
    if src.len() != dst.len() {
        return Err(contract("teacher/student parameter count mismatch"));
    }
    for ((name, s), t) in src.into_iter().zip(dst) {
        if !s.same_shape(t) {
            return Err(contract(format!("EMA shape mismatch at {name}")));
        }
        for (tv, sv) in t.data_mut().iter_mut().zip(s.data()) {
            *tv = d * *tv + (1.0 - d) * sv;
        }
    }
    Ok(())
}

/// Voxelwise argmax over classes of `[|C|, H, W, Z]` logits; ties go to the
/// lower class index.
pub fn pseudo_label(logits: &Tensor) -> Result<Mask> {
    let s = logits.shape();
    if s.len() != 4 || s[0] == 0 {
        return Err(contract(format!("logits must be [C, H, W, Z], got {s:?}")));
    }
    Ok(argmax_classes(logits.data(), s[0], [s[1], s[2], s[3]]))
}

pub(crate) fn argmax_classes(values: &[f64], classes: usize, dims: [usize; 3]) -> Mask {
    let n = dims[0] * dims[1] * dims[2];
    let data = (0..n)
        .map(|i| {
            let mut best = 0;
            for c in 1..classes {
                if values[c * n + i] > values[best * n + i] {
                    best = c;
                }
            }
            best as u8
        })
        .collect();
    Mask { dims, data }
}
