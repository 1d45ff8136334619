//! Parameterised building blocks shared by the attention modules and networks.

use rand::Rng;

use crate::tensor::{he_normal, Bound, Element, Padding, ParamId, ParamStore, Shape, Tape, Var, Volume};
use crate::Result;

fn bias_shape(n: usize) -> Shape {
    Shape { batch: n, ..Shape::scalar() }
}

/// Cubic 3-D convolution with bias.
#[derive(Clone, Debug)]
pub struct Conv3d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub stride: usize,
    pub padding: Padding,
}

impl Conv3d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Element, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: Padding,
        rng: &mut R,
    ) -> Result<Self> {
        let shape = Shape::new(out_channels, in_channels, kernel, kernel, kernel)?;
        let weight = store.add(format!("{name}.weight"), he_normal(shape, in_channels * kernel.pow(3), rng))?;
        let bias = store.add(format!("{name}.bias"), Volume::zeros(bias_shape(out_channels)))?;
        Ok(Conv3d { weight, bias, stride, padding })
    }

    /// `1x1x1` convolution.
    pub fn pointwise<T: Element, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Self::new(store, name, in_channels, out_channels, 1, 1, Padding::Same, rng)
    }

    pub fn forward<T: Element>(&self, tape: &mut Tape<T>, p: &Bound, x: Var) -> Result<Var> {
        tape.conv3d(x, p[self.weight], Some(p[self.bias]), self.stride, self.padding)
    }
}

/// Stride-2 transposed convolution doubling the spatial extent.
#[derive(Clone, Debug)]
pub struct ConvTranspose3d {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl ConvTranspose3d {
    pub fn new<T: Element, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let shape = Shape::new(in_channels, out_channels, kernel, kernel, kernel)?;
        // Each output voxel of a stride-2 transposed conv sees about k^3/8 taps per input channel.
        let fan_in = (in_channels * kernel.pow(3) / 8).max(1);
        let weight = store.add(format!("{name}.weight"), he_normal(shape, fan_in, rng))?;
        let bias = store.add(format!("{name}.bias"), Volume::zeros(bias_shape(out_channels)))?;
        Ok(ConvTranspose3d { weight, bias })
    }

    pub fn forward<T: Element>(&self, tape: &mut Tape<T>, p: &Bound, x: Var) -> Result<Var> {
        tape.conv_transpose3d(x, p[self.weight], Some(p[self.bias]))
    }
}

/// Fully connected layer over flattened batch items.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    pub fn new<T: Element, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        inputs: usize,
        outputs: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let shape = Shape { batch: outputs, channels: inputs, ..Shape::scalar() };
        let weight = store.add(format!("{name}.weight"), he_normal(shape, inputs, rng))?;
        let bias = store.add(format!("{name}.bias"), Volume::zeros(bias_shape(outputs)))?;
        Ok(Linear { weight, bias })
    }

    pub fn forward<T: Element>(&self, tape: &mut Tape<T>, p: &Bound, x: Var) -> Result<Var> {
        tape.linear(x, p[self.weight], Some(p[self.bias]))
    }
}

/// Group normalisation: each item's channels are split into `groups`
/// groups, standardised over channels and voxels of the group, then given a
/// learned per-channel scale and shift (initialised to 1 and 0).
#[derive(Clone, Debug)]
pub struct GroupNorm {
    pub groups: usize,
    pub weight: ParamId,
    pub bias: ParamId,
}

impl GroupNorm {
    pub const EPS: f64 = 1e-5;

    /// Uses `gcd(channels, groups)` groups so any channel count is accepted.
    pub fn new<T: Element>(store: &mut ParamStore<T>, name: &str, channels: usize, groups: usize) -> Result<Self> {
        let groups = gcd(channels, groups.max(1));
        let shape = Shape { channels, ..Shape::scalar() };
        let weight = store.add(format!("{name}.weight"), Volume::full(shape, T::ONE))?;
        let bias = store.add(format!("{name}.bias"), Volume::zeros(shape))?;
        Ok(GroupNorm { groups, weight, bias })
    }

    pub fn forward<T: Element>(&self, tape: &mut Tape<T>, p: &Bound, x: Var) -> Result<Var> {
        let s = tape.shape(x);
        let per_group = s.channels / self.groups;
        let grouped = Shape { channels: self.groups, depth: per_group * s.depth, ..s };
        let g = tape.reshape(x, grouped)?;
        let mean = tape.global_avg_pool(g);
        let centred = tape.sub(g, mean)?;
        let sq = tape.square(centred);
        let var = tape.global_avg_pool(sq);
        let var = tape.add_scalar(var, Self::EPS);
        let std = tape.sqrt(var);
        let n = tape.div(centred, std)?;
        let n = tape.reshape(n, s)?;
        let n = tape.mul(n, p[self.weight])?;
        tape.add(n, p[self.bias])
    }
}

fn gcd(a: usize, b: usize) -> usize {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

/// Normalisation applied after a convolution, if enabled.
pub fn maybe_norm<T: Element>(norm: &Option<GroupNorm>, tape: &mut Tape<T>, p: &Bound, x: Var) -> Result<Var> {
    match norm {
        Some(n) => n.forward(tape, p, x),
        None => Ok(x),
    }
}
