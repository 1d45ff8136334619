//! Channel attention over pooled descriptors, grouped softmax weighting of
//! multi-scale feature sets, and patch-token self-attention.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::layers::{Conv3d, Linear};
use crate::tensor::{Bound, Element, ParamId, ParamStore, Shape, Tape, Var, Volume};
use crate::{Error, Result};

/// Channel-attention bottleneck width: `max(1, channels / reduction)`.
pub fn hidden_width(channels: usize, reduction: usize) -> usize {
    (channels / reduction.max(1)).max(1)
}

/// Two-branch channel attention: an average-pooled and a max-pooled
/// descriptor each pass through a ReLU bottleneck; the sum is squashed by a
/// sigmoid (unless disabled) into per-channel weights.
#[derive(Clone, Debug)]
pub struct ChannelAttention {
    pub avg_in: Linear,
    pub avg_out: Linear,
    pub max_in: Linear,
    pub max_out: Linear,
    pub channels: usize,
    pub hidden: usize,
    pub inner_sigmoid: bool,
}

impl ChannelAttention {
    pub fn new<T: Element, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        channels: usize,
        reduction: usize,
        inner_sigmoid: bool,
        rng: &mut R,
    ) -> Result<Self> {
        let hidden = hidden_width(channels, reduction);
        Ok(ChannelAttention {
            avg_in: Linear::new(store, &format!("{name}.w1"), channels, hidden, rng)?,
            avg_out: Linear::new(store, &format!("{name}.w2"), hidden, channels, rng)?,
            max_in: Linear::new(store, &format!("{name}.w3"), channels, hidden, rng)?,
            max_out: Linear::new(store, &format!("{name}.w4"), hidden, channels, rng)?,
            channels,
            hidden,
            inner_sigmoid,
        })
    }

    /// Per-channel weights of shape `(batch, channels, 1, 1, 1)`.
    pub fn forward<T: Element>(&self, tape: &mut Tape<T>, p: &Bound, x: Var) -> Result<Var> {
        let s = tape.shape(x);
        if s.channels != self.channels {
            return Err(Error::Shape(format!(
                "channel attention built for {} channels, got {s}",
                self.channels
            )));
        }
        let avg = tape.global_avg_pool(x);
        let h = self.avg_in.forward(tape, p, avg)?;
        let h = tape.relu(h);
        let a = self.avg_out.forward(tape, p, h)?;
        let max = tape.global_max_pool(x);
        let h = self.max_in.forward(tape, p, max)?;
        let h = tape.relu(h);
        let m = self.max_out.forward(tape, p, h)?;
        let logits = tape.add(a, m)?;
        let logits = tape.reshape(logits, s.with_spatial([1, 1, 1]))?;
        Ok(if self.inner_sigmoid { tape.sigmoid(logits) } else { logits })
    }
}

/// Reweights each feature group by the channel softmax of its attention
/// output and concatenates the weighted groups.
pub fn grouped_attention_weighting<T: Element>(
    tape: &mut Tape<T>,
    p: &Bound,
    groups: &[Var],
    attention: &[ChannelAttention],
) -> Result<Var> {
    if groups.is_empty() {
        return Err(Error::Shape("grouped attention weighting needs at least one group".into()));
    }
    if groups.len() != attention.len() {
        return Err(Error::Shape(format!(
            "{} feature groups but {} attention modules",
            groups.len(),
            attention.len()
        )));
    }
    let mut weighted = Vec::with_capacity(groups.len());
    for (&f, ca) in groups.iter().zip(attention) {
        let logits = ca.forward(tape, p, f)?;
        let att = tape.softmax_channels(logits);
        weighted.push(tape.mul(f, att)?);
    }
    tape.concat(&weighted)
}

/// Placement of self-attention in the expansion path.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SelfAttentionConfig {
    /// Expansion stage the attention precedes: `0` attends the deepest
    /// features, `n` the features entering the output head.
    pub stage: usize,
    /// Edge of the cubic patches pooled into tokens, in feature-map voxels.
    pub patch_edge: usize,
}

/// Single-head self-attention over non-overlapping patch tokens with a
/// learned residual gate `gamma` (initialised to zero).
#[derive(Clone, Debug)]
pub struct SelfAttention {
    pub query: Conv3d,
    pub key: Conv3d,
    pub value: Conv3d,
    pub gamma: ParamId,
    pub patch_edge: usize,
    pub channels: usize,
}

impl SelfAttention {
    pub fn new<T: Element, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        channels: usize,
        patch_edge: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if patch_edge == 0 {
            return Err(Error::Config("self-attention patch edge must be positive".into()));
        }
        Ok(SelfAttention {
            query: Conv3d::pointwise(store, &format!("{name}.wq"), channels, channels, rng)?,
            key: Conv3d::pointwise(store, &format!("{name}.wk"), channels, channels, rng)?,
            value: Conv3d::pointwise(store, &format!("{name}.wv"), channels, channels, rng)?,
            gamma: store.add(format!("{name}.gamma"), Volume::zeros(Shape::scalar()))?,
            patch_edge,
            channels,
        })
    }

    /// Token features `(batch, channels, d/e, h/e, w/e)` and their projections.
    fn tokens<T: Element>(&self, tape: &mut Tape<T>, p: &Bound, x: Var) -> Result<[Var; 3]> {
        let s = tape.shape(x);
        if s.spatial().iter().any(|n| n % self.patch_edge != 0) {
            return Err(Error::Shape(format!(
                "patch edge {} does not divide feature map {s}",
                self.patch_edge
            )));
        }
        let t = tape.avg_pool(x, self.patch_edge)?;
        Ok([
            self.query.forward(tape, p, t)?,
            self.key.forward(tape, p, t)?,
            self.value.forward(tape, p, t)?,
        ])
    }

    pub fn forward<T: Element>(&self, tape: &mut Tape<T>, p: &Bound, x: Var) -> Result<Var> {
        let [q, k, v] = self.tokens(tape, p, x)?;
        let attended = tape.token_attention(q, k, v)?;
        let spread = tape.patch_broadcast(attended, self.patch_edge);
        let gated = tape.mul(spread, p[self.gamma])?;
        tape.add(x, gated)
    }

    /// Attention matrices, one `tokens x tokens` row-stochastic block per batch item.
    pub fn attention_weights<T: Element>(&self, tape: &mut Tape<T>, p: &Bound, x: Var) -> Result<Vec<Vec<T>>> {
        let [q, k, _] = self.tokens(tape, p, x)?;
        let s = tape.shape(q);
        let (c, n) = (s.channels, s.voxels());
        Ok((0..s.batch)
            .map(|b| {
                let r = b * c * n..(b + 1) * c * n;
                crate::tensor::attention_weights_for(&tape.value(q).data()[r.clone()], &tape.value(k).data()[r], c, n)
            })
            .collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::gradcheck::{gradient_check, random_projection, random_volume, GradCheckConfig};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(3)
    }

    #[test]
    fn hidden_width_never_zero() {
        assert_eq!(hidden_width(4, 4), 1);
        assert_eq!(hidden_width(3, 4), 1);
        assert_eq!(hidden_width(60, 4), 15);
    }

    #[test]
    fn zero_input_gives_half_weights() {
        let mut store = ParamStore::<f64>::new();
        let ca = ChannelAttention::new(&mut store, "ca", 6, 4, true, &mut rng()).unwrap();
        let mut tape = Tape::new();
        let p = store.bind(&mut tape);
        let x = tape.constant(Volume::zeros(Shape::cube(2, 6, 3).unwrap()));
        let w = ca.forward(&mut tape, &p, x).unwrap();
        assert_eq!(tape.shape(w), Shape::new(2, 6, 1, 1, 1).unwrap());
        assert!(tape.value(w).data().iter().all(|&v| v == 0.5));
    }

    /// Hand-rolled two-layer evaluation for a constant input.
    #[test]
    fn constant_input_matches_matrix_arithmetic() {
        let mut store = ParamStore::<f64>::new();
        let ca = ChannelAttention::new(&mut store, "ca", 4, 2, true, &mut rng()).unwrap();
        // Nonzero biases to exercise every term.
        for (i, p) in store.iter_mut().enumerate() {
            if p.name.ends_with("bias") {
                for (j, v) in p.value.data_mut().iter_mut().enumerate() {
                    *v = 0.1 * (i as f64) - 0.05 * j as f64;
                }
            }
        }
        let consts = [0.3, -1.2, 0.7, 2.0];
        let x = Volume::from_fn(Shape::cube(1, 4, 2).unwrap(), |_, c, _, _, _| consts[c]);
        let mut tape = Tape::new();
        let p = store.bind(&mut tape);
        let xv = tape.constant(x);
        let w = ca.forward(&mut tape, &p, xv).unwrap();

        let lin = |l: &Linear, v: &[f64]| -> Vec<f64> {
            let wt = store.get(l.weight).value.clone();
            let b = store.get(l.bias).value.clone();
            let (o, i) = (wt.shape().batch, wt.shape().channels);
            (0..o).map(|r| (0..i).map(|c| wt.data()[r * i + c] * v[c]).sum::<f64>() + b.data()[r]).collect()
        };
        let relu = |v: Vec<f64>| v.into_iter().map(|x| x.max(0.0)).collect::<Vec<_>>();
        let a = lin(&ca.avg_out, &relu(lin(&ca.avg_in, &consts)));
        let m = lin(&ca.max_out, &relu(lin(&ca.max_in, &consts)));
        for c in 0..4 {
            let expected = 1.0 / (1.0 + (-(a[c] + m[c])).exp());
            assert!((tape.value(w).data()[c] - expected).abs() < 1e-12);
        }
    }

    #[test]
    fn single_channel_group_is_identity() {
        let mut store = ParamStore::<f64>::new();
        let ca = ChannelAttention::new(&mut store, "ca", 1, 4, true, &mut rng()).unwrap();
        let x = random_volume(Shape::cube(1, 1, 3).unwrap(), -1.0, 1.0, 5);
        let mut tape = Tape::new();
        let p = store.bind(&mut tape);
        let xv = tape.constant(x.clone());
        let y = grouped_attention_weighting(&mut tape, &p, &[xv], &[ca]).unwrap();
        assert_eq!(tape.value(y), &x);
    }

    #[test]
    fn channel_uniform_logits_divide_by_group_size() {
        // Zero weights make every attention logit equal to the bias sum.
        let mut store = ParamStore::<f64>::new();
        let ca = ChannelAttention::new(&mut store, "ca", 3, 4, true, &mut rng()).unwrap();
        for p in store.iter_mut() {
            p.value.data_mut().fill(0.0);
        }
        let x = random_volume(Shape::cube(1, 3, 2).unwrap(), -1.0, 1.0, 9);
        let mut tape = Tape::new();
        let p = store.bind(&mut tape);
        let xv = tape.constant(x.clone());
        let y = grouped_attention_weighting(&mut tape, &p, &[xv], &[ca]).unwrap();
        for (a, b) in tape.value(y).data().iter().zip(x.data()) {
            assert!((a - b / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn two_channel_softmax_matches_scalar_oracle() {
        let mut store = ParamStore::<f64>::new();
        let ca = ChannelAttention::new(&mut store, "ca", 2, 4, false, &mut rng()).unwrap();
        for p in store.iter_mut() {
            p.value.data_mut().fill(0.0);
        }
        // With zero weights the logits equal bias(w2) + bias(w4).
        let (la, lb) = (0.4, -0.9);
        let b2 = ca.avg_out.bias;
        store.get_mut(b2).value.data_mut().copy_from_slice(&[la, lb]);
        let x = random_volume(Shape::cube(1, 2, 2).unwrap(), 0.0, 1.0, 2);
        let mut tape = Tape::new();
        let p = store.bind(&mut tape);
        let xv = tape.constant(x.clone());
        let y = grouped_attention_weighting(&mut tape, &p, &[xv], &[ca]).unwrap();
        let z = la.exp() + lb.exp();
        let (wa, wb) = (la.exp() / z, lb.exp() / z);
        let vox = 8;
        for i in 0..vox {
            assert!((tape.value(y).data()[i] - wa * x.data()[i]).abs() < 1e-14);
            assert!((tape.value(y).data()[vox + i] - wb * x.data()[vox + i]).abs() < 1e-14);
        }
    }

    #[test]
    fn grouped_output_concatenates_channels() {
        let mut store = ParamStore::<f32>::new();
        let mut r = rng();
        let cas: Vec<_> = [4, 8, 12]
            .iter()
            .enumerate()
            .map(|(i, &c)| ChannelAttention::new(&mut store, &format!("ca{i}"), c, 4, true, &mut r).unwrap())
            .collect();
        let mut tape = Tape::new();
        let p = store.bind(&mut tape);
        let groups: Vec<Var> = [4, 8, 12]
            .iter()
            .map(|&c| tape.constant(Volume::full(Shape::cube(1, c, 2).unwrap(), 1.0)))
            .collect();
        let y = grouped_attention_weighting(&mut tape, &p, &groups, &cas).unwrap();
        assert_eq!(tape.shape(y).channels, 24);
        assert!(grouped_attention_weighting(&mut tape, &p, &[], &[]).is_err());
    }

    #[test]
    fn closed_gate_is_exact_identity() {
        let mut store = ParamStore::<f32>::new();
        let sa = SelfAttention::new(&mut store, "sa", 4, 2, &mut rng()).unwrap();
        let x = random_volume(Shape::cube(2, 4, 4).unwrap(), -2.0, 2.0, 1).cast::<f32>();
        let mut tape = Tape::new();
        let p = store.bind(&mut tape);
        let xv = tape.constant(x.clone());
        let y = sa.forward(&mut tape, &p, xv).unwrap();
        assert_eq!(tape.value(y), &x);
    }

    #[test]
    fn indivisible_patch_rejected() {
        let mut store = ParamStore::<f32>::new();
        let sa = SelfAttention::new(&mut store, "sa", 2, 3, &mut rng()).unwrap();
        let mut tape = Tape::new();
        let p = store.bind(&mut tape);
        let xv = tape.constant(Volume::zeros(Shape::cube(1, 2, 4).unwrap()));
        assert!(matches!(sa.forward(&mut tape, &p, xv), Err(Error::Shape(_))));
    }

    #[test]
    fn single_token_adds_projected_mean() {
        let mut store = ParamStore::<f64>::new();
        let sa = SelfAttention::new(&mut store, "sa", 3, 4, &mut rng()).unwrap();
        store.get_mut(sa.gamma).value.data_mut()[0] = 0.7;
        let x = random_volume(Shape::cube(1, 3, 4).unwrap(), -1.0, 1.0, 4);
        let mut tape = Tape::new();
        let p = store.bind(&mut tape);
        let xv = tape.constant(x.clone());
        let y = sa.forward(&mut tape, &p, xv).unwrap();
        let wv = store.get(sa.value.weight).value.clone();
        let bv = store.get(sa.value.bias).value.clone();
        let means: Vec<f64> = (0..3).map(|c| x.data()[c * 64..(c + 1) * 64].iter().sum::<f64>() / 64.0).collect();
        for c in 0..3 {
            let proj: f64 = (0..3).map(|j| wv.data()[c * 3 + j] * means[j]).sum::<f64>() + bv.data()[c];
            for i in 0..64 {
                let expected = x.data()[c * 64 + i] + 0.7 * proj;
                assert!((tape.value(y).data()[c * 64 + i] - expected).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn two_token_weights_match_closed_form() {
        let mut store = ParamStore::<f64>::new();
        let sa = SelfAttention::new(&mut store, "sa", 2, 1, &mut rng()).unwrap();
        // Identity projections with zero bias: q = k = v = the tokens themselves.
        for conv in [&sa.query, &sa.key, &sa.value] {
            store.get_mut(conv.weight).value.data_mut().copy_from_slice(&[1.0, 0.0, 0.0, 1.0]);
        }
        let tokens = [[0.5, -1.0], [2.0, 0.25]]; // [token][channel]
        let x = Volume::from_fn(Shape::new(1, 2, 1, 1, 2).unwrap(), |_, c, _, _, w| tokens[w][c]);
        let mut tape = Tape::new();
        let p = store.bind(&mut tape);
        let xv = tape.constant(x);
        let a = &sa.attention_weights(&mut tape, &p, xv).unwrap()[0];
        let dot = |i: usize, j: usize| (tokens[i][0] * tokens[j][0] + tokens[i][1] * tokens[j][1]) / 2f64.sqrt();
        for i in 0..2 {
            let z = dot(i, 0).exp() + dot(i, 1).exp();
            for j in 0..2 {
                assert!((a[i * 2 + j] - dot(i, j).exp() / z).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn self_attention_gradients() {
        let mut store = ParamStore::<f64>::new();
        let sa = SelfAttention::new(&mut store, "sa", 3, 2, &mut rng()).unwrap();
        store.get_mut(sa.gamma).value.data_mut()[0] = 0.8;
        let x = random_volume(Shape::cube(1, 3, 4).unwrap(), -1.0, 1.0, 8);
        let mut inputs = vec![x];
        inputs.extend(store.iter().map(|p| p.value.clone()));
        let report = gradient_check(
            |tape, vars| {
                let bound = Bound { vars: vars[1..].to_vec() };
                let y = sa.forward(tape, &bound, vars[0])?;
                random_projection(tape, y, 11)
            },
            &inputs,
            &GradCheckConfig::default(),
        )
        .unwrap();
        assert!(report.passes(1e-3), "{report:?}");
    }
}
