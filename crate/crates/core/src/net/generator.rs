use rand::Rng;

use super::config::{GeneratorConfig, PyramidSpec};
use crate::attention::{grouped_attention_weighting, ChannelAttention, SelfAttention};
use crate::layers::{maybe_norm, Conv3d, ConvTranspose3d, GroupNorm};
use crate::tensor::{Bound, Element, Padding, ParamStore, Shape, Tape, Var, Volume};
use crate::{Error, Result};

/// Parallel `same` convolutions (+ norm) + ReLU, optional grouped channel
/// attention, concatenation and 2x max pooling.
#[derive(Clone, Debug)]
pub struct PccaBlock {
    pub branches: Vec<Conv3d>,
    pub norms: Vec<Option<GroupNorm>>,
    pub attention: Option<Vec<ChannelAttention>>,
}

impl PccaBlock {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Element, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        in_channels: usize,
        spec: &PyramidSpec,
        channel_attention: bool,
        reduction: usize,
        inner_sigmoid: bool,
        norm_groups: usize,
        rng: &mut R,
    ) -> Result<Self> {
        spec.validate()?;
        let mut branches = Vec::new();
        let mut norms = Vec::new();
        let mut attention = Vec::new();
        for b in &spec.branches {
            let bname = format!("{name}.k{}", b.kernel);
            branches.push(Conv3d::new(store, &bname, in_channels, b.filters, b.kernel, spec.stride, Padding::Same, rng)?);
            norms.push(norm(store, &format!("{bname}.norm"), b.filters, norm_groups)?);
            if channel_attention {
                attention.push(ChannelAttention::new(store, &format!("{bname}.ca"), b.filters, reduction, inner_sigmoid, rng)?);
            }
        }
        Ok(PccaBlock { branches, norms, attention: channel_attention.then_some(attention) })
    }

    pub fn forward<T: Element>(&self, tape: &mut Tape<T>, p: &Bound, x: Var) -> Result<Var> {
        let s = tape.shape(x);
        if s.spatial().iter().any(|n| n % 2 != 0) {
            return Err(Error::Shape(format!("pyramid block input {s} has odd extents")));
        }
        let mut groups = Vec::with_capacity(self.branches.len());
        for (conv, norm) in self.branches.iter().zip(&self.norms) {
            let f = conv.forward(tape, p, x)?;
            let f = maybe_norm(norm, tape, p, f)?;
            groups.push(tape.relu(f));
        }
        let merged = match &self.attention {
            Some(ca) => grouped_attention_weighting(tape, p, &groups, ca)?,
            None => tape.concat(&groups)?,
        };
        tape.max_pool2(merged)
    }
}

fn norm<T: Element>(store: &mut ParamStore<T>, name: &str, channels: usize, groups: usize) -> Result<Option<GroupNorm>> {
    if groups == 0 {
        return Ok(None);
    }
    GroupNorm::new(store, name, channels, groups).map(Some)
}

/// `x + norm(conv(relu(norm(conv(x)))))` with `same` 3^3 convolutions.
#[derive(Clone, Debug)]
pub struct ResidualBlock {
    pub first: Conv3d,
    pub second: Conv3d,
    pub norms: [Option<GroupNorm>; 2],
}

impl ResidualBlock {
    pub fn new<T: Element, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        channels: usize,
        norm_groups: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let first = Conv3d::new(store, &format!("{name}.conv1"), channels, channels, 3, 1, Padding::Same, rng)?;
        let n1 = norm(store, &format!("{name}.norm1"), channels, norm_groups)?;
        let second = Conv3d::new(store, &format!("{name}.conv2"), channels, channels, 3, 1, Padding::Same, rng)?;
        let n2 = norm(store, &format!("{name}.norm2"), channels, norm_groups)?;
        Ok(ResidualBlock { first, second, norms: [n1, n2] })
    }

    pub fn forward<T: Element>(&self, tape: &mut Tape<T>, p: &Bound, x: Var) -> Result<Var> {
        let h = self.first.forward(tape, p, x)?;
        let h = maybe_norm(&self.norms[0], tape, p, h)?;
        let h = tape.relu(h);
        let h = self.second.forward(tape, p, h)?;
        let h = maybe_norm(&self.norms[1], tape, p, h)?;
        tape.add(x, h)
    }
}

/// One 2x expansion step: `relu(norm(deconv(h) + proj(trilinear(h))))`.
#[derive(Clone, Debug)]
pub struct ExpansionStage {
    pub deconv: ConvTranspose3d,
    pub detail: Option<Conv3d>,
    pub norm: Option<GroupNorm>,
}

impl ExpansionStage {
    pub fn forward<T: Element>(&self, tape: &mut Tape<T>, p: &Bound, h: Var) -> Result<Var> {
        let up = self.deconv.forward(tape, p, h)?;
        let up = match &self.detail {
            Some(proj) => {
                let smooth = tape.upsample_trilinear2(h);
                let smooth = proj.forward(tape, p, smooth)?;
                tape.add(up, smooth)?
            }
            None => up,
        };
        let up = maybe_norm(&self.norm, tape, p, up)?;
        Ok(tape.relu(up))
    }
}

/// Volume-to-volume generator. The layout is element-type independent; the
/// parameter values live in a [`ParamStore`].
#[derive(Clone, Debug)]
pub struct Generator {
    pub config: GeneratorConfig,
    pub blocks: Vec<PccaBlock>,
    pub deep: Vec<Conv3d>,
    pub deep_norms: Vec<Option<GroupNorm>>,
    pub residual: ResidualBlock,
    pub self_attention: Option<SelfAttention>,
    pub expansion: Vec<ExpansionStage>,
    pub head: Conv3d,
    manifest: Vec<(String, Shape)>,
}

impl Generator {
    /// Builds the layout and freshly initialised parameters.
    pub fn build<T: Element, R: Rng + ?Sized>(config: &GeneratorConfig, rng: &mut R) -> Result<(Self, ParamStore<T>)> {
        config.validate()?;
        let mut store = ParamStore::new();
        let mut channels = config.in_channels;
        let mut skip_channels = vec![config.in_channels];
        let mut blocks = Vec::new();
        for (i, spec) in config.pcca_blocks.iter().enumerate() {
            blocks.push(PccaBlock::new(
                &mut store,
                &format!("pcca{}", i + 1),
                channels,
                spec,
                config.channel_attention,
                config.ca_reduction,
                config.ca_inner_sigmoid,
                config.norm_groups,
                rng,
            )?);
            channels = spec.out_channels();
            skip_channels.push(channels);
        }
        let mut deep = Vec::new();
        let mut deep_norms = Vec::new();
        for b in &config.deep_stage.branches {
            let name = format!("deep.k{}", b.kernel);
            deep.push(Conv3d::new(&mut store, &name, channels, b.filters, b.kernel, config.deep_stage.stride, Padding::Same, rng)?);
            deep_norms.push(norm(&mut store, &format!("{name}.norm"), b.filters, config.norm_groups)?);
        }
        channels = config.deep_stage.out_channels();
        let residual = ResidualBlock::new(&mut store, "residual", channels, config.norm_groups, rng)?;

        let sa_stage = config.self_attention.map(|s| s.stage);
        let mut self_attention = None;
        let mut expansion = Vec::new();
        for (i, &out) in config.expansion_channels.iter().enumerate() {
            if sa_stage == Some(i) {
                let sa = config.self_attention.expect("stage implies config");
                self_attention = Some(SelfAttention::new(&mut store, "sa", channels, sa.patch_edge, rng)?);
            }
            let name = format!("up{}", i + 1);
            let deconv = ConvTranspose3d::new(&mut store, &format!("{name}.deconv"), channels, out, 3, rng)?;
            let detail = if config.trilinear_detail {
                Some(Conv3d::pointwise(&mut store, &format!("{name}.detail"), channels, out, rng)?)
            } else {
                None
            };
            let norm = norm(&mut store, &format!("{name}.norm"), out, config.norm_groups)?;
            expansion.push(ExpansionStage { deconv, detail, norm });
            channels = out;
            if config.skip_connections {
                channels += skip_channels[skip_channels.len() - 1 - i];
            }
        }
        if sa_stage == Some(config.expansion_channels.len()) {
            let sa = config.self_attention.expect("stage implies config");
            self_attention = Some(SelfAttention::new(&mut store, "sa", channels, sa.patch_edge, rng)?);
        }
        let head = Conv3d::new(&mut store, "head", channels, config.in_channels, config.head_kernel, 1, Padding::Same, rng)?;
        let p = config.output_prior;
        store.get_mut(head.bias).value.data_mut().fill(T::from_f64((p / (1.0 - p)).ln()));
        let manifest = store.manifest();
        Ok((
            Generator { config: config.clone(), blocks, deep, deep_norms, residual, self_attention, expansion, head, manifest },
            store,
        ))
    }

    /// `(name, shape)` of every parameter this layout expects.
    pub fn manifest(&self) -> &[(String, Shape)] {
        &self.manifest
    }

    pub fn fingerprint(&self) -> String {
        let desc = toml::to_string(&self.config).expect("generator config serialises");
        super::fingerprint(&format!("generator\n{desc}"), &self.manifest)
    }

    fn check_input(&self, s: Shape) -> Result<()> {
        let r = self.config.reduction();
        if s.channels != self.config.in_channels || s.spatial().iter().any(|n| n % r != 0) {
            return Err(Error::Shape(format!(
                "generator needs {} channel(s) and extents divisible by {r}, got {s}",
                self.config.in_channels
            )));
        }
        Ok(())
    }

    /// Output of the first `n` pyramid blocks (for inspection and tests).
    pub fn contraction_features<T: Element>(&self, tape: &mut Tape<T>, p: &Bound, x: Var) -> Result<Vec<Var>> {
        let mut feats = Vec::new();
        let mut h = x;
        for block in &self.blocks {
            h = block.forward(tape, p, h)?;
            feats.push(h);
        }
        Ok(feats)
    }

    pub fn forward<T: Element>(&self, tape: &mut Tape<T>, p: &Bound, x: Var) -> Result<Var> {
        self.check_input(tape.shape(x))?;
        let mut skips = vec![x];
        skips.extend(self.contraction_features(tape, p, x)?);
        let last = *skips.last().expect("input is always present");
        let mut deep = Vec::with_capacity(self.deep.len());
        for (conv, norm) in self.deep.iter().zip(&self.deep_norms) {
            let f = conv.forward(tape, p, last)?;
            let f = maybe_norm(norm, tape, p, f)?;
            deep.push(tape.relu(f));
        }
        let mut h = if deep.len() == 1 { deep[0] } else { tape.concat(&deep)? };
        h = self.residual.forward(tape, p, h)?;

        let sa_stage = self.config.self_attention.map(|s| s.stage);
        for (i, stage) in self.expansion.iter().enumerate() {
            if sa_stage == Some(i) {
                h = self.attend(tape, p, h)?;
            }
            h = stage.forward(tape, p, h)?;
            if self.config.skip_connections {
                let skip = skips[skips.len() - 1 - i];
                h = tape.concat(&[h, skip])?;
            }
        }
        if sa_stage == Some(self.expansion.len()) {
            h = self.attend(tape, p, h)?;
        }
        let out = self.head.forward(tape, p, h)?;
        Ok(tape.sigmoid(out))
    }

    fn attend<T: Element>(&self, tape: &mut Tape<T>, p: &Bound, h: Var) -> Result<Var> {
        match &self.self_attention {
            Some(sa) => sa.forward(tape, p, h),
            None => Ok(h),
        }
    }

    /// Runs the generator on frozen parameters.
    pub fn translate<T: Element>(&self, params: &ParamStore<T>, x: &Volume<T>) -> Result<Volume<T>> {
        let mut tape = Tape::new();
        let p = params.bind_frozen(&mut tape);
        let xv = tape.constant(x.clone());
        let y = self.forward(&mut tape, &p, xv)?;
        Ok(tape.value(y).clone())
    }
}
