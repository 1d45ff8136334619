use serde::{Deserialize, Serialize};

use crate::attention::SelfAttentionConfig;
use crate::{Error, Result};

/// One parallel convolution branch of a pyramid layer.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Branch {
    pub kernel: usize,
    pub filters: usize,
}

/// Parallel multi-kernel convolutions whose outputs form one feature group each.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PyramidSpec {
    pub branches: Vec<Branch>,
    #[serde(default = "one")]
    pub stride: usize,
}

fn one() -> usize {
    1
}

impl PyramidSpec {
    pub fn new(branches: &[(usize, usize)], stride: usize) -> Self {
        PyramidSpec {
            branches: branches.iter().map(|&(kernel, filters)| Branch { kernel, filters }).collect(),
            stride,
        }
    }

    pub fn out_channels(&self) -> usize {
        self.branches.iter().map(|b| b.filters).sum()
    }

    pub fn validate(&self) -> Result<()> {
        if self.branches.is_empty() {
            return Err(Error::Config("pyramid layer without branches".into()));
        }
        for b in &self.branches {
            if b.kernel % 2 == 0 || b.filters == 0 {
                return Err(Error::Config(format!(
                    "pyramid branch needs an odd kernel and at least one filter, got {b:?}"
                )));
            }
        }
        if !(1..=2).contains(&self.stride) {
            return Err(Error::Config(format!("pyramid stride must be 1 or 2, got {}", self.stride)));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FinalActivation {
    Sigmoid,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GeneratorConfig {
    pub in_channels: usize,
    /// Pyramid-convolution blocks of the contraction path, each followed by 2x max pooling.
    pub pcca_blocks: Vec<PyramidSpec>,
    /// Deepest contraction stage; a stride-2 convolution.
    pub deep_stage: PyramidSpec,
    /// Output channels of the transposed convolutions, deepest first.
    pub expansion_channels: Vec<usize>,
    /// Grouped channel attention inside the pyramid blocks.
    pub channel_attention: bool,
    pub ca_reduction: usize,
    /// Sigmoid inside channel attention before the group softmax.
    pub ca_inner_sigmoid: bool,
    /// `"off"` in config files disables self-attention.
    #[serde(with = "optional_attention")]
    pub self_attention: Option<SelfAttentionConfig>,
    pub skip_connections: bool,
    /// Adds a projected trilinear upsampling of each expansion input.
    pub trilinear_detail: bool,
    /// Group normalisation after every hidden convolution, with
    /// `gcd(channels, norm_groups)` groups; 0 disables it.
    pub norm_groups: usize,
    pub head_kernel: usize,
    pub final_activation: FinalActivation,
    /// Initial output level: the head bias starts at `logit(output_prior)`.
    pub output_prior: f64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        GeneratorConfig {
            in_channels: 1,
            pcca_blocks: vec![
                PyramidSpec::new(&[(7, 4), (5, 8), (3, 12)], 1),
                PyramidSpec::new(&[(5, 36), (3, 60)], 1),
            ],
            deep_stage: PyramidSpec::new(&[(3, 192)], 2),
            expansion_channels: vec![96, 24, 8],
            channel_attention: true,
            ca_reduction: 4,
            ca_inner_sigmoid: true,
            self_attention: Some(SelfAttentionConfig { stage: 0, patch_edge: 1 }),
            skip_connections: true,
            trilinear_detail: true,
            norm_groups: 4,
            head_kernel: 3,
            final_activation: FinalActivation::Sigmoid,
            output_prior: 0.1,
        }
    }
}

mod optional_attention {
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    use crate::attention::SelfAttentionConfig;

    #[derive(Serialize, Deserialize)]
    #[serde(untagged)]
    enum Repr {
        Flag(String),
        On(SelfAttentionConfig),
    }

    pub fn serialize<S: Serializer>(v: &Option<SelfAttentionConfig>, s: S) -> Result<S::Ok, S::Error> {
        match v {
            Some(c) => Repr::On(*c),
            None => Repr::Flag("off".into()),
        }
        .serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Option<SelfAttentionConfig>, D::Error> {
        match Repr::deserialize(d)? {
            Repr::On(c) => Ok(Some(c)),
            Repr::Flag(f) if f == "off" => Ok(None),
            Repr::Flag(f) => Err(serde::de::Error::custom(format!("self_attention must be a table or \"off\", got {f:?}"))),
        }
    }
}

/// Architecture ablations of the generator.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AblationVariant {
    Full,
    /// Pyramid blocks with channel attention, no self-attention.
    PcaOnly,
    /// Self-attention with plain 3^3 convolutions in place of the pyramid blocks.
    SaOnly,
}

impl std::str::FromStr for AblationVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(AblationVariant::Full),
            "pca_only" => Ok(AblationVariant::PcaOnly),
            "sa_only" => Ok(AblationVariant::SaOnly),
            other => Err(Error::Config(format!("unknown ablation variant `{other}`"))),
        }
    }
}

impl GeneratorConfig {
    /// Total spatial reduction of the contraction path.
    pub fn reduction(&self) -> usize {
        (1 << self.pcca_blocks.len()) * self.deep_stage.stride
    }

    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 {
            return Err(Error::Config("generator needs at least one input channel".into()));
        }
        for b in &self.pcca_blocks {
            b.validate()?;
            if b.stride != 1 {
                return Err(Error::Config("pyramid blocks use stride 1 (pooling halves them)".into()));
            }
        }
        self.deep_stage.validate()?;
        if self.deep_stage.stride != 2 {
            return Err(Error::Config("the deep stage must use stride 2".into()));
        }
        if self.expansion_channels.len() != self.pcca_blocks.len() + 1 {
            return Err(Error::Config(format!(
                "{} expansion stages needed for {} pyramid blocks",
                self.pcca_blocks.len() + 1,
                self.pcca_blocks.len()
            )));
        }
        if self.expansion_channels.contains(&0) || self.ca_reduction == 0 {
            return Err(Error::Config("channel counts and reduction ratio must be positive".into()));
        }
        if self.head_kernel % 2 == 0 {
            return Err(Error::Config("head kernel must be odd".into()));
        }
        if !(self.output_prior > 0.0 && self.output_prior < 1.0) {
            return Err(Error::Config("output prior must lie in (0, 1)".into()));
        }
        if let Some(sa) = self.self_attention {
            if sa.stage > self.expansion_channels.len() || sa.patch_edge == 0 {
                return Err(Error::Config(format!("invalid self-attention placement {sa:?}")));
            }
        }
        Ok(())
    }

    /// Configuration of an architecture ablation of this generator.
    pub fn ablation(&self, variant: AblationVariant) -> GeneratorConfig {
        let mut cfg = self.clone();
        match variant {
            AblationVariant::Full => {}
            AblationVariant::PcaOnly => cfg.self_attention = None,
            AblationVariant::SaOnly => {
                for block in &mut cfg.pcca_blocks {
                    *block = PyramidSpec::new(&[(3, block.out_channels())], block.stride);
                }
                cfg.channel_attention = false;
            }
        }
        cfg
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DiscriminatorConfig {
    pub channel_ladder: Vec<usize>,
    pub kernel_edge: usize,
    /// 1-based index of the first layer carrying a shortcut.
    pub residual_from_layer: usize,
    /// Also feed the source volume as a second input channel.
    pub conditional: bool,
}

impl Default for DiscriminatorConfig {
    fn default() -> Self {
        DiscriminatorConfig {
            channel_ladder: vec![24, 48, 96, 192],
            kernel_edge: 3,
            residual_from_layer: 2,
            conditional: false,
        }
    }
}

impl DiscriminatorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.channel_ladder.is_empty() || self.channel_ladder.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Config("discriminator ladder must be strictly increasing".into()));
        }
        if self.channel_ladder[0] == 0 || self.kernel_edge % 2 == 0 || self.residual_from_layer == 0 {
            return Err(Error::Config("invalid discriminator layer settings".into()));
        }
        Ok(())
    }

    pub fn in_channels(&self) -> usize {
        if self.conditional {
            2
        } else {
            1
        }
    }

    /// Required divisor of the input extents.
    pub fn reduction(&self) -> usize {
        1 << self.channel_ladder.len()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn paper_filter_counts() {
        let g = GeneratorConfig::default();
        assert_eq!(g.pcca_blocks[0].out_channels(), 24);
        assert_eq!(g.pcca_blocks[1].out_channels(), 96);
        assert_eq!(g.deep_stage.out_channels(), 192);
        assert_eq!(g.reduction(), 8);
        g.validate().unwrap();
        assert_eq!(DiscriminatorConfig::default().channel_ladder, vec![24, 48, 96, 192]);
    }

    #[test]
    fn ablations() {
        let g = GeneratorConfig::default();
        assert_eq!(g.ablation(AblationVariant::Full), g);
        let pca = g.ablation(AblationVariant::PcaOnly);
        assert!(pca.self_attention.is_none());
        assert_eq!(pca.pcca_blocks, g.pcca_blocks);
        let sa = g.ablation(AblationVariant::SaOnly);
        assert_eq!(sa.pcca_blocks[0], PyramidSpec::new(&[(3, 24)], 1));
        assert_eq!(sa.pcca_blocks[1], PyramidSpec::new(&[(3, 96)], 1));
        assert!(!sa.channel_attention);
        assert!(sa.self_attention.is_some());
        assert!("bogus".parse::<AblationVariant>().is_err());
    }

    #[test]
    fn validation_catches_bad_configs() {
        let mut g = GeneratorConfig::default();
        g.pcca_blocks[0].branches[0].kernel = 4;
        assert!(g.validate().is_err());
        let mut d = DiscriminatorConfig::default();
        d.channel_ladder = vec![24, 24, 96, 192];
        assert!(d.validate().is_err());
        for p in [0.0, 1.0, f64::NAN] {
            let g = GeneratorConfig { output_prior: p, ..GeneratorConfig::default() };
            assert!(g.validate().is_err(), "{p}");
        }
    }

    #[test]
    fn head_bias_starts_at_output_prior() {
        use rand::SeedableRng;
        let cfg = crate::selfcheck::reduced_generator_config();
        let (g, store) = super::super::Generator::build::<f64, _>(&cfg, &mut rand_chacha::ChaCha8Rng::seed_from_u64(1)).unwrap();
        let b = store.get(g.head.bias).value.data()[0];
        assert!((1.0 / (1.0 + (-b).exp()) - 0.1).abs() < 1e-12, "{b}");
    }

    #[test]
    fn toml_round_trip_keeps_disabled_attention() {
        for v in [AblationVariant::Full, AblationVariant::PcaOnly, AblationVariant::SaOnly] {
            let g = GeneratorConfig::default().ablation(v);
            let text = toml::to_string(&g).unwrap();
            assert_eq!(toml::from_str::<GeneratorConfig>(&text).unwrap(), g, "{text}");
        }
        assert!(toml::from_str::<GeneratorConfig>("self_attention = \"maybe\"").is_err());
    }
}
