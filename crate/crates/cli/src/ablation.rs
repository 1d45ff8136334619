//! Ablation plans: named variants of a base run configuration.

use std::collections::HashSet;
use std::path::Path;

use serde::{Deserialize, Serialize};

use pcsa_core::attention::SelfAttentionConfig;
use pcsa_core::config::RunConfig;
use pcsa_core::losses::{LossWeights, StructuralTerm};
use pcsa_core::net::AblationVariant;
use pcsa_core::{Error, Result};

/// Loss combinations compared in the loss ablation; `label` is the row name
/// used in the published table.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum LossCombo {
    #[serde(rename = "adv")]
    Adv,
    #[serde(rename = "adv+mae")]
    AdvMae,
    #[serde(rename = "adv+msssim")]
    AdvMsssim,
    #[serde(rename = "adv+mae+ssim")]
    AdvMaeSsim,
    #[serde(rename = "adv+mae+msssim")]
    AdvMaeMsssim,
}

impl LossCombo {
    pub const ALL: [LossCombo; 5] =
        [LossCombo::Adv, LossCombo::AdvMae, LossCombo::AdvMsssim, LossCombo::AdvMaeSsim, LossCombo::AdvMaeMsssim];

    pub fn key(self) -> &'static str {
        match self {
            LossCombo::Adv => "adv",
            LossCombo::AdvMae => "adv+mae",
            LossCombo::AdvMsssim => "adv+msssim",
            LossCombo::AdvMaeSsim => "adv+mae+ssim",
            LossCombo::AdvMaeMsssim => "adv+mae+msssim",
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            LossCombo::Adv => "Adversarial Loss",
            LossCombo::AdvMae => "MAE",
            LossCombo::AdvMsssim => "MM-SSIM",
            LossCombo::AdvMaeSsim => "MAE+SSIM",
            LossCombo::AdvMaeMsssim => "MAE+ MM-SSIM",
        }
    }

    /// Keeps the base weights of the terms in use and zeroes the rest.
    pub fn weights(self, base: &LossWeights) -> LossWeights {
        let (mae, structural) = match self {
            LossCombo::Adv => (false, None),
            LossCombo::AdvMae => (true, None),
            LossCombo::AdvMsssim => (false, Some(StructuralTerm::MsSsim)),
            LossCombo::AdvMaeSsim => (true, Some(StructuralTerm::Ssim)),
            LossCombo::AdvMaeMsssim => (true, Some(StructuralTerm::MsSsim)),
        };
        LossWeights {
            alpha: base.alpha,
            beta: if mae { base.beta } else { 0.0 },
            gamma: if structural.is_some() { base.gamma } else { 0.0 },
            structural: structural.unwrap_or(base.structural),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VariantSpec {
    pub name: String,
    #[serde(default)]
    pub label: Option<String>,
    #[serde(default = "full")]
    pub architecture: AblationVariant,
    #[serde(default)]
    pub self_attention: Option<SelfAttentionConfig>,
    #[serde(default)]
    pub losses: Option<LossCombo>,
}

fn full() -> AblationVariant {
    AblationVariant::Full
}

impl VariantSpec {
    pub fn label(&self) -> &str {
        self.label.as_deref().unwrap_or(&self.name)
    }

    /// The base configuration with this variant's overrides applied.
    pub fn apply(&self, base: &RunConfig) -> RunConfig {
        let mut cfg = base.clone();
        cfg.generator = base.generator.ablation(self.architecture);
        if let Some(sa) = self.self_attention {
            if cfg.generator.self_attention.is_some() {
                cfg.generator.self_attention = Some(sa);
            }
        }
        if let Some(l) = self.losses {
            cfg.loss_weights = l.weights(&base.loss_weights);
        }
        cfg
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AblationPlan {
    pub variant: Vec<VariantSpec>,
}

impl AblationPlan {
    pub fn architecture() -> Self {
        let v = |name: &str, label: &str, architecture| VariantSpec {
            name: name.into(),
            label: Some(label.into()),
            architecture,
            self_attention: None,
            losses: None,
        };
        AblationPlan {
            variant: vec![
                v("full", "PCSA-GAN", AblationVariant::Full),
                v("pca_only", "PCA-GAN", AblationVariant::PcaOnly),
                v("sa_only", "SA-GAN", AblationVariant::SaOnly),
            ],
        }
    }

    pub fn losses() -> Self {
        AblationPlan {
            variant: LossCombo::ALL
                .iter()
                .map(|&l| VariantSpec {
                    name: l.key().into(),
                    label: Some(l.label().into()),
                    architecture: AblationVariant::Full,
                    self_attention: None,
                    losses: Some(l),
                })
                .collect(),
        }
    }

    /// Self-attention at each expansion stage with single-voxel tokens,
    /// labelled by the attended feature-map size for an input of `edge`.
    pub fn attention_stages(edge: usize, stages: usize, reduction: usize) -> Self {
        AblationPlan {
            variant: (0..stages)
                .map(|stage| {
                    let n = edge * (1 << stage) / reduction;
                    VariantSpec {
                        name: format!("sa_stage{stage}"),
                        label: Some(format!("{n}×{n}×{n}")),
                        architecture: AblationVariant::Full,
                        self_attention: Some(SelfAttentionConfig { stage, patch_edge: 1 }),
                        losses: None,
                    }
                })
                .collect(),
        }
    }

    /// A built-in plan name (`architecture`, `losses`, `attention`) or a TOML file.
    pub fn resolve(spec: &str, base: &RunConfig) -> Result<Self> {
        let plan = match spec {
            "architecture" => Self::architecture(),
            "losses" => Self::losses(),
            "attention" => {
                let g = &base.generator;
                Self::attention_stages(base.data.edge, g.expansion_channels.len(), g.reduction())
            }
            path => {
                let p = Path::new(path);
                let text = std::fs::read_to_string(p).map_err(|source| Error::Io { path: p.to_path_buf(), source })?;
                toml::from_str(&text)?
            }
        };
        plan.validate()?;
        Ok(plan)
    }

    pub fn validate(&self) -> Result<()> {
        if self.variant.is_empty() {
            return Err(Error::Config("ablation plan has no variants".into()));
        }
        let mut seen = HashSet::new();
        for v in &self.variant {
            let ok = !v.name.is_empty() && v.name.chars().all(|c| c.is_ascii_alphanumeric() || "_-+.".contains(c));
            if !ok {
                return Err(Error::Config(format!("invalid variant name {:?}", v.name)));
            }
            if !seen.insert(v.name.as_str()) {
                return Err(Error::Config(format!("duplicate variant name {}", v.name)));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn builtin_plans() {
        assert_eq!(AblationPlan::architecture().variant.len(), 3);
        let labels: Vec<String> = AblationPlan::losses().variant.iter().map(|v| v.label().to_string()).collect();
        assert_eq!(labels, ["Adversarial Loss", "MAE", "MM-SSIM", "MAE+SSIM", "MAE+ MM-SSIM"]);
        let sa = AblationPlan::attention_stages(16, 3, 8);
        let labels: Vec<&str> = sa.variant.iter().map(|v| v.label()).collect();
        assert_eq!(labels, ["2×2×2", "4×4×4", "8×8×8"]);
    }

    #[test]
    fn loss_weights_per_combo() {
        let base = LossWeights::default();
        let w = LossCombo::Adv.weights(&base);
        assert_eq!((w.alpha, w.beta, w.gamma), (1.0, 0.0, 0.0));
        let w = LossCombo::AdvMaeSsim.weights(&base);
        assert_eq!((w.beta, w.gamma, w.structural), (10.0, 10.0, StructuralTerm::Ssim));
        assert_eq!(LossCombo::AdvMaeMsssim.weights(&base), base);
    }

    #[test]
    fn variants_share_everything_but_their_override() {
        let base = RunConfig::default();
        let plan = AblationPlan::architecture();
        for v in &plan.variant {
            let cfg = v.apply(&base);
            assert_eq!(cfg.train, base.train);
            assert_eq!(cfg.loss_weights, base.loss_weights);
        }
        assert!(plan.variant[1].apply(&base).generator.self_attention.is_none());
    }

    #[test]
    fn plan_file_parses_and_rejects_duplicates() {
        let text = "[[variant]]\nname = \"a\"\nlosses = \"adv+mae\"\n\n[[variant]]\nname = \"b\"\narchitecture = \"sa_only\"\n";
        let plan: AblationPlan = toml::from_str(text).unwrap();
        plan.validate().unwrap();
        assert_eq!(plan.variant[0].losses, Some(LossCombo::AdvMae));
        let dup = AblationPlan { variant: vec![plan.variant[0].clone(), plan.variant[0].clone()] };
        assert!(dup.validate().is_err());
    }
}
