use rand::Rng;

use super::config::DiscriminatorConfig;
use crate::layers::{Conv3d, Linear};
use crate::tensor::{Bound, Element, Padding, ParamStore, Shape, Tape, Var, Volume};
use crate::{Error, Result};

/// `pool(relu(conv(x)) + shortcut(x))`; the shortcut is a `1x1x1` projection
/// when the channel count changes and the identity otherwise.
#[derive(Clone, Debug)]
pub struct DiscLayer {
    pub conv: Conv3d,
    pub shortcut: Option<Option<Conv3d>>,
}

#[derive(Clone, Debug)]
pub struct Discriminator {
    pub config: DiscriminatorConfig,
    pub layers: Vec<DiscLayer>,
    pub classifier: Linear,
    manifest: Vec<(String, Shape)>,
}

impl Discriminator {
    pub fn build<T: Element, R: Rng + ?Sized>(config: &DiscriminatorConfig, rng: &mut R) -> Result<(Self, ParamStore<T>)> {
        config.validate()?;
        let mut store = ParamStore::new();
        let mut channels = config.in_channels();
        let mut layers = Vec::new();
        for (i, &out) in config.channel_ladder.iter().enumerate() {
            let name = format!("layer{}", i + 1);
            let conv = Conv3d::new(&mut store, &format!("{name}.conv"), channels, out, config.kernel_edge, 1, Padding::Same, rng)?;
            let shortcut = if i + 1 >= config.residual_from_layer {
                Some(if out == channels {
                    None
                } else {
                    Some(Conv3d::pointwise(&mut store, &format!("{name}.shortcut"), channels, out, rng)?)
                })
            } else {
                None
            };
            layers.push(DiscLayer { conv, shortcut });
            channels = out;
        }
        let classifier = Linear::new(&mut store, "fc", channels, 1, rng)?;
        let manifest = store.manifest();
        Ok((Discriminator { config: config.clone(), layers, classifier, manifest }, store))
    }

    pub fn manifest(&self) -> &[(String, Shape)] {
        &self.manifest
    }

    pub fn fingerprint(&self) -> String {
        let desc = toml::to_string(&self.config).expect("discriminator config serialises");
        super::fingerprint(&format!("discriminator\n{desc}"), &self.manifest)
    }

    /// One logit per batch item, shape `(batch, 1, 1, 1, 1)`.
    pub fn forward<T: Element>(&self, tape: &mut Tape<T>, p: &Bound, v: Var) -> Result<Var> {
        let s = tape.shape(v);
        let r = self.config.reduction();
        if s.channels != self.config.in_channels() || s.spatial().iter().any(|n| n % r != 0) {
            return Err(Error::Shape(format!(
                "discriminator needs {} channel(s) and extents divisible by {r}, got {s}",
                self.config.in_channels()
            )));
        }
        let mut h = v;
        for layer in &self.layers {
            let y = layer.conv.forward(tape, p, h)?;
            let mut y = tape.relu(y);
            match &layer.shortcut {
                Some(Some(proj)) => {
                    let sc = proj.forward(tape, p, h)?;
                    y = tape.add(y, sc)?;
                }
                Some(None) => y = tape.add(y, h)?,
                None => {}
            }
            h = tape.max_pool2(y)?;
        }
        let pooled = tape.global_avg_pool(h);
        self.classifier.forward(tape, p, pooled)
    }

    /// Logits on frozen parameters.
    pub fn logits<T: Element>(&self, params: &ParamStore<T>, v: &Volume<T>) -> Result<Vec<T>> {
        let mut tape = Tape::new();
        let p = params.bind_frozen(&mut tape);
        let x = tape.constant(v.clone());
        let y = self.forward(&mut tape, &p, x)?;
        Ok(tape.value(y).data().to_vec())
    }
}
