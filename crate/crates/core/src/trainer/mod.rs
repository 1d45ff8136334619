//! Adam, the alternating GAN loop and checkpoints.

mod adam;
mod checkpoint;

pub use adam::{adam_step, AdamConfig, AdamState};
pub use checkpoint::{Checkpoint, CheckpointManifest, TensorEntry, FORMAT_VERSION};

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::data::{splitmix64, VolumePair};
use crate::losses::{
    discriminator_loss, evaluate_pairs, fmt_metric, generator_adversarial_loss, joint_generator_loss, l1_loss,
    msssim_loss, ssim_loss, MetricReport, SsimConfig, StructuralTerm,
};
use crate::net::{Discriminator, Generator};
use crate::tensor::{ParamStore, Tape, Var, Volume};
use crate::{Error, Result};

pub const METRICS_HEADER: &str = "step,loss_d,loss_adv_g,loss_l1,loss_msssim,val_mae,val_psnr,val_ssim";
pub const METRICS_FILE: &str = "metrics.csv";
pub const CONFIG_FILE: &str = "config.toml";
pub const FINAL_CHECKPOINT: &str = "checkpoints/final.ckpt";

/// Losses of one generator update; `loss_msssim` holds whichever structural
/// term the loss weights select.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: u64,
    pub loss_d: f64,
    pub loss_adv_g: f64,
    pub loss_l1: f64,
    pub loss_msssim: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub val_mae: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub val_psnr: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub val_ssim: Option<f64>,
}

impl StepRecord {
    pub fn csv_row(&self) -> String {
        let opt = |v: Option<f64>| v.map(fmt_metric).unwrap_or_default();
        format!(
            "{},{},{},{},{},{},{},{}",
            self.step,
            fmt_metric(self.loss_d),
            fmt_metric(self.loss_adv_g),
            fmt_metric(self.loss_l1),
            fmt_metric(self.loss_msssim),
            opt(self.val_mae),
            opt(self.val_psnr),
            opt(self.val_ssim)
        )
    }
}

pub fn write_metrics_csv(path: &Path, history: &[StepRecord]) -> Result<()> {
    let mut text = String::from(METRICS_HEADER);
    text.push('\n');
    for r in history {
        text.push_str(&r.csv_row());
        text.push('\n');
    }
    std::fs::write(path, text).map_err(Error::io(path))
}

/// Anything that maps a source volume batch to a target-modality batch.
pub trait Translator {
    fn translate(&self, source: &Volume) -> Result<Volume>;
}

/// Returns its input; a stand-in for wiring tests.
pub struct IdentityTranslator;

impl Translator for IdentityTranslator {
    fn translate(&self, source: &Volume) -> Result<Volume> {
        Ok(source.clone())
    }
}

impl Translator for Trainer {
    fn translate(&self, source: &Volume) -> Result<Volume> {
        self.generator.translate(&self.gen_params, source)
    }
}

/// Translates every pair's source in batches and scores it against the target.
pub fn evaluate_translator(t: &dyn Translator, pairs: &[VolumePair], batch: usize) -> Result<MetricReport> {
    if pairs.is_empty() {
        return Err(Error::Empty("no pairs to evaluate".into()));
    }
    let mut generated = Vec::with_capacity(pairs.len());
    for chunk in pairs.chunks(batch.max(1)) {
        let x = Volume::stack(&chunk.iter().map(|p| &p.source).collect::<Vec<_>>())?;
        let y = t.translate(&x)?;
        generated.extend((0..chunk.len()).map(|b| y.item(b)));
    }
    let cfg = SsimConfig::single_scale();
    evaluate_pairs(pairs.iter().zip(&generated).map(|(p, g)| (p.seed.to_string(), g, &p.target)), &cfg)
}

/// Order in which epoch `epoch` visits `n` training pairs.
pub fn epoch_order(seed: u64, epoch: u64, n: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(splitmix64(seed ^ splitmix64(epoch.wrapping_add(1))));
    idx.shuffle(&mut rng);
    idx
}

/// Generator, discriminator and their optimizer state.
#[derive(Clone, Debug)]
pub struct Trainer {
    pub config: RunConfig,
    pub generator: Generator,
    pub discriminator: Discriminator,
    pub gen_params: ParamStore,
    pub disc_params: ParamStore,
    pub gen_adam: AdamState,
    pub disc_adam: AdamState,
    /// Generator updates completed.
    pub step: u64,
    pub history: Vec<StepRecord>,
}

impl Trainer {
    pub fn new(config: &RunConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.train.seed);
        let (generator, gen_params) = Generator::build(&config.generator, &mut rng)?;
        let (discriminator, disc_params) = Discriminator::build(&config.discriminator, &mut rng)?;
        Ok(Trainer {
            config: config.clone(),
            gen_adam: AdamState::for_params(&gen_params),
            disc_adam: AdamState::for_params(&disc_params),
            generator,
            discriminator,
            gen_params,
            disc_params,
            step: 0,
            history: Vec::new(),
        })
    }

    /// Architecture fingerprint covering both networks.
    pub fn fingerprint(&self) -> String {
        crate::net::fingerprint(&format!("{}\n{}", self.generator.fingerprint(), self.discriminator.fingerprint()), &[])
    }

    /// Fingerprint a configuration would produce, without training state.
    pub fn fingerprint_of(config: &RunConfig) -> Result<String> {
        Ok(Trainer::new(config)?.fingerprint())
    }

    fn adam(&self, lr: f64) -> AdamConfig {
        let t = &self.config.train;
        AdamConfig { lr, beta1: t.beta1, beta2: t.beta2, eps: t.epsilon }
    }

    fn disc_input(&self, tape: &mut Tape, source: Var, volume: Var) -> Result<Var> {
        if self.config.discriminator.conditional {
            tape.concat(&[source, volume])
        } else {
            Ok(volume)
        }
    }

    /// One discriminator update on real targets and (detached) generated volumes.
    pub fn discriminator_update(&mut self, source: &Volume, target: &Volume, fake: &Volume, seeds: &[u64]) -> Result<f64> {
        let mut tape = Tape::new();
        let dp = self.disc_params.bind(&mut tape);
        let (x, y, f) = (tape.constant(source.clone()), tape.constant(target.clone()), tape.constant(fake.clone()));
        let real_in = self.disc_input(&mut tape, x, y)?;
        let fake_in = self.disc_input(&mut tape, x, f)?;
        let d_real = self.discriminator.forward(&mut tape, &dp, real_in)?;
        let d_fake = self.discriminator.forward(&mut tape, &dp, fake_in)?;
        let loss = discriminator_loss(&mut tape, d_real, d_fake)?;
        let value = tape.value(loss).data()[0] as f64;
        if !value.is_finite() {
            return Err(Error::NonFiniteLoss { step: self.step + 1, seeds: seeds.to_vec(), detail: format!("loss_d = {value}") });
        }
        let grads = tape.backward(loss)?;
        self.disc_params.zero_grad();
        self.disc_params.accumulate(&dp, &grads);
        let cfg = self.adam(self.config.train.lr_discriminator);
        adam_step(&mut self.disc_params, &mut self.disc_adam, &cfg)?;
        Ok(value)
    }

    /// D update(s) on the detached generator output, then one G update on the
    /// joint loss against the updated discriminator.
    pub fn train_step(&mut self, batch: &[&VolumePair]) -> Result<StepRecord> {
        if batch.is_empty() {
            return Err(Error::Empty("training batch".into()));
        }
        let seeds: Vec<u64> = batch.iter().map(|p| p.seed).collect();
        let source = Volume::stack(&batch.iter().map(|p| &p.source).collect::<Vec<_>>())?;
        let target = Volume::stack(&batch.iter().map(|p| &p.target).collect::<Vec<_>>())?;

        let mut tape = Tape::new();
        let gp = self.gen_params.bind(&mut tape);
        let x = tape.constant(source.clone());
        let fake = self.generator.forward(&mut tape, &gp, x)?;
        let fake_value = tape.value(fake).clone();

        let mut loss_d = 0.0;
        for _ in 0..self.config.train.d_steps_per_g_step {
            loss_d = self.discriminator_update(&source, &target, &fake_value, &seeds)?;
        }

        let dp = self.disc_params.bind_frozen(&mut tape);
        let d_in = self.disc_input(&mut tape, x, fake)?;
        let d_fake = self.discriminator.forward(&mut tape, &dp, d_in)?;
        let adv = generator_adversarial_loss(&mut tape, d_fake);
        let y = tape.constant(target);
        let l1 = l1_loss(&mut tape, fake, y)?;
        let structural = match self.config.loss_weights.structural {
            StructuralTerm::MsSsim => msssim_loss(&mut tape, fake, y, &self.config.ssim)?,
            StructuralTerm::Ssim => ssim_loss(&mut tape, fake, y, &self.config.ssim)?,
        };
        let total = joint_generator_loss(&mut tape, &self.config.loss_weights, adv, l1, structural)?;

        let val = |v: Var| tape.value(v).data()[0] as f64;
        let record = StepRecord {
            step: self.step + 1,
            loss_d,
            loss_adv_g: val(adv),
            loss_l1: val(l1),
            loss_msssim: val(structural),
            val_mae: None,
            val_psnr: None,
            val_ssim: None,
        };
        if !val(total).is_finite() {
            return Err(Error::NonFiniteLoss {
                step: record.step,
                seeds,
                detail: format!(
                    "loss_adv_g = {}, loss_l1 = {}, loss_msssim = {}",
                    record.loss_adv_g, record.loss_l1, record.loss_msssim
                ),
            });
        }
        let grads = tape.backward(total)?;
        self.gen_params.zero_grad();
        self.gen_params.accumulate(&gp, &grads);
        let cfg = self.adam(self.config.train.lr_generator);
        adam_step(&mut self.gen_params, &mut self.gen_adam, &cfg)?;
        self.step += 1;
        Ok(record)
    }

    /// Training-set indices of the batch for generator update `step` (0-based).
    pub fn batch_indices(&self, step: u64, n: usize) -> Vec<usize> {
        let b = self.config.train.batch_size as u64;
        let mut cached: Option<(u64, Vec<usize>)> = None;
        (step * b..step * b + b)
            .map(|pos| {
                let epoch = pos / n as u64;
                if cached.as_ref().is_none_or(|(e, _)| *e != epoch) {
                    cached = Some((epoch, epoch_order(self.config.train.seed, epoch, n)));
                }
                cached.as_ref().expect("just filled").1[(pos % n as u64) as usize]
            })
            .collect()
    }

    pub fn evaluate(&self, pairs: &[VolumePair]) -> Result<MetricReport> {
        evaluate_translator(self, pairs, self.config.train.batch_size)
    }

    /// Runs generator updates until `config.train.steps`, writing
    /// `metrics.csv`, `config.toml` and `checkpoints/` under `out`.
    pub fn fit(&mut self, train: &[VolumePair], val: &[VolumePair], out: &Path) -> Result<()> {
        if train.is_empty() {
            return Err(Error::Empty("training split".into()));
        }
        std::fs::create_dir_all(out).map_err(Error::io(out))?;
        let cfg_path = out.join(CONFIG_FILE);
        std::fs::write(&cfg_path, self.config.to_toml()?).map_err(Error::io(&cfg_path))?;
        let total = self.config.train.steps;
        let (ckpt_every, val_every) = (self.config.train.checkpoint_interval, self.config.train.val_interval);
        while self.step < total {
            let idx = self.batch_indices(self.step, train.len());
            let batch: Vec<&VolumePair> = idx.iter().map(|&i| &train[i]).collect();
            let mut record = self.train_step(&batch)?;
            let s = self.step;
            if !val.is_empty() && (s == total || (val_every > 0 && s % val_every == 0)) {
                let r = self.evaluate(val)?;
                record.val_mae = Some(r.mean.mae);
                record.val_psnr = Some(r.mean.psnr_db);
                record.val_ssim = Some(r.mean.ssim);
            }
            log::info!("{}", record.csv_row());
            self.history.push(record);
            if ckpt_every > 0 && s % ckpt_every == 0 {
                self.checkpoint()?.save(&out.join(format!("checkpoints/step_{s:06}.ckpt")))?;
                write_metrics_csv(&out.join(METRICS_FILE), &self.history)?;
            }
        }
        write_metrics_csv(&out.join(METRICS_FILE), &self.history)?;
        self.checkpoint()?.save(&out.join(FINAL_CHECKPOINT))
    }

    pub fn checkpoint(&self) -> Result<Checkpoint> {
        let mut entries = Vec::new();
        let mut tensors = Vec::new();
        let mut push = |prefix: &str, store: &ParamStore, adam: &AdamState| {
            for (i, p) in store.iter().enumerate() {
                let shape = p.value.shape();
                for (kind, data) in [("", p.value.data()), ("adam_m/", &adam.m[i][..]), ("adam_v/", &adam.v[i][..])] {
                    entries.push(TensorEntry { name: format!("{prefix}/{kind}{}", p.name), dims: shape.dims() });
                    tensors.push(Volume::from_vec(shape, data.to_vec()).expect("moment length matches"));
                }
            }
        };
        push("generator", &self.gen_params, &self.gen_adam);
        push("discriminator", &self.disc_params, &self.disc_adam);
        Ok(Checkpoint {
            manifest: CheckpointManifest {
                format_version: FORMAT_VERSION,
                fingerprint: self.fingerprint(),
                step: self.step,
                generator_adam_t: self.gen_adam.t,
                discriminator_adam_t: self.disc_adam.t,
                config: self.config.to_toml()?,
                tensors: entries,
                history: self.history.clone(),
            },
            tensors,
        })
    }

    /// Restores a checkpoint. With `config` the architecture must match the
    /// checkpoint's; without, the embedded configuration is used.
    pub fn from_checkpoint(ckpt: &Checkpoint, config: Option<&RunConfig>) -> Result<Self> {
        let embedded = RunConfig::from_toml(&ckpt.manifest.config)
            .map_err(|e| Error::CorruptCheckpoint(format!("embedded config: {e}")))?;
        let mut t = Trainer::new(config.unwrap_or(&embedded))?;
        let expected = t.fingerprint();
        if expected != ckpt.manifest.fingerprint {
            return Err(Error::FingerprintMismatch { expected, found: ckpt.manifest.fingerprint.clone() });
        }
        let restore = |prefix: &str, store: &mut ParamStore, adam: &mut AdamState| -> Result<()> {
            for (i, p) in store.iter_mut().enumerate() {
                for kind in ["", "adam_m/", "adam_v/"] {
                    let name = format!("{prefix}/{kind}{}", p.name);
                    let v = ckpt.tensor(&name).ok_or_else(|| Error::CorruptCheckpoint(format!("missing tensor {name}")))?;
                    if v.shape() != p.value.shape() {
                        return Err(Error::CorruptCheckpoint(format!("tensor {name} has shape {}", v.shape())));
                    }
                    match kind {
                        "" => p.value = v.clone(),
                        "adam_m/" => adam.m[i] = v.data().to_vec(),
                        _ => adam.v[i] = v.data().to_vec(),
                    }
                }
            }
            Ok(())
        };
        restore("generator", &mut t.gen_params, &mut t.gen_adam)?;
        restore("discriminator", &mut t.disc_params, &mut t.disc_adam)?;
        t.gen_adam.t = ckpt.manifest.generator_adam_t;
        t.disc_adam.t = ckpt.manifest.discriminator_adam_t;
        t.step = ckpt.manifest.step;
        t.history = ckpt.manifest.history.clone();
        Ok(t)
    }
}
