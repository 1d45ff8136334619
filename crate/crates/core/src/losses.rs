//! Training losses and evaluation metrics.
//!
//! Structural similarity is computed from separable windowed moments
//! (`E[x^2] - E[x]^2`), so the same code path drives both the differentiable
//! loss and the metric. Each scale's terms are averaged over windows before
//! the per-scale exponent is applied.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::tensor::{Element, Shape, Tape, Var, Volume};
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum WindowKind {
    Gaussian,
    Uniform,
}

/// Window, stability constants and per-scale exponents for (MS-)SSIM.
///
/// `contrast_exponents[j]` and `structure_exponents[j]` apply at scale `j`
/// (finest first); the luminance exponent applies at the coarsest scale only.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SsimConfig {
    pub window_edge: usize,
    pub window_kind: WindowKind,
    pub sigma: f64,
    pub k1: f64,
    pub k2: f64,
    pub data_range: f64,
    pub scales: usize,
    pub luminance_exponent: f64,
    pub contrast_exponents: Vec<f64>,
    pub structure_exponents: Vec<f64>,
    /// Shrink the window to the largest odd edge that fits the coarsest scale
    /// instead of failing.
    pub fit_window: bool,
}

const MS_SSIM_BETAS: [f64; 3] = [0.0448, 0.2856, 0.3001];

impl Default for SsimConfig {
    /// The three-scale loss configuration.
    fn default() -> Self {
        SsimConfig {
            window_edge: 11,
            window_kind: WindowKind::Gaussian,
            sigma: 1.5,
            k1: 0.01,
            k2: 0.03,
            data_range: 1.0,
            scales: 3,
            luminance_exponent: MS_SSIM_BETAS[2],
            contrast_exponents: MS_SSIM_BETAS.to_vec(),
            structure_exponents: MS_SSIM_BETAS.to_vec(),
            fit_window: true,
        }
    }
}

impl SsimConfig {
    /// Canonical single-scale SSIM (all exponents 1), used for evaluation.
    pub fn single_scale() -> Self {
        SsimConfig {
            scales: 1,
            luminance_exponent: 1.0,
            contrast_exponents: vec![1.0],
            structure_exponents: vec![1.0],
            ..Self::default()
        }
    }

    /// Uniform window of a fixed edge, no fitting.
    pub fn uniform(edge: usize, scales: usize) -> Self {
        SsimConfig {
            window_edge: edge,
            window_kind: WindowKind::Uniform,
            fit_window: false,
            scales,
            contrast_exponents: vec![1.0; scales],
            structure_exponents: vec![1.0; scales],
            luminance_exponent: 1.0,
            ..Self::default()
        }
    }

    /// The finest scale only, keeping the coarsest-scale exponents.
    pub fn finest_scale(&self) -> Self {
        let last = |v: &[f64]| v.last().copied().unwrap_or(1.0);
        SsimConfig {
            scales: 1,
            contrast_exponents: vec![last(&self.contrast_exponents)],
            structure_exponents: vec![last(&self.structure_exponents)],
            ..self.clone()
        }
    }

    pub fn c1(&self) -> f64 {
        (self.k1 * self.data_range).powi(2)
    }

    pub fn c2(&self) -> f64 {
        (self.k2 * self.data_range).powi(2)
    }

    pub fn c3(&self) -> f64 {
        self.c2() / 2.0
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.scales == 0 {
            return bad("ssim needs at least one scale".into());
        }
        if self.window_edge == 0 || self.window_edge % 2 == 0 {
            return bad(format!("ssim window edge must be odd, got {}", self.window_edge));
        }
        if self.contrast_exponents.len() != self.scales || self.structure_exponents.len() != self.scales {
            return bad(format!("ssim needs {} contrast and structure exponents", self.scales));
        }
        let all = self.contrast_exponents.iter().chain(&self.structure_exponents).chain([&self.luminance_exponent]);
        if all.into_iter().any(|e| !e.is_finite()) {
            return bad("ssim exponents must be finite".into());
        }
        if !(self.data_range > 0.0) || !(self.sigma > 0.0) || self.k1 < 0.0 || self.k2 < 0.0 {
            return bad("ssim data range and sigma must be positive, constants nonnegative".into());
        }
        Ok(())
    }

    /// Window edge actually used for volumes with the given full-scale extents.
    pub fn effective_window(&self, spatial: [usize; 3]) -> Result<usize> {
        self.validate()?;
        let coarsest = spatial.iter().map(|&n| n >> (self.scales - 1)).min().unwrap_or(0);
        if coarsest >= self.window_edge {
            return Ok(self.window_edge);
        }
        if self.fit_window && coarsest >= 1 {
            return Ok(if coarsest % 2 == 1 { coarsest } else { coarsest - 1 });
        }
        Err(Error::Shape(format!(
            "{}-scale ssim window of edge {} does not fit extents {:?}",
            self.scales, self.window_edge, spatial
        )))
    }

    /// Normalised 1-D taps for a window of `edge`.
    pub fn taps(&self, edge: usize) -> Vec<f64> {
        let raw: Vec<f64> = match self.window_kind {
            WindowKind::Uniform => vec![1.0; edge],
            WindowKind::Gaussian => {
                let c = (edge / 2) as f64;
                (0..edge).map(|i| (-(i as f64 - c).powi(2) / (2.0 * self.sigma * self.sigma)).exp()).collect()
            }
        };
        let s: f64 = raw.iter().sum();
        raw.into_iter().map(|v| v / s).collect()
    }
}

/// Means below this are floored before a fractional power, so anti-correlated
/// scales cannot multiply to a positive similarity.
const POWER_FLOOR: f64 = 1e-6;

/// Per-item structural similarity, shape `(batch, 1, 1, 1, 1)`.
pub fn structural_similarity_per_item<T: Element>(tape: &mut Tape<T>, x: Var, y: Var, cfg: &SsimConfig) -> Result<Var> {
    let s = tape.shape(x);
    if tape.shape(y) != s {
        return Err(Error::Shape(format!("ssim operands differ: {s} vs {}", tape.shape(y))));
    }
    let edge = cfg.effective_window(s.spatial())?;
    let taps = cfg.taps(edge);
    let (mut x, mut y) = (x, y);
    let mut acc: Option<Var> = None;
    for j in 0..cfg.scales {
        if j > 0 {
            x = tape.avg_pool(x, 2)?;
            y = tape.avg_pool(y, 2)?;
        }
        let coarsest = j + 1 == cfg.scales;
        let lum = coarsest.then_some(cfg.luminance_exponent);
        let term = scale_term(tape, x, y, &taps, cfg, lum, cfg.contrast_exponents[j], cfg.structure_exponents[j])?;
        acc = Some(match acc {
            Some(a) => tape.mul(a, term)?,
            None => term,
        });
    }
    Ok(acc.expect("at least one scale"))
}

/// Window mean of `map` raised to `p`; fractional powers see the mean floored
/// at [`POWER_FLOOR`].
fn power_of_mean<T: Element>(tape: &mut Tape<T>, map: Var, p: f64) -> Var {
    let m = tape.mean_per_item(map);
    if p == 1.0 {
        return m;
    }
    let m = tape.add_scalar(m, -POWER_FLOOR);
    let m = tape.relu(m);
    let m = tape.add_scalar(m, POWER_FLOOR);
    tape.signed_pow(m, p)
}

/// One scale's factor. With equal exponents the window product is averaged
/// and raised once; otherwise each component is averaged and raised on its own.
#[allow(clippy::too_many_arguments)]
fn scale_term<T: Element>(
    tape: &mut Tape<T>,
    x: Var,
    y: Var,
    taps: &[f64],
    cfg: &SsimConfig,
    luminance: Option<f64>,
    beta: f64,
    gamma: f64,
) -> Result<Var> {
    let mx = tape.window_filter(x, taps)?;
    let my = tape.window_filter(y, taps)?;
    let xx = tape.square(x);
    let yy = tape.square(y);
    let xy = tape.mul(x, y)?;
    let exx = tape.window_filter(xx, taps)?;
    let eyy = tape.window_filter(yy, taps)?;
    let exy = tape.window_filter(xy, taps)?;
    let mx2 = tape.square(mx);
    let my2 = tape.square(my);
    let mxy = tape.mul(mx, my)?;
    let vx = tape.sub(exx, mx2)?;
    let vy = tape.sub(eyy, my2)?;
    let cov = tape.sub(exy, mxy)?;
    let vsum = tape.add(vx, vy)?;
    let den = tape.add_scalar(vsum, cfg.c2());

    let lum = match luminance {
        Some(alpha) => {
            let ln = tape.scale(mxy, 2.0);
            let ln = tape.add_scalar(ln, cfg.c1());
            let ld = tape.add(mx2, my2)?;
            let ld = tape.add_scalar(ld, cfg.c1());
            Some((tape.div(ln, ld)?, alpha))
        }
        None => None,
    };

    if beta == gamma {
        // c*s collapses to one ratio when C3 = C2/2.
        let num = tape.scale(cov, 2.0);
        let num = tape.add_scalar(num, cfg.c2());
        let cs = tape.div(num, den)?;
        return match lum {
            None => Ok(power_of_mean(tape, cs, beta)),
            Some((l, alpha)) if alpha == beta => {
                let lcs = tape.mul(l, cs)?;
                Ok(power_of_mean(tape, lcs, beta))
            }
            Some((l, alpha)) => {
                let l = power_of_mean(tape, l, alpha);
                let cs = power_of_mean(tape, cs, beta);
                tape.mul(l, cs)
            }
        };
    }
    let sx = tape.sqrt(vx);
    let sy = tape.sqrt(vy);
    let sxy = tape.mul(sx, sy)?;
    let cn = tape.scale(sxy, 2.0);
    let cn = tape.add_scalar(cn, cfg.c2());
    let c = tape.div(cn, den)?;
    let sn = tape.add_scalar(cov, cfg.c3());
    let sd = tape.add_scalar(sxy, cfg.c3());
    let st = tape.div(sn, sd)?;
    let c = power_of_mean(tape, c, beta);
    let st = power_of_mean(tape, st, gamma);
    let cs = tape.mul(c, st)?;
    match lum {
        None => Ok(cs),
        Some((l, alpha)) => {
            let l = power_of_mean(tape, l, alpha);
            tape.mul(l, cs)
        }
    }
}

/// Batch-mean structural similarity as a differentiable scalar.
pub fn structural_similarity<T: Element>(tape: &mut Tape<T>, x: Var, y: Var, cfg: &SsimConfig) -> Result<Var> {
    let per_item = structural_similarity_per_item(tape, x, y, cfg)?;
    Ok(tape.mean(per_item))
}

fn similarity_value(x: &Volume, y: &Volume, cfg: &SsimConfig) -> Result<f64> {
    let mut tape = Tape::<f64>::new();
    let xv = tape.constant(x.cast());
    let yv = tape.constant(y.cast());
    let s = structural_similarity(&mut tape, xv, yv, cfg)?;
    Ok(tape.value(s).data()[0])
}

/// Single-scale SSIM at the coarsest-scale exponents of `cfg`.
pub fn ssim(x: &Volume, y: &Volume, cfg: &SsimConfig) -> Result<f64> {
    similarity_value(x, y, &cfg.finest_scale())
}

/// Multi-scale SSIM over `cfg.scales` scales.
pub fn ms_ssim(x: &Volume, y: &Volume, cfg: &SsimConfig) -> Result<f64> {
    similarity_value(x, y, cfg)
}

fn check_same(x: Shape, y: Shape) -> Result<()> {
    if x != y {
        return Err(Error::Shape(format!("operands differ: {x} vs {y}")));
    }
    Ok(())
}

/// Mean absolute voxel difference.
pub fn mae(x: &Volume, y: &Volume) -> Result<f64> {
    check_same(x.shape(), y.shape())?;
    let s: f64 = x.data().iter().zip(y.data()).map(|(&a, &b)| (a as f64 - b as f64).abs()).sum();
    Ok(s / x.len() as f64)
}

/// Peak signal-to-noise ratio in dB; `f64::INFINITY` for identical inputs.
pub fn psnr(x: &Volume, y: &Volume, data_range: f64) -> Result<f64> {
    check_same(x.shape(), y.shape())?;
    if !(data_range > 0.0) {
        return Err(Error::Config(format!("psnr data range must be positive, got {data_range}")));
    }
    let se: f64 = x.data().iter().zip(y.data()).map(|(&a, &b)| (a as f64 - b as f64).powi(2)).sum();
    let mse = se / x.len() as f64;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (data_range * data_range / mse).log10())
}

pub fn l1_loss<T: Element>(tape: &mut Tape<T>, fake: Var, real: Var) -> Result<Var> {
    check_same(tape.shape(fake), tape.shape(real))?;
    let d = tape.sub(fake, real)?;
    let a = tape.abs(d);
    Ok(tape.mean(a))
}

/// `1 - MS-SSIM`.
pub fn msssim_loss<T: Element>(tape: &mut Tape<T>, fake: Var, real: Var, cfg: &SsimConfig) -> Result<Var> {
    let s = structural_similarity(tape, fake, real, cfg)?;
    let neg = tape.scale(s, -1.0);
    Ok(tape.add_scalar(neg, 1.0))
}

/// `1 - SSIM` at the finest scale.
pub fn ssim_loss<T: Element>(tape: &mut Tape<T>, fake: Var, real: Var, cfg: &SsimConfig) -> Result<Var> {
    msssim_loss(tape, fake, real, &cfg.finest_scale())
}

/// `mean softplus(-d_real) + mean softplus(d_fake)`.
pub fn discriminator_loss<T: Element>(tape: &mut Tape<T>, d_real: Var, d_fake: Var) -> Result<Var> {
    let nr = tape.scale(d_real, -1.0);
    let r = tape.softplus(nr);
    let r = tape.mean(r);
    let f = tape.softplus(d_fake);
    let f = tape.mean(f);
    tape.add(r, f)
}

/// Non-saturating generator loss `mean softplus(-d_fake)`.
pub fn generator_adversarial_loss<T: Element>(tape: &mut Tape<T>, d_fake: Var) -> Var {
    let n = tape.scale(d_fake, -1.0);
    let s = tape.softplus(n);
    tape.mean(s)
}

/// `(L_D, L_adv_G)` from real and fake logits on one tape.
pub fn adversarial_losses<T: Element>(tape: &mut Tape<T>, d_real: Var, d_fake: Var) -> Result<(Var, Var)> {
    let ld = discriminator_loss(tape, d_real, d_fake)?;
    Ok((ld, generator_adversarial_loss(tape, d_fake)))
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StructuralTerm {
    #[default]
    MsSsim,
    Ssim,
}

/// Weights of the joint generator objective `alpha*adv + beta*l1 + gamma*structural`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    pub structural: StructuralTerm,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { alpha: 1.0, beta: 10.0, gamma: 10.0, structural: StructuralTerm::MsSsim }
    }
}

impl LossWeights {
    pub fn new(alpha: f64, beta: f64, gamma: f64) -> Self {
        LossWeights { alpha, beta, gamma, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        let w = [self.alpha, self.beta, self.gamma];
        if w.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::Config(format!("loss weights must be finite and nonnegative, got {w:?}")));
        }
        if w.iter().all(|&v| v == 0.0) {
            return Err(Error::Config("loss weights are all zero".into()));
        }
        Ok(())
    }
}

pub fn joint_generator_loss<T: Element>(tape: &mut Tape<T>, w: &LossWeights, adv: Var, l1: Var, structural: Var) -> Result<Var> {
    let a = tape.scale(adv, w.alpha);
    let b = tape.scale(l1, w.beta);
    let c = tape.scale(structural, w.gamma);
    let ab = tape.add(a, b)?;
    tape.add(ab, c)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairMetrics {
    pub pair_id: String,
    pub mae: f64,
    pub psnr_db: f64,
    pub ssim: f64,
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct MetricSummary {
    pub mae: f64,
    pub psnr_db: f64,
    pub ssim: f64,
}

/// Per-pair metrics with their mean and sample standard deviation.
///
/// PSNR aggregation treats the infinite sentinel explicitly: any infinite
/// pair makes the mean infinite; the deviation is 0 when every pair is
/// infinite and infinite when only some are.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricReport {
    pub pairs: Vec<PairMetrics>,
    pub mean: MetricSummary,
    pub std: MetricSummary,
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let infinite = values.iter().filter(|v| v.is_infinite()).count();
    if infinite > 0 {
        let std = if infinite == values.len() { 0.0 } else { f64::INFINITY };
        return (f64::INFINITY, std);
    }
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

impl MetricReport {
    pub fn from_pairs(pairs: Vec<PairMetrics>) -> Result<Self> {
        if pairs.is_empty() {
            return Err(Error::Empty("metric report needs at least one pair".into()));
        }
        let col = |f: fn(&PairMetrics) -> f64| mean_std(&pairs.iter().map(f).collect::<Vec<_>>());
        let (m_mae, s_mae) = col(|p| p.mae);
        let (m_psnr, s_psnr) = col(|p| p.psnr_db);
        let (m_ssim, s_ssim) = col(|p| p.ssim);
        Ok(MetricReport {
            mean: MetricSummary { mae: m_mae, psnr_db: m_psnr, ssim: m_ssim },
            std: MetricSummary { mae: s_mae, psnr_db: s_psnr, ssim: s_ssim },
            pairs,
        })
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["pair_id", "mae", "psnr_db", "ssim"])?;
        let rows = self
            .pairs
            .iter()
            .map(|p| (p.pair_id.as_str(), p.mae, p.psnr_db, p.ssim))
            .chain([
                ("mean", self.mean.mae, self.mean.psnr_db, self.mean.ssim),
                ("std", self.std.mae, self.std.psnr_db, self.std.ssim),
            ]);
        for (id, a, b, c) in rows {
            out.write_record([id.to_string(), fmt_metric(a), fmt_metric(b), fmt_metric(c)])?;
        }
        out.flush().map_err(csv::Error::from)?;
        Ok(())
    }

    pub fn save_csv(&self, path: &Path) -> Result<()> {
        let f = std::fs::File::create(path).map_err(Error::io(path))?;
        self.write_csv(std::io::BufWriter::new(f))
    }

    /// Reads the per-pair rows back and recomputes the summary.
    pub fn read_csv<R: Read>(r: R) -> Result<Self> {
        let mut rd = csv::Reader::from_reader(r);
        let mut pairs = Vec::new();
        for rec in rd.records() {
            let rec = rec?;
            let id = rec.get(0).unwrap_or_default();
            if id == "mean" || id == "std" {
                continue;
            }
            let num = |i: usize| -> Result<f64> {
                let s = rec.get(i).unwrap_or_default();
                parse_metric(s).ok_or_else(|| Error::Config(format!("bad metric value {s:?} in row {id}")))
            };
            pairs.push(PairMetrics { pair_id: id.to_string(), mae: num(1)?, psnr_db: num(2)?, ssim: num(3)? });
        }
        Self::from_pairs(pairs)
    }
}

pub fn fmt_metric(v: f64) -> String {
    if v == f64::INFINITY {
        "inf".into()
    } else {
        format!("{v}")
    }
}

pub fn parse_metric(s: &str) -> Option<f64> {
    match s {
        "inf" => Some(f64::INFINITY),
        _ => s.parse().ok(),
    }
}

/// MAE, PSNR and SSIM for each `(id, generated, target)` triple.
pub fn evaluate_pairs<'a, I>(pairs: I, cfg: &SsimConfig) -> Result<MetricReport>
where
    I: IntoIterator<Item = (String, &'a Volume, &'a Volume)>,
{
    let mut rows = Vec::new();
    for (pair_id, generated, target) in pairs {
        rows.push(PairMetrics {
            pair_id,
            mae: mae(generated, target)?,
            psnr_db: psnr(generated, target, cfg.data_range)?,
            ssim: ssim(generated, target, cfg)?,
        });
    }
    MetricReport::from_pairs(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::gradcheck::{gradient_check, GradCheckConfig};

    fn vol(edge: usize, seed: u64) -> Volume {
        crate::tensor::gradcheck::random_volume(Shape::cube(1, 1, edge).unwrap(), 0.0, 1.0, seed).cast()
    }

    #[test]
    fn mae_and_psnr_closed_forms() {
        let x = vol(4, 1);
        let y = x.map(|v| v + 0.1);
        assert!((mae(&x, &y).unwrap() - 0.1).abs() < 1e-6);
        assert_eq!(mae(&x, &x).unwrap(), 0.0);
        assert_eq!(psnr(&x, &x, 1.0).unwrap(), f64::INFINITY);
        let z = Volume::full(x.shape(), 0.5f32);
        let w = Volume::full(x.shape(), 0.6f32);
        assert!((psnr(&z, &w, 1.0).unwrap() - 20.0).abs() < 1e-4);
        let (z3, w3) = (z.map(|v| v * 3.0), w.map(|v| v * 3.0));
        assert!((psnr(&z3, &w3, 3.0).unwrap() - psnr(&z, &w, 1.0).unwrap()).abs() < 1e-4);
        assert!(mae(&x, &vol(5, 1)).is_err());
    }

    #[test]
    fn identical_volumes_score_exactly_one() {
        let x = vol(16, 3);
        assert_eq!(ssim(&x, &x, &SsimConfig::single_scale()).unwrap(), 1.0);
        assert_eq!(ms_ssim(&x, &x, &SsimConfig::default()).unwrap(), 1.0);
    }

    #[test]
    fn constant_volumes_reduce_to_luminance() {
        let cfg = SsimConfig::uniform(3, 1);
        let s = Shape::cube(1, 1, 6).unwrap();
        let (a, b) = (0.3f64, 0.7f64);
        let got = ssim(&Volume::full(s, a as f32), &Volume::full(s, b as f32), &cfg).unwrap();
        let (a, b) = (a as f32 as f64, b as f32 as f64);
        let want = (2.0 * a * b + cfg.c1()) / (a * a + b * b + cfg.c1());
        assert!((got - want).abs() < 1e-9, "{got} vs {want}");
    }

    #[test]
    fn single_scale_ms_ssim_equals_ssim_and_is_symmetric() {
        let cfg = SsimConfig::single_scale();
        let (x, y) = (vol(12, 4), vol(12, 5));
        let a = ssim(&x, &y, &cfg).unwrap();
        assert!((ms_ssim(&x, &y, &cfg).unwrap() - a).abs() < 1e-12);
        assert!((ssim(&y, &x, &cfg).unwrap() - a).abs() < 1e-7);
    }

    #[test]
    fn window_fitting() {
        let cfg = SsimConfig::default();
        assert_eq!(cfg.effective_window([64, 64, 64]).unwrap(), 11);
        assert_eq!(cfg.effective_window([16, 16, 16]).unwrap(), 3);
        assert_eq!(cfg.effective_window([32, 32, 32]).unwrap(), 7);
        let strict = SsimConfig { fit_window: false, ..cfg };
        assert!(strict.effective_window([16, 16, 16]).is_err());
        let t = SsimConfig::default().taps(11);
        assert!((t.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(t[5] > t[4] && (t[4] - t[6]).abs() < 1e-15);
    }

    #[test]
    fn adversarial_values_at_zero_logits() {
        let mut tape = Tape::<f64>::new();
        let s = Shape::new(4, 1, 1, 1, 1).unwrap();
        let r = tape.leaf(Volume::zeros(s));
        let f = tape.leaf(Volume::zeros(s));
        let (ld, lg) = adversarial_losses(&mut tape, r, f).unwrap();
        assert_eq!(tape.value(ld).data()[0], 2.0 * 2f64.ln());
        assert_eq!(tape.value(lg).data()[0], 2f64.ln());
    }

    #[test]
    fn generator_adversarial_gradient_is_negative_sigmoid() {
        let logits = [-3.0, -0.5, 0.0, 2.0];
        let mut tape = Tape::<f64>::new();
        let f = tape.leaf(Volume::from_vec(Shape::new(4, 1, 1, 1, 1).unwrap(), logits.to_vec()).unwrap());
        let l = generator_adversarial_loss(&mut tape, f);
        let g = tape.backward(l).unwrap();
        for (gi, d) in g.get(f).unwrap().data().iter().zip(logits) {
            let want = -1.0 / (1.0 + d.exp()) / 4.0;
            assert!((gi - want).abs() < 1e-12);
        }
    }

    #[test]
    fn perfect_discriminator_loss_vanishes() {
        let mut tape = Tape::<f64>::new();
        let s = Shape::new(2, 1, 1, 1, 1).unwrap();
        let r = tape.leaf(Volume::full(s, 60.0));
        let f = tape.leaf(Volume::full(s, -60.0));
        let ld = discriminator_loss(&mut tape, r, f).unwrap();
        assert!(tape.value(ld).data()[0] < 1e-20);
    }

    #[test]
    fn joint_loss_arithmetic() {
        let mut tape = Tape::<f64>::new();
        let adv = tape.constant(Volume::scalar(2f64.ln()));
        let l1 = tape.constant(Volume::scalar(0.1));
        let ms = tape.constant(Volume::scalar(0.2));
        let j = joint_generator_loss(&mut tape, &LossWeights::default(), adv, l1, ms).unwrap();
        assert!((tape.value(j).data()[0] - (2f64.ln() + 3.0)).abs() < 1e-12);
        assert!(LossWeights::new(0.0, 0.0, 0.0).validate().is_err());
        assert!(LossWeights::new(-1.0, 1.0, 0.0).validate().is_err());
    }

    #[test]
    fn l1_gradient_is_sign_over_n() {
        let x = crate::tensor::gradcheck::random_volume(Shape::cube(2, 1, 3).unwrap(), 0.0, 1.0, 8);
        let y = crate::tensor::gradcheck::random_volume(x.shape(), 0.0, 1.0, 9);
        let mut tape = Tape::<f64>::new();
        let (a, b) = (tape.leaf(x.clone()), tape.constant(y.clone()));
        let l = l1_loss(&mut tape, a, b).unwrap();
        let g = tape.backward(l).unwrap();
        let n = x.len() as f64;
        for ((gi, xi), yi) in g.get(a).unwrap().data().iter().zip(x.data()).zip(y.data()) {
            assert_eq!(*gi, (xi - yi).signum() / n);
        }
    }

    #[test]
    fn msssim_loss_gradient_check() {
        let s = Shape::cube(1, 1, 16).unwrap();
        let cfg = SsimConfig::uniform(3, 2);
        let fake = crate::tensor::gradcheck::random_volume(s, 0.0, 1.0, 21);
        let real = crate::tensor::gradcheck::random_volume(s, 0.0, 1.0, 22);
        let report = gradient_check(
            |tape, v| {
                let r = tape.constant(real.clone());
                msssim_loss(tape, v[0], r, &cfg)
            },
            &[fake],
            &GradCheckConfig::default(),
        )
        .unwrap();
        assert!(report.passes(1e-3), "{report:?}");
    }

    #[test]
    fn paper_exponent_loss_gradient_check() {
        let s = Shape::cube(1, 1, 16).unwrap();
        let cfg = SsimConfig::default();
        // Correlated pair: fractional exponents are cusped where c*s crosses 0.
        let fake = crate::tensor::gradcheck::random_volume(s, 0.0, 1.0, 31);
        let noise = crate::tensor::gradcheck::random_volume(s, 0.0, 1.0, 32);
        let real = Volume::from_vec(s, fake.data().iter().zip(noise.data()).map(|(a, b)| 0.7 * a + 0.3 * b).collect()).unwrap();
        let report = gradient_check(
            |tape, v| {
                let r = tape.constant(real.clone());
                msssim_loss(tape, v[0], r, &cfg)
            },
            &[fake],
            &GradCheckConfig::default(),
        )
        .unwrap();
        assert!(report.passes(1e-3), "{report:?}");
    }

    #[test]
    fn report_aggregates() {
        let p = |id: &str, mae: f64, psnr: f64| PairMetrics { pair_id: id.into(), mae, psnr_db: psnr, ssim: 0.9 };
        let r = MetricReport::from_pairs(vec![p("a", 0.1, 20.0), p("b", 0.3, 30.0)]).unwrap();
        assert!((r.mean.mae - 0.2).abs() < 1e-12);
        assert!((r.std.mae - 0.1414213562).abs() < 1e-9);
        let inf = MetricReport::from_pairs(vec![p("a", 0.0, f64::INFINITY), p("b", 0.1, 30.0)]).unwrap();
        assert_eq!((inf.mean.psnr_db, inf.std.psnr_db), (f64::INFINITY, f64::INFINITY));
        let all = MetricReport::from_pairs(vec![p("a", 0.0, f64::INFINITY)]).unwrap();
        assert_eq!((all.mean.psnr_db, all.std.psnr_db), (f64::INFINITY, 0.0));
        assert!(MetricReport::from_pairs(vec![]).is_err());

        let mut buf = Vec::new();
        inf.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("pair_id,mae,psnr_db,ssim\n"));
        assert!(text.contains("a,0,inf,0.9"));
        assert!(text.contains("\nmean,"));
        assert_eq!(MetricReport::read_csv(&buf[..]).unwrap(), inf);
    }

    #[test]
    fn identical_single_pair_report() {
        let x = vol(8, 2);
        let r = evaluate_pairs([("p".to_string(), &x, &x)], &SsimConfig::single_scale()).unwrap();
        assert_eq!(r.mean.mae, 0.0);
        assert_eq!(r.mean.ssim, 1.0);
        assert_eq!(r.mean.psnr_db, f64::INFINITY);
        assert_eq!(r.std.mae, 0.0);
    }
}
