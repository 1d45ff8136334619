//! Built-in verification: finite-difference gradient checks, brute-force
//! metric comparisons and an architecture shape sweep. Shared by
//! `pcsa selfcheck` and the acceptance tests.

use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::attention::{grouped_attention_weighting, ChannelAttention, SelfAttention};
use crate::data::{gen_pair, SyntheticSpec};
use crate::layers::{Conv3d, ConvTranspose3d, GroupNorm, Linear};
use crate::losses::{self, SsimConfig};
use crate::net::{Discriminator, DiscriminatorConfig, Generator, GeneratorConfig, PyramidSpec, ResidualBlock};
use crate::oracle;
use crate::tensor::gradcheck::{gradient_check, random_projection, random_volume, GradCheckConfig, GradCheckReport};
use crate::tensor::{Bound, Padding, ParamStore, Shape, Tape, Var, Volume};
use crate::Result;

pub const GRADIENT_TOLERANCE: f64 = 1e-3;
pub const ORACLE_TOLERANCE: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq)]
pub struct CheckResult {
    pub name: String,
    /// Largest observed error (relative for gradients, absolute for metrics).
    pub max_error: f64,
    pub tolerance: f64,
    pub passed: bool,
    pub detail: String,
}

impl CheckResult {
    fn new(name: &str, max_error: f64, tolerance: f64, detail: String) -> Self {
        CheckResult { name: name.into(), max_error, tolerance, passed: max_error <= tolerance, detail }
    }

    fn failed(name: &str, err: impl fmt::Display) -> Self {
        CheckResult { name: name.into(), max_error: f64::INFINITY, tolerance: 0.0, passed: false, detail: err.to_string() }
    }
}

impl fmt::Display for CheckResult {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let verdict = if self.passed { "PASS" } else { "FAIL" };
        write!(f, "{verdict} {:<28} max_err={:.3e} tol={:.0e}", self.name, self.max_error, self.tolerance)?;
        if !self.detail.is_empty() {
            write!(f, " ({})", self.detail)?;
        }
        Ok(())
    }
}

fn from_report(name: &str, r: Result<GradCheckReport>) -> CheckResult {
    match r {
        Ok(r) => {
            let detail = format!("{} coords, {} kinks skipped", r.checked, r.kinks);
            let mut c = CheckResult::new(name, r.max_rel_error, GRADIENT_TOLERANCE, detail);
            c.passed = r.passes(GRADIENT_TOLERANCE);
            c
        }
        Err(e) => CheckResult::failed(name, e),
    }
}

fn shape(dims: [usize; 5]) -> Shape {
    Shape::from_dims(dims).expect("nonzero dims")
}

fn rv(dims: [usize; 5], seed: u64) -> Volume<f64> {
    random_volume(shape(dims), -1.0, 1.0, seed)
}

/// Gives every bias, gate and norm parameter a small random value so no unit
/// sits at zero.
fn jitter(store: &mut ParamStore<f64>, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for p in store.iter_mut() {
        if p.name.ends_with(".bias") || p.name.ends_with(".gamma") || p.name.contains("norm") {
            for v in p.value.data_mut() {
                *v = rng.random_range(-0.3..0.3);
            }
        }
    }
}

/// Checks input and parameter gradients of a module applied to `x`.
fn check_module<F>(name: &str, mut store: ParamStore<f64>, x: Volume<f64>, seed: u64, forward: F) -> CheckResult
where
    F: Fn(&mut Tape<f64>, &Bound, Var) -> Result<Var>,
{
    jitter(&mut store, seed);
    let mut inputs = vec![x];
    inputs.extend(store.iter().map(|p| p.value.clone()));
    let r = gradient_check(
        |tape, vars| {
            let bound = Bound { vars: vars[1..].to_vec() };
            let y = forward(tape, &bound, vars[0])?;
            random_projection(tape, y, seed)
        },
        &inputs,
        &GradCheckConfig { seed, ..GradCheckConfig::default() },
    );
    from_report(name, r)
}

fn check_fn<F>(name: &str, inputs: &[Volume<f64>], f: F) -> CheckResult
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    from_report(name, gradient_check(f, inputs, &GradCheckConfig::default()))
}

/// Small generator exercising every block type at 8^3.
pub fn reduced_generator_config() -> GeneratorConfig {
    GeneratorConfig {
        pcca_blocks: vec![PyramidSpec::new(&[(3, 2), (1, 2)], 1), PyramidSpec::new(&[(3, 2), (1, 2)], 1)],
        deep_stage: PyramidSpec::new(&[(3, 4)], 2),
        expansion_channels: vec![4, 2, 2],
        ca_reduction: 2,
        ..GeneratorConfig::default()
    }
}

pub fn gradient_suite() -> Vec<CheckResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let mut out = Vec::new();

    for stride in [1, 2] {
        let x = rv([1, 2, 4, 4, 4], 1);
        let w = rv([3, 2, 3, 3, 3], 2);
        let b = rv([3, 1, 1, 1, 1], 3);
        out.push(check_fn(&format!("conv3d_stride{stride}"), &[x, w, b], |t, v| {
            let y = t.conv3d(v[0], v[1], Some(v[2]), stride, Padding::Same)?;
            random_projection(t, y, 4)
        }));
    }
    let x = rv([1, 2, 4, 4, 4], 5);
    let w = rv([2, 2, 3, 3, 3], 6);
    out.push(check_fn("conv3d_valid", &[x, w], |t, v| {
        let y = t.conv3d(v[0], v[1], None, 1, Padding::Valid)?;
        random_projection(t, y, 7)
    }));
    let x = rv([1, 2, 2, 3, 2], 8);
    let w = rv([2, 3, 3, 3, 3], 9);
    let b = rv([3, 1, 1, 1, 1], 10);
    out.push(check_fn("transposed_conv3d", &[x, w, b], |t, v| {
        let y = t.conv_transpose3d(v[0], v[1], Some(v[2]))?;
        random_projection(t, y, 11)
    }));
    out.push(check_fn("max_pool3d", &[rv([2, 2, 4, 4, 2], 12)], |t, v| {
        let y = t.max_pool2(v[0])?;
        random_projection(t, y, 13)
    }));
    out.push(check_fn("avg_pool3d", &[rv([1, 2, 4, 5, 4], 14)], |t, v| {
        let y = t.avg_pool(v[0], 2)?;
        random_projection(t, y, 15)
    }));
    out.push(check_fn("global_pools", &[rv([2, 3, 2, 3, 2], 16)], |t, v| {
        let a = t.global_avg_pool(v[0]);
        let m = t.global_max_pool(v[0]);
        let s = t.add(a, m)?;
        random_projection(t, s, 17)
    }));
    out.push(check_fn("activations", &[rv([1, 2, 3, 3, 3], 18)], |t, v| {
        let parts = [t.relu(v[0]), t.sigmoid(v[0]), t.softplus(v[0]), t.square(v[0]), t.abs(v[0])];
        let e = t.exp(v[0]);
        let l = t.ln(e);
        let sp = t.signed_pow(v[0], 0.3001);
        let mut acc = t.add(l, sp)?;
        for p in parts {
            acc = t.add(acc, p)?;
        }
        let sq = t.sqrt(e);
        let acc = t.div(acc, sq)?;
        random_projection(t, acc, 19)
    }));
    let logits = rv([2, 4, 2, 2, 2], 20);
    let labels = random_volume(shape([2, 4, 2, 2, 2]), 0.0, 1.0, 21);
    out.push(check_fn("softmax_cross_entropy", &[logits], move |t, v| {
        let p = t.softmax_channels(v[0]);
        let lp = t.ln(p);
        let y = t.constant(labels.clone());
        let ce = t.mul(lp, y)?;
        let s = t.mean(ce);
        Ok(t.scale(s, -1.0))
    }));
    out.push(check_fn("concat_slice", &[rv([1, 2, 2, 2, 2], 22), rv([1, 3, 2, 2, 2], 23)], |t, v| {
        let c = t.concat(&[v[0], v[1]])?;
        let s = t.slice_channels(c, 1, 3)?;
        random_projection(t, s, 24)
    }));
    out.push(check_fn("upsample_trilinear", &[rv([1, 2, 2, 3, 2], 25)], |t, v| {
        let y = t.upsample_trilinear2(v[0]);
        random_projection(t, y, 26)
    }));
    out.push(check_fn("fully_connected", &[rv([2, 6, 1, 1, 1], 27), rv([3, 6, 1, 1, 1], 28), rv([3, 1, 1, 1, 1], 29)], |t, v| {
        let y = t.linear(v[0], v[1], Some(v[2]))?;
        random_projection(t, y, 30)
    }));
    out.push(check_fn("window_filter", &[rv([1, 2, 5, 4, 6], 31)], |t, v| {
        let y = t.window_filter(v[0], &[0.2, 0.5, 0.3])?;
        random_projection(t, y, 32)
    }));

    let mut store = ParamStore::new();
    let ca = ChannelAttention::new(&mut store, "ca", 4, 2, true, &mut rng).expect("valid");
    out.push(check_module("channel_attention", store, rv([2, 4, 3, 3, 3], 33), 34, |t, p, x| ca.forward(t, p, x)));

    let mut store = ParamStore::new();
    let cas: Vec<ChannelAttention> =
        (0..2).map(|i| ChannelAttention::new(&mut store, &format!("g{i}"), 3, 2, true, &mut rng).expect("valid")).collect();
    out.push(check_module("grouped_weighting", store, rv([1, 6, 2, 2, 2], 35), 36, |t, p, x| {
        let a = t.slice_channels(x, 0, 3)?;
        let b = t.slice_channels(x, 3, 3)?;
        grouped_attention_weighting(t, p, &[a, b], &cas)
    }));

    let mut store = ParamStore::new();
    let sa = SelfAttention::new(&mut store, "sa", 3, 2, &mut rng).expect("valid");
    out.push(check_module("self_attention", store, rv([1, 3, 4, 4, 4], 37), 38, |t, p, x| sa.forward(t, p, x)));

    let mut store = ParamStore::new();
    let gn = GroupNorm::new(&mut store, "gn", 4, 2).expect("valid");
    out.push(check_module("group_norm", store, rv([2, 4, 2, 3, 2], 55), 56, |t, p, x| gn.forward(t, p, x)));

    let mut store = ParamStore::new();
    let rb = ResidualBlock::new(&mut store, "res", 2, 2, &mut rng).expect("valid");
    out.push(check_module("residual_block", store, rv([1, 2, 3, 3, 3], 39), 40, |t, p, x| rb.forward(t, p, x)));

    let mut store = ParamStore::new();
    let conv = Conv3d::new(&mut store, "c", 2, 2, 3, 2, Padding::Same, &mut rng).expect("valid");
    let up = ConvTranspose3d::new(&mut store, "u", 2, 1, 3, &mut rng).expect("valid");
    let fc = Linear::new(&mut store, "fc", 1, 2, &mut rng).expect("valid");
    out.push(check_module("layer_stack", store, rv([1, 2, 4, 4, 4], 41), 42, |t, p, x| {
        let h = conv.forward(t, p, x)?;
        let h = up.forward(t, p, h)?;
        let g = t.global_avg_pool(h);
        fc.forward(t, p, g)
    }));

    let fake = random_volume(shape([2, 1, 3, 3, 3]), 0.0, 1.0, 43);
    let real = random_volume(fake.shape(), 0.0, 1.0, 44);
    out.push(check_fn("l1_loss", &[fake], move |t, v| {
        let r = t.constant(real.clone());
        losses::l1_loss(t, v[0], r)
    }));
    let cube = shape([1, 1, 16, 16, 16]);
    for (name, cfg) in [("msssim_loss_uniform", SsimConfig::uniform(3, 2)), ("msssim_loss_paper", SsimConfig::default())] {
        let fake = random_volume(cube, 0.0, 1.0, 45);
        let noise = random_volume(cube, 0.0, 1.0, 46);
        let real = Volume::from_vec(cube, fake.data().iter().zip(noise.data()).map(|(a, b)| 0.7 * a + 0.3 * b).collect())
            .expect("same shape");
        out.push(check_fn(name, &[fake], move |t, v| {
            let r = t.constant(real.clone());
            losses::msssim_loss(t, v[0], r, &cfg)
        }));
    }
    out.push(check_fn("adversarial_losses", &[rv([3, 1, 1, 1, 1], 47), rv([3, 1, 1, 1, 1], 48)], |t, v| {
        let (ld, lg) = losses::adversarial_losses(t, v[0], v[1])?;
        let lg = t.scale(lg, 0.7);
        t.add(ld, lg)
    }));

    match Generator::build::<f64, _>(&reduced_generator_config(), &mut rng) {
        Ok((g, store)) => out.push(check_module(
            "reduced_generator",
            store,
            random_volume(shape([1, 1, 8, 8, 8]), 0.0, 1.0, 49),
            50,
            |t, p, x| g.forward(t, p, x),
        )),
        Err(e) => out.push(CheckResult::failed("reduced_generator", e)),
    }
    let dcfg = DiscriminatorConfig { channel_ladder: vec![2, 3, 4], ..DiscriminatorConfig::default() };
    match Discriminator::build::<f64, _>(&dcfg, &mut rng) {
        Ok((d, store)) => out.push(check_module(
            "reduced_discriminator",
            store,
            random_volume(shape([2, 1, 8, 8, 8]), 0.0, 1.0, 51),
            52,
            |t, p, x| d.forward(t, p, x),
        )),
        Err(e) => out.push(CheckResult::failed("reduced_discriminator", e)),
    }
    out
}

/// Random pair in `[0, 1]`: a volume and a noisy, partially correlated copy.
pub fn random_pair(edge: usize, seed: u64) -> (Volume, Volume) {
    let s = shape([1, 1, edge, edge, edge]);
    let x = random_volume(s, 0.0, 1.0, seed);
    let n = random_volume(s, 0.0, 1.0, seed ^ 0xABCD);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mix: f64 = rng.random_range(0.0..1.0);
    let y = Volume::from_vec(s, x.data().iter().zip(n.data()).map(|(a, b)| (1.0 - mix) * a + mix * b).collect())
        .expect("same shape");
    (x.cast(), y.cast())
}

/// `ssim` (single scale) and `ms_ssim` (three scales, paper exponents)
/// against the brute-force oracle on `pairs` random pairs of edge 8..=32.
pub fn oracle_suite(pairs: usize, seed: u64) -> Vec<CheckResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let single = SsimConfig::single_scale();
    let multi = SsimConfig::default();
    let (mut e_ssim, mut e_ms, mut e_mae) = (0.0f64, 0.0f64, 0.0f64);
    let mut failure = None;
    for i in 0..pairs {
        let edge = rng.random_range(8..=32);
        let (x, y) = random_pair(edge, seed.wrapping_add(i as u64));
        let (xo, yo) = (x.cast::<f64>(), y.cast::<f64>());
        let r = (|| -> Result<()> {
            e_ssim = e_ssim.max((losses::ssim(&x, &y, &single)? - oracle::ssim(&xo, &yo, &single)?).abs());
            e_ms = e_ms.max((losses::ms_ssim(&x, &y, &multi)? - oracle::ms_ssim(&xo, &yo, &multi)?).abs());
            e_mae = e_mae.max((losses::mae(&x, &y)? - oracle::mae(&xo, &yo)).abs());
            Ok(())
        })();
        if let Err(e) = r {
            failure = Some(e.to_string());
            break;
        }
    }
    let detail = format!("{pairs} pairs");
    let mut out = vec![
        CheckResult::new("ssim_vs_oracle", e_ssim, ORACLE_TOLERANCE, detail.clone()),
        CheckResult::new("ms_ssim_vs_oracle", e_ms, ORACLE_TOLERANCE, detail.clone()),
        CheckResult::new("mae_vs_oracle", e_mae, 1e-7, detail),
    ];
    if let Some(f) = failure {
        out.iter_mut().for_each(|c| {
            c.passed = false;
            c.detail = f.clone();
        });
    }
    out
}

/// Generator shape identity over `edges`, block widths, discriminator ladder
/// and `ms_ssim(x, x) == 1`.
pub fn shape_suite(edges: &[usize]) -> Vec<CheckResult> {
    let mut out = Vec::new();
    let cfg = GeneratorConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let built = Generator::build::<f32, _>(&cfg, &mut rng);
    let (g, params) = match built {
        Ok(b) => b,
        Err(e) => return vec![CheckResult::failed("generator_build", e)],
    };
    for &edge in edges {
        let name = format!("generator_shape_{edge}");
        let x = Volume::from_fn(shape([1, 1, edge, edge, edge]), |_, _, z, y, w| ((z + 2 * y + 3 * w) % 7) as f32 / 7.0);
        match g.translate(&params, &x) {
            Ok(y) => {
                let inside = y.data().iter().all(|&v| v > 0.0 && v < 1.0);
                let ok = y.shape() == x.shape() && inside;
                out.push(CheckResult::new(&name, if ok { 0.0 } else { 1.0 }, 0.0, format!("{} -> {}", x.shape(), y.shape())));
            }
            Err(e) => out.push(CheckResult::failed(&name, e)),
        }
    }
    let mut tape = Tape::new();
    let bound = params.bind_frozen(&mut tape);
    let x = tape.constant(Volume::full(shape([1, 1, 16, 16, 16]), 0.5));
    match g.contraction_features(&mut tape, &bound, x) {
        Ok(f) => {
            let widths: Vec<usize> = f.iter().map(|&v| tape.shape(v).channels).collect();
            let ok = widths == [24, 96];
            out.push(CheckResult::new("pcca_block_widths", if ok { 0.0 } else { 1.0 }, 0.0, format!("{widths:?}")));
        }
        Err(e) => out.push(CheckResult::failed("pcca_block_widths", e)),
    }
    let ladder = DiscriminatorConfig::default().channel_ladder;
    let ok = ladder == [24, 48, 96, 192];
    out.push(CheckResult::new("discriminator_ladder", if ok { 0.0 } else { 1.0 }, 0.0, format!("{ladder:?}")));
    let ms = gen_pair(&SyntheticSpec::default(), 11)
        .and_then(|p| losses::ms_ssim(&p.source, &p.source, &SsimConfig::default()));
    match ms {
        Ok(v) => out.push(CheckResult::new("ms_ssim_identity", (v - 1.0).abs(), 0.0, format!("{v}"))),
        Err(e) => out.push(CheckResult::failed("ms_ssim_identity", e)),
    }
    out
}

/// Everything `pcsa selfcheck` runs.
pub fn run_all() -> Vec<CheckResult> {
    let mut out = gradient_suite();
    out.extend(oracle_suite(100, 2024));
    out.extend(shape_suite(&[16, 24, 32]));
    out
}
