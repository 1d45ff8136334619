//! Central finite-difference verification of tape gradients, run in `f64`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Tape, Var, Volume};
use crate::error::{Error, Result};

/// Second-difference spread, relative to `|gradient| * eps`, above which a
/// coordinate is treated as straddling a kink.
const KINK_RATIO: f64 = 1e-4;

#[derive(Clone, Debug)]
pub struct GradCheckConfig {
    /// Central-difference step.
    pub eps: f64,
    /// Coordinates sampled per input; inputs at most this large are checked exhaustively.
    pub samples_per_input: usize,
    /// Gradients smaller than this are compared in absolute terms.
    pub abs_floor: f64,
    /// Combine differences at `eps` and `eps / 2` to cancel the `eps^2`
    /// truncation term, which dominates through deep smooth compositions.
    pub richardson: bool,
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        GradCheckConfig { eps: 1e-3, samples_per_input: 24, abs_floor: 1e-4, richardson: true, seed: 0x5eed }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub checked: usize,
    /// Sampled coordinates replaced because a kink (relu, max, abs) lay
    /// inside the difference stencil, where no derivative exists to compare.
    pub kinks: usize,
    /// `(input, flat index, analytic, numeric)` at the worst coordinate.
    pub worst: Option<(usize, usize, f64, f64)>,
}

impl GradCheckReport {
    pub fn passes(&self, tolerance: f64) -> bool {
        self.max_rel_error <= tolerance && self.checked > 0 && self.kinks * 4 <= self.checked
    }
}

fn eval<F>(f: &F, inputs: &[Volume<f64>]) -> Result<f64>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|v| tape.constant(v.clone())).collect();
    let out = f(&mut tape, &vars)?;
    let v = tape.value(out);
    if v.len() != 1 {
        return Err(Error::NotScalar(v.shape()));
    }
    Ok(v.data()[0])
}

/// Compares analytic gradients of the scalar-valued `f` against central
/// differences at randomly sampled coordinates of every input.
pub fn gradient_check<F>(f: F, inputs: &[Volume<f64>], cfg: &GradCheckConfig) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|v| tape.leaf(v.clone())).collect();
    let out = f(&mut tape, &vars)?;
    let grads = tape.backward(out)?;

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut report = GradCheckReport { max_rel_error: 0.0, checked: 0, kinks: 0, worst: None };
    let mut probe = inputs.to_vec();
    for (i, input) in inputs.iter().enumerate() {
        let n = input.len();
        let exhaustive = n <= cfg.samples_per_input;
        let mut queue: Vec<usize> =
            if exhaustive { (0..n).collect() } else { (0..cfg.samples_per_input).map(|_| rng.random_range(0..n)).collect() };
        let analytic = grads.get(vars[i]);
        let mut redraws = 0;
        while let Some(j) = queue.pop() {
            let x0 = input.data()[j];
            let h = cfg.eps;
            let mut at = |d: f64| -> Result<f64> {
                probe[i].data_mut()[j] = x0 + d;
                let v = eval(&f, &probe);
                probe[i].data_mut()[j] = x0;
                v
            };
            let [m2, m1, z, p1, p2] = [at(-h)?, at(-h / 2.0)?, at(0.0)?, at(h / 2.0)?, at(h)?];
            let coarse = (p2 - m2) / (2.0 * h);
            let fine = (p1 - m1) / h;
            let numeric = if cfg.richardson { (4.0 * fine - coarse) / 3.0 } else { coarse };
            let a = analytic.map_or(0.0, |g| g.data()[j]);

            // On a smooth function the three second differences agree to
            // O(h^3); a slope break inside the stencil separates them by
            // roughly the jump times h.
            let d2 = [m2 - 2.0 * m1 + z, m1 - 2.0 * z + p1, z - 2.0 * p1 + p2];
            let spread = d2.iter().cloned().fold(f64::MIN, f64::max) - d2.iter().cloned().fold(f64::MAX, f64::min);
            if spread > KINK_RATIO * h * numeric.abs().max(cfg.abs_floor) {
                report.kinks += 1;
                if !exhaustive && redraws < cfg.samples_per_input {
                    redraws += 1;
                    queue.push(rng.random_range(0..n));
                }
                continue;
            }

            let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(cfg.abs_floor);
            report.checked += 1;
            if err > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = report.max_rel_error.max(err);
                report.worst = Some((i, j, a, numeric));
            }
        }
    }
    Ok(report)
}

/// Reduces `y` to a scalar by a fixed pseudo-random projection, so that a
/// gradient check exercises every output element with distinct weights.
pub fn random_projection(tape: &mut Tape<f64>, y: Var, seed: u64) -> Result<Var> {
    let shape = tape.shape(y);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = Volume::from_vec(shape, (0..shape.numel()).map(|_| rng.random_range(-1.0..1.0)).collect())?;
    let w = tape.constant(w);
    let p = tape.mul(y, w)?;
    Ok(tape.sum(p))
}

/// Uniform random volume in `[lo, hi)`.
pub fn random_volume(shape: super::Shape, lo: f64, hi: f64, seed: u64) -> Volume<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Volume::from_vec(shape, (0..shape.numel()).map(|_| rng.random_range(lo..hi)).collect())
        .expect("sized from shape")
}
