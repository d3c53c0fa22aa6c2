//! Boundary exploration along the segment between two anchor embeddings,
//! and the interpolation sweep that exposes a model's transition interval.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::embed::{interpolate, Embedding};
use crate::error::{BpoError, Result};
use crate::model_sim::{ConceptId, ModelRegistry, ModelSpec};
use crate::par;
use crate::rng::derive_seed;
use crate::suffix_opt::flipped_at;

/// Semantic check used by the bisection: does a probe at `e` leave the
/// benign concept? `probe` indexes the probe within one exploration so
/// stochastic oracles can key their seeds on it.
pub trait FlipOracle {
    fn flipped(&self, e: &Embedding, probe: u64) -> Result<bool>;
}

impl<F> FlipOracle for F
where
    F: Fn(&Embedding, u64) -> Result<bool>,
{
    fn flipped(&self, e: &Embedding, probe: u64) -> Result<bool> {
        self(e, probe)
    }
}

/// Majority-of-`votes` generation check; probe `i` uses seeds
/// `seed_base + i * votes ..`.
pub struct GenerativeOracle<'a> {
    pub family: &'a ModelRegistry,
    pub model: &'a ModelSpec,
    pub origin: ConceptId,
    pub votes: usize,
    pub seed_base: u64,
}

impl FlipOracle for GenerativeOracle<'_> {
    fn flipped(&self, e: &Embedding, probe: u64) -> Result<bool> {
        let base = self.seed_base.wrapping_add(probe.wrapping_mul(self.votes as u64));
        flipped_at(self.family, self.model, e, self.origin, self.votes, base)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Probe {
    pub alpha: f64,
    pub flipped: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundaryResult {
    pub alpha_star: f64,
    pub e_star: Embedding,
    /// Endpoint checks at α = 0 and α = 1 first, then every midpoint probe.
    pub trace: Vec<Probe>,
    pub epsilon: f64,
}

impl BoundaryResult {
    pub fn midpoint_probes(&self) -> usize {
        self.trace.len().saturating_sub(2)
    }
}

/// Bisection between `e_pis` (α = 0, same semantics as the benign prompt)
/// and `e_adv` (α = 1, flipped) down to an interval of width `epsilon`.
/// Returns the flipped end of the final bracket.
pub fn explore<O: FlipOracle + ?Sized>(
    oracle: &O,
    e_adv: &Embedding,
    e_pis: &Embedding,
    epsilon: f64,
) -> Result<BoundaryResult> {
    if !(epsilon > 0.0) {
        return Err(BpoError::NonPositiveEpsilon(epsilon));
    }
    let mut trace = Vec::new();
    let at_pis = oracle.flipped(e_pis, 0)?;
    trace.push(Probe { alpha: 0.0, flipped: at_pis });
    let at_adv = oracle.flipped(e_adv, 1)?;
    trace.push(Probe { alpha: 1.0, flipped: at_adv });
    if at_pis || !at_adv {
        return Err(BpoError::EndpointsAgree);
    }

    let (mut low, mut high) = (0.0f64, 1.0f64);
    let mut probe = 2u64;
    while high - low > epsilon {
        let alpha = 0.5 * (low + high);
        let e = interpolate(e_pis, e_adv, alpha)?;
        let flipped = oracle.flipped(&e, probe)?;
        probe += 1;
        trace.push(Probe { alpha, flipped });
        if flipped {
            high = alpha;
        } else {
            low = alpha;
        }
    }
    Ok(BoundaryResult { alpha_star: high, e_star: interpolate(e_pis, e_adv, high)?, trace, epsilon })
}

/// [`explore`] with the generative majority check on `model`.
#[allow(clippy::too_many_arguments)]
pub fn explore_on_model(
    family: &ModelRegistry,
    model: &ModelSpec,
    e_adv: &Embedding,
    e_pis: &Embedding,
    origin: ConceptId,
    epsilon: f64,
    votes: usize,
    seed_base: u64,
) -> Result<BoundaryResult> {
    let oracle = GenerativeOracle { family, model, origin, votes, seed_base };
    explore(&oracle, e_adv, e_pis, epsilon)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub sigma: f64,
    pub retain_count: usize,
    pub n_images: usize,
    pub retain_freq: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepCurve {
    pub model_id: String,
    pub step: f64,
    pub points: Vec<SweepPoint>,
}

/// Grid `0, step, 2·step, ..` up to 1 with `1 + round(1/step)` points.
pub fn sweep_grid(step: f64) -> Result<Vec<f64>> {
    if !(step > 0.0 && step <= 0.5) {
        return Err(BpoError::InvalidConfig(format!("sweep step {step} outside (0, 0.5]")));
    }
    let intervals = (1.0 / step).round() as usize;
    let exact = ((1.0 / step) - intervals as f64).abs() < 1e-9;
    Ok((0..=intervals)
        .map(|i| if exact { i as f64 / intervals as f64 } else { (i as f64 * step).min(1.0) })
        .collect())
}

/// Generates `n_images` images at each grid point of the segment from `e_a`
/// to `e_b` and counts those that keep `origin`.
#[allow(clippy::too_many_arguments)]
pub fn sweep_interpolation(
    family: &ModelRegistry,
    model: &ModelSpec,
    e_a: &Embedding,
    e_b: &Embedding,
    origin: ConceptId,
    step: f64,
    n_images: usize,
    seed_base: u64,
) -> Result<SweepCurve> {
    if n_images == 0 {
        return Err(BpoError::InvalidConfig("n_images must be at least 1".into()));
    }
    let grid = sweep_grid(step)?;
    let points = par::map_range(grid.len(), |i| -> Result<SweepPoint> {
        let sigma = grid[i];
        let e = interpolate(e_a, e_b, sigma)?;
        let base = derive_seed(&[seed_base, i as u64]);
        let mut retain_count = 0;
        for j in 0..n_images as u64 {
            let image = family.generate(model, &e, origin, base.wrapping_add(j))?;
            if family.extract_semantics_of(&image.proxy)? == origin {
                retain_count += 1;
            }
        }
        Ok(SweepPoint { sigma, retain_count, n_images, retain_freq: retain_count as f64 / n_images as f64 })
    });
    Ok(SweepCurve { model_id: model.id.clone(), step, points: points.into_iter().collect::<Result<_>>()? })
}

/// The retain probability itself on the sweep grid (the `n_images → ∞` curve).
pub fn sweep_expected(
    family: &ModelRegistry,
    model: &ModelSpec,
    e_a: &Embedding,
    e_b: &Embedding,
    origin: ConceptId,
    step: f64,
) -> Result<Vec<(f64, f64)>> {
    sweep_grid(step)?
        .into_iter()
        .map(|s| Ok((s, family.retain_probability(model, &interpolate(e_a, e_b, s)?, origin)?)))
        .collect()
}

/// Smallest grid interval containing every point with
/// `lo < retain_freq < hi`; `None` when no point is in transition.
pub fn transition_interval(curve: &SweepCurve, lo: f64, hi: f64) -> Result<Option<(f64, f64)>> {
    if !(0.0 < lo && lo < hi && hi < 1.0) {
        return Err(BpoError::InvalidConfig(format!("thresholds ({lo}, {hi}) must satisfy 0 < lo < hi < 1")));
    }
    let inside: Vec<f64> = curve
        .points
        .iter()
        .filter(|p| lo < p.retain_freq && p.retain_freq < hi)
        .map(|p| p.sigma)
        .collect();
    Ok(match (inside.first(), inside.last()) {
        (Some(&a), Some(&b)) => Some((a, b)),
        _ => None,
    })
}

pub const SWEEP_CSV_HEADER: &str = "model_id,sigma,retain_count,n_images,retain_freq";

/// Writes curves as CSV rows under [`SWEEP_CSV_HEADER`].
pub fn write_sweep_csv<W: Write>(out: &mut W, curves: &[SweepCurve]) -> Result<()> {
    writeln!(out, "{SWEEP_CSV_HEADER}")?;
    for c in curves {
        for p in &c.points {
            writeln!(out, "{},{},{},{},{}", c.model_id, p.sigma, p.retain_count, p.n_images, p.retain_freq)?;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn threshold_oracle(crossing: f64) -> impl Fn(&Embedding, u64) -> Result<bool> {
        // e = (1 - α, α): flipped iff α >= crossing
        move |e: &Embedding, _| Ok(e.0[1] >= crossing)
    }

    fn unit_pair() -> (Embedding, Embedding) {
        (Embedding(vec![1.0, 0.0]), Embedding(vec![0.0, 1.0]))
    }

    #[test]
    fn brackets_a_known_crossing() {
        let (pis, adv) = unit_pair();
        let r = explore(&threshold_oracle(0.37), &adv, &pis, 0.001).unwrap();
        assert!(r.alpha_star > 0.37 - 1e-12 && r.alpha_star <= 0.371, "{}", r.alpha_star);
        assert!((r.alpha_star - 0.37).abs() <= 0.001);
        assert_eq!(r.midpoint_probes(), 10);
        assert_eq!(r.e_star, interpolate(&pis, &adv, r.alpha_star).unwrap());
    }

    #[test]
    fn coarse_epsilon_probes_once() {
        let (pis, adv) = unit_pair();
        let r = explore(&threshold_oracle(0.8), &adv, &pis, 0.5).unwrap();
        assert_eq!(r.midpoint_probes(), 1);
        assert_eq!(r.trace[2].alpha, 0.5);
        assert_eq!(r.alpha_star, 1.0);
    }

    #[test]
    fn probe_count_is_ceil_log2() {
        let (pis, adv) = unit_pair();
        for eps in [0.3, 0.1, 0.01, 0.001, 1e-4, 0.25] {
            let r = explore(&threshold_oracle(0.5001), &adv, &pis, eps).unwrap();
            assert_eq!(r.midpoint_probes(), (1.0 / eps).log2().ceil() as usize, "eps {eps}");
        }
    }

    #[test]
    fn endpoint_and_epsilon_errors() {
        let (pis, adv) = unit_pair();
        let never = |_: &Embedding, _| Ok(false);
        assert_eq!(explore(&never, &adv, &pis, 0.01).unwrap_err(), BpoError::EndpointsAgree);
        let always = |_: &Embedding, _| Ok(true);
        assert_eq!(explore(&always, &adv, &pis, 0.01).unwrap_err(), BpoError::EndpointsAgree);
        assert_eq!(explore(&threshold_oracle(0.5), &adv, &pis, 0.0).unwrap_err(), BpoError::NonPositiveEpsilon(0.0));
        assert!(explore(&threshold_oracle(0.5), &adv, &pis, f64::NAN).is_err());
    }

    #[test]
    fn bracket_halves_and_holds() {
        let (pis, adv) = unit_pair();
        let r = explore(&threshold_oracle(0.6180339), &adv, &pis, 1e-6).unwrap();
        let (mut low, mut high) = (0.0, 1.0);
        for p in &r.trace[2..] {
            assert_eq!(p.alpha, 0.5 * (low + high));
            let width = high - low;
            if p.flipped {
                high = p.alpha;
            } else {
                low = p.alpha;
            }
            assert_eq!(high - low, width / 2.0);
        }
        assert_eq!(high, r.alpha_star);
    }

    fn curve(freqs: &[f64], step: f64) -> SweepCurve {
        SweepCurve {
            model_id: "m".into(),
            step,
            points: freqs
                .iter()
                .enumerate()
                .map(|(i, &f)| SweepPoint { sigma: i as f64 * step, retain_count: 0, n_images: 1, retain_freq: f })
                .collect(),
        }
    }

    #[test]
    fn transition_interval_cases() {
        assert_eq!(transition_interval(&curve(&[1.0; 6], 0.2), 0.05, 0.95).unwrap(), None);
        let c = curve(&[1.0, 1.0, 1.0, 0.5, 0.0, 0.0], 0.2);
        let (a, b) = transition_interval(&c, 0.05, 0.95).unwrap().unwrap();
        assert!((a - 0.6).abs() < 1e-12 && (b - 0.6).abs() < 1e-12);
        let c = curve(&[1.0, 0.9, 1.0, 0.5, 0.2, 0.0], 0.2);
        let (a, b) = transition_interval(&c, 0.05, 0.95).unwrap().unwrap();
        assert!((a - 0.2).abs() < 1e-12 && (b - 0.8).abs() < 1e-12);
        assert!(transition_interval(&c, 0.5, 0.5).is_err());
    }

    #[test]
    fn grid_sizes() {
        assert_eq!(sweep_grid(0.05).unwrap().len(), 21);
        assert_eq!(sweep_grid(0.5).unwrap(), vec![0.0, 0.5, 1.0]);
        assert_eq!(sweep_grid(0.05).unwrap()[3], 0.15);
        assert!(sweep_grid(0.0).is_err());
        assert!(sweep_grid(0.75).is_err());
    }
}
