//! Stability instruments and cross-trial aggregation.

use rand::Rng;
use serde::Serialize;

use crate::arppo::RolloutBuffer;
use crate::environments::{Action, State};
use crate::{Error, Result};

pub const DEFAULT_BOOTSTRAP: usize = 2000;

/// Serving an empty queue while some queue has work.
pub fn is_destabilizing(state: &State, action: Action) -> bool {
    state.queues.get(action.0) == Some(&0) && state.queues.iter().any(|&q| q > 0)
}

/// Fraction of buffer slots whose action was destabilizing, judged on raw
/// states.
pub fn destabilizing_fraction(buffer: &RolloutBuffer) -> Result<f64> {
    if buffer.is_empty() {
        return Err(Error::Contract("destabilizing fraction of an empty buffer".into()));
    }
    let hits = buffer
        .slots()
        .iter()
        .filter(|s| is_destabilizing(&s.state, Action(s.action)))
        .count();
    Ok(hits as f64 / buffer.len() as f64)
}

/// Fraction of states with ‖queues‖₁ ≤ `l1_radius`.
pub fn visitation_mass(states: &[State], l1_radius: f64) -> Result<f64> {
    if states.is_empty() {
        return Err(Error::Contract("visitation mass of an empty sequence".into()));
    }
    let inside = states.iter().filter(|s| s.total() as f64 <= l1_radius).count();
    Ok(inside as f64 / states.len() as f64)
}

/// Counts of two-queue states on the grid `0..=max` × `0..=max`, bin width 1;
/// states outside the grid are dropped.
pub fn visitation_grid<'a>(states: impl IntoIterator<Item = &'a State>, max: u32) -> Vec<Vec<u64>> {
    let side = max as usize + 1;
    let mut grid = vec![vec![0u64; side]; side];
    for s in states {
        if let [a, b, ..] = s.queues[..] {
            if a <= max && b <= max {
                grid[a as usize][b as usize] += 1;
            }
        }
    }
    grid
}

/// Mean advantage at destabilizing slots, reported in cost convention
/// (positive means discouraged). `advantages` are the reward-convention,
/// std-normalized values produced by the learner. `None` when no slot was
/// destabilizing.
pub fn unstable_advantage_stats(buffer: &RolloutBuffer, advantages: &[f64]) -> Result<Option<f64>> {
    if advantages.len() != buffer.len() {
        return Err(Error::Contract(format!(
            "{} advantages for {} slots",
            advantages.len(),
            buffer.len()
        )));
    }
    let picked: Vec<f64> = buffer
        .slots()
        .iter()
        .zip(advantages)
        .filter(|(s, _)| is_destabilizing(&s.state, Action(s.action)))
        .map(|(_, a)| -a)
        .collect();
    if picked.is_empty() {
        return Ok(None);
    }
    Ok(Some(picked.iter().sum::<f64>() / picked.len() as f64))
}

/// Interquartile mean: the average of the sorted sample over quantile levels
/// [0.25, 0.75], each sample carrying mass 1/n. Samples straddling a quartile
/// boundary contribute fractionally, so any n ≥ 1 is handled.
pub fn iqm(samples: &[f64]) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::Contract("interquartile mean of an empty sample".into()));
    }
    let mut sorted = samples.to_vec();
    sorted.sort_by(f64::total_cmp);
    Ok(iqm_sorted(&sorted))
}

fn iqm_sorted(sorted: &[f64]) -> f64 {
    let n = sorted.len() as f64;
    let (lo, hi) = (0.25 * n, 0.75 * n);
    let mut acc = 0.0;
    for (i, x) in sorted.iter().enumerate() {
        let w = (hi.min(i as f64 + 1.0) - lo.max(i as f64)).max(0.0);
        if w > 0.0 {
            acc += w * x;
        }
    }
    acc / (hi - lo)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct IqmSummary {
    pub iqm: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    pub n_samples: usize,
    pub n_bootstrap: usize,
}

impl IqmSummary {
    /// Degenerate summary for a single sample; the interval is the point.
    pub fn point(value: f64) -> Self {
        Self { iqm: value, ci_low: value, ci_high: value, n_samples: 1, n_bootstrap: 0 }
    }
}

/// Linear-interpolated percentile of sorted data, `q` in [0, 1].
fn percentile_sorted(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let i = pos.floor() as usize;
    let frac = pos - i as f64;
    if i + 1 < sorted.len() {
        sorted[i] + frac * (sorted[i + 1] - sorted[i])
    } else {
        sorted[i]
    }
}

/// IQM with a 95% percentile-bootstrap interval. The interval is widened to
/// contain the point estimate when resampling skews it.
pub fn bootstrap_ci<R: Rng + ?Sized>(samples: &[f64], n_bootstrap: usize, rng: &mut R) -> Result<IqmSummary> {
    if samples.len() < 2 {
        return Err(Error::Contract(format!("bootstrap needs at least 2 samples, got {}", samples.len())));
    }
    if n_bootstrap == 0 {
        return Err(Error::Contract("bootstrap needs at least one resample".into()));
    }
    let point = iqm(samples)?;
    let n = samples.len();
    let mut stats = Vec::with_capacity(n_bootstrap);
    let mut resample = vec![0.0; n];
    for _ in 0..n_bootstrap {
        for slot in resample.iter_mut() {
            *slot = samples[rng.random_range(0..n)];
        }
        resample.sort_by(f64::total_cmp);
        stats.push(iqm_sorted(&resample));
    }
    stats.sort_by(f64::total_cmp);
    let ci_low = percentile_sorted(&stats, 0.025).min(point);
    let ci_high = percentile_sorted(&stats, 0.975).max(point);
    Ok(IqmSummary { iqm: point, ci_low, ci_high, n_samples: n, n_bootstrap })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::arppo::Slot;
    use crate::{stream_rng, Stream};
    use proptest::prelude::*;
    use rand::Rng;

    fn slot(queues: Vec<u32>, action: usize) -> Slot {
        let state = State::new(queues.clone(), vec![1; queues.len()]);
        Slot::new(state.clone(), vec![0.0; 4], action, 0.0, 0.0, 0.0, state, vec![0.0; 4])
    }

    fn buffer(slots: Vec<Slot>) -> RolloutBuffer {
        let mut b = RolloutBuffer::new(slots.len());
        for s in slots {
            b.push(s);
        }
        b
    }

    #[test]
    fn destabilizing_examples() {
        let b = buffer(vec![slot(vec![1, 2], 0), slot(vec![3, 0], 0), slot(vec![0, 1], 1)]);
        assert_eq!(destabilizing_fraction(&b).unwrap(), 0.0);

        let b = buffer(vec![
            slot(vec![0, 2], 0),
            slot(vec![3, 0], 1),
            slot(vec![3, 1], 0),
            slot(vec![3, 1], 1),
            slot(vec![0, 1], 1),
        ]);
        assert_eq!(destabilizing_fraction(&b).unwrap(), 0.4);

        let b = buffer(vec![slot(vec![0, 0], 0), slot(vec![0, 0], 1)]);
        assert_eq!(destabilizing_fraction(&b).unwrap(), 0.0);

        assert!(destabilizing_fraction(&RolloutBuffer::new(3)).is_err());
    }

    #[test]
    fn visitation_examples() {
        let s = |v: [u32; 2]| State::queues_only(v.to_vec());
        let states = [s([1, 2]), s([30, 0]), s([3, 3])];
        assert!((visitation_mass(&states, 20.0).unwrap() - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(visitation_mass(&[s([0, 0]), s([0, 0])], 0.0).unwrap(), 1.0);
        assert!(visitation_mass(&[s([0, 0]), s([0, 1])], 0.0).unwrap() < 1.0);
        assert!(visitation_mass(&[], 1.0).is_err());

        let grid = visitation_grid(&states, 5);
        assert_eq!(grid[1][2], 1);
        assert_eq!(grid[3][3], 1);
        assert_eq!(grid.iter().flatten().sum::<u64>(), 2);
    }

    #[test]
    fn unstable_advantage_examples() {
        let b = buffer(vec![slot(vec![0, 2], 0), slot(vec![1, 2], 0)]);
        assert_eq!(unstable_advantage_stats(&b, &[-0.3, 1.0]).unwrap(), Some(0.3));
        let b = buffer(vec![slot(vec![1, 2], 0)]);
        assert_eq!(unstable_advantage_stats(&b, &[0.5]).unwrap(), None);
        assert!(unstable_advantage_stats(&b, &[0.5, 1.0]).is_err());
    }

    #[test]
    fn iqm_examples() {
        assert_eq!(iqm(&[1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0]).unwrap(), 4.5);
        assert_eq!(iqm(&[2.5; 7]).unwrap(), 2.5);
        assert_eq!(iqm(&[9.0]).unwrap(), 9.0);
        // n = 6: quartile cut points at 1.5 and 4.5 → half of x₁, x₂, x₃, half of x₄
        let v = [1.0, 2.0, 3.0, 4.0, 5.0, 100.0];
        assert!((iqm(&v).unwrap() - (0.5 * 2.0 + 3.0 + 4.0 + 0.5 * 5.0) / 3.0).abs() < 1e-12);
        assert!(iqm(&[]).is_err());
    }

    #[test]
    fn iqm_matches_trim_oracle() {
        let mut rng = stream_rng(42, Stream::Agent);
        let samples: Vec<f64> = (0..20).map(|_| rng.random::<f64>()).collect();
        let mut sorted = samples.clone();
        sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let middle = &sorted[5..15];
        let oracle = middle.iter().sum::<f64>() / middle.len() as f64;
        assert!((iqm(&samples).unwrap() - oracle).abs() <= 1e-12);
    }

    #[test]
    fn bootstrap_examples() {
        let mut rng = stream_rng(0, Stream::Agent);
        let c = bootstrap_ci(&[3.0; 10], 500, &mut rng).unwrap();
        assert_eq!((c.iqm, c.ci_low, c.ci_high), (3.0, 3.0, 3.0));
        assert!(bootstrap_ci(&[1.0], 100, &mut rng).is_err());
    }

    #[test]
    fn bootstrap_widens_with_spread() {
        let base: Vec<f64> = (0..20).map(|i| i as f64 / 20.0).collect();
        let wide: Vec<f64> = base.iter().map(|x| 4.0 * x).collect();
        let narrow = bootstrap_ci(&base, 2000, &mut stream_rng(7, Stream::Agent)).unwrap();
        let broad = bootstrap_ci(&wide, 2000, &mut stream_rng(7, Stream::Agent)).unwrap();
        assert!(broad.ci_high - broad.ci_low > narrow.ci_high - narrow.ci_low);
    }

    #[test]
    fn bootstrap_regression_fixture() {
        let samples = [0.12, 0.4, -0.3, 0.9, 0.05, 0.33, 0.27, 0.6, -0.1, 0.2];
        let s = bootstrap_ci(&samples, 2000, &mut stream_rng(1, Stream::Agent)).unwrap();
        // middle half of the sorted sample: (0.5·0.05 + 0.12 + 0.2 + 0.27 + 0.33 + 0.5·0.4) / 5
        assert!((s.iqm - 0.229).abs() < 1e-12, "{s:?}");
        assert!((s.ci_low - 0.027).abs() < 1e-12 && (s.ci_high - 0.445).abs() < 1e-12, "{s:?}");
        let again = bootstrap_ci(&samples, 2000, &mut stream_rng(1, Stream::Agent)).unwrap();
        assert_eq!(s, again);
    }

    proptest! {
        #[test]
        fn iqm_is_affine_equivariant(xs in prop::collection::vec(-100f64..100.0, 1..40), a in 0.1f64..10.0, b in -50f64..50.0) {
            let base = iqm(&xs).unwrap();
            let moved: Vec<f64> = xs.iter().map(|x| a * x + b).collect();
            let got = iqm(&moved).unwrap();
            prop_assert!((got - (a * base + b)).abs() <= 1e-9 * (1.0 + got.abs()));
        }

        #[test]
        fn visitation_is_monotone_in_radius(totals in prop::collection::vec((0u32..40, 0u32..40), 1..50), r1 in 0f64..80.0, r2 in 0f64..80.0) {
            let states: Vec<State> = totals.iter().map(|&(a, b)| State::queues_only(vec![a, b])).collect();
            let (lo, hi) = if r1 <= r2 { (r1, r2) } else { (r2, r1) };
            prop_assert!(visitation_mass(&states, lo).unwrap() <= visitation_mass(&states, hi).unwrap());
        }
    }
}
