//! Where to put exit blocks: target cost fractions and boundary snapping.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Strategy {
    Pareto,
    GoldenRatio,
    Fine,
    Linear,
    Quadratic,
}

impl Strategy {
    /// Default split ratio of the geometric strategies.
    pub fn default_phi(self) -> Option<f64> {
        match self {
            Strategy::Pareto => Some(0.2),
            Strategy::GoldenRatio => Some(0.618),
            Strategy::Fine => Some(0.05),
            Strategy::Linear | Strategy::Quadratic => None,
        }
    }
}

impl std::str::FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace('_', "-").as_str() {
            "pareto" => Ok(Self::Pareto),
            "golden-ratio" | "golden" => Ok(Self::GoldenRatio),
            "fine" => Ok(Self::Fine),
            "linear" => Ok(Self::Linear),
            "quadratic" => Ok(Self::Quadratic),
            other => Err(Error::Config(format!(
                "unknown placement strategy {other:?}"
            ))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlacementPolicy {
    pub strategy: Strategy,
    /// Overrides the strategy's default ratio; ignored by Linear and Quadratic.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub phi: Option<f64>,
    pub exits: usize,
}

impl PlacementPolicy {
    pub fn new(strategy: Strategy, exits: usize) -> Self {
        Self {
            strategy,
            phi: None,
            exits,
        }
    }

    pub fn phi(&self) -> Option<f64> {
        self.phi.or(self.strategy.default_phi())
    }
}

/// Target cumulative cost fractions `t_1 .. t_N`.
pub fn targets(policy: &PlacementPolicy) -> Result<Vec<f64>> {
    let n = policy.exits;
    match policy.strategy {
        Strategy::Pareto | Strategy::GoldenRatio | Strategy::Fine => {
            let phi = policy.phi().expect("geometric strategies have a ratio");
            if !(phi > 0.0 && phi < 1.0) {
                return Err(Error::Config(format!("phi must lie in (0, 1), got {phi}")));
            }
            // Each exit takes a fraction phi of the cost still remaining.
            let mut out = Vec::with_capacity(n);
            let mut t = 0.0;
            for _ in 0..n {
                t += phi * (1.0 - t);
                out.push(t);
            }
            Ok(out)
        }
        Strategy::Linear => Ok((1..=n).map(|k| k as f64 / (n + 1) as f64).collect()),
        Strategy::Quadratic => {
            let total: usize = (1..=n + 1).map(|j| j * j).sum();
            let mut acc = 0;
            Ok((1..=n)
                .map(|k| {
                    acc += k * k;
                    acc as f64 / total as f64
                })
                .collect())
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlacementResult {
    pub targets: Vec<f64>,
    /// Chosen boundary index for each target.
    pub boundaries: Vec<usize>,
    /// Cost fraction of each chosen boundary.
    pub realized: Vec<f64>,
}

/// Picks strictly increasing boundaries minimizing `Σ |target_k - realized_k|`.
/// Ties go to the lexicographically smallest choice.
pub fn snap(targets: &[f64], boundary_fractions: &[f64]) -> Result<PlacementResult> {
    let m = boundary_fractions.len();
    let n = targets.len();
    if n > m {
        return Err(Error::Construction(format!(
            "{n} exits requested but only {m} boundaries available"
        )));
    }
    // best[k][j]: least cost of placing targets k.. on boundaries j..
    let mut best = vec![vec![f64::INFINITY; m + 1]; n + 1];
    best[n].iter_mut().for_each(|v| *v = 0.0);
    for k in (0..n).rev() {
        for j in (0..m).rev() {
            let take = (targets[k] - boundary_fractions[j]).abs() + best[k + 1][j + 1];
            best[k][j] = best[k][j + 1].min(take);
        }
    }
    let mut chosen = Vec::with_capacity(n);
    let mut start = 0;
    for k in 0..n {
        let j = (start..m)
            .find(|&j| {
                (targets[k] - boundary_fractions[j]).abs() + best[k + 1][j + 1] == best[k][start]
            })
            .expect("the minimum is attained");
        chosen.push(j);
        start = j + 1;
    }
    Ok(PlacementResult {
        targets: targets.to_vec(),
        realized: chosen.iter().map(|&b| boundary_fractions[b]).collect(),
        boundaries: chosen,
    })
}

/// Placement CSV: `exit_index, target, boundary, realized`.
pub fn write_csv(result: &PlacementResult, path: &std::path::Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["exit_index", "target", "boundary", "realized"])?;
    for i in 0..result.targets.len() {
        w.write_record([
            i.to_string(),
            format!("{:.6}", result.targets[i]),
            result.boundaries[i].to_string(),
            format!("{:.6}", result.realized[i]),
        ])?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::Strategy;
    use super::*;
    use proptest::prelude::*;

    fn geometric(s: Strategy, n: usize) -> Vec<f64> {
        targets(&PlacementPolicy::new(s, n)).unwrap()
    }

    #[test]
    fn pareto_three() {
        let t = geometric(Strategy::Pareto, 3);
        for (a, b) in t.iter().zip([0.2, 0.36, 0.488]) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn linear_ten() {
        let t = geometric(Strategy::Linear, 10);
        for (k, v) in t.iter().enumerate() {
            assert!((v - (k + 1) as f64 / 11.0).abs() < 1e-15);
        }
    }

    #[test]
    fn quadratic_two() {
        let t = geometric(Strategy::Quadratic, 2);
        assert!((t[0] - 1.0 / 14.0).abs() < 1e-15);
        assert!((t[1] - 5.0 / 14.0).abs() < 1e-15);
    }

    #[test]
    fn zero_exits_is_empty() {
        for s in [Strategy::Pareto, Strategy::Linear, Strategy::Quadratic] {
            assert!(geometric(s, 0).is_empty());
        }
    }

    #[test]
    fn crowded_targets_share_out_boundaries() {
        let r = snap(&[0.1, 0.12], &[0.1, 0.5, 0.9]).unwrap();
        assert_eq!(r.boundaries, vec![0, 1]);
        let r = snap(&[0.85, 0.9], &[0.1, 0.5, 0.9]).unwrap();
        assert_eq!(r.boundaries, vec![1, 2]);
    }

    #[test]
    fn fixed_point() {
        let b = [0.1, 0.3, 0.6, 0.8];
        let r = snap(&[0.3, 0.8], &b).unwrap();
        assert_eq!(r.realized, vec![0.3, 0.8]);
    }

    #[test]
    fn too_many_exits() {
        assert!(matches!(
            snap(&[0.1, 0.2, 0.3], &[0.2, 0.5]),
            Err(Error::Construction(_))
        ));
    }

    #[test]
    fn bad_phi() {
        let p = PlacementPolicy {
            strategy: Strategy::Pareto,
            phi: Some(1.5),
            exits: 2,
        };
        assert!(targets(&p).is_err());
    }

    proptest! {
        #[test]
        fn targets_strictly_increasing_in_unit_interval(
            n in 1usize..20,
            s in prop_oneof![
                Just(Strategy::Pareto), Just(Strategy::GoldenRatio), Just(Strategy::Fine),
                Just(Strategy::Linear), Just(Strategy::Quadratic)
            ],
        ) {
            let t = geometric(s, n);
            prop_assert_eq!(t.len(), n);
            prop_assert!(t[0] > 0.0 && t[n - 1] < 1.0);
            prop_assert!(t.windows(2).all(|w| w[0] < w[1]));
        }

        #[test]
        fn geometric_split_recursion(n in 1usize..20, phi in 0.01f64..0.99) {
            let p = PlacementPolicy { strategy: Strategy::Pareto, phi: Some(phi), exits: n };
            let t = targets(&p).unwrap();
            prop_assert!((t[0] - phi).abs() < 1e-15);
            for w in t.windows(2) {
                prop_assert!((w[1] - w[0] - phi * (1.0 - w[0])).abs() < 1e-12);
            }
        }

        #[test]
        fn snap_is_strictly_increasing_and_idempotent(
            raw in prop::collection::vec(0.001f64..0.999, 1..12),
            picks in prop::collection::vec(0.0f64..1.0, 1..12),
        ) {
            let mut b = raw;
            b.sort_by(f64::total_cmp);
            b.dedup();
            let mut t = picks;
            t.truncate(b.len());
            t.sort_by(f64::total_cmp);
            let r = snap(&t, &b).unwrap();
            prop_assert!(r.boundaries.windows(2).all(|w| w[0] < w[1]));
            let again = snap(&r.realized, &b).unwrap();
            prop_assert_eq!(again.boundaries, r.boundaries);
        }
    }
}
