use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Float, Tape, Tensor, Var};

/// Soft outputs `Ŷ_0 .. Ŷ_N` (`[n, k]`) and soft costs `C_0 .. C_N` (`[n]`).
#[derive(Clone, Debug)]
pub struct SoftOutputs {
    pub outputs: Vec<Var>,
    pub costs: Vec<Var>,
}

/// Backward recursion `Ŷ_i = h_i ŷ_i + (1 - h_i) Ŷ_{i+1}` with `Ŷ_N = ŷ_N`,
/// and the same for costs starting from `C_N = c_N`.
pub fn soft_forward<F: Float>(
    tape: &mut Tape<F>,
    confidences: &[Var],
    probs: &[Var],
    costs: &[f64],
) -> Result<SoftOutputs> {
    let n_exits = confidences.len();
    if probs.len() != n_exits + 1 || costs.len() != n_exits + 1 {
        return Err(Error::Shape(format!(
            "soft outputs need N confidences, N + 1 distributions and N + 1 costs; got {}, {}, {}",
            n_exits,
            probs.len(),
            costs.len()
        )));
    }
    let batch = tape.shape(probs[n_exits])[0];
    let cost_const =
        |tape: &mut Tape<F>, c: f64| tape.constant(Tensor::full(vec![batch], F::from_f64(c)));

    let mut outputs = vec![probs[n_exits]];
    let mut soft_costs = vec![cost_const(tape, costs[n_exits])];
    for i in (0..n_exits).rev() {
        let y = tape.blend(confidences[i], probs[i], *outputs.last().expect("seeded"))?;
        let c_i = cost_const(tape, costs[i]);
        let c = tape.blend(confidences[i], c_i, *soft_costs.last().expect("seeded"))?;
        outputs.push(y);
        soft_costs.push(c);
    }
    outputs.reverse();
    soft_costs.reverse();
    Ok(SoftOutputs {
        outputs,
        costs: soft_costs,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    /// `CE(Ŷ_0) + λ C_0`.
    V1,
    /// `Σ_i CE(Ŷ_i) + λ C_i`.
    V2,
    /// `Σ_i CE(Ŷ_i)`.
    McOnly,
    /// `Σ_i C_i`; λ is ignored.
    CostOnly,
}

impl std::str::FromStr for LossKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace('-', "_").as_str() {
            "v1" => Ok(Self::V1),
            "v2" => Ok(Self::V2),
            "mc_only" | "mc" => Ok(Self::McOnly),
            "cost_only" | "cost" => Ok(Self::CostOnly),
            other => Err(Error::Config(format!("unknown loss {other:?}"))),
        }
    }
}

/// Batch-mean loss as a scalar node.
pub fn loss<F: Float>(
    tape: &mut Tape<F>,
    kind: LossKind,
    soft: &SoftOutputs,
    labels: &[usize],
    lambda: f64,
) -> Result<Var> {
    let lam = F::from_f64(lambda);
    let term = |tape: &mut Tape<F>,
                i: usize,
                with_ce: bool,
                cost_weight: Option<F>|
     -> Result<Option<Var>> {
        let ce = if with_ce {
            Some(tape.cross_entropy(soft.outputs[i], labels)?)
        } else {
            None
        };
        let cost = cost_weight.map(|w| {
            let m = tape.mean(soft.costs[i]);
            tape.scale(m, w)
        });
        Ok(match (ce, cost) {
            (Some(a), Some(b)) => Some(tape.add(a, b)?),
            (a, b) => a.or(b),
        })
    };
    let terms: Vec<Var> = match kind {
        LossKind::V1 => term(tape, 0, true, Some(lam))?.into_iter().collect(),
        LossKind::V2 => (0..soft.outputs.len())
            .map(|i| term(tape, i, true, Some(lam)))
            .collect::<Result<Vec<_>>>()?
            .into_iter()
            .flatten()
            .collect(),
        LossKind::McOnly => (0..soft.outputs.len())
            .map(|i| term(tape, i, true, None))
            .collect::<Result<Vec<_>>>()?
            .into_iter()
            .flatten()
            .collect(),
        LossKind::CostOnly => (0..soft.costs.len())
            .map(|i| term(tape, i, false, Some(F::ONE)))
            .collect::<Result<Vec<_>>>()?
            .into_iter()
            .flatten()
            .collect(),
    };
    let mut total = terms[0];
    for &t in &terms[1..] {
        total = tape.add(total, t)?;
    }
    Ok(total)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn setup(h: &[f64], probs: &[&[f64]], costs: &[f64]) -> (Tape<f64>, SoftOutputs) {
        let mut tape = Tape::new();
        let hv: Vec<Var> = h
            .iter()
            .map(|&v| tape.constant(Tensor::from_f64(vec![1], &[v]).unwrap()))
            .collect();
        let pv: Vec<Var> = probs
            .iter()
            .map(|p| tape.constant(Tensor::from_f64(vec![1, p.len()], p).unwrap()))
            .collect();
        let soft = soft_forward(&mut tape, &hv, &pv, costs).unwrap();
        (tape, soft)
    }

    #[test]
    fn half_confidence_forced_arithmetic() {
        let (tape, s) = setup(&[0.5], &[&[1.0, 0.0], &[0.0, 1.0]], &[0.2, 1.0]);
        assert_eq!(tape.value(s.outputs[0]).data(), &[0.5, 0.5]);
        assert!((tape.value(s.costs[0]).item() - 0.6).abs() < 1e-15);
    }

    #[test]
    fn confidence_collapse() {
        let (tape, s) = setup(&[1.0], &[&[0.7, 0.3], &[0.1, 0.9]], &[0.2, 1.0]);
        assert_eq!(tape.value(s.outputs[0]).data(), &[0.7, 0.3]);
        assert_eq!(tape.value(s.costs[0]).item(), 0.2);
        let (tape, s) = setup(&[0.0], &[&[0.7, 0.3], &[0.1, 0.9]], &[0.2, 1.0]);
        assert_eq!(tape.value(s.outputs[0]).data(), &[0.1, 0.9]);
        assert_eq!(tape.value(s.costs[0]).item(), 1.0);
    }

    #[test]
    fn last_soft_output_is_final_exit() {
        let (tape, s) = setup(
            &[0.3, 0.8],
            &[&[0.5, 0.5], &[0.2, 0.8], &[0.6, 0.4]],
            &[0.1, 0.3, 1.0],
        );
        assert_eq!(tape.value(s.outputs[2]).data(), &[0.6, 0.4]);
        assert_eq!(tape.value(s.costs[2]).item(), 1.0);
    }

    #[test]
    fn v1_collapse_and_zero() {
        let (mut tape, s) = setup(&[1.0], &[&[0.25, 0.75], &[0.5, 0.5]], &[0.2, 1.0]);
        let l = loss(&mut tape, LossKind::V1, &s, &[1], 2.0).unwrap();
        assert!((tape.value(l).item() - (-(0.75f64).ln() + 0.4)).abs() < 1e-12);
        let (mut tape, s) = setup(&[0.4], &[&[0.0, 1.0], &[0.0, 1.0]], &[0.2, 1.0]);
        let l = loss(&mut tape, LossKind::V1, &s, &[1], 0.0).unwrap();
        assert_eq!(tape.value(l).item(), 0.0);
    }

    #[test]
    fn v2_without_exits() {
        let (mut tape, s) = setup(&[], &[&[0.25, 0.75]], &[1.0]);
        let l = loss(&mut tape, LossKind::V2, &s, &[0], 0.7).unwrap();
        assert!((tape.value(l).item() - (-(0.25f64).ln() + 0.7)).abs() < 1e-12);
    }

    #[test]
    fn mc_only_is_v2_at_zero_lambda() {
        let h = [0.3, 0.6];
        let p: [&[f64]; 3] = [&[0.2, 0.8], &[0.5, 0.5], &[0.9, 0.1]];
        let c = [0.1, 0.4, 1.0];
        let (mut t1, s1) = setup(&h, &p, &c);
        let (mut t2, s2) = setup(&h, &p, &c);
        let a = loss(&mut t1, LossKind::McOnly, &s1, &[0], 5.0).unwrap();
        let b = loss(&mut t2, LossKind::V2, &s2, &[0], 0.0).unwrap();
        assert_eq!(t1.value(a).item(), t2.value(b).item());
    }

    #[test]
    fn cost_only_sums_soft_costs() {
        let (mut tape, s) = setup(&[0.5], &[&[0.2, 0.8], &[0.9, 0.1]], &[0.2, 1.0]);
        let l = loss(&mut tape, LossKind::CostOnly, &s, &[0], 123.0).unwrap();
        assert!((tape.value(l).item() - 1.6).abs() < 1e-15);
    }

    #[test]
    fn mismatched_lengths_are_rejected() {
        let mut tape = Tape::<f64>::new();
        let p = tape.constant(Tensor::from_f64(vec![1, 2], &[0.5, 0.5]).unwrap());
        assert!(soft_forward(&mut tape, &[], &[p, p], &[1.0]).is_err());
    }
}
