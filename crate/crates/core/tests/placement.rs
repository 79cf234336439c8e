mod common;

use common::brute_force_snap;
use eenet::cost::{boundary_fractions, Convention};
use eenet::graph::{build_model, ExitKind, Model, ResNetTopology};
use eenet::placement::{snap, targets, PlacementPolicy, Strategy};
use proptest::prelude::*;

const STRATEGIES: [Strategy; 5] = [
    Strategy::Pareto,
    Strategy::GoldenRatio,
    Strategy::Fine,
    Strategy::Linear,
    Strategy::Quadratic,
];

fn fractions(topology: &ResNetTopology, convention: Convention) -> Vec<f64> {
    let model: Model<f32> = build_model(topology, &[], ExitKind::Pool, 10, 0).unwrap();
    boundary_fractions(&model, convention)
}

#[test]
fn snap_is_optimal_on_real_networks() {
    let nets = [
        ResNetTopology::eenet8(),
        ResNetTopology::six_n_plus_two(20, [3, 32, 32]).unwrap(),
    ];
    for net in &nets {
        for convention in [Convention::Mac, Convention::Flop] {
            let f = fractions(net, convention);
            assert!(f.len() <= 9);
            for s in STRATEGIES {
                for n in 1..=f.len() {
                    let t = targets(&PlacementPolicy::new(s, n)).unwrap();
                    let (oracle, _) = brute_force_snap(&t, &f);
                    assert_eq!(
                        snap(&t, &f).unwrap().boundaries,
                        oracle,
                        "{s:?} n={n} on {:?}",
                        net.family
                    );
                }
            }
        }
    }
}

#[test]
fn quadratic_pair_lands_on_the_first_two_eenet8_boundaries() {
    let f = fractions(&ResNetTopology::eenet8(), Convention::Mac);
    let t = targets(&PlacementPolicy::new(Strategy::Quadratic, 2)).unwrap();
    assert_eq!(snap(&t, &f).unwrap().boundaries, vec![0, 1]);
}

proptest! {
    #[test]
    fn snap_matches_exhaustive_search(
        raw in prop::collection::vec(0.001f64..0.999, 1..=9),
        picks in prop::collection::vec(0.0f64..1.0, 1..=9),
    ) {
        let mut f = raw;
        f.sort_by(f64::total_cmp);
        let mut t = picks;
        t.truncate(f.len());
        t.sort_by(f64::total_cmp);
        let got = snap(&t, &f).unwrap();
        let (oracle, best) = brute_force_snap(&t, &f);
        let cost: f64 = got.realized.iter().zip(&t).map(|(r, t)| (r - t).abs()).sum();
        prop_assert!((cost - best).abs() < 1e-12);
        // Exact ties between different subsets are measure-zero here.
        prop_assert_eq!(got.boundaries, oracle);
    }
}
