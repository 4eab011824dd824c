use mfdg::flow::{solve_flow, ControlDistribution, FlowSettings, RelaxedControl};
use mfdg::game::ControlGrid;
use mfdg::ot::w2;
use mfdg::scenario::Scenario;
use mfdg::{wasserstein2, Atom, DiscreteMeasure, GroundMetric, Side, TorusPoint};
use proptest::prelude::*;

fn cloud(pts: &[(f64, f64)]) -> DiscreteMeasure {
    DiscreteMeasure::normalized(pts.iter().map(|&(x, w)| Atom::state(TorusPoint::scalar(x), w)).collect()).unwrap()
}

fn arb_cloud() -> impl Strategy<Value = DiscreteMeasure> {
    prop::collection::vec((0.0..1.0f64, 0.05..1.0f64), 1..=7).prop_map(|v| cloud(&v))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(300))]

    #[test]
    fn w2_is_a_metric(a in arb_cloud(), b in arb_cloud(), c in arb_cloud()) {
        let g = GroundMetric::default();
        let ab = w2(&a, &b, &g).unwrap();
        let ba = w2(&b, &a, &g).unwrap();
        let bc = w2(&b, &c, &g).unwrap();
        let ac = w2(&a, &c, &g).unwrap();
        prop_assert!((ab - ba).abs() < 1e-9);
        prop_assert!(w2(&a, &a, &g).unwrap() < 1e-9);
        prop_assert!(ac <= ab + bc + 1e-9);
        prop_assert!(ab <= 0.5 + 1e-12);
    }

    #[test]
    fn plans_have_requested_marginals(
        a in prop::collection::vec((0.0..1.0f64, 0usize..3, 0.05..1.0f64), 1..=8),
        b in prop::collection::vec((0.0..1.0f64, 0usize..3, 0.05..1.0f64), 1..=8),
    ) {
        let mk = |v: &[(f64, usize, f64)]| DiscreteMeasure::normalized(
            v.iter().map(|&(x, u, w)| Atom::with_control(TorusPoint::scalar(x), u, w)).collect(),
        ).unwrap();
        let (a, b) = (mk(&a), mk(&b));
        let g = GroundMetric::with_control_metric(vec![vec![0.0, 0.3, 0.5], vec![0.3, 0.0, 0.4], vec![0.5, 0.4, 0.0]]);
        let (d, plan) = wasserstein2(&a, &b, &g).unwrap();
        prop_assert!(plan.marginal_error(&a, &b) < 1e-10);
        let cost: f64 = plan.entries.iter().map(|&(i, j, w)| w * g.dist_sq(&a.atoms()[i], &b.atoms()[j])).sum();
        prop_assert!((cost.sqrt() - d).abs() < 1e-9);
    }

    #[test]
    fn paired_flows_obey_gronwall(
        xs in prop::collection::vec(0.0..1.0f64, 4),
        shift in prop::collection::vec(-0.05..0.05f64, 4),
        us in prop::collection::vec(0usize..2, 4),
        vs in prop::collection::vec(0usize..2, 4),
    ) {
        let sc = Scenario::fixture("mean_field_attraction").unwrap();
        let spec = &sc.spec;
        let horizon = 0.5;
        let settings = FlowSettings { dt: 5e-3, ..FlowSettings::default() };
        let run = |pts: &[f64]| {
            let m = DiscreteMeasure::uniform(pts.iter().map(|&x| TorusPoint::scalar(x)).collect()).unwrap();
            let alpha = DiscreteMeasure::new(
                m.atoms().iter().zip(&us).map(|(a, &u)| Atom::with_control(a.point.clone(), u, a.weight)).collect(),
            ).unwrap();
            let kappa = ControlDistribution::complete(spec, Side::First, &alpha, 0.0, horizon, |i, _| {
                vec![(RelaxedControl::constant(vs[i], spec.v_grid.len(), 0.0, horizon), 1.0)]
            }).unwrap();
            solve_flow(spec, 0.0, horizon, &m, &kappa, Side::First, &settings).unwrap().terminal()
        };
        let ys: Vec<f64> = xs.iter().zip(&shift).map(|(x, s)| (x + s).rem_euclid(1.0)).collect();
        let (mx, my) = (run(&xs), run(&ys));
        let paired = |a: &DiscreteMeasure, b: &DiscreteMeasure| a.paired_cost(b).sqrt();
        let start = shift.iter().map(|s| s * s).sum::<f64>().sqrt() / 2.0;
        let bound = (2.0 * spec.lipschitz * horizon).exp() * start;
        prop_assert!(paired(&mx, &my) <= bound + 1e-9, "{} > {}", paired(&mx, &my), bound);
    }
}

#[test]
fn control_grid_distance_is_euclidean() {
    let g = ControlGrid(vec![vec![0.0, 0.0], vec![3.0, 4.0]]);
    assert_eq!(g.base_distance(0, 1), 5.0);
}
