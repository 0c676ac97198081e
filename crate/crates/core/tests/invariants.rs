use proptest::prelude::*;

use wittenlab::correlation::covariance_hs;
use wittenlab::grid::{build_grid, inner_product, OneFormField, ScalarField};
use wittenlab::lattice::chain;
use wittenlab::potential::{kac_potential, Observable};
use wittenlab::witten::{SolverConfig, WittenOperator};

fn interior(op: &WittenOperator, raw: &[f64]) -> Vec<f64> {
    let g = op.grid();
    let np = g.total_points();
    raw.iter()
        .enumerate()
        .map(|(k, v)| if g.is_interior(k % np) { *v } else { 0.0 })
        .collect()
}

fn operator(nu: f64, m: usize) -> WittenOperator {
    let l = chain(2).unwrap();
    let g = build_grid(&l, 6.0, m).unwrap();
    WittenOperator::new(&kac_potential(&l, nu).unwrap(), &g).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn witten_forms_are_symmetric_and_nonnegative(
        nu in 0.0f64..0.2,
        a in prop::collection::vec(-1.0f64..1.0, 2 * 15 * 15),
        b in prop::collection::vec(-1.0f64..1.0, 2 * 15 * 15),
    ) {
        let op = operator(nu, 15);
        let np = op.grid().total_points();
        let (a, b) = (interior(&op, &a), interior(&op, &b));
        let u = ScalarField::from_values(op.grid(), a[..np].to_vec()).unwrap();
        let w = ScalarField::from_values(op.grid(), b[..np].to_vec()).unwrap();
        let x = inner_product(&op.apply_w0(&u).unwrap(), &w).unwrap();
        let y = inner_product(&u, &op.apply_w0(&w).unwrap()).unwrap();
        prop_assert!((x - y).abs() <= 1e-10 * x.abs().max(y.abs()).max(1.0));
        let uu = inner_product(&u, &u).unwrap();
        prop_assert!(inner_product(&op.apply_w0(&u).unwrap(), &u).unwrap() >= -1e-10 * uu);

        let va = OneFormField::from_flat(op.grid(), a).unwrap();
        let vb = OneFormField::from_flat(op.grid(), b).unwrap();
        let x = inner_product(&op.apply_w1(&va).unwrap(), &vb).unwrap();
        let y = inner_product(&va, &op.apply_w1(&vb).unwrap()).unwrap();
        prop_assert!((x - y).abs() <= 1e-10 * x.abs().max(y.abs()).max(1.0));
        let q = inner_product(&op.apply_w1(&va).unwrap(), &va).unwrap();
        let n2 = inner_product(&va, &va).unwrap();
        prop_assert!(q >= (op.convexity_margin() - 1e-8) * n2, "q={q} margin={} n2={n2}", op.convexity_margin());
    }

    #[test]
    fn kac_hessian_is_symmetric_and_matches_gradient(
        nu in 0.0f64..0.45,
        x in prop::collection::vec(-4.0f64..4.0, 3),
    ) {
        let l = chain(3).unwrap();
        let model = kac_potential(&l, nu).unwrap();
        let h = model.hessian(&x);
        prop_assert!((&h - h.transpose()).amax() < 1e-12);
        let step = 1e-5;
        for j in 0..3 {
            let (mut xp, mut xm) = (x.clone(), x.clone());
            xp[j] += step;
            xm[j] -= step;
            let (mut gp, mut gm) = (vec![0.0; 3], vec![0.0; 3]);
            model.gradient_into(&xp, &mut gp);
            model.gradient_into(&xm, &mut gm);
            for i in 0..3 {
                let fd = (gp[i] - gm[i]) / (2.0 * step);
                prop_assert!((fd - h[(i, j)]).abs() <= 1e-5 * h[(i, j)].abs().max(1.0));
            }
        }
    }

    #[test]
    fn covariance_is_symmetric(nu in 0.0f64..0.2, i in 0usize..2, j in 0usize..2) {
        let op = operator(nu, 17);
        let l = op.model().lattice();
        let cfg = SolverConfig::with_tolerance(1e-11);
        let (gi, gj) = (Observable::coordinate(l, i).unwrap(), Observable::coordinate(l, j).unwrap());
        let c1 = covariance_hs(&op, &gi, &gj, &cfg).unwrap().value;
        let c2 = covariance_hs(&op, &gj, &gi, &cfg).unwrap().value;
        prop_assert!((c1 - c2).abs() <= 1e-8 * c1.abs().max(1e-3));
        if i == j {
            prop_assert!(c1 > 0.0);
        }
    }
}
