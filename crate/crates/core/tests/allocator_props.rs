use hconv::allocator::{branch_allocate, interlayer_partition};
use proptest::prelude::*;

fn instance() -> impl Strategy<Value = (Vec<f64>, f64)> {
    (prop::collection::vec(1.0..1e6f64, 1..8), 0.0..600.0f64)
        .prop_map(|(c, extra)| {
            let n = c.len() as f64;
            (c, n + extra)
        })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn allocation_invariants((c, total) in instance()) {
        let plan = branch_allocate(&c, total).unwrap();
        prop_assert_eq!(plan.branches.len(), c.len());
        prop_assert!(plan.units().iter().all(|u| u.is_power_of_two()));
        prop_assert_eq!(plan.units_sum, plan.units().iter().sum::<u64>());
        if !plan.clamped {
            prop_assert!(plan.units_sum as f64 <= plan.ideal_sum + 1e-9);
        }
        // each doubling adds at least one unit, so the loop is bounded by the budget
        prop_assert!(plan.iterations as f64 <= total);
        prop_assert_eq!(branch_allocate(&c, total).unwrap(), plan.clone());
        for i in 0..c.len() {
            for j in 0..c.len() {
                if c[i] >= c[j] {
                    let (fi, fj) = (plan.branches[i].ideal.max(1.0), plan.branches[j].ideal.max(1.0));
                    prop_assert!(fi.log2().floor() >= fj.log2().floor());
                }
            }
        }
    }

    #[test]
    fn no_doubling_fits_after_termination((c, total) in instance()) {
        let plan = branch_allocate(&c, total).unwrap();
        if !plan.clamped {
            for b in &plan.branches {
                prop_assert!((plan.units_sum + b.units) as f64 > plan.ideal_sum - 1e-9);
            }
        }
    }

    #[test]
    fn interlayer_shares_are_scale_free(c in prop::collection::vec(1e-3..1e6f64, 1..10), total in 1.0..1e4f64, k in 1e-3..1e3f64) {
        let a = interlayer_partition(&c, total).unwrap();
        let scaled: Vec<f64> = c.iter().map(|v| v * k).collect();
        let b = interlayer_partition(&scaled, total).unwrap();
        prop_assert!((a.iter().sum::<f64>() - total).abs() < 1e-9 * total);
        for (x, y) in a.iter().zip(&b) {
            prop_assert!((x - y).abs() <= 1e-9 * total);
        }
    }
}
