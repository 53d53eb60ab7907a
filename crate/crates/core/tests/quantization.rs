use hconv::num::Fixed;
use hconv::tensor::{dequantize, frac_bits_for, quantize, requantize_acc, Tensor};
use proptest::prelude::*;

fn tensor() -> impl Strategy<Value = Tensor<f64>> {
    (1usize..4, 1usize..6, 1usize..6, 0.01..500.0f64).prop_flat_map(|(c, h, w, amp)| {
        prop::collection::vec(-amp..amp, c * h * w).prop_map(move |d| Tensor::new(c, h, w, d).unwrap())
    })
}

fn round_trip_bound<Q: Fixed>(t: &Tensor<f64>) -> Result<(), TestCaseError> {
    let q = quantize::<Q>(t).unwrap();
    let back = dequantize(&q);
    let max_abs = t.data().iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let limit = Q::max_raw() as f64;
    // no element may saturate when the scale came from the tensor itself
    prop_assert!(max_abs * 2f64.powi(q.frac_bits() as i32) <= limit || q.frac_bits() == 0);
    let half_step = 2f64.powi(-(q.frac_bits() as i32) - 1);
    for (a, b) in t.data().iter().zip(back.data()) {
        if a.abs() * 2f64.powi(q.frac_bits() as i32) <= limit {
            prop_assert!((a - b).abs() <= half_step, "{a} -> {b}, f = {}", q.frac_bits());
        }
    }
    Ok(())
}

proptest! {
    #[test]
    fn fix16_round_trip(t in tensor()) {
        round_trip_bound::<i16>(&t)?;
    }

    #[test]
    fn fix8_round_trip(t in tensor()) {
        round_trip_bound::<i8>(&t)?;
    }

    #[test]
    fn scale_covariance(t in tensor(), k in -4i32..4) {
        // scaling by a power of two shifts the fraction and keeps the raw values
        let q = quantize::<i16>(&t).unwrap();
        let f = q.frac_bits() as i32 - k;
        prop_assume!(f >= 0 && f <= 62);
        let scaled = t.map(|v| v * 2f64.powi(k));
        let qs = quantize::<i16>(&scaled).unwrap();
        prop_assert_eq!(qs.frac_bits() as i32, f);
        prop_assert_eq!(qs.data(), q.data());
    }

    #[test]
    fn frac_bits_is_maximal(max_abs in 1e-6..1e4f64, bits in prop::sample::select(vec![8u32, 16])) {
        let f = frac_bits_for(max_abs, bits) as i32;
        let limit = ((1i64 << (bits - 1)) - 1) as f64;
        prop_assert!(f == 0 || max_abs * 2f64.powi(f) <= limit);
        prop_assert!(f == 62 || max_abs * 2f64.powi(f + 1) > limit);
    }

    #[test]
    fn requantize_matches_the_float_route(acc in prop::collection::vec(-1i64 << 40..1i64 << 40, 1..40), frac in 0u32..40) {
        let (raw, f) = requantize_acc::<i16>(&acc, frac);
        let as_float = Tensor::new(acc.len(), 1, 1, acc.iter().map(|&a| a as f64 * 2f64.powi(-(frac as i32))).collect()).unwrap();
        let want = quantize::<i16>(&as_float).unwrap();
        prop_assert_eq!(f, want.frac_bits());
        prop_assert_eq!(raw, want.data().to_vec());
    }
}

#[test]
fn zero_tensor_uses_the_finest_scale() {
    let t = Tensor::filled(1, 2, 2, 0.0);
    assert_eq!(quantize::<i16>(&t).unwrap().frac_bits(), 15);
    assert_eq!(quantize::<i8>(&t).unwrap().frac_bits(), 7);
}

#[test]
fn non_finite_values_are_rejected() {
    let t = Tensor::new(1, 1, 3, vec![1.0, f64::INFINITY, 0.0]).unwrap();
    assert!(matches!(quantize::<i8>(&t), Err(hconv::Error::NonFinite(1))));
}
