use candle_core::{DType, Device, Tensor};
use crossview_heat_model::loss::{focal_loss, one_hot, softmax_cross_entropy};
use proptest::prelude::*;

fn logits(v: &[f64]) -> Tensor {
    Tensor::from_vec(v.to_vec(), (1, v.len()), &Device::Cpu).unwrap()
}

fn target(class: usize, c: usize) -> Tensor {
    one_hot(&[class], c, DType::F64, &Device::Cpu).unwrap()
}

fn val(t: Tensor) -> f64 {
    t.to_scalar::<f64>().unwrap()
}

#[test]
fn saturated_correct_class() {
    let l = val(softmax_cross_entropy(&logits(&[100.0, 0.0, 0.0]), &target(0, 3)).unwrap());
    assert!((0.0..1e-10).contains(&l));
}

#[test]
fn uniform_logits_give_log_c() {
    let l = val(softmax_cross_entropy(&logits(&[0.7; 4]), &target(3, 4)).unwrap());
    assert!((l - 4f64.ln()).abs() < 1e-9);
    assert!((l - 1.386294).abs() < 1e-6);
}

#[test]
fn focal_vanishes_faster_than_ce() {
    let mut last = f64::INFINITY;
    for margin in [2.0, 4.0, 8.0, 12.0] {
        let z = logits(&[margin, 0.0, 0.0]);
        let y = target(0, 3);
        let ce = val(softmax_cross_entropy(&z, &y).unwrap());
        let fl = val(focal_loss(&z, &y, 2.0, None).unwrap());
        let ratio = fl / ce;
        assert!(ratio < last);
        last = ratio;
    }
    assert!(last < 1e-8);
}

proptest! {
    #[test]
    fn cross_entropy_is_shift_invariant(
        z in prop::collection::vec(-20.0f64..20.0, 2..8),
        shift in -50.0f64..50.0,
        class in 0usize..8,
    ) {
        let c = z.len();
        let y = target(class % c, c);
        let shifted: Vec<f64> = z.iter().map(|v| v + shift).collect();
        let a = val(softmax_cross_entropy(&logits(&z), &y).unwrap());
        let b = val(softmax_cross_entropy(&logits(&shifted), &y).unwrap());
        prop_assert!(a >= 0.0);
        prop_assert!((a - b).abs() < 1e-6);
    }

    #[test]
    fn focal_is_ce_scaled_by_modulating_factor(
        z in prop::collection::vec(-10.0f64..10.0, 2..8),
        class in 0usize..8,
        gamma in 0.0f64..4.0,
    ) {
        let c = z.len();
        let k = class % c;
        let y = target(k, c);
        let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let zsum: f64 = z.iter().map(|v| (v - m).exp()).sum();
        let p = (z[k] - m).exp() / zsum;
        let ce = val(softmax_cross_entropy(&logits(&z), &y).unwrap());
        let fl = val(focal_loss(&logits(&z), &y, gamma, None).unwrap());
        prop_assert!((fl - ce * (1.0 - p).powf(gamma)).abs() < 1e-9 * ce.max(1.0));
    }
}
