use pcsa_core::losses::{mae, ms_ssim, psnr, ssim, MetricReport, PairMetrics, SsimConfig};
use pcsa_core::oracle;
use pcsa_core::tensor::{Shape, Volume};
use proptest::prelude::*;

fn volume(edge: usize, values: &[f32]) -> Volume {
    let s = Shape::cube(1, 1, edge).unwrap();
    Volume::from_vec(s, values.iter().cycle().take(s.numel()).cloned().collect()).unwrap()
}

fn unit_values() -> impl Strategy<Value = Vec<f32>> {
    prop::collection::vec(0.0f32..1.0, 64..256)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn ssim_is_symmetric_bounded_and_one_on_the_diagonal(a in unit_values(), b in unit_values(), edge in 8usize..14) {
        let (x, y) = (volume(edge, &a), volume(edge, &b));
        let cfg = SsimConfig::single_scale();
        let xy = ssim(&x, &y, &cfg).unwrap();
        let yx = ssim(&y, &x, &cfg).unwrap();
        prop_assert!((xy - yx).abs() < 1e-12);
        prop_assert!((-1.0..=1.0).contains(&xy));
        prop_assert_eq!(ssim(&x, &x, &cfg).unwrap(), 1.0);
    }

    #[test]
    fn ms_ssim_identity_is_exact(a in unit_values(), edge in 8usize..20) {
        let x = volume(edge, &a);
        prop_assert_eq!(ms_ssim(&x, &x, &SsimConfig::default()).unwrap(), 1.0);
    }

    #[test]
    fn tape_metrics_agree_with_the_definitional_oracle(a in unit_values(), b in unit_values(), edge in 8usize..16) {
        let (x, y) = (volume(edge, &a), volume(edge, &b));
        let (xd, yd) = (x.cast::<f64>(), y.cast::<f64>());
        let cfg = SsimConfig::default();
        prop_assert!((ms_ssim(&x, &y, &cfg).unwrap() - oracle::ms_ssim(&xd, &yd, &cfg).unwrap()).abs() <= 1e-6);
        let single = SsimConfig::single_scale();
        prop_assert!((ssim(&x, &y, &single).unwrap() - oracle::ssim(&xd, &yd, &single).unwrap()).abs() <= 1e-6);
        prop_assert!((mae(&x, &y).unwrap() - oracle::mae(&xd, &yd)).abs() <= 1e-7);
    }

    #[test]
    fn mae_and_psnr_are_symmetric_and_consistent(a in unit_values(), b in unit_values()) {
        let (x, y) = (volume(8, &a), volume(8, &b));
        let m = mae(&x, &y).unwrap();
        prop_assert!(m >= 0.0 && m == mae(&y, &x).unwrap());
        prop_assert_eq!(psnr(&x, &x, 1.0).unwrap(), f64::INFINITY);
        let p = psnr(&x, &y, 1.0).unwrap();
        // Mean squared error never exceeds mean absolute error on [0, 1].
        prop_assert!(p >= -10.0 * m.log10() - 1e-9 || m == 0.0);
    }
}

fn row(id: &str, psnr_db: f64) -> PairMetrics {
    PairMetrics { pair_id: id.into(), mae: 0.1, psnr_db, ssim: 0.5 }
}

#[test]
fn report_aggregates_infinite_psnr() {
    let all = MetricReport::from_pairs(vec![row("a", f64::INFINITY), row("b", f64::INFINITY)]).unwrap();
    assert_eq!((all.mean.psnr_db, all.std.psnr_db), (f64::INFINITY, 0.0));
    let some = MetricReport::from_pairs(vec![row("a", 20.0), row("b", f64::INFINITY)]).unwrap();
    assert_eq!((some.mean.psnr_db, some.std.psnr_db), (f64::INFINITY, f64::INFINITY));
    let none = MetricReport::from_pairs(vec![row("a", 20.0), row("b", 30.0)]).unwrap();
    assert_eq!(none.mean.psnr_db, 25.0);
    assert!((none.std.psnr_db - 50f64.sqrt()).abs() < 1e-12);
}

#[test]
fn report_csv_round_trips() {
    let r = MetricReport::from_pairs(vec![row("1000", 31.25), row("1001", f64::INFINITY)]).unwrap();
    let mut buf = Vec::new();
    r.write_csv(&mut buf).unwrap();
    let text = String::from_utf8(buf.clone()).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "pair_id,mae,psnr_db,ssim");
    assert_eq!(lines[2], "1001,0.1,inf,0.5");
    assert_eq!(lines[3], "mean,0.1,inf,0.5");
    assert_eq!(lines.len(), 5);
    assert_eq!(MetricReport::read_csv(&buf[..]).unwrap(), r);
}
