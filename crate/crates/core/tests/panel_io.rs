use mkqr::io::{fit_levels, read_panel, test_levels, write_panel, CsvOptions, CurveTable, KChoice, ReportBundle, RunMeta};
use mkqr::qif::BasisKind;
use mkqr::sim::{generate, Dgp, DgpConfig, ErrorCase};
use mkqr::wi::Method;

#[test]
fn csv_round_trip_preserves_values_and_grouping() {
    for case in [ErrorCase::Cs, ErrorCase::Ar1, ErrorCase::Het] {
        let data = generate(&DgpConfig::new(Dgp::Dgp1, case, vec![-2.0, 2.0], vec![3.0, 6.0], 25, 8)).unwrap();
        let mut buf = Vec::new();
        write_panel(&data, &["z".to_string()], &mut buf).unwrap();
        let back = read_panel(buf.as_slice(), &CsvOptions { z_cols: vec!["z".into()] }).unwrap();
        assert_eq!(back.dropped, 0);
        assert_eq!(back.data.ids(), data.ids());
        for i in 0..data.n_subjects() {
            assert_eq!(back.data.rows(i), data.rows(i));
        }
        for r in 0..data.n_obs() {
            assert!((back.data.x()[r] - data.x()[r]).abs() <= 1e-12);
            assert!((back.data.y()[r] - data.y()[r]).abs() <= 1e-12);
            assert!((back.data.z_row(r)[0] - data.z_row(r)[0]).abs() <= 1e-12);
        }
    }
}

#[test]
fn report_bundle_json_round_trip() {
    let data = generate(&DgpConfig::new(Dgp::Dgp1, ErrorCase::Cs, vec![-2.0], vec![5.0], 20, 2)).unwrap();
    let mut buf = Vec::new();
    write_panel(&data, &["z".to_string()], &mut buf).unwrap();
    let read = read_panel(buf.as_slice(), &CsvOptions { z_cols: vec!["z".into()] }).unwrap();
    let fits = fit_levels(&read.data, &[0.25, 0.5], Method::Wi, BasisKind::Cs, KChoice::Auto { kmax: 2 }).unwrap();
    let tests = test_levels(&read.data, &[0.5], 40, 9, 25).unwrap();
    let b = ReportBundle {
        meta: RunMeta::new("fit", 9, None, &read),
        curves: Some(CurveTable::from_fits(&read.data, &fits)),
        fits,
        tests,
    };
    let json = b.to_json().unwrap();
    let back = ReportBundle::from_json(&json).unwrap();
    assert_eq!(back, b);
    assert_eq!(back.to_json().unwrap(), json);
}

#[test]
fn curve_grid_covers_support() {
    let data = generate(&DgpConfig::new(Dgp::Dgp2, ErrorCase::Cs, vec![0.5], vec![1.0], 20, 3)).unwrap();
    let fits = fit_levels(&data, &[0.5], Method::Wi, BasisKind::Cs, KChoice::Fixed(1)).unwrap();
    let c = CurveTable::from_fits(&data, &fits);
    let (lo, hi) = data.support();
    assert_eq!(c.x.len(), 101);
    assert_eq!((c.x[0], c.x[100]), (lo, hi));
    assert!(c.x.windows(2).all(|w| w[0] < w[1]));
}
