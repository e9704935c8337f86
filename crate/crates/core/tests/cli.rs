use std::path::Path;
use std::process::{Command, Output};

use mkqr::io::{write_panel, ReportBundle};
use mkqr::model::QuantileLevel;
use mkqr::qr::{solve_linear_qr, LinearQrProblem};
use mkqr::sim::{generate, progesterone_like, Dgp, DgpConfig, ErrorCase};
use mkqr::wi::linear_design;

fn mkqr(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mkqr")).args(args).output().expect("binary runs")
}

fn write_csv(dir: &Path, name: &str, data: &mkqr::LongitudinalDataset, z: &[&str]) -> String {
    let path = dir.join(name);
    let names: Vec<String> = z.iter().map(|s| s.to_string()).collect();
    write_panel(data, &names, std::fs::File::create(&path).unwrap()).unwrap();
    path.display().to_string()
}

fn bundle(out: &Output) -> ReportBundle {
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    ReportBundle::from_json(&String::from_utf8(out.stdout.clone()).unwrap()).unwrap()
}

#[test]
fn progesterone_shaped_panel_selects_two_kinks_and_rejects() {
    let dir = tempfile::tempdir().unwrap();
    let csv = write_csv(dir.path(), "prog.csv", &progesterone_like(11, 1.0).unwrap(), &["conceptive"]);
    let fit = bundle(&mkqr(&["fit", &csv, "--z-cols", "conceptive", "--tau", "0.5", "--method", "wi"]));
    let block = &fit.fits[0];
    assert_eq!(block.k_hat, 2);
    assert!(block.k_auto);
    assert_eq!(block.sic_table.len(), 4);
    let t = &block.fit.theta.t;
    assert!((t[0] + 0.925).abs() < 1.0 && (t[1] - 5.666).abs() < 1.0, "{t:?}");
    let curves = fit.curves.as_ref().unwrap();
    assert_eq!(curves.x.len(), 101);
    assert_eq!((curves.x[0], curves.x[100]), (-8.0, 15.0));

    let test = bundle(&mkqr(&["test", &csv, "--z-cols", "conceptive", "--B", "500", "--seed", "3"]));
    assert_eq!(test.tests[0].b, 500);
    assert!(test.tests[0].p_value < 0.01);
}

#[test]
fn linear_panel_gives_valid_pvalue() {
    let dir = tempfile::tempdir().unwrap();
    let csv = write_csv(dir.path(), "lin.csv", &progesterone_like(12, 0.0).unwrap(), &["conceptive"]);
    let r = bundle(&mkqr(&["test", &csv, "--z-cols", "conceptive", "--B", "100"]));
    let p = r.tests[0].p_value;
    assert!((0.0..=1.0).contains(&p));
}

#[test]
fn forced_zero_kinks_matches_linear_quantile_regression() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = DgpConfig::new(Dgp::Dgp1, ErrorCase::Cs, vec![-2.0], vec![5.0], 20, 4);
    let data = generate(&cfg).unwrap();
    let csv = write_csv(dir.path(), "d.csv", &data, &["z"]);
    let r = bundle(&mkqr(&["fit", &csv, "--z-cols", "z", "--k", "0"]));
    let (design, d) = linear_design(&data, &[]);
    let lin = solve_linear_qr(&LinearQrProblem::new(design, d, data.y().to_vec(), QuantileLevel::new(0.5).unwrap()).unwrap()).unwrap();
    let est = r.fits[0].fit.theta.to_vec();
    assert_eq!(est.len(), 3);
    for (a, b) in est.iter().zip(&lin.coef) {
        assert!((a - b).abs() < 1e-9, "{a} vs {b}");
    }
    assert!((r.fits[0].fit.objective - lin.objective).abs() < 1e-9);
}

#[test]
fn tau_list_gives_one_block_per_level() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = DgpConfig::new(Dgp::Dgp1, ErrorCase::Cs, vec![-2.0], vec![5.0], 20, 5);
    let csv = write_csv(dir.path(), "d.csv", &generate(&cfg).unwrap(), &["z"]);
    let r = bundle(&mkqr(&["fit", &csv, "--z-cols", "z", "--k", "1", "--tau", "0.1,0.25,0.5,0.75,0.9"]));
    let taus: Vec<f64> = r.fits.iter().map(|f| f.tau).collect();
    assert_eq!(taus, vec![0.1, 0.25, 0.5, 0.75, 0.9]);
    assert!(r.fits.iter().all(|f| f.k_hat == 1 && !f.k_auto));
    assert_eq!(r.curves.unwrap().values.len(), 5);
}

#[test]
fn qif_method_and_output_files() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = DgpConfig::new(Dgp::Dgp1, ErrorCase::Ar1, vec![-2.0], vec![5.0], 40, 6);
    let csv = write_csv(dir.path(), "d.csv", &generate(&cfg).unwrap(), &["z"]);
    let out = dir.path().join("out");
    let o = mkqr(&["select", &csv, "--z-cols", "z", "--method", "qif", "--basis", "AR1-3", "--kmax", "2", "--out", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    for f in ["report.json", "fit.csv", "sic.csv", "curves.csv"] {
        assert!(out.join(f).exists(), "{f}");
    }
    let r = ReportBundle::from_json(&std::fs::read_to_string(out.join("report.json")).unwrap()).unwrap();
    assert_eq!(r.fits[0].basis.as_deref(), Some("AR1-3"));
    assert_eq!(r.fits[0].sic_table.len(), 3);
    let sic = std::fs::read_to_string(out.join("sic.csv")).unwrap();
    assert_eq!(sic.lines().count(), 4);
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.csv");
    std::fs::write(&bad, "subject_id,x,y\na,1,2\na,oops,3\n").unwrap();
    let o = mkqr(&["fit", bad.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("line 3"));

    let good = dir.path().join("good.csv");
    std::fs::write(&good, "subject_id,x,y\na,1,2\na,2,3\nb,3,3\nb,4,5\n").unwrap();
    assert_eq!(mkqr(&["fit", good.to_str().unwrap(), "--tau", "1.2"]).status.code(), Some(3));
    assert_eq!(mkqr(&["fit", "/nonexistent/file.csv"]).status.code(), Some(2));
    assert_eq!(mkqr(&["simulate", "no-such-config"]).status.code(), Some(3));
}

#[test]
fn simulate_writes_tables() {
    let dir = tempfile::tempdir().unwrap();
    let conf = dir.path().join("p.conf");
    std::fs::write(&conf, "study = power\ndgp = DGP1\ncase = CS\nn = 20\nt = 5\ntau = 0.5\nbetas = 0, 0.7\nb = 50\nreps_null = 3\nreps_alt = 3\n").unwrap();
    let out = dir.path().join("sim");
    let o = mkqr(&["simulate", conf.to_str().unwrap(), "--out", out.to_str().unwrap(), "--threads", "1"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let power = std::fs::read_to_string(out.join("power.csv")).unwrap();
    assert!(power.starts_with("tau,beta1,rate"));
    assert_eq!(power.lines().count(), 3);

    std::fs::write(&conf, "study = selection\ndgp = DGP1\ncase = CS\nn = 20\nbeta = -2\nt = 5\nkmax = 1\nreps = 2\n").unwrap();
    assert!(mkqr(&["simulate", conf.to_str().unwrap(), "--out", out.to_str().unwrap()]).status.success());
    let sel = std::fs::read_to_string(out.join("selection.csv")).unwrap();
    assert!(sel.starts_with("K,N,case,tau,estimator,rate,time"));

    std::fs::write(&conf, "study = selection\ndgp = DGP1\ncase = CS\nn = 20\nbeta = -2\nt = 5\nrepz = 2\n").unwrap();
    let o = mkqr(&["simulate", conf.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&o.stderr).contains("repz"));
}
