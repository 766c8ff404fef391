use std::path::{Path, PathBuf};
use std::process::Command;

use glfm::cli_io::{cmd_check_id, cmd_simulate, load_dataset, load_fit, write_dataset, NamedDataset, RunConfig};
use glfm::simulation::{gen_replicate, SimConfig};
use glfm::{Error, LinkFamily};
use nalgebra::DMatrix;
use serde_json::Value;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_glfm"))
}

fn schema(name: &str) -> jsonschema::Validator {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("schemas").join(name);
    let value: Value = serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap();
    jsonschema::validator_for(&value).unwrap()
}

fn assert_valid(schema_name: &str, file: &Path) {
    let doc: Value = serde_json::from_str(&std::fs::read_to_string(file).unwrap()).unwrap();
    let v = schema(schema_name);
    let errors: Vec<String> = v.iter_errors(&doc).map(|e| e.to_string()).collect();
    assert!(errors.is_empty(), "{} fails {schema_name}: {errors:?}", file.display());
}

/// 50 subjects × 20 items, two covariates, written to `dir`.
fn fixture(dir: &Path) -> (PathBuf, PathBuf, NamedDataset) {
    let mut sim = SimConfig::preset("smoke").unwrap();
    sim.n = 50;
    sim.q = 20;
    let rep = gen_replicate(&sim, 9).unwrap();
    let named = NamedDataset {
        data: rep.data,
        items: (1..=20).map(|j| format!("item{j}")).collect(),
        covariates: vec!["age".into(), "ses".into()],
    };
    let (r, c) = (dir.join("responses.csv"), dir.join("covariates.csv"));
    write_dataset(&named, &r, Some(&c)).unwrap();
    (r, c, named)
}

fn write(path: &Path, text: &str) -> PathBuf {
    std::fs::write(path, text).unwrap();
    path.to_path_buf()
}

#[test]
fn na_and_empty_cells_become_unobserved() {
    let dir = tempfile::tempdir().unwrap();
    let r = write(&dir.path().join("r.csv"), "a,b\n1,NA\n0,1\n");
    let d = load_dataset(&r, None, None, LinkFamily::logistic()).unwrap();
    assert_eq!(d.data.mask().iter().filter(|m| !**m).count(), 1);
    assert!(!d.data.mask()[(0, 1)]);
    assert_eq!(d.data.p(), 1);
    let r = write(&dir.path().join("r2.csv"), "a,b\n1,\n0,1\n");
    let d = load_dataset(&r, None, None, LinkFamily::logistic()).unwrap();
    assert!(!d.data.mask()[(0, 1)]);
}

#[test]
fn support_violation_names_the_cell() {
    let dir = tempfile::tempdir().unwrap();
    let r = write(&dir.path().join("r.csv"), "a,b\n1,0\n0,2\n");
    match load_dataset(&r, None, None, LinkFamily::logistic()) {
        Err(Error::Domain { row, col, value, .. }) => assert_eq!((row, col, value), (1, 1, 2.0)),
        other => panic!("expected a domain error, got {other:?}"),
    }
}

#[test]
fn parse_errors_carry_line_numbers() {
    let dir = tempfile::tempdir().unwrap();
    let cases = [
        ("ragged.csv", "a,b\n1,0\n0\n", 3),
        ("text.csv", "a,b\n1,0\n0,x\n1,1\n", 3),
        ("emptyrow.csv", "a,b\n1,0\nNA,NA\n", 3),
    ];
    for (name, text, want) in cases {
        let r = write(&dir.path().join(name), text);
        match load_dataset(&r, None, None, LinkFamily::logistic()) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, want, "{name}"),
            other => panic!("{name}: expected a parse error, got {other:?}"),
        }
    }
    let r = write(&dir.path().join("emptycol.csv"), "a,b\n1,NA\n0,NA\n");
    let err = load_dataset(&r, None, None, LinkFamily::logistic()).unwrap_err();
    assert!(err.to_string().contains("'b'"), "{err}");
}

#[test]
fn families_file_assigns_per_item_families() {
    let dir = tempfile::tempdir().unwrap();
    let r = write(&dir.path().join("r.csv"), "a,b,c\n1,0.5,3\n0,-1.2,0\n");
    let f = write(&dir.path().join("f.csv"), "item,family,sigma2\nb,gaussian,2.5\nc,poisson,\n");
    let d = load_dataset(&r, None, Some(&f), LinkFamily::logistic()).unwrap();
    let fams = d.data.families();
    assert_eq!(fams[0], LinkFamily::logistic());
    assert_eq!(fams[1], LinkFamily::gaussian(2.5).unwrap());
    assert_eq!(fams[2], LinkFamily::poisson());
}

#[test]
fn write_then_load_round_trips_exactly() {
    let dir = tempfile::tempdir().unwrap();
    let (r, c, named) = fixture(dir.path());
    let masked = named.data.with_mask(DMatrix::from_fn(50, 20, |i, j| (i * 7 + j) % 6 != 0)).unwrap();
    let named = NamedDataset { data: masked, ..named };
    write_dataset(&named, &r, Some(&c)).unwrap();
    let back = load_dataset(&r, Some(&c), None, LinkFamily::logistic()).unwrap();
    assert_eq!(back, named);
}

#[test]
fn fit_bundle_is_complete_valid_and_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let (r, c, _) = fixture(dir.path());
    let (out1, out2) = (dir.path().join("out1"), dir.path().join("out2"));
    std::fs::create_dir(&out1).unwrap();
    std::fs::create_dir(&out2).unwrap();
    let status = bin()
        .args(["fit", "--k", "2", "--seed", "5", "--threads", "1"])
        .arg("--responses")
        .arg(&r)
        .arg("--covariates")
        .arg(&c)
        .arg("--out")
        .arg(&out1)
        .status()
        .unwrap();
    assert_eq!(status.code(), Some(0));
    for f in ["fit.json", "estimates.json", "inference.csv", "group_tests.csv", "diagnostics.json", "manifest.json"] {
        assert!(out1.join(f).is_file(), "missing {f}");
    }
    assert_valid("estimates.schema.json", &out1.join("estimates.json"));
    assert_valid("diagnostics.schema.json", &out1.join("diagnostics.json"));
    assert_valid("manifest.schema.json", &out1.join("manifest.json"));

    // canonical invariants of the saved fit
    let canon = load_fit(&out1.join("fit.json")).unwrap();
    let n = canon.u_star.nrows() as f64;
    for k in 0..2 {
        assert!((canon.u_star.column(k).sum() / n).abs() < 1e-6);
    }
    let mu = canon.u_star.transpose() * &canon.u_star / n;
    let mg = canon.gamma_star.transpose() * &canon.gamma_star / 20.0;
    assert!(mu[(0, 1)].abs() < 1e-6 * mu[(0, 0)] && mg[(0, 1)].abs() < 1e-6 * mg[(0, 0)]);
    assert!((mu[(0, 0)] - mg[(0, 0)]).abs() < 1e-6 * mg[(0, 0)]);

    // inference table: one row per (item, covariate) with valid names
    let mut rdr = csv::Reader::from_path(out1.join("inference.csv")).unwrap();
    let header: Vec<String> = rdr.headers().unwrap().iter().map(String::from).collect();
    assert_eq!(header, ["item", "covariate", "estimate", "se", "z", "p", "p_bonf", "ci_lo", "ci_hi", "n_observed"]);
    let rows: Vec<csv::StringRecord> = rdr.records().map(|r| r.unwrap()).collect();
    assert_eq!(rows.len(), 40);
    for row in &rows {
        assert!(row[0].starts_with("item"));
        assert!(row[1] == *"age" || row[1] == *"ses");
        let p: f64 = row[5].parse().unwrap();
        let pb: f64 = row[6].parse().unwrap();
        assert!((0.0..=1.0).contains(&p) && pb >= p);
    }

    // re-running from the manifest reproduces every output byte for byte
    let status = bin().arg("fit").arg("--config").arg(out1.join("manifest.json")).arg("--out").arg(&out2).status().unwrap();
    assert_eq!(status.code(), Some(0));
    for f in ["fit.json", "estimates.json", "inference.csv", "group_tests.csv", "diagnostics.json"] {
        assert_eq!(std::fs::read(out1.join(f)).unwrap(), std::fs::read(out2.join(f)).unwrap(), "{f} differs");
    }

    // inference on the saved fit matches the fit bundle
    let out3 = dir.path().join("out3");
    std::fs::create_dir(&out3).unwrap();
    let status = bin()
        .arg("test")
        .arg("--fit")
        .arg(out1.join("fit.json"))
        .arg("--responses")
        .arg(&r)
        .arg("--covariates")
        .arg(&c)
        .arg("--out")
        .arg(&out3)
        .status()
        .unwrap();
    assert_eq!(status.code(), Some(0));
    assert_eq!(std::fs::read(out1.join("inference.csv")).unwrap(), std::fs::read(out3.join("inference.csv")).unwrap());

    // check-id on the saved fit prints one verdict per covariate
    let out = bin().arg("check-id").arg("--fit").arg(out1.join("fit.json")).output().unwrap();
    assert_eq!(out.status.code(), Some(0));
    assert_eq!(String::from_utf8(out.stdout).unwrap().lines().count(), 3);
}

#[test]
fn missing_output_directory_is_a_filesystem_error() {
    let dir = tempfile::tempdir().unwrap();
    let (r, c, _) = fixture(dir.path());
    let out = bin()
        .arg("fit")
        .arg("--responses")
        .arg(&r)
        .arg("--covariates")
        .arg(&c)
        .arg("--out")
        .arg(dir.path().join("nope"))
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("does not exist"));
}

#[test]
fn bad_inputs_exit_with_code_two() {
    let dir = tempfile::tempdir().unwrap();
    let r = write(&dir.path().join("r.csv"), "a,b\n1,0\n0,2\n");
    let out = bin().arg("fit").arg("--responses").arg(&r).arg("--out").arg(dir.path()).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
    let out = bin().args(["fit", "--level", "1.5"]).arg("--responses").arg(&r).arg("--out").arg(dir.path()).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
    let out = bin().args(["simulate", "--preset", "nope"]).arg("--out").arg(dir.path()).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn sparse_item_gives_partial_inference_exit_code() {
    let dir = tempfile::tempdir().unwrap();
    let (_, c, named) = fixture(dir.path());
    // item 20 keeps only three observed cells, too few for its covariance
    let mask = DMatrix::from_fn(50, 20, |i, j| j != 19 || i < 3);
    let named = NamedDataset { data: named.data.with_mask(mask).unwrap(), ..named };
    let r = dir.path().join("sparse.csv");
    write_dataset(&named, &r, None).unwrap();
    let out_dir = dir.path().join("out");
    std::fs::create_dir(&out_dir).unwrap();
    let status = bin()
        .args(["fit", "--k", "1", "--threads", "1"])
        .arg("--responses")
        .arg(&r)
        .arg("--covariates")
        .arg(&c)
        .arg("--out")
        .arg(&out_dir)
        .status()
        .unwrap();
    assert_eq!(status.code(), Some(4));
    let text = std::fs::read_to_string(out_dir.join("inference.csv")).unwrap();
    assert!(text.lines().any(|l| l.starts_with("item20,") && l.contains("NA")));
    let diag: Value = serde_json::from_str(&std::fs::read_to_string(out_dir.join("diagnostics.json")).unwrap()).unwrap();
    assert_eq!(diag["unavailable_items"][0]["item"], "item20");
}

#[test]
fn simulate_emits_json_and_csv_with_seed_echo() {
    let dir = tempfile::tempdir().unwrap();
    let out = bin().args(["simulate", "--preset", "smoke", "--seed", "17", "--threads", "1"]).arg("--out").arg(dir.path()).output().unwrap();
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    assert_valid("study.schema.json", &dir.path().join("study.json"));
    assert_valid("manifest.schema.json", &dir.path().join("manifest.json"));
    let manifest: Value = serde_json::from_str(&std::fs::read_to_string(dir.path().join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["simulation"]["seed"], 17);
    let reps = std::fs::read_to_string(dir.path().join("study_reps.csv")).unwrap();
    assert!(reps.starts_with("rep,type1,power,coverage,converged,iters,seconds"));
    assert_eq!(reps.lines().count(), 5);
}

#[test]
fn null_signal_study_reports_absent_power() {
    let dir = tempfile::tempdir().unwrap();
    let mut sim = SimConfig::preset("smoke").unwrap();
    sim.rho = 0.0;
    sim.n_reps = 2;
    let cfg = RunConfig { simulation: Some(sim), out: Some(dir.path().to_path_buf()), ..RunConfig::default() };
    let (_, report) = cmd_simulate(&cfg).unwrap();
    assert_eq!(report.power_mean, None);
    assert!(report.type1_mean.is_some());
}

#[test]
fn check_id_verdicts_from_loadings_and_coefficients() {
    let dir = tempfile::tempdir().unwrap();
    let mut loadings = String::from("f1\n");
    let mut sparse = String::from("x1,x2\n");
    let mut constant = String::from("x1\n");
    let mut zero = String::from("x1\n");
    for j in 0..20 {
        loadings.push_str(&format!("{}\n", 0.5 + 0.05 * j as f64));
        sparse.push_str(&format!("{},{}\n", if j < 5 { 0.5 } else { 0.0 }, if (5..10).contains(&j) { 0.5 } else { 0.0 }));
        constant.push_str("0.5\n");
        zero.push_str("0\n");
    }
    let l = write(&dir.path().join("l.csv"), &loadings);
    let verdicts = |b: &str, name: &str| {
        let c = write(&dir.path().join(name), b);
        let cfg = RunConfig { loadings: Some(l.clone()), coefficients: Some(c), ..RunConfig::default() };
        cmd_check_id(&cfg).unwrap().into_iter().map(|r| r.verdict).collect::<Vec<_>>()
    };
    assert_eq!(verdicts(&sparse, "s.csv"), ["holds", "holds"]);
    assert_eq!(verdicts(&constant, "c.csv"), ["fails"]);
    assert_eq!(verdicts(&zero, "z.csv"), ["holds"]);
}
