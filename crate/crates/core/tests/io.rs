use nlhom_core::cell::io::{read_dump, write_csv, write_dump};
use nlhom_core::cell::PeriodicField;
use nlhom_core::config::Config;
use nlhom_core::Error;

fn scenarios() -> std::path::PathBuf {
    std::path::PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../scenarios")
}

#[test]
fn dump_file_roundtrip_and_csv_layout() {
    let dir = tempfile::tempdir().unwrap();
    let f = PeriodicField::from_fn(2, 3, |i, k| (i[0] + 2 * i[1] + 4 * i[2]) as f64 + 0.25 * k as f64);
    let path = dir.path().join("v.nlhf");
    write_dump(&path, &f).unwrap();
    assert_eq!(read_dump(&path).unwrap(), f);
    assert_eq!(std::fs::metadata(&path).unwrap().len(), 16 + 8 * 24);

    let mut buf = Vec::new();
    write_csv(&mut buf, &f).unwrap();
    let text = String::from_utf8(buf).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "i1,i2,i3,comp,value");
    assert_eq!(lines.len(), 25);

    std::fs::write(&path, b"NLHF\x02\0\0\0").unwrap();
    assert!(matches!(read_dump(&path), Err(Error::Format(_))));
}

#[test]
fn every_scenario_parses_and_builds() {
    for entry in std::fs::read_dir(scenarios()).unwrap() {
        let path = entry.unwrap().path();
        let cfg = Config::load(&path, &[]).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
        cfg.inputs().unwrap();
        cfg.macro_config().unwrap();
    }
}

#[test]
fn overrides_and_field_paths() {
    let path = scenarios().join("standard.json");
    let cfg = Config::load(&path, &["lattice.n=4".into(), "macro.m=16".into(), "solver.cg_tol=1e-9".into()]).unwrap();
    assert_eq!(cfg.n, 4);
    assert_eq!(cfg.solver.tol, 1e-9);

    let err = Config::load(&path, &["lattice.n=oops".into()]).unwrap_err();
    assert!(err.to_string().contains("lattice.n"), "{err}");

    let text = std::fs::read_to_string(&path)
        .unwrap()
        .replacen("\"bump_quadratic\"", "\"expression\", \"expr\": \"1 + * r\", \"support\": 0.5", 1)
        .replacen("\"radius\": 0.5,\n      \"normalization\"", "\"normalization\"", 1);
    let err = Config::parse(&text).unwrap_err();
    let msg = err.to_string();
    assert!(msg.contains("kernels.rho"), "{msg}");
    assert!(msg.contains('^'), "{msg}");
}
