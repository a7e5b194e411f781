use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn configs() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

fn retro(args: &[&str], config: &Path, out: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_retro"))
        .args(args)
        .arg("--config")
        .arg(config)
        .arg("--output")
        .arg(out)
        .env("RETRO_THREADS", "1")
        .output()
        .unwrap()
}

fn report(dir: &Path, cmd: &str) -> serde_json::Value {
    serde_json::from_slice(&std::fs::read(dir.join(format!("{cmd}_report.json"))).unwrap()).unwrap()
}

fn write(dir: &Path, name: &str, text: &str) -> PathBuf {
    let p = dir.join(name);
    std::fs::write(&p, text).unwrap();
    p
}

#[test]
fn heat_ou_verify_exits_zero() {
    let tmp = tempfile::tempdir().unwrap();
    let out = retro(&["ou-verify"], &configs().join("heat_ou_verify.ini"), tmp.path());
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let rep = report(tmp.path(), "ou-verify");
    assert_eq!(rep["pass"], true);
    assert!(rep["details"]["triangle_max_error"].as_f64().unwrap() < 1e-6);
}

#[test]
fn missing_seed_is_a_config_error() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write(tmp.path(), "c.ini", "[experiment]\noutput = x\n[model]\nfamily = heat\n[grid]\nhorizon = 1\n");
    let out = retro(&["ou-verify"], &cfg, &tmp.path().join("o"));
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("seed"));
    assert!(!tmp.path().join("o").exists());
}

#[test]
fn mismatched_terminal_law_fails_representation() {
    let tmp = tempfile::tempdir().unwrap();
    let text = std::fs::read_to_string(configs().join("heat_reverse.ini"))
        .unwrap()
        .replace("kind = forward", "kind = gaussian\nmean = 1\ncovariance = 2")
        .replace("particles = 20000", "particles = 5000");
    let cfg = write(tmp.path(), "c.ini", &text);
    let out = retro(&["reverse"], &cfg, &tmp.path().join("o"));
    assert_eq!(out.status.code(), Some(1), "{}", String::from_utf8_lossy(&out.stderr));
    let rep = report(&tmp.path().join("o"), "reverse");
    assert_eq!(rep["failed"][0], "representation");
    assert!(tmp.path().join("o/reverse_diagnostics.csv").exists());
}

#[test]
fn reruns_are_byte_identical_and_need_force() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = configs().join("rotation_invert.ini");
    let dir = tmp.path().join("o");
    assert_eq!(retro(&["invert"], &cfg, &dir).status.code(), Some(0));
    let first = std::fs::read(dir.join("invert_report.json")).unwrap();
    let refused = retro(&["invert"], &cfg, &dir);
    assert_eq!(refused.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&refused.stderr).contains("--force"));
    assert_eq!(retro(&["invert", "--force"], &cfg, &dir).status.code(), Some(0));
    assert_eq!(first, std::fs::read(dir.join("invert_report.json")).unwrap());
}

#[test]
fn forward_snapshots_feed_the_mc_route() {
    let tmp = tempfile::tempdir().unwrap();
    let fwd = write(
        tmp.path(),
        "f.ini",
        "[experiment]\nseed = 5\nparticles = 4000\n[model]\nfamily = ou\nc = -0.5\nsigma = 0.3\n\
         [grid]\nhorizon = 1\nsteps = 200\n[initial]\nkind = dirac\npoints = 0.8\n[thresholds]\nforward_ks = 0.05\n",
    );
    let dir = tmp.path().join("o");
    let out = retro(&["forward"], &fwd, &dir);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let data = dir.join("forward_snapshots.csv");
    let inv = write(
        tmp.path(),
        "i.ini",
        &format!(
            "[experiment]\nseed = 5\n[model]\nfamily = ou\nc = -0.5\nsigma = 0.3\n[grid]\nhorizon = 1\nsteps = 200\n\
             [invert]\nroute = affine-mc\ndata = {}\nexpected = 0.8\n",
            data.display()
        ),
    );
    let out = retro(&["invert"], &inv, &dir);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let est = report(&dir, "invert")["details"]["estimate"][0].as_f64().unwrap();
    assert!((est - 0.8).abs() < 0.05, "{est}");
}

#[test]
fn unreachable_terminal_law_exits_nonzero() {
    let tmp = tempfile::tempdir().unwrap();
    let text = std::fs::read_to_string(configs().join("heat_nonexistence.ini"))
        .unwrap()
        .replace("particles = 20000", "particles = 5000");
    let cfg = write(tmp.path(), "c.ini", &text);
    let out = retro(&["reverse"], &cfg, &tmp.path().join("o"));
    assert_eq!(out.status.code(), Some(1), "{}", String::from_utf8_lossy(&out.stderr));
    let rep = report(&tmp.path().join("o"), "reverse");
    assert!(rep["details"]["representation"]["max_statistic"].as_f64().unwrap() > 0.1);
}
