use std::path::{Path, PathBuf};
use std::process::Command;

fn built_library() -> Option<PathBuf> {
    let exe = std::env::current_exe().ok()?;
    let deps = exe.parent()?;
    [deps, deps.parent()?]
        .iter()
        .map(|d| d.join("libfbm_smp_py.so"))
        .filter(|p| p.is_file())
        .max_by_key(|p| p.metadata().and_then(|m| m.modified()).ok())
}

#[test]
fn python_smoke_test() {
    if Command::new("python3").arg("--version").output().is_err() {
        println!("python3 not found, skipping");
        return;
    }
    let Some(lib) = built_library() else {
        println!("no built libfbm_smp_py.so next to the test binary, skipping");
        return;
    };
    let script = Path::new(env!("CARGO_MANIFEST_DIR")).join("python/smoke_test.py");
    let o = Command::new("python3")
        .arg(script)
        .env("FBM_SMP_PY_LIB", &lib)
        .output()
        .unwrap();
    assert!(
        o.status.success(),
        "{}\n{}",
        String::from_utf8_lossy(&o.stdout),
        String::from_utf8_lossy(&o.stderr)
    );
    assert!(String::from_utf8_lossy(&o.stdout).contains("python smoke test ok"));
}
