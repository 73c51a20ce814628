use std::path::{Path, PathBuf};
use std::process::Command;

fn library() -> Option<PathBuf> {
    let exe = std::env::current_exe().ok()?;
    let deps = exe.parent()?;
    let names = ["libsegdec_py.so", "libsegdec_py.dylib", "segdec_py.dll"];
    let found = [deps, deps.parent()?]
        .into_iter()
        .flat_map(|dir| names.iter().map(move |n| dir.join(n)))
        .find(|p| p.exists());
    found
}

#[test]
fn python_smoke_test() {
    let Some(lib) = library() else {
        panic!("segdec_py shared library was not built next to the test binary");
    };
    let python = std::env::var("PYTHON").unwrap_or_else(|_| "python3".into());
    if Command::new(&python).arg("--version").output().is_err() {
        eprintln!("skipping: {python} not available");
        return;
    }
    let script = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../python/smoke_test.py");
    let out = Command::new(&python).arg(&script).env("SEGDEC_PY_LIB", &lib).output().unwrap();
    let stdout = String::from_utf8_lossy(&out.stdout);
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(out.status.success(), "python smoke test failed\n{stdout}\n{stderr}");
    assert!(stdout.contains("python smoke tests passed"), "{stdout}");
}
