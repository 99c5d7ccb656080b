use std::path::{Path, PathBuf};
use std::process::Command;

fn static_lib() -> PathBuf {
    let exe = std::env::current_exe().unwrap();
    let deps = exe.parent().unwrap();
    [deps, deps.parent().unwrap()]
        .iter()
        .map(|d| d.join("libmdrnet_ffi.a"))
        .find(|p| p.exists())
        .expect("libmdrnet_ffi.a next to the test binary")
}

#[test]
fn header_declares_the_api() {
    let h = std::fs::read_to_string(Path::new(env!("CARGO_MANIFEST_DIR")).join("include/mdrnet.h")).unwrap();
    for name in [
        "typedef struct MdrTensor MdrTensor",
        "MDR_STATUS_OK = 0",
        "MDR_REDUCTION_SDR_SOFTMAX = 6",
        "mdr_last_error(void)",
        "mdr_tensor_new(",
        "mdr_tensor_load(",
        "mdr_voxelize_file(",
        "mdr_reduce(",
        "mdr_map_copy(",
        "mdr_model_build(",
        "mdr_model_forward(",
        "mdr_model_save(",
    ] {
        assert!(h.contains(name), "header lacks {name}");
    }
}

#[test]
fn c_program_links_against_static_library() {
    let lib = static_lib();
    let dir = tempfile::tempdir().unwrap();
    let exe = dir.path().join("smoke");
    let manifest = Path::new(env!("CARGO_MANIFEST_DIR"));
    let cc = std::env::var("CC").unwrap_or_else(|_| "cc".into());
    let build = Command::new(cc)
        .arg("-std=c99")
        .arg("-Wall")
        .arg("-Werror")
        .arg("-I")
        .arg(manifest.join("include"))
        .arg(manifest.join("tests/c/smoke.c"))
        .arg(&lib)
        .args(["-lpthread", "-ldl", "-lm", "-o"])
        .arg(&exe)
        .output()
        .expect("C compiler runs");
    assert!(build.status.success(), "{}", String::from_utf8_lossy(&build.stderr));
    let run = Command::new(&exe).output().unwrap();
    assert!(run.status.success(), "exit {:?}: {}", run.status.code(), String::from_utf8_lossy(&run.stderr));
    assert!(String::from_utf8_lossy(&run.stdout).contains("mean 2 4 vacant 0 0"));
}
