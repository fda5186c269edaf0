use std::path::Path;
use std::process::Command;

#[test]
fn header_compiles_as_c() {
    let include = Path::new(env!("CARGO_MANIFEST_DIR")).join("include");
    let header = include.join("fftat.h");
    assert!(header.exists(), "build script writes the header");
    let text = std::fs::read_to_string(&header).unwrap();
    for f in [
        "fftat_model_load",
        "fftat_model_predict",
        "fftat_last_error_message",
        "FFTAT_STATUS_OK",
    ] {
        assert!(text.contains(f), "{f} missing from header");
    }
    let dir = tempfile::tempdir().unwrap();
    let src = dir.path().join("use.c");
    std::fs::write(
        &src,
        "#include \"fftat.h\"\nint main(void) { FftatModelHandle *m = 0; return fftat_model_new(32, 4, 0, &m) == FFTAT_STATUS_OK ? 0 : 1; }\n",
    )
    .unwrap();
    match Command::new("cc")
        .arg("-fsyntax-only")
        .arg("-Wall")
        .arg("-Werror")
        .arg("-I")
        .arg(&include)
        .arg(&src)
        .status()
    {
        Ok(s) => assert!(s.success(), "cc rejected the header"),
        Err(_) => eprintln!("no C compiler; syntax check skipped"),
    }
}
