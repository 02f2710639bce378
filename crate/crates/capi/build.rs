use std::env;
use std::path::PathBuf;

fn main() {
    let crate_dir = PathBuf::from(env::var("CARGO_MANIFEST_DIR").expect("manifest dir"));
    let header = crate_dir.join("include").join("wpt.h");
    let config = cbindgen::Config {
        language: cbindgen::Language::C,
        include_guard: Some("WPT_H".into()),
        cpp_compat: true,
        documentation: true,
        usize_is_size_t: true,
        enumeration: cbindgen::EnumConfig { prefix_with_name: true, ..Default::default() },
        ..Default::default()
    };
    match cbindgen::Builder::new().with_crate(&crate_dir).with_config(config).generate() {
        Ok(bindings) => {
            bindings.write_to_file(&header);
        }
        // A stale header beats a broken build while editing.
        Err(err) => println!("cargo:warning=header not regenerated: {err}"),
    }
    println!("cargo:rerun-if-changed=src/lib.rs");
}
