fn main() {
    let crate_dir = std::env::var("CARGO_MANIFEST_DIR").expect("CARGO_MANIFEST_DIR");
    let out = std::path::Path::new(&crate_dir).join("include").join("shiva.h");
    match cbindgen::generate(&crate_dir) {
        Ok(bindings) => {
            bindings.write_to_file(out);
        }
        // Syntax errors surface through rustc anyway; don't fail the build
        // twice with a less readable message.
        Err(cbindgen::Error::ParseSyntaxError { .. }) => {}
        Err(err) => panic!("cbindgen failed: {err}"),
    }
    println!("cargo:rerun-if-changed=src/lib.rs");
    println!("cargo:rerun-if-changed=cbindgen.toml");
}
