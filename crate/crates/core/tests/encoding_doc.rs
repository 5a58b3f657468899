use std::path::PathBuf;

use xpnn::isa::encoding_reference;

/// Set `XPNN_BLESS=1` to regenerate the checked-in file.
#[test]
fn encoding_doc_is_current() {
    let path = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../docs/ENCODING.md");
    let want = encoding_reference();
    if std::env::var_os("XPNN_BLESS").is_some() {
        std::fs::write(&path, &want).unwrap();
    }
    let have = std::fs::read_to_string(&path).unwrap_or_default();
    assert!(have == want, "docs/ENCODING.md is stale; rerun with XPNN_BLESS=1");
}
