use std::path::PathBuf;

/// Compares `actual` with the checked-in file under `tests/golden/`;
/// `PAPYRUS_BLESS=1` rewrites the file instead.
pub(crate) fn assert_golden(rel: &str, actual: &str) {
    let path = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/golden").join(rel);
    if std::env::var_os("PAPYRUS_BLESS").is_some() {
        std::fs::create_dir_all(path.parent().unwrap()).unwrap();
        std::fs::write(&path, actual).unwrap();
        return;
    }
    let expected = std::fs::read_to_string(&path)
        .unwrap_or_else(|e| panic!("golden file {} unreadable ({e}); rerun with PAPYRUS_BLESS=1", path.display()));
    assert_eq!(actual, expected, "output differs from golden file {}", path.display());
}
