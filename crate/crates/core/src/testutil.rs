use std::path::PathBuf;
use std::sync::Arc;

use serde_json::Value;

use crate::document::{load_bundle, PaperBundle};
use crate::gateway::{BackendProfile, Gateway, LogicalClock, Session};
use crate::prompting::PromptKit;

pub(crate) fn fixture_bundle() -> PaperBundle {
    load_bundle(PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/flowsplit")).unwrap()
}

/// A session answering from `script` (a JSON array of stub entries).
pub(crate) struct StubHarness {
    _dir: tempfile::TempDir,
    pub gateway: Gateway,
    pub profile: BackendProfile,
    pub kit: PromptKit,
}

impl StubHarness {
    pub fn new(script: Value) -> StubHarness {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("script.json");
        std::fs::write(&path, serde_json::to_string_pretty(&script).unwrap()).unwrap();
        StubHarness {
            gateway: Gateway::new(Arc::new(LogicalClock::default())),
            profile: BackendProfile::stub("stub", &path, 200_000, 8_192),
            kit: PromptKit::builtin("python"),
            _dir: dir,
        }
    }

    pub fn session(&mut self, stage: &str) -> Session {
        self.gateway.open_session(&self.profile, stage).unwrap()
    }
}
