//! A pipeline that turns a research paper bundle into an executable
//! reproduction: metadata extraction, module division, structured
//! scaffolding, function generation, sandboxed testing and repair, all
//! driven through a resumable workbench.

pub mod document;
pub mod extraction;
pub mod fact;
pub mod funcgen;
pub mod gateway;
pub mod prompting;
pub mod repair;
pub mod report;
pub mod sandbox;
pub mod scaffold;
pub mod stage;
pub mod workbench;

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/quickstart.md")]
    mod quickstart {}
    #[doc = include_str!("../../../book/src/bundles.md")]
    mod bundles {}
    #[doc = include_str!("../../../book/src/configuration.md")]
    mod configuration {}
    #[doc = include_str!("../../../book/src/stub-backend.md")]
    mod stub_backend {}
    #[doc = include_str!("../../../book/src/reasoning.md")]
    mod reasoning {}
    #[doc = include_str!("../../../book/src/repair.md")]
    mod repair {}
    #[doc = include_str!("../../../book/src/workbench.md")]
    mod workbench {}
    #[doc = include_str!("../../../book/src/metrics.md")]
    mod metrics {}
}

#[cfg(test)]
pub(crate) mod golden;
#[cfg(test)]
pub(crate) mod testutil;
