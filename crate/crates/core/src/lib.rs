//! Cooperative mix-zones with decoy traffic for vehicular pseudonym privacy.
//!
//! The guide in `book/` walks through the pieces; its code blocks run as
//! doc-tests of this crate.

pub mod filter;
pub mod model;
pub mod road;
pub mod mobility;
pub mod rng;
pub mod vpki;
pub mod mixzone;
pub mod scenario;
pub mod sim;
pub mod adversary;
pub mod metrics;
pub mod export;

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/filters.md")]
    mod filters {}
    #[doc = include_str!("../../../book/src/scenarios.md")]
    mod scenarios {}
    #[doc = include_str!("../../../book/src/mixzone.md")]
    mod mixzone {}
    #[doc = include_str!("../../../book/src/adversary.md")]
    mod adversary {}
    #[doc = include_str!("../../../book/src/metrics.md")]
    mod metrics {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
}
