//! Echocardiogram cine-loop quality scoring.

pub mod dataset;
pub mod error;
pub mod geometry;
pub mod metrics;
pub mod model;
pub mod phantom;
pub mod rubric;

pub use echoqa_nn as nn;
pub use error::{Error, Result};

// the guide's code blocks run as doctests
#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/rubric.md")]
    mod rubric {}
    #[doc = include_str!("../../../book/src/metrics.md")]
    mod metrics {}
    #[doc = include_str!("../../../book/src/phantom.md")]
    mod phantom {}
    #[doc = include_str!("../../../book/src/dataset.md")]
    mod dataset {}
    #[doc = include_str!("../../../book/src/model.md")]
    mod model {}
    #[doc = include_str!("../../../book/src/service.md")]
    mod service {}
    #[doc = include_str!("../../../book/src/acceptance.md")]
    mod acceptance {}
}
