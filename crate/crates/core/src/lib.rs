pub mod data;
pub mod error;
pub mod flatloss;
pub mod nets;
pub mod riemann;
pub mod tensor;
pub mod trainer;
pub mod vhp;

pub use error::{Error, Result};

#[cfg(doctest)]
pub mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    pub mod introduction {}
    #[doc = include_str!("../../../book/src/autodiff.md")]
    pub mod autodiff {}
    #[doc = include_str!("../../../book/src/hierarchical-prior.md")]
    pub mod hierarchical_prior {}
    #[doc = include_str!("../../../book/src/flatness.md")]
    pub mod flatness {}
    #[doc = include_str!("../../../book/src/geometry.md")]
    pub mod geometry {}
    #[doc = include_str!("../../../book/src/training.md")]
    pub mod training {}
    #[doc = include_str!("../../../book/src/cli.md")]
    pub mod cli {}
}
