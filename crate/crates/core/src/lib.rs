pub mod asymptotics;
pub mod balance;
pub mod criterion;
pub mod design;
pub mod error;
pub mod estimation;
pub mod inference;
pub mod linalg;
pub mod rerandomize;
pub mod rng;
pub mod simlab;
pub mod stats;
pub mod truth;

pub use error::{Error, ErrorKind, Result};

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/factorial-effects.md")]
    mod factorial_effects {}
    #[doc = include_str!("../../../book/src/balance-criteria.md")]
    mod balance_criteria {}
    #[doc = include_str!("../../../book/src/rerandomization.md")]
    mod rerandomization {}
    #[doc = include_str!("../../../book/src/asymptotic-law.md")]
    mod asymptotic_law {}
    #[doc = include_str!("../../../book/src/inference.md")]
    mod inference {}
    #[doc = include_str!("../../../book/src/simulation.md")]
    mod simulation {}
    #[doc = include_str!("../../../book/src/command-line.md")]
    mod command_line {}
}
