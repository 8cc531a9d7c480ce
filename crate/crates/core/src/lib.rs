//! Deterministic desk-scale simulator of balanced modality selection for
//! multi-modal federated learning.
//!
//! The crate is organised bottom-up:
//!
//! * [`numkit`] dense matrices and keyed random streams,
//! * [`model`] the two-encoder concatenation-fusion classifier with manual backprop,
//! * [`balance`] prototypes, the modal-enhancement loss and imbalance ratios,
//! * [`selection`] facility-location objectives and the client/modality selectors,
//! * [`data`] synthetic bimodal data and client partitioning,
//! * [`federation`] the client/server round protocol tying everything together.

// `!(x > 0.0)` is used on purpose so NaN fails validation
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod balance;
pub mod data;
mod error;
pub mod federation;
pub mod model;
pub mod numkit;
pub mod selection;

pub use error::{Error, Result};

/// One of the two input modalities. `A` is the first slot of the fused
/// representation and `I` the second.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Modality {
    A,
    I,
}

impl Modality {
    pub fn other(self) -> Modality {
        match self {
            Modality::A => Modality::I,
            Modality::I => Modality::A,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Modality::A => "A",
            Modality::I => "I",
        }
    }
}

impl std::fmt::Display for Modality {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Which modalities a client holds (or is allowed to train).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ModalityMask {
    pub a: bool,
    pub i: bool,
}

impl ModalityMask {
    pub const BOTH: ModalityMask = ModalityMask { a: true, i: true };

    pub fn only(modality: Modality) -> ModalityMask {
        match modality {
            Modality::A => ModalityMask { a: true, i: false },
            Modality::I => ModalityMask { a: false, i: true },
        }
    }

    pub fn has(&self, modality: Modality) -> bool {
        match modality {
            Modality::A => self.a,
            Modality::I => self.i,
        }
    }

    pub fn is_complete(&self) -> bool {
        self.a && self.i
    }

    /// The single modality held, if exactly one is.
    pub fn single(&self) -> Option<Modality> {
        match (self.a, self.i) {
            (true, false) => Some(Modality::A),
            (false, true) => Some(Modality::I),
            _ => None,
        }
    }
}
