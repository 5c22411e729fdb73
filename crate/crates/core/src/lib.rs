// SPDX-License-Identifier: MIT OR Apache-2.0

pub mod edit;
pub mod error;
pub mod harness;
pub mod hook;
pub mod mmdit;
pub mod numerics;
pub mod ops;
pub mod router;
pub mod text;

pub use error::{Error, Result};
