//! Stateless cryptographic building blocks.
//!
//! Nothing in here is constant-time. The primitives exist so the protocol
//! layers above have deterministic, inspectable behaviour at simulator scale.

mod ec;
mod rail_fence;
mod symmetric;
pub mod vectors;

pub use ec::{ec_point_add, ec_scalar_mul, CurveParams, CurvePoint};
pub use rail_fence::{rail_fence_decode, rail_fence_encode, RailFenceParams};
pub use symmetric::{kdf, keystream, mac_tag, sha256, tags_equal, SymmetricKey, KEY_LEN, TAG_LEN};

use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum CryptoError {
    #[error("rail fence parameters invalid: rails={rails}, offset={offset}")]
    InvalidRailFence { rails: usize, offset: usize },
    #[error("point is not on the curve")]
    OffCurve,
    #[error("curve parameters invalid: {0}")]
    InvalidCurve(&'static str),
    #[error("malformed point encoding")]
    BadPointEncoding,
}
