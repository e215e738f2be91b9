// SPDX-License-Identifier: Apache-2.0

//! Trusted side of the BarbiE key manager.
//!
//! * [`enclave`] simulates measurement, reports, quotes and sealing.
//! * [`attestation`] holds the remote and mutual attestation state machines
//!   and their wire messages.
//! * [`kms`] is the trusted core: KEK lifecycle, project policies and secret
//!   re-encryption between session keys and the KEK.
//! * [`store`] is the file-backed record store shared by server instances.
//! * [`wire`] defines the REST bodies.

pub mod attestation;
pub mod crypto;
pub mod enclave;
pub mod kms;
pub mod store;
pub mod wire;

pub use enclave::{
    create_report, load_enclave, quote_report, seal, unseal, verify_quote, AuthorityKey, Digest,
    EnclaveError, EnclaveHandle, EnclaveIdentity, PlatformState, Quote, Report, SealPolicy,
    SealedBlob,
};
