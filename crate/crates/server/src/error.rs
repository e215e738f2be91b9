// SPDX-License-Identifier: Apache-2.0

use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::Json;
use barbie_core::attestation::AttestError;
use barbie_core::kms::KmsError;
use serde::{Deserialize, Serialize};

/// Error body: `{"error": <code>, "reason": <detail>}`.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Eq)]
pub struct ErrorBody {
    pub error: String,
    #[serde(default)]
    pub reason: String,
}

#[derive(Debug)]
pub struct ApiError {
    pub status: StatusCode,
    pub code: &'static str,
    pub reason: String,
}

impl ApiError {
    pub fn new(status: StatusCode, code: &'static str, reason: impl Into<String>) -> Self {
        ApiError { status, code, reason: reason.into() }
    }

    pub fn unauthorized() -> Self {
        Self::new(StatusCode::UNAUTHORIZED, "unauthorized", "unknown or missing X-Auth-Token")
    }

    pub fn malformed(reason: impl Into<String>) -> Self {
        Self::new(StatusCode::BAD_REQUEST, "malformed", reason)
    }

    pub fn unknown_session() -> Self {
        Self::new(StatusCode::NOT_FOUND, "unknown-session", "no handshake with this session id on this instance")
    }

    pub fn busy() -> Self {
        Self::new(StatusCode::CONFLICT, "busy", "another message for this session is in flight")
    }

    pub fn enclave_disabled() -> Self {
        Self::new(StatusCode::NOT_IMPLEMENTED, "enclave-disabled", "instance runs the pass-through crypto path")
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(ErrorBody { error: self.code.to_owned(), reason: self.reason })).into_response()
    }
}

impl From<KmsError> for ApiError {
    fn from(e: KmsError) -> Self {
        let status = match &e {
            KmsError::AccessDenied(_) | KmsError::Forbidden(_) | KmsError::PolicyNotAllowed => StatusCode::FORBIDDEN,
            KmsError::NotFound => StatusCode::NOT_FOUND,
            KmsError::KekExists => StatusCode::CONFLICT,
            KmsError::ProvisioningFailed | KmsError::BadCiphertext | KmsError::InvalidArgument(_) => {
                StatusCode::BAD_REQUEST
            }
            // A data-plane call without a live session has to attest (again).
            KmsError::AttestationRequired | KmsError::UnknownSession => StatusCode::PRECONDITION_REQUIRED,
            KmsError::KekMissing => StatusCode::SERVICE_UNAVAILABLE,
            KmsError::IntegrityViolation | KmsError::Store(_) => StatusCode::INTERNAL_SERVER_ERROR,
        };
        let (code, reason) = match &e {
            KmsError::AccessDenied(r) => ("access-denied", r.as_str().to_owned()),
            KmsError::UnknownSession => ("attestation-required", "session unknown or expired".to_owned()),
            other => (other.code(), other.to_string()),
        };
        ApiError::new(status, code, reason)
    }
}

impl From<AttestError> for ApiError {
    fn from(e: AttestError) -> Self {
        match e {
            AttestError::UnknownSession => ApiError::unknown_session(),
            AttestError::Busy => ApiError::busy(),
            AttestError::Protocol(m) => ApiError::new(StatusCode::BAD_REQUEST, "protocol-error", m),
            AttestError::HandshakeFailed => {
                ApiError::new(StatusCode::FORBIDDEN, "handshake-failed", "message authentication failed")
            }
            AttestError::AttestationFailed => {
                ApiError::new(StatusCode::FORBIDDEN, "attestation-failed", "client quote did not verify")
            }
            AttestError::BindingFailed => {
                ApiError::new(StatusCode::FORBIDDEN, "binding-failed", "quote not bound to this handshake")
            }
            AttestError::IdentityRejected => {
                ApiError::new(StatusCode::FORBIDDEN, "identity-rejected", "client identity rejected")
            }
            AttestError::Rejected => ApiError::new(StatusCode::FORBIDDEN, "rejected", "peer rejected the handshake"),
            AttestError::MutualAttestationFailed(m) => {
                ApiError::new(StatusCode::FORBIDDEN, "mutual-attestation-failed", m)
            }
        }
    }
}
