//! Blind annotation service: feature categorization, origin judgment and
//! pair alignment over exported dossiers.
//!
//! | method | path | body / reply |
//! |---|---|---|
//! | POST | `/sessions` | [`CreateSession`] → [`SessionCreated`] |
//! | GET | `/sessions/{id}/cards` | [`CardList`] |
//! | GET | `/cards/{opaque}` | [`FeatureCard`] |
//! | POST | `/annotations` | [`AnnotationRequest`] → [`AnnotationAck`] |
//! | GET | `/sessions/{id}/stats?partial=bool` | [`SessionStats`] |
//! | GET | `/sessions/{id}/reveal` | [`Reveal`], after completion only |
//!
//! Errors are `{"error": message}` with 400, 404 or 409. Provenance appears
//! only in stats and reveal replies; interim stats (`partial=true`) are an
//! explicit unblinding request.

pub mod error;
pub mod fixtures;
pub mod http;
pub mod log;
pub mod service;
pub mod state;
pub mod types;

pub use error::{Result, ServiceError};
pub use http::{router, serve};
pub use service::Service;
pub use types::*;
