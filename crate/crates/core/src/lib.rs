//! Named entity recognition cast as machine reading comprehension.
//!
//! Every entity type is turned into a natural-language query. For each
//! (sentence, type) pair the model predicts, per context token, whether the
//! token starts or ends an answer span, and a binary matching classifier
//! decides which predicted starts pair with which predicted ends. Because
//! each type is answered by an independent question and one start may pair
//! with several ends, overlapping and nested mentions come out of the same
//! decoder that handles flat NER.
//!
//! Module map:
//!
//! * [`span`]: entity types, tag sets and the span algebra.
//! * [`query`]: query strategies and catalog files.
//! * [`data`]: corpus readers, MRC triple construction and label tensors.
//! * [`model`]: encoder contract, the reference toy encoder, the three
//!   heads, the joint loss and its analytic gradients, checkpoints.
//! * [`decode`]: boundary extraction and start-end alignment.
//! * [`eval`]: span-level micro P/R/F1, zero-shot protocol, subsampling,
//!   query-strategy ablation.
//! * [`train`]: training loop, prediction, evaluation and heat-map export.
//! * [`synthetic`]: sentinel corpus generator used by the test suites.
//! * [`par`]: data-parallel helpers with a sequential fallback.

pub mod data;
pub mod decode;
pub mod error;
pub mod eval;
pub mod model;
pub mod par;
pub mod query;
pub mod span;
pub mod synthetic;
pub mod train;

pub use error::{Error, Result};
pub use span::{EntitySpan, EntityType, TagSet};
