//! Timed human classification experiment: block design, sessions, response
//! rules, persistence, export and the HTTP service.

pub mod config;
pub mod error;
pub mod export;
pub mod plan;
pub mod pool;
pub mod server;
pub mod session;
pub mod simulate;
pub mod store;

pub use config::ServiceConfig;
pub use error::{Result, ServiceError};
pub use plan::{class_for_key, key_map, BlockPlan, KeyBinding, KEYS};
pub use pool::ImagePool;
pub use server::{router, serve, AppState, NextTrial, ResponseBody, TrialDescriptor};
pub use session::{classify, Feedback, ResponseInput, ResponseOutcome, Session, Status, Trial, Validity};
