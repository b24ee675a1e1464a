//! Verification sessions: questions for human annotators, hidden gold
//! checks, and durable answer storage feeding a suspended run.

pub mod session;
pub mod store;

pub use session::{
    PAYLOAD_VERSION,
    Ack, Answer, ExportedLabel, GoldQuestion, LabelExport, NextQuestion, Question, QuestionKind, QuestionPayload,
    SessionProgress, SessionSpec, SessionState,
};
pub use store::{CrashPoint, LogRecord, SessionStore, StoreOptions};
