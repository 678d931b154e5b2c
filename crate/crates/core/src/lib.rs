//! Building blocks shared by every node of the fleet analytics platform:
//! the wire protocol, module signatures, the sandboxed reference executor and
//! the per-user module store.

pub mod executor;
pub mod protocol;

pub use executor::{
    validate_code, Diagnostic, ExecError, ExecResult, Executor, ModuleStore, ReferenceExecutor,
    StoreError, WindowBatch,
};
pub use protocol::{Envelope, Payload, ProtocolError, Signature};
