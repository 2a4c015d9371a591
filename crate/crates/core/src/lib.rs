pub mod checkpoint;
pub mod error;
pub mod eval;
pub mod hooks;
pub mod localize;
pub mod model;
pub mod peft;
pub mod pipeline;
pub mod run;
pub mod world;

pub use error::{Error, Result};
pub use hooks::{ActivationCache, HookPoint, HookSite};
pub use model::{LanguageModel, ModelConfig, ModuleKind, Transformer};
