//! The classifier and the soft-label hypernetwork.

mod classifier;
mod ddn;
mod mlp;

pub use classifier::{one_hot, Classifier, ClassifierConfig, ClassifierNodes};
pub use ddn::{Ddn, DdnConfig, SoftLabelBatch, SoftLabelGraph};
pub use mlp::{Mlp, MlpNodes};
