pub mod adam;
pub mod loss;
pub mod metrics;
pub mod report;
pub mod train;

pub use metrics::{accuracy, balanced_accuracy, per_class_recall, wasserstein_1d, Confusion};
pub use report::{EvalReport, SplitSizes};
pub use train::{linear_eval, train_supervised, TrainConfig};
