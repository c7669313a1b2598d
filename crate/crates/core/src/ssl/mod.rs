pub mod augment;
pub mod lars;
pub mod losses;
pub mod pretrain;

pub use augment::{augment, AugStrength, AugmentConfig};
pub use lars::{LarsConfig, LarsState};
pub use losses::{VicregTerms, VicregWeights};
pub use pretrain::{pretrain, Objective, PretrainOutcome, SslRunConfig};
