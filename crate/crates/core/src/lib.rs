//! Selection of fixed effects under a ternary spike-and-slab mixture prior,
//! with random-effects adjustment for clustered Gaussian, Poisson and
//! binomial responses.

pub mod error;
pub mod family;
pub mod gam;
pub mod glm;
pub mod glmm;
pub mod ingest;
pub mod lasso;
mod linalg;
pub mod lmm;
pub mod mixed;
pub mod mixture;
pub mod optim;
pub mod sim;

pub use error::{Error, Result};
pub use family::Family;
pub use gam::{fit_semms, fit_semms_glm, FitConfig, SemmsFit};
pub use ingest::{load_dataset, Dataset, Grouping, LoadSpec};
pub use mixture::{Label, MixtureState, ModelParams};
