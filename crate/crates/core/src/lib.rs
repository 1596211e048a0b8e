//! Tree boosting combined with Gaussian process and grouped random effects.

pub mod covmodel;
pub mod error;
pub mod experiment;
pub mod likelihood;
pub mod linear;
mod par;
pub mod predict;
pub mod tree;
pub mod boost;
pub mod score;
pub mod sim;
pub mod stats;
pub mod vecchia;

pub use covmodel::{
    ComponentData, CovarianceParameters, Kernel, Locations, PsiOperator, PsiPath, RandomEffectsDesign,
};
pub use error::{Error, Result};
