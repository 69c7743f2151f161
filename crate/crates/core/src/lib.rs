//! Longitudinal self-supervised pretraining (LSSL and its Siamese and
//! neural-ODE variants) with the downstream evaluation battery, on a
//! synthetic longitudinal cohort.

pub mod autodiff;
pub mod eval;
pub mod models;
pub mod objectives;
pub mod odesolve;
pub mod synthdata;
pub mod train;
