pub mod covariance;
pub mod data;
pub mod hyper;
pub mod smooth;
pub mod joint;
pub mod observation;
pub mod simulate;
pub mod inference;
pub mod prediction;
pub mod scoring;
pub mod fit;
pub mod cv;
pub mod compare;
pub mod config;
