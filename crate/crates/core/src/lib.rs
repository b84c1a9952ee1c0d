pub mod autodiff;
pub mod centroids;
pub mod data;
pub mod harness;
pub mod losses;
pub mod model;
pub mod trainer;
