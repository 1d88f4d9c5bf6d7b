pub mod autodiff;
pub mod data;
pub mod geometry;
pub mod network;
pub mod params;
pub mod seed;
pub mod shellconv;
pub mod training;
