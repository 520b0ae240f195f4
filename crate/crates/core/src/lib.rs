pub mod autodiff;
pub mod evaluation;
pub mod geometry;
pub mod gradcheck;
pub mod io;
pub mod model;
pub mod phantom;
pub mod pipeline;
pub mod views;
pub mod volume;
