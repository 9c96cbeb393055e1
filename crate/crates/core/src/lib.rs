pub mod bev;
pub mod cli;
pub mod eval;
pub mod geometry;
pub mod ground;
pub mod io;
pub mod losses;
pub mod optimize;
pub mod segmentation;
pub mod spatial;
pub mod synth;
