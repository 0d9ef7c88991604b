mod conv;
mod elementwise;
mod linalg;
mod reduce;
mod resample;
mod shape;

pub use conv::Padding;
