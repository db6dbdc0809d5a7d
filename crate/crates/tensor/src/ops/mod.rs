pub mod conv;
pub mod elementwise;
pub mod linalg;
pub mod sample;
pub mod shape;
pub mod softmax;
