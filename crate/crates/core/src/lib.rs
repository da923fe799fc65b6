pub mod tensor;
pub mod model;
pub mod loss;
pub mod data;
pub mod eval;
pub mod optim;
