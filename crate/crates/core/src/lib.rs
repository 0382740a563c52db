pub mod data;
pub mod decode;
pub mod eval;
pub mod exec;
pub mod losses;
pub mod model;
pub mod synthlang;
pub mod tensor;
pub mod train;
