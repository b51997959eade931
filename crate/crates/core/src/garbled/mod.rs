pub mod argmin;
pub mod circuit;
pub mod exec;
pub mod gc;
pub mod lrelu;
pub mod ot;
