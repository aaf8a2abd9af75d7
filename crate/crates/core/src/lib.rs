pub mod bench;
pub mod checkpoint;
pub mod cli;
pub mod dnn;
pub mod geo;
pub mod meta;
pub mod model;
pub mod mttgn;
pub mod optim;
pub mod synth;
pub mod tensor;
