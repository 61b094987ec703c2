pub mod capsnet;
pub mod checkpoint;
pub mod cnn;
pub mod data;
pub mod encode;
pub mod metrics;
pub mod model;
pub mod params;
pub mod seed;
pub mod tensor;
pub mod train;
