//! FireNet: a lightweight convolutional fire detector with its training loop,
//! real-time frame classification, and the fusion/alert logic of a complete
//! detection unit (camera + smoke sensor + remote notifications).

pub mod dataio;
pub mod fusion;
pub mod inference;
pub mod network;
pub mod tensor;
pub mod training;
