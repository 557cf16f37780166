pub mod backbone;
pub mod checkpoint;
pub mod layers;
pub mod lesion_net;
pub mod multitask;
