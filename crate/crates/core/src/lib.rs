pub mod autodiff;
pub mod binio;
pub mod checkpoint;
pub mod config;
pub mod corpus;
pub mod experiment;
pub mod importance;
pub mod lora;
pub mod model;
pub mod partition;
pub mod seed;
pub mod splitter;
pub mod trainer;
