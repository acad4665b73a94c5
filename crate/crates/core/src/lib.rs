pub mod asr;
pub mod corpus;
pub mod datagen;
pub mod eval;
pub mod experiment;
pub mod model;
pub mod parse;
pub mod tensor;
pub mod tokenizer;
pub mod training;
