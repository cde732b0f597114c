pub mod autodiff;
pub mod tokenizer;
pub mod transformer;
pub mod optimizer;
pub mod pipeline;
pub mod qa_harness;
