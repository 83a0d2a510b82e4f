//! Desk-scale chemical language model toolkit for polymer property
//! prediction: SMILES/p-SMILES tokenization, masked-language-model
//! pretraining, single-task and multitask fine-tuning with missing labels,
//! cross-validated evaluation, MLM diagnostics, and ECFP/PCA dataset
//! comparison.

pub mod encoder;
pub mod smiles;
pub mod tensor;
pub mod tokenizer;
pub mod util;
