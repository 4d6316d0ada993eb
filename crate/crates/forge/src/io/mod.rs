pub mod embeddings;
pub mod instructions;
pub mod scores;
pub mod tensors;

pub use embeddings::{read_embeddings, write_embeddings, write_embeddings_jsonl};
pub use instructions::{read_instruction_samples, read_instruction_set, write_instruction_samples};
pub use scores::{read_model_scores, read_score_table, write_model_scores, write_score_records};
pub use tensors::{read_bank, read_tensor_archive, write_tensor_archive};
