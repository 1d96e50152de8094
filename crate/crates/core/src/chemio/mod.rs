//! Chemistry I/O: kekulized SMILES, canonical keys and synthetic datasets.

mod canon;
mod smiles;
pub mod synth;

pub use canon::{canonical_key, CanonicalKey};
pub use smiles::{parse_smiles, read_smiles_lines, tokenize, write_smiles, SmilesToken};
