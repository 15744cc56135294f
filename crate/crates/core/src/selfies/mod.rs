//! SELFIES tokens, vocabulary and the graph codec.
//!
//! Branch and ring symbols are followed by 1-3 index symbols read as base-16
//! digits through [`INDEX_ALPHABET`]. A branch with index `Q` spans the next
//! `Q + 1` symbols; a ring with index `Q` bonds the current atom to the atom
//! created `Q + 1` atoms earlier.

mod decode;
mod encode;
mod symbols;
mod tokenize;
mod vocab;

pub use decode::{decode, decode_str, decode_symbols};
pub use encode::{encode, encode_symbols};
pub use symbols::{classify, index_code, index_symbols, read_index, Symbol, INDEX_ALPHABET};
pub use tokenize::{detokenize, tokenize};
pub use vocab::{
    content, frame_and_pad, is_framed, Vocabulary, EOS, MAX_LEN, PAD, SOS, SPECIALS, UNK,
};
