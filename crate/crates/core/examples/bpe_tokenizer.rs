//! Byte-level BPE: the built-in byte vocabulary, a vocabulary with a few
//! merges, and a round trip through both.

use adaptgpt::tokenizer::{vocab_with_merges, BpeVocab};
use adaptgpt::Result;

fn main() -> Result<()> {
    let text = "Shall I compare thee to a summer's day?";

    let bytes = BpeVocab::byte_level();
    let ids = bytes.encode(text);
    println!(
        "byte vocab: {} entries, eot id {:?}",
        bytes.vocab_size(),
        bytes.eot_id()
    );
    println!("{} tokens: {:?}", ids.len(), &ids[..8]);

    let merged = vocab_with_merges(&[("Ġ", "t"), ("h", "e"), ("Ġt", "he"), ("Ġ", "s"), ("m", "m")])?;
    let ids = merged.encode(text);
    println!("with {} merges: {} tokens", merged.num_merges(), ids.len());
    for piece in merged.pretokenize(text) {
        let toks: Vec<&str> = merged
            .encode(piece)
            .iter()
            .map(|&i| merged.token(i).unwrap_or("?"))
            .collect();
        println!("  {piece:?} -> {toks:?}");
    }
    assert_eq!(merged.decode(&ids)?, text);
    println!("decode(encode(text)) == text");
    Ok(())
}
