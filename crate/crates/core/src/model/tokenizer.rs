//! Byte-level tokenizer: ids 0..=255 are raw UTF-8 bytes, 256 is end-of-text.
//! No external vocabulary artifact; round-trips any UTF-8 string exactly.

/// End-of-text id. Greedy decoding stops when the model emits it.
pub const EOT_TOKEN: u32 = 256;

/// Ids 0..=255 plus the end-of-text sentinel.
pub const TOKENIZER_VOCAB: usize = 257;

pub fn tokenize(text: &str) -> Vec<u32> {
    text.bytes().map(u32::from).collect()
}

/// Inverse of [`tokenize`] on byte ids; control ids (>= 256) are skipped so
/// generated sequences detokenize cleanly.
pub fn detokenize(tokens: &[u32]) -> String {
    let bytes: Vec<u8> = tokens
        .iter()
        .filter(|&&t| t < 256)
        .map(|&t| t as u8)
        .collect();
    String::from_utf8_lossy(&bytes).into_owned()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ascii_round_trip() {
        let ids = tokenize("fever");
        assert_eq!(ids, vec![102, 101, 118, 101, 114]);
        assert_eq!(detokenize(&ids), "fever");
    }

    #[test]
    fn empty_round_trip() {
        assert_eq!(tokenize(""), Vec::<u32>::new());
        assert_eq!(detokenize(&[]), "");
    }

    #[test]
    fn multibyte_round_trip() {
        for s in ["naïve café", "発熱と血小板減少", "🧬 σ", "a\u{0301}"] {
            assert_eq!(detokenize(&tokenize(s)), s);
        }
    }

    #[test]
    fn control_ids_are_skipped() {
        let mut ids = tokenize("ok");
        ids.push(EOT_TOKEN);
        ids.push(300);
        assert_eq!(detokenize(&ids), "ok");
    }
}
