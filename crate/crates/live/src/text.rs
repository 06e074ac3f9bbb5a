use csr_core::Token;

/// Turns token ids into prompt text for a remote server.
///
/// Rendering must be concatenative: the text of `a ⊕ b` is the text of `a`
/// followed by the text of `b`, so shared token prefixes become shared
/// string prefixes and the server's prefix cache sees the same reuse the
/// mock charges for.
pub trait TokenText: Send + Sync {
    fn render(&self, tokens: &[Token]) -> String;
}

const SYLLABLES: [&str; 16] = [
    "ka", "lo", "mi", "nu", "pe", "ra", "so", "ti", "va", "we", "xo", "yu", "za", "be", "do", "fi",
];

/// Renders each token as one space-led pseudo-word spelled from the
/// hexadecimal digits of its id, e.g. `0x2f` becomes `" mifi"`.
#[derive(Debug, Clone, Copy, Default)]
pub struct SyllableText;

impl SyllableText {
    fn word(token: Token, out: &mut String) {
        out.push(' ');
        let digits = if token == 0 { 1 } else { (32 - token.leading_zeros()).div_ceil(4) };
        for i in (0..digits).rev() {
            out.push_str(SYLLABLES[((token >> (4 * i)) & 0xf) as usize]);
        }
    }
}

impl TokenText for SyllableText {
    fn render(&self, tokens: &[Token]) -> String {
        let mut out = String::with_capacity(tokens.len() * 5);
        for &t in tokens {
            Self::word(t, &mut out);
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn words() {
        assert_eq!(SyllableText.render(&[0, 0x2f, 0x100]), " ka mifi lokaka");
        assert_eq!(SyllableText.render(&[]), "");
    }

    #[test]
    fn concatenative_and_injective_on_small_ids() {
        let a = [3, 17, 4096];
        let b = [99, 0];
        let joined: Vec<Token> = a.iter().chain(&b).copied().collect();
        assert_eq!(SyllableText.render(&joined), SyllableText.render(&a) + &SyllableText.render(&b));
        let mut seen = std::collections::HashSet::new();
        for t in 0..5_000 {
            assert!(seen.insert(SyllableText.render(&[t])));
        }
    }
}
