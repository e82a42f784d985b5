//! Token counting strategies.
//!
//! Counting is injected wherever messages are built so that the whole stack
//! is deterministic under test. The heuristic counter (ceil of chars / 4)
//! doubles as the mock backend's tokenizer and as the wire client's local
//! estimate; a provider-side rejection caused by estimate drift is surfaced
//! as a fatal backend error rather than papered over here.

/// A deterministic token counter over raw text.
pub trait TokenCounter {
    fn count(&self, text: &str) -> usize;
}

/// Counts `ceil(chars / 4)` where chars are Unicode scalar values.
#[derive(Debug, Clone, Copy, Default)]
pub struct HeuristicTokenizer;

impl TokenCounter for HeuristicTokenizer {
    fn count(&self, text: &str) -> usize {
        text.chars().count().div_ceil(4)
    }
}

/// Notice appended whenever output had to be cut to fit a token budget.
pub const TRUNCATION_NOTICE: &str = "\n...[output truncated to fit the context window]";

/// Truncates `text` on a char boundary so that the result plus the
/// truncation notice counts at most `max_tokens`. Returns the (possibly
/// unchanged) text and whether truncation happened.
pub fn truncate_to_tokens(
    text: &str,
    max_tokens: usize,
    counter: &dyn TokenCounter,
) -> (String, bool) {
    if counter.count(text) <= max_tokens {
        return (text.to_string(), false);
    }
    let notice_tokens = counter.count(TRUNCATION_NOTICE);
    let budget = max_tokens.saturating_sub(notice_tokens);
    let chars: Vec<char> = text.chars().collect();

    // Binary search the longest char prefix within budget. Counters are
    // monotone in prefix length, which makes this well defined.
    let mut lo = 0usize;
    let mut hi = chars.len();
    while lo < hi {
        let mid = (lo + hi + 1) / 2;
        let prefix: String = chars[..mid].iter().collect();
        if counter.count(&prefix) <= budget {
            lo = mid;
        } else {
            hi = mid - 1;
        }
    }
    let mut out: String = chars[..lo].iter().collect();
    out.push_str(TRUNCATION_NOTICE);
    (out, true)
}
