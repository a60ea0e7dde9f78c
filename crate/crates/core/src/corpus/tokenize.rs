/// Sentinel tokens kept verbatim by [`tokenize_with_sentinels`].
pub const CLS: &str = "[CLS]";
pub const SEP: &str = "[SEP]";

fn clean(raw: &str) -> Option<String> {
    let trimmed = raw.trim_matches(|c: char| !c.is_alphanumeric());
    (!trimmed.is_empty()).then(|| trimmed.to_lowercase())
}

/// Lowercase, split on Unicode whitespace, strip leading and trailing
/// non-alphanumeric characters from each token, drop tokens left empty.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split_whitespace().filter_map(clean).collect()
}

/// [`tokenize`], except that `[CLS]` and `[SEP]` survive as sentinel tokens.
pub fn tokenize_with_sentinels(text: &str) -> Vec<String> {
    text.split_whitespace()
        .filter_map(|raw| {
            if raw.eq_ignore_ascii_case(SEP) {
                Some(SEP.to_string())
            } else if raw.eq_ignore_ascii_case(CLS) {
                Some(CLS.to_string())
            } else {
                clean(raw)
            }
        })
        .collect()
}

pub fn is_sentinel(token: &str) -> bool {
    token == SEP || token == CLS
}

/// Answer text in the form passage spans are compared against.
pub fn normalize_answer(text: &str) -> String {
    tokenize(text).join(" ")
}
