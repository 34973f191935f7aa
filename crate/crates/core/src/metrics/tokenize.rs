/// Characters split off as standalone tokens.
pub const PUNCTUATION: [char; 6] = ['.', ',', '?', '!', ';', ':'];

/// Lowercases, splits the punctuation set into separate tokens and collapses
/// whitespace.
pub fn tokenize_for_metrics(text: &str) -> Vec<String> {
    let mut tokens = Vec::new();
    let mut current = String::new();
    for ch in text.chars().flat_map(char::to_lowercase) {
        if ch.is_whitespace() {
            flush(&mut current, &mut tokens);
        } else if PUNCTUATION.contains(&ch) {
            flush(&mut current, &mut tokens);
            tokens.push(ch.to_string());
        } else {
            current.push(ch);
        }
    }
    flush(&mut current, &mut tokens);
    tokens
}

fn flush(current: &mut String, tokens: &mut Vec<String>) {
    if !current.is_empty() {
        tokens.push(std::mem::take(current));
    }
}

/// Joins tokens back into a sentence, attaching punctuation to the preceding
/// word. `tokenize_for_metrics(&render_tokens(t)) == t` for any metric-token
/// list `t`.
pub fn render_tokens<S: AsRef<str>>(tokens: &[S]) -> String {
    let mut out = String::new();
    for tok in tokens {
        let tok = tok.as_ref();
        let is_punct = tok.chars().count() == 1 && tok.chars().all(|c| PUNCTUATION.contains(&c));
        if !out.is_empty() && !is_punct {
            out.push(' ');
        }
        out.push_str(tok);
    }
    out
}
