//! Small helpers for pulling tagged blocks and numbers out of model output.

/// Body of the first `<tag>…</tag>` block, trimmed. ASCII case-insensitive.
pub(crate) fn extract_block<'a>(text: &'a str, tag: &str) -> Option<&'a str> {
    let lower = text.to_ascii_lowercase();
    let open = format!("<{}>", tag.to_ascii_lowercase());
    let close = format!("</{}>", tag.to_ascii_lowercase());
    let start = lower.find(&open)? + open.len();
    let end = start + lower[start..].find(&close)?;
    Some(text[start..end].trim())
}

/// First decimal number in `text` (e.g. `0.85`, `1`, `.5`).
pub(crate) fn first_number(text: &str) -> Option<f64> {
    let re = number_regex();
    re.find(text).and_then(|m| m.as_str().parse().ok())
}

fn number_regex() -> &'static regex::Regex {
    static RE: std::sync::OnceLock<regex::Regex> = std::sync::OnceLock::new();
    RE.get_or_init(|| regex::Regex::new(r"-?(?:\d+(?:\.\d+)?|\.\d+)").expect("valid regex"))
}

/// Number following `anchor` (after optional spaces, quotes, braces or `*`).
pub(crate) fn number_after(text: &str, anchor: &str) -> Option<f64> {
    let lower = text.to_ascii_lowercase();
    let at = lower.find(&anchor.to_ascii_lowercase())? + anchor.len();
    let rest = &text[at..];
    let skipped = rest.trim_start_matches(|c: char| {
        c.is_whitespace() || matches!(c, ':' | '"' | '\'' | '*' | '{' | '[')
    });
    let m = number_regex().find(skipped)?;
    if m.start() != 0 {
        return None;
    }
    m.as_str().parse().ok()
}
