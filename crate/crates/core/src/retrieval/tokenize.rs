/// Lowercases `text` and splits it on every non-alphanumeric character.
///
/// No stemming and no stopword removal; empty fragments are dropped.
pub fn tokenize(text: &str) -> Vec<String> {
    text.to_lowercase()
        .split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_owned)
        .collect()
}
