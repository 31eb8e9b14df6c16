//! Text normalization shared by the stub providers.

use crate::hashing::fnv1a64;

/// Lowercase, replace every non-alphanumeric character with a space and
/// collapse runs of whitespace.
pub fn normalize(text: &str) -> String {
    let mapped: String = text
        .chars()
        .flat_map(char::to_lowercase)
        .map(|c| if c.is_alphanumeric() { c } else { ' ' })
        .collect();
    mapped.split_whitespace().collect::<Vec<_>>().join(" ")
}

pub fn tokens(text: &str) -> Vec<String> {
    normalize(text).split_whitespace().map(String::from).collect()
}

/// L2-normalized counts of hashed character trigrams of the normalized
/// text padded with one space on each side. `None` when the text has no
/// alphanumeric content.
pub fn trigram_embedding(text: &str, dimension: usize) -> Option<Vec<f64>> {
    let norm = normalize(text);
    if norm.is_empty() || dimension == 0 {
        return None;
    }
    let chars: Vec<char> = format!(" {norm} ").chars().collect();
    let mut counts = vec![0.0f64; dimension];
    let mut buf = String::new();
    for w in chars.windows(3) {
        buf.clear();
        buf.extend(w);
        counts[(fnv1a64(buf.as_bytes()) % dimension as u64) as usize] += 1.0;
    }
    let len = counts.iter().map(|c| c * c).sum::<f64>().sqrt();
    counts.iter_mut().for_each(|c| *c /= len);
    Some(counts)
}
