//! Scientific-name normalisation and string similarity.

use std::sync::OnceLock;

use regex::Regex;

fn authorship_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    // trailing "(Linnaeus, 1758)" / "Linnaeus, 1758" / "Grote & Robinson 1868"
    RE.get_or_init(|| {
        Regex::new(r"\s+\(?\p{Lu}[^()]*?,?\s*\d{4}\)?\s*$").expect("static regex")
    })
}

/// Trims, strips a trailing authorship string, collapses internal whitespace
/// and case-folds. Idempotent.
pub fn normalize_name(raw: &str) -> String {
    let collapsed = raw.split_whitespace().collect::<Vec<_>>().join(" ");
    let stripped = authorship_re().replace(&collapsed, "");
    stripped.trim().to_lowercase()
}

/// Normalised Damerau-Levenshtein similarity in [0, 1]; 1 means identical.
pub fn similarity(a: &str, b: &str) -> f64 {
    strsim::normalized_damerau_levenshtein(a, b)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn strips_authorship_variants() {
        assert_eq!(normalize_name("Actias luna (Linnaeus, 1758)"), "actias luna");
        assert_eq!(normalize_name("  Actias   luna Linnaeus, 1758 "), "actias luna");
        assert_eq!(normalize_name("Catocala relicta Walker 1858"), "catocala relicta");
        assert_eq!(normalize_name("Actias Leach, 1815"), "actias");
        assert_eq!(normalize_name("Actias luna"), "actias luna");
    }

    #[test]
    fn keeps_names_without_year() {
        assert_eq!(normalize_name("Hyles lineata"), "hyles lineata");
        assert_eq!(normalize_name("Noctua pronuba L."), "noctua pronuba l.");
    }

    #[test]
    fn idempotent_on_samples() {
        for s in ["Actias luna (Linnaeus, 1758)", "A  B  C", "", "  x ", "Éacles imperialis Drury, 1773"] {
            let once = normalize_name(s);
            assert_eq!(normalize_name(&once), once);
        }
    }

    #[test]
    fn similarity_bounds() {
        assert_eq!(similarity("abc", "abc"), 1.0);
        assert_eq!(similarity("abc", "xyz"), 0.0);
    }
}
