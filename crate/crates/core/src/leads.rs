//! Lead naming and the fixed input/target lead orders.

/// Measured leads fed to the models, in row order.
pub const INPUT_LEADS: [&str; 3] = ["I", "II", "V2"];

/// Reconstructed precordial leads, in row order.
pub const TARGET_LEADS: [&str; 5] = ["V1", "V3", "V4", "V5", "V6"];

pub const STANDARD_12: [&str; 12] = [
    "I", "II", "III", "aVR", "aVL", "aVF", "V1", "V2", "V3", "V4", "V5", "V6",
];

/// All leads a segment carries: inputs followed by targets.
pub fn segment_leads() -> impl Iterator<Item = &'static str> {
    INPUT_LEADS.iter().chain(TARGET_LEADS.iter()).copied()
}

/// Map the spellings used by PTB-XL ("I", "AVR") and the PTB Diagnostic
/// database ("i", "avr") onto the standard names. Unknown names pass through
/// unchanged.
pub fn canonical_lead_name(name: &str) -> String {
    let trimmed = name.trim();
    let upper = trimmed.to_ascii_uppercase();
    match upper.as_str() {
        "AVR" => "aVR".to_string(),
        "AVL" => "aVL".to_string(),
        "AVF" => "aVF".to_string(),
        "I" | "II" | "III" | "V1" | "V2" | "V3" | "V4" | "V5" | "V6" => upper,
        _ => trimmed.to_string(),
    }
}

/// Index of a target lead in [`TARGET_LEADS`], accepting any spelling.
pub fn target_index(name: &str) -> Option<usize> {
    let canon = canonical_lead_name(name);
    TARGET_LEADS.iter().position(|l| *l == canon)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn canonicalizes_ptb_spellings() {
        assert_eq!(canonical_lead_name("i"), "I");
        assert_eq!(canonical_lead_name("avf"), "aVF");
        assert_eq!(canonical_lead_name("AVL"), "aVL");
        assert_eq!(canonical_lead_name("v6"), "V6");
        assert_eq!(canonical_lead_name("vx"), "vx");
    }

    #[test]
    fn target_lookup() {
        assert_eq!(target_index("v3"), Some(1));
        assert_eq!(target_index("V2"), None);
        assert_eq!(segment_leads().count(), 8);
    }
}
