//! Dotted version comparison.
//!
//! Versions compare as dotted numeric tuples with missing components treated
//! as zero, so `"12.1"` equals `"12.1.0"`. Non-numeric trailing characters in
//! a component (`"3-rc1"`) are ignored.

use std::cmp::Ordering;

fn components(version: &str) -> Vec<u64> {
    version
        .split('.')
        .map(|part| {
            let digits: String = part.chars().take_while(|c| c.is_ascii_digit()).collect();
            digits.parse().unwrap_or(0)
        })
        .collect()
}

pub fn cmp_versions(a: &str, b: &str) -> Ordering {
    let (a, b) = (components(a), components(b));
    let len = a.len().max(b.len());
    for i in 0..len {
        let (x, y) = (a.get(i).copied().unwrap_or(0), b.get(i).copied().unwrap_or(0));
        match x.cmp(&y) {
            Ordering::Equal => continue,
            other => return other,
        }
    }
    Ordering::Equal
}

pub fn version_at_least(candidate: &str, minimum: &str) -> bool {
    cmp_versions(candidate, minimum) != Ordering::Less
}

/// Major component of a dotted version (`"12.4"` -> 12).
pub fn major(version: &str) -> u64 {
    components(version).first().copied().unwrap_or(0)
}

/// Minor component of a dotted version (`"12.4"` -> 4).
pub fn minor(version: &str) -> u64 {
    components(version).get(1).copied().unwrap_or(0)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn missing_components_are_zero() {
        assert_eq!(cmp_versions("12.1", "12.1.0"), Ordering::Equal);
        assert!(version_at_least("12.1", "12.1.0"));
    }

    #[test]
    fn ordering() {
        assert_eq!(cmp_versions("5.3.0", "5.4.3"), Ordering::Less);
        assert!(!version_at_least("5.3", "5.4.3"));
        assert!(version_at_least("12.4", "12.1"));
        assert_eq!(cmp_versions("10.0", "9.9"), Ordering::Greater);
    }

    #[test]
    fn suffixes_ignored() {
        assert_eq!(cmp_versions("3-rc1", "3.0"), Ordering::Equal);
    }
}
