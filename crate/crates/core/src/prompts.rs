//! Versioned prompt templates shipped with the crate.
//!
//! Placeholders are `{name}`; substituted values are never rescanned.

use sha2::{Digest, Sha256};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PromptTemplate {
    pub name: &'static str,
    pub version: u32,
    pub text: &'static str,
}

impl PromptTemplate {
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.text.as_bytes()))
    }

    pub fn id(&self) -> String {
        format!("{}@v{}", self.name, self.version)
    }

    /// Fills `{key}` placeholders; unknown placeholders are left verbatim.
    pub fn render(&self, vars: &[(&str, &str)]) -> String {
        let mut out = String::with_capacity(self.text.len() + vars.iter().map(|(_, v)| v.len()).sum::<usize>());
        let mut rest = self.text;
        while let Some(open) = rest.find('{') {
            out.push_str(&rest[..open]);
            let after = &rest[open + 1..];
            let substituted = after.find('}').and_then(|close| {
                let key = &after[..close];
                vars.iter()
                    .find(|(k, _)| *k == key)
                    .map(|(_, v)| (close, *v))
            });
            match substituted {
                Some((close, value)) => {
                    out.push_str(value);
                    rest = &after[close + 1..];
                }
                None => {
                    out.push('{');
                    rest = after;
                }
            }
        }
        out.push_str(rest);
        out
    }
}

pub const GENERATE_WITH_SALIENCY: PromptTemplate = PromptTemplate {
    name: "generate_with_saliency",
    version: 1,
    text: include_str!("../assets/prompts/generate_with_saliency.txt"),
};

pub const GENERATE_PLAIN: PromptTemplate = PromptTemplate {
    name: "generate_plain",
    version: 1,
    text: include_str!("../assets/prompts/generate_plain.txt"),
};

pub const MASK_FILL: PromptTemplate = PromptTemplate {
    name: "mask_fill",
    version: 1,
    text: include_str!("../assets/prompts/mask_fill.txt"),
};

pub const CLASSIFY: PromptTemplate = PromptTemplate {
    name: "classify",
    version: 1,
    text: include_str!("../assets/prompts/classify.txt"),
};

/// Combined hash of the two scoring templates, recorded with every score.
pub fn scoring_templates_hash() -> String {
    let mut h = Sha256::new();
    for t in [MASK_FILL, CLASSIFY] {
        h.update(t.id().as_bytes());
        h.update([0]);
        h.update(t.text.as_bytes());
    }
    hex::encode(h.finalize())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn render_substitutes_once() {
        let t = PromptTemplate {
            name: "t",
            version: 1,
            text: "a {x} b {y} {unknown} {",
        };
        assert_eq!(t.render(&[("x", "{y}"), ("y", "2")]), "a {y} b 2 {unknown} {");
    }

    #[test]
    fn shipped_templates_have_their_placeholders() {
        assert!(GENERATE_WITH_SALIENCY.text.contains("{document}"));
        assert!(GENERATE_WITH_SALIENCY.text.contains("importance (saliency) score behind each word"));
        assert!(GENERATE_PLAIN.text.contains("{label}"));
        assert!(!GENERATE_PLAIN.text.contains("saliency"));
        assert!(MASK_FILL.text.contains("{explanation_section}"));
        assert!(CLASSIFY.text.contains("{explanation_section}"));
        assert_ne!(GENERATE_PLAIN.hash(), GENERATE_WITH_SALIENCY.hash());
    }
}
