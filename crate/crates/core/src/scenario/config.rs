use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{Modality, ScenarioError, Utterance, MAX_UTTERANCE_WORDS};

/// Which sense values an utterance stem describes.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MatchRule {
    pub stem: String,
    pub modality: Modality,
    pub values: Vec<String>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RuleSet {
    /// R-NE: a current *ne* utterance matches the current senses.
    pub cur_ne_matches: bool,
    /// R-YO-PREV: a previous *yo* utterance matches the current senses.
    pub prev_yo_matches: bool,
    /// R-YO-CUR: a current *yo* utterance names something not currently
    /// perceived.
    pub cur_yo_novel: bool,
    /// R-NE-ONLY: stems listed in `ne_only` never take *yo*.
    pub ne_only: bool,
    /// R-INF: inference is the function of vision.
    pub inference_from_vision: bool,
    /// R-TASTE: tasting a fruit requires seeing the delicious variant of it.
    pub taste_requires_sight: bool,
}

impl Default for RuleSet {
    fn default() -> Self {
        Self {
            cur_ne_matches: true,
            prev_yo_matches: true,
            cur_yo_novel: true,
            ne_only: true,
            inference_from_vision: true,
            taste_requires_sight: true,
        }
    }
}

/// The closed world: utterance inventory, rule toggles and MATCH table.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScenarioConfig {
    pub inventory: Vec<String>,
    pub ne_only: Vec<String>,
    pub rules: RuleSet,
    #[serde(rename = "match")]
    pub matches: Vec<MatchRule>,
}

fn rule(stem: &str, modality: Modality, values: &[&str]) -> MatchRule {
    MatchRule {
        stem: stem.to_string(),
        modality,
        values: values.iter().map(|v| v.to_string()).collect(),
    }
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        let inventory = [
            "Ringo-da-yo",
            "Ringo-da-ne",
            "Banana-da-yo",
            "Banana-da-ne",
            "Oishi-souda-yo",
            "Oishi-souda-ne",
            "Oishii-yo",
            "Oishii-ne",
            "Onakasuita-ne",
            "Tabetai-ne",
        ];
        Self {
            inventory: inventory.iter().map(|s| s.to_string()).collect(),
            ne_only: vec!["Onakasuita".into(), "Tabetai".into()],
            rules: RuleSet::default(),
            matches: vec![
                rule(
                    "Ringo-da",
                    Modality::Vision,
                    &["VIS_APPLE_DELICIOUS", "VIS_APPLE_GREEN"],
                ),
                rule(
                    "Banana-da",
                    Modality::Vision,
                    &["VIS_BANANA_DELICIOUS", "VIS_BANANA_SPOTTED"],
                ),
                rule(
                    "Oishi-souda",
                    Modality::Inference,
                    &["INF_APPLE_TASTY", "INF_BANANA_TASTY"],
                ),
                rule("Oishii", Modality::Taste, &["TASTE_APPLE", "TASTE_BANANA"]),
                rule("Onakasuita", Modality::Hunger, &["HUNGRY"]),
                rule("Tabetai", Modality::Desire, &["DESIRE_APPLE", "DESIRE_BANANA"]),
            ],
        }
    }
}

impl ScenarioConfig {
    pub fn from_toml_str(text: &str) -> Result<Self, ScenarioError> {
        let config: ScenarioConfig =
            toml::from_str(text).map_err(|e| ScenarioError::Config(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self, ScenarioError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| ScenarioError::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("scenario config serializes")
    }

    pub fn validate(&self) -> Result<(), ScenarioError> {
        if self.inventory.is_empty() {
            return Err(ScenarioError::Config("empty utterance inventory".into()));
        }
        for surface in &self.inventory {
            let u = Utterance::parse(surface);
            if u.is_none() || u.particle().is_none() {
                return Err(ScenarioError::Config(format!(
                    "inventory utterance {surface:?} must end in yo or ne"
                )));
            }
            if u.words().len() > MAX_UTTERANCE_WORDS {
                return Err(ScenarioError::Config(format!(
                    "inventory utterance {surface:?} has more than {MAX_UTTERANCE_WORDS} words"
                )));
            }
            if u.words().iter().any(|w| w.is_empty() || w.starts_with('[')) {
                return Err(ScenarioError::Config(format!(
                    "inventory utterance {surface:?} has an empty or reserved word"
                )));
            }
        }
        for m in &self.matches {
            let known = m.modality.tokens();
            if let Some(bad) = m.values.iter().find(|v| !known.contains(&v.as_str())) {
                return Err(ScenarioError::Config(format!(
                    "MATCH entry for {:?} names {bad:?}, not a {} value",
                    m.stem,
                    m.modality.name()
                )));
            }
        }
        Ok(())
    }

    pub fn match_rule(&self, stem: &str) -> Option<&MatchRule> {
        self.matches.iter().find(|m| m.stem == stem)
    }

    /// Short stable hash of the configuration.
    pub fn fingerprint(&self) -> String {
        let json = serde_json::to_string(self).expect("scenario config serializes");
        short_hash(json.as_bytes())
    }
}

/// First 8 bytes of SHA-256, as hex.
pub fn short_hash(bytes: &[u8]) -> String {
    Sha256::digest(bytes)[..8].iter().map(|b| format!("{b:02x}")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn toml_round_trip() {
        let config = ScenarioConfig::default();
        let text = config.to_toml_string();
        let back = ScenarioConfig::from_toml_str(&text).unwrap();
        assert_eq!(back, config);
        assert_eq!(back.fingerprint(), config.fingerprint());
    }

    #[test]
    fn rejects_bad_match_value() {
        let mut config = ScenarioConfig::default();
        config.matches[0].values.push("HUNGRY".into());
        assert!(matches!(config.validate(), Err(ScenarioError::Config(_))));
    }

    #[test]
    fn rejects_particle_less_inventory_entry() {
        let mut config = ScenarioConfig::default();
        config.inventory.push("Ringo-da".into());
        assert!(config.validate().is_err());
    }

    #[test]
    fn fingerprint_tracks_rules() {
        let mut config = ScenarioConfig::default();
        let before = config.fingerprint();
        config.rules.taste_requires_sight = false;
        assert_ne!(before, config.fingerprint());
    }
}
