//! Damage, fake-damage and part vocabularies.

use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const NUM_FAKE: usize = 7;
pub const NUM_PART: usize = 61;
pub const DEFAULT_NUM_DAMAGE: usize = 26;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Domain {
    Damage,
    Fake,
    Part,
}

impl Domain {
    pub const ALL: [Domain; 3] = [Domain::Damage, Domain::Fake, Domain::Part];

    pub fn as_str(self) -> &'static str {
        match self {
            Domain::Damage => "damage",
            Domain::Fake => "fake",
            Domain::Part => "part",
        }
    }
}

impl fmt::Display for Domain {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct InstanceLabel {
    pub domain: Domain,
    pub class_id: usize,
}

impl InstanceLabel {
    pub fn new(domain: Domain, class_id: usize) -> Self {
        Self { domain, class_id }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LabelSpace {
    pub damage: Vec<String>,
    pub fake: Vec<String>,
    pub part: Vec<String>,
}

const DAMAGE_SEED: [&str; 5] = ["scrape", "crack", "brokenlight", "dent", "crackedpaint"];
const FAKE_SEED: [&str; 4] = ["fakeshape", "fakewaterdrip", "fakemud", "fakestain"];
const PART_SEED: [(usize, &str); 4] = [
    (0, "hood"),
    (1, "front_bumper"),
    (2, "taillight"),
    (17, "rear_left_door"),
];

impl LabelSpace {
    /// Default vocabularies; named entries are fixed, the rest are `damage_07`-style placeholders.
    pub fn with_damage_classes(num_damage: usize) -> Result<Self> {
        if num_damage < DAMAGE_SEED.len() {
            return Err(Error::Config(format!(
                "damage vocabulary needs at least {} classes, got {num_damage}",
                DAMAGE_SEED.len()
            )));
        }
        let damage = (0..num_damage)
            .map(|i| {
                DAMAGE_SEED
                    .get(i)
                    .map_or_else(|| format!("damage_{i:02}"), |s| s.to_string())
            })
            .collect();
        let fake = (0..NUM_FAKE)
            .map(|i| {
                FAKE_SEED
                    .get(i)
                    .map_or_else(|| format!("fake_{i:02}"), |s| s.to_string())
            })
            .collect();
        let part = (0..NUM_PART)
            .map(|i| {
                PART_SEED
                    .iter()
                    .find(|(id, _)| *id == i)
                    .map_or_else(|| format!("part_{i:02}"), |(_, s)| s.to_string())
            })
            .collect();
        let space = Self { damage, fake, part };
        space.validate()?;
        Ok(space)
    }

    pub fn names(&self, domain: Domain) -> &[String] {
        match domain {
            Domain::Damage => &self.damage,
            Domain::Fake => &self.fake,
            Domain::Part => &self.part,
        }
    }

    pub fn size(&self, domain: Domain) -> usize {
        self.names(domain).len()
    }

    pub fn name(&self, domain: Domain, id: usize) -> Result<&str> {
        self.names(domain).get(id).map(String::as_str).ok_or_else(|| {
            Error::OutOfRange(format!(
                "{domain} id {id} (vocabulary has {} entries)",
                self.size(domain)
            ))
        })
    }

    pub fn id(&self, domain: Domain, name: &str) -> Option<usize> {
        self.names(domain).iter().position(|n| n == name)
    }

    pub fn check(&self, label: InstanceLabel) -> Result<()> {
        self.name(label.domain, label.class_id).map(|_| ())
    }

    pub fn validate(&self) -> Result<()> {
        if self.fake.len() != NUM_FAKE || self.part.len() != NUM_PART {
            return Err(Error::Config(format!(
                "fake/part vocabularies must have {NUM_FAKE}/{NUM_PART} entries, got {}/{}",
                self.fake.len(),
                self.part.len()
            )));
        }
        if self.damage.is_empty() {
            return Err(Error::Config("empty damage vocabulary".into()));
        }
        for domain in Domain::ALL {
            let names = self.names(domain);
            for (i, n) in names.iter().enumerate() {
                if names[..i].contains(n) {
                    return Err(Error::Config(format!("duplicate {domain} name `{n}`")));
                }
            }
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("label space serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let space: Self = serde_json::from_str(text)?;
        space.validate()?;
        Ok(space)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()).map_err(|e| Error::file(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::file(path, e))?;
        Self::from_json(&text)
    }

    /// Errors when `other` differs from `self` in any vocabulary.
    pub fn ensure_same(&self, other: &LabelSpace) -> Result<()> {
        for domain in Domain::ALL {
            if self.names(domain) != other.names(domain) {
                return Err(Error::LabelSpaceMismatch(format!(
                    "{domain} vocabularies differ ({} vs {} entries)",
                    self.size(domain),
                    other.size(domain)
                )));
            }
        }
        Ok(())
    }
}

impl Default for LabelSpace {
    fn default() -> Self {
        Self::with_damage_classes(DEFAULT_NUM_DAMAGE).expect("default vocabulary is valid")
    }
}
