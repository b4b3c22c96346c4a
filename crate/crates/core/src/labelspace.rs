//! Category vocabulary the miner classifies regions against.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::CategoryId;

/// A named target category.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Category {
    pub id: CategoryId,
    pub name: String,
}

/// Background-handling policy for classification.
///
/// `BgText` appends a literal "background" entry; `BaseAsBackground`
/// appends known base categories that exist in the images but must never
/// be emitted; `BackgroundSet` appends an external vocabulary of names
/// with no identity in the dataset.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackgroundMode {
    None,
    BgText,
    BaseAsBackground,
    BackgroundSet,
}

/// A non-target entry appended after the targets.
///
/// Entries carry a dataset category id only when one exists (base
/// categories do, external vocabulary names do not).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BackgroundEntry {
    pub name: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub id: Option<CategoryId>,
}

pub const DEFAULT_PROMPT_TEMPLATE: &str = "a photo of a {name}";
const BG_TEXT_NAME: &str = "background";

fn default_prompt_template() -> String {
    DEFAULT_PROMPT_TEMPLATE.to_string()
}

/// Ordered classification vocabulary: targets first, background entries
/// after them. Deserialization funnels through [`LabelSpace::new`] so a
/// hand-written file cannot sidestep validation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "LabelSpaceFile")]
pub struct LabelSpace {
    target_categories: Vec<Category>,
    background_mode: BackgroundMode,
    background_categories: Vec<BackgroundEntry>,
    prompt_template: String,
}

#[derive(Deserialize)]
struct LabelSpaceFile {
    target_categories: Vec<Category>,
    background_mode: BackgroundMode,
    #[serde(default)]
    background_categories: Vec<BackgroundEntry>,
    #[serde(default = "default_prompt_template")]
    prompt_template: String,
}

impl TryFrom<LabelSpaceFile> for LabelSpace {
    type Error = Error;

    fn try_from(file: LabelSpaceFile) -> Result<Self> {
        LabelSpace::new(
            file.target_categories,
            file.background_mode,
            file.background_categories,
            file.prompt_template,
        )
    }
}

impl LabelSpace {
    /// Builds a label space, validating that targets are non-empty, names
    /// are unique across the whole vocabulary, and the background list is
    /// consistent with the mode.
    pub fn new(
        target_categories: Vec<Category>,
        background_mode: BackgroundMode,
        background_categories: Vec<BackgroundEntry>,
        prompt_template: impl Into<String>,
    ) -> Result<Self> {
        let background_categories = match background_mode {
            BackgroundMode::None => Vec::new(),
            BackgroundMode::BgText => vec![BackgroundEntry {
                name: BG_TEXT_NAME.to_string(),
                id: None,
            }],
            BackgroundMode::BaseAsBackground | BackgroundMode::BackgroundSet => {
                if background_categories.is_empty() {
                    return Err(Error::InvalidConfig {
                        reason: format!(
                            "{background_mode:?} requires a non-empty background category list"
                        ),
                    });
                }
                background_categories
            }
        };
        let space = LabelSpace {
            target_categories,
            background_mode,
            background_categories,
            prompt_template: prompt_template.into(),
        };
        space.validate()?;
        Ok(space)
    }

    /// Targets-only label space with no background handling.
    pub fn closed(target_categories: Vec<Category>) -> Result<Self> {
        Self::new(
            target_categories,
            BackgroundMode::None,
            Vec::new(),
            DEFAULT_PROMPT_TEMPLATE,
        )
    }

    fn validate(&self) -> Result<()> {
        if self.target_categories.is_empty() {
            return Err(Error::EmptyLabelSpace);
        }
        let mut seen = std::collections::HashSet::new();
        for name in self.entry_names() {
            if !seen.insert(name.clone()) {
                return Err(Error::DuplicateCategoryName { name });
            }
        }
        Ok(())
    }

    pub fn targets(&self) -> &[Category] {
        &self.target_categories
    }

    pub fn background_mode(&self) -> BackgroundMode {
        self.background_mode
    }

    pub fn background_entries(&self) -> &[BackgroundEntry] {
        &self.background_categories
    }

    pub fn prompt_template(&self) -> &str {
        &self.prompt_template
    }

    /// Number of classification entries: targets plus background entries.
    pub fn len(&self) -> usize {
        self.target_categories.len() + self.background_categories.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn n_targets(&self) -> usize {
        self.target_categories.len()
    }

    /// True when the entry at `index` is a target rather than background.
    pub fn is_target_entry(&self, index: usize) -> bool {
        index < self.target_categories.len()
    }

    /// Dataset category id of the entry, when it has one.
    pub fn entry_id(&self, index: usize) -> Option<CategoryId> {
        if index < self.target_categories.len() {
            Some(self.target_categories[index].id)
        } else {
            self.background_categories[index - self.target_categories.len()].id
        }
    }

    pub fn entry_names(&self) -> impl Iterator<Item = String> + '_ {
        self.target_categories
            .iter()
            .map(|c| c.name.clone())
            .chain(self.background_categories.iter().map(|b| b.name.clone()))
    }

    /// Prompt string for the entry at `index`.
    pub fn prompt(&self, index: usize) -> String {
        let name = if index < self.target_categories.len() {
            &self.target_categories[index].name
        } else {
            &self.background_categories[index - self.target_categories.len()].name
        };
        self.prompt_template.replace("{name}", name)
    }

    pub fn prompts(&self) -> Vec<String> {
        (0..self.len()).map(|i| self.prompt(i)).collect()
    }

    pub fn target_ids(&self) -> Vec<CategoryId> {
        self.target_categories.iter().map(|c| c.id).collect()
    }

    pub fn is_target_id(&self, id: CategoryId) -> bool {
        self.target_categories.iter().any(|c| c.id == id)
    }

    /// Index of the target with the given dataset id.
    pub fn target_index(&self, id: CategoryId) -> Option<usize> {
        self.target_categories.iter().position(|c| c.id == id)
    }
}
