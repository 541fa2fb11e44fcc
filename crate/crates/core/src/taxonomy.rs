//! Component types, categories and the three-way sample relation.
//!
//! A *component type* is a physical part family (grading ring, insulator, ...).
//! A *category* is a (component type, status) class such as "grading ring damage".
//! External-interference types (bird nests, foreign bodies) carry exactly one
//! defect category and no normal counterpart.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::TaxonomyError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Status {
    Normal,
    Defect,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ComponentType {
    pub name: String,
    #[serde(default)]
    pub is_external_interference: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Category {
    pub name: String,
    pub component_type: String,
    pub status: Status,
    /// Human readable phrase substituted into alt-text templates.
    pub display: String,
}

/// Relation between two samples, encoded as a cross-entropy class index.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[repr(u8)]
pub enum Relation {
    /// Same type, same status (same category).
    Stss = 0,
    /// Same type, different status.
    Stds = 1,
    /// Different type.
    Dt = 2,
}

impl Relation {
    pub const ALL: [Relation; 3] = [Relation::Stss, Relation::Stds, Relation::Dt];

    pub fn code(self) -> u32 {
        self as u32
    }

    pub fn from_code(code: u32) -> Option<Self> {
        Self::ALL.get(code as usize).copied()
    }
}

impl fmt::Display for Relation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Relation::Stss => "STSS",
            Relation::Stds => "STDS",
            Relation::Dt => "DT",
        };
        f.write_str(s)
    }
}

/// Index of a category inside its [`Taxonomy`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct CategoryId(pub usize);

/// Rule-level relation between two categories, independent of any taxonomy.
pub fn relate_categories(a: &Category, b: &Category) -> Relation {
    if a.name == b.name {
        Relation::Stss
    } else if a.component_type == b.component_type {
        Relation::Stds
    } else {
        Relation::Dt
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "RawTaxonomy", into = "RawTaxonomy")]
pub struct Taxonomy {
    component_types: Vec<ComponentType>,
    categories: Vec<Category>,
    by_name: BTreeMap<String, CategoryId>,
}

#[derive(Serialize, Deserialize)]
struct RawTaxonomy {
    component_types: Vec<ComponentType>,
    categories: Vec<Category>,
}

impl TryFrom<RawTaxonomy> for Taxonomy {
    type Error = TaxonomyError;

    fn try_from(raw: RawTaxonomy) -> Result<Self, Self::Error> {
        Taxonomy::new(raw.component_types, raw.categories)
    }
}

impl From<Taxonomy> for RawTaxonomy {
    fn from(t: Taxonomy) -> Self {
        RawTaxonomy {
            component_types: t.component_types,
            categories: t.categories,
        }
    }
}

impl Taxonomy {
    pub fn new(
        component_types: Vec<ComponentType>,
        categories: Vec<Category>,
    ) -> Result<Self, TaxonomyError> {
        let mut types = BTreeMap::new();
        for t in &component_types {
            if types.insert(t.name.clone(), t).is_some() {
                return Err(TaxonomyError::DuplicateComponentType(t.name.clone()));
            }
        }

        let mut by_name = BTreeMap::new();
        let mut pairs = BTreeSet::new();
        let mut per_type: BTreeMap<&str, usize> = BTreeMap::new();
        for (i, c) in categories.iter().enumerate() {
            let ty = types
                .get(&c.component_type)
                .ok_or_else(|| TaxonomyError::UnknownComponentType(c.component_type.clone()))?;
            if by_name.insert(c.name.clone(), CategoryId(i)).is_some() {
                return Err(TaxonomyError::DuplicateCategory(c.name.clone()));
            }
            if !pairs.insert((c.component_type.as_str(), c.status)) {
                return Err(TaxonomyError::DuplicateTypeStatus {
                    component_type: c.component_type.clone(),
                    status: c.status,
                });
            }
            if ty.is_external_interference && c.status != Status::Defect {
                return Err(TaxonomyError::ExternalNotDefect(c.name.clone()));
            }
            *per_type.entry(c.component_type.as_str()).or_default() += 1;
        }
        for t in &component_types {
            if t.is_external_interference && per_type.get(t.name.as_str()).copied() != Some(1) {
                return Err(TaxonomyError::ExternalCategoryCount(t.name.clone()));
            }
        }

        Ok(Self {
            component_types,
            categories,
            by_name,
        })
    }

    /// Ten categories over six component types; the default synthetic setup.
    pub fn desk() -> Self {
        let ty = |name: &str, ext: bool| ComponentType {
            name: name.into(),
            is_external_interference: ext,
        };
        let cat = |name: &str, ty: &str, status, display: &str| Category {
            name: name.into(),
            component_type: ty.into(),
            status,
            display: display.into(),
        };
        use Status::*;
        Self::new(
            vec![
                ty("grading_ring", false),
                ty("shielded_ring", false),
                ty("shockproof_hammer", false),
                ty("insulator", false),
                ty("bird_nest", true),
                ty("foreign_body", true),
            ],
            vec![
                cat("normal_grading_ring", "grading_ring", Normal, "normal grading ring"),
                cat("grading_ring_damage", "grading_ring", Defect, "damaged grading ring"),
                cat("normal_shielded_ring", "shielded_ring", Normal, "normal shielded ring"),
                cat("shielded_ring_corrosion", "shielded_ring", Defect, "corroded shielded ring"),
                cat("normal_shockproof_hammer", "shockproof_hammer", Normal, "normal shockproof hammer"),
                cat(
                    "shockproof_hammer_intersection",
                    "shockproof_hammer",
                    Defect,
                    "pair of intersecting shockproof hammers",
                ),
                cat("normal_insulator", "insulator", Normal, "normal insulator string"),
                cat("insulator_bunch_drop", "insulator", Defect, "insulator string with a dropped disc"),
                cat("bird_nest", "bird_nest", Defect, "bird nest"),
                cat("foreign_body", "foreign_body", Defect, "foreign body"),
            ],
        )
        .expect("built-in taxonomy is valid")
    }

    pub fn len(&self) -> usize {
        self.categories.len()
    }

    pub fn is_empty(&self) -> bool {
        self.categories.is_empty()
    }

    pub fn categories(&self) -> &[Category] {
        &self.categories
    }

    pub fn component_types(&self) -> &[ComponentType] {
        &self.component_types
    }

    pub fn ids(&self) -> impl Iterator<Item = CategoryId> + '_ {
        (0..self.categories.len()).map(CategoryId)
    }

    pub fn id(&self, name: &str) -> Result<CategoryId, TaxonomyError> {
        self.by_name
            .get(name)
            .copied()
            .ok_or_else(|| TaxonomyError::UnknownCategory(name.to_string()))
    }

    pub fn get(&self, id: CategoryId) -> Result<&Category, TaxonomyError> {
        self.categories
            .get(id.0)
            .ok_or_else(|| TaxonomyError::UnknownCategory(format!("#{}", id.0)))
    }

    pub fn component_type(&self, name: &str) -> Option<&ComponentType> {
        self.component_types.iter().find(|t| t.name == name)
    }

    pub fn is_external(&self, id: CategoryId) -> Result<bool, TaxonomyError> {
        let c = self.get(id)?;
        Ok(self
            .component_type(&c.component_type)
            .is_some_and(|t| t.is_external_interference))
    }

    pub fn relate(&self, a: CategoryId, b: CategoryId) -> Result<Relation, TaxonomyError> {
        Ok(relate_categories(self.get(a)?, self.get(b)?))
    }

    pub fn relate_names(&self, a: &str, b: &str) -> Result<Relation, TaxonomyError> {
        self.relate(self.id(a)?, self.id(b)?)
    }

    /// Defect categories in taxonomy order; these are the detection classes.
    pub fn defect_ids(&self) -> Vec<CategoryId> {
        self.ids()
            .filter(|&id| self.categories[id.0].status == Status::Defect)
            .collect()
    }
}
