#![allow(dead_code)]

use linevlp_core::{Category, ComponentType, Relation, Status, Taxonomy};
use rand::Rng;

/// A valid taxonomy with 1..=8 ordinary types (1 or 2 categories each) and
/// 0..=3 external types; category order is shuffled.
pub fn random_taxonomy<R: Rng>(rng: &mut R) -> Taxonomy {
    use rand::seq::SliceRandom;
    let mut types = Vec::new();
    let mut cats = Vec::new();
    for i in 0..rng.random_range(1..=8) {
        let name = format!("type{i}");
        types.push(ComponentType { name: name.clone(), is_external_interference: false });
        let statuses: &[Status] = match rng.random_range(0..3) {
            0 => &[Status::Normal],
            1 => &[Status::Defect],
            _ => &[Status::Normal, Status::Defect],
        };
        for s in statuses {
            let cname = format!("{name}_{s:?}").to_lowercase();
            cats.push(Category { name: cname.clone(), component_type: name.clone(), status: *s, display: cname });
        }
    }
    for i in 0..rng.random_range(0..=3) {
        let name = format!("ext{i}");
        types.push(ComponentType { name: name.clone(), is_external_interference: true });
        cats.push(Category { name: name.clone(), component_type: name.clone(), status: Status::Defect, display: name });
    }
    cats.shuffle(rng);
    Taxonomy::new(types, cats).expect("generator builds valid taxonomies")
}

/// The relation rule written directly over (type, status).
pub fn brute_relation(a: &Category, b: &Category) -> Relation {
    match (a.component_type == b.component_type, a.status == b.status) {
        (true, true) => Relation::Stss,
        (true, false) => Relation::Stds,
        (false, _) => Relation::Dt,
    }
}

/// Taxonomy with `n_types` ordinary types, each with a normal and a defect category.
pub fn paired_taxonomy(n_types: usize) -> Taxonomy {
    let mut types = Vec::new();
    let mut cats = Vec::new();
    for i in 0..n_types {
        let name = format!("part{i}");
        types.push(ComponentType { name: name.clone(), is_external_interference: false });
        for (s, tag) in [(Status::Normal, "ok"), (Status::Defect, "bad")] {
            let cname = format!("{name}_{tag}");
            cats.push(Category { name: cname.clone(), component_type: name.clone(), status: s, display: format!("{tag} part {i}") });
        }
    }
    Taxonomy::new(types, cats).unwrap()
}
