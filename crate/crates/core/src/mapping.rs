//! Rule-based recognition of academic-database column headers.
//!
//! Rules are tried in order. For each rule the columns are scanned in order,
//! and the first column whose name contains any of the rule's patterns is
//! bound to the rule's category. A column may satisfy several rules, but a
//! rule binds at most one column.
//!
//! Matching is a substring test that folds ASCII case (`title` matches
//! `TITLE`) and compares CJK text exactly.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum MappingError {
    #[error("mapping rule for {0} has no patterns")]
    EmptyPatterns(Category),
    #[error("mapping rule for {0} contains an empty pattern")]
    EmptyPattern(Category),
    #[error("unknown column {0:?}")]
    UnknownColumn(String),
    #[error("unknown category {0:?}")]
    UnknownCategory(String),
    #[error("category {0} is bound to more than one column")]
    DuplicateTarget(Category),
    #[error("invalid rules document: {0}")]
    Json(String),
}

/// Semantic category of a source column.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Category {
    Title,
    Abstract,
    Keywords,
    Authors,
    Source,
    PubDate,
    Doi,
}

impl Category {
    pub const ALL: [Category; 7] = [
        Category::Title,
        Category::Abstract,
        Category::Keywords,
        Category::Authors,
        Category::Source,
        Category::PubDate,
        Category::Doi,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Category::Title => "title",
            Category::Abstract => "abstract",
            Category::Keywords => "keywords",
            Category::Authors => "authors",
            Category::Source => "source",
            Category::PubDate => "pub_date",
            Category::Doi => "doi",
        }
    }

    /// Human-readable label.
    pub fn label(self) -> &'static str {
        match self {
            Category::Title => "Title",
            Category::Abstract => "Abstract",
            Category::Keywords => "Keywords",
            Category::Authors => "Authors",
            Category::Source => "Source",
            Category::PubDate => "Publication Date",
            Category::Doi => "DOI",
        }
    }
}

impl fmt::Display for Category {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Category {
    type Err = MappingError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Category::ALL
            .into_iter()
            .find(|c| c.as_str().eq_ignore_ascii_case(s.trim()))
            .ok_or_else(|| MappingError::UnknownCategory(s.to_string()))
    }
}

#[derive(Deserialize)]
struct RawRule {
    patterns: Vec<String>,
    target: Category,
}

/// Pattern variants (Chinese and English) recognised for one category.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "RawRule")]
pub struct MappingRule {
    patterns: Vec<String>,
    target: Category,
}

impl TryFrom<RawRule> for MappingRule {
    type Error = MappingError;

    fn try_from(raw: RawRule) -> Result<Self, Self::Error> {
        MappingRule::new(raw.patterns, raw.target)
    }
}

impl MappingRule {
    pub fn new<I, S>(patterns: I, target: Category) -> Result<Self, MappingError>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let patterns: Vec<String> = patterns.into_iter().map(Into::into).collect();
        if patterns.is_empty() {
            return Err(MappingError::EmptyPatterns(target));
        }
        if patterns.iter().any(String::is_empty) {
            return Err(MappingError::EmptyPattern(target));
        }
        Ok(Self { patterns, target })
    }

    pub fn patterns(&self) -> &[String] {
        &self.patterns
    }

    pub fn target(&self) -> Category {
        self.target
    }

    /// True when `column` contains any pattern of this rule.
    pub fn matches(&self, column: &str) -> bool {
        let folded = column.to_ascii_lowercase();
        self.patterns
            .iter()
            .any(|p| folded.contains(&p.to_ascii_lowercase()))
    }
}

/// The built-in rule set for CNKI/Wanfang style exports.
pub fn default_rules() -> Vec<MappingRule> {
    let rule = |patterns: &[&str], target| MappingRule {
        patterns: patterns.iter().map(|p| p.to_string()).collect(),
        target,
    };
    vec![
        rule(&["篇名", "题名", "标题", "Title"], Category::Title),
        rule(&["摘要", "Abstract"], Category::Abstract),
        rule(&["关键词", "Keywords", "Keyword"], Category::Keywords),
        rule(&["作者", "Author", "Authors"], Category::Authors),
        rule(&["来源", "期刊", "Journal", "Source"], Category::Source),
        rule(&["发表时间", "出版时间", "年份", "Year", "Date"], Category::PubDate),
        rule(&["DOI"], Category::Doi),
    ]
}

pub fn rules_from_json(json: &str) -> Result<Vec<MappingRule>, MappingError> {
    serde_json::from_str(json).map_err(|e| MappingError::Json(e.to_string()))
}

pub fn rules_to_json(rules: &[MappingRule]) -> String {
    serde_json::to_string_pretty(rules).expect("rules serialize")
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MappingEntry {
    pub column: String,
    pub target: Category,
}

/// Column-to-category bindings; at most one column per category.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FieldMapping {
    entries: Vec<MappingEntry>,
}

impl FieldMapping {
    pub fn entries(&self) -> &[MappingEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn column_for(&self, target: Category) -> Option<&str> {
        self.entries
            .iter()
            .find(|e| e.target == target)
            .map(|e| e.column.as_str())
    }

    /// Binds `column` to `target`, replacing any previous binding of `target`.
    pub fn assign(&mut self, column: impl Into<String>, target: Category) {
        let column = column.into();
        match self.entries.iter_mut().find(|e| e.target == target) {
            Some(e) => e.column = column,
            None => self.entries.push(MappingEntry { column, target }),
        }
    }

    pub fn unassign(&mut self, target: Category) {
        self.entries.retain(|e| e.target != target);
    }

    /// Checks every bound column exists and no category is bound twice.
    pub fn validate_against(&self, columns: &[String]) -> Result<(), MappingError> {
        for (i, e) in self.entries.iter().enumerate() {
            if !columns.iter().any(|c| c == &e.column) {
                return Err(MappingError::UnknownColumn(e.column.clone()));
            }
            if self.entries[..i].iter().any(|p| p.target == e.target) {
                return Err(MappingError::DuplicateTarget(e.target));
            }
        }
        Ok(())
    }
}

/// Maps column headers to categories.
///
/// When several rules share a target, the first rule that binds wins.
pub fn map_columns<S: AsRef<str>>(columns: &[S], rules: &[MappingRule]) -> FieldMapping {
    let mut mapping = FieldMapping::default();
    for rule in rules {
        if mapping.column_for(rule.target).is_some() {
            continue;
        }
        if let Some(column) = columns.iter().map(AsRef::as_ref).find(|c| rule.matches(c)) {
            mapping.entries.push(MappingEntry {
                column: column.to_string(),
                target: rule.target,
            });
        }
    }
    mapping
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn default_rules_cover_seven_categories() {
        let rules = default_rules();
        assert_eq!(rules.len(), 7);
        let mut targets: Vec<_> = rules.iter().map(|r| r.target()).collect();
        targets.sort();
        targets.dedup();
        assert_eq!(targets.len(), 7);
        assert!(rules.iter().all(|r| !r.patterns().is_empty()));
        let kw = rules.iter().find(|r| r.target() == Category::Keywords).unwrap();
        assert!(kw.patterns().iter().any(|p| p == "Keyword"));
    }

    #[test]
    fn cnki_headers_map_to_same_named_columns() {
        let cols = ["篇名", "摘要", "关键词", "作者", "来源", "发表时间", "DOI"];
        let m = map_columns(&cols, &default_rules());
        assert_eq!(m.len(), 7);
        for (col, cat) in cols.iter().zip(Category::ALL) {
            assert_eq!(m.column_for(cat), Some(*col));
        }
    }

    #[test]
    fn empty_columns_give_empty_mapping() {
        let cols: [&str; 0] = [];
        assert!(map_columns(&cols, &default_rules()).is_empty());
    }

    #[test]
    fn first_column_in_column_order_wins() {
        let m = map_columns(&["文章标题", "标题"], &default_rules());
        assert_eq!(m.column_for(Category::Title), Some("文章标题"));
    }

    #[test]
    fn ascii_patterns_fold_case() {
        let m = map_columns(&["TITLE", "abstract", "doi"], &default_rules());
        assert_eq!(m.column_for(Category::Title), Some("TITLE"));
        assert_eq!(m.column_for(Category::Abstract), Some("abstract"));
        assert_eq!(m.column_for(Category::Doi), Some("doi"));
    }

    #[test]
    fn rules_round_trip_through_json() {
        let json = rules_to_json(&default_rules());
        assert_eq!(rules_from_json(&json).unwrap(), default_rules());
    }

    #[test]
    fn invalid_rules_are_rejected() {
        let err = rules_from_json(r#"[{"patterns":[],"target":"title"}]"#).unwrap_err();
        assert!(err.to_string().contains("has no patterns"), "{err}");
        assert!(rules_from_json(r#"[{"patterns":[""],"target":"doi"}]"#).is_err());
        assert!(rules_from_json(r#"[{"patterns":["x"],"target":"nope"}]"#).is_err());
    }

    #[test]
    fn duplicate_targets_bind_once() {
        let rules = vec![
            MappingRule::new(["zzz"], Category::Title).unwrap(),
            MappingRule::new(["名"], Category::Title).unwrap(),
            MappingRule::new(["篇"], Category::Title).unwrap(),
        ];
        let m = map_columns(&["篇名"], &rules);
        assert_eq!(m.len(), 1);
        assert_eq!(m.column_for(Category::Title), Some("篇名"));
    }

    #[test]
    fn assign_replaces_existing_binding() {
        let mut m = map_columns(&["篇名", "题名"], &default_rules());
        m.assign("题名", Category::Title);
        assert_eq!(m.column_for(Category::Title), Some("题名"));
        assert_eq!(m.len(), 1);
        m.unassign(Category::Title);
        assert!(m.is_empty());
        let cols = vec!["篇名".to_string()];
        m.assign("missing", Category::Doi);
        assert_eq!(
            m.validate_against(&cols),
            Err(MappingError::UnknownColumn("missing".into()))
        );
    }

    fn column_name() -> impl Strategy<Value = String> {
        prop::sample::select(vec![
            "篇名", "题名", "文章标题", "摘要", "Abstract", "关键词", "Keyword", "作者",
            "Author", "来源", "期刊", "Journal", "年份", "Date", "DOI", "页码", "基金", "备注",
            "ISSN", "Notes", "Pages",
        ])
        .prop_map(String::from)
    }

    proptest! {
        #[test]
        fn mapping_is_deterministic_and_unique(cols in prop::collection::vec(column_name(), 0..12)) {
            let a = map_columns(&cols, &default_rules());
            let b = map_columns(&cols, &default_rules());
            prop_assert_eq!(&a, &b);
            for cat in Category::ALL {
                prop_assert!(a.entries().iter().filter(|e| e.target == cat).count() <= 1);
            }
            for e in a.entries() {
                prop_assert!(cols.contains(&e.column));
            }
        }

        #[test]
        fn removing_an_unmapped_column_keeps_mapping(
            cols in prop::collection::vec(column_name(), 1..12),
            pick in any::<prop::sample::Index>(),
        ) {
            let m = map_columns(&cols, &default_rules());
            let i = pick.index(cols.len());
            if m.entries().iter().all(|e| e.column != cols[i]) {
                let mut fewer = cols.clone();
                fewer.remove(i);
                prop_assert_eq!(map_columns(&fewer, &default_rules()), m);
            }
        }

        #[test]
        fn ascii_case_does_not_change_mapping(cols in prop::collection::vec(column_name(), 0..12)) {
            let upper: Vec<String> = cols.iter().map(|c| c.to_ascii_uppercase()).collect();
            let a = map_columns(&cols, &default_rules());
            let b = map_columns(&upper, &default_rules());
            let targets = |m: &FieldMapping| m.entries().iter().map(|e| e.target).collect::<Vec<_>>();
            prop_assert_eq!(targets(&a), targets(&b));
        }
    }
}
