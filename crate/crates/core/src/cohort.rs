//! Cohort manifests, label derivation, subject-level splitting and
//! inverse-frequency class weights.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::rng;
use crate::{Task, TaskLabels, TASK_COUNT};

#[derive(Debug, thiserror::Error)]
pub enum CohortError {
    #[error("manifest is missing required column `{0}`")]
    MissingColumn(String),
    #[error("malformed manifest row at line {line}: {reason}")]
    MalformedRow { line: usize, reason: String },
    #[error("duplicate image path `{0}`")]
    DuplicatePath(String),
    #[error("need at least one subject to split")]
    TooFewSubjects,
    #[error("invalid split fractions {0:?}")]
    InvalidFractions([f64; 3]),
    #[error("no labeled training samples for task {0}")]
    NoLabeledSamples(Task),
    #[error("malformed split file at line {line}: {reason}")]
    MalformedSplit { line: usize, reason: String },
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

/// Exact manifest header.
pub const MANIFEST_COLUMNS: [&str; 11] = [
    "image_path",
    "subject_id",
    "visit_id",
    "hba1c_pct",
    "creatinine",
    "urea",
    "proteinuria",
    "organ_flags",
    "label_hba1c",
    "label_kidney",
    "label_multi",
];

/// Raw laboratory values; `None` marks a missing measurement.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ClinicalFields {
    pub hba1c_pct: Option<f64>,
    /// Serum creatinine, µmol/L.
    pub creatinine: Option<f64>,
    /// Blood urea nitrogen, mmol/L.
    pub urea: Option<f64>,
    /// Proteinuria indicator; nonzero is abnormal.
    pub proteinuria: Option<f64>,
    /// Number of abnormal organ-system indicators.
    pub organ_flags: Option<u32>,
}

/// Cutoffs used to dichotomize clinical fields.
///
/// The kidney cutoffs are placeholders, not clinically validated values.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LabelThresholds {
    pub hba1c_pct: f64,
    pub creatinine: f64,
    pub urea: f64,
    pub multi_min_flags: u32,
}

impl Default for LabelThresholds {
    fn default() -> Self {
        LabelThresholds { hba1c_pct: 7.0, creatinine: 104.0, urea: 8.2, multi_min_flags: 2 }
    }
}

/// Dichotomizes clinical fields. A rule with any missing input yields a
/// missing label.
pub fn derive_labels(raw: &ClinicalFields, th: &LabelThresholds) -> TaskLabels {
    let hba1c = raw.hba1c_pct.map(|v| v >= th.hba1c_pct);
    let kidney = match (raw.creatinine, raw.urea, raw.proteinuria) {
        (Some(c), Some(u), Some(p)) => Some(c > th.creatinine || u > th.urea || p != 0.0),
        _ => None,
    };
    let multi = raw.organ_flags.map(|n| n >= th.multi_min_flags);
    TaskLabels::new(hba1c, kidney, multi)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageRecord {
    pub image_path: String,
    pub subject_id: String,
    pub visit_id: String,
    pub clinical: ClinicalFields,
    pub labels: TaskLabels,
}

fn parse_label(cell: &str, line: usize, col: &str) -> Result<Option<bool>, CohortError> {
    match cell.trim() {
        "" => Ok(None),
        "0" => Ok(Some(false)),
        "1" => Ok(Some(true)),
        other => Err(CohortError::MalformedRow { line, reason: format!("{col} = `{other}` is not 0, 1 or empty") }),
    }
}

fn parse_opt<T: FromStr>(cell: Option<&str>, line: usize, col: &str) -> Result<Option<T>, CohortError> {
    match cell.map(str::trim) {
        None | Some("") => Ok(None),
        Some(s) => s
            .parse()
            .map(Some)
            .map_err(|_| CohortError::MalformedRow { line, reason: format!("{col} = `{s}` is not numeric") }),
    }
}

/// Parses a manifest CSV. Label columns take precedence; a task whose label
/// column is absent is derived from the raw clinical columns.
pub fn parse_manifest(text: &str) -> Result<Vec<ImageRecord>, CohortError> {
    parse_manifest_with(text, &LabelThresholds::default())
}

pub fn parse_manifest_with(text: &str, thresholds: &LabelThresholds) -> Result<Vec<ImageRecord>, CohortError> {
    let mut reader = csv::ReaderBuilder::new().flexible(true).from_reader(text.as_bytes());
    let header: Vec<String> = reader.headers()?.iter().map(|h| h.trim().to_string()).collect();
    let col = |name: &str| header.iter().position(|h| h == name);
    let required = |name: &str| col(name).ok_or_else(|| CohortError::MissingColumn(name.to_string()));
    let (i_path, i_subject, i_visit) = (required("image_path")?, required("subject_id")?, required("visit_id")?);

    let raw_cols = ["hba1c_pct", "creatinine", "urea", "proteinuria", "organ_flags"].map(col);
    let label_cols = ["label_hba1c", "label_kidney", "label_multi"].map(col);
    let needed_raw: [&[usize]; TASK_COUNT] = [&[0], &[1, 2, 3], &[4]];
    for task in Task::ALL {
        if label_cols[task.index()].is_none() {
            if let Some(&missing) = needed_raw[task.index()].iter().find(|&&i| raw_cols[i].is_none()) {
                return Err(CohortError::MissingColumn(format!(
                    "label_{} (or raw column {})",
                    task.name(),
                    ["hba1c_pct", "creatinine", "urea", "proteinuria", "organ_flags"][missing]
                )));
            }
        }
    }

    let mut seen = HashSet::new();
    let mut records = Vec::new();
    for (row_idx, row) in reader.records().enumerate() {
        let row = row?;
        let line = row.position().map_or(row_idx + 2, |p| p.line() as usize);
        if row.len() != header.len() {
            return Err(CohortError::MalformedRow {
                line,
                reason: format!("{} fields, header has {}", row.len(), header.len()),
            });
        }
        let cell = |i: Option<usize>| i.and_then(|i| row.get(i));
        let clinical = ClinicalFields {
            hba1c_pct: parse_opt(cell(raw_cols[0]), line, "hba1c_pct")?,
            creatinine: parse_opt(cell(raw_cols[1]), line, "creatinine")?,
            urea: parse_opt(cell(raw_cols[2]), line, "urea")?,
            proteinuria: parse_opt(cell(raw_cols[3]), line, "proteinuria")?,
            organ_flags: parse_opt(cell(raw_cols[4]), line, "organ_flags")?,
        };
        let derived = derive_labels(&clinical, thresholds);
        let mut labels = TaskLabels::default();
        for task in Task::ALL {
            let value = match label_cols[task.index()] {
                Some(i) => parse_label(&row[i], line, MANIFEST_COLUMNS[8 + task.index()])?,
                None => derived.get(task),
            };
            labels.set(task, value);
        }
        let image_path = row[i_path].trim().to_string();
        let subject_id = row[i_subject].trim().to_string();
        if image_path.is_empty() || subject_id.is_empty() {
            return Err(CohortError::MalformedRow { line, reason: "empty image_path or subject_id".into() });
        }
        if !seen.insert(image_path.clone()) {
            return Err(CohortError::DuplicatePath(image_path));
        }
        records.push(ImageRecord {
            image_path,
            subject_id,
            visit_id: row[i_visit].trim().to_string(),
            clinical,
            labels,
        });
    }
    Ok(records)
}

fn fmt_opt<T: fmt::Display>(v: Option<T>) -> String {
    v.map(|v| v.to_string()).unwrap_or_default()
}

fn fmt_label(v: Option<bool>) -> &'static str {
    match v {
        None => "",
        Some(false) => "0",
        Some(true) => "1",
    }
}

/// Serializes records with the full manifest header.
pub fn write_manifest(records: &[ImageRecord]) -> String {
    let mut out = MANIFEST_COLUMNS.join(",");
    out.push('\n');
    for r in records {
        let c = &r.clinical;
        let fields = [
            r.image_path.clone(),
            r.subject_id.clone(),
            r.visit_id.clone(),
            fmt_opt(c.hba1c_pct),
            fmt_opt(c.creatinine),
            fmt_opt(c.urea),
            fmt_opt(c.proteinuria),
            fmt_opt(c.organ_flags),
            fmt_label(r.labels.0[0]).into(),
            fmt_label(r.labels.0[1]).into(),
            fmt_label(r.labels.0[2]).into(),
        ];
        out.push_str(&fields.join(","));
        out.push('\n');
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }

}

impl FromStr for Split {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Split::ALL.into_iter().find(|x| x.name() == s).ok_or_else(|| format!("unknown split `{s}`"))
    }
}

/// Subject → partition mapping. Each subject appears exactly once.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitAssignment {
    pub subjects: BTreeMap<String, Split>,
}

impl SplitAssignment {
    pub fn split_of(&self, subject: &str) -> Option<Split> {
        self.subjects.get(subject).copied()
    }

    pub fn subjects_in(&self, split: Split) -> impl Iterator<Item = &str> {
        self.subjects.iter().filter(move |(_, s)| **s == split).map(|(k, _)| k.as_str())
    }

    /// Records belonging to `split`, in manifest order.
    pub fn select<'a>(&self, records: &'a [ImageRecord], split: Split) -> Vec<&'a ImageRecord> {
        records.iter().filter(|r| self.split_of(&r.subject_id) == Some(split)).collect()
    }

    /// CSV `subject_id,split`, sorted by subject.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("subject_id,split\n");
        for (subject, split) in &self.subjects {
            out.push_str(subject);
            out.push(',');
            out.push_str(split.name());
            out.push('\n');
        }
        out
    }

    pub fn from_csv(text: &str) -> Result<Self, CohortError> {
        let mut lines = text.lines().enumerate();
        match lines.next() {
            Some((_, h)) if h.trim() == "subject_id,split" => {}
            _ => return Err(CohortError::MalformedSplit { line: 1, reason: "expected header subject_id,split".into() }),
        }
        let mut subjects = BTreeMap::new();
        for (i, line) in lines {
            if line.trim().is_empty() {
                continue;
            }
            let bad = |reason: String| CohortError::MalformedSplit { line: i + 1, reason };
            let (subject, split) = line.split_once(',').ok_or_else(|| bad("expected two fields".into()))?;
            let split = split.trim().parse().map_err(bad)?;
            if subjects.insert(subject.trim().to_string(), split).is_some() {
                return Err(bad(format!("subject `{subject}` listed twice")));
            }
        }
        Ok(SplitAssignment { subjects })
    }
}

struct SubjectTally {
    id: String,
    images: usize,
    positives: [usize; TASK_COUNT],
}

/// Group-exclusive, approximately stratified split of subjects.
///
/// Subjects are visited in a seeded random order; each goes to the split
/// whose squared deviation from its image-count and per-task positive-count
/// targets shrinks the most.
pub fn split_by_subject(records: &[ImageRecord], fractions: [f64; 3], seed: u64) -> Result<SplitAssignment, CohortError> {
    let sum: f64 = fractions.iter().sum();
    if fractions.iter().any(|f| !(*f > 0.0)) || (sum - 1.0).abs() > 1e-9 {
        return Err(CohortError::InvalidFractions(fractions));
    }
    let mut by_subject: BTreeMap<&str, SubjectTally> = BTreeMap::new();
    for r in records {
        let t = by_subject.entry(&r.subject_id).or_insert_with(|| SubjectTally {
            id: r.subject_id.clone(),
            images: 0,
            positives: [0; TASK_COUNT],
        });
        t.images += 1;
        for task in Task::ALL {
            if r.labels.get(task) == Some(true) {
                t.positives[task.index()] += 1;
            }
        }
    }
    if by_subject.is_empty() {
        return Err(CohortError::TooFewSubjects);
    }
    let mut subjects: Vec<SubjectTally> = by_subject.into_values().collect();
    subjects.shuffle(&mut rng::stream(seed, &[0x5711]));

    let n_images = subjects.iter().map(|s| s.images).sum::<usize>() as f64;
    let mut total_pos = [0usize; TASK_COUNT];
    for s in &subjects {
        for t in 0..TASK_COUNT {
            total_pos[t] += s.positives[t];
        }
    }
    let target_img = fractions.map(|f| f * n_images);
    let target_pos: Vec<[f64; 3]> = total_pos.iter().map(|&p| fractions.map(|f| f * p as f64)).collect();

    let mut img = [0usize; 3];
    let mut pos = [[0usize; 3]; TASK_COUNT];
    let mut assignment = BTreeMap::new();
    for s in subjects {
        let delta = |k: usize| -> f64 {
            let n = s.images as f64;
            let d = target_img[k] - img[k] as f64;
            let mut score = ((n - d).powi(2) - d.powi(2)) / n_images.powi(2);
            for t in 0..TASK_COUNT {
                if total_pos[t] == 0 {
                    continue;
                }
                let p = s.positives[t] as f64;
                let d = target_pos[t][k] - pos[t][k] as f64;
                score += 0.5 * ((p - d).powi(2) - d.powi(2)) / (total_pos[t] as f64).powi(2);
            }
            score
        };
        let best = (0..3)
            .map(|k| (k, delta(k)))
            .fold((0, f64::INFINITY), |acc, (k, v)| if v < acc.1 { (k, v) } else { acc })
            .0;
        img[best] += s.images;
        for t in 0..TASK_COUNT {
            pos[t][best] += s.positives[t];
        }
        assignment.insert(s.id, Split::ALL[best]);
    }
    Ok(SplitAssignment { subjects: assignment })
}

/// Per-class loss weights for one task.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassWeightPair {
    pub negative: f64,
    pub positive: f64,
    /// Set when one class is absent from the training data; its weight is 0.
    pub missing_class: bool,
}

impl ClassWeightPair {
    pub const UNIT: ClassWeightPair = ClassWeightPair { negative: 1.0, positive: 1.0, missing_class: false };

    pub fn for_label(&self, positive: bool) -> f64 {
        if positive {
            self.positive
        } else {
            self.negative
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassWeights(pub [ClassWeightPair; TASK_COUNT]);

impl ClassWeights {
    pub fn unit() -> Self {
        ClassWeights([ClassWeightPair::UNIT; TASK_COUNT])
    }

    pub fn task(&self, task: Task) -> ClassWeightPair {
        self.0[task.index()]
    }
}

/// `w_c = N / (2 N_c)` from labeled training samples of each task.
pub fn compute_class_weights<'a, I>(train: I) -> Result<ClassWeights, CohortError>
where
    I: IntoIterator<Item = &'a ImageRecord>,
{
    let mut counts = [[0usize; 2]; TASK_COUNT];
    for r in train {
        for task in Task::ALL {
            if let Some(y) = r.labels.get(task) {
                counts[task.index()][usize::from(y)] += 1;
            }
        }
    }
    let mut out = [ClassWeightPair::UNIT; TASK_COUNT];
    for task in Task::ALL {
        let [neg, pos] = counts[task.index()];
        let n = neg + pos;
        if n == 0 {
            return Err(CohortError::NoLabeledSamples(task));
        }
        let w = |c: usize| if c == 0 { 0.0 } else { n as f64 / (2.0 * c as f64) };
        out[task.index()] = ClassWeightPair { negative: w(neg), positive: w(pos), missing_class: neg == 0 || pos == 0 };
    }
    Ok(ClassWeights(out))
}

#[cfg(test)]
mod tests {
    use super::*;

    const HEADER: &str = "image_path,subject_id,visit_id,hba1c_pct,creatinine,urea,proteinuria,organ_flags,label_hba1c,label_kidney,label_multi";

    fn record(path: &str, subject: &str, labels: [Option<bool>; 3]) -> ImageRecord {
        ImageRecord {
            image_path: path.into(),
            subject_id: subject.into(),
            visit_id: "V1".into(),
            clinical: ClinicalFields::default(),
            labels: TaskLabels(labels),
        }
    }

    #[test]
    fn parses_two_rows() {
        let text = format!("{HEADER}\na.png,S1,V1,,,,,,1,0,1\nb.png,S2,V1,,,,,,0,1,0\n");
        let recs = parse_manifest(&text).unwrap();
        assert_eq!(recs.len(), 2);
        assert_eq!(recs[0].labels, TaskLabels::new(Some(true), Some(false), Some(true)));
        assert_eq!(recs[1].labels, TaskLabels::new(Some(false), Some(true), Some(false)));
    }

    #[test]
    fn empty_label_cell_is_missing() {
        let text = format!("{HEADER}\na.png,S1,V1,,,,,,1,,1\n");
        assert_eq!(parse_manifest(&text).unwrap()[0].labels.get(Task::Kidney), None);
    }

    #[test]
    fn duplicate_paths_rejected() {
        let text = format!("{HEADER}\na.png,S1,V1,,,,,,1,0,1\na.png,S2,V1,,,,,,0,1,0\n");
        assert!(matches!(parse_manifest(&text), Err(CohortError::DuplicatePath(p)) if p == "a.png"));
    }

    #[test]
    fn wrong_field_count_rejected() {
        let text = format!("{HEADER}\na.png,S1,V1,1,0,1\n");
        assert!(matches!(parse_manifest(&text), Err(CohortError::MalformedRow { line: 2, .. })));
    }

    #[test]
    fn missing_columns_rejected() {
        assert!(matches!(parse_manifest("image_path,visit_id\n"), Err(CohortError::MissingColumn(c)) if c == "subject_id"));
        let no_kidney = "image_path,subject_id,visit_id,label_hba1c,label_multi\n";
        assert!(matches!(parse_manifest(no_kidney), Err(CohortError::MissingColumn(_))));
    }

    #[test]
    fn labels_derived_from_raw_columns_when_label_columns_absent() {
        let text = "image_path,subject_id,visit_id,hba1c_pct,creatinine,urea,proteinuria,organ_flags\n\
                    a.png,S1,V1,7.0,110,5,0,1\n";
        let recs = parse_manifest(text).unwrap();
        assert_eq!(recs[0].labels, TaskLabels::new(Some(true), Some(true), Some(false)));
    }

    #[test]
    fn manifest_round_trip() {
        let mut r = record("x/a.png", "S9", [Some(true), None, Some(false)]);
        r.clinical.hba1c_pct = Some(7.25);
        r.clinical.organ_flags = Some(3);
        let text = write_manifest(&[r.clone()]);
        assert!(text.starts_with(HEADER));
        assert_eq!(parse_manifest(&text).unwrap(), vec![r]);
    }

    #[test]
    fn label_derivation_rules() {
        let th = LabelThresholds::default();
        let base = ClinicalFields {
            hba1c_pct: Some(7.0),
            creatinine: Some(80.0),
            urea: Some(5.0),
            proteinuria: Some(0.0),
            organ_flags: Some(0),
        };
        let l = derive_labels(&base, &th);
        assert_eq!(l, TaskLabels::new(Some(true), Some(false), Some(false)));
        let high_creat = ClinicalFields { creatinine: Some(120.0), ..base };
        assert_eq!(derive_labels(&high_creat, &th).get(Task::Kidney), Some(true));
        let no_urea = ClinicalFields { urea: None, ..base };
        assert_eq!(derive_labels(&no_urea, &th).get(Task::Kidney), None);
        let two_flags = ClinicalFields { organ_flags: Some(2), ..base };
        assert_eq!(derive_labels(&two_flags, &th).get(Task::Multi), Some(true));
    }

    #[test]
    fn hba1c_threshold_flip_changes_only_hba1c() {
        let th = LabelThresholds::default();
        let low = ClinicalFields {
            hba1c_pct: Some(6.9),
            creatinine: Some(90.0),
            urea: Some(9.0),
            proteinuria: Some(0.0),
            organ_flags: Some(1),
        };
        let high = ClinicalFields { hba1c_pct: Some(7.1), ..low };
        let (a, b) = (derive_labels(&low, &th), derive_labels(&high, &th));
        assert_eq!(a.get(Task::Hba1c), Some(false));
        assert_eq!(b.get(Task::Hba1c), Some(true));
        assert_eq!(a.get(Task::Kidney), b.get(Task::Kidney));
        assert_eq!(a.get(Task::Multi), b.get(Task::Multi));
    }

    fn synthetic_records(n_subjects: usize, seed: u64) -> Vec<ImageRecord> {
        use rand::Rng;
        let mut r = rng::stream(seed, &[7]);
        let mut out = Vec::new();
        for s in 0..n_subjects {
            let labels = [Some(r.random_bool(0.85)), Some(r.random_bool(0.2)), Some(r.random_bool(0.35))];
            for v in 0..r.random_range(1..=4) {
                out.push(record(&format!("S{s}_V{v}.png"), &format!("S{s:03}"), labels));
            }
        }
        out
    }

    #[test]
    fn single_subject_lands_in_one_split() {
        let recs: Vec<_> = (0..3).map(|v| record(&format!("{v}.png"), "only", [Some(true); 3])).collect();
        let a = split_by_subject(&recs, [0.7, 0.15, 0.15], 1).unwrap();
        assert_eq!(a.subjects.len(), 1);
        assert!(matches!(split_by_subject(&[], [0.7, 0.15, 0.15], 1), Err(CohortError::TooFewSubjects)));
    }

    #[test]
    fn hundred_subjects_seed_42() {
        let recs: Vec<_> = (0..100)
            .map(|s| record(&format!("{s}.png"), &format!("S{s:03}"), [Some(s % 7 != 0), Some(s % 5 == 0), Some(s % 3 == 0)]))
            .collect();
        let a = split_by_subject(&recs, [0.70, 0.15, 0.15], 42).unwrap();
        let b = split_by_subject(&recs, [0.70, 0.15, 0.15], 42).unwrap();
        assert_eq!(a, b);
        let counts = Split::ALL.map(|s| a.subjects_in(s).count());
        assert_eq!(counts.iter().sum::<usize>(), 100);
        for (c, target) in counts.iter().zip([70, 15, 15]) {
            assert!((*c as i64 - target).abs() <= 5, "{counts:?}");
        }
    }

    #[test]
    fn splits_are_disjoint_and_stratified() {
        let recs = synthetic_records(200, 3);
        let a = split_by_subject(&recs, [0.7, 0.15, 0.15], 11).unwrap();
        let sets: Vec<HashSet<&str>> = Split::ALL.iter().map(|s| a.subjects_in(*s).collect()).collect();
        assert!(sets[0].is_disjoint(&sets[1]) && sets[0].is_disjoint(&sets[2]) && sets[1].is_disjoint(&sets[2]));
        let n = recs.len() as f64;
        for task in Task::ALL {
            let overall = recs.iter().filter(|r| r.labels.get(task) == Some(true)).count() as f64 / n;
            for split in Split::ALL {
                let part = a.select(&recs, split);
                let prev = part.iter().filter(|r| r.labels.get(task) == Some(true)).count() as f64 / part.len() as f64;
                assert!((prev - overall).abs() <= 0.05, "{task} {split:?}: {prev} vs {overall}");
            }
        }
    }

    #[test]
    fn split_csv_round_trip() {
        let recs = synthetic_records(20, 5);
        let a = split_by_subject(&recs, [0.6, 0.2, 0.2], 5).unwrap();
        assert_eq!(SplitAssignment::from_csv(&a.to_csv()).unwrap(), a);
        assert!(SplitAssignment::from_csv("bogus\n").is_err());
    }

    #[test]
    fn class_weights() {
        let balanced: Vec<_> = (0..10).map(|i| record(&i.to_string(), "s", [Some(i % 2 == 0); 3])).collect();
        let w = compute_class_weights(&balanced).unwrap();
        assert_eq!((w.task(Task::Kidney).negative, w.task(Task::Kidney).positive), (1.0, 1.0));

        let skewed: Vec<_> = (0..100).map(|i| record(&i.to_string(), "s", [Some(i < 20); 3])).collect();
        let w = compute_class_weights(&skewed).unwrap();
        let p = w.task(Task::Hba1c);
        assert_eq!((p.negative, p.positive), (0.625, 2.5));
        assert_eq!(p.positive / p.negative, 4.0);

        let one_class: Vec<_> = (0..4).map(|i| record(&i.to_string(), "s", [Some(true); 3])).collect();
        let w = compute_class_weights(&one_class).unwrap();
        assert!(w.task(Task::Multi).missing_class);
        assert_eq!(w.task(Task::Multi).negative, 0.0);

        let unlabeled = vec![record("a", "s", [None, Some(true), Some(false)])];
        assert!(matches!(compute_class_weights(&unlabeled), Err(CohortError::NoLabeledSamples(Task::Hba1c))));
    }
}
