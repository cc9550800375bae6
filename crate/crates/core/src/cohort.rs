//! Longitudinal pair records and the comma-separated cohort manifest.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::path::{Path, PathBuf};

use crate::error::{io_err, Result, TafError};

pub const INTERVALS: [u32; 3] = [6, 12, 24];
pub const MANIFEST_COLUMNS: [&str; 5] = ["subject_id", "baseline", "followup", "interval_months", "label"];

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PairRecord {
    pub subject_id: String,
    pub baseline: PathBuf,
    pub followup: PathBuf,
    pub interval_months: u32,
    /// 1 = converter, 0 = stable.
    pub label: u8,
}

impl PairRecord {
    pub fn validate(&self) -> Result<()> {
        if self.subject_id.is_empty() {
            return Err(TafError::Schema("empty subject_id".into()));
        }
        if self.baseline == self.followup {
            return Err(TafError::Schema(format!("{}: baseline and followup are the same file", self.subject_id)));
        }
        if !INTERVALS.contains(&self.interval_months) {
            return Err(TafError::Schema(format!("{}: interval {} not in {{6,12,24}}", self.subject_id, self.interval_months)));
        }
        if self.label > 1 {
            return Err(TafError::Schema(format!("{}: label {} not in {{0,1}}", self.subject_id, self.label)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Cohort {
    pairs: Vec<PairRecord>,
    subjects: BTreeMap<String, u8>,
}

impl Cohort {
    /// Validates every record, rejects duplicate `(subject, baseline, followup)`
    /// rows and subjects whose pairs disagree on the label.
    pub fn new(pairs: Vec<PairRecord>) -> Result<Self> {
        let mut seen = HashSet::new();
        let mut subjects = BTreeMap::new();
        for p in &pairs {
            p.validate()?;
            if !seen.insert((p.subject_id.clone(), p.baseline.clone(), p.followup.clone())) {
                return Err(TafError::Schema(format!("duplicate row for subject {}", p.subject_id)));
            }
            match subjects.insert(p.subject_id.clone(), p.label) {
                Some(prev) if prev != p.label => {
                    return Err(TafError::Schema(format!("subject {} has conflicting labels", p.subject_id)));
                }
                _ => {}
            }
        }
        Ok(Self { pairs, subjects })
    }

    pub fn pairs(&self) -> &[PairRecord] {
        &self.pairs
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn subjects(&self) -> BTreeSet<&str> {
        self.subjects.keys().map(String::as_str).collect()
    }

    pub fn subject_label(&self, subject: &str) -> Option<u8> {
        self.subjects.get(subject).copied()
    }

    /// `(stable, converter)` pair tallies.
    pub fn class_counts(&self) -> (usize, usize) {
        let pos = self.pairs.iter().filter(|p| p.label == 1).count();
        (self.pairs.len() - pos, pos)
    }

    /// `(stable, converter)` subject tallies.
    pub fn subject_class_counts(&self) -> (usize, usize) {
        let pos = self.subjects.values().filter(|&&l| l == 1).count();
        (self.subjects.len() - pos, pos)
    }

    /// Keeps only the pairs whose subject is in `keep`.
    pub fn restrict<'a>(&self, keep: impl IntoIterator<Item = &'a str>) -> Cohort {
        let keep: HashSet<&str> = keep.into_iter().collect();
        let pairs = self.pairs.iter().filter(|p| keep.contains(p.subject_id.as_str())).cloned().collect();
        Cohort::new(pairs).expect("subset of a valid cohort")
    }

    pub fn filter_interval(&self, months: u32) -> Cohort {
        let pairs = self.pairs.iter().filter(|p| p.interval_months == months).cloned().collect();
        Cohort::new(pairs).expect("subset of a valid cohort")
    }

    /// Writes the manifest. Paths under the manifest's directory are stored
    /// relative to it.
    pub fn write_manifest(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let base = path.parent().unwrap_or(Path::new(""));
        let rel = |p: &Path| p.strip_prefix(base).unwrap_or(p).to_string_lossy().into_owned();
        let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
        w.write_record(MANIFEST_COLUMNS).map_err(|e| csv_err(path, e))?;
        for p in &self.pairs {
            w.write_record([
                p.subject_id.clone(),
                rel(&p.baseline),
                rel(&p.followup),
                p.interval_months.to_string(),
                p.label.to_string(),
            ])
            .map_err(|e| csv_err(path, e))?;
        }
        w.flush().map_err(io_err(path))
    }
}

fn csv_err(path: &Path, e: csv::Error) -> TafError {
    if e.is_io_error() {
        match e.into_kind() {
            csv::ErrorKind::Io(source) => TafError::Io { path: path.to_path_buf(), source },
            _ => unreachable!(),
        }
    } else {
        TafError::Schema(format!("{}: {e}", path.display()))
    }
}

/// Loads a manifest. Relative volume paths resolve against the manifest's
/// directory.
pub fn manifest_load(path: impl AsRef<Path>) -> Result<Cohort> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(io_err(path))?;
    let base = path.parent().unwrap_or(Path::new(""));
    manifest_parse(&text, base)
}

pub fn manifest_parse(text: &str, base: &Path) -> Result<Cohort> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(text.as_bytes());
    let header = rdr.headers().map_err(|e| TafError::Schema(e.to_string()))?.clone();
    let col = |name: &str| {
        header
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| TafError::Schema(format!("missing column {name}")))
    };
    let idx: Vec<usize> = MANIFEST_COLUMNS.iter().map(|c| col(c)).collect::<Result<_>>()?;
    let mut pairs = Vec::new();
    for (row, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| TafError::Schema(e.to_string()))?;
        let field = |i: usize| rec.get(idx[i]).unwrap_or("");
        let resolve = |s: &str| {
            let p = PathBuf::from(s);
            if p.is_absolute() {
                p
            } else {
                base.join(p)
            }
        };
        let interval_months = field(3)
            .parse()
            .map_err(|_| TafError::Schema(format!("row {}: bad interval {:?}", row + 1, field(3))))?;
        let label = field(4)
            .parse()
            .map_err(|_| TafError::Schema(format!("row {}: bad label {:?}", row + 1, field(4))))?;
        pairs.push(PairRecord {
            subject_id: field(0).to_string(),
            baseline: resolve(field(1)),
            followup: resolve(field(2)),
            interval_months,
            label,
        });
    }
    Cohort::new(pairs)
}

#[cfg(test)]
mod tests {
    use super::*;

    const HEADER: &str = "subject_id,baseline,followup,interval_months,label\n";

    #[test]
    fn two_row_manifest() {
        let text = format!("{HEADER}s1,a.vol,b.vol,12,1\ns2,c.vol,d.vol,6,0\n");
        let c = manifest_parse(&text, Path::new("/data")).unwrap();
        assert_eq!(c.len(), 2);
        assert_eq!(c.subjects().len(), 2);
        assert_eq!(c.class_counts(), (1, 1));
        assert_eq!(c.pairs()[0].baseline, PathBuf::from("/data/a.vol"));
    }

    #[test]
    fn bad_interval_and_label_are_schema_errors() {
        let text = format!("{HEADER}s1,a.vol,b.vol,7,1\n");
        assert!(matches!(manifest_parse(&text, Path::new("")), Err(TafError::Schema(_))));
        let text = format!("{HEADER}s1,a.vol,b.vol,12,2\n");
        assert!(matches!(manifest_parse(&text, Path::new("")), Err(TafError::Schema(_))));
    }

    #[test]
    fn duplicates_and_self_pairs_rejected() {
        let text = format!("{HEADER}s1,a.vol,b.vol,12,1\ns1,a.vol,b.vol,24,1\n");
        assert!(manifest_parse(&text, Path::new("")).is_err());
        let text = format!("{HEADER}s1,a.vol,a.vol,12,1\n");
        assert!(manifest_parse(&text, Path::new("")).is_err());
    }

    #[test]
    fn column_order_is_free() {
        let text = "label,interval_months,subject_id,followup,baseline\n0,24,s9,f.vol,b.vol\n";
        let c = manifest_parse(text, Path::new("")).unwrap();
        assert_eq!(c.pairs()[0].interval_months, 24);
        assert_eq!(c.pairs()[0].followup, PathBuf::from("f.vol"));
    }
}
