//! Reading the person, test and admission files and linking them by person.
//!
//! All three files are headered CSV. Columns are located by name, so extra
//! columns and any column order are accepted.

use std::collections::HashMap;
use std::fs::File;
use std::io::{self, BufReader, Read};
use std::path::{Path, PathBuf};

use chrono::{NaiveDate, NaiveDateTime};
use csv::StringRecord;
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::domain::{
    AdmissionRecord, AgeGroup, DiagnosisEntry, IcdCode, PersonId, PersonRecord, Sex, TestRecord,
    TestResult,
};

#[derive(Debug, Error)]
pub enum IngestError {
    #[error("cannot open {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("malformed delimited input: {0}")]
    Csv(#[from] csv::Error),
    #[error("missing required column {column:?}")]
    Schema { column: &'static str },
    #[error("line {line}: {message}")]
    Row { line: u64, message: String },
    #[error("duplicate admission for {person} at {admit_time}; deduplicate first")]
    DuplicateAdmission {
        person: PersonId,
        admit_time: NaiveDateTime,
    },
    #[error("person {0} listed twice in the persons file")]
    DuplicatePerson(PersonId),
}

pub const TEST_COLUMNS: [&str; 3] = ["person_id", "specimen_date", "result"];
pub const ADMISSION_COLUMNS: [&str; 4] = ["person_id", "admit_time", "discharge_time", "dx_codes"];
pub const PERSON_COLUMNS: [&str; 4] = ["person_id", "age_group", "sex", "county"];

const DATETIME_FORMATS: [&str; 2] = ["%Y-%m-%dT%H:%M:%S", "%Y-%m-%d %H:%M:%S"];

pub fn open(path: &Path) -> Result<BufReader<File>, IngestError> {
    File::open(path)
        .map(|f| BufReader::with_capacity(1 << 20, f))
        .map_err(|source| IngestError::Io {
            path: path.to_owned(),
            source,
        })
}

/// Streaming reader over a headered CSV with named columns.
struct Columns<R: Read, const N: usize> {
    reader: csv::Reader<R>,
    idx: [usize; N],
    record: StringRecord,
}

impl<R: Read, const N: usize> Columns<R, N> {
    fn new(input: R, names: [&'static str; N], optional: &[&str]) -> Result<Self, IngestError> {
        let mut reader = csv::ReaderBuilder::new()
            .trim(csv::Trim::All)
            .flexible(false)
            .from_reader(input);
        let headers = reader.headers()?.clone();
        let mut idx = [usize::MAX; N];
        for (slot, name) in idx.iter_mut().zip(names) {
            match headers.iter().position(|h| h.eq_ignore_ascii_case(name)) {
                Some(i) => *slot = i,
                None if optional.contains(&name) => {}
                None => return Err(IngestError::Schema { column: name }),
            }
        }
        Ok(Columns {
            reader,
            idx,
            record: StringRecord::new(),
        })
    }

    /// Advance; returns the line number of the new row.
    fn advance(&mut self) -> Option<Result<u64, IngestError>> {
        match self.reader.read_record(&mut self.record) {
            Ok(true) => Some(Ok(self.record.position().map_or(0, |p| p.line()))),
            Ok(false) => None,
            Err(e) => Some(Err(e.into())),
        }
    }

    fn field(&self, col: usize) -> &str {
        match self.idx[col] {
            usize::MAX => "",
            i => self.record.get(i).unwrap_or(""),
        }
    }
}

fn row_err(line: u64, message: impl Into<String>) -> IngestError {
    IngestError::Row {
        line,
        message: message.into(),
    }
}

fn parse_date(s: &str, line: u64) -> Result<NaiveDate, IngestError> {
    NaiveDate::parse_from_str(s, "%Y-%m-%d").map_err(|_| row_err(line, format!("bad date {s:?}")))
}

fn parse_datetime(s: &str, line: u64) -> Result<NaiveDateTime, IngestError> {
    DATETIME_FORMATS
        .iter()
        .find_map(|f| NaiveDateTime::parse_from_str(s, f).ok())
        .ok_or_else(|| row_err(line, format!("bad timestamp {s:?}")))
}

fn non_empty_id(s: &str, line: u64) -> Result<PersonId, IngestError> {
    if s.is_empty() {
        return Err(row_err(line, "empty person_id"));
    }
    Ok(PersonId(s.to_owned()))
}

/// Iterator over the rows of a tests file.
pub struct TestReader<R: Read>(Columns<R, 3>);

impl<R: Read> TestReader<R> {
    pub fn new(input: R) -> Result<Self, IngestError> {
        Columns::new(input, TEST_COLUMNS, &[]).map(TestReader)
    }
}

impl<R: Read> Iterator for TestReader<R> {
    type Item = Result<TestRecord, IngestError>;

    fn next(&mut self) -> Option<Self::Item> {
        let line = match self.0.advance()? {
            Ok(l) => l,
            Err(e) => return Some(Err(e)),
        };
        let c = &self.0;
        Some((|| {
            Ok(TestRecord {
                person_id: non_empty_id(c.field(0), line)?,
                specimen_date: parse_date(c.field(1), line)?,
                result: c
                    .field(2)
                    .parse::<TestResult>()
                    .map_err(|e| row_err(line, e.to_string()))?,
            })
        })())
    }
}

pub fn parse_tests<R: Read>(input: R) -> Result<Vec<TestRecord>, IngestError> {
    TestReader::new(input)?.collect()
}

/// Parse a `;`-separated diagnosis list. Each entry is `CODE[:A][:P]`; list
/// order is priority order.
pub fn parse_dx_codes(s: &str) -> Result<Vec<DiagnosisEntry>, String> {
    let s = s.trim();
    if s.is_empty() {
        return Ok(Vec::new());
    }
    s.split(';')
        .enumerate()
        .map(|(pos, entry)| {
            let mut parts = entry.trim().split(':');
            let code = IcdCode::parse(parts.next().unwrap_or("")).map_err(|e| e.to_string())?;
            let mut is_admitting = false;
            let mut is_primary_final = false;
            for flag in parts {
                match flag.trim() {
                    "A" | "a" => is_admitting = true,
                    "P" | "p" => is_primary_final = true,
                    other => return Err(format!("unknown diagnosis flag {other:?} in {entry:?}")),
                }
            }
            Ok(DiagnosisEntry {
                code,
                is_admitting,
                is_primary_final,
                position: pos as u32,
            })
        })
        .collect()
}

/// Inverse of [`parse_dx_codes`].
pub fn format_dx_codes(diagnoses: &[DiagnosisEntry]) -> String {
    let mut out = String::new();
    for (i, d) in diagnoses.iter().enumerate() {
        if i > 0 {
            out.push(';');
        }
        out.push_str(d.code.as_str());
        if d.is_admitting {
            out.push_str(":A");
        }
        if d.is_primary_final {
            out.push_str(":P");
        }
    }
    out
}

pub struct AdmissionReader<R: Read>(Columns<R, 4>);

impl<R: Read> AdmissionReader<R> {
    pub fn new(input: R) -> Result<Self, IngestError> {
        Columns::new(input, ADMISSION_COLUMNS, &[]).map(AdmissionReader)
    }
}

impl<R: Read> Iterator for AdmissionReader<R> {
    type Item = Result<AdmissionRecord, IngestError>;

    fn next(&mut self) -> Option<Self::Item> {
        let line = match self.0.advance()? {
            Ok(l) => l,
            Err(e) => return Some(Err(e)),
        };
        let c = &self.0;
        Some((|| {
            let admit_time = parse_datetime(c.field(1), line)?;
            let discharge_time = match c.field(2) {
                "" => None,
                s => Some(parse_datetime(s, line)?),
            };
            if discharge_time.is_some_and(|d| d < admit_time) {
                return Err(row_err(line, "discharge_time precedes admit_time"));
            }
            Ok(AdmissionRecord {
                person_id: non_empty_id(c.field(0), line)?,
                admit_time,
                discharge_time,
                diagnoses: parse_dx_codes(c.field(3)).map_err(|m| row_err(line, m))?,
            })
        })())
    }
}

pub fn parse_admissions<R: Read>(input: R) -> Result<Vec<AdmissionRecord>, IngestError> {
    AdmissionReader::new(input)?.collect()
}

pub struct PersonReader<R: Read>(Columns<R, 4>);

impl<R: Read> PersonReader<R> {
    pub fn new(input: R) -> Result<Self, IngestError> {
        Columns::new(input, PERSON_COLUMNS, &["sex", "county"]).map(PersonReader)
    }
}

impl<R: Read> Iterator for PersonReader<R> {
    type Item = Result<PersonRecord, IngestError>;

    fn next(&mut self) -> Option<Self::Item> {
        let line = match self.0.advance()? {
            Ok(l) => l,
            Err(e) => return Some(Err(e)),
        };
        let c = &self.0;
        Some((|| {
            let age_group = c
                .field(1)
                .parse::<AgeGroup>()
                .map_err(|e| row_err(line, e.to_string()))?;
            let sex = match c.field(2) {
                "" => None,
                s => Some(s.parse::<Sex>().map_err(|e| row_err(line, e.to_string()))?),
            };
            let county = match c.field(3) {
                "" => None,
                s => Some(s.to_owned()),
            };
            Ok(PersonRecord {
                person_id: non_empty_id(c.field(0), line)?,
                age_group,
                sex,
                county,
            })
        })())
    }
}

pub fn parse_persons<R: Read>(input: R) -> Result<Vec<PersonRecord>, IngestError> {
    PersonReader::new(input)?.collect()
}

fn tie_break_draw(seed: u64, person: &PersonId, admit_time: &NaiveDateTime) -> u64 {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(person.as_str().as_bytes());
    h.update([0u8]);
    h.update(admit_time.and_utc().timestamp().to_le_bytes());
    let digest = h.finalize();
    let mut word = [0u8; 8];
    word.copy_from_slice(&digest[..8]);
    u64::from_le_bytes(word)
}

/// Sort key that makes tied records comparable independent of input order.
fn canonical_key(rec: &AdmissionRecord) -> (Option<NaiveDateTime>, String) {
    (rec.discharge_time, format_dx_codes(&rec.diagnoses))
}

/// Keep one record per `(person_id, admit_time)`: the one with the most
/// diagnosis codes, ties broken by a draw keyed on `(seed, person_id,
/// admit_time)`. Output is sorted by key and does not depend on input order.
pub fn dedup_admissions(mut raw: Vec<AdmissionRecord>, seed: u64) -> Vec<AdmissionRecord> {
    raw.sort_by(|a, b| {
        (&a.person_id, a.admit_time)
            .cmp(&(&b.person_id, b.admit_time))
            .then_with(|| b.diagnoses.len().cmp(&a.diagnoses.len()))
            .then_with(|| canonical_key(a).cmp(&canonical_key(b)))
    });
    let mut out = Vec::with_capacity(raw.len());
    let mut rest = raw.as_slice();
    while let Some(first) = rest.first() {
        let group_len = rest
            .iter()
            .take_while(|r| r.person_id == first.person_id && r.admit_time == first.admit_time)
            .count();
        let group = &rest[..group_len];
        let best = group[0].diagnoses.len();
        let tied = group.iter().take_while(|r| r.diagnoses.len() == best).count();
        let pick = if tied == 1 {
            0
        } else {
            (tie_break_draw(seed, &first.person_id, &first.admit_time) % tied as u64) as usize
        };
        out.push(group[pick].clone());
        rest = &rest[group_len..];
    }
    out
}

/// A person's collapsed test outcome on one day.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DayTest {
    pub date: NaiveDate,
    pub result: TestResult,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Demographics {
    pub age_group: AgeGroup,
    pub sex: Option<crate::domain::Sex>,
    pub county: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LinkedAdmission {
    /// Dense person index into the store.
    pub person: u32,
    pub record: AdmissionRecord,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct StoreDiagnostics {
    pub persons: usize,
    pub test_rows: usize,
    pub test_days: usize,
    pub admissions: usize,
    /// Test rows whose person has no demographics.
    pub tests_without_demographics: usize,
    pub admissions_without_demographics: usize,
    /// Same-day repeat tests collapsed into one day outcome.
    pub same_day_tests_collapsed: usize,
}

/// Tests, admissions and demographics indexed by a dense person index.
#[derive(Debug, Clone, Default)]
pub struct LinkedStore {
    ids: Vec<PersonId>,
    index: HashMap<PersonId, u32>,
    demographics: Vec<Option<Demographics>>,
    test_offsets: Vec<usize>,
    tests: Vec<DayTest>,
    admissions: Vec<LinkedAdmission>,
    date_range: Option<(NaiveDate, NaiveDate)>,
    diagnostics: StoreDiagnostics,
}

impl LinkedStore {
    pub fn person_count(&self) -> usize {
        self.ids.len()
    }

    pub fn person_index(&self, id: &PersonId) -> Option<u32> {
        self.index.get(id).copied()
    }

    pub fn person_id(&self, idx: u32) -> &PersonId {
        &self.ids[idx as usize]
    }

    pub fn demographics(&self, idx: u32) -> Option<&Demographics> {
        self.demographics[idx as usize].as_ref()
    }

    /// Day outcomes sorted by date.
    pub fn tests(&self, idx: u32) -> &[DayTest] {
        let i = idx as usize;
        &self.tests[self.test_offsets[i]..self.test_offsets[i + 1]]
    }

    /// Day outcomes with `from <= date <= to`.
    pub fn tests_between(&self, idx: u32, from: NaiveDate, to: NaiveDate) -> &[DayTest] {
        let all = self.tests(idx);
        let start = all.partition_point(|t| t.date < from);
        let end = all.partition_point(|t| t.date <= to);
        if start >= end {
            &[]
        } else {
            &all[start..end]
        }
    }

    pub fn admissions(&self) -> &[LinkedAdmission] {
        &self.admissions
    }

    /// Earliest and latest test or admission date.
    pub fn date_range(&self) -> Option<(NaiveDate, NaiveDate)> {
        self.date_range
    }

    pub fn diagnostics(&self) -> &StoreDiagnostics {
        &self.diagnostics
    }
}

struct Interner {
    ids: Vec<PersonId>,
    index: HashMap<PersonId, u32>,
}

impl Interner {
    fn intern(&mut self, id: PersonId) -> u32 {
        if let Some(i) = self.index.get(&id) {
            return *i;
        }
        let i = self.ids.len() as u32;
        self.ids.push(id.clone());
        self.index.insert(id, i);
        i
    }
}

/// Link deduplicated inputs into a [`LinkedStore`].
///
/// Tests and admissions for people missing from the persons file are kept
/// and counted in the diagnostics. Repeat tests on the same day collapse to
/// the most positive result (positive > negative > inconclusive).
pub fn build_store(
    persons: impl IntoIterator<Item = PersonRecord>,
    tests: impl IntoIterator<Item = TestRecord>,
    admissions: impl IntoIterator<Item = AdmissionRecord>,
) -> Result<LinkedStore, IngestError> {
    let mut interner = Interner {
        ids: Vec::new(),
        index: HashMap::new(),
    };
    let mut demographics: Vec<Option<Demographics>> = Vec::new();
    let mut diagnostics = StoreDiagnostics::default();
    let extend = |range: &mut Option<(NaiveDate, NaiveDate)>, d: NaiveDate| {
        *range = Some(match *range {
            None => (d, d),
            Some((lo, hi)) => (lo.min(d), hi.max(d)),
        });
    };
    let mut date_range = None;

    for p in persons {
        let i = interner.intern(p.person_id.clone()) as usize;
        if i < demographics.len() {
            return Err(IngestError::DuplicatePerson(p.person_id));
        }
        demographics.push(Some(Demographics {
            age_group: p.age_group,
            sex: p.sex,
            county: p.county,
        }));
    }
    let with_demographics = demographics.len();
    diagnostics.persons = with_demographics;

    let mut raw_tests: Vec<(u32, NaiveDate, TestResult)> = Vec::new();
    for t in tests {
        let i = interner.intern(t.person_id);
        if i as usize >= with_demographics {
            diagnostics.tests_without_demographics += 1;
        }
        extend(&mut date_range, t.specimen_date);
        raw_tests.push((i, t.specimen_date, t.result));
    }
    diagnostics.test_rows = raw_tests.len();

    let mut linked: Vec<LinkedAdmission> = Vec::new();
    for a in admissions {
        let i = interner.intern(a.person_id.clone());
        if i as usize >= with_demographics {
            diagnostics.admissions_without_demographics += 1;
        }
        extend(&mut date_range, a.admit_date());
        linked.push(LinkedAdmission {
            person: i,
            record: a,
        });
    }
    linked.sort_by(|a, b| {
        (&a.record.person_id, a.record.admit_time).cmp(&(&b.record.person_id, b.record.admit_time))
    });
    if let Some(w) = linked
        .windows(2)
        .find(|w| w[0].record.person_id == w[1].record.person_id && w[0].record.admit_time == w[1].record.admit_time)
    {
        return Err(IngestError::DuplicateAdmission {
            person: w[0].record.person_id.clone(),
            admit_time: w[0].record.admit_time,
        });
    }
    diagnostics.admissions = linked.len();

    let n_persons = interner.ids.len();
    demographics.resize(n_persons, None);

    // sort by person, then date, most positive result first within a day
    raw_tests.sort_unstable_by(|a, b| (a.0, a.1, b.2).cmp(&(b.0, b.1, a.2)));
    let mut test_offsets = vec![0usize; n_persons + 1];
    let mut day_tests = Vec::with_capacity(raw_tests.len());
    let mut prev: Option<(u32, NaiveDate)> = None;
    for (p, date, result) in raw_tests {
        if prev == Some((p, date)) {
            diagnostics.same_day_tests_collapsed += 1;
            continue;
        }
        prev = Some((p, date));
        test_offsets[p as usize + 1] += 1;
        day_tests.push(DayTest { date, result });
    }
    for i in 0..n_persons {
        test_offsets[i + 1] += test_offsets[i];
    }
    diagnostics.test_days = day_tests.len();

    Ok(LinkedStore {
        ids: interner.ids,
        index: interner.index,
        demographics,
        test_offsets,
        tests: day_tests,
        admissions: linked,
        date_range,
        diagnostics,
    })
}
