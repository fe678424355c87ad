//! Subject records, cohort manifests and stratified train/val/test splitting.

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, IoContext, Result};
use crate::volume::VolumeHeader;

pub const MANIFEST_HEADER: [&str; 7] = [
    "subject_id",
    "age",
    "sex",
    "diagnosis",
    "hy_stage",
    "site",
    "volume_ref",
];

pub const MAX_STAGE: u8 = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Sex {
    #[serde(rename = "F")]
    Female,
    #[serde(rename = "M")]
    Male,
}

impl Sex {
    pub fn code(self) -> &'static str {
        match self {
            Sex::Female => "F",
            Sex::Male => "M",
        }
    }

    /// Binary target for the sex head: male = 1.
    pub fn label(self) -> f32 {
        match self {
            Sex::Female => 0.0,
            Sex::Male => 1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Diagnosis {
    #[serde(rename = "CN")]
    Control,
    #[serde(rename = "PD")]
    Patient,
}

impl Diagnosis {
    pub fn code(self) -> &'static str {
        match self {
            Diagnosis::Control => "CN",
            Diagnosis::Patient => "PD",
        }
    }

    /// Binary target for the diagnosis head: patient = 1.
    pub fn label(self) -> f32 {
        match self {
            Diagnosis::Control => 0.0,
            Diagnosis::Patient => 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubjectRecord {
    pub subject_id: String,
    pub age: f64,
    pub sex: Sex,
    pub diagnosis: Diagnosis,
    /// Hoehn & Yahr stage; present exactly for patients.
    pub hy_stage: Option<u8>,
    pub site: String,
    pub volume_ref: String,
}

impl SubjectRecord {
    pub fn validate(&self) -> std::result::Result<(), String> {
        if self.subject_id.trim().is_empty() {
            return Err("empty subject_id".into());
        }
        if !(self.age > 0.0 && self.age < 120.0) {
            return Err(format!("age {} outside (0, 120)", self.age));
        }
        match (self.diagnosis, self.hy_stage) {
            (Diagnosis::Control, Some(s)) => Err(format!("control carries H&Y stage {s}")),
            (Diagnosis::Patient, None) => Err("patient without H&Y stage".into()),
            (Diagnosis::Patient, Some(s)) if s > MAX_STAGE => {
                Err(format!("H&Y stage {s} outside 0..={MAX_STAGE}"))
            }
            _ => Ok(()),
        }
    }

    pub fn is_patient(&self) -> bool {
        self.diagnosis == Diagnosis::Patient
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CohortManifest {
    pub name: String,
    pub records: Vec<SubjectRecord>,
    pub canonical_shape: [usize; 3],
    /// Directory that relative `volume_ref`s resolve against.
    pub base_dir: PathBuf,
}

impl CohortManifest {
    /// Builds a manifest from in-memory records, checking record invariants and ID uniqueness.
    pub fn new(
        name: impl Into<String>,
        records: Vec<SubjectRecord>,
        canonical_shape: [usize; 3],
        base_dir: impl Into<PathBuf>,
    ) -> Result<Self> {
        let name = name.into();
        if canonical_shape.iter().any(|&d| d == 0) {
            return Err(Error::Manifest(format!(
                "canonical shape {canonical_shape:?} has a zero axis"
            )));
        }
        let mut seen = HashSet::new();
        for (i, r) in records.iter().enumerate() {
            r.validate()
                .map_err(|m| Error::Manifest(format!("{name}: record {} ({}): {m}", i + 1, r.subject_id)))?;
            if !seen.insert(r.subject_id.as_str()) {
                return Err(Error::Manifest(format!(
                    "{name}: duplicate subject_id {}",
                    r.subject_id
                )));
            }
        }
        Ok(Self {
            name,
            records,
            canonical_shape,
            base_dir: base_dir.into(),
        })
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn find(&self, subject_id: &str) -> Option<&SubjectRecord> {
        self.records.iter().find(|r| r.subject_id == subject_id)
    }

    pub fn volume_path(&self, record: &SubjectRecord) -> PathBuf {
        self.base_dir.join(&record.volume_ref)
    }

    pub fn n_controls(&self) -> usize {
        self.records.iter().filter(|r| !r.is_patient()).count()
    }

    pub fn n_patients(&self) -> usize {
        self.records.iter().filter(|r| r.is_patient()).count()
    }

    /// Number of patients at each H&Y stage 0..=4.
    pub fn stage_counts(&self) -> [usize; 5] {
        let mut counts = [0; 5];
        for s in self.records.iter().filter_map(|r| r.hy_stage) {
            counts[s as usize] += 1;
        }
        counts
    }

    fn subset(&self, name: String, ids: &HashSet<&str>) -> CohortManifest {
        CohortManifest {
            name,
            records: self
                .records
                .iter()
                .filter(|r| ids.contains(r.subject_id.as_str()))
                .cloned()
                .collect(),
            canonical_shape: self.canonical_shape,
            base_dir: self.base_dir.clone(),
        }
    }

    /// Writes the manifest CSV. `volume_ref`s are written verbatim.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent).at(parent)?;
        }
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(MANIFEST_HEADER)?;
        for r in &self.records {
            w.write_record([
                r.subject_id.clone(),
                r.age.to_string(),
                r.sex.code().to_string(),
                r.diagnosis.code().to_string(),
                r.hy_stage.map(|s| s.to_string()).unwrap_or_default(),
                r.site.clone(),
                r.volume_ref.clone(),
            ])?;
        }
        w.flush().at(path)?;
        Ok(())
    }
}

/// Loads and validates a manifest CSV.
///
/// Every `volume_ref` must point at a readable volume whose sidecar shape matches
/// `canonical_shape`; when `canonical_shape` is `None` the first volume's shape
/// becomes canonical.
pub fn load_manifest(path: &Path, canonical_shape: Option<[usize; 3]>) -> Result<CohortManifest> {
    let row_err = |row: usize, subject: &str, message: String| Error::ManifestRow {
        path: path.to_path_buf(),
        row,
        subject: subject.to_string(),
        message,
    };

    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| match e.kind() {
            csv::ErrorKind::Io(_) => Error::Manifest(format!("{}: {e}", path.display())),
            _ => Error::Csv(e),
        })?;
    let header = reader.headers()?.clone();
    if header.iter().collect::<Vec<_>>() != MANIFEST_HEADER {
        return Err(Error::Manifest(format!(
            "{}: header must be exactly {}",
            path.display(),
            MANIFEST_HEADER.join(",")
        )));
    }

    let base_dir = path
        .parent()
        .map(Path::to_path_buf)
        .unwrap_or_else(|| PathBuf::from("."));
    let mut records = Vec::new();
    let mut seen = HashSet::new();
    let mut canonical = canonical_shape;

    for (i, row) in reader.records().enumerate() {
        let row_no = i + 1;
        let row = row?;
        let id = row.get(0).unwrap_or("").to_string();
        if id.is_empty() {
            return Err(row_err(row_no, "", "missing subject_id".into()));
        }
        if !seen.insert(id.clone()) {
            return Err(row_err(row_no, &id, "duplicate subject_id".into()));
        }
        let age: f64 = row[1]
            .parse()
            .map_err(|_| row_err(row_no, &id, format!("unparseable age {:?}", &row[1])))?;
        let sex = match &row[2] {
            "F" => Sex::Female,
            "M" => Sex::Male,
            other => return Err(row_err(row_no, &id, format!("sex must be F or M, got {other:?}"))),
        };
        let diagnosis = match &row[3] {
            "CN" => Diagnosis::Control,
            "PD" => Diagnosis::Patient,
            other => {
                return Err(row_err(
                    row_no,
                    &id,
                    format!("diagnosis must be CN or PD, got {other:?}"),
                ))
            }
        };
        let hy_stage = match &row[4] {
            "" => None,
            s => Some(
                s.parse::<u8>()
                    .map_err(|_| row_err(row_no, &id, format!("unparseable hy_stage {s:?}")))?,
            ),
        };
        let record = SubjectRecord {
            subject_id: id.clone(),
            age,
            sex,
            diagnosis,
            hy_stage,
            site: row[5].to_string(),
            volume_ref: row[6].to_string(),
        };
        record.validate().map_err(|m| row_err(row_no, &id, m))?;

        let vpath = base_dir.join(&record.volume_ref);
        let header = VolumeHeader::read(&vpath)
            .map_err(|e| row_err(row_no, &id, format!("unreadable volume reference: {e}")))?;
        let len = fs::metadata(&vpath)
            .map_err(|e| row_err(row_no, &id, format!("unreadable volume reference {}: {e}", vpath.display())))?
            .len();
        if len != (header.shape.iter().product::<usize>() * 4) as u64 {
            return Err(row_err(
                row_no,
                &id,
                format!("volume {} size does not match its header", vpath.display()),
            ));
        }
        match canonical {
            None => canonical = Some(header.shape),
            Some(c) if c != header.shape => {
                return Err(row_err(
                    row_no,
                    &id,
                    format!("volume shape {:?} differs from canonical {c:?}", header.shape),
                ))
            }
            _ => {}
        }
        records.push(record);
    }

    let name = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    let canonical_shape =
        canonical.ok_or_else(|| Error::Manifest(format!("{}: no records", path.display())))?;
    Ok(CohortManifest {
        name,
        records,
        canonical_shape,
        base_dir,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StratifyKey {
    Diagnosis,
    HyStage,
    Sex,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitSpec {
    pub train_fraction: f64,
    pub val_fraction: f64,
    pub test_fraction: f64,
    pub seed: u64,
    #[serde(default = "SplitSpec::default_stratify")]
    pub stratify_by: Vec<StratifyKey>,
}

impl Default for SplitSpec {
    fn default() -> Self {
        Self {
            train_fraction: 0.8,
            val_fraction: 0.1,
            test_fraction: 0.1,
            seed: 0,
            stratify_by: Self::default_stratify(),
        }
    }
}

impl SplitSpec {
    fn default_stratify() -> Vec<StratifyKey> {
        vec![StratifyKey::Diagnosis, StratifyKey::HyStage]
    }

    pub fn fractions(&self) -> [f64; 3] {
        [self.train_fraction, self.val_fraction, self.test_fraction]
    }

    pub fn validate(&self) -> Result<()> {
        let f = self.fractions();
        if f.iter().any(|&x| !(x > 0.0 && x < 1.0)) {
            return Err(Error::InvalidConfig(format!(
                "split fractions must each lie in (0, 1), got {f:?}"
            )));
        }
        if (f.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidConfig(format!(
                "split fractions must sum to 1, got {}",
                f.iter().sum::<f64>()
            )));
        }
        Ok(())
    }
}

/// Largest-remainder apportionment of `n` items over `fractions`.
///
/// Leftover items go to the largest fractional parts; equal remainders favour
/// the earlier split (train, val, test).
pub fn apportion(n: usize, fractions: &[f64; 3]) -> [usize; 3] {
    let quotas = fractions.map(|f| f * n as f64);
    let mut counts = quotas.map(|q| q.floor() as usize);
    let assigned: usize = counts.iter().sum();
    let mut order = [0usize, 1, 2];
    order.sort_by(|&a, &b| {
        let ra = quotas[a] - quotas[a].floor();
        let rb = quotas[b] - quotas[b].floor();
        rb.partial_cmp(&ra).unwrap().then(a.cmp(&b))
    });
    for &k in order.iter().take(n.saturating_sub(assigned)) {
        counts[k] += 1;
    }
    counts
}

type StratumKey = (Option<Diagnosis>, Option<Option<u8>>, Option<Sex>);

fn stratum_key(r: &SubjectRecord, keys: &[StratifyKey]) -> StratumKey {
    (
        keys.contains(&StratifyKey::Diagnosis).then_some(r.diagnosis),
        keys.contains(&StratifyKey::HyStage).then_some(r.hy_stage),
        keys.contains(&StratifyKey::Sex).then_some(r.sex),
    )
}

/// Splits a manifest into disjoint train/val/test manifests.
///
/// Each stratum is shuffled with a seeded stream and apportioned by
/// [`apportion`]; records keep their manifest order inside each split.
pub fn split_manifest(
    manifest: &CohortManifest,
    spec: &SplitSpec,
) -> Result<(CohortManifest, CohortManifest, CohortManifest)> {
    spec.validate()?;
    if manifest.is_empty() {
        return Err(Error::Manifest(format!("{}: cannot split an empty manifest", manifest.name)));
    }
    let mut strata: BTreeMap<StratumKey, Vec<&str>> = BTreeMap::new();
    for r in &manifest.records {
        strata
            .entry(stratum_key(r, &spec.stratify_by))
            .or_default()
            .push(r.subject_id.as_str());
    }

    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut parts: [HashSet<&str>; 3] = Default::default();
    let fractions = spec.fractions();
    for (key, mut ids) in strata {
        if ids.len() < 3 {
            log::warn!(
                "{}: stratum {key:?} has {} record(s), fewer than the 3 splits",
                manifest.name,
                ids.len()
            );
        }
        ids.shuffle(&mut rng);
        let counts = apportion(ids.len(), &fractions);
        let mut it = ids.into_iter();
        for (part, &count) in parts.iter_mut().zip(&counts) {
            part.extend(it.by_ref().take(count));
        }
    }

    let [train, val, test] = parts;
    Ok((
        manifest.subset(format!("{}_train", manifest.name), &train),
        manifest.subset(format!("{}_val", manifest.name), &val),
        manifest.subset(format!("{}_test", manifest.name), &test),
    ))
}
