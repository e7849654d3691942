//! On-disk study bundles.
//!
//! A study lives in one directory:
//!
//! | file             | contents                                                   |
//! |------------------|------------------------------------------------------------|
//! | `study.json`     | id, description, candidate ids, effective verdicts, provenance, payload checksums |
//! | `volume.json`    | dims, spacing, `"int16-le"` dtype, HU offset 0              |
//! | `volume.raw`     | little-endian i16 voxels, x-fastest                         |
//! | `lobes.raw`      | u8 lobe labels, same layout                                 |
//! | `candidates.json`| candidate list                                              |
//! | `truth.json`     | ground truth list (optional)                                |
//! | `decisions.json` | full verdict history, model and clinician                   |
//! | `metrics.json`   | last evaluation report (optional)                           |
//!
//! Every file other than `study.json` is covered by a SHA-256 recorded in
//! `study.json`, so a flipped byte anywhere in a payload fails the load.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex, RwLock};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::eval::MetricsReport;
use crate::model::{
    validate_study_id, CtVolume, Dims, GroundTruthNodule, LobeMap, NoduleCandidate, Provenance,
    StudyBundle, Verdict,
};

pub const STUDY_FORMAT: &str = "occ-study/1";
pub const VOLUME_DTYPE: &str = "int16-le";

const STUDY_JSON: &str = "study.json";
const VOLUME_JSON: &str = "volume.json";
const VOLUME_RAW: &str = "volume.raw";
const LOBES_RAW: &str = "lobes.raw";
const CANDIDATES_JSON: &str = "candidates.json";
const TRUTH_JSON: &str = "truth.json";
const DECISIONS_JSON: &str = "decisions.json";
const METRICS_JSON: &str = "metrics.json";

#[derive(Debug, Serialize, Deserialize)]
struct StudyManifest {
    format: String,
    study_id: String,
    description: Option<String>,
    candidate_ids: Vec<String>,
    verdicts: Vec<Verdict>,
    provenance: Provenance,
    files: BTreeMap<String, String>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct VolumeHeader {
    pub dims: Dims,
    pub spacing: [f64; 3],
    pub dtype: String,
    pub hu_offset: i32,
}

#[derive(Debug, Default, Serialize, Deserialize)]
struct DecisionLog {
    history: Vec<Verdict>,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub(crate) fn to_json_bytes<T: Serialize>(value: &T) -> Result<Vec<u8>> {
    let mut out = serde_json::to_vec_pretty(value)?;
    out.push(b'\n');
    Ok(out)
}

pub fn encode_volume_raw(volume: &CtVolume) -> Vec<u8> {
    volume.voxels().iter().flat_map(|v| v.to_le_bytes()).collect()
}

pub fn decode_volume_raw(bytes: &[u8]) -> Result<Vec<i16>> {
    if bytes.len() % 2 != 0 {
        return Err(Error::input("volume payload has odd byte length"));
    }
    Ok(bytes
        .chunks_exact(2)
        .map(|c| i16::from_le_bytes([c[0], c[1]]))
        .collect())
}

/// Serializes every file of the bundle layout, in name order.
pub fn encode_study(bundle: &StudyBundle) -> Result<BTreeMap<String, Vec<u8>>> {
    bundle.validate()?;
    let mut files = BTreeMap::new();
    let header = VolumeHeader {
        dims: bundle.volume.dims(),
        spacing: bundle.volume.spacing(),
        dtype: VOLUME_DTYPE.into(),
        hu_offset: 0,
    };
    files.insert(VOLUME_JSON.to_string(), to_json_bytes(&header)?);
    files.insert(VOLUME_RAW.to_string(), encode_volume_raw(&bundle.volume));
    files.insert(LOBES_RAW.to_string(), bundle.lobes.labels().to_vec());
    files.insert(CANDIDATES_JSON.to_string(), to_json_bytes(&bundle.candidates)?);
    if let Some(truth) = &bundle.truth {
        files.insert(TRUTH_JSON.to_string(), to_json_bytes(truth)?);
    }
    files.insert(
        DECISIONS_JSON.to_string(),
        to_json_bytes(&DecisionLog {
            history: bundle.verdict_history.clone(),
        })?,
    );
    if let Some(m) = &bundle.metrics {
        files.insert(METRICS_JSON.to_string(), to_json_bytes(m)?);
    }
    let manifest = StudyManifest {
        format: STUDY_FORMAT.into(),
        study_id: bundle.study_id.clone(),
        description: bundle.description.clone(),
        candidate_ids: bundle.candidates.iter().map(|c| c.id.clone()).collect(),
        verdicts: bundle.verdicts.clone(),
        provenance: bundle.provenance.clone(),
        files: files
            .iter()
            .map(|(k, v)| (k.clone(), sha256_hex(v)))
            .collect(),
    };
    files.insert(STUDY_JSON.to_string(), to_json_bytes(&manifest)?);
    Ok(files)
}

/// Rebuilds a bundle from the files of the layout, verifying checksums and
/// every type invariant. `origin` is only used in error messages.
pub fn decode_study(files: &BTreeMap<String, Vec<u8>>, origin: &Path) -> Result<StudyBundle> {
    let integrity = |name: &str, message: String| Error::Integrity {
        path: origin.join(name),
        message,
    };
    let manifest_bytes = files
        .get(STUDY_JSON)
        .ok_or_else(|| integrity(STUDY_JSON, "missing".into()))?;
    let manifest: StudyManifest = serde_json::from_slice(manifest_bytes)
        .map_err(|e| integrity(STUDY_JSON, e.to_string()))?;
    if manifest.format != STUDY_FORMAT {
        return Err(integrity(
            STUDY_JSON,
            format!("unsupported format `{}`", manifest.format),
        ));
    }
    for required in [VOLUME_JSON, VOLUME_RAW, LOBES_RAW, CANDIDATES_JSON, DECISIONS_JSON] {
        if !manifest.files.contains_key(required) {
            return Err(integrity(required, "not listed in study.json".into()));
        }
    }
    for (name, digest) in &manifest.files {
        let bytes = files
            .get(name)
            .ok_or_else(|| integrity(name, "file missing".into()))?;
        if &sha256_hex(bytes) != digest {
            return Err(integrity(name, "checksum mismatch".into()));
        }
    }
    let file = |name: &str| -> Option<&Vec<u8>> {
        manifest.files.contains_key(name).then(|| &files[name])
    };
    let parse_json = |name: &str| -> Result<Option<serde_json::Value>> {
        file(name)
            .map(|b| serde_json::from_slice(b).map_err(|e| integrity(name, e.to_string())))
            .transpose()
    };

    let header: VolumeHeader = serde_json::from_slice(file(VOLUME_JSON).unwrap())
        .map_err(|e| integrity(VOLUME_JSON, e.to_string()))?;
    if header.dtype != VOLUME_DTYPE || header.hu_offset != 0 {
        return Err(integrity(
            VOLUME_JSON,
            format!("unsupported dtype `{}` / offset {}", header.dtype, header.hu_offset),
        ));
    }
    let voxels = decode_volume_raw(file(VOLUME_RAW).unwrap())
        .map_err(|e| integrity(VOLUME_RAW, e.to_string()))?;
    let volume = CtVolume::new(header.dims, header.spacing, voxels)?;
    let lobes = LobeMap::new(header.dims, file(LOBES_RAW).unwrap().clone())?;
    let candidates: Vec<NoduleCandidate> =
        serde_json::from_value(parse_json(CANDIDATES_JSON)?.unwrap())
            .map_err(|e| integrity(CANDIDATES_JSON, e.to_string()))?;
    let truth: Option<Vec<GroundTruthNodule>> = parse_json(TRUTH_JSON)?
        .map(serde_json::from_value)
        .transpose()
        .map_err(|e| integrity(TRUTH_JSON, e.to_string()))?;
    let log: DecisionLog = serde_json::from_value(parse_json(DECISIONS_JSON)?.unwrap())
        .map_err(|e| integrity(DECISIONS_JSON, e.to_string()))?;
    let metrics: Option<MetricsReport> = parse_json(METRICS_JSON)?
        .map(serde_json::from_value)
        .transpose()
        .map_err(|e| integrity(METRICS_JSON, e.to_string()))?;

    let ids: Vec<&str> = candidates.iter().map(|c| c.id.as_str()).collect();
    if ids != manifest.candidate_ids.iter().map(String::as_str).collect::<Vec<_>>() {
        return Err(integrity(
            STUDY_JSON,
            "candidate ids disagree with candidates.json".into(),
        ));
    }

    let bundle = StudyBundle {
        study_id: manifest.study_id,
        volume,
        lobes,
        candidates,
        truth,
        description: manifest.description,
        verdicts: manifest.verdicts,
        verdict_history: log.history,
        metrics,
        provenance: manifest.provenance,
    };
    bundle.validate()?;
    Ok(bundle)
}

/// Builds a fresh bundle from loose input files: `volume.json`, `volume.raw`,
/// `lobes.raw`, `candidates.json` and optionally `truth.json`. A full bundle
/// (one carrying `study.json`) is decoded as is; `study_id` then must agree.
pub fn assemble_study(
    study_id: &str,
    files: &BTreeMap<String, Vec<u8>>,
    description: Option<String>,
) -> Result<StudyBundle> {
    validate_study_id(study_id)?;
    if files.contains_key(STUDY_JSON) {
        let mut b = decode_study(files, Path::new(study_id))?;
        if b.study_id != study_id {
            return Err(Error::input(format!(
                "study id `{study_id}` disagrees with bundle id `{}`",
                b.study_id
            )));
        }
        if description.is_some() {
            b.description = description;
        }
        return Ok(b);
    }
    let need = |name: &'static str| files.get(name).ok_or(Error::MissingField(name));
    let header: VolumeHeader = serde_json::from_slice(need(VOLUME_JSON)?)?;
    if header.dtype != VOLUME_DTYPE {
        return Err(Error::input(format!("unsupported volume dtype `{}`", header.dtype)));
    }
    let mut voxels = decode_volume_raw(need(VOLUME_RAW)?)?;
    if header.hu_offset != 0 {
        for v in &mut voxels {
            *v = (*v as i32 + header.hu_offset).clamp(i16::MIN as i32, i16::MAX as i32) as i16;
        }
    }
    let volume = CtVolume::new(header.dims, header.spacing, voxels)?;
    let lobes = LobeMap::new(header.dims, need(LOBES_RAW)?.clone())?;
    let mut b = StudyBundle::new(study_id, volume, lobes);
    b.set_candidates(crate::synth::parse_candidates(need(CANDIDATES_JSON)?, header.dims)?);
    if let Some(t) = files.get(TRUTH_JSON) {
        b.truth = Some(crate::synth::parse_truth(t, header.dims)?);
    }
    b.description = description.filter(|d| !d.trim().is_empty());
    b.validate()?;
    Ok(b)
}

static TMP_COUNTER: AtomicU64 = AtomicU64::new(0);

fn write_synced(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(bytes).map_err(|e| Error::io(path, e))?;
    f.sync_all().map_err(|e| Error::io(path, e))
}

fn sync_dir(dir: &Path) {
    // Directory fsync is best effort; not every platform supports it.
    if let Ok(d) = fs::File::open(dir) {
        let _ = d.sync_all();
    }
}

/// Writes the bundle into exactly `dir`, replacing any previous contents.
///
/// Files are staged in a sibling directory and swapped in with renames, so a
/// crash leaves either the old or the new study on disk.
pub fn write_study_dir(bundle: &StudyBundle, dir: &Path) -> Result<()> {
    let files = encode_study(bundle)?;
    let parent = match dir.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
        _ => PathBuf::from("."),
    };
    fs::create_dir_all(&parent).map_err(|e| Error::io(&parent, e))?;
    let base = dir
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .ok_or_else(|| Error::input(format!("bad study path {}", dir.display())))?;
    let tag = format!(
        "{}-{}",
        std::process::id(),
        TMP_COUNTER.fetch_add(1, Ordering::Relaxed)
    );
    let staging = parent.join(format!(".{base}.tmp-{tag}"));
    fs::create_dir(&staging).map_err(|e| Error::io(&staging, e))?;
    for (name, bytes) in &files {
        write_synced(&staging.join(name), bytes)?;
    }
    sync_dir(&staging);
    if dir.exists() {
        let old = parent.join(format!(".{base}.old-{tag}"));
        fs::rename(dir, &old).map_err(|e| Error::io(dir, e))?;
        fs::rename(&staging, dir).map_err(|e| Error::io(dir, e))?;
        let _ = fs::remove_dir_all(&old);
    } else {
        fs::rename(&staging, dir).map_err(|e| Error::io(dir, e))?;
    }
    sync_dir(&parent);
    Ok(())
}

pub fn read_study_dir(dir: &Path) -> Result<StudyBundle> {
    let manifest_path = dir.join(STUDY_JSON);
    if !manifest_path.exists() {
        return Err(Error::NotFound(dir.display().to_string()));
    }
    let mut files = BTreeMap::new();
    for name in [
        STUDY_JSON,
        VOLUME_JSON,
        VOLUME_RAW,
        LOBES_RAW,
        CANDIDATES_JSON,
        TRUTH_JSON,
        DECISIONS_JSON,
        METRICS_JSON,
    ] {
        let path = dir.join(name);
        match fs::read(&path) {
            Ok(bytes) => {
                files.insert(name.to_string(), bytes);
            }
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => {}
            Err(e) => return Err(Error::io(path, e)),
        }
    }
    decode_study(&files, dir)
}

/// Saves the bundle under `root/<study_id>` and returns that path.
pub fn save_study(bundle: &StudyBundle, root: &Path) -> Result<PathBuf> {
    validate_study_id(&bundle.study_id)?;
    let dir = root.join(&bundle.study_id);
    write_study_dir(bundle, &dir)?;
    Ok(dir)
}

pub fn load_study(path: &Path) -> Result<StudyBundle> {
    read_study_dir(path)
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StudySummary {
    pub id: String,
    pub candidate_count: usize,
    pub has_description: bool,
}

/// A directory of studies. Readers of one study run concurrently; writers to
/// the same study are serialized.
#[derive(Debug)]
pub struct StudyStore {
    root: PathBuf,
    locks: Mutex<HashMap<String, Arc<RwLock<()>>>>,
}

impl StudyStore {
    pub fn open(root: impl Into<PathBuf>) -> Result<Self> {
        let root = root.into();
        fs::create_dir_all(&root).map_err(|e| Error::io(&root, e))?;
        Ok(StudyStore {
            root,
            locks: Mutex::new(HashMap::new()),
        })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    fn lock_for(&self, id: &str) -> Arc<RwLock<()>> {
        self.locks
            .lock()
            .unwrap()
            .entry(id.to_string())
            .or_default()
            .clone()
    }

    pub fn path_of(&self, id: &str) -> PathBuf {
        self.root.join(id)
    }

    pub fn exists(&self, id: &str) -> bool {
        validate_study_id(id).is_ok() && self.path_of(id).join(STUDY_JSON).exists()
    }

    pub fn load(&self, id: &str) -> Result<StudyBundle> {
        if validate_study_id(id).is_err() {
            return Err(Error::NotFound(id.to_string()));
        }
        let lock = self.lock_for(id);
        let _guard = lock.read().unwrap();
        match read_study_dir(&self.path_of(id)) {
            Err(Error::NotFound(_)) => Err(Error::NotFound(id.to_string())),
            other => other,
        }
    }

    pub fn save(&self, bundle: &StudyBundle) -> Result<PathBuf> {
        validate_study_id(&bundle.study_id)?;
        let lock = self.lock_for(&bundle.study_id);
        let _guard = lock.write().unwrap();
        save_study(bundle, &self.root)
    }

    /// Load-modify-save under the study's write lock.
    pub fn update<T>(
        &self,
        id: &str,
        f: impl FnOnce(&mut StudyBundle) -> Result<T>,
    ) -> Result<T> {
        if validate_study_id(id).is_err() {
            return Err(Error::NotFound(id.to_string()));
        }
        let lock = self.lock_for(id);
        let _guard = lock.write().unwrap();
        let mut bundle = match read_study_dir(&self.path_of(id)) {
            Err(Error::NotFound(_)) => return Err(Error::NotFound(id.to_string())),
            other => other?,
        };
        let out = f(&mut bundle)?;
        save_study(&bundle, &self.root)?;
        Ok(out)
    }

    pub fn list(&self) -> Result<Vec<StudySummary>> {
        let mut out = Vec::new();
        let entries = fs::read_dir(&self.root).map_err(|e| Error::io(&self.root, e))?;
        let mut ids: Vec<String> = entries
            .filter_map(|e| e.ok())
            .filter(|e| e.path().join(STUDY_JSON).exists())
            .filter_map(|e| e.file_name().into_string().ok())
            .filter(|n| validate_study_id(n).is_ok())
            .collect();
        ids.sort();
        for id in ids {
            let b = self.load(&id)?;
            out.push(StudySummary {
                id: b.study_id.clone(),
                candidate_count: b.candidates.len(),
                has_description: b.description.is_some(),
            });
        }
        Ok(out)
    }
}
