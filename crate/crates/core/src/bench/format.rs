//! Portable on-disk layout: a directory holding `manifest.json` and one raw
//! little-endian row-major binary file per named tensor.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::baselines::{PropensityModel, UnetPlus};
use crate::dgp::{InterventionPlan, TestCase, Trajectory};
use crate::error::{Error, Result};
use crate::gcomp::{FittedNet, GstUnet, Normaliser};
use crate::lattice::Field;
use crate::nets::{NetConfig, Tensor};

pub const SCHEMA_VERSION: u32 = 1;
pub const MANIFEST: &str = "manifest.json";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Dtype {
    F64,
    F32,
}

impl Dtype {
    fn width(self) -> usize {
        match self {
            Dtype::F64 => 8,
            Dtype::F32 => 4,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub file: String,
    pub dtype: Dtype,
    pub shape: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub schema_version: u32,
    pub kind: String,
    pub seed: Option<u64>,
    pub tensors: Vec<TensorEntry>,
    /// Config echo and anything else the kind needs to rebuild its value.
    pub meta: Value,
}

#[derive(Clone, Debug, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

/// In-memory image of one saved directory.
#[derive(Clone, Debug, PartialEq)]
pub struct Bundle {
    pub kind: String,
    pub seed: Option<u64>,
    pub meta: Value,
    pub tensors: Vec<NamedTensor>,
}

fn corrupt(path: &Path, reason: impl Into<String>) -> Error {
    Error::CorruptDataset { path: path.to_path_buf(), reason: reason.into() }
}

impl Bundle {
    pub fn new(kind: &str, seed: Option<u64>, meta: Value) -> Self {
        Self { kind: kind.to_string(), seed, meta, tensors: Vec::new() }
    }

    pub fn push(&mut self, name: impl Into<String>, shape: Vec<usize>, data: Vec<f64>) {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        self.tensors.push(NamedTensor { name: name.into(), shape, data });
    }

    pub fn push_fields(&mut self, name: impl Into<String>, fields: &[Field]) {
        let (w, h) = fields.first().map_or((0, 0), Field::shape);
        let data = fields.iter().flat_map(|f| f.values().iter().copied()).collect();
        self.push(name, vec![fields.len(), h, w], data);
    }

    pub fn push_field(&mut self, name: impl Into<String>, field: &Field) {
        self.push(name, vec![field.height(), field.width()], field.values().to_vec());
    }

    pub fn get(&self, name: &str) -> Option<&NamedTensor> {
        self.tensors.iter().find(|t| t.name == name)
    }

    /// Writes into `dir`, creating it if needed. Tensor files are written
    /// before the manifest so a crash never leaves a manifest pointing at
    /// missing data.
    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        let mut entries = Vec::with_capacity(self.tensors.len());
        for (i, t) in self.tensors.iter().enumerate() {
            let file = format!("{i:04}.bin");
            let mut bytes = Vec::with_capacity(8 * t.data.len());
            for v in &t.data {
                bytes.extend_from_slice(&v.to_le_bytes());
            }
            fs::write(dir.join(&file), bytes)?;
            entries.push(TensorEntry { name: t.name.clone(), file, dtype: Dtype::F64, shape: t.shape.clone() });
        }
        let manifest = Manifest {
            schema_version: SCHEMA_VERSION,
            kind: self.kind.clone(),
            seed: self.seed,
            tensors: entries,
            meta: self.meta.clone(),
        };
        fs::write(dir.join(MANIFEST), serde_json::to_vec_pretty(&manifest)?)?;
        Ok(())
    }

    pub fn read(dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST);
        let text = fs::read(&path).map_err(|e| corrupt(&path, format!("cannot read manifest: {e}")))?;
        let raw: Value = serde_json::from_slice(&text).map_err(|e| corrupt(&path, format!("manifest is not JSON: {e}")))?;
        let version = raw
            .get("schema_version")
            .and_then(Value::as_u64)
            .ok_or_else(|| corrupt(&path, "manifest has no schema_version"))?;
        if version != u64::from(SCHEMA_VERSION) {
            return Err(Error::UnsupportedVersion { found: version.min(u64::from(u32::MAX)) as u32, expected: SCHEMA_VERSION });
        }
        let manifest: Manifest = serde_json::from_value(raw).map_err(|e| corrupt(&path, format!("bad manifest: {e}")))?;

        let mut tensors = Vec::with_capacity(manifest.tensors.len());
        for entry in &manifest.tensors {
            if entry.file.contains('/') || entry.file.contains('\\') || entry.file.starts_with('.') {
                return Err(corrupt(&path, format!("tensor file name {:?} escapes the directory", entry.file)));
            }
            let file = dir.join(&entry.file);
            let bytes = fs::read(&file).map_err(|e| corrupt(&file, format!("cannot read tensor {}: {e}", entry.name)))?;
            let n = entry
                .shape
                .iter()
                .try_fold(1usize, |acc, &d| acc.checked_mul(d))
                .ok_or_else(|| corrupt(&path, format!("shape of {} overflows", entry.name)))?;
            let expected = n.checked_mul(entry.dtype.width()).ok_or_else(|| corrupt(&path, "tensor too large"))?;
            if bytes.len() != expected {
                return Err(corrupt(
                    &file,
                    format!("tensor {} has {} bytes, manifest implies {expected}", entry.name, bytes.len()),
                ));
            }
            let data = match entry.dtype {
                Dtype::F64 => bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect(),
                Dtype::F32 => bytes.chunks_exact(4).map(|c| f64::from(f32::from_le_bytes(c.try_into().unwrap()))).collect(),
            };
            tensors.push(NamedTensor { name: entry.name.clone(), shape: entry.shape.clone(), data });
        }
        Ok(Self { kind: manifest.kind, seed: manifest.seed, meta: manifest.meta, tensors })
    }
}

/// Typed accessors over a freshly read bundle; every inconsistency is a
/// corrupt-dataset error against `dir`.
struct Reader<'a> {
    dir: &'a Path,
    bundle: &'a Bundle,
}

impl<'a> Reader<'a> {
    fn open(dir: &'a Path, bundle: &'a Bundle, kind: &str) -> Result<Self> {
        if bundle.kind != kind {
            return Err(corrupt(dir, format!("expected a {kind} bundle, found {}", bundle.kind)));
        }
        Ok(Self { dir, bundle })
    }

    fn err(&self, reason: impl Into<String>) -> Error {
        corrupt(self.dir, reason)
    }

    fn tensor(&self, name: &str) -> Result<&'a NamedTensor> {
        self.bundle.get(name).ok_or_else(|| self.err(format!("missing tensor {name}")))
    }

    fn fields(&self, name: &str) -> Result<Vec<Field>> {
        let t = self.tensor(name)?;
        let [n, h, w] = t.shape[..] else {
            return Err(self.err(format!("{name} must be rank 3, got {:?}", t.shape)));
        };
        if n > 0 && (h == 0 || w == 0) {
            return Err(self.err(format!("{name} has an empty grid")));
        }
        t.data.chunks(h * w.max(1)).take(n).map(|c| Field::new(w, h, c.to_vec()).map_err(|e| self.err(e.to_string()))).collect()
    }

    fn field(&self, name: &str) -> Result<Field> {
        let t = self.tensor(name)?;
        let [h, w] = t.shape[..] else {
            return Err(self.err(format!("{name} must be rank 2, got {:?}", t.shape)));
        };
        Field::new(w, h, t.data.clone()).map_err(|e| self.err(e.to_string()))
    }

    fn has(&self, name: &str) -> bool {
        self.bundle.get(name).is_some()
    }

    fn meta<T: serde::de::DeserializeOwned>(&self, key: &str) -> Result<T> {
        let v = self.bundle.meta.get(key).ok_or_else(|| self.err(format!("meta has no {key}")))?;
        serde_json::from_value(v.clone()).map_err(|e| self.err(format!("meta {key}: {e}")))
    }
}

fn push_trajectory(b: &mut Bundle, prefix: &str, traj: &Trajectory) {
    b.push_fields(format!("{prefix}x"), &traj.x);
    b.push_fields(format!("{prefix}a"), &traj.a);
    b.push_fields(format!("{prefix}y"), &traj.y);
    if let Some(v) = &traj.static_v {
        b.push_fields(format!("{prefix}static"), v);
    }
    if let Some(m) = &traj.mask {
        b.push_field(format!("{prefix}mask"), m);
    }
}

fn read_trajectory(r: &Reader<'_>, prefix: &str) -> Result<Trajectory> {
    let traj = Trajectory {
        x: r.fields(&format!("{prefix}x"))?,
        a: r.fields(&format!("{prefix}a"))?,
        y: r.fields(&format!("{prefix}y"))?,
        static_v: if r.has(&format!("{prefix}static")) { Some(r.fields(&format!("{prefix}static"))?) } else { None },
        mask: if r.has(&format!("{prefix}mask")) { Some(r.field(&format!("{prefix}mask"))?) } else { None },
    };
    traj.validate().map_err(|e| r.err(e.to_string()))?;
    Ok(traj)
}

/// `meta` is echoed verbatim into the manifest (simulation parameters,
/// configs).
pub fn save_trajectory(dir: &Path, traj: &Trajectory, seed: Option<u64>, meta: Value) -> Result<()> {
    let mut b = Bundle::new("trajectory", seed, meta);
    push_trajectory(&mut b, "", traj);
    b.write(dir)
}

pub fn load_trajectory(dir: &Path) -> Result<Trajectory> {
    let bundle = Bundle::read(dir)?;
    let r = Reader::open(dir, &bundle, "trajectory")?;
    read_trajectory(&r, "")
}

pub fn save_test_set(dir: &Path, cases: &[TestCase], seed: Option<u64>, mut meta: Value) -> Result<()> {
    let starts: Vec<usize> = cases.iter().map(|c| c.plan.start).collect();
    if let Value::Object(m) = &mut meta {
        m.insert("plan_starts".into(), serde_json::to_value(&starts)?);
    } else {
        meta = serde_json::json!({ "plan_starts": starts, "echo": meta });
    }
    let mut b = Bundle::new("test_set", seed, meta);
    for (i, c) in cases.iter().enumerate() {
        push_trajectory(&mut b, &format!("case{i}."), &c.history);
        b.push_fields(format!("case{i}.plan"), &c.plan.a_plan);
        b.push_field(format!("case{i}.true_capo"), &c.true_capo);
        if let Some(p) = &c.per_step_capo {
            b.push_fields(format!("case{i}.per_step_capo"), p);
        }
    }
    b.write(dir)
}

pub fn load_test_set(dir: &Path) -> Result<Vec<TestCase>> {
    let bundle = Bundle::read(dir)?;
    let r = Reader::open(dir, &bundle, "test_set")?;
    let starts: Vec<usize> = r.meta("plan_starts")?;
    starts
        .iter()
        .enumerate()
        .map(|(i, &start)| {
            let plan = InterventionPlan::new(start, r.fields(&format!("case{i}.plan"))?).map_err(|e| r.err(e.to_string()))?;
            let per_step = format!("case{i}.per_step_capo");
            Ok(TestCase {
                history: read_trajectory(&r, &format!("case{i}."))?,
                plan,
                true_capo: r.field(&format!("case{i}.true_capo"))?,
                per_step_capo: if r.has(&per_step) { Some(r.fields(&per_step)?) } else { None },
            })
        })
        .collect()
}

/// Any trained estimator that can be checkpointed.
#[derive(Clone, Debug)]
pub enum TrainedModel {
    Gst(GstUnet),
    UnetPlus(UnetPlus),
    Propensity(PropensityModel),
}

impl TrainedModel {
    pub fn kind(&self) -> &'static str {
        match self {
            TrainedModel::Gst(_) => "gst_unet",
            TrainedModel::UnetPlus(_) => "unet_plus",
            TrainedModel::Propensity(_) => "propensity",
        }
    }

    fn fitted(&self) -> &FittedNet {
        match self {
            TrainedModel::Gst(m) => &m.model,
            TrainedModel::UnetPlus(m) => &m.model,
            TrainedModel::Propensity(m) => &m.model,
        }
    }
}

#[derive(Serialize, Deserialize)]
struct CheckpointMeta {
    model: String,
    net: NetConfig,
    norm: Normaliser,
    tau: usize,
    p_clip: Option<f64>,
    epoch: usize,
}

/// Parameter values only; optimiser moments are not kept.
pub fn save_checkpoint(dir: &Path, model: &TrainedModel, epoch: usize, seed: Option<u64>) -> Result<()> {
    let fitted = model.fitted();
    let (tau, p_clip) = match model {
        TrainedModel::Gst(m) => (m.tau, None),
        TrainedModel::UnetPlus(m) => (m.tau, None),
        TrainedModel::Propensity(m) => (1, m.p_clip),
    };
    let meta = CheckpointMeta {
        model: model.kind().to_string(),
        net: fitted.net.config().clone(),
        norm: fitted.norm,
        tau,
        p_clip,
        epoch,
    };
    let mut b = Bundle::new("checkpoint", seed, serde_json::to_value(&meta)?);
    for (name, t) in fitted.store.named_values() {
        b.push(name, vec![t.c, t.h, t.w], t.data.clone());
    }
    b.write(dir)
}

/// Returns the model and the training epoch recorded with it.
pub fn load_checkpoint(dir: &Path) -> Result<(TrainedModel, usize)> {
    let bundle = Bundle::read(dir)?;
    let r = Reader::open(dir, &bundle, "checkpoint")?;
    let meta: CheckpointMeta =
        serde_json::from_value(bundle.meta.clone()).map_err(|e| r.err(format!("checkpoint meta: {e}")))?;
    meta.net.validate().map_err(|e| r.err(e.to_string()))?;
    let mut fitted = FittedNet::new(&meta.net, meta.norm, 0).map_err(|e| r.err(e.to_string()))?;
    if fitted.store.len() != bundle.tensors.len() {
        return Err(r.err(format!(
            "checkpoint holds {} tensors, the configured network has {}",
            bundle.tensors.len(),
            fitted.store.len()
        )));
    }
    for t in &bundle.tensors {
        let id = fitted.store.id(&t.name).ok_or_else(|| r.err(format!("unknown parameter {}", t.name)))?;
        let slot = fitted.store.value_mut(id);
        if t.shape != [slot.c, slot.h, slot.w] {
            return Err(r.err(format!("parameter {} has shape {:?}, expected {:?}", t.name, t.shape, slot.shape())));
        }
        *slot = Tensor::from_vec(slot.c, slot.h, slot.w, t.data.clone());
    }
    let model = match meta.model.as_str() {
        "gst_unet" => TrainedModel::Gst(GstUnet { model: fitted, tau: meta.tau }),
        "unet_plus" => TrainedModel::UnetPlus(UnetPlus { model: fitted, tau: meta.tau }),
        "propensity" => TrainedModel::Propensity(PropensityModel { model: fitted, p_clip: meta.p_clip }),
        other => return Err(r.err(format!("unknown model kind {other}"))),
    };
    Ok((model, meta.epoch))
}

/// Path of the binary file backing tensor `name`, for tests and tooling.
pub fn tensor_path(dir: &Path, name: &str) -> Result<PathBuf> {
    let path = dir.join(MANIFEST);
    let text = fs::read(&path).map_err(|e| corrupt(&path, e.to_string()))?;
    let manifest: Manifest = serde_json::from_slice(&text).map_err(|e| corrupt(&path, e.to_string()))?;
    manifest
        .tensors
        .iter()
        .find(|t| t.name == name)
        .map(|t| dir.join(&t.file))
        .ok_or_else(|| corrupt(&path, format!("missing tensor {name}")))
}
