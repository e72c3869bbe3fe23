//! Dataset containers.
//!
//! Two layouts carry the same keyed arrays (`observations`, `actions`,
//! `rewards`, `terminals`, optional `timeouts` and `next_observations`):
//!
//! * an HDF5 file (`.hdf5` / `.h5`), the layout benchmark datasets ship in;
//! * a columnar directory holding one `.npy` file per key plus a
//!   `manifest.json`.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use ndarray::{Array1, Array2, Axis};
use ndarray_npy::{read_npy, write_npy};
use serde::{Deserialize, Serialize};

use super::{split_trajectories, TransitionDataset};
use crate::error::{Error, Result};

const MANIFEST: &str = "manifest.json";
const MANIFEST_FORMAT: &str = "tsrl-columnar";
const MANIFEST_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ContainerKind {
    Hdf5,
    Columnar,
}

impl ContainerKind {
    pub fn for_path(path: &Path) -> Self {
        match path.extension().and_then(|e| e.to_str()) {
            Some("hdf5" | "h5") => ContainerKind::Hdf5,
            _ => ContainerKind::Columnar,
        }
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    format: String,
    version: u32,
    name: String,
    arrays: BTreeMap<String, ArrayEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
struct ArrayEntry {
    file: String,
    shape: Vec<usize>,
    dtype: String,
}

/// Keyed arrays as read from either container, before validation.
#[derive(Default)]
struct RawArrays {
    observations: Option<Array2<f64>>,
    actions: Option<Array2<f64>>,
    rewards: Option<Array1<f64>>,
    terminals: Option<Vec<bool>>,
    timeouts: Option<Vec<bool>>,
    next_observations: Option<Array2<f64>>,
}

pub fn load_dataset(path: &Path) -> Result<TransitionDataset> {
    if !path.exists() {
        return Err(Error::Validation(format!(
            "dataset `{}` does not exist",
            path.display()
        )));
    }
    let name = path
        .file_stem()
        .and_then(|s| s.to_str())
        .unwrap_or("dataset")
        .to_string();
    let raw = match ContainerKind::for_path(path) {
        ContainerKind::Hdf5 => read_hdf5(path)?,
        ContainerKind::Columnar => read_columnar(path)?,
    };
    assemble(name, raw)
}

pub fn save_dataset(d: &TransitionDataset, path: &Path) -> Result<()> {
    match ContainerKind::for_path(path) {
        ContainerKind::Hdf5 => write_hdf5(d, path),
        ContainerKind::Columnar => write_columnar(d, path),
    }
}

fn require<T>(v: Option<T>, key: &str) -> Result<T> {
    v.ok_or_else(|| Error::Format(format!("missing required key `{key}`")))
}

fn assemble(name: String, raw: RawArrays) -> Result<TransitionDataset> {
    let observations = require(raw.observations, "observations")?;
    let actions = require(raw.actions, "actions")?;
    let rewards = require(raw.rewards, "rewards")?;
    let terminals = require(raw.terminals, "terminals")?;
    match raw.next_observations {
        Some(next) => TransitionDataset::new(
            name,
            observations,
            actions,
            rewards,
            next,
            terminals,
            raw.timeouts,
        ),
        None => derive_next_observations(name, observations, actions, rewards, terminals, raw.timeouts),
    }
}

/// Shifts observations within trajectories. The last row of each trajectory
/// has no recorded successor and is dropped.
fn derive_next_observations(
    name: String,
    observations: Array2<f64>,
    actions: Array2<f64>,
    rewards: Array1<f64>,
    terminals: Vec<bool>,
    timeouts: Option<Vec<bool>>,
) -> Result<TransitionDataset> {
    let n = observations.nrows();
    for (key, len) in [
        ("actions", actions.nrows()),
        ("rewards", rewards.len()),
        ("terminals", terminals.len()),
    ] {
        if len != n {
            return Err(Error::Validation(format!(
                "`{key}` has {len} rows but `observations` has {n}"
            )));
        }
    }
    if let Some(t) = &timeouts {
        if t.len() != n {
            return Err(Error::Validation(format!(
                "`timeouts` has {} rows but `observations` has {n}",
                t.len()
            )));
        }
    }
    // Split with a provisional dataset whose successors are placeholders.
    let provisional = TransitionDataset {
        states: Array2::zeros((n, 0)),
        actions: Array2::zeros((n, 0)),
        rewards: Array1::zeros(n),
        next_states: Array2::zeros((n, 0)),
        terminals: terminals.clone(),
        timeouts: timeouts.clone(),
        name: String::new(),
    };
    let mut rows = Vec::with_capacity(n);
    let mut ends = Vec::with_capacity(n);
    for t in split_trajectories(&provisional) {
        for i in t.start..t.end.saturating_sub(1) {
            rows.push(i);
            ends.push(i + 2 == t.end);
        }
    }
    if rows.is_empty() {
        return Err(Error::Validation(
            "no transition has a successor observation; provide `next_observations`".into(),
        ));
    }
    let next: Vec<usize> = rows.iter().map(|&i| i + 1).collect();
    let mut new_timeouts: Vec<bool> = rows
        .iter()
        .map(|&i| timeouts.as_ref().is_some_and(|t| t[i]))
        .collect();
    for (k, &end) in ends.iter().enumerate() {
        if end && k + 1 < rows.len() {
            new_timeouts[k] = true;
        }
    }
    TransitionDataset::new(
        name,
        observations.select(Axis(0), &rows),
        actions.select(Axis(0), &rows),
        rewards.select(Axis(0), &rows),
        observations.select(Axis(0), &next),
        rows.iter().map(|&i| terminals[i]).collect(),
        Some(new_timeouts),
    )
}

fn read_columnar(dir: &Path) -> Result<RawArrays> {
    let manifest_path = dir.join(MANIFEST);
    let text = fs::read_to_string(&manifest_path)
        .map_err(|e| Error::Format(format!("cannot read {}: {e}", manifest_path.display())))?;
    let manifest: Manifest = serde_json::from_str(&text)
        .map_err(|e| Error::Format(format!("{}: {e}", manifest_path.display())))?;
    if manifest.format != MANIFEST_FORMAT {
        return Err(Error::Format(format!(
            "{} declares format `{}`",
            manifest_path.display(),
            manifest.format
        )));
    }
    if manifest.version > MANIFEST_VERSION {
        return Err(Error::Format(format!(
            "manifest version {} is newer than supported ({MANIFEST_VERSION})",
            manifest.version
        )));
    }
    let file = |key: &str| manifest.arrays.get(key).map(|e| dir.join(&e.file));
    let npy_err = |p: &PathBuf, e: ndarray_npy::ReadNpyError| {
        Error::Format(format!("{}: {e}", p.display()))
    };
    let read2 = |key: &str| -> Result<Option<Array2<f64>>> {
        file(key)
            .map(|p| read_npy::<_, Array2<f64>>(&p).map_err(|e| npy_err(&p, e)))
            .transpose()
    };
    let read_flags = |key: &str| -> Result<Option<Vec<bool>>> {
        file(key)
            .map(|p| {
                read_npy::<_, Array1<bool>>(&p)
                    .map(|a| a.to_vec())
                    .map_err(|e| npy_err(&p, e))
            })
            .transpose()
    };
    Ok(RawArrays {
        observations: read2("observations")?,
        actions: read2("actions")?,
        rewards: file("rewards")
            .map(|p| read_npy::<_, Array1<f64>>(&p).map_err(|e| npy_err(&p, e)))
            .transpose()?,
        terminals: read_flags("terminals")?,
        timeouts: read_flags("timeouts")?,
        next_observations: read2("next_observations")?,
    })
}

fn write_columnar(d: &TransitionDataset, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(format!("creating {}", dir.display()), e))?;
    let mut arrays = BTreeMap::new();
    let mut put = |key: &str, shape: Vec<usize>, dtype: &str| {
        arrays.insert(
            key.to_string(),
            ArrayEntry {
                file: format!("{key}.npy"),
                shape,
                dtype: dtype.to_string(),
            },
        );
        dir.join(format!("{key}.npy"))
    };
    let werr = |p: &Path, e: ndarray_npy::WriteNpyError| Error::Format(format!("{}: {e}", p.display()));
    let n = d.len();
    let p = put("observations", vec![n, d.state_dim()], "f64");
    write_npy(&p, &d.states).map_err(|e| werr(&p, e))?;
    let p = put("actions", vec![n, d.action_dim()], "f64");
    write_npy(&p, &d.actions).map_err(|e| werr(&p, e))?;
    let p = put("rewards", vec![n], "f64");
    write_npy(&p, &d.rewards).map_err(|e| werr(&p, e))?;
    let p = put("next_observations", vec![n, d.state_dim()], "f64");
    write_npy(&p, &d.next_states).map_err(|e| werr(&p, e))?;
    let p = put("terminals", vec![n], "bool");
    write_npy(&p, &Array1::from(d.terminals.clone())).map_err(|e| werr(&p, e))?;
    if let Some(t) = &d.timeouts {
        let p = put("timeouts", vec![n], "bool");
        write_npy(&p, &Array1::from(t.clone())).map_err(|e| werr(&p, e))?;
    }
    let manifest = Manifest {
        format: MANIFEST_FORMAT.into(),
        version: MANIFEST_VERSION,
        name: d.name.clone(),
        arrays,
    };
    let path = dir.join(MANIFEST);
    fs::write(&path, serde_json::to_string_pretty(&manifest)?)
        .map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

#[cfg(feature = "hdf5")]
fn read_hdf5(path: &Path) -> Result<RawArrays> {
    let h5 = |e: hdf5::Error| Error::Hdf5(format!("{}: {e}", path.display()));
    let file = hdf5::File::open(path).map_err(h5)?;
    let has = |key: &str| file.link_exists(key);
    let read2 = |key: &str| -> Result<Option<Array2<f64>>> {
        if !has(key) {
            return Ok(None);
        }
        let ds = file.dataset(key).map_err(h5)?;
        let arr: Array2<f64> = match ds.ndim() {
            1 => ds.read_1d::<f64>().map_err(h5)?.insert_axis(Axis(1)),
            _ => ds.read_2d::<f64>().map_err(h5)?,
        };
        Ok(Some(arr))
    };
    let read_flags = |key: &str| -> Result<Option<Vec<bool>>> {
        if !has(key) {
            return Ok(None);
        }
        let ds = file.dataset(key).map_err(h5)?;
        if let Ok(v) = ds.read_1d::<bool>() {
            return Ok(Some(v.to_vec()));
        }
        let v = ds.read_1d::<f64>().map_err(h5)?;
        Ok(Some(v.iter().map(|&x| x != 0.0).collect()))
    };
    Ok(RawArrays {
        observations: read2("observations")?,
        actions: read2("actions")?,
        rewards: if has("rewards") {
            let ds = file.dataset("rewards").map_err(h5)?;
            Some(ds.read_raw::<f64>().map_err(h5)?.into())
        } else {
            None
        },
        terminals: read_flags("terminals")?,
        timeouts: read_flags("timeouts")?,
        next_observations: read2("next_observations")?,
    })
}

#[cfg(feature = "hdf5")]
fn write_hdf5(d: &TransitionDataset, path: &Path) -> Result<()> {
    let h5 = |e: hdf5::Error| Error::Hdf5(format!("{}: {e}", path.display()));
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)
            .map_err(|e| Error::io(format!("creating {}", parent.display()), e))?;
    }
    let file = hdf5::File::create(path).map_err(h5)?;
    file.new_dataset_builder()
        .with_data(&d.states)
        .create("observations")
        .map_err(h5)?;
    file.new_dataset_builder()
        .with_data(&d.actions)
        .create("actions")
        .map_err(h5)?;
    file.new_dataset_builder()
        .with_data(&d.rewards)
        .create("rewards")
        .map_err(h5)?;
    file.new_dataset_builder()
        .with_data(&d.next_states)
        .create("next_observations")
        .map_err(h5)?;
    file.new_dataset_builder()
        .with_data(&Array1::from(d.terminals.clone()))
        .create("terminals")
        .map_err(h5)?;
    if let Some(t) = &d.timeouts {
        file.new_dataset_builder()
            .with_data(&Array1::from(t.clone()))
            .create("timeouts")
            .map_err(h5)?;
    }
    Ok(())
}

#[cfg(not(feature = "hdf5"))]
fn read_hdf5(path: &Path) -> Result<RawArrays> {
    Err(Error::Format(format!(
        "{}: built without HDF5 support; use a columnar directory",
        path.display()
    )))
}

#[cfg(not(feature = "hdf5"))]
fn write_hdf5(_d: &TransitionDataset, path: &Path) -> Result<()> {
    read_hdf5(path).map(|_| ())
}
