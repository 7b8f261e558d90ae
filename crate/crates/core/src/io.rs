//! File formats: checkpoint JSON, dataset CSV with a JSON sidecar, training
//! history CSV.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{config, OcnError, Result};
use crate::field::{FieldMode, MlpField, ParamVector};
use crate::train::{Dataset, DatasetMeta, GeneratorInfo, HistoryEntry, Trajectory};

/// 17 significant digits, enough to round-trip any `f64`.
pub fn fmt_f64(v: f64) -> String {
    format!("{v:.16e}")
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct CheckpointDoc {
    layer_dims: Vec<usize>,
    mode: FieldMode,
    params: Vec<f64>,
}

pub fn write_checkpoint<W: Write>(field: &MlpField, mut w: W) -> Result<()> {
    let dims: Vec<String> = field.dims().iter().map(|d| d.to_string()).collect();
    write!(w, "{{\n  \"layer_dims\": [{}],\n  \"mode\": \"{}\",\n  \"params\": [", dims.join(", "), field.mode().as_str())?;
    for (i, p) in field.params().iter().enumerate() {
        if i > 0 {
            w.write_all(b",")?;
        }
        write!(w, "\n    {}", fmt_f64(*p))?;
    }
    w.write_all(b"\n  ]\n}\n")?;
    Ok(())
}

pub fn read_checkpoint<R: Read>(r: R) -> Result<MlpField> {
    let doc: CheckpointDoc = serde_json::from_reader(r)?;
    MlpField::from_params(&doc.layer_dims, doc.mode, ParamVector(doc.params))
}

pub fn save_checkpoint(field: &MlpField, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_checkpoint(field, &mut w)?;
    w.flush()?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<MlpField> {
    read_checkpoint(File::open(path)?)
}

/// Metadata stored next to a dataset CSV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSidecar {
    pub system: String,
    #[serde(default)]
    pub seed: Option<u64>,
    pub dt: f64,
    #[serde(rename = "T")]
    pub horizon: f64,
    pub n: usize,
    pub m: usize,
    pub d: usize,
    #[serde(default)]
    pub generator: Option<GeneratorInfo>,
}

/// `foo.csv → foo.json`.
pub fn sidecar_path(csv: &Path) -> PathBuf {
    csv.with_extension("json")
}

pub fn write_dataset_csv<W: Write>(ds: &Dataset, w: W) -> Result<()> {
    let mut wr = csv::Writer::from_writer(w);
    let mut header = vec!["traj_id".to_string(), "t".to_string()];
    header.extend((1..=ds.dim()).map(|i| format!("x{i}")));
    wr.write_record(&header)?;
    for (k, tr) in ds.trajectories.iter().enumerate() {
        for (i, x) in tr.states.iter().enumerate() {
            let mut row = vec![k.to_string(), fmt_f64(tr.time(i, ds.dt))];
            row.extend(x.iter().map(|v| fmt_f64(*v)));
            wr.write_record(&row)?;
        }
    }
    wr.flush()?;
    Ok(())
}

pub fn sidecar_for(ds: &Dataset) -> DatasetSidecar {
    DatasetSidecar {
        system: ds.meta.system.clone(),
        seed: ds.meta.seed,
        dt: ds.dt,
        horizon: ds.horizon(),
        n: ds.intervals(),
        m: ds.len(),
        d: ds.dim(),
        generator: ds.meta.generator.clone(),
    }
}

/// Parses a dataset CSV. `dt` comes from the sidecar when given, otherwise
/// from the time column; non-uniform spacing is rejected.
pub fn read_dataset_csv<R: Read>(r: R, sidecar: Option<&DatasetSidecar>) -> Result<Dataset> {
    let mut rd = csv::Reader::from_reader(r);
    let header = rd.headers()?.clone();
    let d = header.len().saturating_sub(2);
    if d == 0 || &header[0] != "traj_id" || &header[1] != "t" {
        return config("dataset header must be traj_id,t,x1,...,xd");
    }
    for (i, h) in header.iter().skip(2).enumerate() {
        if h != format!("x{}", i + 1) {
            return config(format!("unexpected column '{h}'"));
        }
    }
    let mut rows: BTreeMap<usize, Vec<(f64, Vec<f64>)>> = BTreeMap::new();
    for rec in rd.records() {
        let rec = rec?;
        let num = |s: &str| -> Result<f64> {
            s.trim().parse::<f64>().map_err(|_| OcnError::Config(format!("bad number '{s}'")))
        };
        let id: usize = rec[0].trim().parse().map_err(|_| OcnError::Config(format!("bad trajectory id '{}'", &rec[0])))?;
        let t = num(&rec[1])?;
        let x = (2..2 + d).map(|j| num(&rec[j])).collect::<Result<Vec<_>>>()?;
        rows.entry(id).or_default().push((t, x));
    }
    if rows.is_empty() {
        return config("dataset has no rows");
    }
    let first = rows.values().next().unwrap();
    if first.len() < 2 {
        return config("trajectories need at least two samples");
    }
    let dt = match sidecar {
        Some(s) => s.dt,
        None => first[1].0 - first[0].0,
    };
    let mut trajectories = Vec::with_capacity(rows.len());
    for (id, pts) in rows {
        let t0 = pts[0].0;
        for (i, (t, _)) in pts.iter().enumerate() {
            if (t - (t0 + i as f64 * dt)).abs() > 1e-9 * dt.max(1.0) * (i as f64).max(1.0) {
                return config(format!("trajectory {id} is not uniformly sampled at spacing {dt}"));
            }
        }
        trajectories.push(Trajectory::new(t0, pts.into_iter().map(|(_, x)| x).collect()));
    }
    let meta = match sidecar {
        Some(s) => DatasetMeta { system: s.system.clone(), seed: s.seed, generator: s.generator.clone() },
        None => DatasetMeta::default(),
    };
    let ds = Dataset::new(dt, trajectories, meta)?;
    if let Some(s) = sidecar {
        if s.d != ds.dim() || s.m != ds.len() || s.n != ds.intervals() {
            return config("dataset sidecar does not match the CSV contents");
        }
    }
    Ok(ds)
}

/// Writes `path` and its sidecar.
pub fn save_dataset(ds: &Dataset, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_dataset_csv(ds, &mut w)?;
    w.flush()?;
    let side = serde_json::to_string_pretty(&sidecar_for(ds))?;
    std::fs::write(sidecar_path(path), side + "\n")?;
    Ok(())
}

/// Reads `path`, using its sidecar when present.
pub fn load_dataset(path: &Path) -> Result<Dataset> {
    let side = sidecar_path(path);
    let sidecar: Option<DatasetSidecar> = if side.exists() {
        Some(serde_json::from_str(&std::fs::read_to_string(side)?)?)
    } else {
        None
    };
    read_dataset_csv(File::open(path)?, sidecar.as_ref())
}

pub fn write_history_csv<W: Write>(history: &[HistoryEntry], w: W) -> Result<()> {
    let mut wr = csv::Writer::from_writer(w);
    wr.write_record(["iteration", "J", "grad_norm", "wall_ms"])?;
    for e in history {
        wr.write_record([e.iteration.to_string(), fmt_f64(e.loss), fmt_f64(e.grad_norm), e.wall_ms.to_string()])?;
    }
    wr.flush()?;
    Ok(())
}
