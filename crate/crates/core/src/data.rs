//! Party datasets: CSV ingestion and a synthetic vertically partitioned
//! generator for demos and tests.

use std::fs::File;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use thiserror::Error;

use crate::comms::PartyId;
use crate::matching::{MatchError, RecordIdList};
use crate::rng::{self, Purpose};
use crate::tensor::Tensor;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Csv { path: PathBuf, source: csv::Error },
    #[error("{path}: missing column '{column}'")]
    MissingColumn { path: PathBuf, column: String },
    #[error("{path}: row {row}, column '{column}': cannot parse {value:?} as a finite number")]
    Parse {
        path: PathBuf,
        row: u64,
        column: String,
        value: String,
    },
    #[error("{path}: {source}")]
    Validation { path: PathBuf, source: MatchError },
}

/// One party's local table.
#[derive(Debug, Clone, PartialEq)]
pub struct PartyDataset {
    pub ids: RecordIdList,
    pub features: Tensor,
    pub labels: Option<Tensor>,
    pub feature_names: Vec<String>,
}

pub fn load_party_csv(path: &Path, id_column: &str, label_column: Option<&str>) -> Result<PartyDataset, DataError> {
    let csv_err = |source| DataError::Csv {
        path: path.to_path_buf(),
        source,
    };
    let mut reader = csv::Reader::from_path(path).map_err(csv_err)?;
    let headers = reader.headers().map_err(csv_err)?.clone();
    let find = |name: &str| {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| DataError::MissingColumn {
                path: path.to_path_buf(),
                column: name.to_string(),
            })
    };
    let id_idx = find(id_column)?;
    let label_idx = label_column.map(find).transpose()?;
    let feature_cols: Vec<usize> = (0..headers.len())
        .filter(|&i| i != id_idx && Some(i) != label_idx)
        .collect();

    let mut ids = Vec::new();
    let mut features = Vec::new();
    let mut labels = Vec::new();
    for record in reader.records() {
        let record = record.map_err(csv_err)?;
        let row = record.position().map_or(0, |p| p.line());
        let parse = |i: usize| -> Result<f64, DataError> {
            let cell = record.get(i).unwrap_or("").trim();
            cell.parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| DataError::Parse {
                    path: path.to_path_buf(),
                    row,
                    column: headers[i].to_string(),
                    value: cell.to_string(),
                })
        };
        ids.push(record.get(id_idx).unwrap_or("").to_string());
        for &c in &feature_cols {
            features.push(parse(c)?);
        }
        if let Some(l) = label_idx {
            labels.push(parse(l)?);
        }
    }
    let ids = RecordIdList::new(ids);
    // The party name is unknown here; report by path instead.
    ids.validate(PartyId::master()).map_err(|source| DataError::Validation {
        path: path.to_path_buf(),
        source,
    })?;
    let rows = ids.ids.len();
    Ok(PartyDataset {
        features: Tensor::new(rows, feature_cols.len(), features).expect("sized"),
        labels: label_idx.map(|_| Tensor::column(&labels)),
        feature_names: feature_cols.iter().map(|&i| headers[i].to_string()).collect(),
        ids,
    })
}

/// File name of a generated party table.
pub fn party_file_name(party: PartyId) -> String {
    format!("{party}.csv")
}

pub const SYNTHETIC_DROP_RATE: f64 = 0.1;

/// Writes a synthetic vertically partitioned dataset.
///
/// `features[0]` columns go to the master (which also gets the label
/// column `y`), `features[i]` to member `i-1`. Features are standard normal,
/// labels come from a random linear teacher thresholded at σ(·) = 0.5, and
/// each party independently drops about 10% of the ids and stores the rest
/// in shuffled order.
pub fn gen_synthetic(out_dir: &Path, features: &[usize], rows: usize, seed: u64) -> Result<Vec<PathBuf>, DataError> {
    let io_err = |path: &Path| {
        let path = path.to_path_buf();
        move |source| DataError::Io { path, source }
    };
    std::fs::create_dir_all(out_dir).map_err(io_err(out_dir))?;
    let mut rng = rng::stream(seed, Purpose::Synthetic, PartyId::master());
    let total: usize = features.iter().sum();
    let width = rows.saturating_sub(1).to_string().len().max(3);
    let ids: Vec<String> = (0..rows).map(|i| format!("r{i:0width$}")).collect();
    let x: Vec<Vec<f64>> = (0..rows)
        .map(|_| (0..total).map(|_| rng.sample(StandardNormal)).collect())
        .collect();
    let teacher: Vec<f64> = (0..total).map(|_| rng.sample(StandardNormal)).collect();
    let labels: Vec<u8> = x
        .iter()
        .map(|row| {
            let score: f64 = row.iter().zip(&teacher).map(|(a, b)| a * b).sum();
            u8::from(crate::models::sigmoid(score) >= 0.5)
        })
        .collect();

    let mut written = Vec::with_capacity(features.len());
    let mut start = 0;
    for (p, &width) in features.iter().enumerate() {
        let party = if p == 0 {
            PartyId::master()
        } else {
            PartyId::member(p as u32 - 1)
        };
        let mut kept: Vec<usize> = (0..rows).filter(|_| !rng.gen_bool(SYNTHETIC_DROP_RATE)).collect();
        kept.shuffle(&mut rng);

        let path = out_dir.join(party_file_name(party));
        let mut out = String::from("id");
        for c in start..start + width {
            out.push_str(&format!(",x{c}"));
        }
        if p == 0 {
            out.push_str(",y");
        }
        out.push('\n');
        for &r in &kept {
            out.push_str(&ids[r]);
            for c in start..start + width {
                out.push_str(&format!(",{}", x[r][c]));
            }
            if p == 0 {
                out.push_str(&format!(",{}", labels[r]));
            }
            out.push('\n');
        }
        File::create(&path)
            .and_then(|mut f| f.write_all(out.as_bytes()))
            .map_err(io_err(&path))?;
        written.push(path);
        start += width;
    }
    Ok(written)
}
