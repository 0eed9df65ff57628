//! CSV and JSON file formats.
//!
//! | file            | layout                                         |
//! |-----------------|------------------------------------------------|
//! | semantic vectors| `class_id,v0,...,v{d-1}`                       |
//! | features        | `image_id,label,f0,...,f{d-1}` (label optional)|
//! | hierarchy       | `species_id,genus_id,family_id`                |
//! | split           | `{"seen": [...], "unseen": [...]}` or a list   |
//! | scores          | `image_id,<class_0>,...,<class_{n-1}>`         |
//! | graph           | `class_id,<class_0>,...,<class_{n-1}>`         |

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hiernet::Hierarchy;
use crate::propagation::ScoreMatrix;
use crate::seeder::FeatureDataset;
use crate::semantic::{ClassGraph, ClassId};

/// Class vectors in file order.
#[derive(Debug, Clone, PartialEq)]
pub struct SemanticVectors {
    pub order: Vec<ClassId>,
    pub vectors: HashMap<ClassId, Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Split {
    pub seen: Vec<ClassId>,
    pub unseen: Vec<ClassId>,
}

#[derive(Deserialize)]
#[serde(untagged)]
enum SplitFile {
    One(Split),
    Many(Vec<Split>),
}

fn reader(path: &Path) -> Result<csv::Reader<File>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    Ok(csv::ReaderBuilder::new()
        .has_headers(true)
        .from_reader(file))
}

fn writer(path: &Path) -> Result<csv::Writer<File>> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    Ok(csv::Writer::from_writer(file))
}

fn csv_err(path: &Path, e: csv::Error) -> Error {
    Error::parse(path, e.to_string())
}

fn parse_f64(path: &Path, line: usize, field: &str) -> Result<f64> {
    let v: f64 = field
        .trim()
        .parse()
        .map_err(|_| Error::parse(path, format!("line {line}: `{field}` is not a number")))?;
    if !v.is_finite() {
        return Err(Error::parse(
            path,
            format!("line {line}: non-finite value `{field}`"),
        ));
    }
    Ok(v)
}

fn check_header(path: &Path, header: &csv::StringRecord, fixed: &[&str]) -> Result<()> {
    for (i, name) in fixed.iter().enumerate() {
        if header.get(i).map(str::trim) != Some(*name) {
            return Err(Error::parse(
                path,
                format!("header must start with `{}`", fixed.join(",")),
            ));
        }
    }
    Ok(())
}

pub fn read_semantic_vectors(path: &Path) -> Result<SemanticVectors> {
    let mut rdr = reader(path)?;
    let header = rdr.headers().map_err(|e| csv_err(path, e))?.clone();
    check_header(path, &header, &["class_id"])?;
    let dim = header.len() - 1;
    if dim == 0 {
        return Err(Error::parse(path, "no vector columns"));
    }
    let mut order = Vec::new();
    let mut vectors = HashMap::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| csv_err(path, e))?;
        let line = i + 2;
        let id = rec[0].trim().to_string();
        let v = rec
            .iter()
            .skip(1)
            .map(|f| parse_f64(path, line, f))
            .collect::<Result<Vec<_>>>()?;
        if v.len() != dim {
            return Err(Error::parse(
                path,
                format!("line {line}: expected {dim} values"),
            ));
        }
        if vectors.insert(id.clone(), v).is_some() {
            return Err(Error::parse(
                path,
                format!("line {line}: duplicate class `{id}`"),
            ));
        }
        order.push(id);
    }
    Ok(SemanticVectors { order, vectors })
}

pub fn write_semantic_vectors(path: &Path, sv: &SemanticVectors) -> Result<()> {
    let mut w = writer(path)?;
    let dim = sv.order.first().map_or(0, |id| sv.vectors[id].len());
    let mut header = vec!["class_id".to_string()];
    header.extend((0..dim).map(|i| format!("v{i}")));
    w.write_record(&header).map_err(|e| csv_err(path, e))?;
    for id in &sv.order {
        let mut row = vec![id.clone()];
        row.extend(sv.vectors[id].iter().map(|v| v.to_string()));
        w.write_record(&row).map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_features(path: &Path) -> Result<FeatureDataset> {
    let mut rdr = reader(path)?;
    let header = rdr.headers().map_err(|e| csv_err(path, e))?.clone();
    check_header(path, &header, &["image_id", "label"])?;
    let dim = header.len() - 2;
    let mut ids = Vec::new();
    let mut labels = Vec::new();
    let mut values = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| csv_err(path, e))?;
        let line = i + 2;
        if rec.len() != dim + 2 {
            return Err(Error::parse(
                path,
                format!("line {line}: expected {} fields", dim + 2),
            ));
        }
        ids.push(rec[0].trim().to_string());
        let label = rec[1].trim();
        labels.push((!label.is_empty()).then(|| label.to_string()));
        for f in rec.iter().skip(2) {
            values.push(parse_f64(path, line, f)?);
        }
    }
    let features = DMatrix::from_row_slice(ids.len(), dim, &values);
    FeatureDataset::new(ids, features, labels)
}

pub fn write_features(path: &Path, data: &FeatureDataset) -> Result<()> {
    let mut w = writer(path)?;
    let mut header = vec!["image_id".to_string(), "label".to_string()];
    header.extend((0..data.dim()).map(|i| format!("f{i}")));
    w.write_record(&header).map_err(|e| csv_err(path, e))?;
    for i in 0..data.len() {
        let mut row = vec![
            data.image_ids[i].clone(),
            data.labels[i].clone().unwrap_or_default(),
        ];
        row.extend(data.features.row(i).iter().map(|v| v.to_string()));
        w.write_record(&row).map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_hierarchy(path: &Path) -> Result<Hierarchy> {
    let mut rdr = reader(path)?;
    let header = rdr.headers().map_err(|e| csv_err(path, e))?.clone();
    check_header(path, &header, &["species_id", "genus_id", "family_id"])?;
    let mut rows = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| csv_err(path, e))?;
        if rec.len() != 3 {
            return Err(Error::parse(path, "expected 3 fields per row"));
        }
        rows.push((
            rec[0].trim().to_string(),
            rec[1].trim().to_string(),
            rec[2].trim().to_string(),
        ));
    }
    Hierarchy::new(rows).map_err(|e| Error::parse(path, e.to_string()))
}

pub fn write_hierarchy(path: &Path, h: &Hierarchy) -> Result<()> {
    let mut w = writer(path)?;
    w.write_record(["species_id", "genus_id", "family_id"])
        .map_err(|e| csv_err(path, e))?;
    for (s, g, f) in h.rows() {
        w.write_record([s, g, f]).map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// A single split object or a list of them.
pub fn read_splits(path: &Path) -> Result<Vec<Split>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let parsed: SplitFile = serde_json::from_reader(BufReader::new(file))
        .map_err(|e| Error::parse(path, e.to_string()))?;
    Ok(match parsed {
        SplitFile::One(s) => vec![s],
        SplitFile::Many(v) => v,
    })
}

pub fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    serde_json::to_writer_pretty(&mut w, value).map_err(|e| Error::parse(path, e.to_string()))?;
    w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_reader(BufReader::new(file)).map_err(|e| Error::parse(path, e.to_string()))
}

pub fn write_scores(path: &Path, scores: &ScoreMatrix) -> Result<()> {
    let mut w = writer(path)?;
    let mut header = vec!["image_id".to_string()];
    header.extend(scores.class_order.iter().cloned());
    w.write_record(&header).map_err(|e| csv_err(path, e))?;
    for (i, id) in scores.image_ids.iter().enumerate() {
        let mut row = vec![id.clone()];
        row.extend(scores.values.row(i).iter().map(|v| v.to_string()));
        w.write_record(&row).map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Reads a score matrix; `p` leading columns are seen classes.
pub fn read_scores(path: &Path, p: usize) -> Result<ScoreMatrix> {
    let (class_order, ids, values) = read_square_ish(path, "image_id")?;
    ScoreMatrix::new(values, ids, class_order, p)
}

fn read_square_ish(path: &Path, first: &str) -> Result<(Vec<ClassId>, Vec<String>, DMatrix<f64>)> {
    let mut rdr = reader(path)?;
    let header = rdr.headers().map_err(|e| csv_err(path, e))?.clone();
    check_header(path, &header, &[first])?;
    let class_order: Vec<ClassId> = header
        .iter()
        .skip(1)
        .map(|s| s.trim().to_string())
        .collect();
    let n = class_order.len();
    let mut ids = Vec::new();
    let mut values = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| csv_err(path, e))?;
        if rec.len() != n + 1 {
            return Err(Error::parse(
                path,
                format!("line {}: expected {} fields", i + 2, n + 1),
            ));
        }
        ids.push(rec[0].trim().to_string());
        for f in rec.iter().skip(1) {
            values.push(parse_f64(path, i + 2, f)?);
        }
    }
    Ok((
        class_order,
        ids.clone(),
        DMatrix::from_row_slice(ids.len(), n, &values),
    ))
}

pub fn write_graph(path: &Path, graph: &ClassGraph) -> Result<()> {
    let mut w = writer(path)?;
    let mut header = vec!["class_id".to_string()];
    header.extend(graph.class_order.iter().cloned());
    w.write_record(&header).map_err(|e| csv_err(path, e))?;
    for (i, id) in graph.class_order.iter().enumerate() {
        let mut row = vec![id.clone()];
        row.extend(graph.weights.row(i).iter().map(|v| v.to_string()));
        w.write_record(&row).map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Reads a graph written by [`write_graph`]; `p` is the number of seen
/// classes, which lead the class order.
pub fn read_graph(path: &Path, p: usize, k1: usize, k2: usize) -> Result<ClassGraph> {
    let (class_order, rows, weights) = read_square_ish(path, "class_id")?;
    if rows != class_order {
        return Err(Error::parse(
            path,
            "row labels must repeat the header class order",
        ));
    }
    let graph = ClassGraph {
        weights,
        k1,
        k2,
        class_order,
        p,
    };
    graph
        .validate()
        .map_err(|e| Error::parse(path, e.to_string()))?;
    Ok(graph)
}
