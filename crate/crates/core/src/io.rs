//! CSV and JSON formats shared by the command-line tools.
//!
//! Floats are written with Rust's shortest round-trip formatting so a written
//! file reloads to identical values and identical runs give identical bytes.

use std::io::{Read, Write};

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mixup::MixKind;
use crate::projection::ProjectedPoint;
use crate::theory::{ClosedForm, FeatureRecord};
use crate::trainer::{Activation, ClassifierMode, Dataset, Dense, EpochStats, TrainedModel};

fn csv_error(err: csv::Error) -> Error {
    let line = err.position().map_or(0, |p| p.line());
    match err.into_kind() {
        csv::ErrorKind::Io(e) => Error::Io(e),
        other => Error::Parse { line, msg: format!("{other:?}") },
    }
}

fn reader<R: Read>(input: R, headers: bool) -> csv::Reader<R> {
    csv::ReaderBuilder::new().has_headers(headers).trim(csv::Trim::All).from_reader(input)
}

fn writer<W: Write>(out: W) -> csv::Writer<W> {
    csv::WriterBuilder::new().has_headers(false).from_writer(out)
}

fn line_of(record: &csv::StringRecord) -> u64 {
    record.position().map_or(0, |p| p.line())
}

fn field(record: &csv::StringRecord, idx: usize) -> Result<&str> {
    record.get(idx).ok_or_else(|| Error::Parse { line: line_of(record), msg: format!("missing field {idx}") })
}

fn parse<T: std::str::FromStr>(record: &csv::StringRecord, idx: usize, what: &str) -> Result<T> {
    let raw = field(record, idx)?;
    raw.parse().map_err(|_| Error::Parse { line: line_of(record), msg: format!("invalid {what} {raw:?}") })
}

fn parse_floats(record: &csv::StringRecord, from: usize) -> Result<Vec<f64>> {
    (from..record.len()).map(|k| parse(record, k, "number")).collect()
}

fn check_header(rdr: &mut csv::Reader<impl Read>, fixed: &[&str], prefix: Option<&str>) -> Result<usize> {
    let header = rdr.headers().map_err(csv_error)?.clone();
    let bad = |msg: String| Error::Parse { line: 1, msg };
    if header.len() < fixed.len() {
        return Err(bad(format!("expected header starting with {}", fixed.join(","))));
    }
    for (k, name) in fixed.iter().enumerate() {
        if &header[k] != *name {
            return Err(bad(format!("header field {k} is {:?}, expected {name:?}", &header[k])));
        }
    }
    let extra = header.len() - fixed.len();
    match prefix {
        Some(p) => {
            for k in 0..extra {
                let expected = format!("{p}{k}");
                if header[fixed.len() + k] != expected {
                    return Err(bad(format!("header field {} should be {expected:?}", fixed.len() + k)));
                }
            }
            Ok(extra)
        }
        None if extra > 0 => Err(bad(format!("unexpected trailing header fields after {}", fixed.join(",")))),
        None => Ok(0),
    }
}

fn write_row<W: Write>(wtr: &mut csv::Writer<W>, row: Vec<String>) -> Result<()> {
    wtr.write_record(&row).map_err(csv_error)
}

fn finish<W: Write>(wtr: csv::Writer<W>) -> Result<()> {
    wtr.into_inner().map_err(|e| Error::Io(e.into_error()))?.flush()?;
    Ok(())
}

fn parse_bool(record: &csv::StringRecord, idx: usize) -> Result<bool> {
    match field(record, idx)? {
        "true" | "1" => Ok(true),
        "false" | "0" => Ok(false),
        other => Err(Error::Parse { line: line_of(record), msg: format!("invalid boolean {other:?}") }),
    }
}

fn parse_kind(record: &csv::StringRecord, idx: usize, class_i: usize, class_ip: usize) -> Result<MixKind> {
    let kind: MixKind = parse(record, idx, "kind")?;
    if kind != MixKind::from_labels(class_i, class_ip) {
        return Err(Error::Parse {
            line: line_of(record),
            msg: format!("kind {} does not match classes {class_i},{class_ip}", kind.as_str()),
        });
    }
    Ok(kind)
}

/// Classifier rows, no header.
pub fn write_classifier_csv<W: Write>(out: W, rows: &DMatrix<f64>) -> Result<()> {
    let mut wtr = writer(out);
    for r in 0..rows.nrows() {
        write_row(&mut wtr, rows.row(r).iter().map(|v| v.to_string()).collect())?;
    }
    finish(wtr)
}

pub fn read_classifier_csv<R: Read>(input: R) -> Result<DMatrix<f64>> {
    let mut rdr = reader(input, false);
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for record in rdr.records() {
        let record = record.map_err(csv_error)?;
        rows.push(parse_floats(&record, 0)?);
    }
    let d = rows.first().map(Vec::len).ok_or(Error::Empty("classifier"))?;
    Ok(DMatrix::from_fn(rows.len(), d, |r, c| rows[r][c]))
}

const FEATURE_FIELDS: [&str; 5] = ["class_i", "class_ip", "lambda", "kind", "amplified"];

pub fn write_features_csv<W: Write>(out: W, records: &[FeatureRecord]) -> Result<()> {
    let d = records.first().map_or(0, |r| r.h.len());
    let mut wtr = writer(out);
    let mut header: Vec<String> = FEATURE_FIELDS.iter().map(|s| s.to_string()).collect();
    header.extend((0..d).map(|k| format!("h_{k}")));
    write_row(&mut wtr, header)?;
    for rec in records {
        if rec.h.len() != d {
            return Err(Error::DimensionMismatch { expected: d, got: rec.h.len() });
        }
        let mut row = vec![
            rec.class_i.to_string(),
            rec.class_ip.to_string(),
            rec.lambda.to_string(),
            rec.kind.as_str().to_string(),
            rec.amplified.to_string(),
        ];
        row.extend(rec.h.iter().map(|v| v.to_string()));
        write_row(&mut wtr, row)?;
    }
    finish(wtr)
}

pub fn read_features_csv<R: Read>(input: R) -> Result<Vec<FeatureRecord>> {
    let mut rdr = reader(input, true);
    let d = check_header(&mut rdr, &FEATURE_FIELDS, Some("h_"))?;
    let mut out = Vec::new();
    for record in rdr.records() {
        let record = record.map_err(csv_error)?;
        if record.len() != FEATURE_FIELDS.len() + d {
            return Err(Error::Parse {
                line: line_of(&record),
                msg: format!("expected {} fields, found {}", FEATURE_FIELDS.len() + d, record.len()),
            });
        }
        let class_i = parse(&record, 0, "class index")?;
        let class_ip = parse(&record, 1, "class index")?;
        let lambda = parse(&record, 2, "lambda")?;
        parse_kind(&record, 3, class_i, class_ip)?;
        let amplified = parse_bool(&record, 4)?;
        let h = DVector::from_vec(parse_floats(&record, FEATURE_FIELDS.len())?);
        out.push(FeatureRecord::new(class_i, class_ip, lambda, h, amplified));
    }
    Ok(out)
}

const POINT_FIELDS: [&str; 7] = ["class_i", "class_ip", "lambda", "kind", "amplified", "px", "py"];

pub fn write_points_csv<W: Write>(out: W, points: &[ProjectedPoint]) -> Result<()> {
    let mut wtr = writer(out);
    write_row(&mut wtr, POINT_FIELDS.iter().map(|s| s.to_string()).collect())?;
    for p in points {
        write_row(
            &mut wtr,
            vec![
                p.class_i.to_string(),
                p.class_ip.to_string(),
                p.lambda.to_string(),
                p.kind.as_str().to_string(),
                p.amplified.to_string(),
                p.px.to_string(),
                p.py.to_string(),
            ],
        )?;
    }
    finish(wtr)
}

pub fn read_points_csv<R: Read>(input: R) -> Result<Vec<ProjectedPoint>> {
    let mut rdr = reader(input, true);
    check_header(&mut rdr, &POINT_FIELDS, None)?;
    let mut out = Vec::new();
    for record in rdr.records() {
        let record = record.map_err(csv_error)?;
        let class_i = parse(&record, 0, "class index")?;
        let class_ip = parse(&record, 1, "class index")?;
        out.push(ProjectedPoint {
            class_i,
            class_ip,
            lambda: parse(&record, 2, "lambda")?,
            kind: parse_kind(&record, 3, class_i, class_ip)?,
            amplified: parse_bool(&record, 4)?,
            px: parse(&record, 5, "px")?,
            py: parse(&record, 6, "py")?,
        });
    }
    Ok(out)
}

/// Compact per-record summary of a theory configuration.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClosedFormEntry {
    pub class_i: usize,
    pub class_ip: usize,
    pub lambda: f64,
    pub amplified: bool,
    #[serde(flatten)]
    pub closed_form: ClosedForm,
}

pub fn closed_form_entries(records: &[FeatureRecord]) -> Vec<ClosedFormEntry> {
    records
        .iter()
        .filter_map(|r| {
            r.closed_form.map(|closed_form| ClosedFormEntry {
                class_i: r.class_i,
                class_ip: r.class_ip,
                lambda: r.lambda,
                amplified: r.amplified,
                closed_form,
            })
        })
        .collect()
}

pub fn write_closed_form_json<W: Write>(mut out: W, records: &[FeatureRecord]) -> Result<()> {
    serde_json::to_writer(&mut out, &closed_form_entries(records))?;
    out.write_all(b"\n")?;
    Ok(())
}

/// `label,x_0,...` per sample.
pub fn write_dataset_csv<W: Write>(out: W, data: &Dataset) -> Result<()> {
    let mut wtr = writer(out);
    let mut header = vec!["label".to_string()];
    header.extend((0..data.input_dim()).map(|k| format!("x_{k}")));
    write_row(&mut wtr, header)?;
    for (x, y) in data.inputs.iter().zip(&data.labels) {
        let mut row = vec![y.to_string()];
        row.extend(x.iter().map(|v| v.to_string()));
        write_row(&mut wtr, row)?;
    }
    finish(wtr)
}

/// Labels must lie below `num_classes`.
pub fn read_dataset_csv<R: Read>(input: R, num_classes: usize) -> Result<Dataset> {
    let mut rdr = reader(input, true);
    let d = check_header(&mut rdr, &["label"], Some("x_"))?;
    let mut inputs = Vec::new();
    let mut labels = Vec::new();
    for record in rdr.records() {
        let record = record.map_err(csv_error)?;
        let label: usize = parse(&record, 0, "label")?;
        if label >= num_classes {
            return Err(Error::Parse { line: line_of(&record), msg: format!("label {label} out of range") });
        }
        let x = parse_floats(&record, 1)?;
        if x.len() != d {
            return Err(Error::Parse {
                line: line_of(&record),
                msg: format!("expected {d} inputs, found {}", x.len()),
            });
        }
        inputs.push(x);
        labels.push(label);
    }
    Ok(Dataset { inputs, labels, num_classes })
}

/// Rows of `confidence,predicted,label`.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Predictions {
    pub confidences: Vec<f64>,
    pub predicted: Vec<usize>,
    pub labels: Vec<usize>,
}

pub fn write_predictions_csv<W: Write>(out: W, preds: &Predictions) -> Result<()> {
    let n = preds.confidences.len();
    for len in [preds.predicted.len(), preds.labels.len()] {
        if len != n {
            return Err(Error::DimensionMismatch { expected: n, got: len });
        }
    }
    let mut wtr = writer(out);
    write_row(&mut wtr, vec!["confidence".into(), "predicted".into(), "label".into()])?;
    for k in 0..n {
        write_row(
            &mut wtr,
            vec![preds.confidences[k].to_string(), preds.predicted[k].to_string(), preds.labels[k].to_string()],
        )?;
    }
    finish(wtr)
}

pub fn read_predictions_csv<R: Read>(input: R) -> Result<Predictions> {
    let mut rdr = reader(input, true);
    check_header(&mut rdr, &["confidence", "predicted", "label"], None)?;
    let mut preds = Predictions::default();
    for record in rdr.records() {
        let record = record.map_err(csv_error)?;
        if record.len() != 3 {
            return Err(Error::Parse {
                line: line_of(&record),
                msg: format!("expected 3 fields, found {}", record.len()),
            });
        }
        preds.confidences.push(parse(&record, 0, "confidence")?);
        preds.predicted.push(parse(&record, 1, "class index")?);
        preds.labels.push(parse(&record, 2, "label")?);
    }
    Ok(preds)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct LayerDocument {
    /// Row-major, `outputs x inputs`.
    weights: Vec<f64>,
    bias: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct ModelDocument {
    activation: Activation,
    classifier_mode: ClassifierMode,
    layer_sizes: Vec<usize>,
    /// Hidden layers followed by the classifier.
    layers: Vec<LayerDocument>,
    history: Vec<EpochStats>,
}

impl From<&Dense> for LayerDocument {
    fn from(layer: &Dense) -> Self {
        let mut weights = Vec::with_capacity(layer.weight.len());
        for r in 0..layer.weight.nrows() {
            weights.extend(layer.weight.row(r).iter());
        }
        Self { weights, bias: layer.bias.iter().copied().collect() }
    }
}

pub fn write_model_json<W: Write>(mut out: W, model: &TrainedModel) -> Result<()> {
    let mut layers: Vec<LayerDocument> = model.hidden.iter().map(LayerDocument::from).collect();
    layers.push(LayerDocument::from(&model.classifier));
    let doc = ModelDocument {
        activation: model.activation,
        classifier_mode: model.classifier_mode,
        layer_sizes: model.layer_sizes(),
        layers,
        history: model.history.clone(),
    };
    serde_json::to_writer_pretty(&mut out, &doc)?;
    out.write_all(b"\n")?;
    Ok(())
}

pub fn read_model_json<R: Read>(input: R) -> Result<TrainedModel> {
    let doc: ModelDocument = serde_json::from_reader(input)?;
    if doc.layer_sizes.len() < 3 || doc.layers.len() != doc.layer_sizes.len() - 1 {
        return Err(Error::InvalidArgument(format!(
            "model has {} layer sizes and {} layers",
            doc.layer_sizes.len(),
            doc.layers.len()
        )));
    }
    let mut dense = Vec::with_capacity(doc.layers.len());
    for (k, layer) in doc.layers.into_iter().enumerate() {
        let (rows, cols) = (doc.layer_sizes[k + 1], doc.layer_sizes[k]);
        if layer.weights.len() != rows * cols {
            return Err(Error::DimensionMismatch { expected: rows * cols, got: layer.weights.len() });
        }
        if layer.bias.len() != rows {
            return Err(Error::DimensionMismatch { expected: rows, got: layer.bias.len() });
        }
        dense.push(Dense {
            weight: DMatrix::from_row_slice(rows, cols, &layer.weights),
            bias: DVector::from_vec(layer.bias),
        });
    }
    let classifier = dense.pop().expect("at least two layers");
    Ok(TrainedModel {
        activation: doc.activation,
        classifier_mode: doc.classifier_mode,
        hidden: dense,
        classifier,
        history: doc.history,
    })
}
