//! Event CSV: header `src,dst,time,label[,ef_0..ef_{m-1}]`.
//! Node-feature CSV: header `node,f_0..f_{d_x-1}`.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use super::{Event, EventStream};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

const MAX_NODE_ID: u64 = u32::MAX as u64;

pub fn ingest_csv(path: impl AsRef<Path>) -> Result<EventStream> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_events(&text, None)
}

/// Parses event CSV text; `node_feat` (if any) fixes the node count lower bound.
pub fn parse_events(text: &str, node_feat: Option<Tensor>) -> Result<EventStream> {
    let mut lines = text.lines().enumerate();
    let (_, header) = lines.next().ok_or(Error::EmptyStream)?;
    let edge_dim = parse_event_header(header)?;
    let columns = 4 + edge_dim;

    let mut events = Vec::new();
    let mut max_id = 0usize;
    for (i, raw) in lines {
        let line = i + 1;
        if raw.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = raw.split(',').map(str::trim).collect();
        if fields.len() != columns {
            return Err(Error::FeatureArity {
                line,
                expected: columns,
                found: fields.len(),
            });
        }
        let src = parse_node(fields[0], line)?;
        let dst = parse_node(fields[1], line)?;
        let time = parse_real(fields[2], line, "time")?;
        if time < 0.0 {
            return Err(Error::NegativeTimestamp { line, time });
        }
        let label = match fields[3] {
            "" => None,
            "0" => Some(false),
            "1" => Some(true),
            other => {
                return Err(Error::MalformedRow {
                    line,
                    message: format!("label must be 0, 1 or empty, got {other:?}"),
                })
            }
        };
        let edge_feat = fields[4..]
            .iter()
            .map(|f| parse_real(f, line, "edge feature"))
            .collect::<Result<Vec<_>>>()?;
        max_id = max_id.max(src).max(dst);
        events.push(Event {
            src,
            dst,
            time,
            edge_feat,
            label,
            idx: 0,
        });
    }
    if events.is_empty() {
        return Err(Error::EmptyStream);
    }
    let num_nodes = match &node_feat {
        Some(f) => f.rows().max(max_id + 1),
        None => max_id + 1,
    };
    let node_feat = node_feat.map(|f| pad_rows(f, num_nodes));
    EventStream::new(events, num_nodes, node_feat)
}

/// Loads node features for `stream`; nodes without a row get zero vectors.
pub fn ingest_node_features(path: impl AsRef<Path>, num_nodes: usize) -> Result<Tensor> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines().enumerate();
    let (_, header) = lines.next().ok_or_else(|| Error::MalformedRow {
        line: 1,
        message: "missing header".into(),
    })?;
    let cols: Vec<&str> = header.split(',').map(str::trim).collect();
    if cols.first() != Some(&"node") {
        return Err(Error::MalformedRow {
            line: 1,
            message: "node-feature header must start with `node`".into(),
        });
    }
    for (k, c) in cols[1..].iter().enumerate() {
        if *c != format!("f_{k}") {
            return Err(Error::MalformedRow {
                line: 1,
                message: format!("expected column f_{k}, found {c:?}"),
            });
        }
    }
    let dim = cols.len() - 1;
    let mut rows: Vec<(usize, Vec<f64>)> = Vec::new();
    let mut max_id = 0;
    for (i, raw) in lines {
        let line = i + 1;
        if raw.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = raw.split(',').map(str::trim).collect();
        if fields.len() != dim + 1 {
            return Err(Error::FeatureArity {
                line,
                expected: dim + 1,
                found: fields.len(),
            });
        }
        let node = parse_node(fields[0], line)?;
        let vals = fields[1..]
            .iter()
            .map(|f| parse_real(f, line, "node feature"))
            .collect::<Result<Vec<_>>>()?;
        max_id = max_id.max(node);
        rows.push((node, vals));
    }
    let n = num_nodes.max(if rows.is_empty() { 0 } else { max_id + 1 });
    let mut out = Tensor::zeros(n, dim);
    for (node, vals) in rows {
        out.row_mut(node).copy_from_slice(&vals);
    }
    Ok(out)
}

pub const EVENTS_FILE: &str = "events.csv";
pub const NODE_FEATURES_FILE: &str = "node_features.csv";

/// Loads an event CSV, or a directory holding `events.csv` and optionally
/// `node_features.csv`.
pub fn load_dataset(path: impl AsRef<Path>) -> Result<EventStream> {
    let path = path.as_ref();
    if !path.is_dir() {
        return ingest_csv(path);
    }
    let stream = ingest_csv(path.join(EVENTS_FILE))?;
    let feat_path = path.join(NODE_FEATURES_FILE);
    if !feat_path.exists() {
        return Ok(stream);
    }
    let feat = ingest_node_features(&feat_path, stream.num_nodes())?;
    let n = feat.rows();
    EventStream::new(stream.events().to_vec(), n, Some(feat))
}

/// Writes `events.csv` (and `node_features.csv` when present) into `dir`;
/// returns the written paths.
pub fn write_dataset(
    stream: &EventStream,
    dir: impl AsRef<Path>,
) -> Result<Vec<std::path::PathBuf>> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut out = vec![dir.join(EVENTS_FILE)];
    write_csv(stream, &out[0])?;
    if stream.feature_dims().0 > 0 {
        out.push(dir.join(NODE_FEATURES_FILE));
        write_node_features(stream.node_features(), &out[1])?;
    }
    Ok(out)
}

pub fn write_csv(stream: &EventStream, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, events_to_csv(stream)).map_err(|e| Error::io(path, e))
}

pub(crate) fn events_to_csv(stream: &EventStream) -> String {
    let (_, m) = stream.feature_dims();
    let mut out = String::from("src,dst,time,label");
    for k in 0..m {
        let _ = write!(out, ",ef_{k}");
    }
    out.push('\n');
    for e in stream.events() {
        let label = match e.label {
            None => "",
            Some(false) => "0",
            Some(true) => "1",
        };
        let _ = write!(out, "{},{},{},{}", e.src, e.dst, e.time, label);
        for v in &e.edge_feat {
            let _ = write!(out, ",{v}");
        }
        out.push('\n');
    }
    out
}

pub fn write_node_features(features: &Tensor, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut out = String::from("node");
    for k in 0..features.cols() {
        let _ = write!(out, ",f_{k}");
    }
    out.push('\n');
    for r in 0..features.rows() {
        let _ = write!(out, "{r}");
        for v in features.row(r) {
            let _ = write!(out, ",{v}");
        }
        out.push('\n');
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

fn parse_event_header(header: &str) -> Result<usize> {
    let cols: Vec<&str> = header
        .trim_start_matches('\u{feff}')
        .split(',')
        .map(str::trim)
        .collect();
    if cols.len() < 4 || cols[..4] != ["src", "dst", "time", "label"] {
        return Err(Error::MalformedRow {
            line: 1,
            message: "header must start with src,dst,time,label".into(),
        });
    }
    for (k, c) in cols[4..].iter().enumerate() {
        if *c != format!("ef_{k}") {
            return Err(Error::MalformedRow {
                line: 1,
                message: format!("expected column ef_{k}, found {c:?}"),
            });
        }
    }
    Ok(cols.len() - 4)
}

fn parse_node(field: &str, line: usize) -> Result<usize> {
    if field.is_empty() || !field.bytes().all(|b| b.is_ascii_digit()) {
        return Err(Error::MalformedRow {
            line,
            message: format!("invalid node id {field:?}"),
        });
    }
    match field.parse::<u64>() {
        Ok(v) if v <= MAX_NODE_ID => Ok(v as usize),
        _ => Err(Error::NodeIdOverflow {
            line,
            id: field.to_string(),
        }),
    }
}

fn parse_real(field: &str, line: usize, what: &str) -> Result<f64> {
    match field.parse::<f64>() {
        Ok(v) if v.is_finite() => Ok(v),
        _ => Err(Error::MalformedRow {
            line,
            message: format!("invalid {what} {field:?}"),
        }),
    }
}

fn pad_rows(f: Tensor, rows: usize) -> Tensor {
    if f.rows() == rows {
        return f;
    }
    let mut out = Tensor::zeros(rows, f.cols());
    for r in 0..f.rows() {
        out.row_mut(r).copy_from_slice(f.row(r));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn three_line_file() {
        let s = parse_events(
            "src,dst,time,label\n0,1,1.0,0\n1,2,2.0,0\n0,2,3.0,0\n",
            None,
        )
        .unwrap();
        assert_eq!(s.len(), 3);
        assert_eq!(s.num_nodes(), 3);
        assert_eq!(s.feature_dims(), (0, 0));
        assert_eq!(s.events()[0].label, Some(false));
    }

    #[test]
    fn header_only_is_empty_stream() {
        let err = parse_events("src,dst,time,label\n", None).unwrap_err();
        assert_eq!(err.to_string(), "empty stream");
    }

    #[test]
    fn out_of_order_rows_are_resorted() {
        let s = parse_events("src,dst,time,label\n0,1,2.0,\n1,0,1.0,\n", None).unwrap();
        let times: Vec<f64> = s.events().iter().map(|e| e.time).collect();
        let idx: Vec<usize> = s.events().iter().map(|e| e.idx).collect();
        assert_eq!(times, vec![1.0, 2.0]);
        assert_eq!(idx, vec![0, 1]);
        assert_eq!(s.events()[0].src, 1);
    }

    #[test]
    fn error_paths_report_line_numbers() {
        let err = parse_events("src,dst,time,label\n0,1,1.0,0\n0,x,2.0,0\n", None).unwrap_err();
        assert!(matches!(err, Error::MalformedRow { line: 3, .. }), "{err}");
        let err = parse_events("src,dst,time,label\n0,1,-1.0,0\n", None).unwrap_err();
        assert!(matches!(err, Error::NegativeTimestamp { line: 2, .. }));
        let err = parse_events("src,dst,time,label,ef_0\n0,1,1.0,0\n", None).unwrap_err();
        assert!(matches!(
            err,
            Error::FeatureArity {
                line: 2,
                expected: 5,
                found: 4
            }
        ));
        let err = parse_events("src,dst,time,label\n99999999999,1,1.0,0\n", None).unwrap_err();
        assert!(matches!(err, Error::NodeIdOverflow { line: 2, .. }));
        let err = parse_events("src,dst,time,label\n0,1,1e400,0\n", None).unwrap_err();
        assert!(matches!(err, Error::MalformedRow { line: 2, .. }));
        assert!(parse_events("dst,src,time,label\n0,1,1,0\n", None).is_err());
    }

    #[test]
    fn scientific_notation_and_edge_features() {
        let s = parse_events("src,dst,time,label,ef_0,ef_1\n0,1,1e1,1,0.5,-2E-1\n", None).unwrap();
        assert_eq!(s.events()[0].time, 10.0);
        assert_eq!(s.events()[0].edge_feat, vec![0.5, -0.2]);
        assert_eq!(s.events()[0].label, Some(true));
    }

    #[test]
    fn round_trip_through_text() {
        let text = "src,dst,time,label,ef_0\n0,1,0.5,1,3.25\n2,1,0.5,,-1\n1,0,2,0,0\n";
        let s = parse_events(text, None).unwrap();
        let again = parse_events(&events_to_csv(&s), None).unwrap();
        assert_eq!(s, again);
    }
}
