//! JSON Lines manifests: an optional `{"manifest": {...}}` header line with
//! the metadata, then one [`Record`] per line.

use std::collections::BTreeSet;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{DatasetManifest, ManifestMetadata, Record};
use crate::error::{Error, Result};
use crate::io::{atomic_write, read_to_string};

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    manifest: ManifestMetadata,
}

pub fn write_manifest(manifest: &DatasetManifest, path: &Path) -> Result<()> {
    atomic_write(path, to_jsonl(manifest)?.as_bytes())
}

pub fn read_manifest(path: &Path) -> Result<DatasetManifest> {
    from_jsonl(&read_to_string(path)?)
}

pub(crate) fn to_jsonl(manifest: &DatasetManifest) -> Result<String> {
    let mut out = serde_json::to_string(&Header {
        manifest: manifest.metadata.clone(),
    })?;
    out.push('\n');
    for r in manifest.records() {
        out.push_str(&serde_json::to_string(r)?);
        out.push('\n');
    }
    Ok(out)
}

pub(crate) fn from_jsonl(text: &str) -> Result<DatasetManifest> {
    let mut manifest = DatasetManifest::default();
    let mut ids = BTreeSet::new();
    for (idx, line) in text.lines().enumerate() {
        let line_no = idx + 1;
        if line.trim().is_empty() {
            continue;
        }
        if idx == 0 {
            if let Ok(h) = serde_json::from_str::<Header>(line) {
                manifest.metadata = h.manifest;
                continue;
            }
        }
        let r: Record = serde_json::from_str(line).map_err(|e| Error::Parse {
            line: line_no,
            message: e.to_string(),
        })?;
        if !ids.insert(r.id.clone()) {
            return Err(Error::DuplicateId(r.id));
        }
        manifest.datasets.entry(r.dataset_id.clone()).or_default().push(r);
    }
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::TaskKind;

    fn sample() -> DatasetManifest {
        let mut m = DatasetManifest::default();
        m.metadata.seed = 9;
        m.metadata.p_fn = 0.05;
        m.metadata
            .label_sets
            .insert("cls".into(), vec!["yes".into(), "no".into()]);
        for i in 0..8 {
            let ds = if i < 4 { "cls" } else { "ret" };
            m.datasets.entry(ds.into()).or_default().push(Record {
                id: format!("r{i}"),
                dataset_id: ds.into(),
                task_kind: if i < 4 { TaskKind::ImgCls } else { TaskKind::VidRet },
                group_id: (i >= 4).then(|| "g1".to_string()),
                query_text: format!("q \"{i}\" ünïcode"),
                target_text: if i % 2 == 0 { "yes".into() } else { "no".into() },
                gold_group: format!("g{}", i % 2),
            });
        }
        m
    }

    #[test]
    fn round_trip_is_identity() {
        let m = sample();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.jsonl");
        write_manifest(&m, &path).unwrap();
        assert_eq!(read_manifest(&path).unwrap(), m);
    }

    #[test]
    fn malformed_line_reports_its_number() {
        let text = to_jsonl(&sample()).unwrap();
        let mut lines: Vec<&str> = text.lines().collect();
        lines[6] = "{\"id\": \"broken\"";
        match from_jsonl(&lines.join("\n")) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 7),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn duplicate_id_is_named() {
        let text = to_jsonl(&sample()).unwrap();
        let mut lines: Vec<String> = text.lines().map(String::from).collect();
        lines.push(lines[2].clone());
        match from_jsonl(&lines.join("\n")) {
            Err(Error::DuplicateId(id)) => assert_eq!(id, "r1"),
            other => panic!("expected duplicate id, got {other:?}"),
        }
    }

    #[test]
    fn header_is_optional() {
        let text = to_jsonl(&sample()).unwrap();
        let body: Vec<&str> = text.lines().skip(1).collect();
        let m = from_jsonl(&body.join("\n")).unwrap();
        assert_eq!(m.datasets, sample().datasets);
        assert_eq!(m.metadata, ManifestMetadata::default());
    }
}
