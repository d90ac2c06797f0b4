//! Newline-delimited JSON logs and the world file.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;

use super::{CandidatePoolRecord, InteractionRecord, World};
use crate::error::{Error, Result};

/// One JSON object per line, `\n`-terminated.
pub fn write_jsonl<T: Serialize>(path: &Path, records: &[T]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for r in records {
        serde_json::to_writer(&mut w, r).map_err(std::io::Error::from)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

fn read_jsonl<T, F>(path: &Path, validate: F) -> Result<Vec<T>>
where
    T: DeserializeOwned,
    F: Fn(&T) -> Result<()>,
{
    let reader = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let parse_err = |message: String| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            message,
        };
        let rec: T = serde_json::from_str(&line).map_err(|e| parse_err(e.to_string()))?;
        validate(&rec).map_err(|e| parse_err(e.to_string()))?;
        out.push(rec);
    }
    Ok(out)
}

pub fn read_interactions(path: &Path) -> Result<Vec<InteractionRecord>> {
    read_jsonl(path, InteractionRecord::validate)
}

pub fn read_pools(path: &Path) -> Result<Vec<CandidatePoolRecord>> {
    read_jsonl(path, CandidatePoolRecord::validate)
}

pub fn write_world(path: &Path, world: &World) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    serde_json::to_writer(&mut w, world).map_err(std::io::Error::from)?;
    w.flush()?;
    Ok(())
}

pub fn read_world(path: &Path) -> Result<World> {
    let reader = BufReader::new(File::open(path)?);
    serde_json::from_reader(reader).map_err(|e| Error::Parse {
        path: path.to_path_buf(),
        line: e.line(),
        message: e.to_string(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::{ClickModel, WorldConfig};
    use crate::sim::{build_dataset, generate_world};

    #[test]
    fn round_trip_records() {
        let dir = tempfile::tempdir().unwrap();
        let world = generate_world(&WorldConfig { users: 10, items: 50, ..Default::default() }, 1).unwrap();
        let d = build_dataset(&world, &ClickModel::default(), 20, 4, 8, 2).unwrap();

        let ip = dir.path().join("inter.jsonl");
        write_jsonl(&ip, &d.interactions).unwrap();
        assert_eq!(read_interactions(&ip).unwrap(), d.interactions);

        let pp = dir.path().join("pools.jsonl");
        write_jsonl(&pp, &d.pools).unwrap();
        assert_eq!(read_pools(&pp).unwrap(), d.pools);

        let wp = dir.path().join("world.json");
        write_world(&wp, &world).unwrap();
        assert_eq!(read_world(&wp).unwrap(), world);
    }

    #[test]
    fn empty_file_is_empty() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("empty.jsonl");
        std::fs::write(&p, "").unwrap();
        assert!(read_interactions(&p).unwrap().is_empty());
    }

    #[test]
    fn malformed_lines_report_line_number() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("bad.jsonl");
        std::fs::write(
            &p,
            "{\"user_id\":0,\"items\":[1,2],\"y_point\":[0,1],\"y_list\":1.0}\n\
             {\"user_id\":0,\"items\":[1,2,3],\"y_point\":[0,1],\"y_list\":1.0}\n",
        )
        .unwrap();
        match read_interactions(&p) {
            Err(Error::Parse { line, message, .. }) => {
                assert_eq!(line, 2);
                assert!(message.contains("y_point"), "{message}");
            }
            other => panic!("expected parse error, got {other:?}"),
        }
        std::fs::write(&p, "not json\n").unwrap();
        assert!(matches!(read_interactions(&p), Err(Error::Parse { line: 1, .. })));
    }
}
