//! CSV side files: match records (`frame,node,belief,accepted`) and ground
//! truth (`frame,place`). Frames must be listed in order from 0.

use std::io::Write;
use std::path::Path;

use anyhow::{Context, Result};
use placemap::{NodeId, PlaceMatch};

use crate::usage;

pub fn write_matches<W: Write>(out: W, matches: &[PlaceMatch]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["frame", "node", "belief", "accepted"])?;
    for (t, m) in matches.iter().enumerate() {
        w.write_record([
            t.to_string(),
            m.node.0.to_string(),
            m.belief.to_string(),
            m.accepted.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

fn check_order(path: &Path, t: usize, frame: usize) -> Result<()> {
    if frame != t {
        return Err(usage(format!(
            "{}: row {t} is frame {frame}; frames must run 0, 1, 2, ...",
            path.display()
        )));
    }
    Ok(())
}

pub fn read_matches(path: &Path) -> Result<Vec<PlaceMatch>> {
    let mut r = csv::Reader::from_path(path).with_context(|| format!("reading {}", path.display()))?;
    let mut out = Vec::new();
    for (t, row) in r.deserialize::<(usize, u32, f64, bool)>().enumerate() {
        let (frame, node, belief, accepted) = row.with_context(|| format!("parsing {}", path.display()))?;
        check_order(path, t, frame)?;
        out.push(PlaceMatch {
            node: NodeId(node),
            belief,
            accepted,
        });
    }
    Ok(out)
}

pub fn write_truth<W: Write>(out: W, places: &[usize]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["frame", "place"])?;
    for (t, p) in places.iter().enumerate() {
        w.write_record([t.to_string(), p.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_truth(path: &Path) -> Result<Vec<usize>> {
    let mut r = csv::Reader::from_path(path).with_context(|| format!("reading {}", path.display()))?;
    let mut out = Vec::new();
    for (t, row) in r.deserialize::<(usize, usize)>().enumerate() {
        let (frame, place) = row.with_context(|| format!("parsing {}", path.display()))?;
        check_order(path, t, frame)?;
        out.push(place);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matches_round_trip() {
        let matches = vec![
            PlaceMatch {
                node: NodeId(4),
                belief: 0.123456789,
                accepted: false,
            },
            PlaceMatch {
                node: NodeId(5),
                belief: 1.0 / 3.0,
                accepted: true,
            },
        ];
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.csv");
        write_matches(std::fs::File::create(&path).unwrap(), &matches).unwrap();
        assert!(std::fs::read_to_string(&path)
            .unwrap()
            .starts_with("frame,node,belief,accepted\n0,4,"));
        assert_eq!(read_matches(&path).unwrap(), matches);
    }

    #[test]
    fn truth_must_be_in_frame_order() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.csv");
        std::fs::write(&path, "frame,place\n0,3\n2,4\n").unwrap();
        let err = read_truth(&path).unwrap_err();
        assert!(err.is::<crate::UsageError>());
        std::fs::write(&path, "frame,place\n0,3\n1,4\n").unwrap();
        assert_eq!(read_truth(&path).unwrap(), vec![3, 4]);
    }
}
