//! Line-oriented dataset files.
//!
//! Line 1 is a JSON header object; each following line is one transition
//! written as a flat array `[s…, a…, s'…]` (plus the true reward when the
//! header sets `has_true_reward`). Reals use 17 significant digits so a
//! write/read cycle is value-exact.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Dataset, Quality, Transition};
use crate::envs::EnvId;
use crate::error::{Error, Result};

pub const DATASET_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    format_version: u32,
    env: EnvId,
    quality: Quality,
    state_dim: usize,
    action_dim: usize,
    count: usize,
    seed: u64,
    generator_return: f64,
    #[serde(default)]
    has_true_reward: bool,
}

pub(crate) fn format_row(values: impl IntoIterator<Item = f64>) -> String {
    let mut out = String::from("[");
    for (i, v) in values.into_iter().enumerate() {
        if i > 0 {
            out.push_str(", ");
        }
        out.push_str(&format!("{v:.16e}"));
    }
    out.push(']');
    out
}

pub(crate) fn parse_row(line: &str, line_no: usize) -> Result<Vec<f64>> {
    let inner = line
        .trim()
        .strip_prefix('[')
        .and_then(|l| l.strip_suffix(']'))
        .ok_or_else(|| Error::Parse {
            line: line_no,
            message: "expected a bracketed array of reals".into(),
        })?;
    if inner.trim().is_empty() {
        return Ok(Vec::new());
    }
    inner
        .split(',')
        .map(|tok| {
            tok.trim().parse::<f64>().map_err(|e| Error::Parse {
                line: line_no,
                message: format!("bad real `{}`: {e}", tok.trim()),
            })
        })
        .collect()
}

pub fn write_dataset(dataset: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let header = Header {
        format_version: DATASET_FORMAT_VERSION,
        env: dataset.env,
        quality: dataset.quality,
        state_dim: dataset.state_dim,
        action_dim: dataset.action_dim,
        count: dataset.len(),
        seed: dataset.seed,
        generator_return: dataset.generator_return,
        has_true_reward: dataset.has_true_reward(),
    };
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let io = |e| Error::io(path, e);
    writeln!(
        w,
        "{}",
        serde_json::to_string(&header).expect("header serializes")
    )
    .map_err(io)?;
    for t in dataset.transitions() {
        let row =
            t.s.iter()
                .chain(&t.a)
                .chain(&t.s_next)
                .copied()
                .chain(t.diagnostic_true_reward());
        writeln!(w, "{}", format_row(row)).map_err(io)?;
    }
    w.flush().map_err(io)
}

pub fn read_dataset(path: impl AsRef<Path>) -> Result<Dataset> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_dataset(&text)
}

pub(crate) fn parse_dataset(text: &str) -> Result<Dataset> {
    let mut lines = text
        .lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty());
    let (_, first) = lines.next().ok_or(Error::Parse {
        line: 1,
        message: "empty dataset file".into(),
    })?;
    let header: Header = serde_json::from_str(first).map_err(|e| Error::Parse {
        line: 1,
        message: format!("invalid header: {e}"),
    })?;
    if header.format_version != DATASET_FORMAT_VERSION {
        return Err(Error::Version {
            expected: DATASET_FORMAT_VERSION,
            found: header.format_version,
        });
    }
    let (ds, da) = (header.state_dim, header.action_dim);
    let width = 2 * ds + da + usize::from(header.has_true_reward);
    let mut transitions = Vec::with_capacity(header.count);
    for (idx, line) in lines {
        let line_no = idx + 1;
        let row = parse_row(line, line_no)?;
        if row.len() != width {
            return Err(Error::dim(
                format!("dataset line {line_no}"),
                width,
                row.len(),
            ));
        }
        let mut t = Transition::new(
            row[..ds].to_vec(),
            row[ds..ds + da].to_vec(),
            row[ds + da..2 * ds + da].to_vec(),
        );
        if header.has_true_reward {
            t = t.with_true_reward(row[width - 1]);
        }
        transitions.push(t);
    }
    if transitions.len() != header.count {
        return Err(Error::Parse {
            line: transitions.len() + 1,
            message: format!(
                "header declares {} transitions but file holds {}",
                header.count,
                transitions.len()
            ),
        });
    }
    Dataset::new(
        header.env,
        header.quality,
        ds,
        da,
        transitions,
        header.seed,
        header.generator_return,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    const FIXTURE: &str = r#"{"format_version":1,"env":"pendulum","quality":"random","state_dim":3,"action_dim":1,"count":2,"seed":7,"generator_return":-1234.5}
[1.0, 0.0, 0.5, -2.0, 0.99, 0.1, 0.25]
[0.0, -1.0, 3e-1, 1.5, 0.1, -0.995, 0.45]
"#;

    #[test]
    fn hand_written_fixture() {
        let d = parse_dataset(FIXTURE).unwrap();
        assert_eq!(d.env, EnvId::Pendulum);
        assert_eq!(d.quality, Quality::Random);
        assert_eq!(d.len(), 2);
        assert_eq!(d.seed, 7);
        assert_eq!(d.generator_return, -1234.5);
        let t = &d.transitions()[1];
        assert_eq!(t.s, vec![0.0, -1.0, 0.3]);
        assert_eq!(t.a, vec![1.5]);
        assert_eq!(t.s_next, vec![0.1, -0.995, 0.45]);
        assert_eq!(t.diagnostic_true_reward(), None);
    }

    #[test]
    fn count_mismatch_is_parse_error() {
        let bad = FIXTURE.replace("\"count\":2", "\"count\":3");
        assert!(matches!(parse_dataset(&bad), Err(Error::Parse { .. })));
        let truncated: String = FIXTURE.lines().take(2).collect::<Vec<_>>().join("\n");
        assert!(matches!(
            parse_dataset(&truncated),
            Err(Error::Parse { .. })
        ));
    }

    #[test]
    fn version_and_width_errors() {
        let bad = FIXTURE.replace("\"format_version\":1", "\"format_version\":2");
        assert!(matches!(
            parse_dataset(&bad),
            Err(Error::Version { found: 2, .. })
        ));
        let bad = FIXTURE.replace("0.25]", "0.25, 9.0]");
        assert!(matches!(parse_dataset(&bad), Err(Error::Dimension { .. })));
        assert!(matches!(
            parse_dataset("not json\n"),
            Err(Error::Parse { line: 1, .. })
        ));
    }

    #[test]
    fn file_round_trip() {
        let ts = vec![
            Transition::new(
                vec![0.1, 1.0 / 3.0],
                vec![-0.7],
                vec![std::f64::consts::PI, 2e-300],
            )
            .with_true_reward(-0.123),
            Transition::new(vec![1e300, -0.0], vec![0.5], vec![5e-324, 1.0]).with_true_reward(-7.0),
        ];
        let d = Dataset::new(EnvId::PointMass, Quality::Expert, 2, 1, ts, 3, -12.25).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.txt");
        write_dataset(&d, &path).unwrap();
        let back = read_dataset(&path).unwrap();
        assert_eq!(back, d);
        assert_eq!(back.content_hash(), d.content_hash());
    }

    proptest! {
        #[test]
        fn rows_round_trip_exactly(values in prop::collection::vec(any::<f64>().prop_filter("finite", |x| x.is_finite()), 1..20)) {
            let line = format_row(values.iter().copied());
            let back = parse_row(&line, 1).unwrap();
            prop_assert_eq!(back.iter().map(|x| x.to_bits()).collect::<Vec<_>>(), values.iter().map(|x| x.to_bits()).collect::<Vec<_>>());
        }
    }
}
