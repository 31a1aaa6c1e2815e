//! Clustered observations and CSV ingestion.
//!
//! The CSV header is `cluster,y,x1..xp,z1..zq[,trials]`. The `x` columns are
//! the fixed-effect design exactly as given (include a column of ones for an
//! intercept); the `z` columns are the random-effect design.

use std::collections::HashMap;
use std::io::Read;
use std::ops::Range;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    pub y: f64,
    pub x: Vec<f64>,
    pub z: Vec<f64>,
    /// Per-observation binomial index; falls back to the family default.
    pub trials: Option<u32>,
    /// Source line in the input file, for diagnostics.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub row: Option<usize>,
}

impl Observation {
    pub fn new(y: f64, x: Vec<f64>, z: Vec<f64>) -> Self {
        Observation {
            y,
            x,
            z,
            trials: None,
            row: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Cluster {
    pub id: String,
    pub observations: Vec<Observation>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    clusters: Vec<Cluster>,
    p: usize,
    q: usize,
    n_obs: usize,
}

impl Dataset {
    pub fn new(clusters: Vec<Cluster>) -> Result<Self> {
        let first = clusters
            .iter()
            .flat_map(|c| c.observations.first())
            .next()
            .ok_or_else(|| Error::data("dataset has no observations"))?;
        let (p, q) = (first.x.len(), first.z.len());
        if p == 0 {
            return Err(Error::data("at least one fixed-effect covariate is required"));
        }
        if q == 0 {
            return Err(Error::data("at least one random-effect covariate is required"));
        }
        let mut seen = HashMap::new();
        let mut row = 0;
        for c in &clusters {
            if c.observations.is_empty() {
                return Err(Error::data(format!("cluster '{}' is empty", c.id)));
            }
            if seen.insert(c.id.clone(), ()).is_some() {
                return Err(Error::data(format!("duplicate cluster id '{}'", c.id)));
            }
            for o in &c.observations {
                if o.x.len() != p || o.z.len() != q {
                    return Err(Error::data_at(
                        row,
                        None,
                        format!(
                            "observation has {} x / {} z values, expected {p} / {q}",
                            o.x.len(),
                            o.z.len()
                        ),
                    ));
                }
                let finite = o.y.is_finite()
                    && o.x.iter().all(|v| v.is_finite())
                    && o.z.iter().all(|v| v.is_finite());
                if !finite {
                    return Err(Error::data_at(row, None, "non-finite value"));
                }
                row += 1;
            }
        }
        if row < p {
            return Err(Error::data(format!(
                "{row} observations cannot identify {p} fixed effects"
            )));
        }
        Ok(Dataset {
            clusters,
            p,
            q,
            n_obs: row,
        })
    }

    pub fn clusters(&self) -> &[Cluster] {
        &self.clusters
    }

    pub fn n_clusters(&self) -> usize {
        self.clusters.len()
    }

    /// Total number of observations `N`.
    pub fn n_obs(&self) -> usize {
        self.n_obs
    }

    /// Number of fixed-effect covariates.
    pub fn p(&self) -> usize {
        self.p
    }

    /// Number of random-effect covariates.
    pub fn q(&self) -> usize {
        self.q
    }

    /// Observations in cluster-major order.
    pub fn observations(&self) -> impl Iterator<Item = &Observation> {
        self.clusters.iter().flat_map(|c| c.observations.iter())
    }

    /// Flat index range of each cluster.
    pub fn cluster_ranges(&self) -> Vec<Range<usize>> {
        let mut start = 0;
        self.clusters
            .iter()
            .map(|c| {
                let r = start..start + c.observations.len();
                start = r.end;
                r
            })
            .collect()
    }

    /// Multiply every random-effect covariate by `c`.
    pub fn scale_z(&self, c: f64) -> Dataset {
        let mut out = self.clone();
        for cl in &mut out.clusters {
            for o in &mut cl.observations {
                o.z.iter_mut().for_each(|v| *v *= c);
            }
        }
        out
    }
}

#[derive(Debug)]
struct Header {
    p: usize,
    q: usize,
    has_trials: bool,
}

fn parse_header(fields: &[String]) -> Result<Header> {
    let bad = |msg: String| Error::data_at(1, None, msg);
    if fields.len() < 4 {
        return Err(bad(format!(
            "header needs at least cluster,y,x1,z1; got {} columns",
            fields.len()
        )));
    }
    if fields[0] != "cluster" {
        return Err(Error::data_at(1, Some(&fields[0]), "first column must be 'cluster'"));
    }
    if fields[1] != "y" {
        return Err(Error::data_at(1, Some(&fields[1]), "second column must be 'y'"));
    }
    let mut rest = &fields[2..];
    let has_trials = rest.last().map(|s| s == "trials").unwrap_or(false);
    if has_trials {
        rest = &rest[..rest.len() - 1];
    }
    let count_prefix = |cols: &[String], prefix: char| -> Result<usize> {
        let mut k = 0;
        for c in cols {
            if c.starts_with(prefix) && c[1..].parse::<usize>().is_ok() {
                if c[1..] != (k + 1).to_string() {
                    return Err(Error::data_at(
                        1,
                        Some(c),
                        format!("expected column '{prefix}{}'", k + 1),
                    ));
                }
                k += 1;
            } else {
                break;
            }
        }
        Ok(k)
    };
    let p = count_prefix(rest, 'x')?;
    let q = count_prefix(&rest[p..], 'z')?;
    if p == 0 {
        return Err(bad("missing fixed-effect columns x1..xp".into()));
    }
    if q == 0 {
        return Err(bad("missing random-effect columns z1..zq".into()));
    }
    if p + q != rest.len() {
        let col = &rest[p + q];
        return Err(Error::data_at(1, Some(col), "unexpected column"));
    }
    Ok(Header { p, q, has_trials })
}

/// Parse a dataset from CSV text. Rows are grouped by cluster id in order of
/// first appearance; row numbers in diagnostics count the header as row 1.
pub fn parse_dataset<R: Read>(reader: R) -> Result<Dataset> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(false)
        .trim(csv::Trim::All)
        .from_reader(reader);
    let mut records = rdr.records();
    let header: Vec<String> = match records.next() {
        None => return Err(Error::data("empty file")),
        Some(r) => r
            .map_err(|e| Error::data_at(1, None, e.to_string()))?
            .iter()
            .map(str::to_owned)
            .collect(),
    };
    let h = parse_header(&header)?;
    let width = header.len();

    let mut order: Vec<String> = Vec::new();
    let mut groups: HashMap<String, Vec<Observation>> = HashMap::new();
    for (i, rec) in records.enumerate() {
        let row = i + 2;
        let rec = rec.map_err(|e| Error::data_at(row, None, e.to_string()))?;
        if rec.len() != width {
            return Err(Error::data_at(
                row,
                None,
                format!("expected {width} fields, found {}", rec.len()),
            ));
        }
        if rec.iter().zip(&header).all(|(a, b)| a == b) {
            return Err(Error::data_at(row, None, "duplicate header"));
        }
        let num = |j: usize| -> Result<f64> {
            let cell = &rec[j];
            let v: f64 = cell.parse().map_err(|_| {
                Error::data_at(row, Some(&header[j]), format!("non-numeric value '{cell}'"))
            })?;
            if !v.is_finite() {
                return Err(Error::data_at(row, Some(&header[j]), "non-finite value"));
            }
            Ok(v)
        };
        let id = rec[0].to_owned();
        if id.is_empty() {
            return Err(Error::data_at(row, Some("cluster"), "empty cluster id"));
        }
        let y = num(1)?;
        let x = (0..h.p).map(|k| num(2 + k)).collect::<Result<Vec<_>>>()?;
        let z = (0..h.q).map(|k| num(2 + h.p + k)).collect::<Result<Vec<_>>>()?;
        let trials = if h.has_trials {
            let cell = &rec[width - 1];
            if cell.is_empty() {
                None
            } else {
                let t: u32 = cell.parse().ok().filter(|&t| t >= 1).ok_or_else(|| {
                    Error::data_at(
                        row,
                        Some("trials"),
                        format!("trials must be a positive integer, got '{cell}'"),
                    )
                })?;
                Some(t)
            }
        } else {
            None
        };
        if !groups.contains_key(&id) {
            order.push(id.clone());
        }
        groups.entry(id).or_default().push(Observation {
            y,
            x,
            z,
            trials,
            row: Some(row),
        });
    }
    if order.is_empty() {
        return Err(Error::data("file has a header but no data rows"));
    }
    let clusters = order
        .into_iter()
        .map(|id| {
            let observations = groups.remove(&id).unwrap_or_default();
            Cluster { id, observations }
        })
        .collect();
    Dataset::new(clusters)
}

pub fn load_dataset(path: impl AsRef<Path>) -> Result<Dataset> {
    let path = path.as_ref();
    let file = std::fs::File::open(path)
        .map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
    parse_dataset(std::io::BufReader::new(file))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(s: &str) -> Result<Dataset> {
        parse_dataset(s.as_bytes())
    }

    #[test]
    fn loads_two_clusters() {
        let d = parse(
            "cluster,y,x1,x2,z1,z2\n\
             a,1,1,0.5,1,0.1\n\
             a,0,1,-0.5,1,0.2\n\
             b,1,1,1.5,1,-0.3\n\
             b,0,1,2.5,1,0.0\n",
        )
        .unwrap();
        assert_eq!(d.n_clusters(), 2);
        assert_eq!(d.n_obs(), 4);
        assert_eq!((d.p(), d.q()), (2, 2));
        assert_eq!(d.clusters()[1].observations[0].x, vec![1.0, 1.5]);
    }

    #[test]
    fn groups_interleaved_rows_by_first_appearance() {
        let d = parse("cluster,y,x1,z1\nb,1,1,1\na,2,1,1\nb,3,1,1\n").unwrap();
        assert_eq!(d.clusters()[0].id, "b");
        let ys: Vec<f64> = d.observations().map(|o| o.y).collect();
        assert_eq!(ys, vec![1.0, 3.0, 2.0]);
        assert_eq!(d.cluster_ranges(), vec![0..2, 2..3]);
    }

    #[test]
    fn trials_column_per_row() {
        let d = parse("cluster,y,x1,z1,trials\na,2,1,1,5\na,0,1,1,\n").unwrap();
        let t: Vec<_> = d.observations().map(|o| o.trials).collect();
        assert_eq!(t, vec![Some(5), None]);
        let err = parse("cluster,y,x1,z1,trials\na,2,1,1,0\n").unwrap_err();
        assert!(matches!(err, Error::Data { row: Some(2), .. }));
    }

    #[test]
    fn diagnostics_are_located() {
        let err = parse("cluster,y,x1,z1\na,1,1,1\na,oops,1,1\n").unwrap_err();
        match err {
            Error::Data { row, column, .. } => {
                assert_eq!(row, Some(3));
                assert_eq!(column.as_deref(), Some("y"));
            }
            e => panic!("unexpected {e:?}"),
        }
        assert!(matches!(parse(""), Err(Error::Data { .. })));
        assert!(matches!(parse("cluster,y,x1,z1\n"), Err(Error::Data { .. })));
        let dup = parse("cluster,y,x1,z1\na,1,1,1\ncluster,y,x1,z1\n").unwrap_err();
        assert!(dup.to_string().contains("duplicate header"), "{dup}");
        assert!(parse("cluster,y,x1\na,1,1\n").is_err());
        assert!(parse("cluster,y,x1,x3,z1\na,1,1,1,1\n").is_err());
        assert!(parse("cluster,y,x1,z1,w\na,1,1,1,1\n").is_err());
        assert!(parse("cluster,y,x1,z1\na,1,1\n").is_err());
    }

    #[test]
    fn dot_decimal_only() {
        assert!(parse("cluster,y,x1,z1\na,\"1,5\",1,1\n").is_err());
        let d = parse("cluster,y,x1,z1\na,1.5e0,1,1\n").unwrap();
        assert_eq!(d.clusters()[0].observations[0].y, 1.5);
    }

    #[test]
    fn rejects_ragged_and_empty_clusters() {
        let c = vec![Cluster {
            id: "a".into(),
            observations: vec![],
        }];
        assert!(Dataset::new(c).is_err());
    }
}
