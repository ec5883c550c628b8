//! Synthetic biased data and class partitions.
//!
//! A latent `y_c ~ U([0,1]²)` fixes the label `y = 1{y_c2 > 1 − y_c1}`. The
//! sensitive attribute copies the label with probability `p` and flips it
//! otherwise. Features are `[y_c tiled d_core/2 times + noise, a tiled d_sp
//! times + noise]`, so the spurious block leaks `a` and, through `a`, `y`.

use std::fs::File;
use std::path::{Path, PathBuf};

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::rng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BiasedConfig {
    pub n: usize,
    /// Probability that `a = y`.
    pub p: f64,
    pub d_core: usize,
    pub d_sp: usize,
    pub var_core: f64,
    pub var_sp: f64,
    pub seed: u64,
}

impl Default for BiasedConfig {
    fn default() -> Self {
        Self {
            n: 30_000,
            p: 0.7,
            d_core: 8,
            d_sp: 8,
            var_core: 0.2,
            var_sp: 0.4,
            seed: 0,
        }
    }
}

impl BiasedConfig {
    pub fn validate(&self) -> Result<()> {
        let mut bad = Vec::new();
        if self.n == 0 {
            bad.push("n must be >= 1".to_string());
        }
        if !(0.0..=1.0).contains(&self.p) {
            bad.push(format!("p must lie in [0, 1], got {}", self.p));
        }
        if self.d_core == 0 || self.d_core % 2 != 0 {
            bad.push(format!("d_core must be even and >= 2, got {}", self.d_core));
        }
        for (name, v) in [("var_core", self.var_core), ("var_sp", self.var_sp)] {
            if !(v >= 0.0 && v.is_finite()) {
                bad.push(format!("{name} must be finite and >= 0, got {v}"));
            }
        }
        if bad.is_empty() {
            Ok(())
        } else {
            Err(Error::Validation(bad))
        }
    }

    pub fn dim(&self) -> usize {
        self.d_core + self.d_sp
    }

    /// Same law with `n` records and an independent seed, for held-out evaluation.
    pub fn test_split(&self, n: usize) -> Self {
        Self {
            n,
            seed: !self.seed,
            ..self.clone()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Record {
    pub x: Vec<f64>,
    pub a: u8,
    pub y: u8,
    pub yc: [f64; 2],
}

pub fn label_of(yc: [f64; 2]) -> u8 {
    u8::from(yc[1] > 1.0 - yc[0])
}

#[derive(Debug, Clone, PartialEq)]
pub struct BiasedDataset {
    pub config: BiasedConfig,
    pub records: Vec<Record>,
}

impl BiasedDataset {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.config.dim()
    }

    pub fn features(&self) -> Vec<Vec<f64>> {
        self.records.iter().map(|r| r.x.clone()).collect()
    }

    /// Checks the generator's structural invariants.
    pub fn validate(&self) -> Result<()> {
        self.config.validate()?;
        if self.records.len() != self.config.n {
            return Err(invalid(format!(
                "dataset has {} records but its config says n = {}",
                self.records.len(),
                self.config.n
            )));
        }
        let d = self.dim();
        for (i, r) in self.records.iter().enumerate() {
            if r.x.len() != d {
                return Err(invalid(format!("record {i} has {} features, expected {d}", r.x.len())));
            }
            if r.a > 1 || r.y > 1 {
                return Err(invalid(format!("record {i} has a non-binary a or y")));
            }
            if r.x.iter().chain(&r.yc).any(|v| !v.is_finite()) {
                return Err(invalid(format!("record {i} has a non-finite value")));
            }
            if r.y != label_of(r.yc) {
                return Err(invalid(format!("record {i}: y disagrees with y_c")));
            }
        }
        Ok(())
    }
}

pub fn generate_biased(config: &BiasedConfig) -> Result<BiasedDataset> {
    config.validate()?;
    let mut rng = rng::stream(config.seed, rng::streams::DATA);
    let (sd_core, sd_sp) = (config.var_core.sqrt(), config.var_sp.sqrt());
    let mut records = Vec::with_capacity(config.n);
    for _ in 0..config.n {
        let yc = [rng.random::<f64>(), rng.random::<f64>()];
        let y = label_of(yc);
        let b = rng.random_bool(config.p);
        let a = if b { y } else { 1 - y };
        let mut x = Vec::with_capacity(config.dim());
        for k in 0..config.d_core {
            let e: f64 = StandardNormal.sample(&mut rng);
            x.push(yc[k % 2] + sd_core * e);
        }
        for _ in 0..config.d_sp {
            let e: f64 = StandardNormal.sample(&mut rng);
            x.push(f64::from(a) + sd_sp * e);
        }
        records.push(Record { x, a, y, yc });
    }
    Ok(BiasedDataset {
        config: config.clone(),
        records,
    })
}

/// `y_c − 1/2`, the regression target in `[−1/2, 1/2]²`.
pub fn centered_target(yc: [f64; 2]) -> [f64; 2] {
    [yc[0] - 0.5, yc[1] - 0.5]
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PartitionMode {
    ByA,
    ByAAndY,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassKey {
    pub a: u8,
    /// `None` when partitioning by `a` only.
    pub y: Option<u8>,
}

/// Index lists per class, in dataset order. Classes appear in the order
/// `a = 0, 1` (by `a`) or `(0,0), (0,1), (1,0), (1,1)` (by `(a, y)`) and may be empty.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassPartition {
    pub mode: PartitionMode,
    pub keys: Vec<ClassKey>,
    pub indices: Vec<Vec<usize>>,
}

impl ClassPartition {
    pub fn sizes(&self) -> Vec<usize> {
        self.indices.iter().map(Vec::len).collect()
    }

    pub fn empty_classes(&self) -> Vec<ClassKey> {
        self.keys
            .iter()
            .zip(&self.indices)
            .filter(|(_, v)| v.is_empty())
            .map(|(k, _)| *k)
            .collect()
    }

    pub fn class(&self, a: u8, y: Option<u8>) -> Option<&[usize]> {
        self.keys
            .iter()
            .position(|k| k.a == a && k.y == y)
            .map(|i| self.indices[i].as_slice())
    }
}

pub fn partition(ds: &BiasedDataset, mode: PartitionMode) -> ClassPartition {
    let keys: Vec<ClassKey> = match mode {
        PartitionMode::ByA => (0..2).map(|a| ClassKey { a, y: None }).collect(),
        PartitionMode::ByAAndY => (0..2)
            .flat_map(|a| (0..2).map(move |y| ClassKey { a, y: Some(y) }))
            .collect(),
    };
    let mut indices = vec![Vec::new(); keys.len()];
    for (i, r) in ds.records.iter().enumerate() {
        let slot = match mode {
            PartitionMode::ByA => r.a as usize,
            PartitionMode::ByAAndY => 2 * r.a as usize + r.y as usize,
        };
        indices[slot].push(i);
    }
    ClassPartition { mode, keys, indices }
}

/// Lossless scientific notation with 17 significant digits.
pub fn fmt_f64(v: f64) -> String {
    format!("{v:.16e}")
}

/// Public metadata stored next to the CSV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub config: BiasedConfig,
    pub n: usize,
    pub dim: usize,
    /// Sizes of `a = 0, 1`.
    pub sizes_by_a: Vec<usize>,
    /// Sizes of `(a, y) = (0,0), (0,1), (1,0), (1,1)`.
    pub sizes_by_a_and_y: Vec<usize>,
}

impl DatasetMeta {
    pub fn of(ds: &BiasedDataset) -> Self {
        Self {
            config: ds.config.clone(),
            n: ds.len(),
            dim: ds.dim(),
            sizes_by_a: partition(ds, PartitionMode::ByA).sizes(),
            sizes_by_a_and_y: partition(ds, PartitionMode::ByAAndY).sizes(),
        }
    }
}

pub fn sidecar_path(csv_path: &Path) -> PathBuf {
    csv_path.with_extension("json")
}

fn header(dim: usize) -> Vec<String> {
    let mut h: Vec<String> = (1..=dim).map(|k| format!("x_{k}")).collect();
    h.extend(["a", "y", "yc_1", "yc_2"].map(String::from));
    h
}

/// Writes the CSV and its JSON sidecar.
pub fn save_dataset(ds: &BiasedDataset, csv_path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(csv_path)?;
    w.write_record(header(ds.dim()))?;
    for r in &ds.records {
        let mut row: Vec<String> = r.x.iter().map(|v| fmt_f64(*v)).collect();
        row.push(r.a.to_string());
        row.push(r.y.to_string());
        row.push(fmt_f64(r.yc[0]));
        row.push(fmt_f64(r.yc[1]));
        w.write_record(&row)?;
    }
    w.flush()?;
    let meta = serde_json::to_string_pretty(&DatasetMeta::of(ds))?;
    std::fs::write(sidecar_path(csv_path), meta + "\n")?;
    Ok(())
}

/// Reads a CSV written by [`save_dataset`] and checks it against its sidecar.
pub fn load_dataset(csv_path: &Path) -> Result<BiasedDataset> {
    let meta: DatasetMeta = serde_json::from_reader(File::open(sidecar_path(csv_path))?)?;
    let mut rdr = csv::Reader::from_path(csv_path)?;
    let dim = meta.config.dim();
    let expected = header(dim);
    let got: Vec<String> = rdr.headers()?.iter().map(String::from).collect();
    if got != expected {
        return Err(invalid(format!("unexpected CSV header {got:?}")));
    }
    let parse = |s: &str, line: usize| -> Result<f64> {
        s.trim()
            .parse::<f64>()
            .map_err(|_| invalid(format!("line {line}: cannot parse '{s}' as a number")))
    };
    let mut records = Vec::new();
    for (i, row) in rdr.records().enumerate() {
        let row = row?;
        let line = i + 2;
        let x = (0..dim).map(|k| parse(&row[k], line)).collect::<Result<Vec<_>>>()?;
        let bit = |s: &str| -> Result<u8> {
            match s.trim() {
                "0" => Ok(0),
                "1" => Ok(1),
                other => Err(invalid(format!("line {line}: expected 0 or 1, got '{other}'"))),
            }
        };
        records.push(Record {
            x,
            a: bit(&row[dim])?,
            y: bit(&row[dim + 1])?,
            yc: [parse(&row[dim + 2], line)?, parse(&row[dim + 3], line)?],
        });
    }
    let ds = BiasedDataset {
        config: meta.config.clone(),
        records,
    };
    ds.validate()?;
    let actual = DatasetMeta::of(&ds);
    if actual != meta {
        return Err(invalid("class sizes in the sidecar do not match the CSV"));
    }
    Ok(ds)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(n: usize, p: f64, seed: u64) -> BiasedConfig {
        BiasedConfig {
            n,
            p,
            seed,
            ..BiasedConfig::default()
        }
    }

    #[test]
    fn p_one_copies_the_label() {
        let ds = generate_biased(&small(500, 1.0, 3)).unwrap();
        assert!(ds.records.iter().all(|r| r.a == r.y));
        let part = partition(&ds, PartitionMode::ByAAndY);
        let empty = part.empty_classes();
        assert_eq!(empty.len(), 2);
        assert!(empty.contains(&ClassKey { a: 0, y: Some(1) }));
        assert!(empty.contains(&ClassKey { a: 1, y: Some(0) }));
    }

    #[test]
    fn noiseless_features_tile_the_latent() {
        let cfg = BiasedConfig {
            var_core: 0.0,
            var_sp: 0.0,
            d_core: 4,
            d_sp: 3,
            ..small(50, 0.6, 9)
        };
        let ds = generate_biased(&cfg).unwrap();
        for r in &ds.records {
            assert_eq!(&r.x[..4], &[r.yc[0], r.yc[1], r.yc[0], r.yc[1]]);
            assert!(r.x[4..].iter().all(|v| *v == f64::from(r.a)));
        }
    }

    #[test]
    fn rejects_odd_core_dimension() {
        let cfg = BiasedConfig { d_core: 3, ..small(5, 0.5, 0) };
        assert!(generate_biased(&cfg).is_err());
        let cfg = BiasedConfig { p: 1.5, var_sp: -1.0, ..small(5, 0.5, 0) };
        match cfg.validate() {
            Err(Error::Validation(fields)) => assert_eq!(fields.len(), 2),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn deterministic_and_label_consistent() {
        let a = generate_biased(&small(300, 0.7, 5)).unwrap();
        assert_eq!(a, generate_biased(&small(300, 0.7, 5)).unwrap());
        assert_ne!(a, generate_biased(&small(300, 0.7, 6)).unwrap());
        a.validate().unwrap();
    }

    #[test]
    fn partitions_refine_and_cover() {
        let ds = generate_biased(&small(400, 0.7, 2)).unwrap();
        let by_a = partition(&ds, PartitionMode::ByA);
        let by_ay = partition(&ds, PartitionMode::ByAAndY);
        let s = by_a.sizes();
        let t = by_ay.sizes();
        assert_eq!(s.iter().sum::<usize>(), 400);
        assert_eq!(s[0], t[0] + t[1]);
        assert_eq!(s[1], t[2] + t[3]);
        let mut all: Vec<usize> = by_ay.indices.concat();
        all.sort_unstable();
        assert_eq!(all, (0..400).collect::<Vec<_>>());
        for (key, idx) in by_ay.keys.iter().zip(&by_ay.indices) {
            assert!(idx.iter().all(|&i| ds.records[i].a == key.a && Some(ds.records[i].y) == key.y));
        }
        let one = generate_biased(&small(1, 0.7, 2)).unwrap();
        assert_eq!(partition(&one, PartitionMode::ByA).empty_classes().len(), 1);
    }

    #[test]
    fn csv_round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.csv");
        let ds = generate_biased(&small(40, 0.7, 8)).unwrap();
        save_dataset(&ds, &path).unwrap();
        assert_eq!(load_dataset(&path).unwrap(), ds);
    }

    #[test]
    fn loader_catches_tampering() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.csv");
        let ds = generate_biased(&small(10, 0.7, 8)).unwrap();
        save_dataset(&ds, &path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let mut lines: Vec<String> = text.lines().map(String::from).collect();
        let mut fields: Vec<String> = lines[1].split(',').map(String::from).collect();
        let d = ds.dim();
        fields[d + 1] = (1 - ds.records[0].y).to_string();
        lines[1] = fields.join(",");
        std::fs::write(&path, lines.join("\n") + "\n").unwrap();
        assert!(load_dataset(&path).is_err());
    }

    #[test]
    fn fmt_is_lossless() {
        for v in [0.1, 1.0 / 3.0, -2.5e-300, 123456.789] {
            assert_eq!(fmt_f64(v).parse::<f64>().unwrap(), v);
        }
    }
}
