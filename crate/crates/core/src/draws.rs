//! On-disk storage of posterior draws.
//!
//! A draw directory holds `meta.json` and one file per chain, either CSV
//! (`chain-<c>.csv`, header row of column names) or binary (`chain-<c>.bin`,
//! each row a little-endian `u64` value count followed by that many
//! little-endian `f64`). Mixture columns are `nu.h`, `theta.h.j.k.idx`,
//! `w.h.j.k`, `delta.h.j.k`, `gamma0.h` and optionally `z.i`; latent class
//! columns are `nu.h` and `psi.h.j.a`. All indices are 1-based.
//!
//! Nothing time-dependent is written here, so replays are byte-identical.

use std::fmt;
use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::analytics::{bivariate_estimate, BivariateSource};
use crate::error::{MillsError, Result};
use crate::gibbs::{Draw, Hyperparams, PosteriorDraws, SamplerConfig};
use crate::lca::{LatentClassModel, LcaDraws};
use crate::loglinear::PairLayout;
use crate::table::PairIndex;

pub const META_FILE: &str = "meta.json";

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum DrawFormat {
    #[default]
    Csv,
    Binary,
}

impl DrawFormat {
    fn extension(self) -> &'static str {
        match self {
            DrawFormat::Csv => "csv",
            DrawFormat::Binary => "bin",
        }
    }
}

impl FromStr for DrawFormat {
    type Err = MillsError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "csv" => Ok(DrawFormat::Csv),
            "binary" | "bin" => Ok(DrawFormat::Binary),
            other => Err(MillsError::InvalidInput(format!(
                "unknown draw format {other:?}"
            ))),
        }
    }
}

impl fmt::Display for DrawFormat {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            DrawFormat::Csv => "csv",
            DrawFormat::Binary => "binary",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    Mills,
    Lca,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChainRecord {
    pub chain: u64,
    pub file: String,
    pub kept: usize,
    /// Sampler counters; non-finite values are stored as null.
    #[serde(default)]
    pub diagnostics: serde_json::Value,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DrawMeta {
    pub model: ModelKind,
    pub version: String,
    pub format: DrawFormat,
    pub seed: u64,
    pub n: usize,
    pub levels: Vec<usize>,
    pub names: Vec<String>,
    /// 1-based variable pairs.
    pub pairs: Vec<[usize; 2]>,
    pub components: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub hyper: Option<Hyperparams>,
    pub config: SamplerConfig,
    pub chains: Vec<ChainRecord>,
    pub columns: Vec<String>,
}

impl DrawMeta {
    pub fn pair_indices(&self) -> Result<Vec<PairIndex>> {
        self.pairs
            .iter()
            .map(|&[j, k]| {
                if j == 0 || k == 0 {
                    return Err(MillsError::InvalidInput("pairs are 1-based".into()));
                }
                PairIndex::new(j - 1, k - 1)
            })
            .collect()
    }
}

pub fn mills_columns(
    levels: &[usize],
    pairs: &[PairIndex],
    components: usize,
    allocations: Option<usize>,
) -> Vec<String> {
    let d = |pr: &PairIndex| levels[pr.j] * levels[pr.k];
    let tag = |pr: &PairIndex| format!("{}.{}", pr.j + 1, pr.k + 1);
    let mut cols: Vec<String> = (1..=components).map(|h| format!("nu.{h}")).collect();
    for h in 1..=components {
        for pr in pairs {
            cols.extend((1..=d(pr)).map(|idx| format!("theta.{h}.{}.{idx}", tag(pr))));
        }
    }
    for name in ["w", "delta"] {
        for h in 1..=components {
            cols.extend(pairs.iter().map(|pr| format!("{name}.{h}.{}", tag(pr))));
        }
    }
    cols.extend((1..=components).map(|h| format!("gamma0.{h}")));
    if let Some(n) = allocations {
        cols.extend((1..=n).map(|i| format!("z.{i}")));
    }
    cols
}

pub fn lca_columns(levels: &[usize], classes: usize) -> Vec<String> {
    let mut cols: Vec<String> = (1..=classes).map(|h| format!("nu.{h}")).collect();
    for h in 1..=classes {
        for (j, &d) in levels.iter().enumerate() {
            cols.extend((1..=d).map(|a| format!("psi.{h}.{}.{a}", j + 1)));
        }
    }
    cols
}

pub fn encode_mills(draw: &Draw) -> Vec<f64> {
    let mut row = draw.nu.clone();
    row.extend(draw.theta.iter().flatten().flatten());
    row.extend(draw.weights.iter().flatten());
    row.extend(
        draw.indicators
            .iter()
            .flatten()
            .map(|&b| if b { 1.0 } else { 0.0 }),
    );
    row.extend(&draw.gamma0);
    if let Some(z) = &draw.z {
        row.extend(z.iter().map(|&h| (h + 1) as f64));
    }
    row
}

pub fn decode_mills(
    row: &[f64],
    levels: &[usize],
    pairs: &[PairIndex],
    components: usize,
    allocations: Option<usize>,
) -> Result<Draw> {
    let sizes: Vec<usize> = pairs.iter().map(|pr| levels[pr.j] * levels[pr.k]).collect();
    let per_comp: usize = sizes.iter().sum();
    let expected = components * (2 + per_comp + 2 * pairs.len()) + allocations.unwrap_or(0);
    if row.len() != expected {
        return Err(MillsError::Dimension {
            expected,
            got: row.len(),
        });
    }
    let mut it = row.iter().copied();
    let mut take = |k: usize| -> Vec<f64> { it.by_ref().take(k).collect() };
    let nu = take(components);
    let theta = (0..components)
        .map(|_| sizes.iter().map(|&s| take(s)).collect())
        .collect();
    let weights = (0..components).map(|_| take(pairs.len())).collect();
    let indicators = (0..components)
        .map(|_| take(pairs.len()).into_iter().map(|v| v != 0.0).collect())
        .collect();
    let gamma0 = take(components);
    let z = allocations.map(|n| take(n).into_iter().map(|v| v as usize - 1).collect());
    Ok(Draw {
        nu,
        theta,
        weights,
        indicators,
        gamma0,
        z,
    })
}

pub fn encode_lca(model: &LatentClassModel) -> Vec<f64> {
    let mut row = model.nu.clone();
    row.extend(model.psi.iter().flatten().flatten());
    row
}

pub fn decode_lca(row: &[f64], levels: &[usize], classes: usize) -> Result<LatentClassModel> {
    let expected = classes * (1 + levels.iter().sum::<usize>());
    if row.len() != expected {
        return Err(MillsError::Dimension {
            expected,
            got: row.len(),
        });
    }
    let mut it = row.iter().copied();
    let nu = it.by_ref().take(classes).collect();
    let psi = (0..classes)
        .map(|_| {
            levels
                .iter()
                .map(|&d| it.by_ref().take(d).collect())
                .collect()
        })
        .collect();
    Ok(LatentClassModel { nu, psi })
}

/// Shortest text that parses back to the same `f64`.
pub fn format_value(v: f64) -> String {
    let a = v.abs();
    if v == 0.0 || (1e-5..1e16).contains(&a) || !v.is_finite() {
        format!("{v}")
    } else {
        format!("{v:e}")
    }
}

pub fn write_rows(
    path: &Path,
    format: DrawFormat,
    columns: &[String],
    rows: &[Vec<f64>],
) -> Result<()> {
    let file = File::create(path).map_err(|e| MillsError::io(path, e))?;
    let mut out = BufWriter::new(file);
    match format {
        DrawFormat::Csv => {
            let mut w = csv::Writer::from_writer(out);
            w.write_record(columns)?;
            for row in rows {
                w.write_record(row.iter().map(|&v| format_value(v)))?;
            }
            w.flush().map_err(|e| MillsError::io(path, e))?;
        }
        DrawFormat::Binary => {
            for row in rows {
                out.write_all(&(row.len() as u64).to_le_bytes())
                    .map_err(|e| MillsError::io(path, e))?;
                for v in row {
                    out.write_all(&v.to_le_bytes())
                        .map_err(|e| MillsError::io(path, e))?;
                }
            }
            out.flush().map_err(|e| MillsError::io(path, e))?;
        }
    }
    Ok(())
}

/// Rows of a draw file; CSV headers must equal `columns`.
pub fn read_rows(path: &Path, format: DrawFormat, columns: &[String]) -> Result<Vec<Vec<f64>>> {
    match format {
        DrawFormat::Csv => {
            let mut r = csv::Reader::from_path(path)?;
            let header: Vec<String> = r.headers()?.iter().map(str::to_owned).collect();
            if header != columns {
                return Err(MillsError::data(
                    path,
                    "column names do not match meta.json",
                ));
            }
            r.records()
                .map(|rec| {
                    rec?.iter()
                        .map(|s| {
                            s.parse::<f64>()
                                .map_err(|e| MillsError::data(path, format!("{s:?}: {e}")))
                        })
                        .collect()
                })
                .collect()
        }
        DrawFormat::Binary => {
            let mut bytes = Vec::new();
            BufReader::new(File::open(path).map_err(|e| MillsError::io(path, e))?)
                .read_to_end(&mut bytes)
                .map_err(|e| MillsError::io(path, e))?;
            let mut rows = Vec::new();
            let mut rest = bytes.as_slice();
            while !rest.is_empty() {
                let (len, tail) = rest
                    .split_first_chunk::<8>()
                    .ok_or_else(|| MillsError::data(path, "truncated row length"))?;
                let len = u64::from_le_bytes(*len) as usize;
                if len != columns.len() || tail.len() < 8 * len {
                    return Err(MillsError::data(path, format!("bad row of {len} values")));
                }
                let (body, tail) = tail.split_at(8 * len);
                rows.push(
                    body.chunks_exact(8)
                        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
                        .collect(),
                );
                rest = tail;
            }
            Ok(rows)
        }
    }
}

fn chain_file(chain: u64, format: DrawFormat) -> String {
    format!("chain-{}.{}", chain + 1, format.extension())
}

fn write_meta(dir: &Path, meta: &DrawMeta) -> Result<()> {
    let path = dir.join(META_FILE);
    let mut text = serde_json::to_string_pretty(meta)?;
    text.push('\n');
    fs::write(&path, text).map_err(|e| MillsError::io(path, e))
}

fn one_based(pairs: &[PairIndex]) -> Vec<[usize; 2]> {
    pairs.iter().map(|pr| [pr.j + 1, pr.k + 1]).collect()
}

/// Write mixture chains (all from the same data and hyperparameters).
pub fn write_mills(dir: &Path, chains: &[PosteriorDraws], format: DrawFormat) -> Result<DrawMeta> {
    let first = chains
        .first()
        .ok_or_else(|| MillsError::InvalidInput("no chains to write".into()))?;
    fs::create_dir_all(dir).map_err(|e| MillsError::io(dir, e))?;
    let allocations = first.config.store_allocations.then_some(first.n);
    let columns = mills_columns(&first.levels, &first.pairs, first.components(), allocations);
    let mut records = Vec::with_capacity(chains.len());
    for chain in chains {
        let file = chain_file(chain.config.chain, format);
        let rows: Vec<Vec<f64>> = chain.draws.iter().map(encode_mills).collect();
        write_rows(&dir.join(&file), format, &columns, &rows)?;
        records.push(ChainRecord {
            chain: chain.config.chain,
            file,
            kept: rows.len(),
            diagnostics: serde_json::to_value(&chain.diagnostics)?,
        });
    }
    let meta = DrawMeta {
        model: ModelKind::Mills,
        version: env!("CARGO_PKG_VERSION").to_string(),
        format,
        seed: first.config.seed,
        n: first.n,
        levels: first.levels.clone(),
        names: first.names.clone(),
        pairs: one_based(&first.pairs),
        components: first.components(),
        hyper: Some(first.hyper.clone()),
        config: first.config.clone(),
        chains: records,
        columns,
    };
    write_meta(dir, &meta)?;
    Ok(meta)
}

pub fn write_lca(dir: &Path, chains: &[LcaDraws], format: DrawFormat) -> Result<DrawMeta> {
    let first = chains
        .first()
        .ok_or_else(|| MillsError::InvalidInput("no chains to write".into()))?;
    fs::create_dir_all(dir).map_err(|e| MillsError::io(dir, e))?;
    let columns = lca_columns(&first.levels, first.classes);
    let mut records = Vec::with_capacity(chains.len());
    for chain in chains {
        let file = chain_file(chain.config.chain, format);
        let rows: Vec<Vec<f64>> = chain.draws.iter().map(encode_lca).collect();
        write_rows(&dir.join(&file), format, &columns, &rows)?;
        records.push(ChainRecord {
            chain: chain.config.chain,
            file,
            kept: rows.len(),
            diagnostics: serde_json::Value::Null,
        });
    }
    let meta = DrawMeta {
        model: ModelKind::Lca,
        version: env!("CARGO_PKG_VERSION").to_string(),
        format,
        seed: first.config.seed,
        n: first.n,
        levels: first.levels.clone(),
        names: first.names.clone(),
        pairs: one_based(&first.pairs),
        components: first.classes,
        hyper: None,
        config: first.config.clone(),
        chains: records,
        columns,
    };
    write_meta(dir, &meta)?;
    Ok(meta)
}

#[derive(Debug, Clone)]
pub enum DrawPayload {
    Mills(Vec<Draw>),
    Lca(Vec<LatentClassModel>),
}

/// Draws of every chain in a directory, pooled in chain order.
#[derive(Debug, Clone)]
pub struct StoredDraws {
    pub dir: PathBuf,
    pub meta: DrawMeta,
    pub payload: DrawPayload,
    layout: PairLayout,
}

impl StoredDraws {
    pub fn load(dir: &Path) -> Result<Self> {
        let meta_path = dir.join(META_FILE);
        let text = fs::read_to_string(&meta_path).map_err(|e| MillsError::io(&meta_path, e))?;
        let meta: DrawMeta = serde_json::from_str(&text)?;
        let layout = PairLayout::new(&meta.levels)?;
        let pairs = meta.pair_indices()?;
        if pairs != layout.pairs() {
            return Err(MillsError::data(
                &meta_path,
                "pair list does not cover every variable pair",
            ));
        }
        let expected = match meta.model {
            ModelKind::Mills => {
                let alloc = meta.config.store_allocations.then_some(meta.n);
                mills_columns(&meta.levels, &pairs, meta.components, alloc)
            }
            ModelKind::Lca => lca_columns(&meta.levels, meta.components),
        };
        if expected != meta.columns {
            return Err(MillsError::data(
                &meta_path,
                "columns do not match the declared dimensions",
            ));
        }
        let mut rows = Vec::new();
        for rec in &meta.chains {
            rows.extend(read_rows(&dir.join(&rec.file), meta.format, &meta.columns)?);
        }
        let payload = match meta.model {
            ModelKind::Mills => {
                let alloc = meta.config.store_allocations.then_some(meta.n);
                DrawPayload::Mills(
                    rows.iter()
                        .map(|r| decode_mills(r, &meta.levels, &pairs, meta.components, alloc))
                        .collect::<Result<_>>()?,
                )
            }
            ModelKind::Lca => DrawPayload::Lca(
                rows.iter()
                    .map(|r| decode_lca(r, &meta.levels, meta.components))
                    .collect::<Result<_>>()?,
            ),
        };
        Ok(Self {
            dir: dir.to_path_buf(),
            meta,
            payload,
            layout,
        })
    }

    pub fn layout(&self) -> &PairLayout {
        &self.layout
    }
}

impl BivariateSource for StoredDraws {
    fn levels(&self) -> &[usize] {
        self.layout.levels()
    }

    fn pairs(&self) -> &[PairIndex] {
        self.layout.pairs()
    }

    fn n_draws(&self) -> usize {
        match &self.payload {
            DrawPayload::Mills(d) => d.len(),
            DrawPayload::Lca(d) => d.len(),
        }
    }

    fn bivariate(&self, draw: usize, e: usize) -> Result<Vec<f64>> {
        match &self.payload {
            DrawPayload::Mills(d) => bivariate_estimate(&d[draw], e, &self.layout.designs()[e]),
            DrawPayload::Lca(d) => Ok(d[draw].bivariate(self.layout.pairs()[e])),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::table::pair_set;

    #[test]
    fn column_names() {
        let pairs = pair_set(3).unwrap();
        let cols = mills_columns(&[2, 3, 2], &pairs, 2, Some(2));
        assert_eq!(&cols[..3], ["nu.1", "nu.2", "theta.1.1.2.1"]);
        assert!(cols.contains(&"theta.2.2.3.6".to_string()));
        assert!(cols.contains(&"w.2.1.3".to_string()));
        assert!(cols.contains(&"delta.1.2.3".to_string()));
        assert_eq!(
            &cols[cols.len() - 4..],
            ["gamma0.1", "gamma0.2", "z.1", "z.2"]
        );
        // 2 nu + 2*(6+4+6) theta + 2*3 w + 2*3 delta + 2 gamma0 + 2 z
        assert_eq!(cols.len(), 2 + 32 + 6 + 6 + 2 + 2);
        assert_eq!(lca_columns(&[2, 3], 2).len(), 2 + 2 * 5);
    }

    #[test]
    fn values_round_trip_through_text() {
        for v in [
            0.0,
            -0.0,
            1.0,
            0.1,
            1e-300,
            3.5e-7,
            -2.25e20,
            123456.789,
            f64::MIN_POSITIVE,
            0.30000000000000004,
        ] {
            assert_eq!(
                format_value(v).parse::<f64>().unwrap().to_bits(),
                v.to_bits(),
                "{v}"
            );
        }
    }

    fn sample_draw(z: bool) -> Draw {
        Draw {
            nu: vec![0.25, 0.75],
            theta: vec![
                vec![vec![0.1, -0.2, 0.3, 1e-9]],
                vec![vec![0.0, 2.0, -3.0, 0.5]],
            ],
            weights: vec![vec![0.9], vec![1e-20]],
            indicators: vec![vec![true], vec![false]],
            gamma0: vec![0.4, 0.6],
            z: z.then(|| vec![1, 0, 1]),
        }
    }

    #[test]
    fn mills_rows_round_trip() {
        let pairs = pair_set(2).unwrap();
        for z in [false, true] {
            let d = sample_draw(z);
            let row = encode_mills(&d);
            let alloc = z.then_some(3);
            assert_eq!(row.len(), mills_columns(&[2, 2], &pairs, 2, alloc).len());
            assert_eq!(decode_mills(&row, &[2, 2], &pairs, 2, alloc).unwrap(), d);
        }
        assert!(decode_mills(&[0.0; 3], &[2, 2], &pairs, 2, None).is_err());
    }

    #[test]
    fn files_round_trip_in_both_formats() {
        let dir = tempfile::tempdir().unwrap();
        let cols: Vec<String> = ["a", "b", "c"].iter().map(|s| s.to_string()).collect();
        let rows = vec![vec![0.1, 1e-300, -7.0], vec![f64::MAX, 0.0, 2.5e-8]];
        for format in [DrawFormat::Csv, DrawFormat::Binary] {
            let path = dir.path().join(format!("x.{}", format.extension()));
            write_rows(&path, format, &cols, &rows).unwrap();
            assert_eq!(read_rows(&path, format, &cols).unwrap(), rows);
        }
        let bin = fs::read(dir.path().join("x.bin")).unwrap();
        assert_eq!(bin.len(), 2 * (8 + 3 * 8));
        assert_eq!(&bin[..8], &3u64.to_le_bytes());
        assert!(read_rows(&dir.path().join("x.csv"), DrawFormat::Csv, &cols[..2]).is_err());
    }

    #[test]
    fn lca_rows_round_trip() {
        let m = LatentClassModel {
            nu: vec![0.3, 0.7],
            psi: vec![
                vec![vec![0.5, 0.5], vec![0.2, 0.3, 0.5]],
                vec![vec![0.9, 0.1], vec![1.0, 0.0, 0.0]],
            ],
        };
        assert_eq!(decode_lca(&encode_lca(&m), &[2, 3], 2).unwrap(), m);
    }

    #[test]
    fn format_parses() {
        assert_eq!("csv".parse::<DrawFormat>().unwrap(), DrawFormat::Csv);
        assert_eq!("binary".parse::<DrawFormat>().unwrap(), DrawFormat::Binary);
        assert!("parquet".parse::<DrawFormat>().is_err());
    }
}
