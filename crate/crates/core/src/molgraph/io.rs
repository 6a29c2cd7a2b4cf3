//! JSON-lines readers and writers for graphs, conformers, splits and
//! vocabularies.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::molgraph::{ConformerSet, FeatureVocab, MolecularGraph, SplitSpec};

fn read_lines<T: DeserializeOwned>(path: &Path) -> Result<Vec<(usize, T)>> {
    let reader = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let item = serde_json::from_str(&line).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            msg: e.to_string(),
        })?;
        out.push((i + 1, item));
    }
    Ok(out)
}

fn write_lines<T: Serialize>(path: &Path, items: impl IntoIterator<Item = T>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for item in items {
        serde_json::to_writer(&mut w, &item)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

/// Reads a graphs file. The vocabulary is `vocab` when supplied, otherwise
/// derived from the data; every feature is checked against it.
pub fn load_graph_dataset(path: &Path, vocab: Option<FeatureVocab>) -> Result<(Vec<MolecularGraph>, FeatureVocab)> {
    let rows: Vec<(usize, MolecularGraph)> = read_lines(path)?;
    let vocab = match vocab {
        Some(v) => v,
        None => FeatureVocab::from_graphs(rows.iter().map(|(_, g)| g)),
    };
    vocab.validate()?;
    let mut seen = HashMap::with_capacity(rows.len());
    let mut graphs = Vec::with_capacity(rows.len());
    for (line, g) in rows {
        let parse_err = |msg: String| Error::Parse {
            path: path.to_path_buf(),
            line,
            msg,
        };
        g.validate(Some(&vocab)).map_err(|e| parse_err(e.to_string()))?;
        if let Some(prev) = seen.insert(g.id.clone(), line) {
            return Err(parse_err(format!("duplicate id `{}` (first on line {prev})", g.id)));
        }
        graphs.push(g);
    }
    Ok((graphs, vocab))
}

pub fn write_graph_dataset(path: &Path, graphs: &[MolecularGraph]) -> Result<()> {
    write_lines(path, graphs)
}

/// Reads a conformers file and returns one set per molecule in `graphs`;
/// molecules missing from the file get an empty set.
pub fn load_conformer_dataset(path: &Path, graphs: &[MolecularGraph]) -> Result<HashMap<String, ConformerSet>> {
    let sizes: HashMap<&str, usize> = graphs.iter().map(|g| (g.id.as_str(), g.num_nodes)).collect();
    let mut out: HashMap<String, ConformerSet> = graphs
        .iter()
        .map(|g| {
            (
                g.id.clone(),
                ConformerSet {
                    id: g.id.clone(),
                    conformers: Vec::new(),
                },
            )
        })
        .collect();
    let mut seen = HashMap::new();
    for (line, set) in read_lines::<ConformerSet>(path)? {
        let parse_err = |msg: String| Error::Parse {
            path: path.to_path_buf(),
            line,
            msg,
        };
        let n = *sizes
            .get(set.id.as_str())
            .ok_or_else(|| parse_err(format!("unknown molecule id `{}`", set.id)))?;
        if seen.insert(set.id.clone(), line).is_some() {
            return Err(parse_err(format!("duplicate id `{}`", set.id)));
        }
        for (k, conf) in set.conformers.iter().enumerate() {
            if conf.len() != n {
                return Err(parse_err(format!(
                    "molecule `{}` conformer {k} has {} rows, expected {n}",
                    set.id,
                    conf.len()
                )));
            }
            if conf.iter().flatten().any(|x| !x.is_finite()) {
                return Err(parse_err(format!(
                    "molecule `{}` conformer {k} has non-finite coordinates",
                    set.id
                )));
            }
        }
        out.insert(set.id.clone(), set);
    }
    Ok(out)
}

pub fn write_conformer_dataset<'a>(path: &Path, sets: impl IntoIterator<Item = &'a ConformerSet>) -> Result<()> {
    write_lines(path, sets)
}

pub fn load_split(path: &Path) -> Result<SplitSpec> {
    let split: SplitSpec = serde_json::from_reader(BufReader::new(File::open(path)?))?;
    split.validate()?;
    Ok(split)
}

pub fn write_split(path: &Path, split: &SplitSpec) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    serde_json::to_writer_pretty(&mut w, split)?;
    w.write_all(b"\n")?;
    w.flush()?;
    Ok(())
}

pub fn load_vocab(path: &Path) -> Result<FeatureVocab> {
    let v: FeatureVocab = serde_json::from_reader(BufReader::new(File::open(path)?))?;
    v.validate()?;
    Ok(v)
}
