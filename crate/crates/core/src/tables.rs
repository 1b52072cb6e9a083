//! Binary file format for solved ql-k tables.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic   b"QLKTABLE"
//! version u32
//! hlen    u64          length of the JSON header in bytes
//! header  [u8; hlen]   UTF-8 JSON, see `Header`
//! arrays  f64 LE       one dense array per header entry, in header order
//! ```
//!
//! The header carries the configuration hash so stale tables are rejected at
//! load time.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config::{GridConfig, SolverConfig};
use crate::game::Agent;
use crate::qlk::{PolicyTable, QlkTables, ValueTable};

pub const MAGIC: &[u8; 8] = b"QLKTABLE";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum TablesError {
    #[error("i/o error on {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("{0} is not a table file")]
    BadMagic(String),
    #[error("unsupported table format version {found} (expected {FORMAT_VERSION})")]
    Version { found: u32 },
    #[error("corrupt table header: {0}")]
    Header(String),
    #[error("table file was solved for config {found}, expected {expected}; re-run `solve`")]
    HashMismatch { expected: String, found: String },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
enum Kind {
    Policy,
    Value,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct Entry {
    kind: Kind,
    agent: Agent,
    level: usize,
    lambda: f64,
    num_actions: usize,
    len: usize,
}

/// JSON header written ahead of the raw arrays.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Header {
    pub config_hash: String,
    pub grid: GridConfig,
    pub solver: SolverConfig,
    entries: Vec<Entry>,
}

fn io_err(path: &Path) -> impl Fn(std::io::Error) -> TablesError + '_ {
    move |source| TablesError::Io { path: path.display().to_string(), source }
}

fn policy_entry(p: &PolicyTable) -> Entry {
    Entry { kind: Kind::Policy, agent: p.agent, level: p.level, lambda: p.lambda, num_actions: p.num_actions, len: p.probs.len() }
}

/// Writes `tables` to `path`. `grid` is recorded for inspection only; the
/// config hash is what load checks.
pub fn save(tables: &QlkTables, grid: &GridConfig, path: impl AsRef<Path>) -> Result<(), TablesError> {
    let path = path.as_ref();
    let mut entries: Vec<Entry> = tables.level0.iter().map(policy_entry).collect();
    entries.extend(tables.policies.iter().map(policy_entry));
    entries.extend(tables.values.iter().map(|v| Entry {
        kind: Kind::Value,
        agent: v.agent,
        level: v.level,
        lambda: v.lambda,
        num_actions: 0,
        len: v.values.len(),
    }));
    let header = Header {
        config_hash: tables.config_hash.clone(),
        grid: *grid,
        solver: tables.solver.clone(),
        entries,
    };
    let json = serde_json::to_vec(&header).map_err(|e| TablesError::Header(e.to_string()))?;

    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    let tmp = path.with_extension("partial");
    let file = File::create(&tmp).map_err(io_err(&tmp))?;
    let mut w = BufWriter::with_capacity(1 << 20, file);
    let write = |w: &mut BufWriter<File>| -> std::io::Result<()> {
        w.write_all(MAGIC)?;
        w.write_all(&FORMAT_VERSION.to_le_bytes())?;
        w.write_all(&(json.len() as u64).to_le_bytes())?;
        w.write_all(&json)?;
        let arrays = tables
            .level0
            .iter()
            .chain(&tables.policies)
            .map(|p| &p.probs)
            .chain(tables.values.iter().map(|v| &v.values));
        for arr in arrays {
            write_f64s(w, arr)?;
        }
        w.flush()
    };
    write(&mut w).map_err(io_err(&tmp))?;
    drop(w);
    std::fs::rename(&tmp, path).map_err(io_err(path))
}

fn write_f64s(w: &mut impl Write, xs: &[f64]) -> std::io::Result<()> {
    let mut buf = Vec::with_capacity(8 * 8192);
    for chunk in xs.chunks(8192) {
        buf.clear();
        for x in chunk {
            buf.extend_from_slice(&x.to_le_bytes());
        }
        w.write_all(&buf)?;
    }
    Ok(())
}

fn read_f64s(r: &mut impl Read, len: usize) -> std::io::Result<Vec<f64>> {
    let mut bytes = vec![0u8; len * 8];
    r.read_exact(&mut bytes)?;
    Ok(bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect())
}

fn read_header(r: &mut impl Read, path: &Path) -> Result<Header, TablesError> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic).map_err(|_| TablesError::BadMagic(path.display().to_string()))?;
    if &magic != MAGIC {
        return Err(TablesError::BadMagic(path.display().to_string()));
    }
    let mut u32b = [0u8; 4];
    r.read_exact(&mut u32b).map_err(io_err(path))?;
    let version = u32::from_le_bytes(u32b);
    if version != FORMAT_VERSION {
        return Err(TablesError::Version { found: version });
    }
    let mut u64b = [0u8; 8];
    r.read_exact(&mut u64b).map_err(io_err(path))?;
    let hlen = u64::from_le_bytes(u64b) as usize;
    let mut json = vec![0u8; hlen];
    r.read_exact(&mut json).map_err(io_err(path))?;
    serde_json::from_slice(&json).map_err(|e| TablesError::Header(e.to_string()))
}

/// Reads only the header of a table file.
pub fn peek(path: impl AsRef<Path>) -> Result<Header, TablesError> {
    let path = path.as_ref();
    let file = File::open(path).map_err(io_err(path))?;
    read_header(&mut BufReader::new(file), path)
}

/// Loads tables, rejecting files whose config hash differs from `expected_hash`.
pub fn load(path: impl AsRef<Path>, expected_hash: &str) -> Result<QlkTables, TablesError> {
    let path = path.as_ref();
    let file = File::open(path).map_err(io_err(path))?;
    let mut r = BufReader::with_capacity(1 << 20, file);
    let header = read_header(&mut r, path)?;
    if header.config_hash != expected_hash {
        return Err(TablesError::HashMismatch { expected: expected_hash.to_string(), found: header.config_hash });
    }
    let mut level0: Vec<PolicyTable> = Vec::new();
    let mut policies = Vec::new();
    let mut values = Vec::new();
    for e in &header.entries {
        let data = read_f64s(&mut r, e.len).map_err(io_err(path))?;
        match e.kind {
            Kind::Policy => {
                let p = PolicyTable { agent: e.agent, level: e.level, lambda: e.lambda, num_actions: e.num_actions, probs: data };
                if e.level == 0 {
                    level0.push(p);
                } else {
                    policies.push(p);
                }
            }
            Kind::Value => values.push(ValueTable { agent: e.agent, level: e.level, lambda: e.lambda, values: data }),
        }
    }
    let level0: [PolicyTable; 2] = level0
        .try_into()
        .map_err(|_| TablesError::Header("expected exactly two level-0 tables".into()))?;
    if level0[0].agent != Agent::Robot || level0[1].agent != Agent::Human {
        return Err(TablesError::Header("level-0 tables out of order".into()));
    }
    Ok(QlkTables { config_hash: header.config_hash, solver: header.solver, level0, policies, values })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::{tables_hash, GameConfig};
    use crate::game::Game;
    use crate::qlk::solve_qlk;

    fn tiny() -> (GameConfig, SolverConfig) {
        let mut g = GameConfig::desk();
        g.grid.x.count = 6;
        g.grid.v.count = 2;
        (g, SolverConfig { lambdas: vec![0.5, 1.0], ..Default::default() })
    }

    #[test]
    fn save_load_is_bitwise_lossless() {
        let (gc, sc) = tiny();
        let tables = solve_qlk(&Game::new(gc.clone()), &sc).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.qlk");
        save(&tables, &gc.grid, &path).unwrap();
        let back = load(&path, &tables_hash(&gc, &sc)).unwrap();
        assert_eq!(back.config_hash, tables.config_hash);
        assert_eq!(back.solver, tables.solver);
        let bits = |t: &QlkTables| -> Vec<u64> {
            t.level0
                .iter()
                .chain(&t.policies)
                .flat_map(|p| p.probs.iter().map(|x| x.to_bits()))
                .chain(t.values.iter().flat_map(|v| v.values.iter().map(|x| x.to_bits())))
                .collect()
        };
        assert_eq!(bits(&back), bits(&tables));
        assert_eq!(back, tables);
    }

    #[test]
    fn altered_grid_is_rejected() {
        let (gc, sc) = tiny();
        let tables = solve_qlk(&Game::new(gc.clone()), &sc).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.qlk");
        save(&tables, &gc.grid, &path).unwrap();
        let mut other = gc.clone();
        other.grid.x.count = 7;
        let err = load(&path, &tables_hash(&other, &sc)).unwrap_err();
        assert!(matches!(err, TablesError::HashMismatch { .. }), "{err}");
    }

    #[test]
    fn garbage_file_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("junk");
        std::fs::write(&path, b"hello world, not a table").unwrap();
        assert!(matches!(load(&path, "x"), Err(TablesError::BadMagic(_))));
    }
}
