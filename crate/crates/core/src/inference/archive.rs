//! On-disk draw archive.
//!
//! `draws.bin` is little-endian binary: the 8-byte magic `SAEDRAW1`, then
//! u32 coordinate count P, u32 draws per chain D and u32 chain count C,
//! followed by P columns of C·D f64 values. Column k holds every draw of
//! coordinate k, chain by chain. `draws_meta.json` carries the coordinate
//! names, model specification, seed, spec hash, sampler settings,
//! acceptance rates and diagnostics.

use std::fs;
use std::io::{BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{spec_hash, BlockAcceptance, Diagnostic, DrawMeta, PosteriorDraws};
use crate::error::{Error, Result};
use crate::model::ModelSpec;

pub const ARCHIVE_MAGIC: &[u8; 8] = b"SAEDRAW1";
pub const DRAWS_FILE: &str = "draws.bin";
pub const META_FILE: &str = "draws_meta.json";

#[derive(Serialize)]
struct MetaOut<'a> {
    format: &'static str,
    names: &'a [String],
    chains: usize,
    draws_per_chain: usize,
    warmup: usize,
    thin: usize,
    seed: u64,
    spec_hash: &'a str,
    acceptance: &'a [BlockAcceptance],
    warnings: &'a [String],
    diagnostics: Vec<DiagnosticOut<'a>>,
    spec: &'a ModelSpec,
}

#[derive(Serialize)]
struct DiagnosticOut<'a> {
    name: &'a str,
    mean: f64,
    sd: f64,
    q025: f64,
    median: f64,
    q975: f64,
    rhat: Option<f64>,
    ess: Option<f64>,
}

impl<'a> From<&'a Diagnostic> for DiagnosticOut<'a> {
    fn from(d: &'a Diagnostic) -> Self {
        let finite = |v: f64| v.is_finite().then_some(v);
        DiagnosticOut {
            name: &d.name,
            mean: d.mean,
            sd: d.sd,
            q025: d.q025,
            median: d.median,
            q975: d.q975,
            rhat: finite(d.rhat),
            ess: finite(d.ess),
        }
    }
}

#[derive(Deserialize)]
struct MetaIn {
    names: Vec<String>,
    chains: usize,
    draws_per_chain: usize,
    warmup: usize,
    thin: usize,
    seed: u64,
    spec_hash: String,
    acceptance: Vec<BlockAcceptance>,
    #[serde(default)]
    warnings: Vec<String>,
    spec: ModelSpec,
}

pub fn write_archive(posterior: &PosteriorDraws, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let bin = dir.join(DRAWS_FILE);
    let file = fs::File::create(&bin).map_err(|e| Error::io(&bin, e))?;
    let mut w = BufWriter::new(file);
    let meta = posterior.meta();
    let header = [
        posterior.names().len() as u32,
        meta.draws_per_chain as u32,
        meta.chains as u32,
    ];
    let mut write = |bytes: &[u8]| w.write_all(bytes).map_err(|e| Error::io(&bin, e));
    write(ARCHIVE_MAGIC)?;
    for h in header {
        write(&h.to_le_bytes())?;
    }
    for v in posterior.values() {
        write(&v.to_le_bytes())?;
    }
    w.flush().map_err(|e| Error::io(&bin, e))?;

    let out = MetaOut {
        format: "SAEDRAW1",
        names: posterior.names(),
        chains: meta.chains,
        draws_per_chain: meta.draws_per_chain,
        warmup: meta.warmup,
        thin: meta.thin,
        seed: meta.seed,
        spec_hash: &meta.spec_hash,
        acceptance: &meta.acceptance,
        warnings: posterior.warnings(),
        diagnostics: posterior.diagnostics().iter().map(DiagnosticOut::from).collect(),
        spec: posterior.spec(),
    };
    let path = dir.join(META_FILE);
    let json = serde_json::to_string_pretty(&out)?;
    fs::write(&path, json + "\n").map_err(|e| Error::io(&path, e))
}

pub fn read_archive(dir: &Path) -> Result<PosteriorDraws> {
    let path = dir.join(META_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let meta: MetaIn = serde_json::from_str(&text).map_err(|e| Error::Schema {
        file: path.display().to_string(),
        message: e.to_string(),
    })?;
    let schema = |message: String| Error::Schema {
        file: dir.join(DRAWS_FILE).display().to_string(),
        message,
    };
    if spec_hash(&meta.spec) != meta.spec_hash {
        return Err(Error::Schema {
            file: path.display().to_string(),
            message: "spec hash does not match the stored model specification".into(),
        });
    }
    if meta.spec.layout().names() != meta.names.as_slice() {
        return Err(Error::Schema {
            file: path.display().to_string(),
            message: "coordinate names do not match the model specification".into(),
        });
    }

    let bin = dir.join(DRAWS_FILE);
    let mut bytes = Vec::new();
    fs::File::open(&bin)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(&bin, e))?;
    if bytes.len() < 20 || &bytes[..8] != ARCHIVE_MAGIC {
        return Err(schema("missing SAEDRAW1 header".into()));
    }
    let word = |i: usize| u32::from_le_bytes(bytes[8 + 4 * i..12 + 4 * i].try_into().unwrap()) as usize;
    let (p, d, c) = (word(0), word(1), word(2));
    if p != meta.names.len() || d != meta.draws_per_chain || c != meta.chains {
        return Err(schema("header disagrees with the metadata file".into()));
    }
    let body = &bytes[20..];
    if body.len() != 8 * p * d * c {
        return Err(schema(format!("expected {} bytes of draws, found {}", 8 * p * d * c, body.len())));
    }
    let values = body
        .chunks_exact(8)
        .map(|b| f64::from_le_bytes(b.try_into().unwrap()))
        .collect();
    let draw_meta = DrawMeta {
        chains: meta.chains,
        draws_per_chain: meta.draws_per_chain,
        warmup: meta.warmup,
        thin: meta.thin,
        seed: meta.seed,
        spec_hash: meta.spec_hash,
        acceptance: meta.acceptance,
    };
    let mut posterior = PosteriorDraws::from_parts(meta.spec, draw_meta, values)?;
    let recomputed: Vec<String> = posterior.warnings().to_vec();
    for w in meta.warnings {
        if !recomputed.contains(&w) {
            posterior.add_warning(w);
        }
    }
    Ok(posterior)
}
