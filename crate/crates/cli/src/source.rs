//! Training data sources: `synth:` specs, PGM images and `.sdl` patch sets.

use std::path::PathBuf;

use sepdl_core::data::{extract_patches, load_patchset, load_pgm, synth_separable};
use sepdl_core::{DictMode, PatchSet, SynthSpec};
use serde::{Deserialize, Serialize};

use crate::CliError;

/// Where training patches come from, as written on the command line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DataSource {
    Synth { spec: SynthSpec },
    Image { path: PathBuf, m: usize, stride: usize },
    PatchFile { path: PathBuf },
}

/// Shape hints from the other flags, used to fill in what a `synth:` spec
/// leaves out.
#[derive(Debug, Clone, Copy)]
pub struct ShapeHints {
    pub mode: DictMode,
    pub m: Option<usize>,
    pub n1: Option<usize>,
    pub n2: Option<usize>,
    pub s: Option<usize>,
}

pub const DEFAULT_M: usize = 8;

/// Parses `synth:N=512,m=8,n1=16,n2=16,s=6,sigma=0.1`. Only `N` is required.
pub fn parse_synth(body: &str, hints: ShapeHints) -> Result<SynthSpec, CliError> {
    let mut count = None;
    let mut m = None;
    let (mut n1, mut n2, mut s, mut sigma) = (None, None, None, 0.1);
    for item in body.split(',').filter(|t| !t.is_empty()) {
        let (key, value) = item
            .split_once('=')
            .ok_or_else(|| CliError::Usage(format!("synth spec item '{item}' is not key=value")))?;
        let int =
            || value.parse::<usize>().map_err(|_| CliError::Usage(format!("synth {key}: '{value}' is not an integer")));
        match key {
            "N" => count = Some(int()?),
            "m" => m = Some(int()?),
            "n" => {
                n1 = Some(int()?);
                n2 = n1;
            }
            "n1" => n1 = Some(int()?),
            "n2" => n2 = Some(int()?),
            "s" => s = Some(int()?),
            "sigma" => {
                sigma = value
                    .parse::<f64>()
                    .map_err(|_| CliError::Usage(format!("synth sigma: '{value}' is not a number")))?
            }
            other => {
                return Err(CliError::Usage(format!(
                    "unknown synth key '{other}' (expected N, m, n, n1, n2, s, sigma)"
                )))
            }
        }
    }
    let count = count.ok_or_else(|| CliError::Usage("synth spec needs N=<count>".into()))?;
    let m = match (m, hints.m) {
        (Some(a), Some(b)) if a != b => return Err(CliError::Usage(format!("synth m={a} conflicts with --m {b}"))),
        (a, b) => a.or(b).unwrap_or(DEFAULT_M),
    };
    let n_default = default_atoms(hints.mode, m);
    let n1 = n1.or(hints.n1).unwrap_or(n_default);
    let n2 = n2.or(hints.n2).unwrap_or(n_default);
    let s = s.or(hints.s).unwrap_or(m);
    Ok(SynthSpec { count, m, n1, n2, s, noise_sigma: sigma, mode: hints.mode })
}

/// Atom count per side when none is given: square for orthonormal
/// dictionaries, twice redundant for general ones.
pub fn default_atoms(mode: DictMode, m: usize) -> usize {
    match mode {
        DictMode::Orthonormal => m,
        DictMode::General => 2 * m,
    }
}

impl DataSource {
    pub fn parse(arg: &str, hints: ShapeHints, stride: usize) -> Result<Self, CliError> {
        if let Some(body) = arg.strip_prefix("synth:") {
            return Ok(DataSource::Synth { spec: parse_synth(body, hints)? });
        }
        let path = PathBuf::from(arg);
        match path.extension().and_then(|e| e.to_str()) {
            Some("pgm") => Ok(DataSource::Image { path, m: hints.m.unwrap_or(DEFAULT_M), stride }),
            Some("sdl") => Ok(DataSource::PatchFile { path }),
            _ => Err(CliError::Usage(format!("--data '{arg}': expected synth:..., a .pgm image or a .sdl patch set"))),
        }
    }

    pub fn load(&self, seed: u64) -> Result<PatchSet, CliError> {
        match self {
            DataSource::Synth { spec } => Ok(synth_separable(seed, spec)?.0),
            DataSource::Image { path, m, stride } => {
                let img = load_pgm(path)
                    .map_err(|e| CliError::Runtime(format!("cannot read image {}: {e}", path.display())))?;
                Ok(extract_patches(&img, *m, *stride)?)
            }
            DataSource::PatchFile { path } => load_patchset(path)
                .map_err(|e| CliError::Runtime(format!("cannot read patch set {}: {e}", path.display()))),
        }
    }
}
