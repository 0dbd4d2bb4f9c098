//! Synthetic instances and their on-disk bundle.
//!
//! A bundle is a directory holding `manifest.json` and three payloads,
//! `S.bin`, `X.bin` and `y.bin`. Each payload is a flat array of 64-bit
//! little-endian floats, real and imaginary parts interleaved, entries in
//! column-major order; a payload for an `r × c` matrix is `16·r·c` bytes.

use std::fs;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{HvmpError, Result};
use crate::harness::config::RunConfig;
use crate::hvmp::Problem;
use crate::linalg::{c, CMatrix, CVector};
use crate::linops::{LinearOperator, OperatorScope, OperatorSpec};
use crate::priors::{standard_complex_normal, Prior};

pub const ENCODING: &str = "f64 little-endian, re/im interleaved, column-major";

#[derive(Debug, Clone)]
pub struct Instance {
    pub s: CMatrix,
    pub x: CMatrix,
    pub op: LinearOperator,
    pub y: CVector,
    pub sigma2: f64,
    pub snr_db: f64,
    pub rho: f64,
    pub seed: u64,
}

impl Instance {
    pub fn problem(&self, prior_s: Prior, prior_x: Prior) -> Result<Problem> {
        Problem::new(
            self.op.clone(),
            self.y.clone(),
            self.sigma2,
            prior_s,
            prior_x,
            self.s.ncols(),
        )
    }

    /// `10 log₁₀(‖clean‖² / ‖y − clean‖²)` for the realized noise.
    pub fn empirical_snr_db(&self) -> Result<f64> {
        let clean = self.op.apply(&(&self.s * &self.x))?;
        Ok(10.0 * (clean.norm_squared() / (&self.y - &clean).norm_squared()).log10())
    }
}

/// Draws the operator, `S`, `X` and the noise, in that order, from `rng`.
/// `σ² = ‖A vec(SX)‖² / (N · 10^{snr/10})`.
pub fn gen_instance<R: Rng + ?Sized>(cfg: &RunConfig, seed: u64, rng: &mut R) -> Result<Instance> {
    let op = match cfg.operator_scope {
        OperatorScope::PerColumn => LinearOperator::partial_dft_per_column(cfg.n, cfg.l, cfg.t, rng)?,
        OperatorScope::Global => LinearOperator::partial_dft(cfg.n, cfg.l, cfg.t, rng)?,
    };
    let s = cfg.prior_s()?.sample_matrix(cfg.l, cfg.k, rng);
    let x = cfg.prior_x.sample_matrix(cfg.k, cfg.t, rng);
    let clean = op.apply(&(&s * &x))?;
    let energy = clean.norm_squared();
    if !(energy > 0.0) {
        return Err(HvmpError::Domain("instance has zero clean measurement energy".into()));
    }
    let sigma2 = energy / (op.n() as f64 * 10f64.powf(cfg.snr_db / 10.0));
    let sd = sigma2.sqrt();
    let y = CVector::from_fn(op.n(), |i, _| clean[i] + standard_complex_normal(rng) * sd);
    Ok(Instance {
        s,
        x,
        op,
        y,
        sigma2,
        snr_db: cfg.snr_db,
        rho: cfg.rho,
        seed,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Payload {
    pub file: String,
    pub rows: usize,
    pub cols: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    pub version: u32,
    pub l: usize,
    pub k: usize,
    pub t: usize,
    pub n: usize,
    pub seed: u64,
    pub snr_db: f64,
    pub rho: f64,
    pub sigma2: f64,
    pub operator: OperatorSpec,
    pub encoding: String,
    pub s: Payload,
    pub x: Payload,
    pub y: Payload,
    /// Effective configuration the instance was generated from.
    #[serde(default)]
    pub config: serde_json::Value,
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> HvmpError + '_ {
    move |source| HvmpError::Io {
        path: path.display().to_string(),
        source,
    }
}

fn encode(values: &[num_complex::Complex64]) -> Vec<u8> {
    let mut out = Vec::with_capacity(values.len() * 16);
    for z in values {
        out.extend_from_slice(&z.re.to_le_bytes());
        out.extend_from_slice(&z.im.to_le_bytes());
    }
    out
}

fn decode(bytes: &[u8], rows: usize, cols: usize, name: &str) -> Result<CMatrix> {
    if bytes.len() != 16 * rows * cols {
        return Err(HvmpError::Dimension(format!(
            "{name}: expected {} bytes for {rows}x{cols}, found {}",
            16 * rows * cols,
            bytes.len()
        )));
    }
    let f = |chunk: &[u8]| f64::from_le_bytes(chunk.try_into().expect("8-byte chunk"));
    let values: Vec<_> = bytes.chunks_exact(16).map(|b| c(f(&b[..8]), f(&b[8..]))).collect();
    Ok(CMatrix::from_vec(rows, cols, values))
}

pub fn save_bundle(inst: &Instance, dir: &Path, config: serde_json::Value) -> Result<Manifest> {
    let spec = inst
        .op
        .spec()
        .ok_or_else(|| HvmpError::Config("only DFT operators can be saved".into()))?;
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let payload = |file: &str, m: (usize, usize)| Payload {
        file: file.into(),
        rows: m.0,
        cols: m.1,
    };
    let manifest = Manifest {
        format: "hvmp-instance".into(),
        version: 1,
        l: inst.s.nrows(),
        k: inst.s.ncols(),
        t: inst.x.ncols(),
        n: inst.op.n(),
        seed: inst.seed,
        snr_db: inst.snr_db,
        rho: inst.rho,
        sigma2: inst.sigma2,
        operator: spec,
        encoding: ENCODING.into(),
        s: payload("S.bin", inst.s.shape()),
        x: payload("X.bin", inst.x.shape()),
        y: payload("y.bin", (inst.y.len(), 1)),
        config,
    };
    for (p, data) in [
        (&manifest.s, inst.s.as_slice()),
        (&manifest.x, inst.x.as_slice()),
        (&manifest.y, inst.y.as_slice()),
    ] {
        let path = dir.join(&p.file);
        fs::write(&path, encode(data)).map_err(io_err(&path))?;
    }
    let path = dir.join("manifest.json");
    let text = serde_json::to_string_pretty(&manifest).map_err(|e| HvmpError::Numeric(e.to_string()))?;
    fs::write(&path, text).map_err(io_err(&path))?;
    Ok(manifest)
}

pub fn load_bundle(dir: &Path) -> Result<(Instance, Manifest)> {
    let path = dir.join("manifest.json");
    let text = fs::read_to_string(&path).map_err(io_err(&path))?;
    let manifest: Manifest =
        serde_json::from_str(&text).map_err(|e| HvmpError::Config(format!("{}: {e}", path.display())))?;
    if manifest.format != "hvmp-instance" || manifest.version != 1 {
        return Err(HvmpError::Config(format!(
            "{}: unsupported bundle {} v{}",
            path.display(),
            manifest.format,
            manifest.version
        )));
    }
    let read = |p: &Payload| -> Result<CMatrix> {
        let path = dir.join(&p.file);
        let bytes = fs::read(&path).map_err(io_err(&path))?;
        decode(&bytes, p.rows, p.cols, &p.file)
    };
    let s = read(&manifest.s)?;
    let x = read(&manifest.x)?;
    let y = read(&manifest.y)?.column(0).into_owned();
    let op = LinearOperator::from_spec(&manifest.operator)?;
    if s.shape() != (manifest.l, manifest.k) || x.shape() != (manifest.k, manifest.t) || y.len() != op.n() {
        return Err(HvmpError::Dimension(
            "bundle payloads disagree with the manifest".into(),
        ));
    }
    let inst = Instance {
        s,
        x,
        op,
        y,
        sigma2: manifest.sigma2,
        snr_db: manifest.snr_db,
        rho: manifest.rho,
        seed: manifest.seed,
    };
    Ok((inst, manifest))
}

/// `cfg` with dimensions, sparsity and operator scope taken from a bundle.
pub fn config_for(cfg: &RunConfig, m: &Manifest) -> RunConfig {
    let per_column = m.operator.scope == OperatorScope::PerColumn;
    RunConfig {
        l: m.l,
        k: m.k,
        t: m.t,
        n: if per_column { m.n / m.t } else { m.n },
        rho: m.rho,
        snr_db: m.snr_db,
        operator_scope: m.operator.scope,
        ..cfg.clone()
    }
}

/// `‖A vec(SX)‖²`.
pub fn clean_energy(inst: &Instance) -> Result<f64> {
    Ok(inst.op.apply(&(&inst.s * &inst.x))?.norm_squared())
}
