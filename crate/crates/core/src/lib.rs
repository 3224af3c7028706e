//! Small-data binary image classification.
//!
//! The crate covers the whole pipeline for a two-class imaging study:
//!
//! - [`dataset`]: manifests, balanced sampling, holdout, stratified k-fold,
//!   and the `FVEC` frozen-feature file.
//! - [`imageio`]: decode, JPEG quality normalization, bilinear resize,
//!   horizontal-flip augmentation and tensor conversion.
//! - [`nn`]: layers with analytic backward passes, the small CNN and the
//!   transfer-learning head.
//! - [`optim`]: binary cross-entropy, triangular cyclic learning rate,
//!   RMSprop and the epoch loop that checkpoints every epoch.
//! - [`snapshot`]: `SNAP` checkpoints, snapshot selection and averaged
//!   ensemble prediction.
//! - [`metrics`]: confusion statistics, ROC/AUC and the cross-validation
//!   driver.
//!
//! Data-parallel loops go through [`exec`], which uses rayon when the
//! `parallel` feature is enabled (the default). Results do not depend on the
//! thread count.

pub mod dataset;
pub mod error;
pub mod exec;
pub mod gradcheck;
pub mod imageio;
pub mod metrics;
pub mod nn;
pub mod optim;
pub mod snapshot;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::{Scalar, Tensor, TensorF32};

use std::io::Write;
use std::path::Path;

/// Write `bytes` to a sibling temp file, then rename over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    let name = path.file_name().ok_or_else(|| Error::Argument(format!("{} has no file name", path.display())))?;
    let tmp = dir.join(format!(".{}.tmp", name.to_string_lossy()));
    let mut f = std::fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    f.write_all(bytes).map_err(|e| Error::io(&tmp, e))?;
    f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    drop(f);
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

/// Lowercase hex SHA-256 of `bytes`, truncated to `len` characters.
pub fn hex_digest(bytes: &[u8], len: usize) -> String {
    use sha2::{Digest, Sha256};
    let digest = Sha256::digest(bytes);
    let mut s = String::with_capacity(64);
    for b in digest.iter() {
        s.push_str(&format!("{b:02x}"));
    }
    s.truncate(len);
    s
}

/// Round every non-integer number to 6 significant digits and pretty-print.
/// Used for all JSON reports so reruns are byte-identical.
pub fn canonical_json(value: &serde_json::Value) -> String {
    fn walk(v: &serde_json::Value) -> serde_json::Value {
        use serde_json::Value;
        match v {
            Value::Number(n) if n.is_f64() => {
                let x = n.as_f64().expect("f64 number");
                let rounded: f64 = format!("{x:.5e}").parse().expect("formatted float parses");
                serde_json::Number::from_f64(rounded).map_or(Value::Null, Value::Number)
            }
            Value::Array(xs) => Value::Array(xs.iter().map(walk).collect()),
            Value::Object(map) => Value::Object(map.iter().map(|(k, v)| (k.clone(), walk(v))).collect()),
            other => other.clone(),
        }
    }
    let mut s = serde_json::to_string_pretty(&walk(value)).expect("json value serializes");
    s.push('\n');
    s
}
