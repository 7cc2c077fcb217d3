//! Checkpoint directories: one PTNS file per tensor plus `manifest.txt`.
//!
//! Manifest lines:
//! ```text
//! arch <sha256 hex>
//! classes <K>
//! param <name> <d0,d1,...>
//! running <layer> <channels>
//! ```

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use sha2::{Digest, Sha256};

use super::{RunningStats, SegNet};
use crate::error::{Error, Result};
use crate::tensor::{ptns, Tensor};

pub const MANIFEST: &str = "manifest.txt";

fn shape_str(shape: &[usize]) -> String {
    shape.iter().map(|d| d.to_string()).collect::<Vec<_>>().join(",")
}

/// Digest of parameter names and shapes for a class count.
pub fn architecture_hash(classes: usize) -> Result<String> {
    let net = SegNet::new(classes, 0)?;
    let mut desc = String::new();
    for (n, p) in net.param_names().iter().zip(net.params()) {
        let _ = writeln!(desc, "{n}:{}", shape_str(p.shape()));
    }
    for r in net.running_stats() {
        let _ = writeln!(desc, "{}:{}", r.name, r.mean.len());
    }
    Ok(hex::encode(Sha256::digest(desc.as_bytes())))
}

pub fn save_checkpoint(net: &SegNet, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    let mut manifest = format!("arch {}\nclasses {}\n", architecture_hash(net.classes())?, net.classes());
    for (n, p) in net.param_names().iter().zip(net.params()) {
        ptns::write_tensor(dir.join(format!("{n}.ptns")), p)?;
        let _ = writeln!(manifest, "param {n} {}", shape_str(p.shape()));
    }
    for r in net.running_stats() {
        let c = r.mean.len();
        ptns::write_tensor(
            dir.join(format!("{}.running_mean.ptns", r.name)),
            &Tensor::new(vec![c], r.mean.clone())?,
        )?;
        ptns::write_tensor(
            dir.join(format!("{}.running_var.ptns", r.name)),
            &Tensor::new(vec![c], r.var.clone())?,
        )?;
        let _ = writeln!(manifest, "running {} {c}", r.name);
    }
    fs::write(dir.join(MANIFEST), manifest)?;
    Ok(())
}

pub fn load_checkpoint(dir: impl AsRef<Path>) -> Result<SegNet> {
    let dir = dir.as_ref();
    let text = fs::read_to_string(dir.join(MANIFEST))?;
    let mut arch = None;
    let mut classes = None;
    let mut names = Vec::new();
    let mut params = Vec::new();
    let mut running = Vec::new();
    for line in text.lines().filter(|l| !l.trim().is_empty()) {
        let fields: Vec<&str> = line.split_whitespace().collect();
        match fields.as_slice() {
            ["arch", h] => arch = Some(h.to_string()),
            ["classes", k] => {
                classes = Some(k.parse::<usize>().map_err(|_| Error::Format(format!("bad class count '{k}'")))?)
            }
            ["param", name, shape] => {
                let t = ptns::read_tensor(dir.join(format!("{name}.ptns")))?;
                if shape_str(t.shape()) != *shape {
                    return Err(Error::Format(format!("{name}: file shape {:?} vs manifest {shape}", t.shape())));
                }
                names.push(name.to_string());
                params.push(t);
            }
            ["running", name, _] => {
                let mean = ptns::read_tensor(dir.join(format!("{name}.running_mean.ptns")))?;
                let var = ptns::read_tensor(dir.join(format!("{name}.running_var.ptns")))?;
                running.push(RunningStats {
                    name: name.to_string(),
                    mean: mean.into_data(),
                    var: var.into_data(),
                });
            }
            _ => return Err(Error::Format(format!("unrecognized manifest line '{line}'"))),
        }
    }
    let classes = classes.ok_or_else(|| Error::Format("manifest lacks a class count".into()))?;
    let expected = architecture_hash(classes)?;
    if arch.as_deref() != Some(expected.as_str()) {
        return Err(Error::Format("architecture hash does not match this build".into()));
    }
    SegNet::from_parts(classes, names, params, running)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let mut net = SegNet::new(5, 11).unwrap();
        net.apply_bn_updates(&[super::super::BnUpdate {
            layer: 2,
            mean: vec![0.3; 32],
            var: vec![2.0; 32],
        }]);
        save_checkpoint(&net, dir.path()).unwrap();
        let back = load_checkpoint(dir.path()).unwrap();
        assert_eq!(back, net);
    }

    #[test]
    fn hash_depends_on_classes() {
        assert_ne!(architecture_hash(4).unwrap(), architecture_hash(8).unwrap());
    }
}
