//! On-disk benchmark layout: `<split>/<stem>.{image,label}.ptns` (target
//! splits add `<stem>.clean.ptns`) indexed by `manifest.txt`.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::pseudo::PseudoLabel;
use crate::synth::{Benchmark, TargetSample};
use crate::tensor::ptns::{self, LabelArray};
use crate::tensor::Tensor;

pub const MANIFEST: &str = "manifest.txt";
const SPLITS: [&str; 4] = ["source", "source_holdout", "target_train", "target_test"];

fn write_label(path: &Path, l: &PseudoLabel) -> Result<()> {
    ptns::write_labels(
        path,
        &LabelArray {
            shape: vec![l.h, l.w],
            data: l.data.clone(),
        },
    )
}

fn read_label(path: &Path, k: usize) -> Result<PseudoLabel> {
    let a = ptns::read_labels(path)?;
    match a.shape.as_slice() {
        &[h, w] => PseudoLabel::new(h, w, k, a.data),
        s => Err(Error::Format(format!("{}: label map must be 2-D, got {s:?}", path.display()))),
    }
}

pub fn save_benchmark(bench: &Benchmark, classes: usize, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    let mut manifest = format!("classes {classes}\n");
    let pinhole = [&bench.source, &bench.source_holdout];
    for (split, items) in SPLITS[..2].iter().zip(pinhole) {
        fs::create_dir_all(dir.join(split))?;
        for (i, (x, l)) in items.iter().enumerate() {
            let stem = format!("{i:05}");
            ptns::write_tensor(dir.join(split).join(format!("{stem}.image.ptns")), x)?;
            write_label(&dir.join(split).join(format!("{stem}.label.ptns")), l)?;
            let _ = writeln!(manifest, "{split} {stem}");
        }
    }
    let target = [&bench.target_train, &bench.target_test];
    for (split, items) in SPLITS[2..].iter().zip(target) {
        fs::create_dir_all(dir.join(split))?;
        for (i, s) in items.iter().enumerate() {
            let stem = format!("{i:05}");
            ptns::write_tensor(dir.join(split).join(format!("{stem}.image.ptns")), &s.image)?;
            ptns::write_tensor(dir.join(split).join(format!("{stem}.clean.ptns")), &s.clean)?;
            write_label(&dir.join(split).join(format!("{stem}.label.ptns")), &s.labels)?;
            let _ = writeln!(manifest, "{split} {stem}");
        }
    }
    fs::write(dir.join(MANIFEST), manifest)?;
    Ok(())
}

/// Returns the benchmark and its class count.
pub fn load_benchmark(dir: impl AsRef<Path>) -> Result<(Benchmark, usize)> {
    let dir = dir.as_ref();
    let text = fs::read_to_string(dir.join(MANIFEST))?;
    let mut classes = None;
    let mut bench = Benchmark {
        source: Vec::new(),
        source_holdout: Vec::new(),
        target_train: Vec::new(),
        target_test: Vec::new(),
    };
    for line in text.lines().filter(|l| !l.trim().is_empty()) {
        let fields: Vec<&str> = line.split_whitespace().collect();
        let (split, stem) = match fields.as_slice() {
            ["classes", k] => {
                classes = Some(k.parse::<usize>().map_err(|_| Error::Format(format!("bad class count '{k}'")))?);
                continue;
            }
            [split, stem] => (*split, *stem),
            _ => return Err(Error::Format(format!("unrecognized manifest line '{line}'"))),
        };
        let k = classes.ok_or_else(|| Error::Format("class count must precede the samples".into()))?;
        let base = dir.join(split);
        let image = ptns::read_tensor(base.join(format!("{stem}.image.ptns")))?;
        let labels = read_label(&base.join(format!("{stem}.label.ptns")), k)?;
        match split {
            "source" => bench.source.push((image, labels)),
            "source_holdout" => bench.source_holdout.push((image, labels)),
            "target_train" | "target_test" => {
                let clean: Tensor = ptns::read_tensor(base.join(format!("{stem}.clean.ptns")))?;
                let s = TargetSample { image, clean, labels };
                if split == "target_train" {
                    bench.target_train.push(s)
                } else {
                    bench.target_test.push(s)
                }
            }
            _ => return Err(Error::Format(format!("unknown split '{split}'"))),
        }
    }
    let k = classes.ok_or_else(|| Error::Format("manifest lacks a class count".into()))?;
    Ok((bench, k))
}
