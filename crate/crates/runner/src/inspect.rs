use std::fmt::Write;
use std::path::Path;

use latentrl::numcore::Checkpoint;

use crate::error::Result;
use crate::pipeline::checkpoint_policy;

/// Human-readable description of a checkpoint file.
pub fn describe_checkpoint(path: &Path) -> Result<String> {
    let ckpt = Checkpoint::load(path)?;
    let mut out = String::new();
    let m = &ckpt.meta;
    let _ = writeln!(out, "checkpoint: {}", path.display());
    let _ = writeln!(out, "policy: {}", checkpoint_policy(&ckpt).unwrap_or("unknown"));
    let _ = writeln!(out, "step: {}", m.step);
    let _ = writeln!(out, "seed: {}", m.seed);
    let _ = writeln!(out, "parameters: {}", ckpt.params.len());
    let _ = writeln!(out, "optimizer steps: {}", ckpt.adam.step);
    for s in m.layout.slices() {
        let r = s.range();
        let norm = ckpt.params.values[r.clone()].iter().map(|x| x * x).sum::<f64>().sqrt();
        let widths = m.widths.get(&s.name).map(|w| format!(" widths {w:?}")).unwrap_or_default();
        let _ = writeln!(out, "  {:<10} [{}..{}) norm {:.6}{}", s.name, r.start, r.end, norm, widths);
    }
    if let Some(v) = m.extra.get("code_version").and_then(|v| v.as_str()) {
        let _ = writeln!(out, "code version: {v}");
    }
    Ok(out)
}
