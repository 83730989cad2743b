//! Checkpoint surgery: foreign-layout conversion (rename / qkv split /
//! transpose), layer-subset selection, and the embeddings-only reduction.

use std::path::Path;

use crate::archive::{ArchiveEntry, SourceFamily, TensorArchive};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub enum Rule {
    /// Rename entries matching `from` (one `*` wildcard) to `to`.
    Rename { from: String, to: String },
    /// Split one fused qkv tensor into `<name>/q`, `<name>/k`, `<name>/v`
    /// along the given axis.
    Split3 { name: String, axis: usize },
    /// Inverse of `Split3`: concatenate `<base>/{q,k,v}` back into `<base>`.
    Merge3 { base: String, axis: usize },
    /// Transpose 2-d entries matching the glob, unless marked skipped.
    Transpose { glob: String },
    /// Exempt matching entries from later transpose rules.
    Skip { glob: String },
}

#[derive(Debug, Clone, Default)]
pub struct MappingRules {
    pub rules: Vec<Rule>,
}

#[derive(Debug)]
pub struct ConversionReport {
    pub archive: TensorArchive,
    /// Entry names never touched by any rule.
    pub unmatched: Vec<String>,
}

/// Glob match with `*` wildcards.
pub fn glob_match(pattern: &str, name: &str) -> bool {
    fn rec(p: &[u8], n: &[u8]) -> bool {
        match (p.first(), n.first()) {
            (None, None) => true,
            (Some(b'*'), _) => {
                rec(&p[1..], n) || (!n.is_empty() && rec(p, &n[1..]))
            }
            (Some(pc), Some(nc)) if pc == nc => rec(&p[1..], &n[1..]),
            _ => false,
        }
    }
    rec(pattern.as_bytes(), name.as_bytes())
}

/// Rename through a single-`*` pattern pair; returns None when `name`
/// does not match `from`.
fn rename_match(from: &str, to: &str, name: &str) -> Option<String> {
    match from.find('*') {
        None => {
            if name == from {
                Some(to.to_string())
            } else {
                None
            }
        }
        Some(star) => {
            let (pre, post) = (&from[..star], &from[star + 1..]);
            if name.len() >= pre.len() + post.len()
                && name.starts_with(pre)
                && name.ends_with(post)
            {
                let capture = &name[pre.len()..name.len() - post.len()];
                Some(to.replacen('*', capture, 1))
            } else {
                None
            }
        }
    }
}

fn transpose_entry(e: &ArchiveEntry) -> Result<ArchiveEntry> {
    if e.shape.len() != 2 {
        return Err(Error::Rule(format!(
            "transpose needs a 2-d tensor, {:?} has shape {:?}",
            e.name, e.shape
        )));
    }
    let (m, n) = (e.shape[0], e.shape[1]);
    let mut data = vec![0.0f32; m * n];
    for i in 0..m {
        for j in 0..n {
            data[j * m + i] = e.data[i * n + j];
        }
    }
    ArchiveEntry::new(e.name.clone(), vec![n, m], data)
}

fn split3_entry(e: &ArchiveEntry, axis: usize) -> Result<[ArchiveEntry; 3]> {
    if axis >= e.shape.len() {
        return Err(Error::Rule(format!(
            "split3 axis {axis} out of range for shape {:?}",
            e.shape
        )));
    }
    if e.shape[axis] % 3 != 0 {
        return Err(Error::Rule(format!(
            "split3 on {:?}: axis {axis} extent {} not divisible by 3",
            e.name, e.shape[axis]
        )));
    }
    let part = e.shape[axis] / 3;
    let mut out_shape = e.shape.clone();
    out_shape[axis] = part;

    // row-major walk: outer = product of dims before axis, inner = after
    let outer: usize = e.shape[..axis].iter().product();
    let inner: usize = e.shape[axis + 1..].iter().product();
    let mut parts = vec![Vec::with_capacity(outer * part * inner); 3];
    for o in 0..outer {
        for a in 0..e.shape[axis] {
            let src = (o * e.shape[axis] + a) * inner;
            parts[a / part].extend_from_slice(&e.data[src..src + inner]);
        }
    }
    let suffix = ["q", "k", "v"];
    let mut out = Vec::with_capacity(3);
    for (i, data) in parts.into_iter().enumerate() {
        out.push(ArchiveEntry::new(
            format!("{}/{}", e.name, suffix[i]),
            out_shape.clone(),
            data,
        )?);
    }
    Ok([out.remove(0), out.remove(0), out.remove(0)])
}

fn merge3_entries(parts: [&ArchiveEntry; 3], base: &str, axis: usize) -> Result<ArchiveEntry> {
    let shape = &parts[0].shape;
    if parts.iter().any(|p| &p.shape != shape) {
        return Err(Error::Rule(format!("merge3 {base:?}: part shapes differ")));
    }
    if axis >= shape.len() {
        return Err(Error::Rule(format!(
            "merge3 axis {axis} out of range for shape {shape:?}"
        )));
    }
    let mut out_shape = shape.clone();
    out_shape[axis] = shape[axis] * 3;
    let outer: usize = shape[..axis].iter().product();
    let inner: usize = shape[axis + 1..].iter().product();
    let chunk = shape[axis] * inner;
    let mut data = Vec::with_capacity(outer * chunk * 3);
    for o in 0..outer {
        for p in parts.iter() {
            data.extend_from_slice(&p.data[o * chunk..(o + 1) * chunk]);
        }
    }
    ArchiveEntry::new(base.to_string(), out_shape, data)
}

/// Apply an ordered rule set to an archive. Embedding matrices are never
/// transposed implicitly: protect them with `skip` rules.
pub fn convert_foreign(archive: &TensorArchive, rules: &MappingRules) -> Result<ConversionReport> {
    struct Slot {
        entry: ArchiveEntry,
        touched: bool,
        skip_transpose: bool,
    }
    let mut slots: Vec<Slot> = archive
        .entries()
        .iter()
        .map(|e| Slot {
            entry: e.clone(),
            touched: false,
            skip_transpose: false,
        })
        .collect();

    for rule in &rules.rules {
        match rule {
            Rule::Rename { from, to } => {
                for s in slots.iter_mut() {
                    if let Some(new_name) = rename_match(from, to, &s.entry.name) {
                        s.entry.name = new_name;
                        s.touched = true;
                    }
                }
            }
            Rule::Skip { glob } => {
                for s in slots.iter_mut() {
                    if glob_match(glob, &s.entry.name) {
                        s.skip_transpose = true;
                        s.touched = true;
                    }
                }
            }
            Rule::Transpose { glob } => {
                for s in slots.iter_mut() {
                    if glob_match(glob, &s.entry.name) && !s.skip_transpose {
                        s.entry = transpose_entry(&s.entry)?;
                        s.touched = true;
                    }
                }
            }
            Rule::Split3 { name, axis } => {
                let idx = slots
                    .iter()
                    .position(|s| s.entry.name == *name)
                    .ok_or_else(|| Error::Rule(format!("split3: no tensor named {name:?}")))?;
                let skip = slots[idx].skip_transpose;
                let [q, k, v] = split3_entry(&slots[idx].entry, *axis)?;
                slots[idx] = Slot {
                    entry: q,
                    touched: true,
                    skip_transpose: skip,
                };
                slots.insert(
                    idx + 1,
                    Slot {
                        entry: k,
                        touched: true,
                        skip_transpose: skip,
                    },
                );
                slots.insert(
                    idx + 2,
                    Slot {
                        entry: v,
                        touched: true,
                        skip_transpose: skip,
                    },
                );
            }
            Rule::Merge3 { base, axis } => {
                let find = |suffix: &str| -> Result<usize> {
                    let want = format!("{base}/{suffix}");
                    slots
                        .iter()
                        .position(|s| s.entry.name == want)
                        .ok_or_else(|| Error::Rule(format!("merge3: no tensor named {want:?}")))
                };
                let (qi, ki, vi) = (find("q")?, find("k")?, find("v")?);
                let merged = merge3_entries(
                    [&slots[qi].entry, &slots[ki].entry, &slots[vi].entry],
                    base,
                    *axis,
                )?;
                let skip = slots[qi].skip_transpose;
                // merged tensor takes the earliest of the three positions;
                // drop the other two from the back so indices stay valid
                let mut indices = [qi, ki, vi];
                indices.sort_unstable();
                let pos = indices[0];
                for &i in indices[1..].iter().rev() {
                    slots.remove(i);
                }
                slots[pos] = Slot {
                    entry: merged,
                    touched: true,
                    skip_transpose: skip,
                };
            }
        }
    }

    let unmatched: Vec<String> = slots
        .iter()
        .filter(|s| !s.touched)
        .map(|s| s.entry.name.clone())
        .collect();
    let mut out = TensorArchive::new(archive.family);
    for s in slots {
        out.push(s.entry)?;
    }
    Ok(ConversionReport {
        archive: out,
        unmatched,
    })
}

impl MappingRules {
    /// Parse the rules file format: one rule per line, `#` comments.
    ///
    /// ```text
    /// rename <from> <to>
    /// split3 <name> axis=<k>
    /// merge3 <base> axis=<k>
    /// transpose <glob>
    /// skip <glob>
    /// ```
    pub fn parse(text: &str) -> Result<Self> {
        let mut rules = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let mut parts = line.split_whitespace();
            let verb = parts.next().unwrap();
            let bad = |msg: &str| Error::Rule(format!("line {}: {msg}", lineno + 1));
            let parse_axis = |tok: Option<&str>| -> Result<usize> {
                tok.and_then(|t| t.strip_prefix("axis="))
                    .and_then(|t| t.parse().ok())
                    .ok_or_else(|| bad("expected axis=<k>"))
            };
            match verb {
                "rename" => {
                    let from = parts.next().ok_or_else(|| bad("rename needs <from>"))?;
                    let to = parts.next().ok_or_else(|| bad("rename needs <to>"))?;
                    rules.push(Rule::Rename {
                        from: from.to_string(),
                        to: to.to_string(),
                    });
                }
                "split3" => {
                    let name = parts.next().ok_or_else(|| bad("split3 needs <name>"))?;
                    let axis = parse_axis(parts.next())?;
                    rules.push(Rule::Split3 {
                        name: name.to_string(),
                        axis,
                    });
                }
                "merge3" => {
                    let base = parts.next().ok_or_else(|| bad("merge3 needs <base>"))?;
                    let axis = parse_axis(parts.next())?;
                    rules.push(Rule::Merge3 {
                        base: base.to_string(),
                        axis,
                    });
                }
                "transpose" => {
                    let glob = parts.next().ok_or_else(|| bad("transpose needs <glob>"))?;
                    rules.push(Rule::Transpose {
                        glob: glob.to_string(),
                    });
                }
                "skip" => {
                    let glob = parts.next().ok_or_else(|| bad("skip needs <glob>"))?;
                    rules.push(Rule::Skip {
                        glob: glob.to_string(),
                    });
                }
                other => return Err(bad(&format!("unknown rule verb {other:?}"))),
            }
        }
        Ok(MappingRules { rules })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::parse(&text)
    }
}

fn layer_name_parts(name: &str) -> Option<(&str, usize, &str)> {
    let idx = name.find("/layer_")?;
    let stack = &name[..idx];
    let rest = &name[idx + "/layer_".len()..];
    let slash = rest.find('/')?;
    let layer: usize = rest[..slash].parse().ok()?;
    Some((stack, layer, &rest[slash + 1..]))
}

/// New archive where target layer `i` holds source layer `source_layers[i]`
/// (1-based indices). Non-layer tensors pass through unchanged.
pub fn select_layer_subset(
    archive: &TensorArchive,
    source_layers: &[usize],
) -> Result<TensorArchive> {
    let mut out = TensorArchive::new(archive.family);
    // pass-through first, preserving manifest order for non-layer tensors
    for e in archive.entries() {
        if layer_name_parts(&e.name).is_none() {
            out.push(e.clone())?;
        }
    }
    for (target, &src) in source_layers.iter().enumerate() {
        if src == 0 {
            return Err(Error::Selection("layer indices are 1-based".into()));
        }
        let src_idx = src - 1;
        let mut found = false;
        for e in archive.entries() {
            if let Some((stack, layer, rest)) = layer_name_parts(&e.name) {
                if layer == src_idx {
                    found = true;
                    let mut copy = e.clone();
                    copy.name = format!("{stack}/layer_{target}/{rest}");
                    out.push(copy)?;
                }
            }
        }
        if !found {
            return Err(Error::Selection(format!(
                "source layer {src} not present in archive"
            )));
        }
    }
    Ok(out)
}

/// Archive retaining only embedding tensors (token/positional/type tables
/// and the embedding layer-norm).
pub fn embeddings_only(archive: &TensorArchive) -> Result<TensorArchive> {
    let mut out = TensorArchive::new(archive.family);
    for e in archive.entries() {
        if e.name.starts_with("embed") {
            out.push(e.clone())?;
        }
    }
    if out.is_empty() {
        return Err(Error::Selection("archive contains no embedding tensors".into()));
    }
    Ok(out)
}

/// Convenience: a fresh archive built from (name, entry) pairs.
pub fn archive_from_entries(
    family: SourceFamily,
    entries: impl IntoIterator<Item = ArchiveEntry>,
) -> Result<TensorArchive> {
    let mut a = TensorArchive::new(family);
    for e in entries {
        a.push(e)?;
    }
    Ok(a)
}
