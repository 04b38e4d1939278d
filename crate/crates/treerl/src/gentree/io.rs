//! Line-delimited forest files.
//!
//! The first line is a header record, followed by one record per node. Floats
//! are written as 17-significant-digit decimal strings so surprisals survive a
//! round trip bit-for-bit.

use super::{GenForest, NodeId, Prompt, SegmentNode, TokenRecord};
use crate::textfmt::{format_f64, parse_f64};
use serde::{Deserialize, Serialize};
use std::io::{BufRead, Write};

pub const FOREST_FORMAT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
enum Record {
    Header {
        version: u32,
        prompt: Prompt,
        m: usize,
        roots: Vec<u32>,
        mask_tail_fraction: String,
        #[serde(default)]
        config: serde_json::Value,
    },
    Node {
        node_id: u32,
        parent: Option<u32>,
        children: Vec<u32>,
        token_ids: Vec<u32>,
        surprisals: Vec<String>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        texts: Option<Vec<Option<String>>>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        entropies: Option<Vec<String>>,
        terminal: bool,
        correct: Option<bool>,
        gen_offset: usize,
        gen_len: usize,
    },
}

/// A parsed forest file: the forest plus the run configuration stored with it.
#[derive(Clone, Debug, PartialEq)]
pub struct ForestFile {
    pub forest: GenForest,
    pub config: serde_json::Value,
}

#[derive(Debug, thiserror::Error)]
pub enum ForestIoError {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
}

fn to_raw(id: NodeId) -> Option<u32> {
    (!id.is_virtual()).then_some(id.0)
}

pub fn write_forest<W: Write>(
    forest: &GenForest,
    config: &serde_json::Value,
    mut out: W,
) -> std::io::Result<()> {
    let header = Record::Header {
        version: FOREST_FORMAT_VERSION,
        prompt: forest.prompt().clone(),
        m: forest.num_trees(),
        roots: forest.roots().iter().map(|r| r.0).collect(),
        mask_tail_fraction: format_f64(forest.mask_tail_fraction()),
        config: config.clone(),
    };
    serde_json::to_writer(&mut out, &header)?;
    out.write_all(b"\n")?;
    for node in forest.nodes() {
        let has_text = node.tokens.iter().any(|t| t.text.is_some());
        let has_entropy = node.tokens.iter().all(|t| t.entropy.is_some()) && !node.tokens.is_empty();
        let rec = Record::Node {
            node_id: node.id.0,
            parent: to_raw(node.parent),
            children: node.children.iter().map(|c| c.0).collect(),
            token_ids: node.tokens.iter().map(|t| t.token_id).collect(),
            surprisals: node.tokens.iter().map(|t| format_f64(t.surprisal)).collect(),
            texts: has_text.then(|| node.tokens.iter().map(|t| t.text.clone()).collect()),
            entropies: has_entropy
                .then(|| node.tokens.iter().map(|t| format_f64(t.entropy.unwrap_or(0.0))).collect()),
            terminal: node.terminal,
            correct: node.correct,
            gen_offset: node.gen_offset,
            gen_len: node.gen_len,
        };
        serde_json::to_writer(&mut out, &rec)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

/// Parse a forest file. The result is not validated.
pub fn read_forest<R: BufRead>(input: R) -> Result<ForestFile, ForestIoError> {
    let mut header = None;
    let mut nodes = Vec::new();
    for (i, line) in input.lines().enumerate() {
        let line = line?;
        let lineno = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let err = |message: String| ForestIoError::Parse { line: lineno, message };
        let rec: Record = serde_json::from_str(&line).map_err(|e| err(e.to_string()))?;
        match rec {
            Record::Header { version, prompt, roots, mask_tail_fraction, config, .. } => {
                if version != FOREST_FORMAT_VERSION {
                    return Err(err(format!("unsupported forest format version {version}")));
                }
                if header.is_some() {
                    return Err(err("duplicate header".into()));
                }
                let mask = parse_f64(&mask_tail_fraction).map_err(err)?;
                header = Some((prompt, roots, mask, config));
            }
            Record::Node {
                node_id,
                parent,
                children,
                token_ids,
                surprisals,
                texts,
                entropies,
                terminal,
                correct,
                gen_offset,
                gen_len,
            } => {
                if header.is_none() {
                    return Err(err("node record before header".into()));
                }
                if surprisals.len() != token_ids.len()
                    || texts.as_ref().is_some_and(|t| t.len() != token_ids.len())
                    || entropies.as_ref().is_some_and(|t| t.len() != token_ids.len())
                {
                    return Err(err("token field lengths disagree".into()));
                }
                let mut tokens = Vec::with_capacity(token_ids.len());
                for (j, (id, s)) in token_ids.iter().zip(&surprisals).enumerate() {
                    tokens.push(TokenRecord {
                        token_id: *id,
                        surprisal: parse_f64(s).map_err(err)?,
                        text: texts.as_ref().and_then(|t| t[j].clone()),
                        entropy: match &entropies {
                            Some(e) => Some(parse_f64(&e[j]).map_err(err)?),
                            None => None,
                        },
                    });
                }
                nodes.push(SegmentNode {
                    id: NodeId(node_id),
                    parent: parent.map(NodeId).unwrap_or(NodeId::VIRTUAL_ROOT),
                    tokens,
                    children: children.into_iter().map(NodeId).collect(),
                    terminal,
                    correct,
                    gen_offset,
                    gen_len,
                });
            }
        }
    }
    let (prompt, roots, mask, config) =
        header.ok_or(ForestIoError::Parse { line: 0, message: "missing header".into() })?;
    nodes.sort_by_key(|n| n.id);
    let forest = GenForest::from_parts(prompt, roots.into_iter().map(NodeId).collect(), nodes, mask);
    Ok(ForestFile { forest, config })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gentree::ForkPoint;

    #[test]
    fn round_trip_is_bit_exact() {
        let prompt = Prompt { id: "p0".into(), tokens: vec![1, 2, 3], text: "1+2=".into() };
        let mut f = GenForest::with_mask(prompt, 0.2);
        let toks: Vec<TokenRecord> = (0..8)
            .map(|i| TokenRecord::new(i, (i as f64 + 0.1).ln_1p() / 3.0))
            .collect();
        let root = f.add_root_chain(toks.clone(), true, Some(true)).unwrap();
        let mut branch = toks[..3].to_vec();
        branch[0].text = Some("x".into());
        let p = ForkPoint { tree_index: 0, node_id: root, token_offset: 2, surprisal: 0.0 };
        f.fork(&p, branch, true, Some(false)).unwrap();

        let config = serde_json::json!({"m": 1});
        let mut buf = Vec::new();
        write_forest(&f, &config, &mut buf).unwrap();
        let back = read_forest(&buf[..]).unwrap();
        assert_eq!(back.forest, f);
        assert_eq!(back.config, config);
        for (a, b) in f.nodes().iter().zip(back.forest.nodes()) {
            for (x, y) in a.tokens.iter().zip(&b.tokens) {
                assert_eq!(x.surprisal.to_bits(), y.surprisal.to_bits());
            }
        }
    }

    #[test]
    fn rejects_missing_header() {
        let line = br#"{"kind":"node","node_id":0,"parent":null,"children":[],"token_ids":[1],"surprisals":["0"],"terminal":true,"correct":true,"gen_offset":0,"gen_len":1}"#;
        assert!(read_forest(&line[..]).is_err());
    }
}
