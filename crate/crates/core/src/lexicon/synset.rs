//! Synset graph with path-based similarity.
//!
//! The on-disk format is one synset per line:
//! `synset_id<TAB>lemma1,lemma2,...<TAB>parent_synset_id`, with `-` as the
//! parent of the single root. To project a standard lexical database into
//! this format, emit every noun synset with its lemma names (underscores kept,
//! lowercased) and its first hypernym as the parent; synsets with no hypernym
//! hang off the chosen root.

use std::collections::{HashMap, HashSet, VecDeque};
use std::path::Path;

use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub struct SynsetGraph {
    ids: Vec<String>,
    lemma_index: HashMap<String, Vec<usize>>,
    neighbours: Vec<Vec<usize>>,
    depth: Vec<usize>,
    root: usize,
}

impl SynsetGraph {
    pub fn parse(text: &str) -> Result<Self> {
        let mut ids = Vec::new();
        let mut pos: HashMap<String, usize> = HashMap::new();
        let mut lemmas = Vec::new();
        let mut parents = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim_end_matches('\r');
            if line.trim().is_empty() || line.starts_with('#') {
                continue;
            }
            let fields: Vec<&str> = line.split('\t').collect();
            if fields.len() != 3 || fields[0].is_empty() {
                return Err(Error::Schema(format!(
                    "synset line {}: expected 3 tab-separated fields",
                    lineno + 1
                )));
            }
            if pos.insert(fields[0].to_string(), ids.len()).is_some() {
                return Err(Error::Schema(format!("duplicate synset {}", fields[0])));
            }
            ids.push(fields[0].to_string());
            let names: Vec<String> = fields[1]
                .split(',')
                .map(|l| l.trim().to_lowercase())
                .filter(|l| !l.is_empty())
                .collect();
            if names.is_empty() {
                return Err(Error::Schema(format!("synset {} has no lemmas", fields[0])));
            }
            lemmas.push(names);
            parents.push(fields[2].to_string());
        }

        let mut root = None;
        let mut neighbours = vec![Vec::new(); ids.len()];
        for (child, parent) in parents.iter().enumerate() {
            if parent == "-" || parent.is_empty() {
                if root.replace(child).is_some() {
                    return Err(Error::Schema("synset graph has more than one root".into()));
                }
                continue;
            }
            let p = *pos
                .get(parent)
                .ok_or_else(|| Error::Schema(format!("unknown parent synset {parent}")))?;
            neighbours[child].push(p);
            neighbours[p].push(child);
        }
        let root = root.ok_or_else(|| Error::Schema("synset graph has no root".into()))?;

        let depth = bfs_distances(&neighbours, &[root]);
        if let Some(orphan) = depth.iter().position(|&d| d == usize::MAX) {
            return Err(Error::Schema(format!(
                "synset {} is not reachable from the root",
                ids[orphan]
            )));
        }

        let mut lemma_index: HashMap<String, Vec<usize>> = HashMap::new();
        for (node, names) in lemmas.into_iter().enumerate() {
            for name in names {
                let entry = lemma_index.entry(name).or_default();
                if !entry.contains(&node) {
                    entry.push(node);
                }
            }
        }

        Ok(SynsetGraph {
            ids,
            lemma_index,
            neighbours,
            depth,
            root,
        })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn root(&self) -> &str {
        &self.ids[self.root]
    }

    pub fn depth(&self, synset: &str) -> Option<usize> {
        self.ids.iter().position(|s| s == synset).map(|i| self.depth[i])
    }

    pub fn contains_lemma(&self, lemma: &str) -> bool {
        self.lemma_index.contains_key(lemma)
    }

    pub fn lemmas(&self) -> impl Iterator<Item = &str> {
        self.lemma_index.keys().map(String::as_str)
    }

    /// Length of the shortest undirected path between any synset of `a` and
    /// any synset of `b`.
    pub fn path_length(&self, a: &str, b: &str) -> Option<usize> {
        let sources = self.lemma_index.get(a)?;
        let targets: HashSet<usize> = self.lemma_index.get(b)?.iter().copied().collect();
        let mut seen = vec![false; self.ids.len()];
        let mut queue = VecDeque::new();
        for &s in sources {
            seen[s] = true;
            queue.push_back((s, 0));
        }
        while let Some((node, dist)) = queue.pop_front() {
            if targets.contains(&node) {
                return Some(dist);
            }
            for &n in &self.neighbours[node] {
                if !seen[n] {
                    seen[n] = true;
                    queue.push_back((n, dist + 1));
                }
            }
        }
        None
    }

    /// Path similarity `1 / (1 + shortest path)`, 0 when either lemma is absent.
    pub fn similarity(&self, a: &str, b: &str) -> f64 {
        self.path_length(a, b)
            .map_or(0.0, |len| 1.0 / (1.0 + len as f64))
    }
}

fn bfs_distances(neighbours: &[Vec<usize>], sources: &[usize]) -> Vec<usize> {
    let mut dist = vec![usize::MAX; neighbours.len()];
    let mut queue = VecDeque::new();
    for &s in sources {
        dist[s] = 0;
        queue.push_back(s);
    }
    while let Some(node) = queue.pop_front() {
        for &n in &neighbours[node] {
            if dist[n] == usize::MAX {
                dist[n] = dist[node] + 1;
                queue.push_back(n);
            }
        }
    }
    dist
}
