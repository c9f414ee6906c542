//! Cross-city signature comparison: dynamic-time-warping distances, the
//! pairwise distance matrix, average-linkage (UPGMA) hierarchical
//! clustering, and Newick serialization of the resulting dendrogram.

use std::io::Write;

use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::error::{Error, Result};
use crate::exec;
use crate::metrics::Signature;

/// Classic DTW distance with L1 local cost and no warping-window
/// constraint: the minimum over monotone alignments of the summed
/// per-step differences.
pub fn dtw_distance(a: &[f64], b: &[f64]) -> Result<f64> {
    dtw_distance_with_band(a, b, None)
}

/// DTW with an optional Sakoe-Chiba band: cells with `|i - j| > band` are
/// excluded from the alignment.
pub fn dtw_distance_with_band(a: &[f64], b: &[f64], band: Option<usize>) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::insufficient("dtw of an empty sequence"));
    }
    let (n, m) = (a.len(), b.len());
    let mut prev = vec![f64::INFINITY; m + 1];
    let mut curr = vec![f64::INFINITY; m + 1];
    prev[0] = 0.0;
    for i in 1..=n {
        curr[0] = f64::INFINITY;
        for j in 1..=m {
            if let Some(w) = band {
                if i.abs_diff(j) > w {
                    curr[j] = f64::INFINITY;
                    continue;
                }
            }
            let best = prev[j].min(curr[j - 1]).min(prev[j - 1]);
            curr[j] = (a[i - 1] - b[j - 1]).abs() + best;
        }
        std::mem::swap(&mut prev, &mut curr);
    }
    Ok(prev[m])
}

/// Symmetric pairwise DTW distances with a zero diagonal.
#[derive(Debug, Clone, PartialEq)]
pub struct DistanceMatrix {
    /// `"{city}_{class}"` per signature, in input order.
    pub labels: Vec<String>,
    pub values: Vec<Vec<f64>>,
}

impl DistanceMatrix {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[i][j]
    }

    /// Symmetry within `tol`, diagonal exactly zero, entries nonnegative.
    pub fn validate(&self, tol: f64) -> Result<()> {
        let n = self.len();
        for i in 0..n {
            if self.values[i].len() != n {
                return Err(Error::precondition("distance matrix is not square"));
            }
            if self.values[i][i] != 0.0 {
                return Err(Error::precondition("distance matrix diagonal must be zero"));
            }
            for j in 0..n {
                let v = self.values[i][j];
                if v.is_nan() || v < 0.0 {
                    return Err(Error::precondition("distances must be nonnegative"));
                }
                if (v - self.values[j][i]).abs() > tol {
                    return Err(Error::precondition("distance matrix must be symmetric"));
                }
            }
        }
        Ok(())
    }
}

/// Pairwise DTW over signatures. The upper triangle is computed (in
/// parallel under the `parallel` feature) and mirrored, so the matrix is
/// symmetric by construction.
pub fn distance_matrix(signatures: &[Signature], band: Option<usize>) -> Result<DistanceMatrix> {
    let pairs = upper_triangle_pairs(signatures)?;
    let cells = exec::map_collect(pairs.clone(), |(i, j)| pair_distance(signatures, band, i, j));
    Ok(assemble_matrix(signatures, &pairs, &cells))
}

/// Sequential twin of [`distance_matrix`].
pub fn distance_matrix_seq(signatures: &[Signature], band: Option<usize>) -> Result<DistanceMatrix> {
    let pairs = upper_triangle_pairs(signatures)?;
    let cells = exec::map_collect_seq(pairs.clone(), |(i, j)| pair_distance(signatures, band, i, j));
    Ok(assemble_matrix(signatures, &pairs, &cells))
}

fn upper_triangle_pairs(signatures: &[Signature]) -> Result<Vec<(usize, usize)>> {
    if signatures.len() < 2 {
        return Err(Error::insufficient(
            "distance matrix needs at least 2 signatures",
        ));
    }
    let n = signatures.len();
    let mut pairs = Vec::with_capacity(n * (n - 1) / 2);
    for i in 0..n {
        for j in (i + 1)..n {
            pairs.push((i, j));
        }
    }
    Ok(pairs)
}

fn pair_distance(signatures: &[Signature], band: Option<usize>, i: usize, j: usize) -> f64 {
    dtw_distance_with_band(&signatures[i].values, &signatures[j].values, band)
        .expect("signature vectors are nonempty")
}

fn assemble_matrix(
    signatures: &[Signature],
    pairs: &[(usize, usize)],
    cells: &[f64],
) -> DistanceMatrix {
    let n = signatures.len();
    let mut values = vec![vec![0.0; n]; n];
    for (&(i, j), &d) in pairs.iter().zip(cells) {
        values[i][j] = d;
        values[j][i] = d;
    }
    DistanceMatrix {
        labels: signatures.iter().map(Signature::label).collect(),
        values,
    }
}

/// One agglomeration step. Node ids: leaves are `0..n`, the k-th merge
/// creates node `n + k`. `left` holds the lexicographically smaller
/// minimum leaf label.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Merge {
    pub left: usize,
    pub right: usize,
    pub height: f64,
    pub size: usize,
}

/// Binary merge tree from agglomerative clustering.
#[derive(Debug, Clone, PartialEq)]
pub struct Dendrogram {
    pub labels: Vec<String>,
    pub merges: Vec<Merge>,
}

impl Dendrogram {
    pub fn leaf_count(&self) -> usize {
        self.labels.len()
    }

    /// Height of a node: zero for leaves, merge height otherwise.
    pub fn height(&self, node: usize) -> f64 {
        if node < self.labels.len() {
            0.0
        } else {
            self.merges[node - self.labels.len()].height
        }
    }

    /// Leaf label set of the subtree under `node`, sorted.
    pub fn leaves_under(&self, node: usize) -> Vec<&str> {
        let mut out = Vec::new();
        let mut stack = vec![node];
        while let Some(id) = stack.pop() {
            if id < self.labels.len() {
                out.push(self.labels[id].as_str());
            } else {
                let m = &self.merges[id - self.labels.len()];
                stack.push(m.left);
                stack.push(m.right);
            }
        }
        out.sort_unstable();
        out
    }

    /// Partition of the leaves obtained by cutting all merges with height
    /// strictly greater than `t`.
    pub fn cut(&self, t: f64) -> Vec<Vec<&str>> {
        let n = self.labels.len();
        let mut parent: Vec<usize> = (0..n + self.merges.len() + 1).collect();
        fn find(parent: &mut [usize], mut x: usize) -> usize {
            while parent[x] != x {
                parent[x] = parent[parent[x]];
                x = parent[x];
            }
            x
        }
        for (k, m) in self.merges.iter().enumerate() {
            if m.height <= t {
                let node = n + k;
                let l = find(&mut parent, m.left);
                let r = find(&mut parent, m.right);
                parent[l] = node;
                parent[r] = node;
            }
        }
        let mut groups: std::collections::BTreeMap<usize, Vec<&str>> = Default::default();
        for leaf in 0..n {
            groups
                .entry(find(&mut parent, leaf))
                .or_default()
                .push(self.labels[leaf].as_str());
        }
        groups
            .into_values()
            .map(|mut g| {
                g.sort_unstable();
                g
            })
            .collect()
    }
}

/// Average-linkage (UPGMA) agglomerative clustering: repeatedly merge the
/// pair of clusters at minimal linkage distance, where
/// `d(A∪B, C) = (|A|·d(A,C) + |B|·d(B,C)) / (|A| + |B|)`. Distance ties
/// break toward the lexicographically smallest pair of cluster labels
/// (each cluster is represented by its minimum leaf label).
pub fn agglomerative_cluster(matrix: &DistanceMatrix) -> Result<Dendrogram> {
    matrix.validate(1e-12)?;
    let n = matrix.len();
    if n < 2 {
        return Err(Error::insufficient("clustering needs at least 2 items"));
    }

    struct Active {
        node: usize,
        size: usize,
        min_label: String,
    }
    let mut active: Vec<Active> = (0..n)
        .map(|i| Active {
            node: i,
            size: 1,
            min_label: matrix.labels[i].clone(),
        })
        .collect();
    let mut dist: Vec<Vec<f64>> = matrix.values.clone();
    let mut merges: Vec<Merge> = Vec::with_capacity(n - 1);

    while active.len() > 1 {
        // locate the minimal pair under (distance, label pair)
        let mut best: Option<(f64, &str, &str, usize, usize)> = None;
        for i in 0..active.len() {
            for j in (i + 1)..active.len() {
                let d = dist[i][j];
                let (la, lb) = if active[i].min_label <= active[j].min_label {
                    (active[i].min_label.as_str(), active[j].min_label.as_str())
                } else {
                    (active[j].min_label.as_str(), active[i].min_label.as_str())
                };
                let candidate = (d, la, lb, i, j);
                best = match best {
                    None => Some(candidate),
                    Some(cur) => {
                        if (d, la, lb) < (cur.0, cur.1, cur.2) {
                            Some(candidate)
                        } else {
                            Some(cur)
                        }
                    }
                };
            }
        }
        let (height, _, _, i, j) = best.expect("at least one pair");

        let (size_i, size_j) = (active[i].size, active[j].size);
        let merged_size = size_i + size_j;
        // Lance-Williams update for average linkage, written into row/col i
        for k in 0..active.len() {
            if k == i || k == j {
                continue;
            }
            let d = (size_i as f64 * dist[i][k] + size_j as f64 * dist[j][k]) / merged_size as f64;
            dist[i][k] = d;
            dist[k][i] = d;
        }

        let node = n + merges.len();
        let (left, right) = if active[i].min_label <= active[j].min_label {
            (active[i].node, active[j].node)
        } else {
            (active[j].node, active[i].node)
        };
        let min_label = if active[i].min_label <= active[j].min_label {
            active[i].min_label.clone()
        } else {
            active[j].min_label.clone()
        };
        merges.push(Merge {
            left,
            right,
            height,
            size: merged_size,
        });

        active[i] = Active {
            node,
            size: merged_size,
            min_label,
        };
        active.swap_remove(j);
        let last = active.len();
        if j < last {
            // swap_remove moved the last row/col into slot j
            for k in 0..=last {
                dist[k][j] = dist[k][last];
            }
            dist[j] = std::mem::take(&mut dist[last]);
            dist[j][j] = 0.0;
        }
        dist.truncate(last);
        for row in dist.iter_mut() {
            row.truncate(last);
        }
    }

    Ok(Dendrogram {
        labels: matrix.labels.clone(),
        merges,
    })
}

fn fmt_branch(v: f64) -> String {
    format!("{v}")
}

/// Serialize as Newick with branch lengths derived from merge heights
/// (leaf branch = parent height; internal branch = parent − own height).
/// Child order is deterministic: left = smaller minimum leaf label.
pub fn dendrogram_to_newick(tree: &Dendrogram) -> String {
    fn emit(tree: &Dendrogram, node: usize, out: &mut String) {
        if node < tree.labels.len() {
            out.push_str(&tree.labels[node]);
        } else {
            let m = &tree.merges[node - tree.labels.len()];
            out.push('(');
            emit(tree, m.left, out);
            out.push(':');
            out.push_str(&fmt_branch(m.height - tree.height(m.left)));
            out.push(',');
            emit(tree, m.right, out);
            out.push(':');
            out.push_str(&fmt_branch(m.height - tree.height(m.right)));
            out.push(')');
        }
    }
    let mut out = String::new();
    if tree.merges.is_empty() {
        if let Some(label) = tree.labels.first() {
            out.push_str(label);
        }
    } else {
        let root = tree.labels.len() + tree.merges.len() - 1;
        emit(tree, root, &mut out);
    }
    out.push(';');
    out
}

/// A node of a parsed Newick tree.
#[derive(Debug, Clone, PartialEq)]
pub struct NewickNode {
    pub label: Option<String>,
    pub branch: Option<f64>,
    pub children: Vec<NewickNode>,
}

/// Parse a Newick string (labels, branch lengths, nested groups).
pub fn parse_newick(input: &str) -> Result<NewickNode> {
    let bytes = input.trim().as_bytes();
    let mut pos = 0usize;
    let node = parse_node(bytes, &mut pos)?;
    if pos >= bytes.len() || bytes[pos] != b';' {
        return Err(Error::format("newick: missing trailing `;`"));
    }
    Ok(node)
}

fn parse_node(bytes: &[u8], pos: &mut usize) -> Result<NewickNode> {
    let mut node = NewickNode {
        label: None,
        branch: None,
        children: Vec::new(),
    };
    if *pos < bytes.len() && bytes[*pos] == b'(' {
        *pos += 1;
        loop {
            node.children.push(parse_node(bytes, pos)?);
            match bytes.get(*pos) {
                Some(b',') => *pos += 1,
                Some(b')') => {
                    *pos += 1;
                    break;
                }
                _ => return Err(Error::format("newick: expected `,` or `)`")),
            }
        }
    }
    let start = *pos;
    while *pos < bytes.len() && !b":,();".contains(&bytes[*pos]) {
        *pos += 1;
    }
    if *pos > start {
        node.label = Some(String::from_utf8_lossy(&bytes[start..*pos]).into_owned());
    }
    if bytes.get(*pos) == Some(&b':') {
        *pos += 1;
        let start = *pos;
        while *pos < bytes.len() && !b",();".contains(&bytes[*pos]) {
            *pos += 1;
        }
        let text = std::str::from_utf8(&bytes[start..*pos])
            .map_err(|_| Error::format("newick: invalid branch length"))?;
        node.branch = Some(
            text.parse()
                .map_err(|_| Error::format(format!("newick: bad branch length `{text}`")))?,
        );
    }
    Ok(node)
}

/// Write the distance matrix CSV with a label header row and column.
pub fn write_distance_matrix_csv<W: Write>(writer: W, matrix: &DistanceMatrix) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(writer);
    let mut header = vec!["label".to_string()];
    header.extend(matrix.labels.iter().cloned());
    wtr.write_record(&header)?;
    for (label, row) in matrix.labels.iter().zip(&matrix.values) {
        let mut record = vec![label.clone()];
        record.extend(row.iter().map(|v| v.to_string()));
        wtr.write_record(&record)?;
    }
    wtr.flush()?;
    Ok(())
}

/// Write the dendrogram merge list as JSON:
/// `{labels: [...], merges: [{left, right, height, size}]}`.
pub fn write_dendrogram_json<W: Write>(mut writer: W, tree: &Dendrogram) -> Result<()> {
    let doc = json!({
        "labels": tree.labels,
        "merges": tree.merges,
    });
    serde_json::to_writer_pretty(&mut writer, &doc)
        .map_err(|e| Error::format(e.to_string()))?;
    writer.write_all(b"\n")?;
    Ok(())
}
