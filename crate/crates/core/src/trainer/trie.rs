use crate::error::{Error, Result};

const NONE: usize = usize::MAX;

/// Prefix tree over allowed top-1 expert paths of a fixed depth.
#[derive(Clone, Debug, PartialEq)]
pub struct PathTrie {
    depth: usize,
    n_experts: usize,
    /// `child[node * n_experts + e]`, or `NONE`.
    child: Vec<usize>,
    /// `allowed[node * n_experts + e]`: expert `e` continues some path.
    allowed: Vec<bool>,
}

impl PathTrie {
    pub fn new(paths: &[Vec<usize>], depth: usize, n_experts: usize) -> Result<Self> {
        if depth == 0 {
            return Err(Error::invalid("path trie needs at least one layer"));
        }
        if paths.is_empty() {
            return Err(Error::invalid("path trie needs at least one path"));
        }
        let mut trie = Self { depth, n_experts, child: vec![NONE; n_experts], allowed: vec![false; n_experts] };
        for p in paths {
            trie.insert(p)?;
        }
        Ok(trie)
    }

    /// Every one of the `n_experts^depth` paths.
    pub fn full(depth: usize, n_experts: usize) -> Result<Self> {
        let total = n_experts.checked_pow(depth as u32).filter(|&t| t <= 1 << 22);
        let total = total.ok_or_else(|| Error::invalid("full path trie too large"))?;
        let paths: Vec<Vec<usize>> = (0..total)
            .map(|mut code| {
                let mut p = vec![0; depth];
                for slot in p.iter_mut().rev() {
                    *slot = code % n_experts;
                    code /= n_experts;
                }
                p
            })
            .collect();
        Self::new(&paths, depth, n_experts)
    }

    fn insert(&mut self, path: &[usize]) -> Result<()> {
        if path.len() != self.depth {
            return Err(Error::invalid(format!("path of length {} in a trie of depth {}", path.len(), self.depth)));
        }
        if let Some(&bad) = path.iter().find(|&&e| e >= self.n_experts) {
            return Err(Error::invalid(format!("expert {bad} out of range for {} experts", self.n_experts)));
        }
        let n = self.n_experts;
        let mut node = 0;
        for (l, &e) in path.iter().enumerate() {
            self.allowed[node * n + e] = true;
            if l + 1 == self.depth {
                break;
            }
            let mut next = self.child[node * n + e];
            if next == NONE {
                next = self.child.len() / n;
                self.child[node * n + e] = next;
                self.child.extend(std::iter::repeat_n(NONE, n));
                self.allowed.extend(std::iter::repeat_n(false, n));
            }
            node = next;
        }
        Ok(())
    }

    pub fn depth(&self) -> usize {
        self.depth
    }

    pub fn n_experts(&self) -> usize {
        self.n_experts
    }

    pub fn root(&self) -> usize {
        0
    }

    pub fn n_nodes(&self) -> usize {
        self.child.len() / self.n_experts
    }

    /// Experts allowed after reaching `node`.
    pub fn allowed(&self, node: usize) -> &[bool] {
        &self.allowed[node * self.n_experts..(node + 1) * self.n_experts]
    }

    /// Node reached by taking expert `e` at `node`; `None` at the last layer
    /// or off the trie.
    pub fn step(&self, node: usize, e: usize) -> Option<usize> {
        let c = self.child[node * self.n_experts + e];
        (c != NONE).then_some(c)
    }

    pub fn contains(&self, path: &[usize]) -> bool {
        if path.len() != self.depth {
            return false;
        }
        let mut node = 0;
        for (l, &e) in path.iter().enumerate() {
            if e >= self.n_experts || !self.allowed(node)[e] {
                return false;
            }
            if l + 1 < self.depth {
                match self.step(node, e) {
                    Some(c) => node = c,
                    None => return false,
                }
            }
        }
        true
    }

    /// Every stored path in lexicographic order.
    pub fn paths(&self) -> Vec<Vec<usize>> {
        let mut out = Vec::new();
        let mut prefix = Vec::with_capacity(self.depth);
        self.walk(0, &mut prefix, &mut out);
        out
    }

    fn walk(&self, node: usize, prefix: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        for e in 0..self.n_experts {
            if !self.allowed(node)[e] {
                continue;
            }
            prefix.push(e);
            if prefix.len() == self.depth {
                out.push(prefix.clone());
            } else if let Some(c) = self.step(node, e) {
                self.walk(c, prefix, out);
            }
            prefix.pop();
        }
    }

    pub fn len(&self) -> usize {
        self.paths().len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }
}
