//! Exhaustive operation tables for the algorithmic (grokking) tasks: modular
//! arithmetic expressions over two operands and composition expressions in
//! the permutation groups S4 and S5. Operands are one-hot encoded and
//! concatenated; the target is the operation result as a class index.

use super::{Dataset, Targets};
use crate::error::{Error, Result};
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AlgExpr {
    /// a + b
    Add,
    /// a - b
    Sub,
    /// a·b
    Mul,
    /// a·b if b is odd, else a + b
    MulIfOddElseAdd,
    /// a² + b²
    SquareSum,
    /// a² + ab + b²
    QuadForm,
    /// a² + ab + b² + a
    QuadFormPlusA,
    /// a³ + ab
    CubePlusMul,
}

impl AlgExpr {
    pub fn apply_mod(&self, a: u64, b: u64, p: u64) -> u64 {
        let m = |v: u64| v % p;
        match self {
            AlgExpr::Add => m(a + b),
            AlgExpr::Sub => m(a + p - b % p),
            AlgExpr::Mul => m(a * b),
            AlgExpr::MulIfOddElseAdd => {
                if b % 2 == 1 {
                    m(a * b)
                } else {
                    m(a + b)
                }
            }
            AlgExpr::SquareSum => m(a * a + b * b),
            AlgExpr::QuadForm => m(a * a + a * b + b * b),
            AlgExpr::QuadFormPlusA => m(a * a + a * b + b * b + a),
            AlgExpr::CubePlusMul => m(a * a * a + a * b),
        }
    }

    pub const ALL: [AlgExpr; 8] = [
        AlgExpr::Add,
        AlgExpr::Sub,
        AlgExpr::Mul,
        AlgExpr::MulIfOddElseAdd,
        AlgExpr::SquareSum,
        AlgExpr::QuadForm,
        AlgExpr::QuadFormPlusA,
        AlgExpr::CubePlusMul,
    ];
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GroupExpr {
    /// a·b
    Compose,
    /// a·b·a
    Sandwich,
    /// a·b·a⁻¹
    Conjugate,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PermGroup {
    S4,
    S5,
}

impl PermGroup {
    pub fn degree(&self) -> usize {
        match self {
            PermGroup::S4 => 4,
            PermGroup::S5 => 5,
        }
    }

    pub fn order(&self) -> usize {
        match self {
            PermGroup::S4 => 24,
            PermGroup::S5 => 120,
        }
    }

    /// All permutations of [0..degree), enumerated lexicographically so class
    /// indices are stable across runs and machines.
    pub fn elements(&self) -> Vec<Vec<u8>> {
        let n = self.degree();
        let mut cur: Vec<u8> = (0..n as u8).collect();
        let mut out = vec![cur.clone()];
        while next_permutation(&mut cur) {
            out.push(cur.clone());
        }
        out
    }
}

fn next_permutation(p: &mut [u8]) -> bool {
    let n = p.len();
    if n < 2 {
        return false;
    }
    let mut i = n - 1;
    while i > 0 && p[i - 1] >= p[i] {
        i -= 1;
    }
    if i == 0 {
        return false;
    }
    let mut j = n - 1;
    while p[j] <= p[i - 1] {
        j -= 1;
    }
    p.swap(i - 1, j);
    p[i..].reverse();
    true
}

/// Composition "apply b first, then a": (a∘b)[i] = a[b[i]].
fn compose(a: &[u8], b: &[u8]) -> Vec<u8> {
    b.iter().map(|&i| a[i as usize]).collect()
}

fn invert(a: &[u8]) -> Vec<u8> {
    let mut inv = vec![0u8; a.len()];
    for (i, &v) in a.iter().enumerate() {
        inv[v as usize] = i as u8;
    }
    inv
}

/// Lexicographic rank of a permutation (Lehmer code).
fn rank(p: &[u8]) -> usize {
    let n = p.len();
    let mut r = 0usize;
    for i in 0..n {
        let smaller = p[i + 1..].iter().filter(|&&v| v < p[i]).count();
        r = r * (n - i) + smaller;
    }
    r
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", tag = "family")]
pub enum AlgTaskSpec {
    Modular { expr: AlgExpr, p: u64 },
    Group { expr: GroupExpr, group: PermGroup },
}

impl AlgTaskSpec {
    pub fn domain_size(&self) -> usize {
        match self {
            AlgTaskSpec::Modular { p, .. } => *p as usize,
            AlgTaskSpec::Group { group, .. } => group.order(),
        }
    }

    pub fn name(&self) -> String {
        match self {
            AlgTaskSpec::Modular { expr, p } => format!("{expr:?}-mod-{p}"),
            AlgTaskSpec::Group { expr, group } => format!("{expr:?}-{group:?}"),
        }
    }
}

/// Build the exhaustive table: one row per operand pair, one-hot inputs of
/// width 2·|domain|, target class = operation result.
pub fn gen_algorithmic(spec: &AlgTaskSpec) -> Result<Dataset> {
    let k = spec.domain_size();
    if k < 2 {
        return Err(Error::Config("algorithmic task domain needs at least 2 elements".into()));
    }
    let rows = k * k;
    let dims = 2 * k;
    let mut x = Tensor::zeros(rows, dims);
    let mut classes = Vec::with_capacity(rows);

    match spec {
        AlgTaskSpec::Modular { expr, p } => {
            for a in 0..*p {
                for b in 0..*p {
                    let r = (a * p + b) as usize;
                    x.data[r * dims + a as usize] = 1.0;
                    x.data[r * dims + k + b as usize] = 1.0;
                    classes.push(expr.apply_mod(a, b, *p) as usize);
                }
            }
        }
        AlgTaskSpec::Group { expr, group } => {
            let elems = group.elements();
            for (ai, a) in elems.iter().enumerate() {
                for (bi, b) in elems.iter().enumerate() {
                    let r = ai * k + bi;
                    x.data[r * dims + ai] = 1.0;
                    x.data[r * dims + k + bi] = 1.0;
                    let result = match expr {
                        GroupExpr::Compose => compose(a, b),
                        GroupExpr::Sandwich => compose(&compose(a, b), a),
                        GroupExpr::Conjugate => compose(&compose(a, b), &invert(a)),
                    };
                    classes.push(rank(&result));
                }
            }
        }
    }

    let ds = Dataset {
        x,
        targets: Targets::Classes(classes),
        class_count: k,
        provenance: spec.name(),
    };
    ds.validate()?;
    Ok(ds)
}
