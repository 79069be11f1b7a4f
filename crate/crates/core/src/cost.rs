//! Asymptotic cost expressions of the four pipelines, evaluated with exact
//! integer arithmetic.

use std::fmt::Write as _;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::pipeline::PipelineKind;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum CostError {
    #[error("cost overflows 128-bit integers")]
    Overflow,
    #[error("`{0}` must be positive")]
    NotPositive(&'static str),
    #[error("c = {c} but a + b = {sum}")]
    LayerSum { c: u64, sum: u64 },
    #[error("empty range")]
    EmptyRange,
    #[error("unknown symbol `{0}`")]
    UnknownSymbol(String),
}

/// Every symbol of the cost expressions. JSON keys are the symbols themselves.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CostInputs {
    /// Nodes.
    #[serde(rename = "N")]
    pub nodes: u64,
    /// Edges.
    #[serde(rename = "E")]
    pub edges: u64,
    /// Node feature dimension.
    #[serde(rename = "D")]
    pub feat_dim: u64,
    /// Per-head output size.
    #[serde(rename = "K")]
    pub head_dim: u64,
    #[serde(rename = "H")]
    pub heads: u64,
    #[serde(rename = "n")]
    pub layers: u64,
    #[serde(rename = "p")]
    pub patches: u64,
    #[serde(rename = "d")]
    pub embed_dim: u64,
    pub d_in: u64,
    pub d_out: u64,
    /// Encoder layers.
    #[serde(rename = "a")]
    pub enc_layers: u64,
    /// Decoder layers.
    #[serde(rename = "b")]
    pub dec_layers: u64,
    /// Must equal `a + b` when given.
    #[serde(rename = "c", default, skip_serializing_if = "Option::is_none")]
    pub total_layers: Option<u64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Symbol {
    N,
    E,
    D,
    K,
    H,
    Layers,
    P,
    Embed,
    DIn,
    DOut,
    A,
    B,
}

impl FromStr for Symbol {
    type Err = CostError;

    fn from_str(s: &str) -> Result<Self, CostError> {
        Ok(match s {
            "N" => Symbol::N,
            "E" => Symbol::E,
            "D" => Symbol::D,
            "K" => Symbol::K,
            "H" => Symbol::H,
            "n" => Symbol::Layers,
            "p" => Symbol::P,
            "d" => Symbol::Embed,
            "d_in" => Symbol::DIn,
            "d_out" => Symbol::DOut,
            "a" => Symbol::A,
            "b" => Symbol::B,
            other => return Err(CostError::UnknownSymbol(other.to_string())),
        })
    }
}

impl CostInputs {
    pub fn ones() -> Self {
        Self {
            nodes: 1,
            edges: 1,
            feat_dim: 1,
            head_dim: 1,
            heads: 1,
            layers: 1,
            patches: 1,
            embed_dim: 1,
            d_in: 1,
            d_out: 1,
            enc_layers: 1,
            dec_layers: 0,
            total_layers: None,
        }
    }

    pub fn c(&self) -> u64 {
        self.enc_layers + self.dec_layers
    }

    pub fn validate(&self) -> Result<(), CostError> {
        let fields = [
            ("N", self.nodes),
            ("E", self.edges),
            ("D", self.feat_dim),
            ("K", self.head_dim),
            ("H", self.heads),
            ("n", self.layers),
            ("p", self.patches),
            ("d", self.embed_dim),
            ("d_in", self.d_in),
            ("d_out", self.d_out),
            ("c", self.c()),
        ];
        if let Some((name, _)) = fields.iter().find(|(_, v)| *v == 0) {
            return Err(CostError::NotPositive(name));
        }
        if let Some(c) = self.total_layers {
            if c != self.c() {
                return Err(CostError::LayerSum { c, sum: self.c() });
            }
        }
        Ok(())
    }

    pub fn with(mut self, symbol: Symbol, value: u64) -> Self {
        let slot = match symbol {
            Symbol::N => &mut self.nodes,
            Symbol::E => &mut self.edges,
            Symbol::D => &mut self.feat_dim,
            Symbol::K => &mut self.head_dim,
            Symbol::H => &mut self.heads,
            Symbol::Layers => &mut self.layers,
            Symbol::P => &mut self.patches,
            Symbol::Embed => &mut self.embed_dim,
            Symbol::DIn => &mut self.d_in,
            Symbol::DOut => &mut self.d_out,
            Symbol::A => &mut self.enc_layers,
            Symbol::B => &mut self.dec_layers,
        };
        *slot = value;
        self.total_layers = None;
        self
    }
}

fn mul(factors: &[u64]) -> Result<u128, CostError> {
    factors
        .iter()
        .try_fold(1u128, |acc, &f| acc.checked_mul(f as u128))
        .ok_or(CostError::Overflow)
}

fn add(terms: &[u128]) -> Result<u128, CostError> {
    terms
        .iter()
        .try_fold(0u128, |acc, &t| acc.checked_add(t))
        .ok_or(CostError::Overflow)
}

/// `c d_in d_out`
pub fn cost_vae(c: u64, d_in: u64, d_out: u64) -> Result<u128, CostError> {
    mul(&[c, d_in, d_out])
}

/// `n (p^2 d + p d^2)`
pub fn cost_vit(n: u64, p: u64, d: u64) -> Result<u128, CostError> {
    let inner = add(&[mul(&[p, p, d])?, mul(&[p, d, d])?])?;
    inner.checked_mul(n as u128).ok_or(CostError::Overflow)
}

/// `N D^2 + E D`
pub fn cost_graph_build(n_nodes: u64, d: u64, e: u64) -> Result<u128, CostError> {
    add(&[mul(&[n_nodes, d, d])?, mul(&[e, d])?])
}

/// `n (E d_in + N d_in d_out)`
pub fn cost_gcn(n: u64, e: u64, d_in: u64, n_nodes: u64, d_out: u64) -> Result<u128, CostError> {
    let inner = add(&[mul(&[e, d_in])?, mul(&[n_nodes, d_in, d_out])?])?;
    inner.checked_mul(n as u128).ok_or(CostError::Overflow)
}

/// `n (N D K + H E K)`
pub fn cost_gat(n: u64, n_nodes: u64, d: u64, k: u64, h: u64, e: u64) -> Result<u128, CostError> {
    let inner = add(&[mul(&[n_nodes, d, k])?, mul(&[h, e, k])?])?;
    inner.checked_mul(n as u128).ok_or(CostError::Overflow)
}

/// `n d_in d_out`
pub fn cost_mlp(n: u64, d_in: u64, d_out: u64) -> Result<u128, CostError> {
    mul(&[n, d_in, d_out])
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct CostTerm {
    pub name: &'static str,
    pub value: u128,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct PipelineCost {
    pub kind: PipelineKind,
    pub terms: Vec<CostTerm>,
    pub total: u128,
}

/// Terms of one pipeline's row; the VAE-MLP row carries a literal `+ 1`.
pub fn cost_pipeline(kind: PipelineKind, x: &CostInputs) -> Result<PipelineCost, CostError> {
    let vae = || cost_vae(x.c(), x.d_in, x.d_out);
    let build = || cost_graph_build(x.nodes, x.feat_dim, x.edges);
    let mlp = || cost_mlp(x.layers, x.d_in, x.d_out);
    let term = |name, value| CostTerm { name, value };
    let terms = match kind {
        PipelineKind::VaeGcn => vec![
            term("vae", vae()?),
            term("graph_build", build()?),
            term(
                "gcn",
                cost_gcn(x.layers, x.edges, x.d_in, x.nodes, x.d_out)?,
            ),
        ],
        PipelineKind::VaeGat => vec![
            term("vae", vae()?),
            term("graph_build", build()?),
            term(
                "gat",
                cost_gat(x.layers, x.nodes, x.feat_dim, x.head_dim, x.heads, x.edges)?,
            ),
        ],
        PipelineKind::VaeMlp => vec![
            term("vae", vae()?),
            term("sampling", 1),
            term("mlp", mlp()?),
        ],
        PipelineKind::VitMlp => vec![
            term("vit", cost_vit(x.layers, x.patches, x.embed_dim)?),
            term("mlp", mlp()?),
        ],
    };
    let total = add(&terms.iter().map(|t| t.value).collect::<Vec<_>>())?;
    Ok(PipelineCost { kind, terms, total })
}

/// Smallest `v` in `lo..=hi` at which `a` costs more than `b` with `symbol = v`.
pub fn crossover(
    a: PipelineKind,
    b: PipelineKind,
    inputs: &CostInputs,
    symbol: Symbol,
    lo: u64,
    hi: u64,
) -> Result<Option<u64>, CostError> {
    if lo > hi {
        return Err(CostError::EmptyRange);
    }
    for v in lo..=hi {
        let x = inputs.with(symbol, v);
        if cost_pipeline(a, &x)?.total > cost_pipeline(b, &x)?.total {
            return Ok(Some(v));
        }
    }
    Ok(None)
}

/// Inputs for the full dataset with a symmetrized 3-NN graph over 8-dim
/// embeddings and the default layer sizes.
pub fn reference_inputs() -> CostInputs {
    let nodes = crate::dataset::REFERENCE_TOTAL_ROWS as u64;
    CostInputs {
        nodes,
        edges: 6 * nodes,
        feat_dim: 8,
        head_dim: 8,
        heads: 2,
        layers: 2,
        patches: 23,
        embed_dim: 16,
        d_in: 8,
        d_out: 32,
        enc_layers: 3,
        dec_layers: 3,
        total_layers: None,
    }
}

pub fn render_costs(costs: &[PipelineCost]) -> String {
    let mut out = String::new();
    for c in costs {
        writeln!(out, "{}: {}", c.kind, c.total).expect("string write");
        for t in &c.terms {
            writeln!(out, "  {:<12} {}", t.name, t.value).expect("string write");
        }
    }
    out
}
