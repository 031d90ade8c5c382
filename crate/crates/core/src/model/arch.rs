//! Architecture descriptions and the compact block grammar, e.g.
//! `GSel-4-2, GFC, ReLU, BNorm, Concat, FC-2, Softmax`.

use std::fmt;

use crate::error::{GmlpError, Result};
use crate::layers::PoolKind;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NetKind {
    Gmlp,
    Mlp,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Block {
    Gfc,
    /// Group pool; `None` uses the architecture's default pooling kind.
    Pool(Option<PoolKind>),
    Dense(usize),
    Relu,
    BatchNorm,
    Dropout(f64),
    Concat,
    Output(usize),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ArchSpec {
    pub kind: NetKind,
    /// Input feature count.
    pub d: usize,
    pub classes: usize,
    /// Group count (0 for MLPs).
    pub k: usize,
    /// Group size (0 for MLPs).
    pub m: usize,
    pub pool_kind: PoolKind,
    pub branching: usize,
    pub blocks: Vec<Block>,
    pub seed: u64,
}

fn parse_err(position: usize, token: &str, message: impl Into<String>) -> GmlpError {
    GmlpError::ArchParse {
        position,
        token: token.to_string(),
        message: message.into(),
    }
}

fn parse_count(position: usize, token: &str, text: &str) -> Result<usize> {
    match text.parse::<usize>() {
        Ok(n) if n > 0 => Ok(n),
        _ => Err(parse_err(position, token, format!("`{text}` is not a positive integer"))),
    }
}

impl ArchSpec {
    /// Parses a comma-separated block list. Token positions in errors are
    /// 1-based.
    pub fn parse(text: &str, d: usize) -> Result<Self> {
        let tokens: Vec<&str> = text.split(',').map(str::trim).filter(|t| !t.is_empty()).collect();
        if tokens.is_empty() {
            return Err(parse_err(0, "", "empty architecture"));
        }
        let mut kind = NetKind::Mlp;
        let (mut k, mut m) = (0, 0);
        let mut branching: Option<usize> = None;
        let mut blocks = Vec::new();
        let mut softmax_seen = false;

        for (i, &tok) in tokens.iter().enumerate() {
            let pos = i + 1;
            if softmax_seen {
                return Err(parse_err(pos, tok, "nothing may follow Softmax"));
            }
            let parts: Vec<&str> = tok.split('-').collect();
            let head = parts[0].to_ascii_lowercase();
            match head.as_str() {
                "gsel" => {
                    if i != 0 {
                        return Err(parse_err(pos, tok, "GSel must be the first block"));
                    }
                    if parts.len() != 3 {
                        return Err(parse_err(pos, tok, "expected GSel-<k>-<m>"));
                    }
                    k = parse_count(pos, tok, parts[1])?;
                    m = parse_count(pos, tok, parts[2])?;
                    kind = NetKind::Gmlp;
                }
                "gfc" if parts.len() == 1 => blocks.push(Block::Gfc),
                "relu" if parts.len() == 1 => blocks.push(Block::Relu),
                "bnorm" | "batchnorm" if parts.len() == 1 => blocks.push(Block::BatchNorm),
                "concat" if parts.len() == 1 => blocks.push(Block::Concat),
                "softmax" if parts.len() == 1 => softmax_seen = true,
                "gpool" => {
                    let pool = match parts.get(1) {
                        Some(p) => Some(p.parse::<PoolKind>().map_err(|e| parse_err(pos, tok, e.to_string()))?),
                        None => None,
                    };
                    if let Some(b) = parts.get(2) {
                        let b = parse_count(pos, tok, b)?;
                        if branching.is_some_and(|prev| prev != b) {
                            return Err(parse_err(pos, tok, "all pools must share one branching factor"));
                        }
                        branching = Some(b);
                    }
                    if parts.len() > 3 {
                        return Err(parse_err(pos, tok, "expected GPool[-<kind>[-<branching>]]"));
                    }
                    blocks.push(Block::Pool(pool));
                }
                "fc" => {
                    if parts.len() != 2 {
                        return Err(parse_err(pos, tok, "expected FC-<width>"));
                    }
                    blocks.push(Block::Dense(parse_count(pos, tok, parts[1])?));
                }
                "dropout" => {
                    let rate = parts
                        .get(1)
                        .and_then(|r| r.parse::<f64>().ok())
                        .filter(|r| (0.0..1.0).contains(r))
                        .ok_or_else(|| parse_err(pos, tok, "expected Dropout-<rate> with rate in [0, 1)"))?;
                    blocks.push(Block::Dropout(rate));
                }
                _ => return Err(parse_err(pos, tok, "unknown block")),
            }
        }

        // The last FC is the output layer.
        let last_fc = blocks
            .iter()
            .rposition(|b| matches!(b, Block::Dense(_)))
            .ok_or_else(|| parse_err(tokens.len(), tokens[tokens.len() - 1], "missing output FC-<classes> block"))?;
        let Block::Dense(classes) = blocks[last_fc] else { unreachable!() };
        if last_fc != blocks.len() - 1 {
            return Err(parse_err(tokens.len(), tokens[tokens.len() - 1], "output FC must be the last block"));
        }
        blocks[last_fc] = Block::Output(classes);

        let spec = Self {
            kind,
            d,
            classes,
            k,
            m,
            pool_kind: PoolKind::Max,
            branching: branching.unwrap_or(2),
            blocks,
            seed: 0,
        };
        spec.validate()?;
        Ok(spec)
    }

    /// A binary-tree GMLP with `gfc_layers` Group-FC stages, each followed by
    /// ReLU and batch norm, and a pool after every stage but the last.
    pub fn gmlp_tree(d: usize, classes: usize, k: usize, m: usize, gfc_layers: usize, pool_kind: PoolKind, branching: usize) -> Result<Self> {
        let mut blocks = Vec::new();
        for layer in 0..gfc_layers {
            if layer > 0 {
                blocks.push(Block::Pool(None));
            }
            blocks.extend([Block::Gfc, Block::Relu, Block::BatchNorm]);
        }
        blocks.extend([Block::Concat, Block::Output(classes)]);
        let spec = Self {
            kind: NetKind::Gmlp,
            d,
            classes,
            k,
            m,
            pool_kind,
            branching,
            blocks,
            seed: 0,
        };
        spec.validate()?;
        Ok(spec)
    }

    /// `FC-w, ReLU, BNorm` per hidden width, then the output layer.
    pub fn mlp(d: usize, classes: usize, hidden: &[usize]) -> Result<Self> {
        let mut blocks = Vec::new();
        for &w in hidden {
            blocks.extend([Block::Dense(w), Block::Relu, Block::BatchNorm]);
        }
        blocks.push(Block::Output(classes));
        let spec = Self {
            kind: NetKind::Mlp,
            d,
            classes,
            k: 0,
            m: 0,
            pool_kind: PoolKind::Max,
            branching: 2,
            blocks,
            seed: 0,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn with_pool_kind(mut self, kind: PoolKind) -> Self {
        self.pool_kind = kind;
        self
    }

    pub fn with_branching(mut self, branching: usize) -> Result<Self> {
        self.branching = branching;
        self.validate()?;
        Ok(self)
    }

    pub fn pool_kind_of(&self, block: &Block) -> Option<PoolKind> {
        match block {
            Block::Pool(kind) => Some(kind.unwrap_or(self.pool_kind)),
            _ => None,
        }
    }

    pub fn gfc_count(&self) -> usize {
        self.blocks.iter().filter(|b| matches!(b, Block::Gfc)).count()
    }

    pub fn pool_count(&self) -> usize {
        self.blocks.iter().filter(|b| matches!(b, Block::Pool(_))).count()
    }

    /// Group count after all pools.
    pub fn final_groups(&self) -> usize {
        self.k / self.branching.pow(self.pool_count() as u32)
    }

    pub fn validate(&self) -> Result<()> {
        let at = |i: usize, msg: &str| parse_err(i + 1, &self.block_name(i), msg.to_string());
        if self.classes < 1 {
            return Err(GmlpError::Config("need at least one class".into()));
        }
        if self.branching < 2 {
            return Err(GmlpError::Config(format!("branching factor must be >= 2, got {}", self.branching)));
        }
        let outputs = self.blocks.iter().filter(|b| matches!(b, Block::Output(_))).count();
        if outputs != 1 || !matches!(self.blocks.last(), Some(Block::Output(_))) {
            return Err(GmlpError::Config("exactly one output block, placed last, is required".into()));
        }
        match self.kind {
            NetKind::Mlp => {
                for (i, b) in self.blocks.iter().enumerate() {
                    if matches!(b, Block::Gfc | Block::Pool(_) | Block::Concat) {
                        return Err(at(i, "group blocks need a leading GSel-<k>-<m>"));
                    }
                }
            }
            NetKind::Gmlp => {
                if self.k == 0 || self.m == 0 {
                    return Err(GmlpError::Config("GMLP needs k >= 1 and m >= 1".into()));
                }
                let concat = self.blocks.iter().position(|b| matches!(b, Block::Concat));
                let Some(concat) = concat else {
                    return Err(GmlpError::Config("GMLP needs exactly one Concat block".into()));
                };
                let mut groups = self.k;
                for (i, b) in self.blocks.iter().enumerate() {
                    match b {
                        Block::Concat if i != concat => return Err(at(i, "only one Concat is allowed")),
                        Block::Gfc | Block::Pool(_) if i > concat => {
                            return Err(at(i, "group blocks must precede Concat"));
                        }
                        Block::Dense(_) if i < concat => return Err(at(i, "FC blocks must follow Concat")),
                        Block::Pool(_) => {
                            if !groups.is_multiple_of(self.branching) {
                                return Err(at(
                                    i,
                                    &format!("{groups} groups cannot be pooled {} at a time", self.branching),
                                ));
                            }
                            groups /= self.branching;
                        }
                        _ => {}
                    }
                }
            }
        }
        Ok(())
    }

    fn block_name(&self, i: usize) -> String {
        match self.blocks.get(i) {
            Some(b) => self.render_block(b),
            None => String::new(),
        }
    }

    fn render_block(&self, b: &Block) -> String {
        match b {
            Block::Gfc => "GFC".into(),
            Block::Pool(kind) => {
                let kind = kind.unwrap_or(self.pool_kind);
                if self.branching == 2 {
                    format!("GPool-{kind}")
                } else {
                    format!("GPool-{kind}-{}", self.branching)
                }
            }
            Block::Dense(w) => format!("FC-{w}"),
            Block::Relu => "ReLU".into(),
            Block::BatchNorm => "BNorm".into(),
            Block::Dropout(r) => format!("Dropout-{r}"),
            Block::Concat => "Concat".into(),
            Block::Output(c) => format!("FC-{c}"),
        }
    }
}

impl fmt::Display for ArchSpec {
    /// Canonical block string with every pool kind made explicit.
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mut tokens = Vec::new();
        if self.kind == NetKind::Gmlp {
            tokens.push(format!("GSel-{}-{}", self.k, self.m));
        }
        tokens.extend(self.blocks.iter().map(|b| self.render_block(b)));
        tokens.push("Softmax".into());
        f.write_str(&tokens.join(", "))
    }
}
