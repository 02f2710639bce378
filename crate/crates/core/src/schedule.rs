//! Schedule templates: named parameter domains plus algebraic constraints
//! over them. A template doubles as the search space. Constraints are kept
//! as expression strings ("T_x*T_y*T_z <= 1024") so descriptor files stay
//! declarative; the parser handles sums, products, integers, and `<=`/`<`.

use std::collections::BTreeMap;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::kernels::TileConfig;

/// Rejection-sampling bound for [`ScheduleTemplate::random_config`].
pub const MAX_SAMPLE_ATTEMPTS: usize = 10_000;
/// Raw-size ceiling for [`ScheduleTemplate::enumerate`] unless the caller
/// overrides it.
pub const DEFAULT_ENUMERATE_CAP: u128 = 1 << 22;
/// Upper bound on the worker-grid product injected for conv-style templates.
pub const WORKER_PRODUCT_LIMIT: u64 = 1024;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamDomain {
    pub name: String,
    pub values: Vec<u64>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
enum Expr {
    Const(u64),
    Var(String),
    Sum(Vec<Expr>),
    Prod(Vec<Expr>),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum CmpOp {
    Le,
    Lt,
}

/// One comparison constraint, kept alongside its source text so reports
/// and serialized descriptors show what the author wrote.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct Constraint {
    text: String,
    lhs: Expr,
    op: CmpOp,
    rhs: Expr,
}

impl TryFrom<String> for Constraint {
    type Error = Error;
    fn try_from(text: String) -> Result<Self> {
        parse_constraint(&text)
    }
}

impl From<Constraint> for String {
    fn from(c: Constraint) -> String {
        c.text
    }
}

impl Constraint {
    pub fn parse(text: &str) -> Result<Self> {
        parse_constraint(text)
    }

    pub fn text(&self) -> &str {
        &self.text
    }

    /// Variable names referenced, sorted and deduplicated.
    pub fn vars(&self) -> Vec<String> {
        let mut out = Vec::new();
        collect_vars(&self.lhs, &mut out);
        collect_vars(&self.rhs, &mut out);
        out.sort();
        out.dedup();
        out
    }

    pub fn holds(&self, assignment: &BTreeMap<String, u64>) -> Result<bool> {
        let lhs = eval_expr(&self.lhs, assignment)?;
        let rhs = eval_expr(&self.rhs, assignment)?;
        Ok(match self.op {
            CmpOp::Le => lhs <= rhs,
            CmpOp::Lt => lhs < rhs,
        })
    }
}

fn collect_vars(e: &Expr, out: &mut Vec<String>) {
    match e {
        Expr::Const(_) => {}
        Expr::Var(v) => out.push(v.clone()),
        Expr::Sum(items) | Expr::Prod(items) => items.iter().for_each(|i| collect_vars(i, out)),
    }
}

fn eval_expr(e: &Expr, assignment: &BTreeMap<String, u64>) -> Result<u128> {
    Ok(match e {
        Expr::Const(v) => *v as u128,
        Expr::Var(name) => *assignment.get(name).ok_or_else(|| {
            Error::InvalidParams(format!("constraint references unknown parameter '{name}'"))
        })? as u128,
        Expr::Sum(items) => {
            let mut acc: u128 = 0;
            for item in items {
                acc = acc.saturating_add(eval_expr(item, assignment)?);
            }
            acc
        }
        Expr::Prod(items) => {
            let mut acc: u128 = 1;
            for item in items {
                acc = acc.saturating_mul(eval_expr(item, assignment)?);
            }
            acc
        }
    })
}

#[derive(Debug, Clone, PartialEq, Eq)]
enum Token {
    Ident(String),
    Int(u64),
    Plus,
    Star,
    Le,
    Lt,
}

fn tokenize(text: &str) -> Result<Vec<Token>> {
    let mut tokens = Vec::new();
    let mut chars = text.chars().peekable();
    while let Some(&c) = chars.peek() {
        match c {
            ' ' | '\t' => {
                chars.next();
            }
            '+' => {
                chars.next();
                tokens.push(Token::Plus);
            }
            '*' | '·' => {
                chars.next();
                tokens.push(Token::Star);
            }
            '≤' => {
                chars.next();
                tokens.push(Token::Le);
            }
            '<' => {
                chars.next();
                if chars.peek() == Some(&'=') {
                    chars.next();
                    tokens.push(Token::Le);
                } else {
                    tokens.push(Token::Lt);
                }
            }
            '0'..='9' => {
                let mut value: u64 = 0;
                while let Some(d) = chars.peek().and_then(|c| c.to_digit(10)) {
                    value = value
                        .checked_mul(10)
                        .and_then(|v| v.checked_add(d as u64))
                        .ok_or_else(|| Error::malformed("constraint", format!("integer overflow in '{text}'")))?;
                    chars.next();
                }
                tokens.push(Token::Int(value));
            }
            c if c.is_alphabetic() || c == '_' => {
                let mut name = String::new();
                while let Some(&c) = chars.peek() {
                    if c.is_alphanumeric() || c == '_' {
                        name.push(c);
                        chars.next();
                    } else {
                        break;
                    }
                }
                tokens.push(Token::Ident(name));
            }
            other => {
                return Err(Error::malformed(
                    "constraint",
                    format!("unexpected character '{other}' in '{text}'"),
                ));
            }
        }
    }
    Ok(tokens)
}

fn parse_constraint(text: &str) -> Result<Constraint> {
    let tokens = tokenize(text)?;
    let mut pos = 0;
    let lhs = parse_sum(&tokens, &mut pos, text)?;
    let op = match tokens.get(pos) {
        Some(Token::Le) => CmpOp::Le,
        Some(Token::Lt) => CmpOp::Lt,
        _ => {
            return Err(Error::malformed(
                "constraint",
                format!("expected '<=' or '<' in '{text}'"),
            ));
        }
    };
    pos += 1;
    let rhs = parse_sum(&tokens, &mut pos, text)?;
    if pos != tokens.len() {
        return Err(Error::malformed("constraint", format!("trailing tokens in '{text}'")));
    }
    Ok(Constraint { text: text.to_string(), lhs, op, rhs })
}

fn parse_sum(tokens: &[Token], pos: &mut usize, text: &str) -> Result<Expr> {
    let mut items = vec![parse_prod(tokens, pos, text)?];
    while tokens.get(*pos) == Some(&Token::Plus) {
        *pos += 1;
        items.push(parse_prod(tokens, pos, text)?);
    }
    Ok(if items.len() == 1 { items.pop().expect("non-empty") } else { Expr::Sum(items) })
}

fn parse_prod(tokens: &[Token], pos: &mut usize, text: &str) -> Result<Expr> {
    let mut items = vec![parse_atom(tokens, pos, text)?];
    while tokens.get(*pos) == Some(&Token::Star) {
        *pos += 1;
        items.push(parse_atom(tokens, pos, text)?);
    }
    Ok(if items.len() == 1 { items.pop().expect("non-empty") } else { Expr::Prod(items) })
}

fn parse_atom(tokens: &[Token], pos: &mut usize, text: &str) -> Result<Expr> {
    let expr = match tokens.get(*pos) {
        Some(Token::Ident(name)) => Expr::Var(name.clone()),
        Some(Token::Int(v)) => Expr::Const(*v),
        _ => {
            return Err(Error::malformed(
                "constraint",
                format!("expected identifier or integer in '{text}'"),
            ));
        }
    };
    *pos += 1;
    Ok(expr)
}

/// One point in a template's space: a value per parameter, in the
/// template's parameter order.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ScheduleConfig {
    pub values: Vec<u64>,
}

impl ScheduleConfig {
    pub fn new(values: Vec<u64>) -> Self {
        Self { values }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Violation {
    pub constraint: String,
    /// Parameters the constraint mentions; repair strategies resample these.
    pub vars: Vec<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn ok(&self) -> bool {
        self.violations.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScheduleTemplate {
    pub name: String,
    pub params: Vec<ParamDomain>,
    #[serde(default)]
    pub constraints: Vec<Constraint>,
}

impl ScheduleTemplate {
    /// Canonical conv schedule: a worker grid up to 32 per axis and
    /// output/reduction tiling up to 8, with the grid product capped.
    pub fn conv_default() -> Self {
        let grid = vec![1, 2, 4, 8, 16, 32];
        let tile = vec![1, 2, 4, 8];
        let dom = |name: &str, values: &Vec<u64>| ParamDomain { name: name.into(), values: values.clone() };
        Self {
            name: "conv2d_tiled".into(),
            params: vec![
                dom("T_x", &grid),
                dom("T_y", &grid),
                dom("T_z", &grid),
                dom("Tile_x", &tile),
                dom("Tile_y", &tile),
                dom("Tile_z", &tile),
                dom("Tile_rz", &tile),
            ],
            constraints: vec![Constraint::parse("T_x*T_y*T_z <= 1024").expect("literal parses")],
        }
    }

    pub fn validate_template(&self) -> Result<()> {
        if self.params.is_empty() {
            return Err(Error::malformed("template", format!("'{}' has no parameters", self.name)));
        }
        let mut seen = std::collections::BTreeSet::new();
        for p in &self.params {
            if p.values.is_empty() {
                return Err(Error::malformed(
                    "template",
                    format!("'{}': parameter '{}' has an empty domain", self.name, p.name),
                ));
            }
            if !seen.insert(&p.name) {
                return Err(Error::malformed(
                    "template",
                    format!("'{}': duplicate parameter '{}'", self.name, p.name),
                ));
            }
        }
        let domain_names: BTreeMap<String, u64> =
            self.params.iter().map(|p| (p.name.clone(), p.values[0])).collect();
        for c in &self.constraints {
            c.holds(&domain_names)?;
        }
        Ok(())
    }

    /// Content hash identifying this template; stable across load formats
    /// and field ordering, sensitive to any semantic change.
    pub fn template_id(&self) -> String {
        let canonical = serde_json::to_string(self).expect("template serializes");
        let digest = Sha256::digest(canonical.as_bytes());
        hex::encode(&digest[..8])
    }

    pub fn param_index(&self, name: &str) -> Option<usize> {
        self.params.iter().position(|p| p.name == name)
    }

    /// Domain-size product with no constraint filtering.
    pub fn raw_size(&self) -> u128 {
        self.params.iter().map(|p| p.values.len() as u128).product()
    }

    /// Total number of (parameter, value) choices; the flattened action
    /// space an agent indexes into.
    pub fn flat_size(&self) -> usize {
        self.params.iter().map(|p| p.values.len()).sum()
    }

    pub fn named(&self, cfg: &ScheduleConfig) -> Result<BTreeMap<String, u64>> {
        if cfg.values.len() != self.params.len() {
            return Err(Error::LengthMismatch { expected: self.params.len(), got: cfg.values.len() });
        }
        Ok(self
            .params
            .iter()
            .zip(&cfg.values)
            .map(|(p, v)| (p.name.clone(), *v))
            .collect())
    }

    pub fn validate(&self, cfg: &ScheduleConfig) -> Result<ValidationReport> {
        let assignment = self.named(cfg)?;
        for (p, v) in self.params.iter().zip(&cfg.values) {
            if !p.values.contains(v) {
                return Err(Error::InvalidConfig(format!(
                    "value {v} outside domain of '{}' in template '{}'",
                    p.name, self.name
                )));
            }
        }
        let mut violations = Vec::new();
        for c in &self.constraints {
            if !c.holds(&assignment)? {
                violations.push(Violation { constraint: c.text.clone(), vars: c.vars() });
            }
        }
        Ok(ValidationReport { violations })
    }

    pub fn is_valid(&self, cfg: &ScheduleConfig) -> Result<bool> {
        Ok(self.validate(cfg)?.ok())
    }

    /// Uniformly samples one value for parameter `idx`.
    pub fn sample_param(&self, idx: usize, rng: &mut impl Rng) -> u64 {
        let values = &self.params[idx].values;
        values[rng.gen_range(0..values.len())]
    }

    /// Rejection-samples a constraint-satisfying config.
    pub fn random_config(&self, rng: &mut impl Rng) -> Result<ScheduleConfig> {
        for _ in 0..MAX_SAMPLE_ATTEMPTS {
            let cfg = ScheduleConfig::new(
                (0..self.params.len()).map(|i| self.sample_param(i, rng)).collect(),
            );
            if self.is_valid(&cfg)? {
                return Ok(cfg);
            }
        }
        Err(Error::ExhaustedSampling {
            attempts: MAX_SAMPLE_ATTEMPTS,
            detail: format!("no valid config found in template '{}'", self.name),
        })
    }

    /// All constraint-satisfying configs, in lexicographic domain order.
    /// Refuses spaces whose raw size exceeds `cap`.
    pub fn enumerate(&self, cap: u128) -> Result<Vec<ScheduleConfig>> {
        let size = self.raw_size();
        if size > cap {
            return Err(Error::SpaceTooLarge { size, cap });
        }
        let mut out = Vec::new();
        let mut indices = vec![0usize; self.params.len()];
        loop {
            let cfg = ScheduleConfig::new(
                indices.iter().zip(&self.params).map(|(&i, p)| p.values[i]).collect(),
            );
            if self.is_valid(&cfg)? {
                out.push(cfg);
            }
            let mut axis = self.params.len();
            loop {
                if axis == 0 {
                    return Ok(out);
                }
                axis -= 1;
                indices[axis] += 1;
                if indices[axis] < self.params[axis].values.len() {
                    break;
                }
                indices[axis] = 0;
            }
        }
    }

    /// Interprets a config as a tiled-conv kernel configuration. The
    /// template must define all seven kernel parameters.
    pub fn tile_config(&self, cfg: &ScheduleConfig) -> Result<TileConfig> {
        let named = self.named(cfg)?;
        let get = |key: &str| -> Result<usize> {
            named.get(key).map(|&v| v as usize).ok_or_else(|| {
                Error::InvalidConfig(format!("template '{}' lacks parameter '{key}'", self.name))
            })
        };
        Ok(TileConfig {
            t_x: get("T_x")?,
            t_y: get("T_y")?,
            t_z: get("T_z")?,
            tile_x: get("Tile_x")?,
            tile_y: get("Tile_y")?,
            tile_z: get("Tile_z")?,
            tile_rz: get("Tile_rz")?,
        })
    }

    /// The config mapping every parameter to its smallest value; for the
    /// conv template this is the untiled single-worker baseline.
    pub fn baseline_config(&self) -> ScheduleConfig {
        ScheduleConfig::new(
            self.params
                .iter()
                .map(|p| *p.values.iter().min().expect("validated non-empty"))
                .collect(),
        )
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct TemplateFile {
    templates: Vec<ScheduleTemplate>,
}

/// Loads template descriptors from TOML or JSON (decided by extension).
/// Templates defining the conv worker grid get the grid-product cap
/// injected if the descriptor did not spell it out.
pub fn load_templates(path: &Path) -> Result<Vec<ScheduleTemplate>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let ext = path.extension().and_then(|e| e.to_str()).unwrap_or("");
    let file: TemplateFile = match ext {
        "toml" => toml::from_str(&text).map_err(|e| Error::malformed("template toml", e))?,
        "json" => serde_json::from_str(&text).map_err(|e| Error::malformed("template json", e))?,
        other => {
            return Err(Error::malformed(
                "template descriptor",
                format!("unsupported extension '{other}' (expected .toml or .json)"),
            ));
        }
    };
    let mut templates = file.templates;
    for t in &mut templates {
        inject_grid_cap(t);
        t.validate_template()?;
    }
    if templates.is_empty() {
        return Err(Error::malformed("template descriptor", "no templates defined"));
    }
    Ok(templates)
}

pub fn save_templates_json(templates: &[ScheduleTemplate], path: &Path) -> Result<()> {
    let file = TemplateFile { templates: templates.to_vec() };
    let text = serde_json::to_string_pretty(&file).expect("templates serialize");
    std::fs::write(path, text).map_err(|e| Error::io(path.display().to_string(), e))
}

fn inject_grid_cap(t: &mut ScheduleTemplate) {
    let grid_names = ["T_x", "T_y", "T_z"];
    if !grid_names.iter().all(|n| t.param_index(n).is_some()) {
        return;
    }
    let covered = t.constraints.iter().any(|c| {
        let vars = c.vars();
        grid_names.iter().all(|n| vars.iter().any(|v| v == n))
    });
    if !covered {
        let text = format!("T_x*T_y*T_z <= {WORKER_PRODUCT_LIMIT}");
        t.constraints.push(Constraint::parse(&text).expect("literal parses"));
    }
}
