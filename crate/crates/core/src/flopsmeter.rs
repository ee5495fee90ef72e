//! Closed-form FLOPs accounting for TracIn, TRAK and CHIPS scoring.
//!
//! All counts are exact 128-bit integers; any overflow is an error.

use std::fmt;
use std::str::FromStr;

use crate::{Error, Result};

/// Per-apply cost model of the random projection.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ProjectionCost {
    /// `2P`
    CountSketch,
    /// `2sP`
    SparseSigned { s: u64 },
    /// `2m log₂ m`, `m` the next power of two `≥ P`
    Srht,
    /// `2kP`
    DenseGaussian,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Method {
    TracIn,
    Trak,
    Chips,
}

impl Method {
    pub fn as_str(self) -> &'static str {
        match self {
            Method::TracIn => "tracin",
            Method::Trak => "trak",
            Method::Chips => "chips",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "tracin" => Ok(Method::TracIn),
            "trak" => Ok(Method::Trak),
            "chips" => Ok(Method::Chips),
            other => Err(Error::config(format!("no cost model for method {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CostModel {
    pub b_train: u64,
    pub b_eval: u64,
    pub n_train_samples: u64,
    pub n_eval_samples: u64,
    pub d_v: u64,
    pub d_t: u64,
    pub d: u64,
    pub k: u64,
    /// TracIn accumulation epochs `E`.
    pub epochs: u64,
    /// CG iterations `I`.
    pub cg_iters: u64,
    pub projection: ProjectionCost,
    pub c_neg: u64,
}

impl CostModel {
    /// 24M training pairs, ViT-B/16 widths, CountSketch at `k = 4096`.
    pub fn biomedica() -> Self {
        Self {
            b_train: 32_768,
            b_eval: 3_400,
            n_train_samples: 24_000_000,
            n_eval_samples: 3_400,
            d_v: 768,
            d_t: 512,
            d: 512,
            k: 4096,
            epochs: 10,
            cg_iters: 5,
            projection: ProjectionCost::CountSketch,
            c_neg: 6,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("b_train", self.b_train),
            ("b_eval", self.b_eval),
            ("d_v", self.d_v),
            ("d_t", self.d_t),
            ("d", self.d),
            ("k", self.k),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::config(format!("{name} must be positive")));
            }
        }
        if let ProjectionCost::SparseSigned { s: 0 } = self.projection {
            return Err(Error::config("sparsity must be positive"));
        }
        Ok(())
    }

    /// `P = d_v·d + d_t·d + 1`.
    pub fn subspace_dim(&self) -> Result<u128> {
        let d = self.d as u128;
        add(add(mul(self.d_v as u128, d)?, mul(self.d_t as u128, d)?)?, 1)
    }

    pub fn n_train(&self) -> u128 {
        (self.n_train_samples as u128).div_ceil(self.b_train as u128)
    }

    pub fn n_eval(&self) -> u128 {
        (self.n_eval_samples as u128).div_ceil(self.b_eval as u128)
    }

    /// `C_rp`, one projection of a subspace gradient.
    pub fn projection_cost(&self) -> Result<u128> {
        let p = self.subspace_dim()?;
        match self.projection {
            ProjectionCost::CountSketch => mul(2, p),
            ProjectionCost::SparseSigned { s } => mul(mul(2, s as u128)?, p),
            ProjectionCost::Srht => {
                let m = p.checked_next_power_of_two().ok_or(Error::Overflow("srht padding"))?;
                mul(mul(2, m)?, m.trailing_zeros() as u128)
            }
            ProjectionCost::DenseGaussian => mul(mul(2, self.k as u128)?, p),
        }
    }
}

/// Batch-level costs at one batch size.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Primitives {
    pub c_lin: u128,
    pub c_norm: u128,
    pub c_mm: u128,
    pub c_fwd: u128,
    pub c_bwd: u128,
    pub c_fb: u128,
    pub c_jvp: u128,
}

fn mul(a: u128, b: u128) -> Result<u128> {
    a.checked_mul(b).ok_or(Error::Overflow("flops product"))
}

fn add(a: u128, b: u128) -> Result<u128> {
    a.checked_add(b).ok_or(Error::Overflow("flops sum"))
}

pub fn primitives_at(model: &CostModel, batch: u64) -> Result<Primitives> {
    let b = batch as u128;
    let d = model.d as u128;
    let c_lin = mul(mul(2, b)?, mul(add(model.d_v as u128, model.d_t as u128)?, d)?)?;
    let c_norm = mul(mul(6, b)?, d)?;
    let c_mm = mul(mul(2, mul(b, b)?)?, d)?;
    let c_fwd = add(add(c_lin, c_norm)?, mul(2, c_mm)?)?;
    let c_bwd = mul(2, add(c_lin, mul(2, c_mm)?)?)?;
    Ok(Primitives {
        c_lin,
        c_norm,
        c_mm,
        c_fwd,
        c_bwd,
        c_fb: add(c_fwd, c_bwd)?,
        c_jvp: mul(2, c_fwd)?,
    })
}

/// `(train primitives, eval primitives, C_proto_eval)`.
pub fn primitives(model: &CostModel) -> Result<(Primitives, Primitives, u128)> {
    model.validate()?;
    let train = primitives_at(model, model.b_train)?;
    let eval = primitives_at(model, model.b_eval)?;
    let proto = add(eval.c_lin, eval.c_norm)?;
    Ok((train, eval, proto))
}

/// Shared TRAK/CHIPS cost: eval direction, prototypes, sketching, CG and scoring.
pub fn base_total(model: &CostModel) -> Result<u128> {
    let (tr, ev, proto) = primitives(model)?;
    let rp = model.projection_cost()?;
    let n_train = model.n_train();
    let eval_dir = mul(model.n_eval(), add(ev.c_fb, rp)?)?;
    let sketch_pool = mul(n_train, add(tr.c_fb, rp)?)?;
    let cg = mul(mul(model.cg_iters as u128, n_train)?, add(add(tr.c_jvp, tr.c_fb)?, rp)?)?;
    let score = mul(n_train, add(tr.c_jvp, tr.c_fwd)?)?;
    add(add(add(add(eval_dir, proto)?, sketch_pool)?, cg)?, score)
}

pub fn method_total(model: &CostModel, method: Method) -> Result<u128> {
    let (tr, ev, _) = primitives(model)?;
    let n_train = model.n_train();
    match method {
        Method::TracIn => {
            let rp = model.projection_cost()?;
            let eval_dir = mul(model.n_eval(), add(ev.c_fb, rp)?)?;
            let jvp = mul(n_train, tr.c_jvp)?;
            let epochs = mul(mul(model.epochs as u128, n_train)?, tr.c_fb)?;
            add(add(eval_dir, jvp)?, epochs)
        }
        Method::Trak => base_total(model),
        Method::Chips => add(base_total(model)?, chips_extra(model)?),
    }
}

/// `I·Δ_neg + n_train(Δ_margin + Δ_rel)`.
pub fn chips_extra(model: &CostModel) -> Result<u128> {
    let b = model.b_train as u128;
    let neg = mul(mul(model.cg_iters as u128, model.c_neg as u128)?, model.k as u128)?;
    let margin = mul(2, mul(b, b)?)?;
    let rel = mul(mul(4, b)?, model.d as u128)?;
    add(neg, mul(model.n_train(), add(margin, rel)?)?)
}

/// Scientific notation with `sig` significant digits, e.g. `5.258869e16`.
///
/// Rounds half away from zero on the exact integer.
pub fn format_sci(v: u128, sig: usize) -> String {
    let sig = sig.max(1);
    let digits = v.to_string();
    if v == 0 {
        return format!("{}e0", if sig > 1 { format!("0.{}", "0".repeat(sig - 1)) } else { "0".into() });
    }
    let mut exp = digits.len() - 1;
    let mut mant: Vec<u8> = digits.bytes().map(|b| b - b'0').collect();
    if mant.len() > sig {
        let round_up = mant[sig] >= 5;
        mant.truncate(sig);
        if round_up {
            let mut i = sig;
            loop {
                if i == 0 {
                    mant.insert(0, 1);
                    mant.truncate(sig);
                    exp += 1;
                    break;
                }
                i -= 1;
                if mant[i] == 9 {
                    mant[i] = 0;
                } else {
                    mant[i] += 1;
                    break;
                }
            }
        }
    } else {
        mant.resize(sig, 0);
    }
    let s: String = mant.iter().map(|d| (b'0' + d) as char).collect();
    if sig == 1 {
        format!("{s}e{exp}")
    } else {
        format!("{}.{}e{exp}", &s[..1], &s[1..])
    }
}

/// Shortest scientific form that is exact, e.g. `4.294967296e10`.
pub fn format_exact_sci(v: u128) -> String {
    let digits = v.to_string();
    let sig = digits.trim_end_matches('0').len().max(1);
    format_sci(v, sig)
}

/// Rows of the primitives table: `(name, train, eval)`.
pub fn primitive_table(model: &CostModel) -> Result<Vec<(&'static str, u128, u128)>> {
    let (t, e, proto) = primitives(model)?;
    Ok(vec![
        ("C_lin", t.c_lin, e.c_lin),
        ("C_norm", t.c_norm, e.c_norm),
        ("C_mm", t.c_mm, e.c_mm),
        ("C_fwd", t.c_fwd, e.c_fwd),
        ("C_bwd", t.c_bwd, e.c_bwd),
        ("C_fb", t.c_fb, e.c_fb),
        ("C_jvp", t.c_jvp, e.c_jvp),
        ("C_proto_eval", 0, proto),
    ])
}
