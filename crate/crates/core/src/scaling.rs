//! The quantitative model: exponential training-coverage growth, baseline
//! system-prompt decay, the interrupted ratio with its limit and lower
//! bound, and parameter sweeps that measure constructed contexts.

use num_bigint::BigInt;
use num_traits::{One, Zero};
use rayon::prelude::*;

use crate::context::{system_share, Context, Message};
use crate::engine::{inject_inline, InterruptionPolicy};
use crate::error::{Error, Result};
use crate::ratio::{self, format_significant, Rational};
use crate::tokens::TokenCount;

/// Largest exponent [`training_examples_lower_bound`] evaluates by default.
pub const DEFAULT_EXPONENT_CAP: u64 = 4096;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ScalingParams {
    k: Rational,
    c: Rational,
    exponent_cap: u64,
}

impl ScalingParams {
    pub fn new(k: Rational, c: Rational) -> Result<Self> {
        if k <= Rational::one() {
            return Err(Error::InvalidParams("growth base k must exceed 1".into()));
        }
        if c <= Rational::zero() {
            return Err(Error::InvalidParams("scale constant c must be positive".into()));
        }
        Ok(ScalingParams {
            k,
            c,
            exponent_cap: DEFAULT_EXPONENT_CAP,
        })
    }

    pub fn with_exponent_cap(mut self, cap: u64) -> Self {
        self.exponent_cap = cap;
        self
    }

    pub fn k(&self) -> &Rational {
        &self.k
    }

    pub fn c(&self) -> &Rational {
        &self.c
    }

    pub fn exponent_cap(&self) -> u64 {
        self.exponent_cap
    }
}

/// `c * k^l`, exact. Lengths beyond the exponent cap are refused.
pub fn training_examples_lower_bound(l: TokenCount, p: &ScalingParams) -> Result<Rational> {
    let exponent = l.get();
    if exponent > p.exponent_cap {
        return Err(Error::MagnitudeOverflow {
            exponent,
            cap: p.exponent_cap,
        });
    }
    let exp = usize::try_from(exponent).map_err(|_| Error::MagnitudeOverflow {
        exponent,
        cap: p.exponent_cap,
    })?;
    Ok(&p.c * num_traits::pow(p.k.clone(), exp))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct RatioParams {
    /// System prompt length.
    pub s_p: TokenCount,
    /// Interruption length.
    pub s_i: TokenCount,
    /// Interval between interruptions.
    pub t: TokenCount,
}

impl RatioParams {
    pub fn new(s_p: TokenCount, s_i: TokenCount, t: TokenCount) -> Result<Self> {
        if t.is_zero() {
            return Err(Error::InvalidParams("interval t must be at least 1".into()));
        }
        if s_i.is_zero() {
            return Err(Error::InvalidParams("interruption length s_i must be at least 1".into()));
        }
        Ok(RatioParams { s_p, s_i, t })
    }

    pub fn from_u64(s_p: u64, s_i: u64, t: u64) -> Result<Self> {
        Self::new(s_p.into(), s_i.into(), t.into())
    }
}

/// `s_p / l`: the system-prompt share without interruptions.
pub fn baseline_ratio(s_p: TokenCount, l: TokenCount) -> Result<Rational> {
    if l.is_zero() {
        return Err(Error::UndefinedRatio);
    }
    Ok(ratio::ratio(s_p.get(), l.get()))
}

/// `s_p / l + s_i / t`.
pub fn analytic_ratio(p: &RatioParams, l: TokenCount) -> Result<Rational> {
    Ok(baseline_ratio(p.s_p, l)? + asymptotic_ratio(p))
}

/// `s_i / t`: the limit of the analytic ratio.
pub fn asymptotic_ratio(p: &RatioParams) -> Rational {
    ratio::ratio(p.s_i.get(), p.t.get())
}

/// `s_i / (t + s_i)`: the limit of the measured ratio once the injected
/// tokens count toward the context length.
pub fn measured_asymptote(p: &RatioParams) -> Rational {
    ratio::ratio(p.s_i.get(), p.t.get() + p.s_i.get())
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Verdict {
    Pass,
    /// `witness` is the smallest length whose analytic ratio does not exceed
    /// `q`. It may lie beyond `l_max` when only the asymptote check fails.
    Fail { witness: TokenCount },
}

impl Verdict {
    pub fn passed(&self) -> bool {
        matches!(self, Verdict::Pass)
    }
}

/// Checks `analytic_ratio(p, l) > q` for every `1 <= l <= l_max` and
/// `q <= s_i/t`.
///
/// The analytic ratio is non-increasing in `l`, so the lengths violating
/// `ratio > q` form a suffix `[l*, inf)` and `l*` has a closed form. When
/// `q` exceeds the asymptote the check fails even if `l*` lies past
/// `l_max`, and the witness reports `l*` anyway.
pub fn verify_lower_bound(p: &RatioParams, q: &Rational, l_max: TokenCount) -> Verdict {
    let gap = q - asymptotic_ratio(p);
    let witness = if gap < Rational::zero() {
        None
    } else if p.s_p.is_zero() {
        Some(1)
    } else if gap.is_zero() {
        // s_p/l > 0 for every finite l
        None
    } else {
        // smallest l with s_p <= gap * l
        let needed = Rational::from_integer(BigInt::from(p.s_p.get())) / &gap;
        let l = u64::try_from(needed.ceil().to_integer()).unwrap_or(u64::MAX);
        Some(l.max(1))
    };
    match witness {
        Some(l) if l <= l_max.get().max(1) || gap > Rational::zero() => Verdict::Fail {
            witness: TokenCount::new(l),
        },
        _ => Verdict::Pass,
    }
}

/// Deterministic text of exactly `tokens` default-rule tokens.
pub fn filler_text(tokens: u64) -> String {
    const WORDS: [&str; 16] = [
        "alpha", "bravo", "charlie", "delta", "echo", "foxtrot", "golf", "hotel", "india",
        "juliet", "kilo", "lima", "mike", "november", "oscar", "papa",
    ];
    let mut out = String::with_capacity(tokens as usize * 7);
    for i in 0..tokens as usize {
        if i > 0 {
            out.push(' ');
        }
        out.push_str(WORDS[(i * 7 + i / 16) % WORDS.len()]);
    }
    out
}

/// Builds the sweep's synthetic conversation: an `s_p`-token system prompt
/// (omitted when zero) and one `l`-token user message injected inline every
/// `t` tokens with an `s_i`-token interruption.
pub fn constructed_context(p: &RatioParams, l: TokenCount) -> Result<Context> {
    let policy = InterruptionPolicy::builder()
        .interval(p.t)
        .default_text(filler_text(p.s_i.get()))
        .build()?;
    let (user, _) = inject_inline(&Message::user(filler_text(l.get())), &policy, 1)?;
    let mut messages = Vec::with_capacity(2);
    if !p.s_p.is_zero() {
        messages.push(Message::system(filler_text(p.s_p.get())));
    }
    messages.push(user);
    Context::new(messages)
}

/// Cartesian grid of sweep parameters.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct SweepGrid {
    pub s_p: Vec<u64>,
    pub s_i: Vec<u64>,
    pub t: Vec<u64>,
    pub l: Vec<u64>,
}

impl SweepGrid {
    /// Parses `key = v1, v2, ...` lines for the keys `s_p`, `s_i`, `t`, `l`.
    /// Blank lines and `#` comments are ignored.
    pub fn parse(source: &str) -> Result<Self> {
        let mut grid = SweepGrid::default();
        for (lineno, line) in source.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, values) = line.split_once('=').ok_or_else(|| {
                Error::InvalidParams(format!("line {}: expected key = values", lineno + 1))
            })?;
            let values = values
                .split(',')
                .map(str::trim)
                .filter(|v| !v.is_empty())
                .map(|v| {
                    v.replace('_', "").parse::<u64>().map_err(|_| {
                        Error::InvalidParams(format!("line {}: bad integer {v:?}", lineno + 1))
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            let slot = match key.trim() {
                "s_p" => &mut grid.s_p,
                "s_i" => &mut grid.s_i,
                "t" => &mut grid.t,
                "l" => &mut grid.l,
                other => {
                    return Err(Error::InvalidParams(format!(
                        "line {}: unknown key {other:?}",
                        lineno + 1
                    )))
                }
            };
            slot.extend(values);
        }
        Ok(grid)
    }

    /// Grid points in nested order `s_p`, `s_i`, `t`, `l`.
    pub fn points(&self) -> Vec<(u64, u64, u64, u64)> {
        let mut points = Vec::new();
        for &s_p in &self.s_p {
            for &s_i in &self.s_i {
                for &t in &self.t {
                    for &l in &self.l {
                        points.push((s_p, s_i, t, l));
                    }
                }
            }
        }
        points
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SweepRow {
    pub params: RatioParams,
    pub l: TokenCount,
    pub baseline: Rational,
    pub analytic: Rational,
    /// Measured on a constructed context, not from a formula.
    pub measured: Rational,
    pub asymptote: Rational,
    pub measured_asymptote: Rational,
}

pub const SWEEP_HEADER: &str = "s_p,s_i,t,l,baseline,analytic,measured,asymptote,measured_asymptote";

impl SweepRow {
    pub fn to_csv(&self) -> String {
        let d = |r: &Rational| format_significant(r, 9);
        format!(
            "{},{},{},{},{},{},{},{},{}",
            self.params.s_p,
            self.params.s_i,
            self.params.t,
            self.l,
            d(&self.baseline),
            d(&self.analytic),
            d(&self.measured),
            d(&self.asymptote),
            d(&self.measured_asymptote)
        )
    }
}

/// Evaluates every grid point. Rows come back in grid order.
pub fn sweep(grid: &SweepGrid) -> Result<Vec<SweepRow>> {
    let points = grid.points();
    if points.is_empty() {
        return Err(Error::InvalidParams("sweep grid is empty".into()));
    }
    let checked = points
        .iter()
        .map(|&(s_p, s_i, t, l)| {
            let params = RatioParams::from_u64(s_p, s_i, t).map_err(|e| reject(s_p, s_i, t, l, e))?;
            if l == 0 {
                return Err(reject(s_p, s_i, t, l, Error::InvalidParams("l must be at least 1".into())));
            }
            Ok((params, TokenCount::new(l)))
        })
        .collect::<Result<Vec<_>>>()?;
    checked
        .into_par_iter()
        .map(|(params, l)| sweep_row(&params, l))
        .collect()
}

fn reject(s_p: u64, s_i: u64, t: u64, l: u64, err: Error) -> Error {
    Error::InvalidParams(format!("grid point s_p={s_p} s_i={s_i} t={t} l={l}: {err}"))
}

pub fn sweep_row(params: &RatioParams, l: TokenCount) -> Result<SweepRow> {
    let context = constructed_context(params, l)?;
    let measured = system_share(&context)?.measured_ratio;
    Ok(SweepRow {
        params: *params,
        l,
        baseline: baseline_ratio(params.s_p, l)?,
        analytic: analytic_ratio(params, l)?,
        measured,
        asymptote: asymptotic_ratio(params),
        measured_asymptote: measured_asymptote(params),
    })
}

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut out = String::from(SWEEP_HEADER);
    out.push('\n');
    for row in rows {
        out.push_str(&row.to_csv());
        out.push('\n');
    }
    out
}
