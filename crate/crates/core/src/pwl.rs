//! Continuous piecewise-linear functions of one variable, the hinge-sum
//! (APL) form `h(x) = max(0,x) + sum_s a_s * max(0, -x + b_s)`, and exact
//! conversions between them.
//!
//! A [`PwlFunction`] is stored as ordered breakpoints, one slope per region
//! and the value at the first breakpoint. Values elsewhere are obtained by
//! integrating the slopes, so a stored function is continuous by
//! construction. A point that sits exactly on a breakpoint belongs to the
//! region on its right.
//!
//! Besides the two conversions, the module builds the two weight-tied
//! networks that reproduce a hinge sum: a pair of maxout units (convex part
//! minus concave part) and a two-stage rectifier network with shared input
//! weights.

use std::fmt;
use std::str::FromStr;

use thiserror::Error;

/// Relative size of the constant offset on the identity tail that is still
/// attributed to rounding in the slope integration.
const TAIL_OFFSET_TOLERANCE: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum PwlError {
    #[error("breakpoints must be finite and strictly increasing (offending index {index})")]
    UnorderedBreakpoints { index: usize },
    #[error("{breakpoints} breakpoints need {expected} slopes, got {got}")]
    SlopeCount {
        breakpoints: usize,
        expected: usize,
        got: usize,
    },
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("hinge slopes and locations differ in length ({slopes} vs {locations})")]
    LengthMismatch { slopes: usize, locations: usize },
    #[error("right-tail slope is {0}; a hinge sum needs exactly 1 there")]
    RightTailSlope(f64),
    #[error("g({at}) = {value}; a hinge sum needs g(x) = x on the right tail")]
    RightTailOffset { at: f64, value: f64 },
    #[error("malformed record at line {line}: {message}")]
    Record { line: usize, message: String },
}

pub type Result<T> = std::result::Result<T, PwlError>;

#[inline]
fn relu(x: f64) -> f64 {
    x.max(0.0)
}

/// A continuous piecewise-linear function `g: R -> R`.
///
/// With breakpoints `b_0 < ... < b_K` there are `K + 2` regions and as many
/// slopes; `slopes[0]` applies left of `b_0` and the last slope from `b_K`
/// onwards. A function without breakpoints is affine, and `anchor_value` is
/// then its value at `x = 0`.
#[derive(Debug, Clone, PartialEq)]
pub struct PwlFunction {
    breakpoints: Vec<f64>,
    slopes: Vec<f64>,
    anchor_value: f64,
    // g(b_j), integrated from the anchor once at construction.
    knot_values: Vec<f64>,
}

impl PwlFunction {
    pub fn new(breakpoints: Vec<f64>, slopes: Vec<f64>, anchor_value: f64) -> Result<Self> {
        if slopes.len() != breakpoints.len() + 1 {
            return Err(PwlError::SlopeCount {
                breakpoints: breakpoints.len(),
                expected: breakpoints.len() + 1,
                got: slopes.len(),
            });
        }
        for (index, &b) in breakpoints.iter().enumerate() {
            if !b.is_finite() || (index > 0 && breakpoints[index - 1] >= b) {
                return Err(PwlError::UnorderedBreakpoints { index });
            }
        }
        if slopes.iter().any(|s| !s.is_finite()) {
            return Err(PwlError::NonFinite("slopes"));
        }
        if !anchor_value.is_finite() {
            return Err(PwlError::NonFinite("anchor value"));
        }
        let mut knot_values = Vec::with_capacity(breakpoints.len());
        let mut value = anchor_value;
        for (j, &b) in breakpoints.iter().enumerate() {
            if j > 0 {
                value += slopes[j] * (b - breakpoints[j - 1]);
            }
            knot_values.push(value);
        }
        Ok(Self {
            breakpoints,
            slopes,
            anchor_value,
            knot_values,
        })
    }

    pub fn zero() -> Self {
        Self::new(Vec::new(), vec![0.0], 0.0).expect("constant zero is valid")
    }

    pub fn relu() -> Self {
        Self::new(vec![0.0], vec![0.0, 1.0], 0.0).expect("relu is valid")
    }

    pub fn breakpoints(&self) -> &[f64] {
        &self.breakpoints
    }

    pub fn slopes(&self) -> &[f64] {
        &self.slopes
    }

    pub fn anchor_value(&self) -> f64 {
        self.anchor_value
    }

    /// `g(b_j)` for every breakpoint.
    pub fn knot_values(&self) -> &[f64] {
        &self.knot_values
    }

    pub fn left_slope(&self) -> f64 {
        self.slopes[0]
    }

    pub fn right_slope(&self) -> f64 {
        *self.slopes.last().expect("at least one slope")
    }

    /// Evaluates `g(x)`; the region is located by binary search.
    pub fn eval(&self, x: f64) -> Result<f64> {
        if !x.is_finite() {
            return Err(PwlError::NonFinite("evaluation point"));
        }
        Ok(self.eval_unchecked(x))
    }

    pub(crate) fn eval_unchecked(&self, x: f64) -> f64 {
        let Some(&first) = self.breakpoints.first() else {
            return self.anchor_value + self.slopes[0] * x;
        };
        let region = self.breakpoints.partition_point(|&b| b <= x);
        if region == 0 {
            self.anchor_value + self.slopes[0] * (x - first)
        } else {
            let knot = region - 1;
            self.knot_values[knot] + self.slopes[region] * (x - self.breakpoints[knot])
        }
    }

    /// True when slopes never decrease from left to right.
    pub fn is_convex(&self) -> bool {
        self.slopes.windows(2).all(|w| w[0] <= w[1])
    }

    /// `(slope, intercept)` of the line carrying each region, left to right.
    ///
    /// For a convex function the pointwise maximum of these lines is the
    /// function itself, which is what a maxout unit computes.
    pub fn affine_pieces(&self) -> Vec<(f64, f64)> {
        if self.breakpoints.is_empty() {
            return vec![(self.slopes[0], self.anchor_value)];
        }
        let mut pieces = Vec::with_capacity(self.slopes.len());
        pieces.push((
            self.slopes[0],
            self.knot_values[0] - self.slopes[0] * self.breakpoints[0],
        ));
        for (j, (&b, &v)) in self.breakpoints.iter().zip(&self.knot_values).enumerate() {
            let slope = self.slopes[j + 1];
            pieces.push((slope, v - slope * b));
        }
        pieces
    }
}

/// Hinge parameters of a single APL unit: slopes `a_s` and locations `b_s`.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct AplParams1D {
    a: Vec<f64>,
    b: Vec<f64>,
}

impl AplParams1D {
    pub fn new(a: Vec<f64>, b: Vec<f64>) -> Result<Self> {
        if a.len() != b.len() {
            return Err(PwlError::LengthMismatch {
                slopes: a.len(),
                locations: b.len(),
            });
        }
        if a.iter().chain(&b).any(|v| !v.is_finite()) {
            return Err(PwlError::NonFinite("hinge parameters"));
        }
        Ok(Self { a, b })
    }

    /// A unit with no hinges, i.e. a plain rectifier.
    pub fn relu() -> Self {
        Self::default()
    }

    pub fn a(&self) -> &[f64] {
        &self.a
    }

    pub fn b(&self) -> &[f64] {
        &self.b
    }

    /// Number of hinges `S`.
    pub fn hinges(&self) -> usize {
        self.a.len()
    }

    pub fn pairs(&self) -> impl Iterator<Item = (f64, f64)> + '_ {
        self.a.iter().copied().zip(self.b.iter().copied())
    }

    /// Direct evaluation of the hinge sum.
    pub fn eval(&self, x: f64) -> f64 {
        let mut y = relu(x);
        for (a, b) in self.pairs() {
            y += a * relu(-x + b);
        }
        y
    }

    /// The point from which the unit is exactly the identity,
    /// `max(0, max_s b_s)`.
    pub fn identity_tail_start(&self) -> f64 {
        self.b.iter().fold(0.0f64, |m, &b| m.max(b))
    }

    /// Slope below every hinge: `-sum_s a_s`.
    pub fn left_tail_slope(&self) -> f64 {
        -self.a.iter().sum::<f64>()
    }
}

/// Canonical piecewise-linear form of `relu_coeff * max(0,x) + sum a*max(0,-x+b)`.
///
/// Kinks at bit-identical locations are merged by summing their slope
/// changes and kinks whose merged change is exactly zero are dropped.
fn hinge_sum_to_pwl(relu_coeff: f64, hinges: &[(f64, f64)]) -> PwlFunction {
    // Crossing a kink left to right raises the slope by its delta: +1 for
    // the rectifier at 0, +a for a hinge at b.
    let mut kinks: Vec<(f64, f64)> = Vec::with_capacity(hinges.len() + 1);
    if relu_coeff != 0.0 {
        kinks.push((0.0, relu_coeff));
    }
    kinks.extend(hinges.iter().map(|&(a, b)| (b, a)));
    kinks.sort_by(|l, r| l.0.total_cmp(&r.0));

    let mut breakpoints: Vec<f64> = Vec::new();
    let mut i = 0;
    while i < kinks.len() {
        let location = kinks[i].0;
        let mut delta = 0.0;
        while i < kinks.len() && kinks[i].0 == location {
            delta += kinks[i].1;
            i += 1;
        }
        if delta != 0.0 {
            // -0.0 and 0.0 compare equal; store the positive zero.
            breakpoints.push(if location == 0.0 { 0.0 } else { location });
        }
    }

    // Slope just left of `hi`, read straight off the hinge sum so both tails
    // come out exact: 1 on the right and -sum(a) (+1 if 0 < hi) on the left.
    let slope_left_of = |hi: f64| -> f64 {
        let mut slope = if 0.0 < hi { relu_coeff } else { 0.0 };
        for &(a, b) in hinges {
            if hi <= b {
                slope -= a;
            }
        }
        slope
    };
    let mut slopes: Vec<f64> = breakpoints.iter().map(|&hi| slope_left_of(hi)).collect();
    slopes.push(slope_left_of(f64::INFINITY));

    let anchor_at = breakpoints.first().copied().unwrap_or(0.0);
    let mut anchor_value = relu_coeff * relu(anchor_at);
    for &(a, b) in hinges {
        anchor_value += a * relu(-anchor_at + b);
    }

    PwlFunction::new(breakpoints, slopes, anchor_value)
        .expect("merged kinks are sorted, distinct and finite")
}

/// Canonical piecewise-linear form of an APL unit.
pub fn apl_to_pwl(p: &AplParams1D) -> PwlFunction {
    let hinges: Vec<(f64, f64)> = p.pairs().collect();
    hinge_sum_to_pwl(1.0, &hinges)
}

/// Rewrites a piecewise-linear function as a hinge sum.
///
/// The function must be the identity on its last region: slope exactly 1
/// and `g(b_K) = b_K` up to integration rounding. Every region slope change
/// becomes a hinge at that breakpoint, plus a hinge of slope -1 at 0 that
/// cancels the built-in rectifier below 0. Coincident hinges are merged and
/// zero hinges dropped, so the result has at most `K + 2` hinges.
pub fn pwl_to_apl(g: &PwlFunction) -> Result<AplParams1D> {
    let right = g.right_slope();
    if right != 1.0 {
        return Err(PwlError::RightTailSlope(right));
    }
    let (at, value) = match (g.breakpoints.last(), g.knot_values.last()) {
        (Some(&b), Some(&v)) => (b, v),
        _ => (0.0, g.anchor_value),
    };
    let mut scale = 1.0 + g.anchor_value.abs() + at.abs();
    for (j, w) in g.breakpoints.windows(2).enumerate() {
        scale += (g.slopes[j + 1] * (w[1] - w[0])).abs();
    }
    if (value - at).abs() > TAIL_OFFSET_TOLERANCE * scale {
        return Err(PwlError::RightTailOffset { at, value });
    }

    let mut hinges: Vec<(f64, f64)> = g
        .breakpoints
        .iter()
        .enumerate()
        .map(|(j, &b)| (b, g.slopes[j + 1] - g.slopes[j]))
        .collect();
    hinges.push((0.0, -1.0));
    hinges.sort_by(|l, r| l.0.total_cmp(&r.0));

    let mut a = Vec::new();
    let mut b = Vec::new();
    let mut i = 0;
    while i < hinges.len() {
        let location = hinges[i].0;
        let mut coeff = 0.0;
        while i < hinges.len() && hinges[i].0 == location {
            coeff += hinges[i].1;
            i += 1;
        }
        if coeff != 0.0 {
            a.push(coeff);
            b.push(if location == 0.0 { 0.0 } else { location });
        }
    }
    AplParams1D::new(a, b)
}

/// Splits an APL unit into two convex functions whose difference is the
/// unit: the rectifier plus the positive-slope hinges, and the negated
/// negative-slope hinges. Each half is a single maxout unit over
/// [`PwlFunction::affine_pieces`].
pub fn maxout_pair_from_apl(p: &AplParams1D) -> (PwlFunction, PwlFunction) {
    let convex: Vec<(f64, f64)> = p.pairs().filter(|&(a, _)| a > 0.0).collect();
    let concave: Vec<(f64, f64)> = p
        .pairs()
        .filter(|&(a, _)| a < 0.0)
        .map(|(a, b)| (-a, b))
        .collect();
    (hinge_sum_to_pwl(1.0, &convex), hinge_sum_to_pwl(0.0, &concave))
}

/// Evaluates a maxout unit over a set of `(slope, intercept)` lines.
pub fn maxout_eval(pieces: &[(f64, f64)], x: f64) -> f64 {
    pieces
        .iter()
        .map(|&(c, d)| c * x + d)
        .fold(f64::NEG_INFINITY, f64::max)
}

/// Two-stage rectifier network with tied input weights.
///
/// Stage one computes `max(0, sign_k * x + bias_k)` with `sign_k` in
/// {-1, 1}; stage two sums the features with fixed weights. Feature 0 is the
/// rectifier itself, feature `s + 1` is hinge `s`.
#[derive(Debug, Clone, PartialEq)]
pub struct TiedMlpConv {
    signs: Vec<f64>,
    biases: Vec<f64>,
    mix: Vec<f64>,
}

impl TiedMlpConv {
    pub fn from_apl(p: &AplParams1D) -> Self {
        let mut signs = vec![1.0];
        let mut biases = vec![0.0];
        let mut mix = vec![1.0];
        for (a, b) in p.pairs() {
            signs.push(-1.0);
            biases.push(b);
            mix.push(a);
        }
        Self { signs, biases, mix }
    }

    pub fn signs(&self) -> &[f64] {
        &self.signs
    }

    pub fn biases(&self) -> &[f64] {
        &self.biases
    }

    pub fn mix(&self) -> &[f64] {
        &self.mix
    }

    pub fn hidden(&self, x: f64) -> Vec<f64> {
        self.signs
            .iter()
            .zip(&self.biases)
            .map(|(&c, &bias)| relu(c * x + bias))
            .collect()
    }

    pub fn eval(&self, x: f64) -> f64 {
        let hidden = self.hidden(x);
        let mut y = self.mix[0] * hidden[0];
        for (w, f) in self.mix.iter().zip(&hidden).skip(1) {
            y += w * f;
        }
        y
    }
}

pub fn mlpconv_tied_eval(p: &AplParams1D, x: f64) -> f64 {
    TiedMlpConv::from_apl(p).eval(x)
}

// Plain-text records: a header line with counts, then one line per pair,
// floats printed with 17 significant digits so they parse back bit-exactly.

impl fmt::Display for PwlFunction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(
            f,
            "pwl {} {:.16e}",
            self.breakpoints.len(),
            self.anchor_value
        )?;
        for (b, s) in self.breakpoints.iter().zip(&self.slopes) {
            writeln!(f, "{b:.16e} {s:.16e}")?;
        }
        writeln!(f, "inf {:.16e}", self.right_slope())
    }
}

impl fmt::Display for AplParams1D {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "apl {}", self.hinges())?;
        for (a, b) in self.pairs() {
            writeln!(f, "{a:.16e} {b:.16e}")?;
        }
        Ok(())
    }
}

fn record_error(line: usize, message: impl Into<String>) -> PwlError {
    PwlError::Record {
        line,
        message: message.into(),
    }
}

fn parse_fields<'a>(
    lines: &mut impl Iterator<Item = (usize, &'a str)>,
    expected: usize,
) -> Result<(usize, Vec<&'a str>)> {
    let (line, text) = lines
        .next()
        .ok_or_else(|| record_error(0, "unexpected end of record"))?;
    let fields: Vec<&str> = text.split_whitespace().collect();
    if fields.len() != expected {
        return Err(record_error(
            line,
            format!("expected {expected} fields, found {}", fields.len()),
        ));
    }
    Ok((line, fields))
}

fn parse_float(line: usize, field: &str) -> Result<f64> {
    field
        .parse::<f64>()
        .map_err(|e| record_error(line, format!("{field:?}: {e}")))
}

fn numbered_lines(s: &str) -> impl Iterator<Item = (usize, &str)> {
    s.lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.trim()))
        .filter(|(_, l)| !l.is_empty())
}

impl FromStr for PwlFunction {
    type Err = PwlError;

    fn from_str(s: &str) -> Result<Self> {
        let mut lines = numbered_lines(s);
        let (line, header) = parse_fields(&mut lines, 3)?;
        if header[0] != "pwl" {
            return Err(record_error(line, "header must start with `pwl`"));
        }
        let count: usize = header[1]
            .parse()
            .map_err(|e| record_error(line, format!("breakpoint count: {e}")))?;
        let anchor = parse_float(line, header[2])?;
        let mut breakpoints = Vec::with_capacity(count);
        let mut slopes = Vec::with_capacity(count + 1);
        for _ in 0..count {
            let (line, fields) = parse_fields(&mut lines, 2)?;
            breakpoints.push(parse_float(line, fields[0])?);
            slopes.push(parse_float(line, fields[1])?);
        }
        let (line, tail) = parse_fields(&mut lines, 2)?;
        if tail[0] != "inf" {
            return Err(record_error(line, "last line must be the `inf` tail slope"));
        }
        slopes.push(parse_float(line, tail[1])?);
        if let Some((line, _)) = lines.next() {
            return Err(record_error(line, "trailing content"));
        }
        PwlFunction::new(breakpoints, slopes, anchor)
    }
}

impl FromStr for AplParams1D {
    type Err = PwlError;

    fn from_str(s: &str) -> Result<Self> {
        let mut lines = numbered_lines(s);
        let (line, header) = parse_fields(&mut lines, 2)?;
        if header[0] != "apl" {
            return Err(record_error(line, "header must start with `apl`"));
        }
        let count: usize = header[1]
            .parse()
            .map_err(|e| record_error(line, format!("hinge count: {e}")))?;
        let mut a = Vec::with_capacity(count);
        let mut b = Vec::with_capacity(count);
        for _ in 0..count {
            let (line, fields) = parse_fields(&mut lines, 2)?;
            a.push(parse_float(line, fields[0])?);
            b.push(parse_float(line, fields[1])?);
        }
        if let Some((line, _)) = lines.next() {
            return Err(record_error(line, "trailing content"));
        }
        AplParams1D::new(a, b)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn grid(lo: f64, hi: f64, n: usize) -> impl Iterator<Item = f64> {
        (0..n).map(move |i| lo + (hi - lo) * i as f64 / (n - 1) as f64)
    }

    // Oracle for eval_pwl: walk from the anchor to x one region at a time,
    // accumulating slope * width, without binary search or cached knots.
    fn integrate_oracle(bps: &[f64], slopes: &[f64], anchor: f64, x: f64) -> f64 {
        if bps.is_empty() {
            return anchor + slopes[0] * x;
        }
        if x < bps[0] {
            return anchor - slopes[0] * (bps[0] - x);
        }
        let mut value = anchor;
        let mut at = bps[0];
        for (j, &s) in slopes.iter().enumerate().skip(1) {
            let end = bps.get(j).copied().unwrap_or(f64::INFINITY);
            let stop = x.min(end);
            value += s * (stop - at);
            at = stop;
            if x < end {
                break;
            }
        }
        value
    }

    fn max_grid_error(f: impl Fn(f64) -> f64, g: impl Fn(f64) -> f64) -> f64 {
        grid(-10.0, 10.0, 10_000)
            .map(|x| (f(x) - g(x)).abs())
            .fold(0.0, f64::max)
    }

    #[test]
    fn eval_relu_branches() {
        let f = PwlFunction::new(vec![0.0], vec![0.0, 1.0], 0.0).unwrap();
        assert_eq!(f.eval(3.0).unwrap(), 3.0);
        assert_eq!(f.eval(-5.0).unwrap(), 0.0);
    }

    #[test]
    fn eval_left_region_matches_oracle() {
        let f = PwlFunction::new(vec![-1.0, 1.0], vec![2.0, 0.0, 1.0], 0.0).unwrap();
        let expected = integrate_oracle(&[-1.0, 1.0], &[2.0, 0.0, 1.0], 0.0, -2.0);
        assert_eq!(expected, -2.0);
        assert_eq!(f.eval(-2.0).unwrap(), expected);
        for x in grid(-4.0, 4.0, 801) {
            let o = integrate_oracle(f.breakpoints(), f.slopes(), 0.0, x);
            assert!((f.eval(x).unwrap() - o).abs() < 1e-12);
        }
    }

    #[test]
    fn breakpoint_belongs_to_right_region() {
        let f = PwlFunction::new(vec![1.0, 2.0], vec![0.0, 3.0, 1.0], 5.0).unwrap();
        assert_eq!(f.eval(1.0).unwrap(), 5.0);
        assert_eq!(f.eval(2.0).unwrap(), 8.0);
        assert_eq!(f.knot_values(), &[5.0, 8.0]);
    }

    #[test]
    fn eval_rejects_non_finite() {
        let f = PwlFunction::relu();
        assert!(matches!(f.eval(f64::NAN), Err(PwlError::NonFinite(_))));
        assert!(f.eval(f64::INFINITY).is_err());
    }

    #[test]
    fn constructor_checks_invariants() {
        assert!(matches!(
            PwlFunction::new(vec![1.0, 1.0], vec![0.0; 3], 0.0),
            Err(PwlError::UnorderedBreakpoints { index: 1 })
        ));
        assert!(matches!(
            PwlFunction::new(vec![0.0], vec![0.0], 0.0),
            Err(PwlError::SlopeCount { .. })
        ));
        assert!(AplParams1D::new(vec![1.0], vec![]).is_err());
        assert!(AplParams1D::new(vec![f64::NAN], vec![0.0]).is_err());
    }

    #[test]
    fn apl_to_pwl_without_hinges_is_relu() {
        let f = apl_to_pwl(&AplParams1D::relu());
        assert_eq!(f.breakpoints(), &[0.0]);
        assert_eq!(f.slopes(), &[0.0, 1.0]);
        assert_eq!(f.anchor_value(), 0.0);
    }

    #[test]
    fn apl_to_pwl_leaky_relu() {
        let k = 0.05;
        let f = apl_to_pwl(&AplParams1D::new(vec![-k], vec![0.0]).unwrap());
        assert_eq!(f.breakpoints(), &[0.0]);
        assert_eq!(f.slopes(), &[0.05, 1.0]);
    }

    #[test]
    fn apl_to_pwl_absolute_value() {
        let p = AplParams1D::new(vec![1.0], vec![0.0]).unwrap();
        let f = apl_to_pwl(&p);
        assert_eq!(f.breakpoints(), &[0.0]);
        assert_eq!(f.slopes(), &[-1.0, 1.0]);
        assert_eq!(max_grid_error(|x| f.eval(x).unwrap(), |x| p.eval(x)), 0.0);
    }

    #[test]
    fn apl_to_pwl_merges_and_drops_hinges() {
        // Two hinges at 1 cancel; a hinge at 0 with a = -1 cancels the rectifier.
        let p = AplParams1D::new(vec![0.5, -0.5, -1.0], vec![1.0, 1.0, 0.0]).unwrap();
        let f = apl_to_pwl(&p);
        assert!(f.breakpoints().is_empty());
        assert_eq!(f.slopes(), &[1.0]);
        assert_eq!(max_grid_error(|x| f.eval(x).unwrap(), |x| p.eval(x)), 0.0);
    }

    #[test]
    fn pwl_to_apl_relu_is_empty() {
        let p = pwl_to_apl(&PwlFunction::relu()).unwrap();
        assert_eq!(p.hinges(), 0);
    }

    #[test]
    fn pwl_to_apl_absolute_value() {
        let g = PwlFunction::new(vec![0.0], vec![-1.0, 1.0], 0.0).unwrap();
        let p = pwl_to_apl(&g).unwrap();
        assert_eq!(p.a(), &[1.0]);
        assert_eq!(p.b(), &[0.0]);
    }

    #[test]
    fn pwl_to_apl_two_breakpoints() {
        // g(0.5) = 0.5, slope -1 on [-1, 0.5) gives g(-1) = 2.
        let g = PwlFunction::new(vec![-1.0, 0.5], vec![0.5, -1.0, 1.0], 2.0).unwrap();
        assert_eq!(g.eval(0.5).unwrap(), 0.5);
        let p = pwl_to_apl(&g).unwrap();
        assert!(p.hinges() <= 4);
        assert!(max_grid_error(|x| p.eval(x), |x| g.eval(x).unwrap()) <= 1e-9);
    }

    #[test]
    fn pwl_to_apl_identity() {
        let g = PwlFunction::new(vec![], vec![1.0], 0.0).unwrap();
        let p = pwl_to_apl(&g).unwrap();
        assert_eq!(p.a(), &[-1.0]);
        assert_eq!(max_grid_error(|x| p.eval(x), |x| x), 0.0);
    }

    #[test]
    fn pwl_to_apl_rejects_tail_violations() {
        let wrong_slope = PwlFunction::new(vec![0.0], vec![0.0, 2.0], 0.0).unwrap();
        assert!(matches!(
            pwl_to_apl(&wrong_slope),
            Err(PwlError::RightTailSlope(s)) if s == 2.0
        ));
        let offset = PwlFunction::new(vec![0.0], vec![0.0, 1.0], 0.25).unwrap();
        assert!(matches!(
            pwl_to_apl(&offset),
            Err(PwlError::RightTailOffset { .. })
        ));
    }

    #[test]
    fn maxout_pair_cases() {
        let (convex, concave) = maxout_pair_from_apl(&AplParams1D::relu());
        assert_eq!(convex, PwlFunction::relu());
        assert_eq!(concave, PwlFunction::zero());

        let (convex, concave) =
            maxout_pair_from_apl(&AplParams1D::new(vec![-0.5], vec![1.0]).unwrap());
        assert_eq!(convex, PwlFunction::relu());
        assert_eq!(concave.breakpoints(), &[1.0]);
        assert_eq!(concave.slopes(), &[-0.5, 0.0]);
        assert_eq!(concave.eval(-1.0).unwrap(), 1.0);

        let p = AplParams1D::new(vec![1.0, -1.0], vec![-1.0, 1.0]).unwrap();
        let (convex, concave) = maxout_pair_from_apl(&p);
        let f = apl_to_pwl(&p);
        let err = max_grid_error(
            |x| convex.eval(x).unwrap() - concave.eval(x).unwrap(),
            |x| f.eval(x).unwrap(),
        );
        assert!(err <= 1e-12, "{err}");
    }

    #[test]
    fn maxout_pieces_reproduce_convex_part() {
        let p = AplParams1D::new(vec![0.7, -0.2, 1.3], vec![-2.0, 0.5, 1.5]).unwrap();
        let (convex, concave) = maxout_pair_from_apl(&p);
        let (cp, vp) = (convex.affine_pieces(), concave.affine_pieces());
        let err = max_grid_error(|x| maxout_eval(&cp, x) - maxout_eval(&vp, x), |x| p.eval(x));
        assert!(err <= 1e-12, "{err}");
    }

    #[test]
    fn mlpconv_cases() {
        assert_eq!(mlpconv_tied_eval(&AplParams1D::relu(), 2.0), 2.0);
        let p = AplParams1D::new(vec![0.5], vec![1.0]).unwrap();
        assert_eq!(mlpconv_tied_eval(&p, -1.0), 1.0);
        let net = TiedMlpConv::from_apl(&p);
        assert_eq!(net.signs(), &[1.0, -1.0]);
        assert_eq!(net.hidden(-1.0), vec![0.0, 2.0]);
    }

    #[test]
    fn records_parse_back() {
        let g = PwlFunction::new(vec![-1.0 / 3.0, 0.1], vec![0.3, -1.7, 1.0], 0.1 + 1.8 * (0.1 + 1.0 / 3.0)).unwrap();
        let text = g.to_string();
        assert!(text.starts_with("pwl 2 "));
        assert_eq!(text.lines().count(), 4);
        assert_eq!(text.parse::<PwlFunction>().unwrap(), g);

        let p = AplParams1D::new(vec![0.1, -2.5e-7], vec![3.0, -1e10]).unwrap();
        assert_eq!(p.to_string().parse::<AplParams1D>().unwrap(), p);
        assert_eq!(AplParams1D::relu().to_string(), "apl 0\n");
    }

    #[test]
    fn malformed_records_report_line() {
        let err = "pwl 1 0\n0 0 0\ninf 1\n".parse::<PwlFunction>().unwrap_err();
        assert!(matches!(err, PwlError::Record { line: 2, .. }));
        assert!("apl 2\n1 2\n".parse::<AplParams1D>().is_err());
        assert!("pwl 0 0\n1 1\n".parse::<PwlFunction>().is_err());
    }

    fn apl_strategy(max_s: usize) -> impl Strategy<Value = AplParams1D> {
        prop::collection::vec((-2.0f64..2.0, -4.0f64..4.0), 0..=max_s).prop_map(|pairs| {
            let (a, b) = pairs.into_iter().unzip();
            AplParams1D::new(a, b).unwrap()
        })
    }

    proptest! {
        #[test]
        fn canonical_form_matches_direct_evaluation(p in apl_strategy(6)) {
            let f = apl_to_pwl(&p);
            prop_assert_eq!(f.right_slope(), 1.0);
            let err = max_grid_error(|x| f.eval(x).unwrap(), |x| p.eval(x));
            prop_assert!(err <= 1e-12, "grid error {}", err);
        }

        #[test]
        fn tails_are_identity_and_minus_sum(p in apl_strategy(6)) {
            let start = p.identity_tail_start();
            for i in 0..50 {
                let x = start + i as f64 * 0.37;
                prop_assert_eq!(p.eval(x), x);
            }
            let low = p.b().iter().fold(0.0f64, |m, &b| m.min(b)) - 1.0;
            let d = p.eval(low) - p.eval(low - 1.0);
            prop_assert!((d - p.left_tail_slope()).abs() <= 1e-9);
            let f = apl_to_pwl(&p);
            if f.breakpoints().first().is_some_and(|&b0| b0 <= 0.0) {
                prop_assert!((f.left_slope() - p.left_tail_slope()).abs() <= 1e-12);
            }
        }

        #[test]
        fn round_trip_through_pwl(p in apl_strategy(6)) {
            let q = pwl_to_apl(&apl_to_pwl(&p)).unwrap();
            let err = max_grid_error(|x| q.eval(x), |x| p.eval(x));
            prop_assert!(err <= 1e-9, "grid error {}", err);
        }

        #[test]
        fn lipschitz_bound(p in apl_strategy(6), x in -8.0f64..8.0, y in -8.0f64..8.0) {
            let l = 1.0 + p.a().iter().map(|a| a.abs()).sum::<f64>();
            prop_assert!((p.eval(x) - p.eval(y)).abs() <= l * (x - y).abs() + 1e-12);
        }

        #[test]
        fn maxout_split_is_convex(p in apl_strategy(6)) {
            let (convex, concave) = maxout_pair_from_apl(&p);
            prop_assert!(convex.is_convex());
            prop_assert!(concave.is_convex());
        }

        #[test]
        fn mlpconv_is_bit_exact(p in apl_strategy(5), x in -6.0f64..6.0) {
            prop_assert_eq!(mlpconv_tied_eval(&p, x), p.eval(x));
        }

        #[test]
        fn records_round_trip(p in apl_strategy(6)) {
            let f = apl_to_pwl(&p);
            prop_assert_eq!(f.to_string().parse::<PwlFunction>().unwrap(), f);
            prop_assert_eq!(p.to_string().parse::<AplParams1D>().unwrap(), p);
        }
    }
}
