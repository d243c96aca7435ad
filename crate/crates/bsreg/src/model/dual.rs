//! Second-order forward-mode automatic differentiation.
//!
//! The expression tree is compiled once into a postorder instruction
//! tape and evaluated on a stack whose slots carry (value, gradient,
//! Hessian) with respect to the p parameters. All chain rules are exact,
//! so D and G carry no truncation error; finite differences exist only
//! in the test suite as an oracle.

use super::parse::{BinOp, Expr, Func};
use thiserror::Error;

#[derive(Debug, Error, Clone, Copy, PartialEq)]
pub enum EvalErrorKind {
    #[error("log of nonpositive value {0}")]
    LogNonpositive(f64),
    #[error("square root of negative value {0}")]
    SqrtNegative(f64),
    #[error("square root is not differentiable at 0")]
    SqrtAtZero,
    #[error("division by zero")]
    DivisionByZero,
    #[error("power with nonpositive base {base} needs an integer exponent")]
    PowNonpositiveBase { base: f64 },
}

#[derive(Debug, Error, Clone, Copy, PartialEq)]
#[error("evaluation failed at row {row}: {kind}")]
pub struct EvalError {
    pub row: usize,
    pub kind: EvalErrorKind,
}

#[derive(Debug, Clone, Copy)]
pub(crate) enum Instr {
    Num(f64),
    Param(usize),
    Covar(usize),
    Neg,
    Add,
    Sub,
    Mul,
    Div,
    /// `exponent_has_params` decides between the constant-exponent power
    /// rule and the general exp(v log u) composition.
    Pow { exponent_has_params: bool },
    Call(Func),
}

pub(crate) fn compile(e: &Expr, tape: &mut Vec<Instr>) {
    match e {
        Expr::Num(v) => tape.push(Instr::Num(*v)),
        Expr::Param(i) => tape.push(Instr::Param(*i)),
        Expr::Covar(i) => tape.push(Instr::Covar(*i)),
        Expr::Neg(inner) => {
            compile(inner, tape);
            tape.push(Instr::Neg);
        }
        Expr::Bin(op, l, r) => {
            compile(l, tape);
            compile(r, tape);
            tape.push(match op {
                BinOp::Add => Instr::Add,
                BinOp::Sub => Instr::Sub,
                BinOp::Mul => Instr::Mul,
                BinOp::Div => Instr::Div,
                BinOp::Pow => Instr::Pow {
                    exponent_has_params: super::parse::contains_param(r),
                },
            });
        }
        Expr::Call(func, arg) => {
            compile(arg, tape);
            tape.push(Instr::Call(*func));
        }
    }
}

pub(crate) fn stack_depth(tape: &[Instr]) -> usize {
    let mut depth = 0usize;
    let mut max = 0usize;
    for instr in tape {
        match instr {
            Instr::Num(_) | Instr::Param(_) | Instr::Covar(_) => {
                depth += 1;
                max = max.max(depth);
            }
            Instr::Add | Instr::Sub | Instr::Mul | Instr::Div | Instr::Pow { .. } => depth -= 1,
            Instr::Neg | Instr::Call(_) => {}
        }
    }
    max
}

/// Reusable evaluation stack. Slot k occupies `val[k]`, `grad[kp..kp+p]`,
/// `hess[kpp..kpp+p²]`; binary operations always combine the two topmost
/// slots, which are adjacent, so split_at_mut suffices for aliasing.
pub(crate) struct DualStack {
    p: usize,
    val: Vec<f64>,
    grad: Vec<f64>,
    hess: Vec<f64>,
    // scratch for the general power rule
    tmp_g: Vec<f64>,
    tmp_h: Vec<f64>,
    top: usize,
}

impl DualStack {
    pub(crate) fn new(p: usize, depth: usize) -> Self {
        let depth = depth.max(1);
        DualStack {
            p,
            val: vec![0.0; depth],
            grad: vec![0.0; depth * p],
            hess: vec![0.0; depth * p * p],
            tmp_g: vec![0.0; p],
            tmp_h: vec![0.0; p * p],
            top: 0,
        }
    }

    pub(crate) fn value(&self) -> f64 {
        self.val[self.top - 1]
    }

    pub(crate) fn grad(&self) -> &[f64] {
        let p = self.p;
        &self.grad[(self.top - 1) * p..self.top * p]
    }

    pub(crate) fn hess(&self) -> &[f64] {
        let pp = self.p * self.p;
        &self.hess[(self.top - 1) * pp..self.top * pp]
    }

    fn push_const(&mut self, v: f64) {
        let (p, pp) = (self.p, self.p * self.p);
        let k = self.top;
        self.val[k] = v;
        self.grad[k * p..(k + 1) * p].fill(0.0);
        self.hess[k * pp..(k + 1) * pp].fill(0.0);
        self.top += 1;
    }

    fn push_param(&mut self, r: usize, v: f64) {
        self.push_const(v);
        let k = self.top - 1;
        self.grad[k * self.p + r] = 1.0;
    }

    fn is_const_top(&self) -> bool {
        let k = self.top - 1;
        let p = self.p;
        let pp = p * p;
        self.grad[k * p..(k + 1) * p].iter().all(|&t| t == 0.0)
            && self.hess[k * pp..(k + 1) * pp].iter().all(|&t| t == 0.0)
    }

    pub(crate) fn run(
        &mut self,
        tape: &[Instr],
        beta: &[f64],
        covars: &[f64],
    ) -> Result<(), EvalErrorKind> {
        self.top = 0;
        let p = self.p;
        let pp = p * p;
        for instr in tape {
            match *instr {
                Instr::Num(v) => self.push_const(v),
                Instr::Covar(i) => self.push_const(covars[i]),
                Instr::Param(r) => self.push_param(r, beta[r]),
                Instr::Neg => {
                    let k = self.top - 1;
                    self.val[k] = -self.val[k];
                    for t in &mut self.grad[k * p..(k + 1) * p] {
                        *t = -*t;
                    }
                    for t in &mut self.hess[k * pp..(k + 1) * pp] {
                        *t = -*t;
                    }
                }
                Instr::Add | Instr::Sub => {
                    let b = self.top - 1;
                    let a = b - 1;
                    let sign = if matches!(instr, Instr::Add) { 1.0 } else { -1.0 };
                    self.val[a] += sign * self.val[b];
                    let (ga, gb) = self.grad[a * p..(b + 1) * p].split_at_mut(p);
                    for (x, y) in ga.iter_mut().zip(gb.iter()) {
                        *x += sign * *y;
                    }
                    let (ha, hb) = self.hess[a * pp..(b + 1) * pp].split_at_mut(pp);
                    for (x, y) in ha.iter_mut().zip(hb.iter()) {
                        *x += sign * *y;
                    }
                    self.top -= 1;
                }
                Instr::Mul => {
                    let b = self.top - 1;
                    let a = b - 1;
                    let (u, v) = (self.val[a], self.val[b]);
                    let (ga, gb) = self.grad[a * p..(b + 1) * p].split_at_mut(p);
                    let (ha, hb) = self.hess[a * pp..(b + 1) * pp].split_at_mut(pp);
                    for r in 0..p {
                        for s in r..p {
                            let h = ha[r * p + s] * v
                                + u * hb[r * p + s]
                                + ga[r] * gb[s]
                                + ga[s] * gb[r];
                            ha[r * p + s] = h;
                            ha[s * p + r] = h;
                        }
                    }
                    for r in 0..p {
                        ga[r] = ga[r] * v + u * gb[r];
                    }
                    self.val[a] = u * v;
                    self.top -= 1;
                }
                Instr::Div => {
                    let b = self.top - 1;
                    let a = b - 1;
                    let v = self.val[b];
                    if v == 0.0 {
                        return Err(EvalErrorKind::DivisionByZero);
                    }
                    let w = self.val[a] / v;
                    let (ga, gb) = self.grad[a * p..(b + 1) * p].split_at_mut(p);
                    let (ha, hb) = self.hess[a * pp..(b + 1) * pp].split_at_mut(pp);
                    for r in 0..p {
                        ga[r] = (ga[r] - w * gb[r]) / v;
                    }
                    for r in 0..p {
                        for s in r..p {
                            let h = (ha[r * p + s]
                                - w * hb[r * p + s]
                                - ga[r] * gb[s]
                                - ga[s] * gb[r])
                                / v;
                            ha[r * p + s] = h;
                            ha[s * p + r] = h;
                        }
                    }
                    self.val[a] = w;
                    self.top -= 1;
                }
                Instr::Pow { exponent_has_params } => {
                    self.pow(exponent_has_params)?;
                }
                Instr::Call(func) => {
                    let k = self.top - 1;
                    let u = self.val[k];
                    let (f, fp, fpp) = match func {
                        Func::Exp => {
                            let e = u.exp();
                            (e, e, e)
                        }
                        Func::Log => {
                            if u <= 0.0 {
                                return Err(EvalErrorKind::LogNonpositive(u));
                            }
                            (u.ln(), 1.0 / u, -1.0 / (u * u))
                        }
                        Func::Sqrt => {
                            if u < 0.0 {
                                return Err(EvalErrorKind::SqrtNegative(u));
                            }
                            if u == 0.0 {
                                if self.is_const_top() {
                                    (0.0, 0.0, 0.0)
                                } else {
                                    return Err(EvalErrorKind::SqrtAtZero);
                                }
                            } else {
                                let s = u.sqrt();
                                (s, 0.5 / s, -0.25 / (s * u))
                            }
                        }
                        Func::Sinh => (u.sinh(), u.cosh(), u.sinh()),
                        Func::Cosh => (u.cosh(), u.sinh(), u.cosh()),
                        Func::Tanh => {
                            let t = u.tanh();
                            let sech2 = 1.0 - t * t;
                            (t, sech2, -2.0 * t * sech2)
                        }
                    };
                    self.chain_unary(f, fp, fpp);
                }
            }
        }
        debug_assert_eq!(self.top, 1);
        Ok(())
    }

    /// Replace the top slot (value u, gradient g, Hessian h) by
    /// f(u) with f'(u) = fp, f''(u) = fpp:
    /// new gradient fp·g, new Hessian fp·h + fpp·g gᵀ.
    fn chain_unary(&mut self, f: f64, fp: f64, fpp: f64) {
        let k = self.top - 1;
        let p = self.p;
        let pp = p * p;
        let g = &mut self.grad[k * p..(k + 1) * p];
        let h = &mut self.hess[k * pp..(k + 1) * pp];
        for r in 0..p {
            for s in r..p {
                let v = fp * h[r * p + s] + fpp * g[r] * g[s];
                h[r * p + s] = v;
                h[s * p + r] = v;
            }
        }
        for t in g.iter_mut() {
            *t *= fp;
        }
        self.val[k] = f;
    }

    fn pow(&mut self, exponent_has_params: bool) -> Result<(), EvalErrorKind> {
        let p = self.p;
        let pp = p * p;
        let b = self.top - 1;
        let a = b - 1;
        let base = self.val[a];
        let expv = self.val[b];
        if !exponent_has_params {
            // exponent may still vary with covariates, but carries no
            // parameter derivatives; treat it as the constant k = expv
            self.top -= 1;
            let k = expv;
            let is_int = k.fract() == 0.0 && k.abs() <= 2_147_483_647.0;
            if is_int {
                let m = k as i32;
                if m == 0 {
                    let top = self.top - 1;
                    self.val[top] = 1.0;
                    self.grad[top * p..(top + 1) * p].fill(0.0);
                    self.hess[top * pp..(top + 1) * pp].fill(0.0);
                    return Ok(());
                }
                if base == 0.0 && m < 0 {
                    return Err(EvalErrorKind::DivisionByZero);
                }
                let f = base.powi(m);
                let fp = f64::from(m) * base.powi(m - 1);
                let fpp = if m == 1 {
                    0.0
                } else {
                    f64::from(m) * f64::from(m - 1) * base.powi(m - 2)
                };
                self.chain_unary(f, fp, fpp);
            } else {
                if base <= 0.0 {
                    return Err(EvalErrorKind::PowNonpositiveBase { base });
                }
                let f = base.powf(k);
                let fp = k * base.powf(k - 1.0);
                let fpp = k * (k - 1.0) * base.powf(k - 2.0);
                self.chain_unary(f, fp, fpp);
            }
            return Ok(());
        }
        // u^v with parameters in the exponent: differentiate w = exp(v log u)
        if base <= 0.0 {
            return Err(EvalErrorKind::PowNonpositiveBase { base });
        }
        let lu = base.ln();
        let w = (expv * lu).exp();
        {
            let (ga, gb) = self.grad[a * p..(b + 1) * p].split_at_mut(p);
            let (ha, hb) = self.hess[a * pp..(b + 1) * pp].split_at_mut(pp);
            // m = v log u; gradient first into scratch
            for r in 0..p {
                self.tmp_g[r] = gb[r] * lu + expv * ga[r] / base;
            }
            for r in 0..p {
                for s in r..p {
                    let m_h = hb[r * p + s] * lu
                        + gb[r] * ga[s] / base
                        + gb[s] * ga[r] / base
                        + expv * (ha[r * p + s] / base - ga[r] * ga[s] / (base * base));
                    let v = w * (m_h + self.tmp_g[r] * self.tmp_g[s]);
                    self.tmp_h[r * p + s] = v;
                    self.tmp_h[s * p + r] = v;
                }
            }
            for r in 0..p {
                ga[r] = w * self.tmp_g[r];
            }
            ha.copy_from_slice(&self.tmp_h);
        }
        self.val[a] = w;
        self.top -= 1;
        Ok(())
    }
}

/// Value-only evaluation over the same tape, for hot paths that do not
/// need derivatives.
pub(crate) fn eval_value(
    tape: &[Instr],
    beta: &[f64],
    covars: &[f64],
    stack: &mut Vec<f64>,
) -> Result<f64, EvalErrorKind> {
    stack.clear();
    for instr in tape {
        match *instr {
            Instr::Num(v) => stack.push(v),
            Instr::Param(r) => stack.push(beta[r]),
            Instr::Covar(i) => stack.push(covars[i]),
            Instr::Neg => {
                let k = stack.len() - 1;
                stack[k] = -stack[k];
            }
            Instr::Add => {
                let b = stack.pop().expect("operand");
                let k = stack.len() - 1;
                stack[k] += b;
            }
            Instr::Sub => {
                let b = stack.pop().expect("operand");
                let k = stack.len() - 1;
                stack[k] -= b;
            }
            Instr::Mul => {
                let b = stack.pop().expect("operand");
                let k = stack.len() - 1;
                stack[k] *= b;
            }
            Instr::Div => {
                let b = stack.pop().expect("operand");
                if b == 0.0 {
                    return Err(EvalErrorKind::DivisionByZero);
                }
                let k = stack.len() - 1;
                stack[k] /= b;
            }
            Instr::Pow { .. } => {
                let e = stack.pop().expect("operand");
                let k = stack.len() - 1;
                let base = stack[k];
                let is_int = e.fract() == 0.0 && e.abs() <= 2_147_483_647.0;
                stack[k] = if is_int {
                    let m = e as i32;
                    if base == 0.0 && m < 0 {
                        return Err(EvalErrorKind::DivisionByZero);
                    }
                    base.powi(m)
                } else {
                    if base <= 0.0 {
                        return Err(EvalErrorKind::PowNonpositiveBase { base });
                    }
                    base.powf(e)
                };
            }
            Instr::Call(func) => {
                let k = stack.len() - 1;
                let u = stack[k];
                stack[k] = match func {
                    Func::Exp => u.exp(),
                    Func::Log => {
                        if u <= 0.0 {
                            return Err(EvalErrorKind::LogNonpositive(u));
                        }
                        u.ln()
                    }
                    Func::Sqrt => {
                        if u < 0.0 {
                            return Err(EvalErrorKind::SqrtNegative(u));
                        }
                        u.sqrt()
                    }
                    Func::Sinh => u.sinh(),
                    Func::Cosh => u.cosh(),
                    Func::Tanh => u.tanh(),
                };
            }
        }
    }
    Ok(stack.pop().expect("result"))
}
