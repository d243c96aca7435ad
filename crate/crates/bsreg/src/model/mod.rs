//! Mean-function models: parsed expressions over named parameters and
//! covariates, evaluated together with their first and second parameter
//! derivatives.
//!
//! `eval_bundle` produces the n-vector μ, the n×p Jacobian D with
//! dᵢᵣ = ∂μᵢ/∂βᵣ, and the n×p² matrix G whose row i is the column-major
//! vec of the Hessian Mᵢ with entries gᵢᵣₛ = ∂²μᵢ/∂βᵣ∂βₛ.

mod dual;
mod parse;

pub use dual::{EvalError, EvalErrorKind};
pub use parse::ParseError;

use crate::linalg;
use ndarray::{Array1, Array2};
use std::fmt;
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum DatasetError {
    #[error("y has {ny} rows but x has {nx}")]
    LengthMismatch { ny: usize, nx: usize },
    #[error("{names} column names given for {cols} covariate columns")]
    NameCount { names: usize, cols: usize },
    #[error("duplicate column name `{0}`")]
    DuplicateColumn(String),
    #[error("non-finite value in column `{col}` at row {row}")]
    NonFinite { col: String, row: usize },
    #[error("non-finite response at row {row}")]
    NonFiniteResponse { row: usize },
    #[error("dataset has no column `{0}` required by the model")]
    MissingColumn(String),
}

/// Observed responses (log-lifetimes) with named covariate columns.
#[derive(Debug, Clone)]
pub struct Dataset {
    y: Array1<f64>,
    x: Array2<f64>,
    names: Vec<String>,
}

impl Dataset {
    pub fn new(y: Array1<f64>, x: Array2<f64>, names: Vec<String>) -> Result<Self, DatasetError> {
        if y.len() != x.nrows() {
            return Err(DatasetError::LengthMismatch {
                ny: y.len(),
                nx: x.nrows(),
            });
        }
        if names.len() != x.ncols() {
            return Err(DatasetError::NameCount {
                names: names.len(),
                cols: x.ncols(),
            });
        }
        for (i, name) in names.iter().enumerate() {
            if names[..i].contains(name) {
                return Err(DatasetError::DuplicateColumn(name.clone()));
            }
        }
        if let Some(row) = y.iter().position(|v| !v.is_finite()) {
            return Err(DatasetError::NonFiniteResponse { row });
        }
        for (j, name) in names.iter().enumerate() {
            for i in 0..x.nrows() {
                if !x[[i, j]].is_finite() {
                    return Err(DatasetError::NonFinite {
                        col: name.clone(),
                        row: i,
                    });
                }
            }
        }
        Ok(Dataset { y, x, names })
    }

    pub fn n(&self) -> usize {
        self.y.len()
    }

    pub fn y(&self) -> &Array1<f64> {
        &self.y
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    /// Covariate matrix with columns reordered to the model's covariate
    /// list; fails naming the first column the data does not provide.
    pub fn design_for(&self, model: &MeanModel) -> Result<Array2<f64>, DatasetError> {
        let mut out = Array2::<f64>::zeros((self.x.nrows(), model.covariates.len()));
        for (k, want) in model.covariates.iter().enumerate() {
            let j = self
                .names
                .iter()
                .position(|have| have == want)
                .ok_or_else(|| DatasetError::MissingColumn(want.clone()))?;
            out.column_mut(k).assign(&self.x.column(j));
        }
        Ok(out)
    }
}

/// μ, D, and G evaluated at one parameter point.
#[derive(Debug, Clone)]
pub struct DerivativeBundle {
    /// fitted mean per observation
    pub mu: Array1<f64>,
    /// n×p Jacobian, dᵢᵣ = ∂μᵢ/∂βᵣ
    pub d: Array2<f64>,
    /// n×p² second derivatives; row i is vec(Mᵢ) stacked column-major,
    /// so gᵢᵣₛ sits at column s·p + r
    pub g: Array2<f64>,
}

impl DerivativeBundle {
    pub fn n(&self) -> usize {
        self.mu.len()
    }

    pub fn p(&self) -> usize {
        self.d.ncols()
    }

    /// Reconstruct the p×p Hessian Mᵢ from row i of G.
    pub fn hessian(&self, i: usize) -> Array2<f64> {
        let p = self.p();
        let mut m = Array2::<f64>::zeros((p, p));
        for s in 0..p {
            for r in 0..p {
                m[[r, s]] = self.g[[i, s * p + r]];
            }
        }
        m
    }
}

/// Condition diagnostics for the Jacobian D.
#[derive(Debug, Clone, Copy)]
pub struct RankReport {
    /// condition number of DᵀD (ratio of extreme eigenvalues)
    pub condition: f64,
    /// set when the condition exceeds 1e10 (or is not finite)
    pub deficient: bool,
}

/// Condition-number estimate of DᵀD; flags rank deficiency past 1e10.
pub fn check_rank(d: &Array2<f64>) -> RankReport {
    let dtd = d.t().dot(d);
    let ev = linalg::sym_eigenvalues(&dtd);
    let lo = ev.first().copied().unwrap_or(0.0);
    let hi = ev.last().copied().unwrap_or(0.0);
    let condition = if lo > 0.0 { hi / lo } else { f64::INFINITY };
    RankReport {
        condition,
        deficient: !(condition <= 1e10),
    }
}

/// Catalog of partially nonlinear and single-parameter test-bed models,
/// with the linear coefficients first and the scalar nonlinear parameter
/// last.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BuiltinModel {
    /// l1*z1 + l2*z2 + eta*exp(gamma*x)
    Gallant,
    /// lambda - eta*log(x1 + gamma*x2)
    DarbyEllis,
    /// lambda + eta*log(x1/(gamma + x2))
    Stone,
    /// lambda - eta*gamma^x
    AsymptoticRegression,
    /// lambda - eta*exp(-gamma*x)
    WeibullType,
    /// eta*x/(gamma + x)
    MichaelisMenten,
    /// exp(beta*x)
    Exponential,
}

impl BuiltinModel {
    pub const ALL: [BuiltinModel; 7] = [
        BuiltinModel::Gallant,
        BuiltinModel::DarbyEllis,
        BuiltinModel::Stone,
        BuiltinModel::AsymptoticRegression,
        BuiltinModel::WeibullType,
        BuiltinModel::MichaelisMenten,
        BuiltinModel::Exponential,
    ];

    pub fn name(self) -> &'static str {
        match self {
            BuiltinModel::Gallant => "gallant",
            BuiltinModel::DarbyEllis => "darby_ellis",
            BuiltinModel::Stone => "stone",
            BuiltinModel::AsymptoticRegression => "asymptotic_regression",
            BuiltinModel::WeibullType => "weibull_type",
            BuiltinModel::MichaelisMenten => "michaelis_menten",
            BuiltinModel::Exponential => "exponential",
        }
    }

    pub fn from_name(name: &str) -> Option<BuiltinModel> {
        BuiltinModel::ALL.iter().copied().find(|m| m.name() == name)
    }

    fn blueprint(self) -> (&'static str, &'static [&'static str], &'static [&'static str]) {
        match self {
            BuiltinModel::Gallant => (
                "l1*z1 + l2*z2 + eta*exp(gamma*x)",
                &["l1", "l2", "eta", "gamma"],
                &["z1", "z2", "x"],
            ),
            BuiltinModel::DarbyEllis => (
                "lambda - eta*log(x1 + gamma*x2)",
                &["lambda", "eta", "gamma"],
                &["x1", "x2"],
            ),
            BuiltinModel::Stone => (
                "lambda + eta*log(x1/(gamma + x2))",
                &["lambda", "eta", "gamma"],
                &["x1", "x2"],
            ),
            BuiltinModel::AsymptoticRegression => {
                ("lambda - eta*gamma^x", &["lambda", "eta", "gamma"], &["x"])
            }
            BuiltinModel::WeibullType => {
                ("lambda - eta*exp(-gamma*x)", &["lambda", "eta", "gamma"], &["x"])
            }
            BuiltinModel::MichaelisMenten => ("eta*x/(gamma + x)", &["eta", "gamma"], &["x"]),
            BuiltinModel::Exponential => ("exp(beta*x)", &["beta"], &["x"]),
        }
    }
}

/// A parsed mean function together with its compiled evaluation tape.
#[derive(Debug, Clone)]
pub struct MeanModel {
    ast: parse::Expr,
    tape: Vec<dual::Instr>,
    depth: usize,
    params: Vec<String>,
    covariates: Vec<String>,
}

impl MeanModel {
    pub fn parse(text: &str, params: &[&str], covariates: &[&str]) -> Result<Self, ParseError> {
        let params: Vec<String> = params.iter().map(|s| s.to_string()).collect();
        let covariates: Vec<String> = covariates.iter().map(|s| s.to_string()).collect();
        validate_names(&params, &covariates)?;
        let mut resolver = parse::Resolver::Declared {
            params: &params,
            covariates: &covariates,
        };
        let ast = parse::parse(text, &mut resolver)?;
        Ok(Self::from_parts(ast, params, covariates))
    }

    /// Parse with only the parameters declared; every other identifier
    /// becomes a covariate, ordered by first appearance. The CLI uses
    /// this to learn which CSV columns a model needs.
    pub fn parse_inferring(text: &str, params: &[&str]) -> Result<Self, ParseError> {
        let params: Vec<String> = params.iter().map(|s| s.to_string()).collect();
        validate_names(&params, &[])?;
        let mut covariates = Vec::new();
        let mut resolver = parse::Resolver::InferCovariates {
            params: &params,
            covariates: &mut covariates,
        };
        let ast = parse::parse(text, &mut resolver)?;
        Ok(Self::from_parts(ast, params, covariates))
    }

    pub fn builtin(which: BuiltinModel) -> Self {
        let (text, params, covariates) = which.blueprint();
        Self::parse(text, params, covariates).expect("builtin expressions parse")
    }

    fn from_parts(ast: parse::Expr, params: Vec<String>, covariates: Vec<String>) -> Self {
        let mut tape = Vec::new();
        dual::compile(&ast, &mut tape);
        let depth = dual::stack_depth(&tape);
        MeanModel {
            ast,
            tape,
            depth,
            params,
            covariates,
        }
    }

    pub fn params(&self) -> &[String] {
        &self.params
    }

    pub fn covariates(&self) -> &[String] {
        &self.covariates
    }

    pub fn n_params(&self) -> usize {
        self.params.len()
    }

    pub fn n_covariates(&self) -> usize {
        self.covariates.len()
    }

    /// True when the expression is affine in the parameters (each
    /// parameter enters only linearly, scaled by covariate terms), in
    /// which case ordinary least squares provides starting values.
    pub fn is_affine_in_params(&self) -> bool {
        parse::is_affine_in_params(&self.ast)
    }

    /// Evaluate μ, D, G at beta over the covariate rows of x.
    pub fn eval_bundle(&self, x: &Array2<f64>, beta: &[f64]) -> Result<DerivativeBundle, EvalError> {
        let n = x.nrows();
        let p = self.params.len();
        assert_eq!(
            x.ncols(),
            self.covariates.len(),
            "covariate matrix has {} columns, model declares {}",
            x.ncols(),
            self.covariates.len()
        );
        assert_eq!(beta.len(), p, "beta has {} entries, model has {} parameters", beta.len(), p);
        let mut mu = Array1::<f64>::zeros(n);
        let mut d = Array2::<f64>::zeros((n, p));
        let mut g = Array2::<f64>::zeros((n, p * p));
        let mut stack = dual::DualStack::new(p, self.depth);
        let mut row = vec![0.0; self.covariates.len()];
        for i in 0..n {
            for (j, slot) in row.iter_mut().enumerate() {
                *slot = x[[i, j]];
            }
            stack
                .run(&self.tape, beta, &row)
                .map_err(|kind| EvalError { row: i, kind })?;
            mu[i] = stack.value();
            for (r, &v) in stack.grad().iter().enumerate() {
                d[[i, r]] = v;
            }
            let h = stack.hess(); // row-major p×p, exactly symmetric
            for s in 0..p {
                for r in 0..p {
                    g[[i, s * p + r]] = h[r * p + s];
                }
            }
        }
        Ok(DerivativeBundle { mu, d, g })
    }

    /// Evaluate only μ (no derivatives).
    pub fn eval_mu(&self, x: &Array2<f64>, beta: &[f64]) -> Result<Array1<f64>, EvalError> {
        let n = x.nrows();
        assert_eq!(x.ncols(), self.covariates.len());
        assert_eq!(beta.len(), self.params.len());
        let mut mu = Array1::<f64>::zeros(n);
        let mut stack = Vec::with_capacity(self.depth);
        let mut row = vec![0.0; self.covariates.len()];
        for i in 0..n {
            for (j, slot) in row.iter_mut().enumerate() {
                *slot = x[[i, j]];
            }
            mu[i] = dual::eval_value(&self.tape, beta, &row, &mut stack)
                .map_err(|kind| EvalError { row: i, kind })?;
        }
        Ok(mu)
    }
}

impl fmt::Display for MeanModel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        parse::DisplayExpr {
            expr: &self.ast,
            params: &self.params,
            covariates: &self.covariates,
        }
        .fmt(f)
    }
}

impl PartialEq for MeanModel {
    fn eq(&self, other: &Self) -> bool {
        self.ast == other.ast && self.params == other.params && self.covariates == other.covariates
    }
}

fn validate_names(params: &[String], covariates: &[String]) -> Result<(), ParseError> {
    if params.is_empty() {
        return Err(ParseError::NoParameters);
    }
    let mut seen: Vec<&String> = Vec::new();
    for name in params.iter().chain(covariates.iter()) {
        if !is_identifier(name) {
            return Err(ParseError::InvalidName { name: name.clone() });
        }
        if parse::is_function_name(name) {
            return Err(ParseError::ReservedName { name: name.clone() });
        }
        if seen.contains(&name) {
            return Err(ParseError::DuplicateName { name: name.clone() });
        }
        seen.push(name);
    }
    Ok(())
}

fn is_identifier(name: &str) -> bool {
    let mut chars = name.chars();
    match chars.next() {
        Some(c) if c.is_ascii_alphabetic() || c == '_' => {}
        _ => return false,
    }
    chars.all(|c| c.is_ascii_alphanumeric() || c == '_')
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn eval_one(model: &MeanModel, covars: &[f64], beta: &[f64]) -> f64 {
        let x = Array2::from_shape_vec((1, covars.len()), covars.to_vec()).unwrap();
        model.eval_mu(&x, beta).unwrap()[0]
    }

    #[test]
    fn parses_the_fatigue_model() {
        let m = MeanModel::parse("b1 + b2*exp(b3/w)", &["b1", "b2", "b3"], &["w"]).unwrap();
        assert_eq!(m.n_params(), 3);
        let got = eval_one(&m, &[2.0], &[1.0, 2.0, 4.0]);
        assert!((got - (1.0 + 2.0 * (4.0f64 / 2.0).exp())).abs() < 1e-15);
    }

    #[test]
    fn unknown_identifier_is_reported_with_name() {
        let err = MeanModel::parse("b1 + q*x", &["b1"], &["x"]).unwrap_err();
        assert_eq!(
            err,
            ParseError::UnknownIdentifier {
                pos: 5,
                name: "q".into()
            }
        );
    }

    #[test]
    fn syntax_errors_carry_positions() {
        assert!(matches!(
            MeanModel::parse("a + * b", &["a", "b"], &[]),
            Err(ParseError::Syntax { pos: 4, .. })
        ));
        assert!(matches!(
            MeanModel::parse("(a + b", &["a", "b"], &[]),
            Err(ParseError::Syntax { .. })
        ));
        assert!(matches!(
            MeanModel::parse("a b", &["a", "b"], &[]),
            Err(ParseError::Syntax { .. })
        ));
        assert!(matches!(
            MeanModel::parse("", &["a"], &[]),
            Err(ParseError::Empty)
        ));
        assert!(matches!(
            MeanModel::parse("a @ b", &["a", "b"], &[]),
            Err(ParseError::Syntax { pos: 2, .. })
        ));
    }

    #[test]
    fn function_errors() {
        assert!(matches!(
            MeanModel::parse("foo(a)", &["a"], &[]),
            Err(ParseError::UnknownFunction { .. })
        ));
        assert!(matches!(
            MeanModel::parse("exp()", &["a"], &[]),
            Err(ParseError::Arity { .. })
        ));
    }

    #[test]
    fn name_validation() {
        assert!(matches!(
            MeanModel::parse("a + a", &["a"], &["a"]),
            Err(ParseError::DuplicateName { .. })
        ));
        assert!(matches!(
            MeanModel::parse("exp(x)", &["exp"], &["x"]),
            Err(ParseError::ReservedName { .. })
        ));
        assert!(matches!(
            MeanModel::parse("x", &[], &["x"]),
            Err(ParseError::NoParameters)
        ));
        assert!(matches!(
            MeanModel::parse("a", &["2a"], &[]),
            Err(ParseError::InvalidName { .. })
        ));
    }

    #[test]
    fn precedence_and_associativity() {
        let m = MeanModel::parse("a - b - c", &["a", "b", "c"], &[]).unwrap();
        assert_eq!(eval_one(&m, &[], &[10.0, 3.0, 2.0]), 5.0);
        // ^ is right-associative: 2^(3^2) = 512, not (2^3)^2 = 64
        let m = MeanModel::parse("a^b^c", &["a", "b", "c"], &[]).unwrap();
        assert_eq!(eval_one(&m, &[], &[2.0, 3.0, 2.0]), 512.0);
        // unary minus applies to the whole power
        let m = MeanModel::parse("-a^2", &["a"], &[]).unwrap();
        assert_eq!(eval_one(&m, &[], &[3.0]), -9.0);
        let m = MeanModel::parse("a + b*c", &["a", "b", "c"], &[]).unwrap();
        assert_eq!(eval_one(&m, &[], &[1.0, 2.0, 3.0]), 7.0);
        let m = MeanModel::parse("2e2 + a", &["a"], &[]).unwrap();
        assert_eq!(eval_one(&m, &[], &[1.0]), 201.0);
    }

    #[test]
    fn display_round_trips_structurally() {
        for text in [
            "b1 + b2*exp(b3/w)",
            "-(a + b)^2 - 3.5e-2*x",
            "sqrt(a*x) + tanh(b)",
            "a/(b + 1) - cosh(x)*sinh(a)",
        ] {
            let m = MeanModel::parse(text, &["a", "b", "b1", "b2", "b3"], &["x", "w"]).unwrap();
            let shown = m.to_string();
            let back =
                MeanModel::parse(&shown, &["a", "b", "b1", "b2", "b3"], &["x", "w"]).unwrap();
            assert_eq!(m, back, "round trip of {text} via {shown}");
            assert_eq!(shown, back.to_string());
        }
    }

    #[test]
    fn linear_model_has_exactly_zero_hessian() {
        let m = MeanModel::parse("b1 + b2*z", &["b1", "b2"], &["z"]).unwrap();
        let x = array![[0.3], [1.7], [-2.0]];
        let b = m.eval_bundle(&x, &[4.0, -1.5]).unwrap();
        assert!(b.g.iter().all(|&v| v == 0.0));
        for i in 0..3 {
            assert_eq!(b.d[[i, 0]], 1.0);
            assert_eq!(b.d[[i, 1]], x[[i, 0]]);
            assert_eq!(b.mu[i], 4.0 - 1.5 * x[[i, 0]]);
        }
    }

    #[test]
    fn michaelis_menten_halves_at_x_equal_gamma() {
        let m = MeanModel::builtin(BuiltinModel::MichaelisMenten);
        let (eta, gamma) = (3.0, 0.5);
        let got = eval_one(&m, &[gamma], &[eta, gamma]);
        assert!((got - eta / 2.0).abs() < 1e-15);
    }

    #[test]
    fn product_exp_example_matches_hand_derivatives() {
        let m = MeanModel::parse("b1*exp(b2)", &["b1", "b2"], &[]).unwrap();
        let x = Array2::<f64>::zeros((1, 0));
        let b = m.eval_bundle(&x, &[2.0, 0.0]).unwrap();
        assert_eq!(b.mu[0], 2.0);
        assert_eq!(b.d[[0, 0]], 1.0);
        assert_eq!(b.d[[0, 1]], 2.0);
        let h = b.hessian(0);
        assert_eq!(h[[0, 0]], 0.0);
        assert_eq!(h[[0, 1]], 1.0);
        assert_eq!(h[[1, 0]], 1.0);
        assert_eq!(h[[1, 1]], 2.0);
    }

    #[test]
    fn builtin_catalog_shapes() {
        let g = MeanModel::builtin(BuiltinModel::Gallant);
        assert_eq!(g.params(), ["l1", "l2", "eta", "gamma"]);
        assert_eq!(g.to_string(), "(((l1 * z1) + (l2 * z2)) + (eta * exp((gamma * x))))");
        assert_eq!(MeanModel::builtin(BuiltinModel::MichaelisMenten).n_params(), 2);
        assert_eq!(BuiltinModel::from_name("weibull_type"), Some(BuiltinModel::WeibullType));
        assert_eq!(BuiltinModel::from_name("nope"), None);
        for which in BuiltinModel::ALL {
            let _ = MeanModel::builtin(which);
        }
    }

    #[test]
    fn weibull_type_at_gamma_zero_is_flat() {
        let m = MeanModel::builtin(BuiltinModel::WeibullType);
        for &x in &[0.1, 1.0, 7.3] {
            let got = eval_one(&m, &[x], &[5.0, 2.0, 0.0]);
            assert_eq!(got, 3.0);
        }
    }

    #[test]
    fn vec_ordering_is_column_major() {
        // mu = a*b^2: M = [[0, 2b], [2b, 2a]] at (a,b) = (3, 5)
        let m = MeanModel::parse("a*b^2", &["a", "b"], &[]).unwrap();
        let x = Array2::<f64>::zeros((1, 0));
        let b = m.eval_bundle(&x, &[3.0, 5.0]).unwrap();
        let p = 2;
        // column-major vec: [(0,0), (1,0), (0,1), (1,1)]
        assert_eq!(b.g[[0, 0]], 0.0);
        assert_eq!(b.g[[0, 1]], 10.0);
        assert_eq!(b.g[[0, 2]], 10.0);
        assert_eq!(b.g[[0, 3]], 6.0);
        // reconstruct and re-vectorize: identity
        let h = b.hessian(0);
        for s in 0..p {
            for r in 0..p {
                assert_eq!(h[[r, s]], b.g[[0, s * p + r]]);
            }
        }
    }

    #[test]
    fn hessian_rows_are_exactly_symmetric() {
        let m = MeanModel::builtin(BuiltinModel::Gallant);
        let x = array![[0.2, 0.9, 0.4], [0.8, 0.1, 0.7], [0.5, 0.5, 0.2]];
        let b = m.eval_bundle(&x, &[4.0, 5.0, 3.0, 1.5]).unwrap();
        for i in 0..3 {
            let h = b.hessian(i);
            for r in 0..4 {
                for s in 0..4 {
                    assert_eq!(h[[r, s]], h[[s, r]]);
                }
            }
        }
    }

    #[test]
    fn domain_errors_report_row() {
        let m = MeanModel::parse("log(a + x)", &["a"], &["x"]).unwrap();
        let x = array![[1.0], [-3.0]];
        let err = m.eval_bundle(&x, &[1.0]).unwrap_err();
        assert_eq!(err.row, 1);
        assert!(matches!(err.kind, EvalErrorKind::LogNonpositive(_)));
        let err = m.eval_mu(&x, &[1.0]).unwrap_err();
        assert_eq!(err.row, 1);

        let m = MeanModel::parse("a/x", &["a"], &["x"]).unwrap();
        let err = m.eval_bundle(&array![[0.0]], &[1.0]).unwrap_err();
        assert!(matches!(err.kind, EvalErrorKind::DivisionByZero));

        let m = MeanModel::parse("a^x", &["a"], &["x"]).unwrap();
        let err = m.eval_bundle(&array![[0.5]], &[-1.0]).unwrap_err();
        assert!(matches!(err.kind, EvalErrorKind::PowNonpositiveBase { .. }));
        // integer exponents are fine on a negative base
        let b = m.eval_bundle(&array![[2.0]], &[-1.5]).unwrap();
        assert_eq!(b.mu[0], 2.25);
    }

    #[test]
    fn power_rules_match_hand_results() {
        // parameter exponent: x^a at x=2, a=3
        let m = MeanModel::parse("x^a", &["a"], &["x"]).unwrap();
        let b = m.eval_bundle(&array![[2.0]], &[3.0]).unwrap();
        let ln2 = 2.0f64.ln();
        assert!((b.mu[0] - 8.0).abs() < 1e-12);
        assert!((b.d[[0, 0]] - 8.0 * ln2).abs() < 1e-12);
        assert!((b.g[[0, 0]] - 8.0 * ln2 * ln2).abs() < 1e-12);
        // constant integer exponent on a parameter: a^3
        let m = MeanModel::parse("a^3", &["a"], &[]).unwrap();
        let x0 = Array2::<f64>::zeros((1, 0));
        let b = m.eval_bundle(&x0, &[-2.0]).unwrap();
        assert_eq!(b.mu[0], -8.0);
        assert_eq!(b.d[[0, 0]], 12.0);
        assert_eq!(b.g[[0, 0]], -12.0);
        // zeroth power is the constant 1
        let m = MeanModel::parse("a^0", &["a"], &[]).unwrap();
        let b = m.eval_bundle(&x0, &[0.0]).unwrap();
        assert_eq!((b.mu[0], b.d[[0, 0]], b.g[[0, 0]]), (1.0, 0.0, 0.0));
        // a^b with both parameters, against d/da and d/db of exp(b ln a)
        let m = MeanModel::parse("a^b", &["a", "b"], &[]).unwrap();
        let x0 = Array2::<f64>::zeros((1, 0));
        let (av, bv) = (1.7, 2.3);
        let bun = m.eval_bundle(&x0, &[av, bv]).unwrap();
        let f = av.powf(bv);
        assert!((bun.mu[0] - f).abs() < 1e-12);
        assert!((bun.d[[0, 0]] - bv * av.powf(bv - 1.0)).abs() < 1e-12);
        assert!((bun.d[[0, 1]] - f * av.ln()).abs() < 1e-12);
        let h = bun.hessian(0);
        assert!((h[[0, 0]] - bv * (bv - 1.0) * av.powf(bv - 2.0)).abs() < 1e-12);
        assert!((h[[0, 1]] - av.powf(bv - 1.0) * (1.0 + bv * av.ln())).abs() < 1e-12);
        assert!((h[[1, 1]] - f * av.ln() * av.ln()).abs() < 1e-12);
    }

    #[test]
    fn affinity_classification() {
        let aff = |text: &str, params: &[&str], covars: &[&str]| {
            MeanModel::parse(text, params, covars)
                .unwrap()
                .is_affine_in_params()
        };
        assert!(aff("b1 + b2*z", &["b1", "b2"], &["z"]));
        assert!(aff("b1/2 + b2*log(x)", &["b1", "b2"], &["x"]));
        assert!(aff("b1*x^2 - b2", &["b1", "b2"], &["x"]));
        assert!(!aff("b1*exp(b2*x)", &["b1", "b2"], &["x"]));
        assert!(!aff("eta*x/(gamma + x)", &["eta", "gamma"], &["x"]));
        assert!(!aff("b1*b2", &["b1", "b2"], &[]));
        assert!(!aff("x/b1", &["b1"], &["x"]));
        assert!(!aff("b1^2", &["b1"], &[]));
    }

    #[test]
    fn inferred_covariates_follow_first_appearance() {
        let m = MeanModel::parse_inferring("b1*w + b2*z + b1*q", &["b1", "b2"]).unwrap();
        assert_eq!(m.covariates(), ["w", "z", "q"]);
    }

    #[test]
    fn rank_report_flags_collinear_designs() {
        let good = array![[1.0, 0.0], [0.0, 1.0], [1.0, 1.0]];
        let rep = check_rank(&good);
        assert!(!rep.deficient && rep.condition < 10.0);

        let dup = array![[1.0, 1.0], [2.0, 2.0], [3.0, 3.0]];
        assert!(check_rank(&dup).deficient);

        // Michaelis-Menten with every x equal: D columns proportional
        let m = MeanModel::builtin(BuiltinModel::MichaelisMenten);
        let x = Array2::from_elem((6, 1), 0.7);
        let b = m.eval_bundle(&x, &[3.0, 0.5]).unwrap();
        assert!(check_rank(&b.d).deficient);

        let ident = array![[1.0, 0.0], [0.0, 1.0]];
        assert!((check_rank(&ident).condition - 1.0).abs() < 1e-9);
    }

    #[test]
    fn dataset_validation_and_column_mapping() {
        let y = array![1.0, 2.0];
        let x = array![[0.1, 9.0], [0.2, 8.0]];
        let ds = Dataset::new(y.clone(), x.clone(), vec!["w".into(), "v".into()]).unwrap();
        assert_eq!(ds.n(), 2);

        // model wants (v, w) order; design_for reorders
        let m = MeanModel::parse("a*v + b*w", &["a", "b"], &["v", "w"]).unwrap();
        let design = ds.design_for(&m).unwrap();
        assert_eq!(design, array![[9.0, 0.1], [8.0, 0.2]]);

        let m = MeanModel::parse("a*missing", &["a"], &["missing"]).unwrap();
        assert_eq!(
            ds.design_for(&m).unwrap_err(),
            DatasetError::MissingColumn("missing".into())
        );

        assert!(matches!(
            Dataset::new(array![1.0], x.clone(), vec!["w".into(), "v".into()]),
            Err(DatasetError::LengthMismatch { .. })
        ));
        assert!(matches!(
            Dataset::new(y.clone(), x.clone(), vec!["w".into()]),
            Err(DatasetError::NameCount { .. })
        ));
        assert!(matches!(
            Dataset::new(y.clone(), x.clone(), vec!["w".into(), "w".into()]),
            Err(DatasetError::DuplicateColumn(_))
        ));
        assert!(matches!(
            Dataset::new(array![1.0, f64::NAN], x.clone(), vec!["w".into(), "v".into()]),
            Err(DatasetError::NonFiniteResponse { row: 1 })
        ));
        let mut bad = x.clone();
        bad[[0, 1]] = f64::INFINITY;
        assert!(matches!(
            Dataset::new(y, bad, vec!["w".into(), "v".into()]),
            Err(DatasetError::NonFinite { row: 0, .. })
        ));
    }

    #[test]
    fn sqrt_of_constant_zero_is_fine_but_param_zero_is_not() {
        let m = MeanModel::parse("a + sqrt(x)", &["a"], &["x"]).unwrap();
        let b = m.eval_bundle(&array![[0.0]], &[1.0]).unwrap();
        assert_eq!(b.mu[0], 1.0);
        assert_eq!(b.d[[0, 0]], 1.0);

        let m = MeanModel::parse("sqrt(a)", &["a"], &[]).unwrap();
        let x0 = Array2::<f64>::zeros((1, 0));
        assert!(matches!(
            m.eval_bundle(&x0, &[0.0]).unwrap_err().kind,
            EvalErrorKind::SqrtAtZero
        ));
        assert!(matches!(
            m.eval_bundle(&x0, &[-1.0]).unwrap_err().kind,
            EvalErrorKind::SqrtNegative(_)
        ));
    }
}
