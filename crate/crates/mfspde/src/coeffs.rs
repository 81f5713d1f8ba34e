//! Model coefficients for the controlled field dynamics
//!
//! ```text
//! dY = [L Y + b(t,x,Y,ybar,u,ubar)] dt + sigma(...) dW
//!        + int theta(..., e) Ntilde(dt, de),
//! ```
//!
//! with running profit `f`, terminal payoff `g(x, Y_T, ybar_T)`, and the
//! mean-field arguments `ybar = F(Y(t,x,.))`, `ubar = G(u(t,x,.))`. A
//! [`CoefficientSet`] carries each coefficient together with its partial
//! derivatives in `y`, `ybar`, `u`, `ubar`; the Hamiltonian, adjoint drivers
//! and derivative (sensitivity) process are assembled from exactly these
//! closures, so a finite-difference probe over random points
//! ([`CoefficientSet::probe_derivatives`]) validates an entire model at once.
//!
//! Models whose noise is proportional to the state can additionally carry a
//! [`MultiplicativeNoise`] descriptor: the ratios `sigma/y` and `theta/y`,
//! which the forward solver uses to keep the state strictly positive.

use std::fmt;
use std::sync::Arc;

use crate::error::{Result, SolverError};

/// Arguments at which a coefficient is evaluated.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CoeffArgs {
    pub t: f64,
    pub x: f64,
    /// Field value of the current scenario.
    pub y: f64,
    /// Mean-field value `F` of the field ensemble at (t, x).
    pub y_bar: f64,
    /// Control of the current scenario.
    pub u: f64,
    /// Mean-field value `G` of the control ensemble at (t, x).
    pub u_bar: f64,
}

impl CoeffArgs {
    pub fn new(t: f64, x: f64, y: f64, y_bar: f64, u: f64, u_bar: f64) -> Self {
        Self {
            t,
            x,
            y,
            y_bar,
            u,
            u_bar,
        }
    }
}

/// Scalar coefficient of the state arguments.
pub type CoeffFn = Arc<dyn Fn(&CoeffArgs) -> f64 + Send + Sync>;
/// Jump coefficient: extra final argument is the jump mark `e`.
pub type JumpFn = Arc<dyn Fn(&CoeffArgs, f64) -> f64 + Send + Sync>;
/// Terminal payoff `(x, y, ybar) -> value`.
pub type TerminalFn = Arc<dyn Fn(f64, f64, f64) -> f64 + Send + Sync>;

fn zero_coeff() -> CoeffFn {
    Arc::new(|_| 0.0)
}

fn zero_jump() -> JumpFn {
    Arc::new(|_, _| 0.0)
}

fn zero_terminal() -> TerminalFn {
    Arc::new(|_, _, _| 0.0)
}

/// State-proportional noise written as ratios: `sigma(t,x,y) = y * ratio`.
/// Lets the forward solver factor the noise out of the state and clamp the
/// multiplicative factor away from zero.
#[derive(Clone)]
pub struct MultiplicativeNoise {
    /// `sigma(t, x, y) / y`, a function of `(t, x)` only.
    pub sigma_ratio: Arc<dyn Fn(f64, f64) -> f64 + Send + Sync>,
    /// `theta(t, x, y, e) / y`, a function of `(t, x, e)` only.
    pub theta_ratio: Arc<dyn Fn(f64, f64, f64) -> f64 + Send + Sync>,
}

impl fmt::Debug for MultiplicativeNoise {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("MultiplicativeNoise {{ .. }}")
    }
}

/// Full coefficient description of one control problem.
#[derive(Clone)]
pub struct CoefficientSet {
    pub drift: CoeffFn,
    pub drift_dy: CoeffFn,
    pub drift_dybar: CoeffFn,
    pub drift_du: CoeffFn,
    pub drift_dubar: CoeffFn,

    pub diffusion: CoeffFn,
    pub diffusion_dy: CoeffFn,
    pub diffusion_dybar: CoeffFn,
    pub diffusion_du: CoeffFn,
    pub diffusion_dubar: CoeffFn,

    pub jump: JumpFn,
    pub jump_dy: JumpFn,
    pub jump_dybar: JumpFn,
    pub jump_du: JumpFn,
    pub jump_dubar: JumpFn,

    /// Running profit density.
    pub running: CoeffFn,
    pub running_dy: CoeffFn,
    pub running_dybar: CoeffFn,
    pub running_du: CoeffFn,
    pub running_dubar: CoeffFn,

    /// Terminal payoff and its partials in `y` and `ybar`.
    pub terminal: TerminalFn,
    pub terminal_dy: TerminalFn,
    pub terminal_dybar: TerminalFn,

    /// Present when the noise coefficients are proportional to the state.
    pub multiplicative: Option<MultiplicativeNoise>,

    /// Human-readable model name, used in reports.
    pub label: String,
}

impl fmt::Debug for CoefficientSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("CoefficientSet")
            .field("label", &self.label)
            .field("multiplicative", &self.multiplicative.is_some())
            .finish()
    }
}

impl CoefficientSet {
    /// All-zero model; the starting point of every builder chain.
    pub fn builder(label: impl Into<String>) -> CoefficientSetBuilder {
        CoefficientSetBuilder {
            set: CoefficientSet {
                drift: zero_coeff(),
                drift_dy: zero_coeff(),
                drift_dybar: zero_coeff(),
                drift_du: zero_coeff(),
                drift_dubar: zero_coeff(),
                diffusion: zero_coeff(),
                diffusion_dy: zero_coeff(),
                diffusion_dybar: zero_coeff(),
                diffusion_du: zero_coeff(),
                diffusion_dubar: zero_coeff(),
                jump: zero_jump(),
                jump_dy: zero_jump(),
                jump_dybar: zero_jump(),
                jump_du: zero_jump(),
                jump_dubar: zero_jump(),
                running: zero_coeff(),
                running_dy: zero_coeff(),
                running_dybar: zero_coeff(),
                running_du: zero_coeff(),
                running_dubar: zero_coeff(),
                terminal: zero_terminal(),
                terminal_dy: zero_terminal(),
                terminal_dybar: zero_terminal(),
                multiplicative: None,
                label: label.into(),
            },
        }
    }

    /// Central finite-difference check of every declared partial derivative
    /// at the given probe points, with relative tolerance `tol`. `marks`
    /// supplies jump marks for the jump-coefficient partials.
    pub fn probe_derivatives(&self, probes: &[CoeffArgs], marks: &[f64], tol: f64) -> Result<()> {
        for args in probes {
            for (name, f, df, wrt) in [
                ("drift.y", &self.drift, &self.drift_dy, Slot::Y),
                ("drift.ybar", &self.drift, &self.drift_dybar, Slot::YBar),
                ("drift.u", &self.drift, &self.drift_du, Slot::U),
                ("drift.ubar", &self.drift, &self.drift_dubar, Slot::UBar),
                ("diffusion.y", &self.diffusion, &self.diffusion_dy, Slot::Y),
                (
                    "diffusion.ybar",
                    &self.diffusion,
                    &self.diffusion_dybar,
                    Slot::YBar,
                ),
                ("diffusion.u", &self.diffusion, &self.diffusion_du, Slot::U),
                (
                    "diffusion.ubar",
                    &self.diffusion,
                    &self.diffusion_dubar,
                    Slot::UBar,
                ),
                ("running.y", &self.running, &self.running_dy, Slot::Y),
                (
                    "running.ybar",
                    &self.running,
                    &self.running_dybar,
                    Slot::YBar,
                ),
                ("running.u", &self.running, &self.running_du, Slot::U),
                (
                    "running.ubar",
                    &self.running,
                    &self.running_dubar,
                    Slot::UBar,
                ),
            ] {
                check_partial(name, f, df, args, wrt, tol)?;
            }
            for &e in marks {
                let wrap =
                    |g: &JumpFn, e: f64| -> CoeffFn { { let g = g.clone(); Arc::new(move |a: &CoeffArgs| g(a, e)) } };
                for (name, f, df, wrt) in [
                    ("jump.y", wrap(&self.jump, e), wrap(&self.jump_dy, e), Slot::Y),
                    (
                        "jump.ybar",
                        wrap(&self.jump, e),
                        wrap(&self.jump_dybar, e),
                        Slot::YBar,
                    ),
                    ("jump.u", wrap(&self.jump, e), wrap(&self.jump_du, e), Slot::U),
                    (
                        "jump.ubar",
                        wrap(&self.jump, e),
                        wrap(&self.jump_dubar, e),
                        Slot::UBar,
                    ),
                ] {
                    check_partial(name, &f, &df, args, wrt, tol)?;
                }
            }
            // Terminal payoff partials.
            let g = self.terminal.clone();
            let as_coeff: CoeffFn = Arc::new(move |a: &CoeffArgs| g(a.x, a.y, a.y_bar));
            let gy = self.terminal_dy.clone();
            let dy: CoeffFn = Arc::new(move |a: &CoeffArgs| gy(a.x, a.y, a.y_bar));
            let gyb = self.terminal_dybar.clone();
            let dybar: CoeffFn = Arc::new(move |a: &CoeffArgs| gyb(a.x, a.y, a.y_bar));
            check_partial("terminal.y", &as_coeff, &dy, args, Slot::Y, tol)?;
            check_partial("terminal.ybar", &as_coeff, &dybar, args, Slot::YBar, tol)?;
        }
        Ok(())
    }

    /// Largest difference quotient of the dynamic coefficients over probe
    /// pairs, as a crude Lipschitz diagnostic: for each pair the change in
    /// each coefficient is divided by the total change in `(y, ybar, u, ubar)`.
    pub fn lipschitz_probe(&self, pairs: &[(CoeffArgs, CoeffArgs)], marks: &[f64]) -> f64 {
        let mut worst: f64 = 0.0;
        for (a, b) in pairs {
            let denom = (a.y - b.y).abs()
                + (a.y_bar - b.y_bar).abs()
                + (a.u - b.u).abs()
                + (a.u_bar - b.u_bar).abs();
            if denom <= 0.0 {
                continue;
            }
            let mut push = |d: f64| {
                let q = d.abs() / denom;
                if q > worst {
                    worst = q;
                }
            };
            push((self.drift)(a) - (self.drift)(b));
            push((self.diffusion)(a) - (self.diffusion)(b));
            for &e in marks {
                push((self.jump)(a, e) - (self.jump)(b, e));
            }
        }
        worst
    }
}

#[derive(Clone, Copy)]
enum Slot {
    Y,
    YBar,
    U,
    UBar,
}

fn perturb(args: &CoeffArgs, wrt: Slot, d: f64) -> CoeffArgs {
    let mut a = *args;
    match wrt {
        Slot::Y => a.y += d,
        Slot::YBar => a.y_bar += d,
        Slot::U => a.u += d,
        Slot::UBar => a.u_bar += d,
    }
    a
}

fn check_partial(
    name: &str,
    f: &CoeffFn,
    df: &CoeffFn,
    args: &CoeffArgs,
    wrt: Slot,
    tol: f64,
) -> Result<()> {
    let base = match wrt {
        Slot::Y => args.y,
        Slot::YBar => args.y_bar,
        Slot::U => args.u,
        Slot::UBar => args.u_bar,
    };
    let h = 1e-5 * (1.0 + base.abs());
    let fd = (f(&perturb(args, wrt, h)) - f(&perturb(args, wrt, -h))) / (2.0 * h);
    let an = df(args);
    let scale = fd.abs().max(an.abs()).max(1.0);
    if !(fd.is_finite() && an.is_finite()) || (fd - an).abs() > tol * scale {
        return Err(SolverError::InvalidParameters(format!(
            "declared partial {name} disagrees with finite difference at \
             (t={}, x={}, y={}, ybar={}, u={}, ubar={}): analytic {an}, fd {fd}",
            args.t, args.x, args.y, args.y_bar, args.u, args.u_bar
        )));
    }
    Ok(())
}

/// Builder with per-coefficient setters; everything not set stays zero.
pub struct CoefficientSetBuilder {
    set: CoefficientSet,
}

impl CoefficientSetBuilder {
    pub fn drift(mut self, f: CoeffFn, dy: CoeffFn, dybar: CoeffFn, du: CoeffFn, dubar: CoeffFn) -> Self {
        self.set.drift = f;
        self.set.drift_dy = dy;
        self.set.drift_dybar = dybar;
        self.set.drift_du = du;
        self.set.drift_dubar = dubar;
        self
    }

    pub fn diffusion(
        mut self,
        f: CoeffFn,
        dy: CoeffFn,
        dybar: CoeffFn,
        du: CoeffFn,
        dubar: CoeffFn,
    ) -> Self {
        self.set.diffusion = f;
        self.set.diffusion_dy = dy;
        self.set.diffusion_dybar = dybar;
        self.set.diffusion_du = du;
        self.set.diffusion_dubar = dubar;
        self
    }

    pub fn jump(mut self, f: JumpFn, dy: JumpFn, dybar: JumpFn, du: JumpFn, dubar: JumpFn) -> Self {
        self.set.jump = f;
        self.set.jump_dy = dy;
        self.set.jump_dybar = dybar;
        self.set.jump_du = du;
        self.set.jump_dubar = dubar;
        self
    }

    pub fn running(
        mut self,
        f: CoeffFn,
        dy: CoeffFn,
        dybar: CoeffFn,
        du: CoeffFn,
        dubar: CoeffFn,
    ) -> Self {
        self.set.running = f;
        self.set.running_dy = dy;
        self.set.running_dybar = dybar;
        self.set.running_du = du;
        self.set.running_dubar = dubar;
        self
    }

    pub fn terminal(mut self, g: TerminalFn, dy: TerminalFn, dybar: TerminalFn) -> Self {
        self.set.terminal = g;
        self.set.terminal_dy = dy;
        self.set.terminal_dybar = dybar;
        self
    }

    pub fn multiplicative(mut self, m: MultiplicativeNoise) -> Self {
        self.set.multiplicative = Some(m);
        self
    }

    pub fn build(self) -> CoefficientSet {
        self.set
    }
}

/// Parameters of the affine reference model used by solver validation:
/// every coefficient is affine in `(y, ybar, u, ubar)`, so closed-form mean
/// dynamics and exact linearizations are available.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AffineModelParams {
    /// Drift `b = b0 + by*y + bybar*ybar + bu*u + bubar*ubar`.
    pub b0: f64,
    pub by: f64,
    pub bybar: f64,
    pub bu: f64,
    pub bubar: f64,
    /// Diffusion `sigma = s0 + sy*y`.
    pub s0: f64,
    pub sy: f64,
    /// Jump coefficient `theta(e) = (th0 + thy*y) * e`.
    pub th0: f64,
    pub thy: f64,
    /// Running profit `f = fy*y + fu*u + fuu*u^2` (concave when fuu <= 0).
    pub fy: f64,
    pub fu: f64,
    pub fuu: f64,
    /// Terminal payoff `g = gy*y + gybar*ybar`.
    pub gy: f64,
    pub gybar: f64,
}

impl Default for AffineModelParams {
    fn default() -> Self {
        Self {
            b0: 0.0,
            by: 0.0,
            bybar: 0.0,
            bu: 0.0,
            bubar: 0.0,
            s0: 0.0,
            sy: 0.0,
            th0: 0.0,
            thy: 0.0,
            fy: 0.0,
            fu: 0.0,
            fuu: 0.0,
            gy: 0.0,
            gybar: 0.0,
        }
    }
}

/// Affine model with exactly the partial derivatives its parameters dictate.
pub fn affine_model(p: AffineModelParams) -> CoefficientSet {
    CoefficientSet::builder("affine")
        .drift(
            Arc::new(move |a: &CoeffArgs| {
                p.b0 + p.by * a.y + p.bybar * a.y_bar + p.bu * a.u + p.bubar * a.u_bar
            }),
            Arc::new(move |_| p.by),
            Arc::new(move |_| p.bybar),
            Arc::new(move |_| p.bu),
            Arc::new(move |_| p.bubar),
        )
        .diffusion(
            Arc::new(move |a: &CoeffArgs| p.s0 + p.sy * a.y),
            Arc::new(move |_| p.sy),
            zero_coeff(),
            zero_coeff(),
            zero_coeff(),
        )
        .jump(
            Arc::new(move |a: &CoeffArgs, e: f64| (p.th0 + p.thy * a.y) * e),
            Arc::new(move |_, e: f64| p.thy * e),
            zero_jump(),
            zero_jump(),
            zero_jump(),
        )
        .running(
            Arc::new(move |a: &CoeffArgs| p.fy * a.y + p.fu * a.u + p.fuu * a.u * a.u),
            Arc::new(move |_| p.fy),
            zero_coeff(),
            Arc::new(move |a: &CoeffArgs| p.fu + 2.0 * p.fuu * a.u),
            zero_coeff(),
        )
        .terminal(
            Arc::new(move |_x, y, ybar| p.gy * y + p.gybar * ybar),
            Arc::new(move |_, _, _| p.gy),
            Arc::new(move |_, _, _| p.gybar),
        )
        .build()
}

/// Pure heat dynamics: every coefficient zero. The field evolves by the
/// operator alone.
pub fn heat_model() -> CoefficientSet {
    CoefficientSet::builder("heat").build()
}
