"""Empirical checks of the O(1/T) rate and the gradient assumptions.

The simulated process alternates tau1 stochastic local steps per client,
an aggregation, and tau2 server steps driven by a biased surrogate
gradient, all with step size eta_t = c / (t + gamma).  Suboptimality of
the virtual average is logged at every step.
"""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import linprog

from . import kernels
from .errors import CannotFitError, ConfigError, DivergenceError, ShapeError, ValidationError
from .model import ParamVector
from .numerics.rng import Rng


# ------------------------------------------------------------------ tasks

@dataclass(eq=False)
class ConvexTask:
    """Federated strongly convex objective L(w) = sum_m alpha_m L_m(w).

    Each client holds a finite set of per-sample gradient offsets, so a
    stochastic gradient is the gradient of one uniformly drawn sample.
    """
    kind: str
    mu: float
    L_smooth: float
    w_star: np.ndarray
    alphas: np.ndarray

    def __post_init__(self):
        if not self.mu > 0 or self.L_smooth < self.mu:
            raise ValidationError("need mu > 0 and L_smooth >= mu")
        a = np.asarray(self.alphas, dtype=np.float64)
        if a.ndim != 1 or np.any(a < 0) or abs(a.sum() - 1.0) > 1e-12:
            raise ValidationError("client weights must be non-negative and sum to one")
        self.alphas = a

    @property
    def M(self) -> int:
        return self.alphas.size

    @property
    def d(self) -> int:
        return self.w_star.size

    def suboptimality(self, w) -> float:
        return self.loss(w) - self.loss(self.w_star)


@dataclass(eq=False)
class QuadraticTask(ConvexTask):
    """L_m(w) = 1/2 w'A_m w - b_m'w; sample j of client m adds z[m, j] to the gradient."""
    A_m: np.ndarray = None  # (M, d, d)
    b_m: np.ndarray = None  # (M, d)
    z: np.ndarray = None  # (M, J, d), zero mean over J

    @property
    def A(self) -> np.ndarray:
        return np.einsum("m,mij->ij", self.alphas, self.A_m)

    @property
    def b(self) -> np.ndarray:
        return self.alphas @ self.b_m

    def loss(self, w) -> float:
        w = np.asarray(w)
        return float(0.5 * w @ self.A @ w - self.b @ w)

    def grad(self, w) -> np.ndarray:
        return self.A @ w - self.b

    def suboptimality(self, w) -> float:
        # exact form avoids cancellation near the optimum
        e = np.asarray(w) - self.w_star
        return float(0.5 * e @ self.A @ e)

    def client_grads(self, W: np.ndarray) -> np.ndarray:
        return np.einsum("mij,mj->mi", self.A_m, W) - self.b_m

    def sample_grads(self, m: int, w) -> np.ndarray:
        return (self.A_m[m] @ w - self.b_m[m]) + self.z[m]

    def stochastic_grads(self, W: np.ndarray, rng: Rng) -> np.ndarray:
        j = rng.integers(0, self.z.shape[1], size=self.M)
        return self.client_grads(W) + self.z[np.arange(self.M), j]


def make_quadratic_task(rng: Rng, d: int = 20, cond: float = 50.0, M: int = 4, samples: int = 20,
                        noise: float = 1.0, hetero: float = 0.2, mu: float = 1.0) -> QuadraticTask:
    """Random rotation of log-spaced eigenvalues in [mu, cond * mu].

    Client curvatures differ from the global one by symmetric perturbations
    that cancel under the client weights; ``noise`` is the rms norm of the
    per-sample gradient offsets.
    """
    if d < 1 or M < 1 or samples < 1 or not cond >= 1:
        raise ValidationError("need d, M, samples >= 1 and cond >= 1")
    Q, _ = np.linalg.qr(rng.split("rotation").standard_normal((d, d)))
    lam = mu * np.logspace(0.0, np.log10(cond), d)
    A = (Q * lam) @ Q.T
    A = 0.5 * (A + A.T)
    alphas = np.full(M, 1.0 / M)
    prng = rng.split("clients")
    S = prng.standard_normal((M, d, d))
    S = 0.5 * (S + S.transpose(0, 2, 1))
    S -= S.mean(axis=0)
    if M > 1:
        S *= hetero * mu / max(np.linalg.norm(S[m], 2) for m in range(M))
    A_m = A[None] + S
    b_m = prng.standard_normal((M, d)) * np.sqrt(lam)[None, :] @ Q.T
    z = rng.split("noise").standard_normal((M, samples, d))
    z -= z.mean(axis=1, keepdims=True)
    if samples > 1 and noise > 0:
        z *= noise / np.sqrt(np.mean(np.sum(z * z, axis=2)))
    else:
        z[:] = 0.0
    b = alphas @ b_m
    w_star = np.linalg.solve(A, b)
    eig = np.linalg.eigvalsh(A)
    return QuadraticTask("quadratic", float(eig[0]), float(eig[-1]), w_star, alphas, A_m=A_m, b_m=b_m, z=z)


def _log1pexp(x):
    return np.logaddexp(0.0, x)


def _sigmoid(x):
    return np.exp(-np.logaddexp(0.0, -x))


@dataclass(eq=False)
class LogisticTask(ConvexTask):
    """Mean logistic loss over all samples plus (reg/2)||w||^2; labels in {-1, +1}."""
    X_m: list = None
    y_m: list = None
    reg: float = 0.0

    def _all(self):
        return np.concatenate(self.X_m), np.concatenate(self.y_m)

    def loss(self, w) -> float:
        X, y = self._all()
        return float(np.mean(_log1pexp(-y * (X @ w))) + 0.5 * self.reg * w @ w)

    def grad(self, w) -> np.ndarray:
        X, y = self._all()
        return _logistic_grad(X, y, w, self.reg)

    def suboptimality(self, w) -> float:
        # rounding can push this a hair below zero at the optimum
        return max(super().suboptimality(w), 0.0)

    def client_grads(self, W) -> np.ndarray:
        return np.stack([_logistic_grad(self.X_m[m], self.y_m[m], W[m], self.reg) for m in range(self.M)])

    def sample_grads(self, m: int, w) -> np.ndarray:
        X, y = self.X_m[m], self.y_m[m]
        s = -y * _sigmoid(-y * (X @ w))
        return s[:, None] * X + self.reg * w[None, :]

    def stochastic_grads(self, W, rng: Rng) -> np.ndarray:
        out = np.empty_like(W)
        for m in range(self.M):
            j = int(rng.integers(0, self.y_m[m].size))
            x, y = self.X_m[m][j], self.y_m[m][j]
            out[m] = -y * _sigmoid(-y * (x @ W[m])) * x + self.reg * W[m]
        return out


def _logistic_grad(X, y, w, reg):
    s = -y * _sigmoid(-y * (X @ w))
    return X.T @ s / y.size + reg * w


def _newton_logistic(X, y, reg, tol=1e-12, max_iter=100):
    w = np.zeros(X.shape[1])
    for _ in range(max_iter):
        g = _logistic_grad(X, y, w, reg)
        if np.linalg.norm(g) < tol:
            break
        p = _sigmoid(X @ w)
        H = (X.T * (p * (1 - p))) @ X / y.size + reg * np.eye(X.shape[1])
        w = w - np.linalg.solve(H, g)
    return w


def make_logistic_task(rng: Rng, n: int = 400, d: int = 10, M: int = 4, reg: float = 0.1) -> LogisticTask:
    """Client m's inputs are shifted along its own direction, labels from a noisy linear rule."""
    if reg <= 0:
        raise ValidationError("l2-logistic needs reg > 0 for strong convexity")
    X = rng.split("x").standard_normal((n, d))
    shift = rng.split("shift").standard_normal((M, d))
    owner = np.arange(n) % M
    X += shift[owner]
    w_true = rng.split("w").standard_normal(d)
    flip = rng.split("flip").uniform(size=n) < 0.1
    y = np.where((X @ w_true > 0) ^ flip, 1.0, -1.0)
    X_m = [X[owner == m] for m in range(M)]
    y_m = [y[owner == m] for m in range(M)]
    alphas = np.array([ym.size for ym in y_m], dtype=np.float64) / n
    w_star = _newton_logistic(X, y, reg)
    L_smooth = float(np.linalg.eigvalsh(X.T @ X / n)[-1] / 4.0 + reg)
    return LogisticTask("l2-logistic", reg, L_smooth, w_star, alphas, X_m=X_m, y_m=y_m, reg=reg)


# -------------------------------------------------------------- surrogates

@dataclass(eq=False)
class QuadraticSurrogate:
    """grad = A_syn w - b_syn, with ||A_syn - A|| A^{-1} = delta and offset norm epsilon."""
    A_syn: np.ndarray
    b_syn: np.ndarray
    delta: float
    epsilon: float

    def grad(self, w) -> np.ndarray:
        return self.A_syn @ w - self.b_syn


def biased_surrogate(task: QuadraticTask, delta: float, epsilon: float, rng: Rng) -> QuadraticSurrogate:
    """Surrogate whose gradient error is E (w - w*) - e with ||E A^{-1}||_2 = delta, ||e|| = epsilon.

    Since grad L = A (w - w*), the error is exactly E A^{-1} grad L - e,
    so (delta, epsilon) is a valid envelope by construction.
    """
    if delta < 0 or epsilon < 0:
        raise ValidationError("delta and epsilon must be non-negative")
    A = task.A
    d = task.d
    B = rng.split("E").standard_normal((d, d))
    B = 0.5 * (B + B.T)
    # E = B A makes E A^{-1} = B, so the operator norm is easy to pin
    nb = np.linalg.norm(B, 2)
    E = (delta / nb) * B @ A if nb > 0 and delta > 0 else np.zeros((d, d))
    e = rng.split("e").standard_normal(d)
    e *= epsilon / np.linalg.norm(e) if epsilon > 0 else 0.0
    A_syn = A + E
    b_syn = A_syn @ task.w_star + e
    return QuadraticSurrogate(A_syn, b_syn, float(delta), float(epsilon))


@dataclass(eq=False)
class FunctionSurrogate:
    """Surrogate built from any gradient callable, e.g. a perturbed dataset."""
    fn: object

    def grad(self, w) -> np.ndarray:
        return self.fn(w)


def perturbed_logistic_surrogate(task: LogisticTask, noise: float, rng: Rng) -> FunctionSurrogate:
    X, y = task._all()
    Xs = X + noise * rng.standard_normal(X.shape)
    return FunctionSurrogate(lambda w: _logistic_grad(Xs, y, w, task.reg))


# ---------------------------------------------------------------- schedule

@dataclass(frozen=True)
class ScheduleConfig:
    c: float = 4.0
    gamma: float = 400.0
    tau1: int = 5
    tau2: int = 2

    def __post_init__(self):
        if not self.c > 0 or self.gamma < 0:
            raise ConfigError("need c > 0 and gamma >= 0")
        if self.tau1 < 1 or self.tau2 < 0:
            raise ConfigError("need tau1 >= 1 and tau2 >= 0")

    def eta(self, t: int) -> float:
        return self.c / (t + self.gamma) if t + self.gamma > 0 else self.c

    def check(self, mu: float, L_smooth: float, delta: float) -> dict:
        """Enforce c * mu_tilde > 1 with mu_tilde = 0.9 (mu - delta L).

        When delta L >= mu the rate hypothesis fails; the run is allowed but
        flagged, and the check falls back to mu_tilde = 0.9 mu.
        """
        flags = {"bias_hypothesis_ok": bool(delta * L_smooth < mu)}
        mu_tilde = 0.9 * (mu - delta * L_smooth) if flags["bias_hypothesis_ok"] else 0.9 * mu
        flags["mu_tilde"] = mu_tilde
        if not self.c * mu_tilde > 1:
            raise ConfigError(f"schedule needs c * mu_tilde > 1, got {self.c} * {mu_tilde:.4g}")
        return flags


# ----------------------------------------------------------------- process

@dataclass
class ConvergenceResult:
    steps: np.ndarray
    mean: np.ndarray
    std: np.ndarray
    per_seed: np.ndarray
    flags: dict = field(default_factory=dict)

    def write_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["step", "mean", "std"])
            for t, m, s in zip(self.steps, self.mean, self.std):
                w.writerow([int(t), repr(float(m)), repr(float(s))])


def simulate(task: ConvexTask, schedule: ScheduleConfig, surrogate, T: int, rng: Rng,
             w0=None, exact: bool = False) -> np.ndarray:
    """One run of the interleaved process; returns suboptimality after each of T steps.

    The virtual average sum_m alpha_m w_m is evaluated after every step.
    ``exact`` swaps stochastic client gradients for full local gradients.
    """
    if T < 1:
        raise ValidationError("T must be >= 1")
    w = np.zeros(task.d) if w0 is None else np.array(w0, dtype=np.float64)
    W = np.tile(w, (task.M, 1))
    out = np.empty(T)
    t = 0
    while t < T:
        for _ in range(schedule.tau1):
            if t >= T:
                break
            g = task.client_grads(W) if exact else task.stochastic_grads(W, rng)
            W -= schedule.eta(t) * g
            t += 1
            if not np.isfinite(W).all():
                raise DivergenceError(f"convex process diverged at step {t}", step=t)
            out[t - 1] = task.suboptimality(task.alphas @ W)
        w = task.alphas @ W
        for _ in range(schedule.tau2):
            if t >= T:
                break
            w = w - schedule.eta(t) * surrogate.grad(w)
            t += 1
            if not np.isfinite(w).all():
                raise DivergenceError(f"convex process diverged at step {t}", step=t)
            out[t - 1] = task.suboptimality(w)
        W[:] = w
    return out


def run_convex_convergence(task: ConvexTask, schedule: ScheduleConfig, surrogate, T: int = 10_000,
                           seeds=(0, 1, 2, 3, 4), delta: float | None = None, w0=None) -> ConvergenceResult:
    """Suboptimality series averaged over seeds (consumed in seed order).

    ``delta`` feeds the schedule check; it defaults to the surrogate's own
    constant when it has one.
    """
    seeds = tuple(seeds)
    if not seeds:
        raise ValidationError("need at least one seed")
    if delta is None:
        delta = getattr(surrogate, "delta", 0.0)
    flags = schedule.check(task.mu, task.L_smooth, delta)
    runs = np.stack([simulate(task, schedule, surrogate, T, Rng(s).split("convex"), w0) for s in seeds])
    return ConvergenceResult(np.arange(1, T + 1), runs.mean(axis=0), runs.std(axis=0), runs, flags)


def fit_loglog_slope(series, window: float = 0.5, steps=None) -> float:
    """OLS slope of log(series) against log(step) over the trailing ``window`` fraction."""
    y = np.asarray(series, dtype=np.float64)
    t = np.arange(1, y.size + 1, dtype=np.float64) if steps is None else np.asarray(steps, dtype=np.float64)
    if not 0 < window <= 1:
        raise CannotFitError("window must be in (0, 1]")
    k = max(2, int(np.ceil(window * y.size)))
    if y.size < 2:
        raise CannotFitError("need at least two points")
    yt, tt = y[-k:], t[-k:]
    if np.any(~np.isfinite(yt)) or np.any(yt <= 0) or np.any(tt <= 0):
        raise CannotFitError("series must be positive over the fit window")
    return float(np.polyfit(np.log(tt), np.log(yt), 1)[0])


# ------------------------------------------------------- assumption constants

@dataclass(frozen=True)
class BiasFit:
    delta: float
    epsilon: float
    method: str

    def __iter__(self):
        return iter((self.delta, self.epsilon))


def fit_bias_envelope(residuals, grad_norms) -> BiasFit:
    """Smallest (delta, epsilon) >= 0 with delta a_i + epsilon >= r_i for all probes.

    Minimizes delta + epsilon / median(a) by linear programming; probes are
    sorted first so the result does not depend on their order, and epsilon
    is then raised just enough to cover any rounding slack.
    """
    r = np.asarray(residuals, dtype=np.float64)
    a = np.asarray(grad_norms, dtype=np.float64)
    if r.shape != a.shape or r.ndim != 1 or r.size == 0:
        raise ShapeError("residuals and gradient norms must be equal-length vectors")
    if np.any(r < 0) or np.any(a < 0) or not (np.isfinite(r).all() and np.isfinite(a).all()):
        raise ValidationError("norms must be finite and non-negative")
    if not np.any(r):
        return BiasFit(0.0, 0.0, "exact: all residuals zero")
    if not np.any(a):
        raise CannotFitError("every probe has a zero reference gradient")
    order = np.lexsort((r, a))
    a, r = a[order], r[order]
    scale = float(np.median(a))
    if scale <= 0:
        scale = float(a[a > 0].mean())
    res = linprog(
        c=[1.0, 1.0 / scale],
        A_ub=-np.column_stack([a, np.ones_like(a)]),
        b_ub=-r,
        bounds=[(0, None), (0, None)],
        method="highs",
    )
    if not res.success:
        raise CannotFitError(f"envelope fit failed: {res.message}")
    delta = max(float(res.x[0]), 0.0)
    eps = max(float(res.x[1]), 0.0, float(np.max(r - delta * a)))
    while np.any(delta * a + eps < r):
        eps = float(np.nextafter(eps, np.inf))
    return BiasFit(delta, eps, f"linprog(highs): min delta + epsilon/{scale:.6g} s.t. delta*a_i + epsilon >= r_i")


def estimate_bias_constants_fn(grad_syn, grad_true, probes) -> BiasFit:
    """Envelope fit for arbitrary gradient callables at the given probe points."""
    r, a = [], []
    for w in probes:
        gt = np.asarray(grad_true(w))
        r.append(float(np.linalg.norm(np.asarray(grad_syn(w)) - gt)))
        a.append(float(np.linalg.norm(gt)))
    return fit_bias_envelope(r, a)


def _targets(ds):
    if hasattr(ds, "Ylogits"):
        return ds.X, ds.targets()
    if hasattr(ds, "labels"):
        return ds.X, np.asarray(ds.targets)
    X, T = ds
    return np.asarray(X, dtype=np.float64), np.asarray(T, dtype=np.float64)


def mlp_gradient(w: ParamVector, ds) -> np.ndarray:
    X, T = _targets(ds)
    g = np.empty(w.spec.n_params)
    kernels.mlp_loss_grad(w.values, w.spec.sizes_array, np.ascontiguousarray(X), np.ascontiguousarray(T), g)
    return g


def estimate_bias_constants(dsyn, data, model=None, probe_params=()) -> BiasFit:
    """(delta, epsilon) envelope of the synthetic-vs-real gradient gap on an MLP.

    ``dsyn`` is a SyntheticDataset, a LabeledDataset or an (X, soft targets)
    pair; ``model`` is an optional MlpSpec checked against the probes.
    """
    probes = list(probe_params)
    if len(probes) < 10:
        raise ValidationError(f"need at least 10 probe points, got {len(probes)}")
    if model is not None and any(p.spec != model for p in probes):
        raise ShapeError("probe parameters do not match the model spec")
    return estimate_bias_constants_fn(lambda w: mlp_gradient(w, dsyn), lambda w: mlp_gradient(w, data), probes)


def probe_points(checkpoints, n_perturbed: int, scale: float, rng: Rng) -> list:
    """Checkpoints plus Gaussian perturbations of randomly chosen ones."""
    checkpoints = list(checkpoints)
    out = list(checkpoints)
    for i in range(n_perturbed):
        base = checkpoints[int(rng.integers(0, len(checkpoints)))]
        out.append(base.with_values(base.values + scale * rng.standard_normal(base.values.size)))
    return out


@dataclass
class AssumptionEstimates:
    sigma_m: np.ndarray
    G: float
    delta: float
    epsilon: float
    method: str = ""

    def __post_init__(self):
        if np.any(np.asarray(self.sigma_m) < 0) or min(self.G, self.delta, self.epsilon) < 0:
            raise ValidationError("assumption constants must be non-negative")


def estimate_sigma_G(task: ConvexTask, probes) -> tuple[np.ndarray, float]:
    """sigma_m^2 = max over probes of per-sample gradient variance on client m;
    G = max over probes and clients of E||g||^2 (mean squared per-sample norm)."""
    sig = np.zeros(task.M)
    G = 0.0
    for w in probes:
        for m in range(task.M):
            gs = task.sample_grads(m, np.asarray(w))
            var = float(np.mean(np.sum((gs - gs.mean(axis=0)) ** 2, axis=1)))
            sig[m] = max(sig[m], var)
            G = max(G, float(np.mean(np.sum(gs * gs, axis=1))))
    return np.sqrt(sig), G


def estimate_assumptions(task: ConvexTask, surrogate, probes) -> AssumptionEstimates:
    sigma, G = estimate_sigma_G(task, probes)
    fit = estimate_bias_constants_fn(surrogate.grad, task.grad, probes)
    return AssumptionEstimates(sigma, G, fit.delta, fit.epsilon, fit.method)


def convex_probes(task: ConvexTask, rng: Rng, n: int = 40, radius: float = 1.0) -> list:
    """Points around w* at radii spread over two decades, plus the origin."""
    pts = [np.zeros(task.d)]
    for i in range(n - 1):
        u = rng.standard_normal(task.d)
        r = radius * 10.0 ** rng.uniform(-1.0, 1.0)
        pts.append(task.w_star + r * u / np.linalg.norm(u))
    return pts


def summary(result: ConvergenceResult, est: AssumptionEstimates | None, slope: float, **extra) -> dict:
    out = {"slope": slope}
    if est is not None:
        out.update(delta=est.delta, epsilon=est.epsilon, sigma_m=[float(s) for s in est.sigma_m], G=est.G,
                   fit_method=est.method)
    out["flags"] = dict(result.flags)
    out.update(extra)
    return out


def write_summary(path, data: dict):
    with open(path, "w") as fh:
        json.dump(data, fh, indent=2, sort_keys=True)
