"""Synthetic ground truth, exact L2 error and convergence-rate experiments.

Truth functions are additive trigonometric series with Sobolev-type
coefficient decay. Because the basis is orthonormal, the squared L2 distance
between a fitted state and the true quantile function reduces to a sum over
coefficient differences plus the truncation tail, so no quadrature is needed.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass

import numpy as np
from scipy import stats

from .basis import BasisSpec, SQRT2
from .core import (
    CoefficientState,
    EstimatorConfig,
    LearnerBank,
    Mode,
    Sample,
    pinball_loss,
    predict_many,
)

# samples are drawn in fixed-size chunks so that streams of different
# lengths from the same seed share a common prefix
CHUNK = 4096


@dataclass(frozen=True)
class Noise:
    """Additive noise law with a closed-form quantile function."""

    kind: str = "gaussian"
    sigma: float = 1.0
    nu: float = 3.0
    a: float = 0.0
    b: float = 1.0

    def __post_init__(self):
        if self.kind not in ("gaussian", "student_t", "uniform"):
            raise ValueError(f"unknown noise kind {self.kind!r}")
        if self.kind == "uniform" and not self.a < self.b:
            raise ValueError("uniform noise needs a < b")
        if self.sigma < 0 or self.nu <= 0:
            raise ValueError("noise scale parameters must be nonnegative")

    @classmethod
    def gaussian(cls, sigma: float) -> "Noise":
        return cls("gaussian", sigma=sigma)

    @classmethod
    def student_t(cls, nu: float, scale: float = 1.0) -> "Noise":
        return cls("student_t", sigma=scale, nu=nu)

    @classmethod
    def uniform(cls, a: float, b: float) -> "Noise":
        return cls("uniform", a=a, b=b)

    @classmethod
    def parse(cls, text: str) -> "Noise":
        """``gaussian:0.5``, ``student_t:3[:scale]`` or ``uniform:a:b``."""
        kind, *args = text.split(":")
        vals = [float(v) for v in args]
        if kind == "gaussian":
            return cls.gaussian(*vals)
        if kind in ("student_t", "t"):
            return cls.student_t(*vals)
        if kind == "uniform":
            return cls.uniform(*vals)
        raise ValueError(f"unknown noise spec {text!r}")

    def sample(self, rng: np.random.Generator, n: int) -> np.ndarray:
        if self.kind == "gaussian":
            return self.sigma * rng.standard_normal(n)
        if self.kind == "student_t":
            return self.sigma * rng.standard_t(self.nu, n)
        return rng.uniform(self.a, self.b, n)

    def quantile(self, tau: float) -> float:
        if self.kind == "gaussian":
            return 0.0 if self.sigma == 0 else float(stats.norm.ppf(tau, scale=self.sigma))
        if self.kind == "student_t":
            return float(stats.t.ppf(tau, self.nu, scale=self.sigma))
        return self.a + tau * (self.b - self.a)

    def label(self) -> str:
        if self.kind == "gaussian":
            return f"gaussian:{self.sigma!r}"
        if self.kind == "student_t":
            return f"student_t:{self.nu!r}:{self.sigma!r}"
        return f"uniform:{self.a!r}:{self.b!r}"


@dataclass
class TrueModel:
    """Additive ground truth ``y = alpha + sum_k f_k(x_k) + eps``.

    ``coeffs[k, j-1]`` is the coefficient of ``psi_j`` in component ``k``.
    The true ``tau``-quantile function is the regression function shifted by
    ``tau_shift``, the noise quantile at ``tau``.
    """

    p: int
    s: float
    coeffs: np.ndarray
    intercept: float
    noise: Noise
    tau: float
    Q: float
    R: float
    decay: float = 0.6
    neglected_tail: float = 0.0

    def __post_init__(self):
        self.coeffs = np.asarray(self.coeffs, dtype=np.float64)
        if self.coeffs.ndim != 2 or self.coeffs.shape[0] != self.p:
            raise ValueError("coeffs must have shape (p, J_truth)")

    @property
    def J_truth(self) -> int:
        return self.coeffs.shape[1]

    @property
    def tau_shift(self) -> float:
        return self.noise.quantile(self.tau)

    @property
    def quantile_intercept(self) -> float:
        return self.intercept + self.tau_shift

    def with_tau(self, tau: float) -> "TrueModel":
        return TrueModel(self.p, self.s, self.coeffs, self.intercept, self.noise, tau,
                         self.Q, self.R, self.decay, self.neglected_tail)

    def sobolev_norms_sq(self) -> np.ndarray:
        j = np.arange(1, self.J_truth + 1)
        return ((j**self.s * self.coeffs) ** 2).sum(axis=1)

    def l1_norm(self) -> float:
        return float(np.abs(self.coeffs).sum() + abs(self.intercept))

    def tail(self, J: int) -> float:
        """``sum_k sum_{j > J} coeffs[k, j]**2``."""
        return float((self.coeffs[:, J:] ** 2).sum())

    def regression(self, X) -> np.ndarray:
        X = np.asarray(X, dtype=np.float64)
        out = np.full(X.shape[0], self.intercept)
        for k in range(self.p):
            out += _series(X[:, k], self.coeffs[k])
        return out

    def quantile_function(self, X) -> np.ndarray:
        return self.regression(X) + self.tau_shift


def _unit_powers(x: np.ndarray, freq: int, count: int, first: int) -> np.ndarray:
    # columns exp(2 pi i freq x)^m for m = first .. first+count-1
    ang = (2.0 * np.pi * freq) * x
    z = np.cos(ang) + 1j * np.sin(ang)
    out = np.empty((x.shape[0], count), dtype=np.complex128)
    out[:] = z[:, None]
    if first == 0:
        out[:, 0] = 1.0
    return np.cumprod(out, axis=1)


def _series(x: np.ndarray, c: np.ndarray) -> np.ndarray:
    """``sum_j c[j-1] psi_j(x)`` for the centered trigonometric basis.

    Uses ``sqrt2 * Re(sum_k (b_k - i a_k) z^k)`` with ``z = exp(2 pi i x)``.
    Powers are split as ``z^(m*blk) * z^r`` with both factors built by short
    running products, so rounding error grows with ``sqrt(K)`` rather than ``K``.
    """
    J = c.shape[0]
    K = (J + 1) // 2
    cc = np.zeros(K, dtype=np.complex128)
    a = c[0::2]  # sine coefficients
    b = c[1::2]  # cosine coefficients
    cc[: a.shape[0]] -= 1j * a
    cc[: b.shape[0]] += b
    blk = max(1, int(math.ceil(math.sqrt(K))))
    M = -(-K // blk)
    cpad = np.zeros(M * blk, dtype=np.complex128)
    cpad[:K] = cc
    C = cpad.reshape(M, blk).T  # C[r, m] = coefficient of z^(m*blk + r + 1)
    out = np.empty(x.shape[0])
    for lo in range(0, x.shape[0], CHUNK):
        xs = x[lo : lo + CHUNK]
        low = _unit_powers(xs, 1, blk, 1)
        high = _unit_powers(xs, blk, M, 0)
        out[lo : lo + CHUNK] = SQRT2 * np.einsum("nm,nm->n", low @ C, high).real
    return out


def make_sobolev_truth(
    p: int,
    s: float,
    Q: float,
    R: float,
    seed: int,
    *,
    tau: float = 0.5,
    noise: Noise | None = None,
    intercept: float = 0.5,
    J_truth: int = 2000,
    decay: float = 0.6,
) -> TrueModel:
    """Random additive truth with ``theta_kj = c_k zeta_kj j^-(s + decay)``.

    ``zeta`` has random signs and magnitudes in ``[0.5, 1]``. Each ``c_k`` is
    first set so the component's Sobolev norm is ``Q`` (less ``1e-9``
    relative); if the total l1
    norm (intercept included) then exceeds ``R`` all ``c_k`` shrink by a
    common factor.
    """
    if not s > 0.5:
        raise ValueError("s must exceed 1/2")
    if decay <= 0.5:
        raise ValueError("decay offset must exceed 1/2 for a finite Sobolev norm")
    if Q <= 0 or R <= 0:
        raise ValueError("Q and R must be positive")
    if abs(intercept) >= R:
        raise ValueError(f"infeasible: |intercept|={abs(intercept)} leaves no l1 budget under R={R}")
    rng = np.random.default_rng(seed)
    j = np.arange(1, J_truth + 1, dtype=np.float64)
    zeta = rng.uniform(0.5, 1.0, (p, J_truth)) * rng.choice([-1.0, 1.0], (p, J_truth))
    raw = zeta * j ** -(s + decay)
    sob = np.sqrt(((j**s * raw) ** 2).sum(axis=1))
    # a hair inside the ellipsoid so rounding never lands on its boundary
    coeffs = raw * (Q * (1.0 - 1e-9) / sob)[:, None]
    budget = R - abs(intercept)
    l1 = np.abs(coeffs).sum()
    if l1 > budget:
        coeffs *= budget / l1
    # the infinite-series tail dropped at J_truth, bounded with |zeta| <= 1
    scale = np.abs(coeffs[:, 0] / raw[:, 0]).max()
    e = 2 * (s + decay)
    neglected = p * scale**2 * J_truth ** (1 - e) / (e - 1)
    noise = Noise.gaussian(1.0) if noise is None else noise
    return TrueModel(p, s, coeffs, intercept, noise, tau, Q, R, decay, float(neglected))


def sample_arrays(model: TrueModel, n: int, rng: np.random.Generator):
    """``n`` draws ``(X, y)`` with ``X ~ U[0,1]^p``; generated chunk by chunk."""
    Xs, ys = [], []
    got = 0
    while got < n:
        X = rng.random((CHUNK, model.p))
        eps = model.noise.sample(rng, CHUNK)
        take = min(CHUNK, n - got)
        X = X[:take]
        Xs.append(X)
        ys.append(model.regression(X) + eps[:take])
        got += take
    if not Xs:
        return np.empty((0, model.p)), np.empty(0)
    return np.concatenate(Xs), np.concatenate(ys)


def _chunks(model: TrueModel, rng: np.random.Generator):
    while True:
        X = rng.random((CHUNK, model.p))
        eps = model.noise.sample(rng, CHUNK)
        yield X, model.regression(X) + eps


def sample_stream(model: TrueModel, n: int, rng: np.random.Generator):
    """Yield ``n`` :class:`~pfgd.core.Sample` objects from the model."""
    X, y = sample_arrays(model, n, rng)
    for i in range(n):
        yield Sample(X[i], y[i])


def exact_l2_error(state: CoefficientState, model: TrueModel) -> float:
    """Squared L2 distance between the fitted and the true quantile function."""
    if state.p != model.p:
        raise ValueError(f"state has p={state.p}, model has p={model.p}")
    return _l2_rows(state.theta[None, :], state.J, model)[0]


def _l2_rows(theta: np.ndarray, J: int, model: TrueModel) -> np.ndarray:
    L = theta.shape[0]
    blocks = theta[:, 1:].reshape(L, model.p, J)
    Jt = model.J_truth
    m = min(J, Jt)
    err = (theta[:, 0] - model.quantile_intercept) ** 2
    err = err + ((blocks[:, :, :m] - model.coeffs[None, :, :m]) ** 2).sum(axis=(1, 2))
    if J > Jt:
        err = err + (blocks[:, :, Jt:] ** 2).sum(axis=(1, 2))
    return err + model.tail(J)


@dataclass
class EvaluationReport:
    t: int
    N: int
    J: int
    gamma: float
    l2_error_sq: float
    streamed_pinball: float
    wall_time_ns: int

    COLUMNS = ("t", "N", "J", "gamma", "l2_error_sq", "streamed_pinball", "wall_time_ns")

    def as_row(self) -> dict:
        return {k: getattr(self, k) for k in self.COLUMNS}


def geometric_checkpoints(horizon: int, start: int = 1) -> list[int]:
    """Powers of two in ``[start, horizon]``, plus ``horizon`` itself."""
    out = []
    c = 1
    while c <= horizon:
        if c >= start:
            out.append(c)
        c *= 2
    if horizon >= 1 and (not out or out[-1] != horizon):
        out.append(horizon)
    return out


def run_sweep(
    config: EstimatorConfig,
    model: TrueModel,
    horizon: int,
    seeds,
    checkpoints=None,
    batch_size: int = 1,
    keep_final: bool = False,
):
    """Run one learner per seed on its own data stream, all in lock step.

    ``horizon`` and ``checkpoints`` count samples (``N``). A report is taken
    after the first step whose cumulative count reaches each checkpoint.
    Returns one report list per seed (and the final bank if ``keep_final``).
    """
    seeds = list(seeds)
    if config.mode is Mode.SINGLE and batch_size != 1:
        raise ValueError("single-sample mode needs batch_size=1")
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    if model.p != config.p:
        raise ValueError("model and config disagree on p")
    if abs(model.tau - config.tau) > 0:
        model = model.with_tau(config.tau)
    cps = sorted(set(geometric_checkpoints(horizon) if checkpoints is None else checkpoints))
    cps = [c for c in cps if 1 <= c <= horizon]
    L = len(seeds)
    reports = [[] for _ in range(L)]
    bank = LearnerBank(config, L)
    if horizon <= 0 or L == 0:
        return (reports, bank) if keep_final else reports

    streams = [_chunks(model, np.random.default_rng(sd)) for sd in seeds]
    bufX = np.empty((L, 0, config.p))
    bufy = np.empty((L, 0))
    loss_total = np.zeros(L)
    ci = 0
    start = time.perf_counter_ns()
    while bank.N < horizon:
        n = min(batch_size, horizon - bank.N)
        if bufy.shape[1] < n:
            fresh = [next(s) for s in streams]
            bufX = np.concatenate([bufX, np.stack([f[0] for f in fresh])], axis=1)
            bufy = np.concatenate([bufy, np.stack([f[1] for f in fresh])], axis=1)
        X, Y = bufX[:, :n], bufy[:, :n]
        bufX, bufy = bufX[:, n:], bufy[:, n:]
        yhat = bank.step(X, Y)
        loss_total += pinball_loss(config.tau, Y - yhat).sum(axis=1)
        if ci < len(cps) and bank.N >= cps[ci]:
            # one report per step even if a batch crosses several checkpoints
            while ci < len(cps) and bank.N >= cps[ci]:
                ci += 1
            errs = _l2_rows(bank.theta, bank.J, model)
            wall = time.perf_counter_ns() - start
            for i in range(L):
                reports[i].append(EvaluationReport(
                    bank.t, bank.N, bank.J, bank.last_gamma, float(errs[i]),
                    float(loss_total[i] / bank.N), wall,
                ))
    return (reports, bank) if keep_final else reports


def run_experiment(config, model, horizon, checkpoints=None, seed=0, batch_size=1):
    """Single-seed :func:`run_sweep`; identical to that seed's lane of a sweep."""
    return run_sweep(config, model, horizon, [seed], checkpoints, batch_size)[0]


def _ols_slope(x: np.ndarray, y: np.ndarray) -> float:
    xc = x - x.mean()
    return float((xc * (y - y.mean())).sum() / (xc * xc).sum())


def _window(xs, window):
    xs = np.asarray(xs, dtype=np.float64)
    if window is None:
        return np.ones(xs.shape, dtype=bool)
    lo, hi = window
    return (xs >= lo) & (xs <= hi)


def rate_slope(reports, window=None, axis: str = "N") -> float:
    """OLS slope of ``log(l2_error_sq)`` against ``log(N)`` (or ``log(t)``).

    ``window=(lo, hi)`` keeps reports whose abscissa lies in ``[lo, hi]``.
    """
    xs = np.array([getattr(r, axis) for r in reports], dtype=np.float64)
    ys = np.array([r.l2_error_sq for r in reports], dtype=np.float64)
    keep = _window(xs, window)
    xs, ys = xs[keep], ys[keep]
    if xs.size < 3:
        raise ValueError("need at least 3 reports in the window")
    if np.any(np.diff(xs) <= 0):
        raise ValueError("abscissae must be strictly increasing")
    if np.any(ys <= 0):
        raise ValueError("errors must be positive to take logs")
    return _ols_slope(np.log(xs), np.log(ys))


def mean_log_curve(runs, axis: str = "N"):
    """Abscissa and the across-run mean of ``log(l2_error_sq)``."""
    xs = np.array([getattr(r, axis) for r in runs[0]], dtype=np.float64)
    for run in runs[1:]:
        if [getattr(r, axis) for r in run] != list(xs):
            raise ValueError("runs were checkpointed at different points")
    logs = np.array([[math.log(r.l2_error_sq) for r in run] for run in runs])
    return xs, logs.mean(axis=0)


def sweep_slope(runs, window=None, axis: str = "N") -> float:
    """Slope of the mean log error across runs against log of the abscissa."""
    xs, ml = mean_log_curve(runs, axis)
    keep = _window(xs, window)
    if keep.sum() < 3:
        raise ValueError("need at least 3 checkpoints in the window")
    return _ols_slope(np.log(xs[keep]), ml[keep])


def coverage(predict, model: TrueModel, n: int, rng: np.random.Generator) -> float:
    """Held-out fraction of ``y <= predict(X)`` on ``n`` fresh draws."""
    X, y = sample_arrays(model, n, rng)
    return float(np.mean(y <= predict(X)))


def monte_carlo_l2(state: CoefficientState, model: TrueModel, basis: BasisSpec, X) -> tuple[float, float]:
    """Monte-Carlo mean of ``(q_hat - q_tau)^2`` at points ``X`` and its standard error."""
    d2 = (predict_many(state, basis, X) - model.quantile_function(X)) ** 2
    return float(d2.mean()), float(d2.std(ddof=1) / math.sqrt(d2.shape[0]))


def manifest(config: EstimatorConfig, model: TrueModel, **extra) -> dict:
    out = {
        "config": config.to_dict(),
        "model": {
            "p": model.p,
            "s": model.s,
            "Q": model.Q,
            "R": model.R,
            "intercept": model.intercept,
            "noise": model.noise.label(),
            "tau": model.tau,
            "J_truth": model.J_truth,
            "decay": model.decay,
            "neglected_tail": model.neglected_tail,
        },
    }
    out.update(extra)
    return out
