"""Projected functional stochastic subgradient descent for quantile regression.

The learner keeps a single coefficient vector ``theta`` of length
``1 + p*J`` (layout as in :mod:`pfgd.basis`). Each update grows ``J`` on
schedule, pads ``theta`` with zeros block by block, takes a pinball-loss
subgradient step and projects back onto the l1 ball of radius ``R``.

All update paths funnel through :func:`_step`, which operates on a stack of
independent coefficient vectors (one per row). Row results do not depend on
how many rows are stacked, so a bank of learners and a lone learner produce
bit-identical trajectories on the same data.
"""

from __future__ import annotations

import dataclasses
import enum
import hashlib
import json
import math
from dataclasses import dataclass, field

import numpy as np

from .basis import BasisFamily, BasisSpec, check_unit
from .projection import project_rows


class Mode(str, enum.Enum):
    SINGLE = "single"
    MINI_BATCH = "minibatch"


def default_step_constant(tau: float) -> float:
    """Heuristic scale ``1 / (tau (1 - tau))`` for the step-size constant."""
    return 1.0 / (tau * (1.0 - tau))


@dataclass(frozen=True)
class EstimatorConfig:
    """Hyperparameters of one learner.

    ``A=None`` selects :func:`default_step_constant`. ``basis`` defaults to the
    centered trigonometric basis in ``p`` dimensions.
    """

    tau: float
    R: float
    s: float
    p: int = 1
    A: float | None = None
    mode: Mode = Mode.SINGLE
    basis: BasisSpec | None = None
    seed: int = 0

    def __post_init__(self):
        if not 0.0 < self.tau < 1.0:
            raise ValueError(f"tau must lie in (0, 1), got {self.tau!r}")
        if not (self.R > 0 and math.isfinite(self.R)):
            raise ValueError(f"R must be positive and finite, got {self.R!r}")
        if not self.s > 0.5:
            raise ValueError(f"smoothness s must exceed 1/2, got {self.s!r}")
        if int(self.p) != self.p or self.p < 1:
            raise ValueError(f"p must be a positive integer, got {self.p!r}")
        if self.A is None:
            object.__setattr__(self, "A", default_step_constant(self.tau))
        if not (self.A > 0 and math.isfinite(self.A)):
            raise ValueError(f"A must be positive and finite, got {self.A!r}")
        object.__setattr__(self, "mode", Mode(self.mode))
        if self.basis is None:
            object.__setattr__(self, "basis", BasisSpec(int(self.p)))
        elif self.basis.dims_p != self.p:
            raise ValueError("basis dimension does not match p")
        object.__setattr__(self, "p", int(self.p))
        for name in ("tau", "R", "s", "A"):
            object.__setattr__(self, name, float(getattr(self, name)))

    @property
    def bound(self) -> float:
        """Deterministic sup-norm bound ``M * R`` on every fitted function."""
        return self.basis.sup_norm_M * self.R

    def replace(self, **changes) -> "EstimatorConfig":
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict:
        return {
            "tau": self.tau,
            "R": self.R,
            "s": self.s,
            "p": self.p,
            "A": self.A,
            "mode": self.mode.value,
            "basis": self.basis.family.value,
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "EstimatorConfig":
        return cls(
            tau=d["tau"],
            R=d["R"],
            s=d["s"],
            p=d["p"],
            A=d["A"],
            mode=Mode(d["mode"]),
            basis=BasisSpec(d["p"], BasisFamily(d["basis"])),
            seed=d.get("seed", 0),
        )

    def digest(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()


@dataclass
class CoefficientState:
    """Coefficients plus counters. ``N == t`` in single-sample mode."""

    theta: np.ndarray
    p: int
    J: int = 1
    t: int = 0
    N: int = 0

    def __post_init__(self):
        self.theta = np.asarray(self.theta, dtype=np.float64)
        if self.theta.shape != (1 + self.p * self.J,):
            raise ValueError(
                f"theta has shape {self.theta.shape}, expected ({1 + self.p * self.J},)"
            )

    @classmethod
    def zeros(cls, p: int, J: int = 1) -> "CoefficientState":
        return cls(np.zeros(1 + p * J), p=p, J=J)

    def copy(self) -> "CoefficientState":
        return CoefficientState(self.theta.copy(), self.p, self.J, self.t, self.N)

    snapshot = copy

    @property
    def intercept(self) -> float:
        return float(self.theta[0])

    def blocks(self) -> np.ndarray:
        """Per-dimension coefficients, shape ``(p, J)``."""
        return self.theta[1:].reshape(self.p, self.J)

    @property
    def l1_norm(self) -> float:
        return float(np.abs(self.theta).sum())


@dataclass(frozen=True)
class Sample:
    x: np.ndarray
    y: float

    def __post_init__(self):
        x = np.atleast_1d(np.asarray(self.x, dtype=np.float64))
        if x.ndim != 1:
            raise ValueError("sample x must be a 1-D point")
        check_unit(x)
        if not math.isfinite(self.y):
            raise ValueError(f"non-finite response y={self.y!r}")
        object.__setattr__(self, "x", x)
        object.__setattr__(self, "y", float(self.y))


@dataclass(frozen=True)
class MiniBatch:
    """``n_t`` samples arriving together; ``X`` has shape ``(n_t, p)``."""

    X: np.ndarray
    y: np.ndarray

    def __post_init__(self):
        X = np.asarray(self.X, dtype=np.float64)
        y = np.asarray(self.y, dtype=np.float64).reshape(-1)
        if X.ndim == 1:
            X = X[:, None]
        if X.shape[0] == 0:
            raise ValueError("mini-batch must contain at least one sample")
        if X.shape[0] != y.shape[0]:
            raise ValueError("X and y lengths differ")
        check_unit(X)
        if not np.all(np.isfinite(y)):
            raise ValueError("non-finite response in mini-batch")
        object.__setattr__(self, "X", X)
        object.__setattr__(self, "y", y)

    @classmethod
    def from_samples(cls, samples) -> "MiniBatch":
        samples = list(samples)
        if not samples:
            raise ValueError("mini-batch must contain at least one sample")
        return cls(np.stack([s.x for s in samples]), np.array([s.y for s in samples]))

    def __len__(self):
        return self.X.shape[0]


def pinball_loss(tau: float, u):
    """Check loss ``u * (tau - 1{u <= 0})``; works elementwise on arrays."""
    u = np.asarray(u, dtype=np.float64)
    out = u * (tau - (u <= 0.0))
    return float(out) if out.ndim == 0 else out


def subgradient_scalar(tau: float, y: float, yhat: float) -> float:
    """``tau - 1{y <= yhat}``; a tie counts as ``y <= yhat``."""
    return tau - 1.0 if y <= yhat else tau


def step_size(config: EstimatorConfig, t: int, n_t: int = 1, N_t: int | None = None) -> float:
    if t < 1:
        raise ValueError(f"t must be >= 1, got {t}")
    if config.mode is Mode.SINGLE:
        return config.A / t
    if N_t is None:
        raise ValueError("mini-batch step size needs the cumulative count N_t")
    if n_t < 1 or N_t < n_t:
        raise ValueError(f"need 1 <= n_t <= N_t, got n_t={n_t}, N_t={N_t}")
    return config.A * n_t / N_t


def truncation_dim(config: EstimatorConfig, n: int) -> int:
    """Smallest integer ``J`` with ``J**(2s+1) >= n``, i.e. ``ceil(n**(1/(2s+1)))``."""
    if n < 1:
        raise ValueError(f"argument must be >= 1, got {n}")
    e = 2.0 * config.s + 1.0
    J = max(1, math.ceil(n ** (1.0 / e)))
    # guard against pow rounding on exact powers
    while J > 1 and (J - 1) ** e >= n:
        J -= 1
    while J**e < n:
        J += 1
    return J


def _align_rows(theta: np.ndarray, p: int, J_old: int, J_new: int) -> np.ndarray:
    if J_new < J_old:
        raise ValueError(f"cannot shrink truncation dimension {J_old} -> {J_new}")
    if J_new == J_old:
        return theta
    L = theta.shape[0]
    out = np.zeros((L, 1 + p * J_new))
    out[:, 0] = theta[:, 0]
    out[:, 1:].reshape(L, p, J_new)[:, :, :J_old] = theta[:, 1:].reshape(L, p, J_old)
    return out


def _predict_rows(theta: np.ndarray, Psi: np.ndarray) -> np.ndarray:
    # theta (L, D), Psi (L, n, D) -> (L, n); reduction over the contiguous last axis
    return (Psi * theta[:, None, :]).sum(axis=-1)


def _step(theta, p, J_old, J_new, basis, X, Y, tau, gamma, R, mask=None):
    """One projected subgradient step for a stack of learners.

    ``theta`` is ``(L, 1+p*J_old)``, ``X`` is ``(L, n, p)``, ``Y`` is ``(L, n)``.
    ``mask`` (boolean, ``(L, 1+p*J_new)``) restricts which coordinates move.
    Returns ``(theta_new, yhat, lam, interior)``.
    """
    theta = _align_rows(theta, p, J_old, J_new)
    Psi = basis.design(X, J_new)
    yhat = _predict_rows(theta, Psi)
    sg = np.where(Y <= yhat, tau - 1.0, tau)
    G = (Psi.transpose(0, 2, 1) * sg[:, None, :]).sum(axis=-1) / Y.shape[1]
    moved = theta + gamma * G
    if mask is not None:
        moved = np.where(mask, moved, theta)
    V, lam, interior = project_rows(moved, R)
    return V, yhat, lam, interior


def predict(state: CoefficientState, basis: BasisSpec, x) -> float:
    """Evaluate the fitted quantile function at one point."""
    x = np.atleast_1d(np.asarray(x, dtype=np.float64))
    Psi = basis.design(x[None, None, :], state.J)
    return float(_predict_rows(state.theta[None, :], Psi)[0, 0])


def predict_many(state: CoefficientState, basis: BasisSpec, X) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    if X.ndim == 1:
        X = X[:, None]
    Psi = basis.design(X[None], state.J)
    return _predict_rows(state.theta[None, :], Psi)[0]


def align_dimension(state: CoefficientState, J_new: int) -> CoefficientState:
    """Zero-pad every block from ``state.J`` to ``J_new`` coefficients."""
    theta = _align_rows(state.theta[None, :], state.p, state.J, int(J_new))[0]
    if J_new == state.J:
        theta = theta.copy()
    return CoefficientState(theta, state.p, int(J_new), state.t, state.N)


def _check_state(state: CoefficientState, config: EstimatorConfig) -> None:
    if state.p != config.p:
        raise ValueError(f"state has p={state.p}, config has p={config.p}")


@dataclass
class StepInfo:
    yhat: np.ndarray
    gamma: float
    lam: float
    was_interior: bool


def _single(state, config, sample, mask=None):
    if config.mode is not Mode.SINGLE:
        raise ValueError("update_single requires a single-sample configuration")
    _check_state(state, config)
    if sample.x.shape != (config.p,):
        raise ValueError(f"sample has {sample.x.shape[0]} covariates, expected {config.p}")
    t = state.t + 1
    J = max(state.J, truncation_dim(config, t))
    gamma = step_size(config, t)
    theta, yhat, lam, interior = _step(
        state.theta[None, :], config.p, state.J, J, config.basis,
        sample.x[None, None, :], np.array([[sample.y]]), config.tau, gamma, config.R,
        None if mask is None else mask[None, :],
    )
    new = CoefficientState(theta[0], config.p, J, t, state.N + 1)
    return new, StepInfo(yhat[0], gamma, float(lam[0]), bool(interior[0]))


def update_single(state: CoefficientState, config: EstimatorConfig, sample: Sample) -> CoefficientState:
    """Process one observation; returns a new state and leaves ``state`` untouched."""
    return _single(state, config, sample)[0]


def _batch(state, config, batch):
    if config.mode is not Mode.MINI_BATCH:
        raise ValueError("update_batch requires a mini-batch configuration")
    _check_state(state, config)
    if batch.X.shape[1] != config.p:
        raise ValueError(f"batch has {batch.X.shape[1]} covariates, expected {config.p}")
    n = len(batch)
    t = state.t + 1
    N = state.N + n
    J = max(state.J, truncation_dim(config, N))
    gamma = step_size(config, t, n, N)
    theta, yhat, lam, interior = _step(
        state.theta[None, :], config.p, state.J, J, config.basis,
        batch.X[None], batch.y[None], config.tau, gamma, config.R,
    )
    new = CoefficientState(theta[0], config.p, J, t, N)
    return new, StepInfo(yhat[0], gamma, float(lam[0]), bool(interior[0]))


def update_batch(state: CoefficientState, config: EstimatorConfig, batch: MiniBatch) -> CoefficientState:
    """Process ``n_t`` simultaneous observations with one averaged step."""
    return _batch(state, config, batch)[0]


@dataclass
class StreamedPinball:
    """Running mean of the prequential pinball loss."""

    tau: float
    total: float = 0.0
    count: int = 0

    def add(self, y, yhat) -> None:
        losses = np.atleast_1d(pinball_loss(self.tau, np.asarray(y) - np.asarray(yhat)))
        for v in losses:
            self.total += float(v)
            self.count += 1

    @property
    def mean(self) -> float | None:
        return self.total / self.count if self.count else None


@dataclass
class OnlineQuantileRegressor:
    """Stateful convenience wrapper: one learner, its config and its streamed loss.

    >>> cfg = EstimatorConfig(tau=0.5, R=2.0, s=2.0, p=1)
    >>> model = OnlineQuantileRegressor(cfg)
    >>> model.partial_fit([0.25], 1.0).state.t
    1
    """

    config: EstimatorConfig
    state: CoefficientState = None
    loss: StreamedPinball = None
    last_step: StepInfo | None = field(default=None, repr=False)

    def __post_init__(self):
        if self.state is None:
            self.state = CoefficientState.zeros(self.config.p)
        if self.loss is None:
            self.loss = StreamedPinball(self.config.tau)

    def partial_fit(self, x, y: float) -> "OnlineQuantileRegressor":
        sample = Sample(x, y)
        self.state, info = _single(self.state, self.config, sample)
        self.loss.add(sample.y, info.yhat)
        self.last_step = info
        return self

    def partial_fit_batch(self, X, y) -> "OnlineQuantileRegressor":
        batch = MiniBatch(X, y)
        self.state, info = _batch(self.state, self.config, batch)
        self.loss.add(batch.y, info.yhat)
        self.last_step = info
        return self

    def update(self, item) -> "OnlineQuantileRegressor":
        """Dispatch on :class:`Sample` or :class:`MiniBatch`."""
        if isinstance(item, MiniBatch):
            return self.partial_fit_batch(item.X, item.y)
        return self.partial_fit(item.x, item.y)

    def predict(self, X) -> np.ndarray:
        return predict_many(self.state, self.config.basis, X)


class LearnerBank:
    """``L`` independent learners that share a config and therefore a schedule.

    Row ``i`` of ``theta`` evolves exactly as a lone learner fed the same
    data would. ``X`` passed to :meth:`step` has shape ``(L, n, p)``.
    """

    def __init__(self, config: EstimatorConfig, lanes: int):
        if lanes < 1:
            raise ValueError("need at least one lane")
        self.config = config
        self.lanes = lanes
        self.theta = np.zeros((lanes, 1 + config.p))
        self.J = 1
        self.t = 0
        self.N = 0

    @classmethod
    def from_states(cls, config: EstimatorConfig, states) -> "LearnerBank":
        states = list(states)
        first = states[0]
        if any((s.J, s.t, s.N) != (first.J, first.t, first.N) for s in states):
            raise ValueError("states are on different schedules")
        bank = cls(config, len(states))
        bank.theta = np.stack([s.theta for s in states])
        bank.J, bank.t, bank.N = first.J, first.t, first.N
        return bank

    def next_schedule(self, n: int) -> tuple[int, int, int, float]:
        """``(t, N, J, gamma)`` that the next step with ``n`` samples would use."""
        t = self.t + 1
        N = self.N + n
        if self.config.mode is Mode.SINGLE:
            if n != 1:
                raise ValueError("single-sample mode takes exactly one sample per step")
            J = max(self.J, truncation_dim(self.config, t))
            gamma = step_size(self.config, t)
        else:
            J = max(self.J, truncation_dim(self.config, N))
            gamma = step_size(self.config, t, n, N)
        return t, N, J, gamma

    def step(self, X, Y, mask_fn=None) -> np.ndarray:
        """Advance every lane by one step; returns the pre-update predictions.

        ``mask_fn(D)`` may return a boolean ``(L, D)`` array of coordinates
        allowed to move, with ``D = 1 + p*J`` the post-alignment dimension.
        """
        X = np.asarray(X, dtype=np.float64)
        Y = np.asarray(Y, dtype=np.float64)
        if X.ndim != 3 or X.shape[0] != self.lanes or X.shape[2] != self.config.p:
            raise ValueError(f"X must have shape ({self.lanes}, n, {self.config.p})")
        if Y.shape != X.shape[:2]:
            raise ValueError("Y must have shape (L, n)")
        if not np.all(np.isfinite(Y)):
            raise ValueError("non-finite response")
        t, N, J, gamma = self.next_schedule(X.shape[1])
        mask = None if mask_fn is None else mask_fn(1 + self.config.p * J)
        cfg = self.config
        self.theta, yhat, _, _ = _step(
            self.theta, cfg.p, self.J, J, cfg.basis, X, Y, cfg.tau, gamma, cfg.R, mask
        )
        self.t, self.N, self.J = t, N, J
        self.last_gamma = gamma
        return yhat

    def predict(self, X) -> np.ndarray:
        """Predictions of every lane; ``X`` is ``(m, p)`` (shared) or ``(L, m, p)``."""
        X = np.asarray(X, dtype=np.float64)
        if X.ndim == 2:
            Psi = self.config.basis.design(X, self.J)
            return self.theta @ Psi.T
        Psi = self.config.basis.design(X, self.J)
        return _predict_rows(self.theta, Psi)

    def state(self, i: int) -> CoefficientState:
        return CoefficientState(self.theta[i].copy(), self.config.p, self.J, self.t, self.N)

    def states(self) -> list[CoefficientState]:
        return [self.state(i) for i in range(self.lanes)]
