"""Random-coordinate ensembles of P-FGD learners.

Each replicate sees every sample but only moves a random subset of ``S_t``
coordinates per step (the rest get zero gradient); the full vector is still
projected. The ensemble prediction is the plain mean of the replicates.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Union

import numpy as np

from .basis import BasisSpec
from .core import (
    CoefficientState,
    EstimatorConfig,
    LearnerBank,
    Mode,
    Sample,
    StreamedPinball,
    _single,
    pinball_loss,
    predict_many,
    truncation_dim,
)

SubsetRule = Union[str, float, int, Callable[[int, int], int]]


def half_rule(t: int, count: int) -> int:
    return math.ceil(count / 2)


def full_rule(t: int, count: int) -> int:
    return count


@dataclass(frozen=True)
class EnsembleConfig:
    """Ensemble hyperparameters.

    ``subset`` gives ``S_t`` from ``(t, count)``: ``"half"`` (default),
    ``"full"``, a fraction in ``(0, 1]``, a fixed integer (capped at
    ``count``), or any callable. ``count`` is the total number of
    coordinates ``1 + p*J_t`` including the intercept.
    """

    base: EstimatorConfig
    replicates: int = 1
    subset: SubsetRule = "half"
    seed: int = 0
    always_include_intercept: bool = False

    def __post_init__(self):
        if int(self.replicates) != self.replicates or self.replicates < 1:
            raise ValueError(f"replicates must be a positive integer, got {self.replicates!r}")
        if self.base.mode is not Mode.SINGLE:
            raise ValueError("ensembles run on single-sample learners")
        if isinstance(self.subset, str) and self.subset not in ("half", "full"):
            raise ValueError(f"unknown subset rule {self.subset!r}")
        if isinstance(self.subset, float) and not 0.0 < self.subset <= 1.0:
            raise ValueError("fractional subset must lie in (0, 1]")

    def subset_size(self, t: int, count: int) -> int:
        rule = self.subset
        if rule == "half":
            S = half_rule(t, count)
        elif rule == "full":
            S = count
        elif isinstance(rule, float):
            S = math.ceil(rule * count)
        elif isinstance(rule, int):
            S = min(rule, count)
        else:
            S = int(rule(t, count))
        if not 1 <= S <= count:
            raise ValueError(f"subset size {S} outside [1, {count}] at t={t}")
        return S

    def subset_label(self) -> str:
        return self.subset if isinstance(self.subset, str) else repr(self.subset)


def select_coordinates(count: int, S: int, rng: np.random.Generator) -> np.ndarray:
    """Uniformly random ``S``-subset of ``range(count)``, sorted.

    The subset is the indices of the ``S`` smallest of ``count`` i.i.d.
    uniform keys. ``S == count`` returns every index without touching ``rng``.
    """
    if not 1 <= S <= count:
        raise ValueError(f"need 1 <= S <= count, got S={S}, count={count}")
    if S == count:
        return np.arange(count)
    keys = rng.random(count)
    return np.sort(np.argpartition(keys, S - 1)[:S])


def _mask_rows(rngs, count: int, S: int, keep_intercept: bool) -> np.ndarray:
    L = len(rngs)
    if S == count:
        return np.ones((L, count), dtype=bool)
    if keep_intercept:
        mask = np.zeros((L, count), dtype=bool)
        mask[:, 0] = True
        if S > 1:
            mask[:, 1:] = _mask_rows(rngs, count - 1, S - 1, False)
        return mask
    keys = np.empty((L, count))
    for i, rng in enumerate(rngs):
        rng.random(out=keys[i])
    kth = np.partition(keys, S - 1, axis=1)[:, S - 1]
    return keys <= kth[:, None]


def update_masked(state: CoefficientState, config: EstimatorConfig, sample: Sample, mask) -> CoefficientState:
    """Single-sample step where only coordinates in ``mask`` receive gradient.

    ``mask`` indexes the vector after this step's dimension alignment, i.e.
    ``range(1 + p*J_t)``.
    """
    J = max(state.J, truncation_dim(config, state.t + 1))
    D = 1 + config.p * J
    idx = np.asarray(list(mask), dtype=np.int64)
    if idx.size == 0:
        raise ValueError("mask must select at least one coordinate")
    if idx.min() < 0 or idx.max() >= D:
        raise ValueError(f"mask index out of range for dimension {D}")
    m = np.zeros(D, dtype=bool)
    m[idx] = True
    return _single(state, config, sample, m)[0]


def ensemble_predict(replicate_states, basis: BasisSpec, x) -> float:
    """Mean of the replicate predictions at one point."""
    states = list(replicate_states)
    if not states:
        raise ValueError("no replicates")
    first = states[0]
    for s in states[1:]:
        if (s.p, s.J) != (first.p, first.J):
            raise ValueError("replicates have mismatched layouts")
    x = np.atleast_1d(np.asarray(x, dtype=np.float64))
    vals = [predict_many(s, basis, x[None, :])[0] for s in states]
    return float(np.mean(vals))


class OnlineEnsemble:
    """``B`` masked replicates per data stream, optionally several streams.

    With ``seeds=[s0, s1, ...]`` the ensemble runs one independent group of
    ``B`` replicates per stream; group ``g`` is bit-identical to a
    single-stream ensemble built with ``seed=seeds[g]``. ``X`` passed to
    :meth:`step` is ``(G, p)``, one point per stream.
    """

    def __init__(self, config: EnsembleConfig, seeds=None):
        self.config = config
        seeds = [config.seed] if seeds is None else list(seeds)
        self.groups = len(seeds)
        B = config.replicates
        self.rngs = []
        for sd in seeds:
            self.rngs.extend(np.random.default_rng(ss) for ss in np.random.SeedSequence(sd).spawn(B))
        self.bank = LearnerBank(config.base, self.groups * B)
        self.loss = [StreamedPinball(config.base.tau) for _ in seeds]

    @property
    def t(self) -> int:
        return self.bank.t

    @property
    def J(self) -> int:
        return self.bank.J

    def _mask(self, count: int) -> np.ndarray:
        S = self.config.subset_size(self.bank.t + 1, count)
        return _mask_rows(self.rngs, count, S, self.config.always_include_intercept)

    def step(self, X, y) -> np.ndarray:
        """One sample per stream; returns the pre-update ensemble predictions."""
        X = np.asarray(X, dtype=np.float64).reshape(self.groups, self.config.base.p)
        y = np.asarray(y, dtype=np.float64).reshape(self.groups)
        B = self.config.replicates
        Xl = np.repeat(X, B, axis=0)[:, None, :]
        yl = np.repeat(y, B)[:, None]
        yhat = self.bank.step(Xl, yl, self._mask)[:, 0].reshape(self.groups, B).mean(axis=1)
        losses = pinball_loss(self.config.base.tau, y - yhat)
        for g in range(self.groups):
            self.loss[g].total += float(losses[g])
            self.loss[g].count += 1
        return yhat

    def partial_fit(self, x, y: float) -> "OnlineEnsemble":
        sample = Sample(x, y)
        self.step(sample.x[None, :], [sample.y])
        return self

    def predict(self, X) -> np.ndarray:
        """Ensemble predictions, shape ``(G, m)``; ``X`` is ``(m, p)``."""
        P = self.bank.predict(X)
        B = self.config.replicates
        return P.reshape(self.groups, B, -1).mean(axis=1)

    def replicate_states(self, group: int = 0) -> list[CoefficientState]:
        B = self.config.replicates
        return [self.bank.state(group * B + b) for b in range(B)]
