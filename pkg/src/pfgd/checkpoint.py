"""Bit-exact JSON checkpoints for learners and ensembles.

Floats are stored with :meth:`float.hex`, so a save/load round trip
reproduces every coefficient exactly. Each checkpoint carries the config
and its SHA-256 digest; loading against a different config is refused.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .core import CoefficientState, EstimatorConfig, LearnerBank, StreamedPinball
from .ensemble import EnsembleConfig, OnlineEnsemble

FORMAT = "pfgd-checkpoint"
ENSEMBLE_FORMAT = "pfgd-ensemble"
VERSION = 1


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    config: EstimatorConfig
    state: CoefficientState
    loss: StreamedPinball
    extra: dict = field(default_factory=dict)


def _hex(values) -> list[str]:
    return [float(v).hex() for v in values]


def _unhex(values) -> np.ndarray:
    return np.array([float.fromhex(v) for v in values], dtype=np.float64)


def to_record(config: EstimatorConfig, state: CoefficientState,
              loss: StreamedPinball | None = None, extra: dict | None = None) -> dict:
    loss = loss or StreamedPinball(config.tau)
    return {
        "format": FORMAT,
        "version": VERSION,
        "config": config.to_dict(),
        "config_digest": config.digest(),
        "t": state.t,
        "N": state.N,
        "J": state.J,
        "p": state.p,
        "theta": _hex(state.theta),
        "streamed_pinball": {"total": float(loss.total).hex(), "count": loss.count},
        "extra": extra or {},
    }


def from_record(rec: dict, expect: EstimatorConfig | None = None) -> Checkpoint:
    if rec.get("format") != FORMAT:
        raise CheckpointError("not a pfgd checkpoint")
    if rec.get("version") != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {rec.get('version')!r}")
    config = EstimatorConfig.from_dict(rec["config"])
    if config.digest() != rec["config_digest"]:
        raise CheckpointError("checkpoint config digest does not match its config")
    if expect is not None and expect.digest() != config.digest():
        raise CheckpointError("checkpoint was written with a different config")
    state = CoefficientState(_unhex(rec["theta"]), rec["p"], rec["J"], rec["t"], rec["N"])
    sp = rec["streamed_pinball"]
    loss = StreamedPinball(config.tau, float.fromhex(sp["total"]), sp["count"])
    return Checkpoint(config, state, loss, rec.get("extra", {}))


def _atomic_write(path: Path, text: str) -> None:
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text)
    os.replace(tmp, path)


def save_checkpoint(path, config: EstimatorConfig, state: CoefficientState,
                    loss: StreamedPinball | None = None, extra: dict | None = None) -> None:
    _atomic_write(Path(path), json.dumps(to_record(config, state, loss, extra), indent=1))


def load_checkpoint(path, expect: EstimatorConfig | None = None) -> Checkpoint:
    try:
        rec = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    try:
        return from_record(rec, expect)
    except (KeyError, TypeError) as exc:
        raise CheckpointError(f"malformed checkpoint {path}: {exc}") from exc


def save_ensemble(directory, ensemble) -> None:
    """One checkpoint per replicate plus ``manifest.json``; single-stream only."""
    if not isinstance(ensemble, OnlineEnsemble) or ensemble.groups != 1:
        raise CheckpointError("only single-stream ensembles can be checkpointed")
    cfg = ensemble.config
    if callable(cfg.subset):
        raise CheckpointError("callable subset rules cannot be serialized")
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    files = []
    for b, (state, rng) in enumerate(zip(ensemble.replicate_states(0), ensemble.rngs)):
        name = f"replicate_{b:03d}.json"
        save_checkpoint(d / name, cfg.base, state, extra={"rng": rng.bit_generator.state})
        files.append(name)
    loss = ensemble.loss[0]
    manifest = {
        "format": ENSEMBLE_FORMAT,
        "version": VERSION,
        "config_digest": cfg.base.digest(),
        "replicates": cfg.replicates,
        "subset": cfg.subset,
        "seed": cfg.seed,
        "always_include_intercept": cfg.always_include_intercept,
        "streamed_pinball": {"total": float(loss.total).hex(), "count": loss.count},
        "files": files,
    }
    _atomic_write(d / "manifest.json", json.dumps(manifest, indent=1))


def load_ensemble(directory, expect: EstimatorConfig | None = None) -> OnlineEnsemble:
    d = Path(directory)
    try:
        man = json.loads((d / "manifest.json").read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"cannot read ensemble manifest in {d}: {exc}") from exc
    if man.get("format") != ENSEMBLE_FORMAT:
        raise CheckpointError("not a pfgd ensemble directory")
    cks = [load_checkpoint(d / f, expect) for f in man["files"]]
    base = cks[0].config
    if any(c.config.digest() != man["config_digest"] for c in cks):
        raise CheckpointError("replicate configs disagree with the manifest")
    cfg = EnsembleConfig(base, man["replicates"], man["subset"], man["seed"],
                         man["always_include_intercept"])
    ens = OnlineEnsemble(cfg)
    ens.bank = LearnerBank.from_states(base, [c.state for c in cks])
    for rng, c in zip(ens.rngs, cks):
        rng.bit_generator.state = c.extra["rng"]
    sp = man["streamed_pinball"]
    ens.loss[0] = StreamedPinball(base.tau, float.fromhex(sp["total"]), sp["count"])
    return ens


def is_ensemble_dir(path) -> bool:
    return Path(path).is_dir() and (Path(path) / "manifest.json").exists()
