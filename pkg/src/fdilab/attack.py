"""Latent-space perturbations of measurement vectors."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class AttackConfig:
    """Latent offset ``c`` scaled by ``gamma``."""

    c: tuple[float, ...]
    gamma: float = 1.0

    def __post_init__(self):
        if not np.all(np.isfinite(self.c)) or not np.isfinite(self.gamma):
            raise ValueError("perturbation must be finite")

    @classmethod
    def uniform(cls, d: int, value: float = 0.1, gamma: float = 1.0) -> "AttackConfig":
        return cls(tuple([float(value)] * d), float(gamma))

    @property
    def offset(self) -> np.ndarray:
        return self.gamma * np.asarray(self.c, dtype=float)

    def to_json(self) -> dict:
        return {"c": list(self.c), "gamma": self.gamma}


def perturb(model, z: np.ndarray, config: AttackConfig) -> np.ndarray:
    """``z + Dec(Enc(z) + gamma c) - Dec(Enc(z))`` for one vector or a batch.

    The additive form leaves ``z`` untouched when ``c = 0`` and keeps any
    reconstruction error of the model out of the attacked series.
    """
    z = np.asarray(z, dtype=float)
    Z = np.atleast_2d(z)
    if len(config.c) != model.d:
        raise ValueError(f"perturbation has length {len(config.c)}, latent dimension is {model.d}")
    U = model.encode(Z)
    out = Z + (model.decode(U + config.offset) - model.decode(U))
    return out.reshape(z.shape)


@dataclass(frozen=True)
class LimitedAttackPlan:
    """Channel indices the attacker can write to."""

    channels: tuple[int, ...]

    def __post_init__(self):
        if not self.channels:
            raise ValueError("critical set must be nonempty")
        if len(set(self.channels)) != len(self.channels) or min(self.channels) < 0:
            raise ValueError("critical set must hold distinct nonnegative indices")

    @property
    def m0(self) -> int:
        return len(self.channels)


def perturb_limited(model, z: np.ndarray, config: AttackConfig,
                    plan: LimitedAttackPlan) -> np.ndarray:
    """Like ``perturb`` but only the channels in ``plan`` change."""
    z = np.asarray(z, dtype=float)
    if max(plan.channels) >= z.shape[-1]:
        raise ValueError("critical set index out of range")
    full = perturb(model, z, config)
    out = z.copy()
    idx = list(plan.channels)
    out[..., idx] = full[..., idx]
    return out


def select_critical_meters(error_profile, m0: int) -> LimitedAttackPlan:
    """The ``m0`` channels with the smallest error; ties go to the lower index."""
    prof = np.asarray(error_profile, dtype=float)
    if not 1 <= m0 <= prof.size:
        raise ValueError(f"m0 must lie in [1, {prof.size}]")
    order = np.argsort(prof, kind="stable")
    return LimitedAttackPlan(tuple(sorted(int(i) for i in order[:m0])))


def random_plan(m: int, m0: int, rng: np.random.Generator) -> LimitedAttackPlan:
    return LimitedAttackPlan(tuple(sorted(int(i) for i in rng.choice(m, m0, replace=False))))


# ---------------------------------------------------------------------------
# one-dimensional counterexample

@dataclass(frozen=True)
class Lemma1Report:
    z: float
    c: float
    output: float
    distance: float
    reconstruction_error: float

    @property
    def on_manifold(self) -> bool:
        return self.distance == 0.0


def _cube_root(x: float) -> float:
    return float(np.cbrt(x))


def lemma1_demo(z: float = 1.0, c: float = -2.0) -> Lemma1Report:
    """Standard autoencoder that is exact on ``H = {x^2}`` yet leaves it under a shift.

    ``Enc(z) = z^(1/3)`` and ``Dec(u) = u^3`` reconstruct every point of the
    half line ``H`` exactly; the shifted output ``Dec(Enc(z) + c)`` is
    negative when ``c < -Enc(z)``, and negative numbers are not squares.
    ``distance`` is the distance from the output to ``H``.
    """
    enc, dec = _cube_root, lambda u: u ** 3
    samples = np.linspace(-3.0, 3.0, 61) ** 2
    recon = max(abs(dec(enc(s)) - s) for s in samples)
    out = dec(enc(z) + c)
    return Lemma1Report(z, c, out, max(0.0, -out), recon)
