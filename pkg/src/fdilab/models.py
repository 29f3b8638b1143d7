"""Autoencoders over measurement vectors: standard, physics-guided and masked.

The physics-guided model reconstructs ``z`` as ``D f(Enc(z))`` where the
latent vector is laid out as a bus state (angles, then magnitudes), ``f`` is
the symbolic basis lift and ``D`` is a plain matrix with no bias.
"""

from __future__ import annotations

import json
import logging
import time
from dataclasses import dataclass, field

import numpy as np

from .basis import DENSE, BasisLift, LiftedBasisSpec, build_basis_spec, dense_spec
from .grid import NetworkCase
from .nn import Adam, Mlp, TrainConfig, schedule
from .powerflow import free_buses

log = logging.getLogger(__name__)

HIDDEN = (64, 64, 64, 64)


class TrainingError(FloatingPointError):
    pass


def _as_matrix(data) -> tuple[np.ndarray, dict]:
    """Accept a ``Dataset`` or a plain ``(N, m)`` array."""
    Z = getattr(data, "Z", data)
    Z = np.atleast_2d(np.asarray(Z, dtype=float))
    if Z.shape[0] == 0:
        raise ValueError("dataset is empty")
    meta = {}
    schema = getattr(data, "schema", None)
    if schema is not None:
        meta["schema_hash"] = schema.digest()
        meta["case"] = data.case.name
    return Z, meta


@dataclass(frozen=True)
class Standardizer:
    mean: np.ndarray
    scale: np.ndarray

    @classmethod
    def fit(cls, Z: np.ndarray) -> "Standardizer":
        sd = Z.std(axis=0)
        # constant channels pass through unscaled
        return cls(Z.mean(axis=0), np.where(sd > 1e-12, sd, 1.0))

    def __call__(self, Z):
        return (Z - self.mean) / self.scale

    def to_json(self) -> dict:
        return {"mean": self.mean.tolist(), "scale": self.scale.tolist()}

    @classmethod
    def from_json(cls, obj) -> "Standardizer":
        return cls(np.array(obj["mean"], float), np.array(obj["scale"], float))


# ---------------------------------------------------------------------------
# latent layout

@dataclass(frozen=True)
class LatentLayout:
    """Where each latent coordinate lands in a bus state.

    Coordinates ``[0, len(va_idx))`` are angles at ``va_idx``; the rest are
    magnitudes at ``vm_idx``. Every other bus keeps angle 0 and the fixed
    magnitude in ``vm_fixed``.
    """

    n_bus: int
    va_idx: tuple[int, ...]
    vm_idx: tuple[int, ...]
    vm_fixed: tuple[float, ...]
    vm_offset: float = 0.0

    @property
    def dim(self) -> int:
        return len(self.va_idx) + len(self.vm_idx)

    @classmethod
    def for_case(cls, case: NetworkCase) -> "LatentLayout":
        """Non-slack angles then non-slack magnitudes; slack magnitude at its setpoint."""
        free = tuple(int(i) for i in free_buses(case))
        fixed = [1.0] * case.n_bus
        fixed[case.slack] = case.buses[case.slack].v_setpoint
        return cls(case.n_bus, free, free, tuple(fixed))

    @classmethod
    def virtual(cls, d: int) -> "LatentLayout":
        """Layout on a synthetic network of ``ceil(d/2) + 1`` buses with bus 0 as reference."""
        if d < 1:
            raise ValueError("latent dimension must be at least 1")
        na, nm = (d + 1) // 2, d // 2
        return cls(na + 1, tuple(range(1, na + 1)), tuple(range(1, nm + 1)),
                   tuple([1.0] * (na + 1)))

    def to_state(self, U: np.ndarray):
        na = len(self.va_idx)
        N = U.shape[0]
        va = np.zeros((N, self.n_bus))
        vm = np.tile(np.asarray(self.vm_fixed), (N, 1))
        va[:, list(self.va_idx)] = U[:, :na]
        vm[:, list(self.vm_idx)] = U[:, na:] + self.vm_offset
        return vm, va

    def pullback(self, g_va: np.ndarray, g_vm: np.ndarray) -> np.ndarray:
        return np.concatenate([g_va[:, list(self.va_idx)], g_vm[:, list(self.vm_idx)]], axis=1)

    def to_json(self) -> dict:
        return {"n_bus": self.n_bus, "va_idx": list(self.va_idx),
                "vm_idx": list(self.vm_idx), "vm_fixed": list(self.vm_fixed),
                "vm_offset": self.vm_offset}

    @classmethod
    def from_json(cls, obj) -> "LatentLayout":
        return cls(obj["n_bus"], tuple(obj["va_idx"]), tuple(obj["vm_idx"]),
                   tuple(obj["vm_fixed"]), obj.get("vm_offset", 0.0))


def resolve_layout(case: NetworkCase, spec: LiftedBasisSpec | None, d: int | None):
    """Pick the latent layout and basis for a requested latent dimension.

    ``d = 2n - 2`` (the default) uses the case's own buses. Any other ``d``
    needs a dense basis and is placed on a virtual network sized to ``d``.
    """
    s = 2 * case.n_bus - 2
    d = s if d is None else int(d)
    if d < 1:
        raise ValueError("latent dimension must be at least 1")
    spec = spec or build_basis_spec(case, DENSE)
    if d == s:
        if spec.n != case.n_bus:
            raise ValueError("basis spec does not match the case")
        return LatentLayout.for_case(case), spec
    if spec.mode != DENSE:
        raise ValueError(f"latent dimension {d} != {s} requires the dense basis")
    layout = LatentLayout.virtual(d)
    return layout, dense_spec(layout.n_bus)


# ---------------------------------------------------------------------------
# models

@dataclass
class PgAeModel:
    encoder: Mlp
    layout: LatentLayout
    spec: LiftedBasisSpec
    D: np.ndarray
    standardizer: Standardizer
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.encoder.dims[-1] != self.layout.dim:
            raise ValueError("encoder output does not match latent layout")
        if self.D.shape[1] != self.spec.p:
            raise ValueError("decoder columns do not match basis size")
        self._lift = BasisLift(self.spec)

    @property
    def d(self) -> int:
        return self.layout.dim

    @property
    def m(self) -> int:
        return self.D.shape[0]

    def encode(self, Z: np.ndarray) -> np.ndarray:
        return self.encoder(self.standardizer(np.atleast_2d(Z)))

    def lift(self, U: np.ndarray) -> np.ndarray:
        vm, va = self.layout.to_state(np.atleast_2d(U))
        return self._lift.forward(vm, va)[0]

    def decode(self, U: np.ndarray) -> np.ndarray:
        return self.lift(U) @ self.D.T

    def reconstruct(self, Z: np.ndarray) -> np.ndarray:
        return self.decode(self.encode(Z))

    def to_json(self) -> dict:
        return {"kind": "pgae", "encoder": self.encoder.to_json(),
                "layout": self.layout.to_json(), "basis": self.spec.to_json(),
                "D": {"shape": list(self.D.shape), "data": self.D.ravel().tolist()},
                "standardizer": self.standardizer.to_json(), "meta": self.meta}

    @classmethod
    def from_json(cls, obj) -> "PgAeModel":
        D = np.array(obj["D"]["data"], float).reshape(obj["D"]["shape"])
        return cls(Mlp.from_json(obj["encoder"]), LatentLayout.from_json(obj["layout"]),
                   LiftedBasisSpec.from_json(obj["basis"]), D,
                   Standardizer.from_json(obj["standardizer"]), obj.get("meta", {}))


@dataclass
class StandardAeModel:
    encoder: Mlp
    decoder: Mlp
    standardizer: Standardizer
    meta: dict = field(default_factory=dict)

    @property
    def d(self) -> int:
        return self.encoder.dims[-1]

    @property
    def m(self) -> int:
        return self.decoder.dims[-1]

    def encode(self, Z: np.ndarray) -> np.ndarray:
        return self.encoder(self.standardizer(np.atleast_2d(Z)))

    def decode(self, U: np.ndarray) -> np.ndarray:
        st = self.standardizer
        return self.decoder(np.atleast_2d(U)) * st.scale + st.mean

    def reconstruct(self, Z: np.ndarray) -> np.ndarray:
        return self.decode(self.encode(Z))

    def to_json(self) -> dict:
        return {"kind": "ae", "encoder": self.encoder.to_json(),
                "decoder": self.decoder.to_json(),
                "standardizer": self.standardizer.to_json(), "meta": self.meta}

    @classmethod
    def from_json(cls, obj) -> "StandardAeModel":
        return cls(Mlp.from_json(obj["encoder"]), Mlp.from_json(obj["decoder"]),
                   Standardizer.from_json(obj["standardizer"]), obj.get("meta", {}))


def save_model(model, path: str) -> None:
    with open(path, "w") as fh:
        json.dump(model.to_json(), fh)


def load_model(path: str):
    with open(path) as fh:
        obj = json.load(fh)
    kinds = {"pgae": PgAeModel, "ae": StandardAeModel}
    if obj.get("kind") not in kinds:
        raise ValueError(f"unknown model kind {obj.get('kind')!r}")
    return kinds[obj["kind"]].from_json(obj)


def reconstruction_error(model, Z: np.ndarray) -> np.ndarray:
    """Per-sample squared error ``||z - recon(z)||^2`` in raw units."""
    R = np.atleast_2d(Z) - model.reconstruct(Z)
    return np.einsum("ij,ij->i", R, R)


def relative_rmse(model, Z: np.ndarray) -> float:
    """Root-mean-square reconstruction error over channels, each scaled by its std."""
    R = (np.atleast_2d(Z) - model.reconstruct(Z)) / model.standardizer.scale
    return float(np.sqrt(np.mean(R * R)))


# ---------------------------------------------------------------------------
# training

def _ridge_decoder(F: np.ndarray, Z: np.ndarray) -> np.ndarray:
    """``D`` minimizing ``||Z - F D'||^2`` with a tiny ridge for conditioning.

    With fewer samples than basis terms the equivalent dual system
    ``(F F' + lam I)`` is solved instead of the ``p x p`` normal equations.
    """
    N, p = F.shape
    if N < p:
        K = F @ F.T
        lam = 1e-10 * max(np.trace(K) / p, 1e-300)
        return (F.T @ np.linalg.solve(K + lam * np.eye(N), Z)).T
    G = F.T @ F
    lam = 1e-10 * max(np.trace(G) / p, 1e-300)
    return np.linalg.solve(G + lam * np.eye(p), F.T @ Z).T


def _check_finite(value, iteration: int, what: str) -> None:
    if not np.all(np.isfinite(value)):
        raise TrainingError(f"{what}: non-finite loss at iteration {iteration}; "
                            "lower the learning rate or check the input scaling")


def _meta(base: dict, config: TrainConfig, **extra) -> dict:
    out = dict(base)
    out.update(seed=config.seed, config=config.to_json())
    out.update(extra)
    return out


def pgae_loss_grad(enc: Mlp, layout: LatentLayout, lift: BasisLift, D: np.ndarray,
                   X: np.ndarray, Z: np.ndarray, weight: np.ndarray | None = None):
    """Batch loss ``mean_n ||w * (D f(Enc(x_n)) - z_n)||^2`` and its gradients.

    Gradients are ordered like ``enc.params + [D]``.
    """
    U, cache = enc.forward(X)
    vm, va = layout.to_state(U)
    F, fc = lift.forward(vm, va)
    R = F @ D.T - Z
    if weight is not None:
        R = R * weight
    loss = float(np.sum(R * R)) / len(X)
    gR = (2.0 / len(X)) * R
    g_va, g_vm = lift.vjp(gR @ D, fc)
    grads, _ = enc.backward(cache, layout.pullback(g_va, g_vm))
    return loss, grads + [gR.T @ F]


def train_pgae(data, case: NetworkCase, spec: LiftedBasisSpec | None = None,
               d: int | None = None, config: TrainConfig | None = None,
               _mask: "MaskConfig | None" = None) -> PgAeModel:
    """Fit encoder weights and the linear decoder jointly with Adam.

    The decoder starts from a least-squares fit on the initial encoder and is
    refit by least squares once after ``config.warmup`` iterations.
    """
    config = config or TrainConfig()
    Z, meta = _as_matrix(data)
    layout, spec = resolve_layout(case, spec, d)
    N, m = Z.shape
    rng = np.random.default_rng(config.seed)
    st = Standardizer.fit(Z)
    X = st(Z)
    enc = Mlp.init([m, *HIDDEN, layout.dim], rng)
    lift = BasisLift(spec)

    def features(Xin):
        vm, va = layout.to_state(enc(Xin))
        return lift.forward(vm, va)[0]

    D = _ridge_decoder(features(X), Z)
    params = enc.params + [D]
    opt = Adam(params, config)
    mask_rng = np.random.default_rng([config.seed, _mask.seed]) if _mask else None
    keep_p = _mask.keep_count / m if _mask else 1.0
    t0 = time.perf_counter()
    refit = config.warmup if 0 < config.warmup < config.max_iterations else None
    for it, rows in schedule(N, config, rng):
        if it == refit:
            D[...] = _ridge_decoder(features(X), Z)
            opt = Adam(params, config)
            refit = None
        Zb, Xb = Z[rows], X[rows]
        w = None
        if _mask is not None and keep_p < 1.0:
            b = mask_rng.random(Xb.shape) < keep_p
            Xb = Xb * b
            w = ~b
        loss, grads = pgae_loss_grad(enc, layout, lift, D, Xb, Zb, w)
        _check_finite(loss, it, "physics-guided autoencoder")
        opt.step(grads)
    model = PgAeModel(enc, layout, spec, D, st)
    final = float(np.mean(reconstruction_error(model, Z)))
    _check_finite(final, config.max_iterations, "physics-guided autoencoder")
    model.meta = _meta(meta, config, latent_dim=layout.dim, basis_mode=spec.mode,
                       final_loss=final, train_seconds=time.perf_counter() - t0, n_train=N)
    return model


def train_standard_ae(data, d: int, config: TrainConfig | None = None) -> StandardAeModel:
    """Encoder and mirrored tanh decoder; loss in raw measurement units."""
    config = config or TrainConfig()
    Z, meta = _as_matrix(data)
    if d < 1:
        raise ValueError("latent dimension must be at least 1")
    N, m = Z.shape
    rng = np.random.default_rng(config.seed)
    st = Standardizer.fit(Z)
    X = st(Z)
    enc = Mlp.init([m, *HIDDEN, d], rng)
    dec = Mlp.init([d, *HIDDEN[::-1], m], rng)
    opt = Adam(enc.params + dec.params, config)
    scale2 = st.scale ** 2
    t0 = time.perf_counter()
    for it, rows in schedule(N, config, rng):
        Xb = X[rows]
        U, ce = enc.forward(Xb)
        Y, cd = dec.forward(U)
        gY = (2.0 / len(rows)) * (Y - Xb) * scale2
        _check_finite(gY, it, "standard autoencoder")
        gdec, gU = dec.backward(cd, gY)
        genc, _ = enc.backward(ce, gU)
        opt.step(genc + gdec)
    model = StandardAeModel(enc, dec, st)
    final = float(np.mean(reconstruction_error(model, Z)))
    _check_finite(final, config.max_iterations, "standard autoencoder")
    model.meta = _meta(meta, config, latent_dim=d, final_loss=final,
                       train_seconds=time.perf_counter() - t0, n_train=N)
    return model


@dataclass(frozen=True)
class MaskConfig:
    """Bernoulli input mask keeping each channel with probability ``keep_count / m``."""

    keep_count: int
    seed: int = 0

    def validate(self, m: int) -> None:
        if not 1 <= self.keep_count <= m:
            raise ValueError(f"keep_count must lie in [1, {m}]")


def train_masked_pgae(data, case: NetworkCase, spec: LiftedBasisSpec | None = None,
                      d: int | None = None, mask: MaskConfig | None = None,
                      config: TrainConfig | None = None,
                      holdout=None) -> tuple[PgAeModel, np.ndarray]:
    """Masked training, then a per-channel error profile on held-out data.

    Each batch draws a fresh mask ``b``; the encoder sees ``b * z`` (in
    standardized units, so a dropped channel reads as its mean) and the loss
    covers only the dropped channels. With ``keep_count == m`` nothing is
    ever dropped and the ordinary reconstruction loss is used instead.

    The profile is the mean squared reconstruction error of each channel on
    ``holdout`` with full input, in raw units. Without ``holdout`` the last
    fifth of the series is held out.
    """
    config = config or TrainConfig()
    Z, meta = _as_matrix(data)
    m = Z.shape[1]
    mask = mask or MaskConfig(m)
    mask.validate(m)
    if holdout is None:
        cut = max(1, int(round(0.8 * len(Z))))
        if cut >= len(Z):
            raise ValueError("need at least two samples to hold out data")
        Z, H = Z[:cut], Z[cut:]
    else:
        H, _ = _as_matrix(holdout)
    model = train_pgae(Z, case, spec, d, config, _mask=mask if mask.keep_count < m else None)
    model.meta.update(meta, keep_count=mask.keep_count, mask_seed=mask.seed)
    R = H - model.reconstruct(H)
    profile = np.mean(R * R, axis=0)
    return model, profile
