"""Synthetic spatiotemporal fields, observation masks and error metrics.

Fields are closed-form, so every record can be evaluated at arbitrary
continuous coordinates as well as rendered on its grid. Coordinates live in
``[0, 1]`` per mode and a record's frames span ``t in [0, 1]``.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass, field
from typing import Callable, Sequence

import numpy as np

from .errors import ContractError
from .ftm import ObservationSet

KINDS = ("traveling_pulse", "separable_lowrank", "advecting_mixture")
DATASET_FORMAT = "ftdiff-dataset"
DATASET_VERSION = 1


@dataclass
class SyntheticFieldSpec:
    kind: str = "advecting_mixture"
    K: int = 2
    grid: tuple = (64, 64)
    M: int = 16
    seed: int = 0
    # traveling_pulse / advecting_mixture
    n_blobs: int = 3
    width_range: tuple = (0.08, 0.16)
    speed: float = 0.3
    # separable_lowrank
    lowrank: tuple = (2, 2)

    def __post_init__(self):
        self.grid = tuple(int(g) for g in self.grid)
        self.width_range = tuple(self.width_range)
        self.lowrank = tuple(int(r) for r in self.lowrank)
        if self.kind not in KINDS:
            raise ContractError(f"unknown field kind {self.kind!r}; expected one of {KINDS}")
        if self.K < 1 or len(self.grid) != self.K:
            raise ContractError("grid must give one size per spatial mode")
        if min(self.grid) < 4:
            raise ContractError("grid sizes must be >= 4")
        if self.M < 2:
            raise ContractError("need at least two frames")
        if self.kind == "separable_lowrank" and len(self.lowrank) != self.K:
            raise ContractError("lowrank needs one entry per mode")

    def digest(self) -> str:
        blob = json.dumps(asdict(self), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


@dataclass
class FieldRecord:
    """One ground-truth trajectory: analytic evaluator plus grid rendering."""

    times: np.ndarray
    axes: list
    evaluate: Callable  # (coords (N, K), t float) -> (N,)
    params: dict
    dense: np.ndarray = None  # (M, I_1, ..., I_K)

    def render(self, axes=None, times=None) -> np.ndarray:
        axes = self.axes if axes is None else [np.asarray(a, dtype=np.float64) for a in axes]
        times = self.times if times is None else np.asarray(times, dtype=np.float64)
        mesh = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, len(axes))
        shape = tuple(len(a) for a in axes)
        return np.stack([self.evaluate(mesh, t).reshape(shape) for t in times])


def _blob_field(centers, velocities, widths, amps, phases, omegas):
    def evaluate(coords, t):
        coords = np.atleast_2d(np.asarray(coords, dtype=np.float64))
        out = np.zeros(coords.shape[0])
        for c, v, w, a, p, om in zip(centers, velocities, widths, amps, phases, omegas):
            d2 = np.sum((coords - (c + v * t)) ** 2, axis=1)
            out += a * (1.0 + 0.3 * np.sin(om * t + p)) * np.exp(-d2 / (2 * w * w))
        return out

    return evaluate


def _separable_field(bases, coef_amp, coef_freq, coef_phase):
    def evaluate(coords, t):
        coords = np.atleast_2d(np.asarray(coords, dtype=np.float64))
        C = coef_amp * np.cos(coef_freq * t + coef_phase)
        val = np.broadcast_to(C, (coords.shape[0],) + C.shape)
        for k, mode in enumerate(bases):
            F = np.stack([b(coords[:, k]) for b in mode], axis=1)
            val = np.einsum("nr...,nr->n...", val, F)
        return val

    return evaluate


def _mode_basis(r: int):
    """Smooth orthogonal-ish 1-d functions on [0, 1]: cos(pi r x)."""
    return lambda x: np.cos(np.pi * r * x) if r else np.ones_like(x) * 0.7


def make_synthetic_dataset(spec: SyntheticFieldSpec, B: int) -> list[FieldRecord]:
    """Generate ``B`` records; record ``b`` uses a seed derived from ``(spec.seed, b)``."""
    if B < 1:
        raise ContractError("need at least one record")
    axes = [np.linspace(0.0, 1.0, n) for n in spec.grid]
    times = np.linspace(0.0, 1.0, spec.M)
    records = []
    for b in range(B):
        rng = np.random.default_rng([spec.seed, b])
        if spec.kind == "separable_lowrank":
            bases = [[_mode_basis(r) for r in range(R)] for R in spec.lowrank]
            shape = spec.lowrank
            params = dict(coef_amp=rng.uniform(0.5, 1.5, shape) * rng.choice([-1, 1], shape),
                          coef_freq=rng.uniform(1.0, 4.0, shape),
                          coef_phase=rng.uniform(0, 2 * np.pi, shape))
            ev = _separable_field(bases, **params)
        else:
            n = 1 if spec.kind == "traveling_pulse" else spec.n_blobs
            params = dict(
                centers=rng.uniform(0.25, 0.75, (n, spec.K)),
                velocities=rng.uniform(-spec.speed, spec.speed, (n, spec.K)),
                widths=rng.uniform(*spec.width_range, n),
                amps=rng.uniform(0.6, 1.4, n) * (rng.choice([-1, 1], n) if n > 1 else 1),
                phases=rng.uniform(0, 2 * np.pi, n),
                omegas=rng.uniform(1.0, 4.0, n) if spec.kind == "advecting_mixture" else np.zeros(n),
            )
            ev = _blob_field(**params)
        rec = FieldRecord(times=times, axes=axes, evaluate=ev,
                          params={k: np.asarray(v).tolist() for k, v in params.items()})
        rec.dense = rec.render()
        records.append(rec)
    return records


@dataclass
class MaskConfig:
    rho: float = 0.03
    setting: int = 1
    resample_per_frame: bool = True

    def __post_init__(self):
        if not 0 < self.rho <= 1:
            raise ContractError(f"rho must be in (0, 1], got {self.rho}")
        if self.setting not in (1, 2):
            raise ContractError("observation setting must be 1 or 2")


def observed_frame_mask(M: int, setting: int) -> np.ndarray:
    """Setting 1 observes every frame; setting 2 every other frame (0, 2, 4, ...)."""
    mask = np.ones(M, dtype=bool)
    if setting == 2:
        mask[1::2] = False
    return mask


def mask_observations(dense: np.ndarray, axes: Sequence, times, mask: MaskConfig, seed=None,
                      noise_std: float = 0.0) -> ObservationSet:
    """Sample ``ceil(rho * volume)`` grid points per observed frame."""
    dense = np.asarray(dense, dtype=np.float64)
    shape = dense.shape[1:]
    volume = int(np.prod(shape))
    n = math.ceil(mask.rho * volume - 1e-9)
    if n < 1:
        raise ContractError("rho yields no observed points")
    rng = np.random.default_rng(seed)
    frames = observed_frame_mask(dense.shape[0], mask.setting)
    mesh = np.stack(np.meshgrid(*[np.asarray(a) for a in axes], indexing="ij"), -1).reshape(-1, len(shape))
    fixed = rng.choice(volume, n, replace=False)
    coords, values = [], []
    for m in range(dense.shape[0]):
        if not frames[m]:
            coords.append(np.zeros((0, len(shape))))
            values.append(np.zeros(0))
            continue
        idx = rng.choice(volume, n, replace=False) if mask.resample_per_frame else fixed
        idx = np.sort(idx)
        coords.append(mesh[idx])
        values.append(dense[m].reshape(-1)[idx])
    return ObservationSet(times, coords, values, noise_std=noise_std)


def add_observation_noise(obs: ObservationSet, kind: str, sigma: float, scale: float = 1.0,
                          seed=None) -> ObservationSet:
    """Additive zero-mean noise with standard deviation ``sigma * scale``.

    ``kind`` is ``gaussian``, ``laplacian`` or ``poisson`` (a centred,
    rescaled Poisson(10) draw).
    """
    rng = np.random.default_rng(seed)
    s = sigma * scale
    values = []
    for v in obs.values:
        if kind == "gaussian":
            e = rng.normal(0.0, 1.0, v.shape)
        elif kind == "laplacian":
            e = rng.laplace(0.0, 1.0 / np.sqrt(2.0), v.shape)
        elif kind == "poisson":
            lam = 10.0
            e = (rng.poisson(lam, v.shape) - lam) / np.sqrt(lam)
        else:
            raise ContractError(f"unknown noise kind {kind!r}")
        values.append(v + s * e)
    return ObservationSet(obs.times, obs.coords, values, noise_std=s)


def vrmse(pred, true) -> float:
    """RMSE divided by the population standard deviation of ``true``."""
    pred = np.asarray(pred, dtype=np.float64).ravel()
    true = np.asarray(true, dtype=np.float64).ravel()
    if pred.shape != true.shape:
        raise ContractError("pred and true must have equal length")
    if true.size < 2:
        raise ContractError("need at least two values")
    std = true.std()
    if std == 0:
        raise ContractError("ground truth is constant; VRMSE undefined")
    return float(np.sqrt(np.mean((pred - true) ** 2)) / std)


@dataclass
class EvalReport:
    vrmse_mean: float
    vrmse_std: float
    per_seed: list = field(default_factory=list)
    per_frame: list = field(default_factory=list)
    runtime: float = 0.0
    digest: str | None = None

    def to_dict(self) -> dict:
        return asdict(self)


def save_dataset(path, spec: SyntheticFieldSpec, records: Sequence[FieldRecord],
                 observations: Sequence[ObservationSet] | None = None,
                 digest: str | None = None) -> None:
    """Write the dataset container (little-endian float64 npz, JSON header)."""
    header = {
        "format": DATASET_FORMAT,
        "version": DATASET_VERSION,
        "K": spec.K,
        "grid": list(spec.grid),
        "M": spec.M,
        "B": len(records),
        "spec": asdict(spec),
        "spec_digest": spec.digest(),
        "digest": digest,
        "has_observations": observations is not None,
    }
    arrays = {"header": np.array(json.dumps(header))}
    for b, rec in enumerate(records):
        arrays[f"times/{b}"] = rec.times.astype("<f8")
        arrays[f"dense/{b}"] = rec.dense.astype("<f8")
        if observations is not None:
            obs = observations[b]
            rows = [np.column_stack([np.full(v.size, t), c, v])
                    for t, c, v in zip(obs.times, obs.coords, obs.values) if v.size]
            arrays[f"obs/{b}"] = np.concatenate(rows).astype("<f8")
            arrays[f"obs_noise/{b}"] = np.array(obs.noise_std, dtype="<f8")
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)


def rows_to_observations(rows: np.ndarray, times, noise_std: float = 0.0) -> ObservationSet:
    """Inverse of the ``(t_m, coord..., value)`` row layout."""
    times = np.asarray(times, dtype=np.float64)
    coords, values = [], []
    K = rows.shape[1] - 2
    for t in times:
        sel = np.abs(rows[:, 0] - t) < 1e-9
        coords.append(rows[sel, 1:1 + K])
        values.append(rows[sel, -1])
    if sum(v.size for v in values) != rows.shape[0]:
        raise ContractError("observation rows reference timestamps outside the record")
    return ObservationSet(times, coords, values, noise_std=noise_std)


def load_dataset(path):
    """Returns ``(header, spec, records, observations_or_None)``.

    Records are rebuilt from the spec so their analytic evaluators are
    available; the stored grids are checked against the regenerated ones.
    """
    with np.load(path, allow_pickle=False) as z:
        header = json.loads(str(z["header"]))
        if header.get("format") != DATASET_FORMAT:
            raise ContractError(f"{path} is not a dataset container")
        if header["version"] > DATASET_VERSION:
            raise ContractError(f"unsupported dataset version {header['version']}")
        spec = SyntheticFieldSpec(**header["spec"])
        records = make_synthetic_dataset(spec, header["B"])
        obs = [] if header["has_observations"] else None
        for b, rec in enumerate(records):
            stored = z[f"dense/{b}"]
            if stored.shape != rec.dense.shape or not np.allclose(stored, rec.dense, atol=1e-12):
                raise ContractError("stored fields do not match the recorded spec")
            rec.dense = stored
            if obs is not None:
                obs.append(rows_to_observations(z[f"obs/{b}"], z[f"times/{b}"],
                                                float(z[f"obs_noise/{b}"])))
    return header, spec, records, obs
