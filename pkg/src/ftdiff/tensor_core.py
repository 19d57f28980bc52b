"""Tucker and functional-Tucker evaluation.

A functional Tucker model represents a field value at spatial coordinate
``i = (i_1, ..., i_K)`` as ``vec(W)^T (f^1(i_1) kron ... kron f^K(i_K))`` where
``W`` is a core tensor of shape ``(R_1, ..., R_K)`` and each ``f^k`` maps a
scalar coordinate to ``R^{R_k}``.

Ordering convention: ``vec`` is C-order (row major), so the mode-1 index is
the slowest varying. ``row_kron`` and ``np.ravel`` agree on this, which is
what makes ``A @ core.ravel()`` equal to the entry-wise decode.

``latents`` arguments accept either a :class:`LatentFunctionSet` or any
sequence of K callables mapping a 1-d coordinate array of length N to an
``(N, R_k)`` array.
"""

from __future__ import annotations

import math
from typing import Callable, Sequence, Union

import numpy as np
import torch
from torch import nn

from .errors import ContractError

__all__ = [
    "LatentFunctionSet",
    "ModeFunction",
    "row_kron",
    "mode_features",
    "latent_ranks",
    "kron_feature",
    "decode_entry",
    "naive_tucker_eval",
    "design_matrix",
    "decode_grid",
    "check_core",
]


class _Sine(nn.Module):
    def __init__(self, omega: float):
        super().__init__()
        self.omega = omega

    def forward(self, x):
        return torch.sin(self.omega * x)


class ModeFunction(nn.Module):
    """Sine-activated MLP ``R -> R^rank`` (SIREN-style initialisation).

    Inputs are coordinates in ``[0, 1]``; they are mapped to ``[-1, 1]``
    before the first layer.
    """

    def __init__(self, rank: int, width: int = 128, depth: int = 3, omega0: float = 6.0,
                 dtype=torch.float64):
        super().__init__()
        if rank < 1 or width < 1 or depth < 1:
            raise ContractError("rank, width and depth must be >= 1")
        self.rank = rank
        layers = []
        in_dim = 1
        for d in range(depth):
            lin = nn.Linear(in_dim, width, dtype=dtype)
            with torch.no_grad():
                if d == 0:
                    lin.weight.uniform_(-1.0 / in_dim, 1.0 / in_dim)
                else:
                    bound = math.sqrt(6.0 / in_dim) / omega0
                    lin.weight.uniform_(-bound, bound)
            layers += [lin, _Sine(omega0)]
            in_dim = width
        out = nn.Linear(in_dim, rank, dtype=dtype)
        with torch.no_grad():
            bound = math.sqrt(6.0 / in_dim)
            out.weight.uniform_(-bound, bound)
            out.bias.zero_()
        layers.append(out)
        self.net = nn.Sequential(*layers)

    def forward(self, x):
        # x: (N,) -> (N, rank)
        return self.net((2.0 * x - 1.0).unsqueeze(-1))


class LatentFunctionSet(nn.Module):
    """K trainable coordinate functions, one per spatial mode."""

    def __init__(self, ranks: Sequence[int], width: int = 128, depth: int = 3,
                 omega0: float = 6.0, seed: int | None = None):
        super().__init__()
        ranks = tuple(int(r) for r in ranks)
        if len(ranks) < 1 or min(ranks) < 1:
            raise ContractError(f"ranks must be a nonempty tuple of positive ints, got {ranks}")
        self.ranks = ranks
        self.architecture = {"ranks": list(ranks), "width": width, "depth": depth,
                             "omega0": omega0, "activation": "sine"}
        if seed is not None:
            gen_state = torch.random.get_rng_state()
            torch.manual_seed(seed)
        self.functions = nn.ModuleList(
            ModeFunction(r, width=width, depth=depth, omega0=omega0) for r in ranks
        )
        if seed is not None:
            torch.random.set_rng_state(gen_state)

    @property
    def ndim(self) -> int:
        return len(self.ranks)

    def forward(self, coords: torch.Tensor) -> list[torch.Tensor]:
        """Per-mode features for ``coords`` of shape ``(N, K)``.

        Each network is evaluated once per distinct coordinate value and the
        result gathered, which is much cheaper on grid-aligned data.
        """
        if coords.ndim != 2 or coords.shape[1] != self.ndim:
            raise ContractError(f"coords must have shape (N, {self.ndim}), got {tuple(coords.shape)}")
        feats = []
        for k, fn in enumerate(self.functions):
            uniq, inverse = torch.unique(coords[:, k], return_inverse=True)
            feats.append(fn(uniq)[inverse])
        return feats

    def mode_features(self, coords) -> list[np.ndarray]:
        coords = np.asarray(coords, dtype=np.float64)
        with torch.no_grad():
            feats = self.forward(torch.as_tensor(coords))
        return [f.numpy() for f in feats]

    def parameters_numpy(self) -> dict[str, np.ndarray]:
        return {k: v.detach().cpu().numpy().copy() for k, v in self.state_dict().items()}

    def load_parameters_numpy(self, params: dict[str, np.ndarray]) -> None:
        self.load_state_dict({k: torch.as_tensor(np.asarray(v)) for k, v in params.items()})

    @classmethod
    def from_architecture(cls, arch: dict) -> "LatentFunctionSet":
        return cls(arch["ranks"], width=arch["width"], depth=arch["depth"], omega0=arch["omega0"])


LatentsLike = Union[LatentFunctionSet, Sequence[Callable[[np.ndarray], np.ndarray]]]


def row_kron(feats):
    """Row-wise Kronecker product of ``(N, R_k)`` arrays -> ``(N, prod R_k)``.

    Works for numpy arrays and torch tensors. Mode 1 is the slowest index.
    """
    out = feats[0]
    n = out.shape[0]
    for f in feats[1:]:
        out = (out[:, :, None] * f[:, None, :]).reshape(n, -1)
    return out


def mode_features(latents: LatentsLike, coords) -> list[np.ndarray]:
    """Evaluate every mode function at ``coords`` of shape ``(N, K)``."""
    coords = np.atleast_2d(np.asarray(coords, dtype=np.float64))
    if isinstance(latents, LatentFunctionSet):
        if coords.shape[1] != latents.ndim:
            raise ContractError(
                f"coordinate has {coords.shape[1]} entries but the model has K={latents.ndim}")
        return latents.mode_features(coords)
    if coords.shape[1] != len(latents):
        raise ContractError(
            f"coordinate has {coords.shape[1]} entries but {len(latents)} latent functions were given")
    feats = []
    for k, fn in enumerate(latents):
        f = np.asarray(fn(coords[:, k]), dtype=np.float64)
        if f.ndim == 1:
            f = np.broadcast_to(f, (coords.shape[0], f.shape[0]))
        if f.ndim != 2 or f.shape[0] != coords.shape[0]:
            raise ContractError(f"latent function {k} returned shape {f.shape}")
        feats.append(f)
    return feats


def latent_ranks(latents: LatentsLike, feats=None) -> tuple[int, ...]:
    if isinstance(latents, LatentFunctionSet):
        return latents.ranks
    if feats is None:
        feats = mode_features(latents, np.full((1, len(latents)), 0.5))
    return tuple(f.shape[1] for f in feats)


def check_core(core, ranks=None) -> np.ndarray:
    core = np.asarray(core, dtype=np.float64)
    if core.ndim < 1:
        raise ContractError("core tensor needs at least one mode")
    if not np.all(np.isfinite(core)):
        raise ContractError("core tensor has non-finite entries")
    if ranks is not None and tuple(core.shape) != tuple(ranks):
        raise ContractError(f"core shape {core.shape} does not match ranks {tuple(ranks)}")
    return core


def kron_feature(latents: LatentsLike, coord) -> np.ndarray:
    coord = np.asarray(coord, dtype=np.float64).reshape(1, -1)
    return row_kron(mode_features(latents, coord))[0]


def decode_entry(core, latents: LatentsLike, coord) -> float:
    feats = mode_features(latents, np.asarray(coord, dtype=np.float64).reshape(1, -1))
    core = check_core(core, latent_ranks(latents, feats))
    return float(core.ravel() @ row_kron(feats)[0])


def naive_tucker_eval(core, features: Sequence) -> float:
    """Explicit nested sum over every core entry. Slow; used as a reference."""
    core = check_core(core)
    features = [np.asarray(u, dtype=np.float64).ravel() for u in features]
    if len(features) != core.ndim:
        raise ContractError(f"expected {core.ndim} feature vectors, got {len(features)}")
    for k, u in enumerate(features):
        if u.shape[0] != core.shape[k]:
            raise ContractError(f"feature {k} has length {u.shape[0]}, core mode has {core.shape[k]}")
    total = 0.0
    for idx in np.ndindex(*core.shape):
        term = core[idx]
        for k, r in enumerate(idx):
            term *= features[k][r]
        total += term
    return float(total)


def design_matrix(latents: LatentsLike, coords) -> np.ndarray:
    """Rows are ``kron_feature`` at each coordinate: shape ``(N, prod R_k)``."""
    coords = np.asarray(coords, dtype=np.float64)
    if coords.size == 0:
        raise ContractError("design_matrix needs at least one coordinate")
    return row_kron(mode_features(latents, np.atleast_2d(coords)))


def decode_grid(cores, latents: LatentsLike, axes: Sequence) -> np.ndarray:
    """Decode one core ``(R_1..R_K)`` or a stack ``(M, R_1..R_K)`` on a tensor grid.

    ``axes[k]`` holds the coordinate values along mode k. Returns an array of
    shape ``(len(axes[0]), ..., len(axes[K-1]))`` (with a leading M if stacked).
    """
    cores = np.asarray(cores, dtype=np.float64)
    K = len(axes)
    factors = []
    for k, ax in enumerate(axes):
        ax = np.asarray(ax, dtype=np.float64)
        pts = np.full((ax.shape[0], K), 0.5)
        pts[:, k] = ax
        factors.append(mode_features(latents, pts)[k])
    single = cores.ndim == K
    out = cores[None] if single else cores
    for k, F in enumerate(factors):
        # contract mode k+1 of out with F (I_k, R_k)
        out = np.moveaxis(np.tensordot(out, F, axes=([k + 1], [1])), -1, k + 1)
    return out[0] if single else out
