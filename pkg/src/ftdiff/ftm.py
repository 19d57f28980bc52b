"""Functional Tucker model: shared latent functions + one core per frame.

Training alternates between an exact solve for every record's core
sequence (the objective is quadratic in the cores once the latent functions
are frozen) and Adam steps on the latent-function parameters with the cores
held fixed. The cores are warm-started implicitly: each round re-solves
them exactly for the current latent functions.
"""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np
import scipy.linalg
import torch

from .errors import ContractError, NumericalError, TrainingError
from .tensor_core import LatentFunctionSet, LatentsLike, design_matrix, latent_ranks, row_kron

log = logging.getLogger(__name__)

FTM_FORMAT = "ftdiff-ftm"
FTM_VERSION = 1


@dataclass
class ObservationSet:
    """Sparse observations of one record.

    ``coords[m]`` is ``(N_m, K)`` with entries in ``[0, 1]``; ``values[m]`` is
    ``(N_m,)``. A frame with no observations has ``N_m == 0``.
    """

    times: np.ndarray
    coords: list
    values: list
    noise_std: float = 0.0

    def __post_init__(self):
        self.times = np.asarray(self.times, dtype=np.float64).ravel()
        if self.times.size == 0:
            raise ContractError("an observation set needs at least one timestep")
        if np.any(np.diff(self.times) <= 0):
            raise ContractError("timesteps must be strictly increasing")
        if len(self.coords) != self.times.size or len(self.values) != self.times.size:
            raise ContractError("coords/values must have one entry per timestep")
        coords, values = [], []
        K = None
        for c, v in zip(self.coords, self.values):
            v = np.asarray(v, dtype=np.float64).ravel()
            c = np.asarray(c, dtype=np.float64)
            if v.size:
                c = c.reshape(v.size, -1)
                if K is None:
                    K = c.shape[1]
                elif c.shape[1] != K:
                    raise ContractError("inconsistent coordinate dimension across frames")
                if not np.all(np.isfinite(v)):
                    raise ContractError("observed values must be finite")
            coords.append(c)
            values.append(v)
        coords = [c if v.size else np.zeros((0, K or 0)) for c, v in zip(coords, values)]
        self.coords, self.values = coords, values
        self.noise_std = float(self.noise_std)
        if self.noise_std < 0:
            raise ContractError("noise_std must be >= 0")

    @property
    def ndim(self) -> int:
        for c, v in zip(self.coords, self.values):
            if v.size:
                return c.shape[1]
        return 0

    @property
    def counts(self) -> np.ndarray:
        return np.array([v.size for v in self.values])

    @property
    def num_observed(self) -> int:
        return int(self.counts.sum())

    @property
    def observed_times(self) -> np.ndarray:
        return self.times[self.counts > 0]

    def subset(self, keep: Sequence[np.ndarray]) -> "ObservationSet":
        """Keep a boolean mask of entries per frame."""
        return ObservationSet(self.times, [c[k] for c, k in zip(self.coords, keep)],
                              [v[k] for v, k in zip(self.values, keep)], self.noise_std)


@dataclass
class CoreSequence:
    times: np.ndarray
    cores: np.ndarray  # (M, R_1, ..., R_K)

    def __post_init__(self):
        self.times = np.asarray(self.times, dtype=np.float64).ravel()
        self.cores = np.asarray(self.cores, dtype=np.float64)
        if self.cores.shape[0] != self.times.size:
            raise ContractError("one core per timestamp required")
        if np.any(np.diff(self.times) <= 0):
            raise ContractError("timestamps must be strictly increasing")

    @property
    def ranks(self) -> tuple[int, ...]:
        return tuple(self.cores.shape[1:])

    @property
    def flat(self) -> np.ndarray:
        return self.cores.reshape(self.cores.shape[0], -1)

    def __len__(self):
        return self.times.size


@dataclass
class FTMConfig:
    ranks: tuple = (8, 8)
    tv_weight: float = 1e-3
    lr: float = 3e-4
    rounds: int = 60
    latent_steps: int = 50
    batch_entries: int = 32768
    ridge: float = 1e-6
    tol: float = 1e-7
    width: int = 128
    depth: int = 3
    omega0: float = 6.0
    holdout_fraction: float = 0.05

    def __post_init__(self):
        self.ranks = tuple(int(r) for r in self.ranks)
        if min(self.ranks) < 1:
            raise ContractError("ranks must be >= 1")
        if self.tv_weight < 0:
            raise ContractError("tv_weight must be >= 0")
        if not 0 <= self.holdout_fraction < 1:
            raise ContractError("holdout_fraction must be in [0, 1)")


@dataclass
class Normalizer:
    """Scalar affine map applied to core entries before diffusion training."""

    mean: float = 0.0
    std: float = 1.0

    def forward(self, cores):
        return (np.asarray(cores) - self.mean) / self.std

    def inverse(self, cores):
        return np.asarray(cores) * self.std + self.mean

    def standardize_values(self, A: np.ndarray, y: np.ndarray):
        """Map observations to the standardized-core scale: ``y' = A w'``."""
        return (y - self.mean * A.sum(axis=1)) / self.std


@dataclass
class TrainedFTM:
    latents: LatentFunctionSet
    core_batches: list
    config: FTMConfig
    final_loss: float
    loss_trace: list = field(default_factory=list)
    val_trace: list = field(default_factory=list)
    normalizer: Normalizer = field(default_factory=Normalizer)


def total_variation(cores) -> float:
    cores = np.asarray(cores, dtype=np.float64)
    if cores.shape[0] < 2:
        return 0.0
    return float(np.sum(np.diff(cores, axis=0) ** 2))


def _frame_designs(latents: LatentsLike, obs: ObservationSet):
    """Design matrix per frame (None for empty frames), one feature pass per record."""
    if obs.num_observed == 0:
        return [None] * obs.times.size
    A = design_matrix(latents, np.concatenate([c for c, v in zip(obs.coords, obs.values) if v.size]))
    out, start = [], 0
    for v in obs.values:
        out.append(A[start:start + v.size] if v.size else None)
        start += v.size
    return out


def _loss_terms(designs, cores: "CoreSequence", obs: ObservationSet) -> tuple[float, float]:
    sq = 0.0
    for m, A in enumerate(designs):
        if A is None:
            continue
        if A.shape[1] != cores.flat.shape[1]:
            raise ContractError("core size does not match latent ranks")
        r = obs.values[m] - A @ cores.flat[m]
        sq += float(r @ r)
    return sq, total_variation(cores.cores)


def ftm_loss(latents: LatentsLike, core_batches: Sequence[CoreSequence],
             dataset: Sequence[ObservationSet], beta: float) -> float:
    """Mean squared residual over all observed entries plus the TV penalty.

    The TV term sits inside the expectation over entries, so each record's
    TV is weighted by its share of the observed entries.
    """
    if len(dataset) == 0:
        raise ContractError("dataset is empty")
    if len(core_batches) != len(dataset):
        raise ContractError("need one core sequence per record")
    total_n = sum(o.num_observed for o in dataset)
    if total_n == 0:
        raise ContractError("dataset has no observed entries")
    sq, tv = 0.0, 0.0
    for cs, obs in zip(core_batches, dataset):
        if len(cs) != obs.times.size:
            raise ContractError("core sequence length does not match record timesteps")
        s, t = _loss_terms(_frame_designs(latents, obs), cs, obs)
        sq += s
        tv += obs.num_observed * t
    return (sq + beta * tv) / total_n


def _solve_block_tridiagonal(G: np.ndarray, b: np.ndarray, beta: float) -> np.ndarray:
    """Solve ``(blockdiag(G) + beta * L kron I) w = b`` with L the path Laplacian."""
    M, D, _ = G.shape
    if beta == 0 or M == 1:
        try:
            cho = [scipy.linalg.cho_factor(G[m], lower=True) for m in range(M)]
        except np.linalg.LinAlgError as exc:
            raise NumericalError("core system is singular; use ridge > 0") from exc
        return np.stack([scipy.linalg.cho_solve(c, b[m]) for m, c in enumerate(cho)])
    deg = np.full(M, 2.0)
    deg[0] = deg[-1] = 1.0
    n = M * D
    # upper banded storage, bandwidth D: ab[D + i - j, j] = H[i, j]
    ab = np.zeros((D + 1, n))
    for m in range(M):
        blk = G[m] + beta * deg[m] * np.eye(D)
        for off in range(D):
            # diagonal `off` above main inside the block
            diag = np.diagonal(blk, offset=off)
            ab[D - off, m * D + off:(m + 1) * D] = diag
        if m > 0:
            # coupling block (-beta I) sits at column offset D -> row 0 of ab
            ab[0, m * D:(m + 1) * D] = -beta
    try:
        w = scipy.linalg.solveh_banded(ab, b.reshape(-1), lower=False)
    except np.linalg.LinAlgError as exc:
        raise NumericalError("core system is singular; use ridge > 0") from exc
    return w.reshape(M, D)


def encode_observations(latents: LatentsLike, obs: ObservationSet, beta: float = 0.0,
                        ridge: float = 1e-6, designs=None) -> CoreSequence:
    """Exact minimiser over the core sequence of

    ``sum_m ||y_m - A_m w_m||^2 + beta * TV(W) + ridge * sum_m ||w_m||^2``.
    """
    if obs.num_observed == 0:
        raise ContractError("cannot encode a record with no observations")
    if beta < 0 or ridge < 0:
        raise ContractError("beta and ridge must be >= 0")

    ranks = latent_ranks(latents)
    D = int(np.prod(ranks))
    if designs is None:
        designs = _frame_designs(latents, obs)
    M = obs.times.size
    G = np.zeros((M, D, D))
    b = np.zeros((M, D))
    for m, A in enumerate(designs):
        if A is not None:
            G[m] = A.T @ A
            b[m] = A.T @ obs.values[m]
        G[m].flat[:: D + 1] += ridge
    w = _solve_block_tridiagonal(G, b, beta)
    if not np.all(np.isfinite(w)):
        raise NumericalError("core solve produced non-finite values; use ridge > 0")
    return CoreSequence(obs.times, w.reshape((M, *ranks)))


def _flatten_record(obs: ObservationSet):
    frames = np.concatenate([np.full(v.size, m) for m, v in enumerate(obs.values)])
    coords = np.concatenate([c for c, v in zip(obs.coords, obs.values) if v.size])
    values = np.concatenate(obs.values)
    return coords, values, frames.astype(np.int64)


def _split_holdout(dataset, fraction, rng):
    train, val = [], []
    for obs in dataset:
        if fraction <= 0:
            train.append(obs)
            continue
        keep = []
        for v in obs.values:
            mask = rng.random(v.size) >= fraction
            if v.size and not mask.any():
                mask[rng.integers(v.size)] = True
            keep.append(mask)
        train.append(obs.subset(keep))
        val.append(obs.subset([~k for k in keep]))
    return train, val


def relative_error(latents: LatentsLike, core_batches, dataset) -> float:
    num, den = 0.0, 0.0
    for cs, obs in zip(core_batches, dataset):
        s, _ = _loss_terms(_frame_designs(latents, obs), cs, obs)
        num += s
        den += sum(float(v @ v) for v in obs.values)
    return float(np.sqrt(num / den)) if den > 0 else float(np.sqrt(num))


def train_ftm(dataset: Sequence[ObservationSet], config: FTMConfig | None = None,
              seed: int = 0, callback=None) -> TrainedFTM:
    config = config or FTMConfig()
    if len(dataset) == 0:
        raise ContractError("train_ftm needs at least one record")
    K = None
    for obs in dataset:
        if obs.num_observed == 0:
            raise ContractError("every record needs at least one observed entry")
        K = K or obs.ndim
        if obs.ndim != K:
            raise ContractError("records disagree on the number of spatial modes")
    if len(config.ranks) != K:
        raise ContractError(f"config has {len(config.ranks)} ranks but data has K={K}")

    rng = np.random.default_rng(seed)
    torch.manual_seed(seed)
    latents = LatentFunctionSet(config.ranks, width=config.width, depth=config.depth,
                                omega0=config.omega0)
    train, val = _split_holdout(dataset, config.holdout_fraction, rng)

    flat = [_flatten_record(o) for o in train]
    all_coords = torch.as_tensor(np.concatenate([f[0] for f in flat]))
    all_values = torch.as_tensor(np.concatenate([f[1] for f in flat]))
    # global frame id = record frame offset + frame index
    frame_offsets = np.cumsum([0] + [o.times.size for o in train])
    all_frames = torch.as_tensor(np.concatenate(
        [f[2] + frame_offsets[b] for b, f in enumerate(flat)]))
    n_total = all_values.shape[0]
    counts = np.array([o.num_observed for o in train], dtype=np.float64)

    # fixed subset used to accept or reject each batch of latent steps
    eval_idx = torch.as_tensor(np.sort(rng.choice(n_total, min(n_total, 4 * config.batch_entries),
                                                  replace=False)))
    opt = torch.optim.Adam(latents.parameters(), lr=config.lr)
    trace, val_trace = [], []
    cores = None
    accepted = True
    for rnd in range(config.rounds):
        sq, tv = 0.0, 0.0
        cores = []
        for o, n_b in zip(train, counts):
            designs = _frame_designs(latents, o)
            cs = encode_observations(latents, o, beta=config.tv_weight * n_b, ridge=config.ridge,
                                     designs=designs)
            s_b, t_b = _loss_terms(designs, cs, o)
            sq += s_b
            tv += n_b * t_b
            cores.append(cs)
        loss = (sq + config.tv_weight * tv) / n_total
        if not np.isfinite(loss):
            raise TrainingError(f"FTM loss diverged at round {rnd}", trace + [loss])
        trace.append(loss)
        if val:
            val_trace.append(relative_error(latents, cores, val))
        if callback is not None:
            callback(rnd, loss)
        log.debug("ftm round %d loss %.3e", rnd, loss)
        if accepted and rnd > 0 and trace[-2] - loss <= config.tol * max(abs(trace[-2]), 1e-30):
            break
        if rnd == config.rounds - 1:
            break
        core_flat = torch.as_tensor(np.concatenate([c.flat for c in cores]))
        state = {k: v.clone() for k, v in latents.state_dict().items()}
        ev = (all_coords[eval_idx], all_values[eval_idx], all_frames[eval_idx])
        before = _fixed_core_loss(latents, core_flat, *ev)
        for _ in range(config.latent_steps):
            if n_total > config.batch_entries:
                idx = torch.as_tensor(rng.choice(n_total, config.batch_entries, replace=False))
            else:
                idx = slice(None)
            opt.zero_grad()
            feats = latents(all_coords[idx])
            pred = (row_kron(feats) * core_flat[all_frames[idx]]).sum(-1)
            step_loss = torch.mean((all_values[idx] - pred) ** 2)
            step_loss.backward()
            opt.step()
        after = _fixed_core_loss(latents, core_flat, *ev)
        accepted = after <= before
        log.debug("latent step %.3e -> %.3e", before, after)
        if not accepted:
            # reject a round that made the fixed-core fit worse
            latents.load_state_dict(state)
            for g in opt.param_groups:
                g["lr"] *= 0.5
    final = trace[-1]
    return TrainedFTM(latents=latents, core_batches=cores, config=config, final_loss=final,
                      loss_trace=trace, val_trace=val_trace,
                      normalizer=fit_normalizer(cores))


def _fixed_core_loss(latents, core_flat, coords, values, frames, chunk=65536) -> float:
    total = 0.0
    with torch.no_grad():
        for s in range(0, values.shape[0], chunk):
            sl = slice(s, s + chunk)
            pred = (row_kron(latents(coords[sl])) * core_flat[frames[sl]]).sum(-1)
            total += float(torch.sum((values[sl] - pred) ** 2))
    return total


def fit_normalizer(core_batches: Sequence[CoreSequence]) -> Normalizer:
    allc = np.concatenate([c.cores.ravel() for c in core_batches])
    std = float(allc.std())
    return Normalizer(mean=float(allc.mean()), std=std if std > 0 else 1.0)


def save_ftm(path, trained: TrainedFTM, digest: str | None = None,
             include_cores: bool = True) -> None:
    """Write an ``.npz`` checkpoint with a JSON header (see README for the schema)."""
    header = {
        "format": FTM_FORMAT,
        "version": FTM_VERSION,
        "architecture": trained.latents.architecture,
        "ranks": list(trained.latents.ranks),
        "config": {**asdict(trained.config), "ranks": list(trained.config.ranks)},
        "normalizer": asdict(trained.normalizer),
        "final_loss": trained.final_loss,
        "loss_trace": list(map(float, trained.loss_trace)),
        "val_trace": list(map(float, trained.val_trace)),
        "digest": digest,
        "num_records": len(trained.core_batches) if include_cores else 0,
    }
    arrays = {f"param/{k}": v for k, v in trained.latents.parameters_numpy().items()}
    if include_cores:
        for b, cs in enumerate(trained.core_batches):
            arrays[f"cores/{b}"] = cs.cores.astype("<f8")
            arrays[f"times/{b}"] = cs.times.astype("<f8")
    arrays["header"] = np.array(json.dumps(header))
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)


def load_ftm(path) -> tuple[TrainedFTM, dict]:
    with np.load(path, allow_pickle=False) as z:
        header = json.loads(str(z["header"]))
        if header.get("format") != FTM_FORMAT:
            raise ContractError(f"{path} is not an FTM checkpoint")
        if header["version"] > FTM_VERSION:
            raise ContractError(f"unsupported FTM checkpoint version {header['version']}")
        latents = LatentFunctionSet.from_architecture(header["architecture"])
        latents.load_parameters_numpy({k[6:]: z[k] for k in z.files if k.startswith("param/")})
        cores = [CoreSequence(z[f"times/{b}"], z[f"cores/{b}"])
                 for b in range(header["num_records"])]
    cfg = FTMConfig(**header["config"])
    trained = TrainedFTM(latents=latents, core_batches=cores, config=cfg,
                         final_loss=header["final_loss"], loss_trace=header["loss_trace"],
                         val_trace=header["val_trace"],
                         normalizer=Normalizer(**header["normalizer"]))
    return trained, header
