"""Sequential diffusion over core sequences with GP-correlated noise.

Cores are handled as flattened vectors of length ``D = prod(ranks)``; a
sequence batch has shape ``(B, L, D)``. The denoiser follows EDM
preconditioning and mixes information across the sequence axis with
1-d convolutions after every per-core residual block.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Callable, Sequence

import numpy as np
import torch
from torch import nn

from .errors import ContractError, TrainingError
from .ftm import CoreSequence
from .gp import DEFAULT_JITTER, gp_cholesky

log = logging.getLogger(__name__)

GPSD_FORMAT = "ftdiff-gpsd"
GPSD_VERSION = 1
DTYPE = torch.float64


@dataclass
class NoiseSchedule:
    sigma_min: float = 0.002
    sigma_max: float = 80.0
    num_steps: int = 40
    rho: float = 7.0

    def __post_init__(self):
        if not 0 < self.sigma_min <= self.sigma_max:
            raise ContractError("need 0 < sigma_min <= sigma_max")
        if self.num_steps < 1:
            raise ContractError("num_steps must be >= 1")

    def sigmas(self) -> np.ndarray:
        """Descending grid of ``num_steps + 1`` levels ending exactly at 0."""
        S = self.num_steps
        if S == 1:
            levels = np.array([self.sigma_max])
        else:
            i = np.arange(S)
            a, b = self.sigma_max ** (1 / self.rho), self.sigma_min ** (1 / self.rho)
            levels = (a + i / (S - 1) * (b - a)) ** self.rho
        return np.append(levels, 0.0)


def edm_weight(sigma, sigma_data: float = 1.0):
    """Loss weight ``(sigma^2 + sigma_data^2) / (sigma * sigma_data)^2``."""
    return (sigma ** 2 + sigma_data ** 2) / (sigma * sigma_data) ** 2


def _fourier(x: torch.Tensor, n: int, max_freq: float) -> torch.Tensor:
    freqs = torch.exp(torch.linspace(0.0, math.log(max_freq), n, dtype=x.dtype))
    ang = x[..., None] * freqs
    return torch.cat([torch.sin(ang), torch.cos(ang)], dim=-1)


class _Block(nn.Module):
    def __init__(self, hidden: int, kernel: int, temporal: bool):
        super().__init__()
        self.norm = nn.LayerNorm(hidden, dtype=DTYPE)
        self.fc1 = nn.Linear(hidden, 2 * hidden, dtype=DTYPE)
        self.fc2 = nn.Linear(2 * hidden, hidden, dtype=DTYPE)
        self.temporal = temporal
        if temporal:
            self.conv = nn.Conv1d(hidden, hidden, kernel, padding=kernel // 2, dtype=DTYPE)

    def forward(self, h):
        h = h + self.fc2(torch.nn.functional.silu(self.fc1(self.norm(h))))
        if self.temporal:
            # (B, L, H) -> conv over L
            c = self.conv(torch.nn.functional.silu(h).transpose(1, 2)).transpose(1, 2)
            h = h + c
        return h


class SequenceDenoiser(nn.Module):
    """EDM-preconditioned denoiser ``D(x; sigma, t)`` for core sequences."""

    def __init__(self, dim: int, hidden: int = 128, blocks: int = 3, kernel: int = 3,
                 temporal: bool = True, sigma_data: float = 1.0, emb_freqs: int = 16):
        super().__init__()
        if kernel % 2 != 1:
            raise ContractError("temporal kernel width must be odd")
        self.dim = dim
        self.sigma_data = sigma_data
        self.emb_freqs = emb_freqs
        self.architecture = {"dim": dim, "hidden": hidden, "blocks": blocks, "kernel": kernel,
                             "temporal": temporal, "sigma_data": sigma_data,
                             "emb_freqs": emb_freqs}
        self.inp = nn.Linear(dim, hidden, dtype=DTYPE)
        self.sigma_emb = nn.Sequential(nn.Linear(2 * emb_freqs, hidden, dtype=DTYPE), nn.SiLU(),
                                       nn.Linear(hidden, hidden, dtype=DTYPE))
        self.time_emb = nn.Linear(2 * emb_freqs, hidden, dtype=DTYPE)
        self.blocks = nn.ModuleList(_Block(hidden, kernel, temporal) for _ in range(blocks))
        self.out_norm = nn.LayerNorm(hidden, dtype=DTYPE)
        self.out = nn.Linear(hidden, dim, dtype=DTYPE)

    @classmethod
    def from_architecture(cls, arch: dict) -> "SequenceDenoiser":
        return cls(**arch)

    def raw(self, x, c_noise, times):
        h = self.inp(x)
        h = h + self.sigma_emb(_fourier(c_noise, self.emb_freqs, 100.0))[:, None, :]
        h = h + self.time_emb(_fourier(times, self.emb_freqs, 200.0))
        for blk in self.blocks:
            h = blk(h)
        return self.out(torch.nn.functional.silu(self.out_norm(h)))

    def forward(self, x, sigma, times):
        """``x``: (B, L, D) or (L, D); ``sigma``: scalar or (B,); ``times``: (L,) or (B, L)."""
        squeeze = x.ndim == 2
        if squeeze:
            x = x[None]
        B, L, D = x.shape
        if D != self.dim:
            raise ContractError(f"denoiser expects core size {self.dim}, got {D}")
        sigma = torch.as_tensor(sigma, dtype=x.dtype).reshape(-1).expand(B)
        times = torch.as_tensor(times, dtype=x.dtype)
        if times.ndim == 1:
            times = times.expand(B, L)
        sd = self.sigma_data
        s = sigma[:, None, None]
        c_skip = sd ** 2 / (s ** 2 + sd ** 2)
        c_out = s * sd / torch.sqrt(s ** 2 + sd ** 2)
        c_in = 1 / torch.sqrt(s ** 2 + sd ** 2)
        c_noise = torch.log(sigma) / 4
        out = c_skip * x + c_out * self.raw(c_in * x, c_noise, times)
        return out[0] if squeeze else out

    def parameters_numpy(self) -> dict[str, np.ndarray]:
        return {k: v.detach().cpu().numpy().copy() for k, v in self.state_dict().items()}

    def load_parameters_numpy(self, params):
        self.load_state_dict({k: torch.as_tensor(np.asarray(v)) for k, v in params.items()})


@dataclass
class GPSDTrainConfig:
    p_mean: float = -1.2
    p_std: float = 1.2
    sigma_data: float = 1.0
    batch_size: int = 64
    subseq_len: int = 8
    steps: int = 1500
    lr: float = 2e-3
    gamma: float = 50.0
    noise: str = "gp"
    hidden: int = 96
    blocks: int = 2
    kernel: int = 3
    temporal: bool = True
    holdout_fraction: float = 0.1
    eval_every: int = 100
    eval_draws: int = 4
    seed: int = 0

    def __post_init__(self):
        if self.subseq_len < 1:
            raise ContractError("subseq_len must be >= 1")
        if self.temporal and 1 < self.subseq_len < self.kernel:
            raise ContractError("subseq_len must be 1 or at least the temporal kernel width")
        if self.noise not in ("gp", "iid"):
            raise ContractError("noise must be 'gp' or 'iid'")


class _NoiseSampler:
    """Draws unit-marginal noise sequences, caching Cholesky factors by time pattern."""

    def __init__(self, gamma: float, kind: str = "gp", jitter: float = DEFAULT_JITTER):
        self.gamma, self.kind, self.jitter = gamma, kind, jitter
        self._cache: dict = {}

    def factor(self, times: np.ndarray) -> torch.Tensor:
        key = tuple(np.round(np.asarray(times) - times[0], 12))
        if key not in self._cache:
            self._cache[key] = torch.as_tensor(gp_cholesky(times, self.gamma, self.jitter))
        return self._cache[key]

    def __call__(self, times: np.ndarray, dim: int, gen: torch.Generator) -> torch.Tensor:
        z = torch.randn(len(times), dim, generator=gen, dtype=DTYPE)
        if self.kind == "iid":
            return z
        return self.factor(np.asarray(times)) @ z


def gpsd_loss(denoiser, cores, sigma, noise, times, sigma_data: float = 1.0):
    """``lambda(sigma) * ||D(W + E; sigma, t) - W||^2`` summed per sequence, batch-averaged.

    ``denoiser`` is any callable ``(x, sigma, times) -> x_hat``.
    """
    cores = torch.as_tensor(cores, dtype=DTYPE)
    noise = torch.as_tensor(noise, dtype=DTYPE)
    if cores.shape != noise.shape:
        raise ContractError(f"noise shape {tuple(noise.shape)} != core shape {tuple(cores.shape)}")
    batched = cores.ndim == 3
    if not batched:
        cores, noise = cores[None], noise[None]
    sigma = torch.as_tensor(sigma, dtype=DTYPE).reshape(-1).expand(cores.shape[0])
    den = denoiser(cores + noise, sigma, times)
    err = ((den - cores) ** 2).sum(dim=(1, 2))
    return (edm_weight(sigma, sigma_data) * err).mean()


@dataclass
class TrainedGPSD:
    denoiser: SequenceDenoiser
    config: GPSDTrainConfig
    train_trace: list = field(default_factory=list)
    heldout_trace: list = field(default_factory=list)


def _crop_batch(seqs, n, L, rng):
    recs = rng.integers(len(seqs), size=n)
    xs, ts = [], []
    for r in recs:
        s = seqs[r]
        M = len(s.times)
        length = min(L, M)
        start = rng.integers(M - length + 1)
        xs.append(s.flat[start:start + length])
        ts.append(s.times[start:start + length])
    return xs, ts


def _stack_groups(xs, ts):
    """Group cropped subsequences by length so each group stacks into one tensor."""
    groups: dict = {}
    for x, t in zip(xs, ts):
        groups.setdefault(len(t), []).append((x, t))
    return groups


def train_gpsd(core_batches: Sequence[CoreSequence], config: GPSDTrainConfig | None = None,
               callback: Callable | None = None) -> TrainedGPSD:
    """Fit the denoiser on standardized core sequences."""
    config = config or GPSDTrainConfig()
    if len(core_batches) == 0:
        raise ContractError("train_gpsd needs at least one core sequence")
    dims = {int(np.prod(c.ranks)) for c in core_batches}
    if len(dims) != 1:
        raise ContractError("core sequences have different ranks")
    dim = dims.pop()

    rng = np.random.default_rng(config.seed)
    torch.manual_seed(config.seed)
    gen = torch.Generator().manual_seed(config.seed)
    order = rng.permutation(len(core_batches))
    n_hold = int(round(config.holdout_fraction * len(core_batches)))
    if n_hold >= len(core_batches):
        n_hold = 0
    held = [core_batches[i] for i in order[:n_hold]]
    train = [core_batches[i] for i in order[n_hold:]]

    net = SequenceDenoiser(dim, hidden=config.hidden, blocks=config.blocks, kernel=config.kernel,
                           temporal=config.temporal, sigma_data=config.sigma_data)
    opt = torch.optim.Adam(net.parameters(), lr=config.lr)
    sched = torch.optim.lr_scheduler.CosineAnnealingLR(opt, T_max=config.steps,
                                                       eta_min=config.lr * 0.05)
    noise = _NoiseSampler(config.gamma, config.noise)

    # fixed held-out draws (common random numbers) so the curve is comparable over time
    held_batches = []
    if held:
        hrng = np.random.default_rng(config.seed + 7919)
        hgen = torch.Generator().manual_seed(config.seed + 7919)
        for _ in range(config.eval_draws):
            xs, ts = _crop_batch(held, len(held), config.subseq_len, hrng)
            for L, items in _stack_groups(xs, ts).items():
                x = torch.as_tensor(np.stack([i[0] for i in items]))
                t = torch.as_tensor(np.stack([i[1] for i in items]))
                sig = torch.exp(config.p_mean + config.p_std *
                                torch.randn(len(items), generator=hgen, dtype=DTYPE))
                e = torch.stack([noise(i[1], dim, hgen) for i in items]) * sig[:, None, None]
                held_batches.append((x, t, sig, e))

    def heldout_loss():
        with torch.no_grad():
            vals = [float(gpsd_loss(net, x, s, e, t, config.sigma_data)) * len(x)
                    for x, t, s, e in held_batches]
        return sum(vals) / sum(len(b[0]) for b in held_batches)

    train_trace, held_trace = [], []
    if held_batches:
        held_trace.append((0, heldout_loss()))
    for step in range(1, config.steps + 1):
        xs, ts = _crop_batch(train, config.batch_size, config.subseq_len, rng)
        opt.zero_grad()
        loss_val = 0.0
        for L, items in _stack_groups(xs, ts).items():
            x = torch.as_tensor(np.stack([i[0] for i in items]))
            t = torch.as_tensor(np.stack([i[1] for i in items]))
            sig = torch.exp(config.p_mean + config.p_std *
                            torch.randn(len(items), generator=gen, dtype=DTYPE))
            e = torch.stack([noise(i[1], dim, gen) for i in items]) * sig[:, None, None]
            loss = gpsd_loss(net, x, sig, e, t, config.sigma_data) * (len(items) / len(xs))
            loss.backward()
            loss_val += loss.item()
        if not math.isfinite(loss_val):
            raise TrainingError(f"GPSD loss became {loss_val} at step {step}", train_trace)
        opt.step()
        sched.step()
        train_trace.append(loss_val)
        if held_batches and (step % config.eval_every == 0 or step == config.steps):
            held_trace.append((step, heldout_loss()))
            if callback is not None:
                callback(step, loss_val, held_trace[-1][1])
    return TrainedGPSD(denoiser=net, config=config, train_trace=train_trace,
                       heldout_trace=held_trace)


def denoise_fn(denoiser: SequenceDenoiser, times) -> Callable:
    """Bind ``times``: returns ``f(x (M, D) tensor, sigma) -> x_hat``."""
    t = torch.as_tensor(np.asarray(times, dtype=np.float64))

    def f(x, sigma):
        return denoiser(x, sigma, t)

    return f


def heun_sample(denoise: Callable, x_init: torch.Tensor, sigmas: np.ndarray,
                guidance: Callable | None = None, trajectory: list | None = None) -> torch.Tensor:
    """Deterministic second-order sampler of the probability-flow ODE.

    ``denoise(x, sigma)`` returns the clean estimate. If given,
    ``guidance(x, sigma, denoised)`` returns an additive correction that is
    applied after the Heun update of each step.
    """
    x = x_init
    for i in range(len(sigmas) - 1):
        s_cur, s_next = float(sigmas[i]), float(sigmas[i + 1])
        with torch.no_grad():
            den = denoise(x, s_cur)
            d = (x - den) / s_cur
            x_next = x + (s_next - s_cur) * d
            if s_next != 0:
                d2 = (x_next - denoise(x_next, s_next)) / s_next
                x_next = x + (s_next - s_cur) * (0.5 * d + 0.5 * d2)
        if guidance is not None:
            x_next = x_next + guidance(x, s_cur, den)
        x = x_next
        if trajectory is not None:
            trajectory.append(x.detach().clone())
    return x


def initial_noise(times, dim: int, sigma: float, gamma: float, seed, kind: str = "gp",
                  jitter: float = DEFAULT_JITTER) -> torch.Tensor:
    gen = torch.Generator().manual_seed(int(seed))
    return _NoiseSampler(gamma, kind, jitter)(np.asarray(times, dtype=np.float64), dim, gen) * sigma


def unconditional_sample(denoiser, schedule: NoiseSchedule, target_times, gamma: float = 50.0,
                         seed: int = 0, ranks=None, noise: str = "gp",
                         guidance: Callable | None = None) -> CoreSequence:
    """Sample a core sequence (standardized scale) at ``target_times``.

    ``denoiser`` is a :class:`SequenceDenoiser` or any callable
    ``(x (M, D), sigma, times) -> x_hat``.
    """
    times = np.asarray(target_times, dtype=np.float64)
    if np.any(np.diff(times) <= 0):
        raise ContractError("target times must be strictly increasing")
    dim = denoiser.dim if hasattr(denoiser, "dim") else int(np.prod(ranks))
    ranks = tuple(ranks) if ranks is not None else (dim,)
    x0 = initial_noise(times, dim, schedule.sigma_max, gamma, seed, noise)
    f = denoise_fn(denoiser, times)
    out = heun_sample(f, x0, schedule.sigmas(), guidance=guidance)
    return CoreSequence(times, out.detach().numpy().reshape((len(times), *ranks)))


def save_gpsd(path, trained: TrainedGPSD, schedule: NoiseSchedule | None = None,
              digest: str | None = None) -> None:
    header = {
        "format": GPSD_FORMAT,
        "version": GPSD_VERSION,
        "architecture": trained.denoiser.architecture,
        "config": asdict(trained.config),
        "schedule": asdict(schedule or NoiseSchedule()),
        "gamma": trained.config.gamma,
        "train_trace_tail": list(map(float, trained.train_trace[-50:])),
        "heldout_trace": [[int(s), float(v)] for s, v in trained.heldout_trace],
        "digest": digest,
    }
    arrays = {f"param/{k}": v for k, v in trained.denoiser.parameters_numpy().items()}
    arrays["header"] = np.array(json.dumps(header))
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)


def load_gpsd(path) -> tuple[TrainedGPSD, NoiseSchedule, dict]:
    with np.load(path, allow_pickle=False) as z:
        header = json.loads(str(z["header"]))
        if header.get("format") != GPSD_FORMAT:
            raise ContractError(f"{path} is not a GPSD checkpoint")
        if header["version"] > GPSD_VERSION:
            raise ContractError(f"unsupported GPSD checkpoint version {header['version']}")
        net = SequenceDenoiser.from_architecture(header["architecture"])
        net.load_parameters_numpy({k[6:]: z[k] for k in z.files if k.startswith("param/")})
    trained = TrainedGPSD(denoiser=net, config=GPSDTrainConfig(**header["config"]),
                          heldout_trace=[tuple(v) for v in header["heldout_trace"]])
    return trained, NoiseSchedule(**header["schedule"]), header
