"""End-to-end glue: standardize cores, sample, decode and score reconstructions."""

from __future__ import annotations

import dataclasses
import time
from dataclasses import dataclass

import numpy as np

from .data_eval import (EvalReport, FieldRecord, MaskConfig, add_observation_noise,
                        mask_observations, vrmse)
from .ftm import (CoreSequence, FTMConfig, Normalizer, ObservationSet, TrainedFTM,
                  encode_observations, fit_normalizer, train_ftm)
from .gpsd import NoiseSchedule
from .mpdps import GuidanceConfig, mpdps_sample
from .tensor_core import LatentsLike, decode_grid


def training_observations(records, rho: float, seed: int = 0) -> list[ObservationSet]:
    """One fixed random mask per training record."""
    return [mask_observations(r.dense, r.axes, r.times, MaskConfig(rho=rho), seed=[seed, b])
            for b, r in enumerate(records)]


def fit_and_encode(observations, config: FTMConfig, fit_records: int, seed: int = 0,
                   callback=None) -> TrainedFTM:
    """Fit latent functions on the first ``fit_records`` records, then encode every record.

    All records are re-encoded with the final latents on their full observation
    sets, and the normalizer is fitted over the whole encoded corpus.
    """
    trained = train_ftm(observations[:fit_records], config, seed=seed, callback=callback)
    cores = [encode_observations(trained.latents, o, beta=config.tv_weight * o.num_observed,
                                 ridge=config.ridge) for o in observations]
    return dataclasses.replace(trained, core_batches=cores, normalizer=fit_normalizer(cores))


def standardized_sequences(trained: TrainedFTM) -> list[CoreSequence]:
    nz = trained.normalizer
    return [CoreSequence(cs.times, nz.forward(cs.cores)) for cs in trained.core_batches]


def decode_sequence(seq: CoreSequence, latents: LatentsLike, normalizer: Normalizer,
                    axes) -> np.ndarray:
    """Map a standardized core sequence back to gridded frames ``(M, *grid)``."""
    return decode_grid(normalizer.inverse(seq.cores), latents, axes)


def per_frame_vrmse(pred: np.ndarray, true: np.ndarray) -> np.ndarray:
    return np.array([vrmse(p, t) for p, t in zip(pred, true)])


def scaled_obs_noise(obs: ObservationSet, normalizer: Normalizer,
                     default: float | None = None) -> float | None:
    """Observation noise on the standardized scale, or ``default`` if unknown."""
    if obs.noise_std and obs.noise_std > 0:
        return obs.noise_std / normalizer.std
    return default


@dataclass
class Reconstruction:
    cores: CoreSequence
    field: np.ndarray
    vrmse: float
    per_frame: np.ndarray
    runtime: float


def reconstruct_record(record: FieldRecord, obs: ObservationSet, latents: LatentsLike,
                       normalizer: Normalizer, denoiser, schedule: NoiseSchedule,
                       config: GuidanceConfig, seed: int = 0) -> Reconstruction:
    t0 = time.perf_counter()
    seq = mpdps_sample(denoiser, schedule, obs, record.times, config, seed=seed,
                       latents=latents, normalizer=normalizer,
                       ranks=tuple(latents.ranks) if hasattr(latents, "ranks") else None)
    field = decode_sequence(seq, latents, normalizer, record.axes)
    elapsed = time.perf_counter() - t0
    return Reconstruction(cores=seq, field=field, vrmse=vrmse(field, record.dense),
                          per_frame=per_frame_vrmse(field, record.dense), runtime=elapsed)


def summarize(recons: list[Reconstruction], digest: str | None = None) -> EvalReport:
    scores = np.array([r.vrmse for r in recons])
    per_frame = np.mean([r.per_frame for r in recons], axis=0)
    return EvalReport(vrmse_mean=float(scores.mean()), vrmse_std=float(scores.std()),
                      per_seed=scores.tolist(), per_frame=per_frame.tolist(),
                      runtime=float(sum(r.runtime for r in recons)), digest=digest)


def evaluation_observations(record: FieldRecord, rec_id: int, seed: int, mask: MaskConfig,
                      noise_kind: str | None = None, noise_level: float = 0.0,
                      run_seed: int = 0) -> ObservationSet:
    """Evaluation mask (and optional noise) for test record ``rec_id`` under ``seed``.

    Noise std is ``noise_level`` times the record's dense standard deviation.
    """
    obs = mask_observations(record.dense, record.axes, record.times, mask,
                            seed=[run_seed, rec_id, seed])
    if noise_kind:
        obs = add_observation_noise(obs, noise_kind, noise_level,
                                    scale=float(record.dense.std()),
                                    seed=[run_seed, rec_id, seed, 1])
    return obs


def guidance_for(base: GuidanceConfig, mode: str, obs: ObservationSet, normalizer: Normalizer,
                 gamma: float, noise_known: bool = False) -> GuidanceConfig:
    """Per-run guidance settings; ``gamma`` should match the trained denoiser."""
    eps = base.obs_noise_std
    if noise_known:
        eps = scaled_obs_noise(obs, normalizer, base.obs_noise_std)
    return dataclasses.replace(base, mode=mode, obs_noise_std=eps, gamma=gamma)
