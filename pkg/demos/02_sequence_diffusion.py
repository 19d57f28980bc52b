"""
Diffusion over core sequences with temporally correlated noise
==============================================================

Uses the low-dimensional toy corpus from the test suite's recipe: core
sequences whose entries move along three smooth sinusoids. Two denoisers
are trained, one with GP noise across the sequence and one with iid
noise, and their unconditional samples are compared for roughness.
"""

# %%
import numpy as np
import torch

from ftdiff.ftm import CoreSequence
from ftdiff.gpsd import GPSDTrainConfig, NoiseSchedule, train_gpsd, unconditional_sample

torch.set_num_threads(1)
rng = np.random.default_rng(0)
basis = rng.standard_normal((3, 4, 4))
times = np.linspace(0, 1, 8)
seqs = []
for _ in range(200):
    coef = rng.uniform(0.5, 1.5, 3) * np.sin(np.outer(times, rng.uniform(1, 3, 3)) + rng.uniform(0, 6.3, 3))
    seqs.append(np.einsum("mj,j...->m...", coef, basis))
allc = np.stack(seqs)
seqs = [CoreSequence(times, (s - allc.mean()) / allc.std()) for s in seqs]

# %%
models = {}
for kind in ("gp", "iid"):
    cfg = GPSDTrainConfig(noise=kind, steps=800, hidden=64, eval_every=200)
    models[kind] = train_gpsd(seqs, cfg, callback=lambda s, l, h: print(f"{kind:>3} step {s:4d}  held-out {h:.2f}"))

# %%
# Roughness: mean Frobenius norm of the difference between neighbouring cores.
def roughness(seq):
    return np.linalg.norm(np.diff(seq.flat, axis=0), axis=1).mean()


data_rough = np.mean([roughness(s) for s in seqs])
sched = NoiseSchedule(num_steps=30)
for kind, model in models.items():
    r = [roughness(unconditional_sample(model.denoiser, sched, times, seed=s, ranks=(4, 4), noise=kind))
         for s in range(10)]
    print(f"{kind:>3} samples: roughness {np.mean(r):.3f} (data {data_rough:.3f})")

# On this toy corpus, with 800 steps at width 64, the ordering is not stable:
# one seed set gave gp 1.98 vs iid 1.48. The GP-vs-iid comparison in the
# acceptance suite uses the full advecting corpus and a bootstrap over seeds.

# %%
# The sampler runs at any set of times, e.g. twice the training resolution.
dense = unconditional_sample(models["gp"].denoiser, sched, np.linspace(0, 1, 15), seed=0, ranks=(4, 4))
print("15-frame sample, roughness", round(roughness(dense), 3))
