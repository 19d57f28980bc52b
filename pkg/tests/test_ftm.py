import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from ftdiff.errors import ContractError, NumericalError, TrainingError
from ftdiff.ftm import (CoreSequence, FTMConfig, ObservationSet, _solve_block_tridiagonal,
                        encode_observations, fit_normalizer, ftm_loss, load_ftm, save_ftm,
                        total_variation, train_ftm)
from ftdiff.tensor_core import design_matrix


def cos_latents(ranks):
    return [lambda x, R=R: np.stack([np.cos(np.pi * r * x) + 0.1 * r for r in range(R)], axis=1)
            for R in ranks]


def planted_record(latents, ranks, M=4, N=40, seed=0, noise=0.0):
    rng = np.random.default_rng(seed)
    times = np.linspace(0, 1, M)
    cores = rng.standard_normal((M, *ranks))
    coords, values = [], []
    for m in range(M):
        c = rng.random((N, len(ranks)))
        coords.append(c)
        values.append(design_matrix(latents, c) @ cores[m].ravel() + noise * rng.standard_normal(N))
    return ObservationSet(times, coords, values), cores


def test_observation_set_contracts():
    with pytest.raises(ContractError):
        ObservationSet([], [], [])
    with pytest.raises(ContractError):
        ObservationSet([0.5, 0.1], [np.zeros((1, 2))] * 2, [np.zeros(1)] * 2)
    obs = ObservationSet([0.0, 1.0], [np.zeros((0, 2)), np.ones((2, 2))], [[], [1.0, 2.0]])
    assert obs.num_observed == 2 and obs.ndim == 2
    assert obs.observed_times.tolist() == [1.0]


def test_loss_zero_for_perfect_constant_cores():
    lat = cos_latents((2, 2))
    obs, cores = planted_record(lat, (2, 2))
    same = np.repeat(cores[:1], 4, axis=0)
    obs2 = ObservationSet(obs.times, obs.coords,
                          [design_matrix(lat, c) @ same[0].ravel() for c in obs.coords])
    assert ftm_loss(lat, [CoreSequence(obs.times, same)], [obs2], beta=0.3) == pytest.approx(0, abs=1e-20)


def test_loss_two_frames_tv_only():
    lat = cos_latents((2, 3))
    rng = np.random.default_rng(1)
    W0 = rng.standard_normal((2, 3))
    delta = rng.standard_normal((2, 3))
    cores = np.stack([W0, W0 + delta])
    coords = [rng.random((5, 2)), rng.random((7, 2))]
    values = [design_matrix(lat, c) @ w.ravel() for c, w in zip(coords, cores)]
    obs = ObservationSet([0.0, 1.0], coords, values)
    beta = 0.37
    d2 = np.sum(delta ** 2)
    assert ftm_loss(lat, [CoreSequence([0.0, 1.0], cores)], [obs], beta) == pytest.approx(beta * d2)


def test_loss_rejects_empty():
    with pytest.raises(ContractError):
        ftm_loss(cos_latents((2,)), [], [], 0.0)


def test_tv_invariant_to_constant_shift():
    rng = np.random.default_rng(2)
    cores = rng.standard_normal((5, 3, 2))
    assert total_variation(cores + rng.standard_normal((3, 2))) == pytest.approx(total_variation(cores))


def test_encode_recovers_planted_cores():
    ranks = (3, 4)
    lat = cos_latents(ranks)
    obs, cores = planted_record(lat, ranks, M=5, N=60)
    got = encode_observations(lat, obs, beta=0.0, ridge=0.0).cores
    assert np.linalg.norm(got - cores) / np.linalg.norm(cores) < 1e-6


def objective_grad(lat, obs, w, beta, ridge):
    """Gradient of sum ||y - A w||^2 + beta*TV + ridge*||w||^2, written out directly."""
    M = w.shape[0]
    g = np.zeros_like(w)
    for m in range(M):
        if obs.values[m].size:
            A = design_matrix(lat, obs.coords[m])
            g[m] += 2 * A.T @ (A @ w[m] - obs.values[m])
        g[m] += 2 * ridge * w[m]
        if m > 0:
            g[m] += 2 * beta * (w[m] - w[m - 1])
        if m < M - 1:
            g[m] -= 2 * beta * (w[m + 1] - w[m])
    return g


@pytest.mark.parametrize("beta", [0.0, 0.1, 5.0])
def test_encode_is_stationary_point(beta):
    ranks = (2, 3)
    lat = cos_latents(ranks)
    obs, _ = planted_record(lat, ranks, M=6, N=4, noise=0.3, seed=3)
    # drop one frame entirely so the TV coupling has to fill it in
    obs.values[2] = np.zeros(0)
    obs.coords[2] = np.zeros((0, 2))
    ridge = 1e-3
    w = encode_observations(lat, obs, beta=beta, ridge=ridge).cores.reshape(6, -1)
    g = objective_grad(lat, obs, w, beta, ridge)
    assert np.linalg.norm(g) < 1e-8


def test_encode_single_observation_ridge():
    lat = cos_latents((1,))
    obs = ObservationSet([0.0], [np.array([[0.0]])], [np.array([2.0])])
    ridge = 1e-3
    w = encode_observations(lat, obs, ridge=ridge).cores.ravel()[0]
    # closed form for one row a=1: w = y / (1 + ridge)
    assert w == pytest.approx(2.0 / (1 + ridge), rel=1e-12)
    assert abs(2.0 - w) <= 2.0 * ridge


def test_encode_singular_without_ridge():
    lat = cos_latents((2, 2))
    obs = ObservationSet([0.0], [np.array([[0.3, 0.4]])], [np.array([1.0])])
    with pytest.raises(NumericalError):
        encode_observations(lat, obs, beta=0.0, ridge=0.0)


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 6), st.integers(1, 5), st.floats(0.0, 10.0), st.integers(0, 10 ** 6))
def test_banded_solve_matches_dense(M, D, beta, seed):
    rng = np.random.default_rng(seed)
    X = rng.standard_normal((M, D, D + 2))
    G = X @ X.transpose(0, 2, 1) + 0.1 * np.eye(D)
    b = rng.standard_normal((M, D))
    H = np.zeros((M * D, M * D))
    for m in range(M):
        H[m * D:(m + 1) * D, m * D:(m + 1) * D] = G[m]
    if M > 1:
        L = np.diag(np.r_[1.0, np.full(M - 2, 2.0), 1.0]) - np.eye(M, k=1) - np.eye(M, k=-1)
        H += beta * np.kron(L, np.eye(D))
    want = np.linalg.solve(H, b.ravel())
    got = _solve_block_tridiagonal(G, b, beta).ravel()
    np.testing.assert_allclose(got, want, rtol=1e-8, atol=1e-10)


def small_config(**kw):
    base = dict(ranks=(2, 2), rounds=8, latent_steps=5, width=16, depth=2, lr=1e-3,
                batch_entries=512, holdout_fraction=0.0)
    base.update(kw)
    return FTMConfig(**base)


def grid_records(fn, B=3, M=4, n=10, seed=0):
    rng = np.random.default_rng(seed)
    times = np.linspace(0, 1, M)
    out = []
    for b in range(B):
        coords, values = [], []
        for t in times:
            c = rng.random((n, 2))
            coords.append(c)
            values.append(fn(c, t, b))
        out.append(ObservationSet(times, coords, values))
    return out


def test_train_zero_field():
    data = grid_records(lambda c, t, b: np.zeros(len(c)))
    tr = train_ftm(data, small_config(), seed=0)
    assert tr.final_loss < 1e-6
    assert np.abs(np.concatenate([cs.cores.ravel() for cs in tr.core_batches])).max() < 1e-3


def smooth(c, t, b):
    return np.sin(np.pi * c[:, 0]) * np.cos(np.pi * c[:, 1]) * (1 + 0.5 * np.sin(2 * t + b))


def test_train_trace_monotone_and_deterministic():
    data = grid_records(smooth)
    a = train_ftm(data, small_config(), seed=4)
    b = train_ftm(data, small_config(), seed=4)
    assert np.all(np.diff(a.loss_trace) <= 1e-12 * max(a.loss_trace))
    assert a.loss_trace == b.loss_trace
    for x, y in zip(a.core_batches, b.core_batches):
        np.testing.assert_array_equal(x.cores, y.cores)
    assert all(cs.ranks == (2, 2) for cs in a.core_batches)


def test_train_tv_weight_smooths_cores():
    rng = np.random.default_rng(0)
    data = grid_records(lambda c, t, b: smooth(c, t, b) + 0.3 * rng.standard_normal(len(c)), B=1)
    tv = []
    for beta in (0.0, 1e-2):
        tr = train_ftm(data, small_config(tv_weight=beta, rounds=3), seed=1)
        tv.append(total_variation(tr.core_batches[0].cores))
    assert tv[1] < tv[0]


def test_train_rejects_bad_inputs():
    with pytest.raises(ContractError):
        train_ftm([], small_config())
    data = grid_records(smooth, B=1)
    with pytest.raises(ContractError):
        train_ftm(data, small_config(ranks=(2, 2, 2)))


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_train_divergence_raises_with_trace():
    data = grid_records(lambda c, t, b: np.full(len(c), 1e200), B=1)
    with pytest.raises(TrainingError) as info:
        train_ftm(data, small_config(ridge=0.0), seed=0)
    assert len(info.value.trace) >= 1


def test_checkpoint_roundtrip(tmp_path):
    data = grid_records(smooth, B=2)
    tr = train_ftm(data, small_config(rounds=2), seed=0)
    path = tmp_path / "ftm.npz"
    save_ftm(path, tr, digest="abc")
    back, header = load_ftm(path)
    assert header["digest"] == "abc"
    for k, v in tr.latents.parameters_numpy().items():
        np.testing.assert_array_equal(back.latents.parameters_numpy()[k], v)
    for x, y in zip(tr.core_batches, back.core_batches):
        np.testing.assert_array_equal(x.cores, y.cores)
    assert back.normalizer == tr.normalizer
    assert back.config == tr.config


def test_normalizer_standardizes_and_maps_observations():
    rng = np.random.default_rng(0)
    seqs = [CoreSequence(np.arange(3.0), 3 + 2 * rng.standard_normal((3, 2, 2))) for _ in range(4)]
    nz = fit_normalizer(seqs)
    z = np.concatenate([nz.forward(s.cores).ravel() for s in seqs])
    assert abs(z.mean()) < 1e-12 and z.std() == pytest.approx(1.0)
    A = rng.standard_normal((5, 4))
    w = seqs[0].cores[0].ravel()
    np.testing.assert_allclose(nz.standardize_values(A, A @ w), A @ nz.forward(w))
