import numpy as np
import pytest
import torch

from ftdiff.errors import ContractError
from ftdiff.ftm import ObservationSet
from ftdiff.gp import gpr_conditional
from ftdiff.gpsd import NoiseSchedule, SequenceDenoiser, denoise_fn, unconditional_sample
from ftdiff.mpdps import (FrameObservation, GuidanceConfig, aggregate_guidance,
                          build_guidance_operands, dps_guidance, jacobian_pullbacks,
                          jensen_gap_probe, message_guidance, mpdps_sample)


def rel_err(a, b):
    return np.linalg.norm(a - b) / max(np.linalg.norm(b), 1e-300)


def central_diff(f, x, h):
    g = np.zeros_like(x)
    for idx in np.ndindex(*x.shape):
        xp, xm = x.copy(), x.copy()
        xp[idx] += h
        xm[idx] -= h
        g[idx] = (f(xp) - f(xm)) / (2 * h)
    return g


def random_operands(rng, M=5, D=6, N=8, eps=0.3, gamma=5.0, frame=None):
    times = np.sort(rng.uniform(0, 1, M)) + np.arange(M) * 0.02
    frame = int(rng.integers(M)) if frame is None else frame
    A = rng.standard_normal((N, D))
    y = rng.standard_normal(N)
    ops = build_guidance_operands(None, None, y, frame, times, gamma, eps, design=A)
    return ops, times


def test_dps_zero_residual_and_empty():
    rng = np.random.default_rng(0)
    A, d = rng.standard_normal((4, 3)), rng.standard_normal(3)
    assert not dps_guidance(A, A @ d, d, 0.1).any()
    assert not dps_guidance(np.zeros((0, 3)), np.zeros(0), d, 0.1).any()
    with pytest.raises(ContractError):
        dps_guidance(A, A @ d + 1, d, 0.0)


def test_dps_identity_denoiser_closed_form():
    rng = np.random.default_rng(1)
    A, W, y, eps = rng.standard_normal((1, 4)), rng.standard_normal(4), rng.standard_normal(1), 0.2
    np.testing.assert_allclose(dps_guidance(A, y, W, eps), (2 / eps ** 2) * A.T @ (y - A @ W))


def test_dps_gradient_identity_fd():
    rng = np.random.default_rng(2)
    for _ in range(20):
        N, D = rng.integers(1, 9), rng.integers(1, 7)
        A, y, W = rng.standard_normal((N, D)), rng.standard_normal(N), rng.standard_normal(D)
        eps = rng.uniform(0.1, 1.0)
        loglik = lambda w: -np.sum((y - A @ w) ** 2) / eps ** 2
        assert rel_err(dps_guidance(A, y, W, eps), central_diff(loglik, W, 1e-5)) < 1e-4


def small_net(D, seed=0):
    torch.manual_seed(seed)
    return SequenceDenoiser(D, hidden=16, blocks=2)


def test_dps_gradient_through_denoiser_fd():
    rng = np.random.default_rng(3)
    for trial in range(20):
        M, D, N = 4, 4, 5
        net = small_net(D, seed=trial)
        f = denoise_fn(net, np.linspace(0, 1, M))
        sigma = float(rng.uniform(0.2, 3.0))
        X = rng.standard_normal((M, D))
        n = int(rng.integers(M))
        A, y, eps = rng.standard_normal((N, D)), rng.standard_normal(N), 0.5

        def den(Xn):
            Z = X.copy()
            Z[n] = Xn
            with torch.no_grad():
                return f(torch.as_tensor(Z), sigma).numpy()

        loglik = lambda xn: -np.sum((y - A @ den(xn)[n]) ** 2) / eps ** 2
        factory = jacobian_pullbacks(f, torch.as_tensor(X), sigma)
        pb = factory([n])
        got = dps_guidance(A, y, den(X[n])[n], eps, lambda g: pb(g[None])[0])
        assert rel_err(got, central_diff(loglik, X[n].copy(), 1e-6)) < 1e-4


def message_objective(ops, stack_of):
    def f(X):
        r = ops.residual(stack_of(X))
        return -0.5 * r @ ops.solve(r)
    return f


def test_message_gradient_identity_fd():
    rng = np.random.default_rng(4)
    for _ in range(20):
        ops, times = random_operands(rng)
        M, D = times.size, ops.A.shape[1]
        X = rng.standard_normal((M, D))
        got = message_guidance(ops, X[ops.rest])
        fd = central_diff(message_objective(ops, lambda Z: Z[ops.rest]), X, 1e-5)
        assert rel_err(got, fd) < 1e-4
        assert not got[ops.frame].any()


def test_message_gradient_through_denoiser_fd():
    rng = np.random.default_rng(5)
    for trial in range(20):
        ops, times = random_operands(rng, M=4, D=4, N=5)
        net = small_net(4, seed=100 + trial)
        f = denoise_fn(net, times)
        sigma = float(rng.uniform(0.2, 3.0))
        X = rng.standard_normal((4, 4))
        l = ops.frame

        def stack_of(Z):
            Z = Z.copy()
            Z[l] = X[l]  # the observed frame's own input is held fixed
            with torch.no_grad():
                return f(torch.as_tensor(Z), sigma).numpy()[ops.rest]

        pb = jacobian_pullbacks(f, torch.as_tensor(X), sigma)(list(ops.rest))
        got = message_guidance(ops, stack_of(X), pb)
        fd = central_diff(message_objective(ops, stack_of), X, 1e-6)
        assert rel_err(got, fd) < 1e-4


def test_message_single_rest_frame_closed_form():
    rng = np.random.default_rng(6)
    ops, _ = random_operands(rng, M=2, frame=0)
    T = rng.standard_normal((1, ops.A.shape[1]))
    want = ops.B.T @ np.linalg.solve(ops.sigma_tilde, ops.y - ops.B @ T.ravel())
    np.testing.assert_allclose(message_guidance(ops, T)[1], want, rtol=1e-10)


def test_message_zero_when_prediction_matches():
    rng = np.random.default_rng(7)
    ops, times = random_operands(rng)
    T = rng.standard_normal((times.size - 1, ops.A.shape[1]))
    ops.y = ops.B @ T.ravel()
    assert np.abs(message_guidance(ops, T)).max() < 1e-10
    with pytest.raises(ContractError):
        message_guidance(ops, T[:-1])


def test_operands_two_path_oracle():
    rng = np.random.default_rng(8)
    ops, times = random_operands(rng, M=6)
    T = rng.standard_normal((5, ops.A.shape[1]))
    cond = gpr_conditional(times[ops.frame], times[ops.rest], 5.0)
    np.testing.assert_allclose(ops.B @ T.ravel(), ops.A @ (cond.weights @ T), rtol=1e-10, atol=1e-12)
    np.testing.assert_allclose(ops.sigma_tilde,
                               0.09 * np.eye(8) + cond.variance * ops.A @ ops.A.T, rtol=1e-12)
    assert np.linalg.eigvalsh(ops.sigma_tilde).min() > 0


def test_operands_degenerate_cases():
    rng = np.random.default_rng(9)
    A = rng.standard_normal((4, 3))
    near = build_guidance_operands(None, None, np.zeros(4), 1, [0.0, 1e-7, 1.0], 50.0, 0.1, design=A)
    np.testing.assert_allclose(near.sigma_tilde, 0.01 * np.eye(4), atol=1e-6)
    far = build_guidance_operands(None, None, np.ones(4), 0, [0.0, 0.9, 1.0], 1e4, 0.1, design=A)
    assert np.abs(far.B).max() < 1e-12
    assert np.abs(message_guidance(far, rng.standard_normal((2, 3)))).max() < 1e-10
    zero = build_guidance_operands(None, None, np.zeros(4), 0, [0.0, 1e-9], 50.0, 0.0, design=A)
    assert np.linalg.eigvalsh(zero.sigma_tilde).min() > 0
    with pytest.raises(ContractError):
        build_guidance_operands(None, None, np.zeros(4), 0, [0.0], 50.0, 0.1, design=A)


def test_operands_mirror_symmetry():
    rng = np.random.default_rng(10)
    times = np.array([0.0, 0.15, 0.4, 0.8, 1.0])
    mirrored = np.sort(1.0 - times)
    A, y = rng.standard_normal((6, 3)), rng.standard_normal(6)
    a = build_guidance_operands(None, None, y, 1, times, 8.0, 0.2, design=A)
    b = build_guidance_operands(None, None, y, 3, mirrored, 8.0, 0.2, design=A)
    np.testing.assert_allclose(a.sigma_tilde, b.sigma_tilde, rtol=1e-10)
    D = 3
    perm = np.concatenate([np.arange(k * D, (k + 1) * D) for k in reversed(range(4))])
    np.testing.assert_allclose(a.B, b.B[:, perm], rtol=1e-8, atol=1e-12)


def test_message_decays_with_distance():
    rng = np.random.default_rng(11)
    A, y = rng.standard_normal((6, 4)), rng.standard_normal(6)
    norms = []
    for dt in [0.05, 0.1, 0.2, 0.3, 0.5]:
        ops = build_guidance_operands(None, None, y, 0, [0.0, dt], 20.0, 0.2, design=A)
        norms.append(np.linalg.norm(message_guidance(ops, np.zeros((1, 4)))))
    assert np.all(np.diff(norms) <= 0)


def frame_obs(rng, frame, N=5, D=4):
    A = rng.standard_normal((N, D))
    return FrameObservation(frame, A, rng.standard_normal(N))


def test_aggregate_enumeration():
    rng = np.random.default_rng(12)
    times, eps = np.array([0.0, 0.3]), 0.4
    fo = frame_obs(rng, 0)
    ops = {0: build_guidance_operands(None, None, fo.y, 0, times, 20.0, eps, design=fo.A)}
    den = rng.standard_normal((2, 4))
    total = aggregate_guidance([fo], ops, den, eps)
    np.testing.assert_allclose(total[0], dps_guidance(fo.A, fo.y, den[0], eps))
    np.testing.assert_allclose(total[1], message_guidance(ops[0], den[1:])[1])
    dps_only = aggregate_guidance([fo], ops, den, eps, mode="dps")
    assert not dps_only[1].any()
    assert not aggregate_guidance([], {}, den, eps).any()


def test_aggregate_unobserved_frame_gets_only_messages():
    rng = np.random.default_rng(13)
    times, eps = np.linspace(0, 1, 4), 0.3
    fos = [frame_obs(rng, 0), frame_obs(rng, 2)]
    ops = {f.frame: build_guidance_operands(None, None, f.y, f.frame, times, 10.0, eps, design=f.A)
           for f in fos}
    den = rng.standard_normal((4, 4))
    total = aggregate_guidance(fos, ops, den, eps)
    want = sum(message_guidance(ops[f.frame], den[ops[f.frame].rest])[1] for f in fos)
    np.testing.assert_allclose(total[1], want)


def sampling_fixture():
    net = small_net(4, seed=0)
    lat = [lambda x: np.stack([np.ones_like(x), x], 1), lambda x: np.stack([np.cos(x), x * x], 1)]
    times = np.linspace(0, 1, 5)
    rng = np.random.default_rng(0)
    coords = [rng.random((6, 2)) for _ in times]
    values = [rng.standard_normal(6) for _ in times]
    return net, lat, times, ObservationSet(times, coords, values)


def test_mode_none_is_unconditional_bitwise():
    net, lat, times, obs = sampling_fixture()
    sched = NoiseSchedule(num_steps=8)
    a = mpdps_sample(net, sched, obs, times, GuidanceConfig(mode="none", gamma=30.0), seed=5,
                     latents=lat, ranks=(2, 2))
    b = unconditional_sample(net, sched, times, gamma=30.0, seed=5, ranks=(2, 2))
    np.testing.assert_array_equal(a.cores, b.cores)


def test_empty_observations_reduce_to_unconditional():
    net, lat, times, _ = sampling_fixture()
    empty = ObservationSet(times, [np.zeros((0, 2))] * 5, [np.zeros(0)] * 5)
    sched = NoiseSchedule(num_steps=8)
    a = mpdps_sample(net, sched, empty, times, GuidanceConfig(), seed=1, latents=lat, ranks=(2, 2))
    b = unconditional_sample(net, sched, times, seed=1, ranks=(2, 2))
    np.testing.assert_array_equal(a.cores, b.cores)


@pytest.mark.parametrize("jac", ["frozen", "exact"])
@pytest.mark.parametrize("mode", ["dps", "mpdps"])
def test_guided_sampling_runs(mode, jac):
    net, lat, times, obs = sampling_fixture()
    cfg = GuidanceConfig(mode=mode, jacobian=jac, zeta=1e-3, obs_noise_std=0.5)
    out = mpdps_sample(net, NoiseSchedule(num_steps=6), obs, times, cfg, seed=2, latents=lat,
                       ranks=(2, 2))
    assert out.cores.shape == (5, 2, 2) and np.all(np.isfinite(out.cores))


def test_guided_sampling_contracts():
    net, lat, times, obs = sampling_fixture()
    with pytest.raises(ContractError):
        mpdps_sample(net, NoiseSchedule(num_steps=2), obs, times[:-1], GuidanceConfig(),
                     latents=lat, ranks=(2, 2))
    with pytest.raises(ContractError):
        GuidanceConfig(zeta=0.0)
    with pytest.raises(ContractError):
        GuidanceConfig(mode="sde")
    GuidanceConfig(mode="none", zeta=0.0)


def test_jensen_gap_probe_vanishes_without_noise_and_grows():
    rng = np.random.default_rng(11)
    t = np.linspace(0, 1, 6)
    A, y, X = rng.standard_normal((5, 4)), rng.standard_normal(5), rng.standard_normal((6, 4))
    gaps = [jensen_gap_probe(A, y, t, 2, X, s, 20.0, 0.3) for s in (0.0, 0.1, 1.0)]
    assert gaps[0] < 1e-10
    assert 0 < gaps[1] < gaps[2]


def test_jensen_gap_probe_exact_gradient_is_fd_gradient():
    # the probe's reference gradient is the gradient of the exact Gaussian log-likelihood
    from ftdiff.gp import kernel_matrix

    rng = np.random.default_rng(12)
    t, sigma, gamma, eps, frame = np.linspace(0, 1, 4), 0.7, 10.0, 0.4, 1
    A, y, X = rng.standard_normal((3, 2)), rng.standard_normal(3), rng.standard_normal((4, 2))
    rest = np.delete(np.arange(4), frame)
    K = kernel_matrix(t[rest], gamma, 1e-8) * (1 + sigma ** 2)
    k = np.exp(-gamma * (t[rest] - t[frame]) ** 2)
    w = np.linalg.solve(K, k)
    S = (1 - w @ k) * A @ A.T + eps ** 2 * np.eye(3)

    def loglik(Z):
        r = y - A @ (w @ Z[rest])
        return -0.5 * r @ np.linalg.solve(S, r)

    fd = central_diff(loglik, X, 1e-6)
    gap = jensen_gap_probe(A, y, t, frame, X, sigma, gamma, eps)
    shrink = 1 / (1 + sigma ** 2)
    ops = build_guidance_operands(None, None, y, frame, t, gamma, eps, design=A)
    approx = message_guidance(ops, shrink * X[rest], pullback=lambda g: shrink * g)
    assert gap == pytest.approx(rel_err(approx, fd), rel=1e-5)
