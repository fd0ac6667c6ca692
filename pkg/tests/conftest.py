"""Shared fixtures and oracle helpers for the test suite."""

import numpy as np
import pytest

from cmarl import environment as env
from cmarl import qnet
from cmarl.rng import Rng
from cmarl.volume_io import Volume3D, VolumeMeta


def tiny_net_cfg(n_agents=2, roi_size=9, comm=True, n_actions=6,
                 channels=(2, 2, 2, 2), fc=(8, 8, 8), in_frames=4):
    return qnet.NetConfig(
        n_agents=n_agents, in_frames=in_frames, roi_size=roi_size,
        conv_channels=channels, conv_kernels=(3, 3, 3, 3),
        fc_sizes=fc, n_actions=n_actions, comm_enabled=comm)


def random_params(cfg, seed, bias_scale=0.1):
    """He-init weights plus non-zero random biases (exercises both ReLU
    branches in gradient checks)."""
    rng = Rng(seed)
    params = qnet.init_params(cfg, rng)
    for a in params.arrays():
        if a.ndim == 1:
            a[...] = (rng.normals(a.size) * bias_scale).astype(np.float32)
    return params


def random_batch(cfg, seed, batch_size=2, shift=0.2):
    rng = Rng(seed)
    r = cfg.roi_size
    n = batch_size * cfg.n_agents * cfg.in_frames * r ** 3
    return (rng.uniforms(n).reshape(
        batch_size, cfg.n_agents, cfg.in_frames, r, r, r) - shift
    ).astype(np.float32)


def empty_volume(dims=(64, 64, 64), landmarks=None):
    meta = VolumeMeta(dims=tuple(dims), spacing_mm=(1.0, 1.0, 1.0),
                      scalar_type="float32", data_offset_bytes=0)
    return Volume3D(meta=meta, voxels=np.zeros(tuple(dims), np.float32),
                    landmarks={k: np.asarray(v, np.float64)
                               for k, v in (landmarks or {}).items()})


def scripted_action(state, volume, cfg):
    """Oracle policy: the move that maximally reduces true distance to the
    agent's target (ties to the lowest action id)."""
    target = volume.landmarks[state.target]
    best_a, best_d = 0, None
    for a in range(env.N_ACTIONS):
        pos = env.apply_action(state, a, volume, cfg)
        d = env.distance_mm(pos, target, volume.meta.spacing_mm)
        if best_d is None or d < best_d:
            best_a, best_d = a, d
    return best_a


def finite_difference_check(cfg, seed, batch_size=2, h=1e-3, floor=1e-6):
    """Central-difference check of qnet.backward at a random state.

    Evaluates in float64. Parameters whose +/-h window changes the
    activation topology (ReLU mask or pool argmax flip, where plain FD is
    meaningless) are differenced through the topology-pinned forward
    instead; the pinned function's gradient at the center equals the real
    one. Returns (max relative error, pinned count, total params).
    """
    params = random_params(cfg, seed)
    batch = random_batch(cfg, seed + 1000, batch_size)
    rng = Rng(seed + 2000)
    proj = rng.normals(batch_size * cfg.n_agents * cfg.n_actions).reshape(
        batch_size, cfg.n_agents, cfg.n_actions)

    _, cache0 = qnet.forward(params, cfg, batch, dtype=np.float64)
    grads = qnet.backward(params, cfg, cache0, proj)
    analytic = np.concatenate([g.ravel() for g in grads.arrays()])
    vec = qnet.flatten_params(params)
    fp0 = qnet.topology_fingerprint(cache0)

    def loss_plain(v):
        q, cache = qnet.forward(qnet.unflatten_params(cfg, v), cfg, batch,
                                dtype=np.float64)
        return float(np.sum(q * proj)), qnet.topology_fingerprint(cache)

    def loss_pinned(v):
        q = qnet.forward_pinned(qnet.unflatten_params(cfg, v), cfg, batch,
                                cache0)
        return float(np.sum(q * proj))

    max_rel = 0.0
    n_pinned = 0
    for i in range(vec.size):
        vp = vec.copy()
        vp[i] = np.float32(vp[i] + h)
        vm = vec.copy()
        vm[i] = np.float32(vm[i] - h)
        lp, fpp = loss_plain(vp)
        lm, fpm = loss_plain(vm)
        if (fpp != fp0).any() or (fpm != fp0).any():
            n_pinned += 1
            lp = loss_pinned(vp)
            lm = loss_pinned(vm)
        fd = (lp - lm) / (float(vp[i]) - float(vm[i]))
        rel = abs(fd - analytic[i]) / max(abs(fd), abs(analytic[i]), floor)
        max_rel = max(max_rel, rel)
    return max_rel, n_pinned, vec.size


@pytest.fixture(scope="session")
def small_volume():
    """One deterministic synthetic volume shared across tests."""
    from cmarl.volume_io import generate_synthetic_volume

    return generate_synthetic_volume(
        4096 * 7, (64, 64, 64), [("lm0", 8.0), ("lm1", 9.0), ("lm2", 10.0)])
