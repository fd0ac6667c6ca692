"""Communicative Q-network: shared 3D conv trunk, per-agent FC heads.

The trunk (four 3-D convolutions with ReLU, max pooling after the first
three) is applied with identical weights to every agent's observation
stack. Each agent then owns a four-layer FC stack; after each hidden FC
layer the mean of all agents' activations (the message) is concatenated
onto every agent's next-layer input. The final FC layer emits one
Q-value per action with no activation and feeds no message. With
``comm_enabled=False`` the concatenation is skipped entirely, leaving a
shared-trunk, independent-heads baseline with no cross-agent data flow
after the flatten.

Forward and backward are implemented directly in numpy. Parameters and
activations are float32; matrix products and reductions accumulate in
float64 (then round back to float32) so results are reproducible and
finite-difference checks are meaningful.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass, field

import numpy as np

from .errors import CacheMismatch, ShapeMismatch
from .rng import Rng

F32 = np.float32
F64 = np.float64


@dataclass
class NetConfig:
    n_agents: int
    in_frames: int = 4
    roi_size: int = 45
    conv_channels: tuple[int, ...] = (32, 32, 64, 64)
    conv_kernels: tuple[int, ...] = (3, 3, 3, 3)
    pool_after: frozenset = frozenset({0, 1, 2})
    fc_sizes: tuple[int, ...] = (512, 256, 128)
    n_actions: int = 6
    comm_enabled: bool = True

    def validate(self) -> None:
        if self.n_agents < 1:
            raise ValueError("n_agents must be >= 1")
        if len(self.conv_channels) != 4 or len(self.conv_kernels) != 4:
            raise ValueError("trunk must have exactly 4 conv layers")
        if len(set(self.pool_after)) != 3 or not set(self.pool_after) <= {0, 1, 2, 3}:
            raise ValueError("pool_after must name 3 distinct conv layers")
        if len(self.fc_sizes) != 3:
            raise ValueError("head must have 3 hidden FC layers + 1 output")
        if any(k % 2 == 0 or k < 1 for k in self.conv_kernels):
            raise ValueError("conv kernels must be odd and positive")
        if any(c < 1 for c in self.conv_channels) or any(s < 1 for s in self.fc_sizes):
            raise ValueError("layer widths must be positive")
        if self.in_frames < 1 or self.roi_size < 1 or self.n_actions < 1:
            raise ValueError("in_frames, roi_size, n_actions must be positive")
        side = self.roi_size
        for i in range(4):
            if i in self.pool_after:
                if side < 2:
                    raise ValueError(
                        f"spatial size {side} too small to pool after conv {i}")
                side //= 2
        if side < 1:
            raise ValueError("trunk collapses to empty feature map")

    def trunk_output_shape(self) -> tuple[int, int, int, int]:
        """(channels, d, h, w) after the last conv/pool."""
        side = self.roi_size
        for i in range(4):
            if i in self.pool_after:
                side //= 2
        return (self.conv_channels[3], side, side, side)

    def feature_count(self) -> int:
        c, d, h, w = self.trunk_output_shape()
        return c * d * h * w

    def head_layer_dims(self) -> list[tuple[int, int]]:
        """(in, out) per FC layer, message widths included when comm is on."""
        widths = [self.feature_count(), *self.fc_sizes]
        dims = []
        for layer in range(4):
            in_dim = widths[layer]
            if self.comm_enabled and layer > 0:
                in_dim += widths[layer]  # concatenated mean message
            out_dim = self.fc_sizes[layer] if layer < 3 else self.n_actions
            dims.append((in_dim, out_dim))
        return dims


@dataclass
class QNetParams:
    """Trunk conv weights/biases shared by all agents, per-agent FC stacks.

    Canonical parameter order (used for flattening, checkpoints, and
    optimizer state): conv layers in order, weights then bias, then heads
    agent-by-agent, layer-by-layer, weights then bias.
    """

    conv_w: list = field(default_factory=list)   # (C_out, C_in, k, k, k) f32
    conv_b: list = field(default_factory=list)   # (C_out,) f32
    head_w: list = field(default_factory=list)   # [agent][layer] (in, out) f32
    head_b: list = field(default_factory=list)   # [agent][layer] (out,) f32

    def arrays(self):
        """Yield every parameter array in canonical order."""
        for w, b in zip(self.conv_w, self.conv_b):
            yield w
            yield b
        for agent_w, agent_b in zip(self.head_w, self.head_b):
            for w, b in zip(agent_w, agent_b):
                yield w
                yield b


def init_params(cfg: NetConfig, rng: Rng) -> QNetParams:
    """He fan-in normal weights, zero biases; deterministic in the rng seed."""
    cfg.validate()
    params = QNetParams()
    c_in = cfg.in_frames
    for c_out, k in zip(cfg.conv_channels, cfg.conv_kernels):
        fan_in = c_in * k ** 3
        std = np.sqrt(2.0 / fan_in)
        w = (rng.normals(c_out * fan_in) * std).astype(F32).reshape(
            c_out, c_in, k, k, k)
        params.conv_w.append(w)
        params.conv_b.append(np.zeros(c_out, dtype=F32))
        c_in = c_out
    dims = cfg.head_layer_dims()
    for _agent in range(cfg.n_agents):
        ws, bs = [], []
        for in_dim, out_dim in dims:
            std = np.sqrt(2.0 / in_dim)
            ws.append((rng.normals(in_dim * out_dim) * std).astype(F32).reshape(
                in_dim, out_dim))
            bs.append(np.zeros(out_dim, dtype=F32))
        params.head_w.append(ws)
        params.head_b.append(bs)
    return params


def zeros_like_params(params: QNetParams, dtype=None) -> QNetParams:
    def z(a):
        return np.zeros_like(a) if dtype is None else np.zeros(a.shape, dtype)

    return QNetParams(
        conv_w=[z(w) for w in params.conv_w],
        conv_b=[z(b) for b in params.conv_b],
        head_w=[[z(w) for w in ws] for ws in params.head_w],
        head_b=[[z(b) for b in bs] for bs in params.head_b],
    )


def copy_to_target(online: QNetParams) -> QNetParams:
    """Deep copy; later online updates leave the copy untouched."""
    return copy.deepcopy(online)


def count_params(cfg: NetConfig) -> int:
    cfg.validate()
    total = 0
    c_in = cfg.in_frames
    for c_out, k in zip(cfg.conv_channels, cfg.conv_kernels):
        total += c_out * c_in * k ** 3 + c_out
        c_in = c_out
    for in_dim, out_dim in cfg.head_layer_dims():
        total += cfg.n_agents * (in_dim * out_dim + out_dim)
    return total


def flatten_params(params: QNetParams) -> np.ndarray:
    return np.concatenate([a.ravel() for a in params.arrays()]).astype(F32)


def unflatten_params(cfg: NetConfig, vec: np.ndarray) -> QNetParams:
    vec = np.asarray(vec, dtype=F32)
    if vec.size != count_params(cfg):
        raise ShapeMismatch(
            f"expected {count_params(cfg)} parameters, got {vec.size}")
    params = QNetParams()
    pos = 0

    def take(shape):
        nonlocal pos
        n = int(np.prod(shape))
        out = vec[pos:pos + n].reshape(shape).copy()
        pos += n
        return out

    c_in = cfg.in_frames
    for c_out, k in zip(cfg.conv_channels, cfg.conv_kernels):
        params.conv_w.append(take((c_out, c_in, k, k, k)))
        params.conv_b.append(take((c_out,)))
        c_in = c_out
    dims = cfg.head_layer_dims()
    for _agent in range(cfg.n_agents):
        ws, bs = [], []
        for in_dim, out_dim in dims:
            ws.append(take((in_dim, out_dim)))
            bs.append(take((out_dim,)))
        params.head_w.append(ws)
        params.head_b.append(bs)
    return params


# ---------------------------------------------------------------------------
# Primitive layers. Storage dtype is float32 in production (float64 is
# available for finite-difference verification); products and reductions
# always accumulate in float64.
# ---------------------------------------------------------------------------

def _mm(a: np.ndarray, b: np.ndarray, dtype=F32) -> np.ndarray:
    """a @ b with float64 accumulation, result in the storage dtype."""
    return np.matmul(a.astype(F64), b.astype(F64)).astype(dtype)


def _im2col(x_pad: np.ndarray, k: int, out_spatial: tuple) -> np.ndarray:
    """Patch matrix (C*k^3, N*D*H*W) in float64, rows ordered (c, a, b, c).

    Built with one contiguous block copy per (channel, offset) pair, which
    is much faster than gathering the strided window view wholesale.
    """
    n, c = x_pad.shape[:2]
    d, h, w = out_spatial
    col = np.empty((c * k * k * k, n * d * h * w), dtype=F64)
    i = 0
    for ci in range(c):
        for a in range(k):
            for b in range(k):
                for cc in range(k):
                    col[i] = x_pad[:, ci, a:a + d, b:b + h, cc:cc + w].ravel()
                    i += 1
    return col


def _conv3d_forward(x: np.ndarray, w: np.ndarray, b: np.ndarray, dtype=F32):
    """Same-padded stride-1 3D convolution. x: (N, C_in, D, H, W).

    Returns (output, col) where col is the float64 patch matrix reused by
    the weight-gradient GEMM in the backward pass.
    """
    n, _, d, h, wd = x.shape
    k = w.shape[2]
    p = (k - 1) // 2
    c_out = w.shape[0]
    x_pad = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p), (p, p)))
    col = _im2col(x_pad, k, (d, h, wd))
    y = (col.T @ w.reshape(c_out, -1).astype(F64).T)       # (N*DHW, C_out)
    y = y.reshape(n, d, h, wd, c_out).transpose(0, 4, 1, 2, 3).astype(dtype)
    y += b.astype(dtype).reshape(1, -1, 1, 1, 1)
    return y, col


def _conv3d_backward(dout: np.ndarray, col: np.ndarray, w: np.ndarray,
                     need_dx: bool):
    """Gradients of the same-padded stride-1 convolution."""
    dtype = dout.dtype
    n, c_out, d, h, wd = dout.shape
    c_in = w.shape[1]
    k = w.shape[2]
    p = (k - 1) // 2
    dout_2d = dout.transpose(1, 0, 2, 3, 4).reshape(c_out, -1).astype(F64)
    dw = (dout_2d @ col.T).reshape(w.shape).astype(dtype)
    db = dout.sum(axis=(0, 2, 3, 4), dtype=F64).astype(dtype)
    dx = None
    if need_dx:
        # Full correlation: convolve padded dout with spatially flipped,
        # channel-transposed kernels.
        dout_pad = np.pad(dout, ((0, 0), (0, 0), (p, p), (p, p), (p, p)))
        dcol = _im2col(dout_pad, k, (d, h, wd))
        w_flip = w[:, :, ::-1, ::-1, ::-1].transpose(1, 0, 2, 3, 4)
        dx = (dcol.T @ w_flip.reshape(c_in, -1).astype(F64).T)
        dx = dx.reshape(n, d, h, wd, c_in).transpose(0, 4, 1, 2, 3).astype(dtype)
    return dw, db, dx


def _pool_forward(x: np.ndarray):
    """2^3 max pool, stride 2, floor semantics (odd edges dropped)."""
    n, c, d, h, w = x.shape
    d2, h2, w2 = d // 2, h // 2, w // 2
    xc = x[:, :, :d2 * 2, :h2 * 2, :w2 * 2]
    blocks = xc.reshape(n, c, d2, 2, h2, 2, w2, 2)
    blocks = blocks.transpose(0, 1, 2, 4, 6, 3, 5, 7).reshape(
        n, c, d2, h2, w2, 8)
    arg = blocks.argmax(axis=-1)
    out = np.take_along_axis(blocks, arg[..., None], axis=-1)[..., 0]
    return out, (arg.astype(np.int8), x.shape)


def _pool_backward(dout: np.ndarray, cache) -> np.ndarray:
    arg, x_shape = cache
    dtype = dout.dtype
    n, c, d, h, w = x_shape
    d2, h2, w2 = d // 2, h // 2, w // 2
    dblocks = np.zeros((n, c, d2, h2, w2, 8), dtype=dtype)
    np.put_along_axis(dblocks, arg.astype(np.int64)[..., None],
                      dout[..., None].astype(dtype), axis=-1)
    dx = np.zeros(x_shape, dtype=dtype)
    dx[:, :, :d2 * 2, :h2 * 2, :w2 * 2] = (
        dblocks.reshape(n, c, d2, h2, w2, 2, 2, 2)
        .transpose(0, 1, 2, 5, 3, 6, 4, 7)
        .reshape(n, c, d2 * 2, h2 * 2, w2 * 2))
    return dx


# ---------------------------------------------------------------------------
# Forward / backward
# ---------------------------------------------------------------------------

def forward(params: QNetParams, cfg: NetConfig, batch: np.ndarray,
            dtype=F32):
    """Evaluate Q-values for a batch of joint observations.

    batch: (B, n_agents, in_frames, roi, roi, roi) float32.
    Returns (qvalues, cache) with qvalues (B, n_agents, n_actions).

    ``dtype`` is the activation storage type: float32 in production,
    float64 when an exactly differentiable evaluation is needed (e.g.
    finite-difference checks). Accumulation is float64 either way.
    """
    cfg.validate()
    batch = np.asarray(batch, dtype=dtype)
    r = cfg.roi_size
    expected = (cfg.n_agents, cfg.in_frames, r, r, r)
    if batch.ndim != 6 or batch.shape[1:] != expected:
        raise ShapeMismatch(
            f"batch shape {batch.shape} != (B, {', '.join(map(str, expected))})")
    n_batch = batch.shape[0]
    n_agents = cfg.n_agents
    zero = dtype(0.0)

    cache: dict = {"batch_shape": batch.shape, "dtype": dtype,
                   "conv": [], "pool": {}}

    x = batch.reshape(n_batch * n_agents, cfg.in_frames, r, r, r)
    for i in range(4):
        y, col = _conv3d_forward(x, params.conv_w[i], params.conv_b[i],
                                 dtype=dtype)
        mask = y > 0
        x = np.where(mask, y, zero)
        cache["conv"].append({"col": col, "mask": mask})
        if i in cfg.pool_after:
            x, pcache = _pool_forward(x)
            cache["pool"][i] = pcache

    feats = x.reshape(n_batch, n_agents, -1)
    if feats.shape[2] != cfg.feature_count():
        raise CacheMismatch(
            f"trunk produced {feats.shape[2]} features, "
            f"config says {cfg.feature_count()}")

    cache["fc_inputs"] = []   # [layer][agent] -> (B, in_dim)
    cache["fc_masks"] = []    # [layer][agent] -> (B, out_dim) bool
    layer_in = [feats[:, a, :] for a in range(n_agents)]
    for layer in range(3):
        cache["fc_inputs"].append(layer_in)
        outs = []
        masks = []
        for a in range(n_agents):
            z = _mm(layer_in[a], params.head_w[a][layer], dtype=dtype) \
                + params.head_b[a][layer].astype(dtype)
            mask = z > 0
            outs.append(np.where(mask, z, zero))
            masks.append(mask)
        cache["fc_masks"].append(masks)
        if cfg.comm_enabled:
            stacked = np.stack(outs, axis=0)
            message = (stacked.sum(axis=0, dtype=F64) / n_agents).astype(dtype)
            layer_in = [np.concatenate([outs[a], message], axis=1)
                        for a in range(n_agents)]
        else:
            layer_in = outs

    cache["fc_inputs"].append(layer_in)
    q = np.stack(
        [_mm(layer_in[a], params.head_w[a][3], dtype=dtype)
         + params.head_b[a][3].astype(dtype)
         for a in range(n_agents)],
        axis=1)
    return q, cache


def forward_pinned(params: QNetParams, cfg: NetConfig, batch: np.ndarray,
                   pin: dict, dtype=F64) -> np.ndarray:
    """Evaluate Q-values with the activation topology held fixed.

    ``pin`` is a cache from a reference forward(); its ReLU masks and
    pooling argmax selections are reused instead of being recomputed, so
    the result is a smooth function of the parameters that coincides
    with forward() (value and gradient) at the reference point. This is
    what makes finite-difference gradient verification well-defined next
    to ReLU kinks and max-pool ties; it is not used in training.
    """
    cfg.validate()
    batch = np.asarray(batch, dtype=dtype)
    if batch.shape != pin["batch_shape"]:
        raise CacheMismatch(
            f"batch shape {batch.shape} != pinned {pin['batch_shape']}")
    n_batch, n_agents = batch.shape[:2]
    r = cfg.roi_size

    x = batch.reshape(n_batch * n_agents, cfg.in_frames, r, r, r)
    for i in range(4):
        y, _ = _conv3d_forward(x, params.conv_w[i], params.conv_b[i],
                               dtype=dtype)
        x = np.where(pin["conv"][i]["mask"], y, dtype(0.0))
        if i in cfg.pool_after:
            arg, x_shape = pin["pool"][i]
            n, c, d, h, w = x.shape
            d2, h2, w2 = d // 2, h // 2, w // 2
            blocks = x[:, :, :d2 * 2, :h2 * 2, :w2 * 2].reshape(
                n, c, d2, 2, h2, 2, w2, 2)
            blocks = blocks.transpose(0, 1, 2, 4, 6, 3, 5, 7).reshape(
                n, c, d2, h2, w2, 8)
            x = np.take_along_axis(
                blocks, arg.astype(np.int64)[..., None], axis=-1)[..., 0]

    feats = x.reshape(n_batch, n_agents, -1)
    layer_in = [feats[:, a, :] for a in range(n_agents)]
    for layer in range(3):
        outs = []
        for a in range(n_agents):
            z = _mm(layer_in[a], params.head_w[a][layer], dtype=dtype) \
                + params.head_b[a][layer].astype(dtype)
            outs.append(np.where(pin["fc_masks"][layer][a], z, dtype(0.0)))
        if cfg.comm_enabled:
            stacked = np.stack(outs, axis=0)
            message = (stacked.sum(axis=0, dtype=F64) / n_agents).astype(dtype)
            layer_in = [np.concatenate([outs[a], message], axis=1)
                        for a in range(n_agents)]
        else:
            layer_in = outs

    return np.stack(
        [_mm(layer_in[a], params.head_w[a][3], dtype=dtype)
         + params.head_b[a][3].astype(dtype)
         for a in range(n_agents)],
        axis=1)


def topology_fingerprint(cache: dict) -> np.ndarray:
    """Flat encoding of all ReLU masks and pool selections in a cache."""
    parts = [cache["conv"][i]["mask"].ravel() for i in range(4)]
    parts += [np.asarray(cache["pool"][i][0]).ravel()
              for i in sorted(cache["pool"])]
    parts += [m.ravel() for layer in cache["fc_masks"] for m in layer]
    return np.concatenate([p.astype(np.int8) for p in parts])


def backward(params: QNetParams, cfg: NetConfig, cache: dict,
             dq: np.ndarray) -> QNetParams:
    """Exact gradients of forward() w.r.t. every parameter.

    dq: (B, n_agents, n_actions), the loss gradient at the Q outputs.
    The trunk gradient accumulates over all agents; each mean message
    routes 1/n_agents of its downstream gradient back into every agent's
    contributing layer.
    """
    dtype = cache.get("dtype", F32)
    zero = dtype(0.0)
    dq = np.asarray(dq, dtype=dtype)
    n_batch, n_agents = cache["batch_shape"][:2]
    if dq.shape != (n_batch, n_agents, cfg.n_actions):
        raise CacheMismatch(
            f"dq shape {dq.shape} != ({n_batch}, {n_agents}, {cfg.n_actions})")
    if n_agents != cfg.n_agents or len(cache.get("conv", ())) != 4:
        raise CacheMismatch("cache does not match config")

    grads = zeros_like_params(params, dtype=dtype)
    fc_width = [cfg.fc_sizes[0], cfg.fc_sizes[1], cfg.fc_sizes[2]]

    # Output layer.
    d_in = []
    for a in range(n_agents):
        g = dq[:, a, :]
        grads.head_w[a][3] = _mm(cache["fc_inputs"][3][a].T, g, dtype=dtype)
        grads.head_b[a][3] = g.sum(axis=0, dtype=F64).astype(dtype)
        d_in.append(_mm(g, params.head_w[a][3].T, dtype=dtype))

    # Hidden FC layers, walking the message concatenation backwards.
    for layer in (2, 1, 0):
        width = fc_width[layer]
        if cfg.comm_enabled:
            d_msg_total = np.zeros((n_batch, width), dtype=F64)
            for a in range(n_agents):
                d_msg_total += d_in[a][:, width:].astype(F64)
            shared = (d_msg_total / n_agents).astype(dtype)
            d_out = [d_in[a][:, :width] + shared for a in range(n_agents)]
        else:
            d_out = d_in
        d_in = []
        for a in range(n_agents):
            dz = np.where(cache["fc_masks"][layer][a], d_out[a], zero)
            grads.head_w[a][layer] = _mm(cache["fc_inputs"][layer][a].T, dz,
                                         dtype=dtype)
            grads.head_b[a][layer] = dz.sum(axis=0, dtype=F64).astype(dtype)
            d_in.append(_mm(dz, params.head_w[a][layer].T, dtype=dtype))

    # Back into the trunk; contributions from all agents fold into the
    # shared batch dimension.
    c4, s4, _, _ = cfg.trunk_output_shape()
    dx = np.stack(d_in, axis=1).reshape(n_batch * n_agents, c4, s4, s4, s4)
    for i in (3, 2, 1, 0):
        if i in cfg.pool_after:
            dx = _pool_backward(dx, cache["pool"][i])
        dx = np.where(cache["conv"][i]["mask"], dx, zero)
        dw, db, dx = _conv3d_backward(dx, cache["conv"][i]["col"],
                                      params.conv_w[i], need_dx=(i > 0))
        grads.conv_w[i] = dw
        grads.conv_b[i] = db
    return grads
