"""Time-conditioned convolutional encoder-decoder with hand-rolled
reverse-mode gradients.

Parameters live in one flat float64 vector with a named-shape index; every
layer reads its weights through reshaped views of that vector, so in-place
optimizer updates propagate without copying. The forward pass records the
activations each adjoint rule needs into an explicit tape (a plain dict), and
`backward` replays the composition in reverse. Keeping the tape out of the
network object means concurrent forward passes never share mutable state.

Architecture, per level: 3x3 convolution (edge-replicate padding), group
normalization, SiLU, an additive per-channel projection of the sinusoidal
time embedding, a second 3x3 convolution, SiLU. Levels are joined by 2x
average-pool downsampling, nearest-neighbour upsampling, and encoder-to-
decoder skip concatenation; a final 1x1 convolution maps to the output
channels, through Tanh when the network predicts the clean signal directly
(`predicts_x0`), linearly when it predicts the injected noise.

The decoder channel plan may have one entry fewer than the encoder plan (a
block per upsample) or the same length, in which case the first decoder
block runs at the bottleneck resolution without a skip.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .heatmap import TAG_RAW, HeatmapStack
from .kernels import conv2d, conv2d_grad_input, conv2d_grad_weights, fold_edge_adjoint, pad_edge
from .schedule import Schedule

__all__ = [
    "Denoiser",
    "make_denoiser",
    "sinusoidal_time_embedding",
    "toy_unet_forward",
    "forward_with_tape",
    "backward",
    "eps_to_x0",
    "x0_to_eps",
]

_GN_EPS = 1e-5


def sinusoidal_time_embedding(t, dim: int) -> np.ndarray:
    """Transformer-style positional code for a scalar timestep.

    Entry 2k is sin(t / 10000^(2k/dim)), entry 2k+1 the matching cosine.
    """
    if dim < 2 or dim % 2 != 0:
        raise ValueError(f"embedding dim must be even and >= 2, got {dim}")
    k = np.arange(dim // 2, dtype=np.float64)
    args = float(t) / np.power(10000.0, 2.0 * k / dim)
    emb = np.empty(dim)
    emb[0::2] = np.sin(args)
    emb[1::2] = np.cos(args)
    return emb


@dataclass(eq=False)
class Denoiser:
    """Parameterized denoising network; see the module docstring.

    `index` maps parameter names to (offset, shape) into the flat `params`
    vector. `param_view(name)` returns a writable view, not a copy.
    """

    params: np.ndarray
    index: dict
    in_channels: int
    out_channels: int
    enc_plan: tuple
    dec_plan: tuple
    time_dim: int
    gn_groups: int
    predicts_x0: bool
    layout: dict = field(repr=False)

    def param_view(self, name: str) -> np.ndarray:
        off, shape = self.index[name]
        return self.params[off : off + int(np.prod(shape))].reshape(shape)

    def predict(self, inp: np.ndarray, t) -> HeatmapStack:
        return toy_unet_forward(self, inp, t)


def _plan_layout(in_channels, out_channels, enc_plan, dec_plan):
    levels = len(enc_plan)
    if levels < 2:
        raise ValueError("need at least two encoder levels")
    if len(dec_plan) not in (levels - 1, levels):
        raise ValueError(
            f"decoder plan length must be {levels - 1} or {levels} for {levels} encoder levels,"
            f" got {len(dec_plan)}"
        )
    enc_specs = []
    for i, cout in enumerate(enc_plan):
        cin = in_channels if i == 0 else enc_plan[i - 1]
        enc_specs.append((f"enc{i + 1}", int(cin), int(cout)))

    bridge = None
    dec_specs = []
    if len(dec_plan) == levels:
        bridge = ("dec1", int(enc_plan[-1]), int(dec_plan[0]))
        first_up = dec_plan[0]
        offset = 1
    else:
        first_up = enc_plan[-1]
        offset = 0
    for k in range(offset, len(dec_plan)):
        up_ch = first_up if k == offset else dec_plan[k - 1]
        skip_level = levels - 2 - (k - offset)
        cin = int(up_ch) + int(enc_plan[skip_level])
        dec_specs.append((f"dec{k + 1}", int(up_ch), int(skip_level), cin, int(dec_plan[k])))

    head = (int(dec_plan[-1]), int(out_channels))
    return {"levels": levels, "enc": enc_specs, "bridge": bridge, "dec": dec_specs, "head": head}


def make_denoiser(
    in_channels: int,
    out_channels: int,
    rng,
    enc_plan=(8, 16, 32),
    dec_plan=(16, 8),
    time_dim: int = 32,
    gn_groups: int = 4,
    predicts_x0: bool = True,
) -> Denoiser:
    """Build and initialize a network for the given channel plans.

    Convolution weights start uniform in +-sqrt(1/fan_in) (biases zero),
    normalization at identity. Draws happen in registration order, so a
    fixed rng reproduces the same parameters bit for bit.
    """
    layout = _plan_layout(in_channels, out_channels, enc_plan, dec_plan)
    block_outs = [s[2] for s in layout["enc"]]
    if layout["bridge"]:
        block_outs.append(layout["bridge"][2])
    block_outs.extend(s[4] for s in layout["dec"])
    bad = [c for c in block_outs if c % gn_groups != 0]
    if bad:
        raise ValueError(f"block channel counts {bad} not divisible by {gn_groups} norm groups")

    index = {}
    chunks = []
    offset = 0

    def register(name, array):
        nonlocal offset
        index[name] = (offset, array.shape)
        chunks.append(array.ravel())
        offset += array.size

    def conv_init(cout, cin, kh, kw):
        bound = np.sqrt(1.0 / (cin * kh * kw))
        return rng.uniform(-bound, bound, (cout, cin, kh, kw))

    def register_block(name, cin, cout):
        register(f"{name}.conv1.w", conv_init(cout, cin, 3, 3))
        register(f"{name}.conv1.b", np.zeros(cout))
        register(f"{name}.gn.g", np.ones(cout))
        register(f"{name}.gn.b", np.zeros(cout))
        bound = np.sqrt(1.0 / time_dim)
        register(f"{name}.time.w", rng.uniform(-bound, bound, (time_dim, cout)))
        register(f"{name}.time.b", np.zeros(cout))
        register(f"{name}.conv2.w", conv_init(cout, cout, 3, 3))
        register(f"{name}.conv2.b", np.zeros(cout))

    for name, cin, cout in layout["enc"]:
        register_block(name, cin, cout)
    if layout["bridge"]:
        name, cin, cout = layout["bridge"]
        register_block(name, cin, cout)
    for name, _up, _lvl, cin, cout in layout["dec"]:
        register_block(name, cin, cout)
    head_in, head_out = layout["head"]
    register("head.w", conv_init(head_out, head_in, 1, 1))
    register("head.b", np.zeros(head_out))

    params = np.concatenate(chunks)
    return Denoiser(
        params=params,
        index=index,
        in_channels=int(in_channels),
        out_channels=int(out_channels),
        enc_plan=tuple(int(c) for c in enc_plan),
        dec_plan=tuple(int(c) for c in dec_plan),
        time_dim=int(time_dim),
        gn_groups=int(gn_groups),
        predicts_x0=bool(predicts_x0),
        layout=layout,
    )


def _sigmoid(x):
    return 1.0 / (1.0 + np.exp(-x))


def _silu(x):
    return x * _sigmoid(x)


def _silu_backward(g, x):
    s = _sigmoid(x)
    return g * s * (1.0 + x * (1.0 - s))


def _groupnorm_forward(x, gamma, beta, groups):
    c, h, w = x.shape
    xg = x.reshape(groups, -1)
    mu = xg.mean(axis=1, keepdims=True)
    var = xg.var(axis=1, keepdims=True)
    inv = 1.0 / np.sqrt(var + _GN_EPS)
    xhat = ((xg - mu) * inv).reshape(c, h, w)
    out = gamma[:, None, None] * xhat + beta[:, None, None]
    return out, xhat, inv.ravel()


def _groupnorm_backward(g, xhat, inv, gamma, groups):
    dgamma = (g * xhat).sum(axis=(1, 2))
    dbeta = g.sum(axis=(1, 2))
    shape = g.shape
    dxhat = (g * gamma[:, None, None]).reshape(groups, -1)
    xh = xhat.reshape(groups, -1)
    m = xh.shape[1]
    dx = (inv[:, None] / m) * (
        m * dxhat - dxhat.sum(axis=1, keepdims=True) - xh * (dxhat * xh).sum(axis=1, keepdims=True)
    )
    return dx.reshape(shape), dgamma, dbeta


def _avgpool2(x):
    c, h, w = x.shape
    return x.reshape(c, h // 2, 2, w // 2, 2).mean(axis=(2, 4))


def _avgpool2_backward(g):
    return np.repeat(np.repeat(g, 2, axis=1), 2, axis=2) * 0.25


def _upsample2(x):
    return np.repeat(np.repeat(x, 2, axis=1), 2, axis=2)


def _upsample2_backward(g):
    c, h, w = g.shape
    return g.reshape(c, h // 2, 2, w // 2, 2).sum(axis=(2, 4))


def _block_forward(d, name, x, emb, tape_blocks):
    p = d.param_view
    xp = pad_edge(x, 1, 1)
    h1 = conv2d(xp, p(f"{name}.conv1.w"), p(f"{name}.conv1.b"))
    h2, xhat, inv = _groupnorm_forward(h1, p(f"{name}.gn.g"), p(f"{name}.gn.b"), d.gn_groups)
    h3 = _silu(h2)
    tvec = emb @ p(f"{name}.time.w") + p(f"{name}.time.b")
    h4 = h3 + tvec[:, None, None]
    h4p = pad_edge(h4, 1, 1)
    h5 = conv2d(h4p, p(f"{name}.conv2.w"), p(f"{name}.conv2.b"))
    tape_blocks[name] = (xp, xhat, inv, h2, h4p, h5)
    return _silu(h5)


def _block_backward(d, name, gout, tape, grads_view):
    p = d.param_view
    xp, xhat, inv, h2, h4p, h5 = tape["blocks"][name]
    g5 = _silu_backward(gout, h5)
    grads_view(f"{name}.conv2.w")[...] += conv2d_grad_weights(g5, h4p, 3, 3)
    grads_view(f"{name}.conv2.b")[...] += g5.sum(axis=(1, 2))
    g4 = fold_edge_adjoint(conv2d_grad_input(g5, p(f"{name}.conv2.w")), 1, 1)
    gt = g4.sum(axis=(1, 2))
    grads_view(f"{name}.time.w")[...] += np.outer(tape["emb"], gt)
    grads_view(f"{name}.time.b")[...] += gt
    g2 = _silu_backward(g4, h2)
    g1, dgamma, dbeta = _groupnorm_backward(g2, xhat, inv, p(f"{name}.gn.g"), d.gn_groups)
    grads_view(f"{name}.gn.g")[...] += dgamma
    grads_view(f"{name}.gn.b")[...] += dbeta
    grads_view(f"{name}.conv1.w")[...] += conv2d_grad_weights(g1, xp, 3, 3)
    grads_view(f"{name}.conv1.b")[...] += g1.sum(axis=(1, 2))
    return fold_edge_adjoint(conv2d_grad_input(g1, p(f"{name}.conv1.w")), 1, 1)


def _check_input(d, inp):
    inp = np.asarray(inp, dtype=np.float64)
    if inp.ndim != 3 or inp.shape[0] != d.in_channels:
        raise ValueError(f"expected ({d.in_channels}, h, w) input, got shape {inp.shape}")
    div = 2 ** (d.layout["levels"] - 1)
    if inp.shape[1] % div or inp.shape[2] % div or inp.shape[1] == 0 or inp.shape[2] == 0:
        raise ValueError(f"spatial dims {inp.shape[1:]} must be positive multiples of {div}")
    return inp


def forward_with_tape(d: Denoiser, inp, t):
    """Forward pass that records the activations backward() needs.

    Returns (output array, tape). The output is the network prediction for
    the heatmap channels; the tape is consumed by `backward`.
    """
    inp = _check_input(d, inp)
    emb = sinusoidal_time_embedding(t, d.time_dim)
    tape = {"denoiser": d, "emb": emb, "blocks": {}}
    blocks = tape["blocks"]

    skips = {}
    h = inp
    levels = d.layout["levels"]
    for i, (name, _cin, _cout) in enumerate(d.layout["enc"]):
        h = _block_forward(d, name, h, emb, blocks)
        if i < levels - 1:
            skips[i] = h
            h = _avgpool2(h)

    if d.layout["bridge"]:
        h = _block_forward(d, d.layout["bridge"][0], h, emb, blocks)

    for name, up_ch, skip_level, _cin, _cout in d.layout["dec"]:
        h = _upsample2(h)
        h = np.concatenate([h, skips[skip_level]], axis=0)
        h = _block_forward(d, name, h, emb, blocks)

    tape["head_in"] = h
    z = conv2d(h, d.param_view("head.w"), d.param_view("head.b"))
    if d.predicts_x0:
        out = np.tanh(z)
        tape["tanh_out"] = out
    else:
        out = z
    tape["complete"] = True
    return out, tape


def toy_unet_forward(d: Denoiser, inp, t) -> HeatmapStack:
    """Plain forward pass; output is a raw-tagged stack."""
    out, _ = forward_with_tape(d, inp, t)
    return HeatmapStack(out, TAG_RAW)


def backward(d: Denoiser, tape, grad_out) -> np.ndarray:
    """Exact reverse-mode gradient of the recorded forward composition.

    `grad_out` is the loss gradient at the network output; the return value
    is a flat vector aligned with `d.params` / `d.index`.
    """
    if not isinstance(tape, dict) or not tape.get("complete") or tape.get("denoiser") is not d:
        raise RuntimeError("backward() needs the tape of a prior forward pass on this denoiser")
    grad_out = np.asarray(grad_out, dtype=np.float64)

    grads = np.zeros_like(d.params)

    def gview(name):
        off, shape = d.index[name]
        return grads[off : off + int(np.prod(shape))].reshape(shape)

    if d.predicts_x0:
        out = tape["tanh_out"]
        gz = grad_out * (1.0 - out * out)
    else:
        gz = grad_out
    head_in = tape["head_in"]
    gview("head.w")[...] += conv2d_grad_weights(gz, head_in, 1, 1)
    gview("head.b")[...] += gz.sum(axis=(1, 2))
    g = conv2d_grad_input(gz, d.param_view("head.w"))

    skip_grads = {}
    for name, up_ch, skip_level, _cin, _cout in reversed(d.layout["dec"]):
        g = _block_backward(d, name, g, tape, gview)
        skip_grads[skip_level] = g[up_ch:]
        g = _upsample2_backward(g[:up_ch])

    if d.layout["bridge"]:
        g = _block_backward(d, d.layout["bridge"][0], g, tape, gview)

    levels = d.layout["levels"]
    for i, (name, _cin, _cout) in enumerate(reversed(d.layout["enc"])):
        level = levels - 1 - i
        if level < levels - 1:
            g = _avgpool2_backward(g)
            g = g + skip_grads[level]
        g = _block_backward(d, name, g, tape, gview)

    return grads


def _signal_fraction(sched: Schedule, t) -> float:
    if not (isinstance(t, (int, np.integer)) and 1 <= t <= sched.T):
        raise ValueError(f"timestep {t!r} outside [1, {sched.T}]")
    return sched.alpha_bar_t(int(t))


def eps_to_x0(x_t: HeatmapStack, eps_hat: HeatmapStack, t, sched: Schedule) -> HeatmapStack:
    """Solve the closed-form noising jump for the clean signal."""
    ab = _signal_fraction(sched, t)
    if ab < 1e-12:
        raise ValueError(f"signal fraction {ab} at t={t} too small to invert")
    values = (x_t.values - eps_hat.values * np.sqrt(1.0 - ab)) / np.sqrt(ab)
    return HeatmapStack(values, TAG_RAW)


def x0_to_eps(x_t: HeatmapStack, x0_hat: HeatmapStack, t, sched: Schedule) -> HeatmapStack:
    """Inverse of `eps_to_x0`: the noise implied by a clean-signal estimate."""
    ab = _signal_fraction(sched, t)
    if 1.0 - ab < 1e-12:
        raise ValueError(f"noise fraction {1.0 - ab} at t={t} too small to invert")
    values = (x_t.values - x0_hat.values * np.sqrt(ab)) / np.sqrt(1.0 - ab)
    return HeatmapStack(values, TAG_RAW)
