"""Encoders, denoiser, and the conditioning fusion operations.

Four networks share one parameter dictionary: a motion encoder (6-block
pyramid, attention in the last two blocks, one tap per block), a matching
reference encoder feeding cross-attention, an illumination encoder with a
zero-initialized output convolution, and an encoder/decoder denoiser whose
six attention sites fuse the motion taps by gating, the reference by
cross-attention, expression by adaptive layer norm, and audio by an
attention block with a zero-initialized output projection.

Zero-initialized pieces make every new conditioning branch an exact no-op
before training: the network's output is bit-identical with or without the
illumination/audio/expression inputs at step 0.
"""

from __future__ import annotations

import contextlib
import math
from dataclasses import dataclass

import numpy as np

from . import rng as rngmod
from . import tensor as T
from .shapes import ArchConfig, grid_side, motion_tap_grids
from .tensor import AttentionWeights, ShapeError, Tensor


@dataclass
class NetBundle:
    """One model: config plus the flat name → parameter map."""

    config: ArchConfig
    params: dict[str, Tensor]

    def param(self, name: str) -> Tensor:
        return self.params[name]

    def attention_weights(self, prefix: str) -> AttentionWeights:
        return AttentionWeights(
            self.params[f"{prefix}.wq"],
            self.params[f"{prefix}.wk"],
            self.params[f"{prefix}.wv"],
            self.params[f"{prefix}.wo"],
        )


@contextlib.contextmanager
def inference_mode(bundle: NetBundle):
    """Temporarily mark every parameter non-differentiable.

    Forward passes inside the block skip tape construction entirely, which
    matters when a sampler calls the denoiser hundreds of times.
    """
    saved = [(p, p.grad_enabled) for p in bundle.params.values()]
    for p, _ in saved:
        p.grad_enabled = False
    try:
        yield bundle
    finally:
        for p, was in saved:
            p.grad_enabled = was


@dataclass
class Conditions:
    """Inputs to one denoising call; None marks a dropped/absent condition."""

    reference_taps: list[Tensor]
    motion_taps: list[Tensor] | None = None
    illumination: Tensor | None = None
    audio: Tensor | None = None  # (frames, audio_dim)
    expression: Tensor | None = None  # (expr_dim,)


# ---------------------------------------------------------------------------
# initialization


def _init(rng, *shape, fan_in: int) -> np.ndarray:
    return rng.normal(scale=1.0 / math.sqrt(fan_in), size=shape)


def init_nets(config: ArchConfig, seed: int, randomize_zero_init: bool = False) -> NetBundle:
    """Fresh parameters, deterministic per (config, seed).

    ``randomize_zero_init`` replaces the normally-zero tensors with small
    random values; gradient checks use it so no path has trivially zero
    gradients. Training always starts from the true zero-init state.
    """
    params: dict[str, Tensor] = {}

    def add(name: str, shape: tuple[int, ...], fan_in: int, zero: bool = False):
        if zero and not randomize_zero_init:
            data = np.zeros(shape)
        else:
            data = _init(rngmod.stream(seed, f"init/{name}"), *shape, fan_in=fan_in)
            if zero:
                data *= 0.2  # perturbed stand-in for a zero tensor, kept small
        params[name] = T.parameter(data, name)

    def add_conv(prefix: str, out_c: int, in_c: int, k: int, zero: bool = False):
        add(f"{prefix}.w", (out_c, in_c, k, k), fan_in=in_c * k * k, zero=zero)
        add(f"{prefix}.b", (out_c,), fan_in=1, zero=not randomize_zero_init)

    def add_attention(prefix: str, dim: int, zero_out: bool = False):
        for mat in ("wq", "wk", "wv"):
            add(f"{prefix}.{mat}", (dim, dim), fan_in=dim)
        add(f"{prefix}.wo", (dim, dim), fan_in=dim, zero=zero_out)

    def add_layer_norm(prefix: str, dim: int):
        params[f"{prefix}.g"] = T.parameter(np.ones(dim), f"{prefix}.g")
        params[f"{prefix}.b"] = T.parameter(np.zeros(dim), f"{prefix}.b")

    def add_pyramid(net: str):
        chans = config.motion_channels
        add_conv(f"{net}.stem0", chans[0], config.in_channels, 3)
        add_conv(f"{net}.stem1", chans[0], chans[0], 3)
        add_conv(f"{net}.stem2", chans[0], chans[0], 3)
        for block in range(6):
            c = chans[block]
            add_conv(f"{net}.b{block}.c1", c, c, 3)
            add_conv(f"{net}.b{block}.c2", c, c, 3)
            if block >= 4:
                add_layer_norm(f"{net}.b{block}.ln", c)
                add_attention(f"{net}.b{block}.attn", c)
        add_conv(f"{net}.down0", chans[2], chans[1], 3)
        add_conv(f"{net}.down1", chans[4], chans[3], 3)

    add_pyramid("motion")
    add_pyramid("ref")

    # illumination: 8 conv layers (3 strided stem + 5 body), attention, zero output
    ic = config.illum_channels
    add_conv("illum.stem0", ic, config.in_channels, 3)
    add_conv("illum.stem1", ic, ic, 3)
    add_conv("illum.stem2", ic, ic, 3)
    for layer in range(5):
        add_conv(f"illum.body{layer}", ic, ic, 3)
    add_layer_norm("illum.ln", ic)
    add_attention("illum.attn", ic)
    add_conv("illum.out", ic, ic, 1, zero=True)

    # denoiser
    s0, s1, s2 = config.denoise_channels
    add_conv("den.in", s0, config.latent_channels, 3)
    for stage, c in enumerate((s0, s1, s2)):
        add(f"den.temb{stage}.w", (config.time_dim, c), fan_in=config.time_dim)
        add(f"den.temb{stage}.b", (c,), fan_in=1, zero=not randomize_zero_init)
        for j in range(2):
            add_conv(f"den.s{stage}.rb{j}.c1", c, c, 3)
            add_conv(f"den.s{stage}.rb{j}.c2", c, c, 3)
    add_conv("den.down0", s1, s0, 3)
    add_conv("den.down1", s2, s1, 3)
    add_conv("den.mid.c1", s2, s2, 3)
    add_conv("den.mid.c2", s2, s2, 3)
    add_layer_norm("den.temporal.ln", s2)
    add_attention("den.temporal", s2, zero_out=True)
    add_conv("den.up1", s1, s2, 3)
    add_conv("den.u1.rb.c1", s1, s1, 3)
    add_conv("den.u1.rb.c2", s1, s1, 3)
    add_conv("den.up0", s0, s1, 3)
    add_conv("den.u0.rb.c1", s0, s0, 3)
    add_conv("den.u0.rb.c2", s0, s0, 3)
    add_conv("den.out", config.latent_channels, s0, 3, zero=True)

    site_channels = (s0, s0, s1, s1, s2, s2)
    for i, c in enumerate(site_channels):
        add_layer_norm(f"site{i}.sa_ln", c)
        add_attention(f"site{i}.sa", c)
        add_layer_norm(f"site{i}.ca_ln", c)
        add_attention(f"site{i}.ca", c)
        add(f"site{i}.adaln.w1", (config.expr_dim, config.adaln_hidden), fan_in=config.expr_dim)
        add(f"site{i}.adaln.b1", (config.adaln_hidden,), fan_in=1, zero=not randomize_zero_init)
        add(f"site{i}.adaln.w2", (config.adaln_hidden, 2 * c), fan_in=config.adaln_hidden, zero=True)
        add(f"site{i}.adaln.b2", (2 * c,), fan_in=1, zero=True)
        add(f"site{i}.audio_proj", (config.audio_dim, c), fan_in=config.audio_dim)
        add_layer_norm(f"site{i}.au_ln", c)
        add_attention(f"site{i}.audio", c, zero_out=True)

    return NetBundle(config=config, params=params)


# ---------------------------------------------------------------------------
# fusion primitives


def gate_fuse(s: Tensor, p: Tensor) -> Tensor:
    """s ⊙ tanh(p): replace a spatial-attention output with its gated form."""
    s, p = T.as_tensor(s), T.as_tensor(p)
    if s.shape != p.shape:
        raise ShapeError(f"gate expects matching shapes, got {s.shape} vs {p.shape}")
    return T.mul(s, T.tanh(p))


def adaln_modulate(h: Tensor, gamma: Tensor, bias: Tensor) -> Tensor:
    """(1 + γ) ⊙ LayerNorm(h) + b over an N×d token stream."""
    h = T.as_tensor(h)
    d = h.shape[1]
    normed = T.layer_norm(h, Tensor(np.ones(d)), Tensor(np.zeros(d)))
    return T.add(T.mul(normed, T.add(gamma, 1.0)), bias)


def adaln_head(bundle: NetBundle, site: int, expression: Tensor | None) -> tuple[Tensor, Tensor]:
    """Expression embedding → (γ, b); exactly zero at initialization."""
    cfg = bundle.config
    if expression is None:
        expression = Tensor(np.zeros(cfg.expr_dim))
    if expression.shape != (cfg.expr_dim,):
        raise ShapeError(f"expression embedding must be ({cfg.expr_dim},), got {expression.shape}")
    p = bundle.params
    e = T.reshape(expression, (1, cfg.expr_dim))
    hidden = T.silu(T.add(T.matmul(e, p[f"site{site}.adaln.w1"]), p[f"site{site}.adaln.b1"]))
    out = T.add(T.matmul(hidden, p[f"site{site}.adaln.w2"]), p[f"site{site}.adaln.b2"])
    c = out.shape[1] // 2
    gamma = T.reshape(T.slice_axis(out, 1, 0, c), (c,))
    bias = T.reshape(T.slice_axis(out, 1, c, 2 * c), (c,))
    return gamma, bias


# ---------------------------------------------------------------------------
# shared conv helpers


def _conv(bundle: NetBundle, prefix: str, x: Tensor, stride: int = 1, padding: int = 1) -> Tensor:
    p = bundle.params
    out = T.conv2d(x, p[f"{prefix}.w"], stride=stride, padding=padding)
    c = out.shape[0]
    return T.add(out, T.reshape(p[f"{prefix}.b"], (c, 1, 1)))


def _tokens(h: Tensor) -> Tensor:
    c, height, width = h.shape
    return T.reshape(T.permute(h, (1, 2, 0)), (height * width, c))


def _untokens(tokens: Tensor, height: int, width: int) -> Tensor:
    c = tokens.shape[1]
    return T.permute(T.reshape(tokens, (height, width, c)), (2, 0, 1))


def _ln(bundle: NetBundle, prefix: str, tokens: Tensor) -> Tensor:
    p = bundle.params
    return T.layer_norm(tokens, p[f"{prefix}.g"], p[f"{prefix}.b"])


def prepare_image(image_hwc: np.ndarray) -> Tensor:
    """H×W×3 in [0,1] → constant 3×H×W tensor in [-1,1] for the encoders."""
    chw = np.moveaxis(np.asarray(image_hwc, dtype=np.float64), -1, 0)
    return Tensor(chw * 2.0 - 1.0)


# ---------------------------------------------------------------------------
# encoders


def _pyramid_forward(bundle: NetBundle, net: str, image: Tensor) -> list[Tensor]:
    """Shared 6-block pyramid: stem to 1/8, downsample after blocks 2 and 4."""
    cfg = bundle.config
    if image.ndim != 3 or image.shape[0] != cfg.in_channels:
        raise ShapeError(f"{net} encoder expects {cfg.in_channels}×H×W, got {image.shape}")
    if image.shape[1] % 32 or image.shape[2] % 32:
        raise T.ConfigError(f"{net} encoder needs sides divisible by 32, got {image.shape}")
    h = T.silu(_conv(bundle, f"{net}.stem0", image, stride=2))
    h = T.silu(_conv(bundle, f"{net}.stem1", h, stride=2))
    h = T.silu(_conv(bundle, f"{net}.stem2", h, stride=2))
    taps: list[Tensor] = []
    for block in range(6):
        r = _conv(bundle, f"{net}.b{block}.c1", T.silu(h))
        r = _conv(bundle, f"{net}.b{block}.c2", T.silu(r))
        h = T.add(h, r)
        if block >= 4:
            c, height, width = h.shape
            tokens = _tokens(h)
            attended = T.self_attention(
                _ln(bundle, f"{net}.b{block}.ln", tokens),
                bundle.attention_weights(f"{net}.b{block}.attn"),
                heads=bundle.config.heads,
            )
            h = T.add(h, _untokens(attended, height, width))
        taps.append(h)
        if block == 1:
            h = T.silu(_conv(bundle, f"{net}.down0", h, stride=2))
        elif block == 3:
            h = T.silu(_conv(bundle, f"{net}.down1", h, stride=2))
    return taps


def motion_encode(bundle: NetBundle, image: Tensor) -> list[Tensor]:
    """Normalized motion guidance → 6 taps matching the denoiser sites."""
    return _pyramid_forward(bundle, "motion", image)


def reference_encode(bundle: NetBundle, image: Tensor) -> list[Tensor]:
    """Normalized reference image → 6 per-site cross-attention contexts."""
    return _pyramid_forward(bundle, "ref", image)


def illumination_encode(bundle: NetBundle, image: Tensor) -> Tensor:
    """Normalized illumination guidance → feature added at the latent entry.

    Final convolution is zero-initialized, so this is exactly zero for any
    input until training moves it.
    """
    cfg = bundle.config
    if image.ndim != 3 or image.shape[0] != cfg.in_channels:
        raise ShapeError(f"illumination encoder expects {cfg.in_channels}×H×W, got {image.shape}")
    h = T.silu(_conv(bundle, "illum.stem0", image, stride=2))
    h = T.silu(_conv(bundle, "illum.stem1", h, stride=2))
    h = T.silu(_conv(bundle, "illum.stem2", h, stride=2))
    for layer in range(5):
        h = T.add(h, _conv(bundle, f"illum.body{layer}", T.silu(h)))
    c, height, width = h.shape
    tokens = _tokens(h)
    attended = T.self_attention(
        _ln(bundle, "illum.ln", tokens), bundle.attention_weights("illum.attn"), heads=cfg.heads
    )
    h = T.add(h, _untokens(attended, height, width))
    return _conv(bundle, "illum.out", h, padding=0)


# ---------------------------------------------------------------------------
# denoiser


def time_embedding(bundle: NetBundle, t: int) -> Tensor:
    """Sinusoidal embedding of the diffusion step index."""
    d = bundle.config.time_dim
    half = d // 2
    freqs = np.exp(-math.log(10000.0) * np.arange(half) / half)
    angles = t * freqs
    return Tensor(np.concatenate([np.sin(angles), np.cos(angles)]))


def _stage_time_bias(bundle: NetBundle, stage: int, temb: Tensor) -> Tensor:
    p = bundle.params
    e = T.reshape(temb, (1, bundle.config.time_dim))
    out = T.add(T.matmul(e, p[f"den.temb{stage}.w"]), p[f"den.temb{stage}.b"])
    c = out.shape[1]
    return T.reshape(out, (c, 1, 1))


def _resblock(bundle: NetBundle, prefix: str, h: Tensor, time_bias: Tensor) -> Tensor:
    r = _conv(bundle, f"{prefix}.c1", T.silu(h))
    r = T.add(r, time_bias)
    r = _conv(bundle, f"{prefix}.c2", T.silu(r))
    return T.add(h, r)


def _site(bundle: NetBundle, index: int, h: Tensor, cond: Conditions) -> Tensor:
    """One fusion site: spatial attention, gate, cross, AdaLN, audio."""
    cfg = bundle.config
    c, height, width = h.shape
    tokens = _tokens(h)

    attended = T.self_attention(
        _ln(bundle, f"site{index}.sa_ln", tokens),
        bundle.attention_weights(f"site{index}.sa"),
        heads=cfg.heads,
    )
    s = T.add(tokens, attended)
    if cond.motion_taps is not None:
        tap = cond.motion_taps[index]
        if tap.shape != h.shape:
            raise ShapeError(f"motion tap {index} shape {tap.shape} does not match site {h.shape}")
        s = gate_fuse(s, _tokens(tap))

    ref = cond.reference_taps[index]
    if ref.shape[0] != c:
        raise ShapeError(f"reference tap {index} has {ref.shape[0]} channels, site has {c}")
    crossed = T.attention(
        _ln(bundle, f"site{index}.ca_ln", s),
        _tokens(ref),
        bundle.attention_weights(f"site{index}.ca"),
        heads=cfg.heads,
    )
    s = T.add(s, crossed)

    gamma, bias = adaln_head(bundle, index, cond.expression)
    s = adaln_modulate(s, gamma, bias)

    if cond.audio is not None:
        if cond.audio.ndim != 2 or cond.audio.shape[1] != cfg.audio_dim:
            raise ShapeError(f"audio embedding must be N×{cfg.audio_dim}, got {cond.audio.shape}")
        audio_tokens = T.matmul(cond.audio, bundle.params[f"site{index}.audio_proj"])
        heard = T.attention(
            _ln(bundle, f"site{index}.au_ln", s),
            audio_tokens,
            bundle.attention_weights(f"site{index}.audio"),
            heads=cfg.heads,
        )
        s = T.add(s, heard)
    return _untokens(s, height, width)


def _encode_to_mid(bundle: NetBundle, z_t: Tensor, temb: Tensor, cond: Conditions):
    cfg = bundle.config
    side = grid_side(cfg)
    if z_t.shape != (cfg.latent_channels, side, side):
        raise ShapeError(f"latent must be {(cfg.latent_channels, side, side)}, got {z_t.shape}")
    if len(cond.reference_taps) != 6:
        raise ShapeError(f"expected 6 reference taps, got {len(cond.reference_taps)}")
    if cond.motion_taps is not None and len(cond.motion_taps) != 6:
        raise ShapeError(f"expected 6 motion taps, got {len(cond.motion_taps)}")

    h = _conv(bundle, "den.in", z_t)
    if cond.illumination is not None:
        if cond.illumination.shape != h.shape:
            raise ShapeError(
                f"illumination feature {cond.illumination.shape} does not match entry {h.shape}"
            )
        h = T.add(h, cond.illumination)

    skips = []
    site = 0
    for stage in range(3):
        bias = _stage_time_bias(bundle, stage, temb)
        for j in range(2):
            h = _resblock(bundle, f"den.s{stage}.rb{j}", h, bias)
            h = _site(bundle, site, h, cond)
            site += 1
        if stage == 0:
            skips.append(h)
            h = T.silu(_conv(bundle, "den.down0", h, stride=2))
        elif stage == 1:
            skips.append(h)
            h = T.silu(_conv(bundle, "den.down1", h, stride=2))
    mid_bias = _stage_time_bias(bundle, 2, temb)
    r = _conv(bundle, "den.mid.c1", T.silu(h))
    r = T.add(r, mid_bias)
    h = T.add(h, _conv(bundle, "den.mid.c2", T.silu(r)))
    return h, skips


def _decode_from_mid(bundle: NetBundle, h: Tensor, skips, temb: Tensor) -> Tensor:
    h = T.silu(_conv(bundle, "den.up1", T.upsample_nearest(h, 2)))
    h = T.add(h, skips[1])
    h = _resblock(bundle, "den.u1.rb", h, _stage_time_bias(bundle, 1, temb))
    h = T.silu(_conv(bundle, "den.up0", T.upsample_nearest(h, 2)))
    h = T.add(h, skips[0])
    h = _resblock(bundle, "den.u0.rb", h, _stage_time_bias(bundle, 0, temb))
    return _conv(bundle, "den.out", T.silu(h))


def _temporal_mix(bundle: NetBundle, mids: list[Tensor]) -> list[Tensor]:
    """Self-attention over the frame axis at each bottleneck position.

    The output projection starts at zero, so this is an exact no-op at
    initialization and stage-1 checkpoints stay valid when it turns on.
    """
    c, height, width = mids[0].shape
    frames = len(mids)
    rows = [T.reshape(T.permute(m, (1, 2, 0)), (height * width, c)) for m in mids]
    mixed_rows: list[list[Tensor]] = [[] for _ in range(frames)]
    for pos in range(height * width):
        tokens = T.concat([T.slice_axis(r, 0, pos, pos + 1) for r in rows], axis=0)
        attended = T.self_attention(
            _ln(bundle, "den.temporal.ln", tokens),
            bundle.attention_weights("den.temporal"),
            heads=bundle.config.heads,
        )
        updated = T.add(tokens, attended)
        for f in range(frames):
            mixed_rows[f].append(T.slice_axis(updated, 0, f, f + 1))
    out = []
    for f in range(frames):
        stacked = T.concat(mixed_rows[f], axis=0)
        out.append(T.permute(T.reshape(stacked, (height, width, c)), (2, 0, 1)))
    return out


def denoise_predict(bundle: NetBundle, z_t: Tensor, t: int, cond: Conditions) -> Tensor:
    """Single-frame noise prediction."""
    temb = time_embedding(bundle, t)
    h, skips = _encode_to_mid(bundle, z_t, temb, cond)
    return _decode_from_mid(bundle, h, skips, temb)


def denoise_predict_clip(
    bundle: NetBundle,
    z_ts: list[Tensor],
    t: int,
    conds: list[Conditions],
    temporal: bool = True,
) -> list[Tensor]:
    """Clip-level prediction: per-frame passes joined by temporal attention."""
    if len(z_ts) != len(conds):
        raise ShapeError(f"{len(z_ts)} latents for {len(conds)} condition sets")
    temb = time_embedding(bundle, t)
    mids, skipss = [], []
    for z, cond in zip(z_ts, conds):
        h, skips = _encode_to_mid(bundle, z, temb, cond)
        mids.append(h)
        skipss.append(skips)
    if temporal and len(mids) > 1:
        mids = _temporal_mix(bundle, mids)
    return [_decode_from_mid(bundle, h, skips, temb) for h, skips in zip(mids, skipss)]
