"""Conditional noise-prediction network.

A miniature U-shaped encoder-decoder predicts the noise in x_t given the
timestep, a discrete scene tag (the text-prompt stand-in), and a density
map fed through a separate control branch.  The control branch mirrors the
encoder and is fused into it through zero-initialized 1x1 projections, so a
freshly initialized model is functionally identical to its unconditional
trunk for every conditioning input.

Checkpoint format: magic "DNSR1", version byte, u32-LE length + JSON arch
descriptor, then every state-dict tensor as float32-LE in state-dict order.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, field, asdict

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .annotations import DensityMap
from .errors import ConfigError, FormatError, ShapeError
from .rng import make_rng

_MAGIC = b"DNSR1"
_VERSION = 1

DEFAULT_DMAP_PEAK = 1.0 / (8.0 * math.pi)  # single-dot kernel peak at variance 4


@dataclass(frozen=True)
class Arch:
    """Width/depth descriptor; widths[:-1] are encoder levels, widths[-1] the middle."""

    widths: tuple[int, ...] = (32, 64, 128)
    blocks: int = 2
    emb_dim: int = 64
    groups: int = 8
    tags: int = 4  # real scene tags; index `tags` is the null tag
    dmap_peak: float = DEFAULT_DMAP_PEAK

    def __post_init__(self):
        if len(self.widths) < 2:
            raise ConfigError("need at least one encoder level and a middle width")
        if self.blocks < 1 or self.emb_dim < 2 or self.emb_dim % 2:
            raise ConfigError(f"bad blocks/emb_dim: {self.blocks}, {self.emb_dim}")
        if any(w % self.groups for w in self.widths):
            raise ConfigError(f"groups={self.groups} must divide all widths {self.widths}")
        if self.tags < 1:
            raise ConfigError("need at least one scene tag")

    @property
    def levels(self) -> int:
        return len(self.widths) - 1

    @property
    def null_tag(self) -> int:
        return self.tags

    @property
    def divisor(self) -> int:
        return 1 << self.levels

    @property
    def dmap_scale(self) -> float:
        return 1.0 / max(self.dmap_peak, 1e-8)


@dataclass
class Conditioning:
    """Scene tag plus the density map matched to the image resolution."""

    tag: int
    dmap: DensityMap


def _time_embedding(t: torch.Tensor, dim: int) -> torch.Tensor:
    half = dim // 2
    freqs = torch.exp(
        torch.arange(half, dtype=t.dtype, device=t.device)
        * (-math.log(10000.0) / max(half - 1, 1))
    )
    args = t[:, None] * freqs[None, :]
    return torch.cat([torch.sin(args), torch.cos(args)], dim=1)


class _ResBlock(nn.Module):
    """GroupNorm/SiLU conv pair with the conditioning embedding added between.

    The second conv starts at zero so every block is the identity at
    initialization; residual branches open up during training.
    """

    def __init__(self, ch_in: int, ch_out: int, emb_dim: int, groups: int):
        super().__init__()
        self.norm1 = nn.GroupNorm(groups, ch_in)
        self.conv1 = nn.Conv2d(ch_in, ch_out, 3, padding=1)
        self.emb_proj = nn.Linear(emb_dim, ch_out)
        self.norm2 = nn.GroupNorm(groups, ch_out)
        self.conv2 = nn.Conv2d(ch_out, ch_out, 3, padding=1)
        self.skip = nn.Conv2d(ch_in, ch_out, 1) if ch_in != ch_out else nn.Identity()

    def forward(self, x, emb):
        h = self.conv1(F.silu(self.norm1(x)))
        h = h + self.emb_proj(F.silu(emb))[:, :, None, None]
        h = self.conv2(F.silu(self.norm2(h)))
        return self.skip(x) + h


class _DenoiserNet(nn.Module):
    def __init__(self, arch: Arch):
        super().__init__()
        w = arch.widths
        e, g, b = arch.emb_dim, arch.groups, arch.blocks
        self.arch = arch

        self.time_mlp = nn.Sequential(nn.Linear(e, e), nn.SiLU(), nn.Linear(e, e))
        self.tag_embed = nn.Embedding(arch.tags + 1, e, padding_idx=arch.null_tag)

        self.stem = nn.Conv2d(1, w[0], 3, padding=1)
        self.enc = nn.ModuleList(
            nn.ModuleList(_ResBlock(w[i], w[i], e, g) for _ in range(b))
            for i in range(arch.levels)
        )
        self.downs = nn.ModuleList(
            nn.Conv2d(w[i], w[i + 1], 3, stride=2, padding=1) for i in range(arch.levels)
        )
        self.mid = nn.ModuleList(_ResBlock(w[-1], w[-1], e, g) for _ in range(b))
        self.ups = nn.ModuleList(
            nn.Conv2d(w[i + 1], w[i], 3, padding=1) for i in reversed(range(arch.levels))
        )
        self.dec = nn.ModuleList(
            nn.ModuleList(
                [_ResBlock(2 * w[i], w[i], e, g)]
                + [_ResBlock(w[i], w[i], e, g) for _ in range(b - 1)]
            )
            for i in reversed(range(arch.levels))
        )
        self.head_norm = nn.GroupNorm(g, w[0])
        self.head_conv = nn.Conv2d(w[0], 1, 3, padding=1)

        # control branch: mirrors the encoder on the (scaled) density map and
        # feeds each resolution back through zero-initialized projections
        self.ctrl_stem = nn.Conv2d(1, w[0], 3, padding=1)
        self.ctrl_enc = nn.ModuleList(
            nn.ModuleList(_ResBlock(w[i], w[i], e, g) for _ in range(b))
            for i in range(arch.levels)
        )
        self.ctrl_downs = nn.ModuleList(
            nn.Conv2d(w[i], w[i + 1], 3, stride=2, padding=1) for i in range(arch.levels)
        )
        self.ctrl_proj = nn.ModuleList(
            [nn.Conv2d(w[i], w[i], 1) for i in range(arch.levels)]
            + [nn.Conv2d(w[-1], w[-1], 1)]
        )

    def conditioning_embedding(self, t: torch.Tensor, tag: torch.Tensor) -> torch.Tensor:
        return self.time_mlp(_time_embedding(t, self.arch.emb_dim)) + self.tag_embed(tag)

    def forward(self, x, emb, dmap):
        c = self.ctrl_stem(dmap * self.arch.dmap_scale)
        ctrl_feats = []
        for i, level in enumerate(self.ctrl_enc):
            for blk in level:
                c = blk(c, emb)
            ctrl_feats.append(c)
            c = self.ctrl_downs[i](c)
        ctrl_feats.append(c)

        h = self.stem(x)
        skips = []
        for i, level in enumerate(self.enc):
            for blk in level:
                h = blk(h, emb)
            h = h + self.ctrl_proj[i](ctrl_feats[i])
            skips.append(h)
            h = self.downs[i](h)
        for blk in self.mid:
            h = blk(h, emb)
        h = h + self.ctrl_proj[-1](ctrl_feats[-1])
        for j, level in enumerate(self.dec):
            h = self.ups[j](F.interpolate(h, scale_factor=2, mode="nearest"))
            h = torch.cat([h, skips[len(skips) - 1 - j]], dim=1)
            for blk in level:
                h = blk(h, emb)
        return self.head_conv(F.silu(self.head_norm(h)))


@dataclass
class DenoiserParams:
    """Parameter handle: the torch module plus its descriptor and freeze state."""

    net: _DenoiserNet
    arch: Arch
    frozen_trunk: bool = field(default=False)

    @property
    def dtype(self) -> torch.dtype:
        return next(self.net.parameters()).dtype

    def parameter_count(self) -> int:
        return sum(p.numel() for p in self.net.parameters())

    def trunk_parameter_names(self) -> list[str]:
        return [n for n, _ in self.net.named_parameters() if not n.startswith("ctrl_")]

    def control_parameter_names(self) -> list[str]:
        return [n for n, _ in self.net.named_parameters() if n.startswith("ctrl_")]


def init_model(arch: Arch = Arch(), seed: int = 0, dtype: str = "float32") -> DenoiserParams:
    """Deterministically initialize a model; fusion projections start at zero."""
    net = _DenoiserNet(arch)
    rng = make_rng(seed)
    for module in net.modules():
        if isinstance(module, nn.Conv2d):
            fan_in = module.in_channels * module.kernel_size[0] * module.kernel_size[1]
            _fill_normal(module.weight, rng, 1.0 / math.sqrt(fan_in))
            nn.init.zeros_(module.bias)
        elif isinstance(module, nn.Linear):
            _fill_normal(module.weight, rng, 1.0 / math.sqrt(module.in_features))
            nn.init.zeros_(module.bias)
        elif isinstance(module, nn.Embedding):
            _fill_normal(module.weight, rng, 0.1)
            with torch.no_grad():
                module.weight[module.padding_idx].zero_()
        elif isinstance(module, nn.GroupNorm):
            nn.init.ones_(module.weight)
            nn.init.zeros_(module.bias)
    for module in net.modules():
        if isinstance(module, _ResBlock):
            nn.init.zeros_(module.conv2.weight)
    for proj in net.ctrl_proj:
        nn.init.zeros_(proj.weight)
        nn.init.zeros_(proj.bias)
    net.to(_torch_dtype(dtype))
    net.eval()
    return DenoiserParams(net=net, arch=arch)


def _fill_normal(param: torch.Tensor, rng, std: float):
    with torch.no_grad():
        values = rng.standard_normal(tuple(param.shape)) * std
        param.copy_(torch.from_numpy(values).to(param.dtype))


def _torch_dtype(name: str) -> torch.dtype:
    if name == "float32":
        return torch.float32
    if name == "float64":
        return torch.float64
    raise ConfigError(f"unsupported dtype '{name}'")


def set_frozen_trunk(p: DenoiserParams, frozen: bool):
    """Frozen-base mode: only the control branch receives gradients."""
    p.frozen_trunk = frozen
    for name, param in p.net.named_parameters():
        param.requires_grad_(not (frozen and not name.startswith("ctrl_")))


def _check_image(p: DenoiserParams, xt: np.ndarray) -> np.ndarray:
    xt = np.asarray(xt)
    if xt.ndim != 2:
        raise ShapeError(f"expected a 2-D image, got shape {xt.shape}")
    d = p.arch.divisor
    if xt.shape[0] % d or xt.shape[1] % d:
        raise ShapeError(f"image dims {xt.shape} must be divisible by {d}")
    return xt


def _check_conditioning(p: DenoiserParams, xt: np.ndarray, c: Conditioning):
    if not 0 <= c.tag <= p.arch.null_tag:
        raise ConfigError(f"tag {c.tag} outside 0..{p.arch.null_tag}")
    if c.dmap.values.shape != xt.shape:
        raise ShapeError(f"dmap shape {c.dmap.values.shape} != image shape {xt.shape}")


def batched_forward(
    p: DenoiserParams, xt: torch.Tensor, t: torch.Tensor, tag: torch.Tensor, dmap: torch.Tensor
) -> torch.Tensor:
    """Differentiable batched prediction; (B,1,H,W) tensors in, same out."""
    emb = p.net.conditioning_embedding(t.to(p.dtype), tag)
    return p.net(xt, emb, dmap)


def predict_eps(p: DenoiserParams, xt: np.ndarray, t: int, c: Conditioning) -> np.ndarray:
    """Noise estimate for a single image; deterministic for fixed inputs."""
    xt = _check_image(p, xt)
    if t < 1:
        raise ConfigError(f"timestep {t} must be >= 1")
    _check_conditioning(p, xt, c)
    with torch.no_grad():
        xb = torch.from_numpy(np.ascontiguousarray(xt)).to(p.dtype)[None, None]
        dm = torch.from_numpy(np.ascontiguousarray(c.dmap.values)).to(p.dtype)[None, None]
        tb = torch.tensor([float(t)], dtype=p.dtype)
        tagb = torch.tensor([c.tag], dtype=torch.long)
        out = batched_forward(p, xb, tb, tagb, dm)
    return out[0, 0].numpy()


def loss_gradients(p: DenoiserParams, batch, loss_definition):
    """Evaluate a scalar loss and its gradient for every trainable parameter.

    `loss_definition(p, batch)` must build a torch scalar from the model.
    Frozen parameters are reported with exactly-zero gradients.
    """
    p.net.zero_grad(set_to_none=True)
    loss = loss_definition(p, batch)
    loss.backward()
    grads = {}
    for name, param in p.net.named_parameters():
        if param.grad is None:
            grads[name] = np.zeros(tuple(param.shape), dtype=np.float64)
        else:
            grads[name] = param.grad.detach().numpy().astype(np.float64, copy=True)
    p.net.zero_grad(set_to_none=True)
    return float(loss.item()), grads


def input_gradient(
    p: DenoiserParams, xt: np.ndarray, t: int, c: Conditioning, scalar_loss_definition
) -> np.ndarray:
    """Gradient of `scalar_loss_definition(xt_tensor, eps_tensor)` w.r.t. xt."""
    xt = _check_image(p, xt)
    _check_conditioning(p, xt, c)
    xb = torch.from_numpy(np.ascontiguousarray(xt)).to(p.dtype)[None, None].requires_grad_(True)
    dm = torch.from_numpy(np.ascontiguousarray(c.dmap.values)).to(p.dtype)[None, None]
    tb = torch.tensor([float(t)], dtype=p.dtype)
    tagb = torch.tensor([c.tag], dtype=torch.long)
    eps = batched_forward(p, xb, tb, tagb, dm)
    loss = scalar_loss_definition(xb[0, 0], eps[0, 0])
    (grad,) = torch.autograd.grad(loss, xb, allow_unused=True)
    if grad is None:
        return np.zeros(xt.shape, dtype=np.float64)
    return grad[0, 0].detach().numpy().astype(np.float64)


def save_params(p: DenoiserParams) -> bytes:
    """Serialize to the DNSR1 checkpoint format (parameters as float32-LE)."""
    arch_json = json.dumps(asdict(p.arch), sort_keys=True).encode("utf-8")
    out = [_MAGIC, struct.pack("<B", _VERSION), struct.pack("<I", len(arch_json)), arch_json]
    for _, tensor in p.net.state_dict().items():
        out.append(tensor.detach().to(torch.float32).numpy().astype("<f4").tobytes(order="C"))
    return b"".join(out)


def load_params(payload: bytes) -> DenoiserParams:
    arch, offset = _read_header(payload, _MAGIC, _VERSION)
    p = init_model(Arch(**arch), seed=0)
    offset = _load_state(p.net, payload, offset)
    if offset != len(payload):
        raise FormatError(f"{len(payload) - offset} trailing bytes in checkpoint")
    return p


def _read_header(payload: bytes, magic: bytes, version: int):
    if len(payload) < len(magic) + 5:
        raise FormatError(f"payload too short ({len(payload)} bytes)")
    if payload[: len(magic)] != magic:
        raise FormatError(f"bad magic {payload[: len(magic)]!r}")
    pos = len(magic)
    (ver,) = struct.unpack_from("<B", payload, pos)
    if ver != version:
        raise FormatError(f"unsupported version {ver}")
    (n,) = struct.unpack_from("<I", payload, pos + 1)
    pos += 5
    if len(payload) < pos + n:
        raise FormatError("truncated arch descriptor")
    try:
        arch = json.loads(payload[pos : pos + n].decode("utf-8"))
        if isinstance(arch.get("widths"), list):
            arch["widths"] = tuple(arch["widths"])
    except (ValueError, UnicodeDecodeError) as e:
        raise FormatError(f"corrupt arch descriptor: {e}") from None
    return arch, pos + n


def _load_state(net: nn.Module, payload: bytes, offset: int) -> int:
    state = net.state_dict()
    for key, tensor in state.items():
        nbytes = tensor.numel() * 4
        if offset + nbytes > len(payload):
            raise FormatError(f"truncated payload at tensor '{key}'")
        values = np.frombuffer(payload, dtype="<f4", count=tensor.numel(), offset=offset)
        state[key] = torch.from_numpy(values.copy()).reshape(tuple(tensor.shape))
        offset += nbytes
    net.load_state_dict(state)
    return offset
