"""Counting model: density regression from clean images plus MAE/MSE metrics.

A small stride-1 convolutional regressor predicts a full-resolution density
map whose sum is the count estimate.  It supplies the counting loss during
diffusion training, input gradients for guided sampling, and the evaluation
metrics.  Note the MSE here follows the counting-benchmark convention: the
ROOT of the mean squared count error.
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
from .denoiser import _read_header, _load_state, _torch_dtype
from .errors import ConfigError, FormatError, ShapeError
from .rng import make_rng

_MAGIC = b"CNTR1"
_VERSION = 1

# strata scaled from the benchmark crowd ranges to the toy count range
STRATA = ((0, 10), (10, 20), (20, None))


@dataclass(frozen=True)
class CounterArch:
    widths: tuple[int, ...] = (16, 32, 32, 16, 1)

    def __post_init__(self):
        if len(self.widths) < 2 or self.widths[-1] != 1:
            raise ConfigError(f"counter widths must end in 1, got {self.widths}")


class _CounterNet(nn.Module):
    """Stride-1 conv stack, SiLU between layers, output clipped at 0."""

    def __init__(self, arch: CounterArch):
        super().__init__()
        chans = (1,) + arch.widths
        self.convs = nn.ModuleList(
            nn.Conv2d(chans[i], chans[i + 1], 3, padding=1) for i in range(len(arch.widths))
        )

    def forward(self, x):
        h = x
        for conv in self.convs[:-1]:
            h = F.silu(conv(h))
        return torch.clamp(self.convs[-1](h), min=0.0)


@dataclass
class CounterParams:
    net: _CounterNet
    arch: CounterArch

    @property
    def dtype(self) -> torch.dtype:
        return next(self.net.parameters()).dtype

    def parameter_count(self) -> int:
        return sum(p.numel() for p in self.net.parameters())


@dataclass
class Metrics:
    mae: float
    mse: float
    per_stratum: list[dict] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {"mae": self.mae, "mse": self.mse, "strata": self.per_stratum}


def init_counter(
    arch: CounterArch = CounterArch(),
    seed: int = 0,
    dtype: str = "float32",
    zero_head: bool = True,
) -> CounterParams:
    """Fresh counter; with the default zero head it predicts all-zero maps.

    Training passes zero_head=False: a zero head sits exactly on the output
    clip's dead point and would never receive gradient.
    """
    net = _CounterNet(arch)
    rng = make_rng(seed)
    for conv in net.convs:
        fan_in = conv.in_channels * 9
        values = rng.standard_normal(tuple(conv.weight.shape)) / math.sqrt(fan_in)
        with torch.no_grad():
            conv.weight.copy_(torch.from_numpy(values).to(conv.weight.dtype))
        nn.init.zeros_(conv.bias)
    if zero_head:
        nn.init.zeros_(net.convs[-1].weight)
    net.to(_torch_dtype(dtype))
    net.eval()
    return CounterParams(net=net, arch=arch)


def _to_batch(p: CounterParams, img: np.ndarray) -> torch.Tensor:
    img = np.asarray(img)
    if img.ndim != 2:
        raise ShapeError(f"expected a 2-D image, got shape {img.shape}")
    return torch.from_numpy(np.ascontiguousarray(img)).to(p.dtype)[None, None]


def predict_density_t(p: CounterParams, img: torch.Tensor) -> torch.Tensor:
    """Differentiable batched path; (B,1,H,W) in, non-negative (B,1,H,W) out."""
    return p.net(img)


def predict_density(p: CounterParams, img: np.ndarray) -> DensityMap:
    with torch.no_grad():
        out = predict_density_t(p, _to_batch(p, img))
    return DensityMap(values=out[0, 0].numpy().astype(np.float64))


def count(p: CounterParams, img: np.ndarray) -> float:
    return float(predict_density(p, img).values.sum())


def counting_loss_t(p: CounterParams, img: torch.Tensor, y_gt: torch.Tensor) -> torch.Tensor:
    """Squared Frobenius distance between target and predicted density maps,
    summed over pixels, mean over the batch."""
    diff = y_gt - predict_density_t(p, img)
    return (diff * diff).sum(dim=(1, 2, 3)).mean()


def counting_loss(p: CounterParams, img: np.ndarray, y_gt: DensityMap) -> float:
    if y_gt.values.shape != np.asarray(img).shape:
        raise ShapeError(f"target shape {y_gt.values.shape} != image shape {np.asarray(img).shape}")
    with torch.no_grad():
        target = torch.from_numpy(np.ascontiguousarray(y_gt.values)).to(p.dtype)[None, None]
        return float(counting_loss_t(p, _to_batch(p, img), target).item())


def counting_input_gradient(p: CounterParams, img: np.ndarray, y_gt: DensityMap) -> np.ndarray:
    """Gradient of the counting loss with respect to the input image."""
    xb = _to_batch(p, img).requires_grad_(True)
    target = torch.from_numpy(np.ascontiguousarray(y_gt.values)).to(p.dtype)[None, None]
    loss = counting_loss_t(p, xb, target)
    (grad,) = torch.autograd.grad(loss, xb)
    return grad[0, 0].detach().numpy().astype(np.float64)


@dataclass
class CounterTrainConfig:
    epochs: int = 60
    batch_size: int = 16
    learn_rate: float = 2e-3
    seed: int = 0
    arch: CounterArch = field(default_factory=CounterArch)


def train_counter(corpus: list[tuple[np.ndarray, DensityMap]], config: CounterTrainConfig) -> CounterParams:
    """Adam regression of density maps from clean images; deterministic per seed."""
    if not corpus:
        raise ConfigError("empty training corpus")
    p = init_counter(config.arch, seed=config.seed, zero_head=False)
    images = torch.stack(
        [torch.from_numpy(np.ascontiguousarray(img)).to(torch.float32) for img, _ in corpus]
    )[:, None]
    targets = torch.stack(
        [torch.from_numpy(np.ascontiguousarray(d.values)).to(torch.float32) for _, d in corpus]
    )[:, None]
    rng = make_rng(config.seed)
    opt = torch.optim.Adam(p.net.parameters(), lr=config.learn_rate)
    p.net.train()
    for _ in range(config.epochs):
        order = rng.permutation(len(corpus))
        for start in range(0, len(corpus), config.batch_size):
            idx = torch.from_numpy(order[start : start + config.batch_size].copy())
            opt.zero_grad(set_to_none=True)
            loss = counting_loss_t(p, images[idx], targets[idx])
            loss.backward()
            opt.step()
    p.net.eval()
    return p


def train_counter_on_stream(
    batches, config: CounterTrainConfig, steps: int
) -> CounterParams:
    """Train from an iterator of (images, targets) float32 numpy batches."""
    p = init_counter(config.arch, seed=config.seed, zero_head=False)
    opt = torch.optim.Adam(p.net.parameters(), lr=config.learn_rate)
    p.net.train()
    for _ in range(steps):
        imgs, targets = next(batches)
        xb = torch.from_numpy(imgs).to(torch.float32)[:, None]
        yb = torch.from_numpy(targets).to(torch.float32)[:, None]
        opt.zero_grad(set_to_none=True)
        loss = counting_loss_t(p, xb, yb)
        loss.backward()
        opt.step()
    p.net.eval()
    return p


def metrics_from_counts(predicted, truth) -> Metrics:
    """MAE and root-mean-square count error, overall and per stratum."""
    predicted = np.asarray(predicted, dtype=np.float64)
    truth = np.asarray(truth, dtype=np.float64)
    if predicted.shape != truth.shape or predicted.ndim != 1 or not predicted.size:
        raise ConfigError(f"need matching nonempty count vectors, got {predicted.shape}, {truth.shape}")
    errors = predicted - truth
    per_stratum = []
    for lo, hi in STRATA:
        mask = (truth >= lo) if hi is None else (truth >= lo) & (truth < hi)
        label = f"n>={lo}" if hi is None else f"{lo}<=n<{hi}"
        sel = errors[mask]
        per_stratum.append(
            {
                "range": label,
                "n_scenes": int(mask.sum()),
                "mae": float(np.abs(sel).mean()) if sel.size else 0.0,
                "mse": float(np.sqrt((sel * sel).mean())) if sel.size else 0.0,
            }
        )
    return Metrics(
        mae=float(np.abs(errors).mean()),
        mse=float(np.sqrt((errors * errors).mean())),
        per_stratum=per_stratum,
    )


def evaluate(p: CounterParams, testset: list[tuple[np.ndarray, int]]) -> Metrics:
    """Scene-level count metrics with the per-stratum breakdown."""
    if not testset:
        raise ConfigError("empty test set")
    predicted = [count(p, img) for img, _ in testset]
    truth = [n for _, n in testset]
    return metrics_from_counts(predicted, truth)


def save_counter(p: CounterParams) -> bytes:
    arch_json = json.dumps(asdict(p.arch), sort_keys=True).encode("utf-8")
    out = [_MAGIC, struct.pack("<B", _VERSION), struct.pack("<I", len(arch_json)), arch_json]
    for _, tensor in p.net.state_dict().items():
        out.append(tensor.detach().to(torch.float32).numpy().astype("<f4").tobytes(order="C"))
    return b"".join(out)


def load_counter(payload: bytes) -> CounterParams:
    arch, offset = _read_header(payload, _MAGIC, _VERSION)
    p = init_counter(CounterArch(**arch), seed=0)
    offset = _load_state(p.net, payload, offset)
    if offset != len(payload):
        raise FormatError(f"{len(payload) - offset} trailing bytes in checkpoint")
    return p
