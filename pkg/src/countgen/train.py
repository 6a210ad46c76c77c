"""Diffusion training: conditional denoising loss, gated counting
regularizer, tag dropout, and the optimization loop.

The counting regularizer reconstructs a clean estimate from the model's own
noise prediction, clamps it to the image range, and scores it with a frozen
counter; gradients flow back through the noise prediction so the denoiser
actually receives the counting signal.  The regularizer applies only to
samples whose timestep is below the threshold, where reconstructions are
sharp enough to count.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from . import corpus as corpus_mod
from .counter import CounterParams, predict_density_t
from .denoiser import (
    Arch,
    Conditioning,
    DenoiserParams,
    batched_forward,
    init_model,
    set_frozen_trunk,
)
from .errors import ConfigError
from .rng import make_rng
from .schedule import NoiseSchedule

DEFAULT_T_THRESHOLD_FRACTION = 0.4  # 400 of 1000
AUTO_LAMBDA_BATCHES = 100


@dataclass
class TrainConfig:
    lam: float | str = 1e-3  # counting-loss weight; "auto" calibrates from warm-up batches
    t_threshold: int | None = None  # None resolves to 0.4 * T
    learn_rate: float = 2e-5
    dropout_ratio: float = 0.2
    epochs: int = 100
    batch_size: int = 16
    seed: int = 0
    mode: str = "joint"  # "joint" | "frozen-base"
    gate_direction: str = "prose"  # "prose": count when t < threshold; "literal": t > threshold

    def __post_init__(self):
        if not 0 <= self.dropout_ratio <= 1:
            raise ConfigError(f"dropout_ratio must lie in [0, 1], got {self.dropout_ratio}")
        if self.mode not in ("joint", "frozen-base"):
            raise ConfigError(f"unknown mode '{self.mode}'")
        if self.gate_direction not in ("prose", "literal"):
            raise ConfigError(f"unknown gate_direction '{self.gate_direction}'")
        if isinstance(self.lam, str) and self.lam != "auto":
            raise ConfigError(f"lambda must be a number or 'auto', got '{self.lam}'")

    def resolved_threshold(self, T: int) -> int:
        thr = self.t_threshold
        if thr is None:
            thr = round(DEFAULT_T_THRESHOLD_FRACTION * T)
        if not 0 <= thr <= T:
            raise ConfigError(f"t_threshold {thr} outside 0..{T}")
        return thr

    def counting_gated(self, t: int, T: int) -> bool:
        thr = self.resolved_threshold(T)
        return t < thr if self.gate_direction == "prose" else t > thr


@dataclass
class TrainSample:
    """One diffusion training instance: clean image, timestep, noise, conditioning."""

    x0: np.ndarray
    t: int
    eps: np.ndarray
    cond: Conditioning


def tag_dropout(
    c: Conditioning, ratio: float, rng: np.random.Generator, null_tag: int = corpus_mod.NUM_TAGS
) -> Conditioning:
    """Replace the scene tag by the null tag with probability `ratio`.

    The density map is never dropped; the returned conditioning shares it.
    """
    if not 0 <= ratio <= 1:
        raise ConfigError(f"ratio must lie in [0, 1], got {ratio}")
    if rng.random() < ratio:
        return Conditioning(tag=null_tag, dmap=c.dmap)
    return c


def _coeffs(sched: NoiseSchedule, ts: torch.Tensor, dtype: torch.dtype):
    ab = torch.from_numpy(sched.alpha_bar)[ts - 1].to(dtype)
    return torch.sqrt(ab)[:, None, None, None], torch.sqrt(1.0 - ab)[:, None, None, None]


def _stack(arrays, dtype: torch.dtype) -> torch.Tensor:
    return torch.stack(
        [torch.from_numpy(np.ascontiguousarray(a)).to(dtype) for a in arrays]
    )[:, None]


def batch_losses_t(
    p: DenoiserParams,
    counter: CounterParams | None,
    samples: list[TrainSample],
    cfg: TrainConfig,
    sched: NoiseSchedule,
):
    """Per-sample denoising and (gated) counting terms, differentiable.

    Returns (loss_c, loss_count, gate): vectors over the batch, with the
    counting entries zero wherever the gate is off.
    """
    if not samples:
        raise ConfigError("empty batch")
    dtype = p.dtype
    x0 = _stack([s.x0 for s in samples], dtype)
    eps = _stack([s.eps for s in samples], dtype)
    dmap = _stack([s.cond.dmap.values for s in samples], dtype)
    ts = torch.tensor([s.t for s in samples], dtype=torch.long)
    tags = torch.tensor([s.cond.tag for s in samples], dtype=torch.long)
    c1, c2 = _coeffs(sched, ts, dtype)
    xt = c1 * x0 + c2 * eps
    eps_pred = batched_forward(p, xt, ts.to(dtype), tags, dmap)
    diff = eps - eps_pred
    loss_c = (diff * diff).sum(dim=(1, 2, 3))

    gate = torch.tensor([cfg.counting_gated(s.t, sched.T) for s in samples], dtype=torch.bool)
    loss_count = torch.zeros_like(loss_c)
    if counter is not None and bool(gate.any()):
        idx = gate.nonzero(as_tuple=True)[0]
        x0_hat = (xt[idx] - c2[idx] * eps_pred[idx]) / c1[idx]
        y_pred = predict_density_t(counter, torch.clamp(x0_hat, -1.0, 1.0))
        cdiff = dmap[idx] - y_pred
        loss_count = loss_count.index_copy(0, idx, (cdiff * cdiff).sum(dim=(1, 2, 3)))
    return loss_c, loss_count, gate


def combined_loss_t(
    p: DenoiserParams,
    counter: CounterParams | None,
    samples: list[TrainSample],
    cfg: TrainConfig,
    sched: NoiseSchedule,
    lam: float,
) -> torch.Tensor:
    loss_c, loss_count, _ = batch_losses_t(p, counter, samples, cfg, sched)
    return (loss_c + lam * loss_count).mean()


def _as_samples(x0, t, eps, c) -> list[TrainSample]:
    x0 = np.asarray(x0)
    if x0.ndim == 2:
        return [TrainSample(x0=x0, t=int(t), eps=np.asarray(eps), cond=c)]
    ts = [int(v) for v in (t if np.iterable(t) else [t] * x0.shape[0])]
    conds = list(c) if isinstance(c, (list, tuple)) else [c] * x0.shape[0]
    return [
        TrainSample(x0=x0[i], t=ts[i], eps=np.asarray(eps)[i], cond=conds[i])
        for i in range(x0.shape[0])
    ]


def conditional_loss(p: DenoiserParams, x0, t, eps, c, sched: NoiseSchedule) -> float:
    """Noise-prediction error: summed over pixels, mean over the batch."""
    samples = _as_samples(x0, t, eps, c)
    with torch.no_grad():
        loss_c, _, _ = batch_losses_t(p, None, samples, TrainConfig(), sched)
        return float(loss_c.mean().item())


def counting_regularizer(
    p: DenoiserParams,
    counter: CounterParams,
    x0: np.ndarray,
    t: int,
    eps: np.ndarray,
    c: Conditioning,
    y_gt,
    sched: NoiseSchedule,
) -> float:
    """Counting loss of the clamped clean estimate built from the model's
    own noise prediction (ungated; the gate lives in the combined loss)."""
    sample = TrainSample(x0=np.asarray(x0), t=int(t), eps=np.asarray(eps), cond=c)
    dtype = p.dtype
    with torch.no_grad():
        x0b = _stack([sample.x0], dtype)
        epsb = _stack([sample.eps], dtype)
        dmapb = _stack([c.dmap.values], dtype)
        ts = torch.tensor([sample.t], dtype=torch.long)
        tags = torch.tensor([c.tag], dtype=torch.long)
        c1, c2 = _coeffs(sched, ts, dtype)
        xt = c1 * x0b + c2 * epsb
        eps_pred = batched_forward(p, xt, ts.to(dtype), tags, dmapb)
        x0_hat = (xt - c2 * eps_pred) / c1
        y_pred = predict_density_t(counter, torch.clamp(x0_hat, -1.0, 1.0))
        target = _stack([np.asarray(y_gt.values, dtype=np.float64)], dtype)
        cdiff = target - y_pred
        return float((cdiff * cdiff).sum().item())


def combined_loss(
    p: DenoiserParams,
    counter: CounterParams,
    batch: list[TrainSample],
    cfg: TrainConfig,
    sched: NoiseSchedule,
) -> float:
    """Mean over the batch of L_c + lambda * L_count, gated per sample."""
    lam = cfg.lam if not isinstance(cfg.lam, str) else 1.0
    with torch.no_grad():
        return float(combined_loss_t(p, counter, batch, cfg, sched, lam).item())


def _draw_epoch_samples(
    scenes: list[corpus_mod.Scene],
    order: np.ndarray,
    cfg: TrainConfig,
    sched: NoiseSchedule,
    rng: np.random.Generator,
) -> list[TrainSample]:
    samples = []
    for i in order:
        scene = scenes[int(i)]
        t = int(rng.integers(1, sched.T + 1))
        eps = rng.standard_normal(scene.image.shape)
        cond = tag_dropout(Conditioning(tag=scene.tag, dmap=scene.dmap), cfg.dropout_ratio, rng)
        samples.append(TrainSample(x0=scene.image, t=t, eps=eps, cond=cond))
    return samples


def _calibrate_lambda(
    p: DenoiserParams,
    counter: CounterParams,
    scenes: list[corpus_mod.Scene],
    cfg: TrainConfig,
    sched: NoiseSchedule,
    rng: np.random.Generator,
) -> float:
    """lambda = mean(L_c) / mean(gated L_count) over warm-up batches, no updates."""
    sums = np.zeros(2)
    counts = np.zeros(2)
    with torch.no_grad():
        for _ in range(AUTO_LAMBDA_BATCHES):
            order = rng.integers(0, len(scenes), size=min(cfg.batch_size, len(scenes)))
            samples = _draw_epoch_samples(scenes, order, cfg, sched, rng)
            loss_c, loss_count, gate = batch_losses_t(p, counter, samples, cfg, sched)
            sums += (float(loss_c.sum()), float(loss_count.sum()))
            counts += (len(samples), float(gate.sum()))
    mean_c = sums[0] / max(counts[0], 1.0)
    mean_count = sums[1] / max(counts[1], 1.0)
    if mean_count <= 0:
        return 1.0
    return mean_c / mean_count


def train_diffusion(
    corpus: list[corpus_mod.Scene],
    counter: CounterParams,
    cfg: TrainConfig,
    sched: NoiseSchedule,
    arch: Arch = Arch(),
    telemetry_path: Path | None = None,
) -> tuple[DenoiserParams, list[dict]]:
    """Adam training loop; returns the model and per-epoch telemetry.

    In frozen-base mode the first half of the epochs pretrains the trunk
    alone (control projections stay at zero, so the trunk is effectively
    unconditional), then the trunk freezes and the control branch trains
    with the full gated objective.
    """
    if not corpus:
        raise ConfigError("empty training corpus")
    for scene in corpus:
        if scene.dmap.values.shape != scene.image.shape:
            raise ConfigError(f"scene {scene.scene_id}: density map shape mismatch")
    p = init_model(arch, seed=cfg.seed)
    rng = make_rng(cfg.seed)
    history: list[dict] = []

    if cfg.mode == "frozen-base":
        base_epochs = cfg.epochs // 2
        trunk_params = [
            q for n, q in p.net.named_parameters() if not n.startswith("ctrl_")
        ]
        _run_epochs(
            p, None, corpus, cfg, sched, rng, trunk_params, 0.0,
            range(base_epochs), history, telemetry_path,
        )
        set_frozen_trunk(p, True)
        lam = _resolve_lambda(p, counter, corpus, cfg, sched, rng)
        ctrl_params = [q for n, q in p.net.named_parameters() if n.startswith("ctrl_")]
        _run_epochs(
            p, counter, corpus, cfg, sched, rng, ctrl_params, lam,
            range(base_epochs, cfg.epochs), history, telemetry_path,
        )
    else:
        lam = _resolve_lambda(p, counter, corpus, cfg, sched, rng)
        _run_epochs(
            p, counter, corpus, cfg, sched, rng, list(p.net.parameters()), lam,
            range(cfg.epochs), history, telemetry_path,
        )
    p.net.eval()
    return p, history


def _resolve_lambda(p, counter, corpus, cfg, sched, rng) -> float:
    if cfg.lam == "auto":
        return _calibrate_lambda(p, counter, corpus, cfg, sched, rng)
    return float(cfg.lam)


def _run_epochs(
    p: DenoiserParams,
    counter: CounterParams | None,
    scenes: list[corpus_mod.Scene],
    cfg: TrainConfig,
    sched: NoiseSchedule,
    rng: np.random.Generator,
    params: list[torch.nn.Parameter],
    lam: float,
    epochs: range,
    history: list[dict],
    telemetry_path: Path | None,
):
    opt = torch.optim.Adam(params, lr=cfg.learn_rate)
    p.net.train()
    for epoch in epochs:
        order = rng.permutation(len(scenes))
        tot_c = tot_count = 0.0
        n_gated = 0
        for start in range(0, len(scenes), cfg.batch_size):
            batch_order = order[start : start + cfg.batch_size]
            samples = _draw_epoch_samples(scenes, batch_order, cfg, sched, rng)
            opt.zero_grad(set_to_none=True)
            loss_c, loss_count, gate = batch_losses_t(p, counter, samples, cfg, sched)
            loss = (loss_c + lam * loss_count).mean()
            loss.backward()
            opt.step()
            tot_c += float(loss_c.detach().sum())
            tot_count += float(loss_count.detach().sum())
            n_gated += int(gate.sum())
        entry = {
            "epoch": epoch,
            "loss_c": tot_c / len(scenes),
            "loss_count": tot_count / max(n_gated, 1),
            "loss_total": (tot_c + lam * tot_count) / len(scenes),
        }
        history.append(entry)
        if telemetry_path is not None:
            with open(telemetry_path, "a", encoding="utf-8") as fh:
                fh.write(json.dumps(entry) + "\n")
