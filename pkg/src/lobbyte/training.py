"""Next-byte training with per-stage ratio losses."""
from __future__ import annotations

import json
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from .dataset import RaggedBatch, Sampler
from .model.checkpoint import ConfigMismatch, load_archive, save_archive
from .model.chunking import DegenerateTarget, ratio_loss
from .model.config import VOCAB_SIZE

UNIFORM_CE = math.log(VOCAB_SIZE)


class ShapeMismatch(ValueError):
    pass


class NonFiniteLoss(FloatingPointError):
    def __init__(self, term, stage=None, value=None):
        where = f"{term}" + (f" at stage {stage}" if stage is not None else "")
        super().__init__(f"non-finite loss in {where}: {value}")
        self.term = term
        self.stage = stage


@dataclass
class TrainConfig:
    lr: float = 3e-4
    warmup_steps: int = 1000
    total_steps: int = 10000
    batch_size: int = 16
    weight_decay: float = 0.1
    grad_clip: float = 1.0
    betas: tuple[float, float] = (0.9, 0.95)
    eps: float = 1e-8
    ratio_weight: float = 0.01
    dropout: float = 0.0
    seed: int = 0
    checkpoint_every: int = 500
    log_every: int = 1

    def __post_init__(self):
        self.betas = tuple(self.betas)
        if not (self.lr > 0 and self.total_steps > 0 and self.batch_size > 0):
            raise ValueError("lr, total_steps and batch_size must be positive")
        if not 0 <= self.warmup_steps <= self.total_steps:
            raise ValueError("warmup_steps must lie in [0, total_steps]")
        if self.weight_decay < 0 or self.grad_clip <= 0 or self.eps <= 0 or self.ratio_weight < 0:
            raise ValueError("weight_decay, ratio_weight >= 0; grad_clip, eps > 0")

    @classmethod
    def desk(cls, **kw) -> "TrainConfig":
        d = dict(total_steps=2000, warmup_steps=100, batch_size=8, lr=1e-3, checkpoint_every=500)
        d.update(kw)
        return cls(**d)

    def to_dict(self):
        d = asdict(self)
        d["betas"] = list(self.betas)
        return d


@dataclass
class LossBreakdown:
    cross_entropy: torch.Tensor
    ratio_per_stage: list[torch.Tensor]
    total: torch.Tensor
    ratio_weight: float = 0.0

    def as_floats(self) -> dict:
        return {"ce": self.cross_entropy.item(), "ratio": [float(r.item()) for r in self.ratio_per_stage],
                "total": self.total.item()}


def total_loss(logits, targets, decisions, lam: float, n_per_stage) -> LossBreakdown:
    """Mean next-byte cross-entropy over every target byte plus lam * sum of ratio losses.

    Stages whose target is at most 1 contribute no ratio term.
    """
    if logits.ndim != 2 or logits.shape[-1] != VOCAB_SIZE:
        raise ShapeMismatch(f"logits must be (T, {VOCAB_SIZE}), got {tuple(logits.shape)}")
    if targets.shape != logits.shape[:1]:
        raise ShapeMismatch(f"{logits.shape[0]} logit rows for {targets.shape[0]} targets")
    if len(decisions) != len(n_per_stage):
        raise ShapeMismatch(f"{len(decisions)} boundary decisions for {len(n_per_stage)} ratio targets")
    ce = F.cross_entropy(logits, targets.long())
    ratios = []
    for dec, n in zip(decisions, n_per_stage):
        try:
            ratios.append(ratio_loss(dec.F, dec.G, n))
        except DegenerateTarget:
            ratios.append(torch.zeros((), dtype=ce.dtype))
    total = ce + lam * sum(ratios) if ratios else ce
    return LossBreakdown(ce, ratios, total, lam)


def lr_schedule(step: int, cfg: TrainConfig) -> float:
    """Linear warmup from 0 to lr, then cosine decay to 0 at total_steps."""
    if step < cfg.warmup_steps:
        return cfg.lr * step / cfg.warmup_steps
    span = cfg.total_steps - cfg.warmup_steps
    if span <= 0:
        return cfg.lr if step <= cfg.total_steps else 0.0
    frac = min(max((step - cfg.warmup_steps) / span, 0.0), 1.0)
    return cfg.lr * 0.5 * (1.0 + math.cos(math.pi * frac))


def clip_grad_norm(params, max_norm: float) -> float:
    """Scale gradients in place so their global L2 norm is at most max_norm; returns the pre-clip norm."""
    grads = [p.grad for p in params if p.grad is not None]
    if not grads:
        return 0.0
    norm = torch.sqrt(sum((g.detach().double() ** 2).sum() for g in grads)).item()
    if norm > max_norm:
        scale = max_norm / norm
        for g in grads:
            g.mul_(scale)
    return norm


def _decays(name: str, p) -> bool:
    return p.ndim >= 2 and name.endswith("weight") and "conv_weight" not in name


def make_optimizer(model, cfg: TrainConfig) -> torch.optim.AdamW:
    decay, no_decay = [], []
    for name, p in model.named_parameters():
        (decay if _decays(name, p) else no_decay).append(p)
    groups = [{"params": decay, "weight_decay": cfg.weight_decay},
              {"params": no_decay, "weight_decay": 0.0}]
    return torch.optim.AdamW(groups, lr=cfg.lr, betas=cfg.betas, eps=cfg.eps, foreach=False)


@dataclass
class TrainState:
    model: torch.nn.Module
    optimizer: torch.optim.Optimizer
    cfg: TrainConfig
    step: int = 0
    sampler_state: dict | None = None


def new_state(model, cfg: TrainConfig) -> TrainState:
    return TrainState(model, make_optimizer(model, cfg), cfg)


def _check_finite(loss: LossBreakdown):
    if not torch.isfinite(loss.cross_entropy):
        raise NonFiniteLoss("cross_entropy", value=loss.cross_entropy.item())
    for i, r in enumerate(loss.ratio_per_stage):
        if not torch.isfinite(r):
            raise NonFiniteLoss("ratio", stage=i, value=r.item())


def train_step(state: TrainState, batch: RaggedBatch) -> tuple[TrainState, LossBreakdown, dict]:
    model, opt, cfg = state.model, state.optimizer, state.cfg
    model.train()
    x, y, seg = batch.packed()
    out = model(x, seg)
    loss = total_loss(out.logits, y, out.decisions, cfg.ratio_weight, model.cfg.ratio_targets)
    _check_finite(loss)
    lr = lr_schedule(state.step, cfg)
    for g in opt.param_groups:
        g["lr"] = lr
    opt.zero_grad(set_to_none=False)
    loss.total.backward()
    gnorm = clip_grad_norm(list(model.parameters()), cfg.grad_clip)
    if not math.isfinite(gnorm):
        raise NonFiniteLoss("gradient", value=gnorm)
    opt.step()
    state.step += 1
    info = {"lr": lr, "grad_norm": gnorm, "ratios": out.stats.ratios}
    return state, loss, info


# checkpoints ------------------------------------------------------------------

def save_train_state(path, state: TrainState, sampler: Sampler | None = None):
    model, opt = state.model, state.optimizer
    tensors = dict(model.state_dict())
    names = {id(p): n for n, p in model.named_parameters()}
    for group in opt.param_groups:
        for p in group["params"]:
            st = opt.state.get(p, {})
            for slot, v in st.items():
                tensors[f"optim/{slot}/{names[id(p)]}"] = v if torch.is_tensor(v) else torch.tensor(v)
    extra = {"step": state.step, "train_config": state.cfg.to_dict(),
             "sampler_state": sampler.get_state() if sampler is not None else state.sampler_state,
             "torch_rng": torch.random.get_rng_state().tolist()}
    save_archive(path, tensors, model.cfg, extra)


def load_train_state(path, model, cfg: TrainConfig) -> TrainState:
    tensors, mcfg, extra = load_archive(path)
    if mcfg.to_dict() != model.cfg.to_dict():
        raise ConfigMismatch("checkpoint was written for a different model config")
    model.load_state_dict({k: v for k, v in tensors.items() if not k.startswith("optim/")})
    state = new_state(model, cfg)
    opt = state.optimizer
    for n, p in model.named_parameters():
        slots = {k.split("/")[1]: v for k, v in tensors.items()
                 if k.startswith("optim/") and k.split("/", 2)[2] == n}
        if slots:
            opt.state[p] = {k: v.clone() for k, v in slots.items()}
    state.step = int(extra["step"])
    state.sampler_state = extra.get("sampler_state")
    torch.random.set_rng_state(torch.tensor(extra["torch_rng"], dtype=torch.uint8))
    return state


def train_loop(cfg: TrainConfig, sampler: Sampler, model, out_dir=None, resume=None,
               max_steps: int | None = None, log=None) -> tuple[TrainState, list[dict]]:
    """Run until ``total_steps`` (or ``max_steps`` more steps) and return the final state and records.

    When ``out_dir`` is set, records are appended to ``metrics.jsonl`` and
    checkpoints ``step_<k>.ckpt`` plus ``last.ckpt`` are written every
    ``checkpoint_every`` steps and at the end.
    """
    torch.manual_seed(cfg.seed)
    if resume is not None:
        state = load_train_state(resume, model, cfg)
        if state.sampler_state is not None:
            sampler.set_state(state.sampler_state)
    else:
        state = new_state(model, cfg)
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    log_f = open(out / "metrics.jsonl", "a") if out is not None else None
    records = []
    stop = cfg.total_steps if max_steps is None else min(cfg.total_steps, state.step + max_steps)
    try:
        while state.step < stop:
            t0 = time.perf_counter()
            batch = sampler.batch(cfg.batch_size)
            state, loss, info = train_step(state, batch)
            rec = {"step": state.step, "lr": info["lr"], **loss.as_floats(),
                   "realized_ratios": info["ratios"], "grad_norm": info["grad_norm"],
                   "bytes": batch.total_bytes, "seconds": time.perf_counter() - t0}
            records.append(rec)
            if log_f is not None and state.step % cfg.log_every == 0:
                log_f.write(json.dumps(rec) + "\n")
                log_f.flush()
            if log is not None:
                log(rec)
            if out is not None and (state.step % cfg.checkpoint_every == 0 or state.step == stop):
                save_train_state(out / f"step_{state.step}.ckpt", state, sampler)
                save_train_state(out / "last.ckpt", state, sampler)
    finally:
        if log_f is not None:
            log_f.close()
    state.sampler_state = sampler.get_state()
    return state, records
