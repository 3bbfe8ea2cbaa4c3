"""Training loop: Adam with warmup-cosine schedule and global-norm
clipping, deterministic given a seed, with a plain-text loss log."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .checkpoint import save_checkpoint
from .decode import prefill
from .errors import DivergenceError, NumericError
from .model import ModelConfig, forward, init_parameters
from .tasks import TaskSpec, cross_entropy_loss, eval_accuracy
from .tensor import Rng, global_grad_norm


@dataclass
class TrainConfig:
    steps: int = 200
    batch_size: int = 32
    lr: float = 3e-3
    warmup_steps: int = 20
    clip_norm: float = 1.0
    beta1: float = 0.9
    beta2: float = 0.95
    eps: float = 1e-8
    seed: int = 0
    log_path: str | None = None         # loss csv
    checkpoint_path: str | None = None


class Adam:
    """Standard Adam with bias correction; tensors without a gradient are
    left untouched."""

    def __init__(self, tensors: dict, beta1: float = 0.9, beta2: float = 0.95,
                 eps: float = 1e-8):
        self.tensors = dict(tensors)
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = {k: np.zeros_like(t.data) for k, t in self.tensors.items()}
        self.v = {k: np.zeros_like(t.data) for k, t in self.tensors.items()}
        self.t = 0

    def zero_grad(self) -> None:
        for t in self.tensors.values():
            t.grad = None

    def step(self, lr: float) -> None:
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for k, t in self.tensors.items():
            if t.grad is None:
                continue
            g = t.grad
            self.m[k] = self.beta1 * self.m[k] + (1.0 - self.beta1) * g
            self.v[k] = self.beta2 * self.v[k] + (1.0 - self.beta2) * (g * g)
            t.data -= lr * (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + self.eps)


def clip_global_norm(tensors, max_norm: float) -> float:
    """Scale all gradients so their joint norm is at most max_norm."""
    norm = global_grad_norm(tensors)
    if max_norm > 0 and norm > max_norm:
        scale = max_norm / norm
        for t in tensors:
            if t.grad is not None:
                t.grad *= scale
    return norm


def lr_at(step: int, cfg: TrainConfig) -> float:
    """Linear warmup to cfg.lr, then cosine decay to zero."""
    if step < cfg.warmup_steps:
        return cfg.lr * (step + 1) / cfg.warmup_steps
    span = max(1, cfg.steps - cfg.warmup_steps)
    progress = (step - cfg.warmup_steps) / span
    return 0.5 * cfg.lr * (1.0 + math.cos(math.pi * progress))


@dataclass
class TrainResult:
    losses: list = field(default_factory=list)
    lrs: list = field(default_factory=list)
    final_loss: float = float("nan")
    grad_norms: list = field(default_factory=list)

    def log_csv(self) -> str:
        lines = ["step,loss,lr"]
        for i, (loss, lr) in enumerate(zip(self.losses, self.lrs)):
            lines.append(f"{i},{loss:.12e},{lr:.12e}")
        return "\n".join(lines) + "\n"


def train(params, task: TaskSpec, cfg: TrainConfig) -> TrainResult:
    """Run the loop; writes the loss log and checkpoint if paths are set.

    Raises DivergenceError the moment the loss stops being finite, with
    the step and recent loss history in the message.
    """
    named = params.named_tensors()
    opt = Adam(named, cfg.beta1, cfg.beta2, cfg.eps)
    data_rng = Rng(cfg.seed).fork("task-data")
    result = TrainResult()
    for step in range(cfg.steps):
        tokens, mask = task.sample(data_rng, cfg.batch_size)
        opt.zero_grad()
        try:
            loss = cross_entropy_loss(forward(params, tokens), tokens, mask)
        except NumericError as e:
            recent = ", ".join(f"{v:.4f}" for v in result.losses[-5:])
            raise DivergenceError(
                f"numeric collapse at step {step}: {e} (recent: [{recent}])") from e
        loss_val = loss.item()
        if not math.isfinite(loss_val):
            recent = ", ".join(f"{v:.4f}" for v in result.losses[-5:])
            raise DivergenceError(
                f"non-finite loss at step {step} (recent: [{recent}])")
        loss.backward()
        result.grad_norms.append(clip_global_norm(named.values(), cfg.clip_norm))
        lr = lr_at(step, cfg)
        opt.step(lr)
        result.losses.append(loss_val)
        result.lrs.append(lr)
    result.final_loss = result.losses[-1] if result.losses else float("nan")
    if cfg.log_path:
        with open(cfg.log_path, "w") as f:
            f.write(result.log_csv())
    if cfg.checkpoint_path:
        save_checkpoint(cfg.checkpoint_path, params,
                        extra={"steps": cfg.steps, "final_loss": result.final_loss,
                               "seed": cfg.seed})
    return result


# ---------------------------------------------------------------------------
# ablation ladder
# ---------------------------------------------------------------------------

LADDER = ("vanilla", "loop", "kvshare", "plt")


def ladder_config(arch: str, base: dict, loops: int, window: int) -> ModelConfig:
    """Model configs for the feature ladder, from plain to fully wired."""
    kw = dict(base)
    if arch == "vanilla":
        kw.update(mode="vanilla", loops=1)
    elif arch == "loop":
        kw.update(mode="vanilla_loop", loops=loops)
    elif arch == "kvshare":
        kw.update(mode="plt", loops=loops)
    elif arch == "plt":
        kw.update(mode="plt", loops=loops, gswa=True, window=window)
    else:
        raise ValueError(f"unknown ladder rung {arch!r}")
    return ModelConfig(**kw)


def ablation_run(task: TaskSpec, base_model: dict, tcfg: TrainConfig,
                 loops: int = 2, window: int = 4, archs=LADDER) -> list:
    """Train the feature ladder on one task and collect comparable stats.

    Returns one dict per rung: final loss, scored-position accuracy,
    decode pass and cache counters from a short generation probe.
    """
    rows = []
    for arch in archs:
        cfg = ladder_config(arch, base_model, loops, window)
        params = init_parameters(cfg, tcfg.seed)
        res = train(params, task, tcfg)
        acc = eval_accuracy(lambda toks: forward(params, toks), task,
                            seed=tcfg.seed + 1)
        probe, _ = task.sample(Rng(tcfg.seed).fork("probe"), 1)
        sess = prefill(params, probe[0])
        for _ in range(8):
            sess.step(int(np.argmax(sess.last_logits)))
        rows.append({
            "arch": arch,
            "mode": cfg.mode,
            "loops": cfg.loops,
            "final_loss": res.final_loss,
            "accuracy": acc,
            "passes_per_token": sess.passes_per_token,
            "kv_entries": sess.kv_entry_count()["total"],
        })
    return rows


def format_ablation(rows: list) -> str:
    header = (f"{'arch':10s} {'mode':13s} {'loops':>5s} {'loss':>9s} "
              f"{'acc':>7s} {'passes/tok':>10s} {'kv':>8s}")
    out = [header, "-" * len(header)]
    for r in rows:
        out.append(f"{r['arch']:10s} {r['mode']:13s} {r['loops']:5d} "
                   f"{r['final_loss']:9.4f} {r['accuracy']:7.3f} "
                   f"{r['passes_per_token']:10.1f} {r['kv_entries']:8d}")
    return "\n".join(out)
