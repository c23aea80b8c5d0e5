"""Optimizer, batching and the generic training loop shared by every stage."""

from __future__ import annotations

import csv
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import diffcore as dc
from .corpus import AlignedUtterance
from .model import ToyModel
from .objectives import COMPONENTS, Batch, LossOutput


class Adam:
    """Adam with linear warmup then inverse-sqrt decay, and global-norm clipping."""

    def __init__(self, params: Sequence[dc.Tensor], lr: float = 1e-3, betas=(0.9, 0.98), eps: float = 1e-9,
                 warmup: int = 100, clip: float = 1.0):
        self.params = list(params)
        self.lr, self.betas, self.eps, self.warmup, self.clip = lr, betas, eps, warmup, clip
        self.m = [np.zeros_like(p.values) for p in self.params]
        self.v = [np.zeros_like(p.values) for p in self.params]
        self.t = 0

    def rate(self) -> float:
        t = max(self.t, 1)
        if self.warmup <= 0:
            return self.lr
        return self.lr * min(t / self.warmup, math.sqrt(self.warmup / t))

    def step(self) -> float:
        """Apply one update from the accumulated grads; returns the pre-clip grad norm."""
        grads = [p.grad if p.grad is not None else np.zeros_like(p.values) for p in self.params]
        gnorm = math.sqrt(sum(float((g * g).sum()) for g in grads))
        if self.clip and gnorm > self.clip:
            grads = [g * (self.clip / gnorm) for g in grads]
        self.t += 1
        b1, b2 = self.betas
        lr = self.rate()
        c1 = 1 - b1 ** self.t
        c2 = 1 - b2 ** self.t
        for p, g, m, v in zip(self.params, grads, self.m, self.v):
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            p.values = p.values - lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
        return gnorm


def length_buckets(utts: Sequence[AlignedUtterance], batch_size: int, rng: np.random.Generator) -> list[list[int]]:
    """Shuffled batches of similar-length utterances (indices into ``utts``)."""
    if not utts:
        return []
    n = len(utts)
    jitter = rng.random(n)
    order = sorted(range(n), key=lambda i: (utts[i].frames.shape[0] + 8 * jitter[i], i))
    batches = [order[i:i + batch_size] for i in range(0, n, batch_size)]
    perm = rng.permutation(len(batches))
    return [batches[i] for i in perm]


BatchFn = Callable[[list[int]], Batch]
LossFn = Callable[[Batch, np.random.Generator, bool], LossOutput]


@dataclass
class LoopConfig:
    epochs: int = 10
    max_steps: int | None = None
    batch_size: int = 32
    lr: float = 1e-3
    warmup: int = 100
    clip: float = 1.0
    patience: int = 3
    average_last: int | None = None
    seed: int = 0


@dataclass
class LoopResult:
    steps: int
    epochs: int
    dev_losses: list[float] = field(default_factory=list)
    stopped_early: bool = False
    epoch_states: list[dict[str, np.ndarray]] = field(default_factory=list)
    seconds: float = 0.0


def average_states(states: Sequence[dict[str, np.ndarray]]) -> dict[str, np.ndarray]:
    if not states:
        raise ValueError("no checkpoints to average")
    return {k: np.mean([s[k] for s in states], axis=0) for k in states[0]}


class StepLog:
    """Per-step loss breakdown written as CSV."""

    def __init__(self, path: str | Path | None, adversarial: bool = False):
        self.path = Path(path) if path else None
        self.rows: list[list[str]] = []
        mix = "adv_mix" if adversarial else "mix"
        self.header = ["step", *[mix if c == "mix" else c for c in COMPONENTS]]

    def add(self, step: int, out: dict[str, float]) -> None:
        self.rows.append([str(step)] + [f"{out[c]:.6f}" for c in COMPONENTS])

    def flush(self) -> None:
        if self.path is None:
            return
        with open(self.path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(self.header)
            w.writerows(self.rows)


def train(model: ToyModel, train_items: int, batch_fn: BatchFn, loss_fn: LossFn, cfg: LoopConfig,
          dev_loss: Callable[[], float] | None = None, lengths: Sequence[AlignedUtterance] | None = None,
          log: StepLog | None = None, on_epoch: Callable[[int, float | None], None] | None = None) -> LoopResult:
    """Run epochs of ``loss_fn`` over bucketed batches.

    Stops early when the dev loss has not improved for ``patience`` epochs,
    or when ``max_steps`` is reached.  Epoch-end parameter snapshots are kept
    for the last ``average_last`` epochs and averaged into the model at the
    end when ``average_last`` is set.
    """
    rng = np.random.default_rng(cfg.seed)
    opt = Adam(model.trainable(), cfg.lr, warmup=cfg.warmup, clip=cfg.clip)
    res = LoopResult(0, 0)
    t0 = time.time()
    best = math.inf
    bad = 0
    keep = cfg.average_last or 0
    for epoch in range(cfg.epochs):
        if lengths is not None:
            batches = length_buckets(lengths, cfg.batch_size, rng)
        else:
            perm = rng.permutation(train_items)
            batches = [list(perm[i:i + cfg.batch_size]) for i in range(0, train_items, cfg.batch_size)]
        for idx in batches:
            if cfg.max_steps is not None and res.steps >= cfg.max_steps:
                break
            batch = batch_fn(idx)
            with dc.Graph() as g:
                out = loss_fn(batch, rng, True)
            model.zero_grad()
            dc.backward(g, out.total)
            opt.step()
            res.steps += 1
            if log is not None:
                log.add(res.steps, out.breakdown())
        res.epochs = epoch + 1
        if keep:
            res.epoch_states.append(model.state())
            res.epoch_states = res.epoch_states[-keep:]
        dl = dev_loss() if dev_loss else None
        if dl is not None:
            res.dev_losses.append(dl)
        if on_epoch:
            on_epoch(epoch, dl)
        if cfg.max_steps is not None and res.steps >= cfg.max_steps:
            break
        if dl is not None:
            if dl < best - 1e-6:
                best, bad = dl, 0
            else:
                bad += 1
                if bad >= cfg.patience:
                    res.stopped_early = True
                    break
    model.zero_grad()
    if keep and res.epoch_states:
        model.load_state(average_states(res.epoch_states))
    if log is not None:
        log.flush()
    res.seconds = time.time() - t0
    return res
