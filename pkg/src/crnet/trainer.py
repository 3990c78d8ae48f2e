"""Byte-level language-model training: Adam, warmup-cosine schedule, corpus windows, checkpoints."""

from __future__ import annotations

import json
import math
import os
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from ._validation import check_byte_corpus
from .backprop import Gradients, backward, loss_and_grad
from .model import CrNetParams, ModelConfig, forward, init_params, param_group
from .recompute import backward_recompute, select_checkpoints
from .tensor_core import read_matrix, write_matrix

__all__ = [
    "TrainConfig",
    "AdamState",
    "Corpus",
    "Checkpoint",
    "TrainResult",
    "TrainingAborted",
    "StepRejected",
    "LOWRANK_GROUPS",
    "lr_at",
    "adam_step",
    "group_scales",
    "clip_global_norm",
    "ingest_corpus",
    "sample_batch",
    "batch_loss_and_grad",
    "evaluate",
    "train",
    "save_checkpoint",
    "load_checkpoint",
]

LOWRANK_GROUPS = ("A", "B", "beta")
CKPT_MAGIC = b"CRCK"
CKPT_VERSION = 1
CKPT_NAME = "crnet.ckpt"


class TrainingAborted(RuntimeError):
    def __init__(self, step: int, reason: str):
        super().__init__(f"training aborted at step {step}: {reason}")
        self.step = step


class StepRejected(FloatingPointError):
    """Raised by adam_step when a gradient is not finite."""


@dataclass(frozen=True)
class TrainConfig:
    total_steps: int = 300
    peak_lr: float = 3e-3
    warmup_fraction: float = 0.10
    final_lr_fraction: float = 0.10
    lowrank_lr_scale: float = 0.25
    batch_size: int = 8
    grad_clip_norm: float = 1.0
    eval_every: int = 50
    eval_batches: int = 4
    corpus_path: str | None = None
    checkpoint_dir: str | None = None
    checkpoint_every: int = 0
    recompute: bool = False
    checkpoint_count: int = 1
    seed: int = 0

    def __post_init__(self):
        if self.total_steps < 1:
            raise ValueError("total_steps must be >= 1")
        if not 0 < self.warmup_fraction < 1:
            raise ValueError("warmup_fraction must lie in (0, 1)")
        if self.peak_lr <= 0:
            raise ValueError("peak_lr must be positive")
        if not 0 <= self.final_lr_fraction <= 1:
            raise ValueError("final_lr_fraction must lie in [0, 1]")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.grad_clip_norm <= 0:
            raise ValueError("grad_clip_norm must be positive")

    def to_dict(self) -> dict:
        return asdict(self)


def lr_at(step: float, tc: TrainConfig) -> float:
    """Linear warmup from 0 to peak, then cosine decay to ``final_lr_fraction * peak``."""
    if not 0 <= step <= tc.total_steps:
        raise ValueError(f"step {step} outside [0, {tc.total_steps}]")
    warm = tc.warmup_fraction * tc.total_steps
    if step < warm:
        return tc.peak_lr * step / warm
    final = tc.final_lr_fraction * tc.peak_lr
    progress = (step - warm) / (tc.total_steps - warm)
    return final + (tc.peak_lr - final) * 0.5 * (1.0 + math.cos(math.pi * progress))


# --------------------------------------------------------------------------
# Adam


@dataclass
class AdamState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros_like(cls, params: CrNetParams) -> "AdamState":
        return cls({k: np.zeros_like(p) for k, p in params.tensors.items()},
                   {k: np.zeros_like(p) for k, p in params.tensors.items()})

    def copy(self) -> "AdamState":
        return AdamState({k: v.copy() for k, v in self.m.items()}, {k: v.copy() for k, v in self.v.items()},
                         self.t, self.beta1, self.beta2, self.eps)


def group_scales(lowrank_lr_scale: float) -> dict[str, float]:
    return {g: lowrank_lr_scale for g in LOWRANK_GROUPS}


def adam_step(params: CrNetParams, grads: Gradients, state: AdamState, lr: float,
              scales: dict[str, float] | None = None) -> dict[str, float]:
    """Bias-corrected Adam update in place; returns the effective lr of each group.

    A non-finite gradient rejects the whole step before anything changes.
    """
    scales = scales or {}
    for name, g in grads.tensors.items():
        if name not in params.tensors or g.shape != params.tensors[name].shape:
            raise ValueError(f"gradient {name} does not match the parameters")
        if not np.all(np.isfinite(g)):
            raise StepRejected(f"non-finite gradient in {name}")
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.t
    c2 = 1.0 - b2 ** state.t
    used = {}
    for name, p in params.tensors.items():
        g = grads.tensors[name]
        group = param_group(name)
        step_lr = lr * scales.get(group, 1.0)
        used[group] = step_lr
        m, v = state.m[name], state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        p -= step_lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return used


def clip_global_norm(grads: Gradients, max_norm: float) -> float:
    """Scale gradients so their global norm is at most ``max_norm``; returns the pre-clip norm."""
    norm = grads.global_norm()
    if norm > max_norm:
        grads.scale_(max_norm / norm)
    return norm


# --------------------------------------------------------------------------
# data


@dataclass(frozen=True)
class Corpus:
    train: np.ndarray
    val: np.ndarray

    @property
    def size(self) -> int:
        return self.train.size + self.val.size


def ingest_corpus(source, seq_len: int, val_fraction: float = 0.10) -> Corpus:
    """Byte tokens split 90/10: the last ``val_fraction`` of the file is validation."""
    if isinstance(source, os.PathLike) and not Path(source).is_file():
        raise FileNotFoundError(f"corpus {source} not found")
    try:
        tokens = check_byte_corpus(source)
    except OSError as exc:
        raise OSError(f"cannot read corpus {source}: {exc}") from exc
    need = 2 * (seq_len + 1)
    if tokens.size < need:
        raise ValueError(f"corpus has {tokens.size} bytes; at least {need} are required for seq_len {seq_len}")
    cut = tokens.size - max(2, int(round(tokens.size * val_fraction)))
    return Corpus(train=tokens[:cut], val=tokens[cut:])


def sample_batch(tokens: np.ndarray, batch: int, seq_len: int, seed: int, step: int):
    """Deterministic contiguous windows; returns ``(inputs, targets)`` lists."""
    span = min(seq_len, tokens.size - 1)
    rng = np.random.default_rng([seed, step])
    starts = rng.integers(0, tokens.size - span, size=batch)
    return ([tokens[s:s + span] for s in starts], [tokens[s + 1:s + span + 1] for s in starts])


def _eval_windows(tokens: np.ndarray, seq_len: int, count: int):
    span = min(seq_len, tokens.size - 1)
    last = tokens.size - span - 1
    starts = np.unique(np.linspace(0, last, num=max(1, count)).astype(np.int64))
    return [(tokens[s:s + span], tokens[s + 1:s + span + 1]) for s in starts]


def evaluate(params: CrNetParams, tokens: np.ndarray, seq_len: int, count: int = 4) -> float:
    """Mean loss over fixed evenly spaced windows; parameters are not touched."""
    losses = []
    for x, y in _eval_windows(tokens, seq_len, count):
        logits, _ = forward(params, x, cache_mode=None)
        losses.append(loss_and_grad(logits, y)[0])
    return float(np.mean(losses))


def batch_loss_and_grad(params: CrNetParams, inputs, targets, recompute: bool = False,
                        plan=None) -> tuple[float, Gradients]:
    """Mean loss and mean gradient over sequences, reduced in fixed order."""
    total = Gradients.zeros_like(params)
    losses = []
    for x, y in zip(inputs, targets):
        if recompute:
            logits, cache = forward(params, x, cache_mode="selective", checkpoints=plan)
            loss, d = loss_and_grad(logits, y)
            g = backward_recompute(params, cache, d)
        else:
            logits, cache = forward(params, x, cache_mode="full")
            loss, d = loss_and_grad(logits, y)
            g = backward(params, cache, d)
        losses.append(loss)
        total.add_(g)
    total.scale_(1.0 / len(inputs))
    return float(np.mean(losses)), total


# --------------------------------------------------------------------------
# checkpoints


@dataclass
class Checkpoint:
    params: CrNetParams
    state: AdamState
    step: int


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.data):
            raise EOFError(f"checkpoint truncated at offset {len(self.data)} while reading {what} "
                           f"(needed {n} bytes from offset {self.pos})")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def matrix(self, name: str) -> np.ndarray:
        import io

        buf = io.BytesIO(self.data)
        buf.seek(self.pos)
        try:
            arr = read_matrix(buf)
        except (EOFError, ValueError) as exc:
            raise type(exc)(f"{exc} (tensor {name})") from None
        self.pos = buf.tell()
        return arr


def save_checkpoint(params: CrNetParams, state: AdamState, step: int, directory) -> Path:
    """Write ``crnet.ckpt`` atomically into ``directory``."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    path = d / CKPT_NAME
    tmp = d / (CKPT_NAME + ".tmp")
    cfg_bytes = params.config.to_json().encode("utf-8")
    with open(tmp, "wb") as fp:
        fp.write(CKPT_MAGIC)
        fp.write(struct.pack("<I", CKPT_VERSION))
        fp.write(struct.pack("<Q", len(cfg_bytes)))
        fp.write(cfg_bytes)
        for arr in params.tensors.values():
            write_matrix(fp, arr)
        for buf in (state.m, state.v):
            for name in params.tensors:
                write_matrix(fp, buf[name])
        fp.write(struct.pack("<Q", step))
    os.replace(tmp, path)
    return path


def load_checkpoint(path) -> Checkpoint:
    """Read a checkpoint file (or the ``crnet.ckpt`` inside a directory)."""
    p = Path(path)
    if p.is_dir():
        p = p / CKPT_NAME
    r = _Reader(p.read_bytes())
    magic = r.take(4, "magic")
    if magic != CKPT_MAGIC:
        raise ValueError(f"bad checkpoint magic {magic!r} at offset 0")
    (version,) = struct.unpack("<I", r.take(4, "version"))
    if version != CKPT_VERSION:
        raise ValueError(f"unsupported checkpoint version {version} at offset 4")
    (n,) = struct.unpack("<Q", r.take(8, "config length"))
    cfg = ModelConfig.from_dict(json.loads(r.take(n, "config").decode("utf-8")))
    template = init_params(cfg)
    tensors = {}
    for name, ref in template.tensors.items():
        arr = r.matrix(name)
        if arr.shape != ref.shape:
            raise ValueError(f"tensor {name} has shape {arr.shape}, expected {ref.shape}")
        tensors[name] = arr
    moments = []
    for kind in ("m", "v"):
        moments.append({name: r.matrix(f"adam {kind} {name}") for name in template.tensors})
    (step,) = struct.unpack("<Q", r.take(8, "step"))
    if r.pos != len(r.data):
        raise ValueError(f"trailing bytes after offset {r.pos}")
    return Checkpoint(CrNetParams(cfg, tensors), AdamState(moments[0], moments[1], t=step), step)


# --------------------------------------------------------------------------
# loop


@dataclass
class TrainResult:
    params: CrNetParams
    state: AdamState
    history: list[dict] = field(default_factory=list)

    @property
    def losses(self) -> list[float]:
        return [h["loss"] for h in self.history]


def _jsonl(rec: dict) -> str:
    return json.dumps(rec, sort_keys=False)


def train(cfg: ModelConfig, tc: TrainConfig, corpus: Corpus | None = None, log_path=None,
          resume: Checkpoint | None = None, stop_at: int | None = None,
          on_step: Callable[[dict], None] | None = None) -> TrainResult:
    """Run the training loop; returns the final parameters, optimizer state and per-step log.

    ``stop_at`` ends the run early at that step (the schedule still spans
    ``total_steps``), which together with ``resume`` allows split runs.
    """
    if corpus is None:
        if tc.corpus_path is None:
            raise ValueError("no corpus given")
        corpus = ingest_corpus(tc.corpus_path, cfg.seq_len)
    if resume is not None:
        if resume.params.config != cfg:
            raise ValueError("checkpoint config differs from the requested model config")
        params, state, start = resume.params.copy(), resume.state, resume.step
    else:
        params, state, start = init_params(cfg, cfg.seed), None, 0
        state = AdamState.zeros_like(params)
    plan = None
    if tc.recompute:
        if cfg.arch != "crnet":
            raise ValueError("recompute requires the crnet architecture")
        plan = select_checkpoints(cfg.n_layers, tc.checkpoint_count)
    scales = group_scales(tc.lowrank_lr_scale)
    end = tc.total_steps if stop_at is None else min(stop_at, tc.total_steps)
    log = open(log_path, "a" if resume is not None else "w") if log_path else None
    result = TrainResult(params, state)
    last_good = None
    try:
        for step in range(start, end):
            inputs, targets = sample_batch(corpus.train, tc.batch_size, cfg.seq_len, tc.seed, step)
            loss, grads = batch_loss_and_grad(params, inputs, targets, tc.recompute, plan)
            if not math.isfinite(loss) or not grads.all_finite():
                if tc.checkpoint_dir and last_good is not None:
                    save_checkpoint(*last_good, tc.checkpoint_dir)
                raise TrainingAborted(step, f"non-finite loss {loss}")
            if tc.checkpoint_dir:
                last_good = (params.copy(), state.copy(), step)
            norm = clip_global_norm(grads, tc.grad_clip_norm)
            lr = lr_at(step + 1, tc)
            used = adam_step(params, grads, state, lr, scales)
            rec = {"step": step + 1, "loss": loss, "lr": lr, "grad_norm": norm}
            if "A" in used:
                rec["lr_lowrank"] = used["A"]
            if tc.eval_every and ((step + 1) % tc.eval_every == 0 or step + 1 == tc.total_steps):
                rec["val_loss"] = evaluate(params, corpus.val, cfg.seq_len, tc.eval_batches)
            result.history.append(rec)
            if log:
                log.write(_jsonl(rec) + "\n")
                log.flush()
            if on_step:
                on_step(rec)
            if tc.checkpoint_dir and tc.checkpoint_every and (step + 1) % tc.checkpoint_every == 0:
                save_checkpoint(params, state, step + 1, tc.checkpoint_dir)
        if tc.checkpoint_dir:
            save_checkpoint(params, state, end, tc.checkpoint_dir)
    finally:
        if log:
            log.close()
    return result
