"""Closed-form parameter, memory, FLOP and pipeline-communication accounting.

Every count is evaluated in exact rational arithmetic (``fractions.Fraction``)
so that fractional intermediate sizes such as ``h_ff = 8h/3`` stay exact; the
conversion to float happens only when a report is rendered.

Each quantity is a :class:`Quantity`: a total together with the labelled
terms that sum to it.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from fractions import Fraction

__all__ = [
    "METHODS",
    "GCP_MODES",
    "Quantity",
    "CostConfig",
    "CostReport",
    "PipelineConfig",
    "param_count",
    "optimizer_memory",
    "step_flops",
    "activation_cost",
    "total_step_flops",
    "cost_report",
    "pipeline_report",
    "format_table",
]

METHODS = ("full_rank", "lora", "relora", "sltrain", "galore", "cola", "crnet")
GCP_MODES = ("none", "vanilla", "cola_m", "crnet_recompute")
GIB = 2 ** 30


def _q(x) -> Fraction:
    return x if isinstance(x, Fraction) else Fraction(x)


@dataclass(frozen=True)
class Quantity:
    total: Fraction
    terms: tuple[tuple[str, Fraction], ...]

    @classmethod
    def of(cls, *terms: tuple[str, object]) -> "Quantity":
        ts = tuple((label, _q(v)) for label, v in terms)
        return cls(sum((v for _, v in ts), Fraction(0)), ts)

    def scaled(self, factor, label: str) -> "Quantity":
        f = _q(factor)
        return Quantity.of(*((f"{label} x ({name})", v * f) for name, v in self.terms))

    def __float__(self) -> float:
        return float(self.total)

    def to_dict(self) -> dict:
        return {"total": float(self.total), "terms": {k: float(v) for k, v in self.terms}}


@dataclass(frozen=True)
class CostConfig:
    """Model shape plus accounting options.

    ``rank`` is the uniform rank of the low-rank methods. ``rank_schedule``
    optionally gives per-layer ranks for layers ``2..L`` (crnet only).
    ``ffn_hidden`` may be a ``Fraction`` (for instance ``8h/3``).
    """

    n_layers: int
    hidden: int
    ffn_hidden: object
    seq_len: int = 256
    rank: int | None = None
    rank_schedule: tuple[int, ...] | None = None
    heads: int = 1
    vocab: int = 32000
    batch: int = 1
    bytes_per_value: int = 2
    checkpoint_count: int = 0
    method: str = "crnet"
    gcp_mode: str = "none"
    sparsity: Fraction = Fraction(3, 100)

    def __post_init__(self):
        object.__setattr__(self, "ffn_hidden", _q(self.ffn_hidden))
        if self.rank_schedule is not None:
            object.__setattr__(self, "rank_schedule", tuple(int(r) for r in self.rank_schedule))
        for name in ("n_layers", "hidden", "seq_len", "heads", "vocab", "batch", "bytes_per_value"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.ffn_hidden <= 0:
            raise ValueError("ffn_hidden must be positive")
        if self.method not in METHODS:
            raise ValueError(f"unknown method {self.method!r}; choose from {METHODS}")
        if self.gcp_mode not in GCP_MODES:
            raise ValueError(f"unknown gcp mode {self.gcp_mode!r}; choose from {GCP_MODES}")
        if not 0 <= self.checkpoint_count <= self.n_layers:
            raise ValueError("checkpoint_count must lie in [0, L]")
        if self.rank_schedule is not None and len(self.rank_schedule) != self.n_layers - 1:
            raise ValueError(f"rank schedule must have {self.n_layers - 1} entries")
        if self.method != "full_rank":
            cap = min(Fraction(self.hidden), self.ffn_hidden)
            for r in self.ranks():
                if not 1 <= r < cap:
                    raise ValueError(f"rank {r} outside [1, min(h, h_ff))")

    def ranks(self) -> tuple[int, ...]:
        """Ranks of layers ``2..L`` (crnet) or the uniform rank repeated."""
        if self.rank_schedule is not None:
            return self.rank_schedule
        if self.rank is None:
            if self.method == "full_rank":
                return ()
            raise ValueError(f"method {self.method} needs a rank")
        return (self.rank,) * (self.n_layers - 1)

    @property
    def uniform_rank(self) -> int:
        if self.rank is not None:
            return self.rank
        rs = self.ranks()
        if rs and len(set(rs)) == 1:
            return rs[0]
        raise ValueError("this quantity needs a uniform rank")

    def with_(self, **kw) -> "CostConfig":
        return replace(self, **kw)

    def to_dict(self) -> dict:
        return {
            "n_layers": self.n_layers, "hidden": self.hidden, "ffn_hidden": str(self.ffn_hidden),
            "seq_len": self.seq_len, "rank": self.rank,
            "rank_schedule": list(self.rank_schedule) if self.rank_schedule else None,
            "heads": self.heads, "vocab": self.vocab, "batch": self.batch,
            "bytes_per_value": self.bytes_per_value, "checkpoint_count": self.checkpoint_count,
            "method": self.method, "gcp_mode": self.gcp_mode, "sparsity": str(self.sparsity),
        }


# --------------------------------------------------------------------------
# parameters and optimizer memory


def _dense_layer(h, hff) -> Fraction:
    return 4 * h * h + 3 * h * hff


def _low_rank_layer(h, hff, r) -> Fraction:
    return 11 * h * r + 3 * hff * r


def param_count(cfg: CostConfig, include_embeddings: bool = True) -> Quantity:
    """Trainable parameter count of a method, with labelled terms.

    Embedding and LM head are untied (``2 * vocab * h``). For crnet the
    per-slot ``beta`` scalars are listed as their own term.
    """
    L, h, hff = cfg.n_layers, cfg.hidden, cfg.ffn_hidden
    m = cfg.method
    terms: list[tuple[str, object]] = []
    if m == "crnet":
        terms.append(("first layer 4h^2+3h*h_ff", _dense_layer(h, hff)))
        terms.append(("layers 2..L sum(11h*r_l+3h_ff*r_l)",
                      sum((_low_rank_layer(h, hff, r) for r in cfg.ranks()), Fraction(0))))
        terms.append(("beta scalars 7(L-1)", 7 * (L - 1)))
    elif m == "cola":
        r = cfg.uniform_rank
        terms.append(("L(11hr+3h_ff*r)", L * _low_rank_layer(h, hff, r)))
    elif m in ("full_rank", "galore"):
        terms.append(("L(4h^2+3h*h_ff)", L * _dense_layer(h, hff)))
    elif m in ("lora", "relora"):
        r = cfg.uniform_rank
        terms.append(("L(4h^2+3h*h_ff)", L * _dense_layer(h, hff)))
        terms.append(("adapters L(8hr+3r(h+h_ff))", L * (8 * h * r + 3 * r * (h + hff))))
    elif m == "sltrain":
        r = cfg.uniform_rank
        terms.append(("low-rank L(11hr+3h_ff*r)", L * _low_rank_layer(h, hff, r)))
        terms.append((f"sparse {cfg.sparsity} x L(4h^2+3h*h_ff)", cfg.sparsity * L * _dense_layer(h, hff)))
    if include_embeddings:
        terms.append(("embedding + lm_head 2*vocab*h", 2 * cfg.vocab * h))
    return Quantity.of(*terms)


def eq10_core(cfg: CostConfig) -> Fraction:
    """Layer parameters without embeddings or beta scalars."""
    h, hff = cfg.hidden, cfg.ffn_hidden
    if cfg.method == "crnet":
        return _dense_layer(h, hff) + sum((_low_rank_layer(h, hff, r) for r in cfg.ranks()), Fraction(0))
    return param_count(cfg, include_embeddings=False).total


def optimizer_memory(cfg: CostConfig, include_embeddings: bool = True) -> Quantity:
    """Bytes for parameters, gradients and two Adam moments: ``4 x params x bytes``."""
    bpv = cfg.bytes_per_value
    if cfg.method == "crnet":
        h, hff = cfg.hidden, cfg.ffn_hidden
        terms = [
            ("first layer 16h^2+12h*h_ff", (16 * h * h + 12 * h * hff) * bpv),
            ("layers 2..L sum(44h*r_l+12h_ff*r_l)",
             sum(((44 * h * r + 12 * hff * r) for r in cfg.ranks()), Fraction(0)) * bpv),
            ("beta scalars 4*7(L-1)", 28 * (cfg.n_layers - 1) * bpv),
        ]
        if include_embeddings:
            terms.append(("embedding + lm_head 4*2*vocab*h", 8 * cfg.vocab * h * bpv))
        return Quantity.of(*terms)
    return param_count(cfg, include_embeddings).scaled(4 * bpv, f"4 x {bpv} bytes")


# --------------------------------------------------------------------------
# FLOPs


def _full_layer_flops(s, h, hff) -> Fraction:
    return 24 * s * h * h + 12 * s * s * h + 18 * s * h * hff


def _low_rank_layer_flops(s, h, hff, r) -> Fraction:
    return 48 * s * h * r + 12 * s * s * h + 18 * s * r * (h + hff)


def step_flops(cfg: CostConfig) -> Quantity:
    """Forward plus backward FLOPs of one sequence (embeddings excluded)."""
    L, s, h, hff = cfg.n_layers, cfg.seq_len, cfg.hidden, cfg.ffn_hidden
    m = cfg.method
    base = _full_layer_flops(s, h, hff)
    if m == "full_rank":
        return Quantity.of(("L(24sh^2+12s^2h+18sh*h_ff)", L * base))
    if m in ("lora", "relora"):
        return Quantity.of(("L(40sh^2+24s^2h+30sh*h_ff)",
                            L * (40 * s * h * h + 24 * s * s * h + 30 * s * h * hff)))
    if m == "sltrain":
        r = cfg.uniform_rank
        return Quantity.of(("L(24sh^2+12s^2h+18sh*h_ff)", L * base),
                           ("L(24h^2r+18h*h_ff*r)", L * (24 * h * h * r + 18 * h * hff * r)))
    if m == "galore":
        r = cfg.uniform_rank
        return Quantity.of(("L(24sh^2+12s^2h+18sh*h_ff)", L * base),
                           ("L(16h^2r+12h*h_ff*r)", L * (16 * h * h * r + 12 * h * hff * r)))
    if m == "cola":
        r = cfg.uniform_rank
        return Quantity.of(("L(48shr+12s^2h+18sr(h+h_ff))", L * _low_rank_layer_flops(s, h, hff, r)))
    return Quantity.of(
        ("first layer 24sh^2+12s^2h+18sh*h_ff", base),
        ("layers 2..L sum(48sh*r_l+12s^2h+18s*r_l(h+h_ff))",
         sum((_low_rank_layer_flops(s, h, hff, r) for r in cfg.ranks()), Fraction(0))),
    )


def head_flops(cfg: CostConfig) -> Fraction:
    """LM-head forward ``2 s h vocab``; reported separately, never part of step totals."""
    return _q(2 * cfg.seq_len * cfg.hidden * cfg.vocab)


def activation_cost(cfg: CostConfig, gcp_mode: str | None = None) -> tuple[Quantity, Quantity]:
    """``(activation memory elements, recompute FLOPs)`` of one sequence."""
    mode = cfg.gcp_mode if gcp_mode is None else gcp_mode
    L, s, h, hff = cfg.n_layers, cfg.seq_len, cfg.hidden, cfg.ffn_hidden
    attn = ("attention scores 4Ls^2h", 4 * L * s * s * h)
    if mode == "vanilla":
        return (Quantity.of(("layer inputs Lsh", L * s * h)),
                Quantity.of(("linear layers 24Lsh^2", 24 * L * s * h * h), attn))
    if mode == "cola_m":
        r = cfg.uniform_rank
        return (Quantity.of(("2Lsh", 2 * L * s * h), ("7Lsr", 7 * L * s * r)),
                Quantity.of(("10Lshr", 10 * L * s * h * r), ("4Ls*h_ff*r", 4 * L * s * hff * r), attn))
    if mode == "crnet_recompute":
        b = cfg.checkpoint_count
        if b < 1:
            raise ValueError("crnet recompute needs at least one checkpointed layer (L is always stored)")
        rs = cfg.ranks()
        # the low-rank linear recompute skips checkpointed layers; uniform rank assumed for it
        r = cfg.uniform_rank
        return (Quantity.of(("(L+5b)sh", (L + 5 * b) * s * h), ("2b*s*h_ff", 2 * b * s * hff),
                            ("7s*sum(r_l)", 7 * s * sum(rs))),
                Quantity.of(("10(L-b)shr", 10 * (L - b) * s * h * r),
                            ("4(L-b)s*h_ff*r", 4 * (L - b) * s * hff * r), attn))
    if mode == "none":
        return (Quantity.of(("20.67Lsh", Fraction(62, 3) * L * s * h),
                            ("2Ls^2*heads", 2 * L * s * s * cfg.heads)),
                Quantity.of(("no recompute", 0)))
    raise ValueError(f"unknown gcp mode {mode!r}")


def total_step_flops(cfg: CostConfig, gcp_mode: str | None = None) -> Fraction:
    """Per-batch ``(step + recompute) x batch``."""
    _, rec = activation_cost(cfg, gcp_mode)
    return (step_flops(cfg).total + rec.total) * cfg.batch


@dataclass(frozen=True)
class CostReport:
    config: CostConfig
    param_count: Quantity
    param_count_no_embed: Quantity
    optimizer_memory_bytes: Quantity
    step_flops: Quantity
    activation_memory_elements: Quantity
    recompute_flops: Quantity
    head_flops: Fraction
    notes: tuple[str, ...] = field(default_factory=tuple)

    def to_dict(self) -> dict:
        return {
            "config": self.config.to_dict(),
            "param_count": self.param_count.to_dict(),
            "param_count_no_embed": self.param_count_no_embed.to_dict(),
            "optimizer_memory_bytes": self.optimizer_memory_bytes.to_dict(),
            "optimizer_memory_gib": float(self.optimizer_memory_bytes.total) / GIB,
            "step_flops_per_sequence": self.step_flops.to_dict(),
            "step_flops_batch": float(self.step_flops.total * self.config.batch),
            "activation_memory_elements": self.activation_memory_elements.to_dict(),
            "activation_memory_bytes_batch": float(self.activation_memory_elements.total
                                                   * self.config.batch * self.config.bytes_per_value),
            "recompute_flops": self.recompute_flops.to_dict(),
            "total_step_flops_batch": float((self.step_flops.total + self.recompute_flops.total)
                                            * self.config.batch),
            "head_flops_excluded": float(self.head_flops),
            "notes": list(self.notes),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


def cost_report(cfg: CostConfig) -> CostReport:
    mem, rec = activation_cost(cfg)
    return CostReport(
        config=cfg,
        param_count=param_count(cfg),
        param_count_no_embed=param_count(cfg, include_embeddings=False),
        optimizer_memory_bytes=optimizer_memory(cfg),
        step_flops=step_flops(cfg),
        activation_memory_elements=mem,
        recompute_flops=rec,
        head_flops=head_flops(cfg),
        notes=("step FLOPs exclude embedding and LM head; see head_flops_excluded",),
    )


def format_table(reports: list[CostReport]) -> str:
    """Plain-text summary, one row per report."""
    header = f"{'method':<10} {'gcp':<16} {'params':>12} {'opt mem GiB':>12} {'step FLOPs':>12} {'act mem':>12} {'recompute':>12}"
    lines = [header, "-" * len(header)]
    for r in reports:
        lines.append(
            f"{r.config.method:<10} {r.config.gcp_mode:<16} {float(r.param_count.total):>12.4g} "
            f"{float(r.optimizer_memory_bytes.total) / GIB:>12.4g} {float(r.step_flops.total):>12.4g} "
            f"{float(r.activation_memory_elements.total):>12.4g} {float(r.recompute_flops.total):>12.4g}"
        )
    return "\n".join(lines)


# --------------------------------------------------------------------------
# pipeline parallelism


@dataclass(frozen=True)
class PipelineConfig:
    """``bandwidth_gib_s`` is read as binary GiB per second (see pipeline_report)."""

    microbatch: int = 16
    pp_size: int = 2
    peak_flops: float = 312e12
    bandwidth_gib_s: float = 64.0
    comm_passes: int = 3
    full_rank_gcp_uplift: Fraction = Fraction(4, 3)

    def __post_init__(self):
        if self.microbatch <= 0 or self.pp_size < 1 or self.peak_flops <= 0 or self.bandwidth_gib_s <= 0:
            raise ValueError("pipeline settings must be positive")
        if self.comm_passes <= 0:
            raise ValueError("comm_passes must be positive")


def comm_dimension(cfg: CostConfig) -> Fraction:
    """Elements sent across one pipeline boundary per sequence.

    Full rank sends the layer output ``s h``. Crnet additionally sends the
    seven same-slot streams: ``5 s h + 2 s h_ff``.
    """
    s, h = cfg.seq_len, cfg.hidden
    if cfg.method == "crnet":
        return s * h + 5 * s * h + 2 * s * cfg.ffn_hidden
    return _q(s * h)


def pipeline_report(pcfg: PipelineConfig, cfg: CostConfig) -> dict:
    """Compute and communication per gradient step of one microbatch train.

    Full rank: ``micro x step x 4/3`` (the replayed forward of layer-level
    checkpointing). Crnet: ``micro x (step + recompute)`` with
    ``checkpoint_count`` stored layers. Volume is
    ``micro x dim x bytes x passes x (pp_size - 1)`` bytes, reported in GiB;
    time is GiB divided by the bandwidth in GiB/s.
    """
    if cfg.method not in ("full_rank", "crnet"):
        raise ValueError("pipeline model covers full_rank and crnet only")
    micro = pcfg.microbatch
    step = step_flops(cfg).total
    if cfg.method == "full_rank":
        compute = micro * step * pcfg.full_rank_gcp_uplift
        compute_terms = {"micro x step": float(micro * step),
                         "replayed forward (x1/3)": float(micro * step / 3)}
        act_mem, _ = activation_cost(cfg, "vanilla")
    else:
        act_mem, rec = activation_cost(cfg, "crnet_recompute")
        compute = micro * (step + rec.total)
        compute_terms = {"micro x step": float(micro * step), "micro x recompute": float(micro * rec.total)}
    dim = comm_dimension(cfg)
    boundaries = pcfg.pp_size - 1
    volume_bytes = micro * dim * cfg.bytes_per_value * pcfg.comm_passes * boundaries
    volume_gib = volume_bytes / GIB
    states = optimizer_memory(cfg).total
    act_bytes = act_mem.total * micro * cfg.bytes_per_value
    return {
        "method": cfg.method,
        "compute_flops": float(compute),
        "compute_terms": compute_terms,
        "compute_time_s": float(compute) / pcfg.peak_flops,
        "comm_dimension": float(dim),
        "comm_volume_bytes": float(volume_bytes),
        "comm_volume_gib": float(volume_gib),
        "comm_volume_gb_decimal": float(volume_bytes) / 1e9,
        "comm_time_s": float(volume_gib) / pcfg.bandwidth_gib_s,
        "hbm_delta": {
            "activation_bytes_per_device": float(act_bytes) / pcfg.pp_size,
            "state_bytes_per_device": float(states) / pcfg.pp_size,
            "total_bytes_per_device": float(act_bytes + states) / pcfg.pp_size,
        },
        "notes": [
            "full-rank compute includes a 4/3 uplift for the replayed forward of layer checkpointing",
            "volume in binary GiB; bandwidth read as GiB/s",
        ],
    }
