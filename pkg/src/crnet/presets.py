"""Named model configurations: published LLaMA-2 sizes for accounting, tiny/toy for training."""

from __future__ import annotations

from dataclasses import dataclass, replace

from .model import ModelConfig

__all__ = ["Preset", "PRESETS", "get_preset", "rank_schedule"]


def rank_schedule(n_layers: int, spans: list[tuple[int, int, int]]) -> tuple[int, ...]:
    """Ranks for layers ``2..L`` from ``(first, last, rank)`` spans."""
    ranks = {}
    for first, last, r in spans:
        for layer in range(first, last + 1):
            ranks[layer] = r
    missing = [l for l in range(2, n_layers + 1) if l not in ranks]
    if missing:
        raise ValueError(f"rank schedule leaves layers {missing} unassigned")
    return tuple(ranks[l] for l in range(2, n_layers + 1))


@dataclass(frozen=True)
class Preset:
    name: str
    n_layers: int
    hidden: int
    ffn_hidden: int
    heads: int
    ranks: tuple[int, ...]
    vocab: int = 32000
    seq_len: int = 256
    batch: int = 1
    microbatch: int | None = None
    pp_size: int | None = None

    def model_config(self, arch: str = "crnet", seed: int = 0, **overrides) -> ModelConfig:
        cfg = ModelConfig(
            n_layers=self.n_layers, hidden=self.hidden, ffn_hidden=self.ffn_hidden, heads=self.heads,
            ranks=self.ranks if arch == "crnet" else (), vocab=self.vocab, seq_len=self.seq_len,
            arch=arch, seed=seed,
        )
        return replace(cfg, **overrides) if overrides else cfg

    def to_dict(self) -> dict:
        return {
            "name": self.name, "n_layers": self.n_layers, "hidden": self.hidden,
            "ffn_hidden": self.ffn_hidden, "heads": self.heads, "ranks": list(self.ranks),
            "vocab": self.vocab, "seq_len": self.seq_len, "batch": self.batch,
            "microbatch": self.microbatch, "pp_size": self.pp_size,
        }


def _llama(name, L, h, hff, heads, spans, **kw) -> Preset:
    return Preset(name, L, h, hff, heads, rank_schedule(L, spans), **kw)


PRESETS: dict[str, Preset] = {
    p.name: p
    for p in [
        _llama("llama2-60m", 8, 512, 1376, 8, [(2, 4, 96), (5, 8, 112)]),
        _llama("llama2-130m", 12, 768, 2048, 12, [(2, 4, 192), (5, 12, 224)]),
        _llama("llama2-350m", 24, 1024, 2736, 16, [(2, 16, 224), (17, 24, 256)]),
        _llama("llama2-1b", 24, 2048, 5461, 32, [(2, 24, 448)]),
        _llama("llama2-7b", 32, 4096, 11008, 32, [(2, 32, 896)]),
        # pipeline studies use r = 0.25 h, long sequences and microbatches
        _llama("llama2-13b", 40, 5120, 13653, 40, [(2, 40, 1280)], seq_len=4096, microbatch=16, pp_size=2),
        _llama("llama2-70b", 80, 8192, 21845, 64, [(2, 80, 2048)], seq_len=4096, microbatch=16, pp_size=8),
        Preset("tiny", 3, 8, 16, 1, (2, 2), vocab=16, seq_len=5),
        Preset("toy", 4, 64, 172, 4, (16, 16, 16), vocab=256, seq_len=64, batch=8),
    ]
}


def get_preset(name: str) -> Preset:
    try:
        return PRESETS[name]
    except KeyError:
        raise ValueError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}") from None
