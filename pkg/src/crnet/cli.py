"""Command-line entry point: ``crnet <subcommand> [flags]``.

Exit codes: 0 success, 2 a check ran but failed, 1 operational error.
Settings resolve as preset < ``--config`` JSON file < explicit flags, and
the resolved settings are echoed and written to ``<out>/resolved_config.json``.
"""

from __future__ import annotations

import argparse
import json
import sys
from contextlib import nullcontext
from fractions import Fraction
from pathlib import Path

import numpy as np

EXIT_OK, EXIT_ERROR, EXIT_CHECK_FAILED = 0, 1, 2

GRAD_TOL = 1e-6
RECOMPUTE_TOL = 1e-8
RECON_TOL = 1e-9

# flag dest -> resolved key
_SHAPE_FLAGS = {
    "layers": "n_layers", "hidden": "hidden", "ffn_hidden": "ffn_hidden", "heads": "heads",
    "seq": "seq_len", "vocab": "vocab", "batch": "batch", "microbatch": "microbatch",
    "pp_size": "pp_size",
}


class CliError(Exception):
    pass


def sci(x: float, digits: int = 4) -> str:
    """``4.838e11`` style: ``digits`` significant figures, bare exponent."""
    if x == 0:
        return "0"
    mant, exp = f"{x:.{digits - 1}e}".split("e")
    return f"{mant}e{int(exp)}"


def default_corpus() -> bytes:
    """Python's bundled documentation topics (several hundred KB of English text)."""
    import pydoc_data.topics as topics

    return "".join(topics.topics[k] for k in sorted(topics.topics)).encode("utf-8")


# --------------------------------------------------------------------------
# argument parsing


class _Parser(argparse.ArgumentParser):
    """Usage errors exit 1 so that 2 stays reserved for failed checks."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_ERROR, f"{self.prog}: error: {message}\n")


def _shared(p: argparse.ArgumentParser, preset_default: str | None) -> None:
    g = p.add_argument_group("shared")
    g.add_argument("--config", type=Path, help="JSON file of settings (overrides the preset)")
    g.add_argument("--out", type=Path, default=Path("crnet-out"), help="output directory")
    g.add_argument("--seed", type=int, default=None)
    g.add_argument("--preset", default=preset_default, help="named configuration")
    g.add_argument("--threads", type=int, default=None, help="BLAS thread limit")
    s = p.add_argument_group("model shape overrides")
    s.add_argument("--layers", type=int)
    s.add_argument("--hidden", type=int)
    s.add_argument("--ffn-hidden", type=int)
    s.add_argument("--heads", type=int)
    s.add_argument("--rank", type=int, help="uniform rank for layers 2..L")
    s.add_argument("--seq", type=int)
    s.add_argument("--vocab", type=int)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="crnet", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True, metavar="SUBCOMMAND")

    p = sub.add_parser("train", help="train a byte-level model")
    _shared(p, "toy")
    p.add_argument("--steps", type=int)
    p.add_argument("--batch", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--arch", choices=["crnet", "full_rank"])
    p.add_argument("--recompute", action="store_true", default=None)
    p.add_argument("--checkpoints", type=int, help="number of checkpointed layers k")
    p.add_argument("--corpus", type=Path, help="training text (default: bundled Python docs)")
    p.add_argument("--eval-every", type=int)

    p = sub.add_parser("grad-check", help="compare analytic and finite-difference gradients")
    _shared(p, "tiny")
    p.add_argument("--fd-step", type=float)
    p.add_argument("--max-coords", type=int, help="subsample per group (>= 200)")
    p.add_argument("--fd-precision", choices=["extended", "double"])

    p = sub.add_parser("recompute-check", help="selective-cache backward against full-cache backward")
    _shared(p, "tiny")
    p.add_argument("--checkpoint-layers", type=int, nargs="+")
    p.add_argument("--checkpoints", type=int, help="number of evenly spaced checkpointed layers")
    p.add_argument("--beta-min", type=float)

    p = sub.add_parser("analyze", help="cross-layer vs direct low-rank error on model activations")
    _shared(p, "toy")
    p.add_argument("--checkpoint", type=Path, help="full-rank checkpoint (file or directory)")
    p.add_argument("--corpus", type=Path)
    p.add_argument("--r-fraction", type=float)
    p.add_argument("--windows", type=int)

    p = sub.add_parser("theorem-check", help="stable-rank bound on synthetic pairs")
    _shared(p, None)
    p.add_argument("--n", type=int)
    p.add_argument("--eps", type=float, nargs="+")
    p.add_argument("--trials", type=int)
    p.add_argument("--r", type=int, dest="theorem_r", help="fixed rank (default floor(r0/2))")

    p = sub.add_parser("cost", help="parameter, memory and FLOP accounting")
    _shared(p, "llama2-350m")
    p.add_argument("--method", choices=["full_rank", "lora", "relora", "sltrain", "galore", "cola", "crnet"])
    p.add_argument("--gcp-mode", choices=["none", "vanilla", "cola_m", "crnet_recompute"])
    p.add_argument("--batch", type=int)
    p.add_argument("--checkpoint-count", type=int)
    p.add_argument("--bytes", type=int, dest="bytes_per_value")

    p = sub.add_parser("pipeline-cost", help="pipeline-parallel compute and communication model")
    _shared(p, "llama2-13b")
    p.add_argument("--peak-tflops", type=float)
    p.add_argument("--bandwidth-gbs", type=float, help="link bandwidth in GiB/s")
    p.add_argument("--microbatch", type=int)
    p.add_argument("--pp-size", type=int)
    p.add_argument("--checkpoint-count", type=int, help="checkpointed layers (default L/8)")

    p = sub.add_parser("dump-activations", help="write every slot output as CRMX files")
    _shared(p, "toy")
    p.add_argument("--checkpoint", type=Path)
    p.add_argument("--corpus", type=Path)
    p.add_argument("--arch", choices=["crnet", "full_rank"])
    p.add_argument("--windows", type=int)
    return parser


# --------------------------------------------------------------------------
# resolution


_DEFAULTS = {
    "train": {"steps": 300, "lr": 3e-3, "recompute": False, "checkpoints": 1, "eval_every": 50,
              "arch": "crnet", "seed": 0, "corpus": None, "warmup_fraction": 0.1, "final_lr_fraction": 0.1,
              "lowrank_lr_scale": 0.25, "grad_clip_norm": 1.0, "eval_batches": 4, "epsilon": 1e-6},
    "grad-check": {"fd_step": 1e-5, "max_coords": None, "fd_precision": "extended", "seed": 0},
    "recompute-check": {"checkpoint_layers": None, "checkpoints": None, "beta_min": 0.1, "seed": 0},
    "analyze": {"checkpoint": None, "corpus": None, "r_fraction": 0.25, "windows": 1, "seed": 0},
    "theorem-check": {"n": 64, "eps": [0.02, 0.05, 0.1], "trials": 100, "theorem_r": None, "seed": 0},
    "cost": {"method": "crnet", "gcp_mode": "none", "checkpoint_count": 4, "bytes_per_value": 2},
    "pipeline-cost": {"peak_tflops": 312.0, "bandwidth_gbs": 64.0, "checkpoint_count": None},
    "dump-activations": {"checkpoint": None, "corpus": None, "arch": "crnet", "windows": 1, "seed": 0},
}

_NON_SETTINGS = {"command", "config", "out", "preset", "threads", "rank"}


def resolve(args: argparse.Namespace) -> dict:
    """Merge preset, config file and flags into one flat settings dict."""
    from .presets import get_preset

    settings: dict = dict(_DEFAULTS[args.command])
    if args.preset:
        settings.update(get_preset(args.preset).to_dict())
        settings["preset"] = args.preset
    if args.config is not None:
        try:
            data = json.loads(Path(args.config).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise CliError(f"cannot read config {args.config}: {exc}") from exc
        if not isinstance(data, dict):
            raise CliError("config file must hold a JSON object")
        if "rank" in data:
            settings["_rank"] = int(data.pop("rank"))
        settings.update(data)
    for key, value in vars(args).items():
        if key in _NON_SETTINGS or value is None:
            continue
        settings[_SHAPE_FLAGS.get(key, key)] = value
    if args.rank is not None:
        settings["_rank"] = args.rank
    rank = settings.pop("_rank", None)
    if "n_layers" in settings:
        L = settings["n_layers"]
        ranks = list(settings.get("ranks") or [])
        if rank is not None:
            ranks = [rank] * (L - 1)
        elif len(ranks) != L - 1:
            if ranks and len(set(ranks)) == 1:
                ranks = [ranks[0]] * (L - 1)
            elif L > 1:
                raise CliError(f"rank schedule has {len(ranks)} entries but the model has {L} layers; pass --rank")
        settings["ranks"] = ranks
    for k, v in list(settings.items()):
        if isinstance(v, Path):
            settings[k] = str(v)
    return settings


def _model_config(settings: dict, arch: str | None = None):
    from .model import ModelConfig

    arch = arch or settings.get("arch", "crnet")
    return ModelConfig(
        n_layers=settings["n_layers"], hidden=settings["hidden"], ffn_hidden=settings["ffn_hidden"],
        heads=settings["heads"], ranks=tuple(settings["ranks"]) if arch == "crnet" else (),
        vocab=settings["vocab"], seq_len=settings["seq_len"], arch=arch, seed=settings.get("seed", 0),
        epsilon=settings.get("epsilon", 1e-6),
    )


def _cost_config(settings: dict, method: str, **extra):
    from .cost_model import CostConfig

    ranks = tuple(settings.get("ranks") or ())
    kw = dict(
        n_layers=settings["n_layers"], hidden=settings["hidden"], ffn_hidden=Fraction(settings["ffn_hidden"]),
        seq_len=settings["seq_len"], heads=settings["heads"], vocab=settings["vocab"],
        batch=settings.get("batch") or 1, method=method,
    )
    if method == "crnet":
        kw["rank_schedule"] = ranks
    elif method != "full_rank":
        kw["rank"] = ranks[0] if ranks else None
    kw.update(extra)
    return CostConfig(**kw)


def _corpus_bytes(path) -> bytes:
    if path is None:
        return default_corpus()
    p = Path(path)
    if not p.is_file():
        raise CliError(f"corpus {p} not found")
    return p.read_bytes()


def _write(out: Path, name: str, text: str) -> Path:
    out.mkdir(parents=True, exist_ok=True)
    path = out / name
    path.write_text(text)
    return path


# --------------------------------------------------------------------------
# commands


def cmd_train(s: dict, out: Path) -> int:
    from .trainer import TrainConfig, ingest_corpus, train

    cfg = _model_config(s)
    tc = TrainConfig(total_steps=s["steps"], peak_lr=s["lr"], batch_size=s.get("batch") or 8,
                     eval_every=s["eval_every"], checkpoint_dir=str(out), recompute=bool(s["recompute"]),
                     checkpoint_count=s["checkpoints"], seed=s["seed"], warmup_fraction=s["warmup_fraction"],
                     final_lr_fraction=s["final_lr_fraction"], lowrank_lr_scale=s["lowrank_lr_scale"],
                     grad_clip_norm=s["grad_clip_norm"], eval_batches=s["eval_batches"])
    corpus = ingest_corpus(_corpus_bytes(s["corpus"]), cfg.seq_len)
    result = train(cfg, tc, corpus=corpus, log_path=out / "metrics.jsonl")
    first, last = result.losses[0], result.losses[-1]
    vals = [h["val_loss"] for h in result.history if "val_loss" in h]
    msg = f"train: {len(result.losses)} steps, loss {first:.4f} -> {last:.4f}"
    if vals:
        msg += f", val_loss {vals[-1]:.4f} (perplexity {np.exp(vals[-1]):.3f})"
    print(msg)
    return EXIT_OK


def cmd_grad_check(s: dict, out: Path) -> int:
    from .backprop import grad_check

    cfg = _model_config(s, "crnet")
    report = grad_check(cfg, s["seed"], s["fd_step"], s["max_coords"], fd_precision=s["fd_precision"])
    _write(out, "grad_check.json", json.dumps(report, indent=2, sort_keys=True) + "\n")
    worst = max(v["max_rel_err"] for v in report.values())
    ok = all(v["max_rel_err"] <= GRAD_TOL for v in report.values())
    print(json.dumps(report, sort_keys=True))
    print(f"grad-check: max relative error {worst:.3e} ({'PASS' if ok else 'FAIL'} at {GRAD_TOL:g})")
    return EXIT_OK if ok else EXIT_CHECK_FAILED


def cmd_recompute_check(s: dict, out: Path) -> int:
    from .backprop import backward, loss_and_grad, random_test_params
    from .model import forward
    from .recompute import CheckpointPlan, profile_csv, reconstruction_error_profile, select_checkpoints, backward_recompute

    cfg = _model_config(s, "crnet")
    if s["checkpoint_layers"]:
        plan = CheckpointPlan(cfg.n_layers, tuple(s["checkpoint_layers"]))
    else:
        plan = select_checkpoints(cfg.n_layers, s["checkpoints"] or max(1, cfg.n_layers // 8))
    params = random_test_params(cfg, s["seed"], beta_min=s["beta_min"])
    rng = np.random.default_rng([s["seed"], 2])
    tokens = rng.integers(0, cfg.vocab, cfg.seq_len)
    targets = rng.integers(0, cfg.vocab, cfg.seq_len)
    logits, full = forward(params, tokens)
    _, d = loss_and_grad(logits, targets)
    g_full = backward(params, full, d)
    _, sel = forward(params, tokens, "selective", plan)
    g_sel = backward_recompute(params, sel, d)
    worst = 0.0
    for k, a in g_full.tensors.items():
        b = g_sel.tensors[k]
        worst = max(worst, float(np.max(np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), 1e-300))))
    rows = reconstruction_error_profile(params, tokens, plan)
    recon = max(r["rel_error"] for r in rows)
    _write(out, "reconstruction_profile.csv", profile_csv(rows))
    report = {"plan": list(plan.layers), "max_rel_grad_diff": worst, "max_reconstruction_error": recon,
              "stored_elements": sel.stored_elements(), "full_cache_elements": full.stored_elements()}
    _write(out, "recompute_check.json", json.dumps(report, indent=2, sort_keys=True) + "\n")
    ok = worst <= RECOMPUTE_TOL and recon <= RECON_TOL
    print(json.dumps(report, sort_keys=True))
    print(f"recompute-check: grad diff {worst:.3e}, reconstruction {recon:.3e} ({'PASS' if ok else 'FAIL'})")
    return EXIT_OK if ok else EXIT_CHECK_FAILED


def _params_for(s: dict, arch: str):
    from .model import init_params
    from .trainer import load_checkpoint

    if s.get("checkpoint"):
        return load_checkpoint(s["checkpoint"]).params
    return init_params(_model_config(s, arch), s.get("seed", 0))


def cmd_analyze(s: dict, out: Path) -> int:
    from .residual_analysis import analyze_model_activations, stats_csv, summarize

    params = _params_for(s, "full_rank")
    tokens = np.frombuffer(_corpus_bytes(s["corpus"]), dtype=np.uint8).astype(np.int64)
    rows = analyze_model_activations(params, tokens, s["r_fraction"], s["windows"])
    summary = summarize(rows)
    _write(out, "residual_stats.csv", stats_csv(rows))
    _write(out, "residual_summary.json", json.dumps(summary, indent=2, sort_keys=True) + "\n")
    print(f"analyze: mean rel_err_direct {summary['mean_rel_err_direct']:.4e}, "
          f"mean rel_err_cross {summary['mean_rel_err_cross']:.4e}")
    return EXIT_OK if summary["cross_not_worse"] else EXIT_CHECK_FAILED


def cmd_theorem_check(s: dict, out: Path) -> int:
    from .residual_analysis import theorem_check

    results = []
    for eps in s["eps"]:
        for t in range(s["trials"]):
            results.append(theorem_check(s["n"], eps, s["theorem_r"], seed=s["seed"] + t))
    with_claim = [r for r in results if r["in_hypothesis"]]
    failures = [r for r in with_claim if not r["holds"]]
    _write(out, "theorem_check.jsonl", "".join(json.dumps(r, sort_keys=True) + "\n" for r in results))
    print(f"theorem-check: {len(with_claim) - len(failures)}/{len(with_claim)} in-hypothesis trials hold, "
          f"{len(results) - len(with_claim)} out of hypothesis")
    return EXIT_CHECK_FAILED if failures else EXIT_OK


def cmd_cost(s: dict, out: Path) -> int:
    from .cost_model import cost_report, format_table

    cfg = _cost_config(s, s["method"], gcp_mode=s["gcp_mode"], checkpoint_count=s["checkpoint_count"]
                       if s["gcp_mode"] == "crnet_recompute" else 0, bytes_per_value=s["bytes_per_value"])
    rep = cost_report(cfg)
    _write(out, "cost.json", rep.to_json() + "\n")
    _write(out, "cost.txt", format_table([rep]) + "\n")
    print(format_table([rep]))
    print(f"cost: {cfg.method} params={sci(float(rep.param_count.total))} "
          f"step_flops={sci(float(rep.step_flops.total))}")
    return EXIT_OK


def cmd_pipeline_cost(s: dict, out: Path) -> int:
    from .cost_model import PipelineConfig, pipeline_report

    pcfg = PipelineConfig(microbatch=s.get("microbatch") or 16, pp_size=s.get("pp_size") or 2,
                          peak_flops=s["peak_tflops"] * 1e12, bandwidth_gib_s=s["bandwidth_gbs"])
    b = s["checkpoint_count"] or max(1, s["n_layers"] // 8)
    reports = {m: pipeline_report(pcfg, _cost_config(s, m, checkpoint_count=b if m == "crnet" else 0))
               for m in ("full_rank", "crnet")}
    _write(out, "pipeline_cost.json", json.dumps(reports, indent=2, sort_keys=True) + "\n")
    for m, r in reports.items():
        print(f"{m:<10} compute {sci(r['compute_flops'])} FLOPs {r['compute_time_s']:.2f} s, "
              f"comm {r['comm_volume_gib']:.3f} GiB {r['comm_time_s']:.3f} s")
    return EXIT_OK


def cmd_dump_activations(s: dict, out: Path) -> int:
    from .residual_analysis import dump_activations

    params = _params_for(s, s["arch"])
    tokens = np.frombuffer(_corpus_bytes(s["corpus"]), dtype=np.uint8).astype(np.int64)
    paths = dump_activations(params, tokens, out / "activations", s["windows"])
    print(f"dump-activations: wrote {len(paths)} CRMX files to {out / 'activations'}")
    return EXIT_OK


COMMANDS = {
    "train": cmd_train, "grad-check": cmd_grad_check, "recompute-check": cmd_recompute_check,
    "analyze": cmd_analyze, "theorem-check": cmd_theorem_check, "cost": cmd_cost,
    "pipeline-cost": cmd_pipeline_cost, "dump-activations": cmd_dump_activations,
}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        settings = resolve(args)
        echo = json.dumps({"command": args.command, "out": str(args.out), "threads": args.threads, **settings},
                          sort_keys=True)
        print(f"resolved config: {echo}")
        _write(args.out, "resolved_config.json", echo + "\n")
        if args.threads is not None:
            from threadpoolctl import threadpool_limits

            ctx = threadpool_limits(limits=args.threads)
        else:
            ctx = nullcontext()
        with ctx:
            return COMMANDS[args.command](settings, args.out)
    except (CliError, ValueError, OSError, KeyError, TypeError) as exc:
        print(f"crnet {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
