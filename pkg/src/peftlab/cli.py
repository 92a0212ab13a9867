"""Command-line driver.

Exit codes: 0 success, 2 configuration error, 3 data or format error,
4 training failure.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import harness, metrics, pqt
from .adapters import AdapterConfigError, ScheduleError
from .harness import ConfigError, ExperimentConfig
from .quant import QuantError, QuantScheme, dequantize, per_block, quantize
from .tasks import TaskSpec, gen_dataset
from .training import ModeError, TrainingError
from .transformer import ModelConfigError, ToyTransformer

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_TRAIN = 0, 2, 3, 4

FOOTPRINT_SCHEMES = ("int8", "int4", "asym8", "asym4", "nf4")


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON experiment config; flags override its fields")
    p.add_argument("--seed", type=int)
    p.add_argument("--mode", choices=harness.MODES)
    p.add_argument("--rank", type=int)
    p.add_argument("--scheme", help="nf4, int4, int8, asym4, asym8, ...")
    p.add_argument("--block-size", type=int)
    p.add_argument("--preset", choices=sorted(harness.PRESETS))
    p.add_argument("--out", default=".", help="output directory")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="peftlab", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="write a synthetic task as JSON lines")
    _common(p)
    p.add_argument("--task", choices=("copy", "reverse", "summarize-synthetic"))
    p.add_argument("--count", type=int, default=1000)
    p.add_argument("--split", choices=("train", "heldout"), default="train")

    p = sub.add_parser("train", help="run one experiment; writes report, timing and checkpoint")
    _common(p)
    p.add_argument("--steps", type=int)

    p = sub.add_parser("eval", help="score a JSONL corpus of candidates against references")
    _common(p)
    p.add_argument("corpus", help="JSON lines with source, candidate, references")
    p.add_argument("--workers", type=int, default=1)

    p = sub.add_parser("quantize", help="quantize every base weight of a toy model to PQT1 files")
    _common(p)

    p = sub.add_parser("footprint", help="byte footprint of the base model under each scheme")
    _common(p)

    p = sub.add_parser("compare", help="run several modes on one task and tabulate them")
    _common(p)
    p.add_argument("--modes", nargs="+", help="entries like full, lora, adalora, qlora:nf4")
    p.add_argument("--steps", type=int)
    return parser


def load_config(args: argparse.Namespace) -> ExperimentConfig:
    base = ExperimentConfig.from_file(args.config).to_dict() if args.config else {}
    overrides = {
        "seed": args.seed,
        "mode": args.mode,
        "rank": args.rank,
        "scheme": args.scheme,
        "block_size": args.block_size,
        "preset": args.preset,
        "steps": getattr(args, "steps", None),
    }
    base.update({k: v for k, v in overrides.items() if v is not None})
    return ExperimentConfig.from_dict(base)


def _model_config(args: argparse.Namespace) -> tuple[ExperimentConfig, str | None]:
    """Config for commands that only need model sizes; ``--scheme`` is returned separately."""
    scheme, args.scheme = args.scheme, None
    if args.mode == "qlora":
        args.mode = None
    return load_config(args), scheme


def _write_json(path: Path, data) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(data, sort_keys=True, indent=2) + "\n", encoding="utf-8")


def cmd_gen_data(args) -> int:
    cfg, _ = _model_config(args)
    spec = TaskSpec(args.task or cfg.task, cfg.min_len, cfg.max_len, cfg.vocab, cfg.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    path = out / f"{spec.task}-{args.split}.jsonl"
    gen_dataset(spec, args.count, path, args.split)
    print(path)
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = load_config(args)
    report = harness.run_experiment(cfg, args.out)
    print(f"{cfg.mode}: loss {report.initial_loss:.4f} -> {report.final_loss:.4f}, "
          f"accuracy {report.metrics.get('accuracy', float('nan')):.3f}")
    return EXIT_OK


def cmd_eval(args) -> int:
    rows = metrics.read_jsonl(args.corpus)
    for i, row in enumerate(rows):
        missing = {"candidate", "references"} - set(row)
        if missing:
            raise ValueError(f"line {i + 1} lacks {sorted(missing)}")
    report = metrics.evaluate_corpus(rows, workers=args.workers)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "metrics.json").write_text(report.to_json() + "\n", encoding="utf-8")
    (out / "metrics.csv").write_text(report.to_csv(), encoding="utf-8")
    print(report.to_csv(), end="")
    return EXIT_OK


def _base_model(cfg: ExperimentConfig) -> ToyTransformer:
    return ToyTransformer(cfg.vocab, cfg.d_model, None, cfg.n_layers, cfg.max_len, cfg.seed)


def cmd_quantize(args) -> int:
    cfg, name = _model_config(args)
    scheme = QuantScheme.parse(name or "nf4")
    gran = cfg.quant_granularity()
    model = _base_model(cfg)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    summary = {}
    for name, t in model.base_tensors().items():
        q = quantize(t, scheme, gran, double_quant=scheme.kind == "nf4")
        blob = pqt.serialize(q)
        (out / f"{name}.pqt").write_bytes(blob)
        err = float(np.max(np.abs(t.data - dequantize(pqt.load(blob)).data)))
        summary[name] = {"bytes": len(blob), "params": t.data.size, "max_abs_error": err}
    _write_json(out / "quantize.json", summary)
    print(f"wrote {len(summary)} PQT1 files to {out}")
    return EXIT_OK


def footprint_table(model: ToyTransformer, schemes, block_size: int) -> dict:
    tensors = model.base_tensors()
    params = sum(t.data.size for t in tensors.values())
    table = {"params": params, "fp32_bytes": 4 * params, "fp16_bytes": 2 * params, "schemes": {}}
    for s in schemes:
        scheme = QuantScheme.parse(s)
        total = 0
        for t in tensors.values():
            q = quantize(t, scheme, per_block(block_size), double_quant=scheme.kind == "nf4")
            total += len(pqt.serialize(q))
        table["schemes"][s] = {"bytes": total, "reduction_vs_16bit": pqt.reduction(total, params)}
    return table


def cmd_footprint(args) -> int:
    cfg, name = _model_config(args)
    schemes = [name] if name else list(FOOTPRINT_SCHEMES)
    table = footprint_table(_base_model(cfg), schemes, cfg.block_size)
    _write_json(Path(args.out) / "footprint.json", table)
    for s, row in table["schemes"].items():
        print(f"{s:6s} {row['bytes']:>10d} bytes  {100 * row['reduction_vs_16bit']:6.2f}% below 16-bit")
    return EXIT_OK


def _parse_mode(entry: str, base: ExperimentConfig, scheme: str | None) -> ExperimentConfig:
    mode, _, given = entry.partition(":")
    if mode not in harness.MODES:
        raise ConfigError(f"unknown mode {mode!r} in --modes")
    if mode == "full":
        return replace(base, mode="full", rank=None)
    if mode == "qlora":
        return replace(base, mode="qlora", scheme=given or scheme or "nf4")
    return replace(base, mode=mode)


def cmd_compare(args) -> int:
    # --mode and --scheme describe single runs; here they only seed the list
    scheme, single = args.scheme, args.mode
    args.scheme, args.mode = None, "lora"
    base = load_config(args)
    entries = args.modes or ([single] if single else ["full", "lora", "adalora", "qlora:int4", "qlora:nf4"])
    configs = [_parse_mode(m, base, scheme) for m in entries]
    comp = harness.compare_modes(configs, args.out)
    print(comp.to_csv(), end="")
    return EXIT_OK


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "eval": cmd_eval,
    "quantize": cmd_quantize,
    "footprint": cmd_footprint,
    "compare": cmd_compare,
}

CONFIG_ERRORS = (ConfigError, ModeError, ModelConfigError, AdapterConfigError, ScheduleError, QuantError)
DATA_ERRORS = (pqt.FormatError, metrics.MetricUsageError, OSError, json.JSONDecodeError, ValueError, KeyError)


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return COMMANDS[args.command](args)
    except CONFIG_ERRORS as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except TrainingError as exc:
        print(f"training failed: {exc}", file=sys.stderr)
        return EXIT_TRAIN
    except DATA_ERRORS as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
