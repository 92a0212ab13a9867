"""Experiment driver: configs, seeded runs, reports and mode comparisons.

Every random stream in a run is derived from ``config.seed``, so a config
fully determines the report and checkpoint bytes. Wall-clock numbers are
written to a separate ``timing.json``.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import time
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from . import checkpoint, pqt
from .adapters import DEFAULT_GAMMA, BudgetSchedule
from .metrics import rouge_l, rouge_n, wer
from .quant import PER_BLOCK, PER_ROW, PER_TENSOR, Granularity, QuantScheme
from .tasks import EOS, TaskSpec, gen_dataset
from .tensor import SgdConfig
from .training import MODES, TrainingTrace, decode_accuracy, train
from .transformer import PROJECTIONS, ToyTransformer, attach_adapters, greedy_decode


class ConfigError(ValueError):
    """Raised for an invalid or inconsistent experiment configuration."""


@dataclass(frozen=True)
class Preset:
    learning_rate: float
    adapter_learning_rate: float
    batch_size: int


# "toy" is tuned for the 32-dim model; the named presets carry the
# fine-tuning rates and batch sizes proposed for Whisper tiny..large and are
# far too small to move a toy model in 500 steps
PRESETS = {
    "toy": Preset(0.2, 0.3, 16),
    "tiny": Preset(3.75e-5, 3.75e-5, 8),
    "base": Preset(2.5e-5, 2.5e-5, 8),
    "small": Preset(1.25e-5, 1.25e-5, 4),
    "medium": Preset(6.25e-6, 6.25e-6, 2),
    "large": Preset(4.375e-6, 4.375e-6, 1),
}

GRANULARITIES = (PER_TENSOR, PER_ROW, PER_BLOCK)


@dataclass(frozen=True)
class ExperimentConfig:
    mode: str = "lora"
    rank: int | None = None
    scheme: str | None = None
    granularity: str = PER_BLOCK
    block_size: int = 64
    double_quant: bool | None = None
    budget_initial: int | None = None
    budget_final: int | None = None
    warmup: int | None = None
    gamma: float = DEFAULT_GAMMA
    learning_rate: float | None = None
    steps: int = 500
    clip_norm: float | None = 5.0
    batch_size: int | None = None
    preset: str = "toy"
    task: str = "copy"
    min_len: int = 1
    max_len: int = 8
    vocab: int = 16
    seed: int = 0
    d_model: int = 32
    n_layers: int = 2
    pretrain_task: str | None = "reverse"
    pretrain_steps: int = 500
    pretrain_learning_rate: float | None = None
    eval_count: int = 100

    def __post_init__(self):
        validate(self)

    # derived settings

    @property
    def preset_values(self) -> Preset:
        return PRESETS[self.preset]

    @property
    def adapter_rank(self) -> int | None:
        if self.mode == "full":
            return None
        return 8 if self.rank is None else self.rank

    @property
    def lr(self) -> float:
        if self.learning_rate is not None:
            return self.learning_rate
        p = self.preset_values
        return p.learning_rate if self.mode == "full" else p.adapter_learning_rate

    @property
    def batch(self) -> int:
        return self.preset_values.batch_size if self.batch_size is None else self.batch_size

    def task_spec(self, task: str | None = None) -> TaskSpec:
        return TaskSpec(task or self.task, self.min_len, self.max_len, self.vocab, self.seed)

    def sgd(self) -> SgdConfig:
        return SgdConfig(self.lr, self.steps, self.clip_norm)

    def quant_scheme(self) -> QuantScheme:
        return QuantScheme.parse(self.scheme)

    def quant_granularity(self) -> Granularity:
        return Granularity(self.granularity, self.block_size if self.granularity == PER_BLOCK else 0)

    def schedule(self) -> BudgetSchedule:
        r = self.adapter_rank
        b0 = r if self.budget_initial is None else self.budget_initial
        bT = max(1, r // 2) if self.budget_final is None else self.budget_final
        warm = self.steps // 4 if self.warmup is None else self.warmup
        return BudgetSchedule(b0, bT, self.steps, warm)

    # serialization

    def to_dict(self) -> dict:
        return asdict(self)

    def canonical_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))

    def config_hash(self) -> str:
        return hashlib.sha256(self.canonical_json().encode()).hexdigest()

    @classmethod
    def from_dict(cls, data: dict) -> "ExperimentConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(data) - known)
        if unknown:
            raise ConfigError(f"unknown config keys {unknown}")
        return cls(**data)

    @classmethod
    def from_file(cls, path: str | Path) -> "ExperimentConfig":
        try:
            data = json.loads(Path(path).read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from None
        if not isinstance(data, dict):
            raise ConfigError("config file must hold a JSON object")
        return cls.from_dict(data)


def validate(cfg: ExperimentConfig) -> None:
    """All checks that must pass before any compute happens."""
    if cfg.mode not in MODES:
        raise ConfigError(f"unknown mode {cfg.mode!r}; expected one of {MODES}")
    if cfg.preset not in PRESETS:
        raise ConfigError(f"unknown preset {cfg.preset!r}; expected one of {sorted(PRESETS)}")
    if cfg.mode == "full" and cfg.rank is not None:
        raise ConfigError("full mode trains every weight and takes no adapter rank")
    if cfg.mode == "qlora" and cfg.scheme is None:
        raise ConfigError("qlora mode needs a quantization scheme")
    if cfg.mode != "qlora" and cfg.scheme is not None:
        raise ConfigError(f"{cfg.mode} mode keeps a dense base; drop the quantization scheme")
    if cfg.scheme is not None:
        try:
            QuantScheme.parse(cfg.scheme)
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
    if cfg.granularity not in GRANULARITIES:
        raise ConfigError(f"unknown granularity {cfg.granularity!r}")
    if cfg.block_size < 1:
        raise ConfigError("block size must be positive")
    if cfg.rank is not None and not 1 <= cfg.rank <= cfg.d_model:
        raise ConfigError(f"rank must lie in [1, {cfg.d_model}]")
    if cfg.steps < 1 or cfg.pretrain_steps < 0 or cfg.eval_count < 0:
        raise ConfigError("steps must be positive and counts non-negative")
    if cfg.d_model < 1 or cfg.n_layers < 1:
        raise ConfigError("model sizes must be positive")
    if cfg.batch_size is not None and cfg.batch_size < 1:
        raise ConfigError("batch size must be positive")
    if not 0 <= cfg.seed < 2**64:
        raise ConfigError("seed must be an unsigned 64-bit integer")
    try:
        cfg.task_spec()
        if cfg.pretrain_task is not None:
            cfg.task_spec(cfg.pretrain_task)
        SgdConfig(cfg.lr, cfg.steps, cfg.clip_norm)
        if cfg.mode == "adalora":
            s = cfg.schedule()
            if s.initial > cfg.adapter_rank:
                raise ConfigError(f"initial budget {s.initial} exceeds rank {cfg.adapter_rank}")
    except ValueError as exc:
        raise ConfigError(str(exc)) from None


# runs


@dataclass
class RunReport:
    config: dict
    config_hash: str
    losses: list[float]
    penalties: list[float]
    budgets: list[int]
    initial_loss: float
    final_loss: float
    loss_reduction: float
    parameters: dict[str, int]
    footprint: dict
    metrics: dict[str, float]
    pretrain_final_loss: float | None = None
    step_seconds: list[float] = field(default_factory=list, compare=False)

    def to_dict(self) -> dict:
        out = asdict(self)
        del out["step_seconds"]
        return out

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2)

    def timing(self) -> dict:
        return {"config_hash": self.config_hash, "step_seconds": self.step_seconds, "total_seconds": sum(self.step_seconds)}


def build_model(cfg: ExperimentConfig) -> tuple[ToyTransformer, float | None]:
    """Model ready for ``cfg.mode``: pretrained base, adapters attached, base quantized."""
    model = ToyTransformer(cfg.vocab, cfg.d_model, None, cfg.n_layers, cfg.max_len, cfg.seed)
    pre_loss = None
    if cfg.pretrain_task is not None and cfg.pretrain_steps > 0:
        model.set_base_trainable(True)
        lr = cfg.pretrain_learning_rate if cfg.pretrain_learning_rate is not None else PRESETS["toy"].learning_rate
        trace = train(
            model,
            cfg.task_spec(cfg.pretrain_task),
            SgdConfig(lr, cfg.pretrain_steps, cfg.clip_norm),
            "full",
            cfg.batch,
            np.random.default_rng([cfg.seed, 1]),
        )
        pre_loss = trace.final_loss
    model.set_base_trainable(cfg.mode == "full")
    if cfg.mode != "full":
        kind = "adalora" if cfg.mode == "adalora" else "lora"
        attach_adapters(
            model,
            kind,
            cfg.adapter_rank,
            PROJECTIONS,
            np.random.default_rng([cfg.seed, 2]),
            cfg.gamma,
            cfg.schedule() if kind == "adalora" else None,
        )
    if cfg.mode == "qlora":
        model.quantize_base(cfg.quant_scheme(), cfg.quant_granularity(), cfg.double_quant)
    return model, pre_loss


def footprint_report(model: ToyTransformer) -> dict:
    """Serialized byte counts per component, plus the reduction against 16-bit storage."""
    base = {name: t.data.nbytes for name, t in model.base_tensors().items()}
    quant = {name: len(pqt.serialize(q)) for name, q in model.quantized_tensors().items()}
    adapters = {
        name: sum(t.data.nbytes for t in a.state().values()) for name, a in model.adapters().items()
    }
    params = model.num_base_parameters()
    base_bytes = sum(base.values()) + sum(quant.values())
    return {
        "base": dict(sorted({**base, **quant}.items())),
        "adapters": dict(sorted(adapters.items())),
        "base_bytes": base_bytes,
        "adapter_bytes": sum(adapters.values()),
        "baseline_16bit_bytes": 2 * params,
        "reduction_vs_16bit": pqt.reduction(base_bytes, params),
    }


def evaluate_model(model: ToyTransformer, spec: TaskSpec, count: int) -> dict[str, float]:
    """Greedy-decode a held-out split and score it with exact match, ROUGE and WER."""
    rows = gen_dataset(spec, count, split="heldout")
    if not rows:
        return {}
    pairs = [(r["source"], r["target"]) for r in rows]
    r1 = rl = w = 0.0
    for src, tgt in pairs:
        out = greedy_decode(model, src)
        hyp = [str(t) for t in (out[:-1] if out and out[-1] == EOS else out)]
        ref = [str(t) for t in tgt]
        r1 += rouge_n(hyp, [ref], 1)
        rl += rouge_l(hyp, ref)
        w += wer(ref, hyp).wer
    n = len(pairs)
    return {
        "accuracy": decode_accuracy(model, pairs),
        "rouge-1": r1 / n,
        "rouge-l": rl / n,
        "wer": w / n,
    }


def _report(cfg: ExperimentConfig, model: ToyTransformer, trace: TrainingTrace, pre_loss) -> RunReport:
    trainable = model.num_trainable()
    traversal = sum(p.data.size for p in model.trainable_parameters() if p.requires_grad)
    frozen = model.num_base_parameters() - (trainable if cfg.mode == "full" else 0)
    return RunReport(
        config=cfg.to_dict(),
        config_hash=cfg.config_hash(),
        losses=trace.losses,
        penalties=trace.penalties,
        budgets=trace.budgets,
        initial_loss=trace.initial_loss,
        final_loss=trace.final_loss,
        loss_reduction=1.0 - trace.final_loss / trace.initial_loss,
        parameters={"trainable": trainable, "trainable_traversal": traversal, "frozen": frozen},
        footprint=footprint_report(model),
        metrics=evaluate_model(model, cfg.task_spec(), cfg.eval_count),
        pretrain_final_loss=pre_loss,
        step_seconds=trace.step_seconds,
    )


def execute(cfg: ExperimentConfig) -> tuple[RunReport, ToyTransformer]:
    """Run a config and hand back the trained model along with its report."""
    validate(cfg)
    model, pre_loss = build_model(cfg)
    trace = train(model, cfg.task_spec(), cfg.sgd(), cfg.mode, cfg.batch, np.random.default_rng([cfg.seed, 3]))
    return _report(cfg, model, trace, pre_loss), model


def run_experiment(cfg: ExperimentConfig, out_dir: str | Path | None = None) -> RunReport:
    """Train, evaluate and (optionally) write ``report.json``, ``timing.json`` and ``checkpoint.pck``."""
    t0 = time.perf_counter()
    report, model = execute(cfg)
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "report.json").write_text(report.to_json() + "\n", encoding="utf-8")
        checkpoint.save_checkpoint(model, out / "checkpoint.pck", {"config_hash": report.config_hash, "seed": cfg.seed})
        timing = report.timing() | {"wall_seconds": time.perf_counter() - t0}
        (out / "timing.json").write_text(json.dumps(timing, indent=2) + "\n", encoding="utf-8")
    return report


# comparisons

COMPARE_COLUMNS = (
    "mode", "rank", "scheme", "trainable", "frozen", "base_bytes", "adapter_bytes",
    "initial_loss", "final_loss", "loss_reduction", "accuracy", "rouge-l", "wer",
)


@dataclass
class Comparison:
    rows: list[dict]
    curves: dict[str, list[float]]
    reports: list[RunReport] = field(repr=False, default_factory=list)

    def to_json(self) -> str:
        return json.dumps({"rows": self.rows, "curves": self.curves}, sort_keys=True, indent=2)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.DictWriter(buf, COMPARE_COLUMNS, lineterminator="\n")
        w.writeheader()
        for row in self.rows:
            w.writerow({k: repr(v) if isinstance(v, float) else v for k, v in row.items()})
        return buf.getvalue()


def _row(rep: RunReport) -> dict:
    c = rep.config
    return {
        "mode": c["mode"],
        "rank": c["rank"] if c["mode"] == "full" else (c["rank"] or 8),
        "scheme": c["scheme"],
        "trainable": rep.parameters["trainable"],
        "frozen": rep.parameters["frozen"],
        "base_bytes": rep.footprint["base_bytes"],
        "adapter_bytes": rep.footprint["adapter_bytes"],
        "initial_loss": rep.initial_loss,
        "final_loss": rep.final_loss,
        "loss_reduction": rep.loss_reduction,
        "accuracy": rep.metrics.get("accuracy"),
        "rouge-l": rep.metrics.get("rouge-l"),
        "wer": rep.metrics.get("wer"),
    }


def compare_modes(configs: list[ExperimentConfig], out_dir: str | Path | None = None) -> Comparison:
    """Run each config on the same task and seed; curves are keyed ``<index>:<mode>``."""
    if not configs:
        raise ConfigError("nothing to compare")
    first = configs[0]
    for c in configs[1:]:
        if c.task_spec() != first.task_spec():
            raise ConfigError("compared configs must share the task and seed")
    reports = [run_experiment(c) for c in configs]
    rows = [_row(r) for r in reports]
    curves = {f"{i}:{r.config['mode']}": r.losses for i, r in enumerate(reports)}
    comp = Comparison(rows, curves, reports)
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "compare.json").write_text(comp.to_json() + "\n", encoding="utf-8")
        (out / "compare.csv").write_text(comp.to_csv(), encoding="utf-8")
    return comp


def mode_sweep(base: ExperimentConfig, rank: int = 8) -> list[ExperimentConfig]:
    """One config per mode (qlora with int4 and nf4) sharing everything else."""
    common = dict(scheme=None, rank=rank, learning_rate=None)
    return [
        replace(base, mode="full", scheme=None, rank=None, learning_rate=None),
        replace(base, mode="lora", **common),
        replace(base, mode="adalora", **common),
        replace(base, mode="qlora", **{**common, "scheme": "int4"}),
        replace(base, mode="qlora", **{**common, "scheme": "nf4"}),
    ]
