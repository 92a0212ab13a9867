import numpy as np
import pytest

from peftlab.adapters import BudgetSchedule
from peftlab.harness import ExperimentConfig, execute
from peftlab.quant import QuantScheme
from peftlab.tasks import TaskSpec, sample_pairs
from peftlab.tensor import SgdConfig
from peftlab.training import ModeError, TrainingError, check_mode, decode_accuracy, total_penalty, train
from peftlab.transformer import ToyTransformer, attach_adapters

TASK = TaskSpec("copy", 1, 4, 8, seed=0)


def _model(seed=0):
    return ToyTransformer(vocab=8, d_model=8, n_layers=1, max_len=4, seed=seed)


def _full(seed=0):
    m = _model(seed)
    m.set_base_trainable(True)
    return m


# a single symbol at a fixed length makes every sampled batch identical
CONSTANT = TaskSpec("copy", 3, 3, 3, seed=0)


@pytest.mark.parametrize("mode", ["full", "lora", "adalora", "qlora"])
def test_zero_learning_rate_gives_a_constant_loss_trace(mode):
    model = ToyTransformer(vocab=3, d_model=8, n_layers=1, max_len=4, seed=1)
    if mode == "full":
        model.set_base_trainable(True)
    else:
        attach_adapters(model, "lora" if mode != "adalora" else "adalora", 2)
        if mode == "qlora":
            model.quantize_base(QuantScheme.parse("nf4"))
        # give the adapters a nonzero update direction
        for a in model.adapters().values():
            for p in a.parameters():
                p.data = p.data + 0.1
    trace = train(model, CONSTANT, SgdConfig(0.0, 6), mode, 4, np.random.default_rng(0))
    assert trace.steps == 6
    assert len(set(trace.losses)) == 1


def test_adapter_training_leaves_base_untouched():
    model = attach_adapters(_model(), "lora", 2)
    before = {k: t.data.copy() for k, t in model.base_tensors().items()}
    trace = train(model, TASK, SgdConfig(0.3, 20, 5.0), "lora", 8, np.random.default_rng(0))
    assert trace.steps == 20
    for k, t in model.base_tensors().items():
        assert np.array_equal(t.data, before[k])
    assert any(not np.array_equal(a.A.data, 0) for a in model.adapters().values())


def test_mode_checks():
    with pytest.raises(ModeError):
        check_mode(_full(), "sparse")
    with pytest.raises(ModeError):
        check_mode(attach_adapters(_model(), "lora", 2), "full")
    with pytest.raises(ModeError):
        check_mode(_model(), "lora")
    with pytest.raises(ModeError):
        check_mode(attach_adapters(_model(), "lora", 2), "adalora")
    with pytest.raises(ModeError):
        check_mode(attach_adapters(_model(), "adalora", 2), "lora")
    with pytest.raises(ModeError):
        check_mode(attach_adapters(_model(), "lora", 2), "qlora")
    q = attach_adapters(_model(), "lora", 2)
    q.quantize_base(QuantScheme.parse("int4"))
    check_mode(q, "qlora")
    with pytest.raises(ModeError):
        check_mode(q, "lora")
    unfrozen = attach_adapters(_model(), "lora", 2)
    unfrozen.embed.weight.requires_grad = True
    with pytest.raises(ModeError):
        check_mode(unfrozen, "lora")


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_divergence_names_the_step():
    model = _full()
    with pytest.raises(TrainingError) as exc:
        train(model, TASK, SgdConfig(1e200, 10, None), "full", 4, np.random.default_rng(0))
    assert exc.value.step >= 1
    assert f"step {exc.value.step}" in str(exc.value)


def test_adalora_records_penalty_and_budget():
    model = attach_adapters(_model(), "adalora", 4, schedule=BudgetSchedule(4, 2, 8, warmup=2))
    trace = train(model, TASK, SgdConfig(0.3, 8, 5.0), "adalora", 4, np.random.default_rng(0))
    assert len(trace.penalties) == 8
    assert trace.budgets == [BudgetSchedule(4, 2, 8, 2).initial] * 2 + trace.budgets[2:]
    assert trace.budgets[-1] == 2
    assert all(a.effective_rank() == 2 for a in model.adapters().values())
    assert total_penalty(model) >= 0


def test_decode_accuracy_bounds():
    model = _model()
    pairs = sample_pairs(TASK, 10, np.random.default_rng(0))
    assert 0.0 <= decode_accuracy(model, pairs) <= 1.0
    assert decode_accuracy(model, []) == 0.0


@pytest.fixture(scope="module")
def adalora_runs():
    out = []
    for seed in range(5):
        cfg = ExperimentConfig(mode="adalora", seed=seed, eval_count=0)
        report, model = execute(cfg)
        out.append((cfg, report, model))
    return out


def test_orthogonality_penalty_falls_after_warmup(adalora_runs):
    wins = 0
    for cfg, report, model in adalora_runs:
        at_warmup_end = report.penalties[cfg.schedule().warmup]
        wins += total_penalty(model) < at_warmup_end
    assert wins >= 4


def test_adalora_reaches_final_budget(adalora_runs):
    for cfg, report, model in adalora_runs:
        s = cfg.schedule()
        assert report.budgets[: s.warmup] == [s.initial] * s.warmup
        assert report.budgets[-1] == s.final
        assert all(a.effective_rank() == s.final for a in model.adapters().values())
