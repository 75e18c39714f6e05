import numpy as np
import pytest

from kdkit.checkpoint import save_model
from kdkit.errors import ConfigError, DivergenceError, NumericalError
from kdkit.losses import ProjectionBank
from kdkit.matching import build_plan
from kdkit.model import ModelConfig, TransformerModel
from kdkit.objective import DistillObjective
from kdkit.tasks import TaskSpec, generate_task
from kdkit.tensor import parameter, reduce_sum
from kdkit.trainer import TrainSchedule, distill, evaluate, predict, train_loop, train_task_model


@pytest.fixture(scope="module")
def dataset():
    return generate_task(TaskSpec("patterns", num_labels=4, n_train=256, n_dev=64, seq_len=12, vocab_size=32))


def _model(layers=2, width=16, seed=0):
    config = ModelConfig(num_layers=layers, hidden_dim=width, num_heads=2, vocab_size=32, max_seq_len=16,
                         num_labels=4)
    return TransformerModel(config, seed=seed)


def test_schedule_validation():
    with pytest.raises(ConfigError) as info:
        TrainSchedule(steps=-1, batch_size=0, warmup_frac=1.5)
    assert len(info.value.messages) == 3


def test_supervised_training_lowers_the_loss(dataset):
    model = _model()
    result = train_task_model(model, dataset, TrainSchedule(steps=150, batch_size=32, lr=3e-3))
    history = result.history
    assert len(history) == 150
    assert history["total"].iloc[-20:].mean() < history["total"].iloc[:20].mean()
    assert 0.0 <= result.metrics["dev_metric"] <= 1.0


def test_zero_steps_leave_the_student_unchanged(dataset):
    teacher, student = _model(layers=4, seed=1), _model()
    before = student.state_dict()
    result = distill(teacher, student, dataset, DistillObjective(), TrainSchedule(steps=0))
    assert len(result.history) == 0
    for name, values in before.items():
        assert np.array_equal(student.params[name].data, values)


def test_clone_with_zero_learning_rate_keeps_teacher_metrics(dataset):
    teacher = _model(layers=2, seed=3)
    student = teacher.clone()
    result = distill(teacher, student, dataset, DistillObjective(hard_weight=1.0),
                     TrainSchedule(steps=5, batch_size=16, lr=0.0))
    assert result.metrics["dev_metric"] == evaluate(teacher, dataset)
    assert np.array_equal(predict(student, dataset.dev_ids), predict(teacher, dataset.dev_ids))


def test_distillation_reduces_the_feature_term(dataset):
    teacher, student = _model(layers=4, width=24, seed=5), _model(seed=6)
    objective = DistillObjective.from_plan(["hidden_mse"], build_plan(4, 2, "last"), hard_weight=0.5)
    result = distill(teacher, student, dataset, objective, TrainSchedule(steps=120, batch_size=32, lr=3e-3))
    history = result.history
    assert list(history.columns) == ["step", "total", "l_res", "l_hard", "hidden_mse@1-3", "hidden_mse@2-4",
                                     "eval_metric"]
    assert history["total"].iloc[-10:].mean() < history["total"].iloc[:10].mean()
    assert sorted(result.bank.projections) == [(1, 3), (2, 4)]
    assert all(not name.startswith("projection") for name in student.params)


def test_projections_train_with_the_student(dataset):
    teacher, student = _model(layers=4, width=24, seed=5), _model(seed=6)
    bank = ProjectionBank.for_models(teacher, student)
    objective = DistillObjective.from_plan(["pkd"], build_plan(4, 2, "last_1"))
    distill(teacher, student, dataset, objective, TrainSchedule(steps=5, batch_size=16, lr=1e-2), bank)
    assert not np.array_equal(bank.get(2, 4).data, np.eye(24, 16))


def test_auto_weight_calibrates_terms(dataset):
    teacher, student = _model(layers=4, seed=1), _model(seed=2)
    objective = DistillObjective.from_plan(["mmd"], build_plan(4, 2, "last_1"))
    result = distill(teacher, student, dataset, objective, TrainSchedule(steps=2, batch_size=16),
                     auto_weight=True)
    assert result.objective.terms[0].weight != 1.0


def test_mismatched_heads_are_rejected(dataset):
    teacher = TransformerModel(ModelConfig(num_layers=2, hidden_dim=16, num_heads=2, vocab_size=32,
                                           max_seq_len=16, num_labels=3))
    with pytest.raises(ConfigError, match="heads differ"):
        distill(teacher, _model(), dataset, DistillObjective(), TrainSchedule(steps=1))


def test_non_finite_breakdown_raises_divergence():
    w = parameter(np.zeros(2))

    def step(index):
        loss = reduce_sum(w * 1.0)
        return loss, {"total": float("nan"), "l_res": 0.0, "l_hard": 0.0}

    with pytest.raises(DivergenceError) as info:
        train_loop({"w": w}, step, 8, TrainSchedule(steps=3, batch_size=4))
    assert info.value.step == 1 and info.value.term == "total"


def test_numerical_error_becomes_divergence_with_term():
    def step(index):
        raise NumericalError("softmax produced non-finite values", term="cos@1-1")

    with pytest.raises(DivergenceError) as info:
        train_loop({"w": parameter(np.zeros(1))}, step, 8, TrainSchedule(steps=3, batch_size=4))
    assert info.value.term == "cos@1-1"


def test_eval_metric_is_recorded_on_schedule():
    w = parameter(np.ones(1))

    def step(index):
        loss = reduce_sum(w * w)
        return loss, {"total": loss.item(), "l_res": loss.item(), "l_hard": 0.0}

    calls = []
    history = train_loop({"w": w}, step, 8, TrainSchedule(steps=6, batch_size=4, eval_every=3),
                         evaluate=lambda: calls.append(1) or 0.5)
    assert len(calls) == 2
    assert history["eval_metric"].notna().sum() == 2
    assert history["total"].iloc[-1] < history["total"].iloc[0]
    assert isinstance(history["total"].iloc[0], float)
    assert w.data[0] < 1.0


@pytest.mark.parametrize("seed", range(20))
def test_distillation_lowers_the_total_loss_for_every_seed(dataset, seed):
    teacher, student = _model(layers=2, seed=100 + seed), _model(seed=seed)
    objective = DistillObjective.from_plan(["hidden_mse"], build_plan(2, 2, "last_1"), hard_weight=0.5)
    result = distill(teacher, student, dataset, objective,
                     TrainSchedule(steps=200, batch_size=16, lr=3e-3, seed=seed))
    totals = result.history["total"]
    assert totals.iloc[-20:].mean() < totals.iloc[:20].mean()


def test_distillation_never_touches_the_teacher(dataset):
    teacher, student = _model(layers=4, width=24, seed=5), _model(seed=6)
    before = teacher.state_dict()
    objective = DistillObjective.from_plan(["hidden_mse", "attention_ce"], build_plan(4, 2, "dilatation"),
                                           hard_weight=1.0)
    distill(teacher, student, dataset, objective, TrainSchedule(steps=8, batch_size=16, lr=1e-2))
    for name, values in before.items():
        assert np.array_equal(teacher.params[name].data, values), name
        assert teacher.params[name].data.dtype == values.dtype


def test_same_seed_gives_the_same_student_checkpoint(dataset, tmp_path):
    blobs = []
    for run in ("a", "b"):
        teacher, student = _model(layers=4, seed=1), _model(seed=2)
        objective = DistillObjective.from_plan(["pkd", "value_relation"], build_plan(4, 2, "last"),
                                               hard_weight=0.2, temperature=2.0)
        distill(teacher, student, dataset, objective, TrainSchedule(steps=10, batch_size=16, seed=7))
        path = save_model(student, tmp_path / f"{run}.kdckpt")
        with open(path, "rb") as handle:
            blobs.append(handle.read())
    assert blobs[0] == blobs[1]


def test_accuracy_is_reported_for_a_single_dev_example():
    single = generate_task(TaskSpec("patterns", num_labels=4, n_train=32, n_dev=1, seq_len=12, vocab_size=32))
    result = train_task_model(_model(), single, TrainSchedule(steps=1, batch_size=16))
    assert result.metrics["dev_metric"] in (0.0, 1.0)

    spec = TaskSpec("score", n_train=32, n_dev=1, seq_len=12, vocab_size=32)
    config = ModelConfig(num_layers=1, hidden_dim=8, num_heads=2, vocab_size=32, max_seq_len=16,
                         num_labels=spec.model_labels)
    result = train_task_model(TransformerModel(config), generate_task(spec), TrainSchedule(steps=1, batch_size=16))
    assert "dev_metric" not in result.metrics
