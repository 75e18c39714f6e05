import pytest

from kdkit.errors import ConfigError
from kdkit.matching import STRATEGIES, LayerPairPlan, build_plan, explicit_plan


def test_four_to_two_layer_plans():
    assert build_plan(4, 2, "first").pairs == ((1, 1), (2, 2))
    assert build_plan(4, 2, "last").pairs == ((1, 3), (2, 4))
    assert build_plan(4, 2, "dilatation").pairs == ((1, 2), (2, 4))
    assert build_plan(4, 2, "first_1").pairs == ((1, 1),)
    assert build_plan(4, 2, "last_1").pairs == ((2, 4),)


def test_equal_depths_give_identity_pairing():
    for strategy in ("first", "last", "dilatation"):
        assert build_plan(3, 3, strategy).pairs == ((1, 1), (2, 2), (3, 3))


def test_dilatation_twelve_to_four():
    assert build_plan(12, 4, "dilatation").pairs == ((1, 3), (2, 6), (3, 9), (4, 12))


def test_dilatation_rounds_up_on_uneven_ratio():
    assert build_plan(5, 3, "dilatation").pairs == ((1, 2), (2, 4), (3, 5))


def test_k_limits_first_and_last():
    assert build_plan(6, 3, "first", k=2).pairs == ((1, 1), (2, 2))
    assert build_plan(6, 3, "last", k=1).pairs == ((3, 6),)


def test_embeddings_pair_is_prepended():
    plan = build_plan(4, 2, "last", include_embeddings=True)
    assert plan.pairs == ((0, 0), (1, 3), (2, 4))
    assert plan.student == [0, 1, 2] and plan.teacher == [0, 3, 4]


def test_every_plan_is_monotone_and_in_range():
    for teacher_layers in range(1, 9):
        for student_layers in range(1, teacher_layers + 1):
            for strategy in STRATEGIES:
                for k in range(1, student_layers + 1):
                    plan = build_plan(teacher_layers, student_layers, strategy, k)
                    assert len(plan) >= 1
                    students, teachers = plan.student, plan.teacher
                    assert students == sorted(set(students)) and teachers == sorted(set(teachers))
                    assert all(1 <= s <= student_layers for s in students)
                    assert all(1 <= r <= teacher_layers for r in teachers)
                    if strategy == "dilatation":
                        assert plan.pairs[-1] == (student_layers, teacher_layers)


def test_invalid_requests():
    with pytest.raises(ConfigError, match="more layers"):
        build_plan(2, 4, "first")
    with pytest.raises(ConfigError, match="k=3"):
        build_plan(4, 2, "first", k=3)
    with pytest.raises(ConfigError, match="unknown matching strategy"):
        build_plan(4, 2, "middle")


def test_explicit_plans_are_validated():
    assert explicit_plan([[1, 1], [2, 4]], 4, 2).pairs == ((1, 1), (2, 4))
    with pytest.raises(ConfigError, match="monotone"):
        explicit_plan([[2, 2], [1, 3]], 4, 2)
    with pytest.raises(ConfigError, match="outside"):
        LayerPairPlan(((1, 5),), 2, 4)
