import numpy as np
import pytest

from visground import tensor as T
from visground.gradcheck import MICRO_CONFIG, THRESHOLD, run_gradcheck
from visground.model import GroundingModel


@pytest.fixture(scope="module")
def report():
    return run_gradcheck(seeds=1)


def test_one_seed_passes(report):
    assert report.passed, report.lines()
    assert all(err <= THRESHOLD for err in report.component_max().values())


def test_components_listed(report):
    assert set(report.errors) == {"linear", "attention", "relative_attention", "layer_norm", "verification",
                                  "context_encoder", "decoder_stage", "box_head", "full_loss"}
    assert {"verification.alpha", "verification.sigma"} <= set(report.errors["verification"])


def test_full_loss_covers_every_tensor_once(report):
    names = [n for n, _ in GroundingModel(MICRO_CONFIG).named_parameters()]
    assert len(names) == len(set(names))
    assert set(report.errors["full_loss"]) == set(names)
    lines = report.lines()
    start = lines.index(next(line for line in lines if line.startswith("full_loss")))
    listed = [line.split()[0] for line in lines[start + 1 :]]
    assert sorted(listed) == sorted(names)


@pytest.mark.parametrize("op", ["matmul", "softmax", "exp"])
def test_corrupted_adjoint_is_caught(op):
    bad = run_gradcheck(seeds=1, corrupt=op)
    assert not bad.passed
    assert op not in T.ADJOINT_FAULTS


def test_finite_difference_on_known_function():
    x = T.Tensor(np.array([0.3, -1.2]), requires_grad=True)
    err = T.finite_difference_check(lambda: (x * x * x).sum(), x)
    assert err <= 1e-8
