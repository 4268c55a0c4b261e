import math

import numpy as np
import pytest

from hopqa.autodiff import Tensor
from hopqa.losses import (
    loss_alignment,
    loss_confidence,
    loss_generation,
    loss_retrieval,
    loss_stop,
    total_loss,
)


def T(x):
    return Tensor(np.asarray(x, dtype=np.float64))


def _log_softmax(x):
    x = np.asarray(x, dtype=np.float64)
    return x - np.log(np.exp(x).sum(axis=-1, keepdims=True))


def _bce(z, y):
    p = 1 / (1 + np.exp(-np.asarray(z)))
    y = np.asarray(y, dtype=np.float64)
    return float(-(y * np.log(p) + (1 - y) * np.log(1 - p)).mean())


def test_alignment_uniform():
    assert loss_alignment(T(np.zeros((1, 4))), [2]).item() == pytest.approx(math.log(4), abs=1e-12)


def test_alignment_confident_target():
    assert loss_alignment(T([[60.0, 0.0]]), [0]).item() < 1e-20


def test_alignment_skips_untargeted_rows():
    sim = np.random.default_rng(0).normal(size=(3, 4))
    got = loss_alignment(T(sim), [1, None, 3]).item()
    lp = _log_softmax(sim)
    assert got == pytest.approx(-(lp[0, 1] + lp[2, 3]) / 2, rel=1e-12)
    assert loss_alignment(T(sim), [None, None, None]).item() == 0.0


def test_confidence():
    assert loss_confidence(T([0.0, 0.0]), [1, 0]).item() == pytest.approx(math.log(2), abs=1e-12)
    assert loss_confidence(T([50.0, -50.0]), [1, 0]).item() < 1e-20
    z = np.random.default_rng(1).normal(size=5)
    y = [1, 0, 0, 1, 1]
    assert loss_confidence(T(z), y).item() == pytest.approx(_bce(z, y), rel=1e-12)


def test_retrieval():
    assert loss_retrieval(T(np.zeros((1, 8))), [5]).item() == pytest.approx(math.log(8), abs=1e-12)
    assert loss_retrieval(None, []).item() == 0.0
    a = np.random.default_rng(2).normal(size=(2, 5))
    lp = _log_softmax(a)
    assert loss_retrieval(T(a), [4, 0]).item() == pytest.approx(-(lp[0, 4] + lp[1, 0]) / 2, rel=1e-12)


def test_stop():
    assert loss_stop(T([0.0]), [0]).item() == pytest.approx(math.log(2), abs=1e-12)
    assert loss_stop(T([40.0, 40.0, -40.0]), [1, 1, 0]).item() < 1e-15
    z = np.random.default_rng(3).normal(size=3)
    assert loss_stop(T(z), [1, 1, 0]).item() == pytest.approx(_bce(z, [1, 1, 0]), rel=1e-12)


def test_generation():
    uniform = T(np.full((3, 8), -math.log(8)))
    assert loss_generation(uniform, [1, 2, 3]).item() == pytest.approx(3 * math.log(8), abs=1e-12)
    onehot = np.full((2, 4), -np.inf)
    onehot[0, 1] = onehot[1, 3] = 0.0
    assert loss_generation(T(onehot), [1, 3]).item() == 0.0
    lp = _log_softmax(np.random.default_rng(4).normal(size=(3, 6)))
    assert loss_generation(T(lp), [0, 5, 2]).item() == pytest.approx(-(lp[0, 0] + lp[1, 5] + lp[2, 2]), rel=1e-12)


def test_total():
    assert total_loss([0, 0, 0, 0, 0]).total == 0.0
    assert total_loss([1, 1, 1, 1, 1]).total == 5.0
    parts = [0.1, 0.2, 0.3, 0.4, 0.5]
    b = total_loss(parts)
    assert abs(b.total - sum(b.as_dict()[k] for k in ("L_a", "L_c", "L_r", "L_s", "L_g"))) <= 1e-6
    with pytest.raises(ValueError):
        total_loss([1, 2])
