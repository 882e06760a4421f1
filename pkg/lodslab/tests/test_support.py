import sys
import os

sys.path.insert(0, os.path.abspath(os.path.join(os.path.dirname(__file__), "..", "..")))

import csv
import json
import math
import threading
import unittest

import numpy as np
import pytest

from lodslab import gradcore as gc
from lodslab.datasets import class_samples, load_dataset, mixture_modes, mixture2d, shapes
from lodslab.gradcore import Tensor
from lodslab.metrics import METRICS_HEADER, MetricsWriter, write_json
from lodslab.op_tracker import OpTracker
from lodslab.optim import SGD, Adam, make_optimizer
from lodslab.utils import ConditionError, ConfigError, LodsError, format_float, keyed_rng, parse_guidance


class TestOpTracker(unittest.TestCase):
    def test_counts_and_summary(self):
        tracker = OpTracker("net")
        tracker.add_forward()
        tracker.add_forward(2)
        tracker.add_backward()
        self.assertEqual(tracker.total_ops(), 4)
        self.assertEqual(tracker.summary(), "[net] Forwards: 3, Backwards: 1, Total: 4")

    def test_since_snapshot(self):
        tracker = OpTracker()
        tracker.add_forward(5)
        before = tracker.snapshot()
        tracker.add_forward(2)
        tracker.add_backward()
        self.assertEqual(tracker.since(before), {"forwards": 2, "backwards": 1})

    def test_thread_safe_increments(self):
        tracker = OpTracker()
        threads = [threading.Thread(target=lambda: [tracker.add_forward() for _ in range(1000)]) for _ in range(4)]
        for th in threads:
            th.start()
        for th in threads:
            th.join()
        self.assertEqual(tracker.forward_count, 4000)


def quadratic_descent(opt_kind, steps=400, **kwargs):
    with gc.precision("float64"):
        p = Tensor([3.0, -2.0], requires_grad=True)
        opt = make_optimizer(opt_kind, [p], **kwargs)
        for _ in range(steps):
            opt.zero_grad()
            gc.backward(gc.reduce_sum(gc.square(p)))
            opt.step()
    return p


@pytest.mark.parametrize("kind,kwargs", [("sgd", {"lr": 0.1}), ("sgd", {"lr": 0.05, "momentum": 0.9}),
                                         ("adam", {"lr": 0.1})])
def test_optimizers_minimise_a_quadratic(kind, kwargs):
    p = quadratic_descent(kind, **kwargs)
    assert np.abs(p.data).max() < 5e-2


def test_sgd_step_value():
    p = Tensor([1.0, 2.0], requires_grad=True)
    p.grad = np.array([0.5, -1.0], dtype=np.float32)
    SGD([p], lr=0.1).step()
    np.testing.assert_allclose(p.data, [0.95, 2.1], rtol=1e-6)
    assert p.dtype == np.float32


def test_step_rebinds_instead_of_mutating():
    p = Tensor([1.0], requires_grad=True)
    view = gc.detach(p)
    p.grad = np.ones(1, dtype=np.float32)
    Adam([p], lr=0.5).step()
    assert view.data[0] == 1.0
    assert p.data[0] != 1.0


def test_optimizer_argument_errors():
    p = Tensor([1.0], requires_grad=True)
    with pytest.raises(ValueError):
        make_optimizer("sgd", [p], lr=0.0)
    with pytest.raises(ValueError):
        make_optimizer("sgd", [p], lr=0.1, momentum=1.0)
    with pytest.raises(ValueError):
        make_optimizer("rmsprop", [p], lr=0.1)


def test_keyed_rng_streams():
    a = keyed_rng(1, 2, 0).standard_normal(4)
    assert np.array_equal(a, keyed_rng(1, 2, 0).standard_normal(4))
    assert not np.array_equal(a, keyed_rng(1, 2, 1).standard_normal(4))
    with pytest.raises(ValueError):
        keyed_rng(1, -1)


@pytest.mark.parametrize("text,expected", [("inf", math.inf), ("INF", math.inf), ("7.5", 7.5), (3, 3.0), (None, None)])
def test_parse_guidance(text, expected):
    assert parse_guidance(text) == expected


def test_format_float_and_errors():
    assert format_float(None) == ""
    assert format_float(math.inf) == "inf"
    assert format_float(0.1) == "0.1"
    err = ConditionError("Unknown condition id 9")
    assert str(err) == "Unknown condition id 9"
    assert isinstance(err, LodsError) and isinstance(err, KeyError)


def test_metrics_writer(tmp_path):
    path = tmp_path / "m.csv"
    with MetricsWriter(path) as writer:
        writer.write({"step": 0, "distill_grad_norm": 1.5, "alignment_loss": None, "t": 20, "forwards": 2,
                      "backwards": 0})
    assert writer.rows == 1
    assert path.read_text() == ",".join(METRICS_HEADER) + "\n0,1.5,,20,2,0\n"
    with open(path, newline="") as fh:
        assert len(list(csv.reader(fh))) == 2


def test_write_json_handles_arrays(tmp_path):
    path = write_json(tmp_path / "out" / "s.json", {"theta": np.array([1.0, 2.0])})
    assert json.loads(path.read_text()) == {"theta": [1.0, 2.0]}


def test_mixture2d_is_balanced_and_seeded():
    data, labels = mixture2d(400, seed=1)
    again, _ = mixture2d(400, seed=1)
    assert data.shape == (400, 2)
    assert np.array_equal(data, again)
    assert (labels == 0).sum() == (labels == 1).sum() == 200
    modes = mixture_modes()
    for label in (0, 1):
        pts = data[labels == label]
        nearest = np.min(np.linalg.norm(pts[:, None, :] - modes[label][None], axis=2), axis=1)
        assert nearest.max() < 2.0


def test_class_samples():
    pts = class_samples(1, 100, seed=0, mode_std=0.01)
    assert np.allclose(np.abs(pts), 2.0, atol=0.1)
    assert np.all(np.sign(pts[:, 0]) != np.sign(pts[:, 1]))
    with pytest.raises(ConfigError):
        class_samples(2, 10)


def test_shapes_dataset():
    images, labels = shapes(10, seed=0)
    assert images.shape == (10, 64)
    assert images.min() == 0.0 and images.max() == 1.0
    assert set(labels) == {0, 1}


def test_load_dataset_errors():
    with pytest.raises(ConfigError):
        load_dataset("cifar", 10)
    with pytest.raises(ConfigError):
        load_dataset("mixture2d", 0)
