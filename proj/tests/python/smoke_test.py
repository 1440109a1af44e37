"""Smoke tests for the python bindings. Run with PYTHONPATH pointing at the
build's python/ directory (ctest does this automatically)."""

import math
import shutil
import tempfile

import sepbn


def approx(a, b, eps=1e-9):
    assert abs(a - b) <= eps, f"{a} != {b} (eps {eps})"


def test_ops():
    y, shape = sepbn.conv2d([2.0], [1, 1, 1, 1], [3.0], [1, 1, 1, 1], [0.0])
    assert shape == [1, 1, 1, 1]
    approx(y[0], 6.0)

    p, _ = sepbn.temp_softmax([math.log(4.0), 0.0], [1, 2], tau=1.0)
    approx(p[0], 0.8, 1e-12)
    approx(p[1], 0.2, 1e-12)
    p2, _ = sepbn.temp_softmax([math.log(4.0), 0.0], [1, 2], tau=2.0)
    approx(p2[0], 2.0 / 3.0, 1e-12)

    approx(sepbn.l1_loss([1.0, -1.0], [0.0, 0.0]), 1.0)


def test_schedules():
    approx(sepbn.cosine_lr(120), 1e-3, 0)
    assert abs(sepbn.cosine_lr(499) - 5e-6) / 5e-6 < 0.01
    approx(sepbn.cosine_lr(310), (1e-3 + 5e-6) / 2, 1e-18)
    approx(sepbn.tau_schedule(0), 30.0, 0)
    approx(sepbn.tau_schedule(30), 1.0, 0)
    approx(sepbn.tau_schedule(15), 15.5, 1e-12)


def test_metrics():
    approx(sepbn.nme_bbox([3.0, 4.0], [0.0, 0.0], 10.0, 10.0), 50.0, 1e-12)
    approx(sepbn.failure_rate([1.0, 2.0, 3.0, 11.0], 10.0), 25.0, 0)
    approx(sepbn.param_similarity([[1, 2, 3], [1, 2, 3], [1, 2, 3]]), 1.0, 1e-12)
    approx(sepbn.param_similarity([[1, 0], [0, 1]]), 0.0, 1e-12)


def test_sepbn_module():
    mod = sepbn.SepBN(channels=8, k=3, g=2, t=2, seed=3)
    mod.set_tau(5.0)
    import random

    random.seed(11)
    x = [random.uniform(-2, 2) for _ in range(2 * 8 * 5 * 5)]
    pi, shape = mod.attention(x, [2, 8, 5, 5])
    assert shape == [2, 2, 3]
    for row in range(4):
        chunk = pi[3 * row : 3 * row + 3]
        assert all(0.0 <= v <= 1.0 for v in chunk)
        approx(sum(chunk), 1.0, 1e-12)

    y, yshape = mod.forward(x, [2, 8, 5, 5], train=True)
    assert yshape == [2, 8, 5, 5]
    assert all(math.isfinite(v) for v in y)


def test_desknet():
    net = sepbn.DeskNet(landmarks=5, norm="bn", input_size=32, seed=9, zero_final=True)
    assert net.param_count() > 0
    x = [0.0] * (2 * 3 * 32 * 32)
    y, shape = net.forward(x, [2, 3, 32, 32], train=False)
    assert shape == [2, 10]
    assert all(v == 0.0 for v in y)  # zero image, zero head
    px, _ = net.predict_pixels(x, [2, 3, 32, 32])
    assert all(abs(v - 16.0) < 1e-12 for v in px)  # crop center

    audit = sepbn.DeskNet(landmarks=5, norm="sepbn", input_size=32, seed=10, zero_final=False)
    audit.set_tau(2.0)
    assert audit.gradcheck_max_rel_err(batch=2, samples=20, seed=12) < 1e-4


def test_synth_roundtrip():
    tmp = tempfile.mkdtemp(prefix="sepbn_py_")
    try:
        sepbn.synth_generate(tmp, n_samples=10, image_size=32, landmarks=5, seed=4)
        info = sepbn.dataset_summary(tmp + "/manifest.csv")
        assert info["size"] == 10
        assert info["protocol"] == "synth5"
        assert info["landmarks"] == 5
    finally:
        shutil.rmtree(tmp, ignore_errors=True)


if __name__ == "__main__":
    test_ops()
    test_schedules()
    test_metrics()
    test_sepbn_module()
    test_desknet()
    test_synth_roundtrip()
    print("python smoke tests passed")
