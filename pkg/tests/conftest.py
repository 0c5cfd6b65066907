import numpy as np
import pytest

from bgsplit.data import DatasetManifest
from bgsplit.losses import bg_thresholded_softmax, cross_entropy, softmax
from bgsplit.model import init_params


def reference_total_loss(params, X, y, t, lambda_g, use_aux):
    """Per-example loop over the scalar kernels: an independent route to the
    batch objective used by the finite-difference checks."""
    total_main = 0.0
    total_aux = 0.0
    for i in range(len(y)):
        h = X[i]
        for W, bias in params.trunk:
            h = np.maximum(W @ h + bias, 0.0)
        z = params.w @ h + params.b
        if params.clamp_background:
            p = bg_thresholded_softmax(z[1:], params.b0)
        else:
            p = softmax(z)
        total_main += cross_entropy(p, int(y[i]))
        if use_aux:
            u = params.v @ h + params.c
            e = np.exp(u - u.max())
            q = e / e.sum()
            total_aux += -np.log(max(q[int(t[i]) - 1], 1e-30))
    n = len(y)
    return total_main / n + (lambda_g * (total_aux / n) if use_aux else 0.0)


def random_instance(rng, clamp=None):
    N = int(rng.integers(1, 6))
    K = int(rng.integers(1, 9))
    d_in = int(rng.integers(1, 17))
    depth = int(rng.integers(0, 3))
    trunk = [int(rng.integers(1, 17)) for _ in range(depth)]
    B = int(rng.integers(1, 9))
    clamp = bool(rng.integers(0, 2)) if clamp is None else clamp
    params = init_params(d_in, trunk, N, K, seed=int(rng.integers(1 << 31)),
                         clamp_background=clamp, b0=float(rng.normal()))
    # non-zero biases so ReLU kinks are not hit at exactly zero
    for _, arr in params.named_arrays():
        arr += 0.1 * rng.standard_normal(arr.shape)
    params.apply_clamp()
    X = rng.standard_normal((B, d_in))
    y = rng.integers(0, N + 1, size=B)
    t = rng.integers(1, K + 1, size=B)
    return params, X, y, t


def tiny_manifest(features, original, split=None, ids=None, N=0, y=None):
    n = len(original)
    return DatasetManifest(
        ids=ids or [f"e{i:02d}" for i in range(n)],
        X=np.asarray(features, dtype=float).reshape(n, -1),
        original_labels=list(original),
        y=np.zeros(n, dtype=int) if y is None else y,
        split=split or ["train"] * n,
        N=N,
    )


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def oracle_setup(N=3, per_class=4, n_bg=10, b0=0.1):
    """A manifest plus an identity-trunk thresholded model that is certain of
    every test label: foreground examples are scaled one-hot vectors, the
    background sits at the origin."""
    from bgsplit.model import init_params

    labels, feats = [], []
    for n in range(1, N + 1):
        for _ in range(per_class):
            labels.append(f"f{n}")
            feats.append(np.eye(N)[n - 1] * 60.0)
    for _ in range(n_bg):
        labels.append("bg")
        feats.append(np.zeros(N))
    n = len(labels)
    y = np.array([int(lab[1:]) if lab != "bg" else 0 for lab in labels])
    m = DatasetManifest(ids=[f"o{i:03d}" for i in range(n)], X=np.array(feats),
                        original_labels=labels, y=y, split=["test"] * n, N=N,
                        foreground_categories=tuple(f"f{k}" for k in range(1, N + 1)))
    params = init_params(N, (), N, 0, seed=0, clamp_background=True, b0=b0)
    params.w[1:] = np.eye(N)
    params.b[1:] = 0.0
    params.apply_clamp()
    return m, params


ACCEPTANCE_LINES = []


def record_criterion(number, ok, detail):
    """Keep one pass/fail line per acceptance criterion for the run summary."""
    line = f"criterion {number:>2}: {'PASS' if ok else 'FAIL'}  {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)
    return ok


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split(":")[0].split()[1])):
            terminalreporter.write_line(line)
