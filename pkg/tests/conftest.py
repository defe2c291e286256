import numpy as np
import pytest

from tlbias.engine import (
    Tape,
    Tensor,
    backward,
    finite_diff_grad,
    kernels,
    max_rel_error,
    small_entries_ok,
)

BACKENDS = sorted(kernels.BACKENDS)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(params=BACKENDS)
def backend(request):
    prev = kernels.BACKEND
    kernels.use(request.param)
    yield request.param
    kernels.use(prev)


def naive_conv3d(x, w, b):
    """Direct nested-loop cross-correlation with zero padding 1 (float64)."""
    N, C, H, W, D = x.shape
    cout = w.shape[0]
    xp = np.zeros((N, C, H + 2, W + 2, D + 2))
    xp[:, :, 1:-1, 1:-1, 1:-1] = x
    out = np.zeros((N, cout, H, W, D))
    for n in range(N):
        for o in range(cout):
            for h in range(H):
                for ww in range(W):
                    for d in range(D):
                        acc = b[o]
                        for c in range(C):
                            for i in range(3):
                                for j in range(3):
                                    for k in range(3):
                                        acc += w[o, c, i, j, k] * xp[n, c, h + i, ww + j, d + k]
                        out[n, o, h, ww, d] = acc
    return out


def activation_pattern(loss):
    """ReLU sign masks and max-pool argmax offsets recorded on the loss's tape."""
    parts = []
    for node in Tape.from_loss(loss).nodes:
        if node.op == "relu":
            parts.append((node.inputs[0].data > 0).tobytes())
        elif node.op == "maxpool3d":
            parts.append(node.saved["indices"].offsets.tobytes())
    return b"|".join(parts)


def pattern_stable_fd(loss_fn, t, picks, h_max=1e-3, h_min=1e-8):
    """Central differences taken with the largest step that crosses no kink.

    For each entry the step starts at ``h_max`` and shrinks by 4x until both
    ``x+h`` and ``x-h`` reproduce the unperturbed ReLU/max-pool pattern, so the
    two evaluations lie on the same smooth piece. Between kinks the model is
    polynomial in any single entry, and a large step keeps rounding error
    (about one ulp of the loss divided by ``2h``) far below small gradients.
    """
    base = activation_pattern(loss_fn())
    flat = t.data.reshape(-1)
    est = np.zeros(len(picks))
    for n, i in enumerate(picks):
        orig = flat[i]
        h = h_max
        while True:
            flat[i] = orig + h
            lp = loss_fn()
            same = activation_pattern(lp) == base
            flat[i] = orig - h
            lm = loss_fn()
            same = same and activation_pattern(lm) == base
            flat[i] = orig
            if same:
                est[n] = (float(lp.data) - float(lm.data)) / (2.0 * h)
                break
            h /= 4.0
            if h < h_min:
                raise AssertionError(f"entry {i} sits on a kink; no smooth step found")
    return est


def grad_check(loss_fn, tensors, rng, h=1e-5, per_tensor=None, rel=1e-6, abs_floor=1e-8,
               oracle="plain", h_max=1e-3, strict=True, refine=None, stats=None):
    """Compare backward() against central differences for every tensor.

    ``loss_fn()`` rebuilds the scalar loss from the current tensor values.
    ``per_tensor`` limits the number of checked entries per tensor (random
    subset); None checks every entry. ``oracle="pattern"`` switches to
    :func:`pattern_stable_fd`. Returns the worst relative error seen; with
    ``strict=False`` nothing is asserted and small-entry failures count as inf.

    ``refine(tensor, flat_index)`` may supply a more precise derivative; it is
    consulted for entries whose float64 estimate misses ``rel``, and its value
    then replaces that estimate. ``stats`` (a dict) receives entry counts.
    """
    for t in tensors:
        t.grad = None
    backward(loss_fn())
    worst = 0.0
    for t in tensors:
        assert t.grad is not None, "no gradient reached a tracked tensor"
        size = t.data.size
        if per_tensor is None or per_tensor >= size:
            picks = np.arange(size)
        else:
            picks = np.sort(rng.choice(size, per_tensor, replace=False))
        if oracle == "pattern":
            num = pattern_stable_fd(loss_fn, t, picks, h_max)
        else:
            num = finite_diff_grad(lambda _t: loss_fn(), t, h, picks)
        ana = t.grad.reshape(-1)[picks]
        if refine is not None:
            err = np.abs(ana - num)
            scale = np.maximum(np.abs(ana), np.abs(num))
            for j in np.flatnonzero((np.abs(ana) >= abs_floor) & (err > rel * scale)):
                num[j] = refine(t, int(picks[j]))
                if stats is not None:
                    stats["refined"] = stats.get("refined", 0) + 1
        if stats is not None:
            stats["entries"] = stats.get("entries", 0) + len(picks)
        worst = max(worst, max_rel_error(ana, num, abs_floor))
        if not small_entries_ok(ana, num, abs_floor):
            assert not strict, "entries below the absolute floor disagree"
            worst = np.inf
    if not strict:
        return worst
    assert worst <= rel, f"max relative gradient error {worst:.3e} > {rel:.1e}"
    return worst


def tensor(a, grad=False, dtype="f64"):
    return Tensor(np.array(a, dtype=np.float64), requires_grad=grad, dtype=dtype)


def generic_point(model, rng):
    """Move a model off the symmetric initial point before gradient checks.

    Zero conv biases make decoder pre-activations exactly 0 wherever the
    unpooled map is empty, which puts ReLU on its kink. Random biases and
    running statistics, plus a positive BN shift that keeps most units active,
    give a point where the network is differentiable and well conditioned.
    """
    for name, p in model.parameters().items():
        if name.endswith("bias"):
            p.data[:] = 0.1 * rng.standard_normal(p.shape)
        elif name.endswith("beta"):
            p.data[:] = 1.0 + 0.1 * rng.standard_normal(p.shape)
        elif name.endswith("gamma"):
            p.data[:] = 1.0 + 0.1 * rng.standard_normal(p.shape)
    for name, buf in model.buffers().items():
        if name.endswith("running_mean"):
            buf[:] = 0.1 * rng.standard_normal(buf.shape)
        else:
            buf[:] = 1.0 + 0.2 * rng.random(buf.shape)
    return model


# ---- acceptance reporting ----------------------------------------------------

ACCEPTANCE_LINES: list = []


def report_criterion(number: int, title: str, passed: bool, detail: str) -> str:
    line = f"[acceptance {number}] {'PASS' if passed else 'FAIL'}  {title}: {detail}"
    ACCEPTANCE_LINES.append((number, line))
    print(line)
    return line


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for _, line in sorted(ACCEPTANCE_LINES):
        terminalreporter.write_line(line)
