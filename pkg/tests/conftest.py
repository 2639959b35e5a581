import numpy as np
import pytest

from slicepaint.tensor import Parameter, Tape, Tensor, backward


@pytest.fixture
def rng():
    return np.random.default_rng(42)


def gradcheck(make_loss, leaves, h=1e-6, max_checks=64, atol=1e-6):
    """Compare analytic gradients of a scalar loss against central differences.

    make_loss() must rebuild the loss from the (float64) leaf tensors each
    call.  Returns the worst relative error over a deterministic sample of
    leaf entries.  Pairs where both values sit below atol are treated as
    matching: finite differences cannot resolve a true zero (e.g. a bias
    followed by a normalization) from rounding noise.
    """
    for leaf in leaves:
        if isinstance(leaf, Parameter):
            leaf.zero_grad()
        else:
            leaf.grad = None
    with Tape() as tape:
        loss = make_loss()
    backward(loss, tape)
    analytic = [np.zeros_like(l.data) if l.grad is None else l.grad.copy() for l in leaves]

    worst = 0.0
    pick = np.random.default_rng(0)
    for leaf, grad in zip(leaves, analytic):
        flat = leaf.data.reshape(-1)
        gflat = grad.reshape(-1)
        if flat.size <= max_checks:
            idxs = np.arange(flat.size)
        else:
            idxs = pick.choice(flat.size, size=max_checks, replace=False)
        for i in idxs:
            orig = flat[i]
            flat[i] = orig + h
            lp = make_loss().item()
            flat[i] = orig - h
            lm = make_loss().item()
            flat[i] = orig
            fd = (lp - lm) / (2.0 * h)
            scale = max(abs(fd), abs(gflat[i]))
            if scale < atol:
                continue
            worst = max(worst, abs(fd - gflat[i]) / scale)
    return worst


def leaf(rng, shape, scale=1.0):
    """Float64 leaf tensor for gradient checks."""
    return Tensor(rng.standard_normal(shape) * scale)
