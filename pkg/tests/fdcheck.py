"""Central finite-difference gradient oracle shared by the test suite.

The oracle rebuilds the forward graph from scratch for every perturbed
coordinate, so it is independent of the tape's backward rules.
"""

import numpy as np

from structsr.autodiff import Tensor

EPS = 1e-5
REL_TOL = 1e-4
# Relative error is guarded below this scale so the ~1e-9 central-difference
# noise floor cannot fail near-zero gradients.
SCALE_FLOOR = 1e-2


def numeric_grads(build_loss, tensors, eps=EPS):
    """Central-difference gradients of ``build_loss()`` w.r.t. ``tensors``.

    ``build_loss`` must construct the scalar loss from the tensors' current
    ``.data`` each time it is called.
    """
    grads = []
    for t in tensors:
        flat = t.data.ravel()
        g = np.zeros_like(flat)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            fp = build_loss().data.item()
            flat[i] = orig - eps
            fm = build_loss().data.item()
            flat[i] = orig
            g[i] = (fp - fm) / (2.0 * eps)
        grads.append(g.reshape(t.shape))
    return grads


def numeric_grad_at(build_loss, tensor, flat_index, eps=EPS):
    """Central difference for a single coordinate of one tensor."""
    flat = tensor.data.ravel()
    orig = flat[flat_index]
    flat[flat_index] = orig + eps
    fp = build_loss().data.item()
    flat[flat_index] = orig - eps
    fm = build_loss().data.item()
    flat[flat_index] = orig
    return (fp - fm) / (2.0 * eps)


def rel_err(a, b):
    denom = max(abs(a), abs(b), SCALE_FLOOR)
    return abs(a - b) / denom


def assert_grads_match(build_loss, tensors, eps=EPS, tol=REL_TOL, mask_fns=None):
    """Run backward once and compare every coordinate against the oracle.

    ``mask_fns`` optionally maps tensor index -> boolean mask of coordinates
    to check (used to skip kink neighbourhoods of relu/abs-style ops).
    """
    for t in tensors:
        t.zero_grad()
    loss = build_loss()
    loss.backward()
    numeric = numeric_grads(build_loss, tensors, eps)
    for ti, (t, ng) in enumerate(zip(tensors, numeric)):
        assert t.grad is not None, f"tensor {ti} got no gradient"
        ag = t.grad
        mask = np.ones(t.shape, dtype=bool)
        if mask_fns is not None and mask_fns.get(ti) is not None:
            mask = mask_fns[ti](t.data)
        worst = 0.0
        for idx in zip(*np.nonzero(mask)):
            worst = max(worst, rel_err(float(ag[idx]), float(ng[idx])))
        assert worst <= tol, f"tensor {ti}: worst relative error {worst:.3e} > {tol}"


def spot_check_params(build_loss, params, rng, n_coords=10, eps=EPS, tol=REL_TOL):
    """Compare analytic vs numeric gradient on sampled parameter coordinates."""
    for p in params:
        p.zero_grad()
    loss = build_loss()
    loss.backward()
    checked = 0
    worst = 0.0
    for _ in range(n_coords):
        p = params[int(rng.integers(len(params)))]
        assert p.grad is not None
        i = int(rng.integers(p.size))
        analytic = float(p.grad.ravel()[i])
        numeric = numeric_grad_at(build_loss, p, i, eps)
        worst = max(worst, rel_err(analytic, numeric))
        checked += 1
    assert checked == n_coords
    assert worst <= tol, f"worst spot-check relative error {worst:.3e} > {tol}"
