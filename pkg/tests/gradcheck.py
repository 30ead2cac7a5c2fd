"""Central finite-difference gradient checking shared by the test suite."""

import numpy as np

import gvmt.tensor as T


def numeric_grad(f, x, h=1e-5):
    """d f / d x by central differences, elementwise. f maps an array to a float."""
    x = np.asarray(x, dtype=np.float64)
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        xp = x.copy()
        xp[i] += h
        xm = x.copy()
        xm[i] -= h
        g[i] = (f(xp) - f(xm)) / (2.0 * h)
    return g


def rel_err(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    denom = max(np.linalg.norm(a.ravel()), np.linalg.norm(b.ravel()), 1e-12)
    return np.linalg.norm((a - b).ravel()) / denom


def check_grads(make_loss, inputs, h=1e-5, tol=1e-4):
    """Verify taped gradients of a scalar against finite differences.

    ``make_loss`` receives one keyword Tensor per entry of ``inputs`` (a dict
    of name -> array) and returns a scalar Tensor.  The analytic gradients
    come from a single backward pass; each input is then perturbed
    numerically.  Asserts the relative error stays under ``tol``.
    """
    tensors = {k: T.Tensor(v, requires_grad=True) for k, v in inputs.items()}
    loss = make_loss(**tensors)
    T.backward(loss)
    analytic = {}
    for k, t in tensors.items():
        analytic[k] = np.zeros_like(t.data) if t.grad is None else t.grad.copy()

    for name, arr in inputs.items():

        def f(x, _name=name):
            frozen = {k: T.Tensor(v) for k, v in inputs.items()}
            frozen[_name] = T.Tensor(x)
            return float(make_loss(**frozen).data)

        num = numeric_grad(f, arr, h=h)
        err = rel_err(analytic[name], num)
        assert err < tol, f"gradient of {name}: rel err {err:.3e} >= {tol:g}"
    return analytic


def check_grads_live(make_loss, params, h=1e-5, tol=1e-4):
    """In-place variant for a model whose parameters already exist as Tensors.

    ``params`` maps name -> live Tensor and ``make_loss`` takes no arguments,
    rebuilding the loss from those same tensors on every call (so it must be
    deterministic). Each parameter is perturbed elementwise in place and
    restored afterwards.
    """
    T.zero_grad(params.values())
    loss = make_loss()
    T.backward(loss)
    analytic = {
        k: (np.zeros_like(t.data) if t.grad is None else t.grad.copy())
        for k, t in params.items()
    }
    worst = (0.0, None)
    for name, t in params.items():
        g = np.zeros_like(t.data)
        it = np.nditer(t.data, flags=["multi_index"])
        for _ in it:
            i = it.multi_index
            orig = float(t.data[i])
            t.data[i] = orig + h
            up = float(make_loss().data)
            t.data[i] = orig - h
            dn = float(make_loss().data)
            t.data[i] = orig
            g[i] = (up - dn) / (2.0 * h)
        err = rel_err(analytic[name], g)
        if err > worst[0]:
            worst = (err, name)
        assert err < tol, f"gradient of {name}: rel err {err:.3e} >= {tol:g}"
    return worst
