"""Shared test utilities: finite-difference gradient checking."""

import numpy as np

from todkat.numerics import Tape, Tensor


def numeric_grads(fn, arrays, h=1e-5):
    """Central-difference gradients of fn(*constant tensors) -> scalar."""
    grads = []
    for k, a in enumerate(arrays):
        num = np.zeros_like(a)
        flat = a.reshape(-1)
        nflat = num.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            lp = fn(*[Tensor(x) for x in arrays]).item()
            flat[i] = orig - h
            lm = fn(*[Tensor(x) for x in arrays]).item()
            flat[i] = orig
            nflat[i] = (lp - lm) / (2.0 * h)
        grads.append(num)
    return grads


def gradcheck(fn, arrays, tol=1e-6, h=1e-5):
    """Compare tape gradients of fn against central differences.

    fn takes one Tensor per entry of ``arrays`` and returns a scalar
    Tensor. Errors are relative to max(1, |grad|) per element.
    """
    tensors = [Tensor(a.copy(), requires_grad=True) for a in arrays]
    with Tape() as tape:
        loss = fn(*tensors)
    tape.backward(loss)
    numeric = numeric_grads(fn, [a.copy() for a in arrays], h=h)
    for k, (t, num) in enumerate(zip(tensors, numeric)):
        got = t.grad if t.grad is not None else np.zeros_like(num)
        scale = np.maximum(1.0, np.maximum(np.abs(got), np.abs(num)))
        err = np.abs(got - num) / scale
        worst = float(err.max()) if err.size else 0.0
        assert worst < tol, (
            "gradient mismatch on input %d: max rel err %.3e (tol %.1e)"
            % (k, worst, tol)
        )


def store_gradcheck(store, names, loss_fn, tol=1e-5, h=1e-5):
    """FD-check the tape gradient of store parameters.

    loss_fn() rebuilds the forward pass from the store's current values
    and returns a scalar Tensor; the probe mutates parameters in place.
    """
    store.zero_grad()
    with Tape() as tape:
        loss = loss_fn()
    tape.backward(loss)
    for name in names:
        got = store[name].grad
        assert got is not None, "no gradient reached %r" % name
        a = store[name].data
        num = np.zeros_like(a)
        flat, nflat = a.reshape(-1), num.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            lp = loss_fn().item()
            flat[i] = orig - h
            lm = loss_fn().item()
            flat[i] = orig
            nflat[i] = (lp - lm) / (2.0 * h)
        scale = np.maximum(1.0, np.maximum(np.abs(got), np.abs(num)))
        worst = float((np.abs(got - num) / scale).max())
        assert worst < tol, (
            "gradient mismatch on %r: max rel err %.3e (tol %.1e)"
            % (name, worst, tol)
        )
