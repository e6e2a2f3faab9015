"""Shared numeric test utilities: central finite differences and relative
error, independent of the library's autograd path."""

import numpy as np
import torch


def central_difference(fn, tensors, h=1e-6):
    """Per-element central differences of scalar fn over a list of tensors."""
    grads = []
    for tensor in tensors:
        flat = tensor.detach().reshape(-1)
        grad = torch.zeros_like(flat)
        for i in range(flat.numel()):
            orig = flat[i].item()
            flat[i] = orig + h
            plus = float(fn())
            flat[i] = orig - h
            minus = float(fn())
            flat[i] = orig
            grad[i] = (plus - minus) / (2.0 * h)
        grads.append(grad.reshape(tensor.shape))
    return grads


def autograd_gradients(fn, tensors):
    for t in tensors:
        t.requires_grad_(True)
        if t.grad is not None:
            t.grad = None
    value = fn()
    value.backward()
    return [torch.zeros_like(t) if t.grad is None else t.grad.detach().clone() for t in tensors]


def max_relative_error(analytic, numeric, floor=1e-6):
    worst = 0.0
    for a, n in zip(analytic, numeric):
        denom = torch.maximum(
            torch.full_like(a, floor), torch.maximum(a.abs(), n.abs())
        )
        worst = max(worst, float(((a - n).abs() / denom).max()))
    return worst


def check_gradients(fn, tensors, tol=1e-3, h=1e-6):
    """Assert autograd matches central differences for scalar fn(tensors)."""
    analytic = autograd_gradients(fn, tensors)
    with torch.no_grad():
        numeric = central_difference(fn, tensors, h=h)
    err = max_relative_error(analytic, numeric)
    assert err < tol, f"gradient mismatch: max relative error {err:.3e} >= {tol}"
    return err


def random_unit_rows(rng, *shape):
    mat = rng.standard_normal(shape)
    mat /= np.linalg.norm(mat, axis=-1, keepdims=True)
    return torch.from_numpy(mat)
