"""Shared test utilities: the finite-difference gradient oracle and the
gradient-check suite run by both unit and acceptance tests.

The oracle perturbs leaf data and re-runs the forward function; it never
touches the analytic backward path it is checking.
"""

from __future__ import annotations

import numpy as np

from tagtune import numerics as nm


def numeric_gradient(forward_fn, leaf: nm.Tensor, h: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of the scalar forward_fn() w.r.t. leaf.data."""
    grad = np.zeros_like(leaf.data)
    flat = leaf.data.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        up = float(forward_fn().data)
        flat[i] = orig - h
        down = float(forward_fn().data)
        flat[i] = orig
        gflat[i] = (up - down) / (2.0 * h)
    return grad


def check_gradients(forward_fn, leaves: dict[str, nm.Tensor], rtol: float = 1e-4) -> dict[str, float]:
    """Compare analytic grads against central differences; returns per-leaf relative error."""
    for leaf in leaves.values():
        leaf.grad = None
    loss = forward_fn()
    nm.backward(loss)
    errors = {}
    for name, leaf in leaves.items():
        numeric = numeric_gradient(forward_fn, leaf)
        analytic = leaf.grad if leaf.grad is not None else np.zeros_like(leaf.data)
        denom = max(np.abs(numeric).max(), np.abs(analytic).max(), 1e-6)
        rel = np.abs(analytic - numeric).max() / denom
        errors[name] = rel
        assert rel <= rtol, f"gradient mismatch for {name}: rel err {rel:.3e} > {rtol}"
    return errors


def _t(rng: np.random.Generator, *shape: int) -> nm.Tensor:
    return nm.Tensor(rng.standard_normal(shape), requires_grad=True, dtype=np.float64)


def _proj(rng: np.random.Generator, shape) -> nm.Tensor:
    # Fixed random projection turning a non-scalar op output into a scalar loss.
    return nm.Tensor(rng.standard_normal(shape), dtype=np.float64)


def gradcheck_trial_builders(rng: np.random.Generator):
    """One (name, forward_fn, leaves) triple per differentiable op, with fresh
    random shapes and values drawn from rng. Used with >=100 trials per op."""

    def matmul_case():
        n, k, m = rng.integers(1, 5, size=3)
        a, b = _t(rng, n, k), _t(rng, k, m)
        p = _proj(rng, (n, m))
        return {"a": a, "b": b}, lambda: nm.reduce_sum(_mul(nm.matmul(a, b), p))

    def add_case():
        n, d = rng.integers(1, 5, size=2)
        a, b = _t(rng, n, d), _t(rng, n, d)
        p = _proj(rng, (n, d))
        return {"a": a, "b": b}, lambda: nm.reduce_sum(_mul(nm.add(a, b), p))

    def add_bias_case():
        n, d = rng.integers(1, 5, size=2)
        a, b = _t(rng, n, d), _t(rng, d)
        p = _proj(rng, (n, d))
        return {"a": a, "b": b}, lambda: nm.reduce_sum(_mul(nm.add(a, b), p))

    def scale_case():
        n, d = rng.integers(1, 5, size=2)
        a = _t(rng, n, d)
        s = float(rng.standard_normal())
        p = _proj(rng, (n, d))
        return {"a": a}, lambda: nm.reduce_sum(_mul(nm.scale(a, s), p))

    def reduce_sum_case():
        n, d = rng.integers(1, 5, size=2)
        a = _t(rng, n, d)
        return {"a": a}, lambda: nm.reduce_sum(a)

    def reduce_mean_case():
        n, d = rng.integers(1, 5, size=2)
        a = _t(rng, n, d)
        return {"a": a}, lambda: nm.reduce_mean(a)

    def gelu_case():
        n, d = rng.integers(1, 5, size=2)
        a = _t(rng, n, d)
        p = _proj(rng, (n, d))
        return {"a": a}, lambda: nm.reduce_sum(_mul(nm.gelu(a), p))

    def softmax_case():
        n, d = int(rng.integers(1, 5)), int(rng.integers(2, 6))
        a = _t(rng, n, d)
        p = _proj(rng, (n, d))
        return {"a": a}, lambda: nm.reduce_sum(_mul(nm.softmax(a, axis=-1), p))

    def layer_norm_case():
        n, d = int(rng.integers(1, 5)), int(rng.integers(2, 6))
        x, g, b = _t(rng, n, d), _t(rng, d), _t(rng, d)
        p = _proj(rng, (n, d))
        return {"x": x, "gain": g, "bias": b}, lambda: nm.reduce_sum(_mul(nm.layer_norm(x, g, b), p))

    def gather_case():
        r, d, n = int(rng.integers(2, 6)), int(rng.integers(2, 5)), int(rng.integers(1, 7))
        table = _t(rng, r, d)
        ids = rng.integers(0, r, size=n)
        p = _proj(rng, (n, d))
        return {"table": table}, lambda: nm.reduce_sum(_mul(nm.gather_rows(table, ids), p))

    def concat_case():
        d = int(rng.integers(2, 5))
        parts = [_t(rng, int(rng.integers(1, 4)), d) for _ in range(int(rng.integers(2, 4)))]
        total = sum(pt.data.shape[0] for pt in parts)
        p = _proj(rng, (total, d))
        leaves = {f"part{i}": pt for i, pt in enumerate(parts)}
        return leaves, lambda: nm.reduce_sum(_mul(nm.concat_rows(parts), p))

    def attention_case():
        n_heads = int(rng.integers(1, 3))
        hd = int(rng.integers(1, 4))
        d = n_heads * hd
        n = int(rng.integers(1, 5))
        q, k, v = _t(rng, n, d), _t(rng, n, d), _t(rng, n, d)
        p = _proj(rng, (n, d))
        return {"q": q, "k": k, "v": v}, lambda: nm.reduce_sum(
            _mul(nm.causal_attention(q, k, v, n_heads), p)
        )

    def cross_entropy_case():
        n, vocab = int(rng.integers(1, 5)), int(rng.integers(2, 7))
        logits = _t(rng, n, vocab)
        targets = rng.integers(0, vocab, size=n)
        mask = rng.uniform(0.1, 1.0, size=n)
        return {"logits": logits}, lambda: nm.cross_entropy(logits, targets, mask)

    def mse_case():
        n, d = rng.integers(1, 5, size=2)
        a, b = _t(rng, n, d), _t(rng, n, d)
        return {"pred": a, "target": b}, lambda: nm.mse(a, b)

    builders = [
        ("matmul", matmul_case),
        ("add", add_case),
        ("add_bias", add_bias_case),
        ("scale", scale_case),
        ("reduce_sum", reduce_sum_case),
        ("reduce_mean", reduce_mean_case),
        ("gelu", gelu_case),
        ("softmax", softmax_case),
        ("layer_norm", layer_norm_case),
        ("gather_rows", gather_case),
        ("concat_rows", concat_case),
        ("causal_attention", attention_case),
        ("cross_entropy", cross_entropy_case),
        ("mse", mse_case),
    ]
    return builders


def _mul(a: nm.Tensor, p: nm.Tensor) -> nm.Tensor:
    """Elementwise product with a constant projection (scalarizes op outputs)."""
    return _HadamardConst.apply(a, p)


class _HadamardConst:
    """Elementwise multiply by a constant tensor (test-only scalarizer)."""

    @staticmethod
    def apply(a: nm.Tensor, const: nm.Tensor) -> nm.Tensor:
        out_data = a.data * const.data

        def backward_fn(g):
            nm._accumulate(a, g * const.data)

        return nm._from_op(out_data, (a,), backward_fn)


def run_gradcheck_suite(trials_per_op: int, seed: int = 0, rtol: float = 1e-4) -> dict[str, float]:
    """Run central-difference checks for every differentiable op; returns worst
    relative error per op."""
    rng = np.random.default_rng(seed)
    worst: dict[str, float] = {}
    for name, build in gradcheck_trial_builders(rng):
        w = 0.0
        for _ in range(trials_per_op):
            leaves, forward_fn = build()
            errs = check_gradients(forward_fn, leaves, rtol=rtol)
            w = max(w, max(errs.values()))
        worst[name] = w
    return worst
