"""Central finite-difference checks for the autodiff engine and the full model loss."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence

import numpy as np

from . import tensor as T

FD_EPS = 1e-5
OP_TOL = 1e-4
MODEL_TOL = 1e-3


@dataclass
class CheckResult:
    name: str
    max_rel_error: float
    tol: float
    trials: int

    @property
    def passed(self) -> bool:
        return bool(np.isfinite(self.max_rel_error) and self.max_rel_error < self.tol)


@dataclass
class GradcheckReport:
    results: List[CheckResult] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return all(r.passed for r in self.results)

    @property
    def failures(self) -> List[str]:
        return [r.name for r in self.results if not r.passed]

    def lines(self) -> List[str]:
        return [
            f"{'PASS' if r.passed else 'FAIL'} {r.name:<24} max_rel_err={r.max_rel_error:.3e} tol={r.tol:.0e} trials={r.trials}"
            for r in self.results
        ]


def rel_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """Norm-wise relative error ``|a - n| / max(|a|, |n|)``; 0 when both vanish."""
    a = np.asarray(analytic, dtype=np.float64).ravel()
    n = np.asarray(numeric, dtype=np.float64).ravel()
    denom = max(np.linalg.norm(a), np.linalg.norm(n))
    if denom == 0.0:
        return 0.0
    return float(np.linalg.norm(a - n) / denom)


def numeric_grad(fn: Callable[[], float], arr: np.ndarray, eps: float = FD_EPS,
                 coords: Optional[Sequence[int]] = None) -> np.ndarray:
    """Central differences of ``fn`` w.r.t. entries of ``arr`` (perturbed in place)."""
    flat = arr.reshape(-1)
    idx = range(flat.size) if coords is None else coords
    out = np.zeros(len(idx) if coords is not None else flat.size)
    for j, i in enumerate(idx):
        orig = flat[i]
        flat[i] = orig + eps
        fp = fn()
        flat[i] = orig - eps
        fm = fn()
        flat[i] = orig
        out[j] = (fp - fm) / (2.0 * eps)
    return out


def check_function(fn: Callable[..., T.Tensor], inputs: Sequence[np.ndarray],
                   eps: float = FD_EPS) -> float:
    """Max relative error over every input of a scalar-valued tensor function.

    ``fn`` receives Tensors built from ``inputs`` and must return a scalar.
    A fixed random projection turns non-scalar outputs into a scalar, so the
    check exercises a generic vector-Jacobian product.
    """
    arrays = [np.array(x, dtype=np.float64) for x in inputs]
    proj_rng = np.random.default_rng(1234)
    proj = {}

    def scalarize(out: T.Tensor) -> T.Tensor:
        if out.size == 1:
            return out.reshape(()) if out.ndim else out
        if out.shape not in proj:
            proj[out.shape] = proj_rng.uniform(-1.0, 1.0, size=out.shape)
        return (out * T.Tensor(proj[out.shape])).sum()

    leaves = [T.Tensor(a, requires_grad=True) for a in arrays]
    scalarize(fn(*leaves)).backward()
    worst = 0.0
    for leaf, arr in zip(leaves, arrays):

        def value():
            with T.no_grad():
                return float(scalarize(fn(*[T.Tensor(a) for a in arrays])).data)

        numeric = numeric_grad(value, arr, eps)
        analytic = leaf.grad if leaf.grad is not None else np.zeros_like(arr)
        worst = max(worst, rel_error(analytic, numeric))
    return worst


def _op_suite() -> Dict[str, tuple]:
    """name -> (function, input-shape builder(rng))."""
    u = lambda rng, *s: rng.uniform(-2.0, 2.0, size=s)

    def ce(logits):
        return T.cross_entropy_logits(logits, [0, 1, 1])

    return {
        "add": (lambda a, b: a + b, lambda r: [u(r, 3, 4), u(r, 3, 4)]),
        "add_bias": (lambda a, b: a + b, lambda r: [u(r, 2, 3, 4), u(r, 4)]),
        "mul": (lambda a, b: a * b, lambda r: [u(r, 3, 4), u(r, 3, 4)]),
        "scale": (lambda a: a * 0.7, lambda r: [u(r, 5)]),
        "matmul": (T.matmul, lambda r: [u(r, 3, 4), u(r, 4, 2)]),
        "matmul_batched": (T.matmul, lambda r: [u(r, 2, 3, 4), u(r, 2, 4, 5)]),
        "matmul_shared_weight": (T.matmul, lambda r: [u(r, 2, 3, 4), u(r, 4, 5)]),
        "transpose": (lambda a: T.transpose(a, (2, 0, 1)), lambda r: [u(r, 2, 3, 4)]),
        "reshape": (lambda a: T.reshape(a, (4, 3)), lambda r: [u(r, 2, 6)]),
        "concat": (lambda a, b: T.concat([a, b], axis=1), lambda r: [u(r, 2, 3), u(r, 2, 2)]),
        "slice": (lambda a: a[1:, 0:2], lambda r: [u(r, 3, 4)]),
        "mean": (lambda a: a.mean(axis=0), lambda r: [u(r, 3, 4)]),
        "softmax": (T.softmax, lambda r: [u(r, 3, 5)]),
        "layernorm": (T.layernorm, lambda r: [u(r, 3, 6), u(r, 6), u(r, 6)]),
        "gelu": (T.gelu, lambda r: [u(r, 4, 5)]),
        "cross_entropy": (ce, lambda r: [u(r, 3, 2)]),
        "cosine_similarity": (T.cosine_similarity, lambda r: [u(r, 2, 6), u(r, 2, 6)]),
    }


def check_ops(trials: int = 100, seed: int = 0, names: Optional[Sequence[str]] = None) -> GradcheckReport:
    rng = np.random.default_rng(seed)
    report = GradcheckReport()
    for name, (fn, build) in _op_suite().items():
        if names is not None and name not in names:
            continue
        worst = 0.0
        for _ in range(trials):
            worst = max(worst, check_function(fn, build(rng)))
        report.results.append(CheckResult(name, worst, OP_TOL, trials))
    return report


def check_model(n_coords: int = 20, seed: int = 0) -> GradcheckReport:
    """End-to-end total-loss gradient on the desk preset (double precision)."""
    from .alignment import total_loss
    from .vit import ModelConfig, forward, init_params, trainable

    cfg = ModelConfig.desk(depth=2)
    rng = np.random.default_rng(seed)
    params = init_params(cfg, rng, dtype=np.float64, with_sam=True)
    # larger-than-init weights so every path carries a non-trivial gradient
    for p in trainable(params).values():
        p.data += rng.normal(0.0, 0.05, size=p.shape)
    wl = rng.uniform(0, 1, size=(2, cfg.image_size, cfg.image_size, 3))
    nbi = rng.uniform(0, 1, size=(2, cfg.image_size, cfg.image_size, 3))
    labels = [0, 1]

    def loss_value():
        out_w = forward(params, cfg, wl)
        out_n = forward(params, cfg, nbi)
        return total_loss(params, cfg, out_w, out_n, labels).total

    names = sorted(trainable(params))
    sizes = np.array([params[n].size for n in names])
    picks = rng.choice(sizes.sum(), size=n_coords, replace=False)
    offsets = np.concatenate([[0], np.cumsum(sizes)])
    chosen = []
    for flat in sorted(picks):
        k = int(np.searchsorted(offsets, flat, side="right") - 1)
        chosen.append((names[k], int(flat - offsets[k])))

    for p in params.values():
        p.grad = None
    loss_value().backward()
    analytic = np.array([params[n].grad.reshape(-1)[i] for n, i in chosen])

    def value():
        with T.no_grad():
            return float(loss_value().data)

    numeric = np.array([numeric_grad(value, params[n].data, coords=[i])[0] for n, i in chosen])
    report = GradcheckReport()
    per_coord = np.abs(analytic - numeric) / np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-7)
    report.results.append(CheckResult("model_total_loss(coord)", float(per_coord.max()), MODEL_TOL, n_coords))
    report.results.append(CheckResult("model_total_loss(norm)", rel_error(analytic, numeric), MODEL_TOL, n_coords))
    return report
