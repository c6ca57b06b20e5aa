"""Central finite-difference verification of recorded gradients."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autodiff import Tape, precision


@dataclass
class GradCheckReport:
    checked: int = 0
    failed: list = field(default_factory=list)
    max_rel_err: float = 0.0

    @property
    def ok(self):
        return not self.failed


def check_gradients(fn, params, step=1e-3, rel_tol=1e-3, max_coords=None, rng=None, skip_below=1e-4):
    """Compare analytic gradients of ``fn()`` against central differences,
    coordinate by coordinate.

    ``fn`` must deterministically return a scalar loss Tensor built from
    the leaf tensors in ``params``. For each parameter, up to
    ``max_coords`` coordinates are perturbed in place by +/-step.
    Coordinates where both the analytic and numeric values are below
    ``skip_below`` are skipped: float32 evaluation noise makes a relative
    comparison meaningless there.
    """
    rng = rng or np.random.default_rng(0)
    saved = [p.data for p in params]
    for p in params:
        p.data = p.data.astype(np.float64)
    try:
        with precision(np.float64), Tape() as tape:
            loss = fn()
            grads = tape.gradients(loss, wrt=params)

        report = GradCheckReport()
        with precision(np.float64):
            _coordinate_sweep(fn, params, grads, step, rel_tol, max_coords, rng, skip_below, report)
    finally:
        for p, d in zip(params, saved):
            p.data = d
    return report


def _coordinate_sweep(fn, params, grads, step, rel_tol, max_coords, rng, skip_below, report):
    for idx, p in enumerate(params):
        flat_grad = grads[p].reshape(-1)
        n = p.size
        if max_coords is None or n <= max_coords:
            coords = np.arange(n)
        else:
            coords = rng.choice(n, size=max_coords, replace=False)
        flat = p.data.reshape(-1)
        for c in coords:
            orig = flat[c]
            flat[c] = orig + step
            f_plus = float(fn().data)
            flat[c] = orig - step
            f_minus = float(fn().data)
            flat[c] = orig
            fd = (f_plus - f_minus) / (2.0 * step)
            an = float(flat_grad[c])
            denom = max(abs(fd), abs(an))
            if denom < skip_below:
                continue
            rel = abs(fd - an) / denom
            report.checked += 1
            report.max_rel_err = max(report.max_rel_err, rel)
            if rel > rel_tol:
                report.failed.append((idx, int(c), an, fd, rel))


def check_gradients_directional(fn, params, step=1e-3, rel_tol=1e-3, directions=3, rng=None, skip_below=1e-4):
    """Directional-derivative variant of the finite-difference check.

    Each parameter tensor is perturbed along random unit directions and
    dot(grad, v) is compared against the central difference. In single
    precision this is far better conditioned than per-coordinate checks
    on tensors with many elements, while still validating every entry of
    the analytic gradient in expectation.
    """
    rng = rng or np.random.default_rng(0)
    saved = [p.data for p in params]
    for p in params:
        p.data = p.data.astype(np.float64)
    try:
        with precision(np.float64), Tape() as tape:
            loss = fn()
            grads = tape.gradients(loss, wrt=params)

        report = GradCheckReport()
        with precision(np.float64):
            _directional_sweep(fn, params, grads, step, rel_tol, directions, rng, skip_below, report)
    finally:
        for p, d in zip(params, saved):
            p.data = d
    return report


def _directional_sweep(fn, params, grads, step, rel_tol, directions, rng, skip_below, report):
    for idx, p in enumerate(params):
        g = grads[p].astype(np.float64).reshape(-1)
        for _ in range(directions):
            v = rng.standard_normal(p.size)
            v /= np.linalg.norm(v)
            an = float(g @ v)
            orig = p.data.copy()
            delta = (step * v).reshape(p.shape)
            p.data[...] = orig + delta
            f_plus = float(fn().data)
            p.data[...] = orig - delta
            f_minus = float(fn().data)
            p.data[...] = orig
            fd = (f_plus - f_minus) / (2.0 * step)
            denom = max(abs(fd), abs(an))
            if denom < skip_below:
                continue
            rel = abs(fd - an) / denom
            report.checked += 1
            report.max_rel_err = max(report.max_rel_err, rel)
            if rel > rel_tol:
                report.failed.append((idx, None, an, fd, rel))
