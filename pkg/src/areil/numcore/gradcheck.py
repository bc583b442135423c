"""Central finite-difference verification of analytic gradients.

The caller fills every parameter's grad buffer (one backward pass), then
``grad_check`` perturbs each value entry by +/-epsilon, re-evaluates the
loss, and compares. Relative error uses a max(|analytic|, |numeric|, 1e-8)
denominator.
"""

import numpy as np


class GradCheckReport:
    def __init__(self):
        self.per_parameter = {}

    def record(self, name, max_rel_error, worst_index, analytic, numeric):
        self.per_parameter[name] = {
            "max_rel_error": max_rel_error,
            "worst_index": worst_index,
            "analytic": analytic,
            "numeric": numeric,
        }

    @property
    def max_rel_error(self):
        if not self.per_parameter:
            return 0.0
        return max(entry["max_rel_error"] for entry in self.per_parameter.values())

    def worst(self):
        name = max(self.per_parameter, key=lambda n: self.per_parameter[n]["max_rel_error"])
        return name, self.per_parameter[name]

    def __str__(self):
        lines = []
        for name, entry in self.per_parameter.items():
            lines.append(
                f"{name}: max_rel_error={entry['max_rel_error']:.3e} "
                f"at {entry['worst_index']} "
                f"(analytic={entry['analytic']:.6e}, numeric={entry['numeric']:.6e})"
            )
        return "\n".join(lines)


def _central_difference(loss_fn, store, flat, idx, epsilon, cast=float):
    saved = flat[idx]
    flat[idx] = saved + epsilon
    f_plus = cast(loss_fn(store))
    flat[idx] = saved - epsilon
    f_minus = cast(loss_fn(store))
    flat[idx] = saved
    return (f_plus - f_minus) / cast(2.0 * epsilon)


def grad_check(loss_fn, store, epsilon=1e-5, names=None,
               refine_loss_fn=None, refine_above=1e-6):
    """Compare analytic grads in ``store`` against central differences of ``loss_fn``.

    ``loss_fn(store)`` must be a deterministic scalar function of the stored
    values and must not touch the grad buffers.

    On coordinates with near-zero true gradient, float64 round-off in the
    loss dominates the difference quotient. ``refine_loss_fn`` (typically the
    same loss evaluated in extended precision) re-measures coordinates whose
    relative error exceeds ``refine_above``, sharpening the oracle without
    touching the analytic side.
    """
    if epsilon <= 0:
        raise ValueError("epsilon must be positive")
    report = GradCheckReport()
    selected = names if names is not None else store.names()
    for name in selected:
        param = store[name]
        analytic = param.grad.reshape(-1).copy()
        flat = param.value.reshape(-1)
        numeric = np.empty_like(analytic)
        for idx in range(flat.shape[0]):
            numeric[idx] = _central_difference(loss_fn, store, flat, idx, epsilon)

        def rel_errors(num):
            denom = np.maximum(np.maximum(np.abs(analytic), np.abs(num)), 1e-8)
            return np.abs(analytic - num) / denom

        rel = rel_errors(numeric)
        if refine_loss_fn is not None:
            for idx in np.flatnonzero(rel > refine_above):
                numeric[idx] = _central_difference(
                    refine_loss_fn, store, flat, idx, epsilon, cast=np.longdouble
                )
            rel = rel_errors(numeric)
        worst = int(np.argmax(rel))
        report.record(
            name,
            float(rel[worst]),
            np.unravel_index(worst, param.value.shape),
            float(analytic[worst]),
            float(numeric[worst]),
        )
    return report
