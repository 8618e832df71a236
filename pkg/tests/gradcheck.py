"""Central finite-difference gradient checking against the tape."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from hyps import autodiff as ad

H = 1e-5
# Central differences carry about eps * |f| / h of rounding noise: ~1e-11 for
# O(1) losses, a few 1e-9 for the |f| ~ 100 block sums. Relative error is
# therefore measured against a floor.
DENOM_FLOOR = 1e-2


@dataclass
class GradReport:
    checked: int
    excluded: int
    max_rel: float
    worst: str


def _masks_equal(a, b) -> bool:
    return len(a) == len(b) and all(np.array_equal(x, y) for x, y in zip(a, b))


def check_gradients(params, loss_fn, h: float = H, floor: float = DENOM_FLOOR) -> GradReport:
    """Compare tape gradients with central differences on every scalar.

    ``params`` maps names to trainable :class:`Parameter` objects and
    ``loss_fn(tape)`` must build a scalar loss on the given tape. A scalar is
    excluded when either perturbed evaluation flips any ReLU mask, i.e. the
    finite difference straddles a kink.
    """

    def run(grad):
        tape = ad.Tape(grad_enabled=grad, relu_masks=[])
        loss = loss_fn(tape)
        return tape, loss

    for p in params.values():
        p.value = np.array(p.value, dtype=np.float64, order="C")
    tape, loss = run(True)
    grads = tape.backward(loss)
    base_masks = tape.relu_masks
    checked = excluded = 0
    max_rel, worst = 0.0, ""
    for name, p in params.items():
        g = grads.get(name, np.zeros_like(p.value))
        flat = p.value.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            t_plus, l_plus = run(False)
            flat[i] = orig - h
            t_minus, l_minus = run(False)
            flat[i] = orig
            if not (_masks_equal(t_plus.relu_masks, base_masks) and _masks_equal(t_minus.relu_masks, base_masks)):
                excluded += 1
                continue
            num = (float(l_plus.value) - float(l_minus.value)) / (2 * h)
            ana = float(g.reshape(-1)[i])
            rel = abs(ana - num) / max(abs(ana), abs(num), floor)
            checked += 1
            if rel > max_rel:
                max_rel, worst = rel, f"{name}[{i}] analytic={ana:.6e} numeric={num:.6e}"
    return GradReport(checked, excluded, max_rel, worst)
