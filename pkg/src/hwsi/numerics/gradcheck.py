"""Central-difference gradient verification."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from hwsi.errors import NonFiniteError
from hwsi.numerics.params import ParamSet, backward
from hwsi.numerics.tensor import Tape, Tensor


@dataclass
class GradCheckReport:
    max_rel_err: float
    n_checked: int
    n_screened: int
    tol: float
    failing: list = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return not self.failing


def _rel_err(a: float, n: float) -> float:
    return abs(a - n) / max(abs(a), abs(n), 1e-8)


def _evaluate(fn, params) -> float:
    out = fn(params)
    value = out.item() if isinstance(out, Tensor) else float(out)
    if not np.isfinite(value):
        raise NonFiniteError(f"function value is not finite: {value}")
    return value


def _perturbed(params: ParamSet, name: str, flat: int, delta: float) -> ParamSet:
    arr = params.tensor(name).data.copy()
    arr.reshape(-1)[flat] += delta
    return params.with_tensors({name: Tensor._wrap(arr)})


def grad_check(
    fn: Callable[[ParamSet], Tensor],
    params: ParamSet,
    h: float = 1e-5,
    tol: float = 1e-5,
    n_samples: int = 200,
    seed: int = 0,
    screen: bool = True,
) -> GradCheckReport:
    """Compare tape gradients of ``fn`` with central differences.

    ``n_samples`` coordinates are drawn without replacement from all trainable
    scalars (all of them if there are fewer).  With ``screen`` on, a
    coordinate whose difference quotient is not itself stable, i.e. the
    quotients at ``h`` and ``h/2`` disagree beyond ``tol``, sits on a ReLU kink
    or is cancellation-dominated.  The quotient at ``4h`` is compared as well,
    because rounding of a locally linear function can make the ``h`` and
    ``h/2`` quotients agree bit for bit while both are off.  A nonzero
    quotient too small for the function's rounding error to be resolved at
    ``tol`` is screened too.  Screened coordinates are counted in
    ``n_screened`` and replaced by another draw.  A wrong analytic gradient is never hidden by this: the
    two quotients agree with each other and disagree with it.
    """
    tape = Tape()
    with tape:
        params.watch(tape)
        loss = fn(params)
    value = loss.item()
    if not np.isfinite(value):
        raise NonFiniteError(f"function value is not finite: {value}")
    grads = backward(tape, loss, params)

    coords = [(n, i) for n in params.trainable_names() for i in range(params.tensor(n).size)]
    order = np.random.default_rng(seed).permutation(len(coords))
    target = min(n_samples, len(coords))

    def quotient(name, flat, step):
        up = _evaluate(fn, _perturbed(params, name, flat, step))
        down = _evaluate(fn, _perturbed(params, name, flat, -step))
        return (up - down) / (2.0 * step)

    # Error of a central quotient from one ulp of rounding in each function value.
    rounding = np.finfo(np.float64).eps * max(abs(value), 1.0) / h
    checked, screened, worst, failing = 0, 0, 0.0, []
    for k in order:
        if checked >= target:
            break
        name, flat = coords[k]
        analytic = float(grads[name].reshape(-1)[flat])
        numeric = quotient(name, flat, h)
        if screen:
            half, wide = quotient(name, flat, h / 2.0), quotient(name, flat, 4.0 * h)
            unresolved = numeric != 0.0 and rounding > tol * abs(numeric)
            if unresolved or max(_rel_err(numeric, half), _rel_err(numeric, wide)) > tol:
                screened += 1
                continue
        err = _rel_err(analytic, numeric)
        worst = max(worst, err)
        checked += 1
        if err > tol:
            failing.append((name, int(flat), analytic, numeric, err))
    return GradCheckReport(worst, checked, screened, tol, failing)
