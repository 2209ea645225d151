"""Named parameter sets, gradients and the Adam optimizer."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterator, Mapping

import numpy as np

from hwsi.errors import ContractError
from hwsi.numerics.tensor import Tape, Tensor


@dataclass(frozen=True)
class Param:
    tensor: Tensor
    trainable: bool = True


class ParamSet(Mapping):
    """Immutable mapping ``name -> Param``.  Updates return a new set."""

    def __init__(self, entries: Mapping[str, Param] | None = None):
        self._entries = dict(entries or {})
        for name, p in self._entries.items():
            if not isinstance(p, Param):
                raise ContractError(f"entry {name!r} is not a Param")

    def __getitem__(self, name: str) -> Param:
        return self._entries[name]

    def __iter__(self) -> Iterator[str]:
        return iter(self._entries)

    def __len__(self) -> int:
        return len(self._entries)

    def tensor(self, name: str) -> Tensor:
        return self._entries[name].tensor

    def trainable_names(self) -> list[str]:
        return [n for n, p in self._entries.items() if p.trainable]

    def with_tensors(self, updates: Mapping[str, Tensor]) -> "ParamSet":
        entries = dict(self._entries)
        for name, t in updates.items():
            old = entries[name]
            if t.shape != old.tensor.shape:
                raise ContractError(f"{name}: shape {t.shape} != {old.tensor.shape}")
            entries[name] = Param(t, old.trainable)
        return ParamSet(entries)

    def with_trainable(self, flags: Mapping[str, bool]) -> "ParamSet":
        entries = dict(self._entries)
        for name, flag in flags.items():
            entries[name] = Param(entries[name].tensor, bool(flag))
        return ParamSet(entries)

    def watch(self, tape: Tape) -> None:
        """Track every trainable tensor on ``tape``."""
        for p in self._entries.values():
            if p.trainable:
                tape.watch(p.tensor)

    def num_scalars(self, trainable_only: bool = False) -> int:
        return sum(p.tensor.size for p in self._entries.values() if p.trainable or not trainable_only)

    def equal(self, other: "ParamSet") -> bool:
        """Bitwise equality of names, flags, dtypes and values."""
        if list(self) != list(other):
            return False
        for name in self:
            a, b = self[name], other[name]
            if a.trainable != b.trainable or a.tensor.dtype != b.tensor.dtype:
                return False
            if a.tensor.shape != b.tensor.shape or a.tensor.data.tobytes() != b.tensor.data.tobytes():
                return False
        return True


def backward(tape: Tape, loss: Tensor, params: ParamSet) -> dict[str, np.ndarray]:
    """Gradients of ``loss`` for every trainable parameter.

    Frozen parameters are omitted from the result (they are never watched).
    """
    names = params.trainable_names()
    grads = tape.gradient(loss, [params.tensor(n) for n in names])
    return dict(zip(names, grads))


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params: ParamSet, grads: Mapping[str, np.ndarray], state: AdamState):
    """One bias-corrected Adam update.  Returns ``(new_params, new_state)``.

    Frozen parameters are left bit-identical; a gradient supplied for one is
    rejected rather than silently dropped.
    """
    trainable = set(params.trainable_names())
    for name in grads:
        if name not in params:
            raise ContractError(f"gradient for unknown parameter {name!r}")
        if name not in trainable:
            raise ContractError(f"gradient supplied for frozen parameter {name!r}")
    missing = trainable.difference(grads)
    if missing:
        raise ContractError(f"missing gradients for trainable parameters: {sorted(missing)}")

    t = state.step + 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    new_m, new_v, updates = dict(state.m), dict(state.v), {}
    for name in params.trainable_names():
        p = params.tensor(name).data
        g = np.asarray(grads[name], dtype=p.dtype)
        if g.shape != p.shape:
            raise ContractError(f"{name}: gradient shape {g.shape} != parameter shape {p.shape}")
        m = state.m.get(name)
        v = state.v.get(name)
        m = (1.0 - b1) * g if m is None else b1 * m + (1.0 - b1) * g
        v = (1.0 - b2) * g * g if v is None else b2 * v + (1.0 - b2) * g * g
        new_m[name], new_v[name] = m, v
        step = state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
        updates[name] = Tensor._wrap((p - step).astype(p.dtype, copy=False))
    new_state = AdamState(state.lr, b1, b2, state.eps, t, new_m, new_v)
    return params.with_tensors(updates), new_state
