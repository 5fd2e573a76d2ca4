"""Elementwise adapters on the concatenated attention output.

The adapter owns two length-H vectors per layer, a scale w (init 1) and a
shift b (init 0), and maps each hidden coordinate of the attention output
independently: a' = w * a + b, shared across batch and sequence positions.
At initialization it is the identity, so inserting it never perturbs a
pretrained model.

A polynomial generalization raises the per-coordinate map to

    a' = c0 + c1 * a + c2 * a**2 + ... + ck * a**k

where c1 doubles as w and c0 as b; higher coefficients start at zero, so
identity-at-init is preserved for every order. Order 1 is the elementwise
affine adapter the rest of the package revolves around; orders 2 and 3
exist to ask whether the extra shape capacity buys anything.
"""

from __future__ import annotations

from . import tensor as T
from .errors import ConfigError
from .tensor import Tensor

MODULE_CODES = ("W", "B", "N", "A")
# Codes name tuneable module families: adapter scale, adapter shift,
# feed-forward output norm, attention output norm.
MODULE_CODE_TAGS = {
    "W": "adapter_weight",
    "B": "adapter_bias",
    "N": "ffn_norm",
    "A": "attention_norm",
}


def parse_module_set(text: str) -> frozenset[str]:
    """Parse a module-set string like 'WBN' or 'W+B+N' (order-insensitive)."""
    codes = [c for c in text.upper() if c not in "+, "]
    bad = [c for c in codes if c not in MODULE_CODES]
    if bad:
        raise ConfigError(f"unknown module codes {bad}; valid codes are {''.join(MODULE_CODES)}")
    if not codes:
        raise ConfigError("empty module set")
    return frozenset(codes)


def format_module_set(codes: frozenset[str]) -> str:
    return "+".join(c for c in MODULE_CODES if c in codes)


def coefficient_names(layer: int, order: int) -> list[str]:
    """Store names of the layer's coefficients, constant term first."""
    p = f"encoder.layer.{layer}.adapter"
    names = [f"{p}.bias", f"{p}.weight"]
    names += [f"{p}.coeff{k}" for k in range(2, order + 1)]
    return names


def apply_adapter(store, cfg, layer: int, a: Tensor) -> Tensor:
    """Shape one layer's attention output elementwise.

    Evaluates the polynomial by Horner's rule on tape ops, so gradients
    reach every coefficient. All coefficients broadcast over batch and
    sequence axes.
    """
    order = cfg.adapter_order
    if order is None:
        raise ConfigError("model config has no adapter_order; adapters are absent")
    coeffs = [store.tensor(n) for n in coefficient_names(layer, order)]
    acc = coeffs[-1]
    for c in reversed(coeffs[:-1]):
        acc = T.add(T.mul(acc, a), c)
    return acc


def adapter_vectors(store, cfg, kind: str):
    """Per-layer numpy copies of adapter vectors, kind in {'weight','bias'}."""
    if kind not in ("weight", "bias"):
        raise ConfigError(f"kind must be 'weight' or 'bias', got {kind!r}")
    if cfg.adapter_order is None:
        raise ConfigError("model config has no adapters")
    return [
        store.tensor(f"encoder.layer.{i}.adapter.{kind}").data.copy()
        for i in range(cfg.num_layers)
    ]
