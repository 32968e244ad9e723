"""Invertible spatial transforms: horizontal/vertical flips and quarter turns.

The family is the 16 combinations (flip_h, flip_v, quarters in {0,1,2,3}),
applied flips-first then rotation, acting on the last two axes of square
arrays. Every member's inverse is again a member, application is an exact
pixel permutation, and applying a transform commutes with channel argmax.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad


@dataclass(frozen=True)
class SpatialTransform:
    flip_h: bool = False
    flip_v: bool = False
    quarters: int = 0  # counter-clockwise 90-degree turns

    def __post_init__(self):
        if self.quarters not in (0, 1, 2, 3):
            raise ValueError(f"quarters must be in 0..3, got {self.quarters}")


IDENTITY = SpatialTransform()

# all 16 parameterizations, fixed enumeration order for uniform sampling
FAMILY = tuple(
    SpatialTransform(fh, fv, q)
    for fh in (False, True)
    for fv in (False, True)
    for q in (0, 1, 2, 3)
)


def _check_shape(t: SpatialTransform, x) -> None:
    shape = x.shape
    if len(shape) < 2:
        raise ValueError(f"spatial transforms need at least 2 axes, got shape {tuple(shape)}")
    # odd quarter turns swap the trailing axes, so those must agree
    if t.quarters % 2 == 1 and shape[-1] != shape[-2]:
        raise ValueError(f"odd rotation needs square trailing axes, got shape {tuple(shape)}")


def apply_transform(t: SpatialTransform, x):
    """Apply t to a Tensor or ndarray over the last two axes.

    Tensor inputs stay in the autodiff graph (a permutation's gradient is the
    inverse permutation, handled by the flip/rot90 primitives).
    """
    _check_shape(t, x)
    if isinstance(x, ad.Tensor):
        out = x
        if t.flip_h:
            out = ad.flip(out, axis=-1)
        if t.flip_v:
            out = ad.flip(out, axis=-2)
        if t.quarters:
            out = ad.rot90k(out, t.quarters)
        return out
    out = np.asarray(x)
    if t.flip_h:
        out = np.flip(out, axis=-1)
    if t.flip_v:
        out = np.flip(out, axis=-2)
    if t.quarters:
        out = np.rot90(out, t.quarters, axes=(-2, -1))
    return np.ascontiguousarray(out)


def inverse(t: SpatialTransform) -> SpatialTransform:
    """The family member that exactly undoes t.

    With t = R^q F, the inverse is F R^(-q); pushing the flips back across an
    odd number of quarter turns swaps the horizontal and vertical roles.
    """
    q_inv = (-t.quarters) % 4
    if q_inv % 2 == 0:
        return SpatialTransform(t.flip_h, t.flip_v, q_inv)
    return SpatialTransform(t.flip_v, t.flip_h, q_inv)


def apply_inverse(t: SpatialTransform, x):
    return apply_transform(inverse(t), x)


def sample_transform(rng: np.random.Generator) -> SpatialTransform:
    """Uniform draw over the 16-member family."""
    return FAMILY[int(rng.integers(len(FAMILY)))]


def compose(a: SpatialTransform, b: SpatialTransform) -> SpatialTransform:
    """The family member acting as 'apply b, then a' (closure of the family)."""
    for cand in FAMILY:
        if _same_action(cand, a, b):
            return cand
    raise RuntimeError("family is not closed; unreachable")


_PROBE = np.arange(9.0, dtype=np.float64).reshape(3, 3)


def _same_action(cand, a, b) -> bool:
    lhs = apply_transform(cand, _PROBE)
    rhs = apply_transform(a, apply_transform(b, _PROBE))
    return bool(np.array_equal(lhs, rhs))
