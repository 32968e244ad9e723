"""Pseudo labels and reliability maps from multi-head mean predictions.

Pipeline per image: average the heads' probability maps, threshold the
winning-class probability to get a binary reliability map, argmax to a label
map (ties to the lowest class index), then optionally keep only the largest
4-connected component of each foreground class. Reliability always comes
from the raw mean, before any cleanup.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .validation import check_prob_map


def ensemble_mean(head_probs: list[np.ndarray]) -> np.ndarray:
    """Mean probability map over heads; inputs [C,H,W] each."""
    if not head_probs:
        raise ValueError("ensemble_mean needs at least one head")
    stack = np.stack([np.asarray(p, dtype=np.float32) for p in head_probs])
    for p in stack:
        check_prob_map(p)
    if len({p.shape for p in head_probs}) != 1:
        raise ValueError("head probability maps disagree in shape")
    # accumulate in float64 so K identical maps average back to themselves
    return stack.mean(axis=0, dtype=np.float64).astype(np.float32)


def reliability_map(mean_prob: np.ndarray, tau: float) -> np.ndarray:
    """Binary map: 1 where the winning class probability strictly exceeds tau."""
    mean_prob = np.asarray(mean_prob)
    c = mean_prob.shape[0]
    if not 1.0 / c < tau < 1.0:
        raise ValueError(f"tau must lie in (1/C, 1) = ({1.0 / c:.4f}, 1), got {tau}")
    return (mean_prob.max(axis=0) > tau).astype(np.float32)


def one_hot(labels: np.ndarray, num_classes: int) -> np.ndarray:
    """[H,W] int labels -> [C,H,W] float32 one-hot."""
    labels = np.asarray(labels)
    if labels.min() < 0 or labels.max() >= num_classes:
        raise ValueError(f"labels out of range for {num_classes} classes")
    out = np.zeros((num_classes,) + labels.shape, dtype=np.float32)
    for c in range(num_classes):
        out[c][labels == c] = 1.0
    return out


def label_components(mask: np.ndarray) -> tuple[np.ndarray, int]:
    """4-connected component labeling by iterative minimum-label propagation.

    Each mask pixel starts with its row-major index and repeatedly takes the
    minimum over itself and its 4-neighbors until a fixpoint; pixels then
    share a value iff they share a component. Returns (labels, count) with
    compact labels 1..count ordered by each component's first row-major
    pixel, 0 for background.
    """
    mask = np.asarray(mask).astype(bool)
    if mask.ndim != 2:
        raise ValueError("component labeling needs a 2-D mask")
    h, w = mask.shape
    if not mask.any():
        return np.zeros((h, w), dtype=np.int32), 0
    inf = np.int32(h * w)
    idx = np.arange(h * w, dtype=np.int32).reshape(h, w)
    lab = np.where(mask, idx, inf)
    while True:
        nb = lab.copy()
        np.minimum(nb[1:, :], lab[:-1, :], out=nb[1:, :])
        np.minimum(nb[:-1, :], lab[1:, :], out=nb[:-1, :])
        np.minimum(nb[:, 1:], lab[:, :-1], out=nb[:, 1:])
        np.minimum(nb[:, :-1], lab[:, 1:], out=nb[:, :-1])
        nb[~mask] = inf
        if np.array_equal(nb, lab):
            break
        lab = nb
    roots = np.unique(lab[mask])
    labels = np.zeros((h, w), dtype=np.int32)
    labels[mask] = np.searchsorted(roots, lab[mask]).astype(np.int32) + 1
    return labels, len(roots)


def largest_component_mask(mask: np.ndarray) -> np.ndarray:
    """Largest 4-connected component; size ties keep the component holding
    the smallest row-major pixel index (the lowest compact label, since
    labels are ordered by first pixel). Empty mask passes through."""
    labels, count = label_components(mask)
    if count == 0:
        return np.zeros(np.asarray(mask).shape, dtype=bool)
    sizes = np.bincount(labels.ravel(), minlength=count + 1)[1:]
    keep = int(np.flatnonzero(sizes == sizes.max())[0]) + 1
    return labels == keep


def cleanup_label_map(label_map: np.ndarray, num_classes: int) -> np.ndarray:
    """Keep the largest component per foreground class; removed pixels -> 0."""
    label_map = np.asarray(label_map)
    out = label_map.copy()
    for c in range(1, num_classes):
        mask = label_map == c
        if not mask.any():
            continue
        keep = largest_component_mask(mask)
        out[mask & ~keep] = 0
    return out


@dataclass
class PseudoLabelBundle:
    """Frozen supervision targets for one batch: one-hot labels, reliability
    maps, the raw mean prediction, and the training step they belong to."""

    pseudo_onehot: np.ndarray  # [B,C,H,W] float32
    reliability: np.ndarray  # [B,H,W] float32 in {0,1}
    mean_prob: np.ndarray  # [B,C,H,W] float32
    step: int = -1

    @property
    def reliable_fraction(self) -> float:
        return float(self.reliability.mean())


def make_pseudo_label(mean_prob: np.ndarray, tau: float | None, cleanup: bool = True,
                      step: int = -1) -> PseudoLabelBundle:
    """Build the supervision bundle from a batched mean prediction [B,C,H,W].

    ``tau=None`` skips thresholding: every pixel counts as reliable.
    """
    # contiguous copy: strided input buffers would otherwise leak their layout
    # into the bundle and shift downstream float reductions by an ulp
    mean_prob = np.ascontiguousarray(mean_prob, dtype=np.float32)
    if mean_prob.ndim != 4:
        raise ValueError(f"expected [B,C,H,W] mean prediction, got shape {mean_prob.shape}")
    b, c = mean_prob.shape[:2]
    onehots = np.zeros_like(mean_prob)
    rel = np.zeros((b,) + mean_prob.shape[2:], dtype=np.float32)
    for i in range(b):
        check_prob_map(mean_prob[i])
        rel[i] = 1.0 if tau is None else reliability_map(mean_prob[i], tau)
        lab = mean_prob[i].argmax(axis=0)
        if cleanup:
            lab = cleanup_label_map(lab, c)
        onehots[i] = one_hot(lab, c)
    return PseudoLabelBundle(onehots, rel, mean_prob, step=step)


# ---------------------------------------------------------------------------
# PGM export


def write_pgm(path, image: np.ndarray, maxval: int = 255) -> None:
    """Binary PGM (P5) writer for 2-D uint8 data."""
    image = np.asarray(image)
    if image.ndim != 2:
        raise ValueError("PGM export needs a 2-D array")
    if image.min() < 0 or image.max() > maxval:
        raise ValueError("pixel values out of PGM range")
    data = image.astype(np.uint8)
    with open(path, "wb") as f:
        f.write(f"P5\n{image.shape[1]} {image.shape[0]}\n{maxval}\n".encode("ascii"))
        f.write(data.tobytes())


def export_label_pgm(path, label_map: np.ndarray, num_classes: int) -> None:
    """Label map spread over 0..255 for viewing."""
    scale = 255 // max(num_classes - 1, 1)
    write_pgm(path, np.asarray(label_map).astype(np.uint8) * scale)


def export_reliability_pgm(path, reliability: np.ndarray) -> None:
    write_pgm(path, (np.asarray(reliability) > 0).astype(np.uint8) * 255)
