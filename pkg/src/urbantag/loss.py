"""Binary cross entropy, its masked fine-level variant, and the joint
per-system training objectives.

Targets may be soft (mixup, relabeling). A fine slot whose mask is zero
contributes exactly nothing to either the loss value or the gradient:
the per-element loss is multiplied by the mask before the reduction, so
masked predictions can change arbitrarily without moving a single bit.
"""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .taxonomy import LabelVector

TargetBundle = LabelVector

CLAMP = 1e-7


def _elementwise_bce(p, y):
    p = T.as_tensor(p)
    y = np.asarray(y, dtype=p.dtype)
    if p.shape != y.shape:
        raise ValueError(f"prediction shape {p.shape} != target shape {y.shape}")
    pc = T.clip(p, CLAMP, 1.0 - CLAMP)
    return -(y * T.log(pc) + (1.0 - y) * T.log(1.0 - pc))


def bce(p, y):
    """Mean binary cross entropy over all elements (predictions clamped)."""
    return _elementwise_bce(p, y).mean()


def masked_bce(p, y, m):
    """BCE averaged over unmasked elements only.

    The divisor is max(1, sum(mask)), so an all-masked batch is well
    defined (zero loss, zero gradient).
    """
    p = T.as_tensor(p)
    m = np.asarray(m, dtype=p.dtype)
    if m.shape != p.shape:
        raise ValueError(f"mask shape {m.shape} != prediction shape {p.shape}")
    elem = _elementwise_bce(p, y)
    denom = max(1.0, float(m.sum()))
    return (elem * m).sum() * (1.0 / denom)


def joint_loss(system, outputs, t):
    """Training objective for one system.

    Systems 1-2: coarse BCE plus masked fine BCE (equal weights).
    System 3: one BCE over all 37 slots, with unknown fine targets
    resolved to 0 and the matching other/unknown class driven by the
    bundle's ``other`` targets.

    ``outputs`` is (N, dim) or (dim,); the bundle fields are batched the
    same way.
    """
    outputs = T.as_tensor(outputs)
    flat = outputs.ndim == 1
    dim = outputs.shape[-1]
    coarse = np.atleast_2d(np.asarray(t.coarse))
    fine = np.atleast_2d(np.asarray(t.fine))
    mask = np.atleast_2d(np.asarray(t.fine_mask))
    n_c, n_f = coarse.shape[1], fine.shape[1]
    if flat:
        outputs = outputs.reshape(1, dim)

    if system in (1, 2):
        if dim != n_c + n_f:
            raise ValueError(f"system {system} expects {n_c + n_f} slots, got {dim}")
        loss_c = bce(outputs[:, :n_c], coarse)
        loss_f = masked_bce(outputs[:, n_c : n_c + n_f], fine, mask)
        return loss_c + loss_f
    if system == 3:
        if t.other is None:
            raise ValueError("system 3 requires other/unknown targets")
        other = np.atleast_2d(np.asarray(t.other))
        if dim != n_c + n_f + other.shape[1]:
            raise ValueError(
                f"system 3 expects {n_c + n_f + other.shape[1]} slots, got {dim}"
            )
        full = np.concatenate([coarse, fine * mask, other], axis=1)
        return bce(outputs, full)
    raise ValueError(f"unknown system id: {system}")
