"""Two-level urban sound tag hierarchy, label vectors and output layouts.

The hierarchy is data, not code: a text file lists coarse categories and
their fine children (see ``taxonomy_default.txt``). Coarse scores are
derived from fine scores by a max over children, so thresholding at any
cutoff can never produce a fine-positive whose parent is negative.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from importlib import resources

import numpy as np

EXPECTED_COARSE = 8
EXPECTED_FINE = 23


class TaxonomyError(ValueError):
    """Malformed taxonomy file or structurally invalid hierarchy."""


@dataclass(frozen=True)
class Taxonomy:
    """The tag hierarchy: ordered coarse and fine tags plus parent links.

    ``other_unknown`` holds one synthetic class per coarse category with at
    least two fine children; these are the extra output slots of the 37-way
    layout and are named ``<coarse>-other``.
    """

    coarse_tags: tuple[str, ...]
    fine_tags: tuple[str, ...]
    parent: dict[str, str]
    other_unknown: tuple[str, ...] = field(init=False)

    def __post_init__(self):
        names = list(self.coarse_tags) + list(self.fine_tags)
        dupes = {n for n in names if names.count(n) > 1}
        # A fine tag may share its name with its own coarse category
        # (singleton stanzas); any other collision is an error.
        for n in dupes:
            if not (n in self.coarse_tags and self.parent.get(n) == n):
                raise TaxonomyError(f"duplicate tag name: {n!r}")
        for f in self.fine_tags:
            if f not in self.parent:
                raise TaxonomyError(f"fine tag without a parent: {f!r}")
            if self.parent[f] not in self.coarse_tags:
                raise TaxonomyError(f"unknown parent for fine tag {f!r}")
        for c in self.coarse_tags:
            if not any(p == c for p in self.parent.values()):
                raise TaxonomyError(f"coarse tag without children: {c!r}")
        other = tuple(
            f"{c}-other" for c in self.coarse_tags if len(self.children(c)) >= 2
        )
        object.__setattr__(self, "other_unknown", other)

    @property
    def n_coarse(self):
        return len(self.coarse_tags)

    @property
    def n_fine(self):
        return len(self.fine_tags)

    @property
    def n_other(self):
        return len(self.other_unknown)

    def children(self, coarse_tag):
        return tuple(f for f in self.fine_tags if self.parent[f] == coarse_tag)

    def coarse_index(self, tag):
        return self.coarse_tags.index(tag)

    def fine_index(self, tag):
        return self.fine_tags.index(tag)

    @property
    def parent_index(self):
        """Coarse index of each fine tag, as an int array of length n_fine."""
        return np.array(
            [self.coarse_tags.index(self.parent[f]) for f in self.fine_tags]
        )

    def child_indices(self, coarse_idx):
        """Fine indices under the coarse tag at ``coarse_idx``."""
        return np.flatnonzero(self.parent_index == coarse_idx)

    @property
    def other_coarse_indices(self):
        """Coarse index behind each other/unknown class, in slot order."""
        return np.array(
            [self.coarse_tags.index(o[: -len("-other")]) for o in self.other_unknown]
        )

    def content_hash(self):
        canon = "\n".join(
            [",".join(self.coarse_tags), ",".join(self.fine_tags)]
            + [f"{f}>{self.parent[f]}" for f in self.fine_tags]
        )
        return hashlib.md5(canon.encode()).hexdigest()


def load_taxonomy(path=None, strict=True):
    """Parse a taxonomy text file (default: the bundled hierarchy).

    Stanza format: an unindented line starts a coarse category, indented
    lines are its fine children. '#' starts a comment, blank lines are
    skipped. With ``strict`` the 8-coarse/23-fine counts are enforced;
    tests may load degenerate hierarchies with ``strict=False``.
    """
    if path is None:
        text = (
            resources.files("urbantag").joinpath("taxonomy_default.txt").read_text()
        )
    else:
        with open(path, encoding="utf-8") as fh:
            text = fh.read()

    coarse, fine, parent = [], [], {}
    current = None
    for raw in text.splitlines():
        line = raw.split("#", 1)[0].rstrip()
        if not line.strip():
            continue
        indented = line[0] in " \t"
        name = line.strip()
        if indented:
            if current is None:
                raise TaxonomyError(f"fine tag {name!r} appears before any coarse tag")
            if name in parent:
                raise TaxonomyError(f"fine tag {name!r} listed under two parents")
            fine.append(name)
            parent[name] = current
        else:
            if name in coarse:
                raise TaxonomyError(f"duplicate coarse tag: {name!r}")
            coarse.append(name)
            current = name

    tax = Taxonomy(tuple(coarse), tuple(fine), parent)
    if strict:
        if tax.n_coarse != EXPECTED_COARSE:
            raise TaxonomyError(
                f"coarse tag count: expected {EXPECTED_COARSE}, got {tax.n_coarse}"
            )
        if tax.n_fine != EXPECTED_FINE:
            raise TaxonomyError(
                f"fine tag count: expected {EXPECTED_FINE}, got {tax.n_fine}"
            )
    return tax


def fine_to_coarse(fine_scores, tax):
    """Coarse scores as the max over each category's fine children.

    Works on any array whose last axis has length n_fine; scores must be
    finite and in [0, 1].
    """
    scores = np.asarray(fine_scores)
    if scores.shape[-1] != tax.n_fine:
        raise ValueError(
            f"expected last axis of length {tax.n_fine}, got {scores.shape[-1]}"
        )
    if not np.all(np.isfinite(scores)):
        raise ValueError("fine scores must be finite")
    if scores.min() < 0 or scores.max() > 1:
        raise ValueError("fine scores must lie in [0, 1]")
    out = np.empty(scores.shape[:-1] + (tax.n_coarse,), dtype=scores.dtype)
    for c in range(tax.n_coarse):
        out[..., c] = scores[..., tax.child_indices(c)].max(axis=-1)
    return out


@dataclass(frozen=True)
class OutputLayout:
    """Stable name->slot assignment for a system's prediction vector.

    Coarse tags occupy slots 0..7, fine tags 8..30; system 3 appends the
    other/unknown classes at 31..36.
    """

    system: int
    dim: int
    slot_names: tuple[str, ...]

    @property
    def index(self):
        return {name: i for i, name in enumerate(self.slot_names)}

    @property
    def coarse_slots(self):
        return slice(0, self.n_coarse)

    @property
    def fine_slots(self):
        return slice(self.n_coarse, self.n_coarse + self.n_fine)

    @property
    def other_slots(self):
        return slice(self.n_coarse + self.n_fine, self.dim)

    @property
    def n_coarse(self):
        return sum(1 for n in self.slot_names if n.startswith("coarse:"))

    @property
    def n_fine(self):
        return sum(1 for n in self.slot_names if n.startswith("fine:"))


def layout(system, tax):
    """Output layout for one of the three systems (dim 31, 31 or 37)."""
    if system not in (1, 2, 3):
        raise ValueError(f"unknown system id: {system!r}")
    names = [f"coarse:{c}" for c in tax.coarse_tags]
    names += [f"fine:{f}" for f in tax.fine_tags]
    if system == 3:
        names += [f"other:{o}" for o in tax.other_unknown]
    return OutputLayout(system=system, dim=len(names), slot_names=tuple(names))


@dataclass
class LabelVector:
    """Per-clip targets: coarse, fine, a fine-level validity mask and the
    derived other/unknown targets. Values may be soft (mixup, relabeling);
    a fine entry with mask 0 is ignored by every consumer."""

    coarse: np.ndarray
    fine: np.ndarray
    fine_mask: np.ndarray
    other: np.ndarray | None = None

    def copy(self):
        return LabelVector(
            self.coarse.copy(),
            self.fine.copy(),
            self.fine_mask.copy(),
            None if self.other is None else self.other.copy(),
        )


def derive_other_unknown(fine_mask, tax):
    """Other/unknown targets from a fine mask: a category's other class is
    positive exactly to the degree that one of its children is unobserved."""
    mask = np.asarray(fine_mask, dtype=float)
    out = np.zeros(tax.n_other, dtype=mask.dtype)
    for j, c in enumerate(tax.other_coarse_indices):
        out[j] = (1.0 - mask[tax.child_indices(c)]).max()
    return out
