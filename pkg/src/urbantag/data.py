"""Dataset ingestion, annotator aggregation, relabeling and synthetic
fixture generation.

Annotations live in one CSV per dataset root (``annotations.csv``) next
to an ``audio/`` directory of WAVs named ``<clip_id>.wav``. Target cells
hold values in [0, 1] or -1 for unknown; a clip may span several rows
(one per annotator). The ``verified`` flag marks clips whose labels are
trusted and must survive relabeling untouched.
"""

from __future__ import annotations

import csv
import os
from dataclasses import dataclass

import numpy as np

from . import dsp
from .nn import MetadataRecord
from .taxonomy import LabelVector, derive_other_unknown, fine_to_coarse

REQUIRED_COLUMNS = (
    "clip_id",
    "split",
    "verified",
    "week",
    "day",
    "hour",
    "latitude",
    "longitude",
)
SPLITS = ("train", "validate")


@dataclass
class ClipRecord:
    clip_id: str
    audio_path: str
    split: str
    verified: bool
    meta: MetadataRecord
    targets: LabelVector


@dataclass
class DatasetIndex:
    records: list
    taxonomy_hash: str
    root: str

    def by_split(self, split):
        return [r for r in self.records if r.split == split]

    def by_id(self, clip_id):
        for r in self.records:
            if r.clip_id == clip_id:
                return r
        raise KeyError(clip_id)


@dataclass
class AnnotationRow:
    clip_id: str
    split: str
    verified: bool
    meta: MetadataRecord
    coarse: np.ndarray  # values in [0,1] or -1 (unknown)
    fine: np.ndarray


def _target_columns(tax):
    return (
        [f"coarse:{c}" for c in tax.coarse_tags],
        [f"fine:{f}" for f in tax.fine_tags],
    )


def _parse_target(raw, column, line_no):
    try:
        v = float(raw)
    except ValueError:
        raise ValueError(f"bad value {raw!r} in {column} (line {line_no})") from None
    if v == -1 or 0.0 <= v <= 1.0:
        return v
    raise ValueError(f"bad value {raw!r} in {column} (line {line_no})")


def parse_annotations(path, tax):
    """Typed rows from an annotations CSV; -1 target cells mean unknown."""
    coarse_cols, fine_cols = _target_columns(tax)
    rows = []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        header = reader.fieldnames or []
        for col in (*REQUIRED_COLUMNS, *coarse_cols, *fine_cols):
            if col not in header:
                raise ValueError(f"missing column {col!r} in {path}")
        for line_no, raw in enumerate(reader, start=2):
            if raw["split"] not in SPLITS:
                raise ValueError(f"bad split {raw['split']!r} (line {line_no})")
            meta = MetadataRecord(
                week=int(raw["week"]),
                day=int(raw["day"]),
                hour=int(raw["hour"]),
                latitude=float(raw["latitude"]),
                longitude=float(raw["longitude"]),
            ).validate()
            rows.append(
                AnnotationRow(
                    clip_id=raw["clip_id"],
                    split=raw["split"],
                    verified=raw["verified"].strip() in ("1", "true", "True"),
                    meta=meta,
                    coarse=np.array(
                        [
                            _parse_target(raw[c], c, line_no)
                            for c in coarse_cols
                        ]
                    ),
                    fine=np.array(
                        [_parse_target(raw[c], c, line_no) for c in fine_cols]
                    ),
                )
            )
    return rows


def aggregate_annotators(rows, tax):
    """Merge one clip's annotator rows into a single target bundle.

    A tag is positive if any annotator marked it (max over observed
    values). A fine tag stays unknown only when nobody observed it and
    its coarse category is positive or itself unobserved; a confidently
    negative category resolves all its children to 0.
    """
    if not rows:
        raise ValueError("aggregate_annotators needs at least one row")
    coarse_vals = np.stack([r.coarse for r in rows])
    fine_vals = np.stack([r.fine for r in rows])

    n_c, n_f = coarse_vals.shape[1], fine_vals.shape[1]
    coarse = np.zeros(n_c)
    coarse_observed = np.zeros(n_c, dtype=bool)
    for c in range(n_c):
        obs = coarse_vals[coarse_vals[:, c] >= 0, c]
        coarse_observed[c] = obs.size > 0
        coarse[c] = obs.max() if obs.size else 0.0

    fine = np.zeros(n_f)
    mask = np.ones(n_f)
    parent = tax.parent_index
    for f in range(n_f):
        obs = fine_vals[fine_vals[:, f] >= 0, f]
        if obs.size:
            fine[f] = obs.max()
        else:
            p = parent[f]
            if coarse[p] > 0 or not coarse_observed[p]:
                mask[f] = 0.0
    return LabelVector(
        coarse=coarse,
        fine=fine,
        fine_mask=mask,
        other=derive_other_unknown(mask, tax),
    )


def load_dataset(root, tax, require_audio=True):
    """Index a dataset root: parse, group by clip, aggregate annotators."""
    rows = parse_annotations(os.path.join(root, "annotations.csv"), tax)
    grouped: dict[str, list] = {}
    for row in rows:
        grouped.setdefault(row.clip_id, []).append(row)
    records, missing = [], []
    for clip_id, clip_rows in grouped.items():
        first = clip_rows[0]
        audio_path = os.path.join(root, "audio", f"{clip_id}.wav")
        if require_audio and not os.path.exists(audio_path):
            missing.append(clip_id)
            continue
        records.append(
            ClipRecord(
                clip_id=clip_id,
                audio_path=audio_path,
                split=first.split,
                verified=first.verified,
                meta=first.meta,
                targets=aggregate_annotators(clip_rows, tax),
            )
        )
    if missing:
        raise FileNotFoundError(
            f"missing audio for clips: {', '.join(missing[:5])}"
            + (" ..." if len(missing) > 5 else "")
        )
    return DatasetIndex(records=records, taxonomy_hash=tax.content_hash(), root=root)


def clip_features(record, cache_dir=None):
    """Log-mel features for one clip, via the binary cache when present."""
    if cache_dir:
        cache_path = os.path.join(cache_dir, f"{record.clip_id}.lmel")
        if os.path.exists(cache_path):
            spec = dsp.read_feature_cache(cache_path)
            if spec.config_hash == dsp.config_hash():
                return spec
    w = dsp.load_wav(record.audio_path)
    w = dsp.resample(w, dsp.SAMPLE_RATE)
    spec = dsp.logmel(w)
    if cache_dir:
        os.makedirs(cache_dir, exist_ok=True)
        dsp.write_feature_cache(os.path.join(cache_dir, f"{record.clip_id}.lmel"), spec)
    return spec


def _predict_scores(model, records, cache_dir=None, batch_size=16):
    """Deterministic forward pass over clips; returns {clip_id: scores}."""
    from . import tensor as T
    from .nn import metadata_to_array

    out = {}
    for lo in range(0, len(records), batch_size):
        batch = records[lo : lo + batch_size]
        feats = np.stack([clip_features(r, cache_dir).values for r in batch])
        meta = metadata_to_array([r.meta for r in batch])
        with T.no_grad():
            probs = model.forward(feats, meta).data
        for rec, vec in zip(batch, probs):
            out[rec.clip_id] = vec.astype(np.float64)
    return out


def relabel(model, ds, protected, out_path, cache_dir=None, hard=False, tau=0.5):
    """Rewrite annotations with model predictions as soft labels.

    Rows of protected clips are copied byte-for-byte from the source CSV;
    every other clip collapses to one row whose target cells hold the
    model's sigmoid outputs (thresholded at ``tau`` when ``hard``) with
    all fine masks set to 1. Only target columns change.
    """
    if model.config.system != 2:
        raise ValueError(
            "relabeling requires a system-2 checkpoint "
            f"(got system {model.config.system})"
        )
    protected = set(protected)
    tax = model.taxonomy
    coarse_cols, fine_cols = _target_columns(tax)
    src = os.path.join(ds.root, "annotations.csv")
    with open(src, newline="") as fh:
        lines = fh.read().splitlines()
    header = next(csv.reader([lines[0]]))
    col_pos = {name: i for i, name in enumerate(header)}
    id_pos = col_pos["clip_id"]

    scorable = [r for r in ds.records if r.clip_id not in protected]
    scores = _predict_scores(model, scorable, cache_dir=cache_dir)
    lay_nc = tax.n_coarse

    emitted = set()
    out_lines = [lines[0]]
    for line in lines[1:]:
        if not line.strip():
            continue
        fields = next(csv.reader([line]))
        clip_id = fields[id_pos]
        if clip_id in protected:
            out_lines.append(line)
            continue
        if clip_id in emitted:
            continue  # extra annotator rows collapse into the first
        emitted.add(clip_id)
        if clip_id not in scores:
            raise ValueError(f"missing predictions for clip {clip_id}")
        vec = scores[clip_id]
        coarse = vec[:lay_nc]
        fine = vec[lay_nc : lay_nc + tax.n_fine]
        if hard:
            coarse = (coarse >= tau).astype(float)
            fine = (fine >= tau).astype(float)
        for j, col in enumerate(coarse_cols):
            fields[col_pos[col]] = f"{coarse[j]:.6f}"
        for j, col in enumerate(fine_cols):
            fields[col_pos[col]] = f"{fine[j]:.6f}"
        out_lines.append(",".join(fields))
    with open(out_path, "w", newline="") as fh:
        fh.write("\n".join(out_lines) + "\n")
    return out_path


# -- synthetic fixtures --------------------------------------------------------


def tone_frequency(fine_idx, n_fine=23):
    """Distinct tone per fine tag, log-spaced over the mel range."""
    return 300.0 * (6000.0 / 300.0) ** (fine_idx / (n_fine - 1))


def synth_dataset(n_clips, seed, tax, root, duration=10.0, validate_every=8):
    """Deterministic toy dataset: tone mixtures keyed to fine tags.

    Every clip is a 10 s mixture of 1-3 pure tones plus low-level noise at
    44100 Hz; labels follow the tones, metadata is drawn uniformly in
    range. Every ``validate_every``-th clip lands in the validate split
    with the verified flag set (the protected-subset analog).
    """
    if n_clips < 2:
        raise ValueError("synth_dataset needs at least 2 clips")
    rng = np.random.default_rng(seed)
    os.makedirs(os.path.join(root, "audio"), exist_ok=True)
    coarse_cols, fine_cols = _target_columns(tax)
    header = list(REQUIRED_COLUMNS) + coarse_cols + fine_cols
    lines = [",".join(header)]
    n_samples = int(round(duration * dsp.SAMPLE_RATE))
    t = np.arange(n_samples) / dsp.SAMPLE_RATE
    for i in range(n_clips):
        clip_id = f"synth{i:04d}"
        k = int(rng.integers(1, 4))
        chosen = np.sort(rng.choice(tax.n_fine, size=k, replace=False))
        x = rng.normal(0.0, 0.005, n_samples)
        for f_idx in chosen:
            phase = rng.uniform(0, 2 * np.pi)
            x += (0.3 / k) * np.sin(2 * np.pi * tone_frequency(int(f_idx)) * t + phase)
        dsp.save_wav(
            os.path.join(root, "audio", f"{clip_id}.wav"),
            dsp.Waveform(samples=x, sample_rate=dsp.SAMPLE_RATE),
        )
        fine = np.zeros(tax.n_fine)
        fine[chosen] = 1.0
        coarse = fine_to_coarse(fine, tax)
        split = "validate" if (i % validate_every) == validate_every - 1 else "train"
        verified = 1 if split == "validate" else 0
        meta = [
            str(int(rng.integers(1, 53))),
            str(int(rng.integers(0, 7))),
            str(int(rng.integers(0, 24))),
            f"{rng.uniform(40.5, 41.0):.6f}",
            f"{rng.uniform(-74.3, -73.6):.6f}",
        ]
        row = [clip_id, split, str(verified)] + meta
        row += [str(int(v)) for v in coarse] + [str(int(v)) for v in fine]
        lines.append(",".join(row))
    with open(os.path.join(root, "annotations.csv"), "w", newline="") as fh:
        fh.write("\n".join(lines) + "\n")
    return root
