"""Model zoo: CNN-Transformer audio embedder with weight standardization
and group normalization, a CNN-GRU generic branch, a Time2Vec metadata
encoder, and the fused tagging heads for systems 1-3.

Nothing in the forward pass reads batch-level statistics, so per-sample
outputs do not depend on which other clips share the batch.
"""

from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, field

import numpy as np

from . import tensor as T
from .taxonomy import layout


@dataclass
class MetadataRecord:
    """Spatio-temporal clip context: time of recording and sensor location."""

    week: int
    day: int
    hour: int
    latitude: float
    longitude: float

    def validate(self):
        if not 1 <= self.week <= 52:
            raise ValueError(f"week out of range: {self.week}")
        if not 0 <= self.day <= 6:
            raise ValueError(f"day out of range: {self.day}")
        if not 0 <= self.hour <= 23:
            raise ValueError(f"hour out of range: {self.hour}")
        if not (np.isfinite(self.latitude) and abs(self.latitude) <= 90):
            raise ValueError(f"latitude out of range: {self.latitude}")
        if not (np.isfinite(self.longitude) and abs(self.longitude) <= 180):
            raise ValueError(f"longitude out of range: {self.longitude}")
        return self


def metadata_to_array(records):
    """(N, 5) float array of [week, day, hour, lat, lon] rows."""
    rows = [
        [r.week, r.day, r.hour, r.latitude, r.longitude]
        for r in (records if isinstance(records, (list, tuple)) else [records])
    ]
    return np.asarray(rows, dtype=np.float64)


@dataclass
class ModelConfig:
    system: int = 1
    d_model: int = 128
    n_heads: int = 4
    n_audio_layers: int = 2
    n_meta_layers: int = 1
    conv_channels: tuple = (32, 64, 128)
    pool_plan: tuple = ((2, 2), (2, 2), (1, 2))
    gn_groups: int = 8
    ff_mult: int = 2
    d_spec: int = 0  # 0 = d_model
    d_gen: int = 0
    d_meta: int = 0
    freeze_generic: bool = False
    n_mels: int = 64
    lat_min: float = 40.5
    lat_max: float = 41.0
    lon_min: float = -74.3
    lon_max: float = -73.6

    def __post_init__(self):
        if self.system not in (1, 2, 3):
            raise ValueError(f"unknown system id: {self.system}")
        if self.d_model % self.n_heads:
            raise ValueError("d_model must be divisible by n_heads")
        self.conv_channels = tuple(self.conv_channels)
        self.pool_plan = tuple(tuple(p) for p in self.pool_plan)
        if len(self.conv_channels) != len(self.pool_plan):
            raise ValueError("conv_channels and pool_plan lengths differ")
        for c in self.conv_channels:
            if c % self.gn_groups:
                raise ValueError("conv channels must be divisible by gn_groups")
        for d in (self.d_spec, self.d_gen, self.d_meta):
            if d not in (0, self.d_model):
                raise ValueError("distinct embedding dims are not supported")

    @property
    def dims(self):
        d = self.d_model
        return (
            self.d_spec or d,
            self.d_gen or d,
            self.d_meta or d,
        )


# -- functional pieces --------------------------------------------------------


def weight_standardize(w, eps=1e-5):
    """Zero-mean / unit-variance reparameterization per output channel.

    ``w`` has the output-channel axis first; statistics are taken over all
    remaining axes. Differentiable (used in place of the raw kernel).
    """
    w = T.as_tensor(w)
    axes = tuple(range(1, w.ndim))
    mu = w.mean(axis=axes, keepdims=True)
    centered = w - mu
    var = (centered * centered).mean(axis=axes, keepdims=True)
    return centered / T.sqrt(var + eps)


def group_norm(x, groups, gamma, beta, eps=1e-5):
    """Per-(sample, group) normalization of an (N, C, H, W) tensor.

    No statistic crosses the batch axis; with groups=1 this normalizes
    over all of C, H, W.
    """
    x = T.as_tensor(x)
    n, c, h, w = x.shape
    if c % groups:
        raise ValueError(f"channels {c} not divisible by groups {groups}")
    xg = x.reshape(n, groups, (c // groups) * h * w)
    mu = xg.mean(axis=2, keepdims=True)
    centered = xg - mu
    var = (centered * centered).mean(axis=2, keepdims=True)
    xhat = (centered / T.sqrt(var + eps)).reshape(n, c, h, w)
    return xhat * gamma.reshape(1, c, 1, 1) + beta.reshape(1, c, 1, 1)


def time2vec(tau, omega, phi):
    """One linear coordinate plus k-1 sinusoids: out[0] = w0*tau + p0,
    out[i] = sin(wi*tau + pi). ``tau`` is (N, 1); output is (N, k)."""
    omega = T.as_tensor(omega)
    if omega.shape[-1] < 2:
        raise ValueError("time2vec needs at least 2 coordinates")
    z = T.as_tensor(tau) * omega.reshape(1, -1) + T.as_tensor(phi).reshape(1, -1)
    return T.concat([z[:, :1], T.sin(z[:, 1:])], axis=1)


def sinusoidal_positions(n_pos, d_model, dtype=np.float32):
    """Fixed transformer position encoding table, (n_pos, d_model)."""
    pos = np.arange(n_pos)[:, None].astype(np.float64)
    i = np.arange(d_model)[None, :]
    angle = pos / np.power(10000.0, (2 * (i // 2)) / d_model)
    table = np.where(i % 2 == 0, np.sin(angle), np.cos(angle))
    return table.astype(dtype)


# -- parameter containers ------------------------------------------------------


class Module:
    """Minimal parameter container; names follow attribute paths."""

    def named_params(self):
        out = []
        for key, val in vars(self).items():
            if isinstance(val, T.Tensor) and val.requires_grad:
                out.append((key, val))
            elif isinstance(val, Module):
                out.extend((f"{key}.{n}", p) for n, p in val.named_params())
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        out.extend(
                            (f"{key}{i}.{n}", p) for n, p in item.named_params()
                        )
        return out


def _he_conv(rng, shape, dtype):
    fan_in = int(np.prod(shape[1:]))
    return T.parameter(
        (rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)).astype(dtype)
    )


def _glorot(rng, fan_in, fan_out, dtype):
    lim = np.sqrt(6.0 / (fan_in + fan_out))
    return T.parameter(rng.uniform(-lim, lim, (fan_in, fan_out)).astype(dtype))


def _zeros(shape, dtype):
    return T.parameter(np.zeros(shape, dtype=dtype))


def _ones(shape, dtype):
    return T.parameter(np.ones(shape, dtype=dtype))


class Linear(Module):
    def __init__(self, rng, d_in, d_out, dtype):
        self.weight = _glorot(rng, d_in, d_out, dtype)
        self.bias = _zeros((d_out,), dtype)

    def __call__(self, x):
        return x @ self.weight + self.bias.reshape(1, -1)


class ConvBlock(Module):
    """3x3 weight-standardized conv -> group norm -> relu -> max pool."""

    def __init__(self, rng, c_in, c_out, groups, pool, dtype):
        self.kernel = _he_conv(rng, (c_out, c_in, 3, 3), dtype)
        self.gn_gamma = _ones((c_out,), dtype)
        self.gn_beta = _zeros((c_out,), dtype)
        self.groups = groups
        self.pool = pool

    def __call__(self, x):
        h = T.conv2d(x, weight_standardize(self.kernel), padding="same")
        h = group_norm(h, self.groups, self.gn_gamma, self.gn_beta)
        return T.max_pool2d(T.relu(h), self.pool)


class EncoderLayer(Module):
    """Post-norm transformer encoder layer: multi-head self-attention with
    softmax over the time axis, then a position-wise feed-forward block."""

    def __init__(self, rng, d_model, n_heads, ff_mult, dtype):
        self.wq = Linear(rng, d_model, d_model, dtype)
        self.wk = Linear(rng, d_model, d_model, dtype)
        self.wv = Linear(rng, d_model, d_model, dtype)
        self.wo = Linear(rng, d_model, d_model, dtype)
        self.ln1_gamma = _ones((d_model,), dtype)
        self.ln1_beta = _zeros((d_model,), dtype)
        self.ff1 = Linear(rng, d_model, ff_mult * d_model, dtype)
        self.ff2 = Linear(rng, ff_mult * d_model, d_model, dtype)
        self.ln2_gamma = _ones((d_model,), dtype)
        self.ln2_beta = _zeros((d_model,), dtype)
        self.n_heads = n_heads
        self.d_head = d_model // n_heads

    def attention(self, x):
        n, t, d = x.shape
        h, dh = self.n_heads, self.d_head
        q = self.wq(x).reshape(n, t, h, dh).transpose(0, 2, 1, 3)
        k = self.wk(x).reshape(n, t, h, dh).transpose(0, 2, 3, 1)
        v = self.wv(x).reshape(n, t, h, dh).transpose(0, 2, 1, 3)
        scores = (q @ k) * float(1.0 / np.sqrt(dh))
        probs = T.softmax(scores, axis=-1)
        ctx = (probs @ v).transpose(0, 2, 1, 3).reshape(n, t, d)
        return self.wo(ctx), probs

    def __call__(self, x):
        att, _ = self.attention(x)
        x = T.layer_norm(x + att, self.ln1_gamma, self.ln1_beta)
        ff = self.ff2(T.relu(self.ff1(x)))
        return T.layer_norm(x + ff, self.ln2_gamma, self.ln2_beta)


class AttentionPool(Module):
    """Learned softmax weighting over time; output is a convex combination
    of the input rows."""

    def __init__(self, rng, d_model, dtype):
        self.score = Linear(rng, d_model, 1, dtype)

    def __call__(self, x):
        weights = T.softmax(self.score(x), axis=1)  # (N, T, 1)
        return (x * weights).sum(axis=1)


class SpecificEmbedder(Module):
    """Conv stack (WS+GN) -> token projection -> positional encoding ->
    transformer encoder -> attention pooling."""

    def __init__(self, rng, cfg, dtype):
        chans = (1,) + cfg.conv_channels
        self.blocks = [
            ConvBlock(rng, chans[i], chans[i + 1], cfg.gn_groups, cfg.pool_plan[i], dtype)
            for i in range(len(cfg.conv_channels))
        ]
        f_out = cfg.n_mels
        for _, pf in cfg.pool_plan:
            f_out //= pf
        self.proj = Linear(rng, f_out * cfg.conv_channels[-1], cfg.d_model, dtype)
        self.layers = [
            EncoderLayer(rng, cfg.d_model, cfg.n_heads, cfg.ff_mult, dtype)
            for _ in range(cfg.n_audio_layers)
        ]
        self.pool = AttentionPool(rng, cfg.d_model, dtype)
        self.d_model = cfg.d_model
        self.dtype = dtype

    def tokens(self, x):
        """(N, 1, T, F) -> (N, T', d_model) token sequence."""
        h = x
        for block in self.blocks:
            h = block(h)
        n, c, t, f = h.shape
        h = h.transpose(0, 2, 3, 1).reshape(n, t, f * c)
        h = self.proj(h)
        pe = sinusoidal_positions(t, self.d_model, self.dtype)
        h = h + pe[None, :, :]
        for layer in self.layers:
            h = layer(h)
        return h

    def __call__(self, x):
        return self.pool(self.tokens(x))


class GRUCell(Module):
    def __init__(self, rng, d_in, d_hidden, dtype):
        self.wx = _glorot(rng, d_in, 3 * d_hidden, dtype)
        self.wh = _glorot(rng, d_hidden, 3 * d_hidden, dtype)
        self.bx = _zeros((3 * d_hidden,), dtype)
        self.bh = _zeros((3 * d_hidden,), dtype)
        self.d_hidden = d_hidden

    def step(self, x_t, h):
        """One update: reset/update gates then candidate state."""
        d = self.d_hidden
        gx = x_t @ self.wx + self.bx.reshape(1, -1)
        gh = h @ self.wh + self.bh.reshape(1, -1)
        r = T.sigmoid(gx[:, :d] + gh[:, :d])
        z = T.sigmoid(gx[:, d : 2 * d] + gh[:, d : 2 * d])
        n = T.tanh(gx[:, 2 * d :] + r * gh[:, 2 * d :])
        return (1.0 - z) * n + z * h


class BiGRU(Module):
    """Bidirectional gated recurrent aggregation over the token axis."""

    def __init__(self, rng, d_in, d_hidden, dtype):
        self.fwd = GRUCell(rng, d_in, d_hidden, dtype)
        self.bwd = GRUCell(rng, d_in, d_hidden, dtype)
        self.d_hidden = d_hidden
        self.dtype = dtype

    def _run(self, cell, x):
        n, t, _ = x.shape
        h = T.Tensor(np.zeros((n, cell.d_hidden), dtype=self.dtype))
        outs = []
        for i in range(t):
            h = cell.step(x[:, i, :], h)
            outs.append(h.reshape(n, 1, cell.d_hidden))
        return T.concat(outs, axis=1)

    def __call__(self, x):
        fwd = self._run(self.fwd, x)
        rev = self._run(self.bwd, x[:, ::-1, :])
        return T.concat([fwd, rev[:, ::-1, :]], axis=2)


class GenericEmbedder(Module):
    """Same conv stack, aggregated by a bidirectional GRU (mean over time)."""

    def __init__(self, rng, cfg, dtype):
        chans = (1,) + cfg.conv_channels
        self.blocks = [
            ConvBlock(rng, chans[i], chans[i + 1], cfg.gn_groups, cfg.pool_plan[i], dtype)
            for i in range(len(cfg.conv_channels))
        ]
        f_out = cfg.n_mels
        for _, pf in cfg.pool_plan:
            f_out //= pf
        d_gen = cfg.dims[1]
        if d_gen % 2:
            raise ValueError("generic embedding dim must be even")
        self.proj = Linear(rng, f_out * cfg.conv_channels[-1], d_gen, dtype)
        self.rnn = BiGRU(rng, d_gen, d_gen // 2, dtype)

    def __call__(self, x):
        h = x
        for block in self.blocks:
            h = block(h)
        n, c, t, f = h.shape
        h = self.proj(h.transpose(0, 2, 3, 1).reshape(n, t, f * c))
        return self.rnn(h).mean(axis=1)


class MetadataEmbedder(Module):
    """Four tokens (hour, day, week via Time2Vec; lat/lon via a linear map)
    plus learned type embeddings, one encoder pass, mean over tokens."""

    N_TOKENS = 4

    def __init__(self, rng, cfg, dtype):
        d = cfg.dims[2]
        scale = 2.0 * np.pi
        self.omega_hour = T.parameter(
            (rng.standard_normal(d) * scale / 24.0).astype(dtype)
        )
        self.phi_hour = _zeros((d,), dtype)
        self.omega_day = T.parameter(
            (rng.standard_normal(d) * scale / 7.0).astype(dtype)
        )
        self.phi_day = _zeros((d,), dtype)
        self.omega_week = T.parameter(
            (rng.standard_normal(d) * scale / 52.0).astype(dtype)
        )
        self.phi_week = _zeros((d,), dtype)
        self.location = Linear(rng, 2, d, dtype)
        self.type_table = T.parameter(
            (rng.standard_normal((self.N_TOKENS, d)) * 0.02).astype(dtype)
        )
        self.layers = [
            EncoderLayer(rng, d, cfg.n_heads, cfg.ff_mult, dtype)
            for _ in range(cfg.n_meta_layers)
        ]
        self.cfg = cfg
        self.dtype = dtype

    def _normalize_latlon(self, lat, lon):
        cfg = self.cfg
        lat_n = 2.0 * (lat - cfg.lat_min) / (cfg.lat_max - cfg.lat_min) - 1.0
        lon_n = 2.0 * (lon - cfg.lon_min) / (cfg.lon_max - cfg.lon_min) - 1.0
        return np.stack([lat_n, lon_n], axis=1)

    def __call__(self, meta):
        """``meta`` is an (N, 5) array of [week, day, hour, lat, lon]."""
        meta = np.asarray(meta, dtype=np.float64)
        n = meta.shape[0]
        if (
            meta[:, 0].min() < 1
            or meta[:, 0].max() > 52
            or meta[:, 1].min() < 0
            or meta[:, 1].max() > 6
            or meta[:, 2].min() < 0
            or meta[:, 2].max() > 23
        ):
            raise ValueError("metadata field out of range")
        hour = meta[:, 2:3].astype(self.dtype)
        day = meta[:, 1:2].astype(self.dtype)
        week = meta[:, 0:1].astype(self.dtype)
        tok_hour = time2vec(hour, self.omega_hour, self.phi_hour)
        tok_day = time2vec(day, self.omega_day, self.phi_day)
        tok_week = time2vec(week, self.omega_week, self.phi_week)
        loc = self._normalize_latlon(meta[:, 3], meta[:, 4]).astype(self.dtype)
        tok_loc = self.location(T.Tensor(loc))
        d = tok_hour.shape[-1]
        tokens = T.concat(
            [t.reshape(n, 1, d) for t in (tok_hour, tok_day, tok_week, tok_loc)],
            axis=1,
        )
        types = T.embedding_lookup(self.type_table, np.arange(self.N_TOKENS))
        h = tokens + types.reshape(1, self.N_TOKENS, d)
        for layer in self.layers:
            h = layer(h)
        return h.mean(axis=1)


class Tagger(Module):
    """Full model: audio embedder(s) + metadata embedder + sigmoid head."""

    def __init__(self, cfg, tax, seed=0, dtype=np.float32):
        rng = np.random.default_rng(seed)
        self.config = cfg
        self.taxonomy = tax
        self.layout = layout(cfg.system, tax)
        self.dtype = dtype
        d_spec, d_gen, d_meta = cfg.dims
        self.specific = SpecificEmbedder(rng, cfg, dtype)
        self.generic = (
            GenericEmbedder(rng, cfg, dtype) if cfg.system in (2, 3) else None
        )
        self.meta = MetadataEmbedder(rng, cfg, dtype)
        d_in = d_spec + d_meta + (d_gen if cfg.system in (2, 3) else 0)
        self.head = Linear(rng, d_in, self.layout.dim, dtype)

    def forward(self, spec_values, meta):
        """Clip probabilities, (N, layout.dim) in (0, 1).

        ``spec_values`` is (N, T, F) or (T, F); ``meta`` is (N, 5).
        """
        x = np.asarray(spec_values)
        if x.ndim == 2:
            x = x[None]
        x = T.Tensor(x.astype(self.dtype)[:, None, :, :])
        parts = [self.specific(x)]
        if self.generic is not None:
            parts.append(self.generic(x))
        parts.append(self.meta(np.atleast_2d(meta)))
        emb = T.concat(parts, axis=1)
        return T.sigmoid(self.head(emb))

    def trainable_params(self):
        """Named parameters that the optimizer may update."""
        params = self.named_params()
        if self.config.freeze_generic:
            params = [(n, p) for n, p in params if not n.startswith("generic.")]
        return params


def build_model(cfg, tax, seed=0, dtype=np.float32):
    return Tagger(cfg, tax, seed=seed, dtype=dtype)


# -- checkpointing -------------------------------------------------------------


def save_checkpoint(dirpath, model, opt_state=None, step=0, metrics=None):
    """Manifest (names, shapes, offsets, config, step, metrics) plus one
    little-endian float32 blob; loading restores every array bit for bit."""
    os.makedirs(dirpath, exist_ok=True)
    entries, blobs, offset = [], [], 0
    arrays = [(n, p.data) for n, p in model.named_params()]
    if opt_state is not None:
        arrays += opt_state.named_arrays()
    for name, arr in arrays:
        a32 = np.ascontiguousarray(arr, dtype="<f4")
        entries.append(
            {
                "name": name,
                "shape": list(a32.shape),
                "offset": offset,
                "size": int(a32.size),
            }
        )
        blobs.append(a32.tobytes())
        offset += a32.size
    manifest = {
        "format": 1,
        "config": asdict(model.config),
        "step": int(step),
        "metrics": metrics or {},
        "opt_step": None if opt_state is None else int(opt_state.t),
        "arrays": entries,
    }
    with open(os.path.join(dirpath, "manifest.json"), "w") as fh:
        json.dump(manifest, fh, indent=1, sort_keys=True)
        fh.write("\n")
    with open(os.path.join(dirpath, "weights.bin"), "wb") as fh:
        fh.write(b"".join(blobs))


def load_checkpoint(dirpath, tax, dtype=np.float32):
    """Rebuild the model (and optimizer state, if stored) from disk."""
    from .optim import OptimState  # local import to avoid a cycle

    with open(os.path.join(dirpath, "manifest.json")) as fh:
        manifest = json.load(fh)
    raw_cfg = dict(manifest["config"])
    cfg = ModelConfig(**raw_cfg)
    blob = np.fromfile(os.path.join(dirpath, "weights.bin"), dtype="<f4")
    model = Tagger(cfg, tax, seed=0, dtype=dtype)
    arrays = {e["name"]: e for e in manifest["arrays"]}
    for name, p in model.named_params():
        e = arrays.pop(name, None)
        if e is None:
            raise ValueError(f"checkpoint missing parameter {name}")
        vals = blob[e["offset"] : e["offset"] + e["size"]].reshape(e["shape"])
        p.data = vals.astype(dtype)
        p.grad = np.zeros_like(p.data)
    opt_state = None
    if manifest.get("opt_step") is not None:
        opt_state = OptimState.from_arrays(
            manifest["opt_step"],
            {
                name: blob[e["offset"] : e["offset"] + e["size"]]
                .reshape(e["shape"])
                .astype(dtype)
                for name, e in arrays.items()
            },
        )
    return model, opt_state, manifest["step"], manifest["metrics"]
