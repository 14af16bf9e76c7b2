"""Optimizer stack: rectified Adam core, layer-wise trust-ratio scaling
(Ralamb), and the Lookahead slow-weights wrapper.

The exact variant is pinned so trajectories are reproducible: decoupled
weight decay is added into the update (not the gradient), the trust
ratio is ||p|| / (||update|| + eps) clamped to (0, trust_clip] with a
fallback of 1 when either norm vanishes, and one named parameter tensor
forms one trust-ratio layer.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass
class OptimConfig:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0
    lookahead_enabled: bool = True
    lookahead_k: int = 5
    lookahead_alpha: float = 0.5
    trust_clip: float = 10.0
    grad_clip: float = 0.0  # per-tensor L2 clip; 0 disables

    def __post_init__(self):
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ValueError("betas must lie in [0, 1)")
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        if self.lookahead_k < 1:
            raise ValueError("lookahead_k must be >= 1")
        if not 0 < self.lookahead_alpha <= 1:
            raise ValueError("lookahead_alpha must lie in (0, 1]")
        if self.trust_clip <= 0:
            raise ValueError("trust_clip must be positive")


def rho_t(t, beta2):
    """Length of the SMA approximation at step t (rectification control)."""
    rho_inf = 2.0 / (1.0 - beta2) - 1.0
    b2t = beta2**t
    return rho_inf - 2.0 * t * b2t / (1.0 - b2t)


def radam_update(g, m, v, t, cfg):
    """One rectified-Adam update direction; mutates the moment buffers.

    Returns lr * r_t * m_hat / (sqrt(v_hat) + eps) when the variance
    estimate is tractable (rho_t > 4), else the unrectified lr * m_hat.
    """
    m *= cfg.beta1
    m += (1.0 - cfg.beta1) * g
    v *= cfg.beta2
    v += (1.0 - cfg.beta2) * (g * g)
    mhat = m / (1.0 - cfg.beta1**t)
    rho_inf = 2.0 / (1.0 - cfg.beta2) - 1.0
    rt = rho_t(t, cfg.beta2)
    if rt > 4.0:
        rect = np.sqrt(
            ((rt - 4.0) * (rt - 2.0) * rho_inf)
            / ((rho_inf - 4.0) * (rho_inf - 2.0) * rt)
        )
        vhat = np.sqrt(v / (1.0 - cfg.beta2**t))
        return cfg.lr * float(rect) * mhat / (vhat + cfg.eps)
    return cfg.lr * mhat


def radam_step(p, g, state, cfg):
    """Apply one RAdam step to ``p``; ``state`` holds m, v and the count t."""
    state["t"] = state.get("t", 0) + 1
    u = radam_update(g, state["m"], state["v"], state["t"], cfg)
    return p - u


def trust_ratio(p, u, cfg):
    """||p|| / (||u|| + eps), clamped to trust_clip; 1 if either norm is 0."""
    pn = float(np.linalg.norm(p))
    un = float(np.linalg.norm(u))
    if pn == 0.0 or un == 0.0:
        return 1.0
    return min(pn / (un + cfg.eps), cfg.trust_clip)


def ralamb_step(p, g, state, cfg):
    """RAdam update with decoupled weight decay, scaled by the trust ratio."""
    state["t"] = state.get("t", 0) + 1
    u = radam_update(g, state["m"], state["v"], state["t"], cfg)
    if cfg.weight_decay:
        u = u + cfg.weight_decay * p
    return p - trust_ratio(p, u, cfg) * u


def lookahead_step(theta, phi, t, cfg):
    """Every k inner steps pull the slow weights toward the fast weights
    and reset the fast weights onto them; otherwise leave phi untouched."""
    if t % cfg.lookahead_k == 0:
        phi = phi + cfg.lookahead_alpha * (theta - phi)
        theta = phi.copy()
    return theta, phi


class OptimState:
    """Per-parameter moment buffers, slow weights and the step counter."""

    def __init__(self, named_params):
        self.t = 0
        self.m = {n: np.zeros_like(p.data) for n, p in named_params}
        self.v = {n: np.zeros_like(p.data) for n, p in named_params}
        self.slow = {n: p.data.copy() for n, p in named_params}

    def named_arrays(self):
        out = []
        for name in self.m:
            out.append((f"opt.m.{name}", self.m[name]))
            out.append((f"opt.v.{name}", self.v[name]))
            out.append((f"opt.slow.{name}", self.slow[name]))
        return out

    @classmethod
    def from_arrays(cls, t, arrays):
        state = cls([])
        state.t = t
        for key, arr in arrays.items():
            if key.startswith("opt.m."):
                state.m[key[len("opt.m.") :]] = arr
            elif key.startswith("opt.v."):
                state.v[key[len("opt.v.") :]] = arr
            elif key.startswith("opt.slow."):
                state.slow[key[len("opt.slow.") :]] = arr
            else:
                raise ValueError(f"unknown optimizer array {key}")
        return state


class Ralamb:
    """Applies ralamb_step to every named parameter, with Lookahead on top.

    One optimizer owns one parameter set; steps are serialized.
    """

    def __init__(self, named_params, cfg, state=None):
        self.params = list(named_params)
        self.cfg = cfg
        self.state = state if state is not None else OptimState(self.params)

    def zero_grad(self):
        for _, p in self.params:
            p.zero_grad()

    def step(self):
        cfg = self.cfg
        self.state.t += 1
        t = self.state.t
        for name, p in self.params:
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            if cfg.grad_clip > 0.0:
                gn = float(np.linalg.norm(g))
                if gn > cfg.grad_clip:
                    g = g * (cfg.grad_clip / gn)
            u = radam_update(g, self.state.m[name], self.state.v[name], t, cfg)
            if cfg.weight_decay:
                u = u + cfg.weight_decay * p.data
            p.data = p.data - trust_ratio(p.data, u, cfg) * u
        if cfg.lookahead_enabled and t % cfg.lookahead_k == 0:
            for name, p in self.params:
                phi = self.state.slow[name]
                phi += cfg.lookahead_alpha * (p.data - phi)
                p.data = phi.copy()
