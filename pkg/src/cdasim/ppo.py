"""Policies, rollout storage, GAE and the clipped-surrogate PPO update."""

from __future__ import annotations

import json
import logging
import math
import struct
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .nn import Mlp, n_params

log = logging.getLogger(__name__)

LOG_STD_MIN, LOG_STD_MAX = -5.0, 2.0
_HALF_LOG_2PI = 0.5 * math.log(2 * math.pi)


class NonFiniteLoss(FloatingPointError):
    pass


@dataclass
class PpoConfig:
    clip: float = 0.2
    gamma: float = 0.99
    lam: float = 0.95
    epochs: int = 4
    minibatch: int = 256
    lr: float = 0.01
    max_grad_norm: float = 0.5
    vf_coef: float = 0.5
    ent_coef: float = 0.01
    capacity: int = 2048

    def __post_init__(self):
        if not 0 < self.gamma < 1:
            raise ValueError(f"discount must lie in (0, 1), got {self.gamma}")
        if not 0 <= self.lam <= 1:
            raise ValueError(f"GAE lambda must lie in [0, 1], got {self.lam}")
        if self.capacity < 1 or self.minibatch < 1 or self.epochs < 1:
            raise ValueError("capacity, minibatch and epochs must be positive")

    @classmethod
    def from_dict(cls, d: Optional[dict]) -> "PpoConfig":
        return cls(**(d or {}))


# -- action heads ----------------------------------------------------------

@dataclass(frozen=True)
class GaussianHead:
    dim: int
    kind: str = "gaussian"

    @property
    def n_out(self) -> int:
        return self.dim

    @property
    def n_params(self) -> int:
        return self.dim


@dataclass(frozen=True)
class CategoricalHead:
    n: int
    kind: str = "categorical"

    @property
    def n_out(self) -> int:
        return self.n

    @property
    def n_params(self) -> int:
        return 0


def head_from_dict(d: dict):
    if d["kind"] == "gaussian":
        return GaussianHead(int(d["dim"]))
    if d["kind"] == "categorical":
        return CategoricalHead(int(d["n"]))
    raise ValueError(f"unknown head kind {d['kind']!r}")


def clamp_log_std(log_std: np.ndarray) -> np.ndarray:
    return np.clip(log_std, LOG_STD_MIN, LOG_STD_MAX)


def log_softmax(logits: np.ndarray) -> np.ndarray:
    m = logits.max(axis=-1, keepdims=True)
    z = logits - m
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def gaussian_log_prob(action, mean, log_std) -> np.ndarray:
    ls = clamp_log_std(np.asarray(log_std, dtype=np.float64))
    z = (np.asarray(action) - mean) / np.exp(ls)
    return (-0.5 * z * z - ls - _HALF_LOG_2PI).sum(axis=-1)


def sample_action(head, net_output: np.ndarray, rng: np.random.Generator,
                  log_std: Optional[np.ndarray] = None):
    """Draw an action for one observation; returns ``(raw_action, log_prob)``.

    Gaussian actions are ``mean + sigma * z`` before any squashing, with the
    exact Gaussian log density.  Categorical actions are class indices.
    """
    out = np.asarray(net_output, dtype=np.float64)
    if head.kind == "gaussian":
        ls = clamp_log_std(log_std)
        a = out + np.exp(ls) * rng.standard_normal(head.dim)
        return a, float(gaussian_log_prob(a, out, ls))
    lp = log_softmax(out)
    cdf = np.cumsum(np.exp(lp))
    idx = min(int(np.searchsorted(cdf, rng.random(), side="right")), head.n - 1)
    return idx, float(lp[idx])


def tanh_squash(raw, lo, hi):
    """Map an unbounded action into ``[lo, hi]`` via tanh."""
    return lo + (np.asarray(hi) - lo) * (np.tanh(raw) + 1.0) / 2.0


def squash_log_det(raw, lo, hi) -> float:
    """log |d squash / d raw| summed over dimensions, the change-of-variables term."""
    t = np.tanh(np.asarray(raw, dtype=np.float64))
    half = (np.asarray(hi, dtype=np.float64) - lo) / 2.0
    return float(np.sum(np.log(half) + np.log1p(-t * t + 1e-300)))


class Policy:
    """MLP trunk plus an action head; one flat parameter vector.

    For a Gaussian head the trailing ``dim`` parameters are the
    state-independent log standard deviations.
    """

    def __init__(self, obs_dim: int, head, hidden: Sequence[int] = (64, 64),
                 rng: Optional[np.random.Generator] = None,
                 params: Optional[np.ndarray] = None, init_log_std: float = -0.5):
        self.head = head
        self.sizes = (int(obs_dim), *[int(h) for h in hidden], head.n_out)
        n_net = n_params(self.sizes)
        if params is None:
            net = Mlp(self.sizes, rng=rng, out_scale=0.01)
            params = np.concatenate([net.params, np.full(head.n_params, init_log_std)])
        else:
            params = np.array(params, dtype=np.float64)
            if params.shape != (n_net + head.n_params,):
                raise ValueError("parameter vector does not match policy layout")
        self.params = params
        self.net = Mlp(self.sizes, params[:n_net])
        self._n_net = n_net

    @property
    def log_std(self) -> np.ndarray:
        return self.params[self._n_net:]

    @property
    def obs_dim(self) -> int:
        return self.sizes[0]

    def copy(self) -> "Policy":
        return Policy(self.obs_dim, self.head, self.sizes[1:-1], params=self.params.copy())

    def act(self, obs: np.ndarray, rng: np.random.Generator):
        out = self.net.forward(obs)
        return sample_action(self.head, out, rng, self.log_std if self.head.kind == "gaussian" else None)

    def mean_action(self, obs: np.ndarray) -> np.ndarray:
        """Noise-free action: the Gaussian mean, or the most likely class."""
        out = self.net.forward(obs)
        if self.head.kind == "gaussian":
            return out
        return np.argmax(out, axis=-1)

    def probs(self, obs: np.ndarray) -> np.ndarray:
        return np.exp(log_softmax(self.net.forward(obs)))

    def log_prob(self, obs: np.ndarray, actions: np.ndarray) -> np.ndarray:
        out = self.net.forward(obs)
        if self.head.kind == "gaussian":
            return gaussian_log_prob(actions, out, self.log_std)
        lp = log_softmax(out)
        return lp[np.arange(len(lp)), np.asarray(actions, dtype=np.int64)]

    def logp_entropy_grad(self, obs, actions, g_logp, g_ent: float):
        """Return ``(logp, entropy, grad)`` where ``grad`` is the gradient of
        ``sum(g_logp * logp) + g_ent * sum(entropy)`` with respect to ``params``.
        """
        out, acts = self.net.forward_cache(obs)
        grad = np.zeros_like(self.params)
        if self.head.kind == "gaussian":
            raw_ls = self.log_std
            ls = clamp_log_std(raw_ls)
            sigma = np.exp(ls)
            z = (actions - out) / sigma
            logp = (-0.5 * z * z - ls - _HALF_LOG_2PI).sum(axis=1)
            ent = np.full(len(out), float(np.sum(ls + 0.5 + _HALF_LOG_2PI)))
            g = g_logp[:, None]
            dout = g * z / sigma
            d_ls = (g * (z * z - 1.0)).sum(axis=0) + g_ent * len(out)
            d_ls = np.where((raw_ls > LOG_STD_MIN) & (raw_ls < LOG_STD_MAX), d_ls, 0.0)
            grad[self._n_net:] = d_ls
        else:
            lp = log_softmax(out)
            p = np.exp(lp)
            idx = np.asarray(actions, dtype=np.int64)
            rows = np.arange(len(out))
            logp = lp[rows, idx]
            ent = -(p * lp).sum(axis=1)
            onehot = np.zeros_like(p)
            onehot[rows, idx] = 1.0
            dout = g_logp[:, None] * (onehot - p) + g_ent * (-p * (lp + ent[:, None]))
        grad[:self._n_net] = self.net.backward(acts, dout)
        return logp, ent, grad


# -- experience ------------------------------------------------------------

class RolloutBuffer:
    def __init__(self, capacity: int, obs_dim: int, act_dim: int):
        self.capacity = capacity
        self.obs = np.zeros((capacity, obs_dim))
        self.actions = np.zeros((capacity, act_dim))
        self.log_probs = np.zeros(capacity)
        self.rewards = np.zeros(capacity)
        self.values = np.zeros(capacity)
        self.dones = np.zeros(capacity)
        self.size = 0

    def __len__(self) -> int:
        return self.size

    @property
    def full(self) -> bool:
        return self.size >= self.capacity

    def add(self, obs, action, log_prob, reward, value, done=False) -> None:
        if self.full:
            raise OverflowError("rollout buffer is full")
        i = self.size
        self.obs[i] = obs
        self.actions[i] = action
        self.log_probs[i] = log_prob
        self.rewards[i] = reward
        self.values[i] = value
        self.dones[i] = float(done)
        self.size += 1

    def clear(self) -> None:
        self.size = 0


def gae(rewards, values, bootstrap_value: float, gamma: float, lam: float, dones=None):
    """Generalized advantage estimates and value targets.

    ``delta_t = r_t + gamma * v_{t+1} - v_t`` with ``v_T = bootstrap_value``,
    ``A_t = delta_t + gamma * lam * A_{t+1}``; returns ``(A, A + values)``.
    """
    r = np.asarray(rewards, dtype=np.float64)
    v = np.asarray(values, dtype=np.float64)
    if r.shape != v.shape:
        raise ValueError("rewards and values differ in length")
    d = np.zeros_like(r) if dones is None else np.asarray(dones, dtype=np.float64)
    adv = np.zeros_like(r)
    nxt_v = bootstrap_value
    nxt_a = 0.0
    for t in range(len(r) - 1, -1, -1):
        live = 1.0 - d[t]
        delta = r[t] + gamma * nxt_v * live - v[t]
        nxt_a = delta + gamma * lam * live * nxt_a
        adv[t] = nxt_a
        nxt_v = v[t]
    return adv, adv + v


def clipped_surrogate(ratio, adv, clip: float):
    """Per-sample ``min(ratio * A, clip(ratio, 1-eps, 1+eps) * A)``."""
    ratio = np.asarray(ratio, dtype=np.float64)
    adv = np.asarray(adv, dtype=np.float64)
    return np.minimum(ratio * adv, np.clip(ratio, 1 - clip, 1 + clip) * adv)


def policy_loss_and_grad(policy: Policy, obs, actions, old_logp, adv, cfg: PpoConfig):
    """Negative mean clipped surrogate minus the entropy bonus, and its gradient."""
    n = len(obs)
    logp = policy.log_prob(obs, actions)
    ratio = np.exp(logp - old_logp)
    unclipped = ratio * adv
    clipped = np.clip(ratio, 1 - cfg.clip, 1 + cfg.clip) * adv
    active = unclipped <= clipped
    g_logp = np.where(active, -adv * ratio, 0.0) / n
    _, ent, grad = policy.logp_entropy_grad(obs, actions, g_logp, -cfg.ent_coef / n)
    loss = -np.minimum(unclipped, clipped).mean() - cfg.ent_coef * ent.mean()
    stats = {
        "ratio": float(ratio.mean()),
        "clip_frac": float(np.mean(np.abs(ratio - 1) > cfg.clip)),
        "entropy": float(ent.mean()),
        "ratios": ratio,
    }
    return float(loss), grad, stats


def value_loss_and_grad(value_net: Mlp, obs, returns, cfg: PpoConfig):
    v, acts = value_net.forward_cache(obs)
    err = v[:, 0] - returns
    loss = cfg.vf_coef * np.mean(err * err)
    dout = (2 * cfg.vf_coef / len(err)) * err[:, None]
    return float(loss), value_net.backward(acts, dout)


def _clip_norm(g: np.ndarray, max_norm: float) -> np.ndarray:
    norm = float(np.sqrt(g @ g))
    if norm > max_norm:
        g = g * (max_norm / norm)
    return g


def ppo_update(policy: Policy, value_net: Mlp, buffer: RolloutBuffer, cfg: PpoConfig,
               rng: np.random.Generator, bootstrap_value: float = 0.0) -> dict:
    """One PPO update over the buffer contents; clears the buffer.

    On a non-finite loss or gradient the parameters are restored and
    NonFiniteLoss is raised.
    """
    n = buffer.size
    if n == 0:
        raise ValueError("empty rollout buffer")
    obs = buffer.obs[:n]
    acts = buffer.actions[:n]
    if policy.head.kind == "categorical":
        acts = acts[:, 0].astype(np.int64)
    old_logp = buffer.log_probs[:n]
    adv, returns = gae(buffer.rewards[:n], buffer.values[:n], bootstrap_value,
                       cfg.gamma, cfg.lam, buffer.dones[:n])
    std = adv.std()
    adv = (adv - adv.mean()) / (std if std > 1e-8 else 1.0)

    saved_pi = policy.params.copy()
    saved_v = value_net.params.copy()
    first_ratio = None
    pi_losses, v_losses, clip_fracs, ratios = [], [], [], []
    try:
        for _ in range(cfg.epochs):
            perm = rng.permutation(n)
            for start in range(0, n, cfg.minibatch):
                mb = perm[start:start + cfg.minibatch]
                pl, pg, st = policy_loss_and_grad(policy, obs[mb], acts[mb], old_logp[mb],
                                                  adv[mb], cfg)
                vl, vg = value_loss_and_grad(value_net, obs[mb], returns[mb], cfg)
                if not (math.isfinite(pl) and math.isfinite(vl)
                        and np.isfinite(pg).all() and np.isfinite(vg).all()):
                    raise NonFiniteLoss(f"policy loss {pl}, value loss {vl}")
                if first_ratio is None:
                    first_ratio = st["ratios"]
                policy.params -= cfg.lr * _clip_norm(pg, cfg.max_grad_norm)
                value_net.params -= cfg.lr * _clip_norm(vg, cfg.max_grad_norm)
                pi_losses.append(pl)
                v_losses.append(vl)
                clip_fracs.append(st["clip_frac"])
                ratios.append(st["ratio"])
    except NonFiniteLoss:
        policy.params[...] = saved_pi
        value_net.params[...] = saved_v
        buffer.clear()
        log.warning("non-finite PPO loss; update discarded")
        raise
    buffer.clear()
    return {
        "samples": n,
        "mean_ratio": float(np.mean(ratios)),
        "clip_fraction": float(np.mean(clip_fracs)),
        "policy_loss": float(np.mean(pi_losses)),
        "value_loss": float(np.mean(v_losses)),
        "first_ratio_max_dev": float(np.max(np.abs(first_ratio - 1.0))),
        "mean_return": float(returns.mean()),
    }


# -- checkpoints -----------------------------------------------------------

_MAGIC = b"CDASIMCK"


def save_checkpoint(path, policy: Policy, value_net: Mlp, cfg: Optional[PpoConfig] = None,
                    rng: Optional[np.random.Generator] = None, meta: Optional[dict] = None) -> None:
    """Write a JSON header followed by little-endian float64 parameters
    (policy block, then value block)."""
    head = asdict(policy.head)
    header = {
        "policy_sizes": list(policy.sizes),
        "value_sizes": list(value_net.sizes),
        "head": head,
        "n_policy": int(policy.params.size),
        "n_value": int(value_net.params.size),
        "hyperparameters": asdict(cfg) if cfg is not None else None,
        "rng_state": rng.bit_generator.state if rng is not None else None,
        "meta": meta or {},
    }
    hbytes = json.dumps(header, sort_keys=True).encode()
    body = np.concatenate([policy.params, value_net.params]).astype("<f8").tobytes()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as f:
        f.write(_MAGIC)
        f.write(struct.pack("<Q", len(hbytes)))
        f.write(hbytes)
        f.write(body)


def load_checkpoint(path) -> dict:
    """Inverse of :func:`save_checkpoint`; returns policy, value net, config, rng, header."""
    with open(path, "rb") as f:
        if f.read(len(_MAGIC)) != _MAGIC:
            raise ValueError(f"{path}: not a checkpoint file")
        (hlen,) = struct.unpack("<Q", f.read(8))
        header = json.loads(f.read(hlen))
        body = np.frombuffer(f.read(), dtype="<f8").astype(np.float64)
    n_pi, n_v = header["n_policy"], header["n_value"]
    if body.size != n_pi + n_v:
        raise ValueError(f"{path}: truncated parameter block")
    head = head_from_dict(header["head"])
    sizes = header["policy_sizes"]
    policy = Policy(sizes[0], head, sizes[1:-1], params=body[:n_pi])
    value_net = Mlp(header["value_sizes"], body[n_pi:].copy())
    rng = None
    if header.get("rng_state") is not None:
        rng = np.random.default_rng()
        rng.bit_generator.state = header["rng_state"]
    cfg = PpoConfig(**header["hyperparameters"]) if header.get("hyperparameters") else None
    return {"policy": policy, "value_net": value_net, "config": cfg, "rng": rng, "header": header}
