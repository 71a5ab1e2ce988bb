"""Actor and reward networks over a featurized parcel and its candidate-route slots.

Both networks share the same trunk layout (separate weights):

* parcel trunk: ``[weight, n_candidates / N_R] @ W + E_origin[o] + E_dest[d] + b``
  (width ``embed``) followed by ReLU layers ``parcel_hidden``;
* route trunk, one parameter set applied to every slot:
  ``[cost, max util, mean util, proportion deviation] @ W + E_provider[p] + b``
  followed by ReLU layers ``route_hidden``. It runs on real slots only, so
  padded slots have an all-zero representation and receive no gradient.

The actor scores each slot with a shared ReLU layer over the concatenated
parcel/route representations and a linear unit, then applies a masked softmax.
The reward network forms ``q = h_p Wq``, ``k_i = h_i Wk``, ``v_i = h_i Wv`` and
``v = sum_i (q . k_i) v_i`` over real slots (optionally softmax-normalized),
then a sigmoid layer and a linear output unit.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .env import PARCEL_DIM, ROUTE_DIM, Observation
from .neural import (DenseLayer, dense_backward, dense_forward, glorot, load_checkpoint,
                     masked_log_softmax, masked_softmax, masked_softmax_backward, save_checkpoint)

_PARCEL_CONT = [0, 3]
_ROUTE_CONT = [0, 1, 2, 3]


@dataclass(frozen=True)
class NetConfig:
    n_locations: int
    n_providers: int
    embed: int = 64
    parcel_hidden: tuple[int, ...] = (128,)
    route_hidden: tuple[int, ...] = (256, 128)
    scorer_hidden: int = 64
    attn_dim: int = 64
    out_hidden: int = 64
    normalized_attention: bool = False
    dtype: str = "float32"

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "NetConfig":
        d = dict(d)
        d["parcel_hidden"] = tuple(d["parcel_hidden"])
        d["route_hidden"] = tuple(d["route_hidden"])
        return cls(**d)

    @classmethod
    def for_instance(cls, instance, **kw) -> "NetConfig":
        arr = instance.arrays
        return cls(n_locations=len(arr.locations), n_providers=len(arr.providers), **kw)


@dataclass
class Batch:
    """Observation arrays with a leading batch axis, cast to the network dtype."""

    parcel: np.ndarray   # (B, PARCEL_DIM)
    routes: np.ndarray   # (B, N, ROUTE_DIM)
    mask: np.ndarray     # (B, N) bool

    @classmethod
    def from_obs(cls, obs: Observation | "Batch", dtype) -> "Batch":
        p, r, m = obs.parcel_feat if isinstance(obs, Observation) else obs.parcel, \
            obs.route_feats if isinstance(obs, Observation) else obs.routes, obs.mask
        if p.ndim == 1:
            p, r, m = p[None], r[None], m[None]
        if p.shape[-1] != PARCEL_DIM or r.shape[-1] != ROUTE_DIM:
            raise ValueError("observation feature widths do not match the network")
        return cls(np.asarray(p, dtype=dtype), np.asarray(r, dtype=dtype), np.asarray(m, dtype=bool))

    def take(self, idx) -> "Batch":
        return Batch(self.parcel[idx], self.routes[idx], self.mask[idx])

    def __len__(self) -> int:
        return self.parcel.shape[0]


def _scatter_rows(rows: np.ndarray, values: np.ndarray, shape: tuple[int, int]) -> np.ndarray:
    """Sum the per-slot ``values`` into their owning batch rows; ``rows`` index the flattened ``(B, N)`` grid."""
    B, N = shape
    dense = np.zeros((B * N, values.shape[1]), dtype=values.dtype)
    dense[rows] = values
    return dense.reshape(B, N, -1).sum(axis=1)


def _embedding_grad(index: np.ndarray, g: np.ndarray, n: int) -> np.ndarray:
    onehot = np.zeros((len(index), n), dtype=g.dtype)
    onehot[np.arange(len(index)), index] = 1.0
    return onehot.T @ g


def attention_pool(q: np.ndarray, k: np.ndarray, v: np.ndarray, rows: np.ndarray, shape: tuple[int, int],
                   normalized: bool = False):
    """``v = sum_i (q . k_i) v_i`` per batch row over the real slots ``rows`` of the flattened ``(B, N)`` grid.

    ``q`` is ``(B, a)``; ``k`` and ``v`` hold one row per real slot. Returns
    ``(v, slot weights, dense softmax weights or None)``.
    """
    B, N = shape
    score = np.einsum("ra,ra->r", q[rows // N], k)
    if not normalized:
        return _scatter_rows(rows, score[:, None] * v, shape), score, None
    dense = np.zeros(shape, dtype=score.dtype)
    dense.reshape(-1)[rows] = score
    mask = np.zeros(B * N, dtype=bool)
    mask[rows] = True
    w_dense = masked_softmax(dense, mask.reshape(shape))
    weight = w_dense.reshape(-1)[rows]
    return _scatter_rows(rows, weight[:, None] * v, shape), weight, w_dense


def _check_index(idx: np.ndarray, size: int, what: str) -> np.ndarray:
    idx = idx.astype(np.int64)
    if idx.size and (idx.min() < 0 or idx.max() >= size):
        raise ValueError(f"{what} index out of range for this network (instance mismatch?)")
    return idx


class _Net:
    """Parameter dict, trunk forward/backward and checkpointing shared by both networks."""

    kind = ""

    def __init__(self, config: NetConfig, params: dict[str, np.ndarray]):
        self.config = config
        self.dtype = np.dtype(config.dtype)
        self.params = params

    # parameter layout ---------------------------------------------------
    @staticmethod
    def _trunk_params(cfg: NetConfig, rng: np.random.Generator, dt) -> dict[str, np.ndarray]:
        e = cfg.embed
        p = {
            "parcel.W": glorot(rng, len(_PARCEL_CONT), e, dt),
            "parcel.E_origin": glorot(rng, cfg.n_locations, e, dt),
            "parcel.E_dest": glorot(rng, cfg.n_locations, e, dt),
            "parcel.b": np.zeros(e, dt),
            "route.W": glorot(rng, len(_ROUTE_CONT), e, dt),
            "route.E_provider": glorot(rng, cfg.n_providers + 1, e, dt),
            "route.b": np.zeros(e, dt),
        }
        width = e
        for i, h in enumerate(cfg.parcel_hidden):
            p[f"parcel.h{i}.W"], p[f"parcel.h{i}.b"] = glorot(rng, width, h, dt), np.zeros(h, dt)
            width = h
        width = e
        for i, h in enumerate(cfg.route_hidden):
            p[f"route.h{i}.W"], p[f"route.h{i}.b"] = glorot(rng, width, h, dt), np.zeros(h, dt)
            width = h
        return p

    def _layer(self, name: str, act: str) -> DenseLayer:
        return DenseLayer(self.params[name + ".W"], self.params[name + ".b"], act)

    def zero_grads(self) -> dict[str, np.ndarray]:
        return {k: np.zeros_like(v) for k, v in self.params.items()}

    # trunks -------------------------------------------------------------
    def _parcel_trunk(self, parcel: np.ndarray):
        P = self.params
        cfg = self.config
        origin = _check_index(parcel[:, 1], cfg.n_locations, "origin")
        dest = _check_index(parcel[:, 2], cfg.n_locations, "destination")
        xp = parcel[:, _PARCEL_CONT]
        hp = xp @ P["parcel.W"] + P["parcel.E_origin"][origin] + P["parcel.E_dest"][dest] + P["parcel.b"]
        p_caches = []
        for i in range(len(cfg.parcel_hidden)):
            hp, c = dense_forward(self._layer(f"parcel.h{i}", "relu"), hp)
            p_caches.append(c)
        return hp, origin, dest, xp, p_caches

    def _trunks(self, b: Batch):
        P = self.params
        cfg = self.config
        hp, origin, dest, xp, p_caches = self._parcel_trunk(b.parcel)

        rows = np.flatnonzero(b.mask.ravel())
        flat = b.routes.reshape(-1, b.routes.shape[-1])[rows]
        prov = _check_index(flat[:, 4], cfg.n_providers + 1, "provider")
        xr = flat[:, _ROUTE_CONT]
        hr = xr @ P["route.W"] + P["route.E_provider"][prov] + P["route.b"]
        r_caches = []
        for i in range(len(cfg.route_hidden)):
            hr, c = dense_forward(self._layer(f"route.h{i}", "relu"), hr)
            r_caches.append(c)
        cache = dict(origin=origin, dest=dest, xp=xp, p_caches=p_caches, rows=rows, prov=prov, xr=xr,
                     r_caches=r_caches)
        return hp, hr, cache

    def _trunks_backward(self, cache: dict, g_hp: np.ndarray, g_hr: np.ndarray, grads: dict) -> None:
        cfg = self.config
        for i in reversed(range(len(cfg.parcel_hidden))):
            gW, gb, g_hp = dense_backward(self._layer(f"parcel.h{i}", "relu"), cache["p_caches"][i], g_hp)
            grads[f"parcel.h{i}.W"] += gW
            grads[f"parcel.h{i}.b"] += gb
        grads["parcel.W"] += cache["xp"].T @ g_hp
        grads["parcel.b"] += g_hp.sum(axis=0)
        grads["parcel.E_origin"] += _embedding_grad(cache["origin"], g_hp, cfg.n_locations)
        grads["parcel.E_dest"] += _embedding_grad(cache["dest"], g_hp, cfg.n_locations)
        for i in reversed(range(len(cfg.route_hidden))):
            gW, gb, g_hr = dense_backward(self._layer(f"route.h{i}", "relu"), cache["r_caches"][i], g_hr)
            grads[f"route.h{i}.W"] += gW
            grads[f"route.h{i}.b"] += gb
        grads["route.W"] += cache["xr"].T @ g_hr
        grads["route.b"] += g_hr.sum(axis=0)
        grads["route.E_provider"] += _embedding_grad(cache["prov"], g_hr, cfg.n_providers + 1)

    # io -------------------------------------------------------------------
    def save(self, path: str | Path) -> None:
        save_checkpoint(path, self.params, {"kind": self.kind, "net": self.config.to_dict()})

    @classmethod
    def load(cls, path: str | Path):
        params, meta = load_checkpoint(path)
        if meta.get("kind") != cls.kind:
            raise ValueError(f"checkpoint holds a {meta.get('kind')!r} network, not {cls.kind!r}")
        cfg = NetConfig.from_dict(meta["net"])
        fresh = cls.init(cfg, np.random.default_rng(0))
        load_checkpoint(path, expected=fresh.params)
        return cls(cfg, {k: v.astype(cfg.dtype) for k, v in params.items()})

    def copy(self):
        return type(self)(self.config, {k: v.copy() for k, v in self.params.items()})

    def batch(self, obs) -> Batch:
        return Batch.from_obs(obs, self.dtype)


class ActorNet(_Net):
    kind = "actor"

    @classmethod
    def init(cls, config: NetConfig, rng: np.random.Generator) -> "ActorNet":
        dt = np.dtype(config.dtype)
        p = cls._trunk_params(config, rng, dt)
        width = config.parcel_hidden[-1] + config.route_hidden[-1]
        p["score.h.W"], p["score.h.b"] = glorot(rng, width, config.scorer_hidden, dt), np.zeros(config.scorer_hidden, dt)
        p["score.out.W"], p["score.out.b"] = glorot(rng, config.scorer_hidden, 1, dt), np.zeros(1, dt)
        return cls(config, p)

    def logits(self, obs) -> tuple[np.ndarray, dict]:
        b = obs if isinstance(obs, Batch) else self.batch(obs)
        hp, hr, cache = self._trunks(b)
        rows = cache["rows"]
        n_slots = b.mask.shape[1]
        owner = rows // n_slots
        joint = np.concatenate([hp[owner], hr], axis=1)
        z, c1 = dense_forward(self._layer("score.h", "relu"), joint)
        s, c2 = dense_forward(self._layer("score.out", "identity"), z)
        logits = np.zeros(b.mask.shape, dtype=self.dtype)
        logits.reshape(-1)[rows] = s[:, 0]
        cache.update(owner=owner, c1=c1, c2=c2, n_hp=hp.shape, mask=b.mask)
        return logits, cache

    def forward(self, obs) -> tuple[np.ndarray, dict]:
        """Slot probabilities ``(B, N)`` (padded slots exactly 0) and the backward cache."""
        logits, cache = self.logits(obs)
        probs = masked_softmax(logits, cache["mask"])
        cache["probs"] = probs
        return probs, cache

    def log_probs(self, obs) -> tuple[np.ndarray, dict]:
        logits, cache = self.logits(obs)
        logp = masked_log_softmax(logits, cache["mask"])
        cache["probs"] = np.exp(logp)
        return logp, cache

    def backward_logits(self, cache: dict, g_logits: np.ndarray) -> dict[str, np.ndarray]:
        grads = self.zero_grads()
        rows = cache["rows"]
        g_s = g_logits.reshape(-1)[rows][:, None].astype(self.dtype)
        gW, gb, g_z = dense_backward(self._layer("score.out", "identity"), cache["c2"], g_s)
        grads["score.out.W"] += gW
        grads["score.out.b"] += gb
        gW, gb, g_joint = dense_backward(self._layer("score.h", "relu"), cache["c1"], g_z)
        grads["score.h.W"] += gW
        grads["score.h.b"] += gb
        n_p = cache["n_hp"][1]
        g_hp = _scatter_rows(rows, g_joint[:, :n_p], cache["mask"].shape)
        self._trunks_backward(cache, g_hp, g_joint[:, n_p:], grads)
        return grads

    def backward(self, cache: dict, g_probs: np.ndarray) -> dict[str, np.ndarray]:
        """Parameter gradients given the upstream gradient of the probabilities."""
        return self.backward_logits(cache, masked_softmax_backward(cache["probs"], g_probs))

    def rollout_scorer(self, parcel: np.ndarray, routes: np.ndarray, mask: np.ndarray) -> "RolloutScorer":
        """Inference helper for lockstep rollouts over one instance's parcels (see :class:`RolloutScorer`)."""
        return RolloutScorer(self, parcel, routes, mask)


class RolloutScorer:
    """Per-step actor logits with everything state-independent computed once.

    ``parcel`` ``(m, PARCEL_DIM)`` and ``routes`` ``(m, N, ROUTE_DIM)`` hold the
    features of every parcel; only the utilization and proportion columns of
    the route features change during a rollout, so the parcel trunk, its share
    of the scorer layer and the static part of the route embedding are cached.
    Results agree with :meth:`ActorNet.logits` up to float rounding.
    """

    _DYNAMIC = [1, 2, 3]

    def __init__(self, actor: ActorNet, parcel: np.ndarray, routes: np.ndarray, mask: np.ndarray):
        P, dt = actor.params, actor.dtype
        self.actor = actor
        self.mask = np.asarray(mask, dtype=bool)
        m, N = self.mask.shape
        hp = actor._parcel_trunk(np.asarray(parcel, dtype=dt))[0]
        n_p = hp.shape[1]
        W_h = P["score.h.W"]
        self.parcel_part = hp @ W_h[:n_p] + P["score.h.b"]               # (m, scorer)
        self.route_W_h = W_h[n_p:]
        routes = np.asarray(routes, dtype=dt)
        prov = _check_index(routes[..., 4], actor.config.n_providers + 1, "provider")
        static = routes[..., _ROUTE_CONT].copy()
        static[..., self._DYNAMIC] = 0.0
        self.route_static = static @ P["route.W"] + P["route.E_provider"][prov] + P["route.b"]  # (m, N, e)
        self.route_W_dyn = P["route.W"][self._DYNAMIC]

    def logits(self, t: int, route_feats: np.ndarray) -> np.ndarray:
        """``(B, N)`` logits for parcel ``t`` given the live route features ``(B, N, ROUTE_DIM)``."""
        P, cfg = self.actor.params, self.actor.config
        dyn = np.asarray(route_feats[..., self._DYNAMIC], dtype=self.actor.dtype)
        h = self.route_static[t] + dyn @ self.route_W_dyn
        for i in range(len(cfg.route_hidden)):
            h = np.maximum(h @ P[f"route.h{i}.W"] + P[f"route.h{i}.b"], 0.0)
        z = np.maximum(h @ self.route_W_h + self.parcel_part[t], 0.0)
        return (z @ P["score.out.W"])[..., 0] + P["score.out.b"][0]

    def log_probs(self, t: int, route_feats: np.ndarray) -> np.ndarray:
        mask = np.broadcast_to(self.mask[t], route_feats.shape[:-1])
        return masked_log_softmax(self.logits(t, route_feats), mask)


class RewardNet(_Net):
    kind = "reward"

    @classmethod
    def init(cls, config: NetConfig, rng: np.random.Generator) -> "RewardNet":
        dt = np.dtype(config.dtype)
        p = cls._trunk_params(config, rng, dt)
        dp, dr, a = config.parcel_hidden[-1], config.route_hidden[-1], config.attn_dim
        p["attn.Wq"] = glorot(rng, dp, a, dt)
        p["attn.Wk"] = glorot(rng, dr, a, dt)
        p["attn.Wv"] = glorot(rng, dr, a, dt)
        p["out.h.W"], p["out.h.b"] = glorot(rng, a, config.out_hidden, dt), np.zeros(config.out_hidden, dt)
        p["out.y.W"], p["out.y.b"] = glorot(rng, config.out_hidden, 1, dt), np.zeros(1, dt)
        return cls(config, p)

    def forward(self, obs) -> tuple[np.ndarray, dict]:
        """Predicted immediate reward per observation, shape ``(B,)``."""
        b = obs if isinstance(obs, Batch) else self.batch(obs)
        P = self.params
        hp, hr, cache = self._trunks(b)
        rows = cache["rows"]
        B, N = b.mask.shape
        owner = rows // N
        q = hp @ P["attn.Wq"]                      # (B, a)
        k = hr @ P["attn.Wk"]                      # (R, a)
        v = hr @ P["attn.Wv"]                      # (R, a)
        agg, weight, w_dense = attention_pool(q, k, v, rows, (B, N), self.config.normalized_attention)
        z, c1 = dense_forward(self._layer("out.h", "sigmoid"), agg)
        y, c2 = dense_forward(self._layer("out.y", "identity"), z)
        cache.update(hp=hp, hr=hr, owner=owner, q=q, k=k, v=v, weight=weight, w_dense=w_dense,
                     agg=agg, c1=c1, c2=c2, shape=(B, N))
        return y[:, 0], cache

    def backward(self, cache: dict, g_out: np.ndarray) -> dict[str, np.ndarray]:
        P = self.params
        grads = self.zero_grads()
        g_y = np.asarray(g_out, dtype=self.dtype)[:, None]
        gW, gb, g_z = dense_backward(self._layer("out.y", "identity"), cache["c2"], g_y)
        grads["out.y.W"] += gW
        grads["out.y.b"] += gb
        gW, gb, g_agg = dense_backward(self._layer("out.h", "sigmoid"), cache["c1"], g_z)
        grads["out.h.W"] += gW
        grads["out.h.b"] += gb

        owner, q, k, v, weight = cache["owner"], cache["q"], cache["k"], cache["v"], cache["weight"]
        g_rows = g_agg[owner]                                   # (R, a)
        g_v = weight[:, None] * g_rows
        g_weight = np.einsum("ra,ra->r", g_rows, v)
        if cache["w_dense"] is not None:
            B, N = cache["shape"]
            rows = cache["rows"]
            gw_dense = np.zeros((B, N), dtype=self.dtype)
            gw_dense.reshape(-1)[rows] = g_weight
            g_score = masked_softmax_backward(cache["w_dense"], gw_dense).reshape(-1)[rows]
        else:
            g_score = g_weight
        g_q = _scatter_rows(cache["rows"], g_score[:, None] * k, cache["shape"])
        g_k = g_score[:, None] * q[owner]
        hp, hr = cache["hp"], cache["hr"]
        grads["attn.Wq"] += hp.T @ g_q
        grads["attn.Wk"] += hr.T @ g_k
        grads["attn.Wv"] += hr.T @ g_v
        g_hp = g_q @ P["attn.Wq"].T
        g_hr = g_k @ P["attn.Wk"].T + g_v @ P["attn.Wv"].T
        self._trunks_backward(cache, g_hp, g_hr, grads)
        return grads
