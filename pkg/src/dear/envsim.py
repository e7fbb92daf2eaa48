"""Synthetic short-video session environment.

Stands in for the production platform: per request it serves a list of L
recommended videos plus a 5-10 ad candidate set; the agent may interpolate
one candidate at a slot (or none); the simulated user then either continues
or leaves. The ground-truth leave model is a logistic over

    leave_logit = base + fatigue_w * fatigue
                  + relevance_w * (1 - relevance)   (when an ad is shown)
                  + location_w * annoyance(feed_type, slot)
                  - quality_w * quality

where fatigue counts ads shown in the last ``fatigue_window`` requests
(including the current one), relevance is the affinity between the shown ad
and the session's latent taste vector, and quality is the mean score of the
recommended items. The annoyance term makes the interpolation slot matter
and depends on how the user is browsing: when swiping down (feed type 0) an
ad near the top of the list interrupts most, when swiping up (feed type 1)
the bottom slot does, so the least intrusive slot is observable from the
request context. Ad revenue is ``revenue_scale * pricing`` of the shown ad.

Each session starts with three ad-free warm-up requests that seed the
browsing histories (the user cannot leave during warm-up); decisions start at
request 4 and the session ends on leave or at ``max_requests``.

``base_leave_logit`` and ``revenue_scale`` defaults were fitted by
scripts/calibrate_env.py so that sessions under the reference behavior
policy reproduce the production dataset statistics (mean session length
55.032 browsed videos, 55.23% of decision rec-lists carrying an ad, mean
session ad revenue 0.667).
"""

from __future__ import annotations

import copy
import math
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import ContractError, PreconditionError
from .features import (
    AD_SCHEMA,
    ITEM_DIM,
    LIST_LEN,
    NORMAL_SCHEMA,
    ContextFeatures,
    ItemEncoder,
)
from .qnet import AdAction, no_ad_action

# Production dataset statistics used as calibration targets.
TARGET_SESSION_VIDEOS = 55.032
TARGET_INSERTION_RATE = 0.5523
TARGET_SESSION_AD_REVENUE = 0.667

NORMAL_SCORE_FIELDS = ("like", "finish", "comment", "follow", "group")
AD_SCORE_FIELDS = ("image_size", "pricing", "hidden_cost", "rc_preclk", "recall_preclk")

# Fixed projections from observable score features to the latent attribute
# space; part of the simulated world, independent of any run seed.
_LATENT_SEEDS = {"normal": 11, "ad": 13}


@dataclass
class EnvConfig:
    list_len: int = LIST_LEN
    candidate_min: int = 5
    candidate_max: int = 10
    max_requests: int = 9              # total requests per session, warm-ups included
    warmup_requests: int = 3
    base_leave_logit: float = -4.4368  # fitted: scripts/calibrate_env.py
    fatigue_weight: float = 0.4
    relevance_weight: float = 0.3
    quality_weight: float = 0.5
    location_weight: float = 1.0
    fatigue_window: int = 3
    revenue_scale: float = 0.2548      # fitted: scripts/calibrate_env.py
    leave_penalty: float = -1.0        # r_ex on leave; 0.0 selects the {1,0} variant
    taste_dim: int = 8
    rec_taste_bias: float = 0.7        # prob. a list slot picks the taste-closest of a pool
    rec_taste_pool: int = 3
    seed: int = 0

    def validate(self) -> "EnvConfig":
        if not (5 <= self.candidate_min <= self.candidate_max <= 10):
            raise ContractError("candidate set size range must sit within [5, 10]")
        if self.max_requests <= self.warmup_requests:
            raise ContractError("max_requests must exceed the warm-up request count")
        if self.fatigue_window <= 0 or self.taste_dim <= 0:
            raise ContractError("fatigue_window and taste_dim must be positive")
        for name in ("base_leave_logit", "fatigue_weight", "relevance_weight",
                     "quality_weight", "location_weight", "revenue_scale"):
            if not math.isfinite(getattr(self, name)):
                raise ContractError(f"env.{name} must be finite")
        if self.leave_penalty not in (-1.0, 0.0):
            raise ContractError("leave_penalty must be -1 (continue/leave = +-1) or 0 ({1,0})")
        return self


@dataclass
class BehaviorPolicyConfig:
    insert_prob: float = TARGET_INSERTION_RATE
    epsilon: float = 0.1               # prob. of a random candidate instead of top pricing

    def validate(self) -> "BehaviorPolicyConfig":
        if not (0.0 <= self.insert_prob <= 1.0):
            raise ContractError("insert_prob must be in [0, 1]")
        if not (0.0 <= self.epsilon <= 1.0):
            raise ContractError("epsilon must be in [0, 1]")
        return self


def sigmoid(x: float) -> float:
    if x >= 0:
        return 1.0 / (1.0 + math.exp(-x))
    e = math.exp(x)
    return e / (1.0 + e)


def location_annoyance(feed_type: int, location: int, list_len: int = LIST_LEN) -> float:
    """How intrusive an interpolation slot is for the current browsing mode.

    Slots run 1..L+1 top to bottom; 0 (no ad) never annoys. Swiping down
    (feed type 0) makes top slots intrusive, swiping up makes bottom slots
    intrusive, so the gentlest slot is readable off the request context.
    """
    if location == 0:
        return 0.0
    frac = (location - 1) / list_len
    return 1.0 - frac if feed_type == 0 else frac


def leave_probability(cfg: EnvConfig, fatigue: int, relevance: float, quality: float,
                      annoyance: float = 0.0) -> float:
    """Ground-truth leave model; exposed for direct property checks."""
    logit = (cfg.base_leave_logit
             + cfg.fatigue_weight * fatigue
             + cfg.relevance_weight * (1.0 - relevance)
             + cfg.location_weight * annoyance
             - cfg.quality_weight * quality)
    return sigmoid(logit)


def _latent_projection(kind: str, taste_dim: int) -> np.ndarray:
    rng = np.random.default_rng(_LATENT_SEEDS[kind])
    proj = rng.standard_normal((taste_dim, len(NORMAL_SCORE_FIELDS)))
    return proj


def item_latent(raw: dict, kind: str, taste_dim: int) -> np.ndarray:
    fields = NORMAL_SCORE_FIELDS if kind == "normal" else AD_SCORE_FIELDS
    scores = np.array([raw[f] for f in fields]) - 0.5
    vec = _latent_projection(kind, taste_dim) @ scores
    norm = np.linalg.norm(vec)
    if norm < 1e-12:
        vec = np.zeros(taste_dim)
        vec[0] = 1.0
        return vec
    return vec / norm


def ad_relevance(taste: np.ndarray, ad_raw: dict) -> float:
    """Affinity in [0, 1] between the session taste and an ad's latent attributes."""
    latent = item_latent(ad_raw, "ad", taste.shape[0])
    return 0.5 * (1.0 + float(taste @ latent))


@dataclass
class Observation:
    """Everything the agent sees at one decision request."""

    t: int
    context: ContextFeatures
    context_enc: np.ndarray
    rec_list_raw: list
    rec_list_enc: np.ndarray            # (L, 60) uint8
    candidates_raw: list
    candidates_enc: np.ndarray          # (K, 60) uint8
    rec_history: np.ndarray             # (n, 60) uint8, full session so far
    ad_history: np.ndarray              # (m, 60) uint8

    @property
    def rec_concat(self) -> np.ndarray:
        return self.rec_list_enc.reshape(-1)


@dataclass
class RequestRecord:
    """One logged request (the session-trace/log line payload)."""

    t: int
    context: dict
    rec_list: list
    candidates: list
    ad_index: int | None
    location: int
    r_ad: float
    r_ex: float
    terminal: bool

    @property
    def is_warmup(self) -> bool:
        return not self.candidates


@dataclass
class SessionRecord:
    session_id: int
    requests: list


class SimEnv:
    """One stream of simulated sessions; reset() starts the next session."""

    def __init__(self, cfg: EnvConfig, seed: int | None = None):
        self.cfg = cfg.validate()
        self._seed = cfg.seed if seed is None else seed
        self._rng = np.random.default_rng(self._seed)
        self._normal_encoder = ItemEncoder(NORMAL_SCHEMA)
        self._ad_encoder = ItemEncoder(AD_SCHEMA)
        self.session_id = -1
        self.session_trace: list = []
        self._active = False

    # ------------------------------------------------------------- generation

    def _draw_normal_scores(self) -> np.ndarray:
        return self._rng.uniform(0.0, 1.0, size=len(NORMAL_SCORE_FIELDS))

    def _make_normal_item(self) -> dict:
        cfg = self.cfg
        pool = [self._draw_normal_scores() for _ in range(max(1, cfg.rec_taste_pool))]
        pick = pool[0]
        if cfg.rec_taste_pool > 1 and self._rng.uniform() < cfg.rec_taste_bias:
            proj = _latent_projection("normal", cfg.taste_dim)
            best, best_cos = pick, -np.inf
            for scores in pool:
                vec = proj @ (scores - 0.5)
                norm = np.linalg.norm(vec)
                cosine = float(self._taste @ vec / norm) if norm > 1e-12 else -1.0
                if cosine > best_cos:
                    best, best_cos = scores, cosine
            pick = best
        raw = {"id": int(self._rng.integers(0, 10**6))}
        raw.update({f: float(v) for f, v in zip(NORMAL_SCORE_FIELDS, pick)})
        return raw

    def _make_ad_item(self) -> dict:
        raw = {"id": int(self._rng.integers(0, 10**6))}
        raw.update({f: float(self._rng.uniform(0.0, 1.0)) for f in AD_SCORE_FIELDS})
        return raw

    def _make_request(self, with_candidates: bool) -> None:
        cfg = self.cfg
        self._context = ContextFeatures(
            os=self._os, app_version=self._app_version,
            feed_type=int(self._rng.integers(0, 2)),
        )
        self._rec_list_raw = [self._make_normal_item() for _ in range(cfg.list_len)]
        self._rec_list_enc = np.stack(
            [self._normal_encoder.encode(r).vector for r in self._rec_list_raw]
        )
        if with_candidates:
            k = int(self._rng.integers(cfg.candidate_min, cfg.candidate_max + 1))
            self._candidates_raw = [self._make_ad_item() for _ in range(k)]
            self._candidates_enc = np.stack(
                [self._ad_encoder.encode(r).vector for r in self._candidates_raw]
            )
        else:
            self._candidates_raw = []
            self._candidates_enc = np.zeros((0, ITEM_DIM), dtype=np.uint8)

    def _observation(self) -> Observation:
        return Observation(
            t=self._t,
            context=self._context,
            context_enc=self._context.encode(),
            rec_list_raw=list(self._rec_list_raw),
            rec_list_enc=self._rec_list_enc.copy(),
            candidates_raw=list(self._candidates_raw),
            candidates_enc=self._candidates_enc.copy(),
            rec_history=(np.stack(self._rec_history) if self._rec_history
                         else np.zeros((0, ITEM_DIM), dtype=np.uint8)),
            ad_history=(np.stack(self._ad_history) if self._ad_history
                        else np.zeros((0, ITEM_DIM), dtype=np.uint8)),
        )

    # -------------------------------------------------------------- lifecycle

    def reset(self) -> Observation:
        """Start the next session: three ad-free warm-up requests seed the
        histories, then the first decision request is returned."""
        cfg = self.cfg
        self.session_id += 1
        self.session_trace = []
        self._taste = self._rng.standard_normal(cfg.taste_dim)
        self._taste /= np.linalg.norm(self._taste)
        self._os = int(self._rng.integers(0, 2))
        self._app_version = int(self._rng.integers(0, 9))
        self._rec_history: list = []
        self._ad_history: list = []
        self._recent_ads: list = []     # 0/1 per past request, for the fatigue window
        self._t = 0
        for _ in range(cfg.warmup_requests):
            self._t += 1
            self._make_request(with_candidates=False)
            self.session_trace.append(RequestRecord(
                t=self._t,
                context=self._context_dict(),
                rec_list=list(self._rec_list_raw),
                candidates=[],
                ad_index=None, location=0,
                r_ad=0.0, r_ex=1.0, terminal=False,
            ))
            self._rec_history.extend(self._rec_list_enc)
            self._recent_ads.append(0)
        self._t += 1
        self._make_request(with_candidates=True)
        self._active = True
        return self._observation()

    def _context_dict(self) -> dict:
        return {"os": self._context.os, "app_version": self._context.app_version,
                "feed_type": self._context.feed_type}

    def _resolve_action(self, action: AdAction):
        if not (0 <= action.location <= self.cfg.list_len + 1):
            raise ContractError(f"location {action.location} outside [0, {self.cfg.list_len + 1}]")
        if action.location == 0:
            return None
        if action.ad_index is not None:
            idx = action.ad_index
            if not (0 <= idx < len(self._candidates_raw)):
                raise ContractError(f"ad index {idx} outside the offered candidate set")
            if not np.array_equal(np.asarray(action.ad_vector, dtype=np.uint8),
                                  self._candidates_enc[idx]):
                raise ContractError("ad vector does not match the indexed candidate")
            return idx
        vec = np.asarray(action.ad_vector, dtype=np.uint8)
        for idx, row in enumerate(self._candidates_enc):
            if np.array_equal(vec, row):
                return idx
        raise ContractError("ad vector not found in the offered candidate set")

    def step(self, action: AdAction):
        """Returns (r_ad, r_ex, next_observation_or_None, terminal)."""
        if not self._active:
            raise ContractError("step called on a finished session; call reset()")
        cfg = self.cfg
        ad_idx = self._resolve_action(action)
        shown = ad_idx is not None

        fatigue = sum(self._recent_ads[-(cfg.fatigue_window - 1):] if cfg.fatigue_window > 1 else [])
        fatigue += 1 if shown else 0
        relevance = ad_relevance(self._taste, self._candidates_raw[ad_idx]) if shown else 1.0
        annoyance = location_annoyance(self._context.feed_type, action.location) if shown else 0.0
        quality = float(np.mean([[r[f] for f in NORMAL_SCORE_FIELDS]
                                 for r in self._rec_list_raw]))
        p_leave = leave_probability(cfg, fatigue, relevance, quality, annoyance)
        leaves = bool(self._rng.uniform() < p_leave)

        r_ad = cfg.revenue_scale * self._candidates_raw[ad_idx]["pricing"] if shown else 0.0
        r_ex = cfg.leave_penalty if leaves else 1.0
        terminal = leaves or self._t >= cfg.max_requests

        self._rec_history.extend(self._rec_list_enc)
        if shown:
            self._ad_history.append(self._candidates_enc[ad_idx].copy())
        self._recent_ads.append(1 if shown else 0)

        self.session_trace.append(RequestRecord(
            t=self._t,
            context=self._context_dict(),
            rec_list=list(self._rec_list_raw),
            candidates=list(self._candidates_raw),
            ad_index=ad_idx, location=action.location if shown else 0,
            r_ad=r_ad, r_ex=r_ex, terminal=terminal,
        ))

        if terminal:
            self._active = False
            return r_ad, r_ex, None, True
        self._t += 1
        self._make_request(with_candidates=True)
        return r_ad, r_ex, self._observation(), False

    # ------------------------------------------------------------- inspection

    def snapshot(self) -> dict:
        state = {k: copy.deepcopy(v) for k, v in self.__dict__.items()
                 if k not in ("cfg", "_rng")}
        state["_rng_state"] = copy.deepcopy(self._rng.bit_generator.state)
        return state

    def restore(self, snap: dict) -> None:
        snap = dict(snap)
        rng_state = snap.pop("_rng_state")
        for k, v in snap.items():
            setattr(self, k, copy.deepcopy(v))
        self._rng = np.random.default_rng()
        self._rng.bit_generator.state = rng_state


class PlantedOptimumEnv:
    """Degenerate environment: exactly one location always pays reward 1.

    Same observation/step interface as SimEnv, but the user never leaves
    before the request cap and r_ex is always 0, so the combined reward
    isolates whether the policy finds the planted location.
    """

    def __init__(self, cfg: EnvConfig | None = None, seed: int = 0, planted_location: int = 3,
                 max_requests: int = 12):
        base = cfg if cfg is not None else EnvConfig()
        self.cfg = replace(base, max_requests=max_requests,
                           base_leave_logit=-60.0,    # leave probability ~ 0
                           revenue_scale=0.0)
        self.planted_location = planted_location
        self._env = SimEnv(self.cfg, seed=seed)
        self.session_trace = []

    @property
    def session_id(self):
        return self._env.session_id

    def reset(self) -> Observation:
        obs = self._env.reset()
        self.session_trace = self._env.session_trace
        return obs

    def step(self, action: AdAction):
        _, _, obs, terminal = self._env.step(action)
        r_ad = 1.0 if action.location == self.planted_location else 0.0
        r_ex = 0.0
        rec = self._env.session_trace[-1]
        rec.r_ad, rec.r_ex = r_ad, r_ex
        return r_ad, r_ex, obs, terminal


def behavior_policy(cfg: BehaviorPolicyConfig, observation: Observation,
                    rng: np.random.Generator) -> AdAction:
    """The logged production strategy: insert with a fixed probability, pick
    the highest-pricing candidate (with an epsilon random override) and a
    uniform location in 1..L+1."""
    if len(observation.candidates_raw) == 0:
        raise PreconditionError("behavior policy needs a non-empty candidate set")
    if rng.uniform() >= cfg.insert_prob:
        return no_ad_action(ITEM_DIM)
    k = len(observation.candidates_raw)
    if cfg.epsilon > 0.0 and rng.uniform() < cfg.epsilon:
        idx = int(rng.integers(0, k))
    else:
        pricing = [c["pricing"] for c in observation.candidates_raw]
        idx = int(np.argmax(pricing))
    location = int(rng.integers(1, LIST_LEN + 2))
    return AdAction(ad_vector=observation.candidates_enc[idx].copy(),
                    location=location, ad_index=idx)


class UniformRandomPolicy:
    """Uniform over the L+2 locations; a uniform candidate when inserting."""

    def __call__(self, observation: Observation, rng: np.random.Generator) -> AdAction:
        loc = int(rng.integers(0, LIST_LEN + 2))
        if loc == 0 or len(observation.candidates_raw) == 0:
            return no_ad_action(ITEM_DIM)
        idx = int(rng.integers(0, len(observation.candidates_raw)))
        return AdAction(ad_vector=observation.candidates_enc[idx].copy(),
                        location=loc, ad_index=idx)


def run_policy_session(env, policy, rng: np.random.Generator) -> SessionRecord:
    """Roll one full session under an arbitrary policy; returns its record."""
    obs = env.reset()
    terminal = False
    while not terminal:
        action = policy(obs, rng)
        _, _, obs, terminal = env.step(action)
    return SessionRecord(session_id=env.session_id, requests=list(env.session_trace))


def run_behavior_session(env, policy_cfg: BehaviorPolicyConfig,
                         rng: np.random.Generator) -> SessionRecord:
    """Roll one full session under the behavior policy; returns its record."""
    return run_policy_session(env, lambda obs, r: behavior_policy(policy_cfg, obs, r), rng)


def session_stats(records) -> dict:
    """Summary statistics matching the calibration targets."""
    videos = []
    revenue = []
    decisions = 0
    inserted = 0
    for rec in records:
        v = 0
        r = 0.0
        for req in rec.requests:
            v += len(req.rec_list)
            if not req.is_warmup:
                decisions += 1
                if req.ad_index is not None:
                    inserted += 1
                    v += 1
            r += req.r_ad
        videos.append(v)
        revenue.append(r)
    return {
        "sessions": len(videos),
        "mean_session_videos": float(np.mean(videos)),
        "mean_session_ad_revenue": float(np.mean(revenue)),
        "insertion_rate": inserted / decisions if decisions else 0.0,
        "mean_requests": float(np.mean([len(r.requests) for r in records])),
    }
