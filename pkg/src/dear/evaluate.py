"""Online evaluation, reference policies, alpha sweeps, and the ablation suite.

Evaluation rolls greedy (or reference) episodes against the simulator and
aggregates per-session metrics: combined reward R = sum r_t, its components
R_ad and R_ex, session length in browsed videos, and the ad-insertion rate.
Sweeps and ablations train one model per cell on per-seed logs shared across
cells (paired seeds) and report delimited tables.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np
from scipy import stats as scipy_stats

from .envsim import EnvConfig, BehaviorPolicyConfig, SimEnv, UniformRandomPolicy
from .errors import ContractError, PreconditionError
from .features import State
from .qnet import AdAction, NetConfig, QNetwork, greedy_action, no_ad_action
from .sessionlog import SessionLogReader, generate_log
from .trainer import TrainConfig, train


@dataclass
class EvalMetrics:
    episodes: int
    alpha: float
    mean_reward: float
    std_reward: float
    mean_r_ad: float
    mean_r_ex: float
    mean_session_videos: float
    insertion_rate: float
    rewards: list
    r_ad_totals: list
    r_ex_totals: list


class GreedyPolicy:
    """Acts by the argmax of the trained Q-network; no exploration."""

    def __init__(self, net: QNetwork):
        self.net = net

    def __call__(self, obs, rng) -> AdAction:
        state = State(
            rec_history=obs.rec_history[-self.net.cfg.history_window:],
            ad_history=obs.ad_history[-self.net.cfg.history_window:],
            context=obs.context_enc,
            rec_concat=obs.rec_concat,
        )
        return greedy_action(self.net, state, obs.candidates_enc.astype(np.float64))


class NeverAdvertisePolicy:
    def __call__(self, obs, rng) -> AdAction:
        return no_ad_action()


def run_online_test(policy, env, episodes: int, alpha: float,
                    policy_seed: int = 0) -> EvalMetrics:
    """Greedy/reference rollouts: per episode reset, act, observe, aggregate."""
    if episodes <= 0:
        raise PreconditionError("episodes must be positive")
    rng = np.random.default_rng(np.random.SeedSequence([policy_seed, 0xE0A1]))
    rewards, r_ads, r_exs, videos = [], [], [], []
    decisions = inserted = 0
    warm = env.cfg.warmup_requests * env.cfg.list_len
    for _ in range(episodes):
        obs = env.reset()
        terminal = False
        tot = t_ad = t_ex = 0.0
        vids = warm
        while not terminal:
            action = policy(obs, rng)
            r_ad, r_ex, obs, terminal = env.step(action)
            t_ad += r_ad
            t_ex += r_ex
            tot += r_ad + alpha * r_ex
            vids += env.cfg.list_len + (1 if action.location > 0 else 0)
            decisions += 1
            inserted += 1 if action.location > 0 else 0
        rewards.append(tot)
        r_ads.append(t_ad)
        r_exs.append(t_ex)
        videos.append(vids)
    return EvalMetrics(
        episodes=episodes,
        alpha=alpha,
        mean_reward=float(np.mean(rewards)),
        std_reward=float(np.std(rewards)),
        mean_r_ad=float(np.mean(r_ads)),
        mean_r_ex=float(np.mean(r_exs)),
        mean_session_videos=float(np.mean(videos)),
        insertion_rate=inserted / decisions if decisions else 0.0,
        rewards=rewards,
        r_ad_totals=r_ads,
        r_ex_totals=r_exs,
    )


def _ensure_seed_log(logdir: Path, env_cfg: EnvConfig, behavior_cfg: BehaviorPolicyConfig,
                     sessions: int, seed: int) -> Path:
    path = Path(logdir) / f"sessions_seed{seed}_{sessions}.log"
    if not path.exists():
        generate_log(env_cfg, behavior_cfg, sessions, path, seed=seed)
    return path


def train_and_evaluate(env_cfg: EnvConfig, net_cfg: NetConfig, train_cfg: TrainConfig,
                       log_path, episodes: int, eval_seed: int) -> tuple:
    """One training run from a log plus a greedy evaluation; returns (net, metrics)."""
    net = QNetwork(net_cfg)
    train(train_cfg, net, log_reader=SessionLogReader(log_path))
    env = SimEnv(env_cfg, seed=eval_seed)
    metrics = run_online_test(GreedyPolicy(net), env, episodes, train_cfg.alpha,
                              policy_seed=eval_seed)
    return net, metrics


@dataclass
class SweepRow:
    alpha: float
    seed: int
    mean_reward: float
    mean_r_ad: float
    mean_r_ex: float


def alpha_sweep(env_cfg: EnvConfig, behavior_cfg: BehaviorPolicyConfig, net_cfg: NetConfig,
                train_cfg: TrainConfig, alphas, seeds, *, log_sessions: int,
                episodes: int, logdir, eval_seed_base: int = 10_000) -> list:
    """Trains one model per (alpha, seed) on shared per-seed logs; returns rows.

    The reward trade-off direction comes out in the per-alpha means of the
    accumulated ad income R_ad and experience reward R_ex.
    """
    alphas = list(alphas)
    if len(alphas) < 3:
        raise PreconditionError("alpha sweep needs at least 3 alpha values")
    rows = []
    for seed in seeds:
        log_path = _ensure_seed_log(logdir, env_cfg, behavior_cfg, log_sessions, seed)
        for alpha in alphas:
            cfg = replace(train_cfg, alpha=float(alpha), seed=seed)
            ncfg = replace(net_cfg, seed=seed)
            _, metrics = train_and_evaluate(env_cfg, ncfg, cfg, log_path, episodes,
                                            eval_seed=eval_seed_base + seed)
            rows.append(SweepRow(alpha=float(alpha), seed=seed,
                                 mean_reward=metrics.mean_reward,
                                 mean_r_ad=metrics.mean_r_ad,
                                 mean_r_ex=metrics.mean_r_ex))
    return rows


def sweep_summary(rows) -> list:
    """Per-alpha means: [(alpha, mean R_ad, mean R_ex, mean R)]."""
    out = []
    for alpha in sorted({r.alpha for r in rows}):
        sub = [r for r in rows if r.alpha == alpha]
        out.append((alpha,
                    float(np.mean([r.mean_r_ad for r in sub])),
                    float(np.mean([r.mean_r_ex for r in sub])),
                    float(np.mean([r.mean_reward for r in sub]))))
    return out


def sweep_trend(rows) -> tuple:
    """Spearman rank correlations (alpha vs R_ad, alpha vs R_ex) over alpha means."""
    summary = sweep_summary(rows)
    alphas = [s[0] for s in summary]
    rho_ad = float(scipy_stats.spearmanr(alphas, [s[1] for s in summary]).statistic)
    rho_ex = float(scipy_stats.spearmanr(alphas, [s[2] for s in summary]).statistic)
    return rho_ad, rho_ex


ABLATION_VARIANTS = (
    ("DEAR", "DEAR", None),
    ("DEAR-1", "DEAR", "supervised"),       # immediate-reward regression (gamma = 0)
    ("DEAR-2", "fcn_encoder", None),        # history GRUs replaced by 2-layer MLPs
    ("DEAR-3", "archB_onehot_loc", None),   # scalar head over (state, ad, one-hot slot)
    ("DEAR-4", "no_dueling", None),         # single head, no V/A split
)


@dataclass
class AblationRow:
    name: str
    variant: str
    mean_reward: float
    std_reward: float
    per_seed: list
    p_value_vs_full: float | None


def ablation_suite(env_cfg: EnvConfig, behavior_cfg: BehaviorPolicyConfig,
                   net_cfg: NetConfig, train_cfg: TrainConfig, seeds, *,
                   log_sessions: int, episodes: int, logdir,
                   eval_seed_base: int = 20_000) -> list:
    """Trains the full model plus its four reduced variants on paired seeds."""
    per_variant: dict = {name: [] for name, _, _ in ABLATION_VARIANTS}
    for seed in seeds:
        log_path = _ensure_seed_log(logdir, env_cfg, behavior_cfg, log_sessions, seed)
        for name, variant, mode in ABLATION_VARIANTS:
            cfg = replace(train_cfg, seed=seed,
                          gamma=0.0 if mode == "supervised" else train_cfg.gamma)
            ncfg = replace(net_cfg, variant=variant, seed=seed)
            _, metrics = train_and_evaluate(env_cfg, ncfg, cfg, log_path, episodes,
                                            eval_seed=eval_seed_base + seed)
            per_variant[name].append(metrics.mean_reward)
    full = per_variant["DEAR"]
    rows = []
    for name, variant, _ in ABLATION_VARIANTS:
        vals = per_variant[name]
        if name == "DEAR":
            p_value = None
        else:
            p_value = float(scipy_stats.ttest_rel(full, vals).pvalue)
            if math.isnan(p_value):
                p_value = 1.0
        rows.append(AblationRow(name=name, variant=variant,
                                mean_reward=float(np.mean(vals)),
                                std_reward=float(np.std(vals)),
                                per_seed=list(vals), p_value_vs_full=p_value))
    return rows


def write_table(path, header, rows) -> None:
    """Delimited text table with a header row (for external plotting)."""
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\t".join(header) + "\n")
        for row in rows:
            fh.write("\t".join(str(v) for v in row) + "\n")
