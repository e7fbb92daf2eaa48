#!/usr/bin/env python3
"""Fit the simulator's free constants to the production dataset statistics.

Two constants are fitted, in order:

1. ``base_leave_logit`` -- bisected so that mean session length under the
   reference behavior policy hits the 55.032 browsed-videos target.
2. ``revenue_scale``    -- set so that mean session ad revenue hits 0.667
   given the pricing mix the behavior policy actually selects.

The script then probes the session-reward economics at alpha = 1 with three
fixed reference policies (never advertise, uniform random, always insert the
top-pricing candidate) so the headroom available to a learned policy is
visible before anyone trains anything.

Run:  python3 scripts/calibrate_env.py [--sessions 4000] [--max-requests 10]
"""

import argparse
import sys
from dataclasses import replace

import numpy as np

sys.path.insert(0, "src")

from dear.envsim import (
    TARGET_INSERTION_RATE,
    TARGET_SESSION_AD_REVENUE,
    TARGET_SESSION_VIDEOS,
    BehaviorPolicyConfig,
    EnvConfig,
    SimEnv,
    UniformRandomPolicy,
    behavior_policy,
    no_ad_action,
    run_behavior_session,
    session_stats,
)
from dear.qnet import AdAction


def behavior_stats(cfg, sessions, seed=0):
    env = SimEnv(cfg, seed=seed)
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0xB0]))
    pol = BehaviorPolicyConfig()
    records = [run_behavior_session(env, pol, rng) for _ in range(sessions)]
    return session_stats(records)


def fit_base_leave_logit(cfg, sessions, lo=-8.0, hi=-1.0, iters=18):
    for _ in range(iters):
        mid = 0.5 * (lo + hi)
        stats = behavior_stats(replace(cfg, base_leave_logit=mid), sessions)
        # Higher leave logit -> shorter sessions.
        if stats["mean_session_videos"] > TARGET_SESSION_VIDEOS:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


def fit_revenue_scale(cfg, sessions):
    stats = behavior_stats(replace(cfg, revenue_scale=1.0), sessions)
    return TARGET_SESSION_AD_REVENUE / stats["mean_session_ad_revenue"]


def rollout_reference(cfg, policy, sessions, alpha=1.0, seed=123):
    env = SimEnv(cfg, seed=seed)
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0xE7]))
    rewards, r_ads, r_exs = [], [], []
    for _ in range(sessions):
        obs = env.reset()
        terminal = False
        total = t_ad = t_ex = 0.0
        while not terminal:
            action = policy(obs, rng)
            r_ad, r_ex, obs, terminal = env.step(action)
            t_ad += r_ad
            t_ex += r_ex
            total += r_ad + alpha * r_ex
        rewards.append(total)
        r_ads.append(t_ad)
        r_exs.append(t_ex)
    return float(np.mean(rewards)), float(np.mean(r_ads)), float(np.mean(r_exs))


def never_policy(obs, rng):
    return no_ad_action()


def best_location(obs) -> int:
    # Least intrusive slot given the browsing mode.
    return 7 if obs.context.feed_type == 0 else 1


def always_best_policy(obs, rng):
    pricing = [c["pricing"] for c in obs.candidates_raw]
    idx = int(np.argmax(pricing))
    return AdAction(ad_vector=obs.candidates_enc[idx].copy(), location=1 + int(rng.integers(0, 7)),
                    ad_index=idx)


def always_best_location_policy(obs, rng):
    pricing = [c["pricing"] for c in obs.candidates_raw]
    idx = int(np.argmax(pricing))
    return AdAction(ad_vector=obs.candidates_enc[idx].copy(), location=best_location(obs),
                    ad_index=idx)


def skip_first_best_policy(obs, rng):
    # The first decision request is observable (rec history still short).
    if len(obs.rec_history) <= 18:
        return no_ad_action()
    return always_best_location_policy(obs, rng)


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--sessions", type=int, default=4000)
    ap.add_argument("--max-requests", type=int, default=10)
    ap.add_argument("--verify-sessions", type=int, default=10000)
    args = ap.parse_args()

    cfg = replace(EnvConfig(), max_requests=args.max_requests)
    print(f"fitting base_leave_logit (max_requests={cfg.max_requests}) ...")
    beta0 = fit_base_leave_logit(cfg, args.sessions)
    cfg = replace(cfg, base_leave_logit=beta0)
    print(f"  base_leave_logit = {beta0:.4f}")

    scale = fit_revenue_scale(cfg, args.sessions)
    cfg = replace(cfg, revenue_scale=scale)
    print(f"  revenue_scale    = {scale:.4f}")

    stats = behavior_stats(cfg, args.verify_sessions, seed=7)
    print("verification vs targets:")
    print(f"  mean_session_videos      {stats['mean_session_videos']:.3f}  (target {TARGET_SESSION_VIDEOS})")
    print(f"  insertion_rate           {stats['insertion_rate']:.4f}  (target {TARGET_INSERTION_RATE})")
    print(f"  mean_session_ad_revenue  {stats['mean_session_ad_revenue']:.4f}  (target {TARGET_SESSION_AD_REVENUE})")
    print(f"  mean_requests            {stats['mean_requests']:.3f}")

    n_ref = max(2000, args.sessions // 2)
    print(f"reference policies at alpha=1 ({n_ref} sessions):")
    results = {}
    for name, pol in [("never-advertise", never_policy),
                      ("uniform-random", UniformRandomPolicy()),
                      ("always-top-randloc", always_best_policy),
                      ("always-top-bestloc", always_best_location_policy),
                      ("skipfirst-top-bestloc", skip_first_best_policy)]:
        mean_r, mean_ad, mean_ex = rollout_reference(cfg, pol, n_ref)
        results[name] = mean_r
        print(f"  {name:22s} R={mean_r:7.3f}  R_ad={mean_ad:6.3f}  R_ex={mean_ex:7.3f}")
    bar = 1.1 * max(results["never-advertise"], results["uniform-random"])
    best = max(results.values())
    print(f"  criterion-6 bar (1.1 * max reference) = {bar:.3f}; "
          f"best fixed policy = {best:.3f} ({best / bar:.3f}x bar)")

    print("suggested config lines:")
    print(f"  env.max_requests = {cfg.max_requests}")
    print(f"  env.base_leave_logit = {beta0:.4f}")
    print(f"  env.revenue_scale = {scale:.4f}")


if __name__ == "__main__":
    main()
