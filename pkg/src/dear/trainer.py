"""Off-policy Q-learning from logged sessions.

The loop replays sessions in temporal order. For every decision request it
rebuilds the state, takes the logged behavior action and reward, stores the
transition, then samples a uniform minibatch and applies one TD step against
a periodically synchronized target network:

    y = r                                   if s' terminal
    y = r + gamma * max_{a', l'} Q_target   otherwise (all candidates x slots)

    loss = mean over batch of (y - Q(s, a)[l_taken])^2

The taken action's slot indexes the Q output; no-ad transitions carry the
all-zero ad vector. Training state (network, target, optimizer, step, rng,
log cursor) can be checkpointed and resumed bit-exactly: the replay buffer is
rebuilt by re-reading the log up to the stored cursor.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError, DataError, PreconditionError
from .features import CONTEXT_DIM, ITEM_DIM, ContextFeatures, ItemEncoder, State
from .features import AD_SCHEMA, NORMAL_SCHEMA
from .nn import AdamState, adam_step, clip_gradients
from .qnet import AdAction, QNetwork, greedy_action, no_ad_action
from .replay import ReplayBuffer, Transition


@dataclass
class TrainConfig:
    gamma: float = 0.95
    alpha: float = 1.0
    batch_size: int = 64
    buffer_capacity: int = 10_000
    target_sync_interval: int = 500
    learning_rate: float = 1e-3
    learning_rate_end: float | None = None   # linear decay target (None = constant)
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    grad_clip_norm: float | None = 10.0
    max_steps: int | None = None
    min_buffer: int = 1000          # transitions collected before the first TD step
    seed: int = 0
    epsilon_start: float = 0.5      # live-environment mode only
    epsilon_end: float = 0.05
    max_malformed_fraction: float = 0.01

    def validate(self) -> "TrainConfig":
        if not (0.0 <= self.gamma <= 1.0):
            raise ContractError(f"gamma must be in [0, 1], got {self.gamma}")
        if self.alpha < 0.0:
            raise ContractError(f"alpha must be >= 0, got {self.alpha}")
        if self.batch_size <= 0 or self.buffer_capacity <= 0:
            raise ContractError("batch_size and buffer_capacity must be positive")
        if self.target_sync_interval <= 0:
            raise ContractError("target_sync_interval must be positive")
        return self


def combine_reward(r_ad: float, r_ex: float, alpha: float) -> float:
    """Combined reward: ad income plus alpha-weighted user experience."""
    if not (math.isfinite(r_ad) and math.isfinite(r_ex) and math.isfinite(alpha)):
        raise ContractError("reward components and alpha must be finite")
    return r_ad + alpha * r_ex


def bellman_target(target_net: QNetwork, r: float, next_state: State | None,
                   next_candidates, terminal: bool, gamma: float) -> float:
    """One-step target: r, or r + gamma * max over candidates x locations.

    Evaluates the target network one candidate at a time so the value is
    bit-identical to a plain enumeration of the same public calls.
    """
    if terminal or gamma == 0.0:
        return float(r)
    next_candidates = np.asarray(next_candidates, dtype=np.float64)
    if next_candidates.ndim != 2 or next_candidates.shape[0] == 0:
        raise PreconditionError("non-terminal target needs a non-empty candidate set")
    best = -np.inf
    if target_net.variant == "archA":
        best = float(np.max(target_net.q_state(next_state)))
    elif target_net.variant == "archB_onehot_loc":
        for cand in next_candidates:
            for loc in range(target_net.cfg.n_locations):
                best = max(best, target_net.q_location(next_state, cand, loc))
    else:
        for cand in next_candidates:
            best = max(best, float(np.max(target_net.q_values(next_state, cand))))
    return float(r) + gamma * best


def _batched_targets(target_net: QNetwork, batch, gamma: float) -> np.ndarray:
    """Vectorized Bellman targets for a minibatch (terminals pass through)."""
    y = np.array([t.reward for t in batch], dtype=np.float64)
    if gamma == 0.0:
        return y
    live = [i for i, t in enumerate(batch) if not t.terminal]
    if not live:
        return y
    states = [batch[i].next_state for i in live]
    cand_arrays = [np.asarray(batch[i].next_candidates, dtype=np.float64) for i in live]
    for i, c in zip(live, cand_arrays):
        if c.ndim != 2 or c.shape[0] == 0:
            raise PreconditionError(f"transition {i} is non-terminal but has no candidates")
    q_per_state = target_net._q_candidates_multi(states, cand_arrays)
    for i, q in zip(live, q_per_state):
        y[i] += gamma * float(np.max(q))
    return y


def sync_target(net: QNetwork, target_net: QNetwork) -> None:
    """Hard copy of the evaluation parameters into the target network."""
    target_net.load_params(net.params)


def td_step(net: QNetwork, target_net: QNetwork, batch, cfg: TrainConfig,
            adam: AdamState) -> float:
    """One optimizer step on a minibatch; returns the pre-step loss."""
    if not batch:
        raise PreconditionError("td_step needs a non-empty batch")
    y = _batched_targets(target_net, batch, cfg.gamma)
    states = [t.state for t in batch]
    ads = np.stack([np.asarray(t.action.ad_vector, dtype=np.float64) for t in batch])
    locs = np.array([t.action.location for t in batch], dtype=np.int64)
    b = len(batch)

    if net.variant == "archA":
        q_all = net.forward_training(states)
        taken = q_all[np.arange(b), locs]
    elif net.variant == "archB_onehot_loc":
        taken = net.forward_training(states, ads, locs)
    else:
        q_all = net.forward_training(states, ads)
        taken = q_all[np.arange(b), locs]

    err = taken - y
    loss = float(np.mean(err * err))
    if not math.isfinite(loss):
        bad = int(np.argmax(~np.isfinite(err)))
        t = batch[bad]
        raise ContractError(
            "non-finite TD loss; offending transition: "
            f"loc={t.action.location} r={t.reward} terminal={t.terminal} "
            f"y={y[bad]!r} q={taken[bad]!r}"
        )

    if net.variant == "archB_onehot_loc":
        dq = (2.0 / b) * err[:, None]
    else:
        dq = np.zeros_like(q_all)
        dq[np.arange(b), locs] = (2.0 / b) * err
    grads = net.backward(dq)
    if cfg.grad_clip_norm is not None:
        clip_gradients(grads, cfg.grad_clip_norm)
    adam_step(net.params, grads, adam)
    return loss


# --------------------------------------------------------------- log replay


class _SessionReplayer:
    """Turns logged sessions into transitions, windowed to the net config."""

    def __init__(self, window: int):
        self.window = window
        self._normal = ItemEncoder(NORMAL_SCHEMA)
        self._ad = ItemEncoder(AD_SCHEMA)

    def _encode_context(self, ctx: dict) -> np.ndarray:
        return ContextFeatures(os=ctx["os"], app_version=ctx["app_version"],
                               feed_type=ctx["feed_type"]).encode()

    def _history_state(self, rec_hist, ad_hist, context, rec_concat) -> State:
        w = self.window
        return State(
            rec_history=(np.stack(rec_hist[-w:]) if rec_hist
                         else np.zeros((0, ITEM_DIM), dtype=np.uint8)),
            ad_history=(np.stack(ad_hist[-w:]) if ad_hist
                        else np.zeros((0, ITEM_DIM), dtype=np.uint8)),
            context=context,
            rec_concat=rec_concat,
        )

    def transitions(self, session):
        """Yields Transition objects for one SessionRecord, in order.

        The combined reward field is left at 0; the caller owns alpha and
        fills it from the stored components.
        """
        rec_hist: list = []
        ad_hist: list = []
        pending = None
        for req in session.requests:
            rec_enc = np.stack([self._normal.encode(r).vector for r in req.rec_list])
            if req.is_warmup:
                rec_hist.extend(rec_enc)
                continue
            cand_enc = (np.stack([self._ad.encode(c).vector for c in req.candidates])
                        if req.candidates else np.zeros((0, ITEM_DIM), dtype=np.uint8))
            state = self._history_state(rec_hist, ad_hist,
                                        self._encode_context(req.context),
                                        rec_enc.reshape(-1))
            if pending is not None:
                prev_state, prev_action, prev_r_ad, prev_r_ex = pending
                yield Transition(state=prev_state, action=prev_action, reward=0.0,
                                 r_ad=prev_r_ad, r_ex=prev_r_ex, next_state=state,
                                 next_candidates=cand_enc, terminal=False)
                pending = None
            if req.ad_index is not None:
                action = AdAction(ad_vector=cand_enc[req.ad_index].copy(),
                                  location=req.location, ad_index=req.ad_index)
            else:
                action = no_ad_action(ITEM_DIM)
            rec_hist.extend(rec_enc)
            if req.ad_index is not None:
                ad_hist.append(cand_enc[req.ad_index].copy())
            if req.terminal:
                final_state = self._history_state(
                    rec_hist, ad_hist,
                    np.zeros(CONTEXT_DIM, dtype=np.uint8),
                    np.zeros(6 * ITEM_DIM, dtype=np.uint8),
                )
                yield Transition(state=state, action=action, reward=0.0,
                                 r_ad=req.r_ad, r_ex=req.r_ex, next_state=final_state,
                                 next_candidates=np.zeros((0, ITEM_DIM), dtype=np.uint8),
                                 terminal=True)
            else:
                pending = (state, action, req.r_ad, req.r_ex)


@dataclass
class TrainResult:
    steps: int
    loss_trace: list
    eval_trace: list
    transitions_seen: int
    malformed_lines: int
    adam: AdamState
    rng: np.random.Generator
    buffer: ReplayBuffer


def _write_trace(path, loss_trace, eval_trace):
    evals = dict(eval_trace)
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("step\tloss\teval_reward\n")
        for i, loss in enumerate(loss_trace, start=1):
            ev = evals.get(i, "")
            fh.write(f"{i}\t{loss!r}\t{ev}\n")


def train(cfg: TrainConfig, net: QNetwork, *, log_reader=None, env=None,
          eval_hook=None, eval_interval: int = 0, trace_path=None,
          resume_step: int = 0, resume_transitions: int = 0,
          adam: AdamState | None = None, target_net: QNetwork | None = None,
          rng: np.random.Generator | None = None) -> TrainResult:
    """Algorithm-style training loop over a session log or a live environment.

    Exactly one of ``log_reader`` / ``env`` must be provided. The resume_*
    arguments (plus pre-built adam/target/rng) continue an interrupted run:
    transitions up to ``resume_transitions`` are replayed into the buffer
    without training so the restored optimizer trajectory lines up.
    """
    cfg.validate()
    if (log_reader is None) == (env is None):
        raise ContractError("provide exactly one of log_reader or env")
    if adam is None:
        adam = AdamState.init(net.params, learning_rate=cfg.learning_rate,
                              beta1=cfg.adam_beta1, beta2=cfg.adam_beta2, eps=cfg.adam_eps)
    if target_net is None:
        target_net = net.clone()
    if rng is None:
        rng = np.random.default_rng(cfg.seed)

    buffer = ReplayBuffer(cfg.buffer_capacity)
    loss_trace: list = []
    eval_trace: list = []
    step = resume_step
    seen = 0

    def handle(transition) -> bool:
        """Pushes one transition, maybe trains; returns False to stop."""
        nonlocal step, seen
        seen += 1
        buffer.push(transition)
        if seen <= resume_transitions:
            return True
        if len(buffer) >= max(cfg.batch_size, cfg.min_buffer):
            if cfg.learning_rate_end is not None and cfg.max_steps:
                frac = min(1.0, step / cfg.max_steps)
                adam.learning_rate = (cfg.learning_rate
                                      + frac * (cfg.learning_rate_end - cfg.learning_rate))
            batch = buffer.sample(cfg.batch_size, rng)
            loss = td_step(net, target_net, batch, cfg, adam)
            step += 1
            loss_trace.append(loss)
            if step % cfg.target_sync_interval == 0:
                sync_target(net, target_net)
            if eval_hook is not None and eval_interval > 0 and step % eval_interval == 0:
                eval_trace.append((step, eval_hook(net, step)))
        return cfg.max_steps is None or step < cfg.max_steps

    if log_reader is not None:
        replayer = _SessionReplayer(net.cfg.history_window)
        stop = False
        for session in log_reader.sessions():
            for transition in replayer.transitions(session):
                transition.reward = combine_reward(transition.r_ad, transition.r_ex, cfg.alpha)
                if not handle(transition):
                    stop = True
                    break
            if stop:
                break
        total = max(log_reader.line_count, 1)
        if log_reader.malformed_count / total > cfg.max_malformed_fraction:
            raise DataError(
                f"{log_reader.malformed_count}/{total} malformed log lines exceeds "
                f"the {cfg.max_malformed_fraction:.0%} tolerance"
            )
        malformed = log_reader.malformed_count
    else:
        malformed = 0
        _run_live(cfg, net, env, handle, rng, lambda: step)

    if trace_path is not None:
        _write_trace(trace_path, loss_trace, eval_trace)
    return TrainResult(steps=step, loss_trace=loss_trace, eval_trace=eval_trace,
                       transitions_seen=seen, malformed_lines=malformed, adam=adam,
                       rng=rng, buffer=buffer)


def _state_from_obs(obs, window: int) -> State:
    return State(
        rec_history=obs.rec_history[-window:],
        ad_history=obs.ad_history[-window:],
        context=obs.context_enc,
        rec_concat=obs.rec_concat,
    )


def _epsilon(cfg: TrainConfig, step: int) -> float:
    if not cfg.max_steps:
        return cfg.epsilon_end
    half = max(1, cfg.max_steps // 2)
    frac = min(1.0, step / half)
    return cfg.epsilon_start + frac * (cfg.epsilon_end - cfg.epsilon_start)


def _run_live(cfg: TrainConfig, net: QNetwork, env, handle, rng, step_fn) -> None:
    """Exploratory training against a live environment (epsilon-greedy)."""
    if cfg.max_steps is None:
        raise ContractError("live training needs max_steps")
    window = net.cfg.history_window
    going = True
    while going:
        obs = env.reset()
        state = _state_from_obs(obs, window)
        terminal = False
        while not terminal:
            cands = obs.candidates_enc.astype(np.float64)
            if rng.uniform() < _epsilon(cfg, step_fn()):
                loc = int(rng.integers(0, net.cfg.n_locations))
                if loc == 0:
                    action = no_ad_action(net.cfg.item_dim)
                else:
                    idx = int(rng.integers(0, len(cands)))
                    action = AdAction(ad_vector=obs.candidates_enc[idx].copy(),
                                      location=loc, ad_index=idx)
            else:
                action = greedy_action(net, state, cands)
            r_ad, r_ex, next_obs, terminal = env.step(action)
            if terminal:
                next_state = State(
                    rec_history=state.rec_history, ad_history=state.ad_history,
                    context=np.zeros(CONTEXT_DIM, dtype=np.uint8),
                    rec_concat=np.zeros(6 * ITEM_DIM, dtype=np.uint8),
                )
                next_cands = np.zeros((0, ITEM_DIM), dtype=np.uint8)
            else:
                next_state = _state_from_obs(next_obs, window)
                next_cands = next_obs.candidates_enc
            transition = Transition(
                state=state, action=action,
                reward=combine_reward(r_ad, r_ex, cfg.alpha),
                r_ad=r_ad, r_ex=r_ex, next_state=next_state,
                next_candidates=next_cands, terminal=terminal,
            )
            if not handle(transition):
                going = False
                break
            if not terminal:
                obs = next_obs
                state = next_state
