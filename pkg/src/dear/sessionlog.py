"""Line-delimited session log format.

One request per line, pipe-separated fields, JSON-encoded payloads:

    session_id | t | context | rec_list | candidates | action | r_ad | r_ex | terminal

* ``context``   -- {"os": int, "app_version": int, "feed_type": int}
* ``rec_list``  -- array of L raw normal-video feature maps
* ``candidates``-- array of raw ad feature maps (empty for warm-up requests)
* ``action``    -- {"ad": candidate index or null, "loc": 0..L+1}
* ``terminal``  -- 0/1, set only on a session's last request

The first line is a schema-version header; readers reject logs whose version
they do not understand. Warm-up requests carry empty candidate arrays and the
no-ad action.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .envsim import (
    BehaviorPolicyConfig,
    EnvConfig,
    RequestRecord,
    SessionRecord,
    SimEnv,
    session_stats,
)
from .errors import DataError

LOG_HEADER = "# ad-session-log v1"


def _format_request(session_id: int, req: RequestRecord) -> str:
    fields = [
        str(session_id),
        str(req.t),
        json.dumps(req.context, separators=(",", ":"), sort_keys=True),
        json.dumps(req.rec_list, separators=(",", ":"), sort_keys=True),
        json.dumps(req.candidates, separators=(",", ":"), sort_keys=True),
        json.dumps({"ad": req.ad_index, "loc": req.location}, separators=(",", ":")),
        repr(float(req.r_ad)),
        repr(float(req.r_ex)),
        "1" if req.terminal else "0",
    ]
    return "|".join(fields)


def write_log(sessions, path) -> int:
    """Writes an iterable of SessionRecord; returns the session count."""
    count = 0
    path = Path(path)
    try:
        with path.open("w", encoding="utf-8") as fh:
            fh.write(LOG_HEADER + "\n")
            for record in sessions:
                for req in record.requests:
                    fh.write(_format_request(record.session_id, req) + "\n")
                count += 1
    except OSError as exc:
        raise DataError(f"failed writing session log {path} at session {count}: {exc}") from exc
    return count


def generate_log(env_cfg: EnvConfig, policy_cfg: BehaviorPolicyConfig, sessions: int,
                 path, seed: int = 0) -> dict:
    """Rolls ``sessions`` behavior-policy sessions into a log file.

    Deterministic under ``seed``; returns the summary statistics of the
    generated sessions.
    """
    env = SimEnv(env_cfg, seed=seed)
    return generate_log_with(env, lambda obs, rng: None, sessions, path, seed,
                             behavior_cfg=policy_cfg)


def generate_log_with(env, policy, sessions: int, path, seed: int = 0,
                      behavior_cfg: BehaviorPolicyConfig | None = None) -> dict:
    """Log generation for an arbitrary env/policy pair (same format)."""
    from .envsim import behavior_policy, run_policy_session

    policy_rng = np.random.default_rng(np.random.SeedSequence([seed, 0xB0]))
    if behavior_cfg is not None:
        policy = lambda obs, rng: behavior_policy(behavior_cfg, obs, rng)  # noqa: E731
    records = []

    def roll():
        for _ in range(sessions):
            record = run_policy_session(env, policy, policy_rng)
            records.append(record)
            yield record

    write_log(roll(), path)
    return session_stats(records)


class SessionLogReader:
    """Streams SessionRecord objects from a log file.

    Malformed lines are skipped and counted; downstream consumers decide how
    much malformation they tolerate.
    """

    def __init__(self, path):
        self.path = Path(path)
        self.malformed_count = 0
        self.line_count = 0

    def _parse_line(self, line: str):
        parts = line.rstrip("\n").split("|")
        if len(parts) != 9:
            raise DataError(f"expected 9 fields, got {len(parts)}")
        session_id = int(parts[0])
        action = json.loads(parts[5])
        req = RequestRecord(
            t=int(parts[1]),
            context=json.loads(parts[2]),
            rec_list=json.loads(parts[3]),
            candidates=json.loads(parts[4]),
            ad_index=action["ad"],
            location=int(action["loc"]),
            r_ad=float(parts[6]),
            r_ex=float(parts[7]),
            terminal=parts[8] == "1",
        )
        return session_id, req

    def sessions(self):
        with self.path.open("r", encoding="utf-8") as fh:
            header = fh.readline().rstrip("\n")
            if header != LOG_HEADER:
                raise DataError(
                    f"unsupported session-log header {header!r} (expected {LOG_HEADER!r})"
                )
            current_id = None
            requests: list = []
            for line in fh:
                if not line.strip():
                    continue
                self.line_count += 1
                try:
                    session_id, req = self._parse_line(line)
                except (DataError, ValueError, KeyError, json.JSONDecodeError):
                    self.malformed_count += 1
                    continue
                if current_id is None:
                    current_id = session_id
                if session_id != current_id:
                    yield SessionRecord(session_id=current_id, requests=requests)
                    current_id, requests = session_id, []
                requests.append(req)
            if current_id is not None:
                yield SessionRecord(session_id=current_id, requests=requests)
