"""Item feature schemas, one-hot discretization, and state assembly.

Normal videos and ad videos both encode to 60-dim 0/1 vectors: a 20-bucket
id hash segment followed by five 8-bucket score segments. Bucketing is
half-open with edges belonging to the lower bucket; out-of-range values clamp
to the boundary bucket and are counted as warnings.

The decision state concatenates four blocks in fixed order:

    state = [rec-history encoding (64) | ad-history encoding (64) |
             context (13) | projected rec-list (360)]      -> width 501

History encodings come from two GRU cells (most recent ``window`` items), the
rec-list block from a tanh projection of the six concatenated item vectors.
"""

from __future__ import annotations

import zlib
from dataclasses import dataclass, field

import numpy as np

from .errors import SchemaError, ShapeError
from .nn import Dense, GRUCell

ITEM_DIM = 60
CONTEXT_DIM = 13
LIST_LEN = 6

# Context sub-field widths: OS (ios/android), app version bucket, feed type
# (swipe up / swipe down). 2 + 9 + 2 = 13.
OS_VALUES = 2
APP_VERSION_BUCKETS = 9
FEED_TYPES = 2


@dataclass(frozen=True)
class FieldSpec:
    """One raw feature: either an id hashed into buckets or a bucketized score."""

    name: str
    buckets: int
    kind: str = "score"          # "hash" or "score"
    lo: float = 0.0
    hi: float = 1.0


@dataclass(frozen=True)
class ItemSchema:
    kind: str                    # "normal" or "ad"
    fields: tuple

    @property
    def width(self) -> int:
        return sum(f.buckets for f in self.fields)

    def segment_offsets(self):
        offs, pos = [], 0
        for f in self.fields:
            offs.append((f, pos))
            pos += f.buckets
        return offs


NORMAL_SCHEMA = ItemSchema(
    kind="normal",
    fields=(
        FieldSpec("id", 20, kind="hash"),
        FieldSpec("like", 8),
        FieldSpec("finish", 8),
        FieldSpec("comment", 8),
        FieldSpec("follow", 8),
        FieldSpec("group", 8),
    ),
)

AD_SCHEMA = ItemSchema(
    kind="ad",
    fields=(
        FieldSpec("id", 20, kind="hash"),
        FieldSpec("image_size", 8),
        FieldSpec("pricing", 8),
        FieldSpec("hidden_cost", 8),
        FieldSpec("rc_preclk", 8),
        FieldSpec("recall_preclk", 8),
    ),
)

assert NORMAL_SCHEMA.width == ITEM_DIM and AD_SCHEMA.width == ITEM_DIM


def schema_for(kind: str) -> ItemSchema:
    if kind == "normal":
        return NORMAL_SCHEMA
    if kind == "ad":
        return AD_SCHEMA
    raise SchemaError(f"unknown item kind {kind!r}")


@dataclass
class EncodedItem:
    kind: str
    vector: np.ndarray           # (60,) uint8, exactly one 1 per segment


def hash_bucket(value, buckets: int) -> int:
    """Stable id -> bucket mapping (integers mod, strings via crc32)."""
    if isinstance(value, (int, np.integer)):
        return int(value) % buckets
    return zlib.crc32(str(value).encode("utf-8")) % buckets


def score_bucket(value: float, spec: FieldSpec) -> tuple[int, bool]:
    """Bucket index for a numeric feature; returns (index, clamped).

    Buckets are half-open with edges belonging to the lower bucket:
    the first bucket is [lo, lo+w], later ones (lo+(j-1)w, lo+jw].
    """
    clamped = False
    v = float(value)
    if v < spec.lo:
        v, clamped = spec.lo, True
    elif v > spec.hi:
        v, clamped = spec.hi, True
    width = (spec.hi - spec.lo) / spec.buckets
    scaled = (v - spec.lo) / width
    idx = int(np.ceil(scaled)) - 1 if scaled > 0.0 else 0
    return min(max(idx, 0), spec.buckets - 1), clamped


class ItemEncoder:
    """Encodes raw feature maps against a schema, counting range clamps."""

    def __init__(self, schema: ItemSchema):
        self.schema = schema
        self.clamp_count = 0

    def encode(self, raw: dict) -> EncodedItem:
        vec = np.zeros(self.schema.width, dtype=np.uint8)
        for spec, offset in self.schema.segment_offsets():
            if spec.name not in raw:
                raise SchemaError(f"missing feature {spec.name!r} for kind {self.schema.kind!r}")
            if spec.kind == "hash":
                idx = hash_bucket(raw[spec.name], spec.buckets)
            else:
                idx, clamped = score_bucket(raw[spec.name], spec)
                if clamped:
                    self.clamp_count += 1
            vec[offset + idx] = 1
        return EncodedItem(kind=self.schema.kind, vector=vec)


def encode_item(raw: dict, schema: ItemSchema, encoder: ItemEncoder | None = None) -> EncodedItem:
    if encoder is None:
        encoder = ItemEncoder(schema)
    elif encoder.schema is not schema:
        raise SchemaError("encoder was built for a different schema")
    return encoder.encode(raw)


@dataclass
class ContextFeatures:
    """Request context: OS, app version bucket, feed type."""

    os: int = 0
    app_version: int = 0
    feed_type: int = 0

    def encode(self) -> np.ndarray:
        if not (0 <= self.os < OS_VALUES):
            raise SchemaError(f"os must be in [0,{OS_VALUES}), got {self.os}")
        if not (0 <= self.app_version < APP_VERSION_BUCKETS):
            raise SchemaError(f"app_version must be in [0,{APP_VERSION_BUCKETS}), got {self.app_version}")
        if not (0 <= self.feed_type < FEED_TYPES):
            raise SchemaError(f"feed_type must be in [0,{FEED_TYPES}), got {self.feed_type}")
        vec = np.zeros(CONTEXT_DIM, dtype=np.uint8)
        vec[self.os] = 1
        vec[OS_VALUES + self.app_version] = 1
        vec[OS_VALUES + APP_VERSION_BUCKETS + self.feed_type] = 1
        return vec


@dataclass
class RecList:
    """Exactly L normal items shown for one request."""

    items: list

    def __post_init__(self):
        if len(self.items) != LIST_LEN:
            raise SchemaError(f"rec-list must have {LIST_LEN} items, got {len(self.items)}")
        for it in self.items:
            if it.kind != "normal":
                raise SchemaError(f"rec-list item has kind {it.kind!r}")

    def concat(self) -> np.ndarray:
        return np.concatenate([it.vector for it in self.items])


@dataclass
class State:
    """Decision state: raw inputs plus (optionally) the encoded blocks.

    The input arrays are all that training needs (histories are re-encoded
    under the current parameters each step); ``p_rec``/``p_ad``/``rec_proj``/
    ``vector`` are filled in by build_state for inspection and evaluation.
    Histories are ordered oldest-first and already truncated to the window.
    """

    rec_history: np.ndarray      # (n, 60) uint8
    ad_history: np.ndarray       # (m, 60) uint8
    context: np.ndarray          # (13,) uint8
    rec_concat: np.ndarray       # (360,) uint8
    p_rec: np.ndarray | None = None
    p_ad: np.ndarray | None = None
    rec_proj: np.ndarray | None = None
    vector: np.ndarray | None = None

    def stripped(self) -> "State":
        return State(self.rec_history, self.ad_history, self.context, self.rec_concat)


def _history_array(history, kind: str, window: int) -> np.ndarray:
    rows = []
    for item in history:
        if isinstance(item, EncodedItem):
            if item.kind != kind:
                raise SchemaError(f"history item kind {item.kind!r} != {kind!r}")
            rows.append(item.vector)
        else:
            rows.append(np.asarray(item))
    if not rows:
        return np.zeros((0, ITEM_DIM), dtype=np.uint8)
    arr = np.stack(rows).astype(np.uint8)
    if arr.shape[1] != ITEM_DIM:
        raise ShapeError(f"history item width {arr.shape[1]} != {ITEM_DIM}")
    return arr[-window:]


@dataclass
class StateEncoders:
    """The trainable encoders shared between state assembly and the Q-network."""

    rec_gru: GRUCell
    ad_gru: GRUCell
    rec_proj: Dense
    window: int = 20


def build_state(rec_history, ad_history, context, rec_list, encoders: StateEncoders) -> State:
    """Assemble the full decision state from raw inputs.

    Empty histories encode to the zero initial hidden state. The returned
    ``vector`` is the fixed-order concatenation (p_rec, p_ad, context, rec).
    """
    rec_arr = _history_array(rec_history, "normal", encoders.window)
    ad_arr = _history_array(ad_history, "ad", encoders.window)
    ctx = context.encode() if isinstance(context, ContextFeatures) else np.asarray(context, dtype=np.uint8)
    if ctx.shape != (CONTEXT_DIM,):
        raise ShapeError(f"context width {ctx.shape} != ({CONTEXT_DIM},)")
    rec_concat = rec_list.concat() if isinstance(rec_list, RecList) else np.asarray(rec_list, dtype=np.uint8)
    if rec_concat.shape != (LIST_LEN * ITEM_DIM,):
        raise ShapeError(f"rec-list concat width {rec_concat.shape} != ({LIST_LEN * ITEM_DIM},)")

    p_rec = encoders.rec_gru.encode(rec_arr.astype(np.float64))
    p_ad = encoders.ad_gru.encode(ad_arr.astype(np.float64))
    rec_proj = encoders.rec_proj.apply(rec_concat.astype(np.float64))
    vector = np.concatenate([p_rec, p_ad, ctx.astype(np.float64), rec_proj])
    return State(
        rec_history=rec_arr,
        ad_history=ad_arr,
        context=ctx,
        rec_concat=rec_concat,
        p_rec=p_rec,
        p_ad=p_ad,
        rec_proj=rec_proj,
        vector=vector,
    )
