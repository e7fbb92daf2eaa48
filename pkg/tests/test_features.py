"""Feature encoding and state assembly tests."""

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from dear.errors import SchemaError, ShapeError
from dear.features import (
    AD_SCHEMA,
    CONTEXT_DIM,
    ITEM_DIM,
    LIST_LEN,
    NORMAL_SCHEMA,
    ContextFeatures,
    ItemEncoder,
    RecList,
    State,
    StateEncoders,
    build_state,
    encode_item,
    hash_bucket,
    score_bucket,
)
from dear.nn import Dense, GRUCell


def oracle_segment_indices(raw, schema):
    """Independent oracle: locate each feature's bucket by linear scan."""
    indices = []
    for spec in schema.fields:
        if spec.kind == "hash":
            indices.append(hash_bucket(raw[spec.name], spec.buckets))
            continue
        v = min(max(float(raw[spec.name]), spec.lo), spec.hi)
        width = (spec.hi - spec.lo) / spec.buckets
        idx = 0
        # edges belong to the lower bucket: bucket j covers (lo+j*w, lo+(j+1)*w]
        for j in range(spec.buckets):
            lo_edge = spec.lo + j * width
            hi_edge = spec.lo + (j + 1) * width
            if (v > lo_edge or j == 0) and v <= hi_edge:
                idx = j
                break
        else:
            idx = spec.buckets - 1
        indices.append(idx)
    return indices


def normal_raw(**overrides):
    raw = {"id": 1234, "like": 0.5, "finish": 0.5, "comment": 0.5, "follow": 0.5, "group": 0.5}
    raw.update(overrides)
    return raw


def ad_raw(**overrides):
    raw = {"id": 99, "image_size": 0.5, "pricing": 0.5, "hidden_cost": 0.5,
           "rc_preclk": 0.5, "recall_preclk": 0.5}
    raw.update(overrides)
    return raw


class TestEncoding:
    def test_schema_widths(self):
        assert NORMAL_SCHEMA.width == ITEM_DIM
        assert AD_SCHEMA.width == ITEM_DIM

    def test_all_features_at_bucket_zero(self):
        raw = normal_raw(id=0, like=0.0, finish=0.0, comment=0.0, follow=0.0, group=0.0)
        item = encode_item(raw, NORMAL_SCHEMA)
        expected_ones = [0] + [20 + 8 * i for i in range(5)]
        assert list(np.flatnonzero(item.vector)) == expected_ones

    def test_one_hot_per_segment(self):
        item = encode_item(normal_raw(), NORMAL_SCHEMA)
        pos = 0
        for spec in NORMAL_SCHEMA.fields:
            seg = item.vector[pos: pos + spec.buckets]
            assert seg.sum() == 1
            pos += spec.buckets

    def test_edge_goes_to_lower_bucket(self):
        spec = NORMAL_SCHEMA.fields[1]  # like: 8 buckets on [0,1]
        # 0.125 is exactly the first interior edge and is representable.
        idx, clamped = score_bucket(0.125, spec)
        assert idx == 0 and not clamped
        idx, _ = score_bucket(0.25, spec)
        assert idx == 1
        idx, _ = score_bucket(0.1250001, spec)
        assert idx == 1

    def test_out_of_range_clamps_and_counts(self):
        enc = ItemEncoder(NORMAL_SCHEMA)
        item = enc.encode(normal_raw(like=1.5, finish=-0.2))
        assert enc.clamp_count == 2
        assert item.vector[20 + 7] == 1      # like clamped to top bucket
        assert item.vector[28 + 0] == 1      # finish clamped to bottom bucket

    def test_missing_field_raises(self):
        raw = normal_raw()
        del raw["group"]
        with pytest.raises(SchemaError):
            encode_item(raw, NORMAL_SCHEMA)

    @given(st.integers(0, 2**31 - 1))
    @settings(max_examples=40, deadline=None)
    def test_random_map_matches_segment_oracle(self, seed):
        rng = np.random.default_rng(seed)
        schema = NORMAL_SCHEMA if rng.integers(2) else AD_SCHEMA
        raw = {spec.name: (int(rng.integers(0, 10**9)) if spec.kind == "hash"
                           else float(rng.uniform(0, 1)))
               for spec in schema.fields}
        item = encode_item(raw, schema)
        expected = oracle_segment_indices(raw, schema)
        pos = 0
        for spec, idx in zip(schema.fields, expected):
            assert item.vector[pos + idx] == 1
            assert item.vector[pos: pos + spec.buckets].sum() == 1
            pos += spec.buckets

    def test_encoding_deterministic(self):
        raw = normal_raw(like=0.371)
        a = encode_item(raw, NORMAL_SCHEMA).vector
        b = encode_item(dict(raw), NORMAL_SCHEMA).vector
        np.testing.assert_array_equal(a, b)


class TestContext:
    def test_width_and_one_hots(self):
        vec = ContextFeatures(os=1, app_version=3, feed_type=0).encode()
        assert vec.shape == (CONTEXT_DIM,)
        assert vec.sum() == 3

    def test_range_checks(self):
        with pytest.raises(SchemaError):
            ContextFeatures(os=2).encode()
        with pytest.raises(SchemaError):
            ContextFeatures(app_version=9).encode()


def make_encoders(seed=0, window=20, zero_proj=False):
    rng = np.random.default_rng(seed)
    rec_gru = GRUCell(ITEM_DIM, 64, rng=rng)
    ad_gru = GRUCell(ITEM_DIM, 64, rng=rng)
    if zero_proj:
        proj = Dense(np.zeros((360, 360)), np.zeros(360), "tanh")
    else:
        proj = Dense.init(rng, 360, 360, "tanh")
    return StateEncoders(rec_gru=rec_gru, ad_gru=ad_gru, rec_proj=proj, window=window)


def make_rec_list(rng):
    items = [encode_item(normal_raw(id=int(rng.integers(10**6)), like=float(rng.uniform()),
                                    finish=float(rng.uniform()), comment=float(rng.uniform()),
                                    follow=float(rng.uniform()), group=float(rng.uniform())),
                         NORMAL_SCHEMA) for _ in range(LIST_LEN)]
    return RecList(items=items)


class TestBuildState:
    def test_empty_histories_give_zero_encodings(self):
        rng = np.random.default_rng(1)
        state = build_state([], [], ContextFeatures(), make_rec_list(rng), make_encoders())
        np.testing.assert_array_equal(state.p_rec, np.zeros(64))
        np.testing.assert_array_equal(state.p_ad, np.zeros(64))
        assert state.vector.shape == (501,)

    def test_zero_projection_zeroes_rec_block(self):
        rng = np.random.default_rng(2)
        state = build_state([], [], ContextFeatures(), make_rec_list(rng),
                            make_encoders(zero_proj=True))
        np.testing.assert_array_equal(state.rec_proj, np.zeros(360))

    @given(st.integers(0, 2**31 - 1), st.integers(0, 25), st.integers(0, 8))
    @settings(max_examples=20, deadline=None)
    def test_width_invariant_501(self, seed, n_rec, n_ad):
        rng = np.random.default_rng(seed)
        rec_hist = [encode_item(normal_raw(id=i), NORMAL_SCHEMA) for i in range(n_rec)]
        ad_hist = [encode_item(ad_raw(id=i), AD_SCHEMA) for i in range(n_ad)]
        state = build_state(rec_hist, ad_hist, ContextFeatures(feed_type=1),
                            make_rec_list(rng), make_encoders())
        assert state.vector.shape == (501,)
        assert state.vector.shape[0] == 64 + 64 + 13 + 360

    def test_window_truncates_history(self):
        rng = np.random.default_rng(3)
        enc = make_encoders(window=4)
        rec_hist = [encode_item(normal_raw(id=i), NORMAL_SCHEMA) for i in range(10)]
        state = build_state(rec_hist, [], ContextFeatures(), make_rec_list(rng), enc)
        assert state.rec_history.shape == (4, ITEM_DIM)
        np.testing.assert_array_equal(state.rec_history[-1], rec_hist[-1].vector)

    def test_kind_mismatch_raises(self):
        rng = np.random.default_rng(4)
        bad = [encode_item(ad_raw(), AD_SCHEMA)]
        with pytest.raises(SchemaError):
            build_state(bad, [], ContextFeatures(), make_rec_list(rng), make_encoders())

    def test_rec_list_wrong_length_raises(self):
        items = [encode_item(normal_raw(), NORMAL_SCHEMA)] * 5
        with pytest.raises(SchemaError):
            RecList(items=items)

    def test_fixed_concat_order(self):
        rng = np.random.default_rng(5)
        enc = make_encoders()
        rec_hist = [encode_item(normal_raw(id=i), NORMAL_SCHEMA) for i in range(3)]
        state = build_state(rec_hist, [], ContextFeatures(os=1), make_rec_list(rng), enc)
        np.testing.assert_array_equal(state.vector[:64], state.p_rec)
        np.testing.assert_array_equal(state.vector[64:128], state.p_ad)
        np.testing.assert_array_equal(state.vector[128:141], state.context.astype(float))
        np.testing.assert_array_equal(state.vector[141:], state.rec_proj)
