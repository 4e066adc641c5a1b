import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from medfocus.concepts import DEFAULT_VOCABULARY, ConceptRegion
from medfocus.core import BBox
from medfocus.services import LocalTransport, ModelClient, ScoredSequence, ServiceError, decode_image_b64
from medfocus.scoring import (WHOLE_IMAGE, AlignmentError, AttributionConfig, attribute, delta,
                              make_counterfactual, score_sequence)
from medfocus.testkit import CountingTransport

IDS = DEFAULT_VOCABULARY.ids
SIZE = 224


def _layout():
    """One 16x16 box per default concept on a grid, on a uniform image."""
    boxes = {}
    for k, cid in enumerate(IDS):
        x = 20 * (k % 6)
        y = 20 * (k // 6)
        boxes[cid] = BBox(x, y, x + 16, y + 16)
    return boxes


BOXES = _layout()
IMG = np.full((SIZE, SIZE), 100, np.uint8)


def _regions(ids=IDS):
    out = {}
    for cid in ids:
        b = BOXES[cid]
        m = np.zeros((SIZE, SIZE), bool)
        m[b.y1:b.y2, b.x1:b.x2] = True
        out[cid] = ConceptRegion.from_mask(cid, m)
    return out


def scripted(base, table, tokens=("yes", "it", "is")):
    """Scorer returning ``table[key]`` when exactly the boxes of ``key`` are zeroed, else ``base``."""
    comp = {c.name: c.member_ids for c in DEFAULT_VOCABULARY.composites}

    def score(payload):
        img = decode_image_b64(payload["image_b64"])
        zeroed = tuple(cid for cid in IDS if np.all(img[BOXES[cid].y1:BOXES[cid].y2, BOXES[cid].x1:BOXES[cid].x2] == 0))
        key = zeroed[0] if len(zeroed) == 1 else next((n for n, m in comp.items() if tuple(m) == zeroed), None)
        lps = table.get(key, base) if zeroed else base
        return {"tokens": list(tokens), "logprobs": list(lps)}

    counter = CountingTransport(LocalTransport({"/score": score}))
    return ModelClient(counter), counter


def seq(lps, tokens=None):
    tokens = tokens or tuple(f"t{i}" for i in range(len(lps)))
    return ScoredSequence("q", " ".join(tokens), tuple(tokens), tuple(lps))


# --- counterfactuals -------------------------------------------------------------

def test_counterfactual_examples():
    assert np.all(make_counterfactual(np.full((4, 4), 9, np.uint8), [BBox(0, 0, 4, 4)]).image == 0)
    cf = make_counterfactual(np.full((2, 2), 9, np.uint8), [BBox(0, 0, 1, 1)], "s")
    assert cf.image.tolist() == [[0, 9], [9, 9]] and cf.source_id == "s"
    cf = make_counterfactual(np.full((3, 3), 5, np.uint8), [BBox(0, 0, 2, 2), BBox(1, 1, 3, 3)])
    assert int((cf.image == 0).sum()) == 7 and int((cf.image == 5).sum()) == 2
    with pytest.raises(ValueError):
        make_counterfactual(np.zeros((2, 2), np.uint8), [BBox(0, 0, 3, 3)])
    with pytest.raises(ValueError):
        make_counterfactual(np.zeros((2, 2), np.uint8), [])


def test_score_sequence_contract():
    model, counter = scripted((-0.1, -0.2, -0.3), {})
    a = score_sequence(model, IMG, "q", "yes it is")
    assert a.logprobs == (-0.1, -0.2, -0.3)
    assert score_sequence(model, IMG, "q", "yes it is") == a
    assert counter.counts["/score"] == 2
    with pytest.raises(ValueError):
        score_sequence(model, IMG, "q", "")


# --- delta -----------------------------------------------------------------------

def test_delta_fixtures():
    o = seq([-0.1, -0.2, -0.3])
    assert delta(o, o) == (0.0, (0.0, 0.0, 0.0))
    total, drops = delta(o, seq([-0.5, -0.1, -0.9]))
    assert drops == pytest.approx((0.4, 0.0, 0.6), abs=1e-15)
    assert total == pytest.approx(1.0, abs=1e-15)
    assert delta(o, seq([-0.01, -0.01, -0.01]))[0] == 0.0


def test_alignment_error_names_index():
    with pytest.raises(AlignmentError) as info:
        delta(seq([-1, -1, -1], ("a", "b", "c")), seq([-1, -1, -1], ("a", "x", "c")))
    assert info.value.index == 1
    with pytest.raises(AlignmentError) as info:
        delta(seq([-1, -1], ("a", "b")), seq([-1, -1, -1], ("a", "b", "c")))
    assert info.value.index == 2


@settings(max_examples=1000)
@given(st.lists(st.tuples(st.floats(-20, 0), st.floats(-20, 0)), min_size=1, max_size=12))
def test_delta_properties(pairs):
    o = seq([p[0] for p in pairs])
    p = seq([p[1] for p in pairs])
    total, drops = delta(o, p)
    assert total >= 0 and all(d >= 0 for d in drops)
    assert math.fsum(drops) == total
    assert 0 < math.exp(-total) <= 1


# --- attribute -------------------------------------------------------------------

BASE = (-0.1, -0.1, -0.1)


def _drop(total):
    return (-0.1 - total, -0.1, -0.1)


def test_all_zero_deltas_fall_back():
    model, _ = scripted(BASE, {})
    res = attribute(model, IMG, "q", "yes it is", _regions(), DEFAULT_VOCABULARY)
    assert res.fallback and res.winner == WHOLE_IMAGE
    assert res.boxes == [BBox(0, 0, SIZE, SIZE)]
    assert all(d.ratio == 1.0 for d in res.deltas)


def test_tau_boundary():
    at = math.log(4 / 3)
    model, _ = scripted(BASE, {"mediastinum": _drop(at)})
    res = attribute(model, IMG, "q", "yes it is", _regions(), DEFAULT_VOCABULARY)
    assert min(d.ratio for d in res.deltas) == pytest.approx(0.75, abs=1e-15)
    assert res.fallback
    below = attribute(scripted(BASE, {"mediastinum": _drop(at + 1e-6)})[0], IMG, "q", "yes it is",
                      _regions(), DEFAULT_VOCABULARY)
    assert not below.fallback and below.winner == "mediastinum"
    above = attribute(scripted(BASE, {"mediastinum": _drop(at - 1e-6)})[0], IMG, "q", "yes it is",
                      _regions(), DEFAULT_VOCABULARY)
    assert above.fallback


@pytest.mark.parametrize("tau", [0.3, 0.75, 0.95])
def test_fallback_iff_min_ratio_at_least_tau(tau):
    rng = np.random.default_rng(int(tau * 100))
    for _ in range(10):
        table = {cid: _drop(float(rng.uniform(0, 1.5))) for cid in IDS if rng.random() < 0.5}
        model, _ = scripted(BASE, table)
        res = attribute(model, IMG, "q", "yes it is", _regions(), DEFAULT_VOCABULARY, AttributionConfig(tau=tau))
        assert res.fallback == (min(d.ratio for d in res.deltas) >= tau)


def test_winner_ties_and_order():
    # equal drops: earliest concept in vocabulary order wins
    model, _ = scripted(BASE, {"right_lung": _drop(1.0), "left_lung": _drop(1.0)})
    res = attribute(model, IMG, "q", "yes it is", _regions(), DEFAULT_VOCABULARY)
    assert res.winner == "left_lung"
    assert [d.concept_key for d in res.deltas] == IDS + ["lungs", "clavicles", "hilar_structures",
                                                          "costophrenic_angles"]
    # a composite tying with a singleton loses to it
    model, _ = scripted(BASE, {"lungs": _drop(1.0), "left_lung": _drop(1.0)})
    assert attribute(model, IMG, "q", "yes it is", _regions(), DEFAULT_VOCABULARY).winner == "left_lung"
    model, _ = scripted(BASE, {"lungs": _drop(2.0), "left_lung": _drop(1.0)})
    res = attribute(model, IMG, "q", "yes it is", _regions(), DEFAULT_VOCABULARY)
    assert res.winner == "lungs"
    assert res.boxes == [BOXES["left_lung"], BOXES["right_lung"]]


def test_token_attribution_sums_to_delta():
    model, _ = scripted(BASE, {"cardiac_silhouette": (-0.5, -0.35, -0.9)})
    res = attribute(model, IMG, "q", "yes it is", _regions(), DEFAULT_VOCABULARY)
    win = next(d for d in res.deltas if d.concept_key == res.winner)
    assert math.fsum(res.token_attribution) == win.delta
    assert res.token_attribution == pytest.approx((0.4, 0.25, 0.8))


def test_argmax_invariant_to_constant_shift():
    table = {cid: _drop(0.1 * (k + 1) % 0.7) for k, cid in enumerate(IDS)}
    ref = attribute(scripted(BASE, table)[0], IMG, "q", "yes it is", _regions(), DEFAULT_VOCABULARY)
    shift = -2.0
    shifted = {k: tuple(x + shift for x in v) for k, v in table.items()}
    out = attribute(scripted(tuple(x + shift for x in BASE), shifted)[0], IMG, "q", "yes it is",
                    _regions(), DEFAULT_VOCABULARY)
    assert out.winner == ref.winner


def test_call_count_contract():
    model, counter = scripted(BASE, {})
    attribute(model, IMG, "q", "yes it is", _regions(), DEFAULT_VOCABULARY)
    assert counter.counts["/score"] == 1 + 11 + 4
    # drop one lung: the lungs composite is no longer eligible
    model, counter = scripted(BASE, {})
    present = [c for c in IDS if c != "right_lung"]
    res = attribute(model, IMG, "q", "yes it is", _regions(present), DEFAULT_VOCABULARY)
    assert counter.counts["/score"] == 1 + 10 + 3
    assert "lungs" not in [d.concept_key for d in res.deltas]
    model, counter = scripted(BASE, {})
    attribute(model, IMG, "q", "yes it is", _regions(), DEFAULT_VOCABULARY,
              AttributionConfig(include_composites=False))
    assert counter.counts["/score"] == 12


def test_no_regions_falls_back():
    model, counter = scripted(BASE, {})
    res = attribute(model, IMG, "q", "yes it is", {}, DEFAULT_VOCABULARY)
    assert res.fallback and res.reason and counter.counts["/score"] == 1


def test_service_error_carries_concept():
    calls = []

    def score(payload):
        calls.append(1)
        if len(calls) > 1:
            return {"tokens": ["yes"], "logprobs": []}
        return {"tokens": ["yes"], "logprobs": [-0.1]}

    model = ModelClient(LocalTransport({"/score": score}))
    with pytest.raises(ServiceError, match="scoring intervention '"):
        attribute(model, IMG, "q", "yes", _regions(["mediastinum"]), DEFAULT_VOCABULARY,
                  AttributionConfig(in_flight=1))


def test_misaligned_reply_rejected():
    def score(payload):
        img = decode_image_b64(payload["image_b64"])
        toks = ["yes"] if img.min() > 0 else ["no"]
        return {"tokens": toks, "logprobs": [-0.1]}

    with pytest.raises(AlignmentError):
        attribute(ModelClient(LocalTransport({"/score": score})), IMG, "q", "yes",
                  _regions(["mediastinum"]), DEFAULT_VOCABULARY)


def test_deterministic_result():
    table = {"left_clavicle": _drop(0.9)}
    a = attribute(scripted(BASE, table)[0], IMG, "q", "yes it is", _regions(), DEFAULT_VOCABULARY)
    b = attribute(scripted(BASE, table)[0], IMG, "q", "yes it is", _regions(), DEFAULT_VOCABULARY)
    assert a.to_dict("s") == b.to_dict("s")


def test_config_validation():
    for bad in (dict(tau=0), dict(tau=1.5), dict(in_flight=0)):
        with pytest.raises(ValueError):
            AttributionConfig(**bad)
