import numpy as np
import pytest
from jsonschema import validate

from medfocus.core import BBox
from medfocus.services import (SCHEMAS, EditorClient, LocalTransport, ModelClient, RefinementDeclined,
                               RefinerClient, ScoredSequence, ServiceError, decode_image_b64,
                               decode_mask_b64, encode_image_b64, encode_mask_b64)
from medfocus.testkit import (LoopbackServer, MockModelService, MockModelSpec, StubEditorService,
                              StubRefinerService)

IMG = (np.arange(16 * 16) % 251).astype(np.uint8).reshape(16, 16)
SPEC = MockModelSpec(BBox(4, 4, 8, 8), float(IMG[4:8, 4:8].mean()))


class Recorder:
    """Transport that validates every request and reply against the wire schemas."""

    def __init__(self, handlers):
        self.inner = LocalTransport(handlers)

    def __call__(self, path, payload):
        validate(payload, SCHEMAS[(path, "request")])
        reply = self.inner(path, payload)
        validate(reply, SCHEMAS[(path, "reply")])
        return reply


def test_codecs_roundtrip():
    assert np.array_equal(decode_image_b64(encode_image_b64(IMG)), IMG)
    mask = IMG > 100
    assert np.array_equal(decode_mask_b64(encode_mask_b64(mask)), mask)
    with pytest.raises(ServiceError):
        decode_image_b64("not base64!")
    with pytest.raises(ServiceError):
        decode_image_b64("UDI=")       # "P2"


def test_scored_sequence_validation():
    with pytest.raises(ValueError):
        ScoredSequence("q", "a", (), ())
    with pytest.raises(ValueError):
        ScoredSequence("q", "a b", ("a", "b"), (-0.1,))
    with pytest.raises(ValueError):
        ScoredSequence("q", "a", ("a",), (0.5,))


def test_stubs_speak_the_schemas():
    model = ModelClient(Recorder(MockModelService(SPEC).handlers()))
    assert model.generate(IMG, "q", "direct") == "Yes."
    assert model.generate(IMG, "q", "reason").endswith("Final answer: yes")
    seq = model.score(IMG, "q", "Yes it is")
    assert seq.tokens == ("Yes", "it", "is") and seq.logprobs == (-0.1,) * 3
    editor = EditorClient(Recorder(StubEditorService(9).handlers()))
    out = editor.edit(IMG, IMG > 200, "No nodule")
    assert np.all(out[IMG > 200] == 9) and np.array_equal(out[IMG <= 200], IMG[IMG <= 200])
    refiner = RefinerClient(Recorder(StubRefinerService().handlers()))
    assert refiner.refine(IMG, BBox(1, 2, 5, 9)).sum() == 4 * 7


def test_refiner_declines_out_of_bounds():
    refiner = RefinerClient(Recorder(StubRefinerService().handlers()))
    with pytest.raises(RefinementDeclined):
        refiner.refine(IMG, BBox(0, 0, 40, 40))


def test_http_roundtrip():
    handlers = {**MockModelService(SPEC).handlers(), **StubEditorService(0).handlers(),
                **StubRefinerService().handlers()}
    with LoopbackServer(handlers) as url:
        model = ModelClient(url)
        assert model.generate(IMG, "q") == "Yes."
        local = ModelClient(LocalTransport(handlers))
        assert model.score(IMG, "q", "yes no") == local.score(IMG, "q", "yes no")
        edited = EditorClient(url).edit(IMG, np.ones_like(IMG, bool), "No x")
        assert np.all(edited == 0)
        assert RefinerClient(url).refine(IMG, BBox(0, 0, 1, 1)).sum() == 1
        with pytest.raises(RefinementDeclined):
            RefinerClient(url).refine(IMG, BBox(0, 0, 99, 99))


def test_http_failures():
    with LoopbackServer({"/generate": lambda p: {"wrong": 1},
                         "/score": lambda p: {"tokens": ["a"], "logprobs": [-1, -2]}}) as url:
        model = ModelClient(url)
        with pytest.raises(ServiceError, match="lacks 'text'"):
            model.generate(IMG, "q")
        with pytest.raises(ServiceError, match="1 tokens but 2 logprobs"):
            model.score(IMG, "q", "a")
        with pytest.raises(ServiceError, match="unknown path"):
            EditorClient(url).edit(IMG, IMG > 0, "x")
    with pytest.raises(ServiceError):
        ModelClient("http://127.0.0.1:9").generate(IMG, "q")


def test_bad_requests_rejected_client_side():
    model = ModelClient(Recorder(MockModelService(SPEC).handlers()))
    with pytest.raises(ValueError):
        model.score(IMG, "q", "")
    with pytest.raises(ValueError):
        model.generate(IMG, "q", "chatty")
    with pytest.raises(ValueError):
        EditorClient(Recorder(StubEditorService().handlers())).edit(IMG, np.ones((3, 3), bool), "x")


def test_shape_mismatch_reply():
    bad = EditorClient(LocalTransport({"/edit": lambda p: {"image_b64": encode_image_b64(IMG[:4, :4])}}))
    with pytest.raises(ServiceError, match="shape"):
        bad.edit(IMG, IMG > 0, "x")
