import random

import pytest

from conftest import image, mm_request, text_request
from mmsim.core import (Modality, Request, TraceParseError, read_trace,
                        request_from_dict, request_to_dict, validate_trace,
                        write_trace)


def codes(issues):
    return {i.code for i in issues}


def test_valid_single_text_request():
    assert validate_trace([text_request(1, 0.0, text_len=10, output_len=5)]) == []


def test_multimodal_without_images_is_mismatch():
    bad = Request(id=1, arrival_time=0.0, modality=Modality.MULTIMODAL,
                  text_input_len=5, images=(), output_len=3)
    assert "ModalityMismatch" in codes(validate_trace([bad]))


def test_text_with_images_is_mismatch():
    bad = Request(id=1, arrival_time=0.0, modality=Modality.TEXT_ONLY,
                  text_input_len=5, images=(image("a"),), output_len=3)
    assert "ModalityMismatch" in codes(validate_trace([bad]))


def test_non_monotone_arrivals():
    trace = [text_request(1, 5.0), text_request(2, 3.0)]
    assert "NonMonotoneArrivals" in codes(validate_trace(trace))


def test_empty_trace():
    assert codes(validate_trace([])) == {"EmptyTrace"}


def test_duplicate_ids():
    trace = [text_request(1, 0.0), text_request(1, 1.0)]
    assert "DuplicateId" in codes(validate_trace(trace))


def test_hash_identity_conflict():
    img_a = image("same")
    img_b = type(img_a)(content_hash=img_a.content_hash, token_count=999,
                        pixels=(1, 1))
    trace = [mm_request(1, 0.0, [img_a]), mm_request(2, 1.0, [img_b])]
    assert "ImageHashConflict" in codes(validate_trace(trace))


def test_bad_token_counts():
    bad = Request(id=1, arrival_time=0.0, modality=Modality.TEXT_ONLY,
                  text_input_len=5, images=(), output_len=0)
    assert "BadTokenCounts" in codes(validate_trace([bad]))


def test_total_input_len_additive_over_images():
    rng = random.Random(7)
    for _ in range(200):
        n = rng.randint(1, 5)
        imgs = [image(f"i{rng.random()}", tokens=rng.randint(1, 9000))
                for _ in range(n)]
        text = rng.randint(0, 500)
        req = mm_request(1, 0.0, imgs, text_len=text)
        assert req.total_input_len == text + sum(i.token_count for i in imgs)


def test_request_dict_round_trip():
    req = mm_request(42, 1.5, [image("x"), image("y", tokens=7410)],
                     text_len=33, output_len=9, prefix_id=2, prefix_len=20)
    assert request_from_dict(request_to_dict(req)) == req


def test_trace_file_round_trip(tmp_path):
    trace = [
        text_request(0, 0.0, text_len=10, output_len=5, priority=True),
        mm_request(1, 0.5, [image("a")], text_len=4, output_len=2,
                   prefix_id=0, prefix_len=4),
        text_request(2, 1.0),
    ]
    path = tmp_path / "trace.jsonl"
    write_trace(str(path), trace)
    assert read_trace(str(path)) == trace


def test_parse_error_carries_line_number(tmp_path):
    path = tmp_path / "broken.jsonl"
    good = request_to_dict(text_request(0, 0.0))
    import json
    lines = [json.dumps(good)] * 6 + ["{not json"]
    path.write_text("\n".join(lines) + "\n")
    with pytest.raises(TraceParseError) as err:
        read_trace(str(path))
    assert err.value.line == 7
