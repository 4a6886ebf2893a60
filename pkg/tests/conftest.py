import dataclasses

import pytest

from mmsim import experiments as exp
from mmsim.core import ImageInput, Modality, Request
from mmsim.costmodel import CostProfile


@pytest.fixture(scope="session")
def default_cost() -> CostProfile:
    return exp.resolve_cost_profile("default")


@pytest.fixture(scope="session")
def sharegpt_profile():
    return exp.resolve_dataset_profile("sharegpt4o-like")


@pytest.fixture(scope="session")
def visualweb_profile():
    return exp.resolve_dataset_profile("visualwebinstruct-like")


@pytest.fixture
def simple_cost() -> CostProfile:
    """Round-number profile for hand-computable expectations."""
    return CostProfile(
        encode_rate=1000.0, prefill_rate=1000.0, decode_base=0.02,
        decode_batch_coeff=0.005, decode_kv_coeff=0.0,
        parallel_alpha=0.0, migration_bandwidth=400_000.0,
        kv_bytes_per_token=1, penalty_w=1.0, decode_batch_threshold=8)


def text_request(rid: int, arrival: float, text_len: int = 10,
                 output_len: int = 5, priority: bool = False,
                 prefix_id=None, prefix_len: int = 0) -> Request:
    return Request(id=rid, arrival_time=arrival, modality=Modality.TEXT_ONLY,
                   text_input_len=text_len, images=(), output_len=output_len,
                   priority_hint=priority, prefix_id=prefix_id,
                   prefix_len=prefix_len)


def image(tag: str, tokens: int = 6516, pixels=(904, 904)) -> ImageInput:
    return ImageInput(content_hash=f"{abs(hash(tag)) % (1 << 128):032x}",
                      token_count=tokens, pixels=pixels)


def mm_request(rid: int, arrival: float, images, text_len: int = 10,
               output_len: int = 5, prefix_id=None, prefix_len: int = 0) -> Request:
    return Request(id=rid, arrival_time=arrival, modality=Modality.MULTIMODAL,
                   text_input_len=text_len, images=tuple(images),
                   output_len=output_len, prefix_id=prefix_id,
                   prefix_len=prefix_len)


def replace_profile(profile, **kwargs):
    return dataclasses.replace(profile, **kwargs)
