import base64

import numpy as np
import pytest

from meshstyle.wire import (
    PROTOCOL_VERSION,
    GuidanceRequest,
    ProtocolError,
    decode_tensor,
    encode_tensor,
    parse_guidance_response,
)


def test_tensor_roundtrip_is_bit_exact(rng):
    arr = rng.normal(size=(2, 4, 8, 8)).astype(np.float32)
    back = decode_tensor(encode_tensor(arr))
    assert back.dtype == np.float32
    assert back.shape == arr.shape
    assert np.array_equal(back.view(np.uint32), arr.view(np.uint32))


def test_encode_coerces_to_float32(rng):
    arr = rng.normal(size=(3, 3))
    back = decode_tensor(encode_tensor(arr))
    assert np.array_equal(back, arr.astype(np.float32))


def test_scalar_tensor():
    # scalars encode as shape (1,); an explicit [] shape decodes too
    obj = encode_tensor(np.float32(2.5))
    assert obj["shape"] == [1]
    assert decode_tensor(obj) == np.float32(2.5)
    obj["shape"] = []
    assert decode_tensor(obj).shape == ()


def test_decode_rejects_malformed():
    good = encode_tensor(np.ones((2, 2), dtype=np.float32))
    with pytest.raises(ProtocolError, match="missing shape/data"):
        decode_tensor({"shape": [2, 2]})
    with pytest.raises(ProtocolError, match="missing shape/data"):
        decode_tensor("nope")
    with pytest.raises(ProtocolError, match="undecodable"):
        decode_tensor({"shape": [2, 2], "data": "!!!not-base64!!!"})
    with pytest.raises(ProtocolError, match="bytes"):
        decode_tensor({"shape": [3, 3], "data": good["data"]})
    bad = encode_tensor(np.array([np.inf, 1.0], dtype=np.float32))
    with pytest.raises(ProtocolError, match="non-finite"):
        decode_tensor(bad)
    nan = encode_tensor(np.array([np.nan], dtype=np.float32))
    with pytest.raises(ProtocolError, match="non-finite"):
        decode_tensor(nan)


def test_request_body_layout(rng):
    lat = rng.normal(size=(2, 4, 8, 8)).astype(np.float32)
    req = GuidanceRequest(
        latents=lat,
        prompt="a chair",
        lora_id="style7",
        t_min=0.1,
        t_max=0.9,
        cfg_scale=50.0,
        seed=42,
    )
    body = req.to_body()
    assert body["protocol_version"] == PROTOCOL_VERSION
    assert body["prompt"] == "a chair"
    assert body["lora_id"] == "style7"
    assert body["t_min"] == 0.1
    assert body["t_max"] == 0.9
    assert body["cfg_scale"] == 50.0
    assert body["seed"] == 42
    assert np.array_equal(decode_tensor(body["tensors"]["latents"]), lat)
    # defaults
    body = GuidanceRequest(latents=lat, prompt="", lora_id="").to_body()
    assert body["t_min"] == 0.02
    assert body["t_max"] == 0.98
    assert body["cfg_scale"] == 100.0


def test_request_validation(rng):
    with pytest.raises(ValueError, match="B, 4, h, w"):
        GuidanceRequest(latents=np.zeros((4, 8, 8)), prompt="", lora_id="").to_body()
    with pytest.raises(ValueError, match="B, 4, h, w"):
        GuidanceRequest(latents=np.zeros((1, 3, 8, 8)), prompt="", lora_id="").to_body()
    lat = np.zeros((1, 4, 8, 8))
    with pytest.raises(ValueError, match="timestep"):
        GuidanceRequest(latents=lat, prompt="", lora_id="", t_min=0.9, t_max=0.1).to_body()
    with pytest.raises(ValueError, match="timestep"):
        GuidanceRequest(latents=lat, prompt="", lora_id="", t_max=1.5).to_body()


def good_response(batch_shape):
    b = batch_shape[0]
    return {
        "protocol_version": PROTOCOL_VERSION,
        "tensors": {
            "grad_latent": encode_tensor(np.ones(batch_shape, dtype=np.float32)),
            "t_sampled": encode_tensor(np.full(b, 0.5, dtype=np.float32)),
            "w_t": encode_tensor(np.full(b, 0.25, dtype=np.float32)),
        },
        "provider": "unit",
    }


def test_parse_response_good():
    shape = (2, 4, 8, 8)
    out = parse_guidance_response(good_response(shape), shape)
    assert out.grad_latent.shape == shape
    assert out.t_sampled.shape == (2,)
    assert out.w_t.shape == (2,)
    assert out.provider == "unit"


def test_parse_response_rejects():
    shape = (2, 4, 8, 8)
    with pytest.raises(ProtocolError, match="not a JSON object"):
        parse_guidance_response([], shape)
    body = good_response(shape)
    body["protocol_version"] = 2
    with pytest.raises(ProtocolError, match="version mismatch"):
        parse_guidance_response(body, shape)
    body = good_response(shape)
    del body["tensors"]
    with pytest.raises(ProtocolError, match="missing tensors"):
        parse_guidance_response(body, shape)
    body = good_response(shape)
    del body["tensors"]["w_t"]
    with pytest.raises(ProtocolError, match="missing tensor 'w_t'"):
        parse_guidance_response(body, shape)
    body = good_response(shape)
    with pytest.raises(ProtocolError, match="grad_latent shape"):
        parse_guidance_response(body, (3, 4, 8, 8))
    body = good_response(shape)
    body["tensors"]["t_sampled"] = encode_tensor(np.zeros(5, dtype=np.float32))
    with pytest.raises(ProtocolError, match="per batch item"):
        parse_guidance_response(body, shape)


def test_base64_payload_is_little_endian_float32():
    arr = np.array([1.0, -2.0], dtype=np.float32)
    obj = encode_tensor(arr)
    raw = base64.b64decode(obj["data"])
    assert raw == arr.astype("<f4").tobytes()
