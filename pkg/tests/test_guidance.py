import numpy as np
import pytest

from meshstyle.guidance import (
    LatentTargetProvider,
    ProviderError,
    RemoteSDSProvider,
    SilhouetteProvider,
    ZeroProvider,
    encode_remote,
    latent_target_oracle,
    sds_remote,
    silhouette_oracle,
)
from meshstyle.render import RenderConfig, render_soft
from meshstyle.sampling import icosphere
from meshstyle.wire import GuidanceRequest, ProtocolError

from test_render import reference_camera


def render_sphere(res=32):
    mesh = icosphere(1)
    return render_soft(mesh.vertices, mesh.faces, reference_camera(res=res))


def test_silhouette_oracle_closed_form(rng):
    out = render_sphere()
    mask = rng.uniform(size=out.alpha.shape)
    loss, dl_drgb, dl_dalpha = silhouette_oracle(out, mask)
    diff = out.alpha - mask
    assert loss == pytest.approx(float(np.mean(diff**2)), rel=1e-14)
    assert np.array_equal(dl_dalpha, 2.0 * diff / diff.size)
    assert np.all(dl_drgb == 0.0)
    with pytest.raises(ValueError, match="mask shape"):
        silhouette_oracle(out, mask[:-1])


def test_silhouette_oracle_finite_differences(rng):
    out = render_sphere(res=16)
    mask = rng.uniform(size=(16, 16))
    _, _, g = silhouette_oracle(out, mask)
    h = 1e-7
    for _ in range(6):
        i, j = rng.integers(16), rng.integers(16)
        ap = out.alpha.copy()
        am = out.alpha.copy()
        ap[i, j] += h
        am[i, j] -= h
        fd = (np.mean((ap - mask) ** 2) - np.mean((am - mask) ** 2)) / (2 * h)
        assert abs(fd - g[i, j]) < 1e-7


def test_latent_target_oracle(rng):
    z = rng.normal(size=(4, 8, 8))
    zt = rng.normal(size=(4, 8, 8))
    loss, grad = latent_target_oracle(z, zt)
    assert loss == pytest.approx(float(np.mean((z - zt) ** 2)), rel=1e-14)
    assert np.array_equal(grad, 2.0 * (z - zt) / z.size)
    with pytest.raises(ValueError, match="latent shape"):
        latent_target_oracle(z, zt[:2])


def make_request(rng, batch=2, seed=7):
    lat = rng.normal(size=(batch, 4, 8, 8)).astype(np.float32)
    return GuidanceRequest(latents=lat, prompt="test", lora_id="", seed=seed)


def test_sds_remote_success_bit_exact(rng, guidance_stub):
    req = make_request(rng)
    out = sds_remote(req, guidance_stub.endpoint)
    expected = (np.float32(0.25) * req.latents).view(np.uint32)
    assert np.array_equal(out.grad_latent.view(np.uint32), expected)
    assert out.provider == "stub"
    assert np.all((out.t_sampled >= req.t_min) & (out.t_sampled <= req.t_max))
    assert np.allclose(out.w_t, 1.0 - out.t_sampled, atol=1e-6)
    path, body = guidance_stub.requests[-1]
    assert path == "/sds_grad"
    assert body["prompt"] == "test"
    assert body["seed"] == 7


def test_sds_remote_is_deterministic(rng, guidance_stub):
    req = make_request(rng, seed=123)
    a = sds_remote(req, guidance_stub.endpoint)
    b = sds_remote(req, guidance_stub.endpoint)
    assert np.array_equal(a.grad_latent, b.grad_latent)
    assert np.array_equal(a.t_sampled, b.t_sampled)
    assert np.array_equal(a.w_t, b.w_t)


def test_sds_remote_retries_dropped_connection(rng, guidance_stub):
    guidance_stub.mode = "drop_once"
    req = make_request(rng)
    out = sds_remote(req, guidance_stub.endpoint, retries=2, retry_wait=0.01)
    assert out.grad_latent.shape == (2, 4, 8, 8)
    assert guidance_stub.dropped
    assert len(guidance_stub.requests) == 2


def test_sds_remote_unreachable_raises_provider_error(rng):
    req = make_request(rng)
    with pytest.raises(ProviderError, match="after 2 attempts"):
        sds_remote(req, "http://127.0.0.1:9", retries=1, retry_wait=0.01)


def test_sds_remote_http_error(rng, guidance_stub):
    guidance_stub.mode = "http_error"
    with pytest.raises(ProviderError, match="500"):
        sds_remote(make_request(rng), guidance_stub.endpoint)


def test_sds_remote_bad_json(rng, guidance_stub):
    guidance_stub.mode = "bad_json"
    with pytest.raises(ProtocolError, match="not JSON"):
        sds_remote(make_request(rng), guidance_stub.endpoint)


def test_sds_remote_version_mismatch(rng, guidance_stub):
    guidance_stub.mode = "version_mismatch"
    with pytest.raises(ProtocolError, match="version mismatch"):
        sds_remote(make_request(rng), guidance_stub.endpoint)


def test_sds_remote_wrong_shape(rng, guidance_stub):
    guidance_stub.mode = "wrong_shape"
    with pytest.raises(ProtocolError, match="grad_latent shape"):
        sds_remote(make_request(rng), guidance_stub.endpoint)


def test_encode_remote_success(rng, guidance_stub):
    imgs = rng.uniform(size=(3, 3, 32, 32)).astype(np.float32)
    latents = encode_remote(imgs, guidance_stub.endpoint)
    assert latents.shape == (3, 4, 4, 4)
    down = imgs.reshape(3, 3, 4, 8, 4, 8).mean(axis=(3, 5))
    expected = np.concatenate([down, down.mean(axis=1, keepdims=True)], axis=1)
    assert np.max(np.abs(latents - expected)) < 1e-6


def test_encode_remote_validates(rng, guidance_stub):
    with pytest.raises(ValueError, match="B, 3, H, W"):
        encode_remote(np.zeros((3, 32, 32)), guidance_stub.endpoint)
    guidance_stub.mode = "wrong_shape"
    with pytest.raises(ProtocolError, match="latents shape"):
        encode_remote(np.zeros((1, 3, 32, 32), dtype=np.float32), guidance_stub.endpoint)
    with pytest.raises(ProviderError):
        encode_remote(
            np.zeros((1, 3, 32, 32), dtype=np.float32),
            "http://127.0.0.1:9",
            retries=0,
        )


def test_remote_provider_telemetry(rng, guidance_stub):
    provider = RemoteSDSProvider(endpoint=guidance_stub.endpoint, prompt="x")
    lat = rng.normal(size=(2, 4, 8, 8)).astype(np.float32)
    value, grads = provider.latent_gradient(lat, seed=5)
    assert grads.dtype == np.float64
    assert value == pytest.approx(float(np.mean(grads**2)), rel=1e-12)
    assert np.allclose(grads, 0.25 * lat.astype(np.float64), atol=1e-7)
    body = guidance_stub.requests[-1][1]
    assert body["seed"] == 5
    assert body["cfg_scale"] == 100.0


def test_latent_target_provider_batches(rng):
    zt = rng.normal(size=(4, 8, 8))
    provider = LatentTargetProvider(target_latent=zt)
    lat = rng.normal(size=(3, 4, 8, 8))
    value, grads = provider.latent_gradient(lat, seed=0)
    per = [latent_target_oracle(lat[b], zt) for b in range(3)]
    assert value == pytest.approx(np.mean([p[0] for p in per]), rel=1e-12)
    for b in range(3):
        assert np.array_equal(grads[b], per[b][1])
    assert provider.latent_space


def test_pixel_providers(rng):
    out = render_sphere(res=16)
    mask = rng.uniform(size=(16, 16))
    provider = SilhouetteProvider(target_mask=mask)
    assert not provider.latent_space
    loss, gr, ga = provider.pixel_gradient(out)
    ref = silhouette_oracle(out, mask)
    assert loss == ref[0]
    assert np.array_equal(ga, ref[2])

    zero = ZeroProvider()
    loss, gr, ga = zero.pixel_gradient(out)
    assert loss == 0.0
    assert np.all(gr == 0.0)
    assert np.all(ga == 0.0)
