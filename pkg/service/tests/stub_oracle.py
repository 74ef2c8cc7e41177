"""Frozen stub-model coefficients and the analytic response oracle."""
import numpy as np

# coefficients frozen here so tests recompute expectations from literals
ENCODE_MATRIX = np.array(
    [
        [0.5, -0.2, 0.1, 0.3],
        [0.0, 0.8, -0.4, -0.1],
        [0.25, 0.25, 0.25, 0.0],
        [-0.3, 0.1, 0.9, 0.2],
    ]
)
K_UNCOND, B_UNCOND = 0.7, 0.1
K_COND, B_COND = 1.3, -0.2
TOY_DELTA_K, TOY_DELTA_B = 0.5, 0.25



def expected_sds(latents, prompt, t_min, t_max, cfg_scale, seed,
                 delta_k=0.0, delta_b=0.0):
    """Recompute the stub residual w_t (eps_hat - eps) from the literals."""
    import zlib

    z = np.asarray(latents, dtype=np.float64)
    gen = np.random.default_rng(seed)
    t = gen.uniform(t_min, t_max, size=z.shape[0])
    eps = gen.standard_normal(z.shape)
    tt = t[:, None, None, None]
    z_t = np.sqrt(1.0 - tt) * z + np.sqrt(tt) * eps
    embed = (zlib.crc32(prompt.encode("utf-8")) % 4096) / 4096.0
    eps_u = K_UNCOND * z_t + B_UNCOND * tt
    eps_c = (K_COND + delta_k) * z_t + (B_COND + delta_b) * tt + embed
    eps_hat = eps_u + cfg_scale * (eps_c - eps_u)
    w = t
    return w[:, None, None, None] * (eps_hat - eps), t, w
