"""Shared test helpers: tiny meshes and an in-process guidance service."""
import json
import threading
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer

import numpy as np

from meshstyle.mesh import Mesh
from meshstyle.wire import PROTOCOL_VERSION, decode_tensor, encode_tensor


def random_soup(rng, num_faces: int, spread: float = 0.4) -> Mesh:
    """Disconnected random triangles with comfortably nonzero areas."""
    while True:
        verts = rng.normal(size=(3 * num_faces, 3)) * spread
        faces = np.arange(3 * num_faces, dtype=np.int64).reshape(num_faces, 3)
        mesh = Mesh(verts, faces)
        if mesh.face_areas().min() > 1e-3:
            return mesh


def cuboid_vertices(a=2.0, b=1.0, c=0.5) -> np.ndarray:
    return np.array(
        [[x, y, z] for x in (-a, a) for y in (-b, b) for z in (-c, c)], dtype=float
    )


class GuidanceStub:
    """Deterministic in-process guidance service for exercising the client.

    /sds_grad returns grad = 0.25 * latents (exact in float32) with seeded
    timesteps; /encode box-downsamples RGB and appends the channel mean.
    ``mode`` switches in failure behaviors for the error-path tests.
    """

    def __init__(self):
        self.mode = "ok"
        self.requests: list[tuple[str, dict]] = []
        self.dropped = False
        stub = self

        class Handler(BaseHTTPRequestHandler):
            def log_message(self, *args):
                pass

            def do_POST(self):
                length = int(self.headers.get("Content-Length", 0))
                body = json.loads(self.rfile.read(length))
                stub.requests.append((self.path, body))
                if stub.mode == "drop_once" and not stub.dropped:
                    stub.dropped = True
                    self.connection.close()
                    return
                if stub.mode == "http_error":
                    self.send_response(500)
                    self.end_headers()
                    self.wfile.write(b"boom")
                    return
                if stub.mode == "bad_json":
                    self._reply_raw(b"{not json")
                    return
                if self.path == "/sds_grad":
                    self._reply(stub._sds_body(body))
                elif self.path == "/encode":
                    self._reply(stub._encode_body(body))
                else:
                    self.send_response(404)
                    self.end_headers()

            def _reply(self, payload: dict):
                self._reply_raw(json.dumps(payload).encode())

            def _reply_raw(self, raw: bytes):
                self.send_response(200)
                self.send_header("Content-Type", "application/json")
                self.send_header("Content-Length", str(len(raw)))
                self.end_headers()
                self.wfile.write(raw)

        self.server = ThreadingHTTPServer(("127.0.0.1", 0), Handler)
        self.thread = threading.Thread(target=self.server.serve_forever, daemon=True)
        self.thread.start()
        self.endpoint = f"http://127.0.0.1:{self.server.server_port}"

    def _sds_body(self, body: dict) -> dict:
        latents = decode_tensor(body["tensors"]["latents"], "latents")
        grad = np.float32(0.25) * latents
        if self.mode == "wrong_shape":
            grad = grad[:, :2]
        b = latents.shape[0]
        rng = np.random.default_rng(int(body["seed"]))
        t = rng.uniform(body["t_min"], body["t_max"], b).astype(np.float32)
        version = 99 if self.mode == "version_mismatch" else PROTOCOL_VERSION
        return {
            "protocol_version": version,
            "tensors": {
                "grad_latent": encode_tensor(grad),
                "t_sampled": encode_tensor(t),
                "w_t": encode_tensor(1.0 - t),
            },
            "provider": "stub",
        }

    def _encode_body(self, body: dict) -> dict:
        images = decode_tensor(body["tensors"]["images"], "images")
        b, _, h, w = images.shape
        down = images.reshape(b, 3, h // 8, 8, w // 8, 8).mean(axis=(3, 5))
        latents = np.concatenate([down, down.mean(axis=1, keepdims=True)], axis=1)
        if self.mode == "wrong_shape":
            latents = latents[:, :, :-1]
        return {
            "protocol_version": PROTOCOL_VERSION,
            "tensors": {"latents": encode_tensor(latents.astype(np.float32))},
        }

    def close(self):
        self.server.shutdown()
        self.server.server_close()


