"""Small reverse-mode neural network kernel on numpy.

Parameters of a ``Network`` live in one flat vector; layers hold views into it.
``forward`` returns the output and a ``Tape`` that ``backward`` consumes.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .game import DomainError

CHECKPOINT_VERSION = 1


def sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


class Linear:
    def __init__(self, n_in: int, n_out: int):
        self.n_in, self.n_out = n_in, n_out
        self.shapes = [("W", (n_in, n_out)), ("b", (n_out,))]

    def init(self, rng, views):
        a = np.sqrt(6.0 / (self.n_in + self.n_out))
        views["W"][...] = rng.uniform(-a, a, (self.n_in, self.n_out))
        views["b"][...] = 0.0

    def forward(self, p, x, train, rng):
        return x @ p["W"] + p["b"], x

    def backward(self, p, g, cache, dy):
        x = cache
        g["W"] += x.T @ dy
        g["b"] += dy.sum(axis=0)
        return dy @ p["W"].T


class ReLU:
    shapes: list = []

    def forward(self, p, x, train, rng):
        return np.maximum(x, 0.0), x > 0

    def backward(self, p, g, cache, dy):
        return dy * cache


class Sigmoid:
    shapes: list = []

    def forward(self, p, x, train, rng):
        y = sigmoid(x)
        return y, y

    def backward(self, p, g, cache, dy):
        return dy * cache * (1.0 - cache)


class Dropout:
    shapes: list = []

    def __init__(self, rate: float):
        self.rate = rate

    def forward(self, p, x, train, rng):
        if not train or self.rate == 0.0:
            return x, None
        keep = (rng.random(x.shape) >= self.rate) / (1.0 - self.rate)
        return x * keep, keep

    def backward(self, p, g, cache, dy):
        return dy if cache is None else dy * cache


class Flatten:
    """``(B, L, N, d)`` -> ``(B, L*N*d)``."""

    shapes: list = []

    def forward(self, p, x, train, rng):
        return x.reshape(x.shape[0], -1), x.shape

    def backward(self, p, g, cache, dy):
        return dy.reshape(cache)


class GRUEncoder:
    """One GRU shared across agents; ``(B, L, N, d)`` -> concatenated final states ``(B, N*H)``."""

    def __init__(self, d_in: int, hidden: int):
        self.d, self.h = d_in, hidden
        H = hidden
        self.shapes = [("Wx", (d_in, 3 * H)), ("Wh", (H, 3 * H)), ("bx", (3 * H,)), ("bh", (3 * H,))]

    def init(self, rng, views):
        H = self.h
        a = np.sqrt(6.0 / (self.d + H))
        views["Wx"][...] = rng.uniform(-a, a, (self.d, 3 * H))
        a = np.sqrt(6.0 / (2 * H))
        views["Wh"][...] = rng.uniform(-a, a, (H, 3 * H))
        views["bx"][...] = 0.0
        views["bh"][...] = 0.0

    def forward(self, p, x, train, rng):
        B, L, N, d = x.shape
        H = self.h
        xs = x.transpose(1, 0, 2, 3).reshape(L, B * N, d)
        h = np.zeros((B * N, H))
        steps = []
        for t in range(L):
            gx = xs[t] @ p["Wx"] + p["bx"]
            gh = h @ p["Wh"] + p["bh"]
            r = sigmoid(gx[:, :H] + gh[:, :H])
            z = sigmoid(gx[:, H : 2 * H] + gh[:, H : 2 * H])
            n = np.tanh(gx[:, 2 * H :] + r * gh[:, 2 * H :])
            h_new = (1.0 - z) * n + z * h
            steps.append((xs[t], h, r, z, n, gh[:, 2 * H :]))
            h = h_new
        return h.reshape(B, N * H), (steps, x.shape)

    def backward(self, p, g, cache, dy):
        steps, shape = cache
        B, L, N, d = shape
        H = self.h
        dh = dy.reshape(B * N, H)
        dxs = np.zeros((L, B * N, d))
        for t in range(L - 1, -1, -1):
            x_t, h, r, z, n, ghn = steps[t]
            dn = dh * (1.0 - z)
            dz = dh * (h - n)
            dh_prev = dh * z
            da_n = dn * (1.0 - n * n)
            da_z = dz * z * (1.0 - z)
            dr = da_n * ghn
            da_r = dr * r * (1.0 - r)
            dgx = np.concatenate([da_r, da_z, da_n], axis=1)
            dgh = np.concatenate([da_r, da_z, da_n * r], axis=1)
            g["Wx"] += x_t.T @ dgx
            g["bx"] += dgx.sum(axis=0)
            g["Wh"] += h.T @ dgh
            g["bh"] += dgh.sum(axis=0)
            dxs[t] = dgx @ p["Wx"].T
            dh = dh_prev + dgh @ p["Wh"].T
        return dxs.reshape(L, B, N, d).transpose(1, 0, 2, 3)


@dataclass(frozen=True)
class NetworkSpec:
    """Architecture of a selection (``psn``) or goal-inference (``gin``) network."""

    kind: str  # "psn" | "gin"
    n_agents: int
    obs_len: int = 10
    obs_dim: int = 4  # 4 = full state, 2 = positions only
    encoder: str = "flatten"  # "flatten" | "gru"
    hidden: tuple = (256, 128, 32)
    dropout: float = 0.3
    gru_hidden: int = 64
    frame: str = "world"  # GIN only: "agent" = positions and goals relative to each agent's last position

    def __post_init__(self):
        if self.kind not in ("psn", "gin"):
            raise DomainError(f"unknown network kind {self.kind!r}")
        if self.frame not in ("world", "agent"):
            raise DomainError(f"unknown frame {self.frame!r}")
        if self.encoder not in ("flatten", "gru"):
            raise DomainError(f"unknown encoder {self.encoder!r}")
        if self.obs_dim not in (2, 4):
            raise DomainError("obs_dim must be 2 or 4")
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))

    @property
    def input_size(self) -> int:
        return self.obs_len * self.n_agents * self.obs_dim

    @property
    def output_size(self) -> int:
        return self.n_agents - 1 if self.kind == "psn" else 2 * self.n_agents

    @property
    def observation_kind(self) -> str:
        return "full" if self.obs_dim == 4 else "partial"


def build_layers(spec: NetworkSpec) -> list:
    layers: list = []
    if spec.encoder == "flatten":
        layers.append(Flatten())
        width = spec.input_size
    else:
        layers.append(GRUEncoder(spec.obs_dim, spec.gru_hidden))
        width = spec.n_agents * spec.gru_hidden
    for i, h in enumerate(spec.hidden):
        layers += [Linear(width, h), ReLU()]
        if i < len(spec.hidden) - 1 and spec.dropout > 0:
            layers.append(Dropout(spec.dropout))
        width = h
    layers.append(Linear(width, spec.output_size))
    if spec.kind == "psn":
        layers.append(Sigmoid())
    return layers


@dataclass
class Tape:
    caches: list
    version: int
    network_id: int
    batch_shape: tuple


class Network:
    def __init__(self, spec: NetworkSpec, seed: int = 0, params: np.ndarray | None = None):
        self.spec = spec
        self.layers = build_layers(spec)
        sizes = [int(np.prod(s)) for layer in self.layers for _, s in layer.shapes]
        self.params = np.zeros(sum(sizes))
        self._views = []
        off = 0
        for layer in self.layers:
            views = {}
            for name, shape in layer.shapes:
                n = int(np.prod(shape))
                views[name] = self.params[off : off + n].reshape(shape)
                off += n
            self._views.append(views)
        self.version = 0
        if params is not None:
            self.set_params(params)
        else:
            rng = np.random.default_rng(seed)
            for layer, views in zip(self.layers, self._views):
                if layer.shapes:
                    layer.init(rng, views)

    @property
    def n_params(self) -> int:
        return self.params.size

    def set_params(self, flat: np.ndarray) -> None:
        flat = np.asarray(flat, dtype=float)
        if flat.shape != self.params.shape:
            raise DomainError(f"expected {self.params.size} parameters, got {flat.size}")
        self.params[...] = flat
        self.version += 1

    def _check_input(self, x: np.ndarray) -> np.ndarray:
        s = self.spec
        x = np.asarray(x, dtype=float)
        if x.ndim == 3:
            x = x[None]
        if x.ndim != 4 or x.shape[1:] != (s.obs_len, s.n_agents, s.obs_dim):
            raise DomainError(
                f"observation shape {x.shape[1:]} does not match network input "
                f"({s.obs_len}, {s.n_agents}, {s.obs_dim}) = {s.input_size} values"
            )
        return x

    def forward(self, x: np.ndarray, train: bool = False, seed: int | None = None):
        """Batch forward pass on ``(B, L, N, d)`` (or a single ``(L, N, d)``) input."""
        x = self._check_input(x)
        rng = np.random.default_rng(seed) if train else None
        caches = []
        h = x
        for layer, views in zip(self.layers, self._views):
            h, c = layer.forward(views, h, train, rng)
            caches.append(c)
        return h, Tape(caches, self.version, id(self), h.shape)

    def __call__(self, x: np.ndarray) -> np.ndarray:
        return self.forward(x, train=False)[0]

    def backward(self, tape: Tape, dout: np.ndarray) -> np.ndarray:
        """Flat gradient of the loss with respect to all parameters."""
        if tape.network_id != id(self) or tape.version != self.version:
            raise DomainError("tape is stale or belongs to another network")
        dout = np.asarray(dout, dtype=float)
        if dout.shape != tape.batch_shape:
            raise DomainError(f"output gradient shape {dout.shape} != {tape.batch_shape}")
        grad = np.zeros_like(self.params)
        gviews = []
        off = 0
        for layer in self.layers:
            gv = {}
            for name, shape in layer.shapes:
                n = int(np.prod(shape))
                gv[name] = grad[off : off + n].reshape(shape)
                off += n
            gviews.append(gv)
        dy = dout
        for layer, views, gv, c in reversed(list(zip(self.layers, self._views, gviews, tape.caches))):
            dy = layer.backward(views, gv, c, dy)
        return grad

    # -- checkpoints --------------------------------------------------------

    def to_dict(self) -> dict:
        spec = asdict(self.spec)
        spec["hidden"] = list(spec["hidden"])
        return {
            "version": CHECKPOINT_VERSION,
            "spec": spec,
            "layer_shapes": [
                [name, list(shape)] for layer in self.layers for name, shape in layer.shapes
            ],
            "params": self.params.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Network":
        if d.get("version") != CHECKPOINT_VERSION:
            raise DomainError(f"unsupported checkpoint version {d.get('version')}")
        spec = NetworkSpec(**{**d["spec"], "hidden": tuple(d["spec"]["hidden"])})
        return cls(spec, params=np.array(d["params"], dtype=float))

    def save(self, path) -> None:
        path = Path(path)
        if path.suffix == ".bin":
            _save_binary(self, path)
        else:
            path.write_text(json.dumps(self.to_dict()) + "\n")

    @classmethod
    def load(cls, path) -> "Network":
        path = Path(path)
        if path.suffix == ".bin":
            return _load_binary(path)
        return cls.from_dict(json.loads(path.read_text()))


_MAGIC = b"PSNCKPT1"


def _save_binary(net: Network, path: Path) -> None:
    header = json.dumps({k: v for k, v in net.to_dict().items() if k != "params"}).encode()
    with open(path, "wb") as f:
        f.write(_MAGIC)
        f.write(np.uint64(len(header)).tobytes())
        f.write(header)
        f.write(net.params.astype("<f8").tobytes())


def _load_binary(path: Path) -> Network:
    raw = path.read_bytes()
    if raw[:8] != _MAGIC:
        raise DomainError(f"{path} is not a checkpoint file")
    n = int(np.frombuffer(raw[8:16], dtype="<u8")[0])
    meta = json.loads(raw[16 : 16 + n])
    meta["params"] = np.frombuffer(raw[16 + n :], dtype="<f8").tolist()
    return Network.from_dict(meta)
