"""Binary containers for checkpoints (NFPC) and demonstration datasets (NFPD).

Layout shared by both::

    magic (4 bytes) | version u32 LE | header length u32 LE | UTF-8 JSON header | payload

Checkpoint payloads are float32 LE arrays concatenated in the order listed in
``header["arrays"]``.  Dataset payloads hold a u32 LE length table followed by
each episode's float32 observations and then its actions.
"""
from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field

import numpy as np

from .diffusion import EpsilonNet, NoiseSchedule
from .envs import Episode
from .flow import FlowConfig, FlowModel
from .policy import WindowSpec

CKPT_MAGIC = b"NFPC"
DATA_MAGIC = b"NFPD"
VERSION = 1
_F32 = np.dtype("<f4")
_U32 = np.dtype("<u4")


class FormatError(ValueError):
    pass


def _dump_header(header: dict) -> bytes:
    return json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")


def pack(magic: bytes, header: dict, payload: bytes) -> bytes:
    h = _dump_header(header)
    return magic + struct.pack("<II", VERSION, len(h)) + h + payload


def unpack(blob: bytes, magic: bytes):
    if len(blob) < 12 or blob[:4] != magic:
        raise FormatError(f"bad magic: expected {magic!r}, got {blob[:4]!r}")
    version, hlen = struct.unpack("<II", blob[4:12])
    if version != VERSION:
        raise FormatError(f"unsupported format version {version}")
    if 12 + hlen > len(blob):
        raise FormatError("truncated header")
    header = json.loads(blob[12:12 + hlen].decode("utf-8"))
    return header, blob[12 + hlen:]


def _write(path, blob: bytes):
    with open(path, "wb") as f:
        f.write(blob)


def _read(path) -> bytes:
    with open(path, "rb") as f:
        return f.read()


# --- checkpoints -----------------------------------------------------------------

@dataclass
class Checkpoint:
    kind: str  # "nf" | "ddpm" | "oracle"
    task: str
    window: WindowSpec
    obs_dim: int
    act_dim: int
    model: object = None
    schedule: NoiseSchedule | None = None
    train: dict = field(default_factory=dict)
    seed: int = 0

    @property
    def cond_dim(self) -> int:
        return self.window.n_obs * self.obs_dim

    @property
    def action_window_dim(self) -> int:
        return self.window.n_act * self.act_dim


def _named_arrays(ckpt: Checkpoint) -> list:
    m = ckpt.model
    if ckpt.kind == "oracle":
        return []
    arrays = [(f"p{i}", p.data) for i, p in enumerate(m.parameters())]
    arrays += [("x_mean", m.x_mean), ("x_std", m.x_std), ("c_mean", m.c_mean), ("c_std", m.c_std)]
    return arrays


def checkpoint_bytes(ckpt: Checkpoint) -> bytes:
    arrays = _named_arrays(ckpt)
    header = {
        "kind": ckpt.kind,
        "task": ckpt.task,
        "window": asdict(ckpt.window),
        "obs_dim": ckpt.obs_dim,
        "act_dim": ckpt.act_dim,
        "train": ckpt.train,
        "seed": ckpt.seed,
        "arrays": [{"name": n, "shape": list(np.shape(a))} for n, a in arrays],
    }
    if ckpt.kind == "nf":
        header["model"] = asdict(ckpt.model.config)
    elif ckpt.kind == "ddpm":
        net = ckpt.model
        header["model"] = {"dim": net.dim, "cond_dim": net.cond_dim, "hidden": net.hidden,
                           "embed_dim": net.embed_dim, "n_steps": ckpt.schedule.n_steps, "seed": ckpt.seed}
    payload = b"".join(np.ascontiguousarray(a, dtype=_F32).tobytes() for _, a in arrays)
    return pack(CKPT_MAGIC, header, payload)


def save_checkpoint(path, ckpt: Checkpoint):
    _write(path, checkpoint_bytes(ckpt))


def checkpoint_from_bytes(blob: bytes) -> Checkpoint:
    header, payload = unpack(blob, CKPT_MAGIC)
    specs = header["arrays"]
    sizes = [int(np.prod(s["shape"], dtype=np.int64)) for s in specs]
    if len(payload) != 4 * sum(sizes):
        raise FormatError(f"payload is {len(payload)} bytes, header declares {4 * sum(sizes)}")
    flat = np.frombuffer(payload, dtype=_F32)
    arrays, off = [], 0
    for s, n in zip(specs, sizes):
        arrays.append(flat[off:off + n].reshape(s["shape"]).astype(np.float32))
        off += n
    kind = header["kind"]
    ckpt = Checkpoint(kind, header["task"], WindowSpec(**header["window"]), header["obs_dim"], header["act_dim"],
                      train=header.get("train", {}), seed=header.get("seed", 0))
    if kind == "oracle":
        return ckpt
    if kind == "nf":
        model = FlowModel(FlowConfig(**header["model"]))
    elif kind == "ddpm":
        mh = header["model"]
        model = EpsilonNet(mh["dim"], mh["cond_dim"], hidden=mh["hidden"], n_steps=mh["n_steps"],
                           seed=mh["seed"], embed_dim=mh["embed_dim"])
        ckpt.schedule = NoiseSchedule.cosine(mh["n_steps"])
    else:
        raise FormatError(f"unknown model kind {kind!r}")
    n_params = len(model.parameters())
    if len(arrays) != n_params + 4:
        raise FormatError(f"expected {n_params + 4} arrays, found {len(arrays)}")
    model.astype(np.float32)
    model.load_arrays(arrays[:n_params])
    model.x_mean, model.x_std, model.c_mean, model.c_std = arrays[n_params:]
    ckpt.model = model
    return ckpt


def load_checkpoint(path) -> Checkpoint:
    return checkpoint_from_bytes(_read(path))


# --- datasets ----------------------------------------------------------------------

def dataset_bytes(episodes, seed: int = 0) -> bytes:
    if not episodes:
        raise ValueError("cannot serialize an empty dataset")
    first = episodes[0]
    header = {
        "task": first.task,
        "n_episodes": len(episodes),
        "obs_dim": int(first.obs.shape[1]),
        "act_dim": int(first.actions.shape[1]),
        "seed": seed,
        "episode_seeds": [int(e.seed) for e in episodes],
        "modes": [int(e.mode) for e in episodes],
    }
    lengths = np.array([len(e) for e in episodes], dtype=_U32)
    parts = [lengths.tobytes()]
    for e in episodes:
        parts.append(np.ascontiguousarray(e.obs, dtype=_F32).tobytes())
        parts.append(np.ascontiguousarray(e.actions, dtype=_F32).tobytes())
    return pack(DATA_MAGIC, header, b"".join(parts))


def save_dataset(path, episodes, seed: int = 0):
    _write(path, dataset_bytes(episodes, seed))


def dataset_from_bytes(blob: bytes):
    """Returns ``(episodes, header)``."""
    header, payload = unpack(blob, DATA_MAGIC)
    n, od, ad = header["n_episodes"], header["obs_dim"], header["act_dim"]
    if len(payload) < 4 * n:
        raise FormatError("truncated length table")
    lengths = np.frombuffer(payload[:4 * n], dtype=_U32)
    expected = 4 * n + 4 * int(lengths.sum()) * (od + ad)
    if len(payload) != expected:
        raise FormatError(f"payload is {len(payload)} bytes, length table implies {expected}")
    flat = np.frombuffer(payload[4 * n:], dtype=_F32)
    episodes, off = [], 0
    seeds, modes = header.get("episode_seeds", [0] * n), header.get("modes", [0] * n)
    for i, t in enumerate(lengths.tolist()):
        obs = flat[off:off + t * od].reshape(t, od).astype(np.float32)
        off += t * od
        act = flat[off:off + t * ad].reshape(t, ad).astype(np.float32)
        off += t * ad
        episodes.append(Episode(obs, act, header["task"], seeds[i], modes[i]))
    return episodes, header


def load_dataset(path):
    return dataset_from_bytes(_read(path))
