"""Binary checkpoint container.

Layout, little-endian::

    magic      8 bytes   b"ULMCKPT\\0"
    version    u32
    hdr_len    u64
    header     hdr_len bytes of UTF-8 JSON: config echo, step, meta, optimizer
               hyperparameters, tensor table [{name, dtype, shape, offset, nbytes}],
               rng blob {offset, nbytes}
    payload    raw tensor bytes followed by the rng blob (offsets relative to payload start)
    crc32      u32 over every preceding byte
"""

from __future__ import annotations

import json
import struct
import zlib
from dataclasses import asdict
from pathlib import Path

import numpy as np
import torch

from .model import ModelConfig, ModelState, OptimConfig, SpeechLM, make_optimizer

MAGIC = b"ULMCKPT\x00"
VERSION = 1
_PREFIX = struct.Struct("<8sIQ")


class CheckpointError(Exception):
    code = 40


class CheckpointFormatError(CheckpointError):
    code = 41


class CheckpointVersionError(CheckpointError):
    code = 42


class CheckpointTruncatedError(CheckpointError):
    code = 43


class CheckpointChecksumError(CheckpointError):
    code = 44


def _np(t: torch.Tensor) -> np.ndarray:
    a = t.detach().cpu().contiguous().numpy()
    return a.astype(a.dtype.newbyteorder("<"), copy=False)


def _tensor_table(state: ModelState) -> dict[str, np.ndarray]:
    out = {f"model/{k}": _np(v) for k, v in state.model.state_dict().items()}
    opt = state.optimizer.state_dict()
    for idx, st in opt["state"].items():
        for key, val in st.items():
            out[f"optim/{idx}/{key}"] = _np(val) if torch.is_tensor(val) else np.asarray(val)
    for k, v in state.extras.items():
        out[f"extra/{k}"] = np.ascontiguousarray(v)
    return out


def _rng_blob(state: ModelState) -> bytes:
    return json.dumps({
        "numpy": state.rng.bit_generator.state,
        "torch": torch.get_rng_state().numpy().tolist(),
    }).encode()


def save_checkpoint(state: ModelState, path: str | Path) -> None:
    tensors = _tensor_table(state)
    table = []
    chunks = []
    offset = 0
    for name, arr in tensors.items():
        raw = arr.tobytes()
        table.append({"name": name, "dtype": arr.dtype.str, "shape": list(arr.shape),
                      "offset": offset, "nbytes": len(raw)})
        chunks.append(raw)
        offset += len(raw)
    rng = _rng_blob(state)
    opt = state.optimizer.state_dict()
    header = {
        "config": state.cfg.to_dict(),
        "optim_cfg": asdict(state.optim_cfg),
        "param_groups": opt["param_groups"],
        "step": state.step,
        "meta": state.meta,
        "tensors": table,
        "rng": {"offset": offset, "nbytes": len(rng)},
    }
    hdr = json.dumps(header, sort_keys=True).encode()
    body = _PREFIX.pack(MAGIC, VERSION, len(hdr)) + hdr + b"".join(chunks) + rng
    data = body + struct.pack("<I", zlib.crc32(body) & 0xFFFFFFFF)
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(data)
    tmp.replace(path)


def read_container(path: str | Path) -> tuple[dict, memoryview]:
    """Validate and split a checkpoint file into (header, payload)."""
    data = Path(path).read_bytes()
    if len(data) < _PREFIX.size:
        raise CheckpointTruncatedError(f"{path}: {len(data)} bytes is shorter than the fixed prefix")
    magic, version, hdr_len = _PREFIX.unpack_from(data)
    if magic != MAGIC:
        raise CheckpointFormatError(f"{path}: bad magic {magic!r}")
    if version != VERSION:
        raise CheckpointVersionError(f"{path}: format version {version}, expected {VERSION}")
    hdr_end = _PREFIX.size + hdr_len
    if len(data) < hdr_end + 4:
        raise CheckpointTruncatedError(f"{path}: truncated inside header")
    try:
        header = json.loads(data[_PREFIX.size:hdr_end])
        need = header["rng"]["offset"] + header["rng"]["nbytes"]
    except (ValueError, KeyError) as e:
        # the CRC decides whether this is corruption or a malformed writer
        if zlib.crc32(data[:-4]) & 0xFFFFFFFF != struct.unpack("<I", data[-4:])[0]:
            raise CheckpointChecksumError(f"{path}: CRC mismatch") from e
        raise CheckpointFormatError(f"{path}: unreadable header") from e
    if len(data) < hdr_end + need + 4:
        raise CheckpointTruncatedError(
            f"{path}: {len(data)} bytes, header declares {hdr_end + need + 4}")
    body = data[:-4]
    (crc,) = struct.unpack("<I", data[-4:])
    if len(data) != hdr_end + need + 4 or zlib.crc32(body) & 0xFFFFFFFF != crc:
        raise CheckpointChecksumError(f"{path}: CRC mismatch")
    return header, memoryview(data)[hdr_end : hdr_end + need]


def load_checkpoint(path: str | Path) -> ModelState:
    header, payload = read_container(path)
    arrays = {}
    for ent in header["tensors"]:
        raw = payload[ent["offset"] : ent["offset"] + ent["nbytes"]]
        arrays[ent["name"]] = np.frombuffer(raw, dtype=np.dtype(ent["dtype"])).reshape(ent["shape"]).copy()

    cfg = ModelConfig(**header["config"])
    oc = header["optim_cfg"]
    oc["betas"] = tuple(oc["betas"])
    optim_cfg = OptimConfig(**oc)
    model = SpeechLM(cfg)
    sd = {k[len("model/"):]: torch.from_numpy(v) for k, v in arrays.items() if k.startswith("model/")}
    model.load_state_dict(sd, strict=True)
    opt = make_optimizer(model, optim_cfg)
    opt_state: dict = {}
    for k, v in arrays.items():
        if k.startswith("optim/"):
            _, idx, key = k.split("/", 2)
            opt_state.setdefault(int(idx), {})[key] = torch.from_numpy(v)
    groups = [dict(g, betas=tuple(g["betas"])) if "betas" in g else g
              for g in header["param_groups"]]
    opt.load_state_dict({"state": opt_state, "param_groups": groups})
    extras = {k[len("extra/"):]: v for k, v in arrays.items() if k.startswith("extra/")}

    rng_raw = bytes(payload[header["rng"]["offset"] : header["rng"]["offset"] + header["rng"]["nbytes"]])
    rng_state = json.loads(rng_raw)
    rng = np.random.default_rng()
    rng.bit_generator.state = rng_state["numpy"]
    torch.set_rng_state(torch.tensor(rng_state["torch"], dtype=torch.uint8))
    return ModelState(cfg, model, opt, optim_cfg, rng, header["step"], extras, header["meta"])


def checkpoint_header(path: str | Path) -> dict:
    return read_container(path)[0]
