"""Binary checkpoint container: canonical-JSON manifest + packed f32 payload.

File layout (little-endian):
    8 bytes   magic "AREDITCK"
    8 bytes   u64 manifest byte length
    N bytes   manifest, canonical JSON (sorted keys, compact separators)
    M bytes   payload: concatenated float32 arrays, contiguous, in manifest order

The manifest carries the format tag, model/train config echoes, the ordered
vocabulary, the teacher seed, the codebook section descriptor, per-tensor
descriptors (name, shape, offset, length) and a sha256 checksum of the
payload. Save->load->save is byte-identical.
"""

from __future__ import annotations

import hashlib
import json
import struct

import numpy as np

from .model import ModelConfig
from .tensor import Tensor
from .vq import Codebook

MAGIC = b"AREDITCK"
FORMAT_TAG = "editar-ckpt-v1"


class CheckpointError(Exception):
    pass


class CompatibilityError(CheckpointError):
    pass


def canonical_json(obj):
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def vocab_hash(words):
    return hashlib.sha256(canonical_json(list(words)).encode()).hexdigest()


def _pack(named_arrays):
    descs = []
    chunks = []
    offset = 0
    for name, arr in named_arrays:
        data = np.ascontiguousarray(arr, dtype="<f4").tobytes()
        descs.append({"name": name, "shape": list(np.asarray(arr).shape),
                      "dtype": "f32", "offset": offset, "length": len(data)})
        chunks.append(data)
        offset += len(data)
    payload = b"".join(chunks)
    return descs, payload


def save_checkpoint(path, *, model_config=None, train_config=None, params=None,
                    optimizer=None, codebook=None, vocabulary=None,
                    teacher_seed=None, step=0):
    """Write a container; any section may be omitted (e.g. codebook-only)."""
    named = []
    if params is not None:
        for name in sorted(params):
            named.append((name, params[name].data))
    if optimizer is not None:
        for name in sorted(optimizer.state):
            named.append((f"opt.m.{name}", optimizer.state[name].m))
            named.append((f"opt.v.{name}", optimizer.state[name].v))
    if codebook is not None:
        named.append(("codebook", codebook.entries))
    descs, payload = _pack(named)
    manifest = {
        "format": FORMAT_TAG,
        "step": int(step),
        "tensors": descs,
        "checksum": hashlib.sha256(payload).hexdigest(),
    }
    if model_config is not None:
        manifest["model_config"] = model_config.to_dict()
    if train_config is not None:
        manifest["train_config"] = dict(train_config)
    if vocabulary is not None:
        manifest["vocabulary"] = list(vocabulary)
        manifest["vocabulary_sha256"] = vocab_hash(vocabulary)
    if teacher_seed is not None:
        manifest["teacher_seed"] = int(teacher_seed)
    if codebook is not None:
        manifest["codebook"] = {"section": "codebook",
                                "patch_size": codebook.patch_size,
                                "k": codebook.k, "version": codebook.version}
    if optimizer is not None:
        manifest["optimizer_t"] = int(optimizer.t)
    blob = canonical_json(manifest).encode()
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<Q", len(blob)))
        f.write(blob)
        f.write(payload)


def load_checkpoint(path):
    """Read and verify a container. Returns a dict of sections."""
    with open(path, "rb") as f:
        raw = f.read()
    if raw[:8] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint container")
    try:
        (mlen,) = struct.unpack("<Q", raw[8:16])
        manifest = json.loads(raw[16:16 + mlen].decode())
    except (struct.error, UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointError(f"{path}: corrupt container header: {e}")
    if manifest.get("format") != FORMAT_TAG:
        raise CompatibilityError(
            f"unsupported checkpoint format {manifest.get('format')!r}")
    payload = raw[16 + mlen:]
    if hashlib.sha256(payload).hexdigest() != manifest["checksum"]:
        raise CheckpointError(f"{path}: payload checksum mismatch")
    arrays = {}
    expected_off = 0
    for d in manifest["tensors"]:
        if d["offset"] != expected_off:
            raise CheckpointError("tensor sections are not contiguous")
        buf = payload[d["offset"]:d["offset"] + d["length"]]
        arrays[d["name"]] = np.frombuffer(buf, dtype="<f4").reshape(d["shape"])
        expected_off += d["length"]

    out = {"manifest": manifest, "step": manifest.get("step", 0)}
    if "model_config" in manifest:
        out["model_config"] = ModelConfig.from_dict(manifest["model_config"])
    if "train_config" in manifest:
        out["train_config"] = manifest["train_config"]
    if "vocabulary" in manifest:
        out["vocabulary"] = manifest["vocabulary"]
    if "teacher_seed" in manifest:
        out["teacher_seed"] = manifest["teacher_seed"]
    if "codebook" in manifest:
        cb = manifest["codebook"]
        out["codebook"] = Codebook(arrays.pop("codebook").astype(np.float64),
                                   cb["patch_size"], cb.get("version", "v1"))
    params = {}
    opt_m, opt_v = {}, {}
    for name, arr in arrays.items():
        if name.startswith("opt.m."):
            opt_m[name[6:]] = arr.copy()
        elif name.startswith("opt.v."):
            opt_v[name[6:]] = arr.copy()
        else:
            params[name] = Tensor(arr.copy(), requires_grad=True, _check=False)
    if params:
        out["params"] = params
    if opt_m:
        out["opt_m"], out["opt_v"] = opt_m, opt_v
        out["opt_t"] = manifest.get("optimizer_t", 0)
    return out


def check_compatible(loaded, *, k_img=None, n_img=None, vocabulary=None,
                     teacher_seed=None):
    """Reject checkpoints that disagree with the requesting context."""
    cfg = loaded.get("model_config")
    if k_img is not None and cfg is not None and cfg.k_img != k_img:
        raise CompatibilityError(f"codebook size mismatch: {cfg.k_img} != {k_img}")
    if n_img is not None and cfg is not None and cfg.n_img != n_img:
        raise CompatibilityError(f"token count mismatch: {cfg.n_img} != {n_img}")
    if vocabulary is not None and "vocabulary" in loaded:
        if vocab_hash(vocabulary) != vocab_hash(loaded["vocabulary"]):
            raise CompatibilityError("vocabulary hash mismatch")
    if teacher_seed is not None and "teacher_seed" in loaded:
        if int(teacher_seed) != int(loaded["teacher_seed"]):
            raise CompatibilityError("teacher seed mismatch")
