"""P6 PPM codec and the length-prefixed corpus container.

All images are 8-bit binary PPM; generator output lies exactly on the 8-bit
grid so write -> read round trips are lossless. The corpus file is a magic
header plus length-prefixed records; each record is a JSON header (task kind,
instruction, run-length-encoded edit mask, scene metadata) followed by two
length-prefixed PPM payloads (condition, target). Byte layout is documented
in docs/formats.md.
"""

from __future__ import annotations

import json
import struct

import numpy as np

from .data import TrainingExample

CORPUS_MAGIC = b"AREDITC1"


class FormatError(Exception):
    pass


def ppm_encode(img):
    """Image floats in [0,1] -> binary P6 bytes, values round(255*x)."""
    img = np.asarray(img, dtype=np.float64)
    if img.ndim != 3 or img.shape[2] != 3:
        raise FormatError(f"expected (H,W,3) image, got {img.shape}")
    h, w, _ = img.shape
    raster = np.rint(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8)
    return b"P6\n%d %d\n255\n" % (w, h) + raster.tobytes()


def ppm_decode(blob):
    """Binary P6 bytes -> float image in [0,1] (x = v/255)."""
    if not blob.startswith(b"P6"):
        raise FormatError("not a P6 PPM")
    fields = []
    pos = 2
    while len(fields) < 3:
        while pos < len(blob) and blob[pos:pos + 1].isspace():
            pos += 1
        if blob[pos:pos + 1] == b"#":  # comment line
            pos = blob.index(b"\n", pos) + 1
            continue
        start = pos
        while pos < len(blob) and not blob[pos:pos + 1].isspace():
            pos += 1
        fields.append(int(blob[start:pos]))
    pos += 1  # single whitespace after maxval
    w, h, maxval = fields
    if maxval != 255:
        raise FormatError(f"unsupported maxval {maxval}")
    raster = np.frombuffer(blob, dtype=np.uint8, offset=pos,
                           count=h * w * 3).reshape(h, w, 3)
    return raster.astype(np.float64) / 255.0


def ppm_write(path, img):
    with open(path, "wb") as f:
        f.write(ppm_encode(img))


def ppm_read(path):
    with open(path, "rb") as f:
        return ppm_decode(f.read())


def mask_to_rle(mask):
    """Row-major run lengths, first run counts False pixels (may be 0)."""
    flat = np.asarray(mask, dtype=bool).reshape(-1)
    runs = []
    current, count = False, 0
    for v in flat:
        if v == current:
            count += 1
        else:
            runs.append(count)
            current, count = v, 1
    runs.append(count)
    return runs


def rle_to_mask(runs, shape):
    flat = np.zeros(int(np.prod(shape)), dtype=bool)
    pos, value = 0, False
    for run in runs:
        if value:
            flat[pos:pos + run] = True
        pos += run
        value = not value
    if pos != flat.size:
        raise FormatError("mask run lengths do not cover the mask")
    return flat.reshape(shape)


def _frame(payload):
    return struct.pack("<I", len(payload)) + payload


def encode_example(ex):
    header = json.dumps({
        "kind": ex.kind,
        "instruction": ex.instruction,
        "mask_rle": mask_to_rle(ex.edit_mask),
        "mask_shape": list(ex.edit_mask.shape),
        "meta": ex.meta,
    }, sort_keys=True, separators=(",", ":")).encode()
    body = _frame(header) + _frame(ppm_encode(ex.condition)) \
        + _frame(ppm_encode(ex.target))
    return _frame(body)


def decode_example(body):
    def take(buf, pos):
        (n,) = struct.unpack_from("<I", buf, pos)
        return buf[pos + 4:pos + 4 + n], pos + 4 + n

    header_raw, pos = take(body, 0)
    cond_raw, pos = take(body, pos)
    target_raw, pos = take(body, pos)
    header = json.loads(header_raw.decode())
    return TrainingExample(
        condition=ppm_decode(cond_raw),
        kind=header["kind"],
        instruction=header["instruction"],
        target=ppm_decode(target_raw),
        edit_mask=rle_to_mask(header["mask_rle"], tuple(header["mask_shape"])),
        meta=header["meta"],
    )


def write_corpus(path, examples):
    with open(path, "wb") as f:
        f.write(CORPUS_MAGIC)
        f.write(struct.pack("<I", len(examples)))
        for ex in examples:
            f.write(encode_example(ex))


def read_corpus(path):
    with open(path, "rb") as f:
        raw = f.read()
    if raw[:8] != CORPUS_MAGIC:
        raise FormatError(f"{path}: not a corpus file")
    (count,) = struct.unpack_from("<I", raw, 8)
    pos = 12
    out = []
    for _ in range(count):
        (n,) = struct.unpack_from("<I", raw, pos)
        out.append(decode_example(raw[pos + 4:pos + 4 + n]))
        pos += 4 + n
    if pos != len(raw):
        raise FormatError(f"{path}: trailing bytes after last record")
    return out
