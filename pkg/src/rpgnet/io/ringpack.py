"""Ring-pack: seeds + config + ring payloads in one checksummed file.

Layout (all integers little-endian)::

    b"RPG1" | u32 version | u32 config_len | config JSON (UTF-8)
    | payloads (float32 LE, in the order listed by config["payloads"])
    | u32 CRC32 of every preceding byte

Index arrays are never stored: plans are rebuilt from their two seeds and
sign vectors from their per-layer seed.
"""

import json
import struct
import zlib

import numpy as np

from ..config import ModelConfig
from ..nn.model import Network
from ..ring import GeneratorBinding, IndexPlan, ParameterRing, RingGenerator, \
    build_index_plan

MAGIC = b"RPG1"
VERSION = 1
_HEADER = struct.Struct("<4sII")
_F32 = np.dtype("<f4")


class PackError(ValueError):
    """Malformed ring-pack."""


class IntegrityError(PackError):
    pass


class VersionError(PackError):
    pass


def canonical_json(obj):
    return json.dumps(obj, sort_keys=True, separators=(",", ":"),
                      allow_nan=False).encode("utf-8")


def _payloads(model):
    items = []
    if model.generator is not None:
        for ring in model.generator.rings:
            items.append((f"ring/{ring.id}", ring.values))
        for rid, mask in sorted(model.generator.masks.items()):
            items.append((f"mask/{rid}", mask.astype(np.float32)))
    for name, p in model.weights.items():
        items.append((f"weight/{name}", p.data))
    for name, st in model.bn.items():
        items.append((f"bn/{name}/gamma", st.gamma.data))
        items.append((f"bn/{name}/beta", st.beta.data))
        items.append((f"bn/{name}/running_mean", st.running_mean))
        items.append((f"bn/{name}/running_var", st.running_var))
    for name, p in model.biases.items():
        items.append((f"bias/{name}", p.data))
    return items


def pack(model, meta=None):
    """Serialize a :class:`Network` (float32 payloads) to bytes."""
    gen = model.generator
    config = {
        "model": model.config.to_dict(),
        "meta": meta or {},
        "rings": [],
        "plans": [],
        "bindings": [],
    }
    if gen is not None:
        config["rings"] = [{"id": r.id, "size": r.size, "init_seed": r.init_seed}
                           for r in gen.rings]
        for plan in gen.plans:
            layers = sorted(plan.offsets, key=plan.offsets.get)
            config["plans"].append({
                "ring_id": plan.ring_id,
                "shuffle_seed": plan.shuffle_seed,
                "extra_seed": plan.extra_seed,
                "layers": layers,
                "sizes": [gen.bindings[n].length for n in layers],
            })
        config["bindings"] = [
            {"layer_id": b.layer_id, "ring_id": b.ring_id, "offset": b.offset,
             "length": b.length, "sign_seed": b.sign_seed, "scale": b.scale,
             "perm_on": b.perm_on, "sign_on": b.sign_on}
            for b in gen.bindings.values()
        ]
    items = _payloads(model)
    config["payloads"] = [[name, int(arr.size)] for name, arr in items]
    text = canonical_json(config)
    body = bytearray(_HEADER.pack(MAGIC, VERSION, len(text)))
    body += text
    for _, arr in items:
        body += np.ascontiguousarray(arr, dtype=_F32).tobytes()
    body += struct.pack("<I", zlib.crc32(body))
    return bytes(body)


def _read(data):
    if len(data) < _HEADER.size + 4:
        raise PackError("file too short for a ring-pack")
    magic, version, clen = _HEADER.unpack_from(data)
    if magic != MAGIC:
        raise PackError(f"bad magic {magic!r}")
    (crc,) = struct.unpack_from("<I", data, len(data) - 4)
    if zlib.crc32(data[:-4]) != crc:
        raise IntegrityError("checksum mismatch")
    if version != VERSION:
        raise VersionError(f"unsupported ring-pack version {version}")
    start = _HEADER.size
    if start + clen > len(data) - 4:
        raise PackError("config length exceeds file")
    try:
        config = json.loads(data[start:start + clen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise PackError(f"config is not valid JSON: {e}") from None
    pos = start + clen
    payloads = {}
    for name, n in config["payloads"]:
        end = pos + 4 * n
        if end > len(data) - 4:
            raise PackError(f"payload {name} runs past end of file")
        payloads[name] = np.frombuffer(data[pos:end], dtype=_F32).astype(np.float32)
        pos = end
    if pos != len(data) - 4:
        raise PackError("trailing bytes after payloads")
    return config, payloads


def unpack(data):
    """Rebuild a float32 :class:`Network` and its metadata from ring-pack bytes.

    Returns ``(model, meta)``.
    """
    config, payloads = _read(bytes(data))
    try:
        return _rebuild(config, payloads)
    except (KeyError, TypeError, ValueError) as e:
        if isinstance(e, PackError):
            raise
        raise PackError(f"inconsistent ring-pack contents: {e}") from None


def _rebuild(config, payloads):
    model_cfg = ModelConfig.from_dict(config["model"])
    generator = None
    if config["rings"]:
        rings = [ParameterRing(r["id"], r["size"], payloads[f"ring/{r['id']}"].copy(),
                               r["init_seed"]) for r in config["rings"]]
        plans = []
        for p in config["plans"]:
            plan = build_index_plan(rings[p["ring_id"]].size, p["sizes"],
                                    p["shuffle_seed"], p["extra_seed"],
                                    p["layers"], ring_id=p["ring_id"])
            plans.append(plan)
        bindings = {}
        for b in config["bindings"]:
            binding = GeneratorBinding(**b)
            if plans[binding.ring_id].offsets.get(binding.layer_id) != binding.offset:
                raise PackError(f"{binding.layer_id}: stored offset disagrees with plan")
            bindings[binding.layer_id] = binding
        masks = {}
        for r in rings:
            m = payloads.get(f"mask/{r.id}")
            if m is not None:
                masks[r.id] = m.astype(bool)
        generator = RingGenerator(rings, plans, bindings, masks)
    weights = {k[len("weight/"):]: v for k, v in payloads.items()
               if k.startswith("weight/")}
    model = Network(model_cfg, generator, weights, dtype=np.float32)
    for name, st in model.bn.items():
        st.gamma.data[:] = payloads[f"bn/{name}/gamma"]
        st.beta.data[:] = payloads[f"bn/{name}/beta"]
        st.running_mean[:] = payloads[f"bn/{name}/running_mean"]
        st.running_var[:] = payloads[f"bn/{name}/running_var"]
    for name, p in model.biases.items():
        p.data[:] = payloads[f"bias/{name}"]
    return model, config["meta"]


def save(path, model, meta=None):
    data = pack(model, meta)
    with open(path, "wb") as fh:
        fh.write(data)
    return len(data)


def load(path):
    with open(path, "rb") as fh:
        return unpack(fh.read())
