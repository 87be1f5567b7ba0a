"""Self-describing quantised-tensor archive.

Layout: magic "QLAB" | u32 version | u64 header length | header JSON | payload.
The header carries per-tensor format descriptors (including codebook points,
which JSON round-trips exactly), section offsets/lengths and sha256 digests;
dequantisation needs no external state.

Sections per tensor:
  codes       packed ceil(log2 K)-bit fields, MSB first (uncompressed path)
  huffman     u32 K | K float32 probs | u64 payload bits | bit stream
  scales      packed (1+E+M)-bit sign/exponent/mantissa fields
  scale_signs packed 1-bit block-scale signs (signmax only)
  outliers    u64 count | (u32 position, u16 value) pairs
"""

from __future__ import annotations

import hashlib
import json
import math
import struct
from dataclasses import dataclass

import numpy as np

from . import bitpack, entropy
from .codebooks import Codebook, Variant
from .errors import CorruptionError, ParseError
from .scaling import (FormatSpec, QuantisedTensor, Rounding, ScaleFormat,
                      ScalingMode, bits_per_param)
from .transforms import OutlierSet

MAGIC = b"QLAB"
ARCHIVE_VERSION = 1


# -- scale field packing -----------------------------------------------------

def scale_to_fields(values: np.ndarray, fmt: ScaleFormat) -> np.ndarray:
    """Encode exactly-representable scale values as (1+E+M)-bit integers."""
    v = np.asarray(values, dtype=np.float64)
    sign = np.signbit(v).astype(np.uint64)
    a = np.abs(v)
    mant, exp = np.frexp(a)
    e_val = exp - 1
    emin = 1 - fmt.bias
    sub = (e_val < emin) | (a == 0)
    m_bits = fmt.mant_bits
    with np.errstate(invalid="ignore"):
        m_sub = np.rint(a * 2.0 ** (m_bits - emin)).astype(np.uint64)
        m_norm = np.rint((a * 2.0 ** (-e_val.astype(np.float64)) - 1.0) * (1 << m_bits)).astype(np.uint64)
    e_field = np.where(sub, 0, e_val + fmt.bias).astype(np.uint64)
    m_field = np.where(sub, m_sub, m_norm)
    if np.any(e_field >> fmt.exp_bits) or np.any(m_field >> m_bits if m_bits else m_field != 0):
        raise ValueError("scale value not representable in the format")
    return (sign << (fmt.exp_bits + m_bits)) | (e_field << m_bits) | m_field


def fields_to_scale(fields: np.ndarray, fmt: ScaleFormat) -> np.ndarray:
    """Inverse of scale_to_fields."""
    f = np.asarray(fields, dtype=np.uint64)
    m_bits = fmt.mant_bits
    sign = (f >> (fmt.exp_bits + m_bits)) & 1
    e_field = (f >> m_bits) & ((1 << fmt.exp_bits) - 1)
    m_field = (f & ((1 << m_bits) - 1)) if m_bits else np.zeros_like(f)
    emin = 1 - fmt.bias
    mag = np.where(
        e_field == 0,
        m_field.astype(np.float64) * 2.0 ** (emin - m_bits),
        (1.0 + m_field.astype(np.float64) / (1 << m_bits))
        * np.exp2(e_field.astype(np.float64) - fmt.bias),
    )
    return np.where(sign == 1, -mag, mag)


# -- header plumbing ---------------------------------------------------------

def _spec_to_json(spec: FormatSpec) -> dict:
    return {
        "scaling": spec.scaling.value,
        "block_size": spec.block_size,
        "scale_format": {
            "exp_bits": spec.scale_format.exp_bits,
            "mant_bits": spec.scale_format.mant_bits,
            "rounding": spec.scale_format.rounding.value,
        },
        "codebook": {
            "points": [float(p) for p in spec.codebook.points],
            "variant": spec.codebook.variant.value,
            "source": spec.codebook.source,
            "design_rms": spec.codebook.design_rms,
        },
    }


def _spec_from_json(doc: dict) -> FormatSpec:
    sf = doc["scale_format"]
    cb = doc["codebook"]
    return FormatSpec(
        scaling=ScalingMode(doc["scaling"]),
        codebook=Codebook(np.array(cb["points"], dtype=np.float64),
                          Variant(cb["variant"]), cb["source"], cb.get("design_rms")),
        scale_format=ScaleFormat(sf["exp_bits"], sf["mant_bits"], Rounding(sf["rounding"])),
        block_size=int(doc["block_size"]),
    )


def _digest(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


@dataclass
class _Section:
    name: str
    data: bytes
    meta: dict


def _tensor_sections(q: QuantisedTensor, compress: bool) -> tuple[list[_Section], dict]:
    sections: list[_Section] = []
    k = q.spec.codebook.k
    info: dict = {}
    if compress:
        model = entropy.estimate_probability_model(q.codes, k=k)
        probs32 = model.probs.astype("<f4")
        # both sides must build the code from the serialised (f32) table
        model32 = entropy.ProbabilityModel(
            (probs32.astype(np.float64) / probs32.astype(np.float64).sum()))
        code = entropy.build_huffman(model32)
        payload, nbits = entropy.huffman_encode(code, q.codes)
        data = (struct.pack("<I", k) + probs32.tobytes()
                + struct.pack("<Q", nbits) + payload)
        sections.append(_Section("huffman", data, {"payload_bits": nbits, "k": k}))
        info["huffman_bits"] = nbits
    else:
        width = max(1, math.ceil(math.log2(k))) if k > 1 else 1
        data = bitpack.pack_fixed(q.codes.astype(np.uint64), width)
        sections.append(_Section("codes", data, {"count": q.codes.size, "width": width}))
    fields = scale_to_fields(np.abs(q.scales) if q.spec.signmax else q.scales,
                             q.spec.scale_format)
    sections.append(_Section(
        "scales", bitpack.pack_fixed(fields, q.spec.scale_format.total_bits),
        {"count": int(q.scales.size)}))
    if q.spec.signmax:
        signs = np.signbit(q.scales).astype(np.uint64)
        sections.append(_Section("scale_signs", bitpack.pack_fixed(signs, 1),
                                 {"count": int(q.scales.size)}))
    sections.append(_Section("outliers", q.outliers.to_bytes(),
                             {"count": len(q.outliers),
                              "fraction": q.outliers.fraction}))
    return sections, info


def write_archive(path: str, tensors: dict[str, QuantisedTensor],
                  compress: bool | dict[str, bool] = False) -> dict:
    """Serialise quantised tensors; returns the header dict that was written."""
    payload = bytearray()
    headers = []
    for name, q in tensors.items():
        do_compress = compress[name] if isinstance(compress, dict) else compress
        sections, info = _tensor_sections(q, do_compress)
        section_meta = {}
        for sec in sections:
            section_meta[sec.name] = {
                "offset": len(payload),
                "nbytes": len(sec.data),
                "sha256": _digest(sec.data),
                **sec.meta,
            }
            payload.extend(sec.data)
        n = q.element_count
        packed_bits = 8.0 * sum(s["nbytes"] for s in section_meta.values()) / n
        headers.append({
            "name": name,
            "shape": list(q.shape),
            "spec": _spec_to_json(q.spec),
            "compressed": bool(do_compress),
            "achieved_bits": bits_per_param(q),
            "packed_bits": packed_bits,
            "sections": section_meta,
        })
    header = {"version": ARCHIVE_VERSION, "tensors": headers}
    blob = json.dumps(header).encode()
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<IQ", ARCHIVE_VERSION, len(blob)))
        f.write(blob)
        f.write(bytes(payload))
    return header


def read_archive(path: str) -> dict[str, QuantisedTensor]:
    """Deserialise an archive; verifies all section digests."""
    with open(path, "rb") as f:
        data = f.read()
    if data[:4] != MAGIC:
        raise ParseError("not a qlab archive")
    version, hlen = struct.unpack_from("<IQ", data, 4)
    if version != ARCHIVE_VERSION:
        raise ParseError(f"unsupported archive version {version}")
    header = json.loads(data[16:16 + hlen].decode())
    payload = data[16 + hlen:]
    out: dict[str, QuantisedTensor] = {}
    for tdoc in header["tensors"]:
        name = tdoc["name"]
        spec = _spec_from_json(tdoc["spec"])
        secs = tdoc["sections"]

        def section(key: str) -> bytes:
            meta = secs[key]
            raw = payload[meta["offset"]:meta["offset"] + meta["nbytes"]]
            if len(raw) != meta["nbytes"] or _digest(raw) != meta["sha256"]:
                raise CorruptionError(f"{name}: section {key} digest mismatch")
            return raw

        n = int(np.prod(tdoc["shape"])) if tdoc["shape"] else 1
        if tdoc["compressed"]:
            raw = section("huffman")
            k, = struct.unpack_from("<I", raw, 0)
            probs32 = np.frombuffer(raw, dtype="<f4", count=k, offset=4)
            nbits, = struct.unpack_from("<Q", raw, 4 + 4 * k)
            stream = raw[12 + 4 * k:]
            model32 = entropy.ProbabilityModel(
                probs32.astype(np.float64) / probs32.astype(np.float64).sum())
            code = entropy.build_huffman(model32)
            codes = entropy.huffman_decode(code, stream, nbits, n).astype(np.uint32)
        else:
            meta = secs["codes"]
            codes = bitpack.unpack_fixed(section("codes"), meta["width"],
                                         meta["count"]).astype(np.uint32)
        smeta = secs["scales"]
        fields = bitpack.unpack_fixed(section("scales"), spec.scale_format.total_bits,
                                      smeta["count"]).astype(np.uint64)
        scales = fields_to_scale(fields, spec.scale_format)
        if spec.signmax:
            gmeta = secs["scale_signs"]
            signs = bitpack.unpack_fixed(section("scale_signs"), 1, gmeta["count"])
            scales = np.where(signs == 1, -scales, scales)
        ometa = secs["outliers"]
        outliers = OutlierSet.from_bytes(section("outliers"), ometa.get("fraction", 0.0))
        if codes.size != n:
            raise CorruptionError(f"{name}: code count {codes.size} != {n}")
        out[name] = QuantisedTensor(tuple(tdoc["shape"]), codes, scales, spec, outliers)
    return out
