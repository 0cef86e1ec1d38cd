"""On-disk formats: tensor files, portable pixmaps, manifests and checkpoints.

Tensor file layout (all little-endian)::

    b"STEN" | version u8 (=1) | dtype u8 | rank u8 | reserved u8 (=0)
    | rank x u64 extents | row-major payload

dtype codes: 0 = float32, 1 = uint8, 2 = int32.
"""

import json
import os
import struct
from pathlib import Path

import numpy as np

from ssp.dataset import VideoData
from ssp.errors import ContractError, FormatError
from ssp.propagation import SimilarityLayer
from ssp.synth import LinearHead
from ssp.tensor import ConvSpec

MAGIC = b"STEN"
VERSION = 1
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("u1"), 2: np.dtype("<i4")}


def _dtype_code(dtype):
    for code, dt in _DTYPES.items():
        if dtype.kind == dt.kind and dtype.itemsize == dt.itemsize:
            return code
    raise ContractError(f"unsupported tensor dtype {dtype}; use float32, uint8 or int32")


def tensor_to_bytes(arr):
    arr = np.asarray(arr)
    code = _dtype_code(arr.dtype)
    header = MAGIC + struct.pack("<BBBB", VERSION, code, arr.ndim, 0)
    header += struct.pack(f"<{arr.ndim}Q", *arr.shape)
    return header + np.ascontiguousarray(arr, dtype=_DTYPES[code]).tobytes()


def tensor_from_bytes(buf):
    if len(buf) < 8:
        raise FormatError("tensor file shorter than its header")
    if buf[:4] != MAGIC:
        raise FormatError(f"bad magic {bytes(buf[:4])!r}, expected {MAGIC!r}")
    version, code, rank, reserved = struct.unpack("<BBBB", buf[4:8])
    if version != VERSION:
        raise FormatError(f"unsupported tensor file version {version}")
    if code not in _DTYPES:
        raise FormatError(f"unknown dtype code {code}")
    if reserved != 0:
        raise FormatError("reserved header byte must be zero")
    end = 8 + 8 * rank
    if len(buf) < end:
        raise FormatError("truncated tensor header")
    shape = struct.unpack(f"<{rank}Q", buf[8:end])
    dtype = _DTYPES[code]
    n = int(np.prod(shape, dtype=np.int64)) if rank else 1
    if len(buf) - end != n * dtype.itemsize:
        raise FormatError(f"payload is {len(buf) - end} bytes, expected {n * dtype.itemsize}")
    return np.frombuffer(buf, dtype=dtype, count=n, offset=end).reshape(shape).astype(dtype.newbyteorder("="))


def tensor_write(path, arr):
    Path(path).write_bytes(tensor_to_bytes(arr))


def tensor_read(path):
    return tensor_from_bytes(Path(path).read_bytes())


def _read_netpbm(path, magic):
    data = Path(path).read_bytes()
    tokens, pos = [], 0
    while len(tokens) < 4:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":
            while pos < len(data) and data[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise FormatError(f"{path}: truncated header")
        tokens.append(data[start:pos])
    if tokens[0] != magic:
        raise FormatError(f"{path}: expected {magic.decode()} file, got {tokens[0]!r}")
    try:
        w, h, maxval = (int(t) for t in tokens[1:])
    except ValueError as exc:
        raise FormatError(f"{path}: malformed header") from exc
    if maxval != 255:
        raise FormatError(f"{path}: only maxval 255 is supported")
    pos += 1  # single whitespace byte before the raster
    chans = 3 if magic == b"P6" else 1
    raster = data[pos:]
    if len(raster) != w * h * chans:
        raise FormatError(f"{path}: raster has {len(raster)} bytes, expected {w * h * chans}")
    return np.frombuffer(raster, dtype=np.uint8).reshape(h, w, chans)


def write_ppm(path, img):
    """Write a (3, H, W) float image in [0, 1] as binary P6."""
    q = np.clip(np.round(np.asarray(img) * 255), 0, 255).astype(np.uint8).transpose(1, 2, 0)
    h, w = q.shape[:2]
    Path(path).write_bytes(b"P6\n%d %d\n255\n" % (w, h) + q.tobytes())


def read_ppm(path):
    return (_read_netpbm(path, b"P6").transpose(2, 0, 1).astype(np.float32) / 255).astype(np.float32)


def write_pgm(path, labels):
    lab = np.asarray(labels)
    if lab.min() < 0 or lab.max() > 255:
        raise ContractError("label values must fit in a byte")
    h, w = lab.shape
    Path(path).write_bytes(b"P5\n%d %d\n255\n" % (w, h) + lab.astype(np.uint8).tobytes())


def read_pgm(path):
    return _read_netpbm(path, b"P5")[..., 0].astype(np.int32)


MANIFEST = "manifest.json"
INDEX = "dataset.json"


def write_video(directory, seq, name=None, write_dense=True):
    """Materialise a :class:`~ssp.synth.SyntheticSequence` under ``directory``."""
    d = Path(directory)
    for sub in ("frames", "labels", "flows"):
        (d / sub).mkdir(parents=True, exist_ok=True)
    n = len(seq.frames)
    frames, labels, dense, fwd, bwd = [], {}, [], [], []
    for k in range(n):
        f = f"frames/{k:04d}.ppm"
        write_ppm(d / f, seq.frames[k])
        frames.append(f)
        lab = f"labels/{k:04d}.pgm"
        if seq.annotated[k] or write_dense:
            write_pgm(d / lab, seq.labels[k])
        if seq.annotated[k]:
            labels[str(k)] = lab
        dense.append(lab)
    for k in range(n - 1):
        ff, fb = f"flows/fwd_{k:04d}.sten", f"flows/bwd_{k:04d}.sten"
        tensor_write(d / ff, seq.flows_fwd[k].astype(np.float32))
        tensor_write(d / fb, seq.flows_bwd[k].astype(np.float32))
        fwd.append(ff)
        bwd.append(fb)
    poses = np.stack([np.hstack([p.rotation, p.translation[:, None]]).ravel() for p in seq.poses])
    tensor_write(d / "poses.sten", poses.astype(np.float32))
    p0 = seq.poses[0]
    manifest = {
        "name": name or d.name,
        "frames": frames,
        "labels": labels,
        "homographies": [[float(x) for x in np.asarray(h).ravel()] for h in seq.homographies],
        "flows_fwd": fwd,
        "flows_bwd": bwd,
        "classes": list(seq.class_names),
        "seed": int(seq.config.seed),
        "logit_noise": float(seq.config.logit_noise),
        "intrinsics": [p0.fx, p0.fy, p0.cx, p0.cy],
        "poses": "poses.sten",
    }
    if write_dense:
        manifest["dense_labels"] = dense
    (d / MANIFEST).write_text(json.dumps(manifest, indent=1))
    return manifest


def _require_list(m, key, length, where):
    val = m.get(key)
    if val is None:
        return None
    if not isinstance(val, list) or len(val) != length:
        got = len(val) if isinstance(val, list) else type(val).__name__
        raise FormatError(f"{where}: '{key}' must list {length} entries, got {got}")
    return val


def validate_manifest(m, directory):
    """Check lengths and file references before anything is loaded."""
    where = str(directory)
    if not isinstance(m, dict):
        raise FormatError(f"{where}: manifest must be a JSON object")
    frames = m.get("frames")
    if not isinstance(frames, list) or not frames:
        raise FormatError(f"{where}: 'frames' must be a non-empty list")
    n = len(frames)
    if not isinstance(m.get("classes"), list) or len(m["classes"]) < 2:
        raise FormatError(f"{where}: 'classes' must list at least two names")
    labels = m.get("labels", {})
    if not isinstance(labels, dict):
        raise FormatError(f"{where}: 'labels' must map frame index to file")
    for key in labels:
        if not str(key).isdigit() or not 0 <= int(key) < n:
            raise FormatError(f"{where}: label key {key!r} is not a frame index")
    homs = _require_list(m, "homographies", n - 1, where)
    if homs is not None:
        for h in homs:
            if not isinstance(h, list) or len(h) != 9:
                raise FormatError(f"{where}: each homography must be 9 numbers")
    for key in ("flows_fwd", "flows_bwd"):
        _require_list(m, key, n - 1, where)
    _require_list(m, "dense_labels", n, where)
    files = list(frames) + list(labels.values())
    for key in ("flows_fwd", "flows_bwd", "dense_labels"):
        files += m.get(key) or []
    missing = [f for f in files if not (Path(directory) / f).is_file()]
    if missing:
        raise FormatError(f"{where}: missing file {missing[0]} ({len(missing)} missing)")


def load_manifest(directory):
    d = Path(directory)
    try:
        m = json.loads((d / MANIFEST).read_text())
    except FileNotFoundError as exc:
        raise FormatError(f"{d}: no {MANIFEST}") from exc
    except json.JSONDecodeError as exc:
        raise FormatError(f"{d / MANIFEST}: invalid JSON ({exc})") from exc
    validate_manifest(m, d)
    return m


def load_video(directory, with_dense=False):
    """Load one video; returns VideoData (and the dense label list if asked)."""
    d = Path(directory)
    m = load_manifest(d)
    frames = [read_ppm(d / f) for f in m["frames"]]
    shape = frames[0].shape
    if any(f.shape != shape for f in frames):
        raise FormatError(f"{d}: frames differ in size")
    labels = {int(k): read_pgm(d / f) for k, f in m.get("labels", {}).items()}

    def flows(key):
        if m.get(key) is None:
            return None
        out = [tensor_read(d / f) for f in m[key]]
        if any(f.shape != (2,) + shape[1:] for f in out):
            raise FormatError(f"{d}: {key} entries must have shape (2, H, W)")
        return out

    homs = None if m.get("homographies") is None else [np.array(h, dtype=np.float64).reshape(3, 3) for h in m["homographies"]]
    video = VideoData(
        name=m.get("name", d.name),
        frames=frames,
        labels=labels,
        homographies=homs,
        flows_fwd=flows("flows_fwd"),
        flows_bwd=flows("flows_bwd"),
        class_names=list(m["classes"]),
        seed=int(m.get("seed", 0)),
        logit_noise=float(m.get("logit_noise", 0.0)),
    )
    if not with_dense:
        return video
    dense = m.get("dense_labels")
    return video, None if dense is None else [read_pgm(d / f) for f in dense]


def video_dirs(directory):
    """Video directories of a dataset (an index file or a single manifest)."""
    d = Path(directory)
    if (d / INDEX).is_file():
        try:
            idx = json.loads((d / INDEX).read_text())
            return [d / v for v in idx["videos"]]
        except (json.JSONDecodeError, KeyError, TypeError) as exc:
            raise FormatError(f"{d / INDEX}: malformed dataset index") from exc
    if (d / MANIFEST).is_file():
        return [d]
    raise FormatError(f"{d}: neither {INDEX} nor {MANIFEST} found")


def load_dataset(directory, with_dense=False):
    return [load_video(v, with_dense) for v in video_dirs(directory)]


def write_dataset_index(directory, video_names, config=None):
    idx = {"videos": list(video_names)}
    if config is not None:
        idx["config"] = config
    (Path(directory) / INDEX).write_text(json.dumps(idx, indent=1))


def save_checkpoint(path, layer, head, header=None):
    """Flat float32 parameter blob plus a JSON sidecar at ``path + '.json'``."""
    params = dict(layer.params())
    params.update(head.params())
    names = sorted(params)
    blob = np.concatenate([np.asarray(params[k], dtype=np.float32).ravel() for k in names]) if names else np.zeros(0, np.float32)
    meta = dict(header or {})
    meta.update(
        {
            "similarity": layer.mode,
            "stride": layer.stride,
            "params": [{"name": k, "shape": list(np.shape(params[k]))} for k in names],
            "convs": [{"stride": c.stride, "padding": c.padding} for c in layer.convs],
        }
    )
    tensor_write(path, blob)
    Path(str(path) + ".json").write_text(json.dumps(meta, indent=1, sort_keys=True))


def load_checkpoint(path):
    """Return (layer, head, header)."""
    try:
        meta = json.loads(Path(str(path) + ".json").read_text())
    except FileNotFoundError as exc:
        raise FormatError(f"checkpoint header {path}.json not found") from exc
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}.json: invalid JSON") from exc
    blob = tensor_read(path)
    params, off = {}, 0
    try:
        for entry in meta["params"]:
            size = int(np.prod(entry["shape"], dtype=np.int64))
            params[entry["name"]] = blob[off:off + size].reshape(entry["shape"]).copy()
            off += size
    except (KeyError, ValueError) as exc:
        raise FormatError(f"{path}: checkpoint header does not match the blob") from exc
    if off != blob.size:
        raise FormatError(f"{path}: blob has {blob.size} values, header describes {off}")
    if "head.weight" not in params:
        raise FormatError(f"{path}: checkpoint has no surrogate head")
    head = LinearHead(params["head.weight"], params["head.bias"])
    if meta.get("similarity", "conv") == "cosine":
        layer = SimilarityLayer([], "cosine", meta.get("stride", 4))
    else:
        convs = []
        for i, c in enumerate(meta["convs"]):
            convs.append(ConvSpec(params[f"sim.{i}.weight"], params[f"sim.{i}.bias"], c["stride"], c["padding"]))
        layer = SimilarityLayer(convs, "conv", meta.get("stride", 4))
    return layer, head, meta


def ensure_dir(path):
    os.makedirs(path, exist_ok=True)
    return Path(path)
