"""On-disk corpus: one directory per scene, manifest driven, checksummed.

Layout::

    root/corpus.json                 versioned index (scene dirs + manifest digests)
    root/scene_00000/manifest.json   camera, room and per-instance blocks, file digests
    root/scene_00000/image.png       RGB input image
    root/scene_00000/room.obj        camera-frame room shell
    root/scene_00000/room_labels.bin raw tensor blob (part label per face)
    root/scene_00000/inst0.obj       canonical instance mesh
    root/scene_00000/inst0_modal.png / inst0_amodal.png

Raw tensor blobs carry a 16-byte little-endian header: magic ``IPTB``,
dtype code (u8), rank (u8), then five u16 dims (unused dims zero).
"""
from __future__ import annotations

import hashlib
import io
import json
import struct
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np
from PIL import Image

from .geometry import Box2D, Camera, InstancePose
from .mesh import obj_bytes, parse_obj
from .scenegen import InstanceRecord, SceneRecord, SceneSpec, generate_scene, scene_spec

FORMAT = "instpifu-corpus"
VERSION = 1
BLOB_MAGIC = b"IPTB"
DTYPES = {0: "<f4", 1: "<f8", 2: "u1", 3: "<i4", 4: "<i8"}
DTYPE_CODES = {np.dtype(v).str: k for k, v in DTYPES.items()}


class DatasetError(RuntimeError):
    pass


class DatasetVersionError(DatasetError):
    pass


class ChecksumError(DatasetError):
    pass


class MissingFieldError(DatasetError):
    pass


def sha256(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


# ---------------------------------------------------------------- blobs

def blob_bytes(arr: np.ndarray) -> bytes:
    arr = np.asarray(arr)
    code = DTYPE_CODES.get(arr.dtype.newbyteorder("<").str)
    if code is None:
        raise TypeError(f"unsupported blob dtype {arr.dtype}")
    if arr.ndim > 5 or any(d > 0xFFFF for d in arr.shape):
        raise ValueError("blobs hold at most 5 dims of size < 65536")
    dims = list(arr.shape) + [0] * (5 - arr.ndim)
    header = BLOB_MAGIC + struct.pack("<BB5H", code, arr.ndim, *dims)
    return header + np.ascontiguousarray(arr, dtype=DTYPES[code]).tobytes()


def parse_blob(data: bytes, name: str = "<blob>") -> np.ndarray:
    if len(data) < 16 or data[:4] != BLOB_MAGIC:
        raise ChecksumError(f"{name}: not a tensor blob (bad header)")
    code, rank, *dims = struct.unpack("<BB5H", data[4:16])
    if code not in DTYPES or rank > 5:
        raise ChecksumError(f"{name}: corrupt blob header")
    shape = tuple(dims[:rank])
    dt = np.dtype(DTYPES[code])
    need = int(np.prod(shape)) * dt.itemsize
    if len(data) - 16 != need:
        raise ChecksumError(f"{name}: payload has {len(data) - 16} bytes, header says {need} (truncated?)")
    return np.frombuffer(data[16:], dtype=dt).reshape(shape).copy()


def png_bytes(arr: np.ndarray) -> bytes:
    buf = io.BytesIO()
    Image.fromarray(arr).save(buf, format="PNG", optimize=False, compress_level=6)
    return buf.getvalue()


def parse_png(data: bytes) -> np.ndarray:
    return np.array(Image.open(io.BytesIO(data)))


# ---------------------------------------------------------------- scenes

def scene_files(rec: SceneRecord) -> tuple[dict, dict]:
    """Serialize a record: returns (manifest, {filename: bytes})."""
    files = {"image.png": png_bytes(rec.image), "room.obj": obj_bytes(rec.room),
             "room_labels.bin": blob_bytes(rec.room_labels.astype(np.uint8))}
    insts = []
    for i, inst in enumerate(rec.instances):
        files[f"inst{i}.obj"] = obj_bytes(inst.mesh)
        files[f"inst{i}_modal.png"] = png_bytes(inst.modal.astype(np.uint8) * 255)
        block = {"category": inst.category, "shape_params": inst.shape_params, "pose": inst.pose.to_dict(),
                 "box": inst.box.as_array().tolist(), "mesh": f"inst{i}.obj", "modal": f"inst{i}_modal.png",
                 "amodal": None}
        if inst.amodal is not None:
            files[f"inst{i}_amodal.png"] = png_bytes(inst.amodal.astype(np.uint8) * 255)
            block["amodal"] = f"inst{i}_amodal.png"
        insts.append(block)
    manifest = {"format": FORMAT, "version": VERSION, "seed": rec.seed, "preset": rec.preset,
                "provenance": rec.provenance, "camera": rec.camera.to_dict(),
                "room": {"mesh": "room.obj", "labels": "room_labels.bin", "params": rec.room_params},
                "image": "image.png", "instances": insts,
                "files": {k: sha256(v) for k, v in sorted(files.items())}}
    return manifest, files


def manifest_bytes(manifest: dict) -> bytes:
    return (json.dumps(manifest, indent=1, sort_keys=True) + "\n").encode()


def write_scene(rec: SceneRecord, directory) -> str:
    """Write one scene directory; returns the manifest digest."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    manifest, files = scene_files(rec)
    for name, data in files.items():
        (d / name).write_bytes(data)
    mb = manifest_bytes(manifest)
    (d / "manifest.json").write_bytes(mb)
    return sha256(mb)


def _check_version(meta: dict, where: str):
    if meta.get("format") != FORMAT:
        raise DatasetVersionError(f"{where}: not an {FORMAT} file")
    if meta.get("version") != VERSION:
        raise DatasetVersionError(f"{where}: format version {meta.get('version')} is not supported "
                                  f"(this reader handles version {VERSION})")


def read_scene(directory, verify: bool = True, drop_amodal: bool = False) -> SceneRecord:
    d = Path(directory)
    manifest = json.loads((d / "manifest.json").read_text())
    _check_version(manifest, str(d / "manifest.json"))

    def load(name):
        path = d / name
        if not path.exists():
            raise DatasetError(f"missing file {path}")
        data = path.read_bytes()
        if verify and sha256(data) != manifest["files"].get(name):
            raise ChecksumError(f"checksum mismatch in {path}")
        return data

    camera = Camera.from_dict(manifest["camera"])
    room = parse_obj(load("room.obj").decode())
    labels = parse_blob(load("room_labels.bin"), str(d / "room_labels.bin")).astype(np.int64)
    insts = []
    for blk in manifest["instances"]:
        amodal = None
        if blk["amodal"] is not None and not drop_amodal:
            amodal = parse_png(load(blk["amodal"])) > 127
        insts.append(InstanceRecord(blk["category"], parse_obj(load(blk["mesh"]).decode()), blk["shape_params"],
                                    InstancePose.from_dict(blk["pose"]), Box2D(*blk["box"]),
                                    parse_png(load(blk["modal"])) > 127, amodal))
    params = manifest["room"]["params"]
    if params.get("alcove") is not None:
        params["alcove"] = tuple(params["alcove"])
    return SceneRecord(manifest["seed"], manifest["preset"], camera, room, labels, params, insts,
                       parse_png(load("image.png")), manifest["provenance"])


# ---------------------------------------------------------------- corpora

class Corpus:
    """Lazy handle over a written corpus; scenes are read (and verified) on access."""

    def __init__(self, root, provenance: str | None = None, drop_amodal: bool = False, verify: bool = True):
        self.root = Path(root)
        index = self.root / "corpus.json"
        if not index.exists():
            raise DatasetError(f"no corpus index at {index}")
        self.meta = json.loads(index.read_text())
        _check_version(self.meta, str(index))
        self.provenance = provenance or self.meta.get("provenance", "synthetic")
        self.drop_amodal = drop_amodal
        self.verify = verify

    def __len__(self) -> int:
        return len(self.meta["scenes"])

    def scene_dir(self, i: int) -> Path:
        return self.root / self.meta["scenes"][i]["dir"]

    def __getitem__(self, i: int) -> SceneRecord:
        if not -len(self) <= i < len(self):
            raise IndexError(i)
        i %= len(self)
        entry = self.meta["scenes"][i]
        d = self.root / entry["dir"]
        if self.verify and sha256((d / "manifest.json").read_bytes()) != entry["manifest_sha256"]:
            raise ChecksumError(f"checksum mismatch in {d / 'manifest.json'}")
        rec = read_scene(d, self.verify, self.drop_amodal)
        rec.provenance = self.provenance
        return rec

    def __iter__(self):
        for i in range(len(self)):
            yield self[i]

    def split(self, n_test: int) -> tuple[list[int], list[int]]:
        """Deterministic split: the last ``n_test`` scenes are held out."""
        n = len(self)
        if not 0 < n_test < n:
            raise DatasetError(f"cannot hold out {n_test} of {n} scenes")
        return list(range(n - n_test)), list(range(n - n_test, n))

    @property
    def checksum(self) -> str:
        return sha256((self.root / "corpus.json").read_bytes())


def write_dataset(records, root, meta: dict | None = None) -> Corpus:
    """Write an iterable of records (consumed lazily) plus the corpus index."""
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    entries = []
    for i, rec in enumerate(records):
        name = f"scene_{i:05d}"
        entries.append({"dir": name, "seed": rec.seed, "manifest_sha256": write_scene(rec, root / name)})
    index = {"format": FORMAT, "version": VERSION, "count": len(entries), "scenes": entries,
             "provenance": "synthetic", **(meta or {})}
    (root / "corpus.json").write_bytes(manifest_bytes(index))
    return Corpus(root)


def read_dataset(root, **kw) -> Corpus:
    return Corpus(root, **kw)


def scene_seed(corpus_seed: int, index: int) -> int:
    return int(corpus_seed) * 1_000_003 + int(index)


def _gen(args):
    seed, spec = args
    return generate_scene(seed, spec)


def generate_corpus(root, n_scenes: int, seed: int = 0, spec: SceneSpec | str = "sphere-occludes-cube",
                    jobs: int = 1) -> Corpus:
    """Generate and write ``n_scenes`` scenes; scene i uses seed ``scene_seed(seed, i)``."""
    spec = scene_spec(spec) if isinstance(spec, str) else spec
    work = [(scene_seed(seed, i), spec) for i in range(n_scenes)]
    meta = {"corpus_seed": seed, "spec": {k: getattr(spec, k) for k in spec.__dataclass_fields__}}
    if jobs > 1:
        with ProcessPoolExecutor(jobs) as ex:
            return write_dataset(ex.map(_gen, work, chunksize=8), root, meta)
    return write_dataset(map(_gen, work), root, meta)


# ---------------------------------------------------------------- adapters

def _ingest_synthetic(root) -> Corpus:
    return Corpus(root, provenance="synthetic")


def _ingest_synthetic_modal(root) -> Corpus:
    # the same files seen through a source that has no amodal annotation
    return Corpus(root, provenance="synthetic-modal", drop_amodal=True)


def _ingest_3dfront(root) -> Corpus:
    raise NotImplementedError(
        "3D-FRONT ingestion is an interface only: convert rendered views to the corpus layout "
        "(camera block, canonical meshes, 2D boxes, modal masks; amodal masks when available)")


ADAPTERS = {"synthetic": _ingest_synthetic, "synthetic-modal": _ingest_synthetic_modal,
            "3d-front": _ingest_3dfront}


def adapter_ingest(root, format_id: str) -> Corpus:
    if format_id not in ADAPTERS:
        raise KeyError(f"unknown dataset format {format_id!r}; registered adapters: {sorted(ADAPTERS)}")
    return ADAPTERS[format_id](root)


def require_amodal(rec: SceneRecord):
    """Fail fast when a consumer needs amodal masks the source does not provide."""
    for i, inst in enumerate(rec.instances):
        if inst.amodal is None:
            raise MissingFieldError(f"scene seed {rec.seed} instance {i}: field 'amodal' is absent "
                                    f"(provenance {rec.provenance!r}); the mask head needs amodal masks")
