"""Model assembly: per-stream networks of three two-pathway blocks, the
three-stream wrapper with embedding concatenation, the two-branch fusion
rule, embedding-record files, and versioned binary checkpoints."""

from __future__ import annotations

import dataclasses
import io
import json
import struct
from dataclasses import dataclass, field

import numpy as np

from . import graph, skeleton
from . import tensor as tz
from .layers import BatchNorm, Layer, Linear, STGCBlock
from .tensor import Tensor

ADJACENCY_KINDS = ("multiscale", "full")
ATTENTION_MODES = ("stc", "st", "c", "none")
PRECISIONS = {"double": np.float64, "single": np.float32}

STREAM_ORDER = ("joint", "bone", "motion")


@dataclass(frozen=True)
class StreamSpec:
    """Which relation structure and gating one stream uses."""
    name: str
    adjacency: str = "multiscale"
    attention: str = "stc"

    def __post_init__(self):
        if self.name not in STREAM_ORDER:
            raise ValueError(f"stream must be one of {STREAM_ORDER}, "
                             f"got {self.name!r}")
        if self.adjacency not in ADJACENCY_KINDS:
            raise ValueError(f"adjacency must be one of {ADJACENCY_KINDS}, "
                             f"got {self.adjacency!r}")
        if self.attention not in ATTENTION_MODES:
            raise ValueError(f"attention must be one of {ATTENTION_MODES}, "
                             f"got {self.attention!r}")


def default_streams() -> tuple[StreamSpec, ...]:
    # joint keeps the hop-scale graph with space-time gating; bone and
    # motion work best fully connected with the complete gate set
    return (StreamSpec("joint", "multiscale", "st"),
            StreamSpec("bone", "full", "stc"),
            StreamSpec("motion", "full", "stc"))


@dataclass
class ModelConfig:
    n_classes: int
    in_channels: int = 2
    channels: tuple = (96, 192, 384)
    strides: tuple = (1, 2, 2)
    num_scales: int = 4
    tau: int = 3
    dilation: int = 1
    reduction: int = 4
    precision: str = "double"
    bn_eps: float = 1e-5
    parents: tuple = skeleton.PARENT
    streams: tuple = field(default_factory=default_streams)
    fusion_lambda: float = 400.0

    def __post_init__(self):
        self.channels = tuple(int(c) for c in self.channels)
        self.strides = tuple(int(s) for s in self.strides)
        self.parents = tuple(int(p) for p in self.parents)
        self.streams = tuple(
            s if isinstance(s, StreamSpec) else StreamSpec(**s)
            for s in self.streams)
        if len(self.channels) != len(self.strides):
            raise ValueError(f"{len(self.channels)} channel sizes but "
                             f"{len(self.strides)} strides")
        if self.n_classes < 2:
            raise ValueError(f"need at least 2 classes, got {self.n_classes}")
        if self.precision not in PRECISIONS:
            raise ValueError(f"precision must be one of "
                             f"{tuple(PRECISIONS)}, got {self.precision!r}")
        names = [s.name for s in self.streams]
        if len(names) != len(set(names)):
            raise ValueError(f"duplicate stream names: {names}")

    @property
    def dtype(self):
        return PRECISIONS[self.precision]

    @property
    def embed_dim(self) -> int:
        return self.channels[-1]

    def to_dict(self) -> dict:
        doc = dataclasses.asdict(self)
        doc["channels"] = list(self.channels)
        doc["strides"] = list(self.strides)
        doc["parents"] = list(self.parents)
        doc["streams"] = [dataclasses.asdict(s) for s in self.streams]
        return doc

    @classmethod
    def from_dict(cls, doc: dict) -> "ModelConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(doc) - known
        if unknown:
            raise ValueError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**doc)


def stream_adjacencies(config: ModelConfig, spec: StreamSpec):
    """(per-scale adjacency list, windowed-pathway base) for one stream."""
    topo = skeleton.topology_from_parents(config.parents)
    v = topo.num_joints
    if spec.adjacency == "full":
        full = graph.full_adjacency(v)
        return [full], full
    scales = graph.multi_scale_adjacency(v, topo.edges, config.num_scales)
    return scales, graph.natural_adjacency(v, topo.edges)


class StreamModel(Layer):
    """Input normalization, the block stack, pooled embedding, classifier."""

    def __init__(self, config: ModelConfig, spec: StreamSpec,
                 rng: np.random.Generator):
        self.config = config
        self.spec = spec
        dtype = config.dtype
        adjs, g3d_base = stream_adjacencies(config, spec)
        self.num_joints = adjs[0].shape[0]
        self.input_bn = BatchNorm(config.in_channels, dtype, eps=config.bn_eps)
        blocks = []
        c_prev = config.in_channels
        for c_out, stride in zip(config.channels, config.strides):
            blocks.append(STGCBlock(
                c_prev, c_out, stride, adjs, g3d_base, rng, dtype,
                tau=config.tau, dilation=config.dilation,
                attention_mode=spec.attention, reduction=config.reduction,
                bn_eps=config.bn_eps))
            c_prev = c_out
        self.blocks = blocks
        self.head = Linear(c_prev, config.n_classes, rng, dtype)

    def forward(self, x: Tensor, training: bool = False) -> dict:
        expect = (self.config.in_channels, self.num_joints)
        if x.data.ndim != 3 or (x.shape[0], x.shape[2]) != expect:
            raise ValueError(f"expected ({expect[0]}, T, {expect[1]}) input, "
                             f"got {x.shape}")
        h = self.input_bn.forward(x, training)
        for block in self.blocks:
            h = block.forward(h, training)
        embedding = h.mean(axes=(1, 2))
        logits = self.head.forward(embedding)
        return {"embedding": embedding, "logits": logits}

    def embed(self, coords: np.ndarray) -> np.ndarray:
        out = self.forward(Tensor(coords.astype(self.config.dtype)))
        return out["embedding"].data.copy()


class MultiStreamModel(Layer):
    """The three stream networks; embeddings concatenate joint|bone|motion."""

    def __init__(self, config: ModelConfig, seed: int = 0):
        self.config = config
        self.streams = {}
        for i, spec in enumerate(config.streams):
            rng = np.random.default_rng(np.random.SeedSequence([seed, i]))
            self.streams[spec.name] = StreamModel(config, spec, rng)

    def stream_names(self) -> list[str]:
        return [s.name for s in self.config.streams]

    def forward(self, bundle: skeleton.StreamBundle,
                training: bool = False) -> dict:
        outs = {}
        parts = []
        for name in self.stream_names():
            x = Tensor(bundle.by_name(name).astype(self.config.dtype))
            outs[name] = self.streams[name].forward(x, training)
            parts.append(outs[name]["embedding"])
        fused = tz.concat(parts, axis=0)
        return {"embedding": fused, "streams": outs}

    def embed_bundle(self, bundle: skeleton.StreamBundle) -> np.ndarray:
        return self.forward(bundle)["embedding"].data.copy()

    @property
    def embed_dim(self) -> int:
        return self.config.embed_dim * len(self.config.streams)


# -- embedding records -----------------------------------------------------

SOURCES = ("model", "appearance", "fused")


@dataclass
class EmbeddingRecord:
    subject_id: str
    condition: str
    seq_index: int
    view_deg: int
    vector: np.ndarray
    source: str = "model"

    def __post_init__(self):
        if self.source not in SOURCES:
            raise ValueError(f"source must be one of {SOURCES}, "
                             f"got {self.source!r}")
        self.vector = np.asarray(self.vector, dtype=np.float64)
        if self.vector.ndim != 1 or self.vector.size == 0:
            raise ValueError(f"vector must be 1-d non-empty, "
                             f"got shape {self.vector.shape}")
        if not np.all(np.isfinite(self.vector)):
            raise ValueError(f"non-finite embedding for {self.key()}")

    def key(self) -> tuple:
        return (self.subject_id, self.condition, self.seq_index, self.view_deg)


def fuse_two_branch(f_m: EmbeddingRecord, f_a: EmbeddingRecord,
                    lam: float) -> EmbeddingRecord:
    """Append the scaled appearance vector: concat(f_m, lam * f_a)."""
    if lam <= 0:
        raise ValueError(f"fusion weight must be positive, got {lam}")
    if f_m.key() != f_a.key():
        raise ValueError(f"record mismatch: {f_m.key()} vs {f_a.key()}")
    return EmbeddingRecord(
        subject_id=f_m.subject_id, condition=f_m.condition,
        seq_index=f_m.seq_index, view_deg=f_m.view_deg,
        vector=np.concatenate([f_m.vector, lam * f_a.vector]),
        source="fused")


def save_embeddings(records, path: str) -> None:
    """One whitespace-separated record per line, exact decimal floats."""
    with open(path, "w", encoding="utf-8") as fh:
        for r in records:
            head = f"{r.subject_id} {r.condition} {r.seq_index} " \
                   f"{r.view_deg} {r.source}"
            vec = " ".join(repr(float(v)) for v in r.vector)
            fh.write(f"{head} {vec}\n")


def load_embeddings(path: str) -> list[EmbeddingRecord]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for ln, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            fields = line.split()
            if len(fields) < 6:
                raise ValueError(f"{path}:{ln}: expected metadata plus at "
                                 f"least one value, got {len(fields)} fields")
            try:
                rec = EmbeddingRecord(
                    subject_id=fields[0], condition=fields[1],
                    seq_index=int(fields[2]), view_deg=int(fields[3]),
                    source=fields[4],
                    vector=np.array([float(v) for v in fields[5:]]))
            except ValueError as e:
                raise ValueError(f"{path}:{ln}: {e}") from None
            out.append(rec)
    return out


# -- checkpoints -----------------------------------------------------------

CHECKPOINT_MAGIC = b"GGCN"
CHECKPOINT_VERSION = 1


def _collect_arrays(model: Layer) -> list[tuple[str, np.ndarray]]:
    entries = []
    for name, p in model.named_parameters():
        entries.append((f"param:{name}", p.data))
    for name, st in model.named_states():
        entries.append((f"state:{name}:mean", st.mean))
        entries.append((f"state:{name}:var", st.var))
        entries.append((f"state:{name}:updates",
                        np.array([st.updates], dtype=np.int64)))
    return sorted(entries, key=lambda e: e[0])


def _write_block(fh, payload: bytes) -> None:
    fh.write(struct.pack("<I", len(payload)))
    fh.write(payload)


def _read_block(fh, path: str) -> bytes:
    raw = fh.read(4)
    if len(raw) != 4:
        raise ValueError(f"{path}: truncated checkpoint (length field)")
    (n,) = struct.unpack("<I", raw)
    payload = fh.read(n)
    if len(payload) != n:
        raise ValueError(f"{path}: truncated checkpoint (payload)")
    return payload


def save_checkpoint(model, path: str, extra: dict | None = None) -> None:
    """Versioned container: magic, version, config JSON, named arrays."""
    config_doc = {"model": model.config.to_dict(), "extra": extra or {}}
    entries = _collect_arrays(model)
    buf = io.BytesIO()
    buf.write(CHECKPOINT_MAGIC)
    buf.write(struct.pack("<I", CHECKPOINT_VERSION))
    _write_block(buf, json.dumps(config_doc, sort_keys=True).encode("utf-8"))
    buf.write(struct.pack("<I", len(entries)))
    for name, arr in entries:
        arr = np.ascontiguousarray(arr)
        _write_block(buf, name.encode("utf-8"))
        dt = arr.dtype.newbyteorder("<")
        header = json.dumps({"dtype": dt.str, "shape": list(arr.shape)},
                            sort_keys=True)
        _write_block(buf, header.encode("utf-8"))
        _write_block(buf, arr.astype(dt).tobytes(order="C"))
    with open(path, "wb") as fh:
        fh.write(buf.getvalue())


def read_checkpoint(path: str) -> tuple[dict, dict]:
    """Returns (config document, {name: array})."""
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != CHECKPOINT_MAGIC:
            raise ValueError(f"{path}: not a checkpoint file "
                             f"(magic {magic!r})")
        raw = fh.read(4)
        if len(raw) != 4:
            raise ValueError(f"{path}: truncated checkpoint (version)")
        (version,) = struct.unpack("<I", raw)
        if version != CHECKPOINT_VERSION:
            raise ValueError(f"{path}: unsupported checkpoint version "
                             f"{version} (expected {CHECKPOINT_VERSION})")
        config_doc = json.loads(_read_block(fh, path).decode("utf-8"))
        raw = fh.read(4)
        if len(raw) != 4:
            raise ValueError(f"{path}: truncated checkpoint (entry count)")
        (count,) = struct.unpack("<I", raw)
        arrays = {}
        for _ in range(count):
            name = _read_block(fh, path).decode("utf-8")
            header = json.loads(_read_block(fh, path).decode("utf-8"))
            payload = _read_block(fh, path)
            arr = np.frombuffer(payload, dtype=np.dtype(header["dtype"]))
            arrays[name] = arr.reshape(header["shape"]).copy()
        if fh.read(1):
            raise ValueError(f"{path}: trailing bytes after checkpoint body")
    return config_doc, arrays


def _assign_arrays(model, arrays: dict, path: str) -> None:
    expected = dict(_collect_arrays(model))
    if set(expected) != set(arrays):
        missing = sorted(set(expected) - set(arrays))[:3]
        surplus = sorted(set(arrays) - set(expected))[:3]
        raise ValueError(f"{path}: parameter names do not match the model "
                         f"(missing {missing}, unexpected {surplus})")
    for name, p in model.named_parameters():
        arr = arrays[f"param:{name}"]
        if arr.shape != p.data.shape:
            raise ValueError(f"{path}: shape mismatch for {name}: "
                             f"{arr.shape} vs {p.data.shape}")
        p.data = arr.astype(p.data.dtype)
    for name, st in model.named_states():
        st.mean = arrays[f"state:{name}:mean"].astype(np.float64)
        st.var = arrays[f"state:{name}:var"].astype(np.float64)
        st.updates = int(arrays[f"state:{name}:updates"][0])


def load_checkpoint(path: str):
    """Rebuild the model recorded in the file; returns (model, extra)."""
    config_doc, arrays = read_checkpoint(path)
    config = ModelConfig.from_dict(config_doc["model"])
    model = MultiStreamModel(config)
    _assign_arrays(model, arrays, path)
    return model, config_doc.get("extra", {})


def load_checkpoint_into(model, path: str) -> dict:
    """Load parameters into an existing model; configs must match."""
    config_doc, arrays = read_checkpoint(path)
    if config_doc["model"] != model.config.to_dict():
        raise ValueError(f"{path}: checkpoint config does not match the "
                         "model it is being loaded into")
    _assign_arrays(model, arrays, path)
    return config_doc.get("extra", {})
