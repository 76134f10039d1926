"""Skeleton sequence types, the 15-joint topology, and the data pipeline:
joint selection, [0,1] normalization, length resampling, bone/motion stream
derivation, and the JSON sequence/manifest formats.
"""

from __future__ import annotations

import json
import os
import warnings
from dataclasses import dataclass, replace

import numpy as np

JOINT_NAMES = (
    "Nose", "Neck", "RShoulder", "RElbow", "RWrist",
    "LShoulder", "LElbow", "LWrist", "MidHip", "RHip",
    "RKnee", "RAnkle", "LHip", "LKnee", "LAnkle",
)
NUM_JOINTS = len(JOINT_NAMES)
JOINT_INDEX = {name: i for i, name in enumerate(JOINT_NAMES)}

# Full-body pose estimators emit 25 joints; ours are exactly the first 15.
SOURCE_JOINTS = 25

# Tree rooted at the Neck; PARENT[root] == root.
PARENT = (1, 1, 1, 2, 3, 1, 5, 6, 1, 8, 9, 10, 8, 12, 13)

CONDITIONS = ("NM", "BG", "CL")
VIEWS_DEG = tuple(range(0, 181, 18))

DEFAULT_FRAMES = 120


@dataclass(frozen=True)
class SkeletonTopology:
    """Parent array plus the implied undirected bone edges."""
    parent: tuple
    edges: tuple

    @property
    def num_joints(self) -> int:
        return len(self.parent)

    @property
    def root(self) -> int:
        for j, p in enumerate(self.parent):
            if j == p:
                return j
        raise ValueError("topology has no root (no j with parent[j] == j)")


def topology_from_parents(parent) -> SkeletonTopology:
    parent = tuple(int(p) for p in parent)
    n = len(parent)
    roots = [j for j, p in enumerate(parent) if j == p]
    if len(roots) != 1:
        raise ValueError(f"parent array must have exactly one root, got {roots}")
    for j, p in enumerate(parent):
        if not 0 <= p < n:
            raise ValueError(f"parent[{j}] = {p} out of range")
    edges = tuple((j, p) for j, p in enumerate(parent) if j != p)
    # walking up from every node must reach the root (no cycles)
    for j in range(n):
        seen = set()
        while parent[j] != j:
            if j in seen:
                raise ValueError("parent array contains a cycle")
            seen.add(j)
            j = parent[j]
    return SkeletonTopology(parent, edges)


def default_topology() -> SkeletonTopology:
    return topology_from_parents(PARENT)


@dataclass
class SkeletonSequence:
    """One recorded walk: metadata plus (2, T, V) coordinates."""
    subject_id: str
    condition: str
    seq_index: int
    view_deg: int
    coords: np.ndarray
    confidence: np.ndarray | None = None

    def __post_init__(self):
        if self.condition not in CONDITIONS:
            raise ValueError(f"condition must be one of {CONDITIONS}, "
                             f"got {self.condition!r}")
        if self.seq_index < 1:
            raise ValueError(f"seq_index must be >= 1, got {self.seq_index}")
        self.coords = np.asarray(self.coords, dtype=np.float64)
        if (self.coords.ndim != 3 or self.coords.shape[0] != 2
                or self.coords.shape[2] != NUM_JOINTS):
            raise ValueError(f"coords must be (2, T, {NUM_JOINTS}), "
                             f"got {self.coords.shape}")

    @property
    def num_frames(self) -> int:
        return self.coords.shape[1]

    def key(self) -> tuple:
        return (self.subject_id, self.condition, self.seq_index, self.view_deg)


@dataclass
class StreamBundle:
    """Joint coordinates plus the derived bone and motion tensors."""
    joint: np.ndarray
    bone: np.ndarray
    motion: np.ndarray

    def by_name(self, name: str) -> np.ndarray:
        try:
            return getattr(self, name)
        except AttributeError:
            raise ValueError(f"unknown stream {name!r}") from None


STREAM_NAMES = ("joint", "bone", "motion")


# -- pipeline operations ---------------------------------------------------

def select_joints(full_pose: np.ndarray) -> np.ndarray:
    """Keep the first 15 joints of a (2, T, 25) full-body pose array."""
    full_pose = np.asarray(full_pose, dtype=np.float64)
    if (full_pose.ndim != 3 or full_pose.shape[0] != 2
            or full_pose.shape[2] != SOURCE_JOINTS):
        raise ValueError(f"expected (2, T, {SOURCE_JOINTS}) pose array, "
                         f"got {full_pose.shape}")
    return full_pose[:, :, :NUM_JOINTS].copy()


def normalize_coords(seq: SkeletonSequence) -> SkeletonSequence:
    """Min-max scale each coordinate axis of the whole sequence to [0,1].

    A degenerate axis (max == min) maps to 0.5 and raises a warning, since
    it carries no positional information to preserve.
    """
    coords = seq.coords
    out = np.empty_like(coords)
    for axis in range(coords.shape[0]):
        lo = coords[axis].min()
        hi = coords[axis].max()
        if hi > lo:
            out[axis] = (coords[axis] - lo) / (hi - lo)
        else:
            warnings.warn(f"axis {axis} of sequence {seq.key()} is constant; "
                          "mapping to 0.5")
            out[axis] = 0.5
    return replace(seq, coords=out)


def resample_to_length(seq: SkeletonSequence, t: int) -> SkeletonSequence:
    """Fix the frame count: uniform subsample when long, cyclic repeat when
    short. Deterministic; frame order is preserved."""
    if t < 1:
        raise ValueError(f"target length must be >= 1, got {t}")
    t_raw = seq.num_frames
    if t_raw < 1:
        raise ValueError("cannot resample an empty sequence")
    if t_raw >= t:
        # round(i * t_raw / t) in exact integer arithmetic, clamped
        idx = np.minimum((2 * np.arange(t) * t_raw + t) // (2 * t), t_raw - 1)
    else:
        idx = np.arange(t) % t_raw
    coords = seq.coords[:, idx, :].copy()
    conf = None if seq.confidence is None else seq.confidence[idx, :].copy()
    return replace(seq, coords=coords, confidence=conf)


def derive_bone(joint: np.ndarray, topo: SkeletonTopology) -> np.ndarray:
    """Per-joint offset from its parent; zero at the root."""
    joint = np.asarray(joint, dtype=np.float64)
    if joint.ndim != 3 or joint.shape[2] != topo.num_joints:
        raise ValueError(f"expected (C, T, {topo.num_joints}) array, "
                         f"got {joint.shape}")
    parent = np.array(topo.parent)
    return joint - joint[:, :, parent]


def derive_motion(joint: np.ndarray) -> np.ndarray:
    """Forward frame difference; the final frame is zero."""
    joint = np.asarray(joint, dtype=np.float64)
    if joint.ndim != 3:
        raise ValueError(f"expected (C, T, V) array, got {joint.shape}")
    out = np.zeros_like(joint)
    out[:, :-1, :] = joint[:, 1:, :] - joint[:, :-1, :]
    return out


def derive_streams(joint: np.ndarray, topo: SkeletonTopology) -> StreamBundle:
    return StreamBundle(joint=np.asarray(joint, dtype=np.float64),
                        bone=derive_bone(joint, topo),
                        motion=derive_motion(joint))


# -- sequence / manifest files --------------------------------------------

def _dump_json(doc, path: str) -> None:
    text = json.dumps(doc, sort_keys=True, indent=1)
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(text + "\n")


def save_sequence(seq: SkeletonSequence, path: str) -> None:
    frames = [[[float(seq.coords[0, t, j]), float(seq.coords[1, t, j])]
               for j in range(NUM_JOINTS)]
              for t in range(seq.num_frames)]
    doc = {
        "subject_id": seq.subject_id,
        "condition": seq.condition,
        "seq_index": seq.seq_index,
        "view_deg": seq.view_deg,
        "frames": frames,
    }
    _dump_json(doc, path)


def load_sequence(path: str) -> SkeletonSequence:
    try:
        with open(path, encoding="utf-8") as fh:
            doc = json.load(fh)
    except json.JSONDecodeError as e:
        raise ValueError(f"{path}: malformed JSON at line {e.lineno}: {e.msg}") from None
    if not isinstance(doc, dict):
        raise ValueError(f"{path}: expected a JSON object")
    for field in ("subject_id", "condition", "seq_index", "view_deg", "frames"):
        if field not in doc:
            raise ValueError(f"{path}: missing field {field!r}")
    frames = doc["frames"]
    if not isinstance(frames, list) or not frames:
        raise ValueError(f"{path}: field 'frames' must be a non-empty list")
    t_raw = len(frames)
    coords = np.empty((2, t_raw, NUM_JOINTS))
    for t, frame in enumerate(frames):
        if not isinstance(frame, list) or len(frame) != NUM_JOINTS:
            got = len(frame) if isinstance(frame, list) else type(frame).__name__
            raise ValueError(f"{path}: frame {t}: expected {NUM_JOINTS} joints, "
                             f"got {got}")
        for j, pt in enumerate(frame):
            if (not isinstance(pt, list) or len(pt) != 2
                    or not all(isinstance(v, (int, float)) for v in pt)):
                raise ValueError(f"{path}: frame {t}, joint {j}: expected "
                                 f"[x, y] numbers, got {pt!r}")
            coords[0, t, j] = pt[0]
            coords[1, t, j] = pt[1]
    try:
        return SkeletonSequence(
            subject_id=str(doc["subject_id"]),
            condition=str(doc["condition"]),
            seq_index=int(doc["seq_index"]),
            view_deg=int(doc["view_deg"]),
            coords=coords,
        )
    except (TypeError, ValueError) as e:
        raise ValueError(f"{path}: {e}") from None


MANIFEST_NAME = "manifest.json"
SPLITS = ("train", "gallery", "probe")


def sequence_filename(seq: SkeletonSequence) -> str:
    return (f"{seq.subject_id}-{seq.condition}-{seq.seq_index:02d}"
            f"-{seq.view_deg:03d}.json")


def write_dataset(sequences, out_dir: str, split_of=None) -> str:
    """Write one JSON file per sequence plus a manifest; returns manifest path.

    ``split_of`` maps a sequence to one of train/gallery/probe; the default
    marks everything as train.
    """
    os.makedirs(out_dir, exist_ok=True)
    entries = []
    for seq in sequences:
        split = "train" if split_of is None else split_of(seq)
        if split not in SPLITS:
            raise ValueError(f"split must be one of {SPLITS}, got {split!r}")
        name = sequence_filename(seq)
        save_sequence(seq, os.path.join(out_dir, name))
        entries.append({"path": name, "split": split})
    entries.sort(key=lambda e: e["path"])
    manifest_path = os.path.join(out_dir, MANIFEST_NAME)
    _dump_json({"sequences": entries}, manifest_path)
    return manifest_path


def load_manifest(dataset_dir: str) -> list[dict]:
    path = os.path.join(dataset_dir, MANIFEST_NAME)
    if not os.path.exists(path):
        raise ValueError(f"no manifest at {path}")
    with open(path, encoding="utf-8") as fh:
        doc = json.load(fh)
    entries = doc.get("sequences")
    if not isinstance(entries, list):
        raise ValueError(f"{path}: missing 'sequences' list")
    for e in entries:
        if e.get("split") not in SPLITS or "path" not in e:
            raise ValueError(f"{path}: bad manifest entry {e!r}")
    return entries


def load_dataset(dataset_dir: str, split: str | None = None) -> list[SkeletonSequence]:
    """Load every sequence in the manifest, optionally one split only."""
    out = []
    for entry in load_manifest(dataset_dir):
        if split is not None and entry["split"] != split:
            continue
        out.append(load_sequence(os.path.join(dataset_dir, entry["path"])))
    return out
