"""Synthetic walking-sequence generator for desk-scale experiments.

Each subject gets a persistent gait signature: stride frequency, limb
swing amplitudes, per-limb phase offsets, segment lengths and sway/bob
magnitudes drawn once from the dataset seed. A sequence is synthesized
as 3D joint trajectories from that signature, perturbed per sequence, then every requested view is produced by rotating the same 3D
motion about the vertical axis and projecting orthographically, so views
of one sequence differ only by viewpoint. Output coordinates are
min-max normalized like real data.
"""

from __future__ import annotations

import numpy as np

from .skeleton import (CONDITIONS, NUM_JOINTS, SkeletonSequence,
                       normalize_coords)

# index shorthands into the 15-joint order
_NOSE, _NECK = 0, 1
_RSHO, _RELB, _RWRI = 2, 3, 4
_LSHO, _LELB, _LWRI = 5, 6, 7
_MHIP, _RHIP, _RKNE, _RANK = 8, 9, 10, 11
_LHIP, _LKNE, _LANK = 12, 13, 14


def subject_signature(seed: int, subject_index: int) -> dict:
    """Draw the per-subject gait parameters; fixed across conditions."""
    rng = np.random.default_rng(np.random.SeedSequence([seed, subject_index]))
    return {
        "freq": 0.9 + 0.5 * rng.random(),            # strides per 30 frames
        "leg_amp": 0.45 + 0.25 * rng.random(),       # thigh swing, radians
        "knee_amp": 0.5 + 0.4 * rng.random(),
        "arm_amp": 0.3 + 0.4 * rng.random(),
        "arm_phase": 0.25 * rng.standard_normal(),
        "leg_phase": 0.25 * rng.standard_normal(),
        "sway": 0.02 + 0.025 * rng.random(),         # lateral hip sway
        "bob": 0.015 + 0.02 * rng.random(),          # vertical bounce
        "thigh": 0.40 * (1 + 0.12 * rng.standard_normal()),
        "shank": 0.42 * (1 + 0.12 * rng.standard_normal()),
        "uarm": 0.26 * (1 + 0.12 * rng.standard_normal()),
        "farm": 0.24 * (1 + 0.12 * rng.standard_normal()),
        "torso": 0.46 * (1 + 0.08 * rng.standard_normal()),
        "shoulder_w": 0.18 * (1 + 0.1 * rng.standard_normal()),
        "hip_w": 0.10 * (1 + 0.1 * rng.standard_normal()),
        "head": 0.16 * (1 + 0.1 * rng.standard_normal()),
    }


def _condition_adjust(sig: dict, condition: str) -> dict:
    """Carrying a bag pins one arm; a coat damps leg articulation."""
    sig = dict(sig)
    if condition == "BG":
        sig["arm_amp_r"] = 0.1 * sig["arm_amp"]
        sig["arm_amp_l"] = sig["arm_amp"]
        sig["sway"] *= 1.3
    elif condition == "CL":
        sig["arm_amp_r"] = sig["arm_amp_l"] = sig["arm_amp"]
        sig["leg_amp"] *= 0.75
        sig["knee_amp"] *= 0.7
        sig["bob"] *= 0.8
    else:
        sig["arm_amp_r"] = sig["arm_amp_l"] = sig["arm_amp"]
    return sig


def motion_3d(sig: dict, t_frames: int, phase0: float,
              noise: np.ndarray | None = None) -> np.ndarray:
    """Joint trajectories (3, T, 15) in body-centered space.

    Axes: x lateral (subject's left positive), y up, z walking direction.
    The subject walks in place; limbs articulate about a fixed pelvis.
    """
    t = np.arange(t_frames)
    phi = 2.0 * np.pi * sig["freq"] * t / 30.0 + phase0

    p = np.zeros((3, t_frames, NUM_JOINTS))

    sway = sig["sway"] * np.sin(phi)
    bob = sig["bob"] * np.cos(2.0 * phi)
    hip_y = sig["thigh"] + sig["shank"]

    p[0, :, _MHIP] = sway
    p[1, :, _MHIP] = hip_y + bob

    # pelvis rotates slightly about the vertical axis with the stride
    pelv = 0.15 * np.sin(phi)
    for jh, side in ((_RHIP, -1.0), (_LHIP, 1.0)):
        p[0, :, jh] = sway + side * sig["hip_w"] * np.cos(pelv)
        p[1, :, jh] = hip_y + bob
        p[2, :, jh] = side * sig["hip_w"] * np.sin(pelv)

    # legs: thigh pendulum in the sagittal plane, knee flexion during swing
    for jh, jk, ja, side_phase in ((_RHIP, _RKNE, _RANK, 0.0),
                                   (_LHIP, _LKNE, _LANK, np.pi)):
        th = sig["leg_amp"] * np.sin(phi + side_phase + sig["leg_phase"])
        flex = sig["knee_amp"] * 0.5 * (1.0 + np.cos(phi + side_phase
                                                     + sig["leg_phase"]))
        sh = th - flex
        p[0, :, jk] = p[0, :, jh]
        p[1, :, jk] = p[1, :, jh] - sig["thigh"] * np.cos(th)
        p[2, :, jk] = p[2, :, jh] + sig["thigh"] * np.sin(th)
        p[0, :, ja] = p[0, :, jk]
        p[1, :, ja] = p[1, :, jk] - sig["shank"] * np.cos(sh)
        p[2, :, ja] = p[2, :, jk] + sig["shank"] * np.sin(sh)

    # torso counter-sways; shoulders counter-rotate against the pelvis
    p[0, :, _NECK] = sway * 0.4
    p[1, :, _NECK] = hip_y + bob + sig["torso"]
    sh_rot = -pelv
    for js, side, amp_key in ((_RSHO, -1.0, "arm_amp_r"),
                              (_LSHO, 1.0, "arm_amp_l")):
        p[0, :, js] = p[0, :, _NECK] + side * sig["shoulder_w"] * np.cos(sh_rot)
        p[1, :, js] = p[1, :, _NECK] - 0.02
        p[2, :, js] = side * sig["shoulder_w"] * np.sin(sh_rot)
        # arms swing opposite to the same-side leg
        side_phase = np.pi if side < 0 else 0.0
        ja = sig[amp_key] * np.sin(phi + side_phase + sig["arm_phase"])
        je, jw = (_RELB, _RWRI) if side < 0 else (_LELB, _LWRI)
        p[0, :, je] = p[0, :, js]
        p[1, :, je] = p[1, :, js] - sig["uarm"] * np.cos(ja)
        p[2, :, je] = p[2, :, js] + sig["uarm"] * np.sin(ja)
        fo = ja + 0.35  # constant elbow flexion
        p[0, :, jw] = p[0, :, je]
        p[1, :, jw] = p[1, :, je] - sig["farm"] * np.cos(fo)
        p[2, :, jw] = p[2, :, je] + sig["farm"] * np.sin(fo)

    p[0, :, _NOSE] = p[0, :, _NECK]
    p[1, :, _NOSE] = p[1, :, _NECK] + sig["head"] + 0.3 * bob
    p[2, :, _NOSE] = 0.05

    if noise is not None:
        p = p + noise
    return p


def project_view(points: np.ndarray, view_deg: float) -> np.ndarray:
    """Rotate 3D points (3, T, V) about the vertical axis and project.

    View 0 faces the subject; 90 is the full side profile. Output is
    (2, T, V) image-style coordinates with y growing downward.
    """
    beta = np.deg2rad(view_deg)
    x = points[0] * np.cos(beta) + points[2] * np.sin(beta)
    y = -points[1]
    return np.stack([x, y])


def generate_sequence(seed: int, subject_index: int, condition: str,
                      seq_index: int, view_deg: int, t_frames: int,
                      subject_id: str | None = None) -> SkeletonSequence:
    """One deterministic sequence; views share the underlying 3D motion."""
    if condition not in CONDITIONS:
        raise ValueError(f"condition must be one of {CONDITIONS}, got {condition!r}")
    sig = _condition_adjust(subject_signature(seed, subject_index), condition)
    cond_idx = CONDITIONS.index(condition)
    rng = np.random.default_rng(np.random.SeedSequence(
        [seed, subject_index, cond_idx, seq_index]))
    phase0 = 2.0 * np.pi * rng.random()
    noise = 0.004 * rng.standard_normal((3, t_frames, NUM_JOINTS))
    pts = motion_3d(sig, t_frames, phase0, noise)
    coords = project_view(pts, view_deg)
    seq = SkeletonSequence(
        subject_id=subject_id or f"S{subject_index + 1:03d}",
        condition=condition,
        seq_index=seq_index,
        view_deg=int(view_deg),
        coords=coords,
    )
    return normalize_coords(seq)


def generate_synthetic_dataset(n_subjects: int, seqs_per_subject: int,
                               views, t_frames: int, seed: int,
                               conditions=("NM",)) -> list[SkeletonSequence]:
    """Full factorial dataset: subjects x conditions x sequences x views."""
    if n_subjects < 1 or seqs_per_subject < 1 or t_frames < 1:
        raise ValueError("n_subjects, seqs_per_subject and t_frames must be >= 1")
    views = [int(v) for v in views]
    if not views:
        raise ValueError("need at least one view")
    out = []
    for s in range(n_subjects):
        for cond in conditions:
            for q in range(1, seqs_per_subject + 1):
                for v in views:
                    out.append(generate_sequence(seed, s, cond, q, v, t_frames))
    return out
