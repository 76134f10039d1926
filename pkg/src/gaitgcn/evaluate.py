"""Cross-view rank-1 retrieval: gallery/probe filtering, nearest-neighbor
accuracy with identical-view exclusion, report formatting, and the fusion
weight sweep."""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field

import numpy as np

from .model import EmbeddingRecord, fuse_two_branch
from .skeleton import VIEWS_DEG


def _default_probe_sets() -> dict:
    return {"NM": (5, 6), "BG": (1, 2), "CL": (1, 2)}


@dataclass
class EvalProtocol:
    """First four normal-walk sequences form the gallery; later normal
    walks and both altered conditions are probes, scored per view pair."""
    gallery_condition: str = "NM"
    gallery_seqs: tuple = (1, 2, 3, 4)
    probe_sets: dict = field(default_factory=_default_probe_sets)
    views: tuple = VIEWS_DEG

    def is_gallery(self, rec) -> bool:
        return (rec.condition == self.gallery_condition
                and rec.seq_index in self.gallery_seqs
                and rec.view_deg in self.views)

    def is_probe(self, rec) -> bool:
        seqs = self.probe_sets.get(rec.condition)
        return (seqs is not None and rec.seq_index in seqs
                and rec.view_deg in self.views)


def split_by_protocol(records, protocol: EvalProtocol):
    """(gallery, probe) sublists; records matching neither are dropped."""
    gallery = [r for r in records if protocol.is_gallery(r)]
    probe = [r for r in records if protocol.is_probe(r)]
    return gallery, probe


@dataclass
class AccuracyTable:
    """Per-condition, per-probe-view accuracies plus condition means.

    A cell is None when no probes exist for that view or no non-identical
    gallery view could score it.
    """
    conditions: tuple
    views: tuple
    cells: dict
    means: dict

    def overall_mean(self) -> float:
        vals = [m for m in self.means.values() if m is not None]
        if not vals:
            raise ValueError("accuracy table has no defined condition means")
        return float(np.mean(vals))

    def to_dict(self) -> dict:
        return {
            "views": list(self.views),
            "conditions": list(self.conditions),
            "cells": {c: [self.cells[(c, v)] for v in self.views]
                      for c in self.conditions},
            "means": dict(self.means),
        }


def _nearest_subject(vec: np.ndarray, candidates) -> str:
    """Subject of the closest candidate under squared Euclidean distance.

    Exact distance ties resolve to the lowest subject id, then the lowest
    sequence index, so results never depend on input order.
    """
    best = None
    for rec in candidates:
        d = rec.vector - vec
        key = (float(d @ d), rec.subject_id, rec.seq_index)
        if best is None or key < best[0]:
            best = (key, rec.subject_id)
    return best[1]


def evaluate_rank1(gallery, probe, protocol: EvalProtocol | None = None
                   ) -> AccuracyTable:
    """Identity retrieval accuracy, averaged with identical-view exclusion.

    Each (probe view, gallery view != probe view) pair is scored by
    nearest-neighbor subject prediction within that single gallery view;
    a probe view's accuracy is the mean over its scored gallery views and
    a condition's mean runs over its defined probe views.
    """
    protocol = protocol or EvalProtocol()
    gallery = [r for r in gallery if protocol.is_gallery(r)]
    probe = [r for r in probe if protocol.is_probe(r)]
    if not gallery:
        raise ValueError("no gallery records match the protocol filter")
    if not probe:
        raise ValueError("no probe records match the protocol filter")

    by_view = {v: [r for r in gallery if r.view_deg == v]
               for v in protocol.views}
    conditions = tuple(protocol.probe_sets)
    cells = {}
    means = {}
    for cond in conditions:
        view_accs = []
        for pv in protocol.views:
            probes = [r for r in probe
                      if r.condition == cond and r.view_deg == pv]
            if not probes:
                warnings.warn(f"no {cond} probes at view {pv}; cell excluded")
                cells[(cond, pv)] = None
                continue
            pair_accs = []
            for gv in protocol.views:
                if gv == pv:
                    continue
                candidates = by_view[gv]
                if not candidates:
                    warnings.warn(f"no gallery at view {gv}; pair "
                                  f"({cond}, probe {pv}, gallery {gv}) excluded")
                    continue
                hits = sum(_nearest_subject(r.vector, candidates)
                           == r.subject_id for r in probes)
                pair_accs.append(hits / len(probes))
            if not pair_accs:
                warnings.warn(f"probe view {pv} of {cond} has no scorable "
                              "gallery views; cell excluded")
                cells[(cond, pv)] = None
                continue
            acc = float(np.mean(pair_accs))
            cells[(cond, pv)] = acc
            view_accs.append(acc)
        means[cond] = float(np.mean(view_accs)) if view_accs else None
    return AccuracyTable(conditions=conditions, views=tuple(protocol.views),
                         cells=cells, means=means)


def format_accuracy_report(table: AccuracyTable) -> str:
    """Plain-text table: one row per condition per probe view, plus means."""
    lines = ["condition view accuracy"]
    for cond in table.conditions:
        for v in table.views:
            cell = table.cells[(cond, v)]
            shown = "undefined" if cell is None else f"{cell:.4f}"
            lines.append(f"{cond} {v} {shown}")
        mean = table.means[cond]
        shown = "undefined" if mean is None else f"{mean:.4f}"
        lines.append(f"{cond} mean {shown}")
    return "\n".join(lines) + "\n"


def pair_records(f_m, f_a):
    """Match model and appearance records by identity key, in f_m order."""
    a_by_key = {}
    for rec in f_a:
        if rec.key() in a_by_key:
            raise ValueError(f"duplicate appearance record for {rec.key()}")
        a_by_key[rec.key()] = rec
    if len(f_m) != len(a_by_key):
        raise ValueError(f"record mismatch: {len(f_m)} model records vs "
                         f"{len(a_by_key)} appearance records")
    pairs = []
    for rec in f_m:
        other = a_by_key.get(rec.key())
        if other is None:
            raise ValueError(f"no appearance record for {rec.key()}")
        pairs.append((rec, other))
    return pairs


def lambda_sweep(f_m, f_a, lambdas, protocol: EvalProtocol | None = None
                 ) -> list[dict]:
    """Fuse at each weight and run the retrieval protocol.

    Returns one row per weight: {"lambda", per-condition means, "Mean"}.
    """
    protocol = protocol or EvalProtocol()
    pairs = pair_records(f_m, f_a)
    rows = []
    for lam in lambdas:
        fused = [fuse_two_branch(m, a, lam) for m, a in pairs]
        gallery, probe = split_by_protocol(fused, protocol)
        table = evaluate_rank1(gallery, probe, protocol)
        row = {"lambda": float(lam)}
        for cond in table.conditions:
            row[cond] = table.means[cond]
        row["Mean"] = table.overall_mean()
        rows.append(row)
    return rows


def format_sweep_report(rows) -> str:
    """One row per fusion weight with NM, BG, CL and Mean columns."""
    conds = [k for k in rows[0] if k not in ("lambda", "Mean")]
    lines = ["lambda " + " ".join(conds) + " Mean"]
    for row in rows:
        cells = " ".join("undefined" if row[c] is None else f"{row[c]:.4f}"
                         for c in conds)
        lines.append(f"{row['lambda']:g} {cells} {row['Mean']:.4f}")
    return "\n".join(lines) + "\n"


def dump_report_json(doc, path: str) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(json.dumps(doc, sort_keys=True, indent=1) + "\n")
