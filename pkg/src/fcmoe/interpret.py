"""Per-subject interpretability reports.

A report combines three views of one forward pass: gate probabilities, the
ROIs each expert selected (with pooling weights and gate-weighted scores),
and attention rows of the selected ROIs aggregated to functional
communities. Scores are gate probability times pooling weight, so over all
experts and ROIs they add up to exactly 1.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import model as md
from . import numerics as nm
from .data import CommunityMap, DataError, Subject

HEAD_MODES = ("mean", "per-head")


class InterpretError(ValueError):
    """Raised when a trace cannot be turned into a report."""


# ---------------------------------------------------------------------------
# score and attention extraction


def roi_scores(trace: md.ForwardTrace, subject: int = 0) -> list[dict[int, float]]:
    """Gate-weighted pooling weights, one {roi: score} dict per expert.

    Only the selected ROIs appear; everything else is implicitly zero. The
    scores over all experts total 1 because each expert's weights total 1
    and the gate probabilities total 1.
    """
    if not trace.expert_selected or trace.gate_probs is None:
        raise InterpretError("trace carries no expert decomposition")
    n_batch = trace.gate_probs.shape[0]
    if not (0 <= subject < n_batch):
        raise InterpretError(f"subject index {subject} out of range for batch {n_batch}")
    out = []
    for e, selected in enumerate(trace.expert_selected):
        pi = float(trace.gate_probs[subject, e])
        weights = trace.expert_weights[e][subject]
        out.append({int(i): pi * float(weights[i]) for i in selected[subject]})
    return out


def attention_rows(
    trace: md.ForwardTrace,
    rois,
    layer: int = -1,
    head_mode: str = "mean",
    subject: int = 0,
) -> dict[int, np.ndarray]:
    """Rows of the softmaxed attention matrix for the given ROIs.

    Returns {roi: vector[T]} for head_mode "mean" and {roi: matrix[h, T]}
    for "per-head". ``layer`` indexes the encoder stack, negatives from the
    end.
    """
    if head_mode not in HEAD_MODES:
        raise InterpretError(f"head_mode must be one of {HEAD_MODES}, got {head_mode!r}")
    n_layers = len(trace.attention)
    if not (-n_layers <= layer < n_layers):
        raise InterpretError(f"layer {layer} out of range for {n_layers} encoder layers")
    attn = trace.attention[layer]
    n_batch, _, n_tokens, _ = attn.shape
    if not (0 <= subject < n_batch):
        raise InterpretError(f"subject index {subject} out of range for batch {n_batch}")
    rows: dict[int, np.ndarray] = {}
    for roi in rois:
        roi = int(roi)
        if not (0 <= roi < n_tokens):
            raise InterpretError(f"ROI index {roi} out of range for {n_tokens} tokens")
        per_head = attn[subject, :, roi, :]
        rows[roi] = per_head.mean(axis=0) if head_mode == "mean" else per_head.copy()
    return rows


def community_aggregate(
    rows: dict[int, np.ndarray], community_map: CommunityMap
) -> dict[str, dict[str, float]]:
    """Two-step pooling of attention rows onto community pairs.

    Selected ROIs are grouped by their own community and their rows
    averaged; each averaged row is then averaged over every target
    community's members. Source communities with no selected ROI are
    omitted; target columns cover every community present in the map.
    """
    n = community_map.n_rois
    for roi, row in rows.items():
        if not (0 <= roi < n):
            raise DataError(f"ROI {roi} is not mapped to a community")
        if np.asarray(row).shape != (n,):
            raise DataError(f"attention row for ROI {roi} has shape {np.asarray(row).shape}, expected ({n},)")
    present = community_map.present_names()
    rollup: dict[str, dict[str, float]] = {}
    for source in present:
        member_rows = [rows[roi] for roi in sorted(rows) if community_map.name_of(roi) == source]
        if not member_rows:
            continue
        source_row = np.mean(member_rows, axis=0)
        rollup[source] = {
            target: float(source_row[community_map.members(target)].mean()) for target in present
        }
    return rollup


# ---------------------------------------------------------------------------
# report assembly


@dataclass(frozen=True)
class RoiEntry:
    roi: int
    community: str
    weight: float
    score: float


@dataclass(frozen=True)
class ExpertEntry:
    index: int
    k: int
    rois: tuple[RoiEntry, ...]


@dataclass(frozen=True)
class AttentionRow:
    roi: int
    by_community: dict


@dataclass(frozen=True)
class InterpretReport:
    subject_id: str
    predicted_label: int
    prob_asd: float
    prob_hc: float
    gate_probs: tuple[float, ...]
    experts: tuple[ExpertEntry, ...]
    attention_mode: str
    attention: tuple[AttentionRow, ...]
    rollup: dict


def build_report(
    subject: Subject,
    community_map: CommunityMap,
    params: md.ModelParams,
    config: md.ModelConfig,
    layer: int = -1,
    head_mode: str = "mean",
) -> InterpretReport:
    """Forward one subject and assemble the full report."""
    if config.decoder == "cls":
        raise InterpretError(
            "decoder 'cls' has no expert decomposition; reports need 'moe' or 'pool'"
        )
    if subject.fc.shape != (config.n_rois, config.n_rois):
        raise InterpretError(
            f"subject {subject.id} has {subject.fc.shape[0]} ROIs, model expects {config.n_rois}"
        )
    if community_map.n_rois != config.n_rois:
        raise InterpretError("community map does not match the model's ROI count")

    result = md.forward(nm.Tensor(subject.fc[None, :, :]), params, config)
    trace = result.trace
    logits = trace.logits[0]
    shifted = np.exp(logits - logits.max())
    probs = shifted / shifted.sum()
    predicted = int(logits[1] > logits[0])  # tie goes to the control class

    scores = roi_scores(trace, subject=0)
    experts = []
    selected_union: set[int] = set()
    for e, per_roi in enumerate(scores):
        selected = sorted(per_roi)
        selected_union.update(selected)
        weights = trace.expert_weights[e][0]
        entries = tuple(
            RoiEntry(
                roi=roi,
                community=community_map.name_of(roi),
                weight=float(weights[roi]),
                score=per_roi[roi],
            )
            for roi in selected
        )
        experts.append(ExpertEntry(index=e, k=len(selected), rois=entries))

    mean_rows = attention_rows(trace, sorted(selected_union), layer=layer, head_mode="mean")
    present = community_map.present_names()
    if head_mode == "mean":
        reported_rows = mean_rows
    else:
        reported_rows = attention_rows(
            trace, sorted(selected_union), layer=layer, head_mode="per-head"
        )
    att_entries = []
    for roi in sorted(reported_rows):
        row = reported_rows[roi]
        if head_mode == "mean":
            by_comm = {t: float(row[community_map.members(t)].mean()) for t in present}
        else:
            by_comm = {
                t: [float(v) for v in row[:, community_map.members(t)].mean(axis=1)]
                for t in present
            }
        att_entries.append(AttentionRow(roi=roi, by_community=by_comm))

    return InterpretReport(
        subject_id=subject.id,
        predicted_label=predicted,
        prob_asd=float(probs[1]),
        prob_hc=float(probs[0]),
        gate_probs=tuple(float(p) for p in trace.gate_probs[0]),
        experts=tuple(experts),
        attention_mode=head_mode,
        attention=tuple(att_entries),
        rollup=community_aggregate(mean_rows, community_map),
    )


# ---------------------------------------------------------------------------
# serialization


def _r6(value):
    if isinstance(value, list):
        return [round(float(v), 6) for v in value]
    return round(float(value), 6)


def report_to_dict(report: InterpretReport) -> dict:
    """JSON-ready dict; floats rounded to 6 decimal places, fixed key order."""
    return {
        "subject_id": report.subject_id,
        "prediction": {
            "label": report.predicted_label,
            "prob_asd": _r6(report.prob_asd),
            "prob_hc": _r6(report.prob_hc),
        },
        "gate_probs": [_r6(p) for p in report.gate_probs],
        "experts": [
            {
                "index": ex.index,
                "k": ex.k,
                "rois": [
                    {
                        "roi": r.roi,
                        "community": r.community,
                        "weight": _r6(r.weight),
                        "score": _r6(r.score),
                    }
                    for r in ex.rois
                ],
            }
            for ex in report.experts
        ],
        "attention": {
            "mode": report.attention_mode,
            "rows": [
                {"roi": row.roi, "by_community": {k: _r6(v) for k, v in row.by_community.items()}}
                for row in report.attention
            ],
        },
        "rollup": {
            source: {target: _r6(v) for target, v in targets.items()}
            for source, targets in report.rollup.items()
        },
    }


def parse_report_dict(payload: dict) -> dict:
    """Round-trip helper: json.loads of an emitted file gives this back."""
    return json.loads(json.dumps(payload))


def _check_nonempty(report: InterpretReport) -> None:
    for ex in report.experts:
        if not ex.rois:
            raise InterpretError(f"expert {ex.index} selected no ROIs; reports need k >= 1")


def emit_json(report: InterpretReport, path) -> Path:
    _check_nonempty(report)
    path = Path(path)
    path.write_text(json.dumps(report_to_dict(report), indent=1) + "\n", encoding="utf-8")
    return path


def emit_csv(report: InterpretReport, scores_path, attention_path) -> tuple[Path, Path]:
    """CSV pair: per-expert ROI scores, and selected-ROI attention pooled
    over heads and target-community members. Values use 6 decimal places.
    """
    _check_nonempty(report)
    scores_path, attention_path = Path(scores_path), Path(attention_path)
    with open(scores_path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["expert", "roi_index", "community", "weight", "score"])
        for ex in report.experts:
            for r in ex.rois:
                writer.writerow([ex.index, r.roi, r.community, f"{r.weight:.6f}", f"{r.score:.6f}"])
    with open(attention_path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["roi_index", "target_community", "mean_attention"])
        for row in report.attention:
            for target, value in row.by_community.items():
                mean_value = float(np.mean(value)) if isinstance(value, list) else value
                writer.writerow([row.roi, target, f"{mean_value:.6f}"])
    return scores_path, attention_path


def emit_report(report: InterpretReport, out_dir, format: str = "json") -> list[Path]:
    """Write report files named after the subject; returns the paths."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    sid = report.subject_id
    if format == "json":
        return [emit_json(report, out_dir / f"{sid}.json")]
    if format == "csv":
        return list(
            emit_csv(report, out_dir / f"{sid}_roi_scores.csv", out_dir / f"{sid}_attention.csv")
        )
    if format == "both":
        return emit_report(report, out_dir, "json") + emit_report(report, out_dir, "csv")
    raise InterpretError(f"unknown report format {format!r}")
