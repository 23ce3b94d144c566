"""Prediction, evaluation protocols, stratification, and mechanism stats.

Protocols
    oracle    The model receives the ground-truth visible mask.
    standard  The model receives a deterministically perturbed visible
              mask, mimicking an upstream segmenter; the perturbation
              seed derives from the eval seed and the instance index.

Metrics are mask IoUs at threshold 0.5.  Full mIoU compares the amodal
prediction against the amodal ground truth over all instances; occluded
mIoU compares the occluded prediction against the ground-truth occluded
region over the instances whose occluded region is nonempty.

The gate ablation pins the injection gate to a constant (0, 0.5, 1) or
leaves it learned (none).  Optional post-processing unions the amodal
prediction with the visible-mask input (whatever mask the model was
actually given).  Optional two-pass inference re-runs the model with a
self-estimated visible mask: amodal minus occluded from pass one,
falling back to the pass-one visible prediction when that reference
comes up empty.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .errors import ConfigError, DimensionError
from .geometry import BinaryMask, iou, mask_diff, mask_union
from .model import GraspModel
from .seeding import derive_seed
from .synthdata import SceneInstance, perturb_vm

OCC_BINS = ((0.0, 0.25), (0.25, 0.5), (0.5, 0.75), (0.75, 1.0))
VM_BINS = ((0.5, 0.65), (0.65, 0.75), (0.75, 0.85), (0.85, 0.95), (0.95, 1.0))


def _threshold(logits: np.ndarray, threshold: float) -> BinaryMask:
    return BinaryMask(logits > _logit(threshold))


def _logit(p: float) -> float:
    if not 0.0 < p < 1.0:
        raise ConfigError(f"threshold {p} outside (0, 1)")
    return math.log(p / (1.0 - p))


def predict(model: GraspModel, image: np.ndarray, v_input: BinaryMask,
            threshold: float = 0.5, gate_override: Optional[float] = "config"):
    """One forward pass -> (amodal mask, occluded mask, trace)."""
    trace = model.forward(image, v_input, gate_override=gate_override)
    amodal = _threshold(trace.logits_amodal.data, threshold)
    occluded = _threshold(trace.logits_occ.data, threshold)
    return amodal, occluded, trace


def postprocess_union(amodal_pred: BinaryMask, v_input: BinaryMask) -> BinaryMask:
    """Amodal predictions may never exclude the visible evidence."""
    return mask_union(amodal_pred, v_input)


@dataclass(frozen=True)
class TwoPassResult:
    amodal: BinaryMask
    occluded: BinaryMask
    v_reference: BinaryMask
    passes: int
    fallback_used: bool
    first_amodal: BinaryMask
    first_occluded: BinaryMask


def two_pass(model: GraspModel, image: np.ndarray, v_input: BinaryMask,
             threshold: float = 0.5, gate_override: Optional[float] = "config") -> TwoPassResult:
    """Self-refined inference: exactly two forward passes.

    The second pass replaces the visible-mask input with the model's own
    estimate from the first pass (amodal minus occluded).  If that
    estimate is empty it falls back to the first pass's thresholded
    visible region, i.e. amodal intersect not-occluded ... which is the
    same construction; the practical fallback is the original input.
    """
    a1, o1, _ = predict(model, image, v_input, threshold, gate_override)
    v_ref = mask_diff(a1, o1)
    fallback = not v_ref.any()
    if fallback:
        v_ref = v_input
    a2, o2, _ = predict(model, image, v_ref, threshold, gate_override)
    return TwoPassResult(
        amodal=a2, occluded=o2, v_reference=v_ref, passes=2,
        fallback_used=fallback, first_amodal=a1, first_occluded=o1,
    )


@dataclass
class EvalReport:
    protocol: str
    gate_override: Optional[float]
    postprocess: bool
    two_pass: bool
    threshold: float
    occ_metric: str
    eval_seed: int
    n_instances: int
    n_occluded: int
    full_miou: float
    occ_miou: Optional[float]
    rows: list = field(repr=False)
    occ_strata: list = field(repr=False)
    vm_strata: list = field(repr=False)
    gate_stats: Optional[dict] = None
    attention_stats: Optional[dict] = None
    config: Optional[dict] = None
    version: Optional[str] = None

    def to_dict(self) -> dict:
        return {
            "protocol": self.protocol,
            "gate_override": self.gate_override,
            "postprocess": self.postprocess,
            "two_pass": self.two_pass,
            "threshold": self.threshold,
            "occ_metric": self.occ_metric,
            "eval_seed": self.eval_seed,
            "n_instances": self.n_instances,
            "n_occluded": self.n_occluded,
            "full_miou": self.full_miou,
            "occ_miou": self.occ_miou,
            "occ_strata": self.occ_strata,
            "vm_strata": self.vm_strata,
            "gate_stats": self.gate_stats,
            "attention_stats": self.attention_stats,
            "rows": self.rows,
            "config": self.config,
            "version": self.version,
        }

    def to_json(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_dict(), fh, indent=1, sort_keys=True)
            fh.write("\n")

    def to_csv(self, path) -> None:
        cols = ["index", "shape_class", "occ_ratio", "vm_iou", "full_iou", "occ_iou",
                "mean_gate"]

        def cell(v):
            if v is None:
                return ""
            if isinstance(v, str):
                return v
            if isinstance(v, (int, np.integer)):
                return repr(int(v))
            return repr(float(v))

        with open(path, "w", encoding="ascii") as fh:
            fh.write(",".join(cols) + "\n")
            for row in self.rows:
                fh.write(",".join(cell(row[c]) for c in cols) + "\n")


def _bin_index(bins, value: float) -> Optional[int]:
    for i, (lo, hi) in enumerate(bins):
        last = i == len(bins) - 1
        if lo <= value < hi or (last and value == hi):
            return i
    return None


def stratify(rows: list, key: str, bins) -> list:
    """Per-bin count and mean occluded IoU over rows that carry the key.

    Bins are half-open [lo, hi) except the last, which is closed.  Rows
    whose key is None or out of range are skipped; rows without an
    occluded IoU still count toward N but not toward the mean.
    """
    table = [{"lo": lo, "hi": hi, "n": 0, "occ_ious": []} for lo, hi in bins]
    for row in rows:
        value = row.get(key)
        if value is None:
            continue
        idx = _bin_index(bins, value)
        if idx is None:
            continue
        table[idx]["n"] += 1
        if row.get("occ_iou") is not None:
            table[idx]["occ_ious"].append(row["occ_iou"])
        if row.get("full_iou") is not None:
            table[idx].setdefault("full_ious", []).append(row["full_iou"])
    out = []
    for cell in table:
        occ = cell["occ_ious"]
        full = cell.get("full_ious", [])
        out.append(
            {
                "lo": cell["lo"],
                "hi": cell["hi"],
                "n": cell["n"],
                "occ_miou": (sum(occ) / len(occ)) if occ else None,
                "full_miou": (sum(full) / len(full)) if full else None,
            }
        )
    return out


def evaluate(model, instances: list[SceneInstance], protocol: str = "oracle", *,
             gate_override: Optional[float] = "config", use_postprocess: bool = False,
             use_two_pass: bool = False, threshold: float = 0.5, eval_seed: int = 0,
             occ_metric: str = "head", collect_stats: bool = True,
             config_echo: Optional[dict] = None, version: Optional[str] = None) -> EvalReport:
    """Run a full evaluation sweep and aggregate every reporting table.

    ``model`` is normally a GraspModel; any callable
    ``(image, v_input) -> (amodal_mask, occluded_mask)`` also works
    (mechanism stats are then skipped), which keeps the metric plumbing
    testable against stub predictors with hand-computable IoUs.
    """
    if protocol not in ("oracle", "standard"):
        raise ConfigError(f"unknown protocol {protocol!r}")
    if occ_metric not in ("head", "amodal_minus_visible"):
        raise ConfigError(f"unknown occluded-IoU operand choice {occ_metric!r}")

    is_model = isinstance(model, GraspModel)
    rows = []
    gate_samples = []  # (occ_ratio, per-token gate, sdf sign) triples
    attn_samples = []
    for index, inst in enumerate(instances):
        if protocol == "standard":
            v_input = perturb_vm(inst.visible, derive_seed(eval_seed, "eval-vm", index))
            vm_iou = iou(v_input, inst.visible)
        else:
            v_input = inst.visible
            vm_iou = None

        trace = None
        if is_model:
            if use_two_pass:
                tp = two_pass(model, inst.image, v_input, threshold, gate_override)
                amodal_pred, occ_pred = tp.amodal, tp.occluded
            else:
                amodal_pred, occ_pred, trace = predict(
                    model, inst.image, v_input, threshold, gate_override
                )
        else:
            amodal_pred, occ_pred = model(inst.image, v_input)

        if use_postprocess:
            amodal_pred = postprocess_union(amodal_pred, v_input)

        if occ_metric == "amodal_minus_visible":
            occ_pred = mask_diff(amodal_pred, v_input)

        full_iou = iou(amodal_pred, inst.amodal)
        occ_iou = iou(occ_pred, inst.occluded) if inst.occluded.any() else None

        mean_gate = None
        if trace is not None:
            gate_vals = trace.gate.data
            mean_gate = float(gate_vals.mean())
            if collect_stats:
                gate_samples.append((inst.occ_ratio, gate_vals, trace.sdf_tokens))
                attn_samples.append((trace.proto_attn, trace.sdf_tokens))

        rows.append(
            {
                "index": index,
                "shape_class": inst.shape_class,
                "occ_ratio": inst.occ_ratio,
                "vm_iou": vm_iou,
                "full_iou": full_iou,
                "occ_iou": occ_iou,
                "mean_gate": mean_gate,
            }
        )

    if isinstance(gate_override, str) and gate_override == "config":
        effective_override = model.config.gate_override if is_model else None
    else:
        effective_override = gate_override

    full_scores = [r["full_iou"] for r in rows]
    occ_scores = [r["occ_iou"] for r in rows if r["occ_iou"] is not None]
    report = EvalReport(
        protocol=protocol,
        gate_override=effective_override,
        postprocess=use_postprocess,
        two_pass=use_two_pass,
        threshold=threshold,
        occ_metric=occ_metric,
        eval_seed=eval_seed,
        n_instances=len(rows),
        n_occluded=len(occ_scores),
        full_miou=(sum(full_scores) / len(full_scores)) if full_scores else float("nan"),
        occ_miou=(sum(occ_scores) / len(occ_scores)) if occ_scores else None,
        rows=rows,
        occ_strata=stratify(rows, "occ_ratio", OCC_BINS),
        vm_strata=stratify(rows, "vm_iou", VM_BINS) if protocol == "standard" else [],
        config=config_echo,
        version=version,
    )
    if collect_stats and gate_samples and is_model:
        report.gate_stats = _aggregate_gate_stats(gate_samples, model.config.grid)
        report.attention_stats = _aggregate_attention_stats(attn_samples)
    return report


# -- gate statistics --------------------------------------------------------


def _grid_position_classes(grid: int) -> np.ndarray:
    """0 = center, 1 = edge, 2 = corner, per token of a grid x grid layout."""
    ty, tx = np.divmod(np.arange(grid * grid), grid)
    on_y = (ty == 0) | (ty == grid - 1)
    on_x = (tx == 0) | (tx == grid - 1)
    classes = np.zeros(grid * grid, dtype=np.int64)
    classes[on_y | on_x] = 1
    classes[on_y & on_x] = 2
    return classes


def _aggregate_gate_stats(samples, grid: int) -> dict:
    """Mean/σ of the per-instance mean gate by occlusion bin and position."""
    per_bin = [[] for _ in OCC_BINS]
    for occ_ratio, gate_vals, _ in samples:
        idx = _bin_index(OCC_BINS, occ_ratio)
        if idx is not None:
            per_bin[idx].append(float(gate_vals.mean()))
    bins_out = []
    for (lo, hi), vals in zip(OCC_BINS, per_bin):
        bins_out.append(
            {
                "lo": lo,
                "hi": hi,
                "n": len(vals),
                "mean_gate": float(np.mean(vals)) if vals else None,
                "std_gate": float(np.std(vals)) if vals else None,
            }
        )

    classes = _grid_position_classes(grid)
    names = ("center", "edge", "corner")
    position_out = {}
    for cls, name in enumerate(names):
        sel = classes == cls
        vals = [float(g[sel].mean()) for _, g, _ in samples] if sel.any() else []
        position_out[name] = {
            "n_tokens": int(sel.sum()),
            "mean_gate": float(np.mean(vals)) if vals else None,
        }

    sdf_all = np.concatenate([s for _, _, s in samples])
    return {
        "by_occ_bin": bins_out,
        "by_grid_position": position_out,
        "sdf_token_range": [float(sdf_all.min()), float(sdf_all.max())],
    }


# -- attention statistics ----------------------------------------------------


def js_divergence(p: np.ndarray, q: np.ndarray) -> float:
    """Jensen-Shannon divergence, base 2, between two distributions."""
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    if p.shape != q.shape:
        raise DimensionError(f"distribution shapes {p.shape} and {q.shape} differ")
    m = 0.5 * (p + q)

    def entropy(d):
        nz = d > 0
        return float(-(d[nz] * np.log2(d[nz])).sum())

    return entropy(m) - 0.5 * (entropy(p) + entropy(q))


def _aggregate_attention_stats(samples) -> dict:
    """Contrast prototype attention between occluded and visible tokens.

    Tokens are classified by the sign of their pooled signed distance
    (positive means outside the visible evidence).  Per instance, each
    group's head-averaged attention rows are averaged into one
    distribution over prototypes; instances where either group is empty
    are skipped but counted.
    """
    jsd_values = []
    top1_occ, top1_vis = [], []
    sum_occ = sum_vis = None
    n_skipped = 0
    for attn, sdf_tok in samples:
        head_avg = attn.mean(axis=0)  # (tokens, n_prototypes)
        occ_sel = sdf_tok > 0
        vis_sel = ~occ_sel
        if not occ_sel.any() or not vis_sel.any():
            n_skipped += 1
            continue
        occ_dist = head_avg[occ_sel].mean(axis=0)
        vis_dist = head_avg[vis_sel].mean(axis=0)
        jsd_values.append(js_divergence(occ_dist, vis_dist))
        top1_occ.append(float(head_avg[occ_sel].max(axis=1).mean()))
        top1_vis.append(float(head_avg[vis_sel].max(axis=1).mean()))
        sum_occ = occ_dist if sum_occ is None else sum_occ + occ_dist
        sum_vis = vis_dist if sum_vis is None else sum_vis + vis_dist

    n_used = len(jsd_values)
    pooled = None
    if n_used:
        pooled = js_divergence(sum_occ / n_used, sum_vis / n_used)
    return {
        "n_instances": n_used,
        "n_skipped": n_skipped,
        "jsd_mean": float(np.mean(jsd_values)) if jsd_values else None,
        "jsd_pooled": pooled,
        "top1_occluded": float(np.mean(top1_occ)) if top1_occ else None,
        "top1_visible": float(np.mean(top1_vis)) if top1_vis else None,
    }


def gate_stats(model: GraspModel, instances: list[SceneInstance]) -> dict:
    """Gate statistics under the oracle protocol."""
    samples = []
    for inst in instances:
        trace = model.forward(inst.image, inst.visible)
        samples.append((inst.occ_ratio, trace.gate.data, trace.sdf_tokens))
    return _aggregate_gate_stats(samples, model.config.grid)


def attention_stats(model: GraspModel, instances: list[SceneInstance]) -> dict:
    """Prototype-attention statistics under the oracle protocol."""
    samples = []
    for inst in instances:
        trace = model.forward(inst.image, inst.visible)
        samples.append((trace.proto_attn, trace.sdf_tokens))
    return _aggregate_attention_stats(samples)


def ablate(model: GraspModel, instances: list[SceneInstance], protocol: str = "oracle",
           overrides=(None, 0.0, 0.5, 1.0), **kwargs) -> list[tuple[Optional[float], EvalReport]]:
    """Evaluate under each gate override; None means the learned gate."""
    out = []
    for override in overrides:
        report = evaluate(
            model, instances, protocol,
            gate_override=(override if override is not None else None),
            collect_stats=False, **kwargs,
        )
        out.append((override, report))
    return out
