"""Driving-task evaluation: grounding mAP, open-loop planning, ORA scores.

Boxes live on the inclusive integer grid [0, 999]^2; IoU is exact
integer arithmetic with a single final division. Planning trajectories
are six (x, y) waypoints on a fixed 0.5 s grid covering 3 s. Collision
checks run a separating-axis test on oriented rectangles; touching
boundaries do not count as collision (consistent with a positive
intersection-area oracle). ORA accuracies are exist-gated: the
conditional fields only score on samples where existence was predicted
correctly and the ground truth says the risk exists. A degenerate
denominator yields None, never 0 or 100.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Mapping, Sequence

__all__ = [
    "NormalizedBox",
    "Detection",
    "GroundTruthBox",
    "TrajectoryPlan",
    "AgentBox",
    "OraSample",
    "OraReport",
    "GroundingReport",
    "iou",
    "grounding_map",
    "grounding_map_report",
    "risk_grounding_map",
    "l2_error",
    "trajectory_collides",
    "collision_rate",
    "ora_score",
    "HORIZONS",
    "ORA_LEVELS",
    "ORA_CATEGORIES",
]

GRID_MAX = 999
HORIZONS = ("1s", "2s", "3s")
_HORIZON_LAST_INDEX = {"1s": 1, "2s": 3, "3s": 5}
WAYPOINT_COUNT = 6
WAYPOINT_INTERVAL_S = 0.5

ORA_LEVELS = ("low", "medium", "high")
ORA_CATEGORIES = (
    "view_obstruction",
    "collision_possibility",
    "traffic_rule_violation",
    "potential_risk",
)
ORA_GATING_MODES = ("correct_exist", "all_gt_true")


@dataclass(frozen=True)
class NormalizedBox:
    """Axis-aligned box with integer corners on the inclusive 0..999 grid."""

    x1: int
    y1: int
    x2: int
    y2: int

    def __post_init__(self) -> None:
        for name in ("x1", "y1", "x2", "y2"):
            v = getattr(self, name)
            if not isinstance(v, int) or isinstance(v, bool):
                raise TypeError(f"{name} must be an int, got {type(v).__name__}")
            if not 0 <= v <= GRID_MAX:
                raise ValueError(f"{name}={v} outside [0, {GRID_MAX}]")
        if self.x2 < self.x1 or self.y2 < self.y1:
            raise ValueError("box corners must satisfy x1 <= x2 and y1 <= y2")

    @property
    def area(self) -> int:
        # inclusive grid: a degenerate box still covers one cell per axis
        return (self.x2 - self.x1 + 1) * (self.y2 - self.y1 + 1)

    def as_list(self) -> list[int]:
        return [self.x1, self.y1, self.x2, self.y2]


def iou(a: NormalizedBox, b: NormalizedBox) -> float:
    """Intersection over union on the inclusive grid, exact until the
    final division."""
    iw = min(a.x2, b.x2) - max(a.x1, b.x1) + 1
    ih = min(a.y2, b.y2) - max(a.y1, b.y1) + 1
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    union = a.area + b.area - inter
    return inter / union


@dataclass(frozen=True)
class Detection:
    box: NormalizedBox
    score: float
    label: str

    def __post_init__(self) -> None:
        if not (0.0 <= self.score <= 1.0):
            raise ValueError(f"detection score {self.score} outside [0, 1]")


@dataclass(frozen=True)
class GroundTruthBox:
    box: NormalizedBox
    label: str


def _ap_all_point(recalls: Sequence[float], precisions: Sequence[float]) -> float:
    mrec = [0.0, *recalls, 1.0]
    mpre = [0.0, *precisions, 0.0]
    for i in range(len(mpre) - 2, -1, -1):
        if mpre[i + 1] > mpre[i]:
            mpre[i] = mpre[i + 1]
    ap = 0.0
    for i in range(len(mrec) - 1):
        if mrec[i + 1] != mrec[i]:
            ap += (mrec[i + 1] - mrec[i]) * mpre[i + 1]
    return ap


def _ap_eleven_point(recalls: Sequence[float], precisions: Sequence[float]) -> float:
    total = 0.0
    for step in range(11):
        r = step / 10.0
        best = 0.0
        for rr, pp in zip(recalls, precisions):
            if rr >= r and pp > best:
                best = pp
        total += best
    return total / 11.0


_AP_METHODS = {"all_point": _ap_all_point, "eleven_point": _ap_eleven_point}


def _match_class(
    preds: list[tuple[int, Detection]],
    gt_boxes: list[NormalizedBox],
    threshold: float,
) -> list[bool]:
    """Greedy matching in descending score order (stable on ties).

    Each prediction takes the unmatched ground-truth box of highest IoU
    at or above the threshold; equal IoUs resolve to the earlier box.
    """
    order = sorted(range(len(preds)), key=lambda i: (-preds[i][1].score, preds[i][0]))
    taken = [False] * len(gt_boxes)
    flags = [False] * len(preds)
    for rank, idx in enumerate(order):
        det = preds[idx][1]
        best_iou = 0.0
        best_gt = -1
        for g, gt_box in enumerate(gt_boxes):
            if taken[g]:
                continue
            overlap = iou(det.box, gt_box)
            if overlap >= threshold and overlap > best_iou:
                best_iou = overlap
                best_gt = g
        if best_gt >= 0:
            taken[best_gt] = True
            flags[rank] = True
    return flags


@dataclass(frozen=True)
class GroundingReport:
    map: float
    per_threshold: Mapping[float, float]
    per_class: Mapping[str, Mapping[float, float]]
    gt_count: int
    prediction_count: int

    def to_dict(self) -> dict:
        return {
            "mAP": self.map,
            "per_threshold": {str(t): v for t, v in self.per_threshold.items()},
            "per_class": {
                c: {str(t): v for t, v in row.items()}
                for c, row in self.per_class.items()
            },
            "gt_count": self.gt_count,
            "prediction_count": self.prediction_count,
        }


def grounding_map_report(
    preds: Mapping[str, Sequence[Detection]],
    gts: Mapping[str, Sequence[GroundTruthBox]],
    iou_thresholds: Sequence[float] = (0.5,),
    interpolation: str = "all_point",
) -> GroundingReport:
    """Mean average precision over classes, then thresholds, times 100.

    ``preds`` may omit images (no detections there) but must not name
    images absent from ``gts``. Classes never seen in the ground truth do
    not enter the mean; their detections are ignored rather than averaged
    in as zero-AP phantom classes.
    """
    if interpolation not in _AP_METHODS:
        raise ValueError(f"interpolation must be one of {sorted(_AP_METHODS)}")
    thresholds = list(iou_thresholds)
    if not thresholds or any(not (0.0 < t <= 1.0) for t in thresholds):
        raise ValueError("IoU thresholds must lie in (0, 1]")
    unknown = sorted(set(preds) - set(gts))
    if unknown:
        raise ValueError(f"predictions name unknown image ids: {unknown}")

    classes = sorted({g.label for boxes in gts.values() for g in boxes})
    if not classes:
        raise ValueError("ground truth holds no boxes; mAP is undefined")
    ap_fn = _AP_METHODS[interpolation]

    # per class: score-ordered predictions across images, under one
    # global insertion counter so ties stay stable
    per_class: dict[str, dict[float, float]] = {}
    pred_count = 0
    insertion = 0
    class_preds: dict[str, dict[str, list[tuple[int, Detection]]]] = {
        c: {} for c in classes
    }
    for image_id, dets in preds.items():
        for det in dets:
            pred_count += 1
            if det.label in class_preds:
                class_preds[det.label].setdefault(image_id, []).append(
                    (insertion, det)
                )
            insertion += 1

    gt_count = sum(len(boxes) for boxes in gts.values())
    for cls in classes:
        n_gt = sum(1 for boxes in gts.values() for g in boxes if g.label == cls)
        per_class[cls] = {}
        for thr in thresholds:
            scored: list[tuple[float, int, bool]] = []
            for image_id, gt_boxes in gts.items():
                boxes = [g.box for g in gt_boxes if g.label == cls]
                image_preds = class_preds[cls].get(image_id, [])
                flags = _match_class(image_preds, boxes, thr)
                order = sorted(
                    range(len(image_preds)),
                    key=lambda i: (-image_preds[i][1].score, image_preds[i][0]),
                )
                for rank, idx in enumerate(order):
                    ins, det = image_preds[idx]
                    scored.append((det.score, ins, flags[rank]))
            scored.sort(key=lambda item: (-item[0], item[1]))
            recalls: list[float] = []
            precisions: list[float] = []
            tp = 0
            for rank, (_, _, is_tp) in enumerate(scored, start=1):
                tp += 1 if is_tp else 0
                recalls.append(tp / n_gt if n_gt else 0.0)
                precisions.append(tp / rank)
            per_class[cls][thr] = ap_fn(recalls, precisions) if n_gt else 0.0

    per_threshold = {
        thr: sum(per_class[c][thr] for c in classes) / len(classes)
        for thr in thresholds
    }
    map_value = 100.0 * sum(per_threshold.values()) / len(thresholds)
    return GroundingReport(
        map=map_value,
        per_threshold={t: 100.0 * v for t, v in per_threshold.items()},
        per_class={
            c: {t: 100.0 * v for t, v in row.items()}
            for c, row in per_class.items()
        },
        gt_count=gt_count,
        prediction_count=pred_count,
    )


def grounding_map(
    preds: Mapping[str, Sequence[Detection]],
    gts: Mapping[str, Sequence[GroundTruthBox]],
    iou_thresholds: Sequence[float] = (0.5,),
    interpolation: str = "all_point",
) -> float:
    return grounding_map_report(preds, gts, iou_thresholds, interpolation).map


RISK_TARGET_LABEL = "risk-target"


def risk_grounding_map(
    preds: Mapping[str, Sequence[tuple[NormalizedBox, float]]],
    gts: Mapping[str, Sequence[NormalizedBox]],
    iou_thresholds: Sequence[float] = (0.5,),
) -> float:
    """Single-class mAP for High-risk target boxes."""
    det_map = {
        image_id: [Detection(box, score, RISK_TARGET_LABEL) for box, score in dets]
        for image_id, dets in preds.items()
    }
    gt_map = {
        image_id: [GroundTruthBox(box, RISK_TARGET_LABEL) for box in boxes]
        for image_id, boxes in gts.items()
    }
    return grounding_map(det_map, gt_map, iou_thresholds)


# --------------------------------------------------------------- planning


@dataclass(frozen=True)
class TrajectoryPlan:
    """Six ego-frame (x, y) waypoints at 0.5 s steps covering 3 s."""

    waypoints: tuple[tuple[float, float], ...]

    def __post_init__(self) -> None:
        wps = tuple((float(x), float(y)) for x, y in self.waypoints)
        if len(wps) != WAYPOINT_COUNT:
            raise ValueError(f"a plan needs {WAYPOINT_COUNT} waypoints, got {len(wps)}")
        if any(not (math.isfinite(x) and math.isfinite(y)) for x, y in wps):
            raise ValueError("waypoints must be finite")
        object.__setattr__(self, "waypoints", wps)


@dataclass(frozen=True)
class AgentBox:
    """Oriented rectangle of another traffic participant at one timestep."""

    cx: float
    cy: float
    length: float
    width: float
    heading: float

    def __post_init__(self) -> None:
        values = (self.cx, self.cy, self.length, self.width, self.heading)
        if any(not math.isfinite(v) for v in values):
            raise ValueError("agent box fields must be finite")
        if self.length <= 0.0 or self.width <= 0.0:
            raise ValueError("agent extents must be positive")


def l2_error(
    pred: TrajectoryPlan, gt: TrajectoryPlan, mode: str = "at_horizon"
) -> dict[str, float]:
    """L2 displacement against the ground-truth plan per horizon.

    ``at_horizon`` reads the single waypoint sitting exactly at 1, 2 and
    3 seconds; ``up_to_horizon`` averages all waypoints up to and
    including the horizon. ``avg`` is the mean of the three horizon
    numbers in both modes.
    """
    if mode not in ("at_horizon", "up_to_horizon"):
        raise ValueError("mode must be 'at_horizon' or 'up_to_horizon'")
    dists = [
        math.hypot(px - gx, py - gy)
        for (px, py), (gx, gy) in zip(pred.waypoints, gt.waypoints)
    ]
    out: dict[str, float] = {}
    for horizon in HORIZONS:
        last = _HORIZON_LAST_INDEX[horizon]
        if mode == "at_horizon":
            out[horizon] = dists[last]
        else:
            out[horizon] = sum(dists[: last + 1]) / (last + 1)
    out["avg"] = sum(out[h] for h in HORIZONS) / len(HORIZONS)
    return out


def _rect_corners(
    cx: float, cy: float, length: float, width: float, heading: float
) -> list[tuple[float, float]]:
    ch, sh = math.cos(heading), math.sin(heading)
    hl, hw = length / 2.0, width / 2.0
    corners = []
    for sx, sy in ((1, 1), (-1, 1), (-1, -1), (1, -1)):
        dx, dy = sx * hl, sy * hw
        corners.append((cx + dx * ch - dy * sh, cy + dx * sh + dy * ch))
    return corners


def _project(corners: Sequence[tuple[float, float]], ax: float, ay: float):
    dots = [x * ax + y * ay for x, y in corners]
    return min(dots), max(dots)


def rectangles_collide(
    a: Sequence[tuple[float, float]], b: Sequence[tuple[float, float]]
) -> bool:
    """Separating-axis test for two oriented rectangles (corner lists).

    Overlap must be strict: rectangles that merely touch along an edge
    or at a corner are not in collision.
    """
    for corners in (a, b):
        for i in range(2):
            x1, y1 = corners[i]
            x2, y2 = corners[i + 1]
            ax, ay = -(y2 - y1), x2 - x1
            min_a, max_a = _project(a, ax, ay)
            min_b, max_b = _project(b, ax, ay)
            if max_a <= min_b or max_b <= min_a:
                return False
    return True


def _ego_headings(waypoints: Sequence[tuple[float, float]]) -> list[float]:
    # backward difference per waypoint; waypoint 0 borrows the first
    # segment; degenerate segments carry the previous heading forward
    headings = [0.0] * len(waypoints)
    first = 0.0
    x0, y0 = waypoints[0]
    x1, y1 = waypoints[1]
    if (x1 - x0, y1 - y0) != (0.0, 0.0):
        first = math.atan2(y1 - y0, x1 - x0)
    headings[0] = first
    prev = first
    for i in range(1, len(waypoints)):
        dx = waypoints[i][0] - waypoints[i - 1][0]
        dy = waypoints[i][1] - waypoints[i - 1][1]
        if (dx, dy) != (0.0, 0.0):
            prev = math.atan2(dy, dx)
        headings[i] = prev
    return headings


def trajectory_collides(
    pred: TrajectoryPlan,
    ego_length: float,
    ego_width: float,
    agents: Sequence[Sequence[AgentBox]],
) -> dict[str, bool]:
    """Per-horizon collision verdicts for one planned trajectory.

    ``agents[i]`` holds the agent rectangles at waypoint i's timestamp;
    the snapshots must align with the six-step waypoint grid. The plan
    collides at a horizon when any waypoint up to that horizon overlaps
    any agent.
    """
    if ego_length <= 0.0 or ego_width <= 0.0:
        raise ValueError("ego extents must be positive")
    if len(agents) != WAYPOINT_COUNT:
        raise ValueError(
            f"agent snapshots misaligned: got {len(agents)}, "
            f"need {WAYPOINT_COUNT} (one per waypoint)"
        )
    headings = _ego_headings(pred.waypoints)
    hit = []
    for (x, y), heading, snapshot in zip(pred.waypoints, headings, agents):
        ego = _rect_corners(x, y, ego_length, ego_width, heading)
        hit.append(
            any(
                rectangles_collide(
                    ego,
                    _rect_corners(a.cx, a.cy, a.length, a.width, a.heading),
                )
                for a in snapshot
            )
        )
    return {
        horizon: any(hit[: _HORIZON_LAST_INDEX[horizon] + 1])
        for horizon in HORIZONS
    }


def collision_rate(
    samples: Sequence[tuple[TrajectoryPlan, Sequence[Sequence[AgentBox]]]],
    ego_length: float,
    ego_width: float,
) -> dict[str, float]:
    """Percentage of colliding samples per horizon, plus their mean."""
    if not samples:
        raise ValueError("collision rate needs at least one sample")
    counts = {h: 0 for h in HORIZONS}
    for plan, agents in samples:
        flags = trajectory_collides(plan, ego_length, ego_width, agents)
        for h in HORIZONS:
            counts[h] += 1 if flags[h] else 0
    rates = {h: 100.0 * counts[h] / len(samples) for h in HORIZONS}
    rates["avg"] = sum(rates[h] for h in HORIZONS) / len(HORIZONS)
    return rates


# -------------------------------------------------------------------- ORA


@dataclass(frozen=True)
class OraSample:
    """One object-level risk assessment answer.

    The conditional fields (level, category, object) are present exactly
    when ``exist`` is true; ``grounding`` optionally carries the risk
    target box.
    """

    sample_id: str
    exist: bool
    level: str | None = None
    category: str | None = None
    object: str | None = None
    reason: str = ""
    grounding: NormalizedBox | None = None

    def __post_init__(self) -> None:
        if self.exist:
            if self.level not in ORA_LEVELS:
                raise ValueError(f"level must be one of {ORA_LEVELS}")
            if self.category not in ORA_CATEGORIES:
                raise ValueError(f"category must be one of {ORA_CATEGORIES}")
            if not self.object:
                raise ValueError("object is required when exist is true")
        else:
            if self.level is not None or self.category is not None or self.object:
                raise ValueError(
                    "level/category/object must be absent when exist is false"
                )


@dataclass(frozen=True)
class OraReport:
    exist_acc: float
    level_acc: float | None
    cate_acc: float | None
    object_acc: float | None
    total: int
    gated: int
    gating: str

    def to_dict(self) -> dict:
        def cell(v: float | None):
            return v if v is not None else "N/A"

        return {
            "exist_acc": self.exist_acc,
            "level_acc": cell(self.level_acc),
            "cate_acc": cell(self.cate_acc),
            "object_acc": cell(self.object_acc),
            "total": self.total,
            "gated": self.gated,
            "gating": self.gating,
        }


def _norm_object(text: str) -> str:
    return text.strip().lower()


def ora_score(
    preds: Sequence[OraSample],
    gts: Sequence[OraSample],
    gating: str = "correct_exist",
) -> OraReport:
    """Exist accuracy plus exist-gated level/category/object accuracies.

    ``correct_exist`` gates the conditional accuracies on samples whose
    existence bit was predicted correctly and is true in the ground
    truth. ``all_gt_true`` scores every GT-positive sample instead,
    counting an existence miss as wrong on each conditional field.
    """
    if gating not in ORA_GATING_MODES:
        raise ValueError(f"gating must be one of {ORA_GATING_MODES}")
    if not gts:
        raise ValueError("ora_score needs at least one sample")
    pred_ids = [p.sample_id for p in preds]
    gt_ids = [g.sample_id for g in gts]
    if sorted(pred_ids) != sorted(gt_ids):
        missing = sorted(set(gt_ids) - set(pred_ids))
        extra = sorted(set(pred_ids) - set(gt_ids))
        raise ValueError(
            f"prediction ids do not match GT ids (missing={missing}, extra={extra})"
        )
    by_id = {p.sample_id: p for p in preds}
    if len(by_id) != len(preds):
        raise ValueError("duplicate prediction ids")

    exist_hits = 0
    level_hits = cate_hits = object_hits = 0
    gated = 0
    denom = 0
    for gt in gts:
        pred = by_id[gt.sample_id]
        exist_correct = pred.exist == gt.exist
        exist_hits += 1 if exist_correct else 0
        if gating == "correct_exist":
            in_gate = exist_correct and gt.exist
        else:
            in_gate = gt.exist
        if not in_gate:
            continue
        denom += 1
        if not (pred.exist and gt.exist):
            continue  # all_gt_true mode: existence miss scores zero
        gated += 1
        level_hits += 1 if pred.level == gt.level else 0
        cate_hits += 1 if pred.category == gt.category else 0
        object_hits += 1 if _norm_object(pred.object) == _norm_object(gt.object) else 0

    def pct(hits: int) -> float | None:
        return 100.0 * hits / denom if denom else None

    return OraReport(
        exist_acc=100.0 * exist_hits / len(gts),
        level_acc=pct(level_hits),
        cate_acc=pct(cate_hits),
        object_acc=pct(object_hits),
        total=len(gts),
        gated=denom,
        gating=gating,
    )


# ----------------------------------------------------------- record codecs
# Dict <-> dataclass converters for the JSONL record shapes the CLI
# consumes. File handling stays in the CLI; these only validate shape.


def _require(d: Mapping, key: str):
    if key not in d:
        raise ValueError(f"record missing required key {key!r}")
    return d[key]


def box_from_list(raw) -> NormalizedBox:
    if not isinstance(raw, (list, tuple)) or len(raw) != 4:
        raise ValueError(f"box must be a 4-item list, got {raw!r}")
    return NormalizedBox(*(int(v) for v in raw))


def detection_from_dict(d: Mapping) -> tuple[str, Detection]:
    image_id = str(_require(d, "image_id"))
    det = Detection(
        box=box_from_list(_require(d, "box")),
        score=float(_require(d, "score")),
        label=str(_require(d, "label")),
    )
    return image_id, det


def gt_box_from_dict(d: Mapping) -> tuple[str, GroundTruthBox]:
    image_id = str(_require(d, "image_id"))
    return image_id, GroundTruthBox(
        box=box_from_list(_require(d, "box")), label=str(_require(d, "label"))
    )


def _plan_from_list(raw) -> TrajectoryPlan:
    if not isinstance(raw, (list, tuple)):
        raise ValueError("trajectory must be a list of [x, y] waypoints")
    return TrajectoryPlan(tuple((float(x), float(y)) for x, y in raw))


def _agent_from_dict(d: Mapping) -> AgentBox:
    return AgentBox(
        cx=float(_require(d, "cx")),
        cy=float(_require(d, "cy")),
        length=float(_require(d, "length")),
        width=float(_require(d, "width")),
        heading=float(_require(d, "heading")),
    )


def planning_record_from_dict(
    d: Mapping,
) -> tuple[str, TrajectoryPlan, TrajectoryPlan, list[list[AgentBox]] | None]:
    sample_id = str(_require(d, "sample_id"))
    pred = _plan_from_list(_require(d, "pred"))
    gt = _plan_from_list(_require(d, "gt"))
    agents = None
    if d.get("agents") is not None:
        snapshots = d["agents"]
        if not isinstance(snapshots, (list, tuple)):
            raise ValueError("agents must be a list of per-waypoint snapshots")
        agents = [[_agent_from_dict(a) for a in snap] for snap in snapshots]
    return sample_id, pred, gt, agents


def ora_sample_from_dict(d: Mapping) -> OraSample:
    grounding = None
    if d.get("grounding") is not None:
        grounding = box_from_list(d["grounding"])
    return OraSample(
        sample_id=str(_require(d, "sample_id")),
        exist=bool(_require(d, "exist")),
        level=d.get("level"),
        category=d.get("category"),
        object=d.get("object"),
        reason=str(d.get("reason", "")),
        grounding=grounding,
    )


def ora_sample_to_dict(s: OraSample) -> dict:
    out: dict = {"sample_id": s.sample_id, "exist": s.exist}
    if s.exist:
        out["level"] = s.level
        out["category"] = s.category
        out["object"] = s.object
    if s.reason:
        out["reason"] = s.reason
    if s.grounding is not None:
        out["grounding"] = s.grounding.as_list()
    return out
