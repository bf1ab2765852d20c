"""Landmark-standard remapping, occlusion transfer, and evaluation protocols.

Implements interpupillary-distance-normalized localization error with success
rates and cumulative error distribution curves, occlusion precision/recall
(including the bias-offset sweep that trades recall against precision), and
detection precision/recall with occluded-subset variants in which the false
positive count is deliberately not subset-restricted.
"""

import csv
import json
import os
from dataclasses import dataclass, field

import numpy as np

from .errors import DataError, NotFoundError
from .model import NEG_INF_THRESHOLD
from .supervision import interpupillary_distance

# ---------------------------------------------------------------------------
# Block-sparse ridge landmark mapping
# ---------------------------------------------------------------------------


@dataclass
class LandmarkMap:
    """Linear map from 2*N source coordinates to 2*M target coordinates.

    ``beta`` is (2N, 2M); entries outside the block mask are exactly zero.
    """

    beta: np.ndarray
    mask: np.ndarray  # (2N, 2M) bool
    ridge: float

    def apply(self, source_landmarks):
        src = np.asarray(source_landmarks, dtype=np.float64)
        flat = src.reshape(len(src), -1) if src.ndim == 3 else src.reshape(1, -1)
        out = flat @ self.beta
        return out.reshape(-1, out.shape[1] // 2, 2)


def part_block_mask(source_parts, target_parts):
    """(2N, 2M) mask allowing weights only within same-part blocks."""
    source_parts = np.asarray(source_parts)
    target_parts = np.asarray(target_parts)
    allow = source_parts[:, None] == target_parts[None, :]
    return np.kron(allow, np.ones((2, 2), dtype=bool))


def fit_landmark_map(pred_sets, gt_sets, ridge, mask):
    """Closed-form ridge regression per masked column group.

    pred_sets: (n, N, 2) model outputs; gt_sets: (n, M, 2) targets in another
    annotation standard.  Column q of beta uses only the source coordinates
    its mask allows; the normal equations are solved per column group.
    """
    preds = np.asarray(pred_sets, dtype=np.float64)
    gts = np.asarray(gt_sets, dtype=np.float64)
    n = len(preds)
    x = preds.reshape(n, -1)
    y = gts.reshape(n, -1)
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != (x.shape[1], y.shape[1]):
        raise DataError(f"mask shape {mask.shape} does not match ({x.shape[1]}, {y.shape[1]})")
    beta = np.zeros((x.shape[1], y.shape[1]))
    # group target columns by identical source support
    groups = {}
    for q in range(y.shape[1]):
        key = mask[:, q].tobytes()
        groups.setdefault(key, []).append(q)
    for key, cols in groups.items():
        support = np.frombuffer(key, dtype=bool)
        if not support.any():
            continue
        xs = x[:, support]
        gram = xs.T @ xs + ridge * np.eye(xs.shape[1])
        try:
            solve = np.linalg.solve(gram, xs.T @ y[:, cols])
        except np.linalg.LinAlgError as exc:
            raise DataError(
                "rank-deficient block in landmark map; use a ridge term > 0"
            ) from exc
        beta[np.ix_(support, cols)] = solve
    return LandmarkMap(beta=beta, mask=mask, ridge=float(ridge))


def correspondence_from_average_locations(source_sets, target_sets):
    """Fixed source index for each target landmark, from mean positions."""
    src = np.asarray(source_sets, dtype=np.float64).mean(axis=0)  # (N, 2)
    tgt = np.asarray(target_sets, dtype=np.float64).mean(axis=0)  # (M, 2)
    d = ((tgt[:, None, :] - src[None, :, :]) ** 2).sum(axis=2)
    return np.argmin(d, axis=1)


def transfer_occlusion(flags, correspondence):
    """Each target landmark copies the flag of its corresponding source."""
    flags = np.asarray(flags, dtype=bool)
    corr = np.asarray(correspondence, dtype=np.int64)
    return flags[corr]


# ---------------------------------------------------------------------------
# Localization metrics
# ---------------------------------------------------------------------------

CED_GRID = tuple(i / 200.0 for i in range(61))  # 0.0 .. 0.3 step 0.005


@dataclass
class LocalizationReport:
    errors: np.ndarray  # per-image normalized error
    mean_error: float
    success_rate: float
    threshold: float
    ced: tuple  # ((threshold, fraction), ...)


def localization_metrics(preds, gts, eye_right, eye_left, threshold=0.1):
    """Per-image mean landmark distance over IPD; success counts err <= t."""
    preds = np.asarray(preds, dtype=np.float64)
    gts = np.asarray(gts, dtype=np.float64)
    if preds.shape != gts.shape:
        raise DataError(f"prediction shape {preds.shape} != ground truth {gts.shape}")
    errors = np.empty(len(preds))
    for i in range(len(preds)):
        ipd = interpupillary_distance(gts[i], eye_right, eye_left)
        errors[i] = float(np.mean(np.linalg.norm(preds[i] - gts[i], axis=1))) / ipd
    success = float(np.mean(errors <= threshold))
    ced = tuple((t, float(np.mean(errors <= t))) for t in CED_GRID)
    return LocalizationReport(
        errors=errors,
        mean_error=float(errors.mean()),
        success_rate=success,
        threshold=float(threshold),
        ced=ced,
    )


# ---------------------------------------------------------------------------
# Occlusion precision / recall
# ---------------------------------------------------------------------------


def occlusion_pr(pred_flags, gt_flags):
    """Precision and recall of per-landmark occlusion predictions.

    With no predicted occlusions, precision is reported as 1.0 by convention
    (no false alarms were raised) with whatever recall follows.
    """
    pred = np.asarray(pred_flags, dtype=bool).ravel()
    gt = np.asarray(gt_flags, dtype=bool).ravel()
    if pred.shape != gt.shape:
        raise DataError("occlusion flag arrays differ in length")
    tp = int(np.sum(pred & gt))
    fp = int(np.sum(pred & ~gt))
    fn = int(np.sum(~pred & gt))
    precision = tp / (tp + fp) if (tp + fp) > 0 else 1.0
    recall = tp / (tp + fn) if (tp + fn) > 0 else 0.0
    return precision, recall


def perturb_occlusion_biases(model, alpha):
    """b <- b + |b| * alpha on part-landmark bias entries of occluded states."""
    out = model.copy()
    table = model.occlusion_table()  # (L, G, O) bool
    b = out.params.lm_bias
    sel = table & (b > NEG_INF_THRESHOLD)
    b[sel] = b[sel] + np.abs(b[sel]) * alpha
    return out


@dataclass
class PRCurve:
    points: list  # (operating parameter, precision, recall)

    def as_rows(self):
        return [(p, prec, rec) for p, prec, rec in self.points]


def occlusion_pr_sweep(
    model_bundle,
    faces,
    alphas,
    image_dir="",
    min_overlap=0.7,
    eye_right=None,
    eye_left=None,
    localize_kwargs=None,
):
    """Occlusion PR and localization per bias offset alpha.

    alpha = 0 runs the unperturbed model (bit-identical flags to the base
    model).  Each face needs an annotated box (or one is synthesized from its
    landmarks) and ground-truth occlusion flags for the PR numbers.
    """
    from .detection import localize_in_box
    from .features import load_image
    from .geometry import landmarks_to_box

    localize_kwargs = dict(localize_kwargs or {})
    if hasattr(model_bundle, "topology"):
        model_bundle = {"hires": model_bundle, "lowres": None}
    base = model_bundle["hires"]
    results = []
    for alpha in alphas:
        if alpha == 0:
            bundle = dict(model_bundle)
        else:
            bundle = dict(model_bundle)
            bundle["hires"] = perturb_occlusion_biases(base, alpha)
        preds, gts, pred_flags, gt_flags = [], [], [], []
        for face in faces:
            image = load_image(os.path.join(image_dir, face.image) if image_dir else face.image)
            box = face.box if face.box else landmarks_to_box(face.landmarks, 0.1)
            try:
                det = localize_in_box(
                    bundle, image, box, min_overlap=min_overlap, **localize_kwargs
                )
            except NotFoundError:
                continue
            preds.append(det.landmarks)
            gts.append(face.landmarks)
            pred_flags.append(det.occluded)
            if face.occluded is not None:
                gt_flags.append(face.occluded)
            else:
                gt_flags.append(np.zeros(len(face.landmarks), dtype=bool))
        if preds:
            report = localization_metrics(
                np.stack(preds), np.stack(gts), eye_right, eye_left
            )
            precision, recall = occlusion_pr(np.stack(pred_flags), np.stack(gt_flags))
        else:
            report = None
            precision, recall = 1.0, 0.0
        results.append(
            {
                "alpha": float(alpha),
                "precision": precision,
                "recall": recall,
                "report": report,
                "pred_flags": pred_flags,
                "matched": len(preds),
            }
        )
    curve = PRCurve([(r["alpha"], r["precision"], r["recall"]) for r in results])
    return curve, results


# ---------------------------------------------------------------------------
# Detection precision / recall
# ---------------------------------------------------------------------------


@dataclass
class DetectionPR:
    curve: PRCurve  # all faces
    occluded_curve: PRCurve  # Precision_o / Recall_o per printed formulas
    visible_curve: PRCurve
    average_precision: float
    counts: dict = field(default_factory=dict)


def _ap_from_curve(recalls, precisions):
    """All-point interpolated average precision."""
    if len(recalls) == 0:
        return 0.0
    r = np.concatenate([[0.0], recalls, [recalls[-1]]])
    p = np.concatenate([[0.0], precisions, [0.0]])
    for i in range(len(p) - 2, -1, -1):
        p[i] = max(p[i], p[i + 1])
    ap = 0.0
    for i in range(1, len(r)):
        ap += (r[i] - r[i - 1]) * p[i]
    return float(ap)


def detection_pr(detections_per_image, gt_boxes_per_image, gt_occluded_per_image, iou=0.5):
    """Score-ordered greedy matching at the given IoU; one detection per truth.

    Subset metrics follow the printed formulas exactly: the false-positive
    count in Precision_o is *all* false positives, not only occluded-looking
    ones, while fn_o counts only missed occluded faces.
    """
    from .geometry import box_iou

    entries = []
    for img, dets in enumerate(detections_per_image):
        for d in dets:
            entries.append((float(d.score), img, d))
    entries.sort(key=lambda e: (-e[0], e[1]))
    matched = [np.zeros(len(b), dtype=bool) for b in gt_boxes_per_image]
    n_gt = sum(len(b) for b in gt_boxes_per_image)
    n_occ = sum(int(np.sum(o)) for o in gt_occluded_per_image)
    n_vis = n_gt - n_occ

    tp = fp = tp_o = tp_v = 0
    points, points_o, points_v = [], [], []
    for score, img, det in entries:
        boxes = gt_boxes_per_image[img]
        best_iou, best_j = 0.0, -1
        for j, gt_box in enumerate(boxes):
            if matched[img][j]:
                continue
            v = box_iou(det.box, gt_box)
            if v > best_iou:
                best_iou, best_j = v, j
        if best_j >= 0 and best_iou >= iou:
            matched[img][best_j] = True
            tp += 1
            if gt_occluded_per_image[img][best_j]:
                tp_o += 1
            else:
                tp_v += 1
        else:
            fp += 1
        points.append((score, tp / (tp + fp), tp / n_gt if n_gt else 0.0))
        points_o.append(
            (
                score,
                tp_o / (tp_o + fp) if (tp_o + fp) else 1.0,
                tp_o / n_occ if n_occ else 0.0,
            )
        )
        points_v.append(
            (
                score,
                tp_v / (tp_v + fp) if (tp_v + fp) else 1.0,
                tp_v / n_vis if n_vis else 0.0,
            )
        )
    ap = _ap_from_curve(
        np.array([r for _, _, r in points]), np.array([p for _, p, _ in points])
    )
    return DetectionPR(
        curve=PRCurve(points),
        occluded_curve=PRCurve(points_o),
        visible_curve=PRCurve(points_v),
        average_precision=ap,
        counts={"tp": tp, "fp": fp, "tp_o": tp_o, "n_gt": n_gt, "n_occ": n_occ},
    )


# ---------------------------------------------------------------------------
# Rendering and report files
# ---------------------------------------------------------------------------


def render_overlay(image, detection, path, dot_radius=2):
    """Green dots for visible landmarks, red for occluded, plus the box."""
    from PIL import Image, ImageDraw

    arr = np.asarray(image)
    if arr.dtype != np.uint8:
        arr = np.clip(arr * 255.0, 0, 255).astype(np.uint8)
    if arr.ndim == 2:
        arr = np.stack([arr] * 3, axis=2)
    img = Image.fromarray(arr)
    draw = ImageDraw.Draw(img)
    x0, y0, x1, y1 = detection.box
    draw.rectangle([x0, y0, x1, y1], outline=(255, 220, 0))
    for (x, y), occ in zip(detection.landmarks, detection.occluded):
        color = (255, 32, 32) if occ else (32, 255, 32)
        draw.ellipse(
            [x - dot_radius, y - dot_radius, x + dot_radius, y + dot_radius],
            fill=color,
        )
    img.save(path, format="PNG")


def write_csv(path, header, rows):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        writer.writerows(rows)


def write_svg_curve(path, xs, ys, xlabel, ylabel, title, size=(480, 360)):
    """Self-contained SVG polyline plot (no external assets)."""
    w, h = size
    ml, mr, mt, mb = 50, 15, 30, 40
    pw, ph = w - ml - mr, h - mt - mb
    xs = np.asarray(xs, dtype=np.float64)
    ys = np.asarray(ys, dtype=np.float64)
    if len(xs) == 0:
        xs = np.array([0.0, 1.0])
        ys = np.array([0.0, 0.0])
    x0, x1 = float(xs.min()), float(xs.max())
    if x1 <= x0:
        x1 = x0 + 1.0
    y0, y1 = 0.0, max(1.0, float(ys.max()))

    def sx(x):
        return ml + (x - x0) / (x1 - x0) * pw

    def sy(y):
        return mt + ph - (y - y0) / (y1 - y0) * ph

    pts = " ".join(f"{sx(x):.2f},{sy(y):.2f}" for x, y in zip(xs, ys))
    lines = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}">',
        f'<rect width="{w}" height="{h}" fill="white"/>',
        f'<text x="{w/2:.0f}" y="18" text-anchor="middle" font-size="13">{title}</text>',
        f'<line x1="{ml}" y1="{mt+ph}" x2="{ml+pw}" y2="{mt+ph}" stroke="black"/>',
        f'<line x1="{ml}" y1="{mt}" x2="{ml}" y2="{mt+ph}" stroke="black"/>',
        f'<text x="{ml+pw/2:.0f}" y="{h-8}" text-anchor="middle" font-size="11">{xlabel}</text>',
        f'<text x="14" y="{mt+ph/2:.0f}" text-anchor="middle" font-size="11" '
        f'transform="rotate(-90 14 {mt+ph/2:.0f})">{ylabel}</text>',
        f'<polyline points="{pts}" fill="none" stroke="#1f77b4" stroke-width="1.5"/>',
    ]
    for t in (x0, x1):
        lines.append(
            f'<text x="{sx(t):.0f}" y="{mt+ph+14}" text-anchor="middle" font-size="10">{t:.3g}</text>'
        )
    for t in (y0, y1):
        lines.append(
            f'<text x="{ml-6}" y="{sy(t)+3:.0f}" text-anchor="end" font-size="10">{t:.3g}</text>'
        )
    lines.append("</svg>")
    with open(path, "w") as fh:
        fh.write("\n".join(lines))


def write_localization_report(report, out_dir, prefix="localization"):
    os.makedirs(out_dir, exist_ok=True)
    write_csv(
        os.path.join(out_dir, f"{prefix}_metrics.csv"),
        ["mean_error", "success_rate", "threshold", "n_images"],
        [[report.mean_error, report.success_rate, report.threshold, len(report.errors)]],
    )
    write_csv(
        os.path.join(out_dir, "ced.csv"),
        ["threshold", "fraction"],
        [list(point) for point in report.ced],
    )
    write_svg_curve(
        os.path.join(out_dir, "ced.svg"),
        [t for t, _ in report.ced],
        [f for _, f in report.ced],
        "normalized error threshold",
        "fraction of images",
        "cumulative error distribution",
    )


def write_pr_report(curve, out_dir, stem):
    os.makedirs(out_dir, exist_ok=True)
    rows = curve.as_rows()
    write_csv(
        os.path.join(out_dir, f"{stem}.csv"),
        ["parameter", "precision", "recall"],
        rows,
    )
    write_svg_curve(
        os.path.join(out_dir, f"{stem}.svg"),
        [r for _, _, r in rows],
        [p for _, p, _ in rows],
        "recall",
        "precision",
        stem.replace("_", " "),
    )


def write_json(path, payload):
    with open(path, "w") as fh:
        json.dump(payload, fh, sort_keys=True, indent=2)
