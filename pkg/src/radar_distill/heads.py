"""Multi-task losses, a toy per-cell detection/segmentation head, and metrics.

The head sees one feature vector per range-azimuth cell: the cell's Doppler
profile from the RAD tensor, sorted in decreasing order and log-compressed
(``log1p(profile / feature_scale)``), plus a local-peak contrast channel.
Sorting makes the feature independent of the target's velocity bin. A linear
map over each cell's 3x3 neighbourhood of features turns them into a class
logit, two regression residuals and a segmentation logit.
"""

import csv
import dataclasses
import json
import math
import os
from dataclasses import dataclass, field

import numpy as np

from . import learnable_sp as lsp
from .fmcw_sim import (DatasetManifest, RaMaps, azimuth_bin_edge, rasterize_labels,
                       scene_from_record)
from .tensor import make_rng, tensor_read, tensor_write
from .trainer import AdamState, adam_step, smooth_l1, split_holdout

P_CLAMP = 1e-7
DEFAULT_THRESHOLDS = tuple(round(0.1 * k, 1) for k in range(1, 10))


@dataclass(frozen=True)
class LossConfig:
    alpha: float = 100.0
    beta: float = 1.0
    focal_gamma: float = 2.0
    focal_alpha: float = 0.25
    smooth_l1_delta: float = 1.0

    def __post_init__(self):
        if self.alpha < 0 or self.beta < 0:
            raise ValueError("alpha and beta must be >= 0")
        if not self.smooth_l1_delta > 0:
            raise ValueError("smooth_l1_delta must be > 0")

    def to_dict(self):
        return dataclasses.asdict(self)


def _clamp(p):
    return np.clip(np.asarray(p, dtype=np.float64), P_CLAMP, 1.0 - P_CLAMP)


def focal_loss(p, y, focal_gamma=2.0, focal_alpha=0.25):
    """Mean focal loss over entries and its gradient with respect to ``p``.

    ``-alpha_t (1 - p_t)^gamma log(p_t)`` with ``p_t = p`` for positives and
    ``1 - p`` for negatives. ``p`` is clamped to ``[1e-7, 1 - 1e-7]``, and
    clamped entries get the gradient at the clamp boundary rather than zero,
    so a saturated prediction can still recover.
    """
    y = np.asarray(y, dtype=np.float64)
    if np.shape(p) != y.shape:
        raise ValueError(f"shape mismatch: {np.shape(p)} vs {y.shape}")
    p = _clamp(p)
    g = focal_gamma
    pos = y > 0.5
    p_t = np.where(pos, p, 1.0 - p)
    a_t = np.where(pos, focal_alpha, 1.0 - focal_alpha)
    log_pt = np.log(p_t)
    one_m = 1.0 - p_t
    per = -a_t * one_m ** g * log_pt
    # d/dp_t, then dp_t/dp = +1 for positives and -1 for negatives
    if g == 0:
        d_pt = -a_t / p_t
    else:
        d_pt = a_t * (g * one_m ** (g - 1.0) * log_pt - one_m ** g / p_t)
    grad = np.where(pos, d_pt, -d_pt) / per.size
    return float(np.mean(per)), grad


def bce_loss(p, y, reduction="mean"):
    """Binary cross-entropy and its gradient with respect to ``p``.

    ``reduction`` is ``"mean"`` (default) or ``"sum"`` over entries. Clamping
    matches :func:`focal_loss`.
    """
    y = np.asarray(y, dtype=np.float64)
    if np.shape(p) != y.shape:
        raise ValueError(f"shape mismatch: {np.shape(p)} vs {y.shape}")
    if reduction not in ("mean", "sum"):
        raise ValueError(f"unknown reduction {reduction!r}")
    p = _clamp(p)
    per = -(y * np.log(p) + (1.0 - y) * np.log(1.0 - p))
    grad = -(y / p) + (1.0 - y) / (1.0 - p)
    if reduction == "mean":
        return float(np.mean(per)), grad / per.size
    return float(np.sum(per)), grad


@dataclass
class MapGrads:
    cls: np.ndarray
    reg: np.ndarray
    seg: np.ndarray


def multitask_loss(pred, gt, cfg):
    """Detection plus segmentation loss for one frame.

    ``pred`` is a :class:`~radar_distill.fmcw_sim.RaMaps` holding
    probabilities in ``y_cls`` / ``y_seg`` and residuals in ``y_reg``::

        L_det = focal(cls) + alpha * smooth_l1(reg at object cells)
        L_seg = sum over cells of BCE(seg)
        L     = L_det + beta * L_seg

    The regression term averages over the object cells only and is zero for
    a frame without objects. Returns ``(loss, MapGrads)``.
    """
    for name in ("y_cls", "y_reg", "y_seg"):
        if getattr(pred, name).shape != getattr(gt, name).shape:
            raise ValueError(f"{name}: prediction shape {getattr(pred, name).shape} "
                             f"!= ground truth {getattr(gt, name).shape}")
    l_cls, g_cls = focal_loss(pred.y_cls, gt.y_cls, cfg.focal_gamma, cfg.focal_alpha)
    mask = gt.y_cls > 0.5
    g_reg = np.zeros_like(pred.y_reg)
    l_reg = 0.0
    if np.any(mask):
        l_reg, g = smooth_l1(pred.y_reg[mask], gt.y_reg[mask], cfg.smooth_l1_delta)
        g_reg[mask] = cfg.alpha * g
    l_seg, g_seg = bce_loss(pred.y_seg, gt.y_seg, reduction="sum")
    total = l_cls + cfg.alpha * l_reg + cfg.beta * l_seg
    return total, MapGrads(g_cls, g_reg, cfg.beta * g_seg)


# ---------------------------------------------------------------------------
# toy head


N_OUTPUTS = 4  # cls logit, range residual, azimuth residual, seg logit


@dataclass
class HeadParams:
    """Toy head weights.

    The regression outputs are in bin units; ``reg_scale`` (range metres,
    azimuth radians per unit) converts them, which keeps Adam's step size
    sensible for sub-bin residuals.
    """

    weight: np.ndarray
    bias: np.ndarray
    feature_scale: float = 1.0
    reg_scale: tuple = (1.0, 1.0)
    # per-column standardisation of the unfolded features, fixed from training data
    feature_mean: np.ndarray = None
    feature_std: np.ndarray = None

    def __post_init__(self):
        n = self.weight.shape[1]
        if self.feature_mean is None:
            self.feature_mean = np.zeros(n)
        if self.feature_std is None:
            self.feature_std = np.ones(n)

    def as_dict(self):
        return {"weight": self.weight, "bias": self.bias}

    def copy(self):
        return HeadParams(self.weight.copy(), self.bias.copy(), self.feature_scale, self.reg_scale,
                          self.feature_mean.copy(), self.feature_std.copy())


def init_head(n_features, feature_scale=1.0, reg_scale=(1.0, 1.0), prior=0.01):
    """Zero weights; class bias set so the initial object probability is ``prior``.

    ``n_features`` is the per-cell feature count; the weight covers the 3x3
    neighbourhood.
    """
    bias = np.zeros(N_OUTPUTS)
    bias[0] = -math.log((1.0 - prior) / prior)
    return HeadParams(np.zeros((N_OUTPUTS, 9 * n_features)), bias, float(feature_scale),
                      tuple(float(x) for x in reg_scale))


_NEIGHBOURS = tuple((i, j) for i in (-1, 0, 1) for j in (-1, 0, 1) if (i, j) != (0, 0))


def cell_features(rad, feature_scale):
    """Per-cell features ``(..., N, M, B) -> (..., N, B, M + 1)``.

    The first ``M`` channels are the cell's Doppler profile sorted in
    decreasing order and compressed with ``log1p(x / feature_scale)``. The
    last channel is the cell's peak compressed magnitude minus the largest
    peak among its 8 neighbours, which is positive only at local maxima.
    Also returns what :func:`feature_backward` needs.
    """
    prof = np.swapaxes(np.asarray(rad, dtype=np.float64), -1, -2)
    order = np.argsort(-prof, axis=-1, kind="stable")
    sp = np.take_along_axis(prof, order, axis=-1)
    logs = np.log1p(sp / feature_scale)
    peak = logs[..., 0]
    n_r, n_b = peak.shape[-2:]
    pad = [(0, 0)] * (peak.ndim - 2) + [(1, 1), (1, 1)]
    padded = np.pad(peak, pad, constant_values=-np.inf)
    neigh = np.stack([padded[..., 1 + i:1 + i + n_r, 1 + j:1 + j + n_b] for i, j in _NEIGHBOURS])
    arg = np.argmax(neigh, axis=0)
    contrast = peak - np.take_along_axis(neigh, arg[None], axis=0)[0]
    feats = np.concatenate([logs, contrast[..., None]], axis=-1)
    return feats, (order, sp, arg)


def feature_backward(grad_feat, aux, feature_scale):
    """Map feature gradients back onto the RAD tensor layout."""
    order, sp, arg = aux
    d_logs = grad_feat[..., :-1].copy()
    d_c = grad_feat[..., -1]
    d_logs[..., 0] += d_c
    n_r, n_b = d_c.shape[-2:]
    d_pad = np.zeros(d_c.shape[:-2] + (n_r + 2, n_b + 2))
    for k, (i, j) in enumerate(_NEIGHBOURS):
        d_pad[..., 1 + i:1 + i + n_r, 1 + j:1 + j + n_b] -= np.where(arg == k, d_c, 0.0)
    d_logs[..., 0] += d_pad[..., 1:-1, 1:-1]
    d_sp = d_logs / (feature_scale + sp)
    d_prof = np.empty_like(d_sp)
    np.put_along_axis(d_prof, order, d_sp, axis=-1)
    return np.swapaxes(d_prof, -1, -2)


def _sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * z))


KERNEL = 3  # head receptive field, in cells per side


def unfold_cells(feats):
    """Stack each cell's 3x3 neighbourhood features: ``(..., N, B, F) -> (..., N, B, 9F)``.

    Cells outside the map contribute zeros.
    """
    n_r, n_b = feats.shape[-3], feats.shape[-2]
    pad = [(0, 0)] * (feats.ndim - 3) + [(1, 1), (1, 1), (0, 0)]
    padded = np.pad(feats, pad)
    views = [padded[..., i:i + n_r, j:j + n_b, :] for i in range(KERNEL) for j in range(KERNEL)]
    return np.concatenate(views, axis=-1)


def fold_cells(grad_unf, n_features):
    """Adjoint of :func:`unfold_cells`."""
    n_r, n_b = grad_unf.shape[-3], grad_unf.shape[-2]
    lead = grad_unf.shape[:-3]
    padded = np.zeros(lead + (n_r + 2, n_b + 2, n_features))
    k = 0
    for i in range(KERNEL):
        for j in range(KERNEL):
            padded[..., i:i + n_r, j:j + n_b, :] += grad_unf[..., k * n_features:(k + 1) * n_features]
            k += 1
    return padded[..., 1:-1, 1:-1, :]


def head_forward(head, feats):
    """3x3 linear conv head on features ``(..., N, B, F)``.

    Returns the predicted ``RaMaps`` and the unfolded features, which
    :func:`head_backward` needs.
    """
    unf = (unfold_cells(feats) - head.feature_mean) / head.feature_std
    z = unf @ head.weight.T + head.bias
    maps = RaMaps(_sigmoid(z[..., 0]), z[..., 1:3] * np.asarray(head.reg_scale),
                  _sigmoid(z[..., 3]))
    return maps, unf


def head_backward(head, unf, maps, grads):
    """Chain map gradients through the sigmoids and the conv layer.

    Returns ``(dict of head gradients, gradient w.r.t. the base features)``.
    """
    dz = np.empty(maps.y_cls.shape + (N_OUTPUTS,))
    # sigmoid slope taken at the loss clamp, so saturated cells keep a gradient
    p_cls, p_seg = _clamp(maps.y_cls), _clamp(maps.y_seg)
    dz[..., 0] = grads.cls * p_cls * (1.0 - p_cls)
    dz[..., 1:3] = grads.reg * np.asarray(head.reg_scale)
    dz[..., 3] = grads.seg * p_seg * (1.0 - p_seg)
    flat_dz = dz.reshape(-1, N_OUTPUTS)
    flat_u = unf.reshape(-1, unf.shape[-1])
    d_w = flat_dz.T @ flat_u
    d_b = flat_dz.sum(axis=0)
    return {"weight": d_w, "bias": d_b}, fold_cells((dz @ head.weight) / head.feature_std,
                                                  unf.shape[-1] // KERNEL ** 2)


def head_save(path, head, metadata=None):
    os.makedirs(path, exist_ok=True)
    tensor_write(os.path.join(path, "weight.rten"), head.weight)
    tensor_write(os.path.join(path, "bias.rten"), head.bias)
    tensor_write(os.path.join(path, "feature_mean.rten"), head.feature_mean)
    tensor_write(os.path.join(path, "feature_std.rten"), head.feature_std)
    meta = {"format": "radar_distill.toy_head", "version": 1,
            "feature_scale": head.feature_scale, "reg_scale": list(head.reg_scale)}
    meta.update(metadata or {})
    with open(os.path.join(path, "meta.json"), "w", encoding="utf-8") as fh:
        json.dump(meta, fh, sort_keys=True, indent=2)
        fh.write("\n")


def head_load(path):
    with open(os.path.join(path, "meta.json"), encoding="utf-8") as fh:
        meta = json.load(fh)
    return HeadParams(tensor_read(os.path.join(path, "weight.rten")),
                      tensor_read(os.path.join(path, "bias.rten")),
                      float(meta["feature_scale"]), tuple(meta["reg_scale"]),
                      tensor_read(os.path.join(path, "feature_mean.rten")),
                      tensor_read(os.path.join(path, "feature_std.rten"))), meta


# ---------------------------------------------------------------------------
# decoding and metrics


def _local_max(plane):
    n_r, n_b = plane.shape
    padded = np.pad(plane, 1, mode="constant", constant_values=-np.inf)
    neigh = np.max(np.stack([padded[i:i + n_r, j:j + n_b]
                             for i in range(3) for j in range(3) if (i, j) != (1, 1)]), axis=0)
    return plane >= neigh


def decode_detections(cls_probs, reg, threshold, range_bin_m, spacing=0.5):
    """Detections from a class-probability map and residual map.

    A cell fires when its probability is at least ``threshold`` and no
    3x3 neighbour is larger. Range is ``bin * range_bin_m + reg[..., 0]``;
    azimuth is the bin's lower-edge angle plus ``reg[..., 1]``.
    """
    if not 0 < threshold < 1:
        raise ValueError(f"threshold must lie in (0, 1), got {threshold}")
    cls_probs = np.asarray(cls_probs, dtype=np.float64)
    n_az = cls_probs.shape[1]
    hits = (cls_probs >= threshold) & _local_max(cls_probs)
    dets = []
    for r, b in zip(*np.nonzero(hits)):
        dets.append({
            "range_m": float(r * range_bin_m + reg[r, b, 0]),
            "azimuth_rad": float(azimuth_bin_edge(int(b), n_az, spacing) + reg[r, b, 1]),
            "score": float(min(1.0, max(0.0, cls_probs[r, b]))),
        })
    return dets


def match_detections(dets, gts, tol_range, tol_azimuth):
    """Greedy one-to-one matching by ascending range error inside a tolerance box.

    Ties break on azimuth error, then detection index, then truth index.
    Returns a list of ``(det_index, gt_index)``.
    """
    cands = []
    for i, d in enumerate(dets):
        for j, g in enumerate(gts):
            er = abs(d["range_m"] - g["range_m"])
            ea = abs(d["azimuth_rad"] - g["azimuth_rad"])
            if er <= tol_range and ea <= tol_azimuth:
                cands.append((er, ea, i, j))
    cands.sort()
    used_d, used_g, pairs = set(), set(), []
    for _, _, i, j in cands:
        if i not in used_d and j not in used_g:
            used_d.add(i)
            used_g.add(j)
            pairs.append((i, j))
    return pairs


def _prf(tp, n_det, n_gt):
    if n_det == 0 and n_gt == 0:
        return 1.0, 1.0, 1.0
    p = tp / n_det if n_det else 0.0
    r = tp / n_gt if n_gt else 0.0
    f1 = 2 * p * r / (p + r) if p + r > 0 else 0.0
    return p, r, f1


def score_detections(dets_per_frame, gts_per_frame, tolerances, thresholds=DEFAULT_THRESHOLDS,
                     reference_threshold=0.5):
    """AP / AR / F1 averaged over score thresholds, plus range and azimuth error.

    At each threshold, detections with ``score >= threshold`` are matched per
    frame with :func:`match_detections`; precision and recall pool the
    counts over all frames. With no detections and no truths at a threshold,
    P = R = F1 = 1; with no detections but some truths, P = 0.
    RE / AE are mean absolute errors over pairs matched at
    ``reference_threshold`` (``None`` when nothing matches).
    """
    thresholds = list(thresholds)
    if not thresholds:
        raise ValueError("threshold list is empty")
    tol_r = float(tolerances["range_m"])
    tol_a = float(tolerances["azimuth_rad"])
    if not (tol_r > 0 and tol_a > 0):
        raise ValueError("tolerances must be > 0")
    if len(dets_per_frame) != len(gts_per_frame):
        raise ValueError("need one detection list per ground-truth frame")

    def counts(t):
        tp = nd = ng = 0
        errs = []
        for dets, gts in zip(dets_per_frame, gts_per_frame):
            kept = [d for d in dets if d["score"] >= t]
            pairs = match_detections(kept, gts, tol_r, tol_a)
            tp += len(pairs)
            nd += len(kept)
            ng += len(gts)
            errs.extend((abs(kept[i]["range_m"] - gts[j]["range_m"]),
                         abs(kept[i]["azimuth_rad"] - gts[j]["azimuth_rad"])) for i, j in pairs)
        return tp, nd, ng, errs

    per = []
    for t in thresholds:
        tp, nd, ng, _ = counts(t)
        p, r, f1 = _prf(tp, nd, ng)
        per.append({"threshold": t, "precision": p, "recall": r, "f1": f1,
                    "tp": tp, "n_det": nd, "n_gt": ng})
    _, _, _, errs = counts(reference_threshold)
    re_m = float(np.mean([e[0] for e in errs])) if errs else None
    ae = float(np.mean([e[1] for e in errs])) if errs else None
    return {
        "ap": float(np.mean([x["precision"] for x in per])),
        "ar": float(np.mean([x["recall"] for x in per])),
        "f1": float(np.mean([x["f1"] for x in per])),
        "re_m": re_m,
        "ae_rad": ae,
        "per_threshold": per,
    }


def iou(pred_mask, gt_mask):
    """Intersection over union of two binary masks; 1.0 when both are empty."""
    a = np.asarray(pred_mask) > 0.5
    b = np.asarray(gt_mask) > 0.5
    if a.shape != b.shape:
        raise ValueError(f"mask shape mismatch: {a.shape} vs {b.shape}")
    union = np.count_nonzero(a | b)
    if union == 0:
        return 1.0
    return np.count_nonzero(a & b) / union


def miou(pred_masks, gt_masks):
    """Mean IoU over frames."""
    if len(pred_masks) != len(gt_masks):
        raise ValueError("frame count mismatch")
    if not len(pred_masks):
        raise ValueError("no frames")
    return float(np.mean([iou(p, g) for p, g in zip(pred_masks, gt_masks)]))


def targets_as_truth(scene):
    return [{"range_m": t.range_m, "azimuth_rad": t.azimuth_rad} for t in scene.targets]


def write_report(path, report):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(report, fh, sort_keys=True, indent=2, allow_nan=False)
        fh.write("\n")


def write_threshold_csv(path, per_threshold):
    cols = ("threshold", "precision", "recall", "f1", "tp", "n_det", "n_gt")
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(cols)
        for row in per_threshold:
            w.writerow([repr(row[c]) if isinstance(row[c], float) else row[c] for c in cols])


# ---------------------------------------------------------------------------
# fine-tuning


@dataclass(frozen=True)
class HeadTrainConfig:
    learning_rate: float = 1e-2
    batch_size: int = 8
    steps: int = 2000
    eval_every: int = 500
    seed: int = 0
    seg_radius: float = 1.0
    unfreeze_sp: bool = False
    sp_learning_rate: float = 1e-4
    holdout_fraction: float = 0.1
    thresholds: tuple = DEFAULT_THRESHOLDS
    range_tolerance_bins: float = 1.0
    azimuth_tolerance_rad: float = 0.1
    loss: LossConfig = field(default_factory=LossConfig)

    def to_dict(self):
        d = dataclasses.asdict(self)
        d["thresholds"] = list(self.thresholds)
        return d


@dataclass
class FinetuneResult:
    head: HeadParams
    sp_params: lsp.LearnableSpParams
    history: list
    report: dict


class _AdamCfg:
    def __init__(self, lr):
        self.learning_rate = lr
        self.adam_beta1 = 0.9
        self.adam_beta2 = 0.999
        self.adam_eps = 1e-8


def _frames(manifest, radar_cfg, seg_radius):
    recs = sorted(manifest.records, key=lambda r: r["scene_id"])
    scenes = [scene_from_record(r) for r in recs]
    adcs = np.stack([tensor_read(manifest.resolve(r["adc_path"])) for r in recs])
    n_r, n_b = radar_cfg.n_samples, radar_cfg.n_azimuth_bins
    labels = [rasterize_labels(s, radar_cfg, n_r, n_b, seg_radius) for s in scenes]
    return scenes, adcs, labels


def _stack_maps(labels):
    return RaMaps(np.stack([m.y_cls for m in labels]), np.stack([m.y_reg for m in labels]),
                  np.stack([m.y_seg for m in labels]))


def evaluate_head(head, feats, scenes, radar_cfg, cfg):
    """Detection and segmentation metrics of the head on precomputed features."""
    maps, _ = head_forward(head, feats)
    labels = [rasterize_labels(s, radar_cfg, feats.shape[-3], feats.shape[-2], cfg.seg_radius)
              for s in scenes]
    dr = radar_cfg.max_range_m / feats.shape[-3]
    min_t = min(cfg.thresholds + (0.5,))
    dets = [decode_detections(maps.y_cls[i], maps.y_reg[i], min_t, dr,
                              radar_cfg.element_spacing_wavelengths) for i in range(len(scenes))]
    gts = [targets_as_truth(s) for s in scenes]
    tol = {"range_m": cfg.range_tolerance_bins * dr, "azimuth_rad": cfg.azimuth_tolerance_rad}
    scores = score_detections(dets, gts, tol, cfg.thresholds)
    scores["miou"] = miou(list(maps.y_seg), [m.y_seg for m in labels])
    scores["thresholds"] = list(cfg.thresholds)
    scores["tolerances"] = tol
    return scores


def finetune_toy_head(checkpoint, manifest, radar_cfg, cfg, steps=None, log=None):
    """Train the toy head on RAD predicted by a distilled SP checkpoint.

    ``checkpoint`` is a checkpoint directory or ``LearnableSpParams``.
    Labels come from rasterizing each scene's targets on the RAD's range and
    azimuth grid. The last ``holdout_fraction`` of scenes (by id) is held out
    for evaluation. With ``cfg.unfreeze_sp`` the SP weights are trained too,
    through the head's feature gradients.
    """
    if isinstance(manifest, str):
        manifest = DatasetManifest.read(manifest)
    if isinstance(checkpoint, str):
        sp = lsp.params_load(checkpoint)[0]
    else:
        sp = checkpoint.copy()
    steps = cfg.steps if steps is None else steps
    scenes, adcs, labels = _frames(manifest, radar_cfg, cfg.seg_radius)
    train_idx, hold_idx = split_holdout(len(scenes), cfg.holdout_fraction)
    if not len(hold_idx):
        hold_idx = train_idx

    rad_all, _ = lsp.forward(sp, adcs)
    feature_scale = float(np.median(rad_all[train_idx]))
    if not feature_scale > 0:
        feature_scale = 1.0
    feats_all = cell_features(rad_all, feature_scale)[0]
    n_az = radar_cfg.n_azimuth_bins
    az_width = azimuth_bin_edge(n_az // 2 + 1, n_az, radar_cfg.element_spacing_wavelengths)
    head = init_head(feats_all.shape[-1], feature_scale,
                     (radar_cfg.max_range_m / radar_cfg.n_samples, az_width))
    unf = unfold_cells(feats_all[train_idx])
    head.feature_mean = unf.reshape(-1, unf.shape[-1]).mean(axis=0)
    head.feature_std = np.maximum(unf.reshape(-1, unf.shape[-1]).std(axis=0), 1e-6)
    del unf
    head_state = AdamState()
    sp_state = AdamState()
    head_cfg = _AdamCfg(cfg.learning_rate)
    sp_cfg = _AdamCfg(cfg.sp_learning_rate)
    gt_all = _stack_maps(labels)

    rng = make_rng(cfg.seed, 2_000_003)
    order = []
    history = []
    losses = []

    def eval_now(step):
        if cfg.unfreeze_sp:
            rad, _ = lsp.forward(sp, adcs[hold_idx])
            feats = cell_features(rad, feature_scale)[0]
        else:
            feats = feats_all[hold_idx]
        s = evaluate_head(head, feats, [scenes[i] for i in hold_idx], radar_cfg, cfg)
        rec = {"step": step, "train_loss": float(np.mean(losses)) if losses else math.nan,
               "ap": s["ap"], "ar": s["ar"], "f1": s["f1"], "miou": s["miou"]}
        history.append(rec)
        if log:
            log(f"head step {step:5d}  loss {rec['train_loss']:.5g}  F1 {s['f1']:.3f}  "
                f"mIOU {s['miou']:.3f}")
        return s

    for step in range(steps):
        while len(order) < cfg.batch_size:
            order.extend(int(i) for i in rng.permutation(train_idx))
        idx, order = order[:cfg.batch_size], order[cfg.batch_size:]
        if cfg.unfreeze_sp:
            rad, cache = lsp.forward(sp, adcs[idx])
            feats, f_aux = cell_features(rad, feature_scale)
        else:
            feats = feats_all[idx]
        maps, unf = head_forward(head, feats)
        total = 0.0
        g_cls = np.empty_like(maps.y_cls)
        g_reg = np.empty_like(maps.y_reg)
        g_seg = np.empty_like(maps.y_seg)
        for k, i in enumerate(idx):
            pred_k = RaMaps(maps.y_cls[k], maps.y_reg[k], maps.y_seg[k])
            gt_k = RaMaps(gt_all.y_cls[i], gt_all.y_reg[i], gt_all.y_seg[i])
            loss_k, g = multitask_loss(pred_k, gt_k, cfg.loss)
            total += loss_k
            g_cls[k], g_reg[k], g_seg[k] = g.cls, g.reg, g.seg
        k_batch = len(idx)
        losses.append(total / k_batch)
        grads = MapGrads(g_cls / k_batch, g_reg / k_batch, g_seg / k_batch)
        d_head, d_feat = head_backward(head, unf, maps, grads)
        if cfg.unfreeze_sp:
            d_rad = feature_backward(d_feat, f_aux, feature_scale)
            adam_step(sp, lsp.backward(sp, cache, d_rad), sp_state, sp_cfg)
        adam_step(head.as_dict(), d_head, head_state, head_cfg)
        if (step + 1) % cfg.eval_every == 0 or step + 1 == steps:
            eval_now(step + 1)
            losses = []

    if cfg.unfreeze_sp:
        rad, _ = lsp.forward(sp, adcs[hold_idx])
        feats = cell_features(rad, feature_scale)[0]
    else:
        feats = feats_all[hold_idx]
    report = evaluate_head(head, feats, [scenes[i] for i in hold_idx], radar_cfg, cfg)
    return FinetuneResult(head, sp, history, report)


def write_head_history(path, history):
    cols = ("step", "train_loss", "ap", "ar", "f1", "miou")
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(cols)
        for rec in history:
            w.writerow([rec["step"]] + [repr(float(rec[c])) for c in cols[1:]])
