"""Distillation of the teacher RAD into the learnable SP module.

Training minimises the mean smooth-L1 distance between the module's RAD and
the teacher's, using Adam with a constant learning rate. Held-out quality
is the per-entry relative absolute error ``|Y - Yhat| / (|Y| + eps)``.
"""

import csv
import dataclasses
import json
import math
import os
import shutil
import time
from dataclasses import dataclass, field
from types import SimpleNamespace

import numpy as np

from . import learnable_sp as lsp
from .errors import NumericalError
from .fmcw_sim import DatasetManifest
from .tensor import make_rng, tensor_read, tensor_write

HISTORY_FIELDS = ("step", "train_loss", "mean_rae", "max_rae", "wall_ms")


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 4e-4
    batch_size: int = 4
    max_steps: int = 5000
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    smooth_l1_delta: float = 1.0
    eval_every: int = 250
    seed: int = 0
    shuffle: bool = True
    rae_eps: float = 1e-8
    holdout_fraction: float = 0.1

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be > 0")
        for name in ("adam_beta1", "adam_beta2"):
            if not 0 < getattr(self, name) < 1:
                raise ValueError(f"{name} must lie in (0, 1)")
        if not self.smooth_l1_delta > 0:
            raise ValueError("smooth_l1_delta must be > 0")
        if self.batch_size < 1 or self.eval_every < 1 or self.max_steps < 0:
            raise ValueError("batch_size and eval_every must be >= 1, max_steps >= 0")
        if not self.rae_eps > 0:
            raise ValueError("rae_eps must be > 0")
        if not 0 <= self.holdout_fraction < 1:
            raise ValueError("holdout_fraction must lie in [0, 1)")

    def to_dict(self):
        return dataclasses.asdict(self)


def smooth_l1(pred, target, delta=1.0):
    """Mean Huber loss and its gradient with respect to ``pred``.

    Per entry, with ``e = pred - target``: ``0.5 e^2 / delta`` if
    ``|e| < delta`` else ``|e| - 0.5 delta``.
    """
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise ValueError(f"shape mismatch: {pred.shape} vs {target.shape}")
    if not delta > 0:
        raise ValueError("delta must be > 0")
    e = pred - target
    small = np.abs(e) < delta
    per = np.where(small, 0.5 * e * e / delta, np.abs(e) - 0.5 * delta)
    grad = np.where(small, e / delta, np.sign(e)) / e.size
    return float(np.mean(per)), grad


def rae(target, pred, eps=1e-8):
    """Per-entry relative absolute error with its mean and max."""
    target = np.asarray(target, dtype=np.float64)
    pred = np.asarray(pred, dtype=np.float64)
    if target.shape != pred.shape:
        raise ValueError(f"shape mismatch: {target.shape} vs {pred.shape}")
    if not eps > 0:
        raise ValueError("eps must be > 0")
    per = np.abs(target - pred) / (np.abs(target) + eps)
    return per, float(np.mean(per)), float(np.max(per))


@dataclass
class AdamState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    t: int = 0


def adam_step(params, grads, state, cfg):
    """One bias-corrected Adam update, in place on ``params`` and ``state``.

    ``params`` and ``grads`` are name -> array mappings (or objects with an
    ``as_dict`` method). Non-finite gradients raise ``NumericalError``
    before anything is modified.
    """
    p = params.as_dict() if hasattr(params, "as_dict") else params
    g = grads.as_dict() if hasattr(grads, "as_dict") else grads
    for name, arr in p.items():
        if g[name].shape != arr.shape:
            raise ValueError(f"gradient for {name} has shape {g[name].shape}, expected {arr.shape}")
        if not np.all(np.isfinite(g[name])):
            raise NumericalError(f"non-finite gradient for {name}; step aborted")
    b1, b2 = cfg.adam_beta1, cfg.adam_beta2
    state.t += 1
    bc1 = 1.0 - b1 ** state.t
    bc2 = 1.0 - b2 ** state.t
    for name, arr in p.items():
        grad = g[name]
        if name not in state.m:
            state.m[name] = np.zeros_like(arr)
            state.v[name] = np.zeros_like(arr)
        m = state.m[name]
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * grad
        v *= b2
        v += (1.0 - b2) * grad * grad
        arr -= cfg.learning_rate * (m / bc1) / (np.sqrt(v / bc2) + cfg.adam_eps)
    return params, state


@dataclass
class TrainHistory:
    records: list = field(default_factory=list)

    def append(self, step, train_loss, mean_rae, max_rae, wall_ms):
        if self.records and step <= self.records[-1]["step"]:
            raise ValueError("history steps must be strictly increasing")
        self.records.append({"step": int(step), "train_loss": float(train_loss),
                             "mean_rae": float(mean_rae), "max_rae": float(max_rae),
                             "wall_ms": float(wall_ms)})

    def __len__(self):
        return len(self.records)

    def write_csv(self, path):
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(HISTORY_FIELDS)
            for r in self.records:
                w.writerow([r["step"]] + [repr(r[k]) for k in HISTORY_FIELDS[1:-1]]
                           + [f"{r['wall_ms']:.3f}"])

    @classmethod
    def read_csv(cls, path):
        h = cls()
        with open(path, newline="", encoding="utf-8") as fh:
            for row in csv.DictReader(fh):
                h.append(int(row["step"]), float(row["train_loss"]), float(row["mean_rae"]),
                         float(row["max_rae"]), float(row["wall_ms"]))
        return h


def load_pairs(manifest):
    """Stack ``(adc, rad)`` arrays for every scene, sorted by ``scene_id``."""
    recs = sorted(manifest.records, key=lambda r: r["scene_id"])
    adcs, rads = [], []
    for rec in recs:
        if not rec.get("rad_path"):
            raise ValueError(f"scene {rec['scene_id']} has no rad_path; run the teacher first")
        adc_path = manifest.resolve(rec["adc_path"])
        rad_path = manifest.resolve(rec["rad_path"])
        for p in (adc_path, rad_path):
            if not os.path.exists(p):
                raise FileNotFoundError(f"missing tensor file {p}")
        adcs.append(tensor_read(adc_path))
        rads.append(tensor_read(rad_path))
    if not recs:
        raise ValueError("manifest is empty")
    return recs, np.stack(adcs), np.stack(rads)


def split_holdout(n, fraction):
    """Indices ``(train, held_out)``: the last ``ceil(fraction * n)`` scenes are held out."""
    n_hold = min(n - 1, int(math.ceil(fraction * n))) if fraction > 0 and n > 1 else 0
    return np.arange(n - n_hold), np.arange(n - n_hold, n)


def evaluate_rae(params, adcs, rads, eps=1e-8, chunk=16):
    total = 0.0
    worst = 0.0
    count = 0
    for i in range(0, len(adcs), chunk):
        pred, _ = lsp.forward(params, adcs[i:i + chunk])
        per, _, mx = rae(rads[i:i + chunk], pred, eps)
        total += float(np.sum(per))
        count += per.size
        worst = max(worst, mx)
    return total / count, worst


def _save_adam(path, state):
    os.makedirs(path, exist_ok=True)
    for name in state.m:
        tensor_write(os.path.join(path, f"m_{name}.rten"), state.m[name])
        tensor_write(os.path.join(path, f"v_{name}.rten"), state.v[name])
    with open(os.path.join(path, "adam.json"), "w", encoding="utf-8") as fh:
        json.dump({"t": state.t}, fh)


def _load_adam(path):
    state = AdamState()
    with open(os.path.join(path, "adam.json"), encoding="utf-8") as fh:
        state.t = int(json.load(fh)["t"])
    for name in lsp.PARAM_NAMES:
        mp = os.path.join(path, f"m_{name}.rten")
        if os.path.exists(mp):
            state.m[name] = tensor_read(mp)
            state.v[name] = tensor_read(os.path.join(path, f"v_{name}.rten"))
    return state


@dataclass
class DistillResult:
    checkpoint: str
    final_checkpoint: str
    init_checkpoint: str
    history: TrainHistory
    init_params: lsp.LearnableSpParams
    final_params: lsp.LearnableSpParams
    best_params: lsp.LearnableSpParams

    @property
    def final_mean_rae(self):
        return self.history.records[-1]["mean_rae"] if self.history.records else math.nan

    @property
    def final_max_rae(self):
        return self.history.records[-1]["max_rae"] if self.history.records else math.nan


def distill(manifest, scheme, cfg, out_dir, radar_cfg=None, cfg_digest=None, resume=None,
            window_kind="hann", log=None):
    """Train the learnable module on ``(ADC, teacher RAD)`` pairs.

    Writes into ``out_dir``: ``init/`` (initial weights), ``checkpoint/``
    (best held-out mean RAE), ``final/`` (weights and Adam state after the
    last step) and ``history.csv``. With ``max_steps == 0`` the checkpoint is
    the initialisation and the history is empty.

    When ``max_steps > 0`` evaluation runs at step 0, every ``eval_every``
    steps and at the last step. ``train_loss`` of a record is the mean batch
    loss since the previous record (the step-0 record uses the first batch at
    the initial weights). Evaluation uses the held-out split; with no
    held-out scenes it falls back to the training set.
    """
    if isinstance(manifest, str):
        manifest = DatasetManifest.read(manifest)
    recs, adcs, rads = load_pairs(manifest)
    digest = cfg_digest or recs[0].get("cfg_digest")
    train_idx, hold_idx = split_holdout(len(recs), cfg.holdout_fraction)
    eval_adc = adcs[hold_idx] if len(hold_idx) else adcs[train_idx]
    eval_rad = rads[hold_idx] if len(hold_idx) else rads[train_idx]

    n, m, a = adcs.shape[1:]
    b = rads.shape[-1]
    if rads.shape[1:] != (n, m, b):
        raise ValueError(f"RAD shape {rads.shape[1:]} incompatible with ADC shape {adcs.shape[1:]}")
    if radar_cfg is None:
        # init_params only needs the tensor dimensions
        radar_cfg = SimpleNamespace(n_samples=n, n_chirps=m, n_antennas=a, n_azimuth_bins=b)

    os.makedirs(out_dir, exist_ok=True)
    history_path = os.path.join(out_dir, "history.csv")
    start_step = 0
    if resume:
        params, meta = lsp.params_load(resume)
        start_step = int(meta.get("step", 0))
        init = lsp.params_load(os.path.join(out_dir, "init"))[0] \
            if os.path.exists(os.path.join(out_dir, "init", "meta.json")) else params.copy()
        adam_dir = os.path.join(resume, "adam")
        state = _load_adam(adam_dir) if os.path.exists(os.path.join(adam_dir, "adam.json")) \
            else AdamState()
        history = TrainHistory.read_csv(history_path) if os.path.exists(history_path) \
            else TrainHistory()
    else:
        params = lsp.init_params(scheme, radar_cfg, window_kind)
        init = params.copy()
        state = AdamState()
        history = TrainHistory()

    def meta(step, extra=None):
        d = {"scheme": scheme.variant, "gamma": scheme.gamma, "seed": scheme.seed,
             "step": int(step), "cfg_digest": digest, "loss_history_path": "../history.csv",
             "train": cfg.to_dict()}
        d.update(extra or {})
        return d

    init_dir = os.path.join(out_dir, "init")
    best_dir = os.path.join(out_dir, "checkpoint")
    final_dir = os.path.join(out_dir, "final")
    if not resume:
        lsp.params_save(init_dir, init, meta(0))
    best = params.copy()
    best_rae = math.inf
    if history.records:
        best_rae = min(r["mean_rae"] for r in history.records)
        if os.path.exists(os.path.join(best_dir, "meta.json")):
            best = lsp.params_load(best_dir)[0]

    rng = make_rng(cfg.seed, 1_000_003)
    # replay the shuffle stream up to the resume point so batches match
    order = []
    def next_batch():
        nonlocal order
        while len(order) < cfg.batch_size:
            perm = rng.permutation(train_idx) if cfg.shuffle else train_idx.copy()
            order.extend(int(i) for i in perm)
        idx, order = order[:cfg.batch_size], order[cfg.batch_size:]
        return idx
    for _ in range(start_step):
        next_batch()

    t0 = time.perf_counter()
    end_step = start_step + cfg.max_steps
    losses = []

    def record(step, train_loss):
        nonlocal best, best_rae
        mean_r, max_r = evaluate_rae(params, eval_adc, eval_rad, cfg.rae_eps)
        history.append(step, train_loss, mean_r, max_r, 1000.0 * (time.perf_counter() - t0))
        if mean_r < best_rae:
            best_rae = mean_r
            best = params.copy()
            lsp.params_save(best_dir, best, meta(step, {"mean_rae": mean_r}))
        if log:
            log(f"step {step:6d}  loss {train_loss:.6g}  mean RAE {mean_r:.4g}  max RAE {max_r:.4g}")

    for step in range(start_step, end_step):
        idx = next_batch()
        pred, cache = lsp.forward(params, adcs[idx])
        loss, grad = smooth_l1(pred, rads[idx], cfg.smooth_l1_delta)
        if not math.isfinite(loss):
            lsp.params_save(final_dir, params, meta(step, {"diverged": True}))
            history.write_csv(history_path)
            raise NumericalError(f"training loss became non-finite at step {step}; "
                                 f"last good weights kept in {final_dir}")
        if step == start_step and not history.records:
            record(step, loss)
        losses.append(loss)
        # smooth_l1 already averages over every entry of the batch
        grads = lsp.backward(params, cache, grad)
        try:
            adam_step(params, grads, state, cfg)
        except NumericalError:
            lsp.params_save(final_dir, params, meta(step, {"diverged": True}))
            history.write_csv(history_path)
            raise
        done = step + 1
        if done % cfg.eval_every == 0 or done == end_step:
            record(done, float(np.mean(losses)))
            losses = []

    if cfg.max_steps == 0 and not resume:
        lsp.params_save(best_dir, params, meta(start_step))
        best = params.copy()
    lsp.params_save(final_dir, params, meta(end_step))
    _save_adam(os.path.join(final_dir, "adam"), state)
    history.write_csv(history_path)
    return DistillResult(best_dir, final_dir, init_dir, history, init, params, best)


ABLATION_FIELDS = ("scheme", "gamma", "status", "final_mean_rae", "final_max_rae",
                   "best_mean_rae") + tuple(f"drift_{n}" for n in lsp.PARAM_NAMES)


def init_ablation(manifest, schemes, cfg, out_dir, radar_cfg=None, gammas=(),
                  fail_threshold=0.5, log=None):
    """Distill once per scheme (and per extra perturbation gamma) at equal budget.

    Every run shares ``cfg`` (same seed, batches and steps). A run whose
    final held-out mean RAE is non-finite or above ``fail_threshold`` is
    reported with status ``failed_to_converge``; exceptions are recorded as
    ``error: ...`` and the sweep continues. Writes ``ablation.csv`` and
    returns the rows.

    A perturbed run with gamma 0 starts from exactly the exact-DFT weights,
    so it reuses that run's result instead of training twice.
    """
    runs = list(schemes)
    seen = {(s.variant, s.gamma if s.variant == "perturbed" else None) for s in runs}
    base_seed = runs[0].seed if runs else 0
    for g in gammas:
        key = ("perturbed", float(g))
        if key not in seen:
            runs.append(lsp.InitScheme("perturbed", float(g), base_seed))
            seen.add(key)
    os.makedirs(out_dir, exist_ok=True)
    rows = []
    done = {}
    for scheme in runs:
        tag = scheme.variant if scheme.variant != "perturbed" else f"perturbed_g{scheme.gamma:g}"
        run_dir = os.path.join(out_dir, tag)
        if os.path.exists(run_dir):
            shutil.rmtree(run_dir)
        row = {"scheme": scheme.variant, "gamma": scheme.gamma if scheme.variant == "perturbed" else ""}
        same_as = ("exact", scheme.seed) if scheme.variant == "exact" or (
            scheme.variant == "perturbed" and scheme.gamma == 0) else None
        if same_as in done:
            prev_row, prev_dir = done[same_as]
            shutil.copytree(prev_dir, run_dir)
            row.update({k: v for k, v in prev_row.items() if k not in ("scheme", "gamma")})
            rows.append(row)
            continue
        try:
            res = distill(manifest, scheme, cfg, run_dir, radar_cfg=radar_cfg, log=log)
            final = res.final_mean_rae
            ok = math.isfinite(final) and final <= fail_threshold
            row["status"] = "ok" if ok else "failed_to_converge"
            row["final_mean_rae"] = final
            row["final_max_rae"] = res.final_max_rae
            row["best_mean_rae"] = min((r["mean_rae"] for r in res.history.records), default=math.nan)
            for name, val in lsp.weight_drift(res.init_params, res.final_params).items():
                row[f"drift_{name}"] = val
        except (NumericalError, ValueError, OSError) as exc:
            row["status"] = f"error: {type(exc).__name__}: {exc}"
        if same_as is not None:
            done[same_as] = (row, run_dir)
        rows.append(row)
    with open(os.path.join(out_dir, "ablation.csv"), "w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=ABLATION_FIELDS, lineterminator="\n", restval="")
        w.writeheader()
        for row in rows:
            w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in row.items()})
    return rows
