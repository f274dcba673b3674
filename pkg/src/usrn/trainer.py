"""Training engine: warm-up, subclass taxonomy build, then joint training.

One step draws a small batch of labelled and (when enabled) unlabelled images,
applies a per-image weak geometric augmentation, composes the strong
corruption on top of each unlabelled weak view so pixels stay aligned, and
takes one SGD step on the batch-averaged objective. All randomness derives
from the config seed plus a stream tag plus the step index, so runs are
bit-reproducible and every ablation rung sees the same image and augmentation
sequence.

Unlabelled ground truth is structurally out of reach: the loop only ever
reads `.features` from the unlabelled pool.
"""

from __future__ import annotations

import csv
import dataclasses
import json
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .clustering import BACKENDS, VARIANTS, Taxonomy, build_taxonomy
from .errors import ConfigurationError, NumericalError
from .grids import FeatureGrid, LabelGrid
from .losses import (
    GATE_FALLBACKS,
    LossWeights,
    entropy_gated_select,
    select,
    selftrain_class_loss,
    selftrain_sub_loss,
    subclass_guided_select,
    supervised_loss,
)
from .metrics import ConfusionMatrix, adjusted_rand_index, cbr, miou
from .netcore import (
    SHARE_MODES,
    GradientSet,
    ModelParams,
    SgdState,
    forward,
    init_params,
    save_params,
    sgd_step,
    trunk_features,
)
from .synthdata import DEFAULT_MODE_NOISE, apply_geometry, augment_strong, weak_geometry

LOSS_COLUMNS = ("step", "total", "loss_sup", "loss_st", "loss_st_sub",
                "gate_open_fraction", "pseudo_coverage")


@dataclass(frozen=True)
class AblationFlags:
    """Which objective terms are live.

    msl: supervised training (always required).
    ost: plain confidence-thresholded self-training on unlabelled images.
    usr: subclass taxonomy + supervised subclass head + subclass-guided
         pseudo-labels (implies msl).
    sst: subclass-head self-training on unlabelled images (implies usr).
    egm: per-pixel entropy gate on the guided pseudo-labels (implies sst).
    """

    msl: bool = True
    ost: bool = False
    usr: bool = False
    sst: bool = False
    egm: bool = False

    def __post_init__(self) -> None:
        if not self.msl:
            raise ConfigurationError("supervised training (msl) cannot be disabled")
        if self.usr and not self.msl:
            raise ConfigurationError("usr requires msl")
        if self.sst and not self.usr:
            raise ConfigurationError("sst requires usr")
        if self.egm and not self.sst:
            raise ConfigurationError("egm requires sst")

    @property
    def unlabelled_mode(self) -> str:
        if self.egm:
            return "gated"
        if self.usr and self.ost:
            return "guided"
        if self.ost:
            return "plain"
        return "none"

    def to_json(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_json(cls, payload: dict) -> "AblationFlags":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(payload) - known
        if unknown:
            raise ConfigurationError(f"unknown ablation flags: {sorted(unknown)}")
        return cls(**payload)


LADDER = {
    "model_i": AblationFlags(),
    "model_ii": AblationFlags(ost=True),
    "model_iii": AblationFlags(ost=True, usr=True),
    "model_iv": AblationFlags(ost=True, usr=True, sst=True),
    "usrn": AblationFlags(ost=True, usr=True, sst=True, egm=True),
}


@dataclass
class TrainConfig:
    steps: int = 3700
    warmup_steps: int = 300
    labelled_batch: int = 4
    unlabelled_batch: int = 4
    lr: float = 1e-3
    momentum: float = 0.9
    weight_decay: float = 1e-4
    trunk_width: int = 16
    share_mode: str = "low"
    gamma: float = 0.75
    lambda_u: float = 1.0
    lambda_sub: float = 1.0
    gate_fallback: str = "ignore"
    clustering: str = "balanced"
    cluster_backend: str = "greedy"
    strong_noise: float = 2 * DEFAULT_MODE_NOISE
    eval_every: int = 100  # 0 = evaluate at the end only
    seed: int = 0
    ablation: AblationFlags = field(default_factory=AblationFlags)

    def __post_init__(self) -> None:
        if isinstance(self.ablation, dict):
            self.ablation = AblationFlags.from_json(self.ablation)
        if self.steps < 0 or self.warmup_steps < 0:
            raise ConfigurationError("step counts cannot be negative")
        if self.labelled_batch < 1 or self.unlabelled_batch < 1:
            raise ConfigurationError("batch sizes must be at least 1")
        if self.share_mode not in SHARE_MODES:
            raise ConfigurationError(f"share_mode must be one of {SHARE_MODES}")
        if self.clustering not in VARIANTS:
            raise ConfigurationError(f"clustering must be one of {VARIANTS}")
        if self.cluster_backend not in BACKENDS:
            raise ConfigurationError(f"cluster_backend must be one of {BACKENDS}")
        if self.gate_fallback not in GATE_FALLBACKS:
            raise ConfigurationError(f"gate_fallback must be one of {GATE_FALLBACKS}")
        if self.trunk_width < 1:
            raise ConfigurationError("trunk_width must be positive")
        if self.strong_noise < 0:
            raise ConfigurationError("strong_noise cannot be negative")
        if self.eval_every < 0:
            raise ConfigurationError("eval_every cannot be negative")
        self.weights()  # validates gamma and lambdas

    def weights(self) -> LossWeights:
        return LossWeights(self.gamma, self.lambda_u, self.lambda_sub)

    def to_json(self) -> dict:
        out = dataclasses.asdict(self)
        out["ablation"] = self.ablation.to_json()
        return out

    @classmethod
    def from_json(cls, payload: dict) -> "TrainConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(payload) - known
        if unknown:
            raise ConfigurationError(f"unknown config keys: {sorted(unknown)}")
        return cls(**payload)


@dataclass
class EvalResult:
    miou: float
    per_class_iou: list[float]
    cbr_pred: float
    ari: float
    confusion: ConfusionMatrix

    @property
    def min_class_iou(self) -> float:
        finite = [v for v in self.per_class_iou if not np.isnan(v)]
        return float(min(finite)) if finite else float("nan")


def evaluate(params: ModelParams, samples) -> EvalResult:
    """Class-head accuracy on clean images (no augmentation, no sub head)."""
    if not samples:
        raise ConfigurationError("cannot evaluate on an empty sample list")
    num_classes = samples[0].labels.num_classes
    cm = ConfusionMatrix.empty(num_classes)
    gt_all, pred_all = [], []
    for s in samples:
        probs = forward(params, s.features, "cls")
        pred = np.argmax(probs.data, axis=-1).astype(np.int64)
        cm.add(s.labels, LabelGrid(pred, num_classes))
        gt_all.append(s.labels.data.ravel())
        pred_all.append(pred.ravel())
    per_class, mean_iou = miou(cm)
    preds = np.concatenate(pred_all)
    counts = np.bincount(preds, minlength=num_classes)
    return EvalResult(mean_iou, per_class, cbr(counts),
                      adjusted_rand_index(np.concatenate(gt_all), preds), cm)


def subclass_mode_ari(taxonomy: Taxonomy, sub_label_grids, samples, cls: int) -> float:
    """Agreement between a class's subclass assignments and the hidden latent
    modes of its labelled pixels (chance-corrected)."""
    preds, modes = [], []
    for sub, s in zip(sub_label_grids, samples):
        mask = s.labels.data == cls
        if mask.any():
            preds.append(sub.data[mask])
            modes.append(s.latent_modes.data[mask])
    if not preds:
        return float("nan")
    return adjusted_rand_index(np.concatenate(modes), np.concatenate(preds))


@dataclass
class RunRecord:
    name: str
    config: TrainConfig
    loss_rows: list[dict]
    metric_rows: list[dict]
    final_eval: EvalResult
    taxonomy: Taxonomy | None
    sub_label_grids: list[LabelGrid] | None
    params: ModelParams
    split_hash: str
    wall_time: float
    taxonomy_step: int | None = None

    @property
    def flags(self) -> AblationFlags:
        return self.config.ablation


def _with_sub_head(params: ModelParams, taxonomy, labelled, sub_label_grids,
                   seed: int) -> ModelParams:
    """Swap in a subclass route sized for the taxonomy, keeping every array
    the class path trained during warm-up.

    The subclass route starts as a soft nearest-centroid classifier over the
    taxonomy's own clusters: its trunk layers copy the class route (so its
    feature space is the one the clustering ran in) and the head realizes
    softmax(-|z - c_j|^2 / (2 tau)) with tau set to the mean within-cluster
    squared distance of the labelled pixels. That makes the head sharp where
    cluster structure is real and soft where a balanced split is arbitrary,
    instead of uniform for thousands of steps while it trains from scratch.
    A random or zero head would also shock the shared trunk with the large
    loss of an uninformed wide softmax; this init's gradients are consistent
    from the first step."""
    fresh = init_params(params.in_dim, params.trunk_width, params.num_classes,
                        taxonomy.num_subclasses, params.share_mode, seed)
    for name in fresh.names():
        if name.split(".")[0].startswith(("trunk", "cls", "head_cls")):
            fresh.arrays[name][:] = params.arrays[name]
    for sub_name, cls_name in zip(fresh.trunk_layers("sub"), fresh.trunk_layers("cls")):
        if sub_name != cls_name:
            for part in ("W", "b"):
                fresh.arrays[f"{sub_name}.{part}"][:] = params.arrays[f"{cls_name}.{part}"]

    sq_dists = []
    for sample, slab in zip(labelled, sub_label_grids):
        acts = trunk_features(params, sample.features)
        mask = slab.valid_mask()
        if mask.any():
            diff = acts[mask] - taxonomy.centroids[slab.data[mask]]
            sq_dists.append(np.einsum("ij,ij->i", diff, diff))
    tau = float(np.mean(np.concatenate(sq_dists))) if sq_dists else 1.0
    tau = max(tau, 1e-6)
    cents = taxonomy.centroids
    fresh.arrays["head_sub.W"][:] = cents.T / tau
    fresh.arrays["head_sub.b"][:] = -0.5 * np.einsum("ij,ij->i", cents, cents) / tau
    return fresh


def train(split, config: TrainConfig, name: str = "run") -> RunRecord:
    """Run one configuration end to end and return everything it produced."""
    t_start = time.perf_counter()
    flags = config.ablation
    if not split.labelled:
        raise ConfigurationError("split has no labelled samples")
    if not split.eval:
        raise ConfigurationError("split has no eval samples")
    needs_unlabelled = flags.unlabelled_mode != "none" or flags.sst
    if needs_unlabelled and not split.unlabelled:
        raise ConfigurationError("these flags need unlabelled samples")
    first = split.labelled[0]
    num_classes = first.labels.num_classes
    weights = config.weights()

    # the subclass head starts as a placeholder; it is resized when (and if)
    # the taxonomy fixes the real subclass count
    params = init_params(first.features.dim, config.trunk_width, num_classes,
                         num_classes, config.share_mode, seed=config.seed)
    state = SgdState.zeros(params)
    taxonomy = None
    taxonomy_step = None
    sub_label_grids = None
    loss_rows: list[dict] = []
    metric_rows: list[dict] = []

    def eval_row(step):
        ev = evaluate(params, split.eval)
        row = {"step": step, "miou": ev.miou, "cbr_pred": ev.cbr_pred, "ari": ev.ari}
        for c, iou in enumerate(ev.per_class_iou):
            row[f"iou_{c}"] = iou
        metric_rows.append(row)
        return ev

    total_steps = config.warmup_steps + config.steps
    for gstep in range(total_steps):
        try:
            params, state, taxonomy, taxonomy_step, sub_label_grids = _train_step(
                split, config, flags, weights, params, state, taxonomy,
                taxonomy_step, sub_label_grids, loss_rows, gstep)
        except NumericalError as exc:
            raise NumericalError(f"training diverged at step {gstep}: {exc}")
        if config.eval_every and (gstep + 1) % config.eval_every == 0 and gstep + 1 < total_steps:
            eval_row(gstep + 1)

    final = eval_row(total_steps)
    return RunRecord(name, config, loss_rows, metric_rows, final, taxonomy,
                     sub_label_grids, params, split.content_hash(),
                     time.perf_counter() - t_start, taxonomy_step)


def _train_step(split, config, flags, weights, params, state, taxonomy,
                taxonomy_step, sub_label_grids, loss_rows, gstep):
    """One optimizer step; returns the updated mutable pieces of train()."""
    num_classes = split.labelled[0].labels.num_classes
    warm = gstep < config.warmup_steps
    if not warm and flags.usr and taxonomy is None:
        pairs = [(s.features, s.labels) for s in split.labelled]
        taxonomy, sub_label_grids = build_taxonomy(
            params, pairs, num_classes, seed=config.seed,
            backend=config.cluster_backend, variant=config.clustering)
        params = _with_sub_head(params, taxonomy, split.labelled, sub_label_grids,
                                config.seed + 1)
        state = SgdState.zeros(params)
        taxonomy_step = gstep

    grads = GradientSet.zeros(params)
    parts = {"loss_sup": 0.0, "loss_st": 0.0, "loss_st_sub": 0.0,
             "gate_open_fraction": float("nan"), "pseudo_coverage": float("nan")}

    # each batch is stacked into one tall grid so the loss is a single pooled
    # mean over the batch's pixels and the step costs a handful of numpy calls
    l_idx = np.random.default_rng([config.seed, 20, gstep]).integers(
        len(split.labelled), size=config.labelled_batch)
    feat_rows, label_rows, sub_rows = [], [], []
    for j, il in enumerate(l_idx):
        sample = split.labelled[int(il)]
        geom = weak_geometry(sample.features.height, sample.features.width,
                             [config.seed, 21, gstep, j])
        feat_rows.append(apply_geometry(geom, sample.features.data))
        label_rows.append(apply_geometry(geom, sample.labels.data))
        if not warm and flags.usr:
            sub_rows.append(apply_geometry(geom, sub_label_grids[int(il)].data))
    grid_l = FeatureGrid(np.concatenate(feat_rows, axis=0))
    y_l = LabelGrid(np.concatenate(label_rows, axis=0), num_classes)
    y_sub = None
    if sub_rows:
        y_sub = LabelGrid(np.concatenate(sub_rows, axis=0),
                          sub_label_grids[0].num_classes)
    loss_l, g = supervised_loss(params, grid_l, y_l, y_sub, weights)
    grads.add_(g)
    parts["loss_sup"] = loss_l.value

    mode = "none" if warm else flags.unlabelled_mode
    run_sub_st = not warm and flags.sst
    if mode != "none" or run_sub_st:
        u_idx = np.random.default_rng([config.seed, 22, gstep]).integers(
            len(split.unlabelled), size=config.unlabelled_batch)
        weak_rows, strong_rows = [], []
        for j, iu in enumerate(u_idx):
            feats = split.unlabelled[int(iu)].features  # labels are never read
            geom_u = weak_geometry(feats.height, feats.width,
                                   [config.seed, 23, gstep, j])
            weak = FeatureGrid(apply_geometry(geom_u, feats.data))
            strong = augment_strong(weak, [config.seed, 24, gstep, j],
                                    noise_sigma=config.strong_noise)
            weak_rows.append(weak.data)
            strong_rows.append(strong.data)
        grid_uw = FeatureGrid(np.concatenate(weak_rows, axis=0))
        grid_us = FeatureGrid(np.concatenate(strong_rows, axis=0))
        if mode != "none":
            loss_st, g_st, info = selftrain_class_loss(
                params, grid_uw, grid_us, taxonomy, weights, mode,
                config.gate_fallback)
            grads.add_(g_st)
            parts["loss_st"] = loss_st.value
            parts["pseudo_coverage"] = info["pseudo_coverage"]
            parts["gate_open_fraction"] = info["gate_open_fraction"]
        if run_sub_st:
            loss_ss, g_ss = selftrain_sub_loss(params, grid_uw, grid_us, weights)
            grads.add_(g_ss)
            parts["loss_st_sub"] = loss_ss.value

    params, state = sgd_step(params, grads, config.lr, config.momentum,
                             config.weight_decay, state)
    total = parts["loss_sup"] + parts["loss_st"] + parts["loss_st_sub"]
    if not np.isfinite(total):
        raise NumericalError(f"loss is not finite (total={total})")
    loss_rows.append({"step": gstep, "total": total, **parts})
    return params, state, taxonomy, taxonomy_step, sub_label_grids


def train_baseline(split, config: TrainConfig) -> RunRecord:
    """Supervised-only reference point (labelled pool, class head)."""
    cfg = dataclasses.replace(config, ablation=LADDER["model_i"])
    return train(split, cfg, name="model_i")


def train_usrn(split, config: TrainConfig) -> RunRecord:
    """The full method: every objective term and the entropy gate."""
    cfg = dataclasses.replace(config, ablation=LADDER["usrn"])
    return train(split, cfg, name="usrn")


def run_ablation_ladder(split, config: TrainConfig, rows=None) -> dict[str, RunRecord]:
    """Train every rung on the identical split and seed."""
    rows = list(LADDER) if rows is None else list(rows)
    out = {}
    for name in rows:
        cfg = dataclasses.replace(config, ablation=LADDER[name])
        out[name] = train(split, cfg, name=name)
    return out


def coverage_curve(params: ModelParams, features_list, gammas, mode: str = "plain",
                   taxonomy: Taxonomy | None = None, gate_fallback: str = "ignore"):
    """Pseudo-label coverage of a fixed model at each threshold.

    Measured on clean features. Raising the threshold can only shed pixels,
    so for a fixed model the curve is non-increasing in gamma.
    """
    out = []
    for gamma in gammas:
        kept = 0
        total = 0
        for grid in features_list:
            p_cls = forward(params, grid, "cls")
            if mode == "plain":
                labels = select(p_cls, gamma)
            elif mode == "guided":
                labels = subclass_guided_select(p_cls, forward(params, grid, "sub"),
                                                taxonomy, gamma)
            elif mode == "gated":
                labels, _ = entropy_gated_select(p_cls, forward(params, grid, "sub"),
                                                 taxonomy, gamma, gate_fallback)
            else:
                raise ConfigurationError(f"unknown coverage mode {mode!r}")
            kept += int(labels.valid_mask().sum())
            total += labels.data.size
        out.append(kept / total if total else float("nan"))
    return out


# ---------------------------------------------------------------------------
# run directory output


def _fmt(value) -> str:
    if isinstance(value, float):
        return repr(value)
    return str(value)


def write_run(record: RunRecord, out_dir) -> None:
    """Materialize a run as config.json, losses.csv, metrics.csv,
    taxonomy.json, params.bin and summary.json."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "config.json", "w") as fh:
        json.dump({"name": record.name, "train": record.config.to_json()}, fh, indent=2)
    with open(out / "losses.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(LOSS_COLUMNS)
        for row in record.loss_rows:
            writer.writerow([_fmt(row[c]) for c in LOSS_COLUMNS])
    metric_cols = ["step", "miou", "cbr_pred", "ari"] + [
        f"iou_{c}" for c in range(len(record.final_eval.per_class_iou))]
    with open(out / "metrics.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(metric_cols)
        for row in record.metric_rows:
            writer.writerow([_fmt(row[c]) for c in metric_cols])
    if record.taxonomy is not None:
        with open(out / "taxonomy.json", "w") as fh:
            json.dump(record.taxonomy.to_json(), fh, indent=2)
    save_params(record.params, out / "params.bin")
    gate_vals = [r["gate_open_fraction"] for r in record.loss_rows
                 if not np.isnan(r["gate_open_fraction"])]
    cov_vals = [r["pseudo_coverage"] for r in record.loss_rows
                if not np.isnan(r["pseudo_coverage"])]
    summary = {
        "name": record.name,
        "miou": record.final_eval.miou,
        "per_class_iou": record.final_eval.per_class_iou,
        "min_class_iou": record.final_eval.min_class_iou,
        "cbr_pred": record.final_eval.cbr_pred,
        "ari": record.final_eval.ari,
        "split_hash": record.split_hash,
        "steps": record.config.warmup_steps + record.config.steps,
        "taxonomy_step": record.taxonomy_step,
        "num_subclasses": record.taxonomy.num_subclasses if record.taxonomy else None,
        "cbr_subclass": record.taxonomy.cbr_subclass() if record.taxonomy else None,
        "gate_open_fraction_mean": float(np.mean(gate_vals)) if gate_vals else None,
        "pseudo_coverage_mean": float(np.mean(cov_vals)) if cov_vals else None,
    }
    with open(out / "summary.json", "w") as fh:
        json.dump(summary, fh, indent=2)
