"""Three-flow semi-supervised training.

Each step combines

* a supervised cross-entropy on weakly perturbed labeled crops,
* weak-to-strong consistency on in-distribution unlabeled crops, with the
  student's own confident weak-view argmax as target,
* the same consistency on OOD crops, but with targets read from the
  pre-generated open-vocabulary pseudo-labels (or, in ``self`` mode, from the
  student itself),

as ``l_s + l_u_in + lambda_out * l_u_out``.  All targets are detached.
"""
from __future__ import annotations

import csv
import dataclasses
import hashlib
import io
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch
import torch.nn.functional as F

from . import formats
from .data_synth import IGNORE_ID
from .errors import ConfigError, ContractError
from .model import SegNet, build_student
from .perturb import mix_targets, photometric, sample_strong, sample_weak, strong_apply, weak_apply, weak_apply_map

log = logging.getLogger(__name__)

TEACHER_SOURCES = ("ovs", "self")


@dataclass(frozen=True)
class TrainConfig:
    tau_in: float = 0.95
    tau_out: float = 0.0
    lambda_out: float = 1.0
    n_labeled: int = 8
    n_unlabeled_in: int = 8
    n_unlabeled_out: int = 8
    epochs: int = 10
    iters_per_epoch: int = 0  # 0: one pass over the in-distribution unlabeled pool
    learning_rate: float = 0.05
    lr_power: float = 0.9
    momentum: float = 0.9
    weight_decay: float = 0.0
    crop_size: int = 48
    crop_scale: tuple[float, float] = (0.6, 1.0)
    width: int = 16
    seed: int = 0
    teacher_source: str = "ovs"

    def validate(self):
        for name in ("tau_in", "tau_out"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ConfigError(f"{name} must lie in [0, 1], got {v}")
        if self.lambda_out < 0:
            raise ConfigError("lambda_out must be >= 0")
        if min(self.n_labeled, self.n_unlabeled_in, self.n_unlabeled_out) < 0:
            raise ConfigError("batch sizes must be >= 0")
        if self.n_labeled == 0 and self.n_unlabeled_in == 0 and self.n_unlabeled_out == 0:
            raise ConfigError("at least one loss component must be active")
        if self.epochs < 0 or self.iters_per_epoch < 0:
            raise ConfigError("epochs and iters_per_epoch must be >= 0")
        if self.learning_rate <= 0 or self.crop_size < 4:
            raise ConfigError("learning_rate must be > 0 and crop_size >= 4")
        if self.teacher_source not in TEACHER_SOURCES:
            raise ConfigError(f"teacher_source must be one of {TEACHER_SOURCES}")


def config_hash(cfg) -> str:
    payload = json.dumps(dataclasses.asdict(cfg), sort_keys=True, default=str)
    return hashlib.sha256(payload.encode("utf-8")).hexdigest()[:16]


# --------------------------------------------------------------------- losses

def supervised_loss(logits, label, ignore_id=IGNORE_ID):
    """Mean pixel cross-entropy over non-ignored pixels (0 when none)."""
    n_classes = logits.shape[1]
    label = torch.as_tensor(label, dtype=torch.long)
    if logits.shape[0] != label.shape[0] or logits.shape[2:] != label.shape[1:]:
        raise ContractError(f"logits {tuple(logits.shape)} and label {tuple(label.shape)} do not match")
    valid = label != ignore_id
    bad = valid & ((label >= n_classes) | (label < 0))
    if bool(bad.any()):
        raise ContractError(f"label id {int(label[bad].max())} outside [0, {n_classes})")
    n_valid = int(valid.sum())
    if n_valid == 0:
        return logits.sum() * 0.0
    ce = F.cross_entropy(logits, label.masked_fill(~valid, 0), reduction="none")
    return (ce * valid).sum() / n_valid


def masked_ce(logits, target, confidence, tau):
    """Cross-entropy against ``target`` on pixels with ``confidence >= tau``.

    Normalized by the number of contributing pixels.  Returns the loss and
    the fraction of pixels masked out.
    """
    keep = (confidence >= tau).to(logits.dtype)
    ce = F.cross_entropy(logits, target, reduction="none")
    n_keep = keep.sum()
    loss = (ce * keep).sum() / torch.clamp(n_keep, min=1.0)
    masked_fraction = 1.0 - float(n_keep) / keep.numel() if keep.numel() else 0.0
    return loss, masked_fraction


def masked_consistency_loss(prob_weak, logits_strong, tau):
    """Consistency term: the weak-view argmax supervises the strong view where confident."""
    prob_weak = prob_weak.detach()
    confidence, target = prob_weak.max(dim=1)
    return masked_ce(logits_strong, target, confidence, tau)


def total_loss(l_s, l_u_in, l_u_out, lambda_out):
    return l_s + l_u_in + lambda_out * l_u_out


# ---------------------------------------------------------------- batching

@dataclass
class TrainData:
    labeled: Sequence[tuple[np.ndarray, np.ndarray]]  # (image, label)
    unlabeled_in: Sequence[np.ndarray]
    unlabeled_out: Sequence[tuple[str, np.ndarray]] = ()  # (item id, image)


@dataclass
class Batch:
    x_l: torch.Tensor | None = None
    y_l: torch.Tensor | None = None
    x_in_w: torch.Tensor | None = None
    x_in_s: torch.Tensor | None = None
    mix_in: np.ndarray | None = None
    partner_in: np.ndarray | None = None
    x_out_w: torch.Tensor | None = None
    x_out_s: torch.Tensor | None = None
    mix_out: np.ndarray | None = None
    partner_out: np.ndarray | None = None
    pl_out: tuple[np.ndarray, np.ndarray] | None = None  # stored (label, confidence), weak geometry applied

    def to(self, dtype):
        for f in ("x_l", "x_in_w", "x_in_s", "x_out_w", "x_out_s"):
            v = getattr(self, f)
            if v is not None:
                setattr(self, f, v.to(dtype))
        return self


class _Cycler:
    """Endless stream of indices, reshuffled every pass."""

    def __init__(self, n, rng):
        self.n = n
        self.rng = rng
        self.order = []

    def take(self, k):
        out = []
        while len(out) < k:
            if not self.order:
                self.order = list(self.rng.permutation(self.n))
            out.append(int(self.order.pop()))
        return out


def _to_tensor(images):
    return torch.from_numpy(np.ascontiguousarray(np.stack(images))).permute(0, 3, 1, 2).contiguous()


def _strong_views(rng, weak_images):
    """Photometric views for the whole batch, then CutMix with the next image."""
    b = len(weak_images)
    params = [sample_strong(rng, weak_images[i].shape, partner=(i + 1) % b if b > 1 else None) for i in range(b)]
    photo = [photometric(img, p) for img, p in zip(weak_images, params)]
    views, masks = [], []
    for i, p in enumerate(params):
        partner = photo[p.cutmix_partner] if p.cutmix_partner is not None else None
        img, mask = strong_apply(weak_images[i], p, partner)
        views.append(img)
        masks.append(mask)
    partners = np.array([(i + 1) % b if b > 1 else i for i in range(b)])
    return views, np.stack(masks), partners


class BatchStream:
    """Seed-ordered batch assembly with one independent random stream per flow.

    Because the flows never share a random stream, adding or removing the OOD
    flow leaves the labeled and in-distribution batches bit-identical.
    """

    def __init__(self, data: TrainData, config: TrainConfig, teacher_labels=None):
        self.data = data
        self.cfg = config
        self.teacher_labels = teacher_labels
        rng_l, rng_in, rng_out = (np.random.default_rng(s) for s in np.random.SeedSequence(config.seed).spawn(3))
        self.rngs = {"l": rng_l, "in": rng_in, "out": rng_out}
        self.cyc_l = _Cycler(len(data.labeled), rng_l) if data.labeled else None
        self.cyc_in = _Cycler(len(data.unlabeled_in), rng_in) if data.unlabeled_in else None
        self.cyc_out = _Cycler(len(data.unlabeled_out), rng_out) if data.unlabeled_out else None

    def next(self) -> Batch:
        cfg = self.cfg
        batch = Batch()
        if cfg.n_labeled and self.cyc_l:
            rng = self.rngs["l"]
            xs, ys = [], []
            for i in self.cyc_l.take(cfg.n_labeled):
                img, lab = self.data.labeled[i]
                wp = sample_weak(rng, img.shape, cfg.crop_size, cfg.crop_scale)
                x, y = weak_apply(img, lab, wp)
                xs.append(x)
                ys.append(y)
            batch.x_l = _to_tensor(xs)
            batch.y_l = torch.from_numpy(np.stack(ys).astype(np.int64))
        if cfg.n_unlabeled_in and self.cyc_in:
            rng = self.rngs["in"]
            weak = []
            for i in self.cyc_in.take(cfg.n_unlabeled_in):
                img = self.data.unlabeled_in[i]
                weak.append(weak_apply(img, None, sample_weak(rng, img.shape, cfg.crop_size, cfg.crop_scale))[0])
            strong, batch.mix_in, batch.partner_in = _strong_views(rng, weak)
            batch.x_in_w, batch.x_in_s = _to_tensor(weak), _to_tensor(strong)
        if cfg.n_unlabeled_out and self.cyc_out:
            rng = self.rngs["out"]
            weak, labels, confs = [], [], []
            for i in self.cyc_out.take(cfg.n_unlabeled_out):
                item_id, img = self.data.unlabeled_out[i]
                wp = sample_weak(rng, img.shape, cfg.crop_size, cfg.crop_scale)
                weak.append(weak_apply(img, None, wp)[0])
                if self.teacher_labels is not None:
                    pl = self.teacher_labels[item_id]
                    labels.append(weak_apply_map(pl.label, wp))
                    confs.append(weak_apply_map(pl.confidence, wp))
            strong, batch.mix_out, batch.partner_out = _strong_views(rng, weak)
            batch.x_out_w, batch.x_out_s = _to_tensor(weak), _to_tensor(strong)
            if self.teacher_labels is not None:
                batch.pl_out = (np.stack(labels).astype(np.int64), np.stack(confs).astype(np.float32))
        return batch


# ------------------------------------------------------------------ objective

@dataclass
class Targets:
    t_in: torch.Tensor | None = None
    c_in: torch.Tensor | None = None
    t_out: torch.Tensor | None = None
    c_out: torch.Tensor | None = None


def _mixed(labels, confs, mask, partner):
    lab, conf = mix_targets((labels, confs), (labels[partner], confs[partner]), mask)
    return torch.from_numpy(np.ascontiguousarray(lab)).long(), torch.from_numpy(np.ascontiguousarray(conf))


def _self_targets(model, x_weak):
    with torch.no_grad():
        conf, lab = torch.softmax(model(x_weak), dim=1).max(dim=1)
    return lab.numpy(), conf.numpy()


def prepare_targets(model, batch: Batch, config: TrainConfig) -> Targets:
    """Detached targets: weak-view argmax for the in-distribution flow, stored or self labels for OOD."""
    t = Targets()
    if batch.x_in_w is not None:
        lab, conf = _self_targets(model, batch.x_in_w)
        t.t_in, t.c_in = _mixed(lab, conf, batch.mix_in, batch.partner_in)
    if batch.x_out_w is not None:
        if batch.pl_out is not None:
            lab, conf = batch.pl_out
        else:
            lab, conf = _self_targets(model, batch.x_out_w)
        t.t_out, t.c_out = _mixed(lab, conf, batch.mix_out, batch.partner_out)
        t.c_out = t.c_out.to(torch.float64)
    if t.c_in is not None:
        t.c_in = t.c_in.to(torch.float64)
    return t


@dataclass
class LossTerms:
    l_s: torch.Tensor
    l_u_in: torch.Tensor
    l_u_out: torch.Tensor
    total: torch.Tensor
    masked_frac_in: float = 0.0
    masked_frac_out: float = 0.0


def objective(model, batch: Batch, targets: Targets, config: TrainConfig) -> LossTerms:
    dtype = next(model.parameters()).dtype
    zero = torch.zeros((), dtype=dtype)
    l_s = supervised_loss(model(batch.x_l), batch.y_l) if batch.x_l is not None else zero
    l_in, mf_in = zero, 0.0
    if batch.x_in_s is not None:
        l_in, mf_in = masked_ce(model(batch.x_in_s), targets.t_in, targets.c_in, config.tau_in)
    l_out, mf_out = zero, 0.0
    if batch.x_out_s is not None:
        l_out, mf_out = masked_ce(model(batch.x_out_s), targets.t_out, targets.c_out, config.tau_out)
    return LossTerms(l_s, l_in, l_out, total_loss(l_s, l_in, l_out, config.lambda_out), mf_in, mf_out)


# -------------------------------------------------------------------- history

METRIC_COLUMNS = ("epoch", "l_s", "l_u_in", "l_u_out", "masked_frac_in", "masked_frac_out", "lr")


@dataclass
class MetricHistory:
    rows: list[dict] = field(default_factory=list)

    def to_csv_text(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(METRIC_COLUMNS)
        for r in self.rows:
            w.writerow([r["epoch"]] + [repr(float(r[c])) for c in METRIC_COLUMNS[1:]])
        return buf.getvalue()

    def write_csv(self, path):
        Path(path).write_text(self.to_csv_text(), encoding="utf-8")

    @classmethod
    def read_csv(cls, path):
        with open(path, newline="", encoding="utf-8") as fh:
            rows = [{k: (int(v) if k == "epoch" else float(v)) for k, v in r.items()} for r in csv.DictReader(fh)]
        return cls(rows)

    def column(self, name):
        return [r[name] for r in self.rows]


# ----------------------------------------------------------------------- train

class MissingPseudoLabelError(FileNotFoundError):
    pass


def poly_lr(base, it, total, power):
    return base * (1.0 - it / max(total, 1)) ** power


def iterations_per_epoch(data: TrainData, config: TrainConfig) -> int:
    if config.iters_per_epoch:
        return config.iters_per_epoch
    if config.n_unlabeled_in and data.unlabeled_in:
        return math.ceil(len(data.unlabeled_in) / config.n_unlabeled_in)
    if config.n_labeled and data.labeled:
        return math.ceil(len(data.labeled) / config.n_labeled)
    return 1


def train(model, data: TrainData, teacher_labels, config: TrainConfig,
          on_step: Callable[[int, SegNet, LossTerms], None] | None = None):
    """Optimize ``model`` in place; returns ``(model, MetricHistory)``.

    ``teacher_labels`` maps OOD item ids to stored pseudo-labels, or is
    ``None`` when ``config.teacher_source == "self"``.
    """
    config.validate()
    use_out = config.n_unlabeled_out > 0 and len(data.unlabeled_out) > 0
    if use_out and config.teacher_source == "ovs":
        if teacher_labels is None:
            raise MissingPseudoLabelError("teacher_source='ovs' needs stored pseudo-labels")
        missing = [i for i, _ in data.unlabeled_out if i not in teacher_labels]
        if missing:
            raise MissingPseudoLabelError(f"no pseudo-label for {len(missing)} OOD item(s), first: {missing[0]!r}")
    stream = BatchStream(data, config, teacher_labels if config.teacher_source == "ovs" else None)
    opt = torch.optim.SGD(model.parameters(), lr=config.learning_rate, momentum=config.momentum,
                          weight_decay=config.weight_decay)
    n_iter = iterations_per_epoch(data, config)
    total_iters = n_iter * config.epochs
    history = MetricHistory()
    dtype = next(model.parameters()).dtype
    it = 0
    for epoch in range(config.epochs):
        sums = dict.fromkeys(METRIC_COLUMNS[1:6], 0.0)
        lr = config.learning_rate
        for _ in range(n_iter):
            lr = poly_lr(config.learning_rate, it, total_iters, config.lr_power)
            for g in opt.param_groups:
                g["lr"] = lr
            batch = stream.next().to(dtype)
            targets = prepare_targets(model, batch, config)
            terms = objective(model, batch, targets, config)
            opt.zero_grad(set_to_none=False)
            if terms.total.requires_grad:
                terms.total.backward()
            opt.step()
            sums["l_s"] += float(terms.l_s.detach())
            sums["l_u_in"] += float(terms.l_u_in.detach())
            sums["l_u_out"] += float(terms.l_u_out.detach())
            sums["masked_frac_in"] += terms.masked_frac_in
            sums["masked_frac_out"] += terms.masked_frac_out
            if on_step is not None:
                on_step(it, model, terms)
            it += 1
        row = {"epoch": epoch}
        row.update({k: v / n_iter for k, v in sums.items()})
        row["lr"] = lr
        history.rows.append(row)
        log.info("epoch %d  l_s=%.4f l_u_in=%.4f l_u_out=%.4f", epoch, row["l_s"], row["l_u_in"], row["l_u_out"])
    return model, history


# ------------------------------------------------------------------ checkpoint

@dataclass
class Checkpoint:
    params: np.ndarray
    config_hash: str
    epoch: int | None = None
    history: MetricHistory | None = None


def save_checkpoint(path, model, cfg_hash):
    formats.write_checkpoint_file(path, model.flat_parameters().numpy(), cfg_hash)


def load_checkpoint(path, model=None):
    params, cfg_hash = formats.read_checkpoint_file(path)
    if model is not None:
        if params.size != model.num_parameters():
            raise ContractError(f"checkpoint has {params.size} parameters, model expects {model.num_parameters()}")
        model.set_flat_parameters(torch.from_numpy(params))
    return Checkpoint(params, cfg_hash)


def predict(model, images, batch_size=16):
    """Argmax label maps for a list of H x W x 3 images."""
    dtype = next(model.parameters()).dtype
    out = []
    with torch.no_grad():
        for i in range(0, len(images), batch_size):
            x = _to_tensor(images[i:i + batch_size]).to(dtype)
            out.extend(model(x).argmax(dim=1).numpy())
    return out


# ------------------------------------------------------------ gradient check

def gradient_check(model, batch: Batch, config: TrainConfig, epsilon=1e-5, n_probe=50, seed=0):
    """Max relative error between autograd and central differences of the total loss.

    Targets are computed once and held fixed, matching the stop-gradient used
    in training.  Returns ``inf`` if the loss is not finite.
    """
    if next(model.parameters()).dtype != torch.float64:
        raise ContractError("gradient_check needs a float64 model")
    batch = dataclasses.replace(batch).to(torch.float64)
    targets = prepare_targets(model, batch, config)
    model.zero_grad()
    loss = objective(model, batch, targets, config).total
    if not torch.isfinite(loss):
        return math.inf
    loss.backward()
    analytic = torch.cat([p.grad.reshape(-1) for p in model.parameters()]).clone()
    theta = model.flat_parameters()
    rng = np.random.default_rng(seed)
    probe = rng.choice(theta.numel(), size=min(n_probe, theta.numel()), replace=False)
    worst = 0.0
    with torch.no_grad():
        for k in probe:
            vals = []
            for sign in (1.0, -1.0):
                t = theta.clone()
                t[k] += sign * epsilon
                model.set_flat_parameters(t)
                vals.append(float(objective(model, batch, targets, config).total))
            numeric = (vals[0] - vals[1]) / (2 * epsilon)
            if not all(math.isfinite(v) for v in vals):
                model.set_flat_parameters(theta)
                return math.inf
            a = float(analytic[k])
            denom = max(abs(a), abs(numeric), 1e-8)
            worst = max(worst, abs(a - numeric) / denom)
    model.set_flat_parameters(theta)
    return worst
