"""Generate -> pseudo-label -> train -> evaluate -> sweep orchestration.

Dataset directory layout::

    dataset/
      config.txt               resolved config used to build it
      in/<id>.npz              in-distribution pool (image, label, semantic)
      val/<id>.npz             held-out in-distribution scenes
      ood/ood_<id>.npz         OOD corpus items
      ood_manifest.tsv         id, path, width, height
      splits/<protocol>.json   labeled / unlabeled_in / unlabeled_out ids
      summary.json
"""
from __future__ import annotations

import json
import logging
import math
import shutil
import zipfile
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from . import evalkit
from .config import ExperimentConfig, apply_overrides, config_digest, dump_config, parse_config_text
from .data_synth import (DEFAULT_CONFUSERS, PROTOCOLS, CorpusManifest, DatasetSplit, ManifestItem, Scene,
                         coarsen_label, generate_scene, load_manifest, make_splits, write_manifest)
from .errors import ConfigError, InfeasibleSplitError
from .model import build_student
from .ovs_teacher import (FileEmbedder, OracleEmbedder, OVSTeacher, build_prompt_set, generate_offline,
                          load_item, load_pseudo_labels, make_pseudo_label)
from .trainer import TrainData, load_checkpoint, predict, save_checkpoint, train

log = logging.getLogger(__name__)

VAL_OFFSET = 1_000_000  # val scenes use a disjoint index range of the in-distribution stream


class OutputExistsError(FileExistsError):
    pass


def prepare_output_dir(path, force=False):
    """Create ``path``; refuse to reuse a non-empty directory unless ``force``."""
    path = Path(path)
    if path.exists() and any(path.iterdir()):
        if not force:
            raise OutputExistsError(f"{path} exists and is not empty (use --force to overwrite)")
        shutil.rmtree(path)
    path.mkdir(parents=True, exist_ok=True)
    return path


def save_npz(path, **arrays):
    """``np.savez`` with fixed zip timestamps so reruns are byte-identical."""
    with zipfile.ZipFile(path, "w", compression=zipfile.ZIP_STORED) as zf:
        for name, arr in arrays.items():
            info = zipfile.ZipInfo(f"{name}.npy", date_time=(1980, 1, 1, 0, 0, 0))
            with zf.open(info, "w") as fh:
                np.lib.format.write_array(fh, np.ascontiguousarray(arr), allow_pickle=False)


def _scene_path(root, kind, idx):
    if kind == "ood":
        return Path(root) / "ood" / f"ood_{idx:06d}.npz"
    return Path(root) / kind / f"{idx:06d}.npz"


def generate_dataset(cfg: ExperimentConfig, root, force=False) -> dict:
    d = cfg.data
    # fail on infeasible splits before writing anything
    ood_ids = tuple(f"ood_{i:06d}" for i in range(d.n_ood))
    splits = {p: make_splits(d.n_scenes, d.n_labeled, p, d.quality_fraction, d.split_seed, ood_ids)
              for p in PROTOCOLS if p == d.protocol}
    for p in PROTOCOLS:
        if p not in splits:
            try:
                splits[p] = make_splits(d.n_scenes, d.n_labeled, p, d.quality_fraction, d.split_seed, ood_ids)
            except InfeasibleSplitError as exc:
                log.warning("skipping %s split: %s", p, exc)
    root = prepare_output_dir(root, force)
    for sub in ("in", "val", "ood", "splits"):
        (root / sub).mkdir()
    spec = cfg.scene
    for i in range(d.n_scenes):
        s = generate_scene(spec, i)
        save_npz(_scene_path(root, "in", i), image=s.image, label=s.label, semantic=s.semantic)
    for i in range(d.n_val):
        s = generate_scene(spec, VAL_OFFSET + i)
        save_npz(_scene_path(root, "val", i), image=s.image, label=s.label, semantic=s.semantic)
    items = []
    for i in range(d.n_ood):
        s = generate_scene(spec, i, ood=True)
        path = _scene_path(root, "ood", i)
        save_npz(path, image=s.image, label=s.label, semantic=s.semantic)
        items.append(ManifestItem(ood_ids[i], str(path), spec.image_size[1], spec.image_size[0]))
    write_manifest(root / "ood_manifest.tsv", items)
    for p, split in splits.items():
        (root / "splits" / f"{p}.json").write_text(split.to_json() + "\n", encoding="utf-8")
    (root / "config.txt").write_text(dump_config(cfg), encoding="utf-8")
    summary = {
        "n_in": spec.n_in,
        "class_names": list(spec.in_class_names),
        "n_scenes": d.n_scenes,
        "n_val": d.n_val,
        "n_ood": d.n_ood,
        "splits": {p: len(s.labeled) for p, s in sorted(splits.items())},
    }
    (root / "summary.json").write_text(json.dumps(summary, indent=1, sort_keys=True) + "\n", encoding="utf-8")
    return summary


@dataclass
class Dataset:
    root: Path
    labeled: list  # (image, label)
    unlabeled_in: list
    train_scenes: list  # every in-distribution pool scene as (id, image, label, semantic)
    val: list  # (image, label)
    ood: list  # (item id, image, semantic)
    split: DatasetSplit
    manifest: CorpusManifest


def _load_scene(path):
    with np.load(path) as z:
        return z["image"], z["label"], z["semantic"]


# data keys that only select among generated files
_SELECTION_KEYS = ("data.protocol", "data.max_pixels")


def _generation_lines(cfg):
    return [line for line in dump_config(cfg).splitlines()
            if line.split(".", 1)[0] in ("scene", "data") and line.split(" =", 1)[0] not in _SELECTION_KEYS]


def check_dataset(cfg: ExperimentConfig, root):
    """Refuse a dataset generated from different scene/data settings."""
    snap = Path(root) / "config.txt"
    if not snap.is_file():
        raise FileNotFoundError(f"no dataset at {root} (run 'generate' first)")
    built = apply_overrides(ExperimentConfig(), parse_config_text(snap.read_text(encoding="utf-8"), str(snap)))
    if _generation_lines(built) != _generation_lines(cfg):
        raise ConfigError(f"dataset at {root} was generated with different scene/data settings "
                          "(re-run 'generate --force')")


def load_dataset(root, protocol="original", max_pixels=None, n_ood=None) -> Dataset:
    root = Path(root)
    split_path = root / "splits" / f"{protocol}.json"
    if not split_path.is_file():
        raise FileNotFoundError(f"no dataset split at {split_path} (run 'generate' first)")
    split = DatasetSplit.from_json(split_path.read_text(encoding="utf-8"))
    pool = {}
    for i in sorted(set(split.labeled_ids) | set(split.unlabeled_in)):
        pool[i] = _load_scene(_scene_path(root, "in", i))
    # coarse-tier scenes carry an emulated low-quality annotation
    labeled = [(pool[i][0], coarsen_label(pool[i][1], seed=i) if tag == "coarse" else pool[i][1])
               for i, tag in split.labeled]
    unlabeled = [pool[i][0] for i in split.unlabeled_in]
    train_scenes = [(i,) + pool[i] for i in sorted(pool)]
    val = []
    for p in sorted((root / "val").glob("*.npz")):
        img, lab, _ = _load_scene(p)
        val.append((img, lab))
    manifest = load_manifest(root / "ood_manifest.tsv", max_pixels or None)
    items = manifest.items if n_ood is None else manifest.items[:n_ood]
    ood = []
    for it in items:
        img, sem = load_item(it.path)
        ood.append((it.id, img, sem))
    return Dataset(root, labeled, unlabeled, train_scenes, val, ood, split, manifest)


# ------------------------------------------------------------------ teacher

def make_prompt_set(cfg: ExperimentConfig, subset=None):
    subset = subset or cfg.teacher.prompt_subset
    extras = list(cfg.scene.ood_class_names)
    if subset == "targets_only":
        extras = []
    elif subset == "half":
        extras = extras[: math.ceil(len(extras) / 2)]
    elif subset != "full":
        raise ConfigError(f"unknown prompt subset {subset!r}")
    return build_prompt_set(cfg.scene.in_class_names, extras, cfg.teacher.templates)


def make_embedder(cfg: ExperimentConfig, noise=None):
    t = cfg.teacher
    if t.embedder == "file":
        if not t.emb_dir or not t.text_table:
            raise ConfigError("file embedder needs teacher.emb_dir and teacher.text_table")
        return FileEmbedder(t.emb_dir, t.text_table)
    return OracleEmbedder(cfg.scene.all_class_names, dim=t.dim, noise=t.noise if noise is None else noise,
                          seed=t.seed, confusers=DEFAULT_CONFUSERS, similarity=t.similarity,
                          text_noise=t.text_noise)


def pseudo_label_dir(cfg: ExperimentConfig, subset=None):
    subset = subset or cfg.teacher.prompt_subset
    digest = config_digest(cfg, ("scene", "data", "teacher"))
    return cfg.out_root / "pseudolabels" / f"{subset}-{digest}"


def run_pseudolabel(cfg: ExperimentConfig, dataset_dir, out_dir, subset=None, force=False) -> dict:
    dataset_dir = Path(dataset_dir)
    check_dataset(cfg, dataset_dir)
    manifest_path = dataset_dir / "ood_manifest.tsv"
    if not manifest_path.is_file():
        raise FileNotFoundError(f"no OOD manifest at {manifest_path} (run 'generate' first)")
    manifest = load_manifest(manifest_path, cfg.data.max_pixels or None)
    out_dir = prepare_output_dir(out_dir, force)
    summary = generate_offline(manifest, make_prompt_set(cfg, subset), make_embedder(cfg), out_dir,
                               cfg.teacher.temperature)
    (out_dir / "config.txt").write_text(dump_config(cfg), encoding="utf-8")
    return summary


def teacher_predictions(cfg: ExperimentConfig, items, subset=None, noise=None):
    """Refined teacher labels for ``(id, image, semantic)`` items, computed in memory."""
    teacher = OVSTeacher(make_prompt_set(cfg, subset), make_embedder(cfg, noise), cfg.teacher.temperature)
    return {str(i): teacher(img, key=str(i), semantic=sem) for i, img, sem in items}


# -------------------------------------------------------------------- train

def train_data(ds: Dataset, n_ood=None) -> TrainData:
    ood = ds.ood if n_ood is None else ds.ood[:n_ood]
    return TrainData(ds.labeled, ds.unlabeled_in, [(i, img) for i, img, _ in ood])


def evaluate_model(model, pairs, n_classes):
    preds = predict(model, [img for img, _ in pairs])
    cm = evalkit.evaluate_labels(preds, [lab for _, lab in pairs], n_classes)
    iou, m = evalkit.miou(cm)
    return m, iou


def train_and_evaluate(cfg: ExperimentConfig, ds: Dataset, teacher_labels, n_ood=None):
    """One training run from scratch; returns ``(model, history, mIoU, per-class IoU)``."""
    tc = cfg.train
    model = build_student(cfg.scene.n_in, width=tc.width, seed=tc.seed)
    model, history = train(model, train_data(ds, n_ood), teacher_labels, tc)
    m, iou = evaluate_model(model, ds.val, cfg.scene.n_in)
    return model, history, m, iou


def run_train(cfg: ExperimentConfig, dataset_dir, out_dir, force=False) -> dict:
    check_dataset(cfg, dataset_dir)
    ds = load_dataset(dataset_dir, cfg.data.protocol, cfg.data.max_pixels)
    labels = None
    if cfg.train.teacher_source == "ovs" and cfg.train.n_unlabeled_out > 0 and ds.ood:
        labels = load_pseudo_labels(pseudo_label_dir(cfg), [i for i, _, _ in ds.ood])
    out_dir = prepare_output_dir(out_dir, force)
    model, history, m, iou = train_and_evaluate(cfg, ds, labels)
    digest = config_digest(cfg)
    save_checkpoint(out_dir / "checkpoint.sovsckpt", model, digest)
    history.write_csv(out_dir / "metrics.csv")
    (out_dir / "config.txt").write_text(dump_config(cfg), encoding="utf-8")
    summary = {"config_hash": digest, "val_mIoU": m, "val_iou": iou, "epochs": cfg.train.epochs}
    (out_dir / "summary.json").write_text(json.dumps(summary, indent=1, sort_keys=True) + "\n", encoding="utf-8")
    return summary


def run_eval(cfg: ExperimentConfig, dataset_dir, train_dir, out_dir, force=False) -> dict:
    """Evaluate the trained student (or the teacher itself) on ``eval.split``."""
    check_dataset(cfg, dataset_dir)
    ds = load_dataset(dataset_dir, cfg.data.protocol, cfg.data.max_pixels)
    n_in = cfg.scene.n_in
    if cfg.eval.split == "val":
        scenes = [(f"val_{k}", img, lab, None) for k, (img, lab) in enumerate(ds.val)]
        if cfg.eval.target == "teacher":
            val_sem = [_load_scene(p)[2] for p in sorted((Path(dataset_dir) / "val").glob("*.npz"))]
            scenes = [(k, img, lab, sem) for (k, img, lab, _), sem in zip(scenes, val_sem)]
    else:
        scenes = [(f"in_{i}", img, lab, sem) for i, img, lab, sem in ds.train_scenes]
    gts = [lab for _, _, lab, _ in scenes]
    if cfg.eval.target == "teacher":
        labels = teacher_predictions(cfg, [(k, img, sem) for k, img, _, sem in scenes])
        preds = [labels[str(k)].label for k, _, _, _ in scenes]
    else:
        ckpt = Path(train_dir) / "checkpoint.sovsckpt"
        if not ckpt.is_file():
            raise FileNotFoundError(f"no checkpoint at {ckpt} (run 'train' first)")
        model = build_student(n_in, width=cfg.train.width, seed=0)
        load_checkpoint(ckpt, model)
        preds = predict(model, [img for _, img, _, _ in scenes])
    cm = evalkit.evaluate_labels(preds, gts, n_in)
    iou, m = evalkit.miou(cm)
    out_dir = prepare_output_dir(out_dir, force)
    lines = ["split,target,mIoU," + ",".join(f"iou_{c}" for c in cfg.scene.in_class_names)]
    lines.append(",".join([cfg.eval.split, cfg.eval.target, repr(m)] + ["nan" if v != v else repr(v) for v in iou]))
    (out_dir / "eval.csv").write_text("\n".join(lines) + "\n", encoding="utf-8")
    (out_dir / "config.txt").write_text(dump_config(cfg), encoding="utf-8")
    return {"mIoU": m, "iou": iou}


# -------------------------------------------------------------------- sweep

def _cast_setting(axis, value):
    if axis in ("tau_out", "lambda_out"):
        return float(value)
    if axis == "n_unlabeled_out":
        return int(value)
    return str(value)


class SweepRunner:
    """Per-cell trainer for :func:`evalkit.run_sweep` with cached teacher labels."""

    def __init__(self, cfg: ExperimentConfig, ds: Dataset):
        self.cfg = cfg
        self.ds = ds
        self._labels = {}

    def labels(self, subset):
        if subset not in self._labels:
            self._labels[subset] = teacher_predictions(self.cfg, self.ds.ood, subset)
        return self._labels[subset]

    def config_for(self, axis, setting, seed):
        cfg = self.cfg
        tc = replace(cfg.train, seed=seed)
        teacher = cfg.teacher
        if axis == "tau_out":
            tc = replace(tc, tau_out=setting)
        elif axis == "lambda_out":
            tc = replace(tc, lambda_out=setting)
        elif axis == "teacher_source":
            tc = replace(tc, teacher_source=setting)
        elif axis == "prompt_subset":
            teacher = replace(teacher, prompt_subset=setting)
        return replace(cfg, train=tc, teacher=teacher)

    def __call__(self, axis, setting, seed) -> evalkit.RunRecord:
        cfg = self.config_for(axis, setting, seed)
        n_ood = setting if axis == "n_unlabeled_out" else None
        if n_ood == 0:
            cfg = replace(cfg, train=replace(cfg.train, n_unlabeled_out=0))
        labels = None
        if cfg.train.teacher_source == "ovs" and cfg.train.n_unlabeled_out > 0:
            labels = self.labels(cfg.teacher.prompt_subset)
        _, history, m, iou = train_and_evaluate(cfg, self.ds, labels, n_ood)
        trace = {k: history.column(k) for k in ("l_s", "l_u_in", "l_u_out", "masked_frac_out")}
        return evalkit.RunRecord(seed, m, iou, trace)


def run_sweep(cfg: ExperimentConfig, dataset_dir, out_dir, force=False, ds=None):
    check_dataset(cfg, dataset_dir)
    axis = cfg.sweep.axis
    grid = [_cast_setting(axis, g) for g in cfg.sweep.grid]
    ds = ds or load_dataset(dataset_dir, cfg.data.protocol, cfg.data.max_pixels)
    runner = SweepRunner(cfg, ds)
    out_dir = prepare_output_dir(out_dir, force)
    (out_dir / "config.txt").write_text(dump_config(cfg), encoding="utf-8")
    try:
        result = evalkit.run_sweep(axis, grid, lambda s, seed: runner(axis, s, seed), cfg.sweep.seeds,
                                   cfg.scene.in_class_names)
    except evalkit.SweepError as exc:
        if exc.partial is not None and exc.partial.entries:
            evalkit.render_report(exc.partial, out_dir)
        raise
    evalkit.render_report(result, out_dir)
    return result
