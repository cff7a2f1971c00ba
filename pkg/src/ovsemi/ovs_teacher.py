"""Open-vocabulary pseudo-labeling.

Pipeline: prompt set -> text embeddings (templates x concept ensemble) ->
cosine cost volume against a dense image embedding -> class probabilities ->
argmax over the extended vocabulary -> refinement of every non-target class
to background.
"""
from __future__ import annotations

import hashlib
import json
import logging
import re
import string
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Mapping, Protocol, Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .data_synth import BACKGROUND_ID, CorpusManifest, Scene
from .errors import ConfigError, ContractError, EmbedderError, PipelineError
from . import formats

log = logging.getLogger(__name__)

DEFAULT_TEMPLATES = ("a photo of a {}.", "a bright photo of a {}.")
DEFAULT_TEMPERATURE = 0.1


# ---------------------------------------------------------------- prompt sets

def _slot_count(template: str) -> int:
    try:
        fields = [f for _, f, _, _ in string.Formatter().parse(template) if f is not None]
    except ValueError as exc:
        raise ConfigError(f"malformed template {template!r}: {exc}") from None
    if any(f != "" for f in fields):
        raise ConfigError(f"template {template!r} must use an anonymous '{{}}' slot")
    return len(fields)


@dataclass(frozen=True)
class PromptSet:
    class_names: tuple[str, ...]
    templates: tuple[str, ...]
    concepts: tuple[tuple[str, ...], ...]
    n_in: int

    @property
    def n_classes(self) -> int:
        return len(self.class_names)

    def prompts(self, class_index: int, template_index: int) -> list[str]:
        tpl = self.templates[template_index]
        return [tpl.format(c) for c in self.concepts[class_index]]


def build_prompt_set(target_classes: Sequence[str], extra_classes: Sequence[str] = (),
                     templates: Sequence[str] = DEFAULT_TEMPLATES,
                     concepts: Mapping[str, Sequence[str]] | None = None) -> PromptSet:
    """Target classes first (index == label id), then the extra vocabulary."""
    target_classes = list(target_classes)
    extra_classes = list(extra_classes)
    if not target_classes:
        raise ConfigError("target class list is empty")
    names = target_classes + extra_classes
    seen = set()
    for name in names:
        if name in seen:
            raise ConfigError(f"duplicate class name {name!r}")
        seen.add(name)
    if not templates:
        raise ConfigError("need at least one prompt template")
    for tpl in templates:
        if _slot_count(tpl) != 1:
            raise ConfigError(f"template {tpl!r} must contain exactly one slot")
    concepts = dict(concepts or {})
    unknown = set(concepts) - seen
    if unknown:
        raise ConfigError(f"concepts given for unknown classes: {sorted(unknown)}")
    per_class = []
    for name in names:
        phrases = tuple(concepts.get(name) or (name,))
        per_class.append(phrases)
    return PromptSet(tuple(names), tuple(templates), tuple(per_class), len(target_classes))


# ------------------------------------------------------------------ embedders

class Embedder(Protocol):
    dim: int

    def embed_text(self, phrase: str) -> np.ndarray: ...

    def embed_image(self, image: np.ndarray, *, key: str | None = None,
                    semantic: np.ndarray | None = None) -> np.ndarray: ...


def _unit(v):
    return v / np.linalg.norm(v)


def _digest_seed(*parts) -> int:
    h = hashlib.blake2b(digest_size=8)
    for p in parts:
        h.update(p if isinstance(p, bytes) else str(p).encode("utf-8"))
        h.update(b"\x00")
    return int.from_bytes(h.digest(), "little")


class OracleEmbedder:
    """Synthetic vision-language encoder with controllable accuracy.

    Every class of the world vocabulary owns a fixed random unit vector.  A
    class listed in ``confusers`` is placed at cosine ``similarity`` from its
    confuser's vector.  Text phrases map to the vector of the concept they
    mention (longest match wins); unknown phrases get a hash-seeded random
    vector.  Image embeddings need the ground-truth ``semantic`` map: each
    pixel is its class vector plus isotropic Gaussian noise of expected norm
    ``noise``, renormalized.
    """

    def __init__(self, class_names, concepts=None, dim=32, noise=0.0, seed=0,
                 confusers=None, similarity=0.8, text_noise=0.0, stride=1):
        self.class_names = tuple(class_names)
        self.dim = int(dim)
        self.noise = float(noise)
        self.text_noise = float(text_noise)
        self.seed = int(seed)
        self.stride = int(stride)
        if self.stride < 1:
            raise ConfigError("stride must be >= 1")
        rng = np.random.default_rng([self.seed, 0x0E3B])
        vecs = np.array([_unit(rng.normal(size=self.dim)) for _ in self.class_names])
        index = {n: i for i, n in enumerate(self.class_names)}
        for name, other in (confusers or {}).items():
            if name not in index or other not in index:
                continue
            base = vecs[index[other]]
            ortho = vecs[index[name]] - (vecs[index[name]] @ base) * base
            vecs[index[name]] = similarity * base + np.sqrt(1 - similarity ** 2) * _unit(ortho)
        self.class_vectors = vecs
        lookup = {}
        for i, name in enumerate(self.class_names):
            lookup[name.lower()] = i
            for c in (concepts or {}).get(name, ()):
                lookup[c.lower()] = i
        # longest phrase first so "table for eating at" beats "table"
        self._lookup = sorted(lookup.items(), key=lambda kv: -len(kv[0]))

    def _match(self, phrase):
        text = phrase.lower()
        for concept, idx in self._lookup:
            if re.search(r"(?<![a-z])" + re.escape(concept) + r"(?![a-z])", text):
                return idx
        return None

    def embed_text(self, phrase: str) -> np.ndarray:
        idx = self._match(phrase)
        rng = np.random.default_rng(_digest_seed(self.seed, "text", phrase))
        jitter = rng.normal(size=self.dim)
        if idx is None:
            return _unit(jitter)
        v = self.class_vectors[idx]
        if self.text_noise > 0:
            v = v + self.text_noise * jitter / np.sqrt(self.dim)
        return _unit(v)

    def embed_image(self, image, *, key=None, semantic=None):
        if semantic is None:
            raise EmbedderError("OracleEmbedder needs the item's semantic map")
        sem = np.asarray(semantic)[::self.stride, ::self.stride].astype(np.int64)
        if sem.size and sem.max() >= len(self.class_names):
            raise EmbedderError(f"semantic id {sem.max()} outside the oracle vocabulary")
        field = self.class_vectors[sem]
        if self.noise > 0:
            rng = np.random.default_rng(_digest_seed(self.seed, "image", key, sem.tobytes()))
            field = field + rng.normal(scale=self.noise / np.sqrt(self.dim), size=field.shape)
        norms = np.linalg.norm(field, axis=-1, keepdims=True)
        return field / np.where(norms > 0, norms, 1.0)


class FileEmbedder:
    """Embeddings precomputed by an external encoder.

    Text vectors come from a JSON object ``{phrase: [floats]}``; image fields
    from ``<emb_dir>/<key>.sovsemb`` files.
    """

    def __init__(self, emb_dir, text_table):
        self.emb_dir = Path(emb_dir)
        if isinstance(text_table, (str, Path)):
            text_table = json.loads(Path(text_table).read_text(encoding="utf-8"))
        self.text_table = {k: np.asarray(v, dtype=np.float64) for k, v in text_table.items()}
        dims = {v.shape[0] for v in self.text_table.values()}
        if len(dims) > 1:
            raise ConfigError(f"inconsistent text embedding sizes {sorted(dims)}")
        self.dim = dims.pop() if dims else 0

    def embed_text(self, phrase):
        try:
            v = self.text_table[phrase]
        except KeyError:
            raise EmbedderError(f"no text embedding for {phrase!r}") from None
        n = np.linalg.norm(v)
        if n == 0:
            raise EmbedderError(f"zero text embedding for {phrase!r}")
        return v / n

    def embed_image(self, image, *, key=None, semantic=None):
        if key is None:
            raise EmbedderError("FileEmbedder needs an item key")
        field = formats.read_embedding_file(self.emb_dir / f"{key}.sovsemb")
        if field.shape[-1] != self.dim:
            raise EmbedderError(f"{key}: image embedding size {field.shape[-1]} != text size {self.dim}")
        return field.astype(np.float64)


# ------------------------------------------------------------- text encoding

def encode_text(prompt_set: PromptSet, embedder) -> np.ndarray:
    """N x P x D text embeddings; concept vectors are averaged, then renormalized."""
    out = np.zeros((prompt_set.n_classes, len(prompt_set.templates), embedder.dim))
    for n, name in enumerate(prompt_set.class_names):
        for p, tpl in enumerate(prompt_set.templates):
            try:
                vecs = [np.asarray(embedder.embed_text(phrase), dtype=np.float64)
                        for phrase in prompt_set.prompts(n, p)]
            except Exception as exc:
                raise EmbedderError(f"text embedding failed for class {name!r}, template {tpl!r}: {exc}") from exc
            if len(vecs) == 1:
                # embedders return unit vectors; skip the mean/renormalize round trip
                out[n, p] = vecs[0]
                continue
            mean = np.mean(vecs, axis=0)
            norm = np.linalg.norm(mean)
            out[n, p] = mean / norm if norm > 0 else mean
    return out


# --------------------------------------------------------------- cost volume

@dataclass(frozen=True)
class CostVolume:
    values: np.ndarray  # H' x W' x N x P cosine similarities
    n_zero_pixels: int = 0


def cost_volume(image_emb, text_emb) -> CostVolume:
    image_emb = np.asarray(image_emb, dtype=np.float64)
    text_emb = np.asarray(text_emb, dtype=np.float64)
    if image_emb.shape[-1] != text_emb.shape[-1]:
        raise ContractError(f"embedding sizes differ: image {image_emb.shape[-1]} vs text {text_emb.shape[-1]}")
    inorm = np.linalg.norm(image_emb, axis=-1, keepdims=True)
    zero = inorm[..., 0] == 0
    if zero.any():
        log.debug("cost volume: %d zero-norm image vectors scored as 0", int(zero.sum()))
    img = image_emb / np.where(inorm > 0, inorm, 1.0)
    tnorm = np.linalg.norm(text_emb, axis=-1, keepdims=True)
    txt = text_emb / np.where(tnorm > 0, tnorm, 1.0)
    values = np.clip(np.einsum("hwd,npd->hwnp", img, txt), -1.0, 1.0)
    return CostVolume(values, int(zero.sum()))


def decode(cv, output_size, temperature=DEFAULT_TEMPERATURE) -> np.ndarray:
    """Max over templates, tempered softmax over classes, bilinear upsampling."""
    if temperature <= 0:
        raise ContractError("temperature must be positive")
    values = cv.values if isinstance(cv, CostVolume) else np.asarray(cv)
    scores = values.max(axis=-1) / temperature
    scores = scores - scores.max(axis=-1, keepdims=True)
    prob = np.exp(scores)
    prob /= prob.sum(axis=-1, keepdims=True)
    if prob.shape[:2] != tuple(output_size):
        t = torch.from_numpy(prob).permute(2, 0, 1)[None]
        t = F.interpolate(t, size=tuple(output_size), mode="bilinear", align_corners=False)
        prob = t[0].permute(1, 2, 0).numpy()
        prob = prob / prob.sum(axis=-1, keepdims=True)
    return prob


# -------------------------------------------------------------- pseudo-labels

@dataclass(frozen=True)
class PseudoLabel:
    label: np.ndarray  # H x W int64 over target ids
    confidence: np.ndarray  # H x W float32
    source: str = "ovs"


def refine(label_init, n_in):
    """Map every id outside the target space to background."""
    label_init = np.asarray(label_init)
    return np.where(label_init < n_in, label_init, BACKGROUND_ID).astype(np.int64)


def make_pseudo_label(prob, n_in, source="ovs") -> PseudoLabel:
    prob = np.asarray(prob)
    if n_in > prob.shape[-1]:
        raise ContractError(f"n_in={n_in} exceeds the {prob.shape[-1]} predicted classes")
    sums = prob.sum(axis=-1)
    if not np.allclose(sums, 1.0, atol=1e-5, rtol=0):
        raise ContractError("probability rows must sum to 1")
    label_init = prob.argmax(axis=-1)
    confidence = prob.max(axis=-1).astype(np.float32)
    return PseudoLabel(refine(label_init, n_in), confidence, source)


@dataclass
class OVSTeacher:
    prompt_set: PromptSet
    embedder: object
    temperature: float = DEFAULT_TEMPERATURE

    def __post_init__(self):
        self.text_embeddings = encode_text(self.prompt_set, self.embedder)

    def probabilities(self, image, *, key=None, semantic=None):
        field = self.embedder.embed_image(image, key=key, semantic=semantic)
        cv = cost_volume(field, self.text_embeddings)
        return decode(cv, image.shape[:2], self.temperature)

    def __call__(self, image, *, key=None, semantic=None) -> PseudoLabel:
        prob = self.probabilities(image, key=key, semantic=semantic)
        return make_pseudo_label(prob, self.prompt_set.n_in)


def self_teacher_pseudo_label(model, image) -> PseudoLabel:
    """Pseudo-label from the student's own N_in-way prediction (no refinement)."""
    param = next(model.parameters())
    x = torch.as_tensor(np.ascontiguousarray(image), dtype=param.dtype).permute(2, 0, 1)[None]
    with torch.no_grad():
        prob = torch.softmax(model(x), dim=1)[0].permute(1, 2, 0).double().numpy()
    return make_pseudo_label(prob, prob.shape[-1], source="self")


# ---------------------------------------------------------- offline batch job

def load_item(path):
    """Read a corpus item: ``.npz`` with ``image`` (and optional ``semantic``) or a bare ``.npy`` image."""
    path = Path(path)
    if path.suffix == ".npy":
        return np.load(path), None
    with np.load(path) as data:
        image = data["image"]
        semantic = data["semantic"] if "semantic" in data.files else None
    return image, semantic


def _iter_items(corpus):
    if isinstance(corpus, CorpusManifest):
        for it in corpus.items:
            yield it.id, it.path
    else:
        for item_id, scene in corpus:
            yield str(item_id), scene


def pseudo_label_path(out_dir, item_id):
    return Path(out_dir) / f"{item_id}.sovspl"


def generate_offline(corpus, prompt_set: PromptSet, embedder, out_dir,
                     temperature=DEFAULT_TEMPERATURE) -> dict:
    """Pre-generate refined pseudo-labels for every corpus item.

    ``corpus`` is a :class:`CorpusManifest` or an iterable of ``(id, Scene)``.
    Writes one ``<id>.sovspl`` file per readable item plus ``summary.json``
    and returns the summary.  Unreadable items are skipped and counted; a run
    with nothing written raises :class:`PipelineError`.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    teacher = OVSTeacher(prompt_set, embedder, temperature)
    n_in = prompt_set.n_in
    pixel_counts = np.zeros(n_in, dtype=np.int64)
    conf_sum = 0.0
    n_pixels = 0
    written, skipped = [], []
    for item_id, src in _iter_items(corpus):
        try:
            if isinstance(src, Scene):
                image, semantic = src.image, src.semantic
            else:
                image, semantic = load_item(src)
            pl = teacher(image, key=item_id, semantic=semantic)
        except (OSError, ValueError, KeyError, EmbedderError) as exc:
            log.warning("skipping %s: %s", item_id, exc)
            skipped.append(item_id)
            continue
        formats.write_pseudo_label_file(pseudo_label_path(out_dir, item_id), pl.label, pl.confidence, n_in)
        pixel_counts += np.bincount(pl.label.ravel(), minlength=n_in)[:n_in]
        conf_sum += float(pl.confidence.astype(np.float64).sum())
        n_pixels += pl.label.size
        written.append(item_id)
    if not written:
        raise PipelineError(f"no pseudo-labels written ({len(skipped)} items skipped)")
    summary = {
        "count": len(written),
        "n_skipped": len(skipped),
        "skipped": skipped,
        "n_in": n_in,
        "n_prompt_classes": prompt_set.n_classes,
        "class_names": list(prompt_set.class_names[:n_in]),
        "class_pixel_counts": pixel_counts.tolist(),
        "mean_confidence": round(conf_sum / n_pixels, 12),
    }
    (out_dir / "summary.json").write_text(json.dumps(summary, indent=1, sort_keys=True) + "\n", encoding="utf-8")
    return summary


def load_pseudo_labels(out_dir, ids: Iterable[str]) -> dict:
    """Load stored pseudo-labels; raises ``FileNotFoundError`` naming the first missing id."""
    out_dir = Path(out_dir)
    ids = list(ids)
    missing = [i for i in ids if not pseudo_label_path(out_dir, i).is_file()]
    if missing:
        raise FileNotFoundError(f"missing pseudo-label for {len(missing)} item(s), first: {missing[0]!r} in {out_dir}")
    store = {}
    for i in ids:
        label, conf, _ = formats.read_pseudo_label_file(pseudo_label_path(out_dir, i))
        store[i] = PseudoLabel(label.astype(np.int64), conf, "ovs")
    return store
