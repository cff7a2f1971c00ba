import itertools
import json
import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from ovsemi import formats
from ovsemi.data_synth import DEFAULT_CONFUSERS, SceneSpec, generate_scene
from ovsemi.errors import ConfigError, ContractError, EmbedderError, PipelineError
from ovsemi.evalkit import evaluate_labels, miou
from ovsemi.model import build_student
from ovsemi.ovs_teacher import (CostVolume, FileEmbedder, OracleEmbedder, OVSTeacher, build_prompt_set,
                                cost_volume, decode, encode_text, generate_offline, load_pseudo_labels,
                                make_pseudo_label, refine, self_teacher_pseudo_label)

SPEC = SceneSpec(seed=1)


# ------------------------------------------------------------- prompt sets

def test_prompt_set_large_vocabulary():
    targets = [f"voc{i}" for i in range(21)]
    extras = [f"stuff{i}" for i in range(150)]
    ps = build_prompt_set(targets, extras)
    assert ps.n_classes == 171 and ps.n_in == 21
    assert ps.class_names[:21] == tuple(targets)


def test_prompt_set_targets_only():
    ps = build_prompt_set(SPEC.in_class_names)
    assert ps.n_classes == ps.n_in == 5


def test_prompt_set_toy_enumeration():
    ps = build_prompt_set(SPEC.in_class_names, SPEC.ood_class_names, ("a photo of a {}.", "a {} shape."))
    assert ps.n_classes == 8
    rendered = [ps.prompts(n, p) for n in range(8) for p in range(2)]
    assert len(rendered) == 16 and all(len(r) == 1 for r in rendered)
    assert ps.prompts(6, 1) == ["a ring shape."]


@pytest.mark.parametrize("targets,extras,templates", [
    (["a", "b"], ["b"], ("{}",)),
    ([], [], ("{}",)),
    (["a"], [], ("no slot",)),
    (["a"], [], ("{} and {}",)),
])
def test_prompt_set_errors(targets, extras, templates):
    with pytest.raises(ConfigError):
        build_prompt_set(targets, extras, templates)


# -------------------------------------------------------------- text side

class TableEmbedder:
    def __init__(self, table):
        self.table = {k: np.asarray(v, float) for k, v in table.items()}
        self.dim = len(next(iter(self.table.values())))

    def embed_text(self, phrase):
        v = self.table[phrase]
        return v / np.linalg.norm(v)


def test_concept_collapse_k1():
    emb = OracleEmbedder(SPEC.all_class_names, dim=16, text_noise=0.3)
    ps = build_prompt_set(SPEC.in_class_names, SPEC.ood_class_names)
    out = encode_text(ps, emb)
    for n in range(ps.n_classes):
        for p, tpl in enumerate(ps.templates):
            assert np.array_equal(out[n, p], emb.embed_text(tpl.format(ps.class_names[n])))


def test_identical_concepts_average_to_same():
    e = np.array([0.6, 0.8])
    ps = build_prompt_set(["bg", "x"], templates=("{}",), concepts={"x": ["x1", "x2"]})
    out = encode_text(ps, TableEmbedder({"bg": [1, 0], "x1": e, "x2": e}))
    assert np.allclose(out[1, 0], e)


def test_orthogonal_concepts_renormalized():
    ps = build_prompt_set(["bg", "x"], templates=("{}",), concepts={"x": ["x1", "x2"]})
    table = {"bg": [0, 0, 1], "x1": [1, 0, 0], "x2": [0, 1, 0]}
    out = encode_text(ps, TableEmbedder(table))
    assert np.isclose(np.linalg.norm((np.array([1, 0, 0]) + np.array([0, 1, 0])) / 2), 1 / math.sqrt(2))
    assert np.isclose(np.linalg.norm(out[1, 0]), 1.0)
    assert np.allclose(out[1, 0], [1 / math.sqrt(2), 1 / math.sqrt(2), 0])


def test_embedder_failure_has_context():
    ps = build_prompt_set(["bg", "x"], templates=("{}",))
    with pytest.raises(EmbedderError, match="'x'"):
        encode_text(ps, TableEmbedder({"bg": [1, 0]}))


def test_oracle_confuser_similarity():
    emb = OracleEmbedder(SPEC.all_class_names, dim=32, confusers=DEFAULT_CONFUSERS, similarity=0.8)
    idx = {n: i for i, n in enumerate(SPEC.all_class_names)}
    for ood, target in DEFAULT_CONFUSERS.items():
        c = emb.class_vectors[idx[ood]] @ emb.class_vectors[idx[target]]
        assert abs(c - 0.8) < 1e-12
    assert np.allclose(np.linalg.norm(emb.class_vectors, axis=1), 1.0)


# ------------------------------------------------------------ cost volume

def test_cost_volume_orthonormal():
    cv = cost_volume(np.array([[[1.0, 0.0]]]), np.array([[[1.0, 0.0]], [[0.0, 1.0]]]))
    assert np.allclose(cv.values[0, 0, :, 0], [1.0, 0.0])


def test_cost_volume_scale_invariance():
    rng = np.random.default_rng(1)
    img = rng.normal(size=(3, 3, 5))
    txt = rng.normal(size=(4, 2, 5))
    scaled = img.copy()
    scaled[1, 2] *= 3.0
    assert np.allclose(cost_volume(img, txt).values, cost_volume(scaled, txt).values, atol=1e-15)


def _naive_cost_volume(img, txt):
    h, w, _ = img.shape
    n, p, _ = txt.shape
    out = np.zeros((h, w, n, p))
    for i in range(h):
        for j in range(w):
            for a in range(n):
                for b in range(p):
                    u, v = img[i, j], txt[a, b]
                    out[i, j, a, b] = float(np.dot(u, v)) / (math.sqrt(np.dot(u, u)) * math.sqrt(np.dot(v, v)))
    return out


def test_cost_volume_double_loop():
    rng = np.random.default_rng(2)
    img = rng.normal(size=(2, 2, 4))
    txt = rng.normal(size=(3, 1, 4))
    assert np.abs(cost_volume(img, txt).values - _naive_cost_volume(img, txt)).max() <= 1e-6


def test_cost_volume_zero_vector():
    img = np.zeros((1, 2, 3))
    img[0, 1] = [1, 0, 0]
    cv = cost_volume(img, np.eye(3)[:, None, :])
    assert (cv.values[0, 0] == 0).all() and cv.n_zero_pixels == 1


def test_cost_volume_dim_mismatch():
    with pytest.raises(ContractError):
        cost_volume(np.ones((1, 1, 3)), np.ones((2, 1, 4)))


# ------------------------------------------------------------------ decode

def test_decode_two_class_closed_form():
    cv = CostVolume(np.array([1.0, -1.0]).reshape(1, 1, 2, 1))
    prob = decode(cv, (1, 1), temperature=0.5)
    s4 = 1.0 / (1.0 + math.exp(-4.0))
    assert np.allclose(prob[0, 0], [s4, 1 - s4], atol=1e-12)
    assert round(prob[0, 0, 0], 3) == 0.982


def test_decode_uniform_and_identity_upsampling():
    cv = CostVolume(np.full((3, 4, 5, 2), 0.3))
    prob = decode(cv, (3, 4))
    assert prob.shape == (3, 4, 5) and np.allclose(prob, 0.2)


def test_decode_upsamples_and_renormalizes():
    rng = np.random.default_rng(3)
    cv = CostVolume(rng.uniform(-1, 1, size=(4, 4, 6, 2)))
    prob = decode(cv, (16, 16), temperature=0.2)
    assert prob.shape == (16, 16, 6)
    assert np.allclose(prob.sum(-1), 1.0, atol=1e-12)


def test_decode_max_over_templates():
    v = np.zeros((1, 1, 2, 3))
    v[0, 0, 0] = [0.1, 0.9, -0.5]
    v[0, 0, 1] = [0.5, 0.5, 0.5]
    prob = decode(CostVolume(v), (1, 1), temperature=1.0)
    e = np.exp([0.9, 0.5])
    assert np.allclose(prob[0, 0], e / e.sum())


# ----------------------------------------------------------- pseudo-labels

def test_refine_out_of_vocab_to_background():
    prob = np.full((1, 1, 171), 0.2 / 170)
    prob[0, 0, 57] = 0.8
    pl = make_pseudo_label(prob, 21)
    assert pl.label[0, 0] == 0 and np.isclose(pl.confidence[0, 0], 0.8)


def test_refine_pass_through():
    prob = np.full((1, 1, 8), 0.2 / 7)
    prob[0, 0, 3] = 0.8
    pl = make_pseudo_label(prob, 5)
    assert pl.label[0, 0] == 3 and np.isclose(pl.confidence[0, 0], 0.8)


def test_refine_exhaustive_idempotent():
    # all 2x2 grids over 8 ids; the full 4x4 enumeration lives in the acceptance suite
    for cells in itertools.product(range(8), repeat=4):
        x = np.array(cells).reshape(2, 2)
        r = refine(x, 5)
        assert r.max() < 5
        assert np.array_equal(refine(r, 5), r)


def test_make_pseudo_label_rejects_bad_rows():
    with pytest.raises(ContractError):
        make_pseudo_label(np.full((2, 2, 3), 0.3), 3)
    with pytest.raises(ContractError):
        make_pseudo_label(np.full((2, 2, 3), 1 / 3), 4)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2 ** 32 - 1))
def test_extra_class_permutation_invariance(seed):
    rng = np.random.default_rng(seed)
    logits = rng.normal(size=(5, 5, 8)) * 3
    prob = np.exp(logits) / np.exp(logits).sum(-1, keepdims=True)
    perm = np.concatenate([np.arange(5), 5 + rng.permutation(3)])
    a = make_pseudo_label(prob, 5)
    b = make_pseudo_label(prob[..., perm], 5)
    assert np.array_equal(a.label, b.label)
    assert np.array_equal(a.confidence, b.confidence)


def test_oracle_noise_zero_matches_ground_truth():
    emb = OracleEmbedder(SPEC.all_class_names, noise=0.0, confusers=DEFAULT_CONFUSERS)
    teacher = OVSTeacher(build_prompt_set(SPEC.in_class_names, SPEC.ood_class_names), emb)
    scenes = [generate_scene(SPEC, i) for i in range(10)]
    preds = [teacher(s.image, key=str(i), semantic=s.semantic).label for i, s in enumerate(scenes)]
    _, m = miou(evaluate_labels(preds, [s.label for s in scenes], 5))
    assert m == 1.0


def test_monotone_prompt_coverage():
    emb = OracleEmbedder(SPEC.all_class_names, noise=0.0, confusers=DEFAULT_CONFUSERS)
    scenes = [generate_scene(SPEC, i, ood=True) for i in range(20)]
    gts = [s.label for s in scenes]
    scores = []
    for k in range(len(SPEC.ood_class_names) + 1):
        t = OVSTeacher(build_prompt_set(SPEC.in_class_names, SPEC.ood_class_names[:k]), emb)
        preds = [t(s.image, key=str(i), semantic=s.semantic).label for i, s in enumerate(scenes)]
        scores.append(miou(evaluate_labels(preds, gts, 5))[1])
    assert all(b >= a for a, b in zip(scores, scores[1:]))
    assert scores[-1] > scores[0]


def test_oracle_needs_semantic_map():
    emb = OracleEmbedder(SPEC.all_class_names)
    with pytest.raises(EmbedderError):
        emb.embed_image(np.zeros((4, 4, 3)))


# ------------------------------------------------------------ self teacher

class _Uniform(torch.nn.Module):
    def __init__(self, n):
        super().__init__()
        self.n = n
        self.w = torch.nn.Parameter(torch.zeros(()))

    def forward(self, x):
        return torch.zeros(x.shape[0], self.n, *x.shape[2:]) * self.w


def test_self_teacher_uniform_model():
    pl = self_teacher_pseudo_label(_Uniform(5), np.zeros((6, 6, 3), np.float32))
    assert np.allclose(pl.confidence, 0.2) and pl.source == "self"


def test_self_teacher_equals_make_pseudo_label():
    model = build_student(5, width=8, seed=3)
    img = generate_scene(SPEC, 1).image
    pl = self_teacher_pseudo_label(model, img)
    with torch.no_grad():
        prob = torch.softmax(model(torch.from_numpy(img).permute(2, 0, 1)[None]), 1)[0].permute(1, 2, 0).double().numpy()
    ref = make_pseudo_label(prob, 5, source="self")
    assert np.array_equal(pl.label, ref.label) and np.array_equal(pl.confidence, ref.confidence)
    again = self_teacher_pseudo_label(model, img)
    assert np.array_equal(pl.label, again.label) and np.array_equal(pl.confidence, again.confidence)


# ------------------------------------------------------------ offline jobs

def _corpus(n=10):
    return [(f"s{i}", generate_scene(SPEC, i, ood=True)) for i in range(n)]


def test_generate_offline_counts_and_determinism(tmp_path):
    ps = build_prompt_set(SPEC.in_class_names, SPEC.ood_class_names)
    emb = OracleEmbedder(SPEC.all_class_names, noise=0.5)
    s1 = generate_offline(_corpus(), ps, emb, tmp_path / "a")
    s2 = generate_offline(_corpus(), ps, emb, tmp_path / "b")
    assert s1["count"] == 10 and s1["n_skipped"] == 0 and s1 == s2
    files = sorted(p.name for p in (tmp_path / "a").glob("*.sovspl"))
    assert len(files) == 10
    for name in files + ["summary.json"]:
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
    assert sum(s1["class_pixel_counts"]) == 10 * 64 * 64
    store = load_pseudo_labels(tmp_path / "a", (f"s{i}" for i in range(10)))
    assert store["s3"].label.max() < 5


def test_generate_offline_skips_unreadable(tmp_path):
    from ovsemi.data_synth import ManifestItem, load_manifest, write_manifest
    good = generate_scene(SPEC, 0, ood=True)
    np.savez(tmp_path / "good.npz", image=good.image, semantic=good.semantic)
    write_manifest(tmp_path / "m.tsv", [ManifestItem("good", "good.npz", 64, 64),
                                        ManifestItem("gone", "gone.npz", 64, 64)])
    ps = build_prompt_set(SPEC.in_class_names, SPEC.ood_class_names)
    emb = OracleEmbedder(SPEC.all_class_names)
    summary = generate_offline(load_manifest(tmp_path / "m.tsv"), ps, emb, tmp_path / "out")
    assert summary["count"] == 1 and summary["n_skipped"] == 1 and summary["skipped"] == ["gone"]
    write_manifest(tmp_path / "m2.tsv", [ManifestItem("gone", "gone.npz", 64, 64)])
    with pytest.raises(PipelineError):
        generate_offline(load_manifest(tmp_path / "m2.tsv"), ps, emb, tmp_path / "out2")


def test_load_pseudo_labels_missing(tmp_path):
    with pytest.raises(FileNotFoundError):
        load_pseudo_labels(tmp_path, ["nope"])


def test_file_embedder_matches_oracle(tmp_path):
    oracle = OracleEmbedder(SPEC.all_class_names, noise=0.7, dim=8)
    ps = build_prompt_set(SPEC.in_class_names, SPEC.ood_class_names)
    table = {}
    for n in range(ps.n_classes):
        for p in range(len(ps.templates)):
            for phrase in ps.prompts(n, p):
                table[phrase] = oracle.embed_text(phrase).tolist()
    (tmp_path / "text.json").write_text(json.dumps(table), encoding="utf-8")
    scene = generate_scene(SPEC, 4, ood=True)
    field = oracle.embed_image(scene.image, key="k", semantic=scene.semantic)
    formats.write_embedding_file(tmp_path / "k.sovsemb", field)
    fe = FileEmbedder(tmp_path, tmp_path / "text.json")
    a = OVSTeacher(ps, oracle)(scene.image, key="k", semantic=scene.semantic)
    b = OVSTeacher(ps, fe)(scene.image, key="k")
    # the file embedder stores float32, so allow float32 rounding on confidences
    assert np.mean(a.label == b.label) > 0.999
    assert np.abs(a.confidence - b.confidence).max() < 1e-4
    with pytest.raises(EmbedderError):
        fe.embed_text("unknown phrase")


@settings(max_examples=20, deadline=None)
@given(arrays(np.float64, (3, 3, 4), elements=st.floats(-10, 10)),
       arrays(np.float64, (2, 2, 4), elements=st.floats(-10, 10)))
def test_cost_volume_bounded(img, txt):
    assert np.all(np.abs(cost_volume(img, txt).values) <= 1.0)
