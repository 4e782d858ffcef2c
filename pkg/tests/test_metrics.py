import math
import shutil

import numpy as np
import pytest
import scipy.linalg
from hypothesis import given, settings
from hypothesis import strategies as st

from soundit.backends import NUM_ELEMENTS, NUM_SCENES, toy_backends
from soundit.datakit import Manifest, read_manifest
from soundit.encoders import read_image, read_wav, write_png
from soundit.metrics import (EvaluationError, cosine, element_vector, embedding_similarity,
                             evaluate_suite, fid, frechet_distance, perception_distance,
                             pss_element, pss_perception, pss_scene, read_report, scene_hit,
                             top_k_labels, write_report)
from soundit.synthetic import landscape, make_corpus


# --------------------------------------------------------------------------
# naive oracles

def naive_element_vector(labels, c=NUM_ELEMENTS):
    counts = [0] * c
    total = 0
    for v in np.asarray(labels).ravel().tolist():
        if 0 <= v < c:
            counts[v] += 1
            total += 1
    return [x / total if total else 0.0 for x in counts]


def naive_cosine(a, b):
    dot = sum(x * y for x, y in zip(a, b))
    na = math.sqrt(sum(x * x for x in a))
    nb = math.sqrt(sum(y * y for y in b))
    return None if na == 0 or nb == 0 else dot / (na * nb)


def naive_top_k(conf, k):
    return [i for _, i in sorted((-c, i) for i, c in enumerate(conf))[:k]]


def naive_sqrtm_trace(s1, s2):
    return float(np.real(np.trace(scipy.linalg.sqrtm(s1 @ s2))))


# --------------------------------------------------------------------------
# kernels

class TestElement:
    def test_two_class_example(self):
        seg = lambda img: np.array([[0, 0], [1, 1]])
        v = element_vector(None, seg, 4)
        assert v.tolist() == [0.5, 0.5, 0.0, 0.0]

    def test_ignores_out_of_range_labels(self):
        seg = lambda img: np.array([-1, 3, 3, 200])
        assert element_vector(None, seg, 4).tolist() == [0, 0, 0, 1.0]
        assert element_vector(None, lambda img: np.array([-1, 9]), 4).tolist() == [0, 0, 0, 0]

    @settings(max_examples=50, deadline=None)
    @given(seed=st.integers(0, 2**31 - 1))
    def test_matches_counting_oracle(self, seed):
        labels = np.random.default_rng(seed).integers(-5, NUM_ELEMENTS + 5, size=(9, 7))
        v = element_vector(None, lambda img: labels)
        assert v.tolist() == naive_element_vector(labels)
        assert v.min() >= 0
        assert abs(v.sum() - 1) <= 1e-6

    def test_identical_images_score_one(self):
        seg = toy_backends().segmenter
        img = landscape(1)
        assert pss_element([(img, img)], seg) == pytest.approx(1.0, abs=1e-12)

    def test_disjoint_labels_score_zero(self):
        maps = {0: np.zeros((2, 2), int), 1: np.ones((2, 2), int)}
        assert pss_element([(0, 1)], lambda i: maps[i]) == 0.0

    def test_empty_maps_are_skipped_or_raise(self):
        maps = {0: np.zeros((2, 2), int), 1: -np.ones((2, 2), int)}
        assert pss_element([(0, 0), (0, 1)], lambda i: maps[i]) == 1.0
        with pytest.raises(EvaluationError):
            pss_element([(1, 1)], lambda i: maps[i])
        with pytest.raises(ValueError):
            pss_element([], lambda i: maps[i])

    def test_cosine_zero_vector(self):
        assert cosine(np.zeros(3), np.ones(3)) is None


class TestScene:
    def test_top_one_hit_and_miss(self):
        a, b = np.eye(NUM_SCENES)[3], np.eye(NUM_SCENES)[4]
        assert scene_hit(a, a, 1) and not scene_hit(a, b, 1)

    def test_top_five_overlap(self):
        real = np.zeros(NUM_SCENES)
        real[[1, 2, 3, 4, 5]] = [5, 4, 3, 2, 1]
        gen = np.zeros(NUM_SCENES)
        gen[[5, 10, 11, 12, 13]] = [0.5, 5, 4, 3, 2]
        assert scene_hit(real, gen, 5)
        assert not scene_hit(real, gen, 1)

    def test_ties_go_to_lower_index(self):
        conf = np.array([0.1, 0.3, 0.3, 0.3])
        assert top_k_labels(conf, 2) == [1, 2]
        assert top_k_labels(np.full(6, 0.2), 5) == [0, 1, 2, 3, 4]

    @settings(max_examples=50, deadline=None)
    @given(seed=st.integers(0, 2**31 - 1), k=st.sampled_from([1, 5]))
    def test_top_k_matches_sort_oracle(self, seed, k):
        conf = np.random.default_rng(seed).integers(0, 6, size=40) / 6.0
        assert top_k_labels(conf, k) == naive_top_k(conf.tolist(), k)

    def test_rejects_other_k(self):
        with pytest.raises(ValueError):
            pss_scene([(0, 0)], lambda i: np.ones(3), 3)


class TestPerception:
    def test_l1_example(self):
        assert perception_distance([0.1, 0.5, 0.9, 0, 0, 0], [0.2, 0.5, 0.7, 0, 0, 1]) == pytest.approx(1.3)

    def test_identical_pairs_are_zero(self):
        img = landscape(4)
        assert pss_perception([(img, img)], toy_backends().perceiver) == 0.0


class TestFrechet:
    @pytest.mark.parametrize("m1,s1,m2,s2", [(0.0, 1.0, 0.0, 1.0), (1.0, 2.0, -0.5, 0.5),
                                             (3.0, 0.1, 3.0, 4.0), (-2.0, 1e-3, 2.0, 1e-3)])
    def test_one_dimensional_closed_form(self, m1, s1, m2, s2):
        expected = (m1 - m2) ** 2 + (s1 - s2) ** 2
        got = frechet_distance([m1], [[s1 ** 2]], [m2], [[s2 ** 2]])
        assert got == pytest.approx(expected, rel=1e-6, abs=1e-12)

    def test_mean_shift_with_identity_covariance(self):
        d = np.array([1.0, -2.0, 0.5, 3.0])
        assert frechet_distance(d, np.eye(4), np.zeros(4), np.eye(4)) == pytest.approx(d @ d, rel=1e-6)

    def test_identical_sets(self):
        x = np.random.default_rng(0).standard_normal((40, 6))
        assert fid(x, x) < 1e-6

    @settings(max_examples=25, deadline=None)
    @given(seed=st.integers(0, 2**31 - 1), dim=st.integers(1, 6))
    def test_matches_scipy_sqrtm(self, seed, dim):
        rng = np.random.default_rng(seed)
        a, b = rng.standard_normal((dim, dim)), rng.standard_normal((dim, dim))
        s1, s2 = a @ a.T + 0.1 * np.eye(dim), b @ b.T + 0.1 * np.eye(dim)
        m1, m2 = rng.standard_normal(dim), rng.standard_normal(dim)
        expected = (m1 - m2) @ (m1 - m2) + np.trace(s1) + np.trace(s2) - 2 * naive_sqrtm_trace(s1, s2)
        assert frechet_distance(m1, s1, m2, s2) == pytest.approx(expected, rel=1e-6, abs=1e-9)

    def test_rank_deficient_covariances(self):
        rng = np.random.default_rng(1)
        a, b = rng.standard_normal((3, 8)), rng.standard_normal((3, 8))
        assert math.isfinite(fid(a, b)) and fid(a, b) >= 0

    def test_errors(self):
        with pytest.raises(ValueError):
            fid(np.zeros((3, 2)), np.zeros((3, 4)))
        with pytest.raises(ValueError):
            fid(np.zeros((1, 2)), np.zeros((3, 2)))


class TestSimilarity:
    def test_signed_remap(self):
        assert embedding_similarity([1, 0], [1, 0]) == 1.0
        assert embedding_similarity([1, 0], [-1, 0]) == 0.0
        assert embedding_similarity([1, 0], [0, 1]) == 0.5
        assert embedding_similarity([1, 0], [0, 1], signed=False) == 0.0

    def test_zero_embedding_raises(self):
        with pytest.raises(EvaluationError):
            embedding_similarity([0, 0], [1, 0])


# --------------------------------------------------------------------------
# suite

@pytest.fixture(scope="module")
def corpus(tmp_path_factory):
    root = tmp_path_factory.mktemp("metrics")
    manifest_path = make_corpus(root / "data", n_pairs=50, seconds=1.0, seed=2)
    manifest = read_manifest(manifest_path)
    gen = root / "generated"
    gen.mkdir()
    for i, rec in enumerate(manifest.records):
        write_png(gen / f"{rec.pair_id}.png", landscape((i * 7) % 5, 100 + i, 32, seed=9))
    return manifest, gen


def naive_suite(manifest, gen_dir, backends):
    """Reference means computed with plain loops over the naive kernels."""
    element, scene1, scene5, perception, ais, iis = [], [], [], [], [], []
    feats_r, feats_g = [], []
    je = backends.joint_embedder
    for rec in manifest.records:
        real = read_image(manifest.resolve(rec.image_path))
        gen = read_image(gen_dir / f"{rec.pair_id}.png")
        c = naive_cosine(naive_element_vector(backends.segmenter(real)),
                         naive_element_vector(backends.segmenter(gen)))
        if c is not None:
            element.append(c)
        cr, cg = backends.scene_classifier(real).tolist(), backends.scene_classifier(gen).tolist()
        scene1.append(float(bool(set(naive_top_k(cr, 1)) & set(naive_top_k(cg, 1)))))
        scene5.append(float(bool(set(naive_top_k(cr, 5)) & set(naive_top_k(cg, 5)))))
        pr, pg = backends.perceiver(real).tolist(), backends.perceiver(gen).tolist()
        perception.append(sum(abs(a - b) for a, b in zip(pr, pg)))
        wave, sr = read_wav(manifest.resolve(rec.audio_path))
        wave = wave[int(round(rec.clip_start * sr)):int(round(rec.clip_end * sr))]
        ais.append((1 + naive_cosine(je.embed_audio(wave, sr).tolist(), je.embed_image(gen).tolist())) / 2)
        iis.append((1 + naive_cosine(je.embed_image(real).tolist(), je.embed_image(gen).tolist())) / 2)
        feats_r.append(backends.feature_extractor(real))
        feats_g.append(backends.feature_extractor(gen))
    mean = lambda xs: sum(xs) / len(xs)
    return {"pss_element": mean(element), "pss_scene_top1": mean(scene1), "pss_scene_top5": mean(scene5),
            "pss_perception": mean(perception), "ais": mean(ais), "iis": mean(iis),
            "feats": (np.array(feats_r), np.array(feats_g))}


class TestSuite:
    def test_matches_naive_loops(self, corpus):
        manifest, gen = corpus
        backends = toy_backends()
        report = evaluate_suite(manifest, gen, backends)
        ref = naive_suite(manifest, gen, backends)
        summary = report.summary()
        assert summary["n"] == summary["n_evaluated"] == 50
        for key in ("pss_element", "pss_scene_top1", "pss_scene_top5", "pss_perception", "ais", "iis"):
            assert abs(summary[key] - ref[key]) <= 1e-9, key
        r, g = ref["feats"]
        mu_r, mu_g = r.mean(0), g.mean(0)
        cov_r, cov_g = np.cov(r, rowvar=False), np.cov(g, rowvar=False)
        # scipy's sqrtm on the (non-symmetric) product is an independent route; the
        # colour histogram sums to one, so both covariances are singular and the
        # agreement is limited by their conditioning
        expected = float((mu_r - mu_g) @ (mu_r - mu_g) + np.trace(cov_r) + np.trace(cov_g)
                         - 2 * naive_sqrtm_trace(cov_r, cov_g))
        assert report.fid == pytest.approx(expected, rel=1e-6)

    def test_self_evaluation(self, corpus, tmp_path):
        manifest, _ = corpus
        for rec in manifest.records:
            shutil.copy(manifest.resolve(rec.image_path), tmp_path / f"{rec.pair_id}.png")
        s = evaluate_suite(manifest, tmp_path, toy_backends()).summary()
        assert s["pss_element"] == pytest.approx(1.0, abs=1e-12)
        assert s["pss_scene_top1"] == 1.0 and s["pss_scene_top5"] == 1.0
        assert s["pss_perception"] == 0.0
        assert s["fid"] < 1e-6
        assert s["iis"] == pytest.approx(1.0, abs=1e-12)

    def test_permutation_invariance(self, corpus):
        manifest, gen = corpus
        order = np.random.default_rng(0).permutation(len(manifest))
        shuffled = Manifest([manifest.records[i] for i in order], manifest.config_hash, manifest.root)
        a = evaluate_suite(manifest, gen, toy_backends()).summary()
        b = evaluate_suite(shuffled, gen, toy_backends()).summary()
        for key, val in a.items():
            rel = 1e-6 if key == "fid" else 1e-12
            assert b[key] == pytest.approx(val, rel=rel, abs=1e-12), key

    def test_threaded_equals_serial(self, corpus):
        manifest, gen = corpus
        a = evaluate_suite(manifest, gen, toy_backends(), workers=1)
        b = evaluate_suite(manifest, gen, toy_backends(), workers=4)
        assert a.summary() == b.summary()

    def test_missing_generated_images_are_reported(self, corpus, tmp_path):
        manifest, gen = corpus
        for rec in manifest.records[:3]:
            shutil.copy(gen / f"{rec.pair_id}.png", tmp_path / f"{rec.pair_id}.png")
        report = evaluate_suite(manifest, tmp_path, toy_backends(), k_list=(1,))
        assert len(report.rows) == 3 and len(report.failures) == 47
        assert report.pss_scene_top5 is None
        assert all(f["error"] == "missing generated image" for f in report.failures)

    def test_single_pair_has_no_fid(self, corpus, tmp_path):
        manifest, gen = corpus
        rec = manifest.records[0]
        shutil.copy(gen / f"{rec.pair_id}.png", tmp_path / f"{rec.pair_id}.png")
        report = evaluate_suite(Manifest([rec], "x", manifest.root), tmp_path, toy_backends())
        assert report.fid is None and report.pss_perception is not None

    def test_empty_manifest_is_an_error(self, tmp_path):
        with pytest.raises(ValueError):
            evaluate_suite(Manifest([], "x", tmp_path), tmp_path, toy_backends())

    def test_report_roundtrip(self, corpus, tmp_path):
        manifest, gen = corpus
        report = evaluate_suite(manifest, gen, toy_backends())
        csv_path = write_report(report, tmp_path / "report.json")
        back = read_report(tmp_path / "report.json")
        assert back.summary() == report.summary()
        lines = csv_path.read_text().splitlines()
        assert lines[0] == "pair_id,element,scene_top1,scene_top5,perception,ais,iis"
        assert len(lines) == 51


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 2**31 - 1))
def test_random_backends_stay_in_range(seed):
    rng = np.random.default_rng(seed)
    labels = {i: rng.integers(-3, NUM_ELEMENTS + 3, size=(6, 6)) for i in range(8)}
    confs = {i: rng.dirichlet(np.ones(NUM_SCENES)) for i in range(8)}
    percs = {i: rng.uniform(size=6) for i in range(8)}
    pairs = [(i, (i + 1) % 8) for i in range(8)]
    assert 0 <= pss_element(pairs, lambda i: labels[i]) <= 1 + 1e-12
    for k in (1, 5):
        assert 0 <= pss_scene(pairs, lambda i: confs[i], k) <= 1
    assert 0 <= pss_perception(pairs, lambda i: percs[i]) <= 6
