"""PLDA recovery from a known generative model, LLR oracles, EER against an
exhaustive brute-force sweep, and embedding extraction contracts."""

import numpy as np
import pytest

from rateinv.backend import (
    CosineBackend,
    EmbeddingSet,
    PldaModel,
    ScoredTrial,
    _PldaScorer,
    compute_eer,
    eer_from_scored,
    extract_embeddings,
    format_three_rate_table,
    format_sweep_table,
    rate_sweep_report,
    score_trial,
    score_trials,
    train_plda,
)
from rateinv.corpus import Trial, make_record
from rateinv.errors import DataError
from rateinv.model import ModelConfig, init_params


def brute_force_eer(target_scores, impostor_scores):
    """Independent O(n*m) sweep: count errors at every candidate threshold,
    then interpolate the crossing of the FAR/FRR polylines."""
    tgt = np.asarray(target_scores, dtype=np.float64)
    imp = np.asarray(impostor_scores, dtype=np.float64)
    thresholds = [min(tgt.min(), imp.min()) - 1.0]
    thresholds += sorted(set(np.concatenate([tgt, imp]).tolist()))
    thresholds += [max(tgt.max(), imp.max()) + 1.0]
    points = []
    for th in thresholds:
        far = sum(1 for s in imp if s >= th) / imp.size
        frr = sum(1 for s in tgt if s < th) / tgt.size
        points.append((far, frr))
    for i, (far, frr) in enumerate(points):
        if frr - far >= 0.0:
            if frr - far == 0.0:
                return (far + frr) / 2.0
            a1, r1 = points[i - 1]
            lam = (a1 - r1) / ((frr - r1) - (far - a1))
            return a1 + lam * (far - a1)
    raise AssertionError("no crossing found")


class TestEer:
    def test_perfect_separation(self):
        eer, _ = compute_eer([0.9, 0.8], [0.1, 0.2])
        assert eer == 0.0

    def test_interleaved_half(self):
        eer, _ = compute_eer([0.8, 0.2], [0.7, 0.3])
        assert eer == pytest.approx(0.5, abs=1e-12)

    def test_fully_inverted(self):
        eer, _ = compute_eer([0.1, 0.2], [0.8, 0.9])
        assert eer == pytest.approx(1.0, abs=1e-12)

    def test_matches_bruteforce_on_random_sets(self):
        rng = np.random.default_rng(0)
        for _ in range(400):
            nt = int(rng.integers(1, 200))
            ni = int(rng.integers(1, 200))
            tgt = rng.normal(rng.uniform(-1, 2), rng.uniform(0.2, 2), nt)
            imp = rng.normal(0, 1, ni)
            fast, _ = compute_eer(tgt, imp)
            assert fast == pytest.approx(brute_force_eer(tgt, imp), abs=1e-9)

    def test_ties_and_duplicates(self):
        rng = np.random.default_rng(1)
        for _ in range(200):
            nt = int(rng.integers(1, 50))
            ni = int(rng.integers(1, 50))
            tgt = rng.integers(0, 5, nt).astype(float)
            imp = rng.integers(0, 5, ni).astype(float)
            fast, _ = compute_eer(tgt, imp)
            assert fast == pytest.approx(brute_force_eer(tgt, imp), abs=1e-9)

    def test_invariant_under_monotone_transform(self):
        rng = np.random.default_rng(2)
        tgt = rng.normal(1, 1, 80)
        imp = rng.normal(0, 1, 120)
        base, _ = compute_eer(tgt, imp)
        for fn in (np.exp, np.tanh, lambda x: 3 * x + 7, lambda x: x**3):
            transformed, _ = compute_eer(fn(tgt), fn(imp))
            assert transformed == pytest.approx(base, abs=1e-12)

    def test_label_swap_maps_to_complement(self):
        rng = np.random.default_rng(3)
        for _ in range(50):
            tgt = rng.normal(0.5, 1, int(rng.integers(2, 60)))
            imp = rng.normal(0, 1, int(rng.integers(2, 60)))
            e, _ = compute_eer(tgt, imp)
            e_swapped, _ = compute_eer(imp, tgt)
            assert e_swapped == pytest.approx(1.0 - e, abs=1e-12)

    def test_threshold_at_crossing(self):
        tgt = [0.9, 0.8, 0.4]
        imp = [0.1, 0.3, 0.6]
        eer, thr = compute_eer(tgt, imp)
        assert eer == pytest.approx(1 / 3, abs=1e-12)
        far = np.mean([s >= thr for s in imp])
        frr = np.mean([s < thr for s in tgt])
        assert far == frr == pytest.approx(eer, abs=1e-12)

    def test_missing_class_raises(self):
        with pytest.raises(DataError):
            compute_eer([], [0.1])


def sample_groups(rng, mu, B, W, n_speakers, n_per):
    lb = np.linalg.cholesky(B)
    lw = np.linalg.cholesky(W)
    groups = {}
    for s in range(n_speakers):
        y = mu + lb @ rng.standard_normal(mu.size)
        groups[f"s{s}"] = [y + lw @ rng.standard_normal(mu.size) for _ in range(n_per)]
    return groups


class TestPlda:
    def test_generative_recovery(self):
        rng = np.random.default_rng(42)
        d = 8
        a = rng.standard_normal((d, d)) * 0.4
        b_true = a @ a.T + 0.5 * np.eye(d)
        c = rng.standard_normal((d, d)) * 0.3
        w_true = c @ c.T + 0.3 * np.eye(d)
        mu_true = rng.standard_normal(d)
        groups = sample_groups(rng, mu_true, b_true, w_true, 500, 10)
        backend = train_plda(groups, n_iter=10, length_norm=False)
        rel_b = np.linalg.norm(backend.model.between - b_true) / np.linalg.norm(b_true)
        rel_w = np.linalg.norm(backend.model.within - w_true) / np.linalg.norm(w_true)
        assert rel_b < 0.15
        assert rel_w < 0.15

    def test_em_loglik_nondecreasing(self):
        rng = np.random.default_rng(7)
        d = 6
        groups = sample_groups(rng, np.zeros(d), np.eye(d), 0.5 * np.eye(d), 60, 6)
        backend = train_plda(groups, n_iter=12, length_norm=False)
        hist = backend.loglik_history
        assert len(hist) == 12
        for prev, cur in zip(hist, hist[1:]):
            assert cur >= prev - 1e-6 * abs(prev)

    def test_uninformative_speakers_flat_scores(self):
        """All speakers drawn from one distribution: B collapses toward zero
        and the same/different score gap goes with it."""
        rng = np.random.default_rng(8)
        d = 4
        groups = sample_groups(rng, np.zeros(d), 1e-6 * np.eye(d), np.eye(d), 80, 6)
        backend = train_plda(groups, n_iter=15, length_norm=False)
        x = backend.preprocess(rng.standard_normal(d))
        y = backend.preprocess(rng.standard_normal(d))
        same = backend.score(x, x)
        diff = backend.score(x, y)
        assert abs(same - diff) < 0.5

    def test_llr_matches_direct_gaussian_marginals_2d(self):
        from scipy.stats import multivariate_normal

        b = np.array([[1.0, 0.3], [0.3, 0.8]])
        w = np.array([[0.5, -0.1], [-0.1, 0.4]])
        mu = np.array([0.2, -0.4])
        scorer = _PldaScorer(PldaModel(mu, b, w))
        rng = np.random.default_rng(9)
        tot = b + w
        joint = np.block([[tot, b], [b, tot]])
        for _ in range(20):
            e = rng.standard_normal(2)
            t = rng.standard_normal(2)
            log_same = multivariate_normal(np.concatenate([mu, mu]), joint).logpdf(
                np.concatenate([e, t])
            )
            log_diff = (
                multivariate_normal(mu, tot).logpdf(e)
                + multivariate_normal(mu, tot).logpdf(t)
            )
            assert scorer.llr(e, t) == pytest.approx(log_same - log_diff, abs=1e-8)

    def test_llr_matches_latent_quadrature_2d(self):
        from scipy import integrate
        from scipy.stats import multivariate_normal

        b = np.array([[0.9, 0.2], [0.2, 0.7]])
        w = np.array([[0.4, 0.05], [0.05, 0.3]])
        mu = np.array([0.0, 0.1])
        scorer = _PldaScorer(PldaModel(mu, b, w))
        e = np.array([0.6, -0.3])
        t = np.array([0.1, 0.4])
        p_y = multivariate_normal(mu, b)

        def integrand(y1, y2):
            y = np.array([y1, y2])
            return (
                p_y.pdf(y)
                * multivariate_normal(y, w).pdf(e)
                * multivariate_normal(y, w).pdf(t)
            )

        p_same, _ = integrate.dblquad(integrand, -6, 6, -6, 6, epsabs=1e-12)
        tot = b + w
        log_diff = (
            multivariate_normal(mu, tot).logpdf(e) + multivariate_normal(mu, tot).logpdf(t)
        )
        assert scorer.llr(e, t) == pytest.approx(np.log(p_same) - log_diff, abs=1e-8)

    def test_llr_symmetric(self):
        rng = np.random.default_rng(10)
        d = 5
        groups = sample_groups(rng, np.zeros(d), np.eye(d), 0.5 * np.eye(d), 30, 5)
        backend = train_plda(groups, n_iter=5)
        for _ in range(20):
            e = rng.standard_normal(d)
            t = rng.standard_normal(d)
            assert backend.score(e, t) == pytest.approx(backend.score(t, e), abs=1e-10)

    def test_identical_beats_orthogonal(self):
        rng = np.random.default_rng(11)
        d = 4
        groups = sample_groups(rng, np.zeros(d), np.eye(d), 0.3 * np.eye(d), 50, 6)
        backend = train_plda(groups, n_iter=8, length_norm=False)
        e = np.array([1.0, 0.0, 0.0, 0.0]) + backend.center
        t = np.array([0.0, 1.0, 0.0, 0.0]) + backend.center
        assert backend.score(e, e) > backend.score(e, t)

    def test_needs_two_speakers(self):
        with pytest.raises(DataError):
            train_plda({"only": [np.zeros(3), np.ones(3)]})


class TestScoring:
    def test_cosine_backend_identity(self):
        be = CosineBackend()
        v = np.array([0.3, -0.4, 1.2])
        assert score_trial(be, v, v) == pytest.approx(1.0, abs=1e-12)

    def test_cosine_dimension_mismatch(self):
        with pytest.raises(DataError):
            score_trial(CosineBackend(), np.zeros(3), np.zeros(4))

    def test_score_trials_and_eer(self):
        emb = EmbeddingSet({
            "a1": np.array([1.0, 0.0]), "a2": np.array([0.9, 0.1]),
            "b1": np.array([0.0, 1.0]), "b2": np.array([0.1, 0.9]),
        })
        trials = [
            Trial("a1", "a2", True), Trial("b1", "b2", True),
            Trial("a1", "b2", False), Trial("b1", "a2", False),
        ]
        scored = score_trials(CosineBackend(), trials, emb)
        eer, _ = eer_from_scored(scored)
        assert eer == 0.0

    def test_missing_embedding_raises(self):
        emb = EmbeddingSet({"a": np.zeros(2)})
        with pytest.raises(DataError):
            score_trials(CosineBackend(), [Trial("a", "zz", False)], emb)


class TestExtraction:
    def test_shapes_and_determinism_and_skips(self):
        cfg = ModelConfig(n_speakers=3, feat_dim=8, channels=5, embed_dim=12, map_dim=6)
        params = init_params(cfg, seed=0)
        rng = np.random.default_rng(0)
        feats = {
            "u1": rng.standard_normal((40, 8)),
            "u2": rng.standard_normal((40, 8)),
            "short": rng.standard_normal((10, 8)),
        }
        feats["u2"] = feats["u1"].copy()
        records = [
            make_record("u1", "s1", "u1.wav", 1.0),
            make_record("u2", "s2", "u2.wav", 1.0),
            make_record("short", "s1", "short.wav", 1.0),
            make_record("missing", "s2", "missing.wav", 1.0),
        ]
        emb, skipped = extract_embeddings(params, records, feats)
        assert set(emb.vectors) == {"u1", "u2"}
        assert emb["u1"].shape == (12,)
        np.testing.assert_array_equal(emb["u1"], emb["u2"])
        assert len(skipped) == 2

    def test_sigma_zero_returns_phi(self):
        cfg = ModelConfig(n_speakers=3, feat_dim=8, channels=5, embed_dim=12,
                          map_dim=6, decomposition="identity")
        params = init_params(cfg, seed=1)
        rng = np.random.default_rng(2)
        feats = {"u1": rng.standard_normal((30, 8))}
        records = [make_record("u1", "s1", "u1.wav", 1.0)]
        emb, _ = extract_embeddings(params, records, feats)
        from rateinv.model import encode

        np.testing.assert_array_equal(emb["u1"], encode(feats["u1"], params))


class TestReports:
    def test_sweep_table_shape(self, tmp_path):
        eers = {
            "baseline": {0.5: 0.21, 1.0: 0.08, 2.0: 0.25},
            "fd-al": {0.5: 0.12, 1.0: 0.07, 2.0: 0.13},
        }
        table = rate_sweep_report(eers, tmp_path / "t.txt", tmp_path / "p.png")
        assert (tmp_path / "t.txt").exists()
        assert (tmp_path / "p.png").exists()
        lines = table.strip().splitlines()
        assert len(lines) == 4  # title + header + two systems
        assert "0.5" in lines[1] and "2" in lines[1]

    def test_sixteen_alpha_columns(self):
        alphas = [round(a / 10, 1) for a in range(5, 21)]
        eers = {"fd-al": {a: 0.1 for a in alphas}}
        table = format_sweep_table(eers)
        header = table.splitlines()[1].split()
        assert len(header) == 17  # system + 16 scales

    def test_three_rate_table_average(self):
        table = format_three_rate_table(
            {"fd-al": {"slow": 0.01, "normal": 0.0063, "fast": 0.0238}}
        )
        lines = table.strip().splitlines()
        assert "average" in lines[1]
        cells = lines[2].split()
        assert cells[-1] == f"{100 * np.mean([0.01, 0.0063, 0.0238]):.2f}"
