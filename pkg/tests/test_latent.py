import math

import numpy as np
import pytest
import torch
from scipy.stats import norm

from stochpsr.core import BoundingBox, OrientedPointCloud, RunConfig
from stochpsr.errors import DegenerateInput, InvalidConfig
from stochpsr.latent import CorpusModel, LatentTable, cloud_nll, infer_code, nll_terms, train_corpus
from stochpsr.queries import GaussianFieldModel, load_implicit, save_implicit
from stochpsr.training import evaluate_losses


def arc(start, n=16, span=math.pi / 2):
    t = start + np.linspace(0, span, n)
    p = np.stack([np.cos(t), np.sin(t)], 1)
    return OrientedPointCloud(p, p)


# four quarter arcs plus a duplicate of the first
SCANS = [arc(k * math.pi / 2) for k in range(4)] + [arc(0.0)]
CORPUS_CFG = RunConfig(d=2, hidden_width=32, depth=4, epochs=20, samples_per_epoch=4000, learning_rate=1e-3,
                       latent_width=8)
TINY_CFG = CORPUS_CFG.replace(hidden_width=8, depth=3, epochs=1, samples_per_epoch=1024)


@pytest.fixture(scope="module")
def corpus():
    torch.set_num_threads(1)
    return train_corpus(SCANS, CORPUS_CFG)


def constant_model(mean, var):
    box = BoundingBox(np.full(2, -2.0), np.full(2, 2.0))
    return GaussianFieldModel(lambda x: np.full(len(x), mean), lambda a, b: np.full(len(a), var), box)


class TestNLL:
    def test_standard_normal(self):
        assert abs(cloud_nll(constant_model(0.0, 1.0), arc(0.0)) - 0.5 * math.log(2 * math.pi)) < 1e-15
        assert abs(0.5 * math.log(2 * math.pi) - 0.9189385332046727) < 1e-15

    def test_mean_at_one_sigma_adds_half(self):
        a = cloud_nll(constant_model(0.0, 0.3), arc(0.0))
        b = cloud_nll(constant_model(math.sqrt(0.3), 0.3), arc(0.0))
        assert abs(b - a - 0.5) < 1e-14

    def test_matches_log_density(self):
        rng = np.random.default_rng(0)
        m, v = rng.normal(size=50), rng.uniform(0.1, 2.0, 50)
        assert np.allclose(nll_terms(m, v), -norm.logpdf(0.0, loc=m, scale=np.sqrt(v)), rtol=1e-13, atol=0)

    def test_decomposition(self):
        rng = np.random.default_rng(1)
        pts = rng.uniform(-1, 1, (40, 2))
        box = BoundingBox(np.full(2, -2.0), np.full(2, 2.0))
        model = GaussianFieldModel(lambda x: x[:, 0] ** 2 - 0.2, lambda a, b: 0.1 + np.sum(a * b, axis=1) ** 2, box)
        m, k = model.mean(pts), model.variance(pts)
        direct = sum(0.5 * (mi * mi / ki + math.log(ki) + math.log(2 * math.pi)) for mi, ki in zip(m, k)) / len(pts)
        assert abs(cloud_nll(model, pts) - direct) < 1e-13


class TestTable:
    def test_initial(self):
        t = LatentTable.initial(5, 16, 0.01, seed=3)
        assert t.codes.shape == (5, 16) and t.n == 5 and t.width == 16
        assert torch.equal(t.codes, LatentTable.initial(5, 16, 0.01, seed=3).codes)
        assert 0.005 < float(t.codes.std()) < 0.02

    def test_rejects(self):
        with pytest.raises(InvalidConfig):
            LatentTable(torch.zeros(3, dtype=torch.float64))
        with pytest.raises(InvalidConfig):
            LatentTable(torch.full((2, 2), float("nan"), dtype=torch.float64))


class TestCorpusTraining:
    def test_one_code_per_scan(self, corpus):
        assert corpus.table.n == len(SCANS) and corpus.table.width == 8
        assert torch.isfinite(corpus.table.codes).all()

    def test_duplicate_scans_get_nearby_codes(self, corpus):
        Z = corpus.table.codes.numpy()
        D = np.linalg.norm(Z[:, None] - Z[None], axis=2)
        others = [D[i, j] for i in range(5) for j in range(i + 1, 5) if (i, j) != (0, 4)]
        assert D[0, 4] < np.median(others)

    def test_codes_move(self, corpus):
        init = LatentTable.initial(len(SCANS), 8, CORPUS_CFG.code_init_sigma, CORPUS_CFG.seed + 1)
        assert not torch.equal(init.codes, corpus.table.codes)

    def test_deterministic(self):
        a = train_corpus(SCANS[:2], TINY_CFG)
        b = train_corpus(SCANS[:2], TINY_CFG)
        assert torch.equal(a.table.codes, b.table.codes)
        assert all(torch.equal(p, q) for p, q in zip(a.mean_net.parameters(), b.mean_net.parameters()))

    def test_rejects(self):
        with pytest.raises(DegenerateInput):
            train_corpus([], TINY_CFG)
        with pytest.raises(InvalidConfig):
            train_corpus(SCANS[:2], TINY_CFG.replace(latent_width=0))

    def test_checkpoint_round_trip(self, corpus, tmp_path):
        save_implicit(corpus.implicit_for(1), tmp_path / "c.nssi")
        loaded = load_implicit(tmp_path / "c.nssi")
        back = CorpusModel.from_implicit(loaded)
        assert torch.equal(back.table.codes, corpus.table.codes)
        x = np.random.default_rng(0).uniform(-1, 1, (20, 2))
        assert np.array_equal(loaded.mean(x), corpus.implicit_for(1).mean(x))
        assert np.array_equal(back.implicit_for_code(back.table[3]).variance(x), corpus.implicit_for(3).variance(x))


class TestInference:
    def test_frozen_weights_bit_identical(self, corpus):
        before = [p.detach().clone() for p in list(corpus.mean_net.parameters()) + list(corpus.cov_net.parameters())]
        infer_code(corpus, SCANS[1], iters=5)
        after = list(corpus.mean_net.parameters()) + list(corpus.cov_net.parameters())
        assert all(torch.equal(a, b) for a, b in zip(before, after))

    def test_zero_iters_returns_init(self, corpus):
        code, _ = infer_code(corpus, SCANS[1], iters=0)
        gen = torch.Generator().manual_seed(CORPUS_CFG.seed)
        expected = CORPUS_CFG.code_init_sigma * torch.randn(1, 8, generator=gen, dtype=torch.float64)[0]
        assert torch.equal(code, expected)

    def test_deterministic(self, corpus):
        a, _ = infer_code(corpus, SCANS[2], iters=5)
        b, _ = infer_code(corpus, SCANS[2], iters=5)
        assert torch.equal(a, b)

    def test_recovers_training_scan_loss(self, corpus):
        for k in (0, 2):
            reference = evaluate_losses(corpus.implicit_for(k), seed=5)["total"]
            _, imp = infer_code(corpus, SCANS[k], iters=100)
            assert abs(evaluate_losses(imp, seed=5)["total"] - reference) < 0.1 * reference

    def test_refine_leaves_corpus_untouched(self, corpus):
        before = [p.detach().clone() for p in corpus.mean_net.parameters()]
        _, imp = infer_code(corpus, SCANS[3], iters=2, finetune_epochs=1)
        assert all(torch.equal(a, b) for a, b in zip(before, corpus.mean_net.parameters()))
        assert not all(torch.equal(a, b) for a, b in zip(before, imp.mean_net.parameters()))

    def test_negative_iters(self, corpus):
        with pytest.raises(InvalidConfig):
            infer_code(corpus, SCANS[0], iters=-1)
