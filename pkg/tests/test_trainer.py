from __future__ import annotations

import math

import numpy as np
import pytest
import torch

from jigsawcm.embed_net import ModelConfig, init_params
from jigsawcm.errors import EmptyCandidatePool, PuzzleDataError, TrainingDiverged
from jigsawcm.puzzle_io import rotate
from jigsawcm.trainer import (Corpus, CutImage, PlateauDecay, TrainConfig, batch_loss, build_corpus,
                              candidate_pool, hbt_loss, hbt_select, l2_reg, loss_and_grads, read_log,
                              sample_triplets, total_loss, train, triplet_loss)

TINY = ModelConfig(piece_size=8, conv_channels=(2, 3, 3, 4), embedding_dim=4, groups=2)


def _t(x):
    return torch.tensor(x, dtype=torch.float64)


def _corpus(rng, n_images=3, s=8):
    imgs = [rng.random((s * 3, s * 4, 3)) for _ in range(n_images)]
    return build_corpus(imgs, s, erosion=0)


def hbt_oracle(za, zp, zn, pe, ne):
    """Exhaustive loop over the interleaved pool with the documented masking and tie rules."""
    b = len(za)
    out = []
    for i in range(b):
        best, best_idx = math.inf, -1
        for c in range(2 * b):
            k, is_neg = divmod(c, 2)
            vec, edge = (zn[k], ne[k]) if is_neg else (zp[k], pe[k])
            if c == 2 * i or edge == pe[i]:
                continue
            d = float(np.sqrt(np.sum((za[i] - vec) ** 2)))
            if d < best:
                best, best_idx = d, c
        out.append(best_idx)
    return np.array(out)


def test_hbt_select_matches_oracle_with_collisions(rng):
    for _ in range(200):
        b = int(rng.integers(2, 17))
        d = int(rng.integers(1, 5))
        za, zp, zn = (rng.normal(size=(b, d)) for _ in range(3))
        # small edge alphabet forces collisions; ties from duplicated vectors
        pe = rng.integers(0, 4, b)
        ne = rng.integers(0, 4, b)
        ne[ne == pe] = (pe[ne == pe] + 1) % 4
        if rng.random() < 0.3:
            zn[0] = zp[-1]
        oracle = hbt_oracle(za, zp, zn, pe, ne)
        if np.any(oracle < 0):
            with pytest.raises(EmptyCandidatePool):
                hbt_select(_t(za), _t(zp), _t(zn), pe, ne)
            continue
        sel = hbt_select(_t(za), _t(zp), _t(zn), pe, ne, chunk=3)
        assert np.array_equal(sel, oracle)
        cand_edges = np.stack([pe, ne], 1).reshape(-1)
        assert np.all(cand_edges[sel] != pe)
        plain = triplet_loss(_t(za), _t(zp), _t(zn)).mean()
        assert hbt_loss(_t(za), _t(zp), _t(zn), sel) >= plain - 1e-12


def test_hbt_select_tie_prefers_lowest_index_positive_first():
    za = _t([[0.0], [0.0], [0.0]])
    zp = _t([[5.0], [1.0], [1.0]])
    zn = _t([[1.0], [1.0], [9.0]])
    sel = hbt_select(za, zp, zn, np.array([10, 11, 12]), np.array([20, 21, 22]))
    # anchor 0: n0 (index 1) ties with p1 (2), n1 (3), p2 (4) -> 1
    # anchor 1: own positive excluded; n0 (1) first among ties
    assert sel.tolist() == [1, 1, 1]


def test_hbt_disabled_keeps_original_negative():
    z = _t(np.zeros((3, 2)))
    assert hbt_select(z, z, z, np.arange(3), np.arange(3) + 5, enabled=False).tolist() == [1, 3, 5]


def test_empty_pool_raises():
    z = _t(np.zeros((2, 1)))
    with pytest.raises(EmptyCandidatePool):
        hbt_select(z, z, z, np.array([7, 7]), np.array([7, 7]))


def test_candidate_pool_interleaves():
    zp, zn = _t([[1.0], [2.0]]), _t([[3.0], [4.0]])
    assert candidate_pool(zp, zn).flatten().tolist() == [1.0, 3.0, 2.0, 4.0]


def test_loss_hand_values():
    a, p, n = _t([[0.0, 0.0]]), _t([[0.5, 0.0]]), _t([[2.0, 0.0]])
    assert triplet_loss(a, p, n).item() == 0.0
    assert triplet_loss(a, _t([[2.0, 0.0]]), _t([[0.5, 0.0]])).item() == pytest.approx(2.5, abs=1e-12)
    assert triplet_loss(a, p, _t([[1.0, 0.0]])).item() == pytest.approx(0.5, abs=1e-12)
    assert l2_reg(_t(np.zeros((4, 3))), _t(np.zeros((4, 3))), _t(np.zeros((4, 3)))).item() == 0.0
    assert l2_reg(_t(np.ones((4, 3))), _t(np.ones((4, 3))), _t(np.ones((4, 3)))).item() == 1.0
    assert abs(l2_reg(_t([[3.0]]), _t([[0.0]]), _t([[0.0]])).item() - math.sqrt(3)) < 1e-12
    z = _t(np.random.default_rng(0).normal(size=(5, 3)))
    assert l2_reg(-2.5 * z, -2.5 * z, -2.5 * z).item() == pytest.approx(2.5 * l2_reg(z, z, z).item(), rel=1e-12)


def test_l2_uses_original_negatives():
    za, zp = _t([[0.0]]).repeat(2, 1), _t([[1.0], [1.0]])
    zn = _t([[0.5], [100.0]])
    sel = hbt_select(za, zp, zn, np.array([1, 2]), np.array([3, 4]))
    total = total_loss(za, zp, zn, sel, 1.0, 1.0)
    expected_reg = math.sqrt((0 + 2 * 1 + 0.25 + 1e4) / 6)
    assert total.item() == pytest.approx(hbt_loss(za, zp, zn, sel).item() + expected_reg, rel=1e-12)


def test_sample_triplets_invariants(rng):
    corpus = _corpus(rng, n_images=6)
    cfg = TrainConfig(batch_size=10, intra_fraction=0.5)
    batch = sample_triplets(corpus, cfg, np.random.default_rng(0))
    assert len(batch) == 10
    assert len(set(batch.image_id[:5].tolist())) == 1
    assert sorted(batch.image_id[5:].tolist()) == sorted(set(batch.image_id[5:].tolist()))
    for t in range(10):
        m = batch.image_id[t]
        im, off = corpus.images[m], corpus.offsets[m]
        a, k = divmod(int(batch.anchor_edge[t] - off), 4)
        b, side_b = divmod(int(batch.positive_edge[t] - off), 4)
        c, side_c = divmod(int(batch.negative_edge[t] - off), 4)
        assert im.neighbors[a, k] == b and side_b == (k + 2) % 4
        assert batch.negative_edge[t] != batch.positive_edge[t]
        assert 0 <= c < len(im.pieces)
        assert np.array_equal(batch.anchor[t], rotate(im.pieces[a], k))
        assert np.array_equal(batch.positive[t], rotate(im.pieces[b], k))
        assert np.array_equal(batch.negative[t], rotate(im.pieces[c], (side_c + 2) % 4))
    again = sample_triplets(corpus, cfg, np.random.default_rng(0))
    assert np.array_equal(again.anchor, batch.anchor)


def test_corpus_validation(rng):
    with pytest.raises(PuzzleDataError):
        Corpus([])
    with pytest.raises(PuzzleDataError):
        Corpus([CutImage(rng.random((1, 4, 4, 3)), 1, 1)])


def test_train_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(batch_size=1)
    with pytest.raises(ValueError):
        TrainConfig(intra_fraction=1.5)
    with pytest.raises(ValueError):
        TrainConfig.from_dict({"nope": 1})
    assert TrainConfig(batch_size=7, intra_fraction=0.5).n_intra == 4


def _fd_check(model, batch, cfg, eps=1e-6):
    _, selected = batch_loss(model, batch, cfg)
    _, grads = loss_and_grads(model, batch, cfg, selected)
    worst = 0.0
    gen = np.random.default_rng(0)
    for name, p in model.named_parameters():
        flat = p.data.view(-1)
        for idx in gen.choice(flat.numel(), size=min(6, flat.numel()), replace=False):
            old = flat[idx].item()
            flat[idx] = old + eps
            up = batch_loss(model, batch, cfg, selected)[0].item()
            flat[idx] = old - eps
            down = batch_loss(model, batch, cfg, selected)[0].item()
            flat[idx] = old
            fd = (up - down) / (2 * eps)
            an = grads[name].reshape(-1)[idx]
            worst = max(worst, abs(fd - an) / max(1e-6, abs(fd), abs(an)))
    return worst


@pytest.mark.parametrize("lam", [0.0, 1.0])
@pytest.mark.parametrize("margin", [1.0, 0.0])
def test_gradients_match_finite_differences(rng, lam, margin):
    model = init_params(TINY, 2).double()
    cfg = TrainConfig(batch_size=6, lam=lam, margin=margin)
    batch = sample_triplets(_corpus(rng), cfg, np.random.default_rng(1))
    assert _fd_check(model, batch, cfg) < 1e-4


def test_lr_zero_leaves_weights(rng):
    corpus = _corpus(rng)
    cfg = TrainConfig(batch_size=4, lr=0.0, iterations_per_epoch=3, epochs=2)
    init = init_params(TINY, 0)
    model, hist = train(corpus, cfg, TINY)
    for p, q in zip(init.parameters(), model.parameters()):
        assert torch.equal(p, q)
    assert [h.epoch for h in hist] == [0, 1]


def test_resume_reproduces_run(rng, tmp_path):
    corpus = _corpus(rng)
    cfg = TrainConfig(batch_size=4, lr=1e-3, iterations_per_epoch=3, epochs=3, seed=5)
    full, hist = train(corpus, cfg, TINY, log_path=tmp_path / "log.jsonl")
    assert [r["epoch"] for r in read_log(tmp_path / "log.jsonl")] == [0, 1, 2]
    saved = {}

    def keep(rec, model, state):
        if rec.epoch == 0:
            saved["model"] = {k: v.clone() for k, v in model.state_dict().items()}
            saved["state"] = state

    cfg1 = TrainConfig(**{**cfg.__dict__, "epochs": 1})
    train(corpus, cfg1, TINY, on_epoch=keep)
    model = init_params(TINY, 0)
    model.load_state_dict(saved["model"])
    resumed, hist2 = train(corpus, cfg, TINY, model=model, start_epoch=1, resume_state=saved["state"])
    assert hist2[0].first_loss == hist[1].first_loss
    assert hist2[-1].mean_loss == hist[-1].mean_loss
    for p, q in zip(full.parameters(), resumed.parameters()):
        assert torch.equal(p, q)


def test_divergence_raises(rng):
    model = init_params(TINY, 0)
    with torch.no_grad():
        model.right.proj.bias.fill_(float("nan"))
    cfg = TrainConfig(batch_size=4, iterations_per_epoch=2, epochs=1)
    with pytest.raises(TrainingDiverged):
        train(_corpus(rng), cfg, TINY, model=model)


def test_plateau_decay():
    p = torch.nn.Parameter(torch.zeros(1))
    opt = torch.optim.Adam([p], lr=1.0)
    sched = PlateauDecay(opt, 0.5, patience=2)
    for v in [3.0, 2.0, 2.0, 2.0]:
        sched.step(v)
    assert opt.param_groups[0]["lr"] == 0.5
    for v in [2.5, 1.0, 1.0]:
        sched.step(v)
    assert opt.param_groups[0]["lr"] == 0.5
    sched.step(1.0)
    assert opt.param_groups[0]["lr"] == 0.25
