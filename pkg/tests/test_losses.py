import math

import numpy as np
import pytest
import torch

from helpers import check_gradients, random_unit_rows

from microau.losses import (
    ContrastiveBatch,
    NonPositiveTemperatureError,
    ZeroNormRowError,
    contrastive_from_similarity,
    miauc_label_matrix,
    miauc_loss,
    multitask_loss,
    origcl_loss,
    similarity_matrix,
    total_loss,
)


def _batch(rng, n_aus=2, b=4, dim=8, labels=None):
    visual = random_unit_rows(rng, n_aus, b, dim)
    text = random_unit_rows(rng, n_aus, b, dim)
    if labels is None:
        labels = torch.from_numpy(rng.integers(0, 2, (n_aus, b)))
    return ContrastiveBatch(visual=visual, text=text, labels=labels)


def test_similarity_identity_rows():
    eye = torch.eye(4)
    assert torch.allclose(similarity_matrix(eye, eye), torch.eye(4))


def test_similarity_parallel_rows():
    row = torch.tensor([[0.6, 0.8]])
    mat = similarity_matrix(row.expand(3, 2), row.expand(3, 2))
    assert torch.allclose(mat, torch.ones(3, 3), atol=1e-6)


def test_similarity_matches_pairwise_oracle():
    rng = np.random.default_rng(0)
    for _ in range(1000):
        v = rng.standard_normal((3, 5))
        t = rng.standard_normal((3, 5))
        got = similarity_matrix(torch.from_numpy(v), torch.from_numpy(t)).numpy()
        for i in range(3):
            for j in range(3):
                expected = float(
                    np.dot(v[i], t[j]) / (np.linalg.norm(v[i]) * np.linalg.norm(t[j]))
                )
                assert abs(got[i, j] - expected) < 1e-6


def test_similarity_zero_row():
    with pytest.raises(ZeroNormRowError):
        similarity_matrix(torch.zeros(2, 3), torch.ones(2, 3))


def test_label_matrix_pattern():
    lm = miauc_label_matrix(torch.tensor([1, 0, 1, 0]))
    expected = torch.tensor(
        [[1, 0, 1, 0], [0, 1, 0, 1], [1, 0, 1, 0], [0, 1, 0, 1]], dtype=lm.dtype
    )
    assert torch.equal(lm, expected)


def test_label_matrix_degenerate_and_diagonal():
    assert torch.equal(miauc_label_matrix(torch.ones(5)), torch.ones(5, 5))
    rng = np.random.default_rng(1)
    for _ in range(1000):
        b = int(rng.integers(1, 9))
        labels = torch.from_numpy(rng.integers(0, 2, b))
        lm = miauc_label_matrix(labels)
        l = labels.numpy()
        expected = (l[:, None] == l[None, :]).astype(float)
        assert np.array_equal(lm.numpy(), expected)
        assert np.all(np.diag(lm.numpy()) == 1)


def test_perfect_alignment_limit():
    # orthonormal visual/text pairs, tiny temperature: loss vanishes per AU
    visual = torch.eye(2).unsqueeze(0)
    batch = ContrastiveBatch(visual=visual, text=visual.clone(), labels=torch.tensor([[1, 0]]))
    assert float(miauc_loss(batch, 0.01)) < 1e-6


def test_uniform_degenerate_case_is_exactly_zero():
    # equal labels + equal similarities: uniform target equals uniform prediction
    row = torch.tensor([1.0, 0.0, 0.0])
    visual = row.expand(4, 3).unsqueeze(0)
    batch = ContrastiveBatch(
        visual=visual, text=visual.clone(), labels=torch.ones(1, 4, dtype=torch.long)
    )
    assert float(miauc_loss(batch, 0.07)) == pytest.approx(0.0, abs=1e-12)


def _scalar_loop_miauc(visual, text, labels, tau):
    """Independent reimplementation: plain python loops over samples/AUs."""
    n_aus, b, _ = visual.shape
    total = 0.0
    for n in range(n_aus):
        m = np.zeros((b, b))
        for i in range(b):
            for j in range(b):
                vi, tj = visual[n, i], text[n, j]
                m[i, j] = np.dot(vi, tj) / (np.linalg.norm(vi) * np.linalg.norm(tj))
        lm = np.zeros((b, b))
        for i in range(b):
            for j in range(b):
                lm[i, j] = 1.0 if labels[n, i] == labels[n, j] else 0.0
        logits = m / tau

        def one_side(logit_mat, mask):
            acc = 0.0
            for i in range(b):
                target = mask[i] / mask[i].sum()
                row = logit_mat[i] - logit_mat[i].max()
                log_probs = row - math.log(np.exp(row).sum())
                ce = -(target * log_probs).sum()
                ent = -(target[target > 0] * np.log(target[target > 0])).sum()
                acc += ce - ent
            return acc / b

        total += 0.5 * (one_side(logits, lm) + one_side(logits.T, lm.T))
    return total


def test_miauc_matches_scalar_loop_oracle():
    rng = np.random.default_rng(2)
    labels = torch.tensor([[1, 0, 1, 0], [0, 0, 1, 1]])
    batch = _batch(rng, n_aus=2, b=4, labels=labels)
    got = float(miauc_loss(batch, 0.07))
    expected = _scalar_loop_miauc(batch.visual.numpy(), batch.text.numpy(), labels.numpy(), 0.07)
    assert abs(got - expected) < 1e-5


def test_non_positive_temperature():
    rng = np.random.default_rng(3)
    batch = _batch(rng)
    with pytest.raises(NonPositiveTemperatureError):
        miauc_loss(batch, 0.0)
    with pytest.raises(NonPositiveTemperatureError):
        miauc_loss(batch, -1.0)


def test_origcl_local_equals_miauc_when_no_shared_labels():
    rng = np.random.default_rng(4)
    labels = torch.tensor([[1, 0], [0, 1]])  # B=2, all labels distinct per AU
    batch = _batch(rng, n_aus=2, b=2, labels=labels)
    assert float(origcl_loss(batch, "local", 0.07)) == pytest.approx(
        float(miauc_loss(batch, 0.07)), abs=1e-9
    )


def test_origcl_differs_when_labels_shared():
    rng = np.random.default_rng(5)
    labels = torch.tensor([[1, 1, 0, 0]])
    batch = _batch(rng, n_aus=1, b=4, labels=labels)
    assert float(origcl_loss(batch, "local", 0.07)) != pytest.approx(
        float(miauc_loss(batch, 0.07)), abs=1e-9
    )


def test_origcl_singleton_batch_is_zero():
    rng = np.random.default_rng(6)
    batch = _batch(rng, n_aus=1, b=1, labels=torch.tensor([[1]]))
    assert float(origcl_loss(batch, "local", 0.07)) == pytest.approx(0.0, abs=1e-12)
    assert float(origcl_loss(batch, "global", 0.07)) == pytest.approx(0.0, abs=1e-12)


def test_multitask_closed_forms():
    perfect = torch.zeros(3, 2)
    labels = torch.tensor([1, 0, 1])
    perfect[torch.arange(3), labels] = 1.0
    assert float(multitask_loss(perfect, labels)) == pytest.approx(0.0, abs=1e-9)
    uniform = torch.full((8, 2), 0.5)
    assert float(multitask_loss(uniform, torch.zeros(8, dtype=torch.long))) == pytest.approx(
        8 * math.log(2), abs=1e-6
    )
    rng = np.random.default_rng(7)
    for _ in range(100):
        probs = torch.softmax(torch.from_numpy(rng.standard_normal((4, 3, 2))), dim=-1)
        y = torch.from_numpy(rng.integers(0, 2, (4, 3)))
        assert float(multitask_loss(probs, y)) >= 0.0


def test_total_loss_composition():
    mt, cl, gd = torch.tensor(1.5), torch.tensor(0.3), torch.tensor(0.2)
    assert float(total_loss(mt, cl, gd, 0.0, 0.0)) == pytest.approx(1.5)
    assert float(total_loss(mt, cl, gd, 0.6, 1.0)) == pytest.approx(1.5 + 0.6 * 0.3 + 0.2)
    assert float(total_loss(mt, cl, gd, 1.0, 0.6)) == pytest.approx(1.5 + 0.3 + 0.6 * 0.2)
    # linearity in the multitask term
    delta = float(total_loss(2 * mt, cl, gd, 0.6, 1.0)) - float(total_loss(mt, cl, gd, 0.6, 1.0))
    assert delta == pytest.approx(float(mt))


def test_miauc_batch_permutation_invariance():
    rng = np.random.default_rng(8)
    labels = torch.tensor([[1, 0, 1, 0], [0, 1, 1, 0]])
    batch = _batch(rng, n_aus=2, b=4, labels=labels)
    perm = torch.tensor([3, 1, 0, 2])
    permuted = ContrastiveBatch(
        visual=batch.visual[:, perm], text=batch.text[:, perm], labels=batch.labels[:, perm]
    )
    assert float(miauc_loss(batch, 0.07)) == pytest.approx(
        float(miauc_loss(permuted, 0.07)), abs=1e-9
    )


def test_raising_same_label_similarities_never_raises_loss():
    # Directional finite difference along the same-label mask. Raising every
    # matching pair together is non-increasing unconditionally; raising one
    # entry alone is not (its gradient is p - t, positive once that pair
    # over-saturates its target share), so the collective direction is the
    # property worth pinning.
    rng = np.random.default_rng(9)
    h = 1e-5
    checked = 0
    while checked < 100:
        b = 4
        labels = torch.from_numpy(rng.integers(0, 2, b))
        if labels.min() == labels.max():
            continue
        sims = torch.from_numpy(rng.uniform(-1, 1, (b, b)))
        mask = miauc_label_matrix(labels).double()
        hi = float(contrastive_from_similarity(sims + h * mask, mask, 0.07))
        lo = float(contrastive_from_similarity(sims - h * mask, mask, 0.07))
        assert hi <= lo + 1e-12
        checked += 1


def test_single_pair_increase_helps_when_undersaturated():
    # From neutral (all-equal) similarities every positive pair is below its
    # target share, so increasing one matching similarity lowers the loss.
    labels = torch.tensor([1, 0, 1, 0])
    mask = miauc_label_matrix(labels).double()
    sims = torch.zeros(4, 4, dtype=torch.float64)
    base = float(contrastive_from_similarity(sims, mask, 0.07))
    bumped = sims.clone()
    bumped[0, 2] += 1e-4
    assert float(contrastive_from_similarity(bumped, mask, 0.07)) < base


def test_loss_gradients_match_finite_differences():
    rng = np.random.default_rng(10)
    labels = torch.tensor([[1, 0, 1, 0], [0, 1, 0, 1]])
    visual = random_unit_rows(rng, 2, 4, 8).double()
    text = random_unit_rows(rng, 2, 4, 8).double()
    tau = torch.tensor(0.07, dtype=torch.float64)

    def miauc():
        return miauc_loss(ContrastiveBatch(visual=visual, text=text, labels=labels), tau)

    check_gradients(miauc, [visual, text, tau], tol=1e-3)

    probs_raw = torch.from_numpy(rng.uniform(0.1, 0.9, (4, 3, 2)))
    y = torch.from_numpy(rng.integers(0, 2, (4, 3)))

    def mt():
        return multitask_loss(probs_raw, y)

    check_gradients(mt, [probs_raw], tol=1e-3)

    parts = torch.from_numpy(rng.uniform(0.1, 2.0, 3))

    def combined():
        return total_loss(parts[0], parts[1], parts[2], 0.6, 1.0)

    check_gradients(combined, [parts], tol=1e-3)


def test_contrastive_batch_validation():
    rng = np.random.default_rng(11)
    good = random_unit_rows(rng, 1, 3, 4)
    with pytest.raises(ZeroNormRowError):
        ContrastiveBatch(visual=torch.zeros(1, 3, 4), text=good, labels=torch.zeros(1, 3))
    with pytest.raises(Exception):
        ContrastiveBatch(visual=good * 2.0, text=good, labels=torch.zeros(1, 3))


def test_cl_variant_none_never_touches_text_encoder(monkeypatch, tmp_path):
    import microau.encoders as encoders_mod
    from microau.core import Config, parse_kv, load_task_spec
    from microau.data import default_synthetic_spec_text, generate_synthetic, load_manifest, synthetic_spec_from_kv
    from microau.train import loso_split, prepare_all, train_fold

    calls = {"n": 0}
    original = encoders_mod.ToyTextEncoder.forward

    def counting_forward(self, texts):
        calls["n"] += 1
        return original(self, texts)

    monkeypatch.setattr(encoders_mod.ToyTextEncoder, "forward", counting_forward)

    spec = synthetic_spec_from_kv(parse_kv(default_synthetic_spec_text()))
    manifest = generate_synthetic(spec, seed=3, out_dir=str(tmp_path / "d"))
    task_spec = load_task_spec(str(tmp_path / "d" / "task_spec.txt"))
    samples = load_manifest(manifest, task_spec)
    cfg = Config(epochs=2, finetune_last_k_layers=1, cl_variant="none", seed=1)
    prepared = prepare_all(samples, cfg, task_spec)
    train_fold(loso_split(samples)[0], prepared, cfg, task_spec)
    assert calls["n"] == 0
