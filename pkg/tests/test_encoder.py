import numpy as np
import pytest

from mlkd.corpus import build_vocabulary, encode_batch
from mlkd.encoder import Encoder, EncoderConfig, Task, gradients, head_names
from mlkd.errors import ConfigError, DivergenceError
from mlkd.gradcheck import check_gradients
from mlkd.losses import loss_sce
from mlkd.autograd import Tensor
from mlkd.optim import AdamW, LRSchedule


def _batch(n, length, vocab=30, seed=0):
    from mlkd.corpus import EncodedBatch

    rng = np.random.default_rng(seed)
    ids = rng.integers(3, vocab, size=(n, length))
    ids[:, 0] = 2
    mask = np.ones((n, length), np.int64)
    slots = rng.integers(0, 4, size=(n, length))
    slots[:, 0] = -100
    return EncodedBatch(ids, mask, slots, rng.integers(0, 7, n), rng.integers(0, 2, n))


def test_config_validation():
    with pytest.raises(ConfigError):
        EncoderConfig(10, n_heads=3, d_hidden=16)
    with pytest.raises(ConfigError):
        EncoderConfig(10, dropout=1.0)


def test_student_shape():
    cfg = EncoderConfig.student(30)
    assert (cfg.n_layers, cfg.n_heads, cfg.d_hidden, cfg.d_ff, cfg.dropout) == (6, 8, 768, 2048, 0.3)
    m = Encoder(cfg, {Task.ID: 7, Task.SF: 4})
    b = _batch(2, 5)
    assert m.forward(b, Task.ID).logits.shape == (2, 7)
    assert m.forward(b, Task.SF).logits.shape == (2, 5, 4)


def test_pooled_is_cls_row():
    m = Encoder(EncoderConfig(30, d_hidden=16, n_heads=2, d_ff=32), {Task.ID: 3})
    out = m.forward(_batch(3, 6))
    np.testing.assert_array_equal(out.pooled.data, out.hidden.data[:, 0])


def test_eval_is_deterministic_and_train_uses_dropout():
    m = Encoder(EncoderConfig(30, d_hidden=16, n_heads=2, d_ff=32, dropout=0.3), {Task.ID: 3})
    b = _batch(3, 6)
    a1, a2 = m.forward(b, Task.ID).logits.data, m.forward(b, Task.ID).logits.data
    assert np.array_equal(a1, a2)
    t = m.forward(b, Task.ID, train=True, rng=np.random.default_rng(0)).logits.data
    assert not np.array_equal(a1, t)


def test_padding_invariance():
    from mlkd.corpus import EncodedBatch

    m = Encoder(EncoderConfig(30, d_hidden=16, n_heads=2, d_ff=32), {Task.SF: 4})
    b = _batch(2, 5)
    pad = lambda a, v: np.concatenate([a, np.full((a.shape[0], 3), v, a.dtype)], axis=1)
    wide = EncodedBatch(pad(b.token_ids, 0), pad(b.mask, 0), pad(b.slot_targets, -100), b.intent_targets, b.domain_targets)
    np.testing.assert_allclose(m.forward(wide, Task.SF).logits.data[:, :5], m.forward(b, Task.SF).logits.data, atol=1e-6)


def test_rejects_overlong_and_unknown_head():
    m = Encoder(EncoderConfig(30, d_hidden=16, n_heads=2, d_ff=32, max_len=4), {Task.ID: 3})
    with pytest.raises(ConfigError):
        m.forward(_batch(1, 5))
    with pytest.raises(ConfigError):
        m.forward(_batch(1, 3), Task.DC)


def test_parameter_count_is_function_of_config():
    cfg = EncoderConfig(30, d_hidden=16, n_heads=2, d_ff=32)
    a = Encoder(cfg, {Task.ID: 3}, seed=0)
    b = Encoder(cfg, {Task.ID: 3}, seed=9)
    assert a.n_parameters() == b.n_parameters()
    assert list(a.params) == list(b.params)


def _tiny_sce(task):
    m = Encoder(EncoderConfig(30, n_layers=1, n_heads=2, d_hidden=8, d_ff=16, dropout=0.0, max_len=8),
                {task: 4}, seed=3).astype(np.float64)
    rng = np.random.default_rng(5)
    for name, arr in m.params.items():
        arr += rng.normal(scale=1.0 if name.startswith(("embed.token", "head")) else 0.2, size=arr.shape)
    b = _batch(4, 6, seed=1)
    b.intent_targets[:] = b.intent_targets % 4

    def objective(model, track):
        out = model.forward(b, task, track=track)
        mask = b.token_mask if task.per_token else None
        return loss_sce(out.logits, b.targets(task), mask), out.leaves

    return m, objective


@pytest.mark.parametrize("task", [Task.ID, Task.SF])
def test_cross_entropy_gradient_check(task):
    m, objective = _tiny_sce(task)
    res = check_gradients(objective, m, n_coords=100, eps=1e-3, seed=0, name="sce")
    assert res.max_rel_err < 1e-4, res.worst


def test_unreached_head_gets_zero_gradient():
    m = Encoder(EncoderConfig(30, d_hidden=8, n_heads=2, d_ff=16, dropout=0.0), {Task.ID: 4, Task.DC: 2})
    b = _batch(3, 5)
    b.intent_targets[:] %= 4
    out = m.forward(b, Task.ID, track=True)
    g = gradients(loss_sce(out.logits, b.intent_targets), out.leaves)
    for name in head_names(Task.DC):
        assert not g[name].any()


def test_gradient_linearity():
    m, objective = _tiny_sce(Task.ID)
    loss, leaves = objective(m, True)
    g1 = gradients(loss, leaves)
    loss, leaves = objective(m, True)
    g2 = gradients(loss * 2.0, leaves)
    for name in g1:
        np.testing.assert_allclose(g2[name], 2 * g1[name], rtol=1e-12, atol=1e-15)


def test_nonfinite_loss_is_divergence():
    with pytest.raises(DivergenceError):
        gradients(Tensor(np.array(np.nan)), {})


# -- optimiser

def test_schedule_examples():
    s = LRSchedule(1000)
    assert s.warmup_steps == 100
    assert s.lr(100) == pytest.approx(5e-5)
    assert s.lr(50) == pytest.approx(2.5e-5)
    assert s.lr(900) == pytest.approx(5e-5)


def test_zero_grad_zero_decay_is_fixed_point():
    p = {"w": np.array([1.0, -2.0], np.float32)}
    opt = AdamW(weight_decay=0.0)
    opt.step(p, {"w": np.zeros(2, np.float32)}, 1e-3)
    assert p["w"].tolist() == [1.0, -2.0] and opt.step_count == 1


def test_adamw_matches_reference_update():
    p = {"w": np.array([0.5, -1.0])}
    g = np.array([0.1, -0.3])
    opt = AdamW()
    opt.step(p, {"w": g}, 0.01)
    # first step: m_hat = g, v_hat = g^2, so the Adam move is lr * sign(g) (up to eps)
    expected = np.array([0.5, -1.0]) * (1 - 0.01 * 1e-2) - 0.01 * g / (np.abs(g) + 1e-8)
    np.testing.assert_allclose(p["w"], expected, rtol=1e-12)


def test_adamw_rejects_nonfinite_gradient():
    with pytest.raises(DivergenceError):
        AdamW().step({"w": np.zeros(2)}, {"w": np.array([np.inf, 0])}, 1e-3)


def test_training_is_deterministic(small_corpus, small_vocab):
    from mlkd.teacher import TrainHP, train_supervised

    samples = small_corpus.samples("train")[:40]
    runs = []
    for _ in range(2):
        m = Encoder(EncoderConfig(len(small_vocab), d_hidden=16, n_heads=2, d_ff=32), {Task.ID: small_corpus.catalog.k_id}, seed=1)
        train_supervised(m, samples, small_vocab, small_corpus.catalog, Task.ID, TrainHP(epochs=1, batch_size=8), seed=4)
        runs.append(m.digest())
    assert runs[0] == runs[1]
