import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gradleak.errors import (InvalidToken, NumericalError, SequenceTooLong, SequenceTooShort,
                             ShapeError, TrainingDiverged)
from gradleak.tinylm import (FullFT, Lora, ModelConfig, Selective, TokenBatch, backward, embed,
                             forward, generate, init_lora, init_params, loss, merge_lora,
                             perplexities, perplexity, softmax, train)
from gradleak.tinylm.checkpoint import load_checkpoint, save_checkpoint
from gradleak.tinylm.model import LoraFactors, layer_key, loss_and_grads

from helpers import gradient_check, random_batch, random_case, tiny_config
from oracles import ref_logits, ref_loss, svd_rank


def zero_params(cfg):
    p = init_params(cfg, np.random.default_rng(0))
    for k in p.tensors:
        p.tensors[k] = np.zeros_like(p.tensors[k])
    return p


# ---------------------------------------------------------------- config and batch

@pytest.mark.parametrize("kw", [dict(embed_dim=10, num_heads=4), dict(max_seq_len=1),
                                dict(vocab_size=3), dict(positional_mode="alibi"),
                                dict(embed_dim=6, num_heads=2), dict(num_layers=0)])
def test_config_rejects_invalid(kw):
    with pytest.raises(ShapeError):
        tiny_config(**kw)


def test_batch_records_total_token_count():
    batch = TokenBatch.of([[1, 2, 3], [4, 5]])
    assert (batch.b, batch.b_n, batch.lengths) == (2, 5, (3, 2))


def test_batch_validation_errors():
    cfg = tiny_config()
    with pytest.raises(InvalidToken):
        TokenBatch.of([[1, cfg.vocab_size]]).validate(cfg)
    with pytest.raises(SequenceTooLong):
        TokenBatch.of([[1] * (cfg.max_seq_len + 1)]).validate(cfg)


def test_lora_rank_capped_at_half_width():
    cfg = tiny_config()
    with pytest.raises(ShapeError):
        Lora(rank=5).validate(cfg)
    with pytest.raises(ShapeError):
        Selective(layers=(2,)).validate(cfg)


# ---------------------------------------------------------------- embed

def test_embed_zero_positional_table_gives_token_row():
    cfg = tiny_config(positional_mode="absolute")
    p = init_params(cfg, np.random.default_rng(1))
    p.tensors["pos_emb"][:] = 0.0
    z = embed(p, TokenBatch.of([[0, 0, 0, 0, 0, 3]]))
    np.testing.assert_array_equal(z[5], p["tok_emb"][3])


def test_embed_positional_difference():
    cfg = tiny_config(positional_mode="absolute")
    p = init_params(cfg, np.random.default_rng(2))
    z = embed(p, TokenBatch.of([[3, 0, 3]]))
    np.testing.assert_allclose(z[2] - z[0], p["pos_emb"][2] - p["pos_emb"][0], atol=1e-15)


@pytest.mark.parametrize("mode", ["absolute", "rotary"])
def test_embed_matches_lookup_oracle(mode):
    cfg = tiny_config(positional_mode=mode)
    p = init_params(cfg, np.random.default_rng(42))
    seqs = [[5, 6, 7, 8], [9, 1, 2, 22]]
    z = embed(p, TokenBatch.of(seqs))
    rows = []
    for seq in seqs:
        for i, tok in enumerate(seq):
            rows.append(p["tok_emb"][tok] + (p["pos_emb"][i] if mode == "absolute" else 0.0))
    np.testing.assert_array_equal(z, np.array(rows))
    assert z.shape[0] == 8


# ---------------------------------------------------------------- forward

def test_zero_network_gives_uniform_logits():
    cfg = tiny_config(vocab_size=8)
    p = zero_params(cfg)
    for k in p.tensors:
        if k.endswith(".g"):
            p.tensors[k][:] = 1.0
    logits, _ = forward(p, TokenBatch.of([[1, 2, 3, 4]]))
    np.testing.assert_array_equal(logits, 0.0)
    np.testing.assert_allclose(softmax(logits), 1 / 8, rtol=0, atol=1e-15)


def test_hand_unrolled_two_token_model():
    # 1 layer, d=2, one head, absolute positions; everything set by hand
    cfg = ModelConfig(vocab_size=4, embed_dim=2, num_layers=1, num_heads=1, max_seq_len=4,
                      positional_mode="absolute", mlp_hidden=2)
    p = zero_params(cfg)
    t = p.tensors
    t["tok_emb"][:] = [[0.0, 0.0], [1.0, -1.0], [2.0, 0.5], [-0.5, 1.5]]
    t["pos_emb"][:2] = [[0.1, 0.0], [0.0, 0.2]]
    for k in ("layers.0.ln1.g", "layers.0.ln2.g", "lnf.g"):
        t[k][:] = 1.0
    t["layers.0.attn.wq"][:] = [[1.0, 0.0], [0.0, 1.0]]
    t["layers.0.attn.wk"][:] = [[0.5, 0.0], [0.0, 0.5]]
    t["layers.0.attn.wv"][:] = [[0.0, 1.0], [1.0, 0.0]]
    t["layers.0.attn.wo"][:] = [[0.3, 0.0], [0.0, 0.3]]
    t["head.w"][:] = [[1.0, 0.0, -1.0, 0.5], [0.0, 1.0, 0.5, -1.0]]

    # hand unrolling: LN of a 2-vector (u, v) is (+-1, -+1) * |u-v|/sqrt((u-v)^2+4eps)
    def ln2(u, v):
        s = (u - v) / math.sqrt((u - v) ** 2 + 4e-5)
        return np.array([s, -s])

    z0, z1 = np.array([1.1, -1.0]), np.array([2.0, 0.7])
    a0, a1 = ln2(*z0), ln2(*z1)
    v0, v1 = a0[::-1], a1[::-1]
    q1 = a1
    k0, k1 = 0.5 * a0, 0.5 * a1
    s = np.array([q1 @ k0, q1 @ k1]) / math.sqrt(2)
    w = np.exp(s - s.max())
    w /= w.sum()
    h0 = z0 + 0.3 * v0
    h1 = z1 + 0.3 * (w[0] * v0 + w[1] * v1)
    # MLP weights are zero, so the block output is the residual stream
    expected = np.array([ln2(*h0) @ t["head.w"], ln2(*h1) @ t["head.w"]])
    logits, _ = forward(p, TokenBatch.of([[1, 2]]))
    np.testing.assert_allclose(logits[0], expected, rtol=0, atol=1e-12)


@pytest.mark.parametrize("seed", range(6))
def test_forward_matches_loop_oracle(seed):
    params, lora, _, batch = random_case(seed)
    logits, _ = forward(params, batch, lora)
    for i, seq in enumerate(batch.sequences):
        np.testing.assert_allclose(logits[i, :len(seq)], ref_logits(params, seq, lora),
                                   rtol=0, atol=1e-11)


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 10_000), pos=st.integers(1, 7), mode=st.sampled_from(["rotary", "absolute"]))
def test_causality(seed, pos, mode):
    rng = np.random.default_rng(seed)
    cfg = tiny_config(positional_mode=mode)
    p = init_params(cfg, rng)
    seq = list(rng.integers(0, cfg.vocab_size, 8))
    other = list(seq)
    other[pos] = (seq[pos] + 1) % cfg.vocab_size
    a, _ = forward(p, TokenBatch.of([seq]))
    b, _ = forward(p, TokenBatch.of([other]))
    np.testing.assert_array_equal(a[0, :pos], b[0, :pos])
    assert not np.allclose(a[0, pos:], b[0, pos:])


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 10_000))
def test_softmax_rows_and_loss_sign(seed):
    rng = np.random.default_rng(seed)
    cfg = tiny_config()
    p = init_params(cfg, rng)
    batch = random_batch(rng, cfg, 3)
    logits, _ = forward(p, batch)
    np.testing.assert_allclose(softmax(logits).sum(-1), 1.0, rtol=0, atol=1e-12)
    assert loss(logits, batch) >= 0.0


def test_padding_does_not_change_logits():
    cfg = tiny_config()
    p = init_params(cfg, np.random.default_rng(3))
    short, long = [4, 5, 6], [7, 8, 9, 10, 11, 1]
    alone, _ = forward(p, TokenBatch.of([short]))
    both, _ = forward(p, TokenBatch.of([short, long]))
    np.testing.assert_allclose(both[0, :3], alone[0], rtol=0, atol=1e-13)


def test_forward_rejects_mismatched_lora():
    cfg = tiny_config()
    p = init_params(cfg, np.random.default_rng(0))
    bad = LoraFactors(2, (0,), ("wq",), {"layers.0.attn.wq.A": np.zeros((8, 3)),
                                        "layers.0.attn.wq.B": np.zeros((2, 8))})
    with pytest.raises(ShapeError):
        forward(p, TokenBatch.of([[1, 2]]), bad)


# ---------------------------------------------------------------- loss

def test_uniform_loss():
    cfg = tiny_config(vocab_size=8)
    batch = TokenBatch.of([[1, 2, 3, 4, 5]])
    assert loss(np.zeros((1, 5, 8)), batch) == pytest.approx(4 * math.log(8), abs=1e-12)


def test_confident_correct_predictions_have_vanishing_loss():
    seq = [1, 2, 3, 4, 5]
    logits = np.zeros((1, 5, 8))
    for i in range(4):
        logits[0, i, seq[i + 1]] = 50.0
    assert loss(logits, TokenBatch.of([seq])) < 1e-10


@pytest.mark.parametrize("seed", range(4))
def test_loss_matches_per_token_oracle(seed):
    params, lora, _, batch = random_case(seed)
    logits, _ = forward(params, batch, lora)
    assert loss(logits, batch) == pytest.approx(ref_loss(params, batch.sequences, lora), abs=1e-12)


# ---------------------------------------------------------------- backward

@pytest.mark.parametrize("seed", range(6))
def test_gradients_match_finite_differences(seed):
    params, lora, mode, batch = random_case(seed)
    assert gradient_check(params, lora, mode, batch, np.random.default_rng(seed)) < 1e-4


def test_capture_contents_per_mode():
    cfg = tiny_config()
    rng = np.random.default_rng(5)
    p = init_params(cfg, rng)
    batch = random_batch(rng, cfg, 2)
    full = backward(p, batch)
    assert full.first_layer_query_grad.shape == (8, 8)
    assert set(full.grads) == set(p.tensors)
    sel = backward(p, batch, mode=Selective(layers=(1,)))
    assert all(k.startswith("layers.1.") for k in sel.grads)
    with pytest.raises(ShapeError):
        sel.first_layer_query_grad
    mode = Lora(rank=3)
    cap = backward(p, batch, init_lora(cfg, mode, rng), mode)
    assert cap.query_grad_key == "layers.0.attn.wq.A"
    assert cap.first_layer_query_grad.shape == (8, 3)
    assert (cap.b, cap.b_n) == (2, sum(batch.lengths))


def test_lora_gradient_factorizes_through_b():
    # dL/dA = Z^T dY B^T, so its column space lies in that of the full-weight gradient
    cfg = tiny_config(embed_dim=12, num_heads=2)
    rng = np.random.default_rng(6)
    p = init_params(cfg, rng)
    mode = Lora(rank=3)
    lora = init_lora(cfg, mode, rng, b_std=0.5)
    batch = random_batch(rng, cfg, 1, lo=4, hi=4)
    _, grads, lgrads = loss_and_grads(merge_lora(p, lora), batch)
    _, _, lg = loss_and_grads(p, batch, lora)
    B = lora.tensors["layers.0.attn.wq.B"]
    np.testing.assert_allclose(lg["layers.0.attn.wq.A"], grads["layers.0.attn.wq"] @ B.T, atol=1e-12)


def test_query_gradient_vanishes_when_attention_is_trivial():
    # in a 2-token sequence only position 0 is scored, and it attends to itself alone
    cfg = tiny_config()
    p = init_params(cfg, np.random.default_rng(7))
    cap = backward(p, TokenBatch.of([[3, 4]]))
    for k in range(cfg.num_layers):
        np.testing.assert_array_equal(cap.grads[layer_key(k, "wq")], 0.0)
        np.testing.assert_array_equal(cap.grads[layer_key(k, "wk")], 0.0)


def test_query_gradient_rank_two_sequences_of_five():
    cfg = tiny_config(embed_dim=32, num_heads=4, max_seq_len=8)
    rng = np.random.default_rng(8)
    p = init_params(cfg, rng)
    batch = random_batch(rng, cfg, 2, lo=5, hi=5)
    assert svd_rank(backward(p, batch).first_layer_query_grad) <= 10


@settings(max_examples=20, deadline=None)
@given(seed=st.integers(0, 10_000), b=st.integers(1, 4), lora=st.booleans())
def test_rank_bound_property(seed, b, lora):
    rng = np.random.default_rng(seed)
    cfg = tiny_config(embed_dim=16, num_heads=2, max_seq_len=6)
    p = init_params(cfg, rng)
    batch = random_batch(rng, cfg, b, hi=6)
    if lora:
        mode = Lora(rank=4)
        g = backward(p, batch, init_lora(cfg, mode, rng), mode).first_layer_query_grad
        assert svd_rank(g) <= min(batch.b_n, 4, 16)
    else:
        assert svd_rank(backward(p, batch).first_layer_query_grad) <= min(batch.b_n, 16)


def test_non_finite_gradient_raises():
    cfg = tiny_config()
    p = init_params(cfg, np.random.default_rng(0))
    p.tensors["head.w"][0, 0] = np.nan
    with pytest.raises(NumericalError):
        backward(p, TokenBatch.of([[1, 2, 3]]))


# ---------------------------------------------------------------- train

def _corpus(rng, cfg, n=12):
    return [tuple(int(t) for t in rng.integers(4, cfg.vocab_size, int(rng.integers(3, 8)))) for _ in range(n)]


def test_zero_learning_rate_keeps_parameters():
    cfg = tiny_config()
    rng = np.random.default_rng(9)
    p = init_params(cfg, rng)
    res = train(p, None, _corpus(rng, cfg), lr=0.0, epochs=2, batch_size=4, rng=rng)
    assert res.params.equal(p)


def test_selective_training_freezes_other_layers():
    cfg = tiny_config(num_layers=3)
    rng = np.random.default_rng(10)
    p = init_params(cfg, rng)
    res = train(p, None, _corpus(rng, cfg), Selective(layers=(1, 2)), lr=0.1, epochs=2,
                batch_size=4, rng=rng)
    for name, t in p.tensors.items():
        changed = not np.array_equal(res.params[name], t)
        assert changed == name.startswith(("layers.1.", "layers.2.")) or not changed
        if not name.startswith(("layers.1.", "layers.2.")):
            np.testing.assert_array_equal(res.params[name], t)
    assert not np.array_equal(res.params["layers.2.attn.wq"], p["layers.2.attn.wq"])


def test_lora_training_only_moves_factors():
    cfg = tiny_config()
    rng = np.random.default_rng(11)
    p = init_params(cfg, rng)
    mode = Lora(rank=2)
    lora = init_lora(cfg, mode, rng)
    res = train(p, lora, _corpus(rng, cfg), mode, lr=0.1, epochs=2, batch_size=4, rng=rng)
    assert res.params.equal(p)
    assert not res.lora.equal(lora)


def test_training_is_deterministic_and_pure():
    cfg = tiny_config()
    p = init_params(cfg, np.random.default_rng(12))
    data = _corpus(np.random.default_rng(13), cfg)
    snapshot = p.copy()
    a = train(p, None, data, lr=0.2, epochs=3, batch_size=4, rng=np.random.default_rng(14), bucket=2)
    b = train(p, None, data, lr=0.2, epochs=3, batch_size=4, rng=np.random.default_rng(14), bucket=2)
    assert a.params.equal(b.params)
    assert p.equal(snapshot)
    assert a.log_csv().splitlines()[0] == "epoch,loss,lr"
    assert len(a.log) == 3


def test_divergence_is_reported():
    cfg = tiny_config()
    rng = np.random.default_rng(15)
    with pytest.raises(TrainingDiverged):
        train(init_params(cfg, rng), None, _corpus(rng, cfg), lr=1e12, epochs=5, batch_size=4, rng=rng)


def test_memorization_run_reduces_loss():
    cfg = tiny_config(vocab_size=40, embed_dim=64, num_heads=4, max_seq_len=10, mlp_hidden=64)
    rng = np.random.default_rng(16)
    data = [tuple(int(t) for t in rng.integers(4, 40, 8)) for _ in range(200)]
    res = train(init_params(cfg, rng), None, data, lr=0.5, epochs=30, batch_size=16, rng=rng)
    assert res.log[-1]["loss"] < res.log[0]["loss"]
    assert res.log[-1]["loss"] < 1.0


# ---------------------------------------------------------------- merge

def test_merge_with_zero_adapter_is_identity():
    cfg = tiny_config()
    rng = np.random.default_rng(17)
    p = init_params(cfg, rng)
    lora = init_lora(cfg, Lora(rank=2), rng)
    for k in lora.tensors:
        if k.endswith(".A"):
            lora.tensors[k][:] = 0.0
    assert merge_lora(p, lora).equal(p)


def test_merge_identity_factor_adds_delta():
    cfg = tiny_config()
    rng = np.random.default_rng(18)
    p = init_params(cfg, rng)
    delta = rng.normal(size=(8, 8))
    lora = LoraFactors(8, (0,), ("wq",), {"layers.0.attn.wq.A": np.eye(8), "layers.0.attn.wq.B": delta})
    np.testing.assert_array_equal(merge_lora(p, lora)["layers.0.attn.wq"], p["layers.0.attn.wq"] + delta)


@pytest.mark.parametrize("mode", ["rotary", "absolute"])
def test_merged_forward_equals_live_adapter(mode):
    cfg = tiny_config(positional_mode=mode)
    rng = np.random.default_rng(19)
    p = init_params(cfg, rng)
    lora = init_lora(cfg, Lora(rank=3, targets=("wq", "wk", "wv", "wo")), rng, b_std=0.5)
    batch = random_batch(rng, cfg, 3)
    live, _ = forward(p, batch, lora)
    merged, _ = forward(merge_lora(p, lora), batch)
    np.testing.assert_allclose(live, merged, rtol=0, atol=1e-10)


# ---------------------------------------------------------------- generate and perplexity

def test_generate_follows_forced_argmax():
    cfg = tiny_config()
    p = zero_params(cfg)
    p.tensors["head.b"][7] = 1.0
    assert generate(p, [1, 2], 5) == [7] * 5
    assert generate(p, [1, 2], 5, stop_tokens={7}) == [7]


def test_generate_breaks_ties_by_lowest_id():
    p = zero_params(tiny_config())
    p.tensors["head.b"][[3, 9]] = 2.0
    assert generate(p, [1], 3) == [3, 3, 3]


def test_generate_rejects_full_prompt():
    cfg = tiny_config()
    p = init_params(cfg, np.random.default_rng(0))
    with pytest.raises(SequenceTooLong):
        generate(p, [1] * cfg.max_seq_len, 1)


def test_generate_recalls_memorized_continuation():
    cfg = tiny_config(vocab_size=30, embed_dim=32, num_heads=2, max_seq_len=12, mlp_hidden=32)
    rng = np.random.default_rng(20)
    seq = (1, 5, 9, 13, 17, 21, 25, 29)
    res = train(init_params(cfg, rng), None, [seq], lr=0.5, epochs=60, batch_size=1, rng=rng)
    assert generate(res.params, seq[:4], 4) == list(seq[4:])


def test_uniform_model_perplexity_is_vocab_size():
    cfg = tiny_config(vocab_size=16)
    p = zero_params(cfg)
    assert perplexity(p, [1, 2, 3, 4]) == pytest.approx(16.0, rel=1e-12)


def test_certain_model_perplexity_is_one():
    p = zero_params(tiny_config())
    p.tensors["head.b"][5] = 50.0
    assert perplexity(p, [5, 5, 5, 5]) < 1 + 1e-6


def test_perplexity_matches_loss_and_batches():
    params, _, _, _ = random_case(0)
    rng = np.random.default_rng(21)
    seqs = [list(rng.integers(0, params.config.vocab_size, n)) for n in (2, 5, 7)]
    for s in seqs:
        logits, _ = forward(params, TokenBatch.of([s]))
        oracle = math.exp(ref_loss(params, [s]) / (len(s) - 1))
        assert perplexity(params, s) == pytest.approx(oracle, rel=1e-10)
        del logits
    np.testing.assert_allclose(perplexities(params, seqs), [perplexity(params, s) for s in seqs], rtol=1e-10)
    with pytest.raises(SequenceTooShort):
        perplexity(params, [3])


# ---------------------------------------------------------------- checkpoints

@pytest.mark.parametrize("mode", ["rotary", "absolute"])
def test_checkpoint_round_trip_is_bitwise(tmp_path, mode):
    cfg = tiny_config(positional_mode=mode)
    rng = np.random.default_rng(22)
    p = init_params(cfg, rng)
    lora = init_lora(cfg, Lora(rank=2), rng)
    save_checkpoint(tmp_path / "c.json", p, lora)
    q, l2 = load_checkpoint(tmp_path / "c.json")
    assert q.equal(p) and l2.equal(lora)
