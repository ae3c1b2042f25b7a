import numpy as np
import pytest

from recprune import autodiff as ad
from recprune.errors import ContractError, SequenceLengthError, TokenIndexError
from recprune.model import (LayerMask, ModelConfig, SuppressionSpec, capture_activations, forward,
                            init_model, pad_batch, perplexity, sequence_nll)

from conftest import make_model, random_tokens


def test_logit_shapes():
    m = make_model()
    assert forward(m, [1, 2, 3]).shape == (3, m.config.vocab_size)
    assert forward(m, np.ones((2, 5), dtype=int)).shape == (2, 5, m.config.vocab_size)


def test_batched_equals_single(rng):
    m = make_model()
    toks = random_tokens(m, rng, batch=3, length=6)
    batched = forward(m, toks).data
    for i in range(3):
        np.testing.assert_allclose(batched[i], forward(m, toks[i]).data, rtol=0, atol=1e-13)


def test_causality(rng):
    m = make_model()
    a = random_tokens(m, rng, length=6)
    b = a.copy()
    b[4:] = (b[4:] + 1) % m.config.vocab_size
    la, lb = forward(m, a).data, forward(m, b).data
    np.testing.assert_array_equal(la[:4], lb[:4])
    assert not np.allclose(la[4:], lb[4:])


def test_token_and_length_errors():
    m = make_model()
    with pytest.raises(TokenIndexError):
        forward(m, [0, m.config.vocab_size])
    with pytest.raises(SequenceLengthError):
        forward(m, [0] * (m.config.max_seq_len + 1))
    with pytest.raises(ContractError):
        forward(m, [])


def test_suppression_epsilon_one_is_identity(rng):
    m = make_model()
    t = random_tokens(m, rng, length=5)
    np.testing.assert_array_equal(forward(m, t).data,
                                  forward(m, t, suppress=SuppressionSpec(1, 2, 1.0)).data)


def test_suppression_zero_gives_uniform_causal_attention():
    m = make_model()
    caps = []
    forward(m, [1, 2, 3, 4], suppress=SuppressionSpec(0, 1, 0.0), captures=caps)
    probs = caps[0]["attn_probs"][0, 1]
    expected = np.tril(np.ones((4, 4))) / np.arange(1, 5)[:, None]
    np.testing.assert_allclose(probs, expected, atol=1e-15)
    # other heads untouched
    assert not np.allclose(caps[0]["attn_probs"][0, 0], expected)


def test_suppression_only_changes_target_layer_output():
    m = make_model()
    base = capture_activations(m, [1, 2, 3, 4])
    caps = []
    forward(m, [1, 2, 3, 4], suppress=SuppressionSpec(1, 0, 0.0), captures=caps)
    np.testing.assert_array_equal(base[0].attn_out, caps[0]["attn_out"][0])
    assert not np.allclose(base[1].attn_out, caps[1]["attn_out"][0])


def test_suppression_validated():
    m = make_model()
    with pytest.raises(ContractError):
        forward(m, [1, 2], suppress=SuppressionSpec(0, 9, 0.0))
    with pytest.raises(ContractError):
        forward(m, [1, 2], suppress=SuppressionSpec(5, 0, 0.0))


def test_layer_mask_skips_layer_exactly(rng):
    m = make_model(n_layers=3)
    t = random_tokens(m, rng, length=5)
    masked = forward(m, t, mask=LayerMask({1})).data
    dropped = m.copy()
    dropped.layers = [dropped.layers[0], dropped.layers[2]]
    np.testing.assert_array_equal(masked, forward(dropped, t).data)


def test_layer_mask_range_checked():
    with pytest.raises(ContractError):
        forward(make_model(), [1, 2], mask=LayerMask({7}))


def test_ragged_layers_run():
    m = make_model()
    d_k = m.config.d_k
    l0 = m.layers[0]
    l0.wq.data, l0.wk.data, l0.wv.data = (w.data[:, : 2 * d_k] for w in (l0.wq, l0.wk, l0.wv))
    l0.wo.data = l0.wo.data[: 2 * d_k]
    m.layers[1].w_gate.data = m.layers[1].w_gate.data[:, :10]
    m.layers[1].w_up.data = m.layers[1].w_up.data[:, :10]
    m.layers[1].b_gate.data = m.layers[1].b_gate.data[:10]
    m.layers[1].b_up.data = m.layers[1].b_up.data[:10]
    m.layers[1].w_down.data = m.layers[1].w_down.data[:10]
    assert m.head_counts() == [2, 4] and m.mlp_widths() == [24, 10]
    assert np.isfinite(forward(m, [1, 2, 3]).data).all()


def test_init_deterministic_and_seed_sensitive():
    cfg = ModelConfig(n_layers=2, n_heads=2, d_k=4, d_model=8, d_ff=12, vocab_size=11)
    assert init_model(cfg, 3).checksum() == init_model(cfg, 3).checksum()
    assert init_model(cfg, 3).checksum() != init_model(cfg, 4).checksum()


def test_init_rejects_inconsistent_width():
    with pytest.raises(ContractError):
        init_model(ModelConfig(n_heads=4, d_k=4, d_model=12), 0)


def test_tied_head_shares_embedding():
    m = make_model()
    assert np.shares_memory(m.lm_head.data, m.token_embedding.data)
    names = [n for n, _ in m.named_parameters()]
    assert "lm_head" not in names


def test_untied_model_has_head():
    m = make_model(tie_embeddings=False)
    assert m.lm_head.shape == (16, m.config.vocab_size)
    assert np.isfinite(forward(m, [1, 2]).data).all()


def test_copy_is_deep():
    m = make_model()
    c = m.copy()
    c.layers[0].wq.data[0, 0] += 1.0
    assert m.checksum() != c.checksum()


def test_pad_batch():
    ids, lengths = pad_batch([[1, 2, 3], [4]], fill=9)
    np.testing.assert_array_equal(ids, [[1, 2, 3], [4, 9, 9]])
    np.testing.assert_array_equal(lengths, [3, 1])


def test_perplexity_matches_manual_nll():
    m = make_model()
    seqs = [[1, 2, 3, 4], [5, 6, 7]]
    total = 0.0
    for s in seqs:
        total += ad.cross_entropy_logits(forward(m, s[:-1]), s[1:]).item() * (len(s) - 1)
    nll, count = sequence_nll(m, seqs)
    assert count == 5
    np.testing.assert_allclose(nll, total, rtol=1e-12)
    np.testing.assert_allclose(perplexity(m, seqs), np.exp(total / 5), rtol=1e-12)


def test_perplexity_empty_slice():
    with pytest.raises(ContractError):
        perplexity(make_model(), [])


def test_capture_shapes():
    m = make_model()
    caps = capture_activations(m, [1, 2, 3])
    assert len(caps) == 2
    assert caps[0].attn_out.shape == (3, 16)
    assert caps[0].attn_ctx.shape == (3, 16)
    assert caps[0].attn_probs.shape == (4, 3, 3)
    assert caps[0].mlp_up.shape == (3, 24)
