import numpy as np
import pytest

from latentcot import tensor as tn
from latentcot import transformer as tf
from latentcot.transformer import ModelConfig, SequenceOverflowError

from conftest import TINY
from gradcheck import check


def run(params, tokens):
    return tf.forward(params, tf.embed_tokens(params, tokens))


@pytest.fixture(params=["learned", "rotary"])
def params(request, tiny, tiny_rotary):
    return tiny if request.param == "learned" else tiny_rotary


def test_single_token_logits_shape(params):
    out = run(params, [4])
    assert out.logits.shape == (1, TINY.vocab_size)
    assert len(out.hidden) == TINY.n_layers
    assert out.cache.length == 1


def test_empty_embedding_is_zero_rows(tiny):
    assert tf.embed_tokens(tiny, []).shape == (0, TINY.d_model)
    with pytest.raises(ValueError):
        tf.forward(tiny, tf.embed_tokens(tiny, []))


def test_out_of_vocab_token(tiny):
    with pytest.raises(IndexError):
        tf.embed_tokens(tiny, [TINY.vocab_size])


def test_same_token_differs_by_position_rows(tiny):
    e = tf.embed_tokens(tiny, [5, 5]).data
    pos = tiny["pos_emb"].data
    np.testing.assert_allclose(e[1] - e[0], pos[1] - pos[0], atol=1e-15)


def test_causality(params):
    a = run(params, [1, 2, 3, 4, 5]).logits.data
    b = run(params, [1, 2, 3, 9, 0]).logits.data
    np.testing.assert_array_equal(a[:3], b[:3])
    assert not np.allclose(a[3:], b[3:])


def test_cache_matches_full_forward(params):
    tokens = [1, 7, 3, 3, 8, 2, 0]
    full = run(params, tokens)
    out = tf.forward(params, tf.embed_tokens(params, tokens[:3]))
    rows = [out.logits.data]
    for i, t in enumerate(tokens[3:], start=3):
        out = tf.forward(params, tf.embed_tokens(params, [t], i), out.cache)
        rows.append(out.logits.data)
    np.testing.assert_allclose(np.concatenate(rows), full.logits.data, atol=1e-9)


def test_cache_chunked_hidden_states(params):
    tokens = [4, 4, 1, 2, 9]
    full = run(params, tokens)
    first = tf.forward(params, tf.embed_tokens(params, tokens[:2]))
    rest = tf.forward(params, tf.embed_tokens(params, tokens[2:], 2), first.cache)
    for lf, l1, l2 in zip(full.hidden, first.hidden, rest.hidden):
        np.testing.assert_allclose(np.concatenate([l1.data, l2.data]), lf.data, atol=1e-9)


def test_permutation_changes_output(params):
    a = run(params, [1, 2, 3]).logits.data[-1]
    b = run(params, [3, 2, 1]).logits.data[-1]
    assert not np.allclose(a, b)


def test_overflow(tiny):
    with pytest.raises(SequenceOverflowError):
        run(tiny, [1] * (TINY.max_seq_len + 1))
    out = run(tiny, [1] * TINY.max_seq_len)
    with pytest.raises(SequenceOverflowError):
        tf.forward(tiny, tf.embed_tokens(tiny, [1], 0), out.cache)


def test_config_validation():
    with pytest.raises(ValueError):
        ModelConfig(d_model=10, n_heads=4)
    with pytest.raises(ValueError):
        ModelConfig(position="alibi")
    with pytest.raises(ValueError):
        ModelConfig(d_model=12, n_heads=4, position="rotary")
    assert ModelConfig.from_dict(TINY.to_dict()) == TINY


def test_param_layout_and_init_deterministic(tiny):
    names = [n for n, _ in tf.param_layout(TINY)]
    assert names == [n for n, _ in tiny.named()]
    assert len(set(names)) == len(names)
    again = tf.init_params(TINY, seed=5)
    for (n, a), (_, b) in zip(tiny.named(), again.named()):
        np.testing.assert_array_equal(a.data, b.data, err_msg=n)
    other = tf.init_params(TINY, seed=6)
    assert not np.array_equal(other["w_out"].data, tiny["w_out"].data)


def test_gradient_reaches_all_layers_from_hidden_loss(tiny):
    out = run(tiny, [1, 2, 3])
    tn.backward(tn.mean(tn.mul(out.hidden[-1], out.hidden[-1])))
    for i in range(TINY.n_layers):
        assert np.any(tiny[f"layers.{i}.w_qkv"].grad != 0)
    assert np.any(tiny["tok_emb"].grad != 0)


def test_embedding_gradient_finite_differences(params):
    tokens = [2, 5, 2, 7]
    w = np.random.default_rng(1).normal(size=(len(tokens), TINY.vocab_size))

    def build(emb):
        saved = params.tensors["tok_emb"]
        params.tensors["tok_emb"] = emb
        try:
            return tn.sum(tn.mul(run(params, tokens).logits, tn.Tensor(w)))
        finally:
            params.tensors["tok_emb"] = saved

    assert check(build, [params["tok_emb"].data.copy()]) < 1e-4


def greedy_oracle(params, prefix, stop, max_new):
    """Greedy decoding by full re-forward at every step (no cache)."""
    tokens, out = list(prefix), []
    while len(out) < max_new:
        with tn.no_grad():
            logits = run(params, tokens).logits.data[-1]
        best = max(range(len(logits)), key=lambda i: (logits[i], -i))
        if best == stop:
            break
        out.append(best)
        tokens.append(best)
    return out


@pytest.mark.parametrize("seed", range(4))
def test_greedy_matches_cache_free_oracle(seed):
    params = tf.init_params(TINY, seed=seed)
    prefix = [1, 3, 5]
    for stop in range(TINY.vocab_size):
        got = tf.decode_greedy(params, tf.embed_tokens(params, prefix), stop, 8)
        assert got == greedy_oracle(params, prefix, stop, 8)
        assert len(got) <= 8 and stop not in got


def test_greedy_stops_immediately_when_stop_is_argmax(tiny):
    prefix = [1, 3, 5]
    first = int(np.argmax(run(tiny, prefix).logits.data[-1]))
    assert tf.decode_greedy(tiny, tf.embed_tokens(tiny, prefix), first, 5) == []
    with pytest.raises(ValueError):
        tf.decode_greedy(tiny, tf.embed_tokens(tiny, prefix), first, 0)


def test_greedy_leaves_no_graph(tiny):
    tf.decode_greedy(tiny, tf.embed_tokens(tiny, [1, 2]), 0, 4)
    assert all(t.grad is None for t in tiny)


def test_projector_maps_row_to_row(tiny):
    h = run(tiny, [1, 2]).hidden[-1]
    z = tf.project_latent(tiny, tn.slice_rows(h, 1, 2))
    assert z.shape == (1, TINY.d_model)
    assert abs(z.data.mean()) < 1e-9  # output layer norm with unit gain, zero bias
