import math

import numpy as np
import pytest

from fusionformer.data import LengthError, VocabularyError
from fusionformer.fusion import FusionParams
from fusionformer.model import (
    AttentionModule,
    ModelConfig,
    load_checkpoint,
    mh_bi_attention,
    mh_self_attention,
    multi_head_attention,
    save_checkpoint,
)
from fusionformer.tensor import DimensionError, Tensor
from fusionformer.training import LossWeights, sample_loss

from conftest import central_difference, make_model, relative_error


# -- plain numpy reference implementation ------------------------------------------
def np_ln(x, w, b, eps=1e-5):
    mu = x.mean(axis=-1, keepdims=True)
    var = ((x - mu) ** 2).mean(axis=-1, keepdims=True)
    return (x - mu) / np.sqrt(var + eps) * w + b


def np_gelu(x):
    return 0.5 * x * (1 + np.tanh(math.sqrt(2 / math.pi) * (x + 0.044715 * x**3)))


def np_attention(p, prefix, hq, hkv, n_heads, causal):
    d = hq.shape[1]
    dh = d // n_heads
    q = hq @ p[f"{prefix}.w_q"] + p[f"{prefix}.b_q"]
    k = hkv @ p[f"{prefix}.w_k"] + p[f"{prefix}.b_k"]
    v = hkv @ p[f"{prefix}.w_v"] + p[f"{prefix}.b_v"]
    heads = []
    for h in range(n_heads):
        sl = slice(h * dh, (h + 1) * dh)
        s = q[:, sl] @ k[:, sl].T / math.sqrt(dh)
        if causal:
            s = np.where(np.tril(np.ones(s.shape, dtype=bool)), s, -np.inf)
        e = np.exp(s - s.max(axis=1, keepdims=True))
        heads.append((e / e.sum(axis=1, keepdims=True)) @ v[:, sl])
    return np.hstack(heads) @ p[f"{prefix}.w_o"] + p[f"{prefix}.b_o"]


def np_mlp(p, prefix, x):
    return np_gelu(x @ p[f"{prefix}.fc.weight"] + p[f"{prefix}.fc.bias"]) @ p[f"{prefix}.proj.weight"] + p[f"{prefix}.proj.bias"]


def np_gpt2_block(p, prefix, x, n_heads):
    """Standard pre-LN GPT2 block using the decoder's self-attention only."""
    h = np_ln(x, p[f"{prefix}.ln_1.weight"], p[f"{prefix}.ln_1.bias"])
    x = x + np_attention(p, f"{prefix}.self_attn", h, h, n_heads, causal=True)
    return x + np_mlp(p, f"{prefix}.mlp", np_ln(x, p[f"{prefix}.ln_2.weight"], p[f"{prefix}.ln_2.bias"]))


def np_decoder_block(p, layer, h_c, h_p, h_h, n_heads, fuser):
    pre = f"dec.h.{layer}"
    h = np_ln(h_c, p[f"{pre}.ln_1.weight"], p[f"{pre}.ln_1.bias"])
    a_c = np_attention(p, f"{pre}.self_attn", h, h, n_heads, causal=True)
    a_p = np_attention(p, f"{pre}.persona_attn", h, h_p, n_heads, causal=False)
    a_h = np_attention(p, f"{pre}.history_attn", h, h_h, n_heads, causal=False)
    x = h_c + fuser(a_c, a_p, a_h)
    return x + np_mlp(p, f"{pre}.mlp", np_ln(x, p[f"{pre}.ln_2.weight"], p[f"{pre}.ln_2.bias"]))


def randomize(model, rng, scale=0.3):
    """Move every parameter away from its structured init so oracles see generic values."""
    for name, t in model.params.items():
        if name.startswith("fusion."):
            t.data = rng.uniform(0.5, 2.0, size=t.shape) if model.config.fusion_method in ("sw", "dw") \
                else rng.normal(0, scale, size=t.shape)
        else:
            t.data = rng.normal(0, scale, size=t.shape) + (1.0 if name.endswith("ln_1.weight") or name.endswith("ln_2.weight") else 0.0)


def module(rng, d, n_heads=1, zero_bias=False):
    vals = {}
    for k in ("q", "k", "v", "o"):
        vals[f"w_{k}"] = Tensor(rng.normal(size=(d, d)))
        vals[f"b_{k}"] = Tensor(np.zeros(d) if zero_bias else rng.normal(size=d))
    return AttentionModule(**vals, n_heads=n_heads)


class TestEmbed:
    def test_zero_tables(self):
        m = make_model(10, d_model=8, n_heads=2)
        for k in ("dec.wte", "dec.wpe", "dec.wtt"):
            m.params[k].data[:] = 0
        np.testing.assert_array_equal(m.embed("dec", [1, 2, 3], [0, 1, 2], [3, 3, 3]).data, np.zeros((3, 8)))

    def test_single_lookup(self):
        m = make_model(10, d_model=8, n_heads=2)
        p = m.state_dict()
        out = m.embed("enc", [7], [0], [2]).data[0]
        np.testing.assert_array_equal(out, p["enc.wte"][7] + p["enc.wpe"][0] + p["enc.wtt"][2])

    def test_lookup_oracle(self, rng):
        m = make_model(10, d_model=8, n_heads=2)
        randomize(m, rng)
        p = m.state_dict()
        tok, pos, typ = [4, 9, 0], [0, 1, 2], [1, 2, 1]
        expected = np.stack([p["dec.wte"][a] + p["dec.wpe"][b] + p["dec.wtt"][c] for a, b, c in zip(tok, pos, typ)])
        np.testing.assert_allclose(m.embed("dec", tok, pos, typ).data, expected, atol=1e-15)

    @pytest.mark.parametrize("args,table", [(([10], [0], [0]), "token"), (([1], [500], [0]), "position"),
                                            (([1], [0], [4]), "token-type")])
    def test_out_of_range_names_table(self, args, table):
        m = make_model(10, d_model=8, n_heads=2)
        with pytest.raises(VocabularyError, match=table):
            m.embed("enc", *args)


class TestEncoder:
    def test_shape_and_determinism(self, rng):
        m = make_model(10)
        x = Tensor(rng.normal(size=(5, 16)))
        a, b = m.encode(x).H, m.encode(x).H
        assert a.shape == (5, 16)
        np.testing.assert_array_equal(a.data, b.data)

    def test_bidirectional(self, rng):
        m = make_model(10)
        x = rng.normal(size=(5, 16))
        base = m.encode(Tensor(x)).H.data
        x[4, 0] += 1.0  # a uniform row shift would be erased by LayerNorm
        assert np.abs(m.encode(Tensor(x)).H.data[0] - base[0]).max() > 1e-8

    def test_too_long(self):
        m = make_model(10, max_positions=4)
        with pytest.raises(LengthError, match="max_positions"):
            m.encode(Tensor(np.zeros((5, 16))))


class TestAttention:
    def test_single_key(self, rng):
        mod = module(rng, 4, n_heads=2)
        h_c, h_a = Tensor(rng.normal(size=(3, 4))), Tensor(rng.normal(size=(1, 4)))
        out, w = mh_bi_attention(mod, h_c, h_a, return_weights=True)
        np.testing.assert_array_equal(w.data, 1.0)
        row = (h_a.data @ mod.w_v.data + mod.b_v.data) @ mod.w_o.data + mod.b_o.data
        np.testing.assert_allclose(out.data, np.tile(row, (3, 1)), atol=1e-14)

    def test_hand_computation(self):
        e = np.eye(2)
        mod = AttentionModule(Tensor(e), Tensor(np.zeros(2)), Tensor(e), Tensor(np.zeros(2)),
                              Tensor(2 * e), Tensor(np.zeros(2)), Tensor(e), Tensor(np.zeros(2)), n_heads=1)
        h_c = Tensor([[1.0, 0.0], [0.0, 1.0]])
        h_a = Tensor([[1.0, 1.0], [0.0, 2.0]])
        # scores row 0: [1, 0]/sqrt2; row 1: [1, 2]/sqrt2; values = 2 * h_a
        r = 1 / math.sqrt(2)
        p0 = np.array([math.exp(r), 1.0]) / (math.exp(r) + 1.0)
        p1 = np.array([math.exp(r), math.exp(2 * r)]) / (math.exp(r) + math.exp(2 * r))
        expected = np.vstack([p0 @ (2 * h_a.data), p1 @ (2 * h_a.data)])
        np.testing.assert_allclose(mh_bi_attention(mod, h_c, h_a).data, expected, atol=1e-15)

    def test_rows_stochastic(self, rng):
        mod = module(rng, 8, n_heads=2)
        _, w = mh_bi_attention(mod, Tensor(rng.normal(size=(3, 8))), Tensor(rng.normal(size=(5, 8))),
                               return_weights=True)
        np.testing.assert_allclose(w.data.sum(axis=-1), 1.0, atol=1e-12)

    def test_width_mismatch(self, rng):
        with pytest.raises(DimensionError):
            mh_bi_attention(module(rng, 4), Tensor(np.ones((2, 4))), Tensor(np.ones((2, 3))))

    def test_self_attention_causal(self, rng):
        mod = module(rng, 8, n_heads=2)
        x = rng.normal(size=(5, 8))
        base = mh_self_attention(mod, Tensor(x)).data
        for j in range(5):
            y = x.copy()
            y[j] += 1.0
            out = mh_self_attention(mod, Tensor(y)).data
            np.testing.assert_array_equal(out[:j], base[:j])

    def test_unmasked_self_is_bi(self, rng):
        mod = module(rng, 8, n_heads=4)
        x = Tensor(rng.normal(size=(4, 8)))
        np.testing.assert_array_equal(multi_head_attention(mod, x, x, causal=False).data,
                                      mh_bi_attention(mod, x, x).data)

    def test_matches_numpy_oracle(self, rng):
        mod = module(rng, 8, n_heads=4)
        p = {f"a.{k}": v.data for k, v in mod.parameters().items()}
        hq, hkv = rng.normal(size=(3, 8)), rng.normal(size=(6, 8))
        np.testing.assert_allclose(mh_bi_attention(mod, Tensor(hq), Tensor(hkv)).data,
                                   np_attention(p, "a", hq, hkv, 4, causal=False), atol=1e-12)


class TestDecoderBlock:
    @pytest.mark.parametrize("method", ["sw", "dw", "linear", "avg", "att"])
    def test_composition_oracle(self, method, rng):
        m = make_model(12, fusion_method=method)
        randomize(m, rng)
        p = m.state_dict()
        h_c, h_p, h_h = rng.normal(size=(4, 16)), rng.normal(size=(5, 16)), rng.normal(size=(7, 16))
        f = m.fusion[0].tensors

        def fuser(a_c, a_p, a_h):
            if method in ("sw", "dw"):
                w = [f[k].data for k in ("w_c", "w_p", "w_h")]
                return (w[0] * a_c + w[1] * a_p + w[2] * a_h) / (w[0] + w[1] + w[2])
            if method == "linear":
                return np.hstack([a_c, a_p, a_h]) @ f["weight"].data + f["bias"].data
            if method == "avg":
                return (a_c + a_p + a_h) / 3
            mm = a_c @ a_p.T
            s = np.sign(mm) * np.sqrt(np.abs(mm)) / 4.0
            s = np.where(np.tril(np.ones(s.shape, dtype=bool)), s, -np.inf)
            e = np.exp(s - s.max(axis=1, keepdims=True))
            return (e / e.sum(axis=1, keepdims=True)) @ a_h

        out = m.decoder_block(0, Tensor(h_c), Tensor(h_p), Tensor(h_h)).data
        np.testing.assert_allclose(out, np_decoder_block(p, 0, h_c, h_p, h_h, 4, fuser), atol=1e-12)

    def test_selector_weights_give_gpt2_block(self, rng):
        m = make_model(12)
        randomize(m, rng)
        fp = FusionParams("sw", {k: Tensor(v) for k, v in zip(("w_c", "w_p", "w_h"), (1.0, 0.0, 0.0))})
        h_c = rng.normal(size=(4, 16))
        out = m.decoder_block(1, Tensor(h_c), Tensor(rng.normal(size=(3, 16))), Tensor(rng.normal(size=(2, 16))),
                              fusion=fp).data
        np.testing.assert_allclose(out, np_gpt2_block(m.state_dict(), "dec.h.1", h_c, 4), atol=1e-12)
        assert out.shape == (4, 16)


class TestPrediction:
    def test_tied_argmax(self):
        m = make_model(16)
        m.params["dec.wte"].data = np.eye(16)
        for k in range(16):
            assert int(np.argmax(m.predict_logits(Tensor(np.eye(16)[k:k + 1])).data)) == k

    def test_shape(self, rng):
        assert make_model(11).predict_logits(Tensor(rng.normal(size=(3, 16)))).shape == (3, 11)

    def test_tying_probe(self, rng):
        m = make_model(11)
        h = Tensor(rng.normal(size=(2, 16)))
        logits0 = m.predict_logits(h).data
        emb0 = m.embed("dec", [5], [0], [3]).data
        m.params["dec.wte"].data[5] += 1.0
        assert not np.allclose(m.predict_logits(h).data[:, 5], logits0[:, 5])
        assert not np.allclose(m.embed("dec", [5], [0], [3]).data, emb0)
        np.testing.assert_array_equal(m.predict_logits(h).data[:, :5], logits0[:, :5])


class TestInvariants:
    def test_reply_causality(self, small_corpus, rng):
        _, vocab, items = small_corpus
        m = make_model(len(vocab), fusion_method="att")
        randomize(m, rng, scale=0.2)
        item = items[0]
        _, _, base = m.forward(item)
        r = item.reply
        for j in range(1, len(r.tokens)):
            tokens = r.tokens.copy()
            tokens[j:] = (tokens[j:] + 7) % len(vocab)
            enc_p = m.encode_source(item.persona.tokens, item.persona.positions, item.persona.types, "persona")
            enc_h = m.encode_source(item.history.tokens, item.history.positions, item.history.types, "history")
            out = m.predict_logits(m.decode(tokens, r.positions, r.types, enc_p, enc_h)).data
            np.testing.assert_array_equal(out[:j], base.data[:j])

    def test_encoder_decoder_disjoint(self, small_corpus):
        _, vocab, items = small_corpus
        m = make_model(len(vocab))
        item = items[1]
        p, r = item.persona, item.reply
        enc0 = m.encode_source(p.tokens, p.positions, p.types, "persona")
        dec0 = m.decode(r.tokens, r.positions, r.types, enc0, enc0).data
        for name, t in m.params.items():
            if name.startswith("dec."):
                t.data = t.data + 0.5
        enc1 = m.encode_source(p.tokens, p.positions, p.types, "persona")
        np.testing.assert_array_equal(enc0.H.data, enc1.H.data)
        dec1 = m.decode(r.tokens, r.positions, r.types, enc0, enc0).data
        for name, t in m.params.items():
            if name.startswith("enc."):
                t.data = t.data - 0.5
        # with the encoded states held fixed, encoder parameters cannot reach the decoder
        np.testing.assert_array_equal(m.decode(r.tokens, r.positions, r.types, enc0, enc0).data, dec1)
        assert not np.allclose(dec0, dec1)

    def test_attention_modules_disjoint(self):
        m = make_model(10)
        for i in range(2):
            mods = [m.attention_module(f"dec.h.{i}.{a}") for a in ("self_attn", "persona_attn", "history_attn")]
            ids = [{id(t) for t in mod.parameters().values()} for mod in mods]
            arrays = [{id(t.data) for t in mod.parameters().values()} for mod in mods]
            assert not (ids[0] & ids[1] or ids[0] & ids[2] or ids[1] & ids[2])
            assert not (arrays[0] & arrays[1] or arrays[0] & arrays[2] or arrays[1] & arrays[2])
            # same starting values, per the copy-at-init rule
            np.testing.assert_array_equal(mods[0].w_q.data, mods[1].w_q.data)

    def test_every_parameter_is_distinct_storage(self):
        m = make_model(10)
        assert len({id(t.data) for t in m.params.values()}) == len(m.params)

    @pytest.mark.parametrize("method", ["sw", "dw", "linear", "att"])
    def test_end_to_end_gradient(self, method, small_corpus):
        """Total loss against central differences on randomly chosen parameter entries."""
        _, vocab, items = small_corpus
        rng = np.random.default_rng(7)
        m = make_model(len(vocab), fusion_method=method, init_std=0.3)
        randomize(m, rng, scale=0.3)
        item = items[2]
        w = LossWeights(0.5, 0.5, 1.0)

        def loss():
            return sample_loss(m, item, w)[0]

        m.zero_grad()
        loss().backward()
        names = sorted(m.params)
        checked = 0
        while checked < 25:
            name = names[int(rng.integers(len(names)))]
            t = m.params[name]
            idx = tuple(int(rng.integers(n)) for n in t.shape)
            if t.grad is None:
                continue
            numeric = central_difference(lambda: loss().item(), t, idx, h=1e-6)
            if abs(numeric) < 1e-7 and abs(t.grad[idx]) < 1e-7:
                continue
            assert relative_error(t.grad[idx], numeric) < 1e-3, (name, idx, t.grad[idx], numeric)
            checked += 1


class TestConfigAndCheckpoint:
    def test_heads_must_divide(self):
        with pytest.raises(ValueError, match="divisible"):
            ModelConfig(d_model=10, n_heads=4)

    def test_paper_scale(self):
        c = ModelConfig.paper_scale()
        assert (c.n_layers, c.d_model) == (12, 768)

    def test_unknown_fusion(self):
        with pytest.raises(ValueError):
            ModelConfig(fusion_method="concat")

    def test_round_trip(self, tmp_path, rng):
        m = make_model(9, fusion_method="dw")
        randomize(m, rng)
        path = tmp_path / "m.npz"
        save_checkpoint(path, m, [f"t{i}" for i in range(9)], extra={"note": 1})
        m2, meta = load_checkpoint(path)
        assert meta["vocab"][3] == "t3" and meta["extra"] == {"note": 1}
        assert m2.config == m.config
        for k, v in m.state_dict().items():
            np.testing.assert_array_equal(m2.params[k].data, v)
        assert not list(tmp_path.glob("*.tmp*"))

    def test_rejects_foreign_file(self, tmp_path):
        path = tmp_path / "x.npz"
        np.savez(path, a=np.zeros(2))
        with pytest.raises(ValueError, match="not a fusionformer checkpoint"):
            load_checkpoint(path)

    def test_fusion_weights_normalized(self):
        assert make_model(8, fusion_method="att").fusion_weights() is None
        np.testing.assert_allclose(make_model(8, fusion_method="sw").fusion_weights(), 1 / 3)
