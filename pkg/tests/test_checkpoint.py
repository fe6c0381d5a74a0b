"""Checkpoint archive: bit-exact round trips for every model variant."""

import numpy as np
import pytest

from vibtag.autodiff import value
from vibtag.checkpoint import load, save
from vibtag.errors import ConfigError
from vibtag.objective import VIBConfig, evaluate, init_params
from vibtag.synthetic import SyntheticConfig, SyntheticGrammar

TOY = SyntheticConfig(n_classes=3, proto_dim=4, noise_dims=2,
                      types_per_class=4, n_labels=3, min_len=3, max_len=4,
                      seed=5)


def toy_data(n=4, seed=3):
    return SyntheticGrammar(TOY).dataset(n, seed=seed)


def cfg_for(**kw):
    base = dict(mode="continuous", tag_dim=3, beta=0.05, epochs=1, seed=0,
                encoder_hidden=6, arc_dim=5, label_dim=4)
    base.update(kw)
    return VIBConfig(**base)


def assert_bitwise_equal(a, b):
    ba, bb = a.blocks(), b.blocks()
    assert sorted(ba) == sorted(bb)
    for name in ba:
        for ta, tb in zip(ba[name], bb[name]):
            assert np.array_equal(value(ta), value(tb)), name


VARIANTS = [
    dict(mode="continuous"),
    dict(mode="discrete", tag_dim=4),
    dict(baseline="mlp"),
    dict(baseline="identity"),
    dict(baseline="pca"),
    dict(baseline="gold_pos"),
    dict(rnn_hidden=3),
]


class TestRoundTrip:
    @pytest.mark.parametrize("kw", VARIANTS,
                             ids=[str(sorted(v.items())) for v in VARIANTS])
    def test_bit_exact(self, kw, tmp_path):
        data = toy_data()
        params = init_params(data, cfg_for(**kw))
        path = tmp_path / "ck.npz"
        save(params, path)
        back = load(path)
        assert back.cfg == params.cfg
        assert back.label_vocab == params.label_vocab
        assert back.pos_vocab == params.pos_vocab
        assert back.input_dim == params.input_dim
        assert_bitwise_equal(params, back)
        spec_a, spec_b = params.baseline_spec, back.baseline_spec
        assert (spec_a is None) == (spec_b is None)
        if spec_a is not None:
            assert spec_a.kind == spec_b.kind
            if spec_a.kind == "pca":
                assert np.array_equal(spec_a.projection, spec_b.projection)
                assert np.array_equal(spec_a.mean, spec_b.mean)
                assert np.array_equal(spec_a.eigvals, spec_b.eigvals)
            if spec_a.kind == "gold_pos":
                assert spec_a.tag_vocab == spec_b.tag_vocab

    @pytest.mark.parametrize("kw", [dict(mode="continuous"),
                                    dict(mode="discrete", tag_dim=4),
                                    dict(baseline="pca")],
                             ids=["continuous", "discrete", "pca"])
    def test_identical_predictions(self, kw, tmp_path):
        data = toy_data(n=6)
        params = init_params(data, cfg_for(**kw))
        path = tmp_path / "ck.npz"
        save(params, path)
        back = load(path)
        a = evaluate(params, data, seed=4)
        b = evaluate(back, data, seed=4)
        assert a == b


class TestVersioning:
    def test_unsupported_version(self, tmp_path):
        import json
        data = toy_data()
        params = init_params(data, cfg_for())
        path = tmp_path / "ck.npz"
        save(params, path)
        with np.load(path) as z:
            arrays = {k: z[k] for k in z.files}
        meta = json.loads(bytes(arrays["__meta__"]).decode())
        meta["format_version"] = 99
        arrays["__meta__"] = np.frombuffer(
            json.dumps(meta).encode(), dtype=np.uint8
        )
        np.savez(path, **arrays)
        with pytest.raises(ConfigError, match="version"):
            load(path)
