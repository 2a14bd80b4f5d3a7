import numpy as np
import pytest

from cascadehmm import autodiff as ad
from cascadehmm.encoder import (
    EmissionScores,
    EncoderConfig,
    EncoderParams,
    YearlySeries,
    encode,
    encode_tensor,
    head_posteriors_to_emission,
    positional_features,
)


def tiny_config(head_kind="generative", **kw):
    defaults = dict(num_bands=3, num_classes=4, d_model=8, num_heads=2, num_layers=1, d_ff=16, head_kind=head_kind)
    defaults.update(kw)
    return EncoderConfig(**defaults)


def random_series(rng, T=6, B=3):
    days = np.sort(rng.choice(366, size=T, replace=False))
    return YearlySeries(values=rng.normal(0.3, 0.2, size=(T, B)), timestamps=days)


class TestYearlySeries:
    def test_rejects_nonincreasing_timestamps(self):
        with pytest.raises(ValueError, match="increasing"):
            YearlySeries(values=np.zeros((2, 1)), timestamps=[5, 5])

    def test_rejects_out_of_range_days(self):
        with pytest.raises(ValueError, match="366"):
            YearlySeries(values=np.zeros((2, 1)), timestamps=[5, 366])

    def test_rejects_empty(self):
        with pytest.raises(ValueError, match="T x B"):
            YearlySeries(values=np.zeros((0, 1)), timestamps=[])


class TestEncode:
    def test_zero_head_gives_uniform_scores(self):
        rng = np.random.default_rng(0)
        for kind in ("generative", "discriminative"):
            params = EncoderParams.init(tiny_config(kind), seed=1)
            params.head_w.data = np.zeros_like(params.head_w.data)
            if params.head_b is not None:
                params.head_b.data = np.zeros_like(params.head_b.data)
            scores = encode(params, random_series(rng))
            np.testing.assert_allclose(scores.log_scores, np.full(4, -np.log(4.0)), atol=1e-12)

    def test_deterministic_bit_for_bit(self):
        rng = np.random.default_rng(1)
        params = EncoderParams.init(tiny_config(), seed=2)
        s = random_series(rng)
        a = encode(params, s)
        b = encode(params, s)
        assert a.log_scores.tobytes() == b.log_scores.tobytes()

    def test_scores_are_normalized(self):
        rng = np.random.default_rng(2)
        for seed in range(5):
            params = EncoderParams.init(tiny_config(), seed=seed)
            scores = encode(params, random_series(rng))
            assert abs(np.exp(scores.log_scores).sum() - 1.0) < 1e-9

    def test_timestamps_change_scores(self):
        rng = np.random.default_rng(3)
        params = EncoderParams.init(tiny_config(), seed=4)
        values = rng.normal(size=(5, 3))
        a = encode(params, YearlySeries(values, [10, 50, 90, 200, 300]))
        b = encode(params, YearlySeries(values, [11, 52, 93, 210, 310]))
        assert np.max(np.abs(a.log_scores - b.log_scores)) > 1e-8

    def test_band_mismatch(self):
        rng = np.random.default_rng(4)
        params = EncoderParams.init(tiny_config(), seed=5)
        with pytest.raises(ValueError, match="bands"):
            encode(params, random_series(rng, B=2))

    def test_nonfinite_values(self):
        params = EncoderParams.init(tiny_config(), seed=6)
        bad = YearlySeries(np.full((2, 3), np.nan), [1, 2])
        with pytest.raises(ValueError, match="non-finite"):
            encode(params, bad)

    def test_max_len_enforced(self):
        rng = np.random.default_rng(5)
        params = EncoderParams.init(tiny_config(max_len=4), seed=7)
        with pytest.raises(ValueError, match="max_len"):
            encode(params, random_series(rng, T=6))

    def test_same_inside_and_outside_tape(self):
        rng = np.random.default_rng(6)
        params = EncoderParams.init(tiny_config(), seed=8)
        s = random_series(rng)
        plain = encode(params, s).log_scores
        with ad.Tape():
            recorded = encode_tensor(params, s).data
        assert plain.tobytes() == recorded.tobytes()

    def test_generative_head_uses_unit_rows(self):
        # scaling a generative-head row must not change the output
        rng = np.random.default_rng(7)
        params = EncoderParams.init(tiny_config("generative"), seed=9)
        s = random_series(rng)
        base = encode(params, s).log_scores
        params.head_w.data = params.head_w.data * 3.7
        np.testing.assert_allclose(encode(params, s).log_scores, base, atol=1e-9)

    def test_gradients_reach_all_parameters(self):
        rng = np.random.default_rng(8)
        params = EncoderParams.init(tiny_config(), seed=10)
        s = random_series(rng)
        with ad.Tape():
            out = encode_tensor(params, s)
            loss = ad.scalar_mul(ad.mean(ad.mul(out, out), axis=0), float(out.shape[0]))
            ad.backward(loss)
        for name, t in params.named_parameters():
            assert t.grad is not None, f"no gradient for {name}"
            assert np.all(np.isfinite(t.grad)), f"non-finite gradient for {name}"


class TestPositionalFeatures:
    def test_periodic_over_year(self):
        a = positional_features(np.array([0]), 8)
        b = positional_features(np.array([366]) % 366, 8)
        np.testing.assert_allclose(a, b, atol=1e-12)

    def test_distinct_days_distinct_rows(self):
        pe = positional_features(np.arange(366), 8)
        assert np.unique(np.round(pe, 9), axis=0).shape[0] == 366


class TestHeadConversion:
    def test_generative_identity(self):
        scores = EmissionScores(np.log([0.25, 0.75]))
        out = head_posteriors_to_emission(scores, "generative", np.array([0.9, 0.1]))
        assert out is scores

    def test_discriminative_prior_division(self):
        scores = EmissionScores(np.log([0.5, 0.5]))
        out = head_posteriors_to_emission(scores, "discriminative", np.array([0.8, 0.2]))
        np.testing.assert_allclose(out.log_scores, np.log([0.625, 2.5]), atol=1e-12)

    def test_uniform_priors_shift_by_log_c(self):
        scores = EmissionScores(np.log([0.1, 0.2, 0.7]))
        out = head_posteriors_to_emission(scores, "discriminative", np.full(3, 1 / 3))
        np.testing.assert_allclose(out.log_scores - scores.log_scores, np.full(3, np.log(3.0)), atol=1e-12)

    def test_zero_prior_rejected(self):
        with pytest.raises(ValueError, match="positive"):
            head_posteriors_to_emission(EmissionScores(np.zeros(2)), "discriminative", np.array([1.0, 0.0]))


class TestCheckpoint:
    @pytest.mark.parametrize("kind", ["generative", "discriminative"])
    def test_round_trip(self, tmp_path, kind):
        rng = np.random.default_rng(9)
        params = EncoderParams.init(tiny_config(kind), seed=11)
        params.class_priors = np.array([0.4, 0.3, 0.2, 0.1])
        params.save(tmp_path / "enc", extra_meta={"stage": "pretrained"})
        back = EncoderParams.load(tmp_path / "enc")
        assert back.config == params.config
        for (na, a), (nb, b) in zip(params.named_parameters(), back.named_parameters()):
            assert na == nb
            assert a.data.tobytes() == b.data.tobytes()
        np.testing.assert_array_equal(back.class_priors, params.class_priors)
        s = random_series(rng)
        assert encode(params, s).log_scores.tobytes() == encode(back, s).log_scores.tobytes()

    def test_wrong_kind_rejected(self, tmp_path):
        from cascadehmm import autodiff as adm

        adm.save_arrays(tmp_path / "x", {"a": np.zeros(2)}, meta={"kind": "hmm"})
        with pytest.raises(ValueError, match="kind"):
            EncoderParams.load(tmp_path / "x")


class TestConfig:
    def test_head_kind_validated(self):
        with pytest.raises(ValueError, match="head_kind"):
            tiny_config("softmax")

    def test_divisibility(self):
        with pytest.raises(ValueError, match="divisible"):
            tiny_config(d_model=9, num_heads=2)

    def test_round_trip(self):
        cfg = tiny_config("discriminative", input_scale=2.5)
        assert EncoderConfig.from_dict(cfg.to_dict()) == cfg
