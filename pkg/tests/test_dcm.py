"""Tests for competitive mechanism-pair training."""

import math

import numpy as np
import pytest

from tcm import dcm, scm
from tcm.errors import ContractError
from tcm.graddiff import MlpSpec, ParamStore
from tcm.numerics import RngStream


def _identity_pair(n, index=0):
    store = ParamStore()
    for d in ("fwd", "rev"):
        store.register(f"{d}.W0", np.eye(n))
        store.register(f"{d}.b0", np.zeros(n))
    return dcm.MechanismPair(index, MlpSpec((n, n)), store)


def _shift_pair(n, shift_fwd, index=0):
    store = ParamStore()
    store.register("fwd.W0", np.eye(n))
    store.register("fwd.b0", np.asarray(shift_fwd, dtype=np.float64))
    store.register("rev.W0", np.eye(n))
    store.register("rev.b0", -np.asarray(shift_fwd, dtype=np.float64))
    return dcm.MechanismPair(index, MlpSpec((n, n)), store)


def _constant_disc(n, logit_s=0.0, logit_t=0.0):
    arch = MlpSpec((n, 16, 1), hidden_act="lrelu", out_act="sigmoid")
    store = ParamStore()
    for domain, logit in ((scm.SOURCE, logit_s), (scm.TARGET, logit_t)):
        store.register(f"{domain}.W0", np.zeros((16, n)))
        store.register(f"{domain}.b0", np.zeros(16))
        store.register(f"{domain}.W1", np.zeros((1, 16)))
        store.register(f"{domain}.b1", np.full(1, logit))
    return dcm.DomainDiscriminators(arch, store)


def _spec():
    return scm.make_benchmark_spec(seed=0, k=2, n=4, shifts=(1.2, -0.8))


def _batches(spec, count=32, seed=5):
    s = scm.sample_dataset(spec, "s", count, RngStream(seed))
    t = scm.sample_dataset(spec, "t", count, RngStream(seed + 1))
    return s, t


class TestCycleGanLoss:
    def test_identity_pair_zero_cycle_and_identity(self):
        spec = _spec()
        s, _ = _batches(spec)
        parts = dcm.cyclegan_loss(_identity_pair(spec.n), _constant_disc(spec.n), s.features(), "s")
        assert parts.cyc == 0.0
        assert parts.idt == 0.0

    def test_constant_half_discriminator_adv(self):
        spec = _spec()
        s, _ = _batches(spec)
        parts = dcm.cyclegan_loss(_identity_pair(spec.n), _constant_disc(spec.n), s.features(), "s")
        assert parts.adv == pytest.approx(math.log(0.5), abs=1e-12)

    def test_components_recombine(self):
        spec = _spec()
        _, t = _batches(spec)
        pairs = dcm.make_pairs(dcm.DcmConfig(k_mechanisms=1), spec.n, RngStream(9))
        disc = dcm.make_discriminators(dcm.DcmConfig(), spec.n, RngStream(10))
        parts = dcm.cyclegan_loss(pairs[0], disc, t.features(), "t", weights=(10.0, 5.0))
        assert parts.total == pytest.approx(parts.adv + 10.0 * parts.cyc + 5.0 * parts.idt, abs=1e-12)

    def test_mirrored_target_branch(self):
        # For a target batch the identity term uses the forward map; L1 terms
        # average over coordinates.
        spec = _spec()
        _, t = _batches(spec)
        pair = _shift_pair(spec.n, [0.5, 0.0, 0.0, 0.0])
        parts = dcm.cyclegan_loss(pair, _constant_disc(spec.n), t.features(), "t")
        assert parts.idt == pytest.approx(0.5 / spec.n, abs=1e-12)
        assert parts.cyc == pytest.approx(0.0, abs=1e-12)


class TestDiscriminatorLoss:
    def test_constant_half_k1(self):
        spec = _spec()
        s, _ = _batches(spec)
        val = dcm.discriminator_loss(
            _constant_disc(spec.n), [_identity_pair(spec.n)], s.features(), "s"
        )
        assert val == pytest.approx(2 * math.log(0.5), abs=1e-12)

    def test_perfect_discriminator_saturates_to_zero(self):
        spec = _spec()
        s, _ = _batches(spec)
        disc = _constant_disc(spec.n, logit_s=50.0, logit_t=-50.0)
        val = dcm.discriminator_loss(disc, [_identity_pair(spec.n)], s.features(), "s")
        assert abs(val) < 1e-5

    def test_hand_expanded_sum_k2(self):
        spec = _spec()
        s, _ = _batches(spec)
        xs = s.features()
        pairs = dcm.make_pairs(dcm.DcmConfig(k_mechanisms=2), spec.n, RngStream(11))
        disc = dcm.make_discriminators(dcm.DcmConfig(), spec.n, RngStream(12))
        got = dcm.discriminator_loss(disc, pairs, xs, "s")
        want = float(np.mean(np.log(disc.prob(xs, "s"))))
        for pair in pairs:
            want += 0.5 * float(np.mean(np.log(1.0 - disc.prob(pair.forward(xs), "t"))))
        assert got == pytest.approx(want, abs=1e-12)

    def test_needs_pairs(self):
        with pytest.raises(ContractError):
            dcm.discriminator_loss(_constant_disc(3), [], np.zeros((1, 3)), "s")

    def test_symmetry_under_full_domain_swap(self):
        # Relabel the data, swap the two discriminators, and swap each pair's
        # directions: the objective is numerically invariant.
        spec = _spec()
        s, _ = _batches(spec)
        xs = s.features()
        cfg = dcm.DcmConfig(k_mechanisms=2)
        pairs = dcm.make_pairs(cfg, spec.n, RngStream(13))
        disc = dcm.make_discriminators(cfg, spec.n, RngStream(14))

        swapped_disc_store = ParamStore()
        for name in disc.store.names():
            dom, rest = name.split(".", 1)
            other = "t" if dom == "s" else "s"
            swapped_disc_store.register(f"{other}.{rest}", disc.store.get(name))
        disc2 = dcm.DomainDiscriminators(disc.arch, swapped_disc_store)

        pairs2 = []
        for pair in pairs:
            st = ParamStore()
            for name in pair.store.names():
                d, rest = name.split(".", 1)
                st.register(f"{'rev' if d == 'fwd' else 'fwd'}.{rest}", pair.store.get(name))
            pairs2.append(dcm.MechanismPair(pair.index, pair.arch, st))

        a = dcm.discriminator_loss(disc, pairs, xs, "s")
        b = dcm.discriminator_loss(disc2, pairs2, xs, "t")
        assert a == pytest.approx(b, abs=1e-12)


class TestCompetitiveStep:
    def test_loser_parameters_untouched(self):
        spec = _spec()
        s, _ = _batches(spec)
        cfg = dcm.DcmConfig(k_mechanisms=2, warmup=0)
        # Pair 1 sits exactly at identity: zero cycle/identity loss, so it wins.
        pairs = [
            _shift_pair(spec.n, [2.0, -1.0, 0.5, 0.3], index=0),
            _identity_pair(spec.n, index=1),
        ]
        disc = dcm.make_discriminators(cfg, spec.n, RngStream(15))
        state = dcm.make_trainer_state(cfg)
        before = [p.store.snapshot() for p in pairs]
        result = dcm.competitive_step(state, pairs, disc, s.features(), "s")
        assert result.winner == 1
        assert result.winner == int(np.argmin(result.losses))
        for name, val in before[0].items():
            assert np.array_equal(pairs[0].store.get(name), val)
        changed = any(
            not np.array_equal(pairs[1].store.get(nm), before[1][nm]) for nm in before[1]
        )
        assert changed

    def test_exact_tie_resolves_to_lowest_index(self):
        spec = _spec()
        s, _ = _batches(spec)
        cfg = dcm.DcmConfig(k_mechanisms=2, warmup=0)
        pairs = [_identity_pair(spec.n, 0), _identity_pair(spec.n, 1)]
        disc = dcm.make_discriminators(cfg, spec.n, RngStream(16))
        state = dcm.make_trainer_state(cfg)
        result = dcm.competitive_step(state, pairs, disc, s.features(), "s")
        assert result.losses[0] == result.losses[1]
        assert result.winner == 0

    def test_warmup_updates_every_pair(self):
        spec = _spec()
        s, _ = _batches(spec)
        cfg = dcm.DcmConfig(k_mechanisms=3, warmup=5)
        pairs = dcm.make_pairs(cfg, spec.n, RngStream(17))
        disc = dcm.make_discriminators(cfg, spec.n, RngStream(18))
        state = dcm.make_trainer_state(cfg)
        before = [p.store.snapshot() for p in pairs]
        dcm.competitive_step(state, pairs, disc, s.features(), "s")
        for pair, snap in zip(pairs, before):
            assert any(not np.array_equal(pair.store.get(nm), snap[nm]) for nm in snap)

    def test_post_warmup_exclusivity(self):
        spec = _spec()
        s, t = _batches(spec)
        cfg = dcm.DcmConfig(k_mechanisms=3, warmup=0, batch_size=16)
        pairs = dcm.make_pairs(cfg, spec.n, RngStream(19))
        disc = dcm.make_discriminators(cfg, spec.n, RngStream(20))
        state = dcm.make_trainer_state(cfg)
        data = {"s": s.features(), "t": t.features()}
        for step in range(20):
            domain = "s" if step % 2 == 0 else "t"
            before = [p.store.snapshot() for p in pairs]
            result = dcm.competitive_step(state, pairs, disc, data[domain], domain)
            for i, pair in enumerate(pairs):
                same = all(np.array_equal(pair.store.get(nm), before[i][nm]) for nm in before[i])
                assert same == (i != result.winner)

    def test_empty_batch_rejected(self):
        cfg = dcm.DcmConfig(k_mechanisms=1, warmup=0)
        pairs = dcm.make_pairs(cfg, 4, RngStream(21))
        disc = dcm.make_discriminators(cfg, 4, RngStream(22))
        with pytest.raises(ContractError):
            dcm.competitive_step(dcm.make_trainer_state(cfg), pairs, disc, np.zeros((0, 4)), "s")

    def test_training_reduces_winner_loss(self):
        spec = scm.make_benchmark_spec(seed=2, k=1, n=4, shifts=(1.5,))
        s, t = _batches(spec, count=256, seed=30)
        cfg = dcm.DcmConfig(k_mechanisms=1, warmup=0, iterations=300, batch_size=32, learning_rate=2e-3)
        pairs, disc, log = dcm.train_dcms(cfg, s, t, RngStream(31))
        first, last = log[0]["losses"][0], log[-1]["losses"][0]
        assert last < first


class TestTrainDcms:
    def test_zero_iterations_returns_initialization(self):
        spec = _spec()
        s, t = _batches(spec)
        cfg = dcm.DcmConfig(k_mechanisms=2, warmup=0, iterations=0)
        pairs, _, log = dcm.train_dcms(cfg, s, t, RngStream(40))
        fresh = dcm.make_pairs(cfg, spec.n, RngStream(40).split(1))
        assert log == []
        for got, want in zip(pairs, fresh):
            for name in want.store.names():
                assert np.array_equal(got.store.get(name), want.store.get(name))

    def test_determinism(self):
        spec = _spec()
        s, t = _batches(spec)
        cfg = dcm.DcmConfig(k_mechanisms=2, warmup=3, iterations=12, batch_size=8)
        _, _, log_a = dcm.train_dcms(cfg, s, t, RngStream(41))
        _, _, log_b = dcm.train_dcms(cfg, s, t, RngStream(41))
        assert log_a == log_b

    def test_attributor_labels_log(self):
        spec = _spec()
        s, t = _batches(spec)
        cfg = dcm.DcmConfig(k_mechanisms=2, warmup=2, iterations=4, batch_size=8)

        def attributor(batch, domain, pair):
            mapped = pair.forward(batch) if domain == "s" else pair.reverse(batch)
            return int(np.argmax(scm.mean_abs_factor_shift(spec, batch, mapped)))

        _, _, log = dcm.train_dcms(cfg, s, t, RngStream(42), win_attributor=attributor)
        assert all(0 <= row["factor"] < spec.k for row in log)


class TestApplyDcms:
    def test_identity_pairs_copy_input(self):
        x = np.array([1.0, 2.0, 3.0, 4.0])
        pairs = [_identity_pair(4, i) for i in range(3)]
        outs = dcm.apply_dcms(pairs, x, "s")
        assert len(outs) == 3
        for out in outs:
            assert np.array_equal(out, x)

    def test_true_mechanism_pairs_shift_factors(self):
        spec = _spec()
        pairs = []
        for i in range(spec.k):
            delta = float(spec.mu_t[i] - spec.mu_s[i])
            pairs.append(_shift_pair(spec.n, delta * spec.generator[:, i], index=i))
        x = spec.generator @ spec.mu_s + spec.offset
        for i, out in enumerate(dcm.apply_dcms(pairs, x, "s")):
            du = spec.generator_pinv @ (out - x)
            want = np.zeros(spec.k)
            want[i] = spec.mu_t[i] - spec.mu_s[i]
            assert np.allclose(du, want, atol=1e-10)

    def test_reverse_direction_for_target(self):
        pair = _shift_pair(4, [1.0, 0.0, 0.0, 0.0])
        out = dcm.apply_dcms([pair], np.zeros(4), "t")[0]
        assert np.allclose(out, [-1.0, 0.0, 0.0, 0.0])

    def test_trained_outputs_finite(self):
        spec = _spec()
        s, t = _batches(spec)
        cfg = dcm.DcmConfig(k_mechanisms=2, warmup=2, iterations=10, batch_size=8)
        pairs, _, _ = dcm.train_dcms(cfg, s, t, RngStream(43))
        outs = dcm.apply_dcms(pairs, t.features(), "t")
        assert len(outs) == 2
        for out in outs:
            assert out.shape == t.features().shape
            assert np.all(np.isfinite(out))
