import itertools

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from driftrx import nn
from driftrx.channel import (BPSK, VariationProfile, base_siso_taps, generate_trajectory, make_block,
                             transmit_siso_isi)
from driftrx.receivers import (DeepSIC, FullyConnected, ModuleId, SoftPosterior, TrainingConfig, ViterbiNet,
                               build_receiver, decisions, hard_decide, isi_state_means, retrain_modules,
                               state_digits, state_labels, viterbi_decode)

HP = TrainingConfig(epochs=5, lr=0.1, batch_size=32, seed=0)


def _mimo_block(seed=0, snr=12.0, n=300, pilots=100):
    traj = generate_trajectory(VariationProfile("static"), (4, 4), 1)
    return make_block(traj, 1, n, pilots, snr, seed)


def _oracle_loglik(y, taps, sharpness=1e3):
    means = isi_state_means(taps)
    return -sharpness * (np.asarray(y)[:, None] - means[None, :]) ** 2


def test_deepsic_structure():
    rx = DeepSIC(4, 4, 3, seed=0)
    assert rx.n_modules == 12 and rx.groups == [1, 2, 3, 4]
    assert rx.modules_of(2) == [ModuleId(2, 1), ModuleId(2, 2), ModuleId(2, 3)]
    assert rx.modules[ModuleId(1, 1)].n_inputs == 4 and rx.modules[ModuleId(1, 2)].n_inputs == 7
    post = rx.detect(np.random.default_rng(0).normal(size=(25, 4)))
    assert post.probs.shape == (25, 4, 2) and len(post.iterations) == 3


def test_zero_initialized_receivers_are_uniform():
    y = np.random.default_rng(1).normal(size=(10, 4))
    for rx in (DeepSIC(4, 4, init="zeros"), FullyConnected(4, 4, init="zeros")):
        assert np.allclose(rx.detect(y).probs, 0.5)


@pytest.mark.parametrize("name", ["deepsic", "fc"])
def test_posteriors_are_valid(name):
    rx = build_receiver(name, seed=3)
    p = rx.detect(np.random.default_rng(2).normal(scale=5, size=(40, 4))).probs
    assert np.all(p >= 0) and np.all(p <= 1) and np.allclose(p.sum(axis=-1), 1.0, atol=1e-9)


def test_deepsic_dimension_mismatch():
    with pytest.raises(ValueError):
        DeepSIC(4, 4).detect(np.zeros((5, 3)))


def test_deepsic_reduces_to_plain_classifier():
    ds = DeepSIC(1, 3, 1, hidden=(5,), seed=4)
    fc = FullyConnected(1, 3, hidden=(5,), seed=9)
    fc.modules[ModuleId(1, 1)] = ds.modules[ModuleId(1, 1)].copy()
    y = np.random.default_rng(5).normal(size=(20, 3))
    assert np.array_equal(ds.detect(y).probs, fc.detect(y).probs)


def test_deepsic_later_iterations_consume_other_users():
    rx = DeepSIC(3, 2, 2, hidden=(4,), seed=0)
    y = np.random.default_rng(0).normal(size=(6, 2))
    prev = np.random.default_rng(1).dirichlet([1, 1], size=(6, 3))
    feats = rx._features(y, prev, 2)
    assert np.array_equal(feats, np.column_stack([y, prev[:, 0, 1], prev[:, 2, 1]]))


def test_hard_decide_rules():
    post = SoftPosterior(np.array([[[0.7, 0.3]], [[0.5, 0.5]], [[0.2, 0.8]]]))
    assert hard_decide(post).ravel().tolist() == [1.0, 1.0, -1.0]


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 1000))
def test_hard_decide_invariant_to_monotone_rescaling(seed):
    p = np.random.default_rng(seed).dirichlet([1, 1], size=(12, 3))
    assert np.array_equal(hard_decide(p), hard_decide(np.exp(3 * p) + 2))


def test_retrain_locality_bitwise():
    rx = DeepSIC(4, 4, seed=1)
    before = rx.snapshot()
    retrain_modules(rx, [2], _mimo_block(), HP)
    after = rx.snapshot()
    changed = {m.user for m in before if before[m] != after[m]}
    assert changed == {2}
    assert all(before[ModuleId(2, q)] != after[ModuleId(2, q)] for q in (1, 2, 3))


def test_retrain_all_equals_sync_retrain():
    a, b = DeepSIC(4, 4, seed=1), DeepSIC(4, 4, seed=1)
    block = _mimo_block()
    retrain_modules(a, a.groups, block, HP)
    b.retrain([1, 2, 3, 4], block, HP)
    assert a.snapshot() == b.snapshot()


def test_retrain_modules_validation():
    rx = DeepSIC(4, 4)
    with pytest.raises(ValueError):
        retrain_modules(rx, [], _mimo_block(), HP)
    with pytest.raises(ValueError):
        retrain_modules(rx, [7], _mimo_block(), HP)


def test_fc_is_one_module():
    rx = FullyConnected(4, 4, seed=0)
    assert rx.n_modules == 1 and rx.groups == [1] and rx.group_users(1) == [1, 2, 3, 4]
    before = rx.snapshot()
    retrain_modules(rx, [1], _mimo_block(), HP)
    assert rx.snapshot() != before


def test_checkpoint_roundtrip(tmp_path):
    rx = DeepSIC(2, 2, 2, hidden=(4,), seed=2)
    rx.save(tmp_path)
    assert sorted(p.name for p in tmp_path.iterdir())[0] == "module_u1_q1.txt"
    other = DeepSIC(2, 2, 2, hidden=(4,), seed=99)
    other.load(tmp_path)
    assert other.snapshot() == rx.snapshot()


def test_state_encoding():
    digits = state_digits(2, 4)
    assert digits.shape == (4, 16)
    assert digits[:, 0b0110].tolist() == [0, 1, 1, 0]
    idx = np.array([1, 0, 1, 1, 0])
    # state at i = 3 holds (s_3, s_2, s_1, s_0) = (1, 1, 0, 1), newest least significant
    assert state_labels(idx, 2, 4).tolist() == [1 + 2 + 0 + 8, 0 + 2 + 4 + 0]


def test_isi_state_means_match_convolution():
    taps = base_siso_taps(3)
    rng = np.random.default_rng(0)
    idx = rng.integers(0, 2, 30)
    y = transmit_siso_isi(taps, BPSK.array[idx], np.inf)
    means = isi_state_means(taps)
    assert np.allclose(means[state_labels(idx, 2, 3)], y[2:])


@pytest.mark.parametrize("memory", [1, 2, 4])
def test_viterbi_with_oracle_classifier_is_error_free(memory):
    taps = base_siso_taps(memory)
    rng = np.random.default_rng(memory)
    for _ in range(5):
        idx = rng.integers(0, 2, 200)
        y = transmit_siso_isi(taps, BPSK.array[idx], np.inf)
        path, probs = viterbi_decode(_oracle_loglik(y, taps), 2, memory)
        assert np.array_equal(path, idx)
        assert np.allclose(probs.sum(axis=1), 1.0)


def test_viterbi_memoryless_is_per_symbol_map():
    loglik = np.log(np.random.default_rng(3).dirichlet([1, 1], size=50))
    path, probs = viterbi_decode(loglik, 2, 1)
    assert np.array_equal(path, np.argmax(loglik, axis=1))
    assert np.allclose(probs, np.exp(loglik) / np.exp(loglik).sum(axis=1, keepdims=True))


def test_viterbi_matches_brute_force_on_tiny_block():
    rng = np.random.default_rng(11)
    B, L = 7, 2
    loglik = rng.normal(size=(B, 4))
    best, best_score = None, -np.inf
    for seq in itertools.product([0, 1], repeat=B):
        labels = state_labels(np.array(seq), 2, L)
        score = loglik[np.arange(L - 1, B), labels].sum()
        if score > best_score:
            best, best_score = seq, score
    path, _ = viterbi_decode(loglik, 2, L)
    assert path.tolist() == list(best)


def test_viterbi_rejects_short_block():
    with pytest.raises(ValueError):
        viterbi_decode(np.zeros((3, 16)), 2, 4)


def test_viterbinet_shapes_and_training():
    rx = ViterbiNet(4, hidden=(32,), seed=0)
    assert rx.n_states == 16 and rx.n_modules == 1
    traj = generate_trajectory(VariationProfile("static"), 4, 1)
    block = make_block(traj, 1, 1000, 500, 14.0, seed=0)
    retrain_modules(rx, [1], block, TrainingConfig(epochs=150, lr=0.3, batch_size=64, seed=0))
    post = rx.detect(block.info_rx)
    assert post.probs.shape == (500, 1, 2) and np.allclose(post.probs.sum(axis=-1), 1.0)
    assert np.mean(decisions(post) != block.info_tx) < 0.02


def test_state_loglik_uses_uniform_prior():
    rx = ViterbiNet(2, hidden=(4,), init="zeros")
    assert np.allclose(rx.state_loglik(np.array([0.3, -1.0])), 0.0)


def test_build_receiver_unknown():
    with pytest.raises(ValueError):
        build_receiver("lstm")
