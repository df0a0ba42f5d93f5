import time

import numpy as np
import pytest

from predhash import nn
from predhash.encoder import (DecoderModel, EncoderModel, EncoderState, ModelFormatError, decode,
                              encode_sequence, encode_step, load_model, save_model)
from predhash.training import TrainingConfig, loss_reconstruction, train_primary
from predhash.data import FeatureSequence


@pytest.fixture(scope="module")
def model():
    m = EncoderModel.init(6, 8, seed=11)
    rng = np.random.default_rng(0)
    m.bn = nn.BatchNormState(rng.normal(0, 0.05, 8), rng.uniform(0.01, 0.1, 8))
    return m


def test_layer_sizes():
    m = EncoderModel.init(10, 16)
    assert m.params["enc1.Wh"].shape == (32, 128)
    assert m.params["enc2.Wh"].shape == (16, 64)
    with pytest.raises(nn.ConfigurationError):
        EncoderModel.init(10, 0)


def test_single_step_matches_sequence(model):
    f = np.random.default_rng(1).normal(size=6)
    _, code = encode_step(model, EncoderState.initial(model), f)
    final, per_step, _ = encode_sequence(model, f[None, :])
    assert np.array_equal(code, final)
    assert len(per_step) == 1 and np.array_equal(per_step[0], final)


def test_zero_model_zero_input_is_all_ones():
    m = EncoderModel.zeros(6, 8)
    _, code = encode_step(m, EncoderState.initial(m), np.zeros(6))
    assert np.all(code == 1)


def test_prefix_property_and_prebitcode(model):
    X = np.random.default_rng(2).normal(size=(12, 6))
    final, per_step, pre = encode_sequence(model, X)
    assert np.array_equal(final, per_step[-1])
    assert np.array_equal(np.where(pre >= 0, 1, -1), final)
    for t in range(1, len(X) + 1):
        assert np.array_equal(encode_sequence(model, X[:t])[0], per_step[t - 1])


def test_stepping_equals_batch_encoding(model):
    rng = np.random.default_rng(3)
    for _ in range(20):
        X = rng.normal(size=(int(rng.integers(1, 15)), 6))
        state = EncoderState.initial(model)
        for t, f in enumerate(X):
            state, code = encode_step(model, state, f)
            assert state.t == t + 1
        assert np.array_equal(code, encode_sequence(model, X)[0])


def test_encode_step_does_not_mutate_state(model):
    s0 = EncoderState.initial(model)
    before = [a.copy() for a in (s0.h1, s0.c1, s0.c2, s0.code)]
    encode_step(model, s0, np.ones(6))
    assert all(np.array_equal(a, b) for a, b in zip(before, (s0.h1, s0.c1, s0.c2, s0.code)))


def test_interleaved_states_are_independent(model):
    rng = np.random.default_rng(4)
    A, B = rng.normal(size=(7, 6)), rng.normal(size=(7, 6))
    sa, sb = EncoderState.initial(model), EncoderState.initial(model)
    for fa, fb in zip(A, B):
        sa, ca = encode_step(model, sa, fa)
        sb, cb = encode_step(model, sb, fb)
    assert np.array_equal(ca, encode_sequence(model, A)[0])
    assert np.array_equal(cb, encode_sequence(model, B)[0])


def test_dimension_errors(model):
    with pytest.raises(nn.ConfigurationError):
        encode_step(model, EncoderState.initial(model), np.zeros(5))
    with pytest.raises(ValueError):
        encode_sequence(model, np.zeros((0, 6)))


def test_decode_shapes_and_determinism():
    dec = DecoderModel.init(6, 8)
    b = np.where(np.arange(8) % 2, 1.0, -1.0)
    fwd, rev = decode(dec, b, 3)
    assert fwd.shape == rev.shape == (3, 6)
    fwd2, rev2 = decode(dec, b, 3)
    assert np.array_equal(fwd, fwd2) and np.array_equal(rev, rev2)
    with pytest.raises(ValueError):
        decode(dec, b, 0)


def test_decoder_overfits_one_video():
    rng = np.random.default_rng(5)
    X = np.cumsum(rng.normal(0, 0.5, (5, 6)), axis=0)
    video = FeatureSequence(0, 0, X)
    # plain SGD on the non-squared L2 loss needs ~1500 steps for a 10x drop
    cfg = TrainingConfig(n_bits=8, epochs=1500, lr=0.02, batch_size=1, seed=0)
    enc, dec, hist = train_primary(cfg, [video])
    enc0, dec0, _ = train_primary(TrainingConfig(n_bits=8, epochs=0, seed=0), [video])

    def recon(e, d):
        code = encode_sequence(e, video.clips)[0]
        return loss_reconstruction(video.clips, *decode(d, code, len(video)))

    assert recon(enc, dec) < 0.1 * recon(enc0, dec0)


def test_model_round_trip(tmp_path, model):
    save_model(model, tmp_path / "enc.msh")
    loaded = load_model(tmp_path / "enc.msh")
    assert isinstance(loaded, EncoderModel)
    r = model.rounded()
    assert all(np.array_equal(r.params[k], loaded.params[k]) for k in r.params)
    assert np.array_equal(r.bn.running_var, loaded.bn.running_var)
    save_model(loaded, tmp_path / "again.msh")
    assert (tmp_path / "enc.msh").read_bytes() == (tmp_path / "again.msh").read_bytes()
    assert (tmp_path / "enc.msh").read_bytes()[:4] == b"MSH1"

    dec = DecoderModel.init(6, 8)
    save_model(dec, tmp_path / "dec.msh")
    assert isinstance(load_model(tmp_path / "dec.msh"), DecoderModel)


def test_model_bad_magic(tmp_path):
    (tmp_path / "x.msh").write_bytes(b"NOPE" + bytes(40))
    with pytest.raises(ModelFormatError):
        load_model(tmp_path / "x.msh")
    save_model(EncoderModel.init(3, 4), tmp_path / "t.msh")
    data = (tmp_path / "t.msh").read_bytes()
    (tmp_path / "t.msh").write_bytes(data[:-10])
    with pytest.raises(ModelFormatError):
        load_model(tmp_path / "t.msh")


def test_step_cost_does_not_grow_with_prefix(model):
    rng = np.random.default_rng(6)
    state = EncoderState.initial(model)
    times = []
    for f in rng.normal(size=(500, 6)):
        t0 = time.perf_counter()
        state, _ = encode_step(model, state, f)
        times.append(time.perf_counter() - t0)
    times = np.array(times)
    early, late = np.median(times[:100]), np.median(times[-100:])
    assert late < 2.0 * early
