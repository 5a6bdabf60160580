import logging
import math
import struct
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from diffret import numerics as nx
from diffret.datagen import DatasetSplit, SyntheticSpec, generate_synthetic
from diffret.denoiser import init_denoiser
from diffret.diffusion import make_schedule
from diffret.encoders import init_encoder_pair
from diffret.errors import ConfigError, ContractError, FormatError, TruncatedError, VersionError
from diffret.numerics import grad_check
from diffret.trainer import (
    TrainConfig,
    checkpoint_bytes,
    denoiser_step_loss,
    encoder_checksum,
    kl_loss,
    kl_stats,
    load_checkpoint,
    parse_checkpoint,
    save_checkpoint,
    train,
    train_phase1,
    train_phase2,
    write_loss_csv,
)


@pytest.fixture(scope="module")
def small():
    return generate_synthetic(SyntheticSpec(n_pairs=64, n_test=8), 0)["train"]


def test_kl_examples():
    assert kl_loss(np.array([0.0, 1.0, 0.0]), np.array([0.0, 1.0, 0.0])).item() == 0.0
    assert kl_loss(np.array([0.5, 0.5]), np.array([1.0, 0.0])).item() == pytest.approx(0.6931, abs=1e-4)


def test_kl_equals_cross_entropy_without_smoothing():
    rng = np.random.default_rng(0)
    p = rng.dirichlet(np.ones(6), size=3)
    x0 = np.eye(6)[[1, 4, 0]]
    expected = -np.mean(np.log(p[np.arange(3), [1, 4, 0]]))
    assert kl_loss(p, x0).item() == pytest.approx(expected, rel=1e-14)


def test_kl_with_smoothing_by_hand():
    p, x0, eps = np.array([0.7, 0.2, 0.1]), np.array([1.0, 0.0, 0.0]), 0.3
    t = (1 - eps) * x0 + eps / 3
    assert kl_loss(p, x0, eps).item() == pytest.approx(float(np.sum(t * np.log(t / p))), rel=1e-12)


@settings(max_examples=50, deadline=None)
@given(st.integers(2, 10), st.floats(0.0, 0.9), st.integers(0, 2**32 - 1))
def test_kl_nonnegative(N, eps, seed):
    rng = np.random.default_rng(seed)
    p = rng.dirichlet(np.ones(N))
    x0 = np.eye(N)[rng.integers(N)]
    assert kl_loss(p, x0, eps).item() >= -1e-12


def test_kl_floor_counts_and_warns(caplog):
    before = kl_stats.clamped
    with caplog.at_level(logging.WARNING):
        loss = kl_loss(np.array([0.0, 1.0]), np.array([1.0, 0.0])).item()
    assert kl_stats.clamped == before + 1
    assert loss == pytest.approx(-math.log(1e-12))
    assert "floored" in caplog.text


def test_kl_grad_check_eight_way():
    x0 = np.eye(8)[2]
    err = grad_check(lambda z: kl_loss(nx.softmax(z), x0, 0.1), np.random.default_rng(1).normal(size=8))
    assert err < 1e-4


@pytest.mark.parametrize("kwargs", [dict(batch_size=1), dict(K=0), dict(label_smoothing=1.0), dict(D=7),
                                    dict(tau=0.0), dict(beta_start=0.3, beta_end=0.1), dict(epochs_phase2=-1),
                                    dict(attention_init_scale=0.0)])
def test_invalid_config(kwargs):
    with pytest.raises(ConfigError):
        TrainConfig(**kwargs)


def test_default_betas_scale_with_K():
    assert TrainConfig(K=1000).betas() == pytest.approx((1e-4, 0.02))
    assert TrainConfig(K=50).betas() == pytest.approx((0.002, 0.4))
    assert TrainConfig(K=10).betas() == pytest.approx((0.01, 0.5))
    assert TrainConfig(K=50, beta_start=1e-4, beta_end=0.02).schedule().beta[-1] == pytest.approx(0.02)
    s = TrainConfig(K=50).schedule()
    assert s.alpha_bar[-1] < 1e-4


def test_phase1_loss_decreases(small):
    res = train_phase1(small, TrainConfig(D=16, epochs_phase1=30))
    assert len(res.losses) == 30
    assert res.losses[-1] < res.losses[0]


def test_phase1_zero_lr_leaves_params(small):
    enc = init_encoder_pair(48, 64, 16, seed=0)
    before = encoder_checksum(enc)
    train_phase1(small, TrainConfig(D=16, epochs_phase1=3, lr_phase1=0.0), enc)
    assert encoder_checksum(enc) == before


def test_phase1_deterministic(small):
    cfg = TrainConfig(D=16, epochs_phase1=3)
    a, b = train_phase1(small, cfg), train_phase1(small, cfg)
    assert encoder_checksum(a.params) == encoder_checksum(b.params)
    assert a.losses == b.losses


def test_phase1_needs_enough_pairs(small):
    with pytest.raises(ConfigError):
        train_phase1(small, TrainConfig(D=16, batch_size=65))


def test_phase2_loss_halves_and_beats_uniform(small):
    # 64 pairs, 50 epochs; the decoder is 4D wide
    cfg = TrainConfig(D=32, epochs_phase2=50, lr_phase2=3e-3, hidden=128)
    enc = train_phase1(small, cfg).params
    before = encoder_checksum(enc)
    res = train_phase2(small, enc, cfg)
    assert encoder_checksum(enc) == before
    assert res.losses[-1] <= 0.5 * res.losses[0]
    # the summed loss covers both directions; a uniform guess scores log 24 each
    assert res.losses[-1] / 2 < math.log(24)
    assert math.log(24) == pytest.approx(3.178, abs=1e-3)


def test_phase2_detects_encoder_mutation(small, monkeypatch):
    import diffret.trainer as tr
    cfg = TrainConfig(D=16, epochs_phase2=1)
    enc = train_phase1(small, TrainConfig(D=16, epochs_phase1=1)).params
    real = tr.embed_dataset

    def tamper(dataset, encoders):
        out = real(dataset, encoders)
        encoders.text.W1.data[0, 0] += 1.0
        return out

    monkeypatch.setattr(tr, "embed_dataset", tamper)
    with pytest.raises(ContractError):
        train_phase2(small, enc, cfg)


def test_phase2_pre_encoded_dimension_check(small):
    enc = DatasetSplit(small.text[:, :10], small.audio[:, :10], small.text_ids, small.audio_ids,
                       small.text_to_audio, encoded=True)
    with pytest.raises(ConfigError):
        train_phase2(enc, None, TrainConfig(D=16, epochs_phase2=1))


def _tiny_checkpoint(small):
    return train(small, TrainConfig(D=8, K=5, epochs_phase1=2, epochs_phase2=2))


def test_checkpoint_round_trip_bit_exact(small, tmp_path):
    ck = _tiny_checkpoint(small)
    save_checkpoint(tmp_path / "a.dfat", ck)
    back = load_checkpoint(tmp_path / "a.dfat")
    assert checkpoint_bytes(back) == (tmp_path / "a.dfat").read_bytes()
    assert back.config == ck.config
    for a, b in zip(ck.denoisers.t2a.parameters() + ck.encoders.audio.parameters(),
                    back.denoisers.t2a.parameters() + back.encoders.audio.parameters()):
        assert a.data.tobytes() == b.data.tobytes()
    assert back.schedule.alpha_bar.tobytes() == ck.schedule.alpha_bar.tobytes()


def test_training_is_reproducible(small):
    assert checkpoint_bytes(_tiny_checkpoint(small)) == checkpoint_bytes(_tiny_checkpoint(small))


def test_checkpoint_corruption(small, tmp_path):
    raw = checkpoint_bytes(_tiny_checkpoint(small))
    with pytest.raises(TruncatedError):
        parse_checkpoint(raw[: len(raw) // 2])
    with pytest.raises(FormatError):
        parse_checkpoint(b"XXXX" + raw[4:])
    with pytest.raises(VersionError):
        parse_checkpoint(raw[:4] + struct.pack("<I", 9) + raw[8:])
    with pytest.raises(FormatError):
        parse_checkpoint(raw + b"\0")
    assert TruncatedError.exit_code != FormatError.exit_code != VersionError.exit_code


def test_checkpoint_without_denoisers(small):
    ck = train(small, TrainConfig(D=8, K=5, epochs_phase1=1), phase2=False)
    back = parse_checkpoint(checkpoint_bytes(ck))
    assert back.denoisers is None and back.encoders is not None


def test_loss_csv(small, tmp_path):
    path = tmp_path / "loss.csv"
    train(small, TrainConfig(D=8, K=5, epochs_phase1=2, epochs_phase2=3), loss_csv=path)
    lines = path.read_text().splitlines()
    assert lines[0] == "epoch,phase,loss"
    assert [l.split(",")[1] for l in lines[1:]] == ["1", "1", "2", "2", "2"]
    write_loss_csv(path, [(4, 2, 0.5)])
    assert path.read_text().splitlines()[-1] == "4,2,0.5"


@pytest.mark.parametrize("name", ["W_Q", "W_K", "W_V", "W1", "b1", "W2", "b2"])
def test_denoiser_loss_passes_grad_check(name):
    rng = np.random.default_rng(7)
    p = init_denoiser(8, "t2a", rng)
    q, c = rng.normal(size=(2, 8)), rng.normal(size=(4, 8))
    noise, s = rng.normal(size=(2, 4)), make_schedule(10, 0.01, 0.3)
    f = lambda t: denoiser_step_loss(q, c, np.array([3, 8]), noise, replace(p, **{name: t}), s, 0.1,
                                     targets=[1, 2])
    assert grad_check(f, p.tensors()[name].data) < 1e-4
