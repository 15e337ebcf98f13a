import copy
import struct

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st
from sklearn.base import clone

from mvnet.errors import (
    BadMagicError,
    DegenerateProbeError,
    InvalidInputError,
    NoPairError,
    TruncatedCheckpointError,
    VersionMismatchError,
)
from mvnet.geometry import overlap_ratio
from mvnet.pipeline.checkpoint import load_checkpoint, load_encoder_weights, restore, save_checkpoint
from mvnet.pipeline.estimator import LinearProbe, MVNetPretrainer
from mvnet.pipeline.probe import linear_probe, probe_features
from mvnet.pipeline.sampling import candidate_views, overlap_matrix, sample_pair
from mvnet.pipeline.scenes import SceneSpec, generate_scene
from mvnet.pipeline.training import (
    Pretrainer,
    TrainConfig,
    build_models,
    pair_losses,
    prepare_pair,
    train_step,
)
from mvnet.nn import AdamW

SMALL = dict(channels=16, vit_blocks=4, vit_heads=2, decoder_heads=2, decoder_layers=1,
             encoder_channels=(4, 8, 8, 8), queries_per_pair=16)


@pytest.fixture(scope="module")
def scene():
    return generate_scene(SceneSpec(seed=3))


@pytest.fixture(scope="module")
def overlaps(scene):
    return overlap_matrix(scene)


def _state_bytes(module):
    return {k: v.detach().numpy().tobytes() for k, v in module.state_dict().items()}


# ---- sampling

def test_candidates_match_brute_force(scene, overlaps):
    for i in range(len(scene)):
        brute = [j for j in range(len(scene)) if j != i and 0.4 <= overlap_ratio(scene[i], scene[j]) <= 0.8]
        got = candidate_views(overlaps[i], i)
        assert set(got) <= set(brute)
        assert len(got) == min(5, len(brute))


def test_candidate_cap_prefers_sequence_neighbours():
    row = np.full(10, 0.5)
    # distances 1, 1, 2: frames 3 and 5, then the tie at distance 2 goes to frame 2
    assert candidate_views(row, 4, max_candidates=3) == [2, 3, 5]


def test_out_of_range_overlaps_are_never_candidates():
    row = np.array([1.0, 0.39, 0.81, 0.4, 0.8])
    assert candidate_views(row, 0) == [3, 4]


def test_single_candidate_is_always_chosen(scene):
    O = np.eye(len(scene))
    O[0, 5] = 0.6
    rng = np.random.default_rng(0)
    for _ in range(20):
        a, b = sample_pair(scene, rng=rng, overlaps=O, first=0)
        assert b is scene[5]


def test_no_candidate_raises(scene):
    with pytest.raises(NoPairError):
        sample_pair(scene, rng=np.random.default_rng(0), overlaps=np.eye(len(scene)), first=0)


def test_thousand_draws_stay_in_range(scene, overlaps):
    rng = np.random.default_rng(1)
    ids = [f.frame_id for f in scene]
    drawn = 0
    while drawn < 1000:
        try:
            a, b = sample_pair(scene, rng=rng, overlaps=overlaps)
        except NoPairError:
            continue
        assert 0.4 <= overlaps[ids.index(a.frame_id), ids.index(b.frame_id)] <= 0.8
        drawn += 1


# ---- training

def test_config_defaults():
    c = TrainConfig()
    assert (c.voxel_size, c.channels, c.start_layer, c.mask_ratio) == (0.05, 96, 3, 0.30)
    assert (c.overlap_range, c.candidate_views, c.lr, c.weight_decay, c.lam) == ((0.4, 0.8), 5, 1e-3, 1e-4, 0.5)


def test_config_round_trip_and_rejects_unknown_keys():
    c = TrainConfig(lam=0.25, overlap_range=(0.3, 0.9))
    assert TrainConfig.from_dict(c.to_dict()) == c
    with pytest.raises(InvalidInputError):
        TrainConfig.from_dict({"learning_rate": 1.0})
    with pytest.raises(InvalidInputError):
        TrainConfig(mask_ratio=1.5)


def _one_step(scene, **kw):
    cfg = TrainConfig(**SMALL, **kw)
    models = build_models(cfg)
    sample = prepare_pair(scene[0], scene[1], cfg, np.random.default_rng(0))
    opt = AdamW(models.trainable(), lr=cfg.lr)
    return cfg, models, sample, opt


def test_lambda_zero_total_is_l2d(scene):
    cfg, models, sample, opt = _one_step(scene, lam=0.0)
    rep = train_step(models, [sample], cfg, opt)
    assert rep.total == rep.l2d and rep.lm == 0.0


def test_total_identity_and_frozen_teacher(scene):
    cfg, models, sample, opt = _one_step(scene)
    teacher = _state_bytes(models.teacher.net)
    enc = _state_bytes(models.encoder)
    rep = train_step(models, [sample], cfg, opt)
    assert abs(rep.total - (rep.l2d + 0.5 * rep.lm)) <= 1e-6 * max(1.0, abs(rep.total))
    assert _state_bytes(models.teacher.net) == teacher
    assert _state_bytes(models.encoder) != enc


def test_step_reports_the_loss_before_the_update(scene):
    cfg, models, sample, opt = _one_step(scene)
    before = copy.deepcopy(models)
    torch.manual_seed(0)
    l2d, lm = pair_losses(before.train(), sample, cfg)
    rep = train_step(models, [sample], cfg, opt)
    assert rep.l2d == pytest.approx(l2d.item(), rel=1e-5)


def test_empty_batch_rejected(scene):
    cfg, models, _, opt = _one_step(scene)
    with pytest.raises(InvalidInputError):
        train_step(models, [], cfg, opt)


def test_pretrainer_needs_scenes():
    with pytest.raises(InvalidInputError):
        Pretrainer([], TrainConfig(**SMALL))


# ---- checkpoint

@pytest.fixture(scope="module")
def trained(scene):
    tr = Pretrainer([scene], TrainConfig(**SMALL, max_steps=2), deterministic=True)
    tr.run()
    return tr


def test_checkpoint_round_trip(tmp_path, trained):
    p = save_checkpoint(tmp_path / "a.ckpt", trained.models, trained.config, trained.optimizer, trained.rng,
                        trained.step_count)
    ck = load_checkpoint(p)
    assert ck.config == trained.config and ck.meta["step"] == 2
    models, opt, rng = restore(ck, with_optimizer=True)
    for a, b in ((models.encoder, trained.models.encoder), (models.student, trained.models.student),
                 (models.decoder, trained.models.decoder)):
        assert _state_bytes(a) == _state_bytes(b)
    assert opt.state.step == trained.optimizer.state.step
    for k, v in trained.optimizer.state.exp_avg.items():
        assert torch.equal(opt.state.exp_avg[k], v)
    save_checkpoint(tmp_path / "b.ckpt", models, ck.config, opt, rng, 2)
    assert (tmp_path / "b.ckpt").read_bytes() == p.read_bytes()
    assert rng.integers(1 << 30) == copy.deepcopy(trained.rng).integers(1 << 30)


def test_encoder_half_is_exactly_the_encoder_tag(tmp_path, trained):
    ck = load_checkpoint(save_checkpoint(tmp_path / "a.ckpt", trained.models, trained.config))
    half = ck.encoder_half()
    enc = trained.models.encoder
    expected = {f"encoder3d.{n}" for n in enc.state_dict() if enc.parameter_half(n) == "encoder"}
    assert set(half) == expected and expected
    assert not any(n.startswith(("student.", "decoder.")) for n in half)
    fresh = build_models(trained.config).encoder
    load_encoder_weights(fresh, ck)
    for n in expected:
        key = n[len("encoder3d."):]
        assert torch.equal(fresh.state_dict()[key], trained.models.encoder.state_dict()[key])


def test_checkpoint_errors_are_distinct(tmp_path, trained):
    p = save_checkpoint(tmp_path / "a.ckpt", trained.models, trained.config)
    raw = p.read_bytes()
    (tmp_path / "magic").write_bytes(b"XXXX" + raw[4:])
    with pytest.raises(BadMagicError):
        load_checkpoint(tmp_path / "magic")
    (tmp_path / "ver").write_bytes(raw[:4] + struct.pack("<I", 2) + raw[8:])
    with pytest.raises(VersionMismatchError):
        load_checkpoint(tmp_path / "ver")
    for cut in (2, 10, len(raw) - 3):
        (tmp_path / "trunc").write_bytes(raw[:cut])
        with pytest.raises(TruncatedCheckpointError):
            load_checkpoint(tmp_path / "trunc")


# ---- probe

def test_probe_separable_labels_reach_one():
    rng = np.random.default_rng(0)
    y = rng.integers(0, 3, 600)
    X = rng.normal(size=(600, 5))
    X[:, 0] += 8.0 * y
    r = probe_features(X, y, seed=0)
    assert r.test_accuracy == 1.0 and r.train_accuracy == 1.0 and r.classes == 3


def test_probe_single_class_rejected():
    with pytest.raises(DegenerateProbeError):
        probe_features(np.zeros((10, 2)), np.ones(10), seed=0)


def test_probe_leaves_encoder_untouched(scene, trained):
    enc = trained.models.encoder
    before = _state_bytes(enc)
    r = linear_probe(enc, [scene[:2]], trained.config, seed=0)
    assert 0.0 <= r.test_accuracy <= 1.0 and r.n_test > 0
    assert _state_bytes(enc) == before


# ---- estimators

def test_pretrainer_estimator(scene):
    est = MVNetPretrainer(max_steps=2, channels=16, config={k: v for k, v in SMALL.items() if k != "channels"})
    assert clone(est).get_params()["max_steps"] == 2
    est.fit([scene[:3]])
    assert est.n_steps_ == 2 and len(est.history_) == 2
    feats = est.transform(scene[:2])
    assert len(feats) == 2 and feats[0].shape[1] == 16 and np.isfinite(feats[0]).all()


def test_pretrainer_estimator_rejects_bad_input(scene):
    with pytest.raises(InvalidInputError):
        MVNetPretrainer(max_steps=1).fit([scene[:1]])


@settings(max_examples=10, deadline=None)
@given(st.integers(0, 10_000))
def test_linear_probe_estimator(seed):
    rng = np.random.default_rng(seed)
    y = rng.integers(0, 2, 200)
    X = rng.normal(size=(200, 3)) + 6.0 * y[:, None]
    clf = LinearProbe().fit(X, y)
    assert clf.score(X, y) == 1.0
    assert clf.predict_proba(X).shape == (200, len(clf.classes_))
    with pytest.raises(InvalidInputError):
        clf.predict(X[:, :2])
