import filecmp

import numpy as np
import pytest
import torch

from dynsplat.config import SessionConfig
from dynsplat.dataset import ingest_tum
from dynsplat.errors import ValidationError
from dynsplat.mapper import MappingSession
from dynsplat.pipeline import make_keyframe, map_session, open_mapping
from dynsplat.session import Session, load_exposures, load_keyframes, save_exposures, save_keyframes


def small_config():
    cfg = SessionConfig()
    for k, v in {"mapper.static_iterations": 12, "mapper.dynamic_iterations": 12, "mapper.densify_interval": 5,
                 "uncertainty.delta_u": 0.3, "tracker.refine_with_uncertainty": "false"}.items():
        cfg.set(k, str(v))
    return cfg


def new_session(root, dataset_dir, cfg):
    ds = ingest_tum(dataset_dir)
    kfs = [make_keyframe(ds, f, i, ds.frames[f].gt_pose, 4) for i, f in enumerate([0, 3, 6])]
    s = Session(root, cfg, ds.camera, kfs, str(dataset_dir))
    s.save()
    return s


def test_keyframes_and_exposures_round_trip(tmp_path, mover_dataset):
    s = new_session(tmp_path / "s", mover_dataset, SessionConfig())
    back = load_keyframes(tmp_path / "s" / "keyframes.npz")
    for a, b in zip(s.keyframes, back):
        assert np.array_equal(a.image, b.image) and np.array_equal(a.depth, b.depth)
        assert np.array_equal(a.pose.rotation, b.pose.rotation) and a.frame_id == b.frame_id
    loaded = Session.load(tmp_path / "s")
    assert loaded.camera == s.camera and loaded.config == s.config and not loaded.has_mapping()
    ms = MappingSession(s.keyframes, s.camera, small_config_options())
    save_exposures(ms.exposures, tmp_path / "e.txt")
    for a, b in zip(ms.exposures, load_exposures(tmp_path / "e.txt")):
        for k, v in a.params().items():
            assert torch.equal(v, b.params()[k])
        assert (a.rot_step, a.trans_step, a.max_samples) == (b.rot_step, b.trans_step, b.max_samples)


def small_config_options():
    from dynsplat.mapper import MappingOptions

    return MappingOptions.from_config(small_config())


def test_missing_session_is_a_validation_error(tmp_path):
    with pytest.raises(ValidationError):
        Session.load(tmp_path)
    s = Session(tmp_path / "x", SessionConfig(), None, [])
    with pytest.raises(ValidationError):
        open_mapping(s)


def test_resume_is_bit_identical(tmp_path, mover_dataset, monkeypatch):
    cfg = small_config()
    whole = new_session(tmp_path / "whole", mover_dataset, cfg)
    map_session(whole, cfg, checkpoint_every=4)
    assert whole.mapping.phase == "done" and whole.mapping.graph is not None

    cut = new_session(tmp_path / "cut", mover_dataset, cfg)
    real = MappingSession.run_dynamic
    calls = []

    def interrupted(self, n):
        calls.append(n)
        if len(calls) == 2:
            raise KeyboardInterrupt
        return real(self, n)

    monkeypatch.setattr(MappingSession, "run_dynamic", interrupted)
    with pytest.raises(KeyboardInterrupt):
        map_session(cut, cfg, checkpoint_every=4)
    monkeypatch.setattr(MappingSession, "run_dynamic", real)
    resumed = Session.load(tmp_path / "cut")
    assert resumed.has_mapping()
    map_session(resumed, checkpoint_every=4)

    a, b = tmp_path / "whole" / "mapping", tmp_path / "cut" / "mapping"
    text = ["scene.ply", "scaffold.txt", "exposure.txt", "state.json"]
    _, mismatch, errors = filecmp.cmpfiles(a, b, text, shallow=False)
    assert not mismatch and not errors
    for name in ("optimizer.npz", "state.npz", "mlp.npz"):
        with np.load(a / name) as x, np.load(b / name) as y:
            assert sorted(x.files) == sorted(y.files)
            assert all(np.array_equal(x[k], y[k]) for k in x.files)
