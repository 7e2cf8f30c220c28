import numpy as np
import pytest
import torch

from moon.gradcam import (
    cam_from_activations, gradcam_map, localization_score, normalize_heat, save_heat, upsample_to_roi,
    write_pgm_slices,
)
from moon.datamodel import read_volume
from moon.harness import build_model


def _case(arrays, i):
    return {o: v[i] for o, v in arrays.volumes.items()}


def test_cam_single_channel_by_hand():
    acts = torch.tensor([1.0, -2.0, 3.0, 0.0, 0.5, 4.0, -1.0, 2.0]).reshape(1, 2, 2, 2)
    grads = torch.full((1, 2, 2, 2), 0.25)
    # weight = mean gradient = 0.25, then ReLU
    expect = torch.relu(0.25 * acts[0])
    assert torch.equal(cam_from_activations(acts, grads), expect)


def test_cam_zero_gradient_is_zero():
    acts = torch.randn(3, 2, 2, 2)
    assert torch.count_nonzero(cam_from_activations(acts, torch.zeros_like(acts))) == 0


def test_upsample_constant_and_crop():
    cam = torch.full((2, 2, 2), 0.7)
    up = upsample_to_roi(cam, (6, 6, 8), ((1, 1), (0, 1), (2, 2)))
    assert up.shape == (4, 5, 4)
    assert torch.allclose(up, torch.full_like(up, 0.7))


def test_normalize_heat():
    assert normalize_heat(torch.tensor([0.0, 2.0, 4.0])).tolist() == [0.0, 0.5, 1.0]
    assert normalize_heat(torch.zeros(3)).tolist() == [0.0] * 3


def test_heat_matches_roi_dims(tiny_cfg, tiny_data):
    model = build_model(tiny_cfg)
    for organ in ("esophagus", "liver"):
        heat = gradcam_map(model, _case(tiny_data, 0), organ=organ, target="G3")
        assert heat.data.shape == tiny_data.volumes[organ].shape[1:]
        assert heat.data.min() >= 0 and heat.data.max() <= 1


def test_nan_parameters_raise(tiny_cfg, tiny_data):
    model = build_model(tiny_cfg)
    with torch.no_grad():
        next(model.parameters()).fill_(float("nan"))
    with pytest.raises(ValueError, match="not finite"):
        gradcam_map(model, _case(tiny_data, 0))


def test_localization_score_examples():
    heat = np.zeros((4, 5, 1))
    heat[0, 0, 0] = 1.0
    mask = np.zeros_like(heat, dtype=bool)
    # 20 voxels, top 5% is the single hottest one
    mask[0, 0, 0] = True
    assert localization_score(heat, mask) == 1.0
    assert localization_score(heat, ~mask) == 0.0
    assert localization_score(np.zeros((4, 5, 1)), mask) == 0.0
    heat[1, 1, 0] = 1.0
    assert localization_score(heat, mask, top_frac=0.1) == 0.5
    with pytest.raises(ValueError):
        localization_score(heat, mask[:2])


def test_pgm_and_heat_volume_output(tmp_path, tiny_cfg, tiny_data):
    heat = gradcam_map(build_model(tiny_cfg), _case(tiny_data, 11))
    paths = write_pgm_slices(heat.data, tmp_path / "slices")
    assert len(paths) == heat.data.shape[2]
    raw = paths[0].read_bytes()
    h, w, _ = heat.data.shape
    header = f"P5\n{w} {h}\n255\n".encode()
    assert raw.startswith(header) and len(raw) == len(header) + h * w
    save_heat(heat, tmp_path / "heat.vol")
    assert np.array_equal(read_volume(tmp_path / "heat.vol").data, heat.data)
