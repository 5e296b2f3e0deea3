import math
from pathlib import Path

import numpy as np
import pytest

import emblora

ROOT = Path(__file__).resolve().parents[2]


def checkerboard(n, cell=1):
    y, x = np.mgrid[0:n, 0:n]
    v = ((y // cell + x // cell) % 2).astype(float)
    return np.repeat(v[:, :, None], 3, axis=2)


def test_metrics():
    flat = np.full((32, 32, 3), 0.5)
    assert emblora.hf_ratio(flat) == 0.0
    assert emblora.hf_ratio(checkerboard(32)) == pytest.approx(1.0)
    assert emblora.hf_ratio(checkerboard(32, 8)) == pytest.approx(0.325849065204, rel=1e-9)
    assert emblora.hfrd(flat, checkerboard(32)) == pytest.approx(100.0)

    red = np.zeros((8, 8, 3)); red[..., 0] = 1
    blue = np.zeros((8, 8, 3)); blue[..., 2] = 1
    assert emblora.histogram_loss(red, blue) == pytest.approx(200 / 3)
    assert emblora.histogram_loss(red, red) == 0.0


def test_contract_errors_become_value_errors():
    with pytest.raises(ValueError):
        emblora.histogram_loss(np.zeros((8, 8, 3)), np.zeros((8, 8)))
    with pytest.raises(emblora.ContractError):
        emblora.control_policy("video")


def test_color_correct_identity():
    rng = np.random.default_rng(0)
    img = np.round(rng.random((16, 16, 3)) * 255) / 255
    assert np.abs(emblora.color_correct(img, img) - img).max() <= 2 / 255


def test_training_helpers():
    assert emblora.contrastive_from_similarities(0.3, 0.3, 0.3) == pytest.approx(math.log(2))
    assert [emblora.style_keep_count(n) for n in (1, 10, 16)] == [1, 5, 8]
    assert [emblora.final_keep_count(n) for n in (1, 10, 16)] == [1, 3, 4]
    assert emblora.moving_average([1.0, 2.0, 3.0, 4.0], 2) == pytest.approx([1.5, 2.5, 3.5])


def test_select_style_blocks():
    blocks = [f"b{i}" for i in range(6)]
    sim = np.ones((6, 10))
    sim[[1, 4], 5:] = 0.2
    sim[2, :5] = 0.0  # outside the section range, ignored
    chosen, scores = emblora.select_style_blocks(sim, blocks, k=2)
    assert chosen == ["b1", "b4"]
    assert scores[1] == pytest.approx(0.2)


def test_prompt_and_policy():
    assert emblora.effective_prompt("a cat") == "a cat in [emb] style"
    assert emblora.control_policy("image", True) == {"tile": True, "canny": True, "color_correction": True}
    assert emblora.control_policy("text", True) == {"tile": False, "canny": False, "color_correction": False}


@pytest.fixture(scope="module")
def trained(tmp_path_factory, monkeypatch_module):
    root = tmp_path_factory.mktemp("runs")
    monkeypatch_module.setenv("EMBLORA_RUN_ROOT", str(root))
    args = ["--config", str(ROOT / "configs/toy.cfg"),
            "--set", f"data.references={ROOT / 'fixtures/references'}",
            "--set", f"data.inputs={ROOT / 'fixtures/inputs'}",
            "--set", "training.stage1_iters=2", "--set", "training.stage2_iters=2",
            "--set", "analysis.renoise_iters=1", "--run-id", "t", "train"]
    code, out, err = emblora.run_cli(args)
    assert code == 0, err
    return root / "t" / "adapter.safetensors"


@pytest.fixture(scope="module")
def monkeypatch_module():
    with pytest.MonkeyPatch.context() as mp:
        yield mp


def test_cli_usage_error():
    code, out, err = emblora.run_cli(["frobnicate"])
    assert code == 2


def test_train_then_generate(trained, tmp_path):
    meta = emblora.load_adapter_meta(trained)
    assert meta["entries"] == 44
    assert len(meta["style_blocks"]) == 4

    model = emblora.Model("toy", steps=50, seed=0)
    assert len(model.blocks) == 11
    model.load_adapter(trained)
    assert model.style_blocks == meta["style_blocks"]

    txt = model.generate("a red flower", seed=5)
    assert txt["prompt"] == "a red flower in [emb] style"
    assert txt["image"].shape == (64, 64, 3)
    assert np.array_equal(txt["image"], model.generate("a red flower", seed=5)["image"])

    flower = emblora.read_png(ROOT / "fixtures/inputs/flower.png")
    img = model.generate("a red flower", mode="image", input=flower, strength=0.5, seed=3)
    assert img["start_step"] == 25
    assert img["controls"]["canny"]
    emblora.write_png(img["image"], tmp_path / "out.png")
    assert emblora.read_png(tmp_path / "out.png").shape == img["image"].shape

    with pytest.raises(ValueError):
        model.generate("x", mode="image")
