import json

import numpy as np
import pytest
from PIL import Image

from conftest import tiny_config
from experiments import (
    ABLATION_FLAGS,
    majority_label,
    mix_items,
    parse_weight_spec,
    run_ablation,
    run_multi_emotion,
    run_visualization,
    visualization_items,
)
from processor import InferenceItem
from rng import SAMPLING, mix
from runner import PipelineRunner
from synthworld import EmotionCategory, read_png
from tokens import SimplexError


def test_ablation_runs_four_configurations_on_shared_artifacts(tiny):
    reports = run_ablation(tiny)
    assert [r.config_label for r in reports] == ["none", "vt", "vv", "both"]
    assert all(r.n == 80 for r in reports)

    run_dir = tiny.run_dir
    assert (run_dir / "reports" / "ablation.csv").exists()
    assert "| none |" in (run_dir / "reports" / "ablation.md").read_text()
    assert (run_dir / "checkpoints" / "text.npz").exists()
    for label in ABLATION_FLAGS:
        child = run_dir / "ablation" / label
        assert (child / "checkpoints" / "visual.npz").exists()
        assert not (child / "checkpoints" / "text.npz").exists()
        assert not (child / "data").exists()


def test_ablation_flags_reach_the_samples(tiny):
    run_ablation(tiny)
    none = json.loads((tiny.run_dir / "ablation" / "none" / "samples" / "circle__fear.json").read_text())
    both = json.loads((tiny.run_dir / "ablation" / "both" / "samples" / "circle__fear.json").read_text())
    assert none["caption"] == "a circle in the scene"
    assert none["alpha"] == 0.0
    assert both["alpha"] == tiny.alpha
    assert none["seed"] == both["seed"]


def test_visualization_grid(tiny):
    result = run_visualization(tiny)
    with Image.open(result.grid_path) as grid:
        assert grid.size == (2 * 16, 8 * 16)
    assert set(result.majorities) == {e.label for e in EmotionCategory}
    assert 0 <= result.matching_rows <= 8
    lines = (tiny.run_dir / "visualization" / "majority.jsonl").read_text().splitlines()
    assert len(lines) == 8


def test_visualization_columns_share_seeds(tiny):
    items = visualization_items(tiny)
    assert len(items) == 16
    by_row = [[item.seed for item in items[row * 2 : (row + 1) * 2]] for row in range(8)]
    assert all(seeds == by_row[0] for seeds in by_row)
    assert all(item.content == "" for item in items)


def test_majority_ties_go_to_the_lowest_id():
    assert majority_label(np.array([6, 2, 6, 2])) == "contentment"
    assert majority_label(np.array([7, 7, 1])) == "sadness"


def test_parse_weight_spec():
    assert parse_weight_spec("amusement=0.5, awe=0.5") == {"amusement": 0.5, "awe": 0.5}
    with pytest.raises(ValueError):
        parse_weight_spec("amusement")


def test_mix_items_share_seeds_across_weight_sets(tiny):
    a = mix_items(tiny, "a", [0.5, 0.5, 0, 0, 0, 0, 0, 0])
    b = mix_items(tiny, "b", [0, 0, 0, 0, 0, 0.5, 0, 0.5])
    assert [i.seed for i in a] == [i.seed for i in b]
    assert len(a) == tiny.mix_samples


def test_weights_off_the_simplex_are_rejected_before_training(tiny):
    with pytest.raises(SimplexError):
        run_multi_emotion(tiny, {"bad": {"amusement": 0.45, "awe": 0.45}})
    assert not tiny.run_dir.exists()


def test_one_hot_mix_matches_single_emotion(tiny):
    results = run_multi_emotion(tiny, {"fear": {"fear": 1.0}, "pair": {"amusement": 0.5, "awe": 0.5}})
    assert [r.name for r in results] == ["fear", "pair"]
    assert all(len(r.records) == tiny.mix_samples for r in results)
    assert all(len(rec["top2"]) == 2 for r in results for rec in r.records)
    assert (tiny.run_dir / "reports" / "mix.jsonl").exists()

    runner = PipelineRunner(tiny)
    processor = runner.processor(tiny.run_dir / "single")
    item = InferenceItem(name="fear-only", content="", concept=None, emotion=EmotionCategory.FEAR, seed=mix(tiny.seed, SAMPLING, "mix", 0))
    processor.process([item])
    single = read_png(processor.saver.image_path("fear-only"))
    mixed = read_png(tiny.run_dir / "mix" / "fear__000.png")
    assert np.array_equal(single, mixed)


def test_mix_with_content(tmp_path):
    config = tiny_config(tmp_path / "run", mix_samples=1)
    (result,) = run_multi_emotion(config, {"pair": {"sadness": 0.5, "disgust": 0.5}}, content="circle")
    sidecar = json.loads((tmp_path / "run" / "mix" / "pair__000.json").read_text())
    assert sidecar["concept"] == "circle"
    assert sidecar["emotion"] is None
    assert result.records[0]["weights"][EmotionCategory.SADNESS] == 0.5
