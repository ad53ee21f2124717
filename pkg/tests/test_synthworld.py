import json
from collections import Counter

import numpy as np
import pytest
from pydantic import ValidationError

from synthworld import (
    DEFAULT_LEXICON,
    EMOTION_NAMES,
    EmotionCategory,
    UnknownConceptError,
    WorldSpec,
    generate_dataset,
    hue_distance,
    import_quadruplets,
    load_dataset,
    make_affective_prompt,
    make_world,
    measure_signature,
    render_image,
    save_dataset,
)


def test_emotion_categories_are_fixed_and_ordered():
    assert EMOTION_NAMES == [
        "amusement",
        "awe",
        "contentment",
        "excitement",
        "anger",
        "disgust",
        "fear",
        "sadness",
    ]
    assert EmotionCategory.from_name("Fear") is EmotionCategory.FEAR
    with pytest.raises(ValueError, match="amusement"):
        EmotionCategory.from_name("joy")


def test_polarity_splits_four_and_four():
    positive = [e for e in EmotionCategory if e.polarity == "positive"]
    assert [e.label for e in positive] == ["amusement", "awe", "contentment", "excitement"]


def test_default_world(world):
    assert len(world.emotion_signatures) == 8
    assert world.concepts == ["circle", "square", "triangle", "star", "cross", "ring", "stripes", "dots"]
    assert world.image_size == 32
    assert len(world.vocabulary_words()) <= 128


def test_image_size_override_passes_through():
    assert make_world(0, {"image_size": 16}).image_size == 16


def test_shared_lexicon_word_is_rejected():
    lexicon = {k: list(v) for k, v in DEFAULT_LEXICON.items()}
    lexicon["amusement"] = lexicon["amusement"] + ["dark"]
    with pytest.raises(ValidationError, match="lexicon"):
        make_world(0, {"lexicon": lexicon})


def test_hue_collision_is_rejected(world):
    signatures = {k: v.model_dump() for k, v in world.emotion_signatures.items()}
    signatures["awe"]["base_hue"] = signatures["amusement"]["base_hue"] + 10.0
    with pytest.raises(ValidationError, match="emotion_signatures"):
        make_world(0, {"emotion_signatures": signatures})


def test_styles_are_part_of_the_vocabulary(world):
    assert world.styles == ["sketch", "watercolor", "pixelated", "painted"]
    assert world.styled_content("sketch", "circle") == "a sketch circle"
    assert {"sketch", "watercolor"} <= set(world.vocabulary_words())
    assert world.find_concept("a watercolor star") == "star"
    with pytest.raises(ValueError, match="Unknown style"):
        world.styled_content("cubist", "circle")


def test_style_clashing_with_a_cue_word_is_rejected():
    with pytest.raises(ValidationError, match="styles"):
        make_world(0, {"styles": ["sketch", "dark"]})


def test_world_without_styles_in_meta_still_loads(world):
    data = world.model_dump()
    data.pop("styles")
    assert WorldSpec.model_validate(data).styles == world.styles


def test_duplicate_concepts_are_rejected():
    with pytest.raises(ValidationError, match="concepts"):
        make_world(0, {"concepts": ["circle", "circle"]})


@pytest.mark.parametrize("emotion", list(EmotionCategory))
def test_render_matches_signature(world, emotion):
    signature = world.signature(emotion)
    for concept in world.concepts:
        hue, lum = measure_signature(render_image(world, concept, emotion, 1))
        assert hue_distance(hue, signature.base_hue) <= 10.0
        assert abs(lum - signature.brightness) <= 0.05


def test_render_is_deterministic(world):
    a = render_image(world, "circle", EmotionCategory.SADNESS, 1)
    b = render_image(world, "circle", EmotionCategory.SADNESS, 1)
    assert a.shape == (32, 32, 3)
    assert a.dtype == np.float32
    assert np.array_equal(a, b)
    assert 0.0 <= a.min() and a.max() <= 1.0


def test_render_unknown_concept_lists_valid(world):
    with pytest.raises(UnknownConceptError, match="circle"):
        render_image(world, "pyramid", EmotionCategory.AWE, 1)


def test_affective_prompt_membership(world):
    vocabulary = set(world.vocabulary_words())
    for seed in range(100):
        prompt = make_affective_prompt(world, "circle", EmotionCategory.FEAR, seed)
        words = prompt.split()
        assert words.count("circle") == 1
        assert any(w in world.cue_words(EmotionCategory.FEAR) for w in words)
        assert set(words) <= vocabulary
        other = {world.emotion_of_word(w) for w in words} - {None}
        assert other == {EmotionCategory.FEAR}


def test_affective_prompt_is_deterministic(world):
    a = make_affective_prompt(world, "circle", EmotionCategory.FEAR, 3)
    assert a == make_affective_prompt(world, "circle", EmotionCategory.FEAR, 3)


def test_affective_prompt_unknown_concept(world):
    with pytest.raises(UnknownConceptError):
        make_affective_prompt(world, "pyramid", EmotionCategory.FEAR, 3)


def test_generate_dataset_balance(world):
    data = generate_dataset(world, 800, "train", 0)
    assert len(data) == 800
    counts = Counter(q.emotion for q in data)
    assert all(70 <= counts[e] <= 130 for e in EmotionCategory)
    contents = Counter(q.content == q.concept for q in data)
    assert contents[True] > 0 and contents[False] > 0
    for q in data[:50]:
        assert q.concept in q.affective_prompt.split()
        assert q.content in (q.concept, world.neutral_caption(q.concept))


def test_generate_single_item(world):
    (q,) = generate_dataset(world, 1, "test", 0)
    assert q.image.shape == (32, 32, 3)
    assert any(w in world.cue_words(q.emotion) for w in q.affective_prompt.split())


def test_generate_rejects_empty(world):
    with pytest.raises(ValueError):
        generate_dataset(world, 0, "train", 0)


def test_splits_use_disjoint_streams(world):
    train = generate_dataset(world, 8, "train", 0)
    test = generate_dataset(world, 8, "test", 0)
    assert [q.affective_prompt for q in train] != [q.affective_prompt for q in test]


def test_dataset_round_trip_through_disk(tmp_path, small_world):
    data = generate_dataset(small_world, 6, "train", 0)
    save_dataset(small_world, data, tmp_path / "train")

    records = [json.loads(line) for line in (tmp_path / "train" / "data.jsonl").read_text().splitlines()]
    assert records[0]["image"] == "images/000000.png"
    assert records[0]["emotion"] == data[0].emotion.label

    world, loaded = load_dataset(tmp_path / "train")
    assert world == small_world
    assert [q.affective_prompt for q in loaded] == [q.affective_prompt for q in data]
    # PNG quantization only
    assert np.abs(loaded[0].image - data[0].image).max() <= 1.0 / 255.0 + 1e-6


def test_import_infers_concept_from_caption(tmp_path, small_world):
    data = generate_dataset(small_world, 2, "train", 0)
    save_dataset(small_world, data, tmp_path)
    lines = (tmp_path / "data.jsonl").read_text().splitlines()
    stripped = []
    for line in lines:
        record = json.loads(line)
        record.pop("concept")
        stripped.append(json.dumps(record))
    (tmp_path / "external.jsonl").write_text("\n".join(stripped) + "\n")

    imported = import_quadruplets(tmp_path / "external.jsonl", small_world)
    assert [q.concept for q in imported] == [q.concept for q in data]


def test_import_rejects_out_of_vocabulary_words(tmp_path, small_world):
    data = generate_dataset(small_world, 1, "train", 0)
    save_dataset(small_world, data, tmp_path)
    record = json.loads((tmp_path / "data.jsonl").read_text())
    record["affective_prompt"] = record["affective_prompt"] + " pyramid"
    (tmp_path / "bad.jsonl").write_text(json.dumps(record) + "\n")
    with pytest.raises(ValueError, match="pyramid"):
        import_quadruplets(tmp_path / "bad.jsonl", small_world)


def test_import_rejects_image_size_mismatch(tmp_path, small_world, world):
    data = generate_dataset(small_world, 1, "train", 0)
    save_dataset(small_world, data, tmp_path)
    with pytest.raises(ValueError, match="image_size"):
        import_quadruplets(tmp_path / "data.jsonl", world)
