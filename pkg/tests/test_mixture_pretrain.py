from __future__ import annotations

import math
from collections import Counter
from dataclasses import replace
from pathlib import Path

import numpy as np
import pytest
from conftest import make_clips, make_registry

from pamprobe.audio_io import Waveform, synth
from pamprobe.corpus import LabeledClip, filter_ambient
from pamprobe.embedder import embed_clip
from pamprobe.errors import ConfigError
from pamprobe.mixture_pretrain import (
    AugmentConfig,
    HeadSpec,
    MixtureConfig,
    MixtureSource,
    PretrainHparams,
    ToyArchitecture,
    ToyEmbedderModel,
    augment_gain,
    build_feature_bank,
    build_heads,
    clean_loss,
    exclude_holdout_classes,
    labeled_draws,
    mix_examples,
    mixture_clips,
    mixup,
    multi_head_loss,
    pretrain_toy,
    sample_stream,
    strip_labeled,
)
from pamprobe.synthetic import SHARED_CLASS, SyntheticCorpus, bird_corpus

FAST = PretrainHparams(arch="t0", window_s=0.5, log_every=0)


def _mixture(*sources: tuple[str, float, tuple[str, ...]], **options) -> MixtureConfig:
    return MixtureConfig(tuple(MixtureSource(group, weight, datasets) for group, weight, datasets in sources), **options)


def _draw_counts(weights: dict[str, float], n: int, seed: int = 0) -> Counter[str]:
    mixture = _mixture(*((group, weight, (group,)) for group, weight in weights.items()))
    sources = {group: make_clips(group, {("biophony", "x"): 7}) for group in weights}
    stream = sample_stream(mixture, sources, seed)
    return Counter(next(stream).group for _ in range(n))


def _tiny_model(
    heads: list[HeadSpec],
    rng: np.random.Generator,
    *,
    n_features: int = 5,
    width: int = 6,
    depth: int = 2,
    embedding_dim: int = 4,
) -> ToyEmbedderModel:
    arch = ToyArchitecture("tiny", width, depth, embedding_dim)
    fan_in = [n_features] + [width] * depth
    shapes = {f"hidden{layer}": (fan_in[layer], width) for layer in range(depth)}
    shapes["embedding"] = (fan_in[-1], embedding_dim)
    shapes.update({f"head:{head.name}": (embedding_dim, len(head.classes)) for head in heads})
    params = {}
    for name, shape in shapes.items():
        # float32-representable values
        params[f"{name}.W"] = rng.normal(0.0, 0.7, shape).astype(np.float32).astype(np.float64)
        params[f"{name}.b"] = rng.normal(0.0, 0.1, shape[1]).astype(np.float32).astype(np.float64)
    return ToyEmbedderModel(
        arch,
        heads,
        params,
        hparams=PretrainHparams(),
        feature_mean=np.zeros(n_features),
        feature_std=np.ones(n_features),
        inference_gain=0.2,
    )


def test_mixture_weights_must_sum_to_one() -> None:
    with pytest.raises(ConfigError) as exc_info:
        _mixture(("a", 0.6, ("a",)), ("b", 0.6, ("b",)))
    assert exc_info.value.field == "weight"

    with pytest.raises(ConfigError):
        _mixture(("a", 0.5, ("a",)), ("a", 0.5, ("b",)))
    with pytest.raises(ConfigError):
        AugmentConfig(gain_min=0.3, gain_max=0.2)
    with pytest.raises(ConfigError):
        AugmentConfig(mixup_p=1.5)


def test_mixture_payload_is_schema_checked_and_roundtrips() -> None:
    payload = {
        "sources": [
            {"group": "reef", "weight": 0.9, "datasets": ["reef0", "reef1"]},
            {"group": "freesound", "weight": 0.1, "datasets": ["freesound"], "strip_label": "bird"},
        ],
        "steps": 10,
    }

    mixture = MixtureConfig.from_payload(payload)

    assert mixture.groups == ["reef", "freesound"]
    assert mixture.sources[1].strip_label == "bird"
    assert mixture.steps == 10
    assert MixtureConfig.from_payload(mixture.to_payload()) == mixture
    with pytest.raises(ConfigError):
        MixtureConfig.from_payload({"sources": [{"group": "reef", "weight": 0, "datasets": ["r"]}]})


def test_removing_a_dataset_renormalises_the_remaining_sources() -> None:
    mixture = _mixture(("reef", 0.5, ("reef0", "reef1")), ("bird", 0.5, ("bird0",)))

    without_bird = mixture.without_dataset("bird0")
    without_reef0 = mixture.without_dataset("reef0")

    assert without_bird.groups == ["reef"]
    assert without_bird.sources[0].weight == 1.0
    assert without_reef0.sources[0].datasets == ("reef1",)
    with pytest.raises(ConfigError):
        MixtureConfig.single("reef", ["reef0"]).without_dataset("reef0")


@pytest.mark.parametrize("weights", [{"a": 0.9, "b": 0.1}, {"a": 0.5, "b": 0.4, "c": 0.1}])
def test_source_frequencies_follow_the_weights(weights: dict[str, float]) -> None:
    n = 100_000

    counts = _draw_counts(weights, n)

    for group, weight in weights.items():
        sigma = math.sqrt(weight * (1 - weight) / n)
        assert abs(counts[group] / n - weight) <= 4 * sigma


def test_source_cycles_without_repeats_within_a_pass() -> None:
    mixture = _mixture(("big", 0.5, ("big",)), ("small", 0.5, ("small",)))
    sources = {
        "big": make_clips("big", {("biophony", "x"): 50}),
        "small": make_clips("small", {("biophony", "y"): 5}),
    }
    stream = sample_stream(mixture, sources, seed=4)

    small = [draw.clip.clip_id for draw in (next(stream) for _ in range(200)) if draw.group == "small"]

    for start in range(0, len(small) - 4, 5):
        assert sorted(small[start : start + 5]) == sorted(clip.clip_id for clip in sources["small"])


def test_single_source_stream_is_a_sequence_of_permutations() -> None:
    clips = make_clips("a", {("biophony", "x"): 6})
    stream = sample_stream(MixtureConfig.single("a", ["a"]), {"a": clips}, seed=1)

    passes = [[next(stream).clip.clip_id for _ in range(6)] for _ in range(4)]

    assert all(sorted(p) == sorted(c.clip_id for c in clips) for p in passes)
    assert len({tuple(p) for p in passes}) > 1


def test_stream_is_seeded_and_rejects_empty_sources() -> None:
    assert _draw_counts({"a": 0.7, "b": 0.3}, 500, seed=2) == _draw_counts({"a": 0.7, "b": 0.3}, 500, seed=2)

    with pytest.raises(ConfigError):
        next(sample_stream(MixtureConfig.single("a", ["a"]), {"a": []}, seed=0))


def test_mixture_clips_filter_ambient_and_strip_labels() -> None:
    registry = make_registry(
        reef={("biophony", "grunt"): 5, ("ambient", None): 2},
        freesound={("anthrophony", "engine"): 4, ("biophony", "bird"): 3},
    )
    mixture = MixtureConfig(
        (MixtureSource("reef", 0.5, ("reef",)), MixtureSource("freesound", 0.5, ("freesound",), "bird"))
    )

    sources = mixture_clips(mixture, registry)

    assert len(sources["reef"]) == 5
    assert {clip.secondary for clip in sources["freesound"]} == {"engine"}


def test_strip_labeled_counts() -> None:
    clips = make_clips("fs", {("anthrophony", "engine"): 97, ("biophony", "bird"): 3})

    assert len(strip_labeled(clips)) == 97
    assert strip_labeled(clips, "owl") == clips
    assert strip_labeled(make_clips("fs", {("biophony", "bird"): 4})) == []


def test_gain_augmentation_sets_the_peak(rng: np.random.Generator) -> None:
    wave = synth("noise", 0.5, 16_000, seed=3, amplitude=0.7)

    peaks = [augment_gain(wave, rng).peak for _ in range(50)]
    normalised = augment_gain(wave, rng, 1.0, 1.0)
    silent = synth("silence", 0.5, 16_000)

    assert all(0.15 - 1e-6 <= peak <= 0.25 + 1e-6 for peak in peaks)
    assert normalised.peak == pytest.approx(1.0, abs=1e-6)
    assert augment_gain(silent, rng) is silent


def test_mixup_with_zero_probability_is_the_identity(rng: np.random.Generator) -> None:
    features = rng.normal(size=(8, 3))
    targets = {"h": np.eye(4)[rng.integers(0, 4, 8)]}
    masks = {"h": np.ones(8, dtype=bool)}

    batch = mixup(features, targets, masks, 0.0, rng)

    np.testing.assert_array_equal(batch.features, features)
    np.testing.assert_array_equal(batch.targets["h"], targets["h"])
    assert not batch.mixed.any()


def test_mixup_rate_and_partner_choice(rng: np.random.Generator) -> None:
    n = 100_000
    features = np.arange(n, dtype=np.float64)[:, None]

    batch = mixup(features, {}, {}, 0.75, rng)

    rate = batch.mixed.mean()
    assert abs(rate - 0.75) <= 4 * math.sqrt(0.75 * 0.25 / n)
    assert np.all((batch.partners[batch.mixed] >= 0) & (batch.partners[batch.mixed] < n))
    assert np.all((batch.lambdas >= 0) & (batch.lambdas <= 1))


def test_mixup_partners_are_uniform_over_the_whole_batch(rng: np.random.Generator) -> None:
    n, trials = 4, 20_000
    features = np.arange(n, dtype=np.float64)[:, None]
    counts = np.zeros((n, n))

    for _ in range(trials):
        batch = mixup(features, {}, {}, 1.0, rng)
        counts[np.arange(n), batch.partners] += 1

    band = 4 * math.sqrt(trials * (1 / n) * (1 - 1 / n))
    assert np.all(np.abs(counts - trials / n) <= band)


def test_mixup_keeps_targets_on_the_simplex(rng: np.random.Generator) -> None:
    targets = {"h": np.eye(3)[rng.integers(0, 3, 64)]}

    batch = mixup(rng.normal(size=(64, 2)), targets, {"h": np.ones(64, dtype=bool)}, 0.75, rng, alpha=0.4)

    np.testing.assert_allclose(batch.targets["h"].sum(axis=1), 1.0)
    assert np.all(batch.targets["h"] >= 0)


def test_mixing_endpoints_and_one_sided_targets() -> None:
    features = np.array([[1.0, 2.0], [3.0, 5.0]])
    targets = {"h": np.array([[1.0, 0.0], [0.0, 0.0]])}
    masks = {"h": np.array([True, False])}

    batch = mix_examples(features, targets, masks, np.array([1, 0]), np.array([1.0, 0.0]))

    np.testing.assert_array_equal(batch.features, [[1.0, 2.0], [1.0, 2.0]])
    np.testing.assert_array_equal(batch.targets["h"], [[1.0, 0.0], [1.0, 0.0]])
    assert batch.masks["h"].tolist() == [True, True]


def test_mixup_of_a_single_example_counts_a_missing_partner(rng: np.random.Generator) -> None:
    features = np.ones((1, 4))

    batch = mixup(features, {}, {}, 0.75, rng)

    assert batch.no_partner == 1
    np.testing.assert_array_equal(batch.features, features)


def test_single_head_loss_is_plain_cross_entropy(rng: np.random.Generator) -> None:
    head = HeadSpec("h", ("a", "b", "c"))
    logits = rng.normal(size=(6, 3))
    targets = np.eye(3)[rng.integers(0, 3, 6)]
    log_p = logits - np.log(np.exp(logits).sum(axis=1, keepdims=True))

    loss = multi_head_loss({"h": logits}, {"h": targets}, [head])

    assert loss.total == pytest.approx(-np.mean(np.sum(targets * log_p, axis=1)))


def test_head_weights_scale_the_total() -> None:
    heads = [HeadSpec("a", ("x", "y", "z")), HeadSpec("b", ("x", "y", "z"), loss_weight=0.1)]
    # uniform logits against a hard target cost ln 3 per head
    logits = {name: np.zeros((2, 3)) for name in ("a", "b")}
    targets = {name: np.array([[1.0, 0, 0], [0, 1.0, 0]]) for name in ("a", "b")}

    loss = multi_head_loss(logits, targets, heads)

    assert loss.per_head["a"] == pytest.approx(math.log(3))
    assert loss.total == pytest.approx(1.1 * math.log(3))


def test_head_loss_gradient_is_weighted_softmax_residual(rng: np.random.Generator) -> None:
    head = HeadSpec("h", ("a", "b", "c", "d"), loss_weight=0.1)
    logits = rng.normal(size=(5, 4))
    targets = np.eye(4)[rng.integers(0, 4, 5)]

    grad = multi_head_loss({"h": logits}, {"h": targets}, [head]).grads["h"]

    softmax = np.exp(logits) / np.exp(logits).sum(axis=1, keepdims=True)
    np.testing.assert_allclose(grad, 0.1 * (softmax - targets) / 5)
    numeric = np.zeros_like(logits)
    for index in np.ndindex(logits.shape):
        up, down = logits.copy(), logits.copy()
        up[index] += 1e-5
        down[index] -= 1e-5
        diff = multi_head_loss({"h": up}, {"h": targets}, [head]).total
        diff -= multi_head_loss({"h": down}, {"h": targets}, [head]).total
        numeric[index] = diff / 2e-5
    np.testing.assert_allclose(grad, numeric, rtol=1e-6, atol=1e-10)


def test_masked_rows_do_not_contribute_but_count_toward_the_batch() -> None:
    head = HeadSpec("sec", ("a", "b"), label_key="secondary")
    logits = np.array([[2.0, 0.0], [50.0, -50.0]])
    targets = np.array([[1.0, 0.0], [0.0, 0.0]])

    loss = multi_head_loss({"sec": logits}, {"sec": targets}, [head], {"sec": np.array([True, False])})

    p = 1.0 / (1.0 + math.exp(-2.0))
    assert loss.per_head["sec"] == pytest.approx(math.log1p(math.exp(-2.0)) / 2)
    np.testing.assert_allclose(loss.grads["sec"][0], [(p - 1.0) / 2, (1.0 - p) / 2])
    assert not np.any(loss.grads["sec"][1])


def test_head_loss_names_the_mismatched_head() -> None:
    heads = [HeadSpec("primary", ("a", "b")), HeadSpec("reef:secondary", ("x", "y", "z"))]
    logits = {"primary": np.zeros((2, 2)), "reef:secondary": np.zeros((2, 2))}
    targets = {"primary": np.zeros((2, 2)), "reef:secondary": np.zeros((2, 2))}

    with pytest.raises(ConfigError) as exc_info:
        multi_head_loss(logits, targets, heads)

    assert exc_info.value.field == "reef:secondary"
    assert "reef:secondary" in exc_info.value.message


def test_holdout_exclusive_classes_are_removed() -> None:
    registry = make_registry(
        a={("biophony", "grunt"): 3, ("biophony", "shared"): 3},
        b={("anthrophony", "boat"): 3, ("biophony", "shared"): 3},
    )
    heads = [
        HeadSpec("primary", ("anthrophony", "biophony")),
        HeadSpec("reef:secondary", ("boat", "grunt", "shared"), label_key="secondary"),
    ]

    out = exclude_holdout_classes(heads, "a", registry)

    assert out[0].classes == ("anthrophony", "biophony")
    assert out[1].classes == ("boat", "shared")


def test_heads_cover_groups_and_taxonomy(small_tones: SyntheticCorpus) -> None:
    corpus = small_tones.merged(bird_corpus(clips_per_class=4))
    mixture = _mixture(("reef", 0.5, ("reef0", "reef1")), ("bird", 0.5, ("bird0",)))

    heads = {head.name: head for head in build_heads(mixture, corpus.registry)}

    assert list(heads) == ["primary", "reef:secondary", "bird:secondary", "bird:genus", "bird:family", "bird:order"]
    assert heads["primary"].classes == ("anthrophony", "biophony")
    assert heads["reef:secondary"].classes == ("reef0_c0", "reef0_c1", "reef1_c0", "reef1_c1", SHARED_CLASS)
    assert heads["bird:secondary"].loss_weight == 1.0
    assert heads["bird:genus"].loss_weight == 0.1
    assert heads["bird:genus"].classes == ("gen_a", "gen_b", "gen_c")


def test_group_heads_only_train_on_their_own_group() -> None:
    head = HeadSpec("bird:secondary", ("sp_a",), label_key="secondary", group="bird")
    clip = LabeledClip("bird0", "c", "biophony", "sp_a")

    assert head.target_index(clip, "bird") == 0
    assert head.target_index(clip, "reef") is None


def test_toy_network_gradients_match_central_differences(rng: np.random.Generator) -> None:
    for config in range(20):
        n_features, width, depth, embedding_dim, batch = (
            int(v) for v in rng.integers((2, 2, 0, 2, 2), (7, 8, 3, 6, 7))
        )
        heads = [
            HeadSpec(
                f"h{index}",
                tuple(f"c{c}" for c in range(int(rng.integers(2, 5)))),
                float(rng.choice([1.0, 0.1])),
            )
            for index in range(int(rng.integers(1, 4)))
        ]
        model = _tiny_model(
            heads, rng, n_features=n_features, width=width, depth=depth, embedding_dim=embedding_dim
        )
        features = rng.normal(size=(batch, n_features)).astype(np.float32).astype(np.float64)
        targets = {
            head.name: np.eye(len(head.classes))[rng.integers(0, len(head.classes), batch)] for head in heads
        }
        masks = {head.name: rng.random(batch) < 0.7 for head in heads}

        _, grads = model.loss_and_grads(features, targets, masks)

        for name, param in model.params.items():
            numeric = np.zeros_like(param)
            for index in np.ndindex(param.shape):
                saved = param[index]
                param[index] = saved + 1e-6
                up = model.loss_and_grads(features, targets, masks)[0].total
                param[index] = saved - 1e-6
                down = model.loss_and_grads(features, targets, masks)[0].total
                param[index] = saved
                numeric[index] = (up - down) / 2e-6
            error = np.max(np.abs(grads[name] - numeric) / np.maximum(np.abs(numeric), 1e-2), initial=0.0)
            assert error < 1e-3, f"config {config}, {name}: relative error {error:.2e}"


def test_toy_model_save_and_load_roundtrip(tmp_path: Path, rng: np.random.Generator) -> None:
    heads = [HeadSpec("primary", ("anthrophony", "biophony"))]
    model = ToyEmbedderModel.initialize(heads, FAST, seed=3)
    features = rng.normal(size=(3, 128))

    path = model.save(tmp_path / "toy")
    loaded = ToyEmbedderModel.load(path)

    assert path.suffix == ".json"
    assert (tmp_path / "toy.npz").exists()
    assert loaded.arch == model.arch
    assert loaded.heads == model.heads
    np.testing.assert_array_equal(loaded.embed_features(features), model.embed_features(features))


def test_toy_model_serves_as_an_embedding_backend() -> None:
    model = ToyEmbedderModel.initialize([HeadSpec("primary", ("anthrophony", "biophony"))], FAST, seed=0)
    wave = synth("noise", 1.2, 16_000, seed=8, amplitude=0.4)
    clip = LabeledClip("d", "c", "biophony")

    vector = embed_clip(clip, model, loader=lambda _: wave)

    assert model.spec.input_rate == 32_000
    assert vector.dim == 64
    assert np.all(np.isfinite(vector.values))


def test_unknown_architecture_is_a_config_error() -> None:
    with pytest.raises(ConfigError) as exc_info:
        PretrainHparams(arch="b7")
    assert exc_info.value.field == "arch"


def test_zero_steps_leave_the_initialisation(small_tones: SyntheticCorpus) -> None:
    mixture = MixtureConfig.single("reef", ["reef0", "reef1"], steps=0)
    heads = build_heads(mixture, small_tones.registry)

    model = pretrain_toy(mixture, small_tones.registry, heads, FAST, seed=5, loader=small_tones.loader())
    initial = ToyEmbedderModel.initialize(heads, FAST, seed=5)

    assert model.history == []
    for name, value in initial.params.items():
        np.testing.assert_array_equal(model.params[name], value)


def test_pretraining_is_deterministic_and_lowers_the_loss(small_tones: SyntheticCorpus) -> None:
    registry = small_tones.registry
    mixture = MixtureConfig.single("reef", ["reef0", "reef1"], steps=150, batch_size=16)
    heads = build_heads(mixture, registry)
    clips = filter_ambient(registry.all_clips(["reef0", "reef1"]))
    bank = build_feature_bank(clips, FAST, loader=small_tones.loader(), workers=2)
    draws = labeled_draws(mixture_clips(mixture, registry))

    before = pretrain_toy(replace(mixture, steps=0), registry, heads, FAST, seed=1, bank=bank)
    after = pretrain_toy(mixture, registry, heads, FAST, seed=1, bank=bank)
    again = pretrain_toy(replace(mixture, steps=5), registry, heads, FAST, seed=1, bank=bank)

    assert len(after.history) == 150
    assert again.history == after.history[:5]
    assert clean_loss(after, bank, draws) < 0.5 * clean_loss(before, bank, draws)


def test_toy_embedding_ignores_input_level(small_tones: SyntheticCorpus) -> None:
    model = ToyEmbedderModel.initialize([HeadSpec("primary", ("anthrophony", "biophony"))], FAST, seed=0)
    clip = small_tones.registry.clips("reef0")[0]
    wave = small_tones.loader()(clip)
    quiet = Waveform(wave.samples * 0.1, wave.sample_rate)

    loud_vec = model.embed_batch([wave])
    quiet_vec = model.embed_batch([quiet])

    np.testing.assert_allclose(loud_vec, quiet_vec, rtol=1e-5, atol=1e-6)
