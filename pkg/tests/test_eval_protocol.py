from __future__ import annotations

from collections.abc import Mapping
from typing import Any

import numpy as np
import pytest

from pamprobe.corpus import SplitSpec, split_train_test
from pamprobe.embedder import EmbeddingCache, MockBackend
from pamprobe.errors import ConfigError
from pamprobe.eval_protocol import (
    ALL,
    DregConfig,
    EvalRecord,
    EvalReport,
    FewshotConfig,
    PretrainSweep,
    SweepSpec,
    bird_reef_mixture,
    derive_seed,
    dreg,
    embed_dataset,
    fewshot_eval,
    run_cell,
    run_rotation,
    sweep,
    sweep_preset,
    three_domain_mixture,
)
from pamprobe.mixture_pretrain import MixtureConfig, PretrainHparams
from pamprobe.probe import ProbeHparams
from pamprobe.synthetic import SHARED_CLASS, SyntheticCorpus, bird_corpus, named_corpus, tone_corpus

FAST_PROBE = ProbeHparams(epochs=64, optimizer="adam", lr=0.01)
FAST_PRETRAIN = PretrainHparams(arch="t0", window_s=0.5, log_every=0)


@pytest.fixture(scope="module")
def tones() -> SyntheticCorpus:
    return tone_corpus(3, clips_per_class=14, duration_s=0.5, seed=7)


def _fewshot(**overrides: Any) -> FewshotConfig:
    options = dict(ks=(2, 4), repeats=3, min_total=None, hparams=FAST_PROBE)
    options.update(overrides)
    return FewshotConfig(**options)


def _dreg_config(**overrides: Any) -> DregConfig:
    options = dict(
        hparams=FAST_PRETRAIN,
        fewshot=_fewshot(ks=(4,), repeats=2),
        steps=20,
        batch_size=8,
        seed=3,
    )
    options.update(overrides)
    return DregConfig(**options)


def _ok(model: str, dataset: str, k: int, repeat: int, auc: float) -> EvalRecord:
    return EvalRecord(model, dataset, k, repeat, derive_seed(0, dataset, k, repeat), auc)


def _scored_by(table: Mapping[str, float]):
    def evaluate(model: Any, params: Mapping[str, Any]) -> float:
        return sum(table.get(f"{axis}={value}", 0.0) for axis, value in params.items() if axis != "validation")

    return evaluate


def test_seed_derivation_is_stable_and_cell_specific() -> None:
    seeds = {derive_seed(0, "reef0", k, repeat) for k in (4, 8, 16, 32) for repeat in range(10)}

    assert len(seeds) == 40
    assert derive_seed(5, "reef0", 4, 0) == derive_seed(5, "reef0", 4, 0)
    assert derive_seed(5, "reef0", 4, 0) != derive_seed(5, "reef1", 4, 0)


def test_fewshot_grid_has_one_record_per_cell(tones: SyntheticCorpus) -> None:
    report = fewshot_eval(tones.registry, "reef0", MockBackend(), _fewshot(), loader=tones.loader(), workers=2)

    assert len(report.records) == 6
    assert {(record.k, record.repeat) for record in report.records} == {(k, r) for k in (2, 4) for r in range(3)}
    assert report.conventions["optimizer"] == "adam"
    assert "macro" in report.conventions["auc"]


def test_distinct_tones_are_separated_by_the_mock_backend(tones: SyntheticCorpus) -> None:
    report = fewshot_eval(tones.registry, "reef1", MockBackend(), _fewshot(ks=(4,)), loader=tones.loader())

    assert all(record.status == "ok" for record in report.records)
    assert report.mean_auc() >= 0.99
    assert set(report.records[0].per_class) == {"reef1_c0", "reef1_c1", SHARED_CLASS}


def test_fewshot_is_bitwise_reproducible(tones: SyntheticCorpus) -> None:
    cfg = _fewshot(base_seed=11)

    first = fewshot_eval(tones.registry, "reef0", MockBackend(), cfg, loader=tones.loader(), workers=1)
    second = fewshot_eval(tones.registry, "reef0", MockBackend(), cfg, loader=tones.loader(), workers=4)

    assert first.records == second.records


def test_cells_use_different_splits_per_k(tones: SyntheticCorpus) -> None:
    clips = list(tones.registry.clips("reef0"))
    seed_4 = derive_seed(0, "reef0", 4, 0)
    seed_8 = derive_seed(0, "reef0", 8, 0)

    train_4, _ = split_train_test(clips, SplitSpec(4, seed_4, 2))
    train_8, _ = split_train_test(clips, SplitSpec(8, seed_8, 2))

    assert seed_4 != seed_8
    assert not {c.clip_id for c in train_4} <= {c.clip_id for c in train_8}


def test_a_cell_rerun_alone_matches_the_full_grid(tones: SyntheticCorpus) -> None:
    cfg = _fewshot()
    backend = MockBackend()
    report = fewshot_eval(tones.registry, "reef2", backend, cfg, loader=tones.loader())
    clips = list(tones.registry.clips("reef2"))
    embeddings = embed_dataset(clips, backend, loader=tones.loader())

    alone = run_cell(clips, embeddings, "reef2", 4, 2, cfg, "mock")

    assert alone == next(r for r in report.records if (r.k, r.repeat) == (4, 2))


def test_oversized_k_is_skipped_with_a_reason(tones: SyntheticCorpus) -> None:
    report = fewshot_eval(tones.registry, "reef0", MockBackend(), _fewshot(ks=(4, 16), repeats=2), loader=tones.loader())

    skipped = [record for record in report.records if record.status == "skipped"]
    assert len(report.records) == 4
    assert {record.k for record in skipped} == {16}
    assert all("needs 26" in record.reason for record in skipped)
    assert {record.k for record in report.ok()} == {4}


def test_amalgamation_runs_before_the_split(tones: SyntheticCorpus) -> None:
    # 14 clips per class is below the default 42-sample threshold: everything merges away
    report = fewshot_eval(
        tones.registry, "reef0", MockBackend(), _fewshot(ks=(4,), repeats=1, min_total=42), loader=tones.loader()
    )

    (record,) = report.records
    assert record.status == "skipped"


def test_embeddings_are_cached_and_reused(tones: SyntheticCorpus) -> None:
    cache = EmbeddingCache(spec_name="mock")
    cfg = _fewshot(ks=(4,), repeats=1)

    first = fewshot_eval(tones.registry, "reef0", MockBackend(), cfg, loader=tones.loader(), cache=cache)
    second = fewshot_eval(tones.registry, "reef0", MockBackend(), cfg, cache=cache)

    assert len(cache) == len(tones.registry.clips("reef0"))
    assert first.records == second.records


def test_aggregates_match_a_second_pass_over_the_records() -> None:
    report = EvalReport(
        [
            _ok("m", "a", 4, 0, 0.8),
            _ok("m", "a", 4, 1, 0.9),
            _ok("m", "b", 4, 0, 0.6),
            EvalRecord("m", "b", 4, 1, 1, status="failed", reason="diverged"),
        ]
    )

    rows = {(row.dataset, row.k): row for row in report.aggregates()}

    assert rows[("a", 4)].mean == pytest.approx(0.85, abs=1e-12)
    assert rows[("a", 4)].std == pytest.approx(0.05, abs=1e-12)
    assert rows[("b", 4)].n == 1
    pooled = np.array([0.8, 0.9, 0.6])
    assert rows[(ALL, 4)].mean == pytest.approx(pooled.mean(), abs=1e-12)
    assert rows[(ALL, 4)].std == pytest.approx(pooled.std(), abs=1e-12)
    assert report.mean_auc("m") == pytest.approx(pooled.mean())
    assert report.mean_auc("other") is None


def test_record_validation() -> None:
    with pytest.raises(ConfigError):
        EvalRecord("m", "d", 4, 0, 1)
    with pytest.raises(ConfigError):
        EvalRecord("m", "d", 4, 0, 1, macro_auc=1.2)
    with pytest.raises(ConfigError):
        EvalRecord("m", "d", 4, 0, 1, status="failed")
    with pytest.raises(ConfigError):
        FewshotConfig(ks=())
    with pytest.raises(ConfigError):
        FewshotConfig(ks=(64,))


def test_dreg_rotates_every_dataset_out(tones: SyntheticCorpus) -> None:
    results = dreg(tones.registry, _dreg_config(), loader=tones.loader(), workers=2)

    assert [result.holdout for result in results] == ["reef0", "reef1", "reef2"]
    for result in results:
        assert result.status == "ok"
        assert result.holdout not in result.training_datasets
        assert len(result.training_datasets) == 2
        assert {record.dataset for record in result.report.records} == {result.holdout}
        assert {record.model for record in result.report.records} == {f"toy-dreg:{result.holdout}"}


def test_single_rotation_matches_the_full_loop(tones: SyntheticCorpus) -> None:
    config = _dreg_config()
    full = dreg(tones.registry, config, holdouts=["reef0", "reef1"], loader=tones.loader())

    alone = run_rotation(tones.registry, "reef1", config, loader=tones.loader())

    assert alone.report.records == full[1].report.records
    assert alone.training_datasets == full[1].training_datasets


def test_rotation_drops_classes_only_the_holdout_has(tones: SyntheticCorpus) -> None:
    result = run_rotation(tones.registry, "reef1", _dreg_config(), loader=tones.loader())

    assert result.status == "ok"
    assert result.removed_classes == {"reef:secondary": ["reef1_c0", "reef1_c1"]}
    assert SHARED_CLASS not in result.removed_classes["reef:secondary"]
    assert "primary" not in result.removed_classes


def test_rotation_drops_the_heads_of_a_group_it_empties(tones: SyntheticCorpus) -> None:
    corpus = tones.merged(bird_corpus(clips_per_class=14, duration_s=0.5))
    mixture = bird_reef_mixture(0.5, ["reef0", "reef1"], ["bird0"], steps=10, batch_size=8)

    result = run_rotation(corpus.registry, "bird0", _dreg_config(mixture=mixture), loader=corpus.loader())

    assert result.status == "ok"
    assert result.training_datasets == ["reef0", "reef1"]
    assert result.removed_classes["bird:secondary"] == ["sp_a", "sp_b", "sp_c", "sp_d"]
    assert result.removed_classes["bird:genus"] == ["gen_a", "gen_b", "gen_c"]
    assert "reef:secondary" not in result.removed_classes


def test_rotation_failures_are_recorded_and_the_loop_continues(tones: SyntheticCorpus) -> None:
    mixture = MixtureConfig.single("reef", ["reef0"], steps=5, batch_size=4)

    results = dreg(
        tones.registry,
        _dreg_config(mixture=mixture),
        holdouts=["reef0", "reef1"],
        loader=tones.loader(),
    )

    assert results[0].status == "failed"
    assert "empty" in results[0].reason
    assert results[1].status == "ok"


def test_dreg_needs_two_datasets(tones: SyntheticCorpus) -> None:
    with pytest.raises(ConfigError):
        dreg(tones.registry.subset(["reef0"]), _dreg_config(), loader=tones.loader())


@pytest.mark.parametrize(
    ("preset", "rows"),
    [("reefset", [18]), ("reef_bird", [15, 6]), ("reef_bird_freesound", [12, 6])],
)
def test_sweep_presets_have_the_published_row_counts(preset: str, rows: list[int]) -> None:
    stages = sweep_preset(preset, validation=["v0", "v1"])

    table = sweep(stages, train_fn=lambda params: None, eval_fn=lambda model, params: 0.5)

    assert [len(stage.grid()) for stage in stages] == rows
    assert len(table) == sum(rows)


def test_stage_two_runs_with_the_stage_one_winners() -> None:
    evaluate = _scored_by({"lr=0.001": 0.3, "bird_weight=0.75": 0.2, "arch=t2": 0.1, "batch=128": 0.05})

    table = sweep(sweep_preset("reef_bird", validation=["v"]), lambda params: params, evaluate)

    stage_one = [row for row in table if row.stage == "1"]
    stage_two = [row for row in table if row.stage == "2"]
    assert (stage_one[0].params["lr"], stage_one[0].params["bird_weight"]) == (0.001, 0.75)
    assert stage_one[0].params["arch"] == "t0"
    assert all(row.params["lr"] == 0.001 and row.params["bird_weight"] == 0.75 for row in stage_two)
    assert (stage_two[0].params["arch"], stage_two[0].params["batch"]) == ("t2", 128)
    assert [row.auc for row in stage_two] == sorted((row.auc for row in stage_two), reverse=True)
    assert stage_two[0].value("lr") is None


def test_failed_configurations_rank_last() -> None:
    def evaluate(model: Any, params: Mapping[str, Any]) -> float:
        if params["lr"] == 0.01:
            raise ConfigError("diverged")
        return params["lr"] * 10

    table = sweep([SweepSpec("NA", {"lr": (0.01, 0.001, 0.0001)})], lambda params: None, evaluate)

    assert [row.params["lr"] for row in table] == [0.001, 0.0001, 0.01]
    assert table[-1].auc is None
    assert table[-1].reason == "diverged"


def test_sweep_spec_validation() -> None:
    with pytest.raises(ConfigError):
        SweepSpec("1", {"lr": ()})
    with pytest.raises(ConfigError) as exc_info:
        SweepSpec("1", {"lr": (0.1,)}, validation=("a",), training=("a", "b"))
    assert exc_info.value.field == "validation"
    with pytest.raises(ConfigError):
        sweep_preset("audioset")


def test_domain_mixtures() -> None:
    two = bird_reef_mixture(0.25, ["reef0"], ["bird0"])
    three = three_domain_mixture(0.5, ["reef0"], ["bird0"], ["freesound"])

    assert two.weights.tolist() == [0.75, 0.25]
    assert three.weights.tolist() == pytest.approx([0.1, 0.5, 0.4])
    assert three.sources[2].strip_label == "bird"
    with pytest.raises(ConfigError):
        three_domain_mixture(0.9, ["reef0"], ["bird0"], ["freesound"])


def test_pretrain_sweep_keeps_validation_out_of_training(tones: SyntheticCorpus) -> None:
    runner = PretrainSweep(
        tones.registry,
        "reef_bird",
        {"reef": ["reef0", "reef1", "reef2"], "bird": ["bird0"]},
        steps=10,
    )

    mixture = runner.mixture({"bird_weight": 0.5, "batch": 64, "validation": ("reef2",)})

    assert mixture.sources[0].datasets == ("reef0", "reef1")
    assert mixture.batch_size == 64
    assert mixture.steps == 10
    with pytest.raises(ConfigError):
        runner.evaluate(None, {"validation": ()})


def test_pretrain_sweep_trains_and_scores_one_configuration(tones: SyntheticCorpus) -> None:
    runner = PretrainSweep(
        tones.registry,
        "reefset",
        {"reef": ["reef0", "reef1", "reef2"]},
        hparams=FAST_PRETRAIN,
        fewshot=_fewshot(ks=(4,), repeats=1),
        steps=10,
        loader=tones.loader(),
    )
    params = {"arch": "t0", "lr": 0.001, "batch": 8, "validation": ("reef2",)}

    model = runner.train(params)
    auc = runner.evaluate(model, params)

    assert model.arch.name == "t0"
    assert 0.0 <= auc <= 1.0


@pytest.mark.slow
def test_desk_scale_rotation_reaches_high_holdout_auc() -> None:
    corpus = named_corpus("tones+bird", seed=0)
    reefs = [f"reef{index}" for index in range(4)]
    mixture = bird_reef_mixture(0.25, reefs, ["bird0"], steps=2000, batch_size=32)
    config = DregConfig(
        mixture=mixture, hparams=FAST_PRETRAIN, fewshot=FewshotConfig(ks=(4, 32), repeats=10), seed=0
    )

    results = dreg(corpus.registry, config, holdouts=reefs, loader=corpus.loader())

    assert len(results) == 4
    for result in results:
        assert "bird0" in result.training_datasets
        assert result.removed_classes == {"reef:secondary": [f"{result.holdout}_c0", f"{result.holdout}_c1"]}
    k32 = [r.macro_auc for result in results for r in result.report.ok() if r.k == 32]
    assert len(k32) == 40
    assert float(np.mean(k32)) >= 0.95
