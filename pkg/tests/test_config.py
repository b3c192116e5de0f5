"""Config schema tests: strict parsing, defaults, cross-section validation."""

import textwrap

import pytest

from mstd.config import (
    CONFIG_VERSION,
    DataConfig,
    ModelsConfig,
    ReportConfig,
    RunConfig,
    load_config,
    parse_config,
    teacher_count,
    validate_config,
)
from mstd.errors import ConfigError


def write_yaml(tmp_path, text):
    p = tmp_path / "cfg.yaml"
    p.write_text(textwrap.dedent(text), encoding="utf-8")
    return p


# -- defaults ----------------------------------------------------------------


def test_empty_doc_gives_reference_defaults():
    cfg = parse_config({})
    assert cfg.version == CONFIG_VERSION
    assert cfg.data.source == "synthetic"
    assert cfg.data.classes == 4
    assert cfg.data.samples == 2000
    assert cfg.data.dims == (32, 32)
    assert cfg.data.informativeness == (1.0, 0.3)
    assert cfg.data.shared_factor == 0.7
    assert cfg.data.noise == 0.5
    assert cfg.data.split == (0.6, 0.2, 0.2)
    assert cfg.plan.target == 2  # the weak modality
    assert cfg.plan.k == 1
    assert cfg.plan.temperature == 2.0
    assert cfg.plan.lambda1.value_at(0) == 1.0
    assert cfg.plan.lambda1.value_at(30) == 0.5
    assert cfg.plan.lambda2.value_at(10) == pytest.approx(0.9)
    assert cfg.report.seeds == (1, 2, 3, 4, 5)


def test_empty_sections_keep_defaults():
    cfg = parse_config({"data": None, "plan": {}, "train": None})
    assert cfg == RunConfig()


def test_full_yaml_roundtrip(tmp_path):
    p = write_yaml(
        tmp_path,
        """
        version: 1
        data:
          source: synthetic
          classes: 3
          samples: 150
          dims: [6, 5, 4]
          informativeness: [1.0, 0.5, 0.2]
          shared_factor: 0.6
          noise: 0.4
          split: [0.5, 0.25, 0.25]
        models:
          unimodal_hidden: [[8, 8], [8], [8, 8]]
          encoder_hidden: [[6], [6], [6]]
          fusion_hidden: [10, 8]
          taps: {0: [f1], 1: [h0, h1]}
          masknet_hidden: 8
          masknet_heads: 2
          gatenet_hidden: 9
        plan:
          target: 2
          stage1: independent
          stage2: trained
          stage3: dynamic
          k: 2
          temperature: 3.0
          detach_align: true
          lambda1: {initial: 0.5, factor: 0.5, period: 5}
          lambda2: {initial: 1.0, factor: 0.8, period: 2}
          lb_variant: cv
          weight_dkd_by_confidence: true
          tau_sq_rescale: true
        train:
          batch_size: 8
          lr: 0.002
          optimizer: sgd
          epochs: {s1: 3, s2: 2, s3: 4}
        report:
          out_dir: /tmp/nowhere
          seeds: [3, 9]
        """,
    )
    cfg = load_config(p)
    assert cfg.data.dims == (6, 5, 4)
    assert cfg.models.taps == {0: ["f1"], 1: ["h0", "h1"]}
    assert cfg.models.gatenet_hidden == 9
    assert cfg.plan.stage1 == "independent"
    assert cfg.plan.detach_align is True
    assert cfg.plan.lambda1.value_at(5) == 0.25
    assert cfg.plan.lb_variant == "cv"
    assert cfg.train.optimizer == "sgd"
    assert cfg.train.epochs_s2 == 2
    assert cfg.report.seeds == (3, 9)
    # taps {0: f1, 1: h0+h1} with target 2: three teachers
    assert teacher_count(cfg, 2) == 3


# -- strictness ---------------------------------------------------------------


@pytest.mark.parametrize(
    "doc,needle",
    [
        ({"bogus": 1}, "config"),
        ({"data": {"classses": 3}}, "data"),
        ({"models": {"hidden": [8]}}, "models"),
        ({"plan": {"stage4": "x"}}, "plan"),
        ({"train": {"momentum": 0.9}}, "train"),
        ({"train": {"epochs": {"s4": 1}}}, "train.epochs"),
        ({"report": {"seed": 1}}, "report"),
        ({"plan": {"lambda1": {"rate": 2}}}, "plan.lambda1"),
    ],
)
def test_unknown_keys_rejected_with_path(doc, needle):
    with pytest.raises(ConfigError, match=needle):
        parse_config(doc)


def test_wrong_version_rejected():
    with pytest.raises(ConfigError, match="version"):
        parse_config({"version": 2})


def test_non_mapping_section_rejected():
    with pytest.raises(ConfigError, match="mapping"):
        parse_config({"data": [1, 2]})


def test_plan_bool_fields_must_be_bool():
    with pytest.raises(ConfigError, match="boolean"):
        parse_config({"plan": {"detach_align": "yes"}})


def test_missing_file_is_config_error(tmp_path):
    with pytest.raises(ConfigError, match="not found"):
        load_config(tmp_path / "nope.yaml")


def test_invalid_yaml_is_config_error(tmp_path):
    p = tmp_path / "bad.yaml"
    p.write_text("data: [unterminated", encoding="utf-8")
    with pytest.raises(ConfigError, match="YAML"):
        load_config(p)


# -- section constraints --------------------------------------------------------


def test_external_requires_path():
    with pytest.raises(ConfigError, match="path"):
        DataConfig(source="external")


def test_synthetic_rejects_path():
    with pytest.raises(ConfigError, match="path"):
        DataConfig(source="synthetic", path="x.mstd")


def test_bad_source_rejected():
    with pytest.raises(ConfigError, match="source"):
        DataConfig(source="csv")


def test_masknet_divisibility():
    with pytest.raises(ConfigError, match="divisible"):
        ModelsConfig(masknet_hidden=10, masknet_heads=3)


def test_empty_seeds_rejected():
    with pytest.raises(ConfigError, match="seeds"):
        ReportConfig(seeds=())


def test_taps_mapping_must_be_lists():
    with pytest.raises(ConfigError, match="taps"):
        parse_config({"models": {"taps": {0: "f0"}}})


def test_taps_bad_model_key():
    with pytest.raises(ConfigError, match="model index"):
        parse_config({"models": {"taps": {"fusion": ["f0"]}}})


# -- cross-section validation ----------------------------------------------------


def test_target_out_of_range():
    with pytest.raises(ConfigError, match="target"):
        parse_config({"plan": {"target": 3}})  # only 2 modalities by default


def test_stack_count_mismatch():
    with pytest.raises(ConfigError, match="unimodal_hidden"):
        parse_config({"models": {"unimodal_hidden": [[8]]}})
    with pytest.raises(ConfigError, match="encoder_hidden"):
        parse_config({"models": {"encoder_hidden": [[8]]}})


def test_unknown_tap_rejected():
    with pytest.raises(ConfigError, match="does not exist"):
        parse_config({"models": {"taps": {1: ["h7"]}}})


def test_tap_on_unbuilt_model_rejected():
    with pytest.raises(ConfigError, match="no architecture"):
        parse_config({"models": {"taps": {5: ["h0"]}}})


def test_k_exceeding_teacher_count_rejected():
    # one tap on the fusion model and the target excluded: one teacher only
    with pytest.raises(ConfigError, match="plan.k"):
        parse_config({"models": {"taps": {0: ["f0"]}}, "plan": {"k": 2}})


def test_k_check_skipped_when_stage2_skipped():
    cfg = parse_config({"plan": {"stage2": "skip", "k": 99}})
    validate_config(cfg)  # no teachers, no k constraint


def test_default_teacher_count_for_reference():
    # two default taps on each of fusion + non-target unimodal
    cfg = parse_config({})
    assert teacher_count(cfg, cfg.plan.target) == 4


def test_single_layer_stacks_give_one_default_tap():
    cfg = parse_config(
        {
            "models": {
                "unimodal_hidden": [[8], [8]],
                "encoder_hidden": [[4], [4]],
                "fusion_hidden": [8],
            }
        }
    )
    assert teacher_count(cfg, 2) == 2
