"""Tests for the key = value experiment configuration."""

import pytest

from itsa_lab.config import (
    KEYS,
    ExperimentConfig,
    load_config,
    parse_config,
    serialize_config,
)
from itsa_lab.data.constants import (
    Method,
    Reduction,
    ShiftKind,
    StereoMethod,
    Suite,
    TextureKind,
)
from itsa_lab.errors import ConfigError


class TestParseConfig:
    """Tests for parse_config()."""

    def test_empty_text_gives_defaults(self):
        """Every key falls back to its default."""
        cfg = parse_config("")
        assert cfg.values == {key: spec.default for key, spec in KEYS.items()}

    def test_comments_and_blank_lines_are_ignored(self):
        """'#' lines, trailing comments and blanks are skipped."""
        cfg = parse_config(
            "# digits\n\ndigit.epochs = 5  # short run\ndigit.method = \"itsa\"\n"
        )
        assert cfg["digit.epochs"] == 5
        assert cfg["digit.method"] == "itsa"

    def test_bare_words_for_string_keys(self):
        """String values may be written without quotes."""
        cfg = parse_config("stereo.method = scp_only\nrun.id = study-1\n")
        assert cfg["stereo.method"] == "scp_only"
        assert cfg.run_id == "study-1"

    def test_integers_are_accepted_for_floats(self):
        """An integer literal is a valid float value."""
        assert parse_config("itsa.lambda = 1")["itsa.lambda"] == 1.0

    def test_booleans(self):
        """TOML booleans set boolean keys."""
        cfg = parse_config("itsa.perturbed_task_branch = true")
        assert cfg["itsa.perturbed_task_branch"] is True

    def test_unknown_key_suggests_close_match(self):
        """A misspelt key names the line and the likely intended key."""
        message = r"line 2: unknown key .itsa\.epsilom."
        with pytest.raises(ConfigError, match=message) as e:
            parse_config("run.seeds = 1\nitsa.epsilom = 0.1\n")
        assert "itsa.epsilon" in str(e.value)
        assert e.value.line == 2

    def test_duplicate_key(self):
        """Setting a key twice is an error on the second line."""
        with pytest.raises(ConfigError, match="line 3: duplicate key"):
            parse_config("digit.seed = 1\n\ndigit.seed = 2\n")

    def test_line_without_equals(self):
        """Every non-comment line needs 'key = value'."""
        with pytest.raises(ConfigError, match="line 1: expected"):
            parse_config("digit.seed 1")

    @pytest.mark.parametrize(
        "line,message",
        [
            ("digit.epochs = 1.5", "expects an integer"),
            ("digit.epochs = true", "expects an integer"),
            ("digit.lr = \"fast\"", "expects a number"),
            ("itsa.perturbed_task_branch = 1", "true or false"),
            ("digit.epochs = 0", "must be >="),
            ("itsa.epsilon = -0.1", "must be >="),
            ("digit.lr = 0", "must be > 0"),
            ("digit.method = sgd", "Available values: erm, ib, rib, itsa"),
            ("eval.shifts = acj,rain", "Available items"),
            ("scene.textures = ", "cannot parse"),
        ],
    )
    def test_invalid_values(self, line, message):
        """Wrong types, ranges and choices are reported with their line."""
        with pytest.raises(ConfigError, match=message):
            parse_config(line)

    def test_config_error_is_a_value_error(self):
        """ConfigError can be caught as ValueError."""
        with pytest.raises(ValueError):
            parse_config("nope = 1")


class TestSerialize:
    """Tests for the canonical text form."""

    def test_lists_every_key_sorted(self):
        """One line per key, in sorted order."""
        text = serialize_config(ExperimentConfig())
        keys = [line.split(" = ")[0] for line in text.splitlines()]
        assert keys == sorted(KEYS)

    def test_serialized_text_parses_back(self):
        """The canonical text reproduces the configuration."""
        cfg = parse_config(
            "digit.method = rib\nitsa.epsilon = 0.25\nrun.id = x\n"
            "itsa.perturbed_task_branch = true\n"
        )
        assert parse_config(serialize_config(cfg)) == cfg

    def test_serialization_is_canonical(self):
        """Serializing a parsed canonical text gives the same text."""
        text = serialize_config(parse_config("stereo.lr = 0.0005\n"))
        assert serialize_config(parse_config(text)) == text


class TestExperimentConfig:
    """Tests for overrides and typed views."""

    def test_overrides_are_validated(self):
        """with_overrides coerces and checks values."""
        cfg = ExperimentConfig().with_overrides({"itsa.lambda": 0, "run.seeds": 3})
        assert cfg["itsa.lambda"] == 0.0
        assert isinstance(cfg["itsa.lambda"], float)
        with pytest.raises(ConfigError, match="must be >="):
            cfg.with_overrides({"run.seeds": 0})

    def test_unknown_override(self):
        """Overrides cannot introduce keys."""
        with pytest.raises(ConfigError, match="unknown key"):
            ExperimentConfig().with_overrides({"digit.momentum": 0.9})

    @pytest.mark.parametrize(
        "overrides,message",
        [
            ({"scene.max_disparity": 64}, "width/2"),
            ({"scene.min_layers": 7}, "min_layers <= max_layers"),
            ({"stereo.stride": 3}, "power of two"),
            ({"stereo.stride": 64}, "multiple"),
            ({"digit.val_fraction": 1.0}, "must be < 1.0"),
        ],
    )
    def test_overrides_check_cross_key_rules(self, overrides, message):
        """An override that breaks a rule spanning several keys is rejected."""
        with pytest.raises(ConfigError, match=message):
            ExperimentConfig().with_overrides(overrides)

    def test_parse_checks_cross_key_rules(self):
        """A file combining valid values into an invalid scene fails to parse."""
        with pytest.raises(ConfigError, match="width/2"):
            parse_config("scene.width = 32\nscene.max_disparity = 16\n")
        cfg = parse_config("scene.width = 32\nscene.max_disparity = 8\n")
        assert cfg.scene().max_disparity == 8

    def test_overrides_do_not_mutate(self):
        """The original configuration is unchanged."""
        base = ExperimentConfig()
        base.with_overrides({"digit.epochs": 9})
        assert base["digit.epochs"] == KEYS["digit.epochs"].default

    def test_seeds_start_at_suite_seed(self):
        """run.seeds consecutive seeds from <suite>.seed."""
        cfg = parse_config("stereo.seed = 10\nrun.seeds = 3\n")
        assert cfg.seeds(Suite.STEREO) == [10, 11, 12]
        assert cfg.seeds(Suite.DIGIT) == [0, 1, 2]

    def test_typed_views(self):
        """Builders convert strings to enums and nest sub-configs."""
        cfg = parse_config(
            "digit.method = itsa\nitsa.reduction = sum\nstereo.method = itsa\n"
            "scene.textures = flat,checker\nscene.width = 64\nscene.height = 32\n"
            "scene.max_disparity = 16\n"
        )
        run = cfg.digit_run(4)
        assert run.method == Method.ITSA
        assert run.seed == 4
        assert run.scp.reduction == Reduction.SUM
        stereo = cfg.stereo_run(1)
        assert stereo.method == StereoMethod.ITSA
        assert stereo.scene.textures == (TextureKind.FLAT, TextureKind.CHECKER)
        assert cfg.shifts() == [
            ShiftKind.ACJ,
            ShiftKind.GRAY_LEFT,
            ShiftKind.GRAY_RIGHT,
            ShiftKind.SCP,
        ]

    def test_eval_epsilon_view(self):
        """scp() can read its magnitude from another key."""
        cfg = parse_config("stereo.eval_epsilon = 0.7\n")
        assert cfg.scp("stereo.eval_epsilon").epsilon == 0.7

    def test_epsilons_must_be_positive_numbers(self):
        """The Fisher sweep needs positive magnitudes."""
        assert parse_config("fisher.epsilons = 0.2, 0.1")["fisher.epsilons"]
        assert parse_config("fisher.epsilons = \"0.2,0.1\"").epsilons() == [0.2, 0.1]
        with pytest.raises(ConfigError):
            parse_config("fisher.epsilons = \"0.1,abc\"").epsilons()
        with pytest.raises(ConfigError):
            parse_config("fisher.epsilons = \"0.1,0\"").epsilons()


class TestLoadConfig:
    """Tests for load_config()."""

    def test_no_path_means_defaults(self):
        """Without a file every key has its default."""
        assert load_config(None) == ExperimentConfig()

    def test_reads_file(self, tmp_path):
        """Values come from the file on disk."""
        path = tmp_path / "run.cfg"
        path.write_text("gradcheck.instances = 2\n", encoding="utf-8")
        assert load_config(path)["gradcheck.instances"] == 2

    def test_missing_file(self, tmp_path):
        """A missing file surfaces as an OS error."""
        with pytest.raises(FileNotFoundError):
            load_config(tmp_path / "absent.cfg")
