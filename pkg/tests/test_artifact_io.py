"""
Tests for the versioned JSON envelope and the error-to-exit-code mapping.
"""

import json

import pytest

from artifact_io import (
    FORMAT_VERSION,
    dumps_artifact,
    fingerprint,
    load_json_artifact,
    major_version,
    parse_artifact,
    save_json_artifact,
)
from errors import (
    EXIT_CODES,
    ArtifactIOError,
    ConfigError,
    FingerprintError,
    FormatError,
    MaskError,
    UsageError,
    describe_exit_codes,
    exit_code_for,
)


class TestEnvelope:

    def test_save_load(self, tmp_path):
        path = save_json_artifact(tmp_path / "nested" / "model.json", 'model', {'depth': 4})
        document = load_json_artifact(path, 'model')
        assert document['depth'] == 4
        assert document['format'] == 'scalepress'
        assert document['version'] == FORMAT_VERSION

    def test_deterministic_text(self):
        a = dumps_artifact('report', {'b': 1, 'a': [1, 2]})
        b = dumps_artifact('report', {'a': [1, 2], 'b': 1})
        assert a == b
        assert a.endswith("\n")

    def test_unknown_kind(self):
        with pytest.raises(FormatError):
            dumps_artifact('image', {})

    def test_wrong_kind(self):
        with pytest.raises(FormatError):
            parse_artifact(dumps_artifact('plan', {}), 'pattern')

    def test_future_major_version(self):
        document = json.loads(dumps_artifact('plan', {}))
        document['version'] = '2.0'
        with pytest.raises(FormatError):
            parse_artifact(json.dumps(document), 'plan')

    def test_newer_minor_version_accepted(self):
        document = json.loads(dumps_artifact('plan', {'x': 1}))
        document['version'] = '1.7'
        assert parse_artifact(json.dumps(document), 'plan')['x'] == 1

    def test_missing_version(self):
        with pytest.raises(FormatError):
            parse_artifact(json.dumps({'kind': 'plan'}), 'plan')

    @pytest.mark.parametrize("text", ["{not json", "[1, 2]"])
    def test_not_an_object(self, text):
        with pytest.raises(FormatError):
            parse_artifact(text, 'plan')

    def test_bad_version_string(self):
        with pytest.raises(FormatError):
            major_version('one.zero')

    def test_missing_file(self, tmp_path):
        with pytest.raises(ArtifactIOError):
            load_json_artifact(tmp_path / "absent.json", 'model')

    def test_unwritable_path(self, tmp_path):
        blocker = tmp_path / "file"
        blocker.write_text("x")
        with pytest.raises(ArtifactIOError):
            save_json_artifact(blocker / "model.json", 'model', {})


class TestFingerprint:

    def test_key_order_irrelevant(self):
        assert fingerprint({'a': 1, 'b': [1, 2]}) == fingerprint({'b': [1, 2], 'a': 1})

    def test_value_sensitive(self):
        assert fingerprint({'a': 1}) != fingerprint({'a': 2})


class TestExitCodes:

    @pytest.mark.parametrize("error,code", [
        (ConfigError("x"), 1),
        (MaskError("x"), 1),
        (UsageError("x"), 1),
        (FormatError("x"), 1),
        (FingerprintError("x"), 3),
        (ArtifactIOError("x"), 2),
        (FileNotFoundError("x"), 2),
        (RuntimeError("x"), 1),
    ])
    def test_mapping(self, error, code):
        assert exit_code_for(error) == code

    def test_fingerprint_is_format_error(self):
        assert issubclass(FingerprintError, FormatError)

    def test_table(self):
        assert describe_exit_codes() == {0: 'ok', 1: 'usage', 2: 'io', 3: 'fingerprint'}
        assert EXIT_CODES['ok'] == 0
