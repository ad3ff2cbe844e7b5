from pathlib import Path

from src import __version__
from src.firespread import config_store, provenance


def test_version_banner():
    banner = provenance.version_banner()
    assert banner.startswith(f"firespread {__version__} (")
    assert f"document format {config_store.FORMAT_VERSION}" in banner


def test_version_check_reports_missing_packages():
    versions = provenance.version_check(["numpy", "surely-not-installed-pkg"])
    assert versions["numpy"]
    assert versions["surely-not-installed-pkg"] is None


def test_resolved_config(tmp_path: Path):
    record = provenance.resolved_config("folds", {"out": tmp_path, "protocol": "loyo"}, {"train": {"seed": 1}})
    assert record["tool"] == "firespread" and record["tool_version"] == __version__
    assert record["arguments"] == {"out": str(tmp_path), "protocol": "loyo"}
    assert list(record["arguments"]) == ["out", "protocol"]
    assert set(record["packages"]) == set(provenance.TRACKED_PACKAGES)


def test_write_resolved_config(tmp_path: Path):
    path = provenance.write_resolved_config(tmp_path, "synth", {"seed": 3}, {})
    assert path == tmp_path / "resolved_config.json"
    loaded = config_store.load_document(path)
    assert loaded["command"] == "synth"
    assert loaded["format_version"] == config_store.FORMAT_VERSION
