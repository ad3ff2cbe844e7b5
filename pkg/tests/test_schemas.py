import pytest
from pydantic import ValidationError

from src.firespread import schemas


def test_unknown_keys_are_rejected():
    with pytest.raises(ValidationError):
        schemas.TrainDoc(iterations=10, learnig_rate=0.1)
    with pytest.raises(ValidationError):
        schemas.ModelDoc.model_validate({"coefficients": {}})


def test_no_fusion_requires_a_single_day():
    assert schemas.ModelDoc(fusion="data", T=5).T == 5
    with pytest.raises(ValidationError, match="T=1"):
        schemas.ModelDoc(fusion="none", T=3)


@pytest.mark.parametrize("size", [12, 4])
def test_synth_grid_must_be_a_multiple_of_eight(size):
    with pytest.raises(ValidationError):
        schemas.SynthDoc(years=[{"year_label": 2018}], H=size)


def test_covariate_scale_must_be_positive():
    with pytest.raises(ValidationError, match="ndvi"):
        schemas.SynthYearDoc(year_label=2018, covariate_shift={"ndvi": (0.0, 0.0)})


def test_to_plain_drops_the_format_stamp_and_uses_aliases():
    doc = schemas.SynthDoc.model_validate(
        {"format_version": 1, "years": [{"year_label": 2018}], "schema": [{"name": "ndvi", "group": "vegetation"}]}
    )
    plain = schemas.to_plain(doc)
    assert "format_version" not in plain
    assert plain["schema"][0]["name"] == "ndvi"
    assert plain["years"][0]["concept_shift"] == 1.0


def test_grid_defaults():
    grid = schemas.GridDoc()
    assert len(grid.learning_rates) == 5 and grid.losses == ["bce", "focal", "dice", "jaccard"]
    with pytest.raises(ValidationError):
        schemas.GridDoc(losses=["hinge"])
