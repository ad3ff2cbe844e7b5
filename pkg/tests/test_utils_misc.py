import datetime as dt

import pytest

from src.firespread import utils_misc


def test_parse_years():
    assert utils_misc.parse_years("2018,2019, 2021") == [2018, 2019, 2021]
    assert utils_misc.parse_years("2016-2019") == [2016, 2017, 2018, 2019]


@pytest.mark.parametrize("expr", ["", "abc", "2019-2016", "18,19"])
def test_parse_years_invalid(expr):
    with pytest.raises(ValueError):
        utils_misc.parse_years(expr)


def test_date_from_name():
    assert utils_misc.date_from_name("2020-06-01.tif") == dt.date(2020, 6, 1)
    assert utils_misc.date_from_name("evt_2020-06-01_copy.tif") == dt.date(2020, 6, 1)
    assert utils_misc.date_from_name("2020-13-01.tif") is None
    assert utils_misc.date_from_name("day_one.tif") is None


def test_day_of_year_is_clipped():
    assert utils_misc.day_of_year(dt.date(2020, 1, 1)) == 1
    assert utils_misc.day_of_year(dt.date(2020, 12, 31)) == 365


def test_derive_seed_is_stable():
    assert utils_misc.derive_seed(0, 2018, 3) == utils_misc.derive_seed("0", "2018", "3")
    assert utils_misc.derive_seed(0, 2018, 3) != utils_misc.derive_seed(0, 2018, 4)
    assert 0 <= utils_misc.derive_seed("x") < 2 ** 32


def test_config_hash_ignores_key_order():
    assert utils_misc.config_hash({"a": 1, "b": [1, 2]}) == utils_misc.config_hash({"b": [1, 2], "a": 1})
    assert len(utils_misc.config_hash({})) == 16
