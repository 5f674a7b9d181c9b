from datetime import datetime, time, timedelta

import pytest
from hypothesis import given
from hypothesis import strategies as st

from evidenceflow.sim.calendar import WorkCalendar, next_permitted_start, parse_workdays

CAL = WorkCalendar()


@pytest.mark.parametrize("t, expected", [
    (datetime(2014, 7, 2, 0, 40), datetime(2014, 7, 2, 8, 0)),     # Wednesday before opening
    (datetime(2014, 7, 2, 12, 10), datetime(2014, 7, 2, 12, 10)),  # in hours: unchanged
    (datetime(2014, 7, 5, 17, 20), datetime(2014, 7, 7, 8, 0)),    # Saturday evening to Monday
    (datetime(2014, 7, 4, 17, 0), datetime(2014, 7, 7, 8, 0)),     # Friday closing instant
    (datetime(2014, 7, 3, 16, 59), datetime(2014, 7, 3, 16, 59)),
    (datetime(2014, 7, 3, 20, 30), datetime(2014, 7, 4, 8, 0)),
])
def test_transitions(t, expected):
    assert next_permitted_start(t, CAL) == expected


def test_anchor_is_a_tuesday():
    assert CAL.start == datetime(2014, 7, 1, 8, 0)
    assert CAL.start.strftime("%A") == "Tuesday"


def test_custom_workdays():
    cal = WorkCalendar(workdays=parse_workdays("Mon,Sat"))
    assert next_permitted_start(datetime(2014, 7, 1, 9, 0), cal) == datetime(2014, 7, 5, 8, 0)


def test_invalid_calendar():
    with pytest.raises(ValueError):
        WorkCalendar(day_start=time(17), day_end=time(8))
    with pytest.raises(ValueError):
        parse_workdays("Mon,Funday")


stamps = st.datetimes(min_value=datetime(2014, 1, 1), max_value=datetime(2016, 1, 1))


@given(stamps)
def test_idempotent(t):
    once = next_permitted_start(t, CAL)
    assert next_permitted_start(once, CAL) == once


@given(stamps)
def test_result_in_hours_and_not_earlier(t):
    result = next_permitted_start(t, CAL)
    assert CAL.in_hours(result)
    assert result >= t
    assert result - t < timedelta(days=3, hours=16)


@given(stamps)
def test_no_earlier_working_moment_skipped(t):
    result = next_permitted_start(t, CAL)
    if result > t:
        # Nothing between t and result is a working minute.
        probe = t.replace(second=0, microsecond=0) + timedelta(minutes=1)
        while probe < result:
            assert not CAL.in_hours(probe)
            probe += timedelta(minutes=37)
