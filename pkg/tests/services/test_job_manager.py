from gridbox.models import Task
from gridbox.services.job_manager import TERMINAL_STATES, history_problems, transition_allowed


def test_transitions_follow_the_task_state_machine():
    assert transition_allowed("WAITING", "ASSIGNED")
    assert transition_allowed("ASSIGNED", "RUNNING")
    assert transition_allowed("RUNNING", "DONE")
    assert transition_allowed("RUNNING", "ERROR")
    assert not transition_allowed("WAITING", "RUNNING")
    assert not transition_allowed("ASSIGNED", "DONE")
    for terminal in TERMINAL_STATES:
        for target in ("WAITING", "ASSIGNED", "RUNNING", "DONE", "KILLED"):
            assert not transition_allowed(terminal, target)


def test_history_problems_flags_skipped_states():
    good = Task("t-1", "", "alice@mg", "mg")
    good.history = [
        ("ts", "", "WAITING", "submitted"),
        ("ts", "WAITING", "ASSIGNED", "oxford:ce"),
        ("ts", "ASSIGNED", "RUNNING", "oxford:ce"),
        ("ts", "RUNNING", "DONE", "sum"),
    ]
    bad = Task("t-2", "", "alice@mg", "mg")
    bad.history = [
        ("ts", "", "WAITING", "submitted"),
        ("ts", "WAITING", "DONE", ""),
        ("ts", "RUNNING", "ERROR", ""),
    ]

    assert history_problems(good) == []
    assert history_problems(bad) == [
        "t-2: WAITING -> DONE",
        "t-2: entry from RUNNING while DONE",
    ]
