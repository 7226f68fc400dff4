"""One test per acceptance criterion; each prints a PASS/FAIL line.

Run with ``pytest tests/test_acceptance.py -s`` or ``-v`` to see the lines.
"""
import json
import subprocess
import sys

import pytest

from maskscope import selfcheck


def report(capsys, criterion, passed, detail):
    with capsys.disabled():
        print(f"\ncriterion {criterion}: {'PASS' if passed else 'FAIL'} {detail}")


TIME_LIMITS = {1: 10, 3: 30, 6: 120}

CASES = [
    (1, selfcheck.check_formula_oracles, ("max_abs_error", "seconds")),
    (2, selfcheck.check_attention_equivalences, ("gma_vs_ma", "ma_vs_ca")),
    (3, selfcheck.check_gradients, ("attention_max_rel_error", "decoder_max_rel_error",
                                    "seconds")),
    (4, selfcheck.check_hungarian, ("trials", "failures")),
    (5, selfcheck.check_metric_examples, ("observed",)),
    (6, selfcheck.check_toy_training, ("loss_ratio", "gap_held_out", "seconds")),
    (7, selfcheck.check_refinement, ("zero_on_stuff", "unchanged_elsewhere", "fpr95_raw",
                                     "fpr95_refined")),
    (8, selfcheck.check_mining, ("flood_fill_mismatches",)),
]


@pytest.mark.parametrize("criterion,check,keys", CASES, ids=[f"criterion_{c[0]}" for c in CASES])
def test_criterion(capsys, criterion, check, keys):
    res = check()
    found = {**res["detail"], "seconds": res["seconds"]}
    detail = {k: found[k] for k in keys}
    limit = TIME_LIMITS.get(criterion)
    passed = res["passed"] and (limit is None or res["seconds"] < limit)
    report(capsys, criterion, passed, json.dumps(detail, default=str))
    assert res["criterion"] == criterion
    assert passed, res


def test_criterion_9(capsys):
    mt_fail, png_fail = selfcheck.roundtrip_cases(cases=1000)
    proc = subprocess.run([sys.executable, "-m", "maskscope.cli", "selfcheck"],
                          check=False, capture_output=True, text=True, timeout=600)
    passed = mt_fail == 0 and png_fail == 0 and proc.returncode == 0
    report(capsys, 9, passed, f"mt01_failures={mt_fail} png_failures={png_fail} "
                              f"selfcheck_exit={proc.returncode}")
    assert passed, proc.stderr
