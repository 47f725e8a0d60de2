import json
import math
import sys

import numpy as np
import pytest

from eegprobe import (
    BudgetExhausted,
    ExternalProcessError,
    ManifestLog,
    ModelCommands,
    ParamSpec,
    ProtocolError,
    RungLadder,
    SplitPlan,
    aggregate,
    evaluate,
    fixed_holdout_plan,
    get_split,
    read_predictions,
    run_protocol,
    run_search,
    run_trainer_job,
    subject_loocv_splits,
    write_bundle,
    write_manifest,
)
from conftest import (
    PATTERN_A,
    PATTERN_B,
    PY,
    SUBJECT_CLASS_SEQ,
    protocol_bundle,
    random_bundle,
)

LR_SPACE = [ParamSpec(name="lr", kind="log_uniform", lo=1e-4, hi=1e-2)]
PATTERN_SPACE = [ParamSpec(name="pattern", kind="categorical", values=("A", "B"))]


# -- split plans ------------------------------------------------------------------


def test_split_plan_disjointness():
    with pytest.raises(ValueError, match="disjoint"):
        SplitPlan("fixed_holdout", 1, (0, 1), (1, 2), (3,))
    with pytest.raises(ValueError, match="duplicate"):
        SplitPlan("fixed_holdout", 1, (0, 0), (1,), (2,))


def test_subject_loocv_folds():
    bundle = protocol_bundle()
    plans = subject_loocv_splits(bundle)
    assert len(plans) == 9
    subjects = np.array(bundle.subject_ids)
    for k, plan in enumerate(plans, start=1):
        assert plan.fold == k
        test_subjects = {bundle.subject_ids[i] for i in plan.test}
        assert test_subjects == {k - 1}
        assert set(plan.test) == set(np.flatnonzero(subjects == k - 1))
        assert len(plan.train) + len(plan.val) + len(plan.test) == bundle.n_trials
        val_subjects = {bundle.subject_ids[i] for i in plan.val}
        assert len(val_subjects) == 1
        assert val_subjects != test_subjects


def test_subject_loocv_requires_subjects(rng):
    with pytest.raises(ValueError, match="subject ids"):
        subject_loocv_splits(random_bundle(rng))


def test_get_split_fixed_holdout_requires_base(rng):
    with pytest.raises(ValueError, match="user-provided"):
        get_split("fixed_holdout", 1, random_bundle(rng))
    base = fixed_holdout_plan((0, 1), (2,), (3,))
    assert get_split("fixed_holdout", 4, random_bundle(rng), base).fold == 4


# -- manifests & leakage guard ------------------------------------------------------


def test_write_manifest_contents(tmp_path):
    log = ManifestLog()
    path = write_manifest(tmp_path / "m.json", "/data/x.esb", [3, 1, 2], log=log,
                          role="train", stage="search", fold=2, forbidden=[9])
    obj = json.loads(path.read_text())
    assert obj["indices"] == [1, 2, 3]
    assert obj["bundle"].endswith("x.esb")
    assert log.records[0].fold == 2


def test_write_manifest_refuses_test_indices(tmp_path):
    with pytest.raises(ValueError, match="leakage guard"):
        write_manifest(tmp_path / "m.json", "x.esb", [1, 2, 9], forbidden=[9])


# -- trainer protocol ---------------------------------------------------------------


def job_payload(trial_id=0, config=None, level=1, tmp_path=None):
    return {
        "trial_id": trial_id,
        "config": config or {"lr": 1e-3},
        "resource_level": level,
        "train_manifest_path": "train.json",
        "val_manifest_path": "val.json",
        "seed": 7,
    }


def test_run_trainer_job_happy_path(toy_scripts, tmp_path):
    metric, consumed = run_trainer_job(
        f"{PY} {toy_scripts['planted']}", job_payload(level=3), cwd=tmp_path
    )
    assert consumed == 3
    assert 0.0 < metric <= 1.0


def test_run_trainer_job_crash(toy_scripts, tmp_path):
    payload = job_payload(config={"lr": 5e-3})
    with pytest.raises(ExternalProcessError, match="exited with code 1"):
        run_trainer_job(f"{PY} {toy_scripts['crash']}", payload, cwd=tmp_path)


def _script(tmp_path, name, body):
    path = tmp_path / name
    path.write_text(body)
    return f"{PY} {path}"


def test_run_trainer_job_protocol_violations(tmp_path):
    no_final = _script(tmp_path, "no_final.py",
                       "import sys; sys.stdin.readline(); print('{}')\n")
    with pytest.raises(ProtocolError, match="without a final result"):
        run_trainer_job(no_final, job_payload(), cwd=tmp_path)

    two_finals = _script(
        tmp_path, "two_finals.py",
        "import sys, json\n"
        "job = json.loads(sys.stdin.readline())\n"
        "line = json.dumps({'trial_id': job['trial_id'], 'resource_consumed': 1, 'metric': 0.5})\n"
        "print(line)\nprint(line)\n",
    )
    with pytest.raises(ProtocolError, match="more than one final"):
        run_trainer_job(two_finals, job_payload(), cwd=tmp_path)

    wrong_id = _script(
        tmp_path, "wrong_id.py",
        "import sys, json\n"
        "sys.stdin.readline()\n"
        "print(json.dumps({'trial_id': 999, 'resource_consumed': 1, 'metric': 0.5}))\n",
    )
    with pytest.raises(ProtocolError, match="answered for trial"):
        run_trainer_job(wrong_id, job_payload(), cwd=tmp_path)

    garbage = _script(tmp_path, "garbage.py",
                      "import sys; sys.stdin.readline(); print('not json')\n")
    with pytest.raises(ProtocolError, match="non-JSON"):
        run_trainer_job(garbage, job_payload(), cwd=tmp_path)


def test_trainer_progress_lines_allowed(tmp_path):
    script = _script(
        tmp_path, "progress.py",
        "import sys, json\n"
        "job = json.loads(sys.stdin.readline())\n"
        "print(json.dumps({'trial_id': job['trial_id'], 'epoch': 1}))\n"
        "print(json.dumps({'trial_id': job['trial_id'], 'resource_consumed': 2, 'metric': 0.25}))\n",
    )
    metric, consumed = run_trainer_job(script, job_payload(), cwd=tmp_path)
    assert (metric, consumed) == (0.25, 2)


# -- prediction files -----------------------------------------------------------------


def test_read_predictions_basic(tmp_path):
    path = tmp_path / "p.csv"
    path.write_text("trial_index,predicted_label\n0,1\n2,0\n1,1\n")
    assert read_predictions(path, 3).tolist() == [1, 1, 0]


def test_read_predictions_argmax_probs(tmp_path):
    path = tmp_path / "p.csv"
    path.write_text(
        "trial_index,predicted_label,prob_0,prob_1,prob_2\n"
        "0,0,0.1,0.2,0.7\n1,0,0.9,0.05,0.05\n"
    )
    assert read_predictions(path, 2).tolist() == [2, 0]


def test_read_predictions_wrong_trial_set(tmp_path):
    path = tmp_path / "p.csv"
    path.write_text("trial_index,predicted_label\n0,1\n5,0\n")
    with pytest.raises(ExternalProcessError, match="covers trials"):
        read_predictions(path, 2)


def test_read_predictions_duplicate(tmp_path):
    path = tmp_path / "p.csv"
    path.write_text("trial_index,predicted_label\n0,1\n0,0\n")
    with pytest.raises(ExternalProcessError, match="duplicate"):
        read_predictions(path, 1)


# -- run_search -------------------------------------------------------------------------


def quick_split():
    return fixed_holdout_plan(train=range(0, 6), val=range(6, 8), test=range(8, 10))


def test_run_search_planted_optimum(toy_scripts, tmp_path):
    result = run_search(
        LR_SPACE, f"{PY} {toy_scripts['planted']}", quick_split(), tmp_path / "d.esb",
        RungLadder.from_bounds(1, 9, 3), budget=40, seed=31, workers=4,
        workdir=tmp_path / "search",
    )
    assert 1e-3 / 3 <= result.best_config["lr"] <= 3e-3
    assert result.consumed <= 40
    assert result.n_jobs >= 10


def test_run_search_writes_only_train_val_manifests(toy_scripts, tmp_path):
    split = quick_split()
    result = run_search(
        LR_SPACE, f"{PY} {toy_scripts['planted']}", split, tmp_path / "d.esb",
        RungLadder.from_bounds(1, 3, 3), budget=10, seed=1, workdir=tmp_path / "s",
    )
    seen = result.manifests.stage_indices("search")
    assert seen == set(split.train) | set(split.val)
    assert seen.isdisjoint(split.test)
    for record in result.manifests.records:
        on_disk = json.loads(open(record.path).read())
        assert on_disk["indices"] == sorted(record.indices)


def test_run_search_survives_crashing_trainer(toy_scripts, tmp_path):
    result = run_search(
        LR_SPACE, f"{PY} {toy_scripts['crash']}", quick_split(), tmp_path / "d.esb",
        RungLadder.from_bounds(1, 3, 3), budget=25, seed=3, workdir=tmp_path / "s",
    )
    # crashed trials (lr > 1e-3) never become best
    assert result.best_config["lr"] <= 1e-3
    stopped = [t for t in result.state.trials.values() if t.status == "stopped"]
    assert stopped


def test_run_search_survives_nan_metrics(toy_scripts, tmp_path):
    result = run_search(
        LR_SPACE, f"{PY} {toy_scripts['nan']}", quick_split(), tmp_path / "d.esb",
        RungLadder.from_bounds(1, 3, 3), budget=25, seed=3, workdir=tmp_path / "s",
    )
    assert result.best_config["lr"] <= 1e-3


def test_run_search_budget_too_small(toy_scripts, tmp_path):
    with pytest.raises(BudgetExhausted, match="zero completed"):
        run_search(
            LR_SPACE, f"{PY} {toy_scripts['planted']}", quick_split(), tmp_path / "d.esb",
            RungLadder.from_bounds(3, 9, 3), budget=2, seed=0, workdir=tmp_path / "s",
        )


def test_run_search_serial_determinism(toy_scripts, tmp_path):
    results = []
    for run in range(2):
        result = run_search(
            LR_SPACE, f"{PY} {toy_scripts['planted']}", quick_split(), tmp_path / "d.esb",
            RungLadder.from_bounds(1, 9, 3), budget=25, seed=11, workers=1,
            workdir=tmp_path / f"s{run}",
        )
        trace = [
            (e["event"], e["trial_id"], e.get("level") or e.get("to_level"))
            for e in result.state.trace
        ]
        results.append((result.best_config, trace))
    assert results[0] == results[1]


def test_run_search_all_trainers_fail(tmp_path):
    always_crash = _script(tmp_path, "die.py", "import sys; sys.exit(2)\n")
    with pytest.raises(BudgetExhausted, match="zero completed reports"):
        run_search(
            LR_SPACE, always_crash, quick_split(), tmp_path / "d.esb",
            RungLadder.from_bounds(1, 3, 3), budget=6, seed=0, workdir=tmp_path / "s",
        )


# -- run_protocol -----------------------------------------------------------------------


def pattern_model(toy_scripts):
    return ModelCommands(
        trainer=f"{PY} {toy_scripts['pattern_trainer']}",
        predictor=f"{PY} {toy_scripts['pattern_predictor']} --model models/{{trial_id}}.json",
    )


def expected_pattern_metrics():
    y_true = SUBJECT_CLASS_SEQ
    m_a = evaluate(y_true, PATTERN_A, 3).metrics()
    m_b = evaluate(y_true, PATTERN_B, 3).metrics()
    return m_a, m_b


@pytest.fixture(scope="module")
def protocol_run(toy_scripts, tmp_path_factory):
    tmp = tmp_path_factory.mktemp("protocol")
    bundle = protocol_bundle()
    bundle_path = tmp / "data.esb"
    write_bundle(bundle, bundle_path)
    result = run_protocol(
        pattern_model(toy_scripts), bundle_path, "subject_loocv",
        PATTERN_SPACE, {"pattern": "B"}, RungLadder.from_bounds(1, 4, 2),
        budget=12, seed=2024, workers=2, workdir=tmp / "work",
    )
    return result


def test_protocol_runs_one_fold_per_subject(protocol_run):
    assert len(protocol_run.iterations) == 9
    assert [it.fold for it in protocol_run.iterations] == list(range(1, 10))
    assert protocol_run.failures == []


def test_protocol_per_metric_max_and_winners(protocol_run):
    m_a, m_b = expected_pattern_metrics()
    for it in protocol_run.iterations:
        assert it.best_config == {"pattern": "A"}
        assert it.metrics_tuned.metrics() == pytest.approx(m_a, abs=1e-12)
        assert it.metrics_default.metrics() == pytest.approx(m_b, abs=1e-12)
        assert it.winners == {
            "balanced_accuracy": "tuned",
            "macro_f1": "tuned",
            "cohen_kappa": "default",
        }
        assert it.phi["balanced_accuracy"] == pytest.approx(m_a["balanced_accuracy"])
        assert it.phi["macro_f1"] == pytest.approx(m_a["macro_f1"])
        assert it.phi["cohen_kappa"] == pytest.approx(m_b["cohen_kappa"])


def test_protocol_aggregate_matches_metrics_aggregate(protocol_run):
    expected = aggregate([it.phi for it in protocol_run.iterations])
    assert protocol_run.aggregate.means == expected.means
    assert protocol_run.aggregate.stds == expected.stds
    assert protocol_run.aggregate.n_runs == 9
    # deterministic toy: every fold identical, so sigma is exactly zero
    assert all(s == 0.0 for s in protocol_run.aggregate.stds.values())


def test_protocol_leakage_guard_per_fold(protocol_run):
    bundle = protocol_bundle()
    plans = {p.fold: p for p in subject_loocv_splits(bundle)}
    for fold, plan in plans.items():
        search_seen = protocol_run.manifests.stage_indices("search", fold=fold)
        retrain_seen = protocol_run.manifests.stage_indices("retrain", fold=fold)
        assert search_seen.isdisjoint(plan.test)
        assert retrain_seen.isdisjoint(plan.test)
        assert retrain_seen == set(plan.train) | set(plan.val)


def test_protocol_fixed_holdout_k_iterations(toy_scripts, tmp_path):
    bundle = protocol_bundle(n_subjects=3)
    bundle_path = tmp_path / "data.esb"
    write_bundle(bundle, bundle_path)
    split = fixed_holdout_plan(train=range(0, 30), val=range(30, 40), test=range(40, 60))
    result = run_protocol(
        pattern_model(toy_scripts), bundle_path, "fixed_holdout",
        PATTERN_SPACE, {"pattern": "B"}, RungLadder.from_bounds(1, 2, 2),
        budget=6, n_iterations=3, base_split=split, seed=77, workdir=tmp_path / "w",
    )
    assert len(result.iterations) == 3
    assert result.aggregate.n_runs == 3


def test_protocol_loocv_rejects_wrong_iteration_count(toy_scripts, tmp_path):
    bundle = protocol_bundle()
    bundle_path = tmp_path / "data.esb"
    write_bundle(bundle, bundle_path)
    with pytest.raises(ValueError, match="9 folds"):
        run_protocol(
            pattern_model(toy_scripts), bundle_path, "subject_loocv",
            PATTERN_SPACE, {"pattern": "B"}, RungLadder.from_bounds(1, 2, 2),
            budget=4, n_iterations=5, seed=1, workdir=tmp_path / "w",
        )


def test_protocol_partial_failures_preserved(toy_scripts, tmp_path):
    # trainer crashes whenever trial 0 is in its training manifest: only the
    # fold holding subject 0 out (fold 1) can succeed
    picky = _script(
        tmp_path, "picky.py",
        "import sys, json\n"
        "job = json.loads(sys.stdin.readline())\n"
        "idx = json.loads(open(job['train_manifest_path']).read())['indices']\n"
        "if 0 in idx:\n"
        "    sys.exit(1)\n"
        "from pathlib import Path\n"
        "Path('models').mkdir(exist_ok=True)\n"
        "Path('models/' + str(job['trial_id']) + '.json').write_text(json.dumps({'config': job['config']}))\n"
        "print(json.dumps({'trial_id': job['trial_id'], 'resource_consumed': 1, 'metric': 0.9}))\n",
    )
    bundle = protocol_bundle(n_subjects=3)
    bundle_path = tmp_path / "data.esb"
    write_bundle(bundle, bundle_path)
    model = ModelCommands(
        trainer=picky,
        predictor=f"{PY} {toy_scripts['pattern_predictor']} --model models/{{trial_id}}.json",
    )
    result = run_protocol(
        model, bundle_path, "subject_loocv", PATTERN_SPACE, {"pattern": "B"},
        RungLadder.from_bounds(1, 2, 2), budget=6, seed=5, workdir=tmp_path / "w",
    )
    assert len(result.iterations) == 1
    assert result.iterations[0].fold == 1
    assert len(result.failures) == 2
    assert all("fold" in f and "error" in f for f in result.failures)


def test_protocol_needs_labels(toy_scripts, tmp_path, rng):
    bundle = random_bundle(rng, labeled=False, n_subjects=3)
    path = tmp_path / "u.esb"
    write_bundle(bundle, path)
    with pytest.raises(ValueError, match="labeled"):
        run_protocol(
            pattern_model(toy_scripts), path, "subject_loocv",
            PATTERN_SPACE, {"pattern": "B"}, RungLadder.from_bounds(1, 2, 2),
            budget=4, seed=1, workdir=tmp_path / "w",
        )


def test_model_commands_substitution():
    model = ModelCommands(trainer="t", predictor="p --model models/{trial_id}.json")
    assert model.predictor_for("k1-tuned") == "p --model models/k1-tuned.json"
    plain = ModelCommands(trainer="t", predictor="p")
    assert plain.predictor_for("x") == "p"
