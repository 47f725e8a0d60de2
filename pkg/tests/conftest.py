import json
import sys

import numpy as np
import pytest

from eegprobe import SignalBundle, Trial

# Frozen toy-model prediction patterns for one 20-trial subject block with
# true classes [0]*10 + [1]*6 + [2]*4.  Pattern A beats B on balanced
# accuracy and macro F1; B beats A on kappa (chosen by offline search).
SUBJECT_CLASS_SEQ = [0] * 10 + [1] * 6 + [2] * 4
PATTERN_A = [0, 1, 0, 0, 0, 0, 1, 0, 0, 1, 1, 0, 1, 1, 1, 1, 2, 2, 2, 2]
PATTERN_B = [0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 1, 1, 1, 1, 1, 2, 1, 1, 2, 2]

PY = sys.executable


def random_bundle(rng, n_trials=4, n_channels=3, n_samples=32, fs=128.0,
                  labeled=True, n_subjects=None, scale=1.0):
    channel_pool = ["C3", "Fp1", "P3", "O1", "T3", "C4", "Fp2", "P4",
                    "O2", "T4", "F3", "F4", "Cz", "Pz", "Fz", "Oz"]
    names = [channel_pool[i % len(channel_pool)] for i in range(n_channels)]
    trials = []
    for i in range(n_trials):
        data = (scale * rng.standard_normal((n_channels, n_samples))).astype(np.float32)
        trials.append(Trial(data=data, label=(i % 2 if labeled else None)))
    subject_ids = None
    if n_subjects is not None:
        subject_ids = [i % n_subjects for i in range(n_trials)]
    return SignalBundle(trials=trials, fs=fs, channel_names=names, subject_ids=subject_ids)


@pytest.fixture
def rng():
    return np.random.default_rng(321)


TRAINER_PLANTED = """\
import json, sys
job = json.loads(sys.stdin.readline())
lr = float(job["config"]["lr"])
r = int(job["resource_level"])
base = 1.0 - (lr - 1e-3) ** 2 / 8.1e-5
metric = base * (1.0 - 0.5 / (1.0 + r))
print(json.dumps({"trial_id": job["trial_id"], "resource_consumed": r, "metric": metric}))
"""

TRAINER_PATTERN = """\
import json, sys
from pathlib import Path
job = json.loads(sys.stdin.readline())
models = Path("models")
models.mkdir(exist_ok=True)
(models / (str(job["trial_id"]) + ".json")).write_text(json.dumps({"config": job["config"]}))
metric = {"A": 0.9, "B": 0.5}[job["config"]["pattern"]]
print(json.dumps({"trial_id": job["trial_id"], "resource_consumed": int(job["resource_level"]), "metric": metric}))
"""

PREDICTOR_PATTERN = """\
import argparse, csv, json
from pathlib import Path
PATTERNS = {
    "A": %(pattern_a)s,
    "B": %(pattern_b)s,
}
ap = argparse.ArgumentParser()
ap.add_argument("--model", required=True)
ap.add_argument("--input", required=True)
ap.add_argument("--output", required=True)
args = ap.parse_args()
pattern = json.loads(Path(args.model).read_text())["config"]["pattern"]
raw = Path(args.input).read_bytes()
hlen = int.from_bytes(raw[4:8], "little")
header = json.loads(raw[8:8 + hlen].decode("utf-8"))
preds = PATTERNS[pattern]
with open(args.output, "w", newline="") as handle:
    w = csv.writer(handle)
    w.writerow(["trial_index", "predicted_label"])
    for i in range(header["n_trials"]):
        w.writerow([i, preds[i %% len(preds)]])
""" % {"pattern_a": PATTERN_A, "pattern_b": PATTERN_B}

TRAINER_CRASH_HIGH_LR = """\
import json, sys
job = json.loads(sys.stdin.readline())
lr = float(job["config"]["lr"])
if lr > 1e-3:
    print("boom", file=sys.stderr)
    sys.exit(1)
r = int(job["resource_level"])
metric = 1.0 - abs(lr - 5e-4)
print(json.dumps({"trial_id": job["trial_id"], "resource_consumed": r, "metric": metric}))
"""

TRAINER_NAN_HIGH_LR = """\
import json, sys
job = json.loads(sys.stdin.readline())
lr = float(job["config"]["lr"])
r = int(job["resource_level"])
metric = float("nan") if lr > 1e-3 else 1.0 - abs(lr - 5e-4)
print(json.dumps({"trial_id": job["trial_id"], "resource_consumed": r, "metric": metric}))
"""


@pytest.fixture(scope="session")
def toy_scripts(tmp_path_factory):
    root = tmp_path_factory.mktemp("toys")
    scripts = {
        "planted": TRAINER_PLANTED,
        "pattern_trainer": TRAINER_PATTERN,
        "pattern_predictor": PREDICTOR_PATTERN,
        "crash": TRAINER_CRASH_HIGH_LR,
        "nan": TRAINER_NAN_HIGH_LR,
    }
    paths = {}
    for name, text in scripts.items():
        path = root / f"{name}.py"
        path.write_text(text)
        paths[name] = str(path)
    return paths


def protocol_bundle(n_subjects=9):
    """Deterministic 9-subject bundle; every subject gets SUBJECT_CLASS_SEQ."""
    gen = np.random.default_rng(99)
    trials = []
    subject_ids = []
    for subject in range(n_subjects):
        for label in SUBJECT_CLASS_SEQ:
            trials.append(Trial(gen.normal(size=(2, 8)).astype(np.float32), label=label))
            subject_ids.append(subject)
    return SignalBundle(trials=trials, fs=64.0, channel_names=["C3", "C4"],
                        subject_ids=subject_ids)


def write_split_file(path, train, val, test):
    path.write_text(json.dumps({"train": list(train), "val": list(val), "test": list(test)}))
    return path
