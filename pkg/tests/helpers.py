import json
from pathlib import Path

import numpy as np

from alquery.synthgen import SynthSpec
from alquery.uncertainty import stratify


def tiny_spec(**kw) -> SynthSpec:
    """A 20^3, two-class dataset small enough for full loops in a second or two."""
    base = dict(
        name="tiny",
        n_train=6,
        n_test=2,
        dims=(20, 20, 20),
        n_classes=2,
        blob_count=[(1, 3), (1, 2)],
        radius=[(3.0, 5.0), (2.0, 3.0)],
        volume_fraction=[0.06, 0.01],
        intensity_mean=[0.0, 1.0, 2.0],
        noise_sigma=[0.4, 0.4, 0.4],
        seed=3,
    )
    base.update(kw)
    return SynthSpec(**base)


def write_config(path: Path, **doc) -> Path:
    path.write_text(json.dumps(doc))
    return path


def tiny_config(dataset_dir, method, **kw) -> dict:
    doc = {"dataset": str(dataset_dir), "method": method, "query_size": 8, "patch_size": [4, 4, 4],
           "ensemble_size": 3}
    doc.update(kw)
    return doc


def brute_box_sum(field: np.ndarray, origin, size) -> float:
    z, y, x = origin
    d, h, w = size
    return float(sum(field[i, j, k] for i in range(z, z + d) for j in range(y, y + h) for k in range(x, x + w)))


def run_tiny(dataset_dir, out_dir, method, seed=0, **kw):
    """Run one experiment on the tiny dataset and return the RunResult."""
    from alquery.harness import config_from_dict, run_experiment

    cfg, setting = config_from_dict(tiny_config(dataset_dir, method, **kw), seed=seed)
    return run_experiment(cfg, out_dir, setting=setting)


def loop_boxes(run_dir):
    """(cycle, image_id, origin, size) for every patch recorded in a run's loop files."""
    out = []
    for path in sorted(Path(run_dir).glob("loop_*.json")):
        doc = json.loads(path.read_text())
        for p in doc["patches"]:
            out.append((doc["cycle"], p["image"], tuple(p["origin"]), tuple(p["size"])))
    return out


def random_stacks(seed, n_images, C, dims):
    """Stratified score stacks from random class posteriors and uncertainties."""
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(n_images):
        p = rng.dirichlet(np.ones(C + 1), size=dims).transpose(3, 0, 1, 2)
        u = rng.random(dims) + 0.01
        out.append(stratify(u, p))
    return out


# one line per acceptance criterion, echoed in the terminal summary
ACCEPTANCE: dict[int, str] = {}


def criterion(number: int, title: str, ok: bool, detail: str = "") -> None:
    line = f"criterion {number:2d} {'PASS' if ok else 'FAIL'}  {title}" + (f"  [{detail}]" if detail else "")
    ACCEPTANCE[number] = line
    print(line)
    assert ok, line
