"""Regenerate the three-image evaluate fixture and its expected report.

The expected CSV is computed with the loop oracles in tests/oracles.py, not
with the package metrics. Run from the repository root:

    python3 tests/data/make_evaluate_fixture.py
"""

import sys
from pathlib import Path

import numpy as np

HERE = Path(__file__).parent
sys.path.insert(0, str(HERE.parent))

import oracles  # noqa: E402
from salgrid.io import save_tsal  # noqa: E402

W, H = 12, 10
STEMS = ("alpha", "beta", "gamma")
FIXATIONS = {
    "alpha": [(2, 3), (3, 3), (9, 1), (6, 7)],
    "beta": [(0, 0), (11, 9), (5, 5), (5, 6), (8, 2)],
    "gamma": [(4, 8), (10, 4), (2, 3)],
}


def blob(cx, cy, s):
    yy, xx = np.mgrid[0:H, 0:W]
    return np.exp(-((xx - cx) ** 2 + (yy - cy) ** 2) / (2 * s * s))


def main():
    root = HERE / "evaluate"
    for sub in ("pred", "maps", "fix"):
        (root / sub).mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(20240601)
    preds, maps, fixes = {}, {}, {}
    for stem in STEMS:
        pts = FIXATIONS[stem]
        gt = sum(blob(x, y, 1.5) for x, y in pts)
        gt = (gt / gt.sum()).astype(np.float32)
        pred = (0.05 + 0.6 * blob(*pts[0], 2.5) + 0.3 * rng.random((H, W))).astype(np.float32)
        save_tsal(root / "maps" / f"{stem}.tsal", gt)
        save_tsal(root / "pred" / f"{stem}.tsal", pred)
        lines = ["x,y,observer"] + [f"{x},{y},{i % 2}" for i, (x, y) in enumerate(pts)]
        (root / "fix" / f"{stem}.csv").write_text("\n".join(lines) + "\n")
        fmap = [[0.0] * W for _ in range(H)]
        for x, y in pts:
            fmap[y][x] = 1.0
        preds[stem] = pred.astype(np.float64).tolist()
        maps[stem] = gt.astype(np.float64).tolist()
        fixes[stem] = fmap

    rows = []
    for stem in STEMS:
        p, g, f = preds[stem], maps[stem], fixes[stem]
        others = [fixes[s] for s in STEMS if s != stem]
        rows.append({"cc": oracles.cc(p, g), "sim": oracles.sim(p, g), "kld": oracles.kld(p, g),
                     "nss": oracles.nss(p, f), "auc": oracles.auc_judd(p, f),
                     "sauc": oracles.sauc_replay(p, f, others, seed=0)[0]})
    cols = ("cc", "sim", "kld", "nss", "auc", "sauc")
    out = ["image," + ",".join(cols) + ",flags"]
    for stem, r in zip(STEMS, rows):
        out.append(stem + "," + ",".join(f"{r[c]:.8f}" for c in cols) + ",")
    out.append("mean," + ",".join(f"{sum(r[c] for r in rows) / len(rows):.8f}" for c in cols) + ",")
    (root / "expected_report.csv").write_text("\n".join(out) + "\n")


if __name__ == "__main__":
    main()
