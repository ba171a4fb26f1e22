"""Run-directory layout: config snapshot, encoder snapshot, per-task
prompt files with a manifest, accuracy/metric CSVs, and the event log."""

from __future__ import annotations

import hashlib
import os

import numpy as np

from . import snapshot


def _fmt(x) -> str:
    if x is None:
        return ""
    return f"{x:.6g}"


def write_csv(path, header, rows) -> None:
    lines = [",".join(header)]
    for row in rows:
        lines.append(",".join(c if isinstance(c, str) else _fmt(c) for c in row))
    with open(path, "w") as f:
        f.write("\n".join(lines) + "\n")


def scenario_hash(config_text: str) -> str:
    return hashlib.sha256(config_text.encode("utf-8")).hexdigest()[:12]


def write_run_dir(outdir, runner, result, config_text: str) -> None:
    os.makedirs(outdir, exist_ok=True)
    with open(os.path.join(outdir, "config.cfg"), "w") as f:
        f.write(config_text if config_text.endswith("\n") else config_text + "\n")

    snapshot.save_arrays(
        os.path.join(outdir, "encoder.rbwp"), runner.encoder.weight_arrays()
    )

    manifest_rows = []
    for t in sorted(runner.prompt_set.entries):
        entry = runner.prompt_set.entries[t]
        fname = f"task{t}_prompts.rbwp"
        arrays = {}
        for layer, (pk, pv) in entry["prompts"].items():
            arrays[f"layer{layer}_pK"] = pk
            arrays[f"layer{layer}_pV"] = pv
        snapshot.save_arrays(os.path.join(outdir, fname), arrays)
        mask_str = "".join("1" if m else "0" for m in entry["mask"])
        manifest_rows.append([str(t), fname, mask_str])
    write_csv(os.path.join(outdir, "manifest.csv"),
              ["task", "file", "layer_mask"], manifest_rows)

    n = len(result.accuracy_matrix)
    acc_rows = []
    for t, row in enumerate(result.accuracy_matrix):
        acc_rows.append([str(t + 1)] + [_fmt(v) for v in row] + [""] * (n - len(row)))
    write_csv(os.path.join(outdir, "accuracy_matrix.csv"),
              ["step"] + [f"task{i + 1}" for i in range(n)], acc_rows)

    metric_rows = []
    for t in range(n):
        sub = result.accuracy_matrix[: t + 1]
        a = float(np.mean(sub[-1]))
        if t == 0:
            f_val = 0.0
        else:
            final = sub[-1]
            drops = [
                max(sub[s][i] for s in range(i, t)) - final[i] for i in range(t)
            ]
            f_val = float(np.mean(drops))
        metric_rows.append([str(t + 1), a, f_val, result.diversity[t]])
    write_csv(os.path.join(outdir, "metrics.csv"),
              ["step", "A", "F", "diversity"], metric_rows)

    with open(os.path.join(outdir, "events.log"), "w") as f:
        for line in result.events:
            f.write(line + "\n")
