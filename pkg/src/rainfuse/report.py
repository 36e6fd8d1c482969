"""Loss-curve plots and a plain-text summary from a training log."""
from __future__ import annotations

import json
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from .metrics import read_table  # noqa: E402
from .training import read_log  # noqa: E402


def summarize(records: list[dict]) -> dict:
    if not records:
        return {}
    last = records[-1]
    return {"records": len(records), "final_step": last["step"], "final_losses": dict(last["losses"])}


def report(log_path: str | Path, out_dir: str | Path, metrics_path: str | Path | None = None) -> list[Path]:
    """Write ``loss_<name>.png`` per loss component plus ``summary.json``/``summary.txt``.

    Returns the files written. An empty log gives an empty summary and no plots.
    """
    records = read_log(log_path)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []

    names = sorted({k for r in records for k in r["losses"]})
    for name in names:
        pts = [(r["step"], r["losses"][name]) for r in records if name in r["losses"]]
        fig, ax = plt.subplots(figsize=(5, 3.2))
        ax.plot([p[0] for p in pts], [p[1] for p in pts], lw=1)
        ax.set_xlabel("epoch" if records[0].get("stage") == 2 else "step")
        ax.set_ylabel(name)
        ax.set_yscale("log" if all(p[1] > 0 for p in pts) else "linear")
        fig.tight_layout()
        path = out / f"loss_{name}.png"
        fig.savefig(path, dpi=100)
        plt.close(fig)
        written.append(path)

    summary = summarize(records)
    lines = []
    if summary:
        lines.append(f"records: {summary['records']}, final step: {summary['final_step']}")
        lines += [f"final {k}: {v:.6g}" for k, v in summary["final_losses"].items()]
    if metrics_path is not None:
        rows = read_table(metrics_path)
        mean = [r for r in rows if r.pair_id == "mean"]
        if mean:
            summary["final_metrics"] = mean[-1].metrics()
            lines += [f"{k}: {v:.6g}" for k, v in summary["final_metrics"].items()]

    (out / "summary.json").write_text(json.dumps(summary, indent=2))
    (out / "summary.txt").write_text("".join(line + "\n" for line in lines))
    written += [out / "summary.json", out / "summary.txt"]
    return written
