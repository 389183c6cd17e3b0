"""Report writing for adaptation runs: delimited output, summary, figures."""

from __future__ import annotations

import csv
import json
from pathlib import Path
from typing import List

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt

from .selftrain import AdaptationReport

__all__ = ["write_report"]


def write_report(report: AdaptationReport, out_dir) -> List[Path]:
    """Write report.csv, summary.json, and PNG figures; returns written paths."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written: List[Path] = []

    csv_path = out / "report.csv"
    with csv_path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(
            ["epoch", "fused_precision", "fused_recall", "fused_f1",
             "det_loss", "pgfa_loss", "pifa_loss", "total_loss"]
        )
        for rec in report.records:
            writer.writerow(
                [rec.epoch,
                 f"{rec.fused_precision:.9f}", f"{rec.fused_recall:.9f}", f"{rec.fused_f1:.9f}"]
                + ["" if v is None else f"{v:.9f}"
                   for v in (rec.det_loss, rec.pgfa_loss, rec.pifa_loss, rec.total_loss)]
            )
    written.append(csv_path)

    summary = {
        "teacher_source_f1": report.teacher_source_f1,
        "vfm_source_f1": report.vfm_source_f1,
        "better_single_source_f1": report.better_single_source_f1,
        "epoch0_fused_f1": report.records[0].fused_f1,
        "final_fused_f1": report.final_fused_f1,
        "improved_over_single_source": report.final_fused_f1 > report.better_single_source_f1,
        "epochs": report.config.epochs,
        "seed": report.config.seed,
        "loss_weight": report.config.loss_weight,
    }
    summary_path = out / "summary.json"
    summary_path.write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    written.append(summary_path)

    epochs = [rec.epoch for rec in report.records]
    f1s = [rec.fused_f1 for rec in report.records]
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.plot(epochs, f1s, marker="o", label="fused pseudo-labels")
    ax.axhline(report.teacher_source_f1, color="tab:orange", ls="--", label="teacher source")
    ax.axhline(report.vfm_source_f1, color="tab:green", ls=":", label="VFM source")
    ax.set_xlabel("epoch")
    ax.set_ylabel("pseudo-label F1")
    ax.legend(loc="best", fontsize=8)
    fig.tight_layout()
    f1_path = out / "pseudo_label_f1.png"
    fig.savefig(f1_path, dpi=120)
    plt.close(fig)
    written.append(f1_path)

    train_recs = [rec for rec in report.records if rec.total_loss is not None]
    if train_recs:
        fig, ax = plt.subplots(figsize=(6, 4))
        for name, attr in (("detection", "det_loss"), ("patch alignment", "pgfa_loss"),
                           ("prototype contrast", "pifa_loss"), ("total", "total_loss")):
            ax.plot([r.epoch for r in train_recs],
                    [getattr(r, attr) for r in train_recs], marker=".", label=name)
        ax.set_xlabel("epoch")
        ax.set_ylabel("loss")
        ax.legend(loc="best", fontsize=8)
        fig.tight_layout()
        loss_path = out / "losses.png"
        fig.savefig(loss_path, dpi=120)
        plt.close(fig)
        written.append(loss_path)

    return written
