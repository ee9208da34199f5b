"""Evaluation reports: per-image metric rows, aggregates, CSV output, and
summary figures rendered next to the tables."""

import csv
import math
from dataclasses import dataclass, asdict, fields
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt

# tamper-rate buckets: first bucket closed, the rest half-open (low, high]
RATE_BUCKETS = ((0.0, 0.1), (0.1, 0.2), (0.2, 0.3), (0.3, 0.5))

METRIC_FIELDS = ("psnr_protected", "ssim_protected", "psnr_recovered",
                 "ssim_recovered", "f1")


@dataclass
class EvalRow:
    """Metrics for one evaluated image; unavailable metrics stay None."""

    name: str
    tamper_kind: str = ""
    post_kind: str = ""
    tamper_rate: float | None = None
    psnr_protected: float | None = None
    ssim_protected: float | None = None
    psnr_recovered: float | None = None
    ssim_recovered: float | None = None
    f1: float | None = None


def rate_bucket(rate: float) -> str:
    for low, high in RATE_BUCKETS:
        if (low < rate <= high) or (low == 0.0 and rate <= high):
            return f"[{low},{high}]"
    return f"[{RATE_BUCKETS[-1][0]},{RATE_BUCKETS[-1][1]}]"


def _mean(values) -> float | None:
    vals = [v for v in values if v is not None and not math.isnan(v)]
    return sum(vals) / len(vals) if vals else None


def aggregate(rows, key_fn=None) -> dict:
    """Mean of every metric over row groups; key None aggregates everything."""
    groups = {}
    for row in rows:
        key = key_fn(row) if key_fn else "all"
        groups.setdefault(key, []).append(row)
    out = {}
    for key, members in sorted(groups.items()):
        out[key] = {m: _mean(getattr(r, m) for r in members) for m in METRIC_FIELDS}
        out[key]["count"] = len(members)
    return out


@dataclass
class EvaluationReport:
    rows: list

    def overall(self) -> dict:
        if not self.rows:
            return {m: None for m in METRIC_FIELDS} | {"count": 0}
        return aggregate(self.rows)["all"]

    def per_attack(self) -> dict:
        return aggregate([r for r in self.rows if r.post_kind],
                         key_fn=lambda r: r.post_kind)

    def per_rate_bucket(self) -> dict:
        return aggregate([r for r in self.rows if r.tamper_rate is not None],
                         key_fn=lambda r: rate_bucket(r.tamper_rate))

    def write(self, out_dir) -> dict:
        """Write report.csv (per image), summary.csv (aggregates) and figures.

        Returns {artifact name: path}.
        """
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        artifacts = {}

        report_path = out / "report.csv"
        cols = [f.name for f in fields(EvalRow)]
        with open(report_path, "w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=cols)
            writer.writeheader()
            for row in self.rows:
                writer.writerow(asdict(row))
        artifacts["report"] = report_path

        summary_path = out / "summary.csv"
        with open(summary_path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["group", "key", "count", *METRIC_FIELDS])
            for group, table in (("all", {"all": self.overall()}),
                                 ("post_kind", self.per_attack()),
                                 ("rate_bucket", self.per_rate_bucket())):
                for key, vals in table.items():
                    writer.writerow([group, key, vals["count"]] +
                                    [_fmt(vals[m]) for m in METRIC_FIELDS])
        artifacts["summary"] = summary_path

        artifacts.update(self._figures(out))
        return artifacts

    def _figures(self, out: Path) -> dict:
        artifacts = {}
        specs = [("per_attack", self.per_attack(), "post-processing"),
                 ("per_rate", self.per_rate_bucket(), "tamper-rate bucket")]
        for stem, table, xlabel in specs:
            if not table:
                continue
            keys = list(table)
            fig, axes = plt.subplots(1, 2, figsize=(9, 3.2))
            for ax, metric, label in ((axes[0], "f1", "localization F1"),
                                      (axes[1], "psnr_recovered", "recovery PSNR (dB)")):
                vals = [table[k][metric] for k in keys]
                shown = [(k, v) for k, v in zip(keys, vals) if v is not None]
                if shown:
                    ax.bar([k for k, _ in shown], [v for _, v in shown],
                           color="#4878a8")
                ax.set_ylabel(label)
                ax.set_xlabel(xlabel)
                ax.tick_params(axis="x", rotation=45)
            fig.tight_layout()
            path = out / f"{stem}.png"
            fig.savefig(path, dpi=120)
            plt.close(fig)
            artifacts[stem] = path
        return artifacts


def _fmt(value):
    return "" if value is None else f"{value:.6f}"


def load_report_rows(path) -> list:
    """Read back a report.csv written by :meth:`EvaluationReport.write`."""
    rows = []
    with open(path) as fh:
        for record in csv.DictReader(fh):
            kwargs = {}
            for f in fields(EvalRow):
                raw = record.get(f.name, "")
                if raw == "" or raw is None:
                    kwargs[f.name] = None if f.name != "name" else ""
                elif f.name in ("name", "tamper_kind", "post_kind"):
                    kwargs[f.name] = raw
                else:
                    kwargs[f.name] = float(raw)
            rows.append(EvalRow(**kwargs))
    return rows
